"""AMSGrad training of the encoder + classifier with explicit backward passes."""
from __future__ import annotations

import csv
import logging
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from . import rank_eval
from .data import AugmentConfig, Dataset, Sample, prepare_inputs
from .losses import LossConfig, LossOutput, compose_losses
from .model import (
    ClassifierHead,
    EncoderModel,
    backward,
    forward,
    init_head,
    init_model,
    latent_backward,
    latent_params,
)
from .numerics import RngStream
from .vib import LatentGaussian, reparameterize

log = logging.getLogger(__name__)


@dataclass
class OptimizerState:
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    steps: dict[str, int] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    vhat: dict[str, np.ndarray] = field(default_factory=dict)

    @property
    def step(self) -> int:
        return max(self.steps.values(), default=0)


def amsgrad_update(param: np.ndarray, grad, state: OptimizerState, lr: float, name: str = "param") -> np.ndarray:
    """One AMSGrad step on ``param`` (updated in place and returned).

    Adam-style bias correction is kept for both moments; the running maximum of
    the second moment replaces it in the denominator.
    """
    grad = np.asarray(grad, dtype=np.float64)
    if grad.shape != param.shape:
        raise ValueError(f"{name}: grad shape {grad.shape} != param shape {param.shape}")
    if name not in state.steps:
        state.steps[name] = 0
        state.m[name] = np.zeros_like(param)
        state.v[name] = np.zeros_like(param)
        state.vhat[name] = np.zeros_like(param)
    t = state.steps[name] = state.steps[name] + 1
    m = state.m[name] = state.beta1 * state.m[name] + (1 - state.beta1) * grad
    v = state.v[name] = state.beta2 * state.v[name] + (1 - state.beta2) * grad * grad
    vhat = state.vhat[name] = np.maximum(state.vhat[name], v)
    m_hat = m / (1 - state.beta1**t)
    denom = np.sqrt(vhat) / np.sqrt(1 - state.beta2**t) + state.eps
    param -= lr * m_hat / denom
    return param


def lr_schedule(epoch: int, base_lr: float, decay_epochs: Sequence[int] = (20, 40), factor: float = 10.0) -> float:
    """Step decay: divide by ``factor`` from each (1-indexed) decay epoch on."""
    if epoch < 1:
        raise ValueError("epochs are 1-indexed")
    n_decays = sum(epoch >= e for e in decay_epochs)
    return base_lr / factor**n_decays


@dataclass
class ModelSpec:
    hidden: tuple[int, ...] = (128,)
    feature_dim: int = 64
    latent_dim: Optional[int] = None
    activation: str = "relu"


@dataclass
class TrainConfig:
    losses: list[LossConfig] = field(default_factory=lambda: [LossConfig("plain_xent")])
    lr: float = 5e-4
    epochs: int = 60
    batch_size: int = 32
    decay_epochs: tuple[int, ...] = (20, 40)
    decay_factor: float = 10.0
    seed: int = 0
    eval_every: int = 0
    vib_samples: int = 1

    def validate(self) -> None:
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if self.epochs < 1:
            raise ValueError("epochs must be >= 1")
        if not self.lr >= 0:
            raise ValueError("lr must be >= 0")
        if self.vib_samples < 1:
            raise ValueError("vib_samples must be >= 1")
        if not self.losses:
            raise ValueError("at least one loss term is required")

    @property
    def uses_vib(self) -> bool:
        return any(t.variant == "vib" for t in self.losses)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    loss: float
    entropy: float
    sigma_mean: float = float("nan")
    mAP: float = float("nan")


@dataclass
class TrainReport:
    records: list[EpochRecord] = field(default_factory=list)
    final: dict[str, float] = field(default_factory=dict)

    COLUMNS = ("epoch", "lr", "loss", "entropy", "sigma_mean", "mAP")

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh, lineterminator="\n")
            writer.writerow(self.COLUMNS)
            for r in self.records:
                writer.writerow([r.epoch] + [repr(float(getattr(r, c))) for c in self.COLUMNS[1:]])

    @classmethod
    def read_csv(cls, path) -> "TrainReport":
        report = cls()
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            if tuple(next(reader)) != cls.COLUMNS:
                raise ValueError(f"{path}: bad report header")
            for row in reader:
                report.records.append(EpochRecord(int(row[0]), *(float(v) for v in row[1:])))
        return report


@dataclass
class StepResult:
    output: LossOutput
    grads: dict[str, np.ndarray]
    sigma_mean: float = float("nan")


def loss_and_grads(
    model: EncoderModel,
    head: ClassifierHead,
    X,
    y,
    terms: Sequence[LossConfig],
    rng: Optional[RngStream] = None,
    noise=None,
) -> StepResult:
    """Forward + full backward pass for one batch; ``noise`` freezes the VIB epsilon."""
    X = np.atleast_2d(np.asarray(X, dtype=np.float64))
    y = np.asarray(y)
    uses_vib = any(t.variant == "vib" for t in terms)
    if uses_vib and not model.has_vib:
        raise ValueError("a VIB loss term needs a model with a VIB head")
    if head.weight.shape[1] != model.embedding_dim:
        raise ValueError("classifier head input does not match the model's embedding dim")

    feature, cache = forward(model, X)
    if not model.has_vib:
        logits = head(feature)
        out = compose_losses(terms, logits, y)
        grads = {"head.W": out.grad_logits.T @ feature, "head.b": out.grad_logits.sum(axis=0)}
        grads.update(backward(model, cache, out.grad_logits @ head.weight))
        return StepResult(out, grads)

    mu, raw, sigma = latent_params(model, feature)
    g = LatentGaussian(mu, sigma)
    sample = reparameterize(g, rng, noise)
    logits = head(sample.z)
    if uses_vib:
        out = compose_losses(terms, logits, y, latent=g, sample=sample, head_weight=head.weight)
    else:
        # VIB architecture trained without the KL term: chain through z only
        out = compose_losses(terms, logits, y)
        dz = out.grad_logits @ head.weight
        out.grad_latent_mu, out.grad_latent_sigma = dz, dz * sample.noise
    grads = {"head.W": out.grad_logits.T @ sample.z, "head.b": out.grad_logits.sum(axis=0)}
    vib_grads, grad_feature = latent_backward(model, feature, raw, out.grad_latent_mu, out.grad_latent_sigma)
    grads.update(vib_grads)
    grads.update(backward(model, cache, grad_feature))
    return StepResult(out, grads, float(sigma.mean()))


def train_step(
    model: EncoderModel,
    head: ClassifierHead,
    batch: tuple[np.ndarray, np.ndarray],
    terms: Sequence[LossConfig],
    state: OptimizerState,
    lr: float,
    rng: Optional[RngStream] = None,
    noise=None,
    vib_samples: int = 1,
) -> StepResult:
    """Backpropagate one batch and apply one AMSGrad update to every parameter."""
    X, y = batch
    if len(y) == 0:
        raise ValueError("empty batch")
    if vib_samples == 1 or not model.has_vib:
        result = loss_and_grads(model, head, X, y, terms, rng, noise)
    else:
        parts = [loss_and_grads(model, head, X, y, terms, rng.substream(f"s{s}")) for s in range(vib_samples)]
        result = parts[0]
        result.output.loss = float(np.mean([p.output.loss for p in parts]))
        result.output.entropy = float(np.mean([p.output.entropy for p in parts]))
        result.grads = {k: sum(p.grads[k] for p in parts) / vib_samples for k in result.grads}
    params = {**model.parameters(), **head.parameters()}
    for name, param in params.items():
        amsgrad_update(param, result.grads[name], state, lr, name)
    return result


def _class_index(samples: Sequence[Sample]) -> tuple[np.ndarray, dict[int, int]]:
    ids = sorted({s.identity for s in samples})
    mapping = {identity: k for k, identity in enumerate(ids)}
    return np.array([mapping[s.identity] for s in samples], dtype=np.int64), mapping


def extract_features(
    model: EncoderModel,
    samples,
    mode: str = "auto",
    aug: Optional[AugmentConfig] = None,
) -> np.ndarray:
    """Ranking features, one row per sample in input order; no noise, no augmentation.

    ``mode`` is ``deterministic`` (encoder output), ``vib_mean`` (posterior mean)
    or ``auto`` (``vib_mean`` when the model has a VIB head).
    """
    if mode == "auto":
        mode = "vib_mean" if model.has_vib else "deterministic"
    if mode not in ("deterministic", "vib_mean"):
        raise ValueError(f"unknown feature mode {mode!r}")
    if mode == "vib_mean" and not model.has_vib:
        raise ValueError("vib_mean features need a model with a VIB head")
    if isinstance(samples, np.ndarray):
        X = np.atleast_2d(samples)
    else:
        X = prepare_inputs(samples, aug or AugmentConfig(), rng=None)
    feature, _ = forward(model, X)
    if mode == "vib_mean":
        mu, _, _ = latent_params(model, feature)
        return mu
    return feature


def evaluate_model(
    model: EncoderModel,
    dataset: Dataset,
    settings: Optional[rank_eval.EvalSettings] = None,
    aug: Optional[AugmentConfig] = None,
) -> rank_eval.EvalReport:
    settings = settings or rank_eval.EvalSettings()
    qf = extract_features(model, dataset.query, aug=aug)
    gf = extract_features(model, dataset.gallery, aug=aug)
    q_ids, q_cams = dataset.labels("query")
    g_ids, g_cams = dataset.labels("gallery")
    mask = rank_eval.protocol_mask(q_ids, q_cams, g_ids, g_cams, settings.use_camera_mask)
    if settings.rerank:
        k1, k2 = rank_eval.clamp_rerank_params(len(g_ids), settings.k1, settings.k2)
        dist = rank_eval.k_reciprocal_rerank(qf, gf, k1, k2, settings.lambda_value)
    else:
        dist = rank_eval.l2_distance_matrix(qf, gf)
    return rank_eval.evaluate(dist, mask, q_ids, g_ids, settings.max_rank, settings=vars(settings))


def build_model(
    input_dim: int,
    num_classes: int,
    spec: ModelSpec,
    seed: int,
    with_vib: bool,
) -> tuple[EncoderModel, ClassifierHead]:
    latent = None
    if with_vib:
        latent = spec.latent_dim if spec.latent_dim is not None else max(1, spec.feature_dim // 2)
    model = init_model([input_dim, *spec.hidden, spec.feature_dim], seed, spec.activation, latent)
    head = init_head(model.embedding_dim, num_classes, seed)
    return model, head


def train(
    dataset: Dataset,
    config: TrainConfig,
    model_spec: Optional[ModelSpec] = None,
    eval_settings: Optional[rank_eval.EvalSettings] = None,
    aug: Optional[AugmentConfig] = None,
) -> tuple[EncoderModel, ClassifierHead, TrainReport]:
    """Full training loop; returns the model, head and a per-epoch report.

    Every random draw (init, shuffling, augmentation, VIB noise) comes from a
    labelled sub-stream of ``config.seed``.
    """
    config.validate()
    model_spec = model_spec or ModelSpec()
    aug = aug or AugmentConfig()
    if not dataset.train:
        raise ValueError("train split is empty")
    y_all, mapping = _class_index(dataset.train)
    if len(mapping) < 2:
        raise ValueError("training needs at least two identities")
    for term in config.losses:
        if term.num_classes is not None and term.num_classes != len(mapping):
            raise ValueError(f"loss expects {term.num_classes} classes, train split has {len(mapping)}")
    is_image = dataset.train[0].is_image
    if any(s.is_image != is_image for s in dataset.train):
        raise ValueError("train split mixes images and feature vectors")
    if not is_image:
        dims = {s.payload.shape for s in dataset.train}
        if len(dims) != 1:
            raise ValueError(f"train feature vectors have inconsistent shapes {sorted(dims)}")
        X_all = prepare_inputs(dataset.train, aug)
        input_dim = X_all.shape[1]
    else:
        input_dim = 3 * aug.image_size[0] * aug.image_size[1]
    can_eval = bool(dataset.query) and bool(dataset.gallery)

    rng = RngStream(config.seed)
    model, head = build_model(input_dim, len(mapping), model_spec, config.seed, config.uses_vib)
    state = OptimizerState()
    report = TrainReport()
    n = len(dataset.train)
    for epoch in range(1, config.epochs + 1):
        lr = lr_schedule(epoch, config.lr, config.decay_epochs, config.decay_factor)
        order = rng.substream(f"shuffle/{epoch}").permutation(n)
        tot_loss = tot_entropy = tot_sigma = 0.0
        for b, start in enumerate(range(0, n, config.batch_size)):
            idx = order[start:start + config.batch_size]
            if is_image:
                X = prepare_inputs([dataset.train[i] for i in idx], aug, rng.substream(f"aug/{epoch}/{b}"))
            else:
                X = X_all[idx]
            result = train_step(
                model, head, (X, y_all[idx]), config.losses, state, lr,
                rng=rng.substream(f"noise/{epoch}/{b}"), vib_samples=config.vib_samples,
            )
            tot_loss += result.output.loss * len(idx)
            tot_entropy += result.output.entropy * len(idx)
            tot_sigma += result.sigma_mean * len(idx)
        record = EpochRecord(epoch, lr, tot_loss / n, tot_entropy / n, tot_sigma / n)
        if can_eval and config.eval_every and epoch % config.eval_every == 0:
            record.mAP = evaluate_model(model, dataset, eval_settings, aug).mAP
        report.records.append(record)
        log.debug("epoch %d lr=%.2e loss=%.4f entropy=%.4f", epoch, lr, record.loss, record.entropy)

    report.final = {"loss": report.records[-1].loss, "entropy": report.records[-1].entropy}
    if can_eval:
        ev = evaluate_model(model, dataset, eval_settings, aug)
        report.final.update({"mAP": ev.mAP, "rank1": ev.rank(1)})
    return model, head, report
