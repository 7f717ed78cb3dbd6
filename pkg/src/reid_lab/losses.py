"""Cross-entropy regularised by a KL term: plain, label smoothing, confidence penalty.

All losses accept a single logit vector of shape ``(C,)`` with an integer target,
or a batch ``(N, C)`` with an integer array of targets. Batches are reduced by
the arithmetic mean, so ``grad_logits`` of a batch already carries the ``1/N``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .numerics import log_softmax

VARIANTS = ("plain_xent", "label_smoothing", "confidence_penalty", "vib")

_ALIASES = {
    "xent": "plain_xent",
    "ce": "plain_xent",
    "cross_entropy": "plain_xent",
    "plain_xent": "plain_xent",
    "ls": "label_smoothing",
    "label_smoothing": "label_smoothing",
    "cp": "confidence_penalty",
    "confidence_penalty": "confidence_penalty",
    "vib": "vib",
}

DEFAULT_LS_BETA = 0.1
# label smoothing has no published beta; CP and VIB use the tuned values
DEFAULT_BETAS = {"plain_xent": 0.0, "label_smoothing": DEFAULT_LS_BETA, "confidence_penalty": 0.085, "vib": 0.01}


def canonical_variant(name: str) -> str:
    try:
        return _ALIASES[name.lower()]
    except KeyError:
        raise ValueError(f"unknown loss variant {name!r}; expected one of {sorted(_ALIASES)}") from None


@dataclass(frozen=True)
class LossConfig:
    """One term of a composed loss.

    ``alpha`` scales the cross-entropy, ``beta`` the term's own penalty. For the
    label-smoothing term ``beta`` is the smoothing mass and must stay below 1.
    """

    variant: str
    alpha: float = 1.0
    beta: float = 0.0
    num_classes: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "variant", canonical_variant(self.variant))
        if not self.alpha >= 0:
            raise ValueError(f"alpha must be >= 0, got {self.alpha}")
        if not self.beta >= 0:
            raise ValueError(f"beta must be >= 0, got {self.beta}")
        if self.variant == "label_smoothing" and not self.beta < 1:
            raise ValueError(f"label-smoothing beta must be < 1, got {self.beta}")
        if self.num_classes is not None and self.num_classes < 2:
            raise ValueError("num_classes must be >= 2")


def parse_variant(spec: str, alpha: float = 1.0, betas: Optional[dict] = None) -> list[LossConfig]:
    """``"vib+ls"`` -> one :class:`LossConfig` per part, with default betas unless overridden."""
    parts = [canonical_variant(p.strip()) for p in spec.split("+") if p.strip()]
    if not parts:
        raise ValueError(f"empty loss variant spec {spec!r}")
    overrides = {canonical_variant(k): v for k, v in (betas or {}).items()}
    return [LossConfig(p, alpha=alpha, beta=overrides.get(p, DEFAULT_BETAS[p])) for p in parts]


@dataclass
class LossOutput:
    loss: float
    grad_logits: np.ndarray
    grad_latent_mu: Optional[np.ndarray] = None
    grad_latent_sigma: Optional[np.ndarray] = None
    entropy: float = field(default=float("nan"))


def _prepare(logits, target):
    z = np.asarray(logits, dtype=np.float64)
    if z.ndim not in (1, 2):
        raise ValueError(f"logits must be 1-D or 2-D, got shape {z.shape}")
    C = z.shape[-1]
    t = np.asarray(target)
    if z.ndim == 1:
        if t.ndim != 0:
            raise ValueError("a single logit vector needs a scalar target")
    elif t.shape != (z.shape[0],):
        raise ValueError(f"targets shape {t.shape} does not match batch size {z.shape[0]}")
    if not np.issubdtype(t.dtype, np.integer):
        raise TypeError("targets must be integer class indices")
    if np.any(t < 0) or np.any(t >= C):
        raise ValueError(f"target out of range [0, {C})")
    return z, t


def _onehot(t: np.ndarray, C: int) -> np.ndarray:
    return np.eye(C)[t]


def _batch_mean(values: np.ndarray) -> float:
    return float(np.mean(values))


def _batch_size(z: np.ndarray) -> int:
    return 1 if z.ndim == 1 else z.shape[0]


def _soft_xent(z: np.ndarray, q: np.ndarray, alpha: float) -> LossOutput:
    logp = log_softmax(z)
    p = np.exp(logp)
    n = _batch_size(z)
    loss = alpha * _batch_mean(-(q * logp).sum(axis=-1))
    grad = alpha * (p - q) / n
    return LossOutput(loss, grad, entropy=_batch_mean(-(p * logp).sum(axis=-1)))


def cross_entropy(logits, target, alpha: float = 1.0) -> LossOutput:
    z, t = _prepare(logits, target)
    return _soft_xent(z, _onehot(t, z.shape[-1]), alpha)


def smooth_labels(target, num_classes: int, beta: float) -> np.ndarray:
    """Mix the one-hot target with the uniform distribution.

    The true class receives ``1 - (C-1)*beta/C`` and every other class ``beta/C``.
    """
    if not 0 <= beta < 1:
        raise ValueError(f"beta must lie in [0, 1), got {beta}")
    if num_classes < 2:
        raise ValueError("num_classes must be >= 2")
    t = np.asarray(target)
    if np.any(t < 0) or np.any(t >= num_classes):
        raise ValueError(f"target out of range [0, {num_classes})")
    q = np.full(t.shape + (num_classes,), beta / num_classes)
    np.put_along_axis(q, t[..., None], 1.0 - (num_classes - 1) * beta / num_classes, axis=-1)
    return q


def label_smoothing_loss(logits, target, alpha: float = 1.0, beta: float = DEFAULT_LS_BETA) -> LossOutput:
    z, t = _prepare(logits, target)
    return _soft_xent(z, smooth_labels(t, z.shape[-1], beta), alpha)


def _check_distribution(p: np.ndarray, name: str, tol: float = 1e-9) -> np.ndarray:
    p = np.asarray(p, dtype=np.float64)
    if p.ndim == 0 or p.shape[-1] == 0:
        raise ValueError(f"{name} must be a non-empty probability vector")
    if np.any(p < 0) or not np.all(np.isfinite(p)):
        raise ValueError(f"{name} has negative or non-finite entries")
    if np.any(np.abs(p.sum(axis=-1) - 1.0) > tol):
        raise ValueError(f"{name} does not sum to 1")
    return p


def entropy(probs) -> float | np.ndarray:
    """Shannon entropy in nats over the last axis, with 0*ln(0) = 0."""
    p = _check_distribution(probs, "probs")
    safe = np.where(p > 0, p, 1.0)
    h = -(p * np.log(safe)).sum(axis=-1)
    return float(h) if h.ndim == 0 else h


def kl_categorical(p, q) -> float | np.ndarray:
    """KL[p || q]. A zero in ``q`` where ``p`` has mass is rejected."""
    p = _check_distribution(p, "p")
    q = _check_distribution(q, "q")
    if p.shape != q.shape:
        raise ValueError(f"shape mismatch {p.shape} vs {q.shape}")
    support = p > 0
    if np.any(support & (q <= 0)):
        raise ValueError("q has zero probability where p is positive (KL is infinite)")
    ratio = np.where(support, p / np.where(support, q, 1.0), 1.0)
    kl = (p * np.log(ratio)).sum(axis=-1)
    return float(kl) if kl.ndim == 0 else kl


def _entropy_penalty(z: np.ndarray, beta: float) -> tuple[float, np.ndarray]:
    """Value and logit-gradient of ``-beta * H(softmax(z))``, batch-mean reduced."""
    logp = log_softmax(z)
    p = np.exp(logp)
    h = -(p * logp).sum(axis=-1, keepdims=True)
    n = _batch_size(z)
    value = -beta * _batch_mean(h)
    grad = beta * p * (logp + h) / n
    return value, grad


def confidence_penalty_loss(logits, target, alpha: float = 1.0, beta: float = 0.085) -> LossOutput:
    z, t = _prepare(logits, target)
    out = _soft_xent(z, _onehot(t, z.shape[-1]), alpha)
    value, grad = _entropy_penalty(z, beta)
    out.loss += value
    out.grad_logits = out.grad_logits + grad
    return out


def compose_losses(
    terms: Sequence[LossConfig],
    logits,
    target,
    latent=None,
    sample=None,
    head_weight=None,
) -> LossOutput:
    """Sum the enabled terms with a single shared cross-entropy.

    The cross-entropy ``alpha * H(q, p)`` appears once, against the smoothed target
    when a label-smoothing term is present. Confidence-penalty and VIB terms each
    add their own ``beta``-scaled penalty. ``latent``/``sample``/``head_weight`` are
    only used by a VIB term (see :func:`reid_lab.vib.vib_loss`).
    """
    if not terms:
        raise ValueError("at least one loss term is required")
    variants = [term.variant for term in terms]
    for v in set(variants):
        if variants.count(v) > 1:
            raise ValueError(f"loss term {v!r} given more than once")
    alphas = {term.alpha for term in terms}
    if len(alphas) > 1:
        raise ValueError(f"composed terms must share one alpha, got {sorted(alphas)}")
    alpha = alphas.pop()
    by_variant = {term.variant: term for term in terms}
    if "vib" in by_variant and latent is None:
        raise ValueError("a VIB term requires the latent Gaussian")

    z, t = _prepare(logits, target)
    C = z.shape[-1]
    for term in terms:
        if term.num_classes is not None and term.num_classes != C:
            raise ValueError(f"term expects {term.num_classes} classes, logits have {C}")
    if "label_smoothing" in by_variant:
        q = smooth_labels(t, C, by_variant["label_smoothing"].beta)
    else:
        q = _onehot(t, C)
    out = _soft_xent(z, q, alpha)
    if "confidence_penalty" in by_variant:
        value, grad = _entropy_penalty(z, by_variant["confidence_penalty"].beta)
        out.loss += value
        out.grad_logits = out.grad_logits + grad
    if "vib" in by_variant:
        from .vib import attach_latent_terms

        attach_latent_terms(out, latent, by_variant["vib"].beta, sample, head_weight)
    return out
