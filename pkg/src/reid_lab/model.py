"""Fully connected encoder with an optional VIB head, plus the linear classifier head.

Weights follow the ``(out, in)`` layout, so a layer computes ``x @ W.T + b``.
Hidden layers are followed by the activation; the last encoder layer is linear
and its output is the ranking feature.
"""
from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np

from .numerics import RngStream
from .vib import dsigma_draw, sigma_from_raw

CHECKPOINT_VERSION = 1
ACTIVATIONS = ("relu", "tanh")
# softplus(SIGMA_INIT_BIAS) == 1, so a fresh VIB head starts at the prior's scale
SIGMA_INIT_BIAS = float(np.log(np.expm1(1.0)))


@dataclass
class EncoderModel:
    sizes: list[int]
    activation: str
    weights: list[np.ndarray]
    biases: list[np.ndarray]
    mu_weight: Optional[np.ndarray] = None
    mu_bias: Optional[np.ndarray] = None
    sigma_weight: Optional[np.ndarray] = None
    sigma_bias: Optional[np.ndarray] = None

    @property
    def input_dim(self) -> int:
        return self.sizes[0]

    @property
    def feature_dim(self) -> int:
        return self.sizes[-1]

    @property
    def has_vib(self) -> bool:
        return self.mu_weight is not None

    @property
    def latent_dim(self) -> Optional[int]:
        return None if self.mu_weight is None else self.mu_weight.shape[0]

    @property
    def embedding_dim(self) -> int:
        """Width of the representation fed to the classifier."""
        return self.latent_dim if self.has_vib else self.feature_dim

    def parameters(self) -> dict[str, np.ndarray]:
        params = {}
        for i, (W, b) in enumerate(zip(self.weights, self.biases)):
            params[f"enc.W{i}"] = W
            params[f"enc.b{i}"] = b
        if self.has_vib:
            params["vib.mu_W"] = self.mu_weight
            params["vib.mu_b"] = self.mu_bias
            params["vib.sigma_W"] = self.sigma_weight
            params["vib.sigma_b"] = self.sigma_bias
        return params


@dataclass
class ClassifierHead:
    weight: np.ndarray
    bias: np.ndarray

    @property
    def num_classes(self) -> int:
        return self.weight.shape[0]

    def parameters(self) -> dict[str, np.ndarray]:
        return {"head.W": self.weight, "head.b": self.bias}

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return x @ self.weight.T + self.bias


@dataclass
class ForwardCache:
    inputs: list[np.ndarray] = field(default_factory=list)
    preacts: list[np.ndarray] = field(default_factory=list)
    squeeze: bool = False


def _uniform_fan_in(rng: RngStream, fan_out: int, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_out, fan_in))


def init_model(sizes, seed: int, activation: str = "relu", latent_dim: Optional[int] = None) -> EncoderModel:
    sizes = [int(s) for s in sizes]
    if len(sizes) < 2:
        raise ValueError("layer spec needs at least an input and an output size")
    if any(s <= 0 for s in sizes):
        raise ValueError(f"layer sizes must be positive, got {sizes}")
    if activation not in ACTIVATIONS:
        raise ValueError(f"activation must be one of {ACTIVATIONS}")
    rng = RngStream(seed).substream("init")
    weights, biases = [], []
    for i, (n_in, n_out) in enumerate(zip(sizes[:-1], sizes[1:])):
        weights.append(_uniform_fan_in(rng.substream(f"enc{i}"), n_out, n_in))
        biases.append(np.zeros(n_out))
    model = EncoderModel(sizes, activation, weights, biases)
    if latent_dim is not None:
        if latent_dim <= 0:
            raise ValueError("latent_dim must be positive")
        model.mu_weight = _uniform_fan_in(rng.substream("vib_mu"), latent_dim, sizes[-1])
        model.mu_bias = np.zeros(latent_dim)
        model.sigma_weight = _uniform_fan_in(rng.substream("vib_sigma"), latent_dim, sizes[-1])
        model.sigma_bias = np.full(latent_dim, SIGMA_INIT_BIAS)
    return model


def init_head(in_dim: int, num_classes: int, seed: int) -> ClassifierHead:
    if in_dim <= 0 or num_classes < 2:
        raise ValueError("head needs in_dim > 0 and at least 2 classes")
    rng = RngStream(seed).substream("init").substream("head")
    return ClassifierHead(_uniform_fan_in(rng, num_classes, in_dim), np.zeros(num_classes))


def _act(name: str, x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0) if name == "relu" else np.tanh(x)


def _act_grad(name: str, preact: np.ndarray, upstream: np.ndarray) -> np.ndarray:
    if name == "relu":
        return upstream * (preact > 0)
    t = np.tanh(preact)
    return upstream * (1.0 - t * t)


def forward(model: EncoderModel, x) -> tuple[np.ndarray, ForwardCache]:
    """Encoder feature for one input vector or a batch of rows."""
    h = np.asarray(x, dtype=np.float64)
    squeeze = h.ndim == 1
    if squeeze:
        h = h[None, :]
    if h.ndim != 2 or h.shape[1] != model.input_dim:
        raise ValueError(f"input shape {np.shape(x)} does not match encoder input dim {model.input_dim}")
    cache = ForwardCache(squeeze=squeeze)
    last = len(model.weights) - 1
    for i, (W, b) in enumerate(zip(model.weights, model.biases)):
        cache.inputs.append(h)
        a = h @ W.T + b
        cache.preacts.append(a)
        h = a if i == last else _act(model.activation, a)
    return (h[0] if squeeze else h), cache


def backward(model: EncoderModel, cache: ForwardCache, grad_feature) -> dict[str, np.ndarray]:
    """Parameter gradients of the encoder given d loss / d feature."""
    g = np.asarray(grad_feature, dtype=np.float64)
    if cache.squeeze:
        g = g[None, :]
    grads = {}
    last = len(model.weights) - 1
    for i in range(last, -1, -1):
        if i != last:
            g = _act_grad(model.activation, cache.preacts[i], g)
        grads[f"enc.W{i}"] = g.T @ cache.inputs[i]
        grads[f"enc.b{i}"] = g.sum(axis=0)
        if i > 0:
            g = g @ model.weights[i]
    return grads


def latent_params(model: EncoderModel, feature: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """(mu, raw_sigma, sigma) of the VIB head."""
    if not model.has_vib:
        raise ValueError("model has no VIB head")
    mu = feature @ model.mu_weight.T + model.mu_bias
    raw = feature @ model.sigma_weight.T + model.sigma_bias
    return mu, raw, sigma_from_raw(raw)


def latent_backward(model: EncoderModel, feature, raw, grad_mu, grad_sigma):
    """Gradients of the VIB head parameters and d loss / d feature."""
    grad_raw = grad_sigma * dsigma_draw(raw)
    grads = {
        "vib.mu_W": grad_mu.T @ feature,
        "vib.mu_b": grad_mu.sum(axis=0),
        "vib.sigma_W": grad_raw.T @ feature,
        "vib.sigma_b": grad_raw.sum(axis=0),
    }
    grad_feature = grad_mu @ model.mu_weight + grad_raw @ model.sigma_weight
    return grads, grad_feature


def save_checkpoint(path, model: EncoderModel, head: ClassifierHead, optimizer=None, meta: Optional[dict] = None) -> None:
    """Write layer specs, parameters and optimizer moments to an ``.npz`` file."""
    header = {
        "version": CHECKPOINT_VERSION,
        "sizes": model.sizes,
        "activation": model.activation,
        "latent_dim": model.latent_dim,
        "num_classes": head.num_classes,
        "meta": meta or {},
    }
    arrays = {"header": np.frombuffer(json.dumps(header, sort_keys=True).encode(), dtype=np.uint8)}
    for name, value in {**model.parameters(), **head.parameters()}.items():
        arrays[f"param/{name}"] = value
    if optimizer is not None:
        arrays["opt/constants"] = np.array([optimizer.beta1, optimizer.beta2, optimizer.eps])
        for name, t in optimizer.steps.items():
            arrays[f"opt/t/{name}"] = np.array(t, dtype=np.int64)
            arrays[f"opt/m/{name}"] = optimizer.m[name]
            arrays[f"opt/v/{name}"] = optimizer.v[name]
            arrays[f"opt/vhat/{name}"] = optimizer.vhat[name]
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)


def load_checkpoint(path):
    """Inverse of :func:`save_checkpoint`; returns ``(model, head, optimizer_or_None, meta)``."""
    from .trainer import OptimizerState

    with np.load(path, allow_pickle=False) as data:
        header = json.loads(bytes(data["header"]).decode())
        if header.get("version") != CHECKPOINT_VERSION:
            raise ValueError(f"unsupported checkpoint version {header.get('version')}")
        p = {k[len("param/"):]: data[k].copy() for k in data.files if k.startswith("param/")}
        n_layers = len(header["sizes"]) - 1
        model = EncoderModel(
            sizes=list(header["sizes"]),
            activation=header["activation"],
            weights=[p[f"enc.W{i}"] for i in range(n_layers)],
            biases=[p[f"enc.b{i}"] for i in range(n_layers)],
        )
        if header["latent_dim"] is not None:
            model.mu_weight, model.mu_bias = p["vib.mu_W"], p["vib.mu_b"]
            model.sigma_weight, model.sigma_bias = p["vib.sigma_W"], p["vib.sigma_b"]
        head = ClassifierHead(p["head.W"], p["head.b"])
        optimizer = None
        if "opt/constants" in data.files:
            b1, b2, eps = (float(c) for c in data["opt/constants"])
            optimizer = OptimizerState(beta1=b1, beta2=b2, eps=eps)
            for key in data.files:
                if key.startswith("opt/t/"):
                    name = key[len("opt/t/"):]
                    optimizer.steps[name] = int(data[key])
                    optimizer.m[name] = data[f"opt/m/{name}"].copy()
                    optimizer.v[name] = data[f"opt/v/{name}"].copy()
                    optimizer.vhat[name] = data[f"opt/vhat/{name}"].copy()
    return model, head, optimizer, header["meta"]
