"""Variational information bottleneck head: diagonal Gaussian posterior, standard-normal prior."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .losses import LossOutput, cross_entropy
from .numerics import RngStream, sigmoid, softplus

SIGMA_FLOOR = 1e-6


@dataclass
class LatentGaussian:
    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        self.mu = np.asarray(self.mu, dtype=np.float64)
        self.sigma = np.asarray(self.sigma, dtype=np.float64)
        if self.mu.shape != self.sigma.shape:
            raise ValueError(f"mu shape {self.mu.shape} != sigma shape {self.sigma.shape}")
        if self.mu.ndim not in (1, 2) or self.mu.shape[-1] == 0:
            raise ValueError("latent must be a non-empty vector or batch of vectors")
        if not np.all(np.isfinite(self.mu)):
            raise ValueError("mu has non-finite entries")
        if not (np.all(np.isfinite(self.sigma)) and np.all(self.sigma > 0)):
            raise ValueError("sigma entries must be finite and strictly positive")

    @property
    def dim(self) -> int:
        return self.mu.shape[-1]


@dataclass
class LatentSample:
    z: np.ndarray
    noise: np.ndarray


def sigma_from_raw(raw) -> np.ndarray:
    """Map an unconstrained head output to a standard deviation: softplus + floor."""
    return softplus(raw) + SIGMA_FLOOR


def dsigma_draw(raw) -> np.ndarray:
    return sigmoid(raw)


def reparameterize(g: LatentGaussian, rng: Optional[RngStream], noise=None) -> LatentSample:
    """Draw ``z = mu + sigma * eps`` with ``eps ~ N(0, I)``.

    Passing ``noise`` freezes eps (used for gradient checks); ``rng`` may then be None.
    """
    if noise is None:
        if rng is None:
            raise ValueError("either rng or noise must be provided")
        eps = rng.normal(g.mu.shape)
    else:
        eps = np.asarray(noise, dtype=np.float64)
        if eps.shape != g.mu.shape:
            raise ValueError(f"noise shape {eps.shape} != latent shape {g.mu.shape}")
    return LatentSample(z=g.mu + g.sigma * eps, noise=eps)


def kl_gaussian_standard(g: LatentGaussian) -> tuple[float, np.ndarray, np.ndarray]:
    """KL[N(mu, diag sigma^2) || N(0, I)] with its gradients.

    For a batch the KL is summed over dimensions and averaged over rows, and the
    gradients carry the matching ``1/N``.
    """
    mu, sigma = g.mu, g.sigma
    per_row = 0.5 * (mu**2 + sigma**2 - 1.0 - 2.0 * np.log(sigma)).sum(axis=-1)
    n = 1 if mu.ndim == 1 else mu.shape[0]
    kl = float(np.mean(per_row))
    return kl, mu / n, (sigma - 1.0 / sigma) / n


def attach_latent_terms(
    out: LossOutput,
    g: LatentGaussian,
    beta: float,
    sample: Optional[LatentSample] = None,
    head_weight=None,
) -> LossOutput:
    """Add ``beta * KL[w, r]`` to ``out`` and fill the latent gradients.

    With ``sample`` and ``head_weight`` (the ``(C, D)`` classifier matrix, i.e.
    d logits / d z) the cross-entropy gradient is chained through
    ``z = mu + sigma * eps`` as well.
    """
    kl, g_mu, g_sigma = kl_gaussian_standard(g)
    out.loss += beta * kl
    grad_mu = beta * g_mu
    grad_sigma = beta * g_sigma
    if (sample is None) != (head_weight is None):
        raise ValueError("sample and head_weight must be given together")
    if sample is not None:
        W = np.asarray(head_weight, dtype=np.float64)
        if W.ndim != 2 or W.shape[1] != g.dim:
            raise ValueError(f"head weight shape {W.shape} does not match latent dim {g.dim}")
        if sample.z.shape != g.mu.shape:
            raise ValueError("latent sample shape does not match the Gaussian")
        if out.grad_logits.shape[-1] != W.shape[0]:
            raise ValueError("head weight rows do not match number of classes")
        dz = out.grad_logits @ W
        grad_mu = grad_mu + dz
        grad_sigma = grad_sigma + dz * sample.noise
    out.grad_latent_mu = grad_mu
    out.grad_latent_sigma = grad_sigma
    return out


def vib_loss(
    logits,
    target,
    g: LatentGaussian,
    alpha: float = 1.0,
    beta: float = 0.01,
    sample: Optional[LatentSample] = None,
    head_weight=None,
) -> LossOutput:
    """``alpha * H(q, p~) + beta * KL[w, r]`` where the logits come from a sampled z."""
    z = np.asarray(logits)
    if z.ndim == 2 and g.mu.ndim == 2 and z.shape[0] != g.mu.shape[0]:
        raise ValueError("batch size of logits and latent differ")
    out = cross_entropy(logits, target, alpha)
    return attach_latent_terms(out, g, beta, sample, head_weight)
