"""Finite-difference checks for every loss variant, their combinations and a small end-to-end model."""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .losses import compose_losses, parse_variant
from .model import init_head, init_model
from .numerics import RngStream, finite_diff_grad, relative_error
from .trainer import loss_and_grads
from .vib import LatentGaussian, LatentSample

LOSS_TOL = 1e-6
END_TO_END_TOL = 1e-5

# single variants plus every penalty combination the ablation covers
CASES = ("xent", "ls", "cp", "vib", "ls+cp", "vib+ls", "vib+cp", "vib+ls+cp")


@dataclass
class GradCheckResult:
    name: str
    scope: str
    max_rel_error: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return bool(self.max_rel_error <= self.tolerance)


def _check(f: Callable[[np.ndarray], float], x: np.ndarray, analytic: np.ndarray, sign: float) -> float:
    numeric = finite_diff_grad(f, x)
    return relative_error(sign * analytic, numeric)


def check_loss_case(
    case: str,
    seed: int = 0,
    batch: int = 4,
    num_classes: int = 5,
    latent_dim: int = 3,
    inject_fault: bool = False,
) -> float:
    """Largest relative error over the logit (and, with VIB, latent) gradients."""
    rng = RngStream(seed).substream("gradcheck/loss/" + case)
    target = rng.integers(0, num_classes, size=batch)
    alpha = float(rng.uniform(0.5, 2.0))
    terms = parse_variant(case, alpha)
    sign = -1.0 if inject_fault else 1.0

    if not any(t.variant == "vib" for t in terms):
        z0 = 3.0 * rng.normal((batch, num_classes))
        out = compose_losses(terms, z0, target)
        return _check(lambda z: compose_losses(terms, z, target).loss, z0, out.grad_logits, sign)

    # the logits come from z = mu + sigma * eps through a fixed linear head
    W = rng.normal((num_classes, latent_dim))
    b = rng.normal(num_classes)
    eps = rng.normal((batch, latent_dim))
    mu0 = rng.normal((batch, latent_dim))
    sigma0 = rng.uniform(0.3, 2.0, size=(batch, latent_dim))

    def run(mu, sigma):
        g = LatentGaussian(mu, sigma)
        z = mu + sigma * eps
        return compose_losses(terms, z @ W.T + b, target, latent=g, sample=LatentSample(z, eps), head_weight=W)

    out = run(mu0, sigma0)
    err_mu = _check(lambda m: run(m, sigma0).loss, mu0, out.grad_latent_mu, sign)
    err_sigma = _check(lambda s: run(mu0, s).loss, sigma0, out.grad_latent_sigma, sign)
    z0 = (mu0 + sigma0 * eps) @ W.T + b

    def logit_loss(z):
        return compose_losses(terms, z, target, latent=LatentGaussian(mu0, sigma0)).loss

    err_logits = _check(logit_loss, z0, out.grad_logits, sign)
    return max(err_mu, err_sigma, err_logits)


def check_end_to_end_case(
    case: str,
    seed: int = 0,
    sizes: Sequence[int] = (5, 6, 4),
    num_classes: int = 3,
    batch: int = 6,
    activation: str = "tanh",
    inject_fault: bool = False,
) -> float:
    """Every parameter gradient of a 2-layer encoder plus head against finite differences."""
    rng = RngStream(seed).substream("gradcheck/e2e/" + case)
    terms = parse_variant(case)
    latent = 3 if any(t.variant == "vib" for t in terms) else None
    model = init_model(list(sizes), seed, activation, latent)
    head = init_head(model.embedding_dim, num_classes, seed)
    X = rng.normal((batch, sizes[0]))
    y = np.arange(batch) % num_classes
    noise = rng.normal((batch, latent)) if latent else None
    result = loss_and_grads(model, head, X, y, terms, noise=noise)
    sign = -1.0 if inject_fault else 1.0
    params = {**model.parameters(), **head.parameters()}
    worst = 0.0
    for name, param in params.items():
        original = param.copy()

        def f(p, param=param):
            param[...] = p
            return loss_and_grads(model, head, X, y, terms, noise=noise).output.loss

        try:
            worst = max(worst, _check(f, original.copy(), result.grads[name], sign))
        finally:
            param[...] = original
    return worst


def selected(name: str, scope: str, only: Optional[Sequence[str]]) -> bool:
    if not only:
        return True
    parts = set(name.split("+"))
    return any(sel == scope or sel == name or sel in parts or sel == f"{scope}/{name}" for sel in only)


def run_gradcheck(
    only: Optional[Sequence[str]] = None,
    seed: int = 0,
    inject_fault: bool = False,
) -> list[GradCheckResult]:
    """Run the loss-level and end-to-end suites.

    ``only`` filters by variant (``vib`` keeps every case containing VIB), by
    exact case name (``ls+cp``) or by scope (``loss``, ``e2e``).
    """
    results = []
    for name in CASES:
        if selected(name, "loss", only):
            err = check_loss_case(name, seed, inject_fault=inject_fault)
            results.append(GradCheckResult(name, "loss", err, LOSS_TOL))
    for name in CASES:
        if selected(name, "e2e", only):
            err = check_end_to_end_case(name, seed, inject_fault=inject_fault)
            results.append(GradCheckResult(name, "e2e", err, END_TO_END_TOL))
    return results


def format_table(results: Sequence[GradCheckResult]) -> str:
    lines = [f"{'scope':<6} {'case':<11} {'max rel err':>12} {'tol':>8}  status"]
    for r in results:
        status = "PASS" if r.passed else "FAIL"
        lines.append(f"{r.scope:<6} {r.name:<11} {r.max_rel_error:12.3e} {r.tolerance:8.0e}  {status}")
    return "\n".join(lines)
