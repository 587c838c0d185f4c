"""Classical and differentiable resampling, plus the ESS trigger.

Weights enter in log space.  Ancestor indices never carry gradient; the
differentiable schemes let gradient through the returned log-weights (soft,
weight-preserving) or the particle positions (optimal transport).
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch

ESS_ROUNDING = 1e-12
SCHEMES = ("none", "multinomial", "weight_preserving", "soft", "ot")


def normalise(log_w: torch.Tensor) -> torch.Tensor:
    """Normalised weights from unnormalised log-weights (max-shifted)."""
    return torch.softmax(log_w, dim=-1)


def compute_ess(weights: torch.Tensor) -> float:
    """1 / sum(W^2) for normalised weights."""
    w = weights.detach()
    total = float(w.sum())
    if not total > 0:
        raise ValueError("weights must have positive total mass")
    return 1.0 / float((w * w).sum())


def ess_from_log(log_w: torch.Tensor) -> float:
    return compute_ess(normalise(log_w.detach()))


def multinomial_resample(weights: torch.Tensor, n: int, generator: torch.Generator) -> torch.Tensor:
    """Inverse-CDF draw of ``n`` ancestor indices."""
    w = weights.detach()
    cdf = torch.cumsum(w / w.sum(), dim=0)
    u = torch.rand(n, generator=generator)
    idx = torch.searchsorted(cdf, u, right=True)
    return idx.clamp_(max=w.numel() - 1)


def weight_preserving_resample(log_w: torch.Tensor, generator: torch.Generator):
    """Multinomial ancestors; every new weight is the mean of the old ones (on the tape)."""
    n = log_w.shape[0]
    ancestors = multinomial_resample(normalise(log_w), n, generator)
    new_log_w = (torch.logsumexp(log_w, 0) - math.log(n)).expand(n)
    return ancestors, new_log_w


def soft_resample(log_w: torch.Tensor, lam: float, generator: torch.Generator):
    """Ancestors from lam*W + (1-lam)/N; corrected weights W_a / W~_a.

    Returns ``(ancestors, corrected log-weights)``.
    """
    if not 0 < lam <= 1:
        raise ValueError(f"soft resampling needs lambda in (0, 1], got {lam}")
    n = log_w.shape[0]
    log_W = torch.log_softmax(log_w, 0)
    mix = lam * torch.exp(log_W) + (1 - lam) / n
    ancestors = multinomial_resample(mix, n, generator)
    corrected = log_W[ancestors] - torch.log(mix[ancestors])
    return ancestors, corrected


@dataclass
class TransportPlan:
    plan: torch.Tensor
    epsilon: float
    n_iter: int
    residual: float

    def converged(self, tol: float) -> bool:
        return self.residual < tol


def sinkhorn_plan(
    particles: torch.Tensor,
    log_w: torch.Tensor,
    epsilon: float = 0.1,
    max_iter: int = 500,
    tol: float = 1e-8,
) -> TransportPlan:
    """Entropy-regularised coupling between uniform source and weighted target.

    Rows sum to 1/N, columns to W.  The squared-Euclidean cost is divided by
    its mean over all pairs so ``epsilon`` is dimensionless.  Updates run in
    the log domain and stay on the tape.
    """
    if epsilon <= 0:
        raise ValueError("epsilon must be positive")
    n = particles.shape[0]
    log_b = torch.log_softmax(log_w, 0)
    log_a = torch.full((n,), -math.log(n))
    if n == 1:
        return TransportPlan(torch.ones(1, 1) + 0 * log_b.reshape(1, 1), epsilon, 0, 0.0)
    diff = particles[:, None, :] - particles[None, :, :]
    cost = (diff * diff).sum(-1)
    scale = cost.mean()
    cost = cost / torch.clamp(scale, min=1e-12)
    f = torch.zeros(n)
    g = torch.zeros(n)
    residual = math.inf
    it = 0
    for it in range(1, max_iter + 1):
        f = -epsilon * torch.logsumexp(log_b[None, :] + (g[None, :] - cost) / epsilon, dim=1)
        g = -epsilon * torch.logsumexp(log_a[:, None] + (f[:, None] - cost) / epsilon, dim=0)
        with torch.no_grad():
            log_p = log_a[:, None] + log_b[None, :] + (f[:, None] + g[None, :] - cost) / epsilon
            p = torch.exp(log_p)
            residual = max(
                float((p.sum(1) - 1.0 / n).abs().max()),
                float((p.sum(0) - torch.exp(log_b)).abs().max()),
            )
        if residual < tol:
            break
    plan = torch.exp(log_a[:, None] + log_b[None, :] + (f[:, None] + g[None, :] - cost) / epsilon)
    return TransportPlan(plan, epsilon, it, residual)


def ot_resample(particles: torch.Tensor, log_w: torch.Tensor, epsilon: float = 0.1,
                max_iter: int = 500, tol: float = 1e-8):
    """Barycentric projection N * P X; returns ``(new particles, plan)``."""
    tp = sinkhorn_plan(particles, log_w, epsilon, max_iter, tol)
    n = particles.shape[0]
    return n * tp.plan @ particles, tp


@dataclass
class ResampleResult:
    particles: torch.Tensor
    log_w: torch.Tensor
    ancestors: torch.Tensor
    resampled: bool
    plan: TransportPlan | None = None


@dataclass
class Resampler:
    """Scheme plus ESS trigger: resample when ESS < ess_min_frac * N (strict)."""

    scheme: str = "multinomial"
    ess_min_frac: float = 0.5
    soft_lambda: float = 0.5
    ot_epsilon: float = 0.1
    ot_max_iter: int = 500
    ot_tol: float = 1e-8

    def __post_init__(self):
        if self.scheme not in SCHEMES:
            raise ValueError(f"unknown resampler {self.scheme!r}; valid: {', '.join(SCHEMES)}")
        if self.scheme == "soft" and not 0 < self.soft_lambda <= 1:
            raise ValueError("soft_lambda must lie in (0, 1]")

    def should_resample(self, log_w: torch.Tensor) -> bool:
        if self.scheme == "none":
            return False
        n = log_w.shape[0]
        # 1/sum(W^2) of exactly uniform weights can round to just under N;
        # only a shortfall beyond rounding counts as "strictly below".
        return ess_from_log(log_w) < self.ess_min_frac * n - ESS_ROUNDING * n

    def __call__(self, particles: torch.Tensor, log_w: torch.Tensor,
                 generator: torch.Generator) -> ResampleResult:
        n = particles.shape[0]
        identity = torch.arange(n)
        if not self.should_resample(log_w):
            return ResampleResult(particles, log_w, identity, False)
        if self.scheme == "multinomial":
            a = multinomial_resample(normalise(log_w), n, generator)
            return ResampleResult(particles[a], torch.zeros(n), a, True)
        if self.scheme == "weight_preserving":
            a, lw = weight_preserving_resample(log_w, generator)
            return ResampleResult(particles[a], lw, a, True)
        if self.scheme == "soft":
            a, lw = soft_resample(log_w, self.soft_lambda, generator)
            return ResampleResult(particles[a], lw, a, True)
        x_new, plan = ot_resample(particles, log_w, self.ot_epsilon, self.ot_max_iter, self.ot_tol)
        return ResampleResult(x_new, torch.zeros(n), identity, True, plan)


def resample_policy(particles, log_w, scheme: str, ess_min: float, generator, **kwargs):
    """Functional form of :class:`Resampler` with an absolute ESS threshold."""
    n = particles.shape[0]
    return Resampler(scheme, ess_min / n, **kwargs)(particles, log_w, generator)
