"""The particle filter loop.

One generic step covers the bootstrap/guided filter, PFNet (odometry motion
model, map-patch scores, soft resampling) and flow-based filters (flow
dynamics, conditional-flow proposal and measurement, OT resampling); they
differ only in the components plugged in.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable

import torch

from .engine import make_generator
from .resampling import Resampler, compute_ess, normalise


class FilterError(RuntimeError):
    pass


@dataclass
class ParticleEnsemble:
    particles: torch.Tensor  # (N, d)
    log_w: torch.Tensor  # (N,) unnormalised log-weights
    ancestors: torch.Tensor  # (N,)
    t: int = 0
    log_evidence_increment: torch.Tensor | None = None
    resampled: bool = False

    @property
    def n(self) -> int:
        return self.particles.shape[0]

    @property
    def weights(self) -> torch.Tensor:
        return normalise(self.log_w)

    @property
    def ess(self) -> float:
        return compute_ess(self.weights)


@dataclass
class FilterOutput:
    means: torch.Tensor  # (T+1, d), row 0 from the initial ensemble
    ess: list[float]  # per step t = 1..T
    increments: list[torch.Tensor]  # l_t, t = 1..T
    log_evidence: torch.Tensor  # L_T, accumulated as L_t = L_{t-1} + l_t
    resampled: list[bool] = field(default_factory=list)
    ensembles: list[ParticleEnsemble] | None = None

    @property
    def T(self) -> int:
        return len(self.increments)

    def increments_array(self):
        return [float(v) for v in self.increments]


def weighted_mean(particles: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    return (weights[:, None] * particles).sum(0)


def pose_mean(particles: torch.Tensor, weights: torch.Tensor) -> torch.Tensor:
    """Weighted mean position with the circular mean of the heading."""
    pos = (weights[:, None] * particles[:, :2]).sum(0)
    s = (weights * torch.sin(particles[:, 2])).sum()
    c = (weights * torch.cos(particles[:, 2])).sum()
    return torch.cat([pos, torch.atan2(s, c).reshape(1)])


def estimate(source, what: str | Callable = "mean"):
    """Weighted average of ``what`` (``"mean"`` or a per-particle map) under W."""
    if isinstance(source, FilterOutput):
        if what == "mean":
            return source.means
        if source.ensembles is None:
            raise ValueError("test-function estimates need retained ensembles")
        return torch.stack([estimate(e, what) for e in source.ensembles])
    w = source.weights
    values = source.particles if what == "mean" else what(source.particles)
    if values.dim() == 1:
        return (w * values).sum()
    return weighted_mean(values, w)


class ParticleFilter:
    """Sequential importance resampling with pluggable differentiable parts."""

    def __init__(self, initial, dynamic, proposal, measurement, resampler: Resampler,
                 n_particles: int = 100, tbptt: str = "none",
                 estimator: Callable = weighted_mean):
        if n_particles < 1:
            raise ValueError("n_particles must be >= 1")
        if tbptt not in ("none", "every_step"):
            raise ValueError(f"tbptt must be 'none' or 'every_step', got {tbptt!r}")
        self.initial = initial
        self.dynamic = dynamic
        self.proposal = proposal
        self.measurement = measurement
        self.resampler = resampler
        self.n_particles = n_particles
        self.tbptt = tbptt
        self.estimator = estimator

    def init_ensemble(self, generator: torch.Generator, anchor=None) -> ParticleEnsemble:
        x0 = self.initial.sample(self.n_particles, generator, anchor)
        n = self.n_particles
        return ParticleEnsemble(x0, torch.zeros(n), torch.arange(n), 0)

    def step(self, ens: ParticleEnsemble, y, generator: torch.Generator,
             action=None) -> ParticleEnsemble:
        x_prev, log_w = ens.particles, ens.log_w
        if self.tbptt == "every_step":
            x_prev, log_w = x_prev.detach(), log_w.detach()
        res = self.resampler(x_prev, log_w, generator)
        log_w_tilde = res.log_w
        prev_weights = normalise(log_w_tilde)
        x, log_q, log_p = self.proposal.sample(
            self.dynamic, res.particles, y, generator, prev_weights, action
        )
        log_lik = self.measurement.log_lik(y, x)
        t = ens.t + 1
        if torch.isnan(log_lik).any():
            raise FilterError(f"step {t}: measurement model {self.measurement.variant!r} gave NaN")
        log_w_new = log_w_tilde + log_lik
        if log_q is not log_p:
            if torch.isnan(log_q).any() or torch.isnan(log_p).any():
                raise FilterError(f"step {t}: proposal {self.proposal.variant!r} gave NaN")
            log_w_new = log_w_new + (log_p - log_q)
        if torch.isnan(x).any():
            raise FilterError(f"step {t}: proposal {self.proposal.variant!r} gave NaN particles")
        if not bool(torch.isfinite(log_w_new).any()):
            raise FilterError(f"step {t}: every particle has zero weight")
        inc = torch.logsumexp(log_w_new, 0) - torch.logsumexp(log_w_tilde, 0)
        return ParticleEnsemble(x, log_w_new, res.ancestors, t, inc, res.resampled)

    def run(self, observations, seed: int = 0, actions=None, anchor=None,
            keep_ensembles: bool = False, generator: torch.Generator | None = None
            ) -> FilterOutput:
        obs = torch.as_tensor(observations, dtype=torch.float64)
        T = obs.shape[0]
        if T < 1:
            raise ValueError("need at least one observation")
        g = generator or make_generator(seed)
        ens = self.init_ensemble(g, anchor)
        means = [self.estimator(ens.particles, ens.weights)]
        ess, incs, flags = [], [], []
        kept = [ens] if keep_ensembles else None
        total = torch.zeros(())
        for t in range(T):
            a = None if actions is None else torch.as_tensor(actions[t], dtype=torch.float64)
            ens = self.step(ens, obs[t], g, a)
            total = total + ens.log_evidence_increment
            means.append(self.estimator(ens.particles, ens.weights))
            ess.append(ens.ess)
            incs.append(ens.log_evidence_increment)
            flags.append(ens.resampled)
            if keep_ensembles:
                kept.append(ens)
        return FilterOutput(torch.stack(means), ess, incs, total, flags, kept)


def dpf_step(ensemble: ParticleEnsemble, y, pf: ParticleFilter, generator, action=None):
    return pf.step(ensemble, y, generator, action)


def run_filter(pf: ParticleFilter, trajectory, seed: int = 0, keep_ensembles: bool = False,
               anchored: bool | None = None) -> FilterOutput:
    """Filter one :class:`~dpf.ssm.Trajectory` (or a bare observation array)."""
    if hasattr(trajectory, "observations"):
        anchor = None
        if anchored if anchored is not None else getattr(pf.initial, "anchored", False):
            anchor = torch.as_tensor(trajectory.states[0], dtype=torch.float64)
        return pf.run(trajectory.observations, seed, trajectory.actions, anchor, keep_ensembles)
    return pf.run(trajectory, seed, keep_ensembles=keep_ensembles)


def make_pfnet(world, measurement, n_particles: int = 30, soft_lambda: float = 0.5,
               ess_min_frac: float = 0.5, tbptt: str = "none") -> ParticleFilter:
    """PFNet: odometry bootstrap proposal, map-patch scores, soft resampling.

    The initial distribution is centred on each trajectory's start pose.
    """
    from .components import BootstrapProposal, GaussianInitial, RobotMotion

    initial = GaussianInitial(torch.zeros(3), world.init_noise, anchored=True)
    resampler = Resampler("soft", ess_min_frac, soft_lambda=soft_lambda)
    return ParticleFilter(initial, RobotMotion(world.noise_scales), BootstrapProposal(),
                          measurement, resampler, n_particles, tbptt, estimator=pose_mean)


def pfnet_filter(pf: ParticleFilter, trajectories, seed: int = 0) -> list[FilterOutput]:
    """Run PFNet over planar trajectories; each run gets a derived seed."""
    from .engine import derive_seed

    return [run_filter(pf, tr, derive_seed(seed, i), anchored=True)
            for i, tr in enumerate(trajectories)]
