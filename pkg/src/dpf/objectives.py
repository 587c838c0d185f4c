"""Training losses and the gradient-descent training loop."""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .components import ae_loss
from .engine import ParamStore, backward, derive_seed, make_generator, make_optimizer
from .filter import FilterError, FilterOutput, ParticleFilter, run_filter
from .ssm import wrap_angle

log = logging.getLogger(__name__)

LOSSES = ("rmse", "gmm_ll", "elbo", "pseudo_lik", "combined")


class TrainingError(RuntimeError):
    pass


def rmse_loss(estimates, truth) -> torch.Tensor:
    """sqrt(mean_t ||x*_t - xbar_t||^2) over the T+1 time steps."""
    est = torch.as_tensor(estimates, dtype=torch.float64)
    tru = torch.as_tensor(truth, dtype=torch.float64)
    if est.shape[0] != tru.shape[0]:
        raise ValueError(f"length mismatch: {est.shape[0]} estimates vs {tru.shape[0]} states")
    est = est.reshape(est.shape[0], -1)
    tru = tru.reshape(tru.shape[0], -1)
    return torch.sqrt(((tru - est) ** 2).sum(-1).mean())


def gmm_loglik_loss(ensembles, truth, sigma=1.0) -> torch.Tensor:
    """Negative mean log of the weighted Gaussian-kernel mixture at the truth.

    The kernel is W / sqrt(|Sigma|) exp(-0.5 d^T Sigma^-1 d) with a diagonal
    Sigma and no (2 pi)^(-d/2) factor, so the value is offset by a constant
    from a normalised mixture log-density; gradients are unaffected.
    """
    tru = torch.as_tensor(truth, dtype=torch.float64)
    tru = tru.reshape(tru.shape[0], -1)
    if len(ensembles) != tru.shape[0]:
        raise ValueError("one ensemble per ground-truth state is required")
    d = tru.shape[1]
    sig = torch.as_tensor(sigma, dtype=torch.float64).expand(d)
    if bool((sig <= 0).any()):
        raise ValueError("gmm_sigma entries must be positive")
    half_logdet = 0.5 * torch.log(sig).sum()
    terms = []
    for ens, x_star in zip(ensembles, tru):
        diff = ens.particles - x_star
        quad = (diff * diff / sig).sum(-1)
        log_w = torch.log_softmax(ens.log_w, 0)
        terms.append(torch.logsumexp(log_w - half_logdet - 0.5 * quad, 0))
    return -torch.stack(terms).mean()


def elbo_loss(output: FilterOutput) -> torch.Tensor:
    """Negative log of the particle estimate of p(y_{1:T})."""
    return -output.log_evidence


def pfnet_loss(estimates, truth, heading_weight: float = 1.0) -> torch.Tensor:
    """Sum over t of squared position error plus weighted squared heading error.

    The heading difference is wrapped to (-pi, pi].
    """
    est = torch.as_tensor(estimates, dtype=torch.float64)
    tru = torch.as_tensor(truth, dtype=torch.float64)
    pos = ((est[:, :2] - tru[:, :2]) ** 2).sum()
    if heading_weight == 0:
        return pos
    dh = wrap_angle(est[:, 2] - tru[:, 2])
    return pos + heading_weight * (dh**2).sum()


def position_rmse(estimates, truth) -> float:
    est = torch.as_tensor(estimates, dtype=torch.float64).detach()
    tru = torch.as_tensor(truth, dtype=torch.float64)
    return float(torch.sqrt(((est[:, :2] - tru[:, :2]) ** 2).sum(-1).mean()))


def block_slices(T: int, block_len: int, block_count: int) -> list[slice]:
    if block_len < 1 or block_count < 1:
        raise ValueError("block_len and block_count must be >= 1")
    if block_len * block_count > T:
        raise ValueError(f"{block_count} blocks of length {block_len} exceed T={T}")
    return [slice(b * block_len, (b + 1) * block_len) for b in range(block_count)]


def block_log_evidence(pf: ParticleFilter, trajectory, blk: slice, seed: int) -> FilterOutput:
    """Filter one block restarted from the initial distribution."""
    obs = trajectory.observations[blk]
    actions = None if trajectory.actions is None else trajectory.actions[blk]
    anchor = None
    if getattr(pf.initial, "anchored", False):
        anchor = torch.as_tensor(trajectory.states[blk.start], dtype=torch.float64)
    return pf.run(obs, seed, actions, anchor)


def pseudo_likelihood_loss(pf: ParticleFilter, trajectory, block_len: int, block_count: int,
                           seed: int = 0) -> torch.Tensor:
    """Negative sum over blocks of the block log-evidence estimates."""
    slices = block_slices(trajectory.T, block_len, block_count)
    total = torch.zeros(())
    for b, blk in enumerate(slices):
        total = total + block_log_evidence(pf, trajectory, blk, derive_seed(seed, b)).log_evidence
    return -total


def combined_objective(supervised, pseudo, lambda1: float, lambda2: float, block_count: int,
                       supervised_available: bool = True) -> torch.Tensor:
    """lambda1 * supervised + (lambda2 / m) * pseudo, where pseudo = -Q."""
    if lambda1 < 0 or lambda2 < 0:
        raise ValueError("lambda1 and lambda2 must be non-negative")
    out = (lambda2 / block_count) * pseudo
    if supervised_available and lambda1 != 0:
        out = out + lambda1 * supervised
    return out


@dataclass
class LossSpec:
    variant: str = "elbo"
    gmm_sigma: float = 1.0
    block_len: int | None = None
    block_count: int = 1
    lambda1: float = 1.0
    lambda2: float = 1.0
    heading_weight: float = 1.0
    ae_weight: float = 0.0
    supervised: bool = True
    planar: bool = False

    def __post_init__(self):
        if self.variant not in LOSSES:
            raise ValueError(f"unknown loss {self.variant!r}; valid: {', '.join(LOSSES)}")
        if self.lambda1 < 0 or self.lambda2 < 0:
            raise ValueError("lambda1 and lambda2 must be non-negative")
        if self.block_len is not None and self.block_len < 1:
            raise ValueError("block_len must be >= 1")


def supervised_term(spec: LossSpec, out: FilterOutput, states) -> torch.Tensor:
    if spec.planar:
        return pfnet_loss(out.means, states, spec.heading_weight)
    if spec.variant == "gmm_ll":
        return gmm_loglik_loss(out.ensembles, states, spec.gmm_sigma)
    return rmse_loss(out.means, states)


def trajectory_loss(pf: ParticleFilter, traj, spec: LossSpec, seed: int) -> torch.Tensor:
    """Full-sequence objective for one trajectory (block schedules excluded)."""
    v = spec.variant
    if v in ("pseudo_lik", "combined"):
        L = spec.block_len or traj.T // spec.block_count
        pseudo = pseudo_likelihood_loss(pf, traj, L, spec.block_count, seed)
        if v == "pseudo_lik":
            loss = pseudo
        else:
            sup = supervised_term(spec, run_filter(pf, traj, seed), traj.states)
            loss = combined_objective(sup, pseudo, spec.lambda1, spec.lambda2, spec.block_count,
                                      spec.supervised)
    else:
        out = run_filter(pf, traj, seed, keep_ensembles=(v == "gmm_ll"))
        loss = elbo_loss(out) if v == "elbo" else supervised_term(spec, out, traj.states)
    if spec.ae_weight:
        loss = loss + spec.ae_weight * ae_loss(pf.measurement, traj.observations)
    return loss


def block_objective(pf: ParticleFilter, traj, spec: LossSpec, b: int, seed: int) -> torch.Tensor:
    """Objective of block ``b`` for the block-sequential pseudo-likelihood schedule."""
    L = spec.block_len or traj.T // spec.block_count
    blk = block_slices(traj.T, L, spec.block_count)[b]
    out = block_log_evidence(pf, traj, blk, seed)
    loss = (spec.lambda2 / spec.block_count) * (-out.log_evidence)
    if spec.variant == "combined" and spec.supervised and spec.lambda1:
        states = traj.states[blk.start: blk.stop + 1]
        if spec.planar:
            sup = pfnet_loss(out.means, states, spec.heading_weight)
        else:
            sup = rmse_loss(out.means, states)
        loss = loss + spec.lambda1 * sup
    return loss


def evaluate_trajectories(pf: ParticleFilter, trajs, spec: LossSpec, seed: int) -> dict:
    """Held-out metrics without building a tape."""
    rmses, evid = [], []
    with torch.no_grad():
        for i, tr in enumerate(trajs):
            out = run_filter(pf, tr, derive_seed(seed, i))
            evid.append(float(out.log_evidence))
            if spec.planar:
                rmses.append(position_rmse(out.means, tr.states))
            else:
                rmses.append(float(rmse_loss(out.means, tr.states)))
    return {"rmse": float(np.mean(rmses)), "log_evidence": float(np.mean(evid))}


@dataclass
class TrainState:
    epoch: int = 0
    steps: int = 0
    history: list[dict] = field(default_factory=list)
    best_metric: float = math.inf
    best_epoch: int = -1
    best_params: dict | None = None
    seed: int = 0
    optimizer: object = None


def train(pf: ParticleFilter, store: ParamStore, trajectories, spec: LossSpec, *,
          optimizer: str = "adam", lr: float = 1e-2, epochs: int = 10, minibatch: int = 8,
          seed: int = 0, validation=None, on_checkpoint=None) -> TrainState:
    """Minibatch gradient descent on the loss, one filter run per trajectory.

    ``on_checkpoint(store, state)`` is called whenever the validation metric
    improves (and once at the start).  Seeds derive from ``seed``, the epoch,
    the minibatch and the trajectory index, so a run is reproducible.
    """
    if minibatch < 1:
        raise ValueError("minibatch must be >= 1")
    opt = make_optimizer(store, optimizer, lr)
    state = TrainState(seed=seed, optimizer=opt)
    metric_key = "log_evidence" if spec.variant in ("elbo", "pseudo_lik") else "rmse"
    val = validation if validation else trajectories

    def record(epoch, train_loss):
        m = evaluate_trajectories(pf, val, spec, derive_seed(seed, 10**6))
        metric = -m["log_evidence"] if metric_key == "log_evidence" else m["rmse"]
        state.history.append({"epoch": epoch, "train_loss": train_loss, **m})
        if metric < state.best_metric:
            state.best_metric, state.best_epoch = metric, epoch
            state.best_params = store.numpy()
            if on_checkpoint is not None:
                on_checkpoint(store, state)

    record(0, float("nan"))
    blockwise = spec.variant in ("pseudo_lik", "combined")
    n = len(trajectories)
    for epoch in range(1, epochs + 1):
        perm = torch.randperm(n, generator=make_generator(derive_seed(seed, epoch))).tolist()
        losses = []
        for start in range(0, n, minibatch):
            batch = perm[start: start + minibatch]
            try:
                if blockwise:
                    for b in range(spec.block_count):
                        loss = sum(
                            block_objective(pf, trajectories[i], spec, b,
                                            derive_seed(seed, epoch, i, b))
                            for i in batch
                        ) / len(batch)
                        _step(loss, store, opt)
                        losses.append(float(loss.detach()))
                else:
                    loss = sum(
                        trajectory_loss(pf, trajectories[i], spec, derive_seed(seed, epoch, i))
                        for i in batch
                    ) / len(batch)
                    _step(loss, store, opt)
                    losses.append(float(loss.detach()))
            except (FloatingPointError, FilterError) as exc:
                if state.best_params is not None:
                    store.load(state.best_params)
                raise TrainingError(f"epoch {epoch}: {exc}; last good checkpoint retained") from exc
            state.steps += 1
        state.epoch = epoch
        mean_loss = float(np.mean(losses)) if losses else float("nan")
        log.info("epoch %d loss %.6g", epoch, mean_loss)
        record(epoch, mean_loss)
    return state


def _step(loss: torch.Tensor, store: ParamStore, opt) -> None:
    if not bool(torch.isfinite(loss)):
        raise FloatingPointError("non-finite loss")
    store.zero_grad()
    backward(loss, store)
    opt.step()
