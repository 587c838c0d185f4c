"""Assemble data generators and particle filters from an ExperimentConfig."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .components import (
    AnalyticGaussian,
    BootstrapProposal,
    CNFMeasurement,
    CNFProposal,
    FeatureCosine,
    FeatureGaussian,
    FlowDynamic,
    GaussianDynamic,
    GaussianInitial,
    NNScalar,
    RobotMotion,
    planar_local_map,
)
from .config import ExperimentConfig
from .engine import CouplingFlow, ParamStore, derive_seed, make_generator
from .filter import ParticleFilter, pose_mean, weighted_mean
from .resampling import Resampler
from .ssm import LinearGaussianSSM, PlanarTask, PlanarWorld, smooth_random_map


class NullMeasurement:
    """Constant score: weights never change (a dead-reckoning baseline)."""

    variant = "null"
    normalised = False

    def log_lik(self, y, x):
        return torch.zeros(x.shape[0])


@dataclass
class Model:
    pf: ParticleFilter
    store: ParamStore
    config: ExperimentConfig
    world: PlanarWorld | None = None


def make_world(cfg: ExperimentConfig, grid=None) -> PlanarWorld:
    if grid is None:
        grid = smooth_random_map(tuple(cfg.map_size), derive_seed(cfg.seed, 1))
    return PlanarWorld(np.asarray(grid), tuple(cfg.motion_noise), tuple(cfg.patch),
                       cfg.pixel_noise, tuple(cfg.init_noise))


def make_task(cfg: ExperimentConfig, grid=None):
    """Data-generating process named by ``cfg.model``."""
    if cfg.model == "planar":
        return PlanarTask(make_world(cfg, grid))
    return LinearGaussianSSM(*cfg.theta_true)


def make_resampler(cfg: ExperimentConfig) -> Resampler:
    return Resampler(cfg.resampler, cfg.ess_min_frac, cfg.soft_lambda, cfg.ot_epsilon,
                     cfg.ot_max_iter, cfg.ot_tol)


def build_model(cfg: ExperimentConfig, grid=None, store: ParamStore | None = None) -> Model:
    store = ParamStore() if store is None else store
    g = make_generator(derive_seed(cfg.seed, 2))
    resampler = make_resampler(cfg)
    if cfg.model == "planar":
        world = make_world(cfg, grid)
        obs_dim = int(np.prod(cfg.patch))
        meas = NNScalar(store, "measurement", obs_dim, 3, cfg.feature_dim, cfg.hidden, g,
                        local_map=planar_local_map(world))
        initial = GaussianInitial(torch.zeros(3), cfg.init_noise, anchored=True)
        pf = ParticleFilter(initial, RobotMotion(cfg.motion_noise), BootstrapProposal(), meas,
                            resampler, cfg.n_particles, cfg.tbptt, estimator=pose_mean)
        return Model(pf, store, cfg, world)

    dx = dy = 1
    theta1, theta2 = cfg.theta_init
    initial = GaussianInitial([0.0], [1.0])
    if cfg.dynamic == "flow_dynamic":
        base = GaussianDynamic(store, "dynamic", dx, "linear", coef=theta1,
                               learn_noise=cfg.learn_noise)
        flow = CouplingFlow(store, "dynamic.flow", dx, 0, cfg.flow_depth, cfg.flow_hidden, g)
        dynamic = FlowDynamic(base, flow)
    else:
        dynamic = GaussianDynamic(store, "dynamic", dx, "linear",
                                  hetero=cfg.dynamic == "gaussian_hetero", coef=theta1,
                                  learn_noise=cfg.learn_noise, hidden=cfg.hidden, generator=g)
    if cfg.proposal == "cnf_proposal":
        proposal = CNFProposal(
            CouplingFlow(store, "proposal.flow", dx, dy, cfg.flow_depth, cfg.flow_hidden, g))
    else:
        proposal = BootstrapProposal()
    m = cfg.measurement
    if m == "analytic_gaussian":
        meas = AnalyticGaussian(store, "measurement", dx, dy, coef=theta2, obs_var=0.1)
    elif m == "nn_scalar":
        meas = NNScalar(store, "measurement", dy, dx, cfg.feature_dim, cfg.hidden, g)
    elif m == "feature_cosine":
        meas = FeatureCosine(store, "measurement", dy, dx, cfg.feature_dim, cfg.hidden, g)
    elif m == "feature_gaussian":
        meas = FeatureGaussian(store, "measurement", dy, dx, cfg.feature_dim, cfg.hidden, g)
    else:
        meas = CNFMeasurement(
            CouplingFlow(store, "measurement.flow", dy, dx, cfg.flow_depth, cfg.flow_hidden, g))
    pf = ParticleFilter(initial, dynamic, proposal, meas, resampler, cfg.n_particles, cfg.tbptt,
                        estimator=weighted_mean)
    return Model(pf, store, cfg)


def frozen_baseline(model: Model) -> ParticleFilter:
    """Same filter with the measurement update switched off."""
    pf = model.pf
    return ParticleFilter(pf.initial, pf.dynamic, pf.proposal, NullMeasurement(), pf.resampler,
                          pf.n_particles, pf.tbptt, pf.estimator)


def architecture_meta(cfg: ExperimentConfig) -> dict:
    return {
        "model": cfg.model,
        "dynamic": cfg.dynamic,
        "proposal": cfg.proposal,
        "measurement": cfg.measurement,
        "flow_depth": cfg.flow_depth,
        "flow_hidden": cfg.flow_hidden,
        "feature_dim": cfg.feature_dim,
        "hidden": cfg.hidden,
    }
