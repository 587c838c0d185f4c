"""Dynamic models, proposals and measurement models of a differentiable PF.

Every component keeps its parameters in a shared :class:`ParamStore` under a
name prefix.  Samplers take an explicit ``torch.Generator`` so that noise is
drawn outside the tape and a run is reproducible from its seed.
"""

from __future__ import annotations

import math

import torch
import torch.nn.functional as F

from .engine import MLP, CouplingFlow, ParamStore, reparam_gaussian, standard_normal_log_density
from .ssm import PlanarWorld, robot_transition, wrap_angle

DYNAMICS = ("gaussian_const", "gaussian_hetero", "flow_dynamic")
PROPOSALS = ("bootstrap", "cnf_proposal")
MEASUREMENTS = ("analytic_gaussian", "nn_scalar", "feature_cosine", "feature_gaussian",
                "cnf_measurement")
UNNORMALISED_MEASUREMENTS = ("nn_scalar", "feature_cosine")

COSINE_FLOOR = 1e-6
SOFTPLUS_FLOOR = 1e-8


def _diag_normal_logpdf(x, mean, var):
    return (-0.5 * (torch.log(2 * math.pi * var) + (x - mean) ** 2 / var)).sum(-1)


class Identity:
    def __call__(self, x):
        return x


# --------------------------------------------------------------------------
# initial distributions
# --------------------------------------------------------------------------


class GaussianInitial:
    """pi(x0) = N(mean, diag(std^2)).

    With ``anchored`` the mean is supplied per run (e.g. a known start pose).
    """

    def __init__(self, mean, std, anchored: bool = False):
        self.mean = torch.as_tensor(mean, dtype=torch.float64).reshape(-1)
        self.std = torch.as_tensor(std, dtype=torch.float64).reshape(-1)
        self.anchored = anchored

    def sample(self, n: int, generator: torch.Generator, anchor=None) -> torch.Tensor:
        mean = self.mean if anchor is None else torch.as_tensor(anchor, dtype=torch.float64)
        return mean + self.std * torch.randn(n, self.std.numel(), generator=generator)

    def log_density(self, x, anchor=None):
        mean = self.mean if anchor is None else torch.as_tensor(anchor, dtype=torch.float64)
        return _diag_normal_logpdf(x, mean, self.std**2)


# --------------------------------------------------------------------------
# dynamic models
# --------------------------------------------------------------------------


class GaussianDynamic:
    """x_t = mu(x_{t-1}) + alpha, alpha ~ N(0, diag(sigma^2)).

    ``mean`` is ``"linear"`` (x @ A), ``"mlp"`` (x + MLP(x)) or ``"identity"``.
    With ``hetero`` the per-particle scales come from a net and the shared
    covariance is their weight-averaged variance.
    """

    def __init__(self, store: ParamStore, prefix: str, dim: int, mean: str = "linear",
                 hetero: bool = False, coef: float = 1.0, log_sigma: float = 0.0,
                 learn_noise: bool = False, hidden: int = 32, generator=None):
        self.dim, self.hetero = dim, hetero
        self.variant = "gaussian_hetero" if hetero else "gaussian_const"
        self.mean_kind = mean
        if mean == "linear":
            self.A = store.add(f"{prefix}.A", coef * torch.eye(dim))
        elif mean == "mlp":
            self.mu_net = MLP(store, f"{prefix}.mu", [dim, hidden, dim], "tanh", generator,
                              zero_last=True)
        elif mean != "identity":
            raise ValueError(f"unknown mean function {mean!r}")
        if hetero:
            self.gamma = MLP(store, f"{prefix}.gamma", [dim, hidden, dim], "tanh", generator)
        elif learn_noise:
            self.log_sigma = store.add(f"{prefix}.log_sigma", torch.full((dim,), float(log_sigma)))
        else:
            self.log_sigma = torch.full((dim,), float(log_sigma))

    def mean_fn(self, x):
        if self.mean_kind == "linear":
            return x @ self.A.T
        if self.mean_kind == "mlp":
            return x + self.mu_net(x)
        return x

    def particle_variances(self, x_prev):
        """Per-particle diagonal variances (hetero only), shape (N, d)."""
        return F.softplus(self.gamma(x_prev)) ** 2 + 1e-12

    def variance(self, x_prev, weights=None):
        if not self.hetero:
            return torch.exp(2 * self.log_sigma)
        v = self.particle_variances(x_prev)
        if weights is None:
            weights = torch.full((x_prev.shape[0],), 1.0 / x_prev.shape[0])
        return (weights[:, None] * v).sum(0)

    def sample(self, x_prev, generator, weights=None, action=None):
        mu = self.mean_fn(x_prev)
        if not bool(torch.isfinite(mu).all()):
            raise FloatingPointError("dynamic model mean produced non-finite values")
        var = self.variance(x_prev, weights)
        noise = torch.randn(mu.shape, generator=generator)
        x = reparam_gaussian(mu, 0.5 * torch.log(var).expand_as(mu), noise)
        return x, _diag_normal_logpdf(x, mu, var)

    def log_density(self, x_new, x_prev, weights=None, action=None):
        return _diag_normal_logpdf(x_new, self.mean_fn(x_prev), self.variance(x_prev, weights))


class FlowDynamic:
    """Base Gaussian dynamic pushed through an unconditional coupling flow."""

    variant = "flow_dynamic"

    def __init__(self, base: GaussianDynamic, flow: CouplingFlow):
        self.base, self.flow = base, flow
        self.dim = base.dim

    def sample(self, x_prev, generator, weights=None, action=None):
        x_base, logp_base = self.base.sample(x_prev, generator, weights)
        x, logdet = self.flow.forward(x_base)
        return x, logp_base - logdet

    def log_density(self, x_new, x_prev, weights=None, action=None):
        x_base, logdet_inv = self.flow.inverse(x_new)
        return self.base.log_density(x_base, x_prev, weights) + logdet_inv


class RobotMotion:
    """Odometry motion model with Gaussian noise on (s1, s2, heading)."""

    variant = "robot_motion"
    dim = 3

    def __init__(self, noise_scales=(0.2, 0.2, 0.05)):
        self.sigma = torch.as_tensor(noise_scales, dtype=torch.float64)

    def sample(self, x_prev, generator, weights=None, action=None):
        noise = torch.randn(x_prev.shape, generator=generator) * self.sigma
        x = robot_transition(x_prev, action, noise)
        return x, self._noise_logpdf(noise)

    def _noise_logpdf(self, noise):
        return _diag_normal_logpdf(noise, 0.0, self.sigma**2)

    def log_density(self, x_new, x_prev, weights=None, action=None):
        action = torch.as_tensor(action, dtype=torch.float64)
        a3 = wrap_angle(x_new[..., 2] - action[..., 2] - x_prev[..., 2])
        eta_hat = x_prev[..., 2] + a3
        c, s = torch.cos(eta_hat), torch.sin(eta_hat)
        a1 = x_new[..., 0] - x_prev[..., 0] - action[..., 0] * c - action[..., 1] * s
        a2 = x_new[..., 1] - x_prev[..., 1] - action[..., 0] * s + action[..., 1] * c
        return self._noise_logpdf(torch.stack([a1, a2, a3], -1))


def dyn_sample(model, x_prev, generator, weights=None, action=None):
    return model.sample(x_prev, generator, weights, action)


def dyn_log_density(model, x_new, x_prev, weights=None, action=None):
    return model.log_density(x_new, x_prev, weights, action)


# --------------------------------------------------------------------------
# proposals
# --------------------------------------------------------------------------


class BootstrapProposal:
    variant = "bootstrap"

    def sample(self, dyn, x_prev, y, generator, weights=None, action=None):
        """Returns ``(x, log_q, log_p_dyn)``; here log_q is log_p_dyn itself."""
        x, logp = dyn.sample(x_prev, generator, weights, action)
        return x, logp, logp

    def log_density(self, dyn, x, x_prev, y, weights=None, action=None):
        return dyn.log_density(x, x_prev, weights, action)


class CNFProposal:
    """x = G(x_check, e(y)) with x_check drawn from the dynamic model."""

    variant = "cnf_proposal"

    def __init__(self, flow: CouplingFlow, encoder=None):
        self.flow = flow
        self.encoder = encoder or Identity()

    def _cond(self, y):
        return self.encoder(torch.as_tensor(y, dtype=torch.float64).reshape(-1))

    def sample(self, dyn, x_prev, y, generator, weights=None, action=None):
        x_check, logp_check = dyn.sample(x_prev, generator, weights, action)
        x, logdet = self.flow.forward(x_check, self._cond(y))
        log_q = logp_check - logdet
        log_p = dyn.log_density(x, x_prev, weights, action)
        return x, log_q, log_p

    def log_density(self, dyn, x, x_prev, y, weights=None, action=None):
        x_check, logdet_inv = self.flow.inverse(x, self._cond(y))
        return dyn.log_density(x_check, x_prev, weights, action) + logdet_inv


def proposal_sample_and_density(proposal, dyn, x_prev, y, generator, weights=None, action=None):
    x, log_q, _ = proposal.sample(dyn, x_prev, y, generator, weights, action)
    return x, log_q


# --------------------------------------------------------------------------
# measurement models
# --------------------------------------------------------------------------


class AnalyticGaussian:
    """y ~ N(C x, obs_var I)."""

    variant = "analytic_gaussian"
    normalised = True

    def __init__(self, store: ParamStore, prefix: str, state_dim: int, obs_dim: int,
                 coef: float = 1.0, obs_var: float = 0.1, learn_var: bool = False):
        C = torch.zeros(obs_dim, state_dim)
        for k in range(min(obs_dim, state_dim)):
            C[k, k] = coef
        self.C = store.add(f"{prefix}.C", C)
        if learn_var:
            self.log_var = store.add(f"{prefix}.log_var", torch.tensor(math.log(obs_var)))
        else:
            self.log_var = torch.tensor(math.log(obs_var))

    def log_lik(self, y, x):
        y = torch.as_tensor(y, dtype=torch.float64).reshape(-1)
        return _diag_normal_logpdf(y, x @ self.C.T, torch.exp(self.log_var))


class NNScalar:
    """log(softplus(h(features)) + 1e-8), an unnormalised compatibility score.

    Without ``local_map`` the net sees ``[E(y), x]``.  With ``local_map`` (a
    map from states to local patches) it sees ``[y, M, (y - M)^2]`` where M is
    the particle's local map, as in map-based localisation.
    """

    variant = "nn_scalar"
    normalised = False

    def __init__(self, store: ParamStore, prefix: str, obs_dim: int, state_dim: int,
                 feature_dim: int = 16, hidden: int = 32, generator=None, local_map=None):
        self.local_map = local_map
        if local_map is None:
            self.encoder = MLP(store, f"{prefix}.E", [obs_dim, hidden, feature_dim], "tanh",
                               generator)
            in_width = feature_dim + state_dim
        else:
            self.encoder = None
            in_width = 3 * obs_dim
        self.h = MLP(store, f"{prefix}.h", [in_width, hidden, 1], "tanh", generator)

    def score(self, y, x):
        y = torch.as_tensor(y, dtype=torch.float64).reshape(-1)
        n = x.shape[0]
        if self.local_map is None:
            e = self.encoder(y).expand(n, -1)
            feats = torch.cat([e, x], -1)
        else:
            m = self.local_map(x).reshape(n, -1)
            yy = y.expand(n, -1)
            feats = torch.cat([yy, m, (yy - m) ** 2], -1)
        return F.softplus(self.h(feats)[..., 0]) + SOFTPLUS_FLOOR

    def log_lik(self, y, x):
        return torch.log(self.score(y, x))


class _FeatureModel:
    def __init__(self, store, prefix, obs_dim, state_dim, feature_dim=16, hidden=32,
                 generator=None, obs_encoder=None, state_encoder=None, decoder=None):
        self.encoder = obs_encoder or MLP(store, f"{prefix}.E", [obs_dim, hidden, feature_dim],
                                          "tanh", generator)
        self.state_encoder = state_encoder or MLP(
            store, f"{prefix}.O", [state_dim, hidden, feature_dim], "tanh", generator)
        self.decoder = decoder or MLP(store, f"{prefix}.D", [feature_dim, hidden, obs_dim],
                                      "tanh", generator)

    def features(self, y, x):
        y = torch.as_tensor(y, dtype=torch.float64).reshape(-1)
        return self.encoder(y), self.state_encoder(x)


class FeatureCosine(_FeatureModel):
    """Score 1 / c(e, o) with c the cosine distance, floored at 1e-6."""

    variant = "feature_cosine"
    normalised = False

    def log_lik(self, y, x):
        e, o = self.features(y, x)
        cos = (o @ e) / (torch.linalg.vector_norm(o, dim=-1) * torch.linalg.vector_norm(e)
                         + 1e-300)
        dist = torch.clamp(1 - cos, min=COSINE_FLOOR)
        return -torch.log(dist)


class FeatureGaussian(_FeatureModel):
    """E(y) ~ N(O(x), sigma_obs^2 I) with learnable log sigma_obs."""

    variant = "feature_gaussian"
    normalised = True

    def __init__(self, store, prefix, obs_dim, state_dim, feature_dim=16, hidden=32,
                 generator=None, sigma_obs=0.5, **encoders):
        super().__init__(store, prefix, obs_dim, state_dim, feature_dim, hidden, generator,
                         **encoders)
        self.log_sigma = store.add(f"{prefix}.log_sigma_obs", torch.tensor(math.log(sigma_obs)))

    def log_lik(self, y, x):
        e, o = self.features(y, x)
        return _diag_normal_logpdf(e, o, torch.exp(2 * self.log_sigma))


class CNFMeasurement:
    """p(y | x) = p_z(F(y; x)) |det dF/dy| with a standard-normal p_z.

    With an ``encoder`` the flow acts on features e = E(y) instead.
    """

    variant = "cnf_measurement"
    normalised = True

    def __init__(self, flow: CouplingFlow, encoder=None):
        self.flow = flow
        self.encoder = encoder

    def log_lik(self, y, x):
        y = torch.as_tensor(y, dtype=torch.float64).reshape(-1)
        if self.encoder is not None:
            y = self.encoder(y)
        z, logdet = self.flow.forward(y.expand(x.shape[0], -1), x)
        return standard_normal_log_density(z) + logdet


def meas_log_lik(model, y, x):
    return model.log_lik(y, x)


def ae_loss(model, observations) -> torch.Tensor:
    """Sum over time of ||D(E(y_t)) - y_t||^2."""
    if getattr(model, "decoder", None) is None:
        raise ValueError(f"measurement model {model.variant!r} has no decoder")
    y = torch.as_tensor(observations, dtype=torch.float64)
    y = y.reshape(y.shape[0], -1)
    recon = model.decoder(model.encoder(y))
    return ((recon - y) ** 2).sum()


def planar_local_map(world: PlanarWorld):
    return lambda poses: world.observe_patch(poses)
