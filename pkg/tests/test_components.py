import math

import numpy as np
import pytest
import torch
from scipy import stats

from dpf.components import (
    AnalyticGaussian,
    BootstrapProposal,
    CNFMeasurement,
    CNFProposal,
    FeatureCosine,
    FeatureGaussian,
    FlowDynamic,
    GaussianDynamic,
    Identity,
    NNScalar,
    ae_loss,
    dyn_log_density,
    dyn_sample,
    meas_log_lik,
    proposal_sample_and_density,
)
from dpf.engine import CouplingFlow, ParamStore, grad_check, make_generator

from _helpers import perturb

GRID = torch.linspace(-15, 15, 6001)[:, None]


def trapezoid(log_density, grid=GRID):
    return float(torch.trapezoid(torch.exp(log_density), grid[:, 0]))


def linear_dyn(store, coef=0.9, log_sigma=0.0):
    return GaussianDynamic(store, "dyn", 1, "linear", coef=coef, log_sigma=log_sigma)


def flow_dynamic(seed=0, depth=3):
    store = ParamStore()
    base = linear_dyn(store)
    flow = CouplingFlow(store, "dyn.flow", 1, 0, depth, 8, make_generator(seed))
    perturb(store, 0.3, seed)
    return store, FlowDynamic(base, flow)


def test_identity_mean_without_noise_returns_input(gen):
    store = ParamStore()
    dyn = GaussianDynamic(store, "d", 2, "identity", log_sigma=-800.0)
    x = torch.randn(4, 2, generator=gen)
    x_new, _ = dyn_sample(dyn, x, gen)
    assert torch.equal(x_new, x)


def test_hetero_equal_variances_ignore_weights(gen):
    store = ParamStore()
    dyn = GaussianDynamic(store, "d", 2, "linear", hetero=True, generator=gen)
    with torch.no_grad():
        store["d.gamma.W1"].zero_()
        store["d.gamma.b1"].fill_(0.4)
    x = torch.randn(6, 2, generator=gen)
    v = float(torch.nn.functional.softplus(torch.tensor(0.4)) ** 2)
    for w in (torch.full((6,), 1 / 6), torch.softmax(torch.randn(6, generator=gen), 0)):
        assert torch.allclose(dyn.variance(x, w), torch.full((2,), v), rtol=1e-12)


def test_hetero_variance_is_weighted_mixture(gen):
    store = ParamStore()
    dyn = GaussianDynamic(store, "d", 1, "linear", hetero=True, generator=gen)
    x = torch.randn(5, 1, generator=gen)
    w = torch.softmax(torch.randn(5, generator=gen), 0)
    expected = (w[:, None] * dyn.particle_variances(x)).sum(0)
    assert torch.allclose(dyn.variance(x, w), expected, rtol=1e-14)


def test_gaussian_dynamic_moments(gen):
    store = ParamStore()
    dyn = linear_dyn(store, 0.9, math.log(0.7))
    x, _ = dyn_sample(dyn, torch.ones(100_000, 1), gen)
    assert abs(float(x.mean()) - 0.9) < 0.01
    assert abs(float(x.var()) - 0.49) / 0.49 < 0.05


def test_standard_normal_log_density_value():
    store = ParamStore()
    dyn = GaussianDynamic(store, "d", 1, "linear", coef=0.0)
    v = dyn_log_density(dyn, torch.zeros(1, 1), torch.zeros(1, 1))
    assert float(v) == pytest.approx(-0.5 * math.log(2 * math.pi), abs=1e-15)


def test_identity_flow_dynamic_matches_base(gen):
    store = ParamStore()
    base = linear_dyn(store)
    flow = FlowDynamic(base, CouplingFlow(store, "f", 1, 0, 2, 4, gen))
    x, xp = torch.randn(7, 1, generator=gen), torch.randn(7, 1, generator=gen)
    assert torch.equal(dyn_log_density(flow, x, xp), dyn_log_density(base, x, xp))
    a, _ = dyn_sample(flow, torch.zeros(10_000, 1), make_generator(1))
    b, _ = dyn_sample(base, torch.zeros(10_000, 1), make_generator(2))
    ks = stats.ks_2samp(a[:, 0].detach().numpy(), b[:, 0].detach().numpy())
    crit = 1.63 * math.sqrt(2 / 10_000)  # two-sample 1% critical value
    assert ks.statistic < crit


def test_flow_dynamic_density_integrates_to_one():
    _, dyn = flow_dynamic(seed=3)
    x_prev = torch.full((GRID.shape[0], 1), 0.4)
    with torch.no_grad():
        assert abs(trapezoid(dyn_log_density(dyn, GRID, x_prev)) - 1) < 1e-3


def test_gaussian_dynamic_density_integrates_to_one():
    store = ParamStore()
    dyn = GaussianDynamic(store, "d", 1, "mlp", generator=make_generator(0))
    perturb(store, 0.5)
    x_prev = torch.full((GRID.shape[0], 1), -1.3)
    with torch.no_grad():
        assert abs(trapezoid(dyn_log_density(dyn, GRID, x_prev)) - 1) < 1e-3


def cnf_proposal(seed=0):
    store = ParamStore()
    dyn = linear_dyn(store)
    prop = CNFProposal(CouplingFlow(store, "q", 1, 1, 3, 8, make_generator(seed)))
    perturb(store, 0.3, seed)
    return store, dyn, prop


def test_conditional_flow_proposal_density_integrates_to_one():
    _, dyn, prop = cnf_proposal(4)
    x_prev = torch.full((GRID.shape[0], 1), 0.8)
    with torch.no_grad():
        lq = prop.log_density(dyn, GRID, x_prev, torch.tensor([1.1]))
    assert abs(trapezoid(lq) - 1) < 1e-3


def test_sample_and_density_coherence(gen):
    _, dyn, prop = cnf_proposal(5)
    x_prev = torch.randn(20, 1, generator=gen)
    y = torch.tensor([0.3])
    x, log_q = proposal_sample_and_density(prop, dyn, x_prev, y, gen)
    assert torch.allclose(prop.log_density(dyn, x, x_prev, y), log_q, rtol=0, atol=1e-12)
    _, dyn2 = flow_dynamic(2)
    x, log_p = dyn_sample(dyn2, x_prev, gen)
    assert torch.allclose(dyn_log_density(dyn2, x, x_prev), log_p, rtol=0, atol=1e-12)


def test_zero_initialised_proposal_is_bootstrap(gen):
    store = ParamStore()
    dyn = linear_dyn(store)
    prop = CNFProposal(CouplingFlow(store, "q", 1, 1, 2, 4, gen))
    x_prev = torch.randn(8, 1, generator=gen)
    x1, lq1, lp1 = prop.sample(dyn, x_prev, torch.tensor([0.2]), make_generator(9))
    x2, lq2, lp2 = BootstrapProposal().sample(dyn, x_prev, None, make_generator(9))
    assert torch.equal(x1, x2)
    assert torch.allclose(lq1, lq2, atol=1e-15) and torch.allclose(lp1 - lq1, torch.zeros(8))


def test_importance_identity_against_quadrature(gen):
    """E_q[(p_dyn / q) psi] = integral of p_dyn psi for a fixed y."""
    _, dyn, prop = cnf_proposal(6)
    x_prev = torch.full((100_000, 1), 0.5)
    y = torch.tensor([1.4])
    with torch.no_grad():
        x, log_q, log_p = prop.sample(dyn, x_prev, y, gen)
        psi = torch.cos(x[:, 0])
        mc = float((torch.exp(log_p - log_q) * psi).mean())
        p_grid = dyn_log_density(dyn, GRID, x_prev[: GRID.shape[0]])
        exact = float(torch.trapezoid(torch.exp(p_grid) * torch.cos(GRID[:, 0]), GRID[:, 0]))
    assert abs(mc - exact) < 1e-2


def test_analytic_gaussian_at_zero_residual():
    store = ParamStore()
    meas = AnalyticGaussian(store, "m", 1, 1, coef=1.0, obs_var=0.1)
    v = meas_log_lik(meas, torch.tensor([0.7]), torch.tensor([[0.7]]))
    assert float(v) == pytest.approx(-0.5 * math.log(2 * math.pi * 0.1), abs=1e-14)


def test_feature_gaussian_identity_encoders():
    store = ParamStore()
    meas = FeatureGaussian(store, "m", 3, 3, feature_dim=3, obs_encoder=Identity(),
                           state_encoder=Identity(), decoder=Identity())
    x = torch.tensor([[0.2, -0.4, 1.0]])
    v = meas_log_lik(meas, x[0], x)
    assert float(v) == pytest.approx(-1.5 * math.log(2 * math.pi * 0.25), abs=1e-14)
    assert float(ae_loss(meas, torch.randn(4, 3))) == 0.0


def test_identity_conditional_flow_measurement_is_standard_normal(gen):
    store = ParamStore()
    meas = CNFMeasurement(CouplingFlow(store, "m", 2, 1, 2, 4, gen))
    y = torch.tensor([0.3, -1.2])
    v = meas_log_lik(meas, y, torch.zeros(3, 1))
    ref = float(stats.multivariate_normal(np.zeros(2), np.eye(2)).logpdf(y.numpy()))
    assert torch.allclose(v, torch.full((3,), ref), atol=1e-14)


def test_conditional_flow_measurement_integrates_to_one():
    store = ParamStore()
    meas = CNFMeasurement(CouplingFlow(store, "m", 1, 1, 3, 8, make_generator(7)))
    perturb(store, 0.3, 7)
    x = torch.tensor([[0.6]])
    wide = torch.linspace(-60, 60, 12001)[:, None]  # this flow stretches y by about e^1.6
    with torch.no_grad():
        lp = torch.stack([meas_log_lik(meas, y, x)[0] for y in wide])
    assert abs(trapezoid(lp, wide) - 1) < 1e-3


def test_ae_loss_constant_observation_with_zero_decoder():
    store = ParamStore()
    meas = FeatureGaussian(store, "m", 4, 1, feature_dim=3, generator=make_generator(0))
    with torch.no_grad():
        store["m.D.W1"].zero_()
        store["m.D.b1"].zero_()
    obs = torch.full((6, 4), 1.5)  # T+1 = 6 rows of width k = 4
    assert float(ae_loss(meas, obs)) == pytest.approx(6 * 4 * 1.5**2, rel=1e-14)


def test_ae_loss_gradient():
    store = ParamStore()
    meas = FeatureGaussian(store, "m", 3, 1, feature_dim=2, hidden=4,
                           generator=make_generator(1))
    obs = torch.randn(5, 3, generator=make_generator(2))
    names = [n for n in store if n.startswith(("m.E", "m.D"))]
    assert grad_check(lambda s: ae_loss(meas, obs), store, names=names) < 1e-4


@pytest.mark.parametrize("kind", ["nn_scalar", "feature_cosine", "feature_gaussian"])
def test_learned_measurements_finite_for_extreme_inputs(kind, gen):
    store = ParamStore()
    cls = {"nn_scalar": NNScalar, "feature_cosine": FeatureCosine,
           "feature_gaussian": FeatureGaussian}[kind]
    meas = cls(store, "m", 2, 2, feature_dim=4, hidden=8, generator=gen)
    for scale in (0.0, 1.0, 1e6):
        y = torch.full((2,), scale)
        x = scale * torch.randn(5, 2, generator=gen)
        assert bool(torch.isfinite(meas_log_lik(meas, y, x)).all())


def test_feature_cosine_aligned_features_hit_the_floor():
    store = ParamStore()
    meas = FeatureCosine(store, "m", 2, 2, feature_dim=2, obs_encoder=Identity(),
                         state_encoder=Identity(), decoder=Identity())
    v = meas_log_lik(meas, torch.tensor([1.0, 2.0]), torch.tensor([[2.0, 4.0]]))
    assert float(v) == pytest.approx(-math.log(1e-6))
