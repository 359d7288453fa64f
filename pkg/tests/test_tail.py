import math

import numpy as np
import pytest
import torch
from hypothesis import given, settings, strategies as st

from tailgen import flow, tail
from tailgen.errors import ConfigError, InputError, ModeCollapseError, TrainingAborted
from tailgen.numerics import OptimizerConfig, OptimizerState, step

from test_flow import constant_scale


def identity_tail(dim=2):
    return tail.init_tail(flow.FlowModel(dim, 2, 8), "from_density", arch="coupling")


def params_of(t):
    return [p.detach().clone() for p in t.parameters()]


@pytest.mark.parametrize("arch", ["coupling", "flow_head"])
def test_from_density_reproduces_forward_map(trained_flow, arch):
    model, _ = trained_flow
    t = tail.init_tail(model, "from_density", seed=3, arch=arch)
    z = torch.from_numpy(np.random.default_rng(0).standard_normal((100, 2)))
    with torch.no_grad():
        assert torch.equal(t(z), model(z)[0])


def test_from_density_rejects_non_coupling_arch():
    with pytest.raises(ConfigError):
        tail.init_tail(flow.FlowModel(2, 2, 8), "from_density", arch="mlp")
    with pytest.raises(ConfigError):
        tail.TailNet(2, arch="transformer")


@pytest.mark.parametrize("arch", ["mlp", "residual", "coupling", "flow_head"])
def test_random_init_reproducible(arch):
    d = flow.FlowModel(2, 2, 8)
    a = tail.init_tail(d, "random", seed=5, arch=arch, hidden=8)
    b = tail.init_tail(d, "random", seed=5, arch=arch, hidden=8)
    c = tail.init_tail(d, "random", seed=6, arch=arch, hidden=8)
    for x, y in zip(a.parameters(), b.parameters()):
        assert torch.equal(x, y)
    assert any(not torch.equal(x, y) for x, y in zip(a.parameters(), c.parameters()))


def test_zero_gradient_step_leaves_tail_unchanged():
    t = tail.init_tail(flow.FlowModel(2, 2, 8), "from_density", arch="flow_head", hidden=8)
    before = params_of(t)
    new, _ = step(before, [torch.zeros_like(p) for p in before], OptimizerState(), OptimizerConfig())
    for a, b in zip(before, new):
        assert torch.equal(a, b)


def test_loss_weights_validation():
    with pytest.raises(ConfigError):
        tail.LossWeights(w_pr=0.0)
    with pytest.raises(ConfigError):
        tail.LossWeights(w_d=-1.0)
    with pytest.raises(ConfigError):
        tail.LossWeights(p=0.5)
    with pytest.raises(ConfigError):
        tail.LossWeights(N=10, M=5)


def test_entropy_weight_targets_level():
    for level in (1e-4, 3e-3, 0.05):
        w = tail.LossWeights(w_e=tail.entropy_weight_for_level(level))
        assert w.target_density() == pytest.approx(level, rel=1e-12)
    with pytest.raises(ConfigError):
        tail.entropy_weight_for_level(0.5)


def test_distance_zero_when_batch_is_data():
    z = np.random.default_rng(0).standard_normal((16, 2))
    t = identity_tail()
    terms = tail.loss_terms(t, z, z, flow.FlowModel(2), tail.LossWeights(N=16))
    assert terms.L_d == 0.0


def test_probability_only_single_latent():
    w = tail.LossWeights(w_d=0, w_e=0, w_sc=0, N=1)
    terms = tail.loss_terms(identity_tail(), np.zeros((1, 2)), np.ones((3, 2)), flow.FlowModel(2), w)
    assert terms.L_tot == pytest.approx(1 / (2 * math.pi), abs=1e-15)


def test_single_latent_needs_zero_scattering_weight():
    with pytest.raises(InputError):
        tail.loss_terms(identity_tail(), np.zeros((1, 2)), np.ones((3, 2)), flow.FlowModel(2),
                        tail.LossWeights(N=1))


def test_scattering_for_doubling_map():
    t = identity_tail()
    constant_scale(t.flow, math.log(2))
    z = np.array([[0.3, -0.7], [1.1, 0.4]])
    terms = tail.loss_terms(t, z, np.zeros((2, 2)), flow.FlowModel(2), tail.LossWeights(N=2))
    assert terms.L_sc == pytest.approx(0.25, abs=1e-15)


def test_scattering_hand_sum_general_p_q():
    rng = np.random.default_rng(1)
    d = flow.FlowModel(2, 2, 8)
    t = tail.init_tail(d, "random", seed=1, arch="mlp", hidden=8)
    z = rng.standard_normal((5, 2))
    w = tail.LossWeights(p=3.0, q=1.5, N=5)
    with torch.no_grad():
        tz = t(torch.from_numpy(z)).numpy()
    total = 0.0
    for i in range(5):
        for j in range(5):
            if i != j:
                nz = np.sum(np.abs(z[i] - z[j]) ** 3) ** (1 / 3)
                nt = np.sum(np.abs(tz[i] - tz[j]) ** 3) ** (1 / 3)
                total += nz**1.5 / nt**1.5
    terms = tail.loss_terms(t, z, rng.standard_normal((10, 2)), d, w)
    assert terms.L_sc == pytest.approx(total / 20, rel=1e-12)


def test_terms_match_direct_evaluation(trained_flow, tri_gauss):
    model, _ = trained_flow
    t = tail.init_tail(model, "from_density", seed=0)
    rng = np.random.default_rng(2)
    z = rng.standard_normal((40, 2))
    x = tri_gauss[0].x[:300]
    w = tail.LossWeights(w_d=0.3, w_e=0.7, w_sc=0.01, N=40)
    y = flow.forward(model, z)
    logp = flow.log_density(model, y)
    dmin = np.sqrt(((y[:, None] - x[None]) ** 2).sum(-1)).min(1)
    terms = tail.loss_terms(t, z, x, model, w)
    assert terms.L_pr == pytest.approx(np.exp(logp).mean(), rel=1e-10)
    assert terms.L_e == pytest.approx((np.exp(logp) * logp).mean(), rel=1e-10)
    assert terms.L_d == pytest.approx(dmin.mean(), rel=1e-10)


def test_log_domain_probability_term():
    z = np.random.default_rng(0).standard_normal((8, 2))
    w = tail.LossWeights(N=8, log_domain=True)
    terms = tail.loss_terms(identity_tail(), z, z, flow.FlowModel(2), w)
    assert terms.L_pr == pytest.approx(flow.log_density(flow.FlowModel(2), z).mean(), rel=1e-12)


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 2**31), st.floats(0, 2), st.floats(0, 2), st.floats(0, 2))
def test_exact_decomposition_and_invariants(seed, w_d, w_e, w_sc):
    rng = np.random.default_rng(seed)
    d = flow.FlowModel(2, 2, 8, init="random", seed=seed % 97, init_scale=0.3)
    t = tail.init_tail(d, "random", seed=seed % 89, arch="mlp", hidden=8)
    w = tail.LossWeights(w_d=w_d, w_e=w_e, w_sc=w_sc, N=6)
    z = rng.standard_normal((6, 2))
    a = tail.loss_terms(t, z, rng.standard_normal((20, 2)), d, w)
    b = tail.loss_terms(t, z, rng.standard_normal((9, 2)) * 5, d, w)
    assert a.L_tot == 1.0 * a.L_pr + w_d * a.L_d + w_e * a.L_e + w_sc * a.L_sc
    assert a.L_sc == b.L_sc
    assert a.L_d >= 0 and b.L_d >= 0


def test_mode_collapse_reports_pair():
    d = flow.FlowModel(2, 2, 8)
    t = tail.init_tail(d, "random", seed=0, arch="mlp", hidden=8, init_scale=0.0)
    with pytest.raises(ModeCollapseError) as info:
        tail.loss_terms(t, np.random.default_rng(0).standard_normal((4, 2)), np.zeros((4, 2)), d,
                        tail.LossWeights(N=4))
    i, j = info.value.pair
    assert i != j


def test_persistent_collapse_aborts_training():
    d = flow.FlowModel(2, 2, 8)
    t = tail.init_tail(d, "random", seed=0, arch="mlp", hidden=8, init_scale=0.0)
    with pytest.raises(TrainingAborted, match="mode collapse"):
        tail.train_tail(t, d, np.zeros((8, 2)), tail.LossWeights(N=4), OptimizerConfig(max_epochs=3),
                        eval_size=4)


def test_loss_terms_input_checks():
    t = identity_tail()
    with pytest.raises(InputError):
        tail.loss_terms(t, np.zeros((2, 3)), np.zeros((2, 2)), flow.FlowModel(2), tail.LossWeights(N=2))
    with pytest.raises(InputError):
        tail.loss_terms(t, np.ones((2, 2)), np.array([[np.nan, 0.0]]), flow.FlowModel(2), tail.LossWeights(N=2))


def test_zero_epochs_returns_tail_unchanged():
    d = flow.FlowModel(2, 2, 8)
    t = tail.init_tail(d, "random", seed=0, arch="mlp", hidden=8)
    before = params_of(t)
    t2, trace = tail.train_tail(t, d, np.random.default_rng(0).standard_normal((64, 2)),
                                tail.LossWeights(N=16), OptimizerConfig(max_epochs=0))
    assert len(trace) == 1
    for a, b in zip(before, t2.parameters()):
        assert torch.equal(a, b)


def test_training_leaves_density_untouched():
    d = flow.FlowModel(2, 2, 8, init="random", seed=1, init_scale=0.2)
    before = {k: v.clone() for k, v in d.state_dict().items()}
    t = tail.init_tail(d, "from_density", seed=0, hidden=8)
    tail.train_tail(t, d, flow.sample(d, 64, 0), tail.LossWeights(N=16), OptimizerConfig(max_epochs=3))
    for k, v in d.state_dict().items():
        assert torch.equal(v, before[k])


def test_distance_only_collapses_to_single_point():
    # the density is negligible at the target point, so only L_d drives training;
    # its minimiser is the constant map onto that point
    d = flow.FlowModel(2)
    target = np.tile([[20.0, 20.0]], (64, 1))
    t = tail.init_tail(d, "random", seed=0, arch="mlp", hidden=16)
    w = tail.LossWeights(w_d=1.0, w_e=0.0, w_sc=0.0, N=64)
    opt = OptimizerConfig(step_size=0.05, max_epochs=600, schedule="cosine", patience=600)
    t, trace = tail.train_tail(t, d, target, w, opt, eval_size=64)
    assert trace[-1]["L_d"] < 0.01


def test_training_is_reproducible():
    d = flow.FlowModel(2, 2, 8, init="random", seed=1, init_scale=0.2)
    x = flow.sample(d, 128, 0)
    runs = []
    for _ in range(2):
        t = tail.init_tail(d, "from_density", seed=0, hidden=8)
        runs.append(tail.train_tail(t, d, x, tail.LossWeights(N=32), OptimizerConfig(max_epochs=4, seed=9))[1])
    assert runs[0] == runs[1]


def test_generate_boundary_examples():
    d = flow.FlowModel(2, 2, 8, init="random", seed=2, init_scale=0.3)
    t = tail.init_tail(d, "from_density", arch="coupling")
    np.testing.assert_array_equal(tail.generate_boundary(t, 30, 4), flow.sample(d, 30, 4))
    assert tail.generate_boundary(t, 1, 0).shape == (1, 2)
    assert tail.generate_boundary(t, 0, 0).shape == (0, 2)


def test_trained_tail_reaches_band(trained_tail, trained_flow, epsilon):
    t, _ = trained_tail
    dens = np.exp(flow.log_density(trained_flow[0], tail.generate_boundary(t, 1000, 17)))
    assert np.mean((dens >= 0.2 * epsilon) & (dens <= 5 * epsilon)) >= 0.9
