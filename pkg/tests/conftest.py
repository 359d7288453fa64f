import numpy as np
import pytest

from tailgen import data, flow, tail
from tailgen.numerics import OptimizerConfig
from tailgen.scoring import density_threshold

ACCEPTANCE = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tri_gauss():
    """Reference fixture split 80/20 into (train, held-out)."""
    ds = data.generate(data.tri_gauss(seed=0), 3000)
    return data.train_test_split(ds, 0.2, seed=0)


@pytest.fixture(scope="session")
def trained_flow(tri_gauss):
    train, _ = tri_gauss
    model = flow.FlowModel(2, 6, 64, seed=1)
    model, trace = flow.fit_mle(model, train.x, OptimizerConfig(max_epochs=200, batch_size=256, seed=0))
    return model, trace


@pytest.fixture(scope="session")
def epsilon(trained_flow, tri_gauss):
    return density_threshold(trained_flow[0], tri_gauss[0].x, 0.05)


@pytest.fixture(scope="session")
def tail_weights(epsilon):
    return tail.LossWeights(w_e=tail.entropy_weight_for_level(epsilon))


@pytest.fixture(scope="session")
def trained_tail(trained_flow, tri_gauss, tail_weights):
    model, _ = trained_flow
    t = tail.init_tail(model, "from_density", seed=0)
    t, trace = tail.train_tail(t, model, tri_gauss[0].x, tail_weights, OptimizerConfig(max_epochs=200, seed=0))
    return t, trace


def small_flow(seed=0, layers=2, hidden=8, init="random", init_scale=0.3):
    return flow.FlowModel(2, layers, hidden, init=init, seed=seed, init_scale=init_scale)


def grid_integral(model, half=10.0, step=0.05):
    g = np.arange(-half, half, step) + step / 2
    X, Y = np.meshgrid(g, g)
    pts = np.c_[X.ravel(), Y.ravel()]
    return float(np.exp(flow.log_density(model, pts)).sum() * step * step)
