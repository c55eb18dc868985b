import pytest

from dmft_sgd import InitLaw, ModelSpec, NoiseLaw, Ridge, TimeGrid


def make_spec(**kw):
    base = dict(
        k=1, k_star=1, gamma=0.8, kappa_bar=1.0, eta_schedule=0.8,
        driver="poisson", loss="squared", activation="linear",
        teacher="identity", regularizer=Ridge(0.1),
    )
    base.update(kw)
    return ModelSpec(**base)


def tanh_spec(**kw):
    base = dict(
        loss="huber", activation="tanh", teacher="tanh_noisy",
        noise_law=NoiseLaw(0.1), eta_schedule=3.0,
    )
    base.update(kw)
    return make_spec(**base)


@pytest.fixture
def linear_spec():
    return make_spec()


@pytest.fixture
def short_grid():
    return TimeGrid(T=1.0, delta=0.05)


def correlated_init(rho=0.5):
    return InitLaw.from_blocks([[1.0]], [[rho]], [[1.0]])
