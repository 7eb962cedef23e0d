import numpy as np
import pytest

from kfc import envs, koopman


@pytest.fixture(scope="session")
def small_cartpole():
    return envs.collect(envs.CartpoleEnv(), episodes=10, steps=300, seed=3)


@pytest.fixture(scope="session")
def linear_cartpole_model(small_cartpole):
    return koopman.fit_linear(small_cartpole)


@pytest.fixture(scope="session")
def small_mlp_model(small_cartpole):
    cfg = koopman.KoopmanTrainConfig(latent_dim=6, hidden_dims=(16,), epochs=3, batch_size=128, seed=1)
    model, _ = koopman.train(small_cartpole, cfg)
    return model


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def pytest_terminal_summary(terminalreporter):
    import sys
    mod = sys.modules.get("test_acceptance") or sys.modules.get("tests.test_acceptance")
    lines = getattr(mod, "LINES", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)
