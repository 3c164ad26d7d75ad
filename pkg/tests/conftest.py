import numpy as np
import pytest

from sfunida_sim.model import ModelConfig, init_model


def rel_err(a, b):
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def fd_grad(f, x, h=1e-4):
    """Central differences of scalar ``f()`` w.r.t. array ``x`` (perturbed in place)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f()
        x[i] = old - h
        down = f()
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


@pytest.fixture
def small_config():
    return ModelConfig(input_dim=5, hidden_dim=7, feature_dim=6, num_known_classes=3,
                       projection_dim=4)


@pytest.fixture
def small_model(small_config):
    state = init_model(small_config, 3)
    rng = np.random.default_rng(4)
    for k in ("b1", "b2", "bc", "bp"):
        state.params[k] = rng.normal(size=state.params[k].shape) * 0.1
    return state


@pytest.fixture(scope="session")
def acceptance_log(request):
    lines = []
    request.config._acceptance_lines = lines
    return lines


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = getattr(config, "_acceptance_lines", None)
    if lines:
        terminalreporter.section("acceptance criteria")
        for line in lines:
            terminalreporter.write_line(line)


@pytest.fixture(scope="session")
def tiny_settings():
    from sfunida_sim.config import DataConfig, ModelDims, Settings

    return Settings(data=DataConfig(source_per_class=30, target_per_class=20, pretrain_epochs=3),
                    model=ModelDims(hidden_dim=16, feature_dim=16, projection_dim=8))
