import functools

import numpy as np
import pytest

from mdan.model import MdanConfig


def finite_diff(fn, arr, step=1e-5):
    """Central differences of scalar ``fn()`` w.r.t. ``arr`` (perturbed in place)."""
    flat = arr.reshape(-1)
    grad = np.zeros(flat.size)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        up = fn()
        flat[i] = orig - step
        down = fn()
        flat[i] = orig
        grad[i] = (up - down) / (2 * step)
    return grad.reshape(arr.shape)


def rel_err(a, b):
    scale = max(np.abs(a).max(), np.abs(b).max(), 1e-300)
    return float(np.abs(a - b).max() / scale)


@pytest.fixture
def rng():
    return np.random.default_rng(1234)


@pytest.fixture
def tiny_config():
    return MdanConfig(channels=8, mdsa_blocks=1, p=1, q=1)


TOY_SIZE = (176, 144)


@functools.lru_cache(maxsize=None)
def toy_sequence(seed, bit_depth=10, frames=10):
    from mdan.synthetic import synthetic_sequence
    return tuple(synthetic_sequence(*TOY_SIZE, frames=frames, bit_depth=bit_depth, seed=seed))


@functools.lru_cache(maxsize=None)
def toy_model(qp, bit_depth=10, steps=150, train_frames=7):
    """C=16, 2-block model trained on frames [0, train_frames) of sequence seed 3."""
    from mdan.codec_sim import simulate_compression
    from mdan.training import TrainConfig, TrainData, train

    org = toy_sequence(3, bit_depth)[:train_frames]
    rec = [simulate_compression(f, qp) for f in org]
    data = TrainData([f.y for f in rec], [f.y for f in org], bit_depth)
    cfg = TrainConfig(patch_size=32, batch_size=4, learning_rate=5e-4, steps=steps, seed=0, qp_band=qp)
    return train(cfg, data, MdanConfig(channels=16, mdsa_blocks=2)).params


ACCEPTANCE_LINES = []


def record(label, passed, detail):
    """Log one acceptance line; the caller asserts ``passed`` afterwards."""
    line = f"{'PASS' if passed else 'FAIL'}  {label}: {detail}"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return passed


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
