"""Toy-scale supervised training and gradient verification."""

import logging
import math
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Iterator, List, Optional, Sequence

import numpy as np

from mdan.checkpoint import quantize_like_checkpoint, save_checkpoint
from mdan.model import (
    MdanConfig,
    MdanParams,
    init_params,
    mdan_forward,
    mdan_forward_backward,
)

log = logging.getLogger(__name__)


class TrainingDivergence(RuntimeError):
    def __init__(self, step, loss):
        super().__init__(f"training diverged at step {step} (loss={loss})")
        self.step = step
        self.loss = loss


@dataclass(frozen=True)
class TrainConfig:
    patch_size: int = 64
    batch_size: int = 4
    learning_rate: float = 1e-4
    steps: int = 1000
    seed: int = 0
    qp_band: Optional[int] = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.patch_size < 4 or self.patch_size % 4:
            raise ValueError(f"patch_size must be a positive multiple of 4, got {self.patch_size}")
        if self.batch_size < 1 or self.steps < 0:
            raise ValueError("batch_size must be positive and steps non-negative")
        if self.learning_rate < 0:
            raise ValueError("learning_rate must be non-negative")


@dataclass
class PatchPair:
    rec_patch: np.ndarray
    org_patch: np.ndarray
    frame: int
    offset: tuple
    index: int


@dataclass
class TrainData:
    """Aligned reconstructed / original planes as integer arrays."""

    rec: Sequence[np.ndarray]
    org: Sequence[np.ndarray]
    bit_depth: int = 8

    def __post_init__(self):
        if len(self.rec) != len(self.org):
            raise ValueError(f"sequence length mismatch: {len(self.rec)} vs {len(self.org)}")
        if not len(self.rec):
            raise ValueError("training data is empty")
        for i, (r, o) in enumerate(zip(self.rec, self.org)):
            if np.shape(r) != np.shape(o):
                raise ValueError(f"frame {i}: rec {np.shape(r)} vs org {np.shape(o)}")


def _patch_rng(seed, index):
    return np.random.default_rng([seed, index])


def sample_patch(data: TrainData, patch_size, seed, index) -> PatchPair:
    """Patch ``index`` of the stream; depends only on (seed, index)."""
    rng = _patch_rng(seed, index)
    frame = int(rng.integers(len(data.rec)))
    h, w = np.shape(data.rec[frame])
    if patch_size > h or patch_size > w:
        raise ValueError(f"patch {patch_size} larger than plane {w}x{h}")
    y0 = int(rng.integers(h - patch_size + 1))
    x0 = int(rng.integers(w - patch_size + 1))
    peak = float((1 << data.bit_depth) - 1)
    sl = (slice(y0, y0 + patch_size), slice(x0, x0 + patch_size))
    rec = np.asarray(data.rec[frame][sl], dtype=np.float64)[None, None] / peak
    org = np.asarray(data.org[frame][sl], dtype=np.float64)[None, None] / peak
    return PatchPair(rec, org, frame, (y0, x0), index)


def sample_patches(data: TrainData, config: TrainConfig, start=0) -> Iterator[PatchPair]:
    """Endless deterministic patch stream beginning at patch ``start``."""
    index = start
    while True:
        yield sample_patch(data, config.patch_size, config.seed, index)
        index += 1


def batch_at(data: TrainData, config: TrainConfig, step):
    first = step * config.batch_size
    pairs = [sample_patch(data, config.patch_size, config.seed, first + i)
             for i in range(config.batch_size)]
    rec = np.concatenate([p.rec_patch for p in pairs])
    org = np.concatenate([p.org_patch for p in pairs])
    return rec, org


def mse_loss(pred, target):
    """Mean squared error and its gradient w.r.t. ``pred``."""
    if pred.shape != target.shape:
        raise ValueError(f"mse_loss: shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


@dataclass
class AdamState:
    step: int
    m: "OrderedDict[str, np.ndarray]"
    v: "OrderedDict[str, np.ndarray]"

    @classmethod
    def fresh(cls, params: MdanParams):
        return cls(0, params.zeros_like(), params.zeros_like())

    def to_extra(self):
        extra = OrderedDict()
        extra["optim.step"] = np.array([float(self.step)])
        for k, v in self.m.items():
            extra["optim.m." + k] = v
        for k, v in self.v.items():
            extra["optim.v." + k] = v
        return extra

    @classmethod
    def from_extra(cls, extra, params: MdanParams):
        if "optim.step" not in extra:
            return cls.fresh(params)
        m = OrderedDict((k, extra["optim.m." + k].reshape(v.shape)) for k, v in params.tensors.items())
        v_ = OrderedDict((k, extra["optim.v." + k].reshape(v.shape)) for k, v in params.tensors.items())
        return cls(int(extra["optim.step"].ravel()[0]), m, v_)


def adam_update(params: MdanParams, grads, state: AdamState, config: TrainConfig):
    """One Adam step in place; tensors and moments are kept at float32 precision."""
    state.step += 1
    t = state.step
    b1, b2 = config.beta1, config.beta2
    lr_t = config.learning_rate * math.sqrt(1 - b2 ** t) / (1 - b1 ** t)
    for name, p in params.tensors.items():
        g = grads[name]
        m = quantize_like_checkpoint(b1 * state.m[name] + (1 - b1) * g)
        v = quantize_like_checkpoint(b2 * state.v[name] + (1 - b2) * g * g)
        state.m[name], state.v[name] = m, v
        delta = lr_t * m / (np.sqrt(v) + config.eps)
        # entries with no update keep their exact value
        params.tensors[name] = np.where(delta == 0, p, quantize_like_checkpoint(p - delta))


@dataclass
class TrainResult:
    params: MdanParams
    state: AdamState
    history: List[tuple] = field(default_factory=list)


def train(config: TrainConfig, data: TrainData, model_config: MdanConfig = None,
          params: MdanParams = None, state: AdamState = None, checkpoint_path=None,
          log_every=0, on_step=None) -> TrainResult:
    """Train for ``config.steps`` more steps; deterministic in (seed, config, data).

    Pass ``params`` and ``state`` (e.g. from a checkpoint) to resume; the
    batch drawn at global step ``t`` only depends on ``t``, so a resumed run
    follows the uninterrupted trajectory exactly.
    """
    if params is None:
        params = init_params(model_config or MdanConfig(), config.seed)
        for k, v in params.tensors.items():
            params.tensors[k] = quantize_like_checkpoint(v)
    else:
        params = params.copy()
    params.qp_band = config.qp_band
    params.seed = config.seed
    state = AdamState.fresh(params) if state is None else state
    result = TrainResult(params, state)

    for _ in range(config.steps):
        step = state.step
        rec, org = batch_at(data, config, step)
        _, loss, grads, _ = mdan_forward_backward(rec, params, lambda out: mse_loss(out, org))
        if not math.isfinite(loss):
            raise TrainingDivergence(step, loss)
        adam_update(params, grads, state, config)
        result.history.append((step, loss))
        if log_every and step % log_every == 0:
            log.info("step %d loss %.6e", step, loss)
        if on_step is not None:
            on_step(step, loss)

    if checkpoint_path is not None:
        save_checkpoint(checkpoint_path, params, state.to_extra())
    return result


def format_history(history):
    return "".join(f"{step} {loss:.9e}\n" for step, loss in history)


# ---------------------------------------------------------------------------
# gradient verification


@dataclass
class GradCheckReport:
    errors: "OrderedDict[str, float]"
    tolerance: float

    @property
    def worst(self):
        if not self.errors:
            return None, 0.0
        name = max(self.errors, key=self.errors.get)
        return name, self.errors[name]

    @property
    def max_error(self):
        return self.worst[1]

    @property
    def passed(self):
        return self.max_error <= self.tolerance

    def summary(self):
        name, err = self.worst
        status = "PASS" if self.passed else "FAIL"
        return (f"{status}: max relative error {err:.3e} (tolerance {self.tolerance:.1e}) "
                f"over {len(self.errors)} tensors; worst parameter {name}")


def tensor_relative_error(analytic, numeric):
    """max |a - n| relative to the larger of the two gradients' max-norms."""
    scale = max(np.abs(analytic).max(initial=0.0), np.abs(numeric).max(initial=0.0))
    diff = np.abs(analytic - numeric).max(initial=0.0)
    if scale == 0.0:
        return 0.0 if diff == 0.0 else math.inf
    return float(diff / scale)


def numeric_gradient(fn, arr, step=1e-5):
    """Central differences of scalar ``fn()`` w.r.t. every entry of ``arr`` (in place)."""
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


def gradient_check(config: MdanConfig, tolerance=1e-4, seed=0, size=8,
                   params: MdanParams = None, plane=None, target=None, step=1e-5):
    """Compare analytic parameter gradients with central differences.

    Runs an MSE loss between the network output for a random plane and a
    random target unless ``plane``/``target`` are given.
    """
    if config.channels > 8 or config.mdsa_blocks != 1:
        raise ValueError("gradient_check expects a reduced config (channels <= 8, one MDSA block)")
    rng = np.random.default_rng(seed)
    if params is None:
        params = init_params(config, seed)
        for k, v in params.tensors.items():
            if k.endswith(".bias"):
                params.tensors[k] = rng.normal(0.0, 0.1, v.shape)
    else:
        params = params.copy()
    if plane is None:
        plane = rng.random((1, 1, size, size))
    if target is None:
        target = rng.random(plane.shape)

    _, _, grads, _ = mdan_forward_backward(plane, params, lambda out: mse_loss(out, target))

    def loss():
        return mse_loss(mdan_forward(plane, params), target)[0]

    errors = OrderedDict()
    for name, arr in params.tensors.items():
        numeric = numeric_gradient(loss, arr, step)
        errors[name] = tensor_relative_error(grads[name], numeric)
    return GradCheckReport(errors, tolerance)
