"""Multi-density attention network (MDAN) for single-plane loop filtering.

Parameters live in a flat, ordered ``{name: ndarray}`` mapping whose names
mirror the network structure, e.g. ``body.0.mdsa.fusion.down.weight``. The
forward functions take that mapping plus a name prefix, so the same code
evaluates a stand-alone residual block or a block buried inside the body.

Every forward helper named ``_*_fwd`` returns ``(output, cache)`` and has a
``_*_bwd`` partner that consumes the cache, accumulates parameter gradients
into a dict of the same layout and returns the gradient w.r.t. its input.
"""

from collections import OrderedDict
from dataclasses import dataclass
from typing import Dict, Mapping, Optional

import numpy as np

from mdan.tensor import (
    ConvKernel,
    ShapeError,
    broadcast_mul,
    broadcast_mul_backward,
    channel_max,
    channel_max_backward,
    channel_mean,
    channel_mean_backward,
    conv2d,
    conv2d_backward,
    global_avg_pool,
    global_avg_pool_backward,
    max_pool2d_backward,
    max_pool2d_with_indices,
    pixel_shuffle,
    relu,
    relu_backward,
    sigmoid,
    sigmoid_backward,
    softmax_pair,
    softmax_pair_backward,
    space_to_depth,
)


@dataclass(frozen=True)
class MdanConfig:
    channels: int = 64
    mdsa_blocks: int = 8
    p: int = 2
    q: int = 1
    in_planes: int = 1

    def __post_init__(self):
        if self.channels < 8 or self.channels % 8:
            raise ValueError(f"channels must be a positive multiple of 8, got {self.channels}")
        if self.mdsa_blocks < 1:
            raise ValueError("mdsa_blocks must be >= 1")
        if self.p < 0 or self.q < 0:
            raise ValueError("p and q must be non-negative")
        if self.in_planes != 1:
            raise ValueError("only single-plane models are supported (in_planes=1)")

    @property
    def reduction(self):
        """Width of the compact fusion descriptor (C/8)."""
        return self.channels // 8

    @property
    def half_blocks(self):
        return self.q + 2

    @property
    def full_blocks(self):
        return self.q + 4


@dataclass
class MdanParams:
    config: MdanConfig
    tensors: "OrderedDict[str, np.ndarray]"
    qp_band: Optional[int] = None
    seed: Optional[int] = None

    def copy(self):
        return MdanParams(
            self.config,
            OrderedDict((k, v.copy()) for k, v in self.tensors.items()),
            self.qp_band,
            self.seed,
        )

    def zeros_like(self):
        return OrderedDict((k, np.zeros_like(v)) for k, v in self.tensors.items())


# ---------------------------------------------------------------------------
# parameter layout


def _conv_shapes(shapes, name, out_ch, in_ch, k, bias=True, gain=1.0):
    shapes[name + ".weight"] = ((out_ch, in_ch, k, k), gain)
    if bias:
        shapes[name + ".bias"] = ((out_ch,), 0.0)


def _residual_shapes(shapes, pre, ch):
    _conv_shapes(shapes, pre + "conv1", ch, ch, 3)
    # small second-conv gain keeps a freshly initialized stack near identity
    _conv_shapes(shapes, pre + "conv2", ch, ch, 3, gain=0.1)


def _attention_shapes(shapes, pre, q):
    _conv_shapes(shapes, pre + "entry", 1, 2, 3)
    for i in range(2):
        _residual_shapes(shapes, f"{pre}down.{i}.", 1)
    for i in range(q):
        _residual_shapes(shapes, f"{pre}bottleneck.{i}.", 1)
    _conv_shapes(shapes, pre + "up1", 4, 1, 3)
    _residual_shapes(shapes, pre + "up2_block.", 1)
    _conv_shapes(shapes, pre + "up2", 4, 1, 3)


def _fusion_shapes(shapes, pre, ch, r):
    _conv_shapes(shapes, pre + "down", r, ch, 1, bias=False)
    _conv_shapes(shapes, pre + "up_a", ch, r, 1, bias=False)
    _conv_shapes(shapes, pre + "up_b", ch, r, 1, bias=False)
    _conv_shapes(shapes, pre + "out", ch, ch, 1, bias=False, gain=0.1)


def _mdsa_shapes(shapes, pre, config):
    ch = config.channels
    for i in range(config.full_blocks):
        _residual_shapes(shapes, f"{pre}full.{i}.", ch)
    _conv_shapes(shapes, pre + "half.down", ch, ch, 3)
    for i in range(config.half_blocks):
        _residual_shapes(shapes, f"{pre}half.blocks.{i}.", ch)
    _conv_shapes(shapes, pre + "half.up", 4 * ch, ch, 3)
    _attention_shapes(shapes, pre + "attn.", config.q)
    _fusion_shapes(shapes, pre + "fusion.", ch, config.reduction)


def param_shapes(config: MdanConfig):
    """Ordered ``name -> (shape, init_gain)`` for a full model."""
    shapes = OrderedDict()
    ch = config.channels
    _conv_shapes(shapes, "head.conv", ch, config.in_planes, 3)
    _residual_shapes(shapes, "head.block.", ch)
    for k in range(config.mdsa_blocks):
        _mdsa_shapes(shapes, f"body.{k}.mdsa.", config)
        for i in range(config.p):
            _residual_shapes(shapes, f"body.{k}.res.{i}.", ch)
    _conv_shapes(shapes, "tail.conv", config.in_planes, ch, 3, gain=0.1)
    return shapes


def _materialize(shapes, rng):
    tensors = OrderedDict()
    for name, (shape, gain) in shapes.items():
        if name.endswith(".bias") or rng is None or gain == 0.0:
            tensors[name] = np.zeros(shape)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            tensors[name] = rng.normal(0.0, gain * np.sqrt(2.0 / fan_in), size=shape)
    return tensors


def init_params(config: MdanConfig, seed: int) -> MdanParams:
    """Fan-in scaled normal weights, zero biases; deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    return MdanParams(config, _materialize(param_shapes(config), rng), seed=seed)


def zero_params(config: MdanConfig) -> MdanParams:
    return MdanParams(config, _materialize(param_shapes(config), None))


def residual_block_params(channels, rng=None):
    shapes = OrderedDict()
    _residual_shapes(shapes, "", channels)
    return _materialize(shapes, rng)


def attention_params(q=1, rng=None):
    shapes = OrderedDict()
    _attention_shapes(shapes, "", q)
    return _materialize(shapes, rng)


def fusion_params(channels, rng=None):
    shapes = OrderedDict()
    _fusion_shapes(shapes, "", channels, channels // 8)
    return _materialize(shapes, rng)


def mdsa_params(config: MdanConfig, rng=None):
    shapes = OrderedDict()
    _mdsa_shapes(shapes, "", config)
    return _materialize(shapes, rng)


def _group_of(name):
    parts = name.split(".")
    if parts[0] == "body":
        if parts[2] == "mdsa":
            return ".".join(parts[:4])
        return ".".join(parts[:3])
    if parts[0] in ("head", "tail"):
        return parts[0]
    return ""


def param_count(params) -> Dict[str, Dict[str, int]]:
    """Weight and bias counts per sub-module, plus a ``"total"`` entry.

    Accepts an :class:`MdanParams` or any ``{name: array}`` mapping. Names
    under ``body.K.mdsa`` are grouped by branch (``full``, ``half``,
    ``attn``, ``fusion``).
    """
    tensors = params.tensors if isinstance(params, MdanParams) else params
    counts: Dict[str, Dict[str, int]] = OrderedDict()
    total = {"weights": 0, "biases": 0}
    for name, arr in tensors.items():
        kind = "biases" if name.endswith(".bias") else "weights"
        group = counts.setdefault(_group_of(name), {"weights": 0, "biases": 0})
        group[kind] += arr.size
        total[kind] += arr.size
    counts["total"] = total
    return counts


# ---------------------------------------------------------------------------
# forward / backward building blocks


def _conv_fwd(P, name, x, stride=1, pad=1):
    k = ConvKernel(P[name + ".weight"], P.get(name + ".bias"), stride, pad)
    return conv2d(x, k), (x, k, name)


def _conv_bwd(G, dy, cache):
    x, k, name = cache
    gx, gw, gb = conv2d_backward(x, k, dy)
    if G is not None:
        G[name + ".weight"] += gw
        if gb is not None:
            G[name + ".bias"] += gb
    return gx


def _residual_fwd(P, pre, x):
    h1, c1 = _conv_fwd(P, pre + "conv1", x)
    h2, c2 = _conv_fwd(P, pre + "conv2", relu(h1))
    return x + h2, (c1, h1, c2)


def _residual_bwd(G, dy, cache):
    c1, h1, c2 = cache
    da = _conv_bwd(G, dy, c2)
    return dy + _conv_bwd(G, relu_backward(da, h1), c1)


def _check_div4(x, op):
    if x.shape[2] % 4 or x.shape[3] % 4:
        raise ShapeError(f"{op}: spatial dims {x.shape[2]}x{x.shape[3]} must be divisible by 4")


def _attention_fwd(P, pre, f, q):
    _check_div4(f, "attention_branch")
    pooled = np.concatenate([channel_mean(f), channel_max(f)], axis=1)
    e, ce = _conv_fwd(P, pre + "entry", pooled)
    t, i1 = max_pool2d_with_indices(e)
    t, cr1 = _residual_fwd(P, pre + "down.0.", t)
    r1 = t
    t, i2 = max_pool2d_with_indices(r1)
    t, cr2 = _residual_fwd(P, pre + "down.1.", t)
    bottleneck = []
    for j in range(q):
        t, cb = _residual_fwd(P, f"{pre}bottleneck.{j}.", t)
        bottleneck.append(cb)
    u1, cu1 = _conv_fwd(P, pre + "up1", t)
    m = sigmoid(pixel_shuffle(u1, 2))
    r3, cr3 = _residual_fwd(P, pre + "up2_block.", m)
    u2, cu2 = _conv_fwd(P, pre + "up2", r3)
    m_hat = sigmoid(pixel_shuffle(u2, 2))
    cache = (f, e.shape, ce, i1, cr1, r1.shape, i2, cr2, bottleneck, cu1, m, cr3, cu2, m_hat)
    return m, m_hat, cache


def _attention_bwd(G, dm, dm_hat, cache):
    f, e_shape, ce, i1, cr1, r1_shape, i2, cr2, bottleneck, cu1, m, cr3, cu2, m_hat = cache
    d = _conv_bwd(G, space_to_depth(sigmoid_backward(dm_hat, m_hat), 2), cu2)
    dm_total = dm + _residual_bwd(G, d, cr3)
    d = _conv_bwd(G, space_to_depth(sigmoid_backward(dm_total, m), 2), cu1)
    for cb in reversed(bottleneck):
        d = _residual_bwd(G, d, cb)
    d = _residual_bwd(G, d, cr2)
    d = max_pool2d_backward(d, i2, r1_shape)
    d = _residual_bwd(G, d, cr1)
    d = max_pool2d_backward(d, i1, e_shape)
    dpooled = _conv_bwd(G, d, ce)
    return channel_mean_backward(dpooled[:, :1], f.shape) + channel_max_backward(dpooled[:, 1:], f)


def _fusion_fwd(P, pre, u_full, u_half):
    if u_full.shape != u_half.shape:
        raise ShapeError(f"fusion: shape mismatch {u_full.shape} vs {u_half.shape}")
    total = u_full + u_half
    s = global_avg_pool(total)
    z, cz = _conv_fwd(P, pre + "down", s, pad=0)
    a, ca = _conv_fwd(P, pre + "up_a", z, pad=0)
    b, cb = _conv_fwd(P, pre + "up_b", z, pad=0)
    s1, s2 = softmax_pair(a, b)
    mixed = s1 * u_full + s2 * u_half
    out, co = _conv_fwd(P, pre + "out", mixed, pad=0)
    return out, (u_full, u_half, total.shape, cz, ca, cb, s1, s2, co)


def _fusion_bwd(G, dy, cache):
    u_full, u_half, shape, cz, ca, cb, s1, s2, co = cache
    dmixed = _conv_bwd(G, dy, co)
    ds1 = (dmixed * u_full).sum(axis=(2, 3), keepdims=True)
    ds2 = (dmixed * u_half).sum(axis=(2, 3), keepdims=True)
    da, db = softmax_pair_backward(ds1, ds2, s1, s2)
    dz = _conv_bwd(G, da, ca) + _conv_bwd(G, db, cb)
    dtotal = global_avg_pool_backward(_conv_bwd(G, dz, cz), shape)
    return dmixed * s1 + dtotal, dmixed * s2 + dtotal


def _mdsa_fwd(P, pre, x, config):
    _check_div4(x, "mdsa_block")
    m, m_hat, catt = _attention_fwd(P, pre + "attn.", x, config.q)

    t = x
    full = []
    for i in range(config.full_blocks):
        t, c = _residual_fwd(P, f"{pre}full.{i}.", t)
        full.append(c)
    u_full = broadcast_mul(t, m_hat)

    d, cd = _conv_fwd(P, pre + "half.down", x, stride=2, pad=1)
    half = []
    for i in range(config.half_blocks):
        d, c = _residual_fwd(P, f"{pre}half.blocks.{i}.", d)
        half.append(c)
    up, cu = _conv_fwd(P, pre + "half.up", broadcast_mul(d, m))
    u_half = pixel_shuffle(up, 2)

    fused, cf = _fusion_fwd(P, pre + "fusion.", u_full, u_half)
    return x + fused, (catt, m, m_hat, full, t, cd, half, d, cu, cf)


def _mdsa_bwd(G, dy, cache):
    catt, m, m_hat, full, t, cd, half, d, cu, cf = cache
    du_full, du_half = _fusion_bwd(G, dy, cf)

    dd_masked = _conv_bwd(G, space_to_depth(du_half, 2), cu)
    dd, dm = broadcast_mul_backward(dd_masked, d, m)
    for c in reversed(half):
        dd = _residual_bwd(G, dd, c)
    dx = dy + _conv_bwd(G, dd, cd)

    dt, dm_hat = broadcast_mul_backward(du_full, t, m_hat)
    for c in reversed(full):
        dt = _residual_bwd(G, dt, c)
    dx = dx + dt
    return dx + _attention_bwd(G, dm, dm_hat, catt)


def _mdan_fwd(P, config, plane):
    _check_div4(plane, "mdan_forward")
    if plane.shape[1] != config.in_planes:
        raise ShapeError(f"mdan_forward: expected {config.in_planes} plane(s), got {plane.shape}")
    h, ch = _conv_fwd(P, "head.conv", plane)
    h, chb = _residual_fwd(P, "head.block.", h)
    body = []
    for k in range(config.mdsa_blocks):
        h, c = _mdsa_fwd(P, f"body.{k}.mdsa.", h, config)
        res = []
        for i in range(config.p):
            h, cr = _residual_fwd(P, f"body.{k}.res.{i}.", h)
            res.append(cr)
        body.append((c, res))
    t, ct = _conv_fwd(P, "tail.conv", h)
    return plane + t, (ch, chb, body, ct)


def _mdan_bwd(G, dy, cache):
    ch, chb, body, ct = cache
    d = _conv_bwd(G, dy, ct)
    for c, res in reversed(body):
        for cr in reversed(res):
            d = _residual_bwd(G, d, cr)
        d = _mdsa_bwd(G, d, c)
    d = _residual_bwd(G, d, chb)
    return dy + _conv_bwd(G, d, ch)


# ---------------------------------------------------------------------------
# public operations


def residual_block(x, params: Mapping[str, np.ndarray]):
    """``x + conv2(relu(conv1(x)))`` with 3x3 same-size convolutions."""
    return _residual_fwd(params, "", x)[0]


def attention_branch(f, params: Mapping[str, np.ndarray], q: int = 1):
    """Return the half-resolution mask ``m`` and full-resolution mask ``m_hat``."""
    m, m_hat, _ = _attention_fwd(params, "", f, q)
    return m, m_hat


def fusion(u_full, u_half_up, params: Mapping[str, np.ndarray]):
    """Channel-mutual fusion of two equally shaped branch outputs."""
    return _fusion_fwd(params, "", u_full, u_half_up)[0]


def mdsa_block(x, params: Mapping[str, np.ndarray], config: MdanConfig):
    return _mdsa_fwd(params, "", x, config)[0]


def mdan_forward(plane, params: MdanParams):
    """Filter a batch of single planes ``(n, 1, H, W)``; H and W divisible by 4."""
    return _mdan_fwd(params.tensors, params.config, plane)[0]


def mdan_forward_backward(plane, params: MdanParams, grad_fn):
    """Run forward, then backward with the upstream gradient ``grad_fn(output)``.

    ``grad_fn`` returns ``(loss, d_loss/d_output)``. Returns
    ``(output, loss, grads, grad_input)`` where ``grads`` mirrors
    ``params.tensors``.
    """
    out, cache = _mdan_fwd(params.tensors, params.config, plane)
    loss, dout = grad_fn(out)
    grads = params.zeros_like()
    dplane = _mdan_bwd(grads, dout, cache)
    return out, loss, grads, dplane

