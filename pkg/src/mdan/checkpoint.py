"""MDAN1 checkpoint files.

Layout (all little-endian)::

    b"MDAN1"
    u32 channels, u32 mdsa_blocks, u32 p, u32 q, u32 in_planes,
    i32 qp_band (-1 when unset), u32 seed
    repeated until EOF:
        u32 name_length, utf-8 name, u32 dims[4], f32 data[prod(dims)]

Vectors are stored with trailing unit dims, e.g. a bias of 64 as (64,1,1,1).
Parameters are float32 on disk; :func:`quantize_like_checkpoint` rounds
in-memory tensors the same way so save/load is lossless.
"""

import struct
from collections import OrderedDict
from pathlib import Path

import numpy as np

from mdan.model import MdanConfig, MdanParams, param_shapes

MAGIC = b"MDAN1"
_HEADER = struct.Struct("<5IiI")


class CheckpointError(ValueError):
    pass


def quantize_like_checkpoint(arr):
    # overflow to inf is caught later by the divergence check
    with np.errstate(over="ignore"):
        return arr.astype("<f4").astype(np.float64)


def _dims4(shape):
    if len(shape) > 4:
        raise CheckpointError(f"tensor rank {len(shape)} exceeds 4")
    return tuple(shape) + (1,) * (4 - len(shape))


def dumps(params: MdanParams, extra=None) -> bytes:
    """Serialize model tensors followed by optional ``extra`` named tensors."""
    cfg = params.config
    qp_band = -1 if params.qp_band is None else int(params.qp_band)
    seed = 0 if params.seed is None else int(params.seed)
    parts = [
        MAGIC,
        _HEADER.pack(cfg.channels, cfg.mdsa_blocks, cfg.p, cfg.q, cfg.in_planes, qp_band, seed),
    ]
    items = list(params.tensors.items()) + list((extra or {}).items())
    for name, arr in items:
        raw = name.encode("utf-8")
        parts.append(struct.pack("<I", len(raw)))
        parts.append(raw)
        parts.append(struct.pack("<4I", *_dims4(np.shape(arr))))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    return b"".join(parts)


def loads(data: bytes):
    """Parse checkpoint bytes into ``(MdanParams, extra)``.

    Tensors whose names belong to the architecture are validated against the
    header's config; anything else is returned in ``extra``.
    """
    if data[: len(MAGIC)] != MAGIC:
        raise CheckpointError("not an MDAN1 checkpoint (bad magic)")
    off = len(MAGIC)
    if len(data) < off + _HEADER.size:
        raise CheckpointError("truncated checkpoint header")
    ch, blocks, p, q, planes, qp_band, seed = _HEADER.unpack_from(data, off)
    off += _HEADER.size
    try:
        config = MdanConfig(ch, blocks, p, q, planes)
    except ValueError as exc:
        raise CheckpointError(f"invalid config in header: {exc}") from exc
    expected = param_shapes(config)

    tensors, extra = OrderedDict(), OrderedDict()
    while off < len(data):
        if off + 4 > len(data):
            raise CheckpointError("truncated tensor record")
        (name_len,) = struct.unpack_from("<I", data, off)
        off += 4
        name = data[off : off + name_len].decode("utf-8")
        off += name_len
        if off + 16 > len(data):
            raise CheckpointError(f"truncated dims for tensor {name!r}")
        dims = struct.unpack_from("<4I", data, off)
        off += 16
        count = int(np.prod(dims))
        if off + 4 * count > len(data):
            raise CheckpointError(f"truncated data for tensor {name!r}")
        arr = np.frombuffer(data, dtype="<f4", count=count, offset=off).astype(np.float64)
        off += 4 * count
        if name in expected:
            shape = expected[name][0]
            if _dims4(shape) != dims:
                raise CheckpointError(
                    f"tensor {name!r} has dims {dims}, config expects {shape}"
                )
            tensors[name] = arr.reshape(shape)
        else:
            extra[name] = arr.reshape(dims)

    missing = [n for n in expected if n not in tensors]
    if missing:
        raise CheckpointError(
            f"checkpoint missing {len(missing)} tensors for its config, e.g. {missing[0]!r}"
        )
    ordered = OrderedDict((n, tensors[n]) for n in expected)
    params = MdanParams(config, ordered, None if qp_band < 0 else qp_band, seed)
    return params, extra


def save_checkpoint(path, params: MdanParams, extra=None):
    Path(path).write_bytes(dumps(params, extra))


def load_checkpoint(path):
    return loads(Path(path).read_bytes())
