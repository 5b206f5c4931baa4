"""Frame-level filtering: model registry, tiling, scaling and sidecar files."""

import configparser
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np

from mdan.checkpoint import load_checkpoint
from mdan.metrics import psnr
from mdan.model import MdanParams, mdan_forward
from mdan.scaling import (
    ONE_Q,
    PLANES,
    RECORD_SIZE,
    ScalingFactor,
    accumulate_stats,
    apply_scaling,
    decode_factor,
    derive_alpha,
    encode_factor,
    guard_factor,
    round_half_away,
)
from mdan.yuv import read_yuv420, write_yuv420

QP_BANDS = (22, 27, 32, 37, 42)
PLANE_CLASSES = ("luma", "chroma")
SIDECAR_MAGIC = b"MDSF"


class PipelineError(ValueError):
    pass


# ---------------------------------------------------------------------------
# model registry


def select_band(qp, bands=QP_BANDS):
    """Nearest band to ``qp``; ties go to the lower band."""
    return min(sorted(bands), key=lambda b: (abs(qp - b), b))


@dataclass
class QpBandRegistry:
    """Checkpoint paths per QP band and plane class.

    ``chroma`` falls back to ``luma`` for bands it does not list, and a
    ``default`` checkpoint (if given) serves every band of both classes.
    """

    luma: Dict[int, str] = field(default_factory=dict)
    chroma: Dict[int, str] = field(default_factory=dict)
    default: Optional[str] = None
    _cache: Dict[str, MdanParams] = field(default_factory=dict, repr=False)

    @classmethod
    def from_file(cls, path):
        path = Path(path)
        parser = configparser.ConfigParser()
        if not parser.read(path):
            raise PipelineError(f"cannot read model registry {path}")
        base = path.parent

        def resolve(p):
            p = Path(p)
            return str(p if p.is_absolute() else base / p)

        reg = cls()
        if parser.has_option("default", "model"):
            reg.default = resolve(parser.get("default", "model"))
        for cls_name in PLANE_CLASSES:
            if not parser.has_section(cls_name):
                continue
            table = getattr(reg, cls_name)
            for key, value in parser.items(cls_name):
                try:
                    band = int(key)
                except ValueError:
                    raise PipelineError(f"{path}: [{cls_name}] key {key!r} is not a QP band")
                if band not in QP_BANDS:
                    raise PipelineError(f"{path}: unknown QP band {band}; expected one of {QP_BANDS}")
                table[band] = resolve(value)
        return reg

    @classmethod
    def single(cls, params: MdanParams):
        """Registry serving one in-memory model for everything."""
        reg = cls(default="<memory>")
        reg._cache["<memory>"] = params
        return reg

    def checkpoint_path(self, qp, plane_class="luma"):
        if plane_class not in PLANE_CLASSES:
            raise PipelineError(f"unknown plane class {plane_class!r}")
        band = select_band(qp)
        table = self.chroma if plane_class == "chroma" else self.luma
        if band in table:
            return band, table[band], True
        if band in self.luma:
            return band, self.luma[band], True
        if self.default is not None:
            return band, self.default, False
        raise PipelineError(f"no checkpoint registered for QP band {band} (qp={qp}, {plane_class})")

    def model(self, qp, plane_class="luma") -> MdanParams:
        band, path, banded = self.checkpoint_path(qp, plane_class)
        if path not in self._cache:
            params, _ = load_checkpoint(path)
            self._cache[path] = params
        params = self._cache[path]
        if banded and params.qp_band is not None and params.qp_band != band:
            raise PipelineError(
                f"checkpoint {path} is stamped for QP band {params.qp_band}, "
                f"registry lists it under band {band}"
            )
        return params


# ---------------------------------------------------------------------------
# plane filtering


@dataclass(frozen=True)
class TilingPlan:
    tile_size: int = 128
    overlap: int = 8

    def __post_init__(self):
        if self.tile_size < 4 or self.tile_size % 4:
            raise ValueError(f"tile_size must be a positive multiple of 4, got {self.tile_size}")
        if not 0 <= self.overlap < self.tile_size:
            raise ValueError(f"overlap must be in [0, tile_size), got {self.overlap}")

    def starts(self, length):
        size = min(self.tile_size, length)
        if length <= size:
            return [0]
        stride = size - self.overlap
        starts = list(range(0, length - size, stride))
        starts.append(length - size)
        return starts

    def ramp(self, start, size, length):
        """Blend weights along one axis for a tile at ``start``."""
        w = np.ones(size)
        ramp = np.arange(1, self.overlap + 1) / (self.overlap + 1)
        if start > 0 and self.overlap:
            w[: self.overlap] = ramp
        if start + size < length and self.overlap:
            w[size - self.overlap :] = np.minimum(w[size - self.overlap :], ramp[::-1])
        return w


def normalize(plane, bit_depth):
    return np.asarray(plane, dtype=np.float64) / ((1 << bit_depth) - 1)


def denormalize(x, bit_depth, dtype=np.uint16):
    peak = (1 << bit_depth) - 1
    return np.clip(round_half_away(x * peak), 0, peak).astype(dtype)


def _pad_to_multiple(x, m=4):
    h, w = x.shape
    ph, pw = -h % m, -w % m
    if not ph and not pw:
        return x
    mode = "reflect" if (ph < h and pw < w) else "symmetric"
    return np.pad(x, ((0, ph), (0, pw)), mode=mode)


def filter_plane_float(x, params: MdanParams, tiling: TilingPlan = TilingPlan()):
    """Run the network over a normalized 2-D plane, tiling when it is large."""
    h, w = x.shape
    padded = _pad_to_multiple(x)
    ph, pw = padded.shape
    rows, cols = tiling.starts(ph), tiling.starts(pw)
    if len(rows) == 1 and len(cols) == 1:
        out = mdan_forward(padded[None, None], params)[0, 0]
        return out[:h, :w]
    th, tw = min(tiling.tile_size, ph), min(tiling.tile_size, pw)
    acc = np.zeros_like(padded)
    weight = np.zeros_like(padded)
    for r in rows:
        wr = tiling.ramp(r, th, ph)
        for c in cols:
            tile = padded[r : r + th, c : c + tw]
            y = mdan_forward(tile[None, None], params)[0, 0]
            wt = np.outer(wr, tiling.ramp(c, tw, pw))
            acc[r : r + th, c : c + tw] += wt * y
            weight[r : r + th, c : c + tw] += wt
    return (acc / weight)[:h, :w]


def filter_plane(rec_plane, qp, registry: QpBandRegistry, plane_class="luma",
                 bit_depth=8, tiling: TilingPlan = TilingPlan()):
    """Filter one integer plane with the model registered for ``qp``."""
    params = registry.model(qp, plane_class)
    x = normalize(rec_plane, bit_depth)
    y = filter_plane_float(x, params, tiling)
    return denormalize(y, bit_depth, np.asarray(rec_plane).dtype)


# ---------------------------------------------------------------------------
# sidecar


def write_sidecar(path, factors: List[List[ScalingFactor]]):
    parts = [SIDECAR_MAGIC, struct.pack("<I", len(factors))]
    for frame in factors:
        if [f.plane for f in frame] != list(PLANES):
            raise PipelineError("each frame needs exactly one Y, U, V factor in order")
        parts.extend(encode_factor(f) for f in frame)
    Path(path).write_bytes(b"".join(parts))


def read_sidecar(path) -> List[List[ScalingFactor]]:
    data = Path(path).read_bytes()
    if data[:4] != SIDECAR_MAGIC:
        raise PipelineError(f"{path}: not an MDSF sidecar (bad magic)")
    if len(data) < 8:
        raise PipelineError(f"{path}: truncated sidecar header")
    (count,) = struct.unpack_from("<I", data, 4)
    expected = 8 + count * 3 * RECORD_SIZE
    if len(data) != expected:
        raise PipelineError(
            f"{path}: sidecar declares {count} frames ({expected} bytes) but has {len(data)} bytes"
        )
    frames = []
    off = 8
    for idx in range(count):
        frame = []
        for plane in PLANES:
            f = decode_factor(data[off : off + RECORD_SIZE])
            if f.plane != plane:
                raise PipelineError(f"{path}: frame {idx} record for {f.plane} where {plane} expected")
            frame.append(f)
            off += RECORD_SIZE
        frames.append(frame)
    return frames


def unit_factor(plane):
    return ScalingFactor(1.0, ONE_Q, plane, False)


# ---------------------------------------------------------------------------
# sequences


@dataclass
class PlaneReport:
    frame: int
    plane: str
    psnr_rec: float
    psnr_nn: float
    psnr_filtered: float
    alpha: float

    def line(self):
        return (
            f"{self.frame} {self.plane} {self.psnr_rec:.4f} "
            f"{self.psnr_filtered:.4f} {self.alpha:.6f}"
        )


@dataclass
class SequenceReport:
    planes: List[PlaneReport] = field(default_factory=list)

    def lines(self):
        return [p.line() for p in self.planes]

    def write(self, path):
        Path(path).write_text("\n".join(self.lines()) + "\n")

    def mean_gain(self, plane="Y"):
        rows = [p for p in self.planes if p.plane == plane]
        return float(np.mean([p.psnr_filtered - p.psnr_rec for p in rows]))


def _plane_class(plane):
    return "luma" if plane == "Y" else "chroma"


def filter_sequence(rec_path, out_path, sidecar_path, qp, registry: QpBandRegistry,
                    width, height, bit_depth=8, org_path=None, enable_scaling=True,
                    tiling: TilingPlan = TilingPlan(), fit_offset=False,
                    guard=True) -> SequenceReport:
    """Encoder side: filter every plane, fit and signal per-plane factors."""
    rec_frames = read_yuv420(rec_path, width, height, bit_depth)
    org_frames = None
    if org_path is not None:
        org_frames = read_yuv420(org_path, width, height, bit_depth)
        if len(org_frames) != len(rec_frames):
            raise PipelineError(
                f"original has {len(org_frames)} frames, reconstruction has {len(rec_frames)}"
            )
    elif enable_scaling:
        raise PipelineError("scaling in encoding mode needs the original sequence")

    report = SequenceReport()
    out_frames, factors = [], []
    for idx, rec in enumerate(rec_frames):
        planes, frame_factors = [], []
        for name, p_rec in zip(PLANES, rec.planes()):
            p_nn = filter_plane(p_rec, qp, registry, _plane_class(name), bit_depth, tiling)
            if enable_scaling:
                p_org = org_frames[idx].planes()[PLANES.index(name)]
                factor = derive_alpha(accumulate_stats(p_nn, p_rec, p_org), name, fit_offset)
                if guard:
                    factor = guard_factor(factor, p_nn, p_rec, p_org, bit_depth)
            else:
                factor = unit_factor(name)
            out = apply_scaling(p_nn, p_rec, factor, bit_depth)
            planes.append(out)
            frame_factors.append(factor)
            if org_frames is not None:
                p_org = org_frames[idx].planes()[PLANES.index(name)]
                report.planes.append(PlaneReport(
                    idx, name,
                    psnr(p_rec, p_org, bit_depth),
                    psnr(p_nn, p_org, bit_depth),
                    psnr(out, p_org, bit_depth),
                    factor.alpha,
                ))
            else:
                report.planes.append(PlaneReport(idx, name, np.nan, np.nan, np.nan, factor.alpha))
        out_frames.append(rec.replace(*planes))
        factors.append(frame_factors)

    write_yuv420(out_frames, out_path)
    write_sidecar(sidecar_path, factors)
    return report


def apply_sequence(rec_path, sidecar_path, out_path, qp, registry: QpBandRegistry,
                   width, height, bit_depth=8, tiling: TilingPlan = TilingPlan()):
    """Decoder side: reproduce the encoder output from rec + sidecar alone."""
    rec_frames = read_yuv420(rec_path, width, height, bit_depth)
    factors = read_sidecar(sidecar_path)
    if len(factors) != len(rec_frames):
        raise PipelineError(
            f"sidecar carries {len(factors)} frames but {rec_path} has {len(rec_frames)}"
        )
    out_frames = []
    for rec, frame_factors in zip(rec_frames, factors):
        planes = []
        for factor, p_rec in zip(frame_factors, rec.planes()):
            p_nn = filter_plane(p_rec, qp, registry, _plane_class(factor.plane), bit_depth, tiling)
            planes.append(apply_scaling(p_nn, p_rec, factor, bit_depth))
        out_frames.append(rec.replace(*planes))
    write_yuv420(out_frames, out_path)
    return out_frames
