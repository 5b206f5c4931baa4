"""Blockwise DCT quantization as a stand-in for a real codec's reconstruction."""

import numpy as np
from scipy.fft import dctn, idctn

from mdan.scaling import round_half_away
from mdan.yuv import PlanarFrame

BLOCK = 8


def qp_step(qp):
    """Quantizer step size doubling every 6 QP, 1.0 at QP 4."""
    return 2.0 ** ((qp - 4) / 6.0)


def compress_plane(plane, qp, bit_depth=8):
    """8x8 DCT-II, uniform quantization, reconstruction, rounding and clipping.

    Planes whose size is not a multiple of 8 are edge-extended for the
    transform and cropped afterwards.
    """
    if not 0 <= qp <= 51:
        raise ValueError(f"qp must be in [0, 51], got {qp}")
    h, w = plane.shape
    ph, pw = -h % BLOCK, -w % BLOCK
    x = np.pad(plane.astype(np.float64), ((0, ph), (0, pw)), mode="edge")
    hb, wb = x.shape[0] // BLOCK, x.shape[1] // BLOCK
    blocks = x.reshape(hb, BLOCK, wb, BLOCK).transpose(0, 2, 1, 3)
    coef = dctn(blocks, type=2, axes=(2, 3), norm="ortho")
    step = qp_step(qp)
    coef = round_half_away(coef / step) * step
    rec = idctn(coef, type=2, axes=(2, 3), norm="ortho")
    rec = rec.transpose(0, 2, 1, 3).reshape(x.shape)[:h, :w]
    rec = np.clip(round_half_away(rec), 0, (1 << bit_depth) - 1)
    return rec.astype(plane.dtype)


def simulate_compression(frame: PlanarFrame, qp) -> PlanarFrame:
    return PlanarFrame(
        *(compress_plane(p, qp, frame.bit_depth) for p in frame.planes()),
        bit_depth=frame.bit_depth,
    )


def blockiness(plane, block=BLOCK):
    """Mean |step| across block-boundary columns minus mean |step| elsewhere."""
    d = np.abs(np.diff(plane.astype(np.float64), axis=1))
    cols = np.arange(d.shape[1])
    boundary = (cols % block) == block - 1
    return d[:, boundary].mean() - d[:, ~boundary].mean()
