"""Per-frame least-squares scaling of the network residual.

The encoder regresses the true residual ``org - rec`` on the network residual
``nn - rec`` over a whole plane, quantizes the slope to s16 fixed point with
11 fractional bits and signals it; both sides then output
``clip(round(alpha * (nn - rec) + rec))``.
"""

import struct
from dataclasses import dataclass

import numpy as np

FRAC_BITS = 11
ONE_Q = 1 << FRAC_BITS
ALPHA_MIN = -16.0
ALPHA_MAX = 16.0 - 2.0 ** -FRAC_BITS
DEGENERATE_EPS = 1e-12

PLANES = ("Y", "U", "V")
_DEGENERATE_BIT = 0x80
RECORD_SIZE = 3


def round_half_away(x):
    """Round to nearest integer, halves away from zero (works on arrays)."""
    x = np.asarray(x, dtype=np.float64)
    return np.sign(x) * np.floor(np.abs(x) + 0.5)


@dataclass
class ScalingStats:
    self_multi: float = 0.0
    cross_multi: float = 0.0
    sum_org_resi: float = 0.0
    sum_nn_resi: float = 0.0
    n: int = 0

    def __add__(self, other):
        return ScalingStats(
            self.self_multi + other.self_multi,
            self.cross_multi + other.cross_multi,
            self.sum_org_resi + other.sum_org_resi,
            self.sum_nn_resi + other.sum_nn_resi,
            self.n + other.n,
        )


@dataclass
class ScalingFactor:
    alpha_real: float
    alpha_q: int
    plane: str = "Y"
    degenerate: bool = False

    @property
    def alpha(self):
        """The dequantized factor both encoder and decoder apply."""
        return self.alpha_q / ONE_Q

    @classmethod
    def from_real(cls, alpha, plane="Y", degenerate=False):
        return cls(float(alpha), quantize_alpha(alpha), plane, degenerate)


def quantize_alpha(alpha):
    clamped = min(max(float(alpha), ALPHA_MIN), ALPHA_MAX)
    return int(round_half_away(clamped * ONE_Q))


def _check_dims(*planes):
    shapes = {np.shape(p) for p in planes}
    if len(shapes) != 1:
        raise ValueError(f"plane dimension mismatch: {[np.shape(p) for p in planes]}")


def accumulate_stats(p_nn, p_rec, p_org) -> ScalingStats:
    """Regression sums over every sample of the plane."""
    _check_dims(p_nn, p_rec, p_org)
    p_nn, p_rec, p_org = (np.asarray(p) for p in (p_nn, p_rec, p_org))
    if all(np.issubdtype(p.dtype, np.integer) for p in (p_nn, p_rec, p_org)):
        # exact integer sums; order cannot matter
        d_nn = p_nn.astype(np.int64) - p_rec
        d_org = p_org.astype(np.int64) - p_rec
        return ScalingStats(
            float(np.sum(d_nn * d_nn)),
            float(np.sum(d_nn * d_org)),
            float(np.sum(d_org)),
            float(np.sum(d_nn)),
            int(d_nn.size),
        )
    d_nn = (p_nn.astype(np.float64) - p_rec).ravel()
    d_org = (p_org.astype(np.float64) - p_rec).ravel()
    return ScalingStats(
        float(np.dot(d_nn, d_nn)),
        float(np.dot(d_nn, d_org)),
        float(d_org.sum()),
        float(d_nn.sum()),
        int(d_nn.size),
    )


def derive_alpha(stats: ScalingStats, plane="Y", fit_offset=False) -> ScalingFactor:
    """Closed-form least-squares factor for the NN residual.

    By default this is ``cross / self``, the minimizer of
    ``sum((alpha * d_nn - d_org)^2)``, i.e. of exactly the error left after
    applying the factor (which adds no offset). With ``fit_offset=True`` it
    is the slope of a regression line with intercept::

        (n * cross - sum_org * sum_nn) / (n * self - sum_nn^2)

    which coincides with the default when either residual sums to zero.

    Falls back to ``alpha = 1`` (flagged degenerate) when the denominator
    vanishes: an all-zero NN residual, or with ``fit_offset`` a constant one.
    """
    if stats.n < 2:
        raise ValueError(f"need at least 2 samples to derive alpha, got n={stats.n}")
    n = stats.n
    if fit_offset:
        num = n * stats.cross_multi - stats.sum_org_resi * stats.sum_nn_resi
        den = n * stats.self_multi - stats.sum_nn_resi * stats.sum_nn_resi
    else:
        num, den = stats.cross_multi, stats.self_multi
    if abs(den) <= DEGENERATE_EPS * n * max(1.0, stats.self_multi):
        return ScalingFactor.from_real(1.0, plane, degenerate=True)
    return ScalingFactor.from_real(num / den, plane)


def apply_scaling(p_nn, p_rec, factor: ScalingFactor, bit_depth=8):
    """Scale the NN residual by the dequantized factor and re-add ``p_rec``."""
    _check_dims(p_nn, p_rec)
    # alpha_q / 2^11 is exact in binary, so integer inputs give exact products
    alpha = factor.alpha_q / ONE_Q
    rec = np.asarray(p_rec, dtype=np.float64)
    out = round_half_away(alpha * (np.asarray(p_nn, dtype=np.float64) - rec) + rec)
    out = np.clip(out, 0, (1 << bit_depth) - 1)
    dtype = np.asarray(p_rec).dtype
    return out.astype(dtype if np.issubdtype(dtype, np.integer) else np.int64)


def guard_factor(factor: ScalingFactor, p_nn, p_rec, p_org, bit_depth=8) -> ScalingFactor:
    """Encoder-side choice between ``factor``, unity and zero.

    Rounding and clipping can leave the closed-form factor marginally worse
    than passing the NN output (``alpha = 1``) or the reconstruction
    (``alpha = 0``) through unchanged. The encoder holds the original, so it
    signals whichever candidate gives the lowest integer SSE; ties keep
    ``factor``. The decoder needs no change.
    """
    _check_dims(p_nn, p_rec, p_org)
    org = np.asarray(p_org, dtype=np.float64)
    best, best_sse = None, None
    for cand in (factor, ScalingFactor.from_real(1.0, factor.plane), ScalingFactor.from_real(0.0, factor.plane)):
        sse = float(np.sum((apply_scaling(p_nn, p_rec, cand, bit_depth) - org) ** 2))
        if best_sse is None or sse < best_sse:
            best, best_sse = cand, sse
    return best


def encode_factor(factor: ScalingFactor) -> bytes:
    """Pack one factor as ``[plane id | degenerate<<7][alpha_q int16 LE]``."""
    plane_id = PLANES.index(factor.plane)
    if factor.degenerate:
        plane_id |= _DEGENERATE_BIT
    return struct.pack("<Bh", plane_id, factor.alpha_q)


def decode_factor(data: bytes) -> ScalingFactor:
    if len(data) < RECORD_SIZE:
        raise ValueError(f"truncated factor record: {len(data)} of {RECORD_SIZE} bytes")
    plane_id, alpha_q = struct.unpack("<Bh", bytes(data[:RECORD_SIZE]))
    degenerate = bool(plane_id & _DEGENERATE_BIT)
    plane_id &= ~_DEGENERATE_BIT
    if plane_id >= len(PLANES):
        raise ValueError(f"invalid plane id {plane_id} in factor record")
    return ScalingFactor(alpha_q / ONE_Q, alpha_q, PLANES[plane_id], degenerate)
