"""PSNR and Bjontegaard metrics."""

import math
import warnings
from dataclasses import dataclass
from typing import List, Sequence

import numpy as np

# zero-MSE PSNR is reported rather than raised
PSNR_INF = math.inf

YUV_WEIGHTS = (4.0, 1.0, 1.0)


class CurveError(ValueError):
    pass


class DegenerateCurveError(CurveError):
    """The two curves share no rate or quality range to integrate over."""


def psnr(a, b, bit_depth=8):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"psnr: plane dimension mismatch {a.shape} vs {b.shape}")
    mse = np.mean((a - b) ** 2)
    if mse == 0:
        return PSNR_INF
    peak = float((1 << bit_depth) - 1)
    return 10.0 * math.log10(peak * peak / mse)


def yuv_weighted(y, u, v):
    """Combine per-plane results with 4:1:1 weights."""
    wy, wu, wv = YUV_WEIGHTS
    return (wy * y + wu * u + wv * v) / (wy + wu + wv)


@dataclass(frozen=True)
class RDPoint:
    rate: float
    psnr: float


class RDCurve:
    """Four rate/PSNR points sorted by increasing rate."""

    def __init__(self, points: Sequence[RDPoint]):
        points = sorted(points, key=lambda p: p.rate)
        if len(points) != 4:
            raise CurveError(f"an RD curve needs exactly 4 points, got {len(points)}")
        for p in points:
            if not p.rate > 0 or not math.isfinite(p.rate):
                raise CurveError(f"rate must be positive and finite, got {p.rate}")
            if not math.isfinite(p.psnr):
                raise CurveError(f"psnr must be finite, got {p.psnr}")
        rates = [p.rate for p in points]
        if any(r1 >= r2 for r1, r2 in zip(rates, rates[1:])):
            raise CurveError(f"rates must be strictly increasing, got {rates}")
        self.points: List[RDPoint] = list(points)

    @classmethod
    def from_arrays(cls, rates, psnrs):
        return cls([RDPoint(float(r), float(q)) for r, q in zip(rates, psnrs)])

    @property
    def rates(self):
        return np.array([p.rate for p in self.points])

    @property
    def psnrs(self):
        return np.array([p.psnr for p in self.points])

    def issues(self):
        """Shape problems worth reporting; they do not block computation."""
        q = self.psnrs
        if np.any(np.diff(q) < 0):
            return [f"psnr decreases with rate: {q.tolist()}"]
        return []


def _check_curve(curve, label):
    for issue in curve.issues():
        warnings.warn(f"{label} curve: {issue}", stacklevel=3)


def _overlap(a, b, what):
    lo = max(a.min(), b.min())
    hi = min(a.max(), b.max())
    if not hi > lo:
        raise DegenerateCurveError(
            f"no overlapping {what} range: anchor [{a.min():.6g}, {a.max():.6g}] "
            f"vs test [{b.min():.6g}, {b.max():.6g}]"
        )
    return lo, hi


def _mean_over(coeffs, lo, hi):
    integral = np.polyint(coeffs)
    return np.polyval(integral, hi) - np.polyval(integral, lo)


def bd_rate(anchor: RDCurve, test: RDCurve):
    """Average rate change of ``test`` vs ``anchor`` at equal PSNR, in percent."""
    _check_curve(anchor, "anchor")
    _check_curve(test, "test")
    qa, qt = anchor.psnrs, test.psnrs
    lo, hi = _overlap(qa, qt, "PSNR")
    fa = np.polyfit(qa, np.log10(anchor.rates), 3)
    ft = np.polyfit(qt, np.log10(test.rates), 3)
    avg = (_mean_over(ft, lo, hi) - _mean_over(fa, lo, hi)) / (hi - lo)
    return (10.0 ** avg - 1.0) * 100.0


def bd_psnr(anchor: RDCurve, test: RDCurve):
    """Average PSNR change of ``test`` vs ``anchor`` at equal rate, in dB."""
    _check_curve(anchor, "anchor")
    _check_curve(test, "test")
    ra, rt = np.log10(anchor.rates), np.log10(test.rates)
    lo, hi = _overlap(ra, rt, "log-rate")
    fa = np.polyfit(ra, anchor.psnrs, 3)
    ft = np.polyfit(rt, test.psnrs, 3)
    return (_mean_over(ft, lo, hi) - _mean_over(fa, lo, hi)) / (hi - lo)
