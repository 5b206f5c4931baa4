"""Deterministic synthetic test sequences (gradients, edges, texture, motion)."""

import numpy as np

from mdan.yuv import PlanarFrame


def _scene(h, w, t, rng_params, scale):
    yy, xx = np.mgrid[0:h, 0:w].astype(np.float64)
    ramp, shapes, waves = rng_params
    img = ramp[0] + ramp[1] * xx / w + ramp[2] * yy / h
    for cy, cx, r, level, vy, vx in shapes:
        cy_t = (cy + vy * t) * h
        cx_t = (cx + vx * t) * w
        disc = (yy - cy_t) ** 2 + (xx - cx_t) ** 2 < (r * min(h, w)) ** 2
        img = np.where(disc, level, img)
    for amp, fy, fx, phase, speed in waves:
        img = img + amp * np.sin(2 * np.pi * (fy * yy / h + fx * xx / w) + phase + speed * t)
    return img * scale


def synthetic_sequence(width, height, frames=10, bit_depth=8, seed=0, noise=1.0):
    """Frames with smooth ramps, moving hard-edged discs and drifting texture."""
    rng = np.random.default_rng(seed)
    peak = (1 << bit_depth) - 1
    scale = peak / 255.0

    def params(n_shapes, n_waves):
        ramp = (rng.uniform(60, 120), rng.uniform(-40, 40), rng.uniform(-40, 40))
        shapes = [
            (rng.uniform(0.2, 0.8), rng.uniform(0.2, 0.8), rng.uniform(0.08, 0.25),
             rng.uniform(20, 235), rng.uniform(-0.02, 0.02), rng.uniform(-0.02, 0.02))
            for _ in range(n_shapes)
        ]
        waves = [
            (rng.uniform(4, 14), rng.uniform(1, 12), rng.uniform(1, 12),
             rng.uniform(0, 2 * np.pi), rng.uniform(-0.3, 0.3))
            for _ in range(n_waves)
        ]
        return ramp, shapes, waves

    luma_p = params(6, 3)
    u_p = params(3, 1)
    v_p = params(3, 1)
    out = []
    for t in range(frames):
        planes = []
        for p, (h, w) in ((luma_p, (height, width)),
                          (u_p, (height // 2, width // 2)),
                          (v_p, (height // 2, width // 2))):
            img = _scene(h, w, t, p, scale)
            img = img + rng.normal(0.0, noise * scale, img.shape)
            planes.append(np.clip(np.rint(img), 0, peak).astype(np.uint16))
        out.append(PlanarFrame(*planes, bit_depth=bit_depth))
    return out
