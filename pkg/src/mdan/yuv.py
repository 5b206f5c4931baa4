"""Raw planar YUV 4:2:0 files, 8-bit or 10-bit little-endian."""

from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, List

import numpy as np


class YuvFormatError(ValueError):
    pass


@dataclass
class PlanarFrame:
    y: np.ndarray
    u: np.ndarray
    v: np.ndarray
    bit_depth: int = 8

    def __post_init__(self):
        if self.bit_depth not in (8, 10):
            raise YuvFormatError(f"unsupported bit depth {self.bit_depth}")
        h, w = self.y.shape
        if h % 2 or w % 2:
            raise YuvFormatError(f"luma dims must be even, got {w}x{h}")
        chroma = ((h + 1) // 2, (w + 1) // 2)
        if self.u.shape != chroma or self.v.shape != chroma:
            raise YuvFormatError(
                f"chroma planes {self.u.shape}/{self.v.shape} do not match "
                f"luma {w}x{h} (expected {chroma})"
            )

    @property
    def width(self):
        return self.y.shape[1]

    @property
    def height(self):
        return self.y.shape[0]

    @property
    def max_value(self):
        return (1 << self.bit_depth) - 1

    def planes(self):
        return (self.y, self.u, self.v)

    def replace(self, y=None, u=None, v=None):
        return PlanarFrame(
            self.y if y is None else y,
            self.u if u is None else u,
            self.v if v is None else v,
            self.bit_depth,
        )


def frame_samples(width, height):
    return width * height + 2 * ((width + 1) // 2) * ((height + 1) // 2)


def _sample_dtype(bit_depth):
    return np.dtype("u1") if bit_depth == 8 else np.dtype("<u2")


def read_yuv420(path, width, height, bit_depth=8) -> List[PlanarFrame]:
    if width % 2 or height % 2:
        raise YuvFormatError(f"luma dims must be even, got {width}x{height}")
    if bit_depth not in (8, 10):
        raise YuvFormatError(f"unsupported bit depth {bit_depth}")
    dtype = _sample_dtype(bit_depth)
    per_frame = frame_samples(width, height)
    frame_bytes = per_frame * dtype.itemsize
    raw = Path(path).read_bytes()
    if len(raw) % frame_bytes:
        raise YuvFormatError(
            f"{path}: size {len(raw)} bytes is not a multiple of the frame size "
            f"{frame_bytes} bytes ({width}x{height}, {bit_depth}-bit 4:2:0)"
        )
    data = np.frombuffer(raw, dtype=dtype)
    cw, ch = width // 2, height // 2
    frames = []
    for idx in range(len(raw) // frame_bytes):
        chunk = data[idx * per_frame : (idx + 1) * per_frame].astype(np.uint16)
        if bit_depth == 10 and chunk.max(initial=0) > 1023:
            raise YuvFormatError(f"{path}: frame {idx} has samples above 1023 for 10-bit video")
        y = chunk[: width * height].reshape(height, width)
        u = chunk[width * height : width * height + cw * ch].reshape(ch, cw)
        v = chunk[width * height + cw * ch :].reshape(ch, cw)
        frames.append(PlanarFrame(y, u, v, bit_depth))
    return frames


def write_yuv420(frames: Iterable[PlanarFrame], path):
    with open(path, "wb") as fh:
        for idx, frame in enumerate(frames):
            dtype = _sample_dtype(frame.bit_depth)
            for plane in frame.planes():
                if plane.min(initial=0) < 0 or plane.max(initial=0) > frame.max_value:
                    raise YuvFormatError(
                        f"frame {idx}: samples outside [0, {frame.max_value}]"
                    )
                fh.write(np.ascontiguousarray(plane).astype(dtype).tobytes())
