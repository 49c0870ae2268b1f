"""Feature maps: the f-gradient of representative planes, rendered as PGM."""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np


@dataclass(frozen=True)
class FeatureMap:
    output_index: int
    cluster_index: int
    gradient: np.ndarray
    width: int
    height: int

    def __post_init__(self):
        if self.width * self.height != self.gradient.size:
            raise ValueError(
                f"{self.width}x{self.height} image cannot hold {self.gradient.size} values"
            )

    @property
    def image(self):
        return self.gradient.reshape(self.height, self.width)

    def filename(self, suffix="pgm"):
        return f"feat_out{self.output_index}_cluster{self.cluster_index}.{suffix}"


def raster_shape(input_dim, shape=None):
    if shape is not None:
        h, w = shape
        if h * w != input_dim:
            raise ValueError(f"shape {shape} does not match input dimension {input_dim}")
        return int(h), int(w)
    side = math.isqrt(input_dim)
    if side * side != input_dim:
        raise ValueError(f"input dimension {input_dim} is not a square raster; pass shape")
    return side, side


def extract_features(reduction, k, select=None, seed=0, shape=None):
    """One map per cluster of output ``k``: the centroid's f-gradient only.

    ``select`` picks that many clusters at random (seeded); ``None`` keeps all.
    The quadratic slope ``2 c x0`` is never part of a map.
    """
    out = reduction.outputs[k]
    grads = out.gradients
    h, w = raster_shape(grads.shape[1], shape)
    idx = np.arange(grads.shape[0])
    if select is not None and select < idx.size:
        idx = np.sort(np.random.default_rng(seed).choice(idx.size, size=select, replace=False))
    return [FeatureMap(k, int(i), grads[i].copy(), w, h) for i in idx]


def to_pixels(values, scale=None):
    """Sign-symmetric gray levels: 0 -> 128, +M -> 255, -M -> 0.

    ``M`` is the largest magnitude in ``values`` unless ``scale`` is given.
    The top end saturates at 255, so +M and -M are not exact complements.
    """
    values = np.asarray(values, dtype=np.float64)
    if not np.all(np.isfinite(values)):
        raise ValueError("feature values must be finite")
    m = float(np.max(np.abs(values))) if scale is None else float(scale)
    if m == 0.0:
        return np.full(values.shape, 128, dtype=np.uint8)
    return np.clip(np.rint(128.0 + 128.0 * (values / m)), 0, 255).astype(np.uint8)


def export_pgm(fmap: FeatureMap, path, scale=None) -> Path:
    """Write an 8-bit binary (P5) PGM."""
    pixels = to_pixels(fmap.image, scale)
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(f"P5\n{fmap.width} {fmap.height}\n255\n".encode("ascii"))
        fh.write(pixels.tobytes())
    return path


def read_pgm(path) -> np.ndarray:
    """Parse a binary P5 PGM with maxval 255 into a (height, width) array."""
    raw = Path(path).read_bytes()
    tokens, pos = [], 0
    while len(tokens) < 4:
        while raw[pos : pos + 1].isspace():
            pos += 1
        if raw[pos : pos + 1] == b"#":
            pos = raw.index(b"\n", pos) + 1
            continue
        start = pos
        while not raw[pos : pos + 1].isspace():
            pos += 1
        tokens.append(raw[start:pos])
    if tokens[0] != b"P5" or int(tokens[3]) != 255:
        raise ValueError(f"{path}: not an 8-bit P5 PGM")
    w, h = int(tokens[1]), int(tokens[2])
    data = raw[pos + 1 : pos + 1 + w * h]
    if len(data) != w * h:
        raise ValueError(f"{path}: truncated pixel data")
    return np.frombuffer(data, dtype=np.uint8).reshape(h, w)


def export_maps(maps, out_dir, global_norm=False, csv_dump=False):
    """Write every map as PGM (and optionally its raw values as CSV)."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    scale = max(float(np.max(np.abs(m.gradient))) for m in maps) if global_norm and maps else None
    paths = []
    for m in maps:
        paths.append(export_pgm(m, out_dir / m.filename(), scale))
        if csv_dump:
            with open(out_dir / m.filename("csv"), "w", newline="") as fh:
                csv.writer(fh, lineterminator="\n").writerows(m.image.tolist())
    return paths
