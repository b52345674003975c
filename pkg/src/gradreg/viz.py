"""Binary PGM image grids and histogram CSVs."""

import csv
import math
import os
from dataclasses import dataclass

import numpy as np

from . import model as mdl
from .dataio import one_hot
from .perturb import worst_case_epsilon
from .robust import histogram_counts


@dataclass
class ImageGrid:
    images: list  # equal-shape 2-D float arrays, nominally in [0, 1]
    cols: int = 10
    padding: int = 1

    def __post_init__(self):
        if self.cols < 1:
            raise ValueError("cols must be at least 1")
        if self.padding < 0:
            raise ValueError("padding must be non-negative")
        shapes = {np.shape(im) for im in self.images}
        if len(shapes) > 1:
            raise ValueError(f"tiles differ in shape: {sorted(shapes)}")
        if shapes and len(next(iter(shapes))) != 2:
            raise ValueError("tiles must be 2-D")


def to_bytes(values):
    """Map floats to grey levels: round(clamp(v, 0, 1) * 255), halves up."""
    v = np.clip(np.asarray(values, dtype=np.float64), 0.0, 1.0)
    return np.floor(v * 255.0 + 0.5).astype(np.uint8)


def grid_pixels(grid):
    """Tiles laid out row-major with white gutters between them (no border)."""
    if not grid.images:
        raise ValueError("grid has no tiles")
    h, w = np.shape(grid.images[0])
    cols = min(grid.cols, len(grid.images))
    rows = math.ceil(len(grid.images) / cols)
    pad = grid.padding
    canvas = np.full((rows * h + (rows - 1) * pad, cols * w + (cols - 1) * pad),
                     255, dtype=np.uint8)
    for i, im in enumerate(grid.images):
        r, c = divmod(i, cols)
        top, left = r * (h + pad), c * (w + pad)
        canvas[top:top + h, left:left + w] = to_bytes(im)
    return canvas


def write_pgm_grid(grid, path):
    pixels = grid_pixels(grid)
    with open(path, "wb") as f:
        f.write(b"P5\n%d %d\n255\n" % (pixels.shape[1], pixels.shape[0]))
        f.write(pixels.tobytes())


def read_pgm(path):
    """Inverse of :func:`write_pgm_grid` for files it wrote."""
    with open(path, "rb") as f:
        raw = f.read()
    magic, dims, maxval, rest = raw.split(b"\n", 3)
    if magic != b"P5" or maxval != b"255":
        raise ValueError(f"{path}: not an 8-bit binary PGM")
    w, h = map(int, dims.split())
    return np.frombuffer(rest, dtype=np.uint8, count=w * h).reshape(h, w)


def square_tile_shape(d):
    side = math.isqrt(d)
    if side * side != d:
        raise ValueError(f"cannot infer a square tile from dimension {d}")
    return side, side


def panel_perturbations(model, data, spec):
    """Worst-case perturbation of every row of ``data`` (no clamping)."""
    targets = one_hot(data.labels, data.num_classes)
    grad = mdl.backprop(model, data.inputs, targets).grad_input
    return worst_case_epsilon(grad, spec)


def render_perturbation_panel(model, data, spec, magnify=10.0, out_dir=".",
                              tile_shape=None, cols=10, padding=1):
    """Write originals, clamped perturbed inputs and magnified perturbations.

    Perturbations are drawn as ``0.5 + magnify * eps`` so that zero is mid
    grey. Returns the three file paths.
    """
    if len(data) == 0:
        raise ValueError("no examples to render")
    shape = tile_shape or square_tile_shape(data.dim)
    eps = panel_perturbations(model, data, spec)
    os.makedirs(out_dir, exist_ok=True)
    panels = {
        "originals.pgm": data.inputs,
        "perturbed.pgm": data.inputs + eps,
        "perturbation.pgm": 0.5 + magnify * eps,
    }
    paths = []
    for name, rows in panels.items():
        path = os.path.join(out_dir, name)
        write_pgm_grid(ImageGrid([r.reshape(shape) for r in rows], cols, padding), path)
        paths.append(path)
    return paths


def write_histogram_csv(values, bin_width, path):
    counts = histogram_counts(values, bin_width)
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(["bin_lower", "bin_upper", "count"])
        for k, n in enumerate(counts):
            w.writerow([repr(round(k * bin_width, 12)),
                        repr(round((k + 1) * bin_width, 12)), int(n)])
