"""Procedural value noise shared by the texture corpus, the mask generator and
the offline anomaly-source fallback."""

from __future__ import annotations

import numpy as np


def _smoothstep(t: np.ndarray) -> np.ndarray:
    return t * t * (3.0 - 2.0 * t)


def value_noise_octave(shape: tuple[int, int], cells: int, rng: np.random.Generator) -> np.ndarray:
    """One octave: random lattice values, smoothstep-interpolated. Range [0, 1]."""
    h, w = shape
    lattice = rng.random((cells + 1, cells + 1))
    ys = np.linspace(0.0, cells, h, endpoint=False)
    xs = np.linspace(0.0, cells, w, endpoint=False)
    y0 = ys.astype(int)
    x0 = xs.astype(int)
    ty = _smoothstep(ys - y0)[:, None]
    tx = _smoothstep(xs - x0)[None, :]
    v00 = lattice[np.ix_(y0, x0)]
    v01 = lattice[np.ix_(y0, x0 + 1)]
    v10 = lattice[np.ix_(y0 + 1, x0)]
    v11 = lattice[np.ix_(y0 + 1, x0 + 1)]
    top = v00 * (1 - tx) + v01 * tx
    bottom = v10 * (1 - tx) + v11 * tx
    return top * (1 - ty) + bottom * ty


def value_noise(
    shape: tuple[int, int],
    rng: np.random.Generator,
    octaves: int = 3,
    base_cells: int = 4,
    persistence: float = 0.5,
) -> np.ndarray:
    """Multi-octave value noise normalised to [0, 1]."""
    total = np.zeros(shape)
    amp = 1.0
    norm = 0.0
    for i in range(octaves):
        cells = min(base_cells * 2**i, max(shape))
        total += amp * value_noise_octave(shape, cells, rng)
        norm += amp
        amp *= persistence
    return total / norm


def random_rotated_rect(shape: tuple[int, int], rng: np.random.Generator) -> np.ndarray:
    """Boolean mask of a random rotated rectangle covering 10-60% of each side."""
    h, w = shape
    cy, cx = rng.uniform(0.2, 0.8) * h, rng.uniform(0.2, 0.8) * w
    half_h = rng.uniform(0.05, 0.3) * h
    half_w = rng.uniform(0.05, 0.3) * w
    theta = rng.uniform(0.0, np.pi)
    yy, xx = np.mgrid[0:h, 0:w]
    dy, dx = yy - cy, xx - cx
    u = dx * np.cos(theta) + dy * np.sin(theta)
    v = -dx * np.sin(theta) + dy * np.cos(theta)
    return (np.abs(u) <= half_w) & (np.abs(v) <= half_h)
