"""Cartesian k-space undersampling masks with a centered autocalibration region.

DC sits at index ``n // 2``. Masks hold a boolean ``sampled`` array plus the
metadata needed to reproduce them.
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .arrayio import read_array, write_array, write_json

__all__ = [
    "Mask1D",
    "Mask2D",
    "make_cartesian_1d",
    "make_partial_fourier_1d",
    "make_random_2d",
    "achieved_af",
    "acs_bounds",
    "detect_acs_width",
    "save_mask",
    "load_mask",
    "replicate_1d",
]

SCHEMES_2D = ("uniform-random", "variable-density", "fully-sampled-readout")


def _round_half_up(x):
    return int(np.floor(x + 0.5))


def acs_bounds(n, acs_width):
    """Half-open index range ``[lo, hi)`` of an ACS block of ``acs_width`` centered on DC."""
    lo = n // 2 - acs_width // 2
    return lo, lo + acs_width


@dataclass
class Mask1D:
    sampled: np.ndarray
    acs_width: int
    requested_af: float
    scheme: str = "cartesian1d"
    seed: int | None = None

    @property
    def n(self):
        return self.sampled.shape[0]

    def to_2d(self, rows):
        return replicate_1d(self, rows)


@dataclass
class Mask2D:
    sampled: np.ndarray
    acs_width: int
    requested_af: float
    scheme: str = "uniform-random"
    seed: int | None = None

    @property
    def shape(self):
        return self.sampled.shape


def _check_feasible(n_total, af, forced):
    if not af >= 1:
        raise ValueError(f"acceleration factor must be >= 1, got {af}")
    count = _round_half_up(n_total / af)
    if count < forced:
        raise ValueError(
            f"infeasible mask: round({n_total}/{af}) = {count} lines but {forced} are forced by the ACS"
        )
    return count


def make_cartesian_1d(n, af, acs_width, seed=0):
    """Random 1D Cartesian mask with exactly ``round(n / af)`` sampled lines.

    The ACS block (and DC) is always sampled; the rest are drawn uniformly
    without replacement from the non-ACS lines.
    """
    if acs_width < 0 or acs_width >= n:
        raise ValueError(f"acs_width must be in [0, n), got {acs_width} for n={n}")
    sampled = np.zeros(n, dtype=bool)
    lo, hi = acs_bounds(n, acs_width)
    sampled[lo:hi] = True
    sampled[n // 2] = True
    count = _check_feasible(n, af, int(sampled.sum()))
    rng = np.random.default_rng(seed)
    free = np.flatnonzero(~sampled)
    extra = count - int(sampled.sum())
    sampled[rng.choice(free, size=extra, replace=False)] = True
    return Mask1D(sampled, acs_width, float(af), "cartesian1d", seed)


def make_partial_fourier_1d(n, fraction, acs_width=0):
    """Contiguous block of ``round(fraction * n)`` lines containing DC and the ACS block."""
    if not 0.5 < fraction <= 1.0:
        raise ValueError(f"partial Fourier fraction must be in (0.5, 1], got {fraction}")
    length = _round_half_up(fraction * n)
    lo, hi = acs_bounds(n, acs_width)
    lo, hi = min(lo, n // 2), max(hi, n // 2 + 1)
    start = max(0, hi - length)
    if start > lo:
        raise ValueError(f"ACS block of width {acs_width} does not fit in {length} lines")
    sampled = np.zeros(n, dtype=bool)
    sampled[start : start + length] = True
    return Mask1D(sampled, acs_width, n / length, "partial-fourier", None)


def make_random_2d(rows, cols, af, acs_width, scheme="uniform-random", seed=0):
    """2D random mask with a centered, fully sampled ``acs_width`` square.

    ``variable-density`` selects points with probability proportional to
    ``1 / (1 + d / sigma)``, ``d`` the distance to DC and
    ``sigma = min(rows, cols) / 4``. ``fully-sampled-readout`` replicates a 1D
    Cartesian mask over the columns along every row.
    """
    if scheme not in SCHEMES_2D:
        raise ValueError(f"unknown 2D scheme {scheme!r}; expected one of {SCHEMES_2D}")
    if scheme == "fully-sampled-readout":
        m1 = make_cartesian_1d(cols, af, acs_width, seed)
        return Mask2D(np.tile(m1.sampled, (rows, 1)), acs_width, float(af), scheme, seed)
    if acs_width < 0 or acs_width > min(rows, cols):
        raise ValueError(f"acs_width {acs_width} does not fit in {rows}x{cols}")
    sampled = np.zeros((rows, cols), dtype=bool)
    r0, r1 = acs_bounds(rows, acs_width)
    c0, c1 = acs_bounds(cols, acs_width)
    sampled[r0:r1, c0:c1] = True
    sampled[rows // 2, cols // 2] = True
    count = _check_feasible(rows * cols, af, int(sampled.sum()))
    rng = np.random.default_rng(seed)
    free = np.flatnonzero(~sampled.ravel())
    extra = count - int(sampled.sum())
    if scheme == "uniform-random":
        pick = rng.choice(free, size=extra, replace=False)
    else:
        iy, ix = np.unravel_index(free, sampled.shape)
        d = np.hypot(iy - rows // 2, ix - cols // 2)
        w = 1.0 / (1.0 + d / (min(rows, cols) / 4))
        pick = rng.choice(free, size=extra, replace=False, p=w / w.sum())
    sampled.ravel()[pick] = True
    return Mask2D(sampled, acs_width, float(af), scheme, seed)


def replicate_1d(mask, rows):
    """Repeat a 1D mask (along columns) over ``rows`` rows."""
    m = mask.sampled if isinstance(mask, Mask1D) else np.asarray(mask, dtype=bool)
    acs = mask.acs_width if isinstance(mask, Mask1D) else detect_acs_width(m)
    af = mask.requested_af if isinstance(mask, Mask1D) else achieved_af(m)
    return Mask2D(np.tile(m, (rows, 1)), acs, af, "fully-sampled-readout", getattr(mask, "seed", None))


def achieved_af(mask):
    m = np.asarray(getattr(mask, "sampled", mask), dtype=bool)
    if m.size == 0:
        raise ValueError("mask is empty")
    count = int(m.sum())
    if count == 0:
        raise ValueError("mask has no sampled points")
    return m.size / count


def detect_acs_width(sampled):
    """Width of the largest fully sampled block centered on DC.

    For 1D masks this is the contiguous run around ``n // 2`` that is
    symmetric under the ``acs_bounds`` convention; for 2D masks the largest
    centered square (or, for masks fully sampled along rows, the column run).
    """
    m = np.asarray(sampled, dtype=bool)
    if m.ndim == 1:
        width = 0
        for w in range(1, m.size + 1):
            lo, hi = acs_bounds(m.size, w)
            if lo < 0 or hi > m.size or not m[lo:hi].all():
                break
            width = w
        return width
    if m.all(axis=0).any() and (m == m[:1]).all():
        return detect_acs_width(m[0])
    width = 0
    for w in range(1, min(m.shape) + 1):
        r0, r1 = acs_bounds(m.shape[0], w)
        c0, c1 = acs_bounds(m.shape[1], w)
        if not m[r0:r1, c0:c1].all():
            break
        width = w
    return width


def save_mask(path, mask):
    """Write the mask as a 0/1 float ArrayFile plus a ``<path>.json`` sidecar."""
    path = Path(path)
    write_array(path, mask.sampled.astype(np.float32))
    write_json(
        str(path) + ".json",
        {
            "requested_af": mask.requested_af,
            "acs_width": mask.acs_width,
            "scheme": mask.scheme,
            "seed": mask.seed,
        },
    )


def load_mask(path):
    path = Path(path)
    a = read_array(path)
    if np.iscomplexobj(a) or not np.all((a == 0) | (a == 1)):
        raise ValueError(f"{path}: mask must be a real 0/1 array")
    sampled = a.astype(bool)
    sidecar = Path(str(path) + ".json")
    if sidecar.exists():
        meta = json.loads(sidecar.read_text())
    else:
        meta = {
            "requested_af": achieved_af(sampled),
            "acs_width": detect_acs_width(sampled),
            "scheme": "cartesian1d" if sampled.ndim == 1 else "unknown",
            "seed": None,
        }
    cls = {1: Mask1D, 2: Mask2D}.get(sampled.ndim)
    if cls is None:
        raise ValueError(f"{path}: masks must be 1D or 2D, got shape {sampled.shape}")
    return cls(sampled, int(meta["acs_width"]), float(meta["requested_af"]), meta["scheme"], meta["seed"])
