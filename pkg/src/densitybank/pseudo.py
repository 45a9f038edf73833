"""Pseudo-density maps: sample count-many locations from a prior and render unit-mass kernels."""

from __future__ import annotations

import csv
from dataclasses import dataclass

import numpy as np

from .bank import ProbabilityPrior
from .errors import BoundsError, FormatError, ParameterError
from .grid import gaussian_kernel1d

DEFAULT_RENDER_SIGMA = 0.5


@dataclass
class PointSet:
    """Integer pixel locations, one ``(u, v)`` row each.

    ``flagged`` marks a sampler fallback (support exhausted, or more points
    requested than pixels). ``scores`` optionally carries a confidence per
    point, e.g. the peak value for detections.
    """

    uv: np.ndarray
    flagged: bool = False
    scores: np.ndarray | None = None

    def __post_init__(self):
        self.uv = np.asarray(self.uv, dtype=np.int64).reshape(-1, 2)

    def __len__(self) -> int:
        return self.uv.shape[0]

    def __iter__(self):
        return (tuple(int(c) for c in row) for row in self.uv)

    def as_set(self) -> set[tuple[int, int]]:
        return set(iter(self))

    @classmethod
    def empty(cls) -> PointSet:
        return cls(np.zeros((0, 2), dtype=np.int64))


def _flat_to_points(flat: np.ndarray, width: int) -> np.ndarray:
    return np.stack([flat % width, flat // width], axis=1)


def _mass(prior) -> np.ndarray:
    mass = prior.mass if isinstance(prior, ProbabilityPrior) else np.asarray(prior, dtype=np.float64)
    if mass.ndim != 2:
        raise ParameterError(f"prior must be 2-D, got shape {mass.shape}")
    if np.any(mass < 0) or not np.all(np.isfinite(mass)):
        raise ParameterError("prior must be finite and nonnegative")
    return mass


def _check_count(y: int) -> int:
    if y < 0 or int(y) != y:
        raise ParameterError(f"count must be a nonnegative integer, got {y}")
    return int(y)


def sample_locations(
    prior, y: int, rng: np.random.Generator, fill_exhausted: bool = False
) -> PointSet:
    """Draw ``y`` distinct pixels, each draw proportional to the remaining prior mass.

    Uses exponential race keys (key = Exp(1) / mass, keep the smallest ``y``),
    which has exactly the law of sequential weighted draws without
    replacement; points come back in draw order.

    If ``y`` exceeds the number of pixels with positive mass the result is
    ``flagged`` and holds the whole support; with ``fill_exhausted`` the
    remainder is then drawn uniformly from the zero-mass pixels so the
    result has exactly ``y`` points.
    """
    grid = _mass(prior)
    mass = grid.ravel()
    y = _check_count(y)
    w = grid.shape[1]
    if y > mass.size:
        raise ParameterError(f"cannot place {y} distinct points on {mass.size} pixels")
    if y == 0:
        return PointSet.empty()
    keys = np.full(mass.size, np.inf)
    support = mass > 0
    keys[support] = rng.standard_exponential(int(support.sum())) / mass[support]
    n_support = int(support.sum())
    if y <= n_support:
        chosen = np.argpartition(keys, y - 1)[:y]
        chosen = chosen[np.argsort(keys[chosen], kind="stable")]
        return PointSet(_flat_to_points(chosen, w))
    head = np.flatnonzero(support)
    head = head[np.argsort(keys[head], kind="stable")]
    if not fill_exhausted:
        return PointSet(_flat_to_points(head, w), flagged=True)
    rest = rng.permutation(np.flatnonzero(~support))[: y - n_support]
    return PointSet(_flat_to_points(np.concatenate([head, rest]), w), flagged=True)


def top_k_locations(prior, y: int) -> PointSet:
    """The ``y`` pixels of largest mass; ties go to the smaller row-major index."""
    mass = _mass(prior)
    y = _check_count(y)
    flat = mass.ravel()
    flagged = y > flat.size
    order = np.argsort(-flat, kind="stable")[: min(y, flat.size)]
    return PointSet(_flat_to_points(order, mass.shape[1]), flagged=flagged)


def render_pseudo_density(points: PointSet, sigma: float, shape: tuple[int, int]) -> np.ndarray:
    """Sum of truncated Gaussians, each renormalized after border clipping to mass 1."""
    h, w = shape
    k = gaussian_kernel1d(sigma)
    r = (k.size - 1) // 2
    out = np.zeros((h, w), dtype=np.float64)
    for u, v in points:
        if not (0 <= u < w and 0 <= v < h):
            raise BoundsError(f"point (u={u}, v={v}) outside {w}x{h} grid")
        u0, u1 = max(0, u - r), min(w, u + r + 1)
        v0, v1 = max(0, v - r), min(h, v + r + 1)
        ku = k[u0 - u + r : u1 - u + r]
        kv = k[v0 - v + r : v1 - v + r]
        out[v0:v1, u0:u1] += np.outer(kv / kv.sum(), ku / ku.sum())
    return out.astype(np.float32)


def save_points_csv(path, points: PointSet) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["u", "v"])
        writer.writerows(points.uv.tolist())


def load_points_csv(path) -> PointSet:
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["u", "v"]:
            raise FormatError(f"{path}: expected header 'u,v', got {header!r}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                u, v = (int(c) for c in row)
            except ValueError as exc:
                raise FormatError(f"{path}:{lineno}: expected two integers, got {row!r}") from exc
            rows.append((u, v))
    return PointSet(np.array(rows, dtype=np.int64).reshape(-1, 2))


def rng_for(seed: int, *keys: int) -> np.random.Generator:
    """Independent generator stream for ``(seed, *keys)``, e.g. (seed, epoch, image)."""
    return np.random.default_rng(np.random.SeedSequence([seed, *keys]))

