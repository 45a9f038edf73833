"""Deterministic synthetic crowd scenes and on-disk scene directories."""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from .errors import IntegrityError, ParameterError
from .grid import integrate, load_c2dg, save_c2dg, save_pgm
from .pseudo import DEFAULT_RENDER_SIGMA, PointSet, load_points_csv, render_pseudo_density, save_points_csv

HEAD_VALUE = 0.9
NOISE_LEVEL = 0.05
DATASET_FORMAT_VERSION = 1


class GenerationError(RuntimeError):
    pass


@dataclass
class SceneConfig:
    size: int = 64
    count_range: tuple[int, int] = (5, 50)
    cluster_count: int = 3
    cluster_spread: float = 6.0
    head_radius: int = 1
    background: float = 0.3
    render_sigma: float = DEFAULT_RENDER_SIGMA

    def __post_init__(self):
        self.count_range = tuple(int(c) for c in self.count_range)
        lo, hi = self.count_range
        if self.size < 32:
            raise ParameterError(f"size must be >= 32, got {self.size}")
        if not 0 <= lo <= hi:
            raise ParameterError(f"count_range must satisfy 0 <= lo <= hi, got {self.count_range}")
        if hi > self.size * self.size:
            raise ParameterError(f"count_range upper bound {hi} exceeds pixel capacity")
        if self.cluster_count < 1:
            raise ParameterError("cluster_count must be >= 1")


@dataclass
class SyntheticScene:
    image: np.ndarray
    gt_points: PointSet
    gt_density: np.ndarray
    count: int
    name: str = ""

    @property
    def occupancy(self) -> float:
        """Fraction of pixels painted as heads."""
        return float(np.mean(self.image >= HEAD_VALUE))


def _background(rng: np.random.Generator, size: int, amplitude: float) -> np.ndarray:
    v, u = np.mgrid[0:size, 0:size] / size
    bg = np.zeros((size, size))
    for _ in range(3):
        fu, fv = rng.uniform(0.2, 1.5, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        bg += np.sin(2 * np.pi * (fu * u + fv * v) + phase)
    span = bg.max() - bg.min()
    bg = (bg - bg.min()) / span if span > 0 else np.zeros_like(bg)
    return bg * amplitude


def _place_heads(rng: np.random.Generator, cfg: SceneConfig, count: int) -> np.ndarray:
    size = cfg.size
    centers = rng.uniform(0, size, size=(cfg.cluster_count, 2))
    taken: set[tuple[int, int]] = set()
    points = []
    budget = 100 * count
    attempts = 0
    while len(points) < count:
        if attempts >= budget:
            raise GenerationError(f"could not place {count} distinct heads in {budget} attempts")
        attempts += 1
        c = centers[rng.integers(cfg.cluster_count)]
        u, v = np.clip(np.rint(c + rng.normal(0.0, cfg.cluster_spread, size=2)), 0, size - 1).astype(int)
        if (u, v) in taken:
            continue
        taken.add((u, v))
        points.append((u, v))
    return np.array(points, dtype=np.int64).reshape(-1, 2)


def gen_scene(rng: np.random.Generator, cfg: SceneConfig | None = None, name: str = "") -> SyntheticScene:
    cfg = cfg or SceneConfig()
    lo, hi = cfg.count_range
    count = int(rng.integers(lo, hi + 1))
    uv = _place_heads(rng, cfg, count)

    image = _background(rng, cfg.size, cfg.background)
    r = cfg.head_radius
    dv, du = np.mgrid[-r : r + 1, -r : r + 1]
    disk = du * du + dv * dv <= r * r
    for u, v in uv:
        for ddu, ddv in zip(du[disk], dv[disk]):
            uu, vv = u + ddu, v + ddv
            if 0 <= uu < cfg.size and 0 <= vv < cfg.size:
                image[vv, uu] = HEAD_VALUE
    image = np.clip(image + rng.uniform(0.0, NOISE_LEVEL, size=image.shape), 0.0, 1.0)

    points = PointSet(uv)
    density = render_pseudo_density(points, cfg.render_sigma, (cfg.size, cfg.size))
    return SyntheticScene(image.astype(np.float32), points, density, count, name)


@dataclass
class Dataset:
    train: list[SyntheticScene]
    val: list[SyntheticScene]
    test: list[SyntheticScene]
    manifest: dict = field(default_factory=dict)


def _split_sizes(n: int, split) -> tuple[int, int, int]:
    fr = np.asarray(split, dtype=float)
    if fr.shape != (3,) or np.any(fr < 0) or abs(fr.sum() - 1.0) > 1e-9:
        raise ParameterError(f"split must be three nonnegative fractions summing to 1, got {split}")
    n_train = int(round(n * fr[0]))
    n_val = min(int(round(n * fr[1])), n - n_train)
    return n_train, n_val, n - n_train - n_val


def gen_dataset(seed: int, n: int, cfg: SceneConfig | None = None, split=(0.8, 0.1, 0.1)) -> Dataset:
    """``n`` scenes, scene ``j`` drawn from its own stream ``(seed, j)``, then a seeded split."""
    cfg = cfg or SceneConfig()
    sizes = _split_sizes(n, split)
    scenes = [
        gen_scene(np.random.default_rng(np.random.SeedSequence([seed, j])), cfg, name=f"scene_{j:05d}")
        for j in range(n)
    ]
    order = np.random.default_rng(np.random.SeedSequence([seed, 0xDA7A])).permutation(n)
    parts = np.split(order, [sizes[0], sizes[0] + sizes[1]])
    groups = [[scenes[j] for j in part] for part in parts]
    manifest = {
        "format_version": DATASET_FORMAT_VERSION,
        "seed": seed,
        "n": n,
        "split": list(split),
        "config": asdict(cfg),
        "splits": {
            name: [{"name": s.name, "count": s.count} for s in group]
            for name, group in zip(("train", "val", "test"), groups)
        },
    }
    return Dataset(*groups, manifest=manifest)


def regenerate(manifest: dict) -> Dataset:
    cfg = SceneConfig(**manifest["config"])
    return gen_dataset(manifest["seed"], manifest["n"], cfg, manifest["split"])


def write_dataset(directory, data: Dataset, pgm: bool = True) -> None:
    """One subdirectory per scene: image.c2dg, points.csv, density.c2dg (+ image.pgm)."""
    root = Path(directory)
    for group in (data.train, data.val, data.test):
        for scene in group:
            d = root / scene.name
            d.mkdir(parents=True, exist_ok=True)
            save_c2dg(d / "image.c2dg", scene.image)
            save_c2dg(d / "density.c2dg", scene.gt_density)
            save_points_csv(d / "points.csv", scene.gt_points)
            if pgm:
                save_pgm(d / "image.pgm", scene.image)
    tmp = root / "manifest.json.tmp"
    tmp.write_text(json.dumps(data.manifest, indent=2))
    tmp.replace(root / "manifest.json")


def read_scene(directory, count: int | None = None) -> SyntheticScene:
    """Load one scene directory; points and density are optional when ``count`` is given."""
    d = Path(directory)
    if not (d / "image.c2dg").exists():
        raise IntegrityError(f"{d}: missing image.c2dg")
    image = load_c2dg(d / "image.c2dg")
    points = load_points_csv(d / "points.csv") if (d / "points.csv").exists() else None
    density = load_c2dg(d / "density.c2dg") if (d / "density.c2dg").exists() else None
    if count is None:
        if points is None:
            raise IntegrityError(f"{d}: no count in manifest and no points.csv")
        count = len(points)
    if points is not None and len(points) != count:
        raise IntegrityError(f"{d}: manifest count {count} != {len(points)} points")
    if density is None:
        density = np.zeros_like(image)
    return SyntheticScene(image, points if points is not None else PointSet.empty(), density, count, d.name)


def read_dataset(directory) -> Dataset:
    root = Path(directory)
    try:
        manifest = json.loads((root / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise IntegrityError(f"{root}: manifest.json missing") from exc
    groups = []
    for split in ("train", "val", "test"):
        entries = manifest.get("splits", {}).get(split, [])
        groups.append([read_scene(root / e["name"], e.get("count")) for e in entries])
    return Dataset(*groups, manifest=manifest)


def check_scene(scene: SyntheticScene, tol: float = 1e-4) -> None:
    """Raise if a scene breaks its count invariants."""
    if scene.count != len(scene.gt_points):
        raise IntegrityError(f"{scene.name}: count {scene.count} != {len(scene.gt_points)} points")
    mass = integrate(scene.gt_density)
    if abs(mass - scene.count) > tol:
        raise IntegrityError(f"{scene.name}: density integrates to {mass}, count is {scene.count}")
