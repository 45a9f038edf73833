"""Historical map bank: one exponentially averaged density map per training image."""

from __future__ import annotations

import json
import logging
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import IntegrityError, ParameterError, StateError
from .grid import as_grid, gaussian_blur, load_c2dg, normalize_max, save_c2dg

log = logging.getLogger(__name__)

BANK_FORMAT_VERSION = 1
DEFAULT_PRIOR_SIGMA = 2.0
_ENTRY_RE = re.compile(r"^entry_(\d{6})\.c2dg$")


@dataclass
class HistoricalMapBank:
    entries: np.ndarray  # (N, H, W) float32
    alpha: float
    epoch: int = 0
    clamped_updates: int = 0
    _staged: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError(f"alpha must lie in [0, 1], got {self.alpha}")
        self.entries = np.ascontiguousarray(self.entries, dtype=np.float32)
        if self.entries.ndim != 3:
            raise ParameterError(f"entries must be (N, H, W), got {self.entries.shape}")

    def __len__(self) -> int:
        return self.entries.shape[0]

    @property
    def shape(self) -> tuple[int, int]:
        return self.entries.shape[1], self.entries.shape[2]

    def _check_index(self, i: int) -> None:
        if not 0 <= i < len(self):
            raise IndexError(f"bank index {i} out of range for {len(self)} entries")

    def stage(self, i: int, predicted) -> None:
        """Hold the epoch's prediction for image ``i`` until :meth:`commit`."""
        self._check_index(i)
        self._staged[i] = as_grid(predicted, "predicted").copy()

    @property
    def staged(self) -> tuple[int, ...]:
        return tuple(sorted(self._staged))

    def commit(self) -> None:
        """Apply every staged prediction to its own entry and advance the epoch."""
        if not self._staged:
            raise StateError("no staged predictions to commit")
        for i in sorted(self._staged):
            ema_update(self, i, self._staged[i])
        self._staged.clear()
        self.epoch += 1


@dataclass(frozen=True)
class ProbabilityPrior:
    mass: np.ndarray  # (H, W) float64, nonnegative, sums to 1
    degenerate: bool = False

    @property
    def shape(self) -> tuple[int, int]:
        return self.mass.shape


def init_bank(saliency_maps, alpha: float) -> HistoricalMapBank:
    maps = [as_grid(m, "saliency map") for m in saliency_maps]
    if not maps:
        raise ParameterError("need at least one saliency map")
    shape = maps[0].shape
    for i, m in enumerate(maps):
        if m.shape != shape:
            raise ParameterError(f"saliency map {i} has shape {m.shape}, expected {shape}")
    return HistoricalMapBank(np.stack(maps), alpha)


def blob_map(shape: tuple[int, int], radius: int) -> np.ndarray:
    """Disk of ones centred in ``shape`` (offsets with du**2 + dv**2 <= radius**2)."""
    h, w = shape
    if radius < 0 or radius >= min(h, w) / 2:
        raise ParameterError(f"radius must lie in [0, min(H, W)/2), got {radius} for {shape}")
    dv = np.arange(h)[:, None] - h // 2
    du = np.arange(w)[None, :] - w // 2
    return (du * du + dv * dv <= radius * radius).astype(np.float32)


def init_bank_blob(n: int, shape: tuple[int, int], radius: int, alpha: float) -> HistoricalMapBank:
    """Bank whose entries are all the same centred disk."""
    blob = blob_map(shape, radius)
    return HistoricalMapBank(np.repeat(blob[None], n, axis=0), alpha)


def init_bank_zeros(n: int, shape: tuple[int, int], alpha: float) -> HistoricalMapBank:
    """Uninformed bank; its priors fall back to uniform until the first update."""
    return HistoricalMapBank(np.zeros((n, *shape), dtype=np.float32), alpha)


def ema_update(bank: HistoricalMapBank, i: int, predicted) -> None:
    """entry_i <- alpha * predicted + (1 - alpha) * entry_i."""
    bank._check_index(i)
    pred = as_grid(predicted, "predicted")
    if pred.shape != bank.shape:
        raise ParameterError(f"prediction shape {pred.shape} != bank shape {bank.shape}")
    if np.any(pred < 0):
        bank.clamped_updates += 1
        log.warning("negative prediction values clamped for bank entry %d", i)
        pred = np.maximum(pred, 0.0)
    a = bank.alpha
    if a == 1.0:
        bank.entries[i] = pred
    elif a != 0.0:
        old = bank.entries[i].astype(np.float64)
        bank.entries[i] = (a * pred.astype(np.float64) + (1.0 - a) * old).astype(np.float32)


def prior_from_map(grid, blur_sigma: float = DEFAULT_PRIOR_SIGMA) -> ProbabilityPrior:
    """Max-normalize, smooth, then rescale to a mass function.

    An all-zero map yields the uniform prior with ``degenerate=True``.
    """
    arr = as_grid(grid)
    if not np.any(arr > 0):
        h, w = arr.shape
        return ProbabilityPrior(np.full((h, w), 1.0 / (h * w)), degenerate=True)
    smooth = np.maximum(gaussian_blur(normalize_max(arr), blur_sigma).astype(np.float64), 0.0)
    return ProbabilityPrior(smooth / smooth.sum())


def make_prior(bank: HistoricalMapBank, i: int, blur_sigma: float = DEFAULT_PRIOR_SIGMA) -> ProbabilityPrior:
    bank._check_index(i)
    return prior_from_map(bank.entries[i], blur_sigma)


def save_bank(bank: HistoricalMapBank, directory) -> None:
    d = Path(directory)
    d.mkdir(parents=True, exist_ok=True)
    for stale in d.glob("entry_*.c2dg"):
        stale.unlink()
    for i, entry in enumerate(bank.entries):
        save_c2dg(d / f"entry_{i:06d}.c2dg", entry)
    manifest = {
        "format_version": BANK_FORMAT_VERSION,
        "n": len(bank),
        "alpha": bank.alpha,
        "epoch": bank.epoch,
        "shape": list(bank.shape),
    }
    tmp = d / "manifest.json.tmp"
    tmp.write_text(json.dumps(manifest, indent=2))
    tmp.replace(d / "manifest.json")


def load_bank(directory) -> HistoricalMapBank:
    d = Path(directory)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except FileNotFoundError as exc:
        raise IntegrityError(f"{d}: manifest.json missing") from exc
    except json.JSONDecodeError as exc:
        raise IntegrityError(f"{d}: manifest.json unreadable ({exc})") from exc
    for key in ("format_version", "n", "alpha", "epoch", "shape"):
        if key not in manifest:
            raise IntegrityError(f"{d}: manifest lacks field {key!r}")
    if manifest["format_version"] != BANK_FORMAT_VERSION:
        raise IntegrityError(f"{d}: unsupported bank format {manifest['format_version']}")
    n = int(manifest["n"])
    shape = tuple(manifest["shape"])
    found = sorted(int(m.group(1)) for p in d.iterdir() if (m := _ENTRY_RE.match(p.name)))
    expected = list(range(n))
    missing = sorted(set(expected) - set(found))
    if missing:
        raise IntegrityError(f"{d}: missing entry file entry_{missing[0]:06d}.c2dg")
    extra = sorted(set(found) - set(expected))
    if extra:
        raise IntegrityError(f"{d}: unexpected entry file entry_{extra[0]:06d}.c2dg (manifest n={n})")
    entries = []
    for i in expected:
        e = load_c2dg(d / f"entry_{i:06d}.c2dg")
        if e.shape != shape:
            raise IntegrityError(f"{d}: entry_{i:06d}.c2dg has shape {e.shape}, manifest says {shape}")
        entries.append(e)
    if not entries:
        raise IntegrityError(f"{d}: bank has no entries")
    return HistoricalMapBank(np.stack(entries), float(manifest["alpha"]), epoch=int(manifest["epoch"]))
