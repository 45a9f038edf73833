"""Counting, map-quality, subregion and localization metrics.

Note that ``mse`` here follows crowd-counting convention: it is the *root*
of the mean squared count error.
"""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy import ndimage

from .errors import ParameterError
from .grid import as_grid, integrate, subregion_count, tile_rects
from .pseudo import PointSet

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01**2
SSIM_C2 = 0.03**2


def counting_errors(pred_counts, gt_counts) -> tuple[float, float]:
    """(MAE, root-mean-squared error) between predicted and true counts."""
    pred = np.asarray(pred_counts, dtype=np.float64)
    gt = np.asarray(gt_counts, dtype=np.float64)
    if pred.size == 0 or pred.shape != gt.shape:
        raise ParameterError(f"need equal-length nonempty count lists, got {pred.shape} and {gt.shape}")
    diff = gt - pred
    return float(np.mean(np.abs(diff))), float(np.sqrt(np.mean(diff * diff)))


def _shared_scale(a, b) -> tuple[np.ndarray, np.ndarray]:
    a = as_grid(a, "a").astype(np.float64)
    b = as_grid(b, "b").astype(np.float64)
    if a.shape != b.shape:
        raise ParameterError(f"shape mismatch {a.shape} vs {b.shape}")
    peak = max(a.max(), b.max())
    if peak > 0:
        a, b = a / peak, b / peak
    return a, b


def _ssim_window() -> np.ndarray:
    x = np.arange(SSIM_WINDOW) - SSIM_WINDOW // 2
    k = np.exp(-0.5 * (x / SSIM_SIGMA) ** 2)
    return k / k.sum()


def ssim(a, b) -> float:
    """Mean local SSIM (11x11 Gaussian window, sigma 1.5) after shared-max rescaling."""
    a, b = _shared_scale(a, b)
    k = _ssim_window()

    def smooth(x):
        x = ndimage.correlate1d(x, k, axis=0, mode="reflect")
        return ndimage.correlate1d(x, k, axis=1, mode="reflect")

    mu_a, mu_b = smooth(a), smooth(b)
    var_a = smooth(a * a) - mu_a * mu_a
    var_b = smooth(b * b) - mu_b * mu_b
    cov = smooth(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * cov + SSIM_C2)
    den = (mu_a * mu_a + mu_b * mu_b + SSIM_C1) * (var_a + var_b + SSIM_C2)
    return float(np.mean(num / den))


def psnr(a, b) -> float:
    """Peak signal-to-noise ratio in dB on shared-max-rescaled maps; ``inf`` if identical."""
    a, b = _shared_scale(a, b)
    err = float(np.mean((a - b) ** 2))
    if err == 0.0:
        return math.inf
    return 10.0 * math.log10(1.0 / err)


def tile_counts(grid, tile: int) -> list[float]:
    arr = as_grid(grid)
    return [subregion_count(arr, r) for r in tile_rects(arr.shape, tile)]


def subregion_eval(pred, gt, tile: int) -> tuple[float, float]:
    """Counting errors over corresponding tiles of two maps."""
    pred, gt = as_grid(pred, "pred"), as_grid(gt, "gt")
    if pred.shape != gt.shape:
        raise ParameterError(f"shape mismatch {pred.shape} vs {gt.shape}")
    return counting_errors(tile_counts(pred, tile), tile_counts(gt, tile))


def localize(pred, min_density: float | None = None, nms_radius: float = 2.0) -> PointSet:
    """Density peaks as points, strongest first.

    A peak is a pixel strictly greater than its 8 neighbours and above
    ``min_density`` (default: 0.2 x map max). Peaks closer than
    ``nms_radius`` to a stronger kept peak are suppressed.
    """
    arr = as_grid(pred).astype(np.float64)
    peak = arr.max()
    if peak <= 0:
        return PointSet.empty()
    if min_density is None:
        min_density = 0.2 * peak
    footprint = np.ones((3, 3), dtype=bool)
    footprint[1, 1] = False
    neighbour_max = ndimage.maximum_filter(arr, footprint=footprint, mode="constant", cval=-np.inf)
    vs, us = np.nonzero((arr > neighbour_max) & (arr > min_density))
    values = arr[vs, us]
    order = np.lexsort((us, vs, -values))
    kept: list[tuple[int, int]] = []
    scores = []
    r2 = nms_radius * nms_radius
    for idx in order:
        u, v = int(us[idx]), int(vs[idx])
        if all((u - ku) ** 2 + (v - kv) ** 2 > r2 for ku, kv in kept):
            kept.append((u, v))
            scores.append(values[idx])
    return PointSet(np.array(kept, dtype=np.int64).reshape(-1, 2), scores=np.array(scores))


def match_count(detected: PointSet, gt: PointSet, match_radius: float) -> int:
    """Number of one-to-one matches under the greedy rule of :func:`localization_prf`."""
    det = detected.uv
    ref = gt.uv
    if len(det) == 0 or len(ref) == 0:
        return 0
    if detected.scores is not None:
        order = np.lexsort((det[:, 0], det[:, 1], -np.asarray(detected.scores)))
    else:
        order = np.arange(len(det))
    claimed = np.zeros(len(ref), dtype=bool)
    d2 = ((det[:, None, :] - ref[None, :, :]) ** 2).sum(axis=2)
    matches = 0
    for i in order:
        ok = np.flatnonzero(~claimed & (d2[i] <= match_radius * match_radius))
        if ok.size == 0:
            continue
        best = ok[np.lexsort((ref[ok, 0], ref[ok, 1], d2[i, ok]))[0]]
        claimed[best] = True
        matches += 1
    return matches


def _prf(matches: int, n_det: int, n_gt: int) -> tuple[float, float, float]:
    if n_det == 0 and n_gt == 0:
        return 1.0, 1.0, 1.0
    precision = matches / n_det if n_det else 0.0
    recall = matches / n_gt if n_gt else 0.0
    f1 = 2 * precision * recall / (precision + recall) if matches else 0.0
    return precision, recall, f1


def localization_prf(detected: PointSet, gt: PointSet, match_radius: float) -> tuple[float, float, float]:
    """Greedy one-to-one matching of detections to ground-truth points.

    Detections are visited in descending score order (list order when no
    scores are attached); each claims the nearest unclaimed ground-truth
    point within ``match_radius``, ties broken by coordinates.
    """
    return _prf(match_count(detected, gt, match_radius), len(detected), len(gt))


@dataclass
class EvalReport:
    mae: float
    mse: float
    ssim: float
    psnr: float
    subregion_mae: float | None
    subregion_mse: float | None
    precision: float
    recall: float
    f1: float
    n_images: int

    def to_json(self) -> str:
        d = asdict(self)
        if math.isinf(self.psnr):
            d["psnr"] = "inf"
        return json.dumps(d, indent=2)

    def to_table(self) -> str:
        rows = []
        for k, v in asdict(self).items():
            if v is None:
                text = "-"
            elif isinstance(v, float):
                text = f"{v:.4f}"
            else:
                text = str(v)
            rows.append(f"{k:<14} {text:>12}")
        return "\n".join(rows)


def evaluate(
    preds,
    gts,
    gt_points=None,
    gt_counts=None,
    tile: int | None = None,
    match_radius: float = 4.0,
    min_density: float | None = None,
    nms_radius: float = 2.0,
) -> EvalReport:
    """Full report over aligned lists of predicted and ground-truth maps.

    ``gt_counts`` defaults to the integrals of ``gts``; ``gt_points``
    defaults to peaks localized on ``gts``. PSNR is averaged over finite
    values and reported as ``inf`` only if every pair is identical.
    """
    if len(preds) == 0 or len(preds) != len(gts):
        raise ParameterError(f"need equal nonempty map lists, got {len(preds)} and {len(gts)}")
    pred_counts = [integrate(p) for p in preds]
    if gt_counts is None:
        gt_counts = [integrate(g) for g in gts]
    mae, mse = counting_errors(pred_counts, gt_counts)
    ssims = [ssim(p, g) for p, g in zip(preds, gts)]
    psnrs = [psnr(p, g) for p, g in zip(preds, gts)]
    finite = [x for x in psnrs if math.isfinite(x)]
    mean_psnr = float(np.mean(finite)) if finite else math.inf

    sub_mae = sub_mse = None
    if tile:
        pc, gc = [], []
        for p, g in zip(preds, gts):
            pc += tile_counts(p, tile)
            gc += tile_counts(g, tile)
        sub_mae, sub_mse = counting_errors(pc, gc)

    if gt_points is None:
        gt_points = [localize(g, nms_radius=nms_radius) for g in gts]
    tp = n_det = n_gt = 0
    for p, pts in zip(preds, gt_points):
        det = localize(p, min_density, nms_radius)
        tp += match_count(det, pts, match_radius)
        n_det += len(det)
        n_gt += len(pts)
    precision, recall, f1 = _prf(tp, n_det, n_gt)
    return EvalReport(mae, mse, float(np.mean(ssims)), mean_psnr, sub_mae, sub_mse, precision, recall, f1, len(preds))
