"""Training loop: pseudo-map supervision from the bank plus the contrastive regularizer."""

from __future__ import annotations

import hashlib
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import bank as bank_mod
from .bank import HistoricalMapBank, make_prior, prior_from_map
from .contrastive import contrastive_loss, select_pairs
from .errors import NumericError, ParameterError
from .grid import integrate, threshold_binarize
from .metrics import counting_errors
from .model import AdamState, ModelParams, adam_step, backward, forward, init_params, sgd_step
from .pseudo import DEFAULT_RENDER_SIGMA, render_pseudo_density, rng_for, sample_locations, top_k_locations
from .saliency import spectral_residual_saliency

log = logging.getLogger(__name__)

BANK_INITS = ("saliency", "blob", "none", "external")
SAMPLERS = ("weighted", "topk")
OPTIMIZERS = ("adam", "sgd")

# stream tags for rng_for(seed, tag, ...)
_SHUFFLE, _SAMPLE, _PAIRS, _LABELED = 1, 2, 3, 4


@dataclass
class TrainConfig:
    epochs: int = 30
    learning_rate: float = 0.001
    optimizer: str = "adam"
    weight_decay: float = 0.0
    alpha: float = 0.7
    tau: float = 0.07
    render_sigma: float = DEFAULT_RENDER_SIGMA
    density_scale: float = 1000.0
    prior_blur_sigma: float = 0.5
    ctr_threshold: float = 0.2
    ctr_patch: int = 8
    ctr_k: int = 8
    ctr_cap: int = 16
    include_positive: bool = False
    seed: int = 0
    labeled_fraction: float = 0.0
    bank_init: str = "saliency"
    blob_radius: int = 8
    saliency_threshold: float | None = 0.35
    external_saliency: list[str] | None = None
    sampler: str = "weighted"
    use_bank: bool = True
    use_contrastive: bool = True
    snapshot_every: int = 0

    def __post_init__(self):
        if self.epochs < 0:
            raise ParameterError(f"epochs must be >= 0, got {self.epochs}")
        for name in ("learning_rate", "tau", "render_sigma", "density_scale", "prior_blur_sigma"):
            if not getattr(self, name) > 0:
                raise ParameterError(f"{name} must be > 0, got {getattr(self, name)}")
        if self.weight_decay < 0:
            raise ParameterError(f"weight_decay must be >= 0, got {self.weight_decay}")
        if not 0.0 <= self.alpha <= 1.0:
            raise ParameterError(f"alpha must lie in [0, 1], got {self.alpha}")
        if not 0.0 <= self.labeled_fraction <= 1.0:
            raise ParameterError(f"labeled_fraction must lie in [0, 1], got {self.labeled_fraction}")
        if self.bank_init not in BANK_INITS:
            raise ParameterError(f"bank_init must be one of {BANK_INITS}, got {self.bank_init!r}")
        if self.optimizer not in OPTIMIZERS:
            raise ParameterError(f"optimizer must be one of {OPTIMIZERS}, got {self.optimizer!r}")
        if self.sampler not in SAMPLERS:
            raise ParameterError(f"sampler must be one of {SAMPLERS}, got {self.sampler!r}")


@dataclass
class StepResult:
    map_loss: float
    ctr_loss: float
    pred_count: float
    n_batches: int


@dataclass
class TrainRecord:
    epoch: int
    map_loss: float
    ctr_loss: float
    train_mae: float
    val_mae: float | None = None
    val_mse: float | None = None
    bank_snapshot: str | None = None

    def to_json(self) -> str:
        return json.dumps(asdict(self), sort_keys=True)


@dataclass
class Normalizer:
    """Per-dataset image standardization."""

    mean: float
    std: float

    @classmethod
    def fit(cls, images) -> Normalizer:
        stack = np.stack([np.asarray(im, dtype=np.float64) for im in images])
        std = float(stack.std())
        return cls(float(stack.mean()), std if std > 0 else 1.0)

    def __call__(self, image) -> np.ndarray:
        return ((np.asarray(image, dtype=np.float64) - self.mean) / self.std).astype(np.float32)


@dataclass
class TrainState:
    params: ModelParams
    bank: HistoricalMapBank
    normalizer: Normalizer
    records: list[TrainRecord] = field(default_factory=list)
    labeled: frozenset[int] = frozenset()
    density_scale: float = 1.0
    adam: AdamState = field(default_factory=AdamState)

    def digest(self) -> str:
        """Hash of params, bank entries and the epoch log."""
        h = hashlib.sha256(self.params.checksum().encode())
        h.update(self.bank.entries.tobytes())
        for r in self.records:
            h.update(r.to_json().encode())
        return h.hexdigest()


def map_loss(pred, target) -> tuple[float, np.ndarray]:
    """Mean squared pixel error and its gradient w.r.t. ``pred``."""
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ParameterError(f"shape mismatch {pred.shape} vs {target.shape}")
    diff = pred - target
    return float(np.mean(diff * diff)), 2.0 * diff / diff.size


def build_bank(images, cfg: TrainConfig) -> HistoricalMapBank:
    n = len(images)
    shape = np.asarray(images[0]).shape
    if cfg.bank_init == "saliency":
        maps = [spectral_residual_saliency(im) for im in images]
        if cfg.saliency_threshold is not None:
            maps = [threshold_binarize(m, cfg.saliency_threshold) for m in maps]
        return bank_mod.init_bank(maps, cfg.alpha)
    if cfg.bank_init == "blob":
        return bank_mod.init_bank_blob(n, shape, cfg.blob_radius, cfg.alpha)
    if cfg.bank_init == "external":
        paths = cfg.external_saliency or []
        if len(paths) != n:
            raise ParameterError(f"external bank init needs {n} saliency files, got {len(paths)}")
        from .saliency import load_external_saliency

        return bank_mod.init_bank([load_external_saliency(p) for p in paths], cfg.alpha)
    return bank_mod.init_bank_zeros(n, shape, cfg.alpha)


def labeled_subset(n: int, fraction: float, seed: int) -> frozenset[int]:
    """Seeded choice of ``round(fraction * n)`` image indices carrying location labels."""
    k = int(round(fraction * n))
    if k == 0:
        return frozenset()
    chosen = rng_for(seed, _LABELED).choice(n, size=k, replace=False)
    return frozenset(int(i) for i in chosen)


def train_step(
    image,
    y: int,
    index: int,
    state: TrainState,
    cfg: TrainConfig,
    rng: np.random.Generator,
    target=None,
) -> StepResult:
    """One optimization step on one image.

    ``image`` must already be normalized. If ``target`` is given (a
    ground-truth map) it replaces the pseudo-density map.
    """
    params, bank = state.params, state.bank
    feats, raw = forward(image, params)
    density = raw / cfg.density_scale

    if target is None:
        if cfg.use_bank:
            prior = make_prior(bank, index, cfg.prior_blur_sigma)
        else:
            prior = prior_from_map(density, cfg.prior_blur_sigma)
        if cfg.sampler == "topk":
            points = top_k_locations(prior, y)
        else:
            points = sample_locations(prior, y, rng, fill_exhausted=True)
        target = render_pseudo_density(points, cfg.render_sigma, density.shape)

    loss_map, g_raw = map_loss(raw, np.asarray(target, dtype=np.float64) * cfg.density_scale)
    loss_ctr, n_batches, g_feats = 0.0, 0, None
    if cfg.use_contrastive:
        batches = select_pairs(
            density, feats, cfg.ctr_threshold, cfg.ctr_patch, cfg.ctr_k, rng, cfg.ctr_cap
        )
        if batches:
            loss_ctr, g_feats = contrastive_loss(batches, cfg.tau, feats.shape, cfg.include_positive)
            n_batches = len(batches)

    if not (np.isfinite(loss_map) and np.isfinite(loss_ctr)):
        raise NumericError(f"non-finite loss on image {index}: map={loss_map} ctr={loss_ctr}")
    backward(image, params, g_raw, g_feats)
    if cfg.optimizer == "adam":
        adam_step(params, state.adam, cfg.learning_rate, cfg.weight_decay)
    else:
        sgd_step(params, cfg.learning_rate, cfg.weight_decay)
    if cfg.use_bank:
        bank.stage(index, density)
    return StepResult(loss_map, loss_ctr, float(density.sum()), n_batches)


def predict(image, state_or_params, normalizer: Normalizer | None = None, density_scale: float = 1.0) -> np.ndarray:
    """Density map for a raw image, in people per pixel."""
    if isinstance(state_or_params, TrainState):
        params, normalizer = state_or_params.params, state_or_params.normalizer
        density_scale = state_or_params.density_scale
    else:
        params = state_or_params
    x = normalizer(image) if normalizer is not None else image
    _, raw = forward(x, params)
    return (raw / density_scale).astype(np.float32)


def evaluate_counts(scenes, state: TrainState) -> tuple[float, float]:
    preds = [integrate(predict(s.image, state)) for s in scenes]
    return counting_errors(preds, [s.count for s in scenes])


def train_epoch(
    scenes,
    state: TrainState,
    cfg: TrainConfig,
    epoch: int,
    images=None,
    val=None,
    snapshot_dir=None,
) -> TrainRecord:
    """One pass over ``scenes`` in a seeded order, then the per-image bank update."""
    n = len(scenes)
    if n == 0:
        return TrainRecord(epoch, 0.0, 0.0, 0.0)
    if images is None:
        images = [state.normalizer(s.image) for s in scenes]
    order = rng_for(cfg.seed, _SHUFFLE, epoch).permutation(n)
    map_losses, ctr_losses, abs_err = [], [], []
    for i in order:
        i = int(i)
        scene = scenes[i]
        rng = rng_for(cfg.seed, _SAMPLE, epoch, i)
        target = None
        if i in state.labeled:
            if len(scene.gt_points) != scene.count:
                raise ParameterError(f"labeled image {i} lacks ground-truth points")
            target = render_pseudo_density(scene.gt_points, cfg.render_sigma, images[i].shape)
        try:
            res = train_step(images[i], scene.count, i, state, cfg, rng, target)
        except NumericError as exc:
            raise NumericError(f"epoch {epoch}, step {len(map_losses)}: {exc}") from exc
        map_losses.append(res.map_loss)
        ctr_losses.append(res.ctr_loss)
        abs_err.append(abs(res.pred_count - scene.count))

    if state.bank.staged:
        state.bank.commit()

    record = TrainRecord(epoch, float(np.mean(map_losses)), float(np.mean(ctr_losses)), float(np.mean(abs_err)))
    if val:
        record.val_mae, record.val_mse = evaluate_counts(val, state)
    if snapshot_dir is not None and cfg.snapshot_every and (epoch + 1) % cfg.snapshot_every == 0:
        path = Path(snapshot_dir) / f"epoch_{epoch + 1:04d}"
        bank_mod.save_bank(state.bank, path)
        record.bank_snapshot = path.name  # relative to snapshot_dir, so logs are path-independent
    return record


def init_state(scenes, cfg: TrainConfig) -> TrainState:
    if not scenes:
        raise ParameterError("training set is empty")
    normalizer = Normalizer.fit([s.image for s in scenes])
    params = init_params(cfg.seed)
    labeled = labeled_subset(len(scenes), cfg.labeled_fraction, cfg.seed)
    if len(labeled) == len(scenes) or not cfg.use_bank:
        bank = bank_mod.init_bank_zeros(len(scenes), np.asarray(scenes[0].image).shape, cfg.alpha)
    else:
        bank = build_bank([s.image for s in scenes], cfg)
    return TrainState(params, bank, normalizer, labeled=labeled, density_scale=cfg.density_scale)


def fit(scenes, cfg: TrainConfig, val=None, log_path=None, snapshot_dir=None, state: TrainState | None = None) -> TrainState:
    """Train for ``cfg.epochs`` epochs; with ``labeled_fraction > 0`` a seeded
    subset of images is supervised by its ground-truth map instead."""
    state = state or init_state(scenes, cfg)
    images = [state.normalizer(s.image) for s in scenes]
    log_fh = open(log_path, "a") if log_path else None
    try:
        for epoch in range(len(state.records), cfg.epochs):
            record = train_epoch(scenes, state, cfg, epoch, images, val, snapshot_dir)
            state.records.append(record)
            log.info("epoch %d: %s", epoch, record.to_json())
            if log_fh:
                log_fh.write(record.to_json() + "\n")
                log_fh.flush()
    finally:
        if log_fh:
            log_fh.close()
    return state


def train_semi(scenes, cfg: TrainConfig, val=None, **kwargs) -> TrainState:
    """Semi-supervised variant; identical to :func:`fit`, named for clarity at call sites."""
    return fit(scenes, cfg, val=val, **kwargs)

