"""Density maps from count-only labels.

A per-image bank of averaged past predictions serves as a sampling prior.
Sampling ``count`` distinct pixels from it and rendering a unit Gaussian at
each gives a pseudo density map, which supervises a small convolutional
network alongside a crowd/background contrastive term on its features.
"""

__version__ = "0.1.0"

from .bank import HistoricalMapBank, ProbabilityPrior, ema_update, init_bank, load_bank, make_prior, save_bank
from .contrastive import PairBatch, PatchEmbedding, contrastive_loss, info_nce, select_pairs
from .errors import BoundsError, FormatError, IntegrityError, NumericError, ParameterError, StateError
from .grid import Rect, integrate, load_c2dg, load_grid, save_c2dg, subregion_count
from .metrics import EvalReport, counting_errors, evaluate, localization_prf, localize, psnr, ssim, subregion_eval
from .model import ModelParams, backward, forward, init_params, load_checkpoint, save_checkpoint, sgd_step
from .pseudo import PointSet, render_pseudo_density, sample_locations, top_k_locations
from .saliency import spectral_residual_saliency
from .synthdata import SceneConfig, SyntheticScene, gen_dataset, gen_scene
from .train import TrainConfig, TrainRecord, fit, map_loss, predict, train_epoch, train_semi, train_step
