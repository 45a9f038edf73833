"""
A density map from nothing but a count
======================================

A scene comes with a single number: how many heads are in it. This demo
turns that number into a full training target, one step at a time.

Run it with ``python3 demos/pseudo_density_from_a_count.py``.
"""

import numpy as np

from densitybank.bank import init_bank, make_prior
from densitybank.grid import integrate, save_pgm, threshold_binarize
from densitybank.pseudo import render_pseudo_density, rng_for, sample_locations
from densitybank.saliency import spectral_residual_saliency
from densitybank.synthdata import SceneConfig, gen_scene

###############################################################################
# A synthetic scene: clustered bright heads on a smooth background. We keep
# the true points only to compare against at the end.

scene = gen_scene(np.random.default_rng(4), SceneConfig(size=64, count_range=(30, 30)))
print(f"scene has {scene.count} heads")

###############################################################################
# Before any training there are no predictions to average, so the bank
# entry starts from spectral-residual saliency, binarized to keep only the
# clearly salient pixels.

saliency = threshold_binarize(spectral_residual_saliency(scene.image), 0.35)
bank = init_bank([saliency], alpha=0.7)
print(f"salient pixels: {int(saliency.sum())} of {saliency.size}")

###############################################################################
# The entry is smoothed and rescaled into a probability mass over pixels.

prior = make_prior(bank, 0, blur_sigma=0.5)
print(f"prior sums to {prior.mass.sum():.6f}")

###############################################################################
# Draw ``count`` distinct pixels, each draw proportional to the mass that is
# still left. Exponential race keys do this in one vectorized pass.

points = sample_locations(prior, scene.count, rng_for(0, 0))
print(f"sampled {len(points)} distinct locations (support exhausted: {points.flagged})")

###############################################################################
# Each location becomes a unit-mass Gaussian, so the map integrates back to
# the count we started from.

pseudo = render_pseudo_density(points, 0.5, scene.image.shape)
print(f"pseudo map integrates to {integrate(pseudo):.4f}")

###############################################################################
# How close are the sampled locations to real heads? With a saliency prior
# a good share already land within two pixels.

truth = scene.gt_points.uv
d = np.sqrt(((points.uv[:, None, :] - truth[None, :, :]) ** 2).sum(axis=2)).min(axis=1)
print(f"sampled points within 2 px of a real head: {np.mean(d <= 2):.0%}")

save_pgm("pseudo_density.pgm", pseudo)
save_pgm("scene.pgm", scene.image)
print("wrote scene.pgm and pseudo_density.pgm")
