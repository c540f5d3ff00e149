"""Shared test helpers."""

import numpy as np

from guidancelab import GaussianMixture
from guidancelab.schedule import Schedule


def schedule_with_alpha_bars(alpha_bars):
    """Hand-built schedule for edge cases the validated constructor rejects
    (alpha_bar exactly 0 or 1)."""
    ab = np.asarray(alpha_bars, dtype=np.float64)
    prev = np.concatenate(([1.0], ab[:-1]))
    with np.errstate(divide="ignore", invalid="ignore"):
        alphas = np.where(prev > 0, ab / prev, 0.0)
    return Schedule(
        kind="linear",
        T=len(ab),
        beta_min=0.5,
        beta_max=0.5,
        betas=1.0 - alphas,
        alphas=alphas,
        alpha_bars=ab,
        posterior_vars=np.zeros_like(ab),
    )


def single_gaussian(mean, var, dim=1):
    return GaussianMixture(
        weights=np.array([1.0]),
        means=np.full((1, dim), float(mean)),
        var_diags=np.full((1, dim), float(var)),
        coarse_labels=np.array([0]),
        fine_labels=np.array([0]),
    )
