"""Two-sample distances and mode diagnostics for low-dimensional point clouds.

Sliced Wasserstein (64 random projections by default) is the headline
scalar; exact 1-D Wasserstein is available where the data is scalar, and a
biased RBF-MMD V-statistic serves as a second opinion.  The mode report
assigns samples to mixture components to expose dropped or collapsed modes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DimensionMismatchError, InvalidParameterError
from .mixtures import GaussianMixture


def wasserstein_1d(a, b) -> float:
    """Exact W1 between equal-size 1-D samples: mean |sorted(a) - sorted(b)|."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    if a.size != b.size:
        raise InvalidParameterError(f"sample counts differ: {a.size} vs {b.size}")
    if a.size == 0:
        raise InvalidParameterError("need at least one sample per side")
    return float(np.mean(np.abs(np.sort(a) - np.sort(b))))


def sliced_wasserstein(a, b, num_projections: int = 64, seed: int = 0) -> float:
    """Mean exact W1 over random unit-vector projections.

    Deterministic given the seed; both samples must share dimension and
    count.  In one dimension this equals wasserstein_1d for any seed because
    the projections reduce to a sign flip, which W1 is invariant to.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatchError(f"dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    if a.shape[0] != b.shape[0]:
        raise InvalidParameterError(f"sample counts differ: {a.shape[0]} vs {b.shape[0]}")
    if num_projections < 1:
        raise InvalidParameterError("need at least one projection")
    rng = np.random.default_rng(seed)
    dirs = rng.standard_normal((num_projections, a.shape[1]))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    pa = np.sort(a @ dirs.T, axis=0)
    pb = np.sort(b @ dirs.T, axis=0)
    return float(np.mean(np.abs(pa - pb)))


def median_heuristic(x) -> float:
    """Median pairwise Euclidean distance, the default MMD bandwidth."""
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    n = x.shape[0]
    if n < 2:
        raise InvalidParameterError("median heuristic needs at least two points")
    sq = _sq_dists(x, x)
    iu = np.triu_indices(n, k=1)
    h = float(np.median(np.sqrt(sq[iu])))
    if h <= 0.0:
        raise InvalidParameterError("all points coincide; bandwidth would be zero")
    return h


def _sq_dists(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    sq = (
        np.sum(a * a, axis=1)[:, None]
        + np.sum(b * b, axis=1)[None, :]
        - 2.0 * (a @ b.T)
    )
    return np.maximum(sq, 0.0)


def mmd_rbf(a, b, bandwidth: float | None = None) -> float:
    """Biased MMD^2 V-statistic with kernel exp(-||x-y||^2 / (2 h^2)).

    bandwidth None applies the median heuristic to b (the reference sample).
    Counts on the two sides may differ.  The result is clamped at 0 to absorb
    float rounding in the three kernel means.
    """
    a = np.atleast_2d(np.asarray(a, dtype=np.float64))
    b = np.atleast_2d(np.asarray(b, dtype=np.float64))
    if a.shape[1] != b.shape[1]:
        raise DimensionMismatchError(f"dimensions differ: {a.shape[1]} vs {b.shape[1]}")
    if bandwidth is None:
        bandwidth = median_heuristic(b)
    if bandwidth <= 0.0:
        raise InvalidParameterError(f"bandwidth must be positive, got {bandwidth}")
    two_h2 = 2.0 * bandwidth * bandwidth
    kaa = np.mean(np.exp(-_sq_dists(a, a) / two_h2))
    kbb = np.mean(np.exp(-_sq_dists(b, b) / two_h2))
    kab = np.mean(np.exp(-_sq_dists(a, b) / two_h2))
    return max(float(kaa + kbb - 2.0 * kab), 0.0)


@dataclass(frozen=True)
class ModeReport:
    """Per-component assignment counts for a sample cloud.

    counts[k] is the number of samples whose nearest component mean is k and
    which lie within the assignment radius; samples beyond the radius of
    every component are tallied in unassigned, so counts.sum() + unassigned
    equals the sample count.
    """

    counts: np.ndarray
    coverage: float
    unassigned: int


def mode_report(samples, world: GaussianMixture, radius_sigmas: float = 4.0) -> ModeReport:
    """Assign samples to nearest component means within radius_sigmas sigmas.

    Each component's sigma is sqrt of its mean per-dimension variance (the
    preset worlds are isotropic, where this is exact).  coverage is the
    fraction of components that received at least one assignment.
    """
    if radius_sigmas <= 0:
        raise InvalidParameterError("radius_sigmas must be positive")
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    if samples.shape[1] != world.dim:
        raise DimensionMismatchError(f"samples dim {samples.shape[1]} != world dim {world.dim}")
    k = world.n_components
    counts = np.zeros(k, dtype=np.int64)
    if samples.shape[0] == 0:
        return ModeReport(counts=counts, coverage=0.0, unassigned=0)
    dists = np.sqrt(_sq_dists(samples, world.means))
    nearest = np.argmin(dists, axis=1)
    sigma = np.sqrt(np.mean(world.var_diags, axis=1))
    within = dists[np.arange(samples.shape[0]), nearest] <= radius_sigmas * sigma[nearest]
    np.add.at(counts, nearest[within], 1)
    coverage = float(np.count_nonzero(counts) / k)
    return ModeReport(counts=counts, coverage=coverage, unassigned=int(np.sum(~within)))


@dataclass(frozen=True)
class MetricReport:
    """Bundle of distances between a sample cloud and a target mixture."""

    sliced_w: float
    mmd_rbf: float
    mode_counts: np.ndarray
    coverage: float
    w1_exact: float | None = None
    eps_oracle_mse: float | None = None


def metric_report(
    samples,
    target: GaussianMixture,
    target_samples,
    num_projections: int = 64,
    seed: int = 0,
    radius_sigmas: float = 4.0,
    mmd_bandwidth: float | None = None,
    eps_oracle_mse: float | None = None,
) -> MetricReport:
    """Compare samples against a target world and reference draws from it."""
    modes = mode_report(samples, target, radius_sigmas)
    samples = np.atleast_2d(np.asarray(samples, dtype=np.float64))
    target_samples = np.atleast_2d(np.asarray(target_samples, dtype=np.float64))
    w1 = None
    if target.dim == 1:
        w1 = wasserstein_1d(samples[:, 0], target_samples[:, 0])
    return MetricReport(
        sliced_w=sliced_wasserstein(samples, target_samples, num_projections, seed),
        mmd_rbf=mmd_rbf(samples, target_samples, mmd_bandwidth),
        mode_counts=modes.counts,
        coverage=modes.coverage,
        w1_exact=w1,
        eps_oracle_mse=eps_oracle_mse,
    )
