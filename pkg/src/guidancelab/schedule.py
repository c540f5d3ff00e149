"""Discrete variance schedules and the forward noising / clean-observation maps.

A schedule fixes the time axis of everything else in the package: per-step
noise rates beta_t, their complements alpha_t = 1 - beta_t, and the signal
fractions alpha_bar_t = prod_{s<=t} alpha_s.  A noisy sample at step t is

    x_t = sqrt(alpha_bar_t) * x0 + sqrt(1 - alpha_bar_t) * eps,   eps ~ N(0, I)

and the clean observation implied by a noise estimate inverts that map.
Time is 0-based throughout: t = 0 is the least-noised step, t = T - 1 the
most-noised.  All arithmetic is float64 so the algebraic identities in the
test suite hold at 1e-10 .. 1e-12.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import DegenerateTimeError, DimensionMismatchError, InvalidParameterError

SCHEDULE_KINDS = ("linear", "cosine")

# Offset and per-step beta cap for the squared-cosine alpha_bar curve.
COSINE_OFFSET = 0.008
COSINE_MAX_BETA = 0.999


@dataclass(frozen=True)
class Schedule:
    """Immutable container for one discrete variance schedule.

    Attributes:
        kind: "linear" or "cosine".
        T: number of diffusion steps.
        beta_min, beta_max: endpoints of the linear ramp (recorded but unused
            by the cosine kind, whose betas come from the alpha_bar curve).
        betas: per-step noise rates, shape (T,), each in (0, 1).
        alphas: 1 - betas, elementwise.
        alpha_bars: cumulative products of alphas, strictly decreasing.
        posterior_vars: the reverse-transition variances
            (1 - alpha_bar_{t-1}) / (1 - alpha_bar_t) * beta_t with
            alpha_bar_{-1} := 1.  Stored for reference; the deterministic
            sampler never injects this noise.
    """

    kind: str
    T: int
    beta_min: float
    beta_max: float
    betas: np.ndarray
    alphas: np.ndarray
    alpha_bars: np.ndarray
    posterior_vars: np.ndarray

    def params(self) -> dict:
        """The four scalars that fully determine the schedule (for serialization)."""
        return {
            "kind": self.kind,
            "T": self.T,
            "beta_min": self.beta_min,
            "beta_max": self.beta_max,
        }


def build_schedule(
    kind: str, T: int, beta_min: float = 1e-4, beta_max: float = 0.02
) -> Schedule:
    """Construct a validated schedule of the given kind.

    The linear kind interpolates betas evenly from beta_min to beta_max
    inclusive.  The cosine kind derives betas from the squared-cosine
    alpha_bar curve with offset 0.008, clamping each beta to (0, 0.999];
    it ignores beta_min / beta_max beyond recording them.

    Raises:
        InvalidParameterError: unknown kind, T < 1, or beta bounds violated.
    """
    if kind not in SCHEDULE_KINDS:
        raise InvalidParameterError(f"unknown schedule kind {kind!r}; expected one of {SCHEDULE_KINDS}")
    if not isinstance(T, (int, np.integer)) or T < 1:
        raise InvalidParameterError(f"T must be a positive integer, got {T!r}")
    if not (0.0 < beta_min <= beta_max < 1.0):
        raise InvalidParameterError(
            f"need 0 < beta_min <= beta_max < 1, got beta_min={beta_min}, beta_max={beta_max}"
        )

    if kind == "linear":
        betas = np.linspace(beta_min, beta_max, T, dtype=np.float64)
    else:
        betas = _cosine_betas(T)

    alphas = 1.0 - betas
    alpha_bars = np.cumprod(alphas)
    # beta-tilde of the exact Gaussian reverse transition; alpha_bar_{-1} := 1.
    prev = np.concatenate(([1.0], alpha_bars[:-1]))
    posterior_vars = (1.0 - prev) / (1.0 - alpha_bars) * betas
    return Schedule(
        kind=kind,
        T=int(T),
        beta_min=float(beta_min),
        beta_max=float(beta_max),
        betas=betas,
        alphas=alphas,
        alpha_bars=alpha_bars,
        posterior_vars=posterior_vars,
    )


def _cosine_betas(T: int) -> np.ndarray:
    def curve(u: float) -> float:
        return math.cos((u + COSINE_OFFSET) / (1.0 + COSINE_OFFSET) * math.pi / 2.0) ** 2

    betas = np.empty(T, dtype=np.float64)
    for t in range(T):
        ratio = curve((t + 1) / T) / curve(t / T)
        betas[t] = min(1.0 - ratio, COSINE_MAX_BETA)
    return betas


def _check_same_shape(a: np.ndarray, b: np.ndarray, what: str) -> None:
    if a.shape != b.shape:
        raise DimensionMismatchError(f"{what}: shapes {a.shape} and {b.shape} differ")


def _check_t(t: int, schedule: Schedule) -> int:
    t = int(t)
    if not 0 <= t < schedule.T:
        raise InvalidParameterError(f"step index {t} outside [0, {schedule.T})")
    return t


def forward_noise(x0, t: int, eps, schedule: Schedule) -> np.ndarray:
    """Noise clean data to step t: sqrt(ab_t)*x0 + sqrt(1-ab_t)*eps.

    x0 and eps must have identical shapes; vectors and (n, d) batches both
    work since the map is elementwise.
    """
    x0 = np.asarray(x0, dtype=np.float64)
    eps = np.asarray(eps, dtype=np.float64)
    _check_same_shape(x0, eps, "forward_noise")
    t = _check_t(t, schedule)
    ab = schedule.alpha_bars[t]
    return np.sqrt(ab) * x0 + np.sqrt(1.0 - ab) * eps


def tweedie_x0(x_t, eps_hat, t: int, schedule: Schedule) -> np.ndarray:
    """Clean observation implied by a noise estimate:
    (x_t - sqrt(1-ab_t)*eps_hat) / sqrt(ab_t).

    Exact inverse of forward_noise when eps_hat is the noise actually used.

    Raises:
        DegenerateTimeError: alpha_bar_t == 0 (the map divides by sqrt(ab_t)).
    """
    x_t = np.asarray(x_t, dtype=np.float64)
    eps_hat = np.asarray(eps_hat, dtype=np.float64)
    _check_same_shape(x_t, eps_hat, "tweedie_x0")
    t = _check_t(t, schedule)
    ab = schedule.alpha_bars[t]
    if ab == 0.0:
        raise DegenerateTimeError(f"alpha_bar[{t}] is 0; clean observation undefined")
    return (x_t - np.sqrt(1.0 - ab) * eps_hat) / np.sqrt(ab)
