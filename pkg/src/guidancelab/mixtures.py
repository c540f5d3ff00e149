"""Labeled Gaussian-mixture worlds with exact densities, scores, and noise predictions.

A world is a mixture of diagonal Gaussians, each tagged with a coarse and a
fine integer label.  Conditioning on a label means restricting to the
matching components and renormalizing.  Because noising a Gaussian keeps it
Gaussian, the distribution of x_t under any schedule is again a mixture in
closed form, which makes the exact noise prediction

    eps(x_t, t) = -sqrt(1 - alpha_bar_t) * grad log p_t(x_t)

available at every step.  That closed form is the oracle that learned
denoisers and guidance variants are measured against.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .errors import (
    DegenerateTimeError,
    DimensionMismatchError,
    EmptyConditionError,
    InvalidParameterError,
)
from .schedule import Schedule, _check_t

LOG_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class GaussianMixture:
    """Immutable mixture of labeled diagonal Gaussians.

    Attributes:
        weights: shape (K,), positive, normalized to sum to 1 on construction.
        means: shape (K, d).
        var_diags: shape (K, d), strictly positive per-dimension variances.
        coarse_labels: shape (K,), small non-negative integers.
        fine_labels: shape (K,), small non-negative integers.
    """

    weights: np.ndarray
    means: np.ndarray
    var_diags: np.ndarray
    coarse_labels: np.ndarray
    fine_labels: np.ndarray
    dim: int = field(init=False)

    def __post_init__(self):
        weights = np.asarray(self.weights, dtype=np.float64)
        means = np.atleast_2d(np.asarray(self.means, dtype=np.float64))
        var_diags = np.atleast_2d(np.asarray(self.var_diags, dtype=np.float64))
        coarse = np.asarray(self.coarse_labels, dtype=np.int64)
        fine = np.asarray(self.fine_labels, dtype=np.int64)
        if weights.ndim != 1 or weights.size == 0:
            raise InvalidParameterError("weights must be a non-empty vector")
        k = weights.size
        if means.shape[0] != k or var_diags.shape != means.shape:
            raise DimensionMismatchError(
                f"component count mismatch: weights {k}, means {means.shape}, vars {var_diags.shape}"
            )
        if coarse.shape != (k,) or fine.shape != (k,):
            raise DimensionMismatchError("label vectors must have one entry per component")
        if np.any(weights <= 0):
            raise InvalidParameterError("component weights must be strictly positive")
        if np.any(var_diags <= 0):
            raise InvalidParameterError("component variances must be strictly positive")
        if np.any(coarse < 0) or np.any(fine < 0):
            raise InvalidParameterError("labels must be non-negative integers")
        weights = weights / weights.sum()
        object.__setattr__(self, "weights", weights)
        object.__setattr__(self, "means", means)
        object.__setattr__(self, "var_diags", var_diags)
        object.__setattr__(self, "coarse_labels", coarse)
        object.__setattr__(self, "fine_labels", fine)
        object.__setattr__(self, "dim", means.shape[1])

    @property
    def n_components(self) -> int:
        return self.weights.size

    def to_dict(self) -> dict:
        """Plain-dict form: {dim, components: [{weight, mean, var_diag, coarse_label, fine_label}]}."""
        return {
            "dim": self.dim,
            "components": [
                {
                    "weight": float(self.weights[k]),
                    "mean": [float(v) for v in self.means[k]],
                    "var_diag": [float(v) for v in self.var_diags[k]],
                    "coarse_label": int(self.coarse_labels[k]),
                    "fine_label": int(self.fine_labels[k]),
                }
                for k in range(self.n_components)
            ],
        }

    @classmethod
    def from_dict(cls, data: dict) -> "GaussianMixture":
        comps = data["components"]
        gmm = cls(
            weights=np.array([c["weight"] for c in comps]),
            means=np.array([c["mean"] for c in comps]),
            var_diags=np.array([c["var_diag"] for c in comps]),
            coarse_labels=np.array([c["coarse_label"] for c in comps]),
            fine_labels=np.array([c["fine_label"] for c in comps]),
        )
        if gmm.dim != int(data["dim"]):
            raise DimensionMismatchError(
                f"declared dim {data['dim']} does not match component dim {gmm.dim}"
            )
        return gmm

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=1, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "GaussianMixture":
        return cls.from_dict(json.loads(text))


def restrict(
    gmm: GaussianMixture, coarse: int | None = None, fine: int | None = None
) -> GaussianMixture:
    """Condition on labels: keep matching components, renormalize weights.

    None leaves a slot unconstrained; restrict(g, None, None) returns g
    itself.  On the retained components the returned density is the input
    density divided by the total retained weight.

    Raises:
        EmptyConditionError: no component matches the filter.
    """
    if coarse is None and fine is None:
        return gmm
    mask = np.ones(gmm.n_components, dtype=bool)
    if coarse is not None:
        mask &= gmm.coarse_labels == int(coarse)
    if fine is not None:
        mask &= gmm.fine_labels == int(fine)
    if not mask.any():
        raise EmptyConditionError(f"no component matches coarse={coarse}, fine={fine}")
    return GaussianMixture(
        weights=gmm.weights[mask],
        means=gmm.means[mask],
        var_diags=gmm.var_diags[mask],
        coarse_labels=gmm.coarse_labels[mask],
        fine_labels=gmm.fine_labels[mask],
    )


def marginal_at_t(gmm: GaussianMixture, schedule: Schedule, t: int) -> GaussianMixture:
    """Distribution of x_t when x0 ~ gmm: means scale by sqrt(ab_t), and
    per-dimension variances map to ab_t * var + (1 - ab_t).  Weights and
    labels carry over unchanged."""
    t = _check_t(t, schedule)
    ab = schedule.alpha_bars[t]
    return GaussianMixture(
        weights=gmm.weights,
        means=np.sqrt(ab) * gmm.means,
        var_diags=ab * gmm.var_diags + (1.0 - ab),
        coarse_labels=gmm.coarse_labels,
        fine_labels=gmm.fine_labels,
    )


def _component_log_pdfs(gmm: GaussianMixture, x: np.ndarray) -> np.ndarray:
    """log [w_k * N(x; m_k, V_k)] for every component; x has shape (n, d),
    result (n, K)."""
    diff = x[:, None, :] - gmm.means[None, :, :]  # (n, K, d)
    v = gmm.var_diags[None, :, :]
    quad = np.sum(diff * diff / v, axis=2)
    log_norm = np.sum(np.log(gmm.var_diags), axis=1) + gmm.dim * LOG_2PI
    return np.log(gmm.weights)[None, :] - 0.5 * (quad + log_norm[None, :])


def _as_points(x, dim: int) -> tuple[np.ndarray, bool]:
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    pts = x[None, :] if single else x
    if pts.ndim != 2 or pts.shape[1] != dim:
        raise DimensionMismatchError(f"expected points of dimension {dim}, got shape {x.shape}")
    return pts, single


def log_density(gmm: GaussianMixture, x) -> float | np.ndarray:
    """Log density of the mixture at x via log-sum-exp over components.

    Accepts a single d-vector (returns a float) or an (n, d) batch
    (returns shape (n,)).
    """
    pts, single = _as_points(x, gmm.dim)
    logs = _component_log_pdfs(gmm, pts)
    m = np.max(logs, axis=1, keepdims=True)
    out = m[:, 0] + np.log(np.sum(np.exp(logs - m), axis=1))
    return float(out[0]) if single else out


def exact_eps(
    gmm: GaussianMixture,
    schedule: Schedule,
    t: int,
    x_t,
    coarse: int | None = None,
    fine: int | None = None,
) -> np.ndarray:
    """Exact noise prediction of the (optionally label-restricted) mixture.

    Computes -sqrt(1 - ab_t) * grad log p_t(x_t), where p_t is the noised
    marginal of the restricted mixture at step t.  The gradient comes from
    component responsibilities in closed form:

        grad log p(x) = sum_k r_k(x) * (m_k - x) / V_k

    with r_k the softmax of the per-component log joint terms, so the result
    stays finite arbitrarily far from every mode.

    Accepts a d-vector or an (n, d) batch of probe points.

    Raises:
        DegenerateTimeError: alpha_bar_t == 1 (the score-to-noise scaling
            collapses).
        EmptyConditionError: the label filter matches nothing.
    """
    t = _check_t(t, schedule)
    ab = schedule.alpha_bars[t]
    if ab == 1.0:
        raise DegenerateTimeError(f"alpha_bar[{t}] is 1; noise prediction undefined")
    noised = marginal_at_t(restrict(gmm, coarse, fine), schedule, t)
    pts, single = _as_points(x_t, gmm.dim)
    logs = _component_log_pdfs(noised, pts)  # (n, K)
    m = np.max(logs, axis=1, keepdims=True)
    resp = np.exp(logs - m)
    resp /= resp.sum(axis=1, keepdims=True)
    diff = pts[:, None, :] - noised.means[None, :, :]
    score = np.sum(resp[:, :, None] * (-diff / noised.var_diags[None, :, :]), axis=1)
    out = -np.sqrt(1.0 - ab) * score
    return out[0] if single else out


def sample(
    gmm: GaussianMixture,
    n: int,
    rng_seed,
    coarse: int | None = None,
    fine: int | None = None,
) -> tuple[np.ndarray, np.ndarray]:
    """Draw n i.i.d. points from the (optionally restricted) mixture.

    rng_seed may be an integer seed or a numpy Generator.  Returns
    (points, labels) where points has shape (n, d) and labels shape (n, 2)
    holding the (coarse, fine) pair of the component each point came from.
    """
    if n < 1:
        raise InvalidParameterError(f"need n >= 1, got {n}")
    target = restrict(gmm, coarse, fine)
    rng = np.random.default_rng(rng_seed)
    idx = rng.choice(target.n_components, size=n, p=target.weights)
    draws = target.means[idx] + rng.standard_normal((n, target.dim)) * np.sqrt(
        target.var_diags[idx]
    )
    labels = np.stack([target.coarse_labels[idx], target.fine_labels[idx]], axis=1)
    return draws, labels


# --- default worlds ---------------------------------------------------------

RING8_RADIUS = 4.0
RING8_VAR = 0.05


def ring8() -> GaussianMixture:
    """Eight equal-weight 2-D modes on a circle of radius 4, var 0.05 per dim.

    coarse label = index mod 4 (four classes of two modes each), fine label =
    index, so coarse conditioning keeps two opposite modes and fine
    conditioning pins one.
    """
    idx = np.arange(8)
    angles = 2.0 * np.pi * idx / 8.0
    means = RING8_RADIUS * np.stack([np.cos(angles), np.sin(angles)], axis=1)
    return GaussianMixture(
        weights=np.full(8, 1.0 / 8.0),
        means=means,
        var_diags=np.full((8, 2), RING8_VAR),
        coarse_labels=idx % 4,
        fine_labels=idx,
    )


def narrow2() -> GaussianMixture:
    """The two-mode world used for fine-tuning: components 0 and 1 of ring8."""
    full = ring8()
    keep = np.array([0, 1])
    return GaussianMixture(
        weights=full.weights[keep],
        means=full.means[keep],
        var_diags=full.var_diags[keep],
        coarse_labels=full.coarse_labels[keep],
        fine_labels=full.fine_labels[keep],
    )


WORLD_PRESETS = {"ring8": ring8, "narrow2": narrow2}


def resolve_world(name_or_path: str) -> GaussianMixture:
    """Turn a preset name or a JSON file path into a mixture."""
    if name_or_path in WORLD_PRESETS:
        return WORLD_PRESETS[name_or_path]()
    try:
        with open(name_or_path, "r", encoding="utf-8") as fh:
            return GaussianMixture.from_json(fh.read())
    except FileNotFoundError:
        raise InvalidParameterError(
            f"unknown world {name_or_path!r}: not a preset ({', '.join(sorted(WORLD_PRESETS))}) "
            "and no such file"
        ) from None
