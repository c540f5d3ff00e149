"""Guided-noise combiners and the source plumbing that feeds them.

All four combiners are affine maps of their noise arguments:

    cfg                  u + g*(c - u)
    replacement_cfg      same form, with the unconditional term taken from a
                         different (richer-prior) model
    dual_cfg             e00 + g1*(e10 - e00) + g2*(e11 - e10)
    dual_replacement_cfg same, with only e00 swapped for the other prior

In score space u + g*(c - u) = (1-g)*u + g*c, i.e. the guided noise is the
exact noise prediction of the distribution p_u(x)^(1-g) * p_c(x)^g
(normalized), which is what the oracle-based tests pin down.

A NoiseSource wraps either a trained network or an analytic mixture with
fixed condition labels; a GuidanceSpec names the sources a mode needs and
carries the scales.  guided_eps evaluates every distinct source exactly
once per call, so aliased sources cost one forward pass and the per-step
cost model (two evaluations for single modes, three for dual) holds.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field

import numpy as np

from .denoiser import Denoiser, predict_eps
from .errors import DimensionMismatchError, InvalidParameterError
from .mixtures import GaussianMixture, exact_eps
from .schedule import Schedule

GUIDANCE_MODES = ("cfg", "replacement_cfg", "dual_cfg", "dual_replacement_cfg")

# Source names each mode requires; the *_replacement variants rename the
# prior slot to make configs say out loud which model feeds it.
REQUIRED_SOURCES = {
    "cfg": ("uncond", "cond"),
    "replacement_cfg": ("uncond", "cond"),
    "dual_cfg": ("uncond00", "cond10", "cond11"),
    "dual_replacement_cfg": ("base_uncond", "cond10", "cond11"),
}

# The source returned untouched outside the guidance interval.
CONDITIONAL_SOURCE = {
    "cfg": "cond",
    "replacement_cfg": "cond",
    "dual_cfg": "cond11",
    "dual_replacement_cfg": "cond11",
}


@dataclass(frozen=True)
class NoiseSource:
    """One noise predictor with its condition pinned.

    Exactly one of net / oracle_world is set.  Oracle sources need a
    schedule to locate themselves in time; network sources carry their own.
    """

    kind: str
    net: Denoiser | None = None
    oracle_world: GaussianMixture | None = None
    schedule: Schedule | None = None
    coarse: int | None = None
    fine: int | None = None

    def __post_init__(self):
        if self.kind not in ("network", "oracle"):
            raise InvalidParameterError(f"unknown source kind {self.kind!r}")
        if (self.net is None) == (self.oracle_world is None):
            raise InvalidParameterError("exactly one of net / oracle_world must be set")
        if self.kind == "network" and self.net is None:
            raise InvalidParameterError("network source needs a net")
        if self.kind == "oracle":
            if self.oracle_world is None:
                raise InvalidParameterError("oracle source needs a world")
            if self.schedule is None:
                raise InvalidParameterError("oracle source needs a schedule")

    @property
    def dim(self) -> int:
        return self.net.dim if self.kind == "network" else self.oracle_world.dim

    def eps(self, x_t, t: int) -> np.ndarray:
        """Noise prediction at (x_t, t); accepts vectors or (n, d) batches."""
        if self.kind == "network":
            return predict_eps(self.net, x_t, t, self.coarse, self.fine)
        return exact_eps(self.oracle_world, self.schedule, t, x_t, self.coarse, self.fine)

    def digest(self) -> str:
        """Stable content hash used in run digests."""
        h = hashlib.sha256()
        if self.kind == "network":
            for name, arr in self.net.param_items():
                h.update(name.encode())
                h.update(arr.tobytes())
            h.update(json.dumps(self.net.schedule.params(), sort_keys=True).encode())
        else:
            h.update(self.oracle_world.to_json().encode())
            h.update(json.dumps(self.schedule.params(), sort_keys=True).encode())
        h.update(repr((self.kind, self.coarse, self.fine)).encode())
        return h.hexdigest()[:16]


def network_source(net: Denoiser, coarse: int | None = None, fine: int | None = None) -> NoiseSource:
    return NoiseSource(kind="network", net=net, coarse=coarse, fine=fine)


def oracle_source(
    world: GaussianMixture,
    schedule: Schedule,
    coarse: int | None = None,
    fine: int | None = None,
) -> NoiseSource:
    return NoiseSource(kind="oracle", oracle_world=world, schedule=schedule, coarse=coarse, fine=fine)


def _pair(a, b, what: str):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise DimensionMismatchError(f"{what}: shapes {a.shape} and {b.shape} differ")
    return a, b


def cfg_noise(eps_uncond, eps_cond, gamma: float) -> np.ndarray:
    """Guided noise eps_uncond + gamma * (eps_cond - eps_uncond).

    gamma = 1 short-circuits to the conditional prediction so that runs at
    scale 1 are bit-identical regardless of which prior feeds the
    unconditional slot.
    """
    u, c = _pair(eps_uncond, eps_cond, "cfg_noise")
    if gamma == 1.0:
        return c.copy()
    return u + gamma * (c - u)


def replacement_cfg_noise(eps_uncond_base, eps_cond_ft, gamma: float) -> np.ndarray:
    """cfg_noise with the unconditional term sourced from a different model.

    The combination is the same affine map; the distinction is which prior
    the caller wires in.  At gamma = 1 the unconditional term cancels and
    the output equals the conditional prediction exactly.
    """
    return cfg_noise(eps_uncond_base, eps_cond_ft, gamma)


def dual_cfg_noise(eps_00, eps_10, eps_11, gamma1: float, gamma2: float) -> np.ndarray:
    """Two-condition guidance:
    eps_00 + gamma1 * (eps_10 - eps_00) + gamma2 * (eps_11 - eps_10)."""
    e00, e10 = _pair(eps_00, eps_10, "dual_cfg_noise")
    e10, e11 = _pair(e10, eps_11, "dual_cfg_noise")
    if gamma1 == 1.0 and gamma2 == 1.0:
        return e11.copy()
    return e00 + gamma1 * (e10 - e00) + gamma2 * (e11 - e10)


def dual_replacement_cfg_noise(
    eps_base_uncond, eps_10, eps_11, gamma1: float, gamma2: float
) -> np.ndarray:
    """dual_cfg_noise with only the fully-unconditional term swapped for the
    other model's prior; the single-condition term eps_10 is left alone."""
    return dual_cfg_noise(eps_base_uncond, eps_10, eps_11, gamma1, gamma2)


@dataclass(frozen=True)
class GuidanceSpec:
    """A guidance mode, its scale(s), its sources, and an optional interval.

    sources maps the mode's required names (see REQUIRED_SOURCES) to
    NoiseSource objects.  interval, when set, is an inclusive [t_lo, t_hi]
    step range outside of which guided_eps returns the conditional source's
    prediction unmodified.
    """

    mode: str
    sources: dict
    gamma: float = 1.0
    gamma1: float = 1.0
    gamma2: float = 1.0
    interval: tuple | None = None

    def __post_init__(self):
        if self.mode not in GUIDANCE_MODES:
            raise InvalidParameterError(f"unknown guidance mode {self.mode!r}")
        missing = [n for n in REQUIRED_SOURCES[self.mode] if n not in self.sources]
        if missing:
            raise InvalidParameterError(f"mode {self.mode}: missing sources {missing}")
        gammas = (self.gamma,) if self.mode in ("cfg", "replacement_cfg") else (self.gamma1, self.gamma2)
        if not all(np.isfinite(g) for g in gammas):
            raise InvalidParameterError(f"guidance scales must be finite, got {gammas}")
        if self.interval is not None:
            lo, hi = self.interval
            if lo > hi:
                raise InvalidParameterError(f"empty guidance interval [{lo}, {hi}]")
        dims = {src.dim for src in self.sources.values()}
        if len(dims) > 1:
            raise DimensionMismatchError(f"sources disagree on dimension: {sorted(dims)}")

    @property
    def dim(self) -> int:
        return next(iter(self.sources.values())).dim

    def digest_payload(self) -> dict:
        """Deterministic description of the spec for config digests."""
        return {
            "mode": self.mode,
            "gamma": self.gamma,
            "gamma1": self.gamma1,
            "gamma2": self.gamma2,
            "interval": list(self.interval) if self.interval else None,
            "sources": {
                name: self.sources[name].digest() for name in REQUIRED_SOURCES[self.mode]
            },
        }


def guided_eps(spec: GuidanceSpec, x_t, t: int) -> np.ndarray:
    """Evaluate the spec's sources at (x_t, t) and combine per its mode.

    Each distinct NoiseSource object is evaluated exactly once per call even
    when several slots alias it; results are cached by source identity for
    this (x_t, t) only.  Outside the guidance interval the conditional
    source's prediction is returned as-is.
    """
    if spec.interval is not None:
        lo, hi = spec.interval
        if not lo <= t <= hi:
            return spec.sources[CONDITIONAL_SOURCE[spec.mode]].eps(x_t, t)
    cache: dict[int, np.ndarray] = {}
    vals: dict[str, np.ndarray] = {}
    for name in REQUIRED_SOURCES[spec.mode]:
        src = spec.sources[name]
        key = id(src)
        if key not in cache:
            cache[key] = src.eps(x_t, t)
        vals[name] = cache[key]
    if spec.mode == "cfg":
        return cfg_noise(vals["uncond"], vals["cond"], spec.gamma)
    if spec.mode == "replacement_cfg":
        return replacement_cfg_noise(vals["uncond"], vals["cond"], spec.gamma)
    if spec.mode == "dual_cfg":
        return dual_cfg_noise(
            vals["uncond00"], vals["cond10"], vals["cond11"], spec.gamma1, spec.gamma2
        )
    return dual_replacement_cfg_noise(
        vals["base_uncond"], vals["cond10"], vals["cond11"], spec.gamma1, spec.gamma2
    )
