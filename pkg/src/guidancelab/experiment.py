"""End-to-end experiment pipeline: train, fine-tune, sample, measure, persist.

One experiment cell is a (seed, mode, gamma[, gamma2]) tuple.  Cells are
independent: a failure inside one becomes an `error` row in the results
table and the sweep continues.  Everything that feeds a results row is
derived from the config and seed alone, so reruns with an unchanged config
are byte-identical; wall-clock information goes to a separate log file.
"""

from __future__ import annotations

import csv
import hashlib
import json
import os
import time
from dataclasses import dataclass

import numpy as np

from .config import ExperimentConfig, resolve_out_dir
from .denoiser import Denoiser, TrainConfig, finetune, init_denoiser, load_checkpoint, save_checkpoint, train
from .errors import InvalidParameterError
from .guidance import GuidanceSpec, network_source
from .metrics import mmd_rbf, mode_report, sliced_wasserstein
from .mixtures import GaussianMixture, resolve_world, restrict, sample
from .sampler import RunRecord, SamplerConfig, sample_run
from .schedule import build_schedule

RESULT_COLUMNS = (
    "run_id", "config_digest", "seed", "mode", "gamma", "gamma2",
    "world", "condition", "metric", "value", "n_chains", "steps",
)

# Oracle reference draws get their own seed register, far from model seeds.
_ORACLE_SEED_BASE = 990_000
_UNCOND_TAG = 99
_DUAL_TAG = 50
_FT_SEED_OFFSET = 10_000


def _oracle_seed(seed: int, tag: int) -> int:
    return _ORACLE_SEED_BASE + seed * 100 + tag


def _train_digest(world_name: str, cfg: ExperimentConfig, role: str, seed: int, parent: str = "") -> str:
    payload = "|".join(
        [
            "arch=v1",
            world_name,
            cfg.schedule_kind,
            str(cfg.schedule_T),
            repr(cfg.schedule_beta_min),
            repr(cfg.schedule_beta_max),
            role,
            str(seed),
            parent,
        ]
        + [
            repr(v)
            for v in (
                (cfg.base_steps, cfg.base_batch, cfg.base_lr, cfg.base_drop_coarse, cfg.base_drop_fine)
                if role == "base"
                else (cfg.ft_steps, cfg.ft_batch, cfg.ft_lr, cfg.ft_drop_coarse, cfg.ft_drop_fine)
            )
        ]
    )
    return hashlib.sha256(payload.encode()).hexdigest()[:12]


class _Log:
    """Timestamped progress log; keeps wall-clock data out of results.csv."""

    def __init__(self, path):
        self.path = path
        if path is not None:
            os.makedirs(os.path.dirname(path), exist_ok=True)

    def write(self, message: str) -> None:
        if self.path is None:
            return
        stamp = time.strftime("%Y-%m-%dT%H:%M:%S")
        with open(self.path, "a", encoding="utf-8") as fh:
            fh.write(f"{stamp} {message}\n")


def _schedule(cfg: ExperimentConfig):
    return build_schedule(cfg.schedule_kind, cfg.schedule_T, cfg.schedule_beta_min, cfg.schedule_beta_max)


def _train_config(cfg: ExperimentConfig, role: str, seed: int, world, schedule) -> TrainConfig:
    if role == "base":
        return TrainConfig(
            steps=cfg.base_steps, batch=cfg.base_batch, lr=cfg.base_lr,
            drop_rate_coarse=cfg.base_drop_coarse, drop_rate_fine=cfg.base_drop_fine,
            seed=seed, world=world, schedule=schedule,
        )
    return TrainConfig(
        steps=cfg.ft_steps, batch=cfg.ft_batch, lr=cfg.ft_lr,
        drop_rate_coarse=cfg.ft_drop_coarse, drop_rate_fine=cfg.ft_drop_fine,
        seed=seed + _FT_SEED_OFFSET, world=world, schedule=schedule,
    )


def _write_loss_curve(losses: np.ndarray, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["step", "loss"])
        for i, v in enumerate(losses):
            writer.writerow([i, repr(float(v))])


def train_base_cached(cfg: ExperimentConfig, seed: int, out_root: str, log: _Log):
    """Train the base net for one seed, or load it from the shared cache."""
    digest = _train_digest(cfg.world_full, cfg, "base", seed)
    ckpt_dir = os.path.join(out_root, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    path = os.path.join(ckpt_dir, f"base_{digest}.json")
    if os.path.exists(path):
        log.write(f"seed {seed}: base checkpoint cache hit ({path})")
        return load_checkpoint(path), digest, path
    schedule = _schedule(cfg)
    world = resolve_world(cfg.world_full)
    t0 = time.perf_counter()
    net, losses = train(_train_config(cfg, "base", seed, world, schedule))
    log.write(f"seed {seed}: trained base in {time.perf_counter() - t0:.1f}s "
              f"(loss {losses[:100].mean():.4f} -> {losses[-100:].mean():.4f})")
    save_checkpoint(net, path)
    _write_loss_curve(losses, os.path.join(ckpt_dir, f"base_{digest}_loss.csv"))
    return net, digest, path


def finetune_cached(cfg: ExperimentConfig, seed: int, base_net: Denoiser, base_digest: str,
                    out_root: str, log: _Log):
    digest = _train_digest(cfg.world_narrow, cfg, "finetune", seed, parent=base_digest)
    ckpt_dir = os.path.join(out_root, "checkpoints")
    os.makedirs(ckpt_dir, exist_ok=True)
    path = os.path.join(ckpt_dir, f"ft_{digest}.json")
    if os.path.exists(path):
        log.write(f"seed {seed}: fine-tune checkpoint cache hit ({path})")
        return load_checkpoint(path), digest, path
    schedule = _schedule(cfg)
    world = resolve_world(cfg.world_narrow)
    t0 = time.perf_counter()
    net, losses = finetune(base_net, _train_config(cfg, "finetune", seed, world, schedule))
    log.write(f"seed {seed}: fine-tuned in {time.perf_counter() - t0:.1f}s")
    save_checkpoint(net, path)
    _write_loss_curve(losses, os.path.join(ckpt_dir, f"ft_{digest}_loss.csv"))
    return net, digest, path


def build_guidance_spec(mode: str, base_net: Denoiser, ft_net: Denoiser,
                        gamma: float, gamma1: float, gamma2: float,
                        coarse=None, fine=None) -> GuidanceSpec:
    """Wire checkpointed nets into the guidance graph for one condition."""
    if mode == "cfg":
        sources = {
            "uncond": network_source(ft_net),
            "cond": network_source(ft_net, coarse=coarse, fine=fine),
        }
        return GuidanceSpec(mode=mode, sources=sources, gamma=gamma)
    if mode == "replacement_cfg":
        sources = {
            "uncond": network_source(base_net),
            "cond": network_source(ft_net, coarse=coarse, fine=fine),
        }
        return GuidanceSpec(mode=mode, sources=sources, gamma=gamma)
    if mode == "dual_cfg":
        sources = {
            "uncond00": network_source(ft_net),
            "cond10": network_source(ft_net, coarse=coarse),
            "cond11": network_source(ft_net, coarse=coarse, fine=fine),
        }
        return GuidanceSpec(mode=mode, sources=sources, gamma1=gamma1, gamma2=gamma2)
    if mode == "dual_replacement_cfg":
        sources = {
            "base_uncond": network_source(base_net),
            "cond10": network_source(ft_net, coarse=coarse),
            "cond11": network_source(ft_net, coarse=coarse, fine=fine),
        }
        return GuidanceSpec(mode=mode, sources=sources, gamma1=gamma1, gamma2=gamma2)
    raise InvalidParameterError(f"unknown guidance mode {mode!r}")


def _metric_value(name: str, samples: np.ndarray, target: GaussianMixture, ref: np.ndarray) -> float:
    if name == "sliced_w":
        return sliced_wasserstein(samples, ref)
    if name == "mmd_rbf":
        return mmd_rbf(samples, ref)
    if name == "coverage":
        return mode_report(samples, target).coverage
    raise InvalidParameterError(f"unknown metric {name!r}")


def _write_samples_csv(samples: np.ndarray, path: str) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow([f"x{j}" for j in range(samples.shape[1])])
        for row in samples:
            writer.writerow([repr(float(v)) for v in row])


@dataclass(frozen=True)
class ExperimentResult:
    digest: str
    results_path: str
    summary_path: str
    rows: tuple


def _conditions(narrow: GaussianMixture):
    """Conditions the fine-tuned model was actually trained on."""
    fine_labels = sorted({int(f) for f in narrow.fine_labels})
    pairs = sorted({(int(c), int(f)) for c, f in zip(narrow.coarse_labels, narrow.fine_labels)})
    return fine_labels, pairs


def run_experiment(cfg: ExperimentConfig, out_override: str = None) -> ExperimentResult:
    out_root = resolve_out_dir(cfg, out_override)
    digest = cfg.digest()
    exp_dir = os.path.join(out_root, digest)
    samples_dir = os.path.join(exp_dir, "samples")
    os.makedirs(samples_dir, exist_ok=True)
    log = _Log(os.path.join(exp_dir, f"log_{digest}.txt"))
    log.write(f"experiment start digest={digest}")

    schedule = _schedule(cfg)
    full_world = resolve_world(cfg.world_full)
    narrow_world = resolve_world(cfg.world_narrow)
    fine_labels, dual_pairs = _conditions(narrow_world)

    rows = []
    for seed in cfg.seeds:
        try:
            base_net, base_digest, _ = train_base_cached(cfg, seed, out_root, log)
            ft_net, _, _ = finetune_cached(cfg, seed, base_net, base_digest, out_root, log)
        except (ValueError, RuntimeError) as exc:
            log.write(f"seed {seed}: training failed: {exc}")
            for mode in cfg.modes:
                rows.append(_error_row(cfg, digest, seed, mode))
            continue

        if cfg.include_uncond:
            for label, net in (("uncond_base", base_net), ("uncond_ft", ft_net)):
                rows.extend(
                    _uncond_cell(cfg, digest, seed, label, net, schedule, full_world, samples_dir, log)
                )

        for mode in cfg.modes:
            if mode in ("cfg", "replacement_cfg"):
                for gamma in cfg.gammas:
                    rows.extend(
                        _single_cell(cfg, digest, seed, mode, gamma, base_net, ft_net,
                                     schedule, full_world, fine_labels, samples_dir, log)
                    )
            else:
                for gamma2 in cfg.gamma2s:
                    rows.extend(
                        _dual_cell(cfg, digest, seed, mode, gamma2, base_net, ft_net,
                                   schedule, full_world, dual_pairs, samples_dir, log)
                    )

    rows.sort(key=_row_sort_key)
    results_path = os.path.join(exp_dir, f"results_{digest}.csv")
    _write_results(rows, results_path)
    from .reporting import write_summary

    summary_path = os.path.join(exp_dir, f"summary_{digest}.md")
    write_summary(rows, summary_path, digest)
    log.write(f"experiment done: {len(rows)} rows -> {results_path}")
    return ExperimentResult(digest=digest, results_path=results_path,
                            summary_path=summary_path, rows=tuple(rows))


def _row(cfg, digest, run_id, seed, mode, gamma, gamma2, world, condition, metric, value):
    return {
        "run_id": run_id,
        "config_digest": digest,
        "seed": seed,
        "mode": mode,
        "gamma": f"{gamma:g}",
        "gamma2": "" if gamma2 is None else f"{gamma2:g}",
        "world": world,
        "condition": condition,
        "metric": metric,
        "value": repr(float(value)),
        "n_chains": cfg.n_chains,
        "steps": cfg.sampler_steps,
    }


def _error_row(cfg, digest, seed, mode):
    """Placeholder row for a mode whose models never materialized."""
    row = _row(cfg, digest, f"s{seed}_{mode}_failed", seed, mode, 0.0, None,
               cfg.world_full, "error", "error", float("nan"))
    row["gamma"] = ""
    return row


def _row_sort_key(row):
    return (
        int(row["seed"]), row["mode"], row["gamma"], row["gamma2"],
        row["condition"], row["metric"], row["run_id"],
    )


def _write_results(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=RESULT_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow(row)


def _uncond_cell(cfg, digest, seed, label, net, schedule, full_world, samples_dir, log):
    run_id = f"s{seed}_{label}"
    try:
        src = network_source(net)
        spec = GuidanceSpec(mode="cfg", sources={"uncond": src, "cond": src}, gamma=1.0)
        rec = sample_run(SamplerConfig(num_steps=cfg.sampler_steps, schedule=schedule,
                                       spec=spec, n_chains=cfg.n_chains, seed=seed))
        _write_samples_csv(rec.samples, os.path.join(samples_dir, f"{run_id}.csv"))
        ref, _ = sample(full_world, cfg.n_chains, _oracle_seed(seed, _UNCOND_TAG))
        out = []
        for metric in cfg.metrics:
            value = _metric_value(metric, rec.samples, full_world, ref)
            out.append(_row(cfg, digest, run_id, seed, label, 0.0, None,
                            cfg.world_full, "uncond", metric, value))
        return out
    except (ValueError, RuntimeError) as exc:
        log.write(f"{run_id}: failed: {exc}")
        return [_row(cfg, digest, run_id, seed, label, 0.0, None,
                     cfg.world_full, "uncond", "error", float("nan"))]


def _single_cell(cfg, digest, seed, mode, gamma, base_net, ft_net, schedule,
                 full_world, fine_labels, samples_dir, log):
    run_id = f"s{seed}_{mode}_g{gamma:g}"
    try:
        per_metric = {m: [] for m in cfg.metrics}
        for f in fine_labels:
            spec = build_guidance_spec(mode, base_net, ft_net, gamma, cfg.gamma1, None, fine=f)
            rec = sample_run(SamplerConfig(num_steps=cfg.sampler_steps, schedule=schedule,
                                           spec=spec, n_chains=cfg.n_chains, seed=seed))
            _write_samples_csv(rec.samples, os.path.join(samples_dir, f"{run_id}_f{f}.csv"))
            target = restrict(full_world, None, f)
            ref, _ = sample(target, cfg.n_chains, _oracle_seed(seed, f))
            for metric in cfg.metrics:
                per_metric[metric].append(_metric_value(metric, rec.samples, target, ref))
        return [
            _row(cfg, digest, run_id, seed, mode, gamma, None, cfg.world_full,
                 "fine", metric, float(np.mean(vals)))
            for metric, vals in per_metric.items()
        ]
    except (ValueError, RuntimeError) as exc:
        log.write(f"{run_id}: failed: {exc}")
        return [_row(cfg, digest, run_id, seed, mode, gamma, None, cfg.world_full,
                     "fine", "error", float("nan"))]


def _dual_cell(cfg, digest, seed, mode, gamma2, base_net, ft_net, schedule,
               full_world, dual_pairs, samples_dir, log):
    run_id = f"s{seed}_{mode}_g{cfg.gamma1:g}_g2{gamma2:g}"
    try:
        per_metric = {m: [] for m in cfg.metrics}
        for c, f in dual_pairs:
            spec = build_guidance_spec(mode, base_net, ft_net, None, cfg.gamma1, gamma2,
                                       coarse=c, fine=f)
            rec = sample_run(SamplerConfig(num_steps=cfg.sampler_steps, schedule=schedule,
                                           spec=spec, n_chains=cfg.n_chains, seed=seed))
            _write_samples_csv(rec.samples, os.path.join(samples_dir, f"{run_id}_c{c}f{f}.csv"))
            target = restrict(full_world, c, f)
            ref, _ = sample(target, cfg.n_chains, _oracle_seed(seed, _DUAL_TAG + f))
            for metric in cfg.metrics:
                per_metric[metric].append(_metric_value(metric, rec.samples, target, ref))
        return [
            _row(cfg, digest, run_id, seed, mode, cfg.gamma1, gamma2, cfg.world_full,
                 "coarse+fine", metric, float(np.mean(vals)))
            for metric, vals in per_metric.items()
        ]
    except (ValueError, RuntimeError) as exc:
        log.write(f"{run_id}: failed: {exc}")
        return [_row(cfg, digest, run_id, seed, mode, cfg.gamma1, gamma2, cfg.world_full,
                     "coarse+fine", "error", float("nan"))]


def overhead_report(records: list) -> dict:
    """Per-mode mean step time and ratios against the cheapest baseline mode.

    Records must agree on num_steps and n_chains so the comparison isolates
    the guidance mode's evaluation count.
    """
    if len(records) < 2:
        raise InvalidParameterError("need at least two run records to compare")
    steps = {r.num_steps for r in records}
    chains = {r.n_chains for r in records}
    if len(steps) != 1 or len(chains) != 1:
        raise InvalidParameterError(
            f"records disagree on shape: steps {sorted(steps)}, chains {sorted(chains)}"
        )
    by_mode: dict = {}
    for rec in records:
        by_mode.setdefault(rec.mode, []).append(float(np.mean(rec.step_times_ms)))
    means = {mode: float(np.mean(vals)) for mode, vals in by_mode.items()}
    reference = "cfg" if "cfg" in means else sorted(means)[0]
    report = {"mean_step_ms": means, "reference": reference, "ratios": {}}
    for mode, value in means.items():
        report["ratios"][mode] = value / means[reference]
    return report
