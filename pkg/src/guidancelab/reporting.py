"""Summaries, plot-ready tables, and figures derived from a results table.

The results CSV stays the machine-readable source of truth; this module
renders human-facing views of it: a markdown summary with per-mode medians,
small "one chart per file" CSVs, and PNG figures rendered headlessly.
"""

from __future__ import annotations

import csv
import math
import os
from collections import defaultdict

import numpy as np

from .errors import InvalidParameterError

_SINGLE_MODES = ("cfg", "replacement_cfg")
_DUAL_MODES = ("dual_cfg", "dual_replacement_cfg")
_UNCOND_MODES = ("uncond_base", "uncond_ft")


def _is_error(row) -> bool:
    if row["metric"] == "error":
        return True
    try:
        return math.isnan(float(row["value"]))
    except ValueError:
        return True


def _group_medians(rows, key_fields):
    """Median of `value` over seeds for each distinct key tuple."""
    groups = defaultdict(list)
    for row in rows:
        if _is_error(row):
            continue
        groups[tuple(row[k] for k in key_fields)].append(float(row["value"]))
    return {key: float(np.median(vals)) for key, vals in groups.items()}


def load_results(path: str) -> list:
    with open(path, "r", encoding="utf-8", newline="") as fh:
        return list(csv.DictReader(fh))


def write_summary(rows, path: str, digest: str) -> str:
    rows = [dict(r) for r in rows]
    metrics = sorted({r["metric"] for r in rows if r["metric"] != "error"})
    seeds = sorted({int(r["seed"]) for r in rows})
    n_errors = sum(1 for r in rows if _is_error(r))
    lines = [
        f"# Experiment summary `{digest}`",
        "",
        f"- rows: {len(rows)} ({n_errors} failed cells)",
        f"- seeds: {', '.join(str(s) for s in seeds)}",
        "",
    ]
    for metric in metrics:
        mrows = [r for r in rows if r["metric"] == metric]
        lines.append(f"## {metric} (median over seeds)")
        lines.append("")
        single = [r for r in mrows if r["mode"] in _SINGLE_MODES]
        if single:
            med = _group_medians(single, ("mode", "gamma"))
            modes = sorted({r["mode"] for r in single})
            gammas = sorted({r["gamma"] for r in single}, key=float)
            lines.append("| gamma | " + " | ".join(modes) + " |")
            lines.append("|" + "---|" * (len(modes) + 1))
            for g in gammas:
                cells = [f"{med[(m, g)]:.4f}" if (m, g) in med else "-" for m in modes]
                lines.append(f"| {g} | " + " | ".join(cells) + " |")
            lines.append("")
        dual = [r for r in mrows if r["mode"] in _DUAL_MODES]
        if dual:
            med = _group_medians(dual, ("mode", "gamma", "gamma2"))
            modes = sorted({r["mode"] for r in dual})
            keys = sorted({(r["gamma"], r["gamma2"]) for r in dual}, key=lambda p: (float(p[0]), float(p[1])))
            lines.append("| gamma1 | gamma2 | " + " | ".join(modes) + " |")
            lines.append("|" + "---|" * (len(modes) + 2))
            for g1, g2 in keys:
                cells = [f"{med[(m, g1, g2)]:.4f}" if (m, g1, g2) in med else "-" for m in modes]
                lines.append(f"| {g1} | {g2} | " + " | ".join(cells) + " |")
            lines.append("")
        uncond = [r for r in mrows if r["mode"] in _UNCOND_MODES]
        if uncond:
            med = _group_medians(uncond, ("mode",))
            lines.append("| unconditional run | median vs full world |")
            lines.append("|---|---|")
            for mode in sorted(med):
                lines.append(f"| {mode[0]} | {med[mode]:.4f} |")
            lines.append("")
    failed = [r for r in rows if _is_error(r)]
    if failed:
        lines.append("## Failed cells")
        lines.append("")
        for r in failed:
            lines.append(f"- `{r['run_id']}` (seed {r['seed']}, mode {r['mode']})")
        lines.append("")
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("\n".join(lines))
    return path


def _write_csv(path, header, rows) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(header)
        writer.writerows(rows)


def _plot_metric(rows):
    metrics = {r["metric"] for r in rows if r["metric"] != "error"}
    if "sliced_w" in metrics:
        return "sliced_w"
    return sorted(metrics)[0] if metrics else None


def write_report(results_path: str, out_dir: str = None) -> list:
    """Render summary, plot tables, and figures next to a results CSV."""
    rows = load_results(results_path)
    if not rows:
        raise InvalidParameterError(f"results file {results_path} has no rows")
    digest = rows[0]["config_digest"]
    out_dir = out_dir or os.path.dirname(os.path.abspath(results_path))
    os.makedirs(out_dir, exist_ok=True)
    written = []

    summary = os.path.join(out_dir, f"summary_{digest}.md")
    write_summary(rows, summary, digest)
    written.append(summary)

    metric = _plot_metric(rows)
    if metric is None:
        return written
    mrows = [r for r in rows if r["metric"] == metric and not _is_error(r)]

    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    single = [r for r in mrows if r["mode"] in _SINGLE_MODES]
    if single:
        med = _group_medians(single, ("mode", "gamma"))
        table = sorted(
            (mode, float(g), value) for (mode, g), value in med.items()
        )
        csv_path = os.path.join(out_dir, "guidance_sweep.csv")
        _write_csv(csv_path, ["mode", "gamma", f"median_{metric}"],
                   [(m, f"{g:g}", repr(v)) for m, g, v in table])
        written.append(csv_path)
        fig, ax = plt.subplots(figsize=(6, 4))
        for mode in sorted({m for m, _, _ in table}):
            pts = [(g, v) for m, g, v in table if m == mode]
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="o", label=mode)
        ax.set_xlabel("guidance scale")
        ax.set_ylabel(f"median {metric}")
        ax.set_title("Guidance sweep vs true conditional")
        ax.legend()
        fig.tight_layout()
        png_path = os.path.join(out_dir, "guidance_sweep.png")
        fig.savefig(png_path, dpi=120)
        plt.close(fig)
        written.append(png_path)

    dual = [r for r in mrows if r["mode"] in _DUAL_MODES]
    if dual:
        med = _group_medians(dual, ("mode", "gamma", "gamma2"))
        table = sorted(
            (mode, float(g1), float(g2), value) for (mode, g1, g2), value in med.items()
        )
        csv_path = os.path.join(out_dir, "dual_sweep.csv")
        _write_csv(csv_path, ["mode", "gamma1", "gamma2", f"median_{metric}"],
                   [(m, f"{g1:g}", f"{g2:g}", repr(v)) for m, g1, g2, v in table])
        written.append(csv_path)
        fig, ax = plt.subplots(figsize=(6, 4))
        for mode in sorted({m for m, _, _, _ in table}):
            pts = [(g2, v) for m, _, g2, v in table if m == mode]
            ax.plot([p[0] for p in pts], [p[1] for p in pts], marker="s", label=mode)
        ax.set_xlabel("fine guidance scale")
        ax.set_ylabel(f"median {metric}")
        ax.set_title("Dual-condition sweep vs true conditional")
        ax.legend()
        fig.tight_layout()
        png_path = os.path.join(out_dir, "dual_sweep.png")
        fig.savefig(png_path, dpi=120)
        plt.close(fig)
        written.append(png_path)

    uncond = [r for r in mrows if r["mode"] in _UNCOND_MODES]
    if uncond:
        table = sorted(
            (int(r["seed"]), r["mode"], float(r["value"])) for r in uncond
        )
        csv_path = os.path.join(out_dir, "degradation.csv")
        _write_csv(csv_path, ["seed", "mode", metric],
                   [(s, m, repr(v)) for s, m, v in table])
        written.append(csv_path)
        fig, ax = plt.subplots(figsize=(6, 4))
        seeds = sorted({s for s, _, _ in table})
        width = 0.38
        for offset, mode in ((-width / 2, "uncond_base"), (width / 2, "uncond_ft")):
            vals = {s: v for s, m, v in table if m == mode}
            xs = [s + offset for s in seeds if s in vals]
            ax.bar(xs, [vals[s] for s in seeds if s in vals], width=width, label=mode)
        ax.set_xlabel("seed")
        ax.set_ylabel(metric)
        ax.set_title("Unconditional drift from the full world after fine-tuning")
        ax.set_xticks(seeds)
        ax.legend()
        fig.tight_layout()
        png_path = os.path.join(out_dir, "degradation.png")
        fig.savefig(png_path, dpi=120)
        plt.close(fig)
        written.append(png_path)

    return written
