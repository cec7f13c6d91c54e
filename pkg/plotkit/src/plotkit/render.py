"""Render experiment outputs (results.json, sweep CSVs) into figures.

Five figure kinds:

  bars      method bar chart with standard-error bars
  interp    interpolation curve with the per-input oracle reference line
  select    greedy selection curve (validation and test)
  sparsity  worst-case-optimal ensembling coefficients per expert
  compare   library-vs-cluster-expert grouped bars

Rendering is deterministic: fixed figure geometry, no timestamps, Agg
backend, so re-rendering identical inputs yields identical bytes.
"""

from __future__ import annotations

import csv
import json
import sys
from dataclasses import dataclass, field
from pathlib import Path

import matplotlib

matplotlib.use("Agg")

import matplotlib.pyplot as plt
import numpy as np

KINDS = ("bars", "interp", "select", "sparsity", "compare")
SCHEMA_VERSION = 1


class InputError(ValueError):
    """Raised when an input file fails validation."""


@dataclass
class FigureJob:
    kind: str
    inputs: list[str]
    out: str
    title: str | None = None
    methods: list[str] = field(default_factory=list)  # bars/compare subset

    def __post_init__(self):
        if self.kind not in KINDS:
            raise InputError(f"unknown figure kind {self.kind!r}; known: {', '.join(KINDS)}")
        if not self.inputs:
            raise InputError("at least one input file is required")


def _load_results(path) -> dict:
    data = json.loads(Path(path).read_text())
    if data.get("schema_version") != SCHEMA_VERSION:
        raise InputError(f"schema mismatch in {path}: field 'schema_version' "
                         f"is {data.get('schema_version')!r}, expected {SCHEMA_VERSION}")
    if "methods" not in data:
        raise InputError(f"schema mismatch in {path}: field 'methods' missing")
    return data


def _method_table(results: dict) -> dict[str, dict]:
    table = {}
    for entry in results["methods"]:
        for key in ("name", "mean_loss"):
            if key not in entry:
                raise InputError(f"schema mismatch: method entry missing field {key!r}")
        table[entry["name"]] = entry
    return table


def _new_axes(width=7.0, height=4.2):
    fig, ax = plt.subplots(figsize=(width, height), dpi=120)
    return fig, ax


def _save(fig, out):
    fig.tight_layout()
    fig.savefig(out, metadata={"Software": "plotkit"})
    plt.close(fig)


def render_bars(job: FigureJob) -> None:
    results = _load_results(job.inputs[0])
    table = _method_table(results)
    wanted = job.methods or list(table)
    missing = [m for m in wanted if m not in table]
    if missing:
        raise InputError(
            f"missing methods {missing}; available: {sorted(table)}"
        )
    entries = sorted((table[m] for m in wanted), key=lambda e: e["mean_loss"])
    names = [e["name"] for e in entries]
    means = [e["mean_loss"] for e in entries]
    errs = [e.get("stderr") for e in entries]
    have_se = all(e is not None for e in errs)
    fig, ax = _new_axes(max(7.0, 0.55 * len(names)))
    ax.bar(
        range(len(names)),
        means,
        yerr=errs if have_se else None,  # error bars only with stderr present
        capsize=3,
        color="#4878d0",
    )
    ax.set_xticks(range(len(names)))
    ax.set_xticklabels(names, rotation=45, ha="right", fontsize=8)
    ax.set_ylabel("mean test loss (nats)")
    ax.set_title(job.title or "Fusion methods, mean multi-task loss")
    _save(fig, job.out)


def render_interp(job: FigureJob) -> None:
    fig, ax = _new_axes()
    for path in job.inputs:
        with open(path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        required = {"alpha", "combined_loss", "oracle_ref"}
        if not rows or not required <= set(rows[0]):
            missing = sorted(required - set(rows[0] if rows else []))
            raise InputError(f"schema mismatch in {path}: missing columns {missing}")
        alphas = [float(r["alpha"]) for r in rows]
        combined = [float(r["combined_loss"]) for r in rows]
        oracle = float(rows[0]["oracle_ref"])
        label = Path(path).stem.replace("interp_", "")
        line = ax.plot(alphas, combined, marker="o", markersize=3, label=label)
        ax.axhline(oracle, linestyle="--", linewidth=1.0, color=line[0].get_color())
    ax.set_xlabel("interpolation coefficient")
    ax.set_ylabel("combined loss (nats)")
    ax.set_title(job.title or "Expert interpolation vs per-input selection (dashed)")
    ax.legend(fontsize=8)
    _save(fig, job.out)


def render_select(job: FigureJob) -> None:
    results = _load_results(job.inputs[0])
    sel = results.get("curves", {}).get("selection")
    if sel is None:
        raise InputError("schema mismatch: field 'curves.selection' missing")
    val = sel["val_losses"]
    if any(a < b - 1e-12 for a, b in zip(val, val[1:])):
        print("plotkit: warning: selection curve is not non-increasing", file=sys.stderr)
    ks = list(range(1, len(val) + 1))
    fig, ax = _new_axes()
    ax.plot(ks, val, marker="o", markersize=3, label="validation")
    if sel.get("test_losses"):
        ax.plot(ks, sel["test_losses"], marker="s", markersize=3, label="test")
    ax.set_xlabel("experts kept")
    ax.set_ylabel("task-level oracle loss (nats)")
    ax.set_title(job.title or "Greedy expert selection")
    ax.legend(fontsize=8)
    _save(fig, job.out)


def render_sparsity(job: FigureJob) -> None:
    results = _load_results(job.inputs[0])
    if "lp" not in results or "lambda" not in results.get("lp", {}):
        raise InputError("schema mismatch: field 'lp.lambda' missing")
    lam = np.asarray(results["lp"]["lambda"])
    fig, ax = _new_axes()
    ax.bar(range(len(lam)), lam, color="#d65f5f")
    ax.set_xlabel("expert index")
    ax.set_ylabel("coefficient")
    nonzero = int((lam > 1e-9).sum())
    ax.set_title(
        job.title
        or f"Worst-case-optimal ensembling coefficients ({nonzero}/{len(lam)} nonzero)"
    )
    _save(fig, job.out)


def render_compare(job: FigureJob) -> None:
    results = _load_results(job.inputs[0])
    table = _method_table(results)

    def stem(name: str) -> str:
        return name.split("-top")[0]  # arrow-top4 pairs with mbc-arrow-top3

    mbc = {stem(n)[len("mbc-"):]: e for n, e in table.items() if n.startswith("mbc-")}
    pairs = [
        (name, entry, mbc[stem(name)])
        for name, entry in table.items()
        if not name.startswith("mbc-") and stem(name) in mbc
    ]
    if not pairs:
        raise InputError(
            f"missing methods: no mbc-* counterparts found; available: {sorted(table)}"
        )
    names = [p[0] for p in pairs]
    lib_means = [p[1]["mean_loss"] for p in pairs]
    mbc_means = [p[2]["mean_loss"] for p in pairs]
    lib_err = [p[1].get("stderr", 0.0) for p in pairs]
    mbc_err = [p[2].get("stderr", 0.0) for p in pairs]
    x = np.arange(len(names))
    width = 0.38
    fig, ax = _new_axes()
    ax.bar(x - width / 2, lib_means, width, yerr=lib_err, capsize=3, label="task experts")
    ax.bar(x + width / 2, mbc_means, width, yerr=mbc_err, capsize=3, label="cluster experts")
    ax.set_xticks(x)
    ax.set_xticklabels(names, rotation=30, ha="right", fontsize=8)
    ax.set_ylabel("mean test loss (nats)")
    ax.set_title(job.title or "Task experts vs cluster experts")
    ax.legend(fontsize=8)
    _save(fig, job.out)


RENDERERS = {
    "bars": render_bars,
    "interp": render_interp,
    "select": render_select,
    "sparsity": render_sparsity,
    "compare": render_compare,
}


def render(job: FigureJob) -> str:
    """Render one figure job; returns the output path."""
    for path in job.inputs:
        if not Path(path).exists():
            raise InputError(f"input does not exist: {path}")
    out_parent = Path(job.out).parent
    if not out_parent.exists():
        raise InputError(f"output directory does not exist: {out_parent}")
    RENDERERS[job.kind](job)
    return job.out
