"""Command-line interface: every pipeline stage as a subcommand.

Logs go to stderr; data only ever goes to files. Exit codes: 0 success,
1 usage error, 2 runtime failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import analysis, fusion, routing, tasks as tasklib, training
from .experiment import ExperimentConfig, load_config, log, run_experiment
from .experts import load_adapter, load_library, save_adapter, save_library, ExpertLibrary
from .fusion import EnsembleSpec, load_weights, save_weights
from .model import load_base, save_base
from .numerics import Rng
from . import binio


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _config_from(args) -> ExperimentConfig:
    if getattr(args, "config", None):
        cfg = load_config(args.config)
    else:
        cfg = ExperimentConfig()
    if getattr(args, "seed", None) is not None:
        cfg.seed = args.seed
    return cfg


def _tasks_from(args, cfg: ExperimentConfig):
    if getattr(args, "tasks", None):
        return tasklib.load_tasks(args.tasks)
    return tasklib.generate_tasks(cfg.suite, cfg.seed)


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_gen_tasks(args):
    cfg = _config_from(args)
    datasets = tasklib.generate_tasks(cfg.suite, cfg.seed)
    tasklib.save_tasks(datasets, _out_dir(args) / "tasks")
    log(f"wrote {len(datasets)} task datasets")


def cmd_train_base(args):
    cfg = _config_from(args)
    datasets = _tasks_from(args, cfg)
    from .data import Hyper

    hyper = Hyper(epochs=cfg.pretrain_epochs, lr=cfg.pretrain_lr, batch_size=cfg.batch_size, dropout=0.0)
    base = training.pretrain_base(cfg.model, tasklib.mixed_examples(datasets), hyper, Rng(cfg.seed).derive("pretrain"))
    save_base(base, _out_dir(args) / "base.bin")
    log(f"wrote base.bin (fingerprint {base.fingerprint[:12]}...)")


def cmd_train_experts(args):
    cfg = _config_from(args)
    base = load_base(args.base)
    datasets = _tasks_from(args, cfg)
    adapters = [
        training.train_expert(
            base, td.name, td.train, td.val, cfg.expert_hyper(),
            Rng(cfg.seed).derive("expert", i),
            rank=cfg.expert_rank, alpha=cfg.expert_alpha,
            init_rng=Rng(cfg.seed).derive("lora-init", i),
        )
        for i, td in enumerate(datasets)
    ]
    library = ExpertLibrary(adapters, [td.name for td in datasets], provenance="cli")
    save_library(library, _out_dir(args) / "library")
    log(f"wrote library with {len(library)} experts")


def cmd_train_shared(args):
    cfg = _config_from(args)
    base = load_base(args.base)
    datasets = _tasks_from(args, cfg)
    shared = training.train_shared_expert(
        base, tasklib.mixed_examples(datasets), cfg.expert_hyper(), Rng(cfg.seed),
        rank=cfg.expert_rank, alpha=cfg.expert_alpha,
    )
    save_adapter(shared, _out_dir(args) / "shared.bin")
    log("wrote shared.bin")


def cmd_merge(args):
    library = load_library(args.library)
    weights = load_weights(args.weights) if args.weights else None
    out = _out_dir(args)
    if args.mode == "lowrank":
        merged = fusion.merge_lowrank(library, weights)
        save_adapter(merged, out / "merged.bin")
        log("wrote merged.bin")
    else:
        deltas = fusion.merge_fullrank(library, weights)
        binio.write_arrays(out / "merged_fullrank.bin", binio.KIND_ADAPTER, library.base_fingerprint, deltas)
        log("wrote merged_fullrank.bin")


def cmd_ensemble(args):
    cfg = _config_from(args)
    base = load_base(args.base)
    library = load_library(args.library, base)
    datasets = _tasks_from(args, cfg)
    pool = [e for td in datasets for e in td.train[: cfg.fusion_examples_per_task]]
    val = [e for td in datasets for e in td.val[: cfg.fusion_examples_per_task]]
    weights, info = fusion.fit_ensemble_weights(library, base, pool, val, cfg.fusion_hyper(), Rng(cfg.seed))
    save_weights(weights, _out_dir(args) / "weights_sgd_ensemble.json")
    log(f"wrote weights_sgd_ensemble.json (lr {info['lr']}, val {info['val_loss']:.4f})")


def cmd_route(args):
    cfg = _config_from(args)
    base = load_base(args.base)
    library = load_library(args.library, base)
    datasets = _tasks_from(args, cfg)
    pool = [e for td in datasets for e in td.train[: cfg.fusion_examples_per_task]]
    val = [e for td in datasets for e in td.val[: cfg.fusion_examples_per_task]]
    router, info = routing.fit_router(library, base, pool, val, args.init, cfg.fusion_hyper(), Rng(cfg.seed))
    routing.save_router(router, _out_dir(args) / "router_sgd", base.fingerprint)
    log(f"wrote router_sgd.bin/.json (lr {info['lr']}, val {info['val_loss']:.4f})")


def cmd_arrow_init(args):
    base = load_base(args.base)
    library = load_library(args.library, base)
    router = routing.arrow_init(library, base)
    routing.save_router(router, _out_dir(args) / "router_arrow", base.fingerprint)
    log("wrote router_arrow.bin/.json")


def cmd_hc_route(args):
    cfg = _config_from(args)
    base = load_base(args.base)
    library = load_library(args.library, base)
    datasets = _tasks_from(args, cfg)
    pool = [e for td in datasets for e in td.train[: cfg.fusion_examples_per_task]]
    val = [e for td in datasets for e in td.val[: cfg.fusion_examples_per_task]]
    hc, info = routing.build_hc_routing(
        library, base, args.k, pool, val, args.init, cfg.fusion_hyper(), Rng(cfg.seed)
    )
    from .experiment import _save_fit_hc

    _save_fit_hc(base, library)((hc, info), _out_dir(args) / "hc_routing.json")
    log(f"wrote hc_routing.json (val {info['val_loss']:.4f})")


def cmd_lp_weights(args):
    matrix = fusion.load_error_matrix(args.matrix)
    lam, c, support = fusion.lp_minimax_weights(matrix)
    payload = {"lambda": lam.tolist(), "worst_case": c, "support": support}
    out = _out_dir(args) / "lp_weights.json"
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    log(f"wrote lp_weights.json (worst case {c:.4f}, support {support})")


def cmd_distill(args):
    cfg = _config_from(args)
    base = load_base(args.base)
    library = load_library(args.library, base)
    datasets = _tasks_from(args, cfg)
    weights = load_weights(args.weights) if args.weights else None
    teacher = EnsembleSpec(library, weights, "probability")
    pool = [e for td in datasets for e in td.train[: cfg.fusion_examples_per_task]]
    val = [e for td in datasets for e in td.val[: cfg.fusion_examples_per_task]]
    student, info = fusion.distill(teacher, base, pool, val, cfg.fusion_hyper(), Rng(cfg.seed))
    save_adapter(student, _out_dir(args) / "distilled.bin")
    log(f"wrote distilled.bin (KL {info['kl_initial']:.4f} -> {info['kl_final']:.4f})")


def _method_predictor(args, cfg, base, library, tasks):
    """Resolve an --method string to a (label, batch->probs) pair."""
    spec = args.method
    if spec == "base":
        return "base", analysis.predictor_base(base)
    if spec == "uniform-ensemble":
        return spec, analysis.predictor_ensemble(base, EnsembleSpec(library, None))
    if spec == "uniform-merge":
        merged = fusion.merge_lowrank(library, None)
        return spec, analysis.predictor_adapter(base, merged)
    if spec == "oracle":
        name_to_idx = {name: i for i, name in enumerate(library.names)}
        missing = [t for t in tasks if t not in name_to_idx]
        if missing:
            raise ValueError(f"oracle needs experts named after tasks; missing {missing}")
        return spec, None  # oracle handled separately
    if spec.startswith("expert:"):
        idx = int(spec.split(":", 1)[1])
        return spec, analysis.predictor_adapter(base, library.adapters[idx])
    if spec.startswith("adapter:"):
        adapter = load_adapter(spec.split(":", 1)[1])
        return spec, analysis.predictor_adapter(base, adapter)
    if spec.startswith("ensemble-weights:"):
        weights = load_weights(spec.split(":", 1)[1])
        return spec, analysis.predictor_ensemble(base, EnsembleSpec(library, weights))
    if spec.startswith("merge-weights:"):
        weights = load_weights(spec.split(":", 1)[1])
        merged = fusion.merge_lowrank(library, weights)
        return spec, analysis.predictor_adapter(base, merged)
    if spec.startswith("router:"):
        router = routing.load_router(spec.split(":", 1)[1], base.fingerprint)
        return spec, analysis.predictor_routed(base, library, router)
    if spec.startswith("arrow:"):
        k = int(spec.split(":", 1)[1])
        router = routing.arrow_init(library, base).with_top_k(k)
        return spec, analysis.predictor_routed(base, library, router)
    raise ValueError(f"unknown method spec {spec!r}")


def cmd_eval(args):
    cfg = _config_from(args)
    base = load_base(args.base)
    library = load_library(args.library, base)
    datasets = _tasks_from(args, cfg)
    tasks = tasklib.split_dict(datasets, args.split)
    label, predictor = _method_predictor(args, cfg, base, library, tasks)
    if label == "oracle":
        mapping = {name: library.names.index(name) for name in tasks}
        report = analysis.oracle_eval(base, library, tasks, mapping, cfg.batch_size)
    else:
        report = analysis.eval_method(label, predictor, tasks, cfg.batch_size)
    safe = label.replace(":", "_").replace("/", "_")
    analysis.save_report(report, _out_dir(args) / f"eval_{safe}.json")
    log(f"{label}: mean {report.mean:.4f} +/- {report.stderr:.4f}")


def cmd_interpolate(args):
    cfg = _config_from(args)
    base = load_base(args.base)
    library = load_library(args.library, base)
    datasets = _tasks_from(args, cfg)
    by_name = {td.name: td for td in datasets}

    def resolve(label):
        if label in library.names:
            return library.names.index(label)
        return int(label)

    i1, i2 = resolve(args.e1), resolve(args.e2)
    n1, n2 = library.names[i1], library.names[i2]
    alphas = np.linspace(0.0, 1.0, args.points)
    sweep = analysis.interpolate_pair(
        base,
        library.adapters[i1],
        library.adapters[i2],
        (n1, getattr(by_name[n1], args.split)),
        (n2, getattr(by_name[n2], args.split)),
        alphas,
        cfg.batch_size,
    )
    out = _out_dir(args) / f"interp_{n1}_{n2}.csv"
    analysis.save_sweep(sweep, out)
    log(f"wrote {out.name}")


def cmd_cluster(args):
    library = load_library(args.library)
    ca = analysis.mbc_cluster(library, args.k)
    payload = {
        "k": ca.k,
        "clusters": {library.names[i]: c for i, c in sorted(ca.clusters.items())},
        "linkage": [[int(a), int(b), d] for a, b, d in ca.linkage],
    }
    out = _out_dir(args) / "clusters.json"
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    log(f"wrote clusters.json (k={ca.k})")


def cmd_select_greedy(args):
    matrix = fusion.load_error_matrix(args.matrix)
    curve = analysis.greedy_select(matrix, args.k_max)
    payload = curve.to_dict()
    payload["expert_names"] = [matrix.expert_names[i] for i in curve.selected]
    out = _out_dir(args) / "selection.json"
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    log(f"wrote selection.json (final {curve.losses[-1]:.4f})")


def cmd_calibrate(args):
    cfg = _config_from(args)
    base = load_base(args.base)
    library = load_library(args.library, base)
    datasets = _tasks_from(args, cfg)
    tasks = tasklib.split_dict(datasets, args.split)
    router = routing.load_router(args.router, base.fingerprint)
    delta = analysis.calibration_delta(
        base, library, router, tasks, args.k_small, args.k_large, cfg.batch_size
    )
    payload = {"k_small": args.k_small, "k_large": args.k_large, "delta": delta}
    out = _out_dir(args) / "calibration.json"
    out.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")
    log(f"wrote calibration.json (delta {delta:.4f})")


def cmd_run(args):
    cfg = _config_from(args)
    run_experiment(cfg, args.out, cache_dir=args.cache)


def cmd_report(args):
    results = json.loads(Path(args.inp).read_text())
    lines = ["# Experiment report", ""]
    lines.append(f"config hash: `{results['config_hash']}`")
    lines.append("")
    lines.append("| method | mean loss | stderr |")
    lines.append("|---|---|---|")
    for m in sorted(results["methods"], key=lambda m: m["mean_loss"]):
        lines.append(f"| {m['name']} | {m['mean_loss']:.4f} | {m['stderr']:.4f} |")
    if "fig2_margins" in results:
        lines.append("")
        lines.append("## Ordering margins")
        for k, v in sorted(results["fig2_margins"].items()):
            lines.append(f"- {k}: {v:+.4f}")
    if "calibration" in results.get("deltas", {}):
        c = results["deltas"]["calibration"]
        lines.append("")
        lines.append(
            f"calibration delta (top-{c['k_small']} vs top-{c['k_large']}): "
            f"trained {c['sgd_router_delta']:.4f}, zero-shot {c['arrow_untrained_delta']:.4f}"
        )
    out = _out_dir(args) / "report.md"
    out.write_text("\n".join(lines) + "\n")
    log(f"wrote {out}")


def build_parser() -> _Parser:
    parser = _Parser(prog="lorafusion", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, fn, **flags):
        p = sub.add_parser(name, parents=[], help=fn.__name__)
        p.set_defaults(handler=fn)
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--config", default=None)
        if flags.pop("out", True):
            p.add_argument("--out", required=True)
        for flag, kw in flags.items():
            p.add_argument(f"--{flag.replace('_', '-')}", **kw)
        return p

    add("gen-tasks", cmd_gen_tasks)
    add("train-base", cmd_train_base, tasks=dict(default=None))
    add("train-experts", cmd_train_experts, base=dict(required=True), tasks=dict(default=None))
    add("train-shared", cmd_train_shared, base=dict(required=True), tasks=dict(default=None))
    add(
        "merge",
        cmd_merge,
        library=dict(required=True),
        weights=dict(default=None),
        mode=dict(choices=["lowrank", "fullrank"], default="lowrank"),
    )
    add("ensemble", cmd_ensemble, base=dict(required=True), library=dict(required=True), tasks=dict(default=None))
    add(
        "route",
        cmd_route,
        base=dict(required=True),
        library=dict(required=True),
        tasks=dict(default=None),
        init=dict(choices=["zero", "arrow"], default="zero"),
    )
    add("arrow-init", cmd_arrow_init, base=dict(required=True), library=dict(required=True))
    add(
        "hc-route",
        cmd_hc_route,
        base=dict(required=True),
        library=dict(required=True),
        tasks=dict(default=None),
        k=dict(type=int, required=True),
        init=dict(choices=["plain", "arrow"], default="plain"),
    )
    add("lp-weights", cmd_lp_weights, matrix=dict(required=True))
    add(
        "distill",
        cmd_distill,
        base=dict(required=True),
        library=dict(required=True),
        tasks=dict(default=None),
        weights=dict(default=None),
    )
    add(
        "eval",
        cmd_eval,
        base=dict(required=True),
        library=dict(required=True),
        tasks=dict(default=None),
        method=dict(required=True),
        split=dict(choices=["val", "test"], default="test"),
    )
    add(
        "interpolate",
        cmd_interpolate,
        base=dict(required=True),
        library=dict(required=True),
        tasks=dict(default=None),
        e1=dict(required=True),
        e2=dict(required=True),
        points=dict(type=int, default=11),
        split=dict(choices=["val", "test"], default="test"),
    )
    add("cluster", cmd_cluster, library=dict(required=True), k=dict(type=int, required=True))
    add("select-greedy", cmd_select_greedy, matrix=dict(required=True), k_max=dict(type=int, default=None))
    add(
        "calibrate",
        cmd_calibrate,
        base=dict(required=True),
        library=dict(required=True),
        tasks=dict(default=None),
        router=dict(required=True),
        k_small=dict(type=int, default=1),
        k_large=dict(type=int, required=True),
        split=dict(choices=["val", "test"], default="test"),
    )
    add("run", cmd_run, cache=dict(default=None))
    p = add("report", cmd_report, out=True)
    p.add_argument("--in", dest="inp", required=True)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        args.handler(args)
    except SystemExit as exc:
        return int(exc.code or 0)
    except Exception as exc:  # runtime failure -> exit 2
        print(f"lorafusion: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
