"""Experiment configuration, orchestration, caching, and report assembly."""

from __future__ import annotations

import hashlib
import json
import os
import sys
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

try:
    import tomllib
except ModuleNotFoundError:  # Python 3.10
    import tomli as tomllib

from . import analysis, fusion, routing, tasks as tasklib, training
from .data import Hyper
from .experts import ExpertLibrary, LoraAdapter, load_adapter, load_library, save_adapter, save_library
from .fusion import EnsembleSpec, SimplexWeights
from .model import BaseLM, ModelConfig, load_base, save_base
from .numerics import Rng

SCHEMA_VERSION = 1

CACHE_ENV = "AFL_CACHE_DIR"

ALL_METHODS = (
    "base",
    "oracle",
    "shared-expert",
    "uniform-ensemble",
    "uniform-ensemble-logit",
    "sgd-ensemble",
    "lp-ensemble",
    "distilled",
    "uniform-merge",
    "uniform-merge-fullrank",
    "sgd-merge-global",
    "sgd-merge-layer",
    "arrow",
    "sgd-router",
    "hc",
    "arrow-hc",
    "mbc-oracle",
    "mbc-uniform-ensemble",
    "mbc-uniform-merge",
    "mbc-arrow",
)


@dataclass
class ExperimentConfig:
    seed: int = 0
    model: ModelConfig = field(default_factory=ModelConfig)
    suite: list[tasklib.TaskSpec] = field(default_factory=tasklib.reference_suite)
    pretrain_epochs: int = 8
    pretrain_lr: float = 3e-3
    expert_rank: int = 4
    expert_alpha: float = 16.0
    expert_dropout: float = 0.05
    expert_epochs: int = 5
    expert_lr: float = 1e-3
    fusion_epochs: int = 5
    fusion_lr_grid: tuple[float, ...] = (1e-3, 1e-4, 1e-5)
    fusion_examples_per_task: int = 250
    batch_size: int = 32
    methods: tuple[str, ...] = ALL_METHODS
    k_clusters: int = 3
    arrow_top_k: int = 4
    interpolation_pairs: tuple[tuple[str, str], ...] = (
        ("copy", "caesar11"),
        ("reverse", "sort"),
        ("duplicate", "mod-add5"),
    )
    alpha_points: int = 11

    def fusion_hyper(self) -> Hyper:
        return Hyper(
            epochs=self.fusion_epochs,
            batch_size=self.batch_size,
            lr_grid=tuple(self.fusion_lr_grid),
            dropout=self.expert_dropout,
        )

    def expert_hyper(self) -> Hyper:
        return Hyper(
            epochs=self.expert_epochs,
            batch_size=self.batch_size,
            lr=self.expert_lr,
            dropout=self.expert_dropout,
        )

    def canonical(self) -> dict:
        d = {
            "schema_version": SCHEMA_VERSION,
            "seed": self.seed,
            "model": asdict(self.model),
            "suite": [asdict(s) for s in self.suite],
            "pretrain": {"epochs": self.pretrain_epochs, "lr": self.pretrain_lr},
            "expert": {
                "rank": self.expert_rank,
                "alpha": self.expert_alpha,
                "dropout": self.expert_dropout,
                "epochs": self.expert_epochs,
                "lr": self.expert_lr,
            },
            "fusion": {
                "epochs": self.fusion_epochs,
                "lr_grid": list(self.fusion_lr_grid),
                "examples_per_task": self.fusion_examples_per_task,
                "batch_size": self.batch_size,
            },
            "experiment": {
                "methods": list(self.methods),
                "k_clusters": self.k_clusters,
                "arrow_top_k": self.arrow_top_k,
                "interpolation_pairs": [list(p) for p in self.interpolation_pairs],
                "alpha_points": self.alpha_points,
            },
        }
        return d

    def config_hash(self) -> str:
        blob = json.dumps(self.canonical(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()


def _take(table: dict, allowed: dict, where: str) -> dict:
    unknown = set(table) - set(allowed)
    if unknown:
        raise ValueError(f"unknown config keys in [{where}]: {sorted(unknown)}")
    out = {}
    for key, caster in allowed.items():
        if key in table:
            out[key] = caster(table[key])
    return out


def load_config(path) -> ExperimentConfig:
    """Parse and validate a TOML experiment config; unknown keys are rejected."""
    with open(path, "rb") as fh:
        raw = tomllib.load(fh)
    top_allowed = {"schema_version", "model", "suite", "expert", "pretrain", "fusion", "experiment"}
    unknown = set(raw) - top_allowed
    if unknown:
        raise ValueError(f"unknown top-level config keys: {sorted(unknown)}")
    if raw.get("schema_version", SCHEMA_VERSION) != SCHEMA_VERSION:
        raise ValueError(f"unsupported schema_version {raw.get('schema_version')!r}")

    cfg = ExperimentConfig()
    model_kw = _take(
        raw.get("model", {}),
        {k: int for k in ("vocab", "width", "layers", "ff_width", "max_seq", "n_heads")},
        "model",
    )
    cfg.model = ModelConfig(**{**asdict(ModelConfig()), **model_kw})
    cfg.model.validate()

    suite_tbl = dict(raw.get("suite", {}))
    task_rows = suite_tbl.pop("tasks", None)
    suite_kw = _take(
        suite_tbl,
        {
            "n_train": int,
            "n_val": int,
            "n_test": int,
            "preset": str,
            "window_width": int,
            "window_step": int,
            "leak": float,
        },
        "suite",
    )
    preset = suite_kw.pop("preset", "reference")
    if task_rows is not None:
        cfg.suite = [
            tasklib.TaskSpec(
                **_take(
                    row,
                    {
                        "name": str,
                        "family": str,
                        "param": int,
                        "len_lo": int,
                        "len_hi": int,
                        "n_train": int,
                        "n_val": int,
                        "n_test": int,
                        "window_lo": int,
                        "window_width": int,
                        "leak": float,
                    },
                    "suite.tasks",
                )
            )
            for row in task_rows
        ]
    elif preset == "reference":
        cfg.suite = tasklib.reference_suite(**suite_kw) if suite_kw else tasklib.reference_suite()
    else:
        raise ValueError(f"unknown suite preset {preset!r}")

    pre = _take(raw.get("pretrain", {}), {"epochs": int, "lr": float}, "pretrain")
    cfg.pretrain_epochs = pre.get("epochs", cfg.pretrain_epochs)
    cfg.pretrain_lr = pre.get("lr", cfg.pretrain_lr)

    exp = _take(
        raw.get("expert", {}),
        {"rank": int, "alpha": float, "dropout": float, "epochs": int, "lr": float},
        "expert",
    )
    cfg.expert_rank = exp.get("rank", cfg.expert_rank)
    cfg.expert_alpha = exp.get("alpha", cfg.expert_alpha)
    cfg.expert_dropout = exp.get("dropout", cfg.expert_dropout)
    cfg.expert_epochs = exp.get("epochs", cfg.expert_epochs)
    cfg.expert_lr = exp.get("lr", cfg.expert_lr)

    fus = _take(
        raw.get("fusion", {}),
        {
            "epochs": int,
            "lr_grid": lambda v: tuple(float(x) for x in v),
            "examples_per_task": int,
            "batch_size": int,
        },
        "fusion",
    )
    cfg.fusion_epochs = fus.get("epochs", cfg.fusion_epochs)
    cfg.fusion_lr_grid = fus.get("lr_grid", cfg.fusion_lr_grid)
    cfg.fusion_examples_per_task = fus.get("examples_per_task", cfg.fusion_examples_per_task)
    cfg.batch_size = fus.get("batch_size", cfg.batch_size)

    ex = _take(
        raw.get("experiment", {}),
        {
            "seed": int,
            "methods": lambda v: tuple(str(x) for x in v),
            "k_clusters": int,
            "arrow_top_k": int,
            "interpolation_pairs": lambda v: tuple((str(a), str(b)) for a, b in v),
            "alpha_points": int,
        },
        "experiment",
    )
    cfg.seed = ex.get("seed", cfg.seed)
    cfg.methods = ex.get("methods", cfg.methods)
    cfg.k_clusters = ex.get("k_clusters", cfg.k_clusters)
    cfg.arrow_top_k = ex.get("arrow_top_k", cfg.arrow_top_k)
    cfg.interpolation_pairs = ex.get("interpolation_pairs", cfg.interpolation_pairs)
    cfg.alpha_points = ex.get("alpha_points", cfg.alpha_points)

    known = set(ALL_METHODS)
    bad = [m for m in cfg.methods if m not in known]
    if bad:
        raise ValueError(f"unknown methods {bad}; known: {sorted(known)}")
    names = {s.name for s in cfg.suite}
    for a, b in cfg.interpolation_pairs:
        if a not in names or b not in names:
            raise ValueError(f"interpolation pair ({a}, {b}) names unknown tasks")
    return cfg


# ---------------------------------------------------------------------------
# cached pipeline stages


class StepFailure(RuntimeError):
    def __init__(self, step: str, cause: Exception):
        super().__init__(f"step {step!r} failed: {cause}")
        self.step = step


def _stage_key(name: str, payload: dict) -> str:
    blob = json.dumps({"stage": name, "schema": SCHEMA_VERSION, **payload}, sort_keys=True)
    return hashlib.sha256(blob.encode()).hexdigest()[:24]


class Cache:
    def __init__(self, root: Path | None):
        self.root = Path(root) if root else None
        if self.root:
            self.root.mkdir(parents=True, exist_ok=True)

    def path(self, name: str, key: str, suffix: str) -> Path | None:
        if not self.root:
            return None
        return self.root / f"{name}-{key}{suffix}"

    def fetch(self, name, key, suffix, compute, save, load):
        """Load from cache when present, else compute, persist, and return."""
        target = self.path(name, key, suffix)
        if target is not None and target.exists():
            return load(target)
        value = compute()
        if target is not None:
            save(value, target)
        return value


def log(msg: str) -> None:
    print(msg, file=sys.stderr, flush=True)


@dataclass
class PipelineState:
    config: ExperimentConfig
    datasets: list[tasklib.TaskData]
    base: BaseLM
    library: ExpertLibrary
    shared: LoraAdapter


def prepare_state(cfg: ExperimentConfig, cache: Cache) -> PipelineState:
    datasets = _step("gen-tasks", lambda: tasklib.generate_tasks(cfg.suite, cfg.seed))

    base_key = _stage_key(
        "base",
        {
            "model": asdict(cfg.model),
            "suite": [asdict(s) for s in cfg.suite],
            "pretrain": [cfg.pretrain_epochs, cfg.pretrain_lr],
            "seed": cfg.seed,
        },
    )

    def compute_base():
        log(f"pretraining base model ({cfg.pretrain_epochs} epochs)")
        hyper = Hyper(epochs=cfg.pretrain_epochs, lr=cfg.pretrain_lr, batch_size=cfg.batch_size, dropout=0.0)
        return training.pretrain_base(
            cfg.model, tasklib.mixed_examples(datasets), hyper, Rng(cfg.seed).derive("pretrain")
        )

    base = _step(
        "train-base",
        lambda: cache.fetch("base", base_key, ".bin", compute_base, save_base, load_base),
    )

    lib_key = _stage_key(
        "library",
        {
            "base": base.fingerprint,
            "expert": [cfg.expert_rank, cfg.expert_alpha, cfg.expert_dropout, cfg.expert_epochs, cfg.expert_lr],
            "seed": cfg.seed,
        },
    )

    def compute_library():
        adapters = []
        for i, td in enumerate(datasets):
            log(f"training expert: {td.name}")
            adapters.append(
                training.train_expert(
                    base,
                    td.name,
                    td.train,
                    td.val,
                    cfg.expert_hyper(),
                    Rng(cfg.seed).derive("expert", i),
                    rank=cfg.expert_rank,
                    alpha=cfg.expert_alpha,
                    init_rng=Rng(cfg.seed).derive("lora-init", i),
                )
            )
        return ExpertLibrary(adapters, [td.name for td in datasets], provenance="trained")

    base_check = base
    library = _step(
        "train-experts",
        lambda: cache.fetch(
            "library",
            lib_key,
            "",
            compute_library,
            lambda lib, p: save_library(lib, p),
            lambda p: load_library(p, base_check),
        ),
    )

    shared_key = _stage_key(
        "shared",
        {
            "base": base.fingerprint,
            "expert": [cfg.expert_rank, cfg.expert_alpha, cfg.expert_dropout, cfg.expert_epochs, cfg.expert_lr],
            "seed": cfg.seed,
        },
    )

    def compute_shared():
        log("training shared expert on the task mixture")
        return training.train_shared_expert(
            base,
            tasklib.mixed_examples(datasets),
            cfg.expert_hyper(),
            Rng(cfg.seed),
            rank=cfg.expert_rank,
            alpha=cfg.expert_alpha,
        )

    shared = _step(
        "train-shared",
        lambda: cache.fetch("shared", shared_key, ".bin", compute_shared, save_adapter, load_adapter),
    )
    return PipelineState(config=cfg, datasets=datasets, base=base, library=library, shared=shared)


def _step(name: str, fn):
    try:
        return fn()
    except StepFailure:
        raise
    except Exception as exc:
        raise StepFailure(name, exc) from exc


def fusion_pool(state: PipelineState, split: str = "train"):
    """Task-agnostic training pool: per-task subsample, labels stripped."""
    cfg = state.config
    per = cfg.fusion_examples_per_task
    out = []
    for td in state.datasets:
        out.extend(getattr(td, split)[:per])
    return out


def run_experiment(cfg: ExperimentConfig, out_dir, cache_dir=None) -> dict:
    """Train everything requested, evaluate every method, write the reports.

    Returns the results dict (also written to ``out_dir/results.json``).
    Artifacts are cached content-addressed so re-runs are incremental.
    """
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    cache_root = cache_dir or os.environ.get(CACHE_ENV) or (out / "cache")
    cache = Cache(cache_root)

    state = prepare_state(cfg, cache)
    base, library, datasets = state.base, state.library, state.datasets
    save_base(base, out / "base.bin")
    save_library(library, out / "library")
    save_adapter(state.shared, out / "shared.bin")

    test = tasklib.split_dict(datasets, "test")
    val = tasklib.split_dict(datasets, "val")
    train_pool = fusion_pool(state, "train")
    val_pool = fusion_pool(state, "val")
    hyper = cfg.fusion_hyper()
    rng = Rng(cfg.seed)
    bsz = cfg.batch_size
    results: dict = {
        "schema_version": SCHEMA_VERSION,
        "config_hash": cfg.config_hash(),
        "seed": cfg.seed,
        "methods": [],
        "fits": {},
    }
    reports: dict[str, analysis.EvalReport] = {}

    def record(report):
        reports[report.method] = report
        results["methods"].append(report.to_dict())
        log(f"eval {report.method}: {report.mean:.4f} +/- {report.stderr:.4f}")

    wanted = list(cfg.methods)

    def want(name):
        return name in wanted

    # --- expert-by-task matrices (validation for selection/LP, test reported)
    err_val = _step(
        "expert-task-matrix", lambda: analysis.expert_task_matrix(base, library, val, bsz)
    )
    fusion.save_error_matrix(err_val, out / "error_matrix_val.csv")
    err_test = _step(
        "expert-task-matrix-test", lambda: analysis.expert_task_matrix(base, library, test, bsz)
    )
    fusion.save_error_matrix(err_test, out / "error_matrix_test.csv")

    if want("base"):
        record(_step("eval-base", lambda: analysis.eval_method("base", analysis.predictor_base(base), test, bsz)))

    identity_map = {td.name: i for i, td in enumerate(datasets)}
    if want("oracle"):
        record(_step("eval-oracle", lambda: analysis.oracle_eval(base, library, test, identity_map, bsz)))

    if want("shared-expert"):
        record(
            _step(
                "eval-shared",
                lambda: analysis.eval_method(
                    "shared-expert", analysis.predictor_adapter(base, state.shared), test, bsz
                ),
            )
        )

    if want("uniform-ensemble"):
        spec = EnsembleSpec(library, None, "probability")
        record(
            _step(
                "eval-uniform-ensemble",
                lambda: analysis.eval_method(
                    "uniform-ensemble", analysis.predictor_ensemble(base, spec), test, bsz
                ),
            )
        )
    if want("uniform-ensemble-logit"):
        spec = EnsembleSpec(library, None, "logit")
        record(
            _step(
                "eval-uniform-ensemble-logit",
                lambda: analysis.eval_method(
                    "uniform-ensemble-logit", analysis.predictor_ensemble(base, spec), test, bsz
                ),
            )
        )

    sgd_ens_weights = None
    if want("sgd-ensemble") or want("distilled"):
        def compute_ens():
            log("fitting ensembling coefficients")
            return fusion.fit_ensemble_weights(library, base, train_pool, val_pool, hyper, rng)

        key = _stage_key("sgd-ensemble", {"cfg": cfg.config_hash(), "lib": lib_signature(library)})
        sgd_ens_weights, info = _step(
            "fit-ensemble",
            lambda: cache.fetch(
                "ens-weights", key, ".json", compute_ens, _save_fit_weights, _load_fit_weights
            ),
        )
        results["fits"]["sgd-ensemble"] = info
        fusion.save_weights(sgd_ens_weights, out / "weights_sgd_ensemble.json")
    if want("sgd-ensemble"):
        spec = EnsembleSpec(library, sgd_ens_weights, "probability")
        record(
            _step(
                "eval-sgd-ensemble",
                lambda: analysis.eval_method(
                    "sgd-ensemble", analysis.predictor_ensemble(base, spec), test, bsz
                ),
            )
        )

    if want("lp-ensemble"):
        lam, cval, support = _step("lp-weights", lambda: fusion.lp_minimax_weights(err_val))
        results["lp"] = {
            "lambda": lam.tolist(),
            "worst_case": cval,
            "support": support,
            "n_experts": len(library),
        }
        spec = EnsembleSpec(library, lam, "probability")
        record(
            _step(
                "eval-lp-ensemble",
                lambda: analysis.eval_method(
                    "lp-ensemble", analysis.predictor_ensemble(base, spec), test, bsz
                ),
            )
        )

    if want("distilled"):
        teacher = EnsembleSpec(library, sgd_ens_weights, "probability")

        def compute_distill():
            log("distilling the learned ensemble into one adapter")
            return fusion.distill(teacher, base, train_pool, val_pool, hyper, rng)

        key = _stage_key("distill", {"cfg": cfg.config_hash(), "lib": lib_signature(library)})
        student, info = _step(
            "distill",
            lambda: cache.fetch(
                "distilled", key, ".bin", compute_distill, _save_fit_adapter, _load_fit_adapter
            ),
        )
        results["fits"]["distilled"] = info
        save_adapter(student, out / "distilled.bin")
        record(
            _step(
                "eval-distilled",
                lambda: analysis.eval_method(
                    "distilled", analysis.predictor_adapter(base, student), test, bsz
                ),
            )
        )

    if want("uniform-merge"):
        merged = fusion.merge_lowrank(library, None)
        record(
            _step(
                "eval-uniform-merge",
                lambda: analysis.eval_method(
                    "uniform-merge", analysis.predictor_adapter(base, merged), test, bsz
                ),
            )
        )
    if want("uniform-merge-fullrank"):
        deltas = fusion.merge_fullrank(library, None)
        record(
            _step(
                "eval-uniform-merge-fullrank",
                lambda: analysis.eval_method(
                    "uniform-merge-fullrank", analysis.predictor_dense(base, deltas), test, bsz
                ),
            )
        )

    for mode, mname in (("global", "sgd-merge-global"), ("per-layer", "sgd-merge-layer")):
        if not want(mname):
            continue

        def compute_merge(mode=mode):
            log(f"fitting {mode} merging coefficients")
            return fusion.fit_merge_weights(library, base, train_pool, val_pool, mode, hyper, rng)

        key = _stage_key(mname, {"cfg": cfg.config_hash(), "lib": lib_signature(library)})
        weights, info = _step(
            f"fit-{mname}",
            lambda: cache.fetch(
                mname, key, ".json", compute_merge, _save_fit_weights, _load_fit_weights
            ),
        )
        results["fits"][mname] = info
        fusion.save_weights(weights, out / f"weights_{mname.replace('-', '_')}.json")
        merged = fusion.merge_lowrank(library, weights)
        record(
            _step(
                f"eval-{mname}",
                lambda: analysis.eval_method(
                    mname, analysis.predictor_adapter(base, merged), test, bsz
                ),
            )
        )

    arrow_router = None
    if want("arrow") or want("sgd-router"):
        arrow_router = _step("arrow-init", lambda: routing.arrow_init(library, base))
        routing.save_router(arrow_router, out / "router_arrow", base.fingerprint)
    if want("arrow"):
        k = min(cfg.arrow_top_k, len(library))
        record(
            _step(
                "eval-arrow",
                lambda: analysis.eval_method(
                    f"arrow-top{k}",
                    analysis.predictor_routed(base, library, arrow_router.with_top_k(k)),
                    test,
                    bsz,
                ),
            )
        )

    sgd_router = None
    if want("sgd-router"):
        def compute_router():
            log("fitting the routing matrices")
            return routing.fit_router(library, base, train_pool, val_pool, "zero", hyper, rng)

        key = _stage_key("sgd-router", {"cfg": cfg.config_hash(), "lib": lib_signature(library)})
        sgd_router, info = _step(
            "fit-router",
            lambda: cache.fetch(
                "router", key, ".bin", compute_router, _save_fit_router(base), _load_fit_router
            ),
        )
        results["fits"]["sgd-router"] = info
        routing.save_router(sgd_router, out / "router_sgd", base.fingerprint)
        record(
            _step(
                "eval-sgd-router",
                lambda: analysis.eval_method(
                    "sgd-router", analysis.predictor_routed(base, library, sgd_router), test, bsz
                ),
            )
        )

    for init, mname in (("plain", "hc"), ("arrow", "arrow-hc")):
        if not want(mname):
            continue

        def compute_hc(init=init):
            log(f"fitting hierarchical-cluster routing ({init} init)")
            return routing.build_hc_routing(
                library, base, cfg.k_clusters, train_pool, val_pool, init, hyper, rng
            )

        key = _stage_key(mname, {"cfg": cfg.config_hash(), "lib": lib_signature(library)})
        hc, info = _step(
            f"fit-{mname}",
            lambda: cache.fetch(
                mname, key, ".json", compute_hc, _save_fit_hc(base, library), _load_fit_hc(library)
            ),
        )
        results["fits"][mname] = info
        record(
            _step(
                f"eval-{mname}",
                lambda: analysis.eval_method(
                    mname, analysis.predictor_cluster(base, hc), test, bsz
                ),
            )
        )

    # --- cluster-expert variants: retrain one expert per cluster
    mbc_wanted = [m for m in wanted if m.startswith("mbc-")]
    if mbc_wanted:
        assignment = _step("cluster", lambda: analysis.mbc_cluster(library, cfg.k_clusters))
        results["clusters"] = {
            datasets[i].name: int(c) for i, c in sorted(assignment.clusters.items())
        }

        def compute_mbc():
            adapters = []
            for c in range(cfg.k_clusters):
                members = [i for i, cl in assignment.clusters.items() if cl == c]
                pool = []
                for i in members:
                    pool.extend(datasets[i].train)
                log(f"training cluster expert {c} on {len(members)} tasks")
                adapters.append(
                    training.train_lora(
                        base,
                        pool,
                        cfg.expert_hyper(),
                        Rng(cfg.seed).derive("mbc", c),
                        rank=cfg.expert_rank,
                        alpha=cfg.expert_alpha,
                        task=f"cluster{c:02d}",
                        init_rng=Rng(cfg.seed).derive("lora-init"),
                    )
                )
            return ExpertLibrary(adapters, [f"cluster{c:02d}" for c in range(cfg.k_clusters)], provenance="mbc")

        key = _stage_key(
            "mbc-library",
            {"cfg": cfg.config_hash(), "lib": lib_signature(library), "k": cfg.k_clusters},
        )
        mbc_library = _step(
            "train-mbc-experts",
            lambda: cache.fetch(
                "mbc-library",
                key,
                "",
                compute_mbc,
                lambda lib, p: save_library(lib, p),
                lambda p: load_library(p, base),
            ),
        )
        save_library(mbc_library, out / "mbc_library")
        cluster_map = {datasets[i].name: int(c) for i, c in assignment.clusters.items()}
        if want("mbc-oracle"):
            record(
                _step(
                    "eval-mbc-oracle",
                    lambda: analysis.oracle_eval(
                        base, mbc_library, test, cluster_map, bsz, method="mbc-oracle"
                    ),
                )
            )
        if want("mbc-uniform-ensemble"):
            spec = EnsembleSpec(mbc_library, None, "probability")
            record(
                _step(
                    "eval-mbc-uniform-ensemble",
                    lambda: analysis.eval_method(
                        "mbc-uniform-ensemble", analysis.predictor_ensemble(base, spec), test, bsz
                    ),
                )
            )
        if want("mbc-uniform-merge"):
            merged = fusion.merge_lowrank(mbc_library, None)
            record(
                _step(
                    "eval-mbc-uniform-merge",
                    lambda: analysis.eval_method(
                        "mbc-uniform-merge", analysis.predictor_adapter(base, merged), test, bsz
                    ),
                )
            )
        if want("mbc-arrow"):
            mbc_arrow = _step("mbc-arrow-init", lambda: routing.arrow_init(mbc_library, base))
            k = min(cfg.arrow_top_k, len(mbc_library))
            record(
                _step(
                    "eval-mbc-arrow",
                    lambda: analysis.eval_method(
                        f"mbc-arrow-top{k}",
                        analysis.predictor_routed(base, mbc_library, mbc_arrow.with_top_k(k)),
                        test,
                        bsz,
                    ),
                )
            )

    # --- analyses -----------------------------------------------------------
    results["rank_check"] = {
        "not_first_on_own_task": _step("rank-check", lambda: analysis.rank_check(err_val)),
        "n_experts": len(library),
    }

    curve = _step("select-greedy", lambda: analysis.greedy_select(err_val))
    test_vals = []
    best = None
    for i in curve.selected:
        row = err_test.values[i]
        best = row if best is None else np.minimum(best, row)
        test_vals.append(float(best.mean()))
    results.setdefault("curves", {})["selection"] = {
        "selected": curve.selected,
        "val_losses": curve.losses,
        "test_losses": test_vals,
        "expert_names": [library.names[i] for i in curve.selected],
    }
    analysis.save_curve(curve, out / "selection_curve.json")

    name_to_idx = {td.name: i for i, td in enumerate(datasets)}
    sweeps = []
    alphas = np.linspace(0.0, 1.0, cfg.alpha_points).tolist()
    for a, b in cfg.interpolation_pairs:
        sweep = _step(
            f"interpolate-{a}-{b}",
            lambda a=a, b=b: analysis.interpolate_pair(
                base,
                library.adapters[name_to_idx[a]],
                library.adapters[name_to_idx[b]],
                (a, test[a]),
                (b, test[b]),
                alphas,
                bsz,
            ),
        )
        analysis.save_sweep(sweep, out / f"interp_{a}_{b}.csv")
        sweeps.append(
            {
                "pair": [a, b],
                "alphas": sweep.alphas,
                "combined": sweep.combined,
                "task1": sweep.task1,
                "task2": sweep.task2,
                "oracle_ref": sweep.oracle_ref,
            }
        )
    results["sweeps"] = sweeps

    if sgd_router is not None and arrow_router is not None and len(library) > 1:
        n = len(library)
        results.setdefault("deltas", {})["calibration"] = {
            "k_small": 1,
            "k_large": n,
            "sgd_router_delta": _step(
                "calibrate-sgd",
                lambda: analysis.calibration_delta(base, library, sgd_router, test, 1, n, bsz),
            ),
            "arrow_untrained_delta": _step(
                "calibrate-arrow",
                lambda: analysis.calibration_delta(base, library, arrow_router, test, 1, n, bsz),
            ),
        }

    ordering = [
        "oracle",
        "sgd-router",
        "sgd-ensemble",
        "uniform-ensemble",
        "uniform-merge",
    ]
    if all(m in reports for m in ordering):
        means = {m: reports[m].mean for m in ordering}
        rest = [means[m] for m in ordering if m != "oracle"]
        others = [means[m] for m in ordering if m != "uniform-merge"]
        results["fig2_margins"] = {
            "oracle_minus_best_rest": means["oracle"] - min(rest),
            "uniform_merge_minus_worst_rest": means["uniform-merge"] - max(others),
            "sgd_router_minus_uniform_ensemble": means["sgd-router"] - means["uniform-ensemble"],
        }

    blob = json.dumps(results, indent=2, sort_keys=True) + "\n"
    (out / "results.json").write_text(blob)
    log(f"wrote {out / 'results.json'}")
    return results


def lib_signature(library: ExpertLibrary) -> str:
    h = hashlib.sha256()
    h.update(library.base_fingerprint.encode())
    for ad in library.adapters:
        for key, (a, b) in ad.factors.items():
            h.update(key.encode())
            h.update(np.ascontiguousarray(a, dtype="<f8").tobytes())
            h.update(np.ascontiguousarray(b, dtype="<f8").tobytes())
    return h.hexdigest()[:24]


# cache adapters for (value, info) fit results


def _save_fit_weights(value, path):
    weights, info = value
    payload = {
        "mode": weights.mode,
        "logits": weights.logits.tolist(),
        "info": info,
    }
    Path(path).write_text(json.dumps(payload, sort_keys=True, indent=2) + "\n")


def _load_fit_weights(path):
    payload = json.loads(Path(path).read_text())
    return SimplexWeights(np.asarray(payload["logits"], dtype=np.float64), payload["mode"]), payload["info"]


def _save_fit_adapter(value, path):
    adapter, info = value
    save_adapter(adapter, path)
    Path(str(path) + ".info.json").write_text(json.dumps(info, sort_keys=True) + "\n")


def _load_fit_adapter(path):
    adapter = load_adapter(path)
    info = json.loads(Path(str(path) + ".info.json").read_text())
    return adapter, info


def _save_fit_router(base):
    def save(value, path):
        router, info = value
        routing.save_router(router, Path(str(path)).with_suffix(""), base.fingerprint)
        Path(str(path) + ".info.json").write_text(json.dumps(info, sort_keys=True) + "\n")

    return save


def _load_fit_router(path):
    router = routing.load_router(Path(str(path)).with_suffix(""))
    info = json.loads(Path(str(path) + ".info.json").read_text())
    return router, info


def _save_fit_hc(base, library):
    def save(value, path):
        hc, info = value
        payload = {
            "assignment": {str(k): v for k, v in hc.assignment.items()},
            "members": hc.cluster_members,
            "phis": [w.logits.tolist() for w in hc.cluster_weights],
            "score_mode": hc.router.score_mode,
            "init": hc.router.init,
            "router": [w.tolist() for w in hc.router.layer_weights],
            "info": info,
        }
        Path(path).write_text(json.dumps(payload, sort_keys=True) + "\n")

    return save


def _load_fit_hc(library):
    def load(path):
        payload = json.loads(Path(path).read_text())
        router = routing.Router(
            [np.asarray(w, dtype=np.float64) for w in payload["router"]],
            payload["score_mode"],
            None,
            payload["init"],
        )
        hc = routing.ClusterRouting(
            assignment={int(k): v for k, v in payload["assignment"].items()},
            cluster_members=payload["members"],
            cluster_weights=[
                SimplexWeights(np.asarray(p, dtype=np.float64), "global") for p in payload["phis"]
            ],
            router=router,
            library=library,
        )
        return hc, payload["info"]

    return load
