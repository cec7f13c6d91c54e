"""Evaluation protocol, baselines, connectivity sweeps, clustering, and
expert-selection diagnostics."""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field

import numpy as np

from . import engine
from .data import Example, iter_batches
from .engine import DensePlan, LoraPlan
from .experts import ExpertLibrary, LoraAdapter, cosine_similarity_matrix
from .fusion import EnsembleSpec, ErrorMatrix, ensemble_predict, merge_lowrank
from .model import BaseLM
from .routing import ClusterRouting, Router, cluster_routed_forward, routed_forward


@dataclass
class EvalReport:
    """Per-task mean losses with the across-task mean and standard error."""

    method: str
    per_task: dict[str, float]
    counts: dict[str, int]
    mean: float = field(init=False)
    stderr: float = field(init=False)

    def __post_init__(self):
        values = np.array(list(self.per_task.values()))
        self.mean = float(values.mean())
        self.stderr = 0.0 if values.size < 2 else float(values.std(ddof=1) / np.sqrt(values.size))

    def to_dict(self) -> dict:
        return {
            "name": self.method,
            "mean_loss": self.mean,
            "stderr": self.stderr,
            "per_task": dict(self.per_task),
            "counts": dict(self.counts),
        }


@dataclass
class InterpolationSweep:
    pair: tuple[str, str]
    alphas: list[float]
    combined: list[float]
    task1: list[float]
    task2: list[float]
    oracle_ref: float


@dataclass
class ClusterAssignment:
    clusters: dict[int, int]  # expert index -> cluster index in [0, k)
    k: int
    linkage: list[tuple[int, int, float]]  # (kept label, absorbed label, distance)


@dataclass
class SelectionCurve:
    selected: list[int]
    losses: list[float]

    def to_dict(self) -> dict:
        return {"selected": list(self.selected), "losses": list(self.losses)}


# ---------------------------------------------------------------------------
# predictors: uniform batch -> distribution interface over every fusion mode


def predictor_base(base: BaseLM):
    return lambda batch: engine.forward(base, batch.tokens).probs


def predictor_adapter(base: BaseLM, adapter: LoraAdapter):
    plan = LoraPlan(factors=adapter.factors, scale=adapter.scale)
    return lambda batch: engine.forward(base, batch.tokens, plan).probs


def predictor_dense(base: BaseLM, deltas: dict):
    plan = DensePlan(deltas=deltas)
    return lambda batch: engine.forward(base, batch.tokens, plan).probs


def predictor_ensemble(base: BaseLM, spec: EnsembleSpec):
    return lambda batch: ensemble_predict(spec, base, batch)


def predictor_routed(base: BaseLM, library: ExpertLibrary, router: Router):
    return lambda batch: routed_forward(base, library, router, batch)


def predictor_cluster(base: BaseLM, routing: ClusterRouting):
    return lambda batch: cluster_routed_forward(base, routing, batch)


def _pool_nll(predict_fn, examples, batch_size: int) -> tuple[float, float]:
    """Masked-token mean loss plus the token count it averaged over."""
    total, count = 0.0, 0.0
    for batch in iter_batches(examples, batch_size):
        probs = predict_fn(batch)
        c = float(batch.mask.sum())
        total += engine.batch_nll(probs, batch) * c
        count += c
    return total / count, count


def eval_method(
    method: str,
    predict_fn,
    tasks: dict[str, list[Example]],
    batch_size: int = 32,
) -> EvalReport:
    """Per-task mean token loss, unweighted mean over tasks, standard error."""
    if not tasks:
        raise ValueError("empty task set")
    per_task, counts = {}, {}
    for name, examples in tasks.items():
        loss, _ = _pool_nll(predict_fn, examples, batch_size)
        per_task[name] = loss
        counts[name] = len(examples)
    return EvalReport(method=method, per_task=per_task, counts=counts)


def oracle_eval(
    base: BaseLM,
    library: ExpertLibrary,
    tasks: dict[str, list[Example]],
    mapping: dict[str, int],
    batch_size: int = 32,
    method: str = "oracle",
) -> EvalReport:
    """Each task scored under its mapped expert (the task-identity upper bound)."""
    per_task, counts = {}, {}
    for name, examples in tasks.items():
        if name not in mapping:
            raise ValueError(f"no expert mapped for task {name!r}")
        predict = predictor_adapter(base, library.adapters[mapping[name]])
        loss, _ = _pool_nll(predict, examples, batch_size)
        per_task[name] = loss
        counts[name] = len(examples)
    return EvalReport(method=method, per_task=per_task, counts=counts)


def expert_task_matrix(
    base: BaseLM,
    library: ExpertLibrary,
    tasks: dict[str, list[Example]],
    batch_size: int = 32,
) -> ErrorMatrix:
    """Validation loss of every expert on every task."""
    task_names = list(tasks.keys())
    values = np.zeros((len(library), len(task_names)))
    for i, adapter in enumerate(library.adapters):
        predict = predictor_adapter(base, adapter)
        for t, name in enumerate(task_names):
            values[i, t], _ = _pool_nll(predict, tasks[name], batch_size)
    return ErrorMatrix(values, list(library.names), task_names)


def rank_check(matrix: ErrorMatrix) -> int:
    """How many experts fail to rank first on their own task (ties favor self)."""
    m = matrix.values
    if m.shape[0] != m.shape[1]:
        raise ValueError("rank_check needs a square expert<->task correspondence")
    losses = 0
    for i in range(m.shape[0]):
        if m[i, i] > m[:, i].min():
            losses += 1
    return losses


def interpolate_pair(
    base: BaseLM,
    e1: LoraAdapter,
    e2: LoraAdapter,
    task1: tuple[str, list[Example]],
    task2: tuple[str, list[Example]],
    alphas,
    batch_size: int = 32,
) -> InterpolationSweep:
    """Loss along the straight factor path between two experts.

    Each alpha evaluates the merged pair on the concatenated data of both
    tasks; the oracle reference scores every example under its own task's
    expert, which is the per-input selection the path is measured against.
    """
    alphas = [float(a) for a in alphas]
    if any(a < 0.0 or a > 1.0 for a in alphas):
        raise ValueError("alpha grid must lie in [0, 1]")
    ends = [e1.copy(), e2.copy()]
    ends[0].task = ends[1].task = None  # labels play no role on the path
    pair_lib = ExpertLibrary(ends, ["e1", "e2"])
    name1, ex1 = task1
    name2, ex2 = task2
    combined_examples = list(ex1) + list(ex2)

    combined, t1_losses, t2_losses = [], [], []
    for a in alphas:
        merged = merge_lowrank(pair_lib, np.array([1.0 - a, a]))
        predict = predictor_adapter(base, merged)
        loss, _ = _pool_nll(predict, combined_examples, batch_size)
        combined.append(loss)
        t1_losses.append(_pool_nll(predict, ex1, batch_size)[0])
        t2_losses.append(_pool_nll(predict, ex2, batch_size)[0])

    l1, c1 = _pool_nll(predictor_adapter(base, e1), ex1, batch_size)
    l2, c2 = _pool_nll(predictor_adapter(base, e2), ex2, batch_size)
    oracle_ref = (l1 * c1 + l2 * c2) / (c1 + c2)
    return InterpolationSweep(
        pair=(name1, name2),
        alphas=alphas,
        combined=combined,
        task1=t1_losses,
        task2=t2_losses,
        oracle_ref=oracle_ref,
    )


def mbc_cluster(library: ExpertLibrary, k: int, on: str = "params") -> ClusterAssignment:
    """Agglomerative average-linkage clustering on 1 - cosine similarity.

    Clusters are labeled by their smallest member index; merge ties are
    broken toward the lexicographically smallest label pair, so the result
    is deterministic.
    """
    n = len(library)
    if not 1 <= k <= n:
        raise ValueError(f"k must be in [1, {n}]")
    dist = 1.0 - cosine_similarity_matrix(library, on=on)
    clusters: dict[int, list[int]] = {i: [i] for i in range(n)}
    linkage: list[tuple[int, int, float]] = []
    while len(clusters) > k:
        labels = sorted(clusters)
        best = None
        for ai in range(len(labels) - 1):
            for bi in range(ai + 1, len(labels)):
                la, lb = labels[ai], labels[bi]
                d = float(np.mean(dist[np.ix_(clusters[la], clusters[lb])]))
                if best is None or d < best[0] - 1e-15:
                    best = (d, la, lb)
        d, la, lb = best
        clusters[la] = clusters[la] + clusters[lb]
        del clusters[lb]
        linkage.append((la, lb, d))
    ordered = sorted(clusters)
    assignment = {}
    for c, label in enumerate(ordered):
        for i in clusters[label]:
            assignment[i] = c
    return ClusterAssignment(clusters=assignment, k=k, linkage=linkage)


def greedy_select(matrix, k_max: int | None = None) -> SelectionCurve:
    """Greedy forward selection on the expert-by-task error matrix.

    The running objective is the task-level oracle loss over the selected
    subset: mean_t min_{i in S} M[i, t]. Ties go to the lower expert index.
    """
    m = matrix.values if isinstance(matrix, ErrorMatrix) else np.asarray(matrix, float)
    n = m.shape[0]
    k_max = n if k_max is None else k_max
    if not 1 <= k_max <= n:
        raise ValueError(f"k_max must be in [1, {n}]")
    selected: list[int] = []
    losses: list[float] = []
    best_per_task = None
    for _ in range(k_max):
        best = None
        for i in range(n):
            if i in selected:
                continue
            cand = m[i] if best_per_task is None else np.minimum(best_per_task, m[i])
            val = float(cand.mean())
            if best is None or val < best[0] - 1e-15:
                best = (val, i, cand)
        val, i, cand = best
        selected.append(i)
        best_per_task = cand
        losses.append(val)
    return SelectionCurve(selected=selected, losses=losses)


def calibration_delta(
    base: BaseLM,
    library: ExpertLibrary,
    router: Router,
    tasks: dict[str, list[Example]],
    k_small: int,
    k_large: int,
    batch_size: int = 32,
) -> float:
    """Mean-loss gap between sparse and wide routing for one router."""
    n = router.n_experts
    if not 1 <= k_small < k_large <= n:
        raise ValueError("need 1 <= k_small < k_large <= number of experts")

    def report(k: int) -> EvalReport:
        r = router.with_top_k(None if k == n else k)
        return eval_method(
            f"top{k}", predictor_routed(base, library, r), tasks, batch_size
        )

    return report(k_small).mean - report(k_large).mean


# ---------------------------------------------------------------------------
# serialization


def save_report(report: EvalReport, path) -> None:
    with open(path, "w") as fh:
        json.dump(report.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_curve(curve: SelectionCurve, path) -> None:
    with open(path, "w") as fh:
        json.dump(curve.to_dict(), fh, indent=2, sort_keys=True)
        fh.write("\n")


def save_sweep(sweep: InterpolationSweep, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["alpha", "combined_loss", "task1_loss", "task2_loss", "oracle_ref"])
        for i, a in enumerate(sweep.alphas):
            writer.writerow(
                [
                    repr(a),
                    repr(sweep.combined[i]),
                    repr(sweep.task1[i]),
                    repr(sweep.task2[i]),
                    repr(sweep.oracle_ref),
                ]
            )
