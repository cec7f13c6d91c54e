"""Input-dependent fusion: learned per-layer routers, zero-shot spectral
initialization, top-k sparsification, and hierarchical-cluster routing.

A router is one matrix per layer with one row per expert. At every adapter
site the incoming hidden state is scored against those rows, the scores are
softmaxed into coefficients, and the site's expert stack is fused with them
(factor-wise, exactly like merging, but per token).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import binio, engine
from .data import Hyper, iter_batches
from .engine import RoutedPlan
from .experts import ExpertLibrary
from .fusion import SimplexWeights, _mean_examples_nll, merge_lowrank
from .model import BaseLM, TokenBatch
from .numerics import Optimizer, Rng, softmax, softmax_vjp, svd_top


@dataclass
class Router:
    """Per-layer score matrices mapping hidden states to expert coefficients."""

    layer_weights: list[np.ndarray]  # per layer (N, m)
    score_mode: str = "plain"  # {"plain", "absolute"}
    top_k: int | None = None  # None = use all experts
    init: str = "zero"

    def __post_init__(self):
        if self.score_mode not in ("plain", "absolute"):
            raise ValueError(f"unknown score mode {self.score_mode!r}")
        n = self.layer_weights[0].shape[0]
        for w in self.layer_weights:
            if w.shape[0] != n or not np.all(np.isfinite(w)):
                raise ValueError("router rows must agree across layers and be finite")

    @property
    def n_experts(self) -> int:
        return self.layer_weights[0].shape[0]

    def with_top_k(self, k: int | None) -> "Router":
        return Router([w.copy() for w in self.layer_weights], self.score_mode, k, self.init)


@dataclass
class ClusterRouting:
    """Two-level routing: frozen within-cluster mixtures, routed across clusters."""

    assignment: dict[int, int]  # expert index -> cluster index
    cluster_members: list[list[int]]  # per cluster, member expert indices
    cluster_weights: list[SimplexWeights]  # per cluster, over its members
    router: Router  # rows = clusters
    library: ExpertLibrary = field(repr=False, default=None)

    def cluster_library(self) -> ExpertLibrary:
        """Materialize one merged adapter per cluster, in cluster order."""
        adapters = []
        for members, weights in zip(self.cluster_members, self.cluster_weights):
            sub = ExpertLibrary(
                [self.library.adapters[i] for i in members],
                [self.library.names[i] for i in members],
            )
            merged = merge_lowrank(sub, weights)
            adapters.append(merged)
        return ExpertLibrary(adapters, [f"cluster{c:02d}" for c in range(len(adapters))])


def arrow_init(library: ExpertLibrary, base: BaseLM) -> Router:
    """Zero-shot router: each expert's row is the top right singular vector of
    its dense update at the layer's attention site."""
    weights = []
    for layer in range(base.config.layers):
        key = f"L{layer}.attn"
        rows = []
        for name, adapter in zip(library.names, library.adapters):
            a, b = adapter.factors[key]
            delta = a @ b
            if not np.any(delta):
                raise ValueError(f"expert {name!r} has a zero update at {key}")
            _, _, v = svd_top(delta, 1)
            rows.append(v[:, 0])
        weights.append(np.stack(rows))
    return Router(weights, score_mode="absolute", top_k=None, init="arrow")


def route_coeffs(router: Router, layer: int, h: np.ndarray) -> np.ndarray:
    """Coefficient distribution for a single hidden state (or batch of them)."""
    w = router.layer_weights[layer]
    h = np.asarray(h, dtype=np.float64)
    single = h.ndim == 1
    hb = h[None, None] if single else h
    lam, _ = engine._route_coeffs_batch(w, hb, router.score_mode, router.top_k)
    return lam[0, 0] if single else lam


def apply_topk(lam: np.ndarray, k: int) -> np.ndarray:
    """Keep the k largest coefficients (ties to the lower index), renormalize."""
    lam = np.asarray(lam, dtype=np.float64)
    n = lam.shape[-1]
    if not 1 <= k <= n:
        raise ValueError(f"top-k must be in [1, {n}]")
    if k == n:
        return lam.copy()
    return engine._topk_batch(lam, k)


def routed_plan(library: ExpertLibrary, router: Router) -> RoutedPlan:
    if router.n_experts != len(library):
        raise ValueError("router rows must match library size")
    return RoutedPlan(
        stacks=library.stacks(),
        scale=library.scale,
        layer_weights=router.layer_weights,
        score_mode=router.score_mode,
        top_k=router.top_k,
    )


def routed_forward(base: BaseLM, library: ExpertLibrary, router: Router, batch: TokenBatch):
    """Per-token fused forward pass; returns next-token distributions."""
    if library.base_fingerprint != base.fingerprint:
        raise binio.FingerprintMismatchError("adapter/base mismatch")
    fwd = engine.forward(base, batch.tokens, routed_plan(library, router))
    return fwd.probs


def router_objective_grad(
    library: ExpertLibrary,
    base: BaseLM,
    layer_weights: list[np.ndarray],
    score_mode: str,
    batch: TokenBatch,
):
    """Routed-forward cross-entropy and per-layer routing-matrix gradients."""
    plan = RoutedPlan(
        stacks=library.stacks(),
        scale=library.scale,
        layer_weights=layer_weights,
        score_mode=score_mode,
    )
    fwd = engine.forward(base, batch.tokens, plan)
    loss = engine.batch_nll(fwd.probs, batch)
    grads = engine.backward(
        base, fwd, engine.nll_grad_logits(fwd.probs, batch), plan, want_router=True
    )
    return loss, grads.router


def fit_router(
    library: ExpertLibrary,
    base: BaseLM,
    train_examples,
    val_examples,
    init: str = "zero",
    hyper: Hyper | None = None,
    rng: Rng | None = None,
):
    """Train per-layer routing matrices on the task-agnostic mixture.

    ``init='zero'`` starts from uniform coefficients with plain scores;
    ``init='arrow'`` starts from the spectral router and keeps its absolute
    scores. Returns a router with top_k unset (all experts active).
    """
    if init not in ("zero", "arrow"):
        raise ValueError(f"unknown router init {init!r}")
    if not train_examples:
        raise ValueError("empty training data")
    hyper = hyper or Hyper()
    rng = (rng or Rng(0)).derive("fit-router", init)
    n, m = len(library), base.config.width
    if init == "arrow":
        start = arrow_init(library, base)
        w0 = [w.copy() for w in start.layer_weights]
        score_mode = "absolute"
    else:
        w0 = [np.zeros((n, m)) for _ in range(base.config.layers)]
        score_mode = "plain"
    stacks = library.stacks()
    splits = {"train": train_examples, "val": val_examples or train_examples}

    def plan_for(ws):
        return RoutedPlan(
            stacks=stacks, scale=library.scale, layer_weights=ws, score_mode=score_mode
        )

    def eval_loss(ws, split):
        plan = plan_for(ws)
        return _mean_examples_nll(
            lambda batch: engine.forward(base, batch.tokens, plan).probs,
            splits[split],
            hyper.batch_size,
        )

    initial_train = eval_loss(w0, "train")
    best = None
    for li, lr in enumerate(hyper.rates()):
        ws = [w.copy() for w in w0]
        opt = Optimizer(kind=hyper.optimizer, lr=lr)
        for epoch in range(hyper.epochs):
            shuffle = rng.derive("shuffle", li, epoch)
            for batch in iter_batches(train_examples, hyper.batch_size, shuffle):
                _, router_grads = router_objective_grad(library, base, ws, score_mode, batch)
                params = {f"w{l}": w for l, w in enumerate(ws)}
                glist = {f"w{l}": g for l, g in enumerate(router_grads)}
                updated = opt.step(params, glist)
                ws = [updated[f"w{l}"] for l in range(len(ws))]
        score = eval_loss(ws, "val")
        if best is None or score < best[0]:
            best = (score, lr, ws)
    score, lr, ws = best
    info = {
        "lr": lr,
        "val_loss": score,
        "train_loss_initial": initial_train,
        "train_loss_final": eval_loss(ws, "train"),
    }
    return Router(ws, score_mode=score_mode, top_k=None, init=init), info


def build_hc_routing(
    library: ExpertLibrary,
    base: BaseLM,
    k_clusters: int,
    train_examples,
    val_examples,
    init: str = "plain",
    hyper: Hyper | None = None,
    rng: Rng | None = None,
):
    """Cluster the library, then jointly learn within-cluster mixtures and a
    cross-cluster router on the usual fusion objective.

    ``init='arrow'`` seeds each cluster row from the top right singular
    vector of the uniform within-cluster merged update.
    """
    from .analysis import mbc_cluster  # local import; analysis depends on routing too

    if init not in ("plain", "arrow"):
        raise ValueError(f"unknown hc init {init!r}")
    if not train_examples:
        raise ValueError("empty training data")
    hyper = hyper or Hyper()
    rng = (rng or Rng(0)).derive("hc", init, k_clusters)
    assignment = mbc_cluster(library, k_clusters)
    members = [[] for _ in range(k_clusters)]
    for idx in range(len(library)):
        members[assignment.clusters[idx]].append(idx)

    layers = base.config.layers
    if init == "arrow":
        rows = []
        for layer in range(layers):
            key = f"L{layer}.attn"
            layer_rows = []
            for mem in members:
                acc = None
                for i in mem:
                    a, b = library.adapters[i].factors[key]
                    term = a @ b
                    acc = term if acc is None else acc + term
                acc /= len(mem)
                if not np.any(acc):
                    raise ValueError(f"cluster with members {mem} has a zero merged update")
                _, _, v = svd_top(acc, 1)
                layer_rows.append(v[:, 0])
            rows.append(np.stack(layer_rows))
        w0 = rows
        score_mode = "absolute"
    else:
        w0 = [np.zeros((k_clusters, base.config.width)) for _ in range(layers)]
        score_mode = "plain"
    phi0 = [np.zeros(len(mem)) for mem in members]
    site_keys = library.site_keys
    splits = {"train": train_examples, "val": val_examples or train_examples}

    def cluster_stacks(phis):
        """Merge members into one virtual expert per cluster, per site."""
        stacks = {k: [] for k in site_keys}
        lams = [softmax(phi) for phi in phis]
        for c, mem in enumerate(members):
            for key in site_keys:
                a_stack = np.stack([library.adapters[i].factors[key][0] for i in mem])
                b_stack = np.stack([library.adapters[i].factors[key][1] for i in mem])
                stacks[key].append(
                    (
                        np.einsum("i,inr->nr", lams[c], a_stack),
                        np.einsum("i,irm->rm", lams[c], b_stack),
                    )
                )
        return stacks, lams

    def plan_for(ws, phis):
        stacks, _ = cluster_stacks(phis)
        return RoutedPlan(
            stacks=stacks, scale=library.scale, layer_weights=ws, score_mode=score_mode
        )

    def eval_loss(ws, phis, split):
        plan = plan_for(ws, phis)
        return _mean_examples_nll(
            lambda batch: engine.forward(base, batch.tokens, plan).probs,
            splits[split],
            hyper.batch_size,
        )

    best = None
    for li, lr in enumerate(hyper.rates()):
        ws = [w.copy() for w in w0]
        phis = [p.copy() for p in phi0]
        opt = Optimizer(kind=hyper.optimizer, lr=lr)
        for epoch in range(hyper.epochs):
            shuffle = rng.derive("shuffle", li, epoch)
            for batch in iter_batches(train_examples, hyper.batch_size, shuffle):
                stacks, lams = cluster_stacks(phis)
                plan = RoutedPlan(
                    stacks=stacks,
                    scale=library.scale,
                    layer_weights=ws,
                    score_mode=score_mode,
                )
                fwd = engine.forward(base, batch.tokens, plan)
                grads = engine.backward(
                    base,
                    fwd,
                    engine.nll_grad_logits(fwd.probs, batch),
                    plan,
                    want_router=True,
                    want_stack=True,
                )
                dphis = []
                for c, mem in enumerate(members):
                    dlam = np.zeros(len(mem))
                    for key in site_keys:
                        da, db = grads.stack[key][c]
                        for j, i in enumerate(mem):
                            a, b = library.adapters[i].factors[key]
                            dlam[j] += float((da * a).sum() + (db * b).sum())
                    dphis.append(softmax_vjp(lams[c], dlam))
                params = {f"w{l}": w for l, w in enumerate(ws)}
                params.update({f"phi{c}": p for c, p in enumerate(phis)})
                glist = {f"w{l}": g for l, g in enumerate(grads.router)}
                glist.update({f"phi{c}": d for c, d in enumerate(dphis)})
                updated = opt.step(params, glist)
                ws = [updated[f"w{l}"] for l in range(len(ws))]
                phis = [updated[f"phi{c}"] for c in range(len(phis))]
        score = eval_loss(ws, phis, "val")
        if best is None or score < best[0]:
            best = (score, lr, ws, phis)
    score, lr, ws, phis = best
    routing = ClusterRouting(
        assignment=dict(assignment.clusters),
        cluster_members=members,
        cluster_weights=[SimplexWeights(phi, "global") for phi in phis],
        router=Router(ws, score_mode=score_mode, top_k=None, init=init),
        library=library,
    )
    info = {"lr": lr, "val_loss": score}
    return routing, info


def cluster_routed_forward(base: BaseLM, routing: ClusterRouting, batch: TokenBatch):
    cluster_lib = routing.cluster_library()
    return routed_forward(base, cluster_lib, routing.router, batch)


def save_router(router: Router, path_prefix, fingerprint: str) -> None:
    """Write per-layer matrices as one binary plus a JSON sidecar."""
    path_prefix = Path(path_prefix)
    arrays = {f"W{l}": w for l, w in enumerate(router.layer_weights)}
    binio.write_arrays(path_prefix.with_suffix(".bin"), binio.KIND_ROUTER, fingerprint, arrays)
    sidecar = {
        "mode": router.score_mode,
        "top_k": router.top_k,
        "init": router.init,
    }
    with open(path_prefix.with_suffix(".json"), "w") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_router(path_prefix, expected_fingerprint: str | None = None) -> Router:
    path_prefix = Path(path_prefix)
    _, fingerprint, arrays = binio.read_arrays(
        path_prefix.with_suffix(".bin"), expect_kind=binio.KIND_ROUTER
    )
    if expected_fingerprint is not None and fingerprint != expected_fingerprint:
        raise binio.FingerprintMismatchError("adapter/base mismatch")
    with open(path_prefix.with_suffix(".json")) as fh:
        sidecar = json.load(fh)
    weights = [arrays[f"W{l}"] for l in range(len(arrays))]
    return Router(weights, sidecar["mode"], sidecar["top_k"], sidecar.get("init", "zero"))
