"""Input-independent fusion of expert libraries.

Ensembling combines expert output distributions (probability or logit
level); merging combines adapter parameters, either factor-wise (low-rank)
or on the reconstructed dense updates (full-rank). Learned variants
optimize simplex coefficients by gradient descent through a softmax
reparameterization; the worst-case variant solves a small linear program.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass

import numpy as np

from . import engine, minimax_lp
from .data import Hyper, iter_batches
from .engine import LoraPlan
from .experts import ExpertLibrary, LoraAdapter
from .model import BaseLM, TokenBatch
from .numerics import EPS_PROB, Optimizer, Rng, softmax, softmax_vjp


@dataclass
class SimplexWeights:
    """Fusion coefficients on the simplex, parameterized by free logits.

    ``mode='global'`` holds one coefficient row; ``mode='per-layer'`` one row
    per layer. The softmax parameterization keeps every row on the simplex
    by construction.
    """

    logits: np.ndarray
    mode: str = "global"

    def __post_init__(self):
        self.logits = np.asarray(self.logits, dtype=np.float64)
        if self.mode not in ("global", "per-layer"):
            raise ValueError(f"unknown mode {self.mode!r}")
        want = 1 if self.mode == "global" else 2
        if self.logits.ndim != want:
            raise ValueError(f"{self.mode} weights need {want}-D logits")

    @property
    def lam(self) -> np.ndarray:
        return softmax(self.logits, axis=-1)

    @property
    def n_experts(self) -> int:
        return self.logits.shape[-1]


@dataclass
class EnsembleSpec:
    library: ExpertLibrary
    weights: "SimplexWeights | np.ndarray | None" = None  # None = uniform
    level: str = "probability"  # {"probability", "logit"}

    def __post_init__(self):
        if isinstance(self.weights, SimplexWeights) and self.weights.mode != "global":
            raise ValueError("ensembling weights outputs; per-layer mode rejected")
        if self.level not in ("probability", "logit"):
            raise ValueError(f"unknown ensemble level {self.level!r}")

    def coeffs(self) -> np.ndarray:
        return resolve_coeffs(self.weights, len(self.library), layers=None)


@dataclass
class ErrorMatrix:
    """Validation loss of expert i on task t, expert order = library order."""

    values: np.ndarray  # (N, T)
    expert_names: list[str]
    task_names: list[str]

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if self.values.ndim != 2:
            raise ValueError("error matrix must be 2-D")
        if not np.all(np.isfinite(self.values)) or np.any(self.values < 0):
            raise ValueError("error matrix entries must be finite and >= 0")


def resolve_coeffs(weights, n: int, layers: int | None) -> np.ndarray:
    """Normalize a weights argument to explicit coefficient rows.

    Accepts SimplexWeights, a raw simplex array ((N,) or (L,N)), or None for
    uniform. Raw arrays are validated but used exactly as given, which is
    what lets one-hot coefficients reproduce an expert bit-for-bit.
    """
    if weights is None:
        lam = np.full(n, 1.0 / n)
    elif isinstance(weights, SimplexWeights):
        lam = weights.lam
    else:
        lam = np.asarray(weights, dtype=np.float64)
        if np.any(lam < 0) or not np.allclose(lam.sum(axis=-1), 1.0, atol=1e-9):
            raise ValueError("raw coefficients must lie on the simplex")
    if lam.shape[-1] != n:
        raise ValueError(f"expected {n} coefficients, got {lam.shape[-1]}")
    if lam.ndim == 2 and layers is not None and lam.shape[0] != layers:
        raise ValueError(f"expected {layers} coefficient rows, got {lam.shape[0]}")
    return lam


def combine_probs(stack: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Coefficient-weighted mixture of expert distributions; stack is (N, ..., V)."""
    return np.einsum("n...v,n->...v", stack, lam)


def combine_logits(stack: np.ndarray, lam: np.ndarray) -> np.ndarray:
    """Softmax of the coefficient-weighted sum of pre-softmax logits."""
    return softmax(np.einsum("n...v,n->...v", stack, lam), axis=-1)


def _expert_plans(library: ExpertLibrary) -> list[LoraPlan]:
    return [LoraPlan(factors=ad.factors, scale=ad.scale) for ad in library.adapters]


def expert_prob_stack(library: ExpertLibrary, base: BaseLM, batch: TokenBatch, level="probability"):
    """Forward every expert on one batch; returns (N, B, T, V) probs or logits."""
    outs = []
    for plan in _expert_plans(library):
        fwd = engine.forward(base, batch.tokens, plan)
        outs.append(fwd.probs if level == "probability" else fwd.logits)
    return np.stack(outs, axis=0)


def ensemble_predict(spec: EnsembleSpec, base: BaseLM, batch: TokenBatch) -> np.ndarray:
    lam = spec.coeffs()
    stack = expert_prob_stack(spec.library, base, batch, level=spec.level)
    if spec.level == "probability":
        return combine_probs(stack, lam)
    return combine_logits(stack, lam)


def merge_lowrank(library: ExpertLibrary, weights) -> LoraAdapter:
    """Factor-space merge: per site, A* = sum_i lam_i A_i and B* = sum_i lam_i B_i."""
    n = len(library)
    layers = max(ad_layer(k) for k in library.site_keys) + 1
    lam = resolve_coeffs(weights, n, layers)
    rows = lam if lam.ndim == 2 else None
    factors = {}
    for key in library.site_keys:
        row = lam if rows is None else rows[ad_layer(key)]
        a_parts = [ad.factors[key][0] for ad in library.adapters]
        b_parts = [ad.factors[key][1] for ad in library.adapters]
        factors[key] = (
            np.einsum("i,inr->nr", row, np.stack(a_parts)),
            np.einsum("i,irm->rm", row, np.stack(b_parts)),
        )
    return LoraAdapter(
        factors=factors,
        rank=library.rank,
        alpha=library.alpha,
        base_fingerprint=library.base_fingerprint,
        task=None,
    )


def merge_fullrank(library: ExpertLibrary, weights) -> dict[str, np.ndarray]:
    """Dense merge of the reconstructed updates: per site, sum_i lam_i (a/r) A_i B_i."""
    n = len(library)
    layers = max(ad_layer(k) for k in library.site_keys) + 1
    lam = resolve_coeffs(weights, n, layers)
    rows = lam if lam.ndim == 2 else None
    deltas = {}
    for key in library.site_keys:
        row = lam if rows is None else rows[ad_layer(key)]
        acc = None
        for coef, ad in zip(row, library.adapters):
            term = coef * ad.site_delta(key)
            acc = term if acc is None else acc + term
        deltas[key] = acc
    return deltas


def ad_layer(site_key: str) -> int:
    return int(site_key.split(".")[0][1:])


# ---------------------------------------------------------------------------
# learned coefficients


def _grid_fit(theta0, step_fn, eval_fn, hyper: Hyper, rng: Rng, train_examples):
    """Shared lr-grid trainer: returns (best_theta, info).

    ``step_fn(theta, batch) -> (loss, dtheta)``; ``eval_fn(theta, split) ->
    float``. Rates are tried in grid order and ties keep the earlier rate.
    """
    if not train_examples:
        raise ValueError("empty training data")
    initial_train = eval_fn(theta0, "train")
    best = None
    for li, lr in enumerate(hyper.rates()):
        theta = theta0.copy()
        opt = Optimizer(kind=hyper.optimizer, lr=lr)
        for epoch in range(hyper.epochs):
            shuffle = rng.derive("shuffle", li, epoch)
            for batch in iter_batches(train_examples, hyper.batch_size, shuffle):
                loss, dtheta = step_fn(theta, batch)
                if hyper.l1_penalty > 0.0:
                    dtheta = dtheta + hyper.l1_penalty * np.sign(theta)
                theta = opt.step({"t": theta}, {"t": dtheta})["t"]
        score = eval_fn(theta, "val")
        if best is None or score < best[0]:
            best = (score, lr, theta)
    val_loss, lr, theta = best
    info = {
        "lr": lr,
        "val_loss": val_loss,
        "train_loss_initial": initial_train,
        "train_loss_final": eval_fn(theta, "train"),
    }
    return theta, info


def ensemble_objective_grad(
    library: ExpertLibrary, base: BaseLM, theta: np.ndarray, batch: TokenBatch
):
    """Loss and d(loss)/d(theta) of the probability-level ensemble objective.

    Expert distributions are constants, so the coefficient gradient is
    closed-form and only the softmax parameterization needs a chain rule.
    """
    lam = softmax(theta)
    stack = expert_prob_stack(library, base, batch)
    p_ens = combine_probs(stack, lam)
    loss = engine.batch_nll(p_ens, batch)
    count = float(batch.mask.sum())
    py_stack = np.take_along_axis(stack, batch.targets[None, ..., None], axis=-1)[..., 0]
    py_ens = np.take_along_axis(p_ens, batch.targets[..., None], axis=-1)[..., 0]
    dlam = -(py_stack * (batch.mask / (py_ens + EPS_PROB))[None]).sum(axis=(1, 2)) / count
    return loss, softmax_vjp(lam, dlam)


def merge_objective_grad(
    library: ExpertLibrary, base: BaseLM, theta: np.ndarray, mode: str, batch: TokenBatch
):
    """Loss and coefficient-logit gradient of the merged-adapter objective."""
    weights = SimplexWeights(theta, mode)
    merged = merge_lowrank(library, weights)
    plan = LoraPlan(factors=merged.factors, scale=merged.scale)
    fwd = engine.forward(base, batch.tokens, plan)
    loss = engine.batch_nll(fwd.probs, batch)
    grads = engine.backward(
        base, fwd, engine.nll_grad_logits(fwd.probs, batch), plan, want_adapter=True
    )
    lam = weights.lam
    dlam = np.zeros_like(lam)
    stacks = library.stacks()
    for key in library.site_keys:
        da, db = grads.adapter[key]
        per_expert = np.array(
            [float((da * a).sum() + (db * b).sum()) for (a, b) in stacks[key]]
        )
        if mode == "per-layer":
            dlam[ad_layer(key)] += per_expert
        else:
            dlam += per_expert
    return loss, softmax_vjp(lam, dlam, axis=-1)


def fit_ensemble_weights(
    library: ExpertLibrary,
    base: BaseLM,
    train_examples,
    val_examples,
    hyper: Hyper | None = None,
    rng: Rng | None = None,
):
    """Learn global ensembling coefficients by empirical-risk descent."""
    hyper = hyper or Hyper()
    rng = (rng or Rng(0)).derive("fit-ensemble")
    n = len(library)
    theta0 = np.zeros(n)
    splits = {"train": train_examples, "val": val_examples or train_examples}

    def step_fn(theta, batch):
        return ensemble_objective_grad(library, base, theta, batch)

    def eval_fn(theta, split):
        spec = EnsembleSpec(library, SimplexWeights(theta))
        return _mean_examples_nll(
            lambda batch: ensemble_predict(spec, base, batch), splits[split], hyper.batch_size
        )

    theta, info = _grid_fit(theta0, step_fn, eval_fn, hyper, rng, train_examples)
    return SimplexWeights(theta, "global"), info


def fit_merge_weights(
    library: ExpertLibrary,
    base: BaseLM,
    train_examples,
    val_examples,
    mode: str = "global",
    hyper: Hyper | None = None,
    rng: Rng | None = None,
):
    """Learn merging coefficients; the objective forwards through the merge."""
    if mode not in ("global", "per-layer"):
        raise ValueError(f"unknown merge mode {mode!r}")
    hyper = hyper or Hyper()
    rng = (rng or Rng(0)).derive("fit-merge", mode)
    n = len(library)
    layers = base.config.layers
    theta0 = np.zeros(n) if mode == "global" else np.zeros((layers, n))
    splits = {"train": train_examples, "val": val_examples or train_examples}

    def step_fn(theta, batch):
        return merge_objective_grad(library, base, theta, mode, batch)

    def eval_fn(theta, split):
        merged = merge_lowrank(library, SimplexWeights(theta, mode))
        plan = LoraPlan(factors=merged.factors, scale=merged.scale)
        return _mean_examples_nll(
            lambda batch: engine.forward(base, batch.tokens, plan).probs,
            splits[split],
            hyper.batch_size,
        )

    theta, info = _grid_fit(theta0, step_fn, eval_fn, hyper, rng, train_examples)
    return SimplexWeights(theta, mode), info


def distill_objective_grad(
    teacher_probs: np.ndarray,
    base: BaseLM,
    factors: dict,
    scale: float,
    batch: TokenBatch,
    dropout_p: float = 0.0,
    dropout_masks: dict | None = None,
):
    """Soft-target cross-entropy of the student plus per-site factor grads."""
    plan = LoraPlan(
        factors=factors, scale=scale, dropout_p=dropout_p, dropout_masks=dropout_masks
    )
    fwd = engine.forward(base, batch.tokens, plan)
    loss = engine.soft_ce(fwd.probs, teacher_probs, batch.mask)
    dlogits = engine.soft_ce_grad_logits(fwd.probs, teacher_probs, batch.mask)
    grads = engine.backward(base, fwd, dlogits, plan, want_adapter=True)
    return loss, grads.adapter


def distill(
    teacher: EnsembleSpec,
    base: BaseLM,
    train_examples,
    val_examples,
    hyper: Hyper | None = None,
    rng: Rng | None = None,
    rank: int | None = None,
):
    """Distill a fixed ensemble into a single fresh adapter.

    The student minimizes token-level cross-entropy against the teacher's
    full soft distributions on masked positions. Returns the student and a
    report that includes mean KL(teacher || student) before and after.
    """
    from .experts import init_adapter  # local import to avoid cycle at module load

    hyper = hyper or Hyper()
    rng = (rng or Rng(0)).derive("distill")
    rank = rank or teacher.library.rank
    splits = {"train": train_examples, "val": val_examples or train_examples}

    if not train_examples:
        raise ValueError("empty training data")

    def teacher_probs(batch):
        return ensemble_predict(teacher, base, batch)

    def student_probs(factors, batch):
        plan = LoraPlan(factors=factors, scale=teacher.library.alpha / rank)
        return engine.forward(base, batch.tokens, plan).probs

    def eval_fn(factors, split):
        total, count = 0.0, 0.0
        for batch in iter_batches(splits[split], hyper.batch_size):
            t = teacher_probs(batch)
            s = student_probs(factors, batch)
            c = float(batch.mask.sum())
            total += engine.soft_ce(s, t, batch.mask) * c
            count += c
        return total / count

    def mean_kl(factors, examples) -> float:
        total, count = 0.0, 0.0
        for batch in iter_batches(examples, hyper.batch_size):
            t = teacher_probs(batch)
            s = student_probs(factors, batch)
            c = float(batch.mask.sum())
            total += engine.mean_kl(t, s, batch.mask) * c
            count += c
        return total / count

    student0 = init_adapter(base, rng.derive("init"), rank=rank, alpha=teacher.library.alpha)
    kl_initial = mean_kl(student0.factors, splits["val"])
    scale = teacher.library.alpha / rank

    best = None
    for li, lr in enumerate(hyper.rates()):
        factors = {k: (a.copy(), b.copy()) for k, (a, b) in student0.factors.items()}
        opt = Optimizer(kind=hyper.optimizer, lr=lr)
        for epoch in range(hyper.epochs):
            shuffle = rng.derive("shuffle", li, epoch)
            for batch in iter_batches(train_examples, hyper.batch_size, shuffle):
                t = teacher_probs(batch)
                masks = None
                if hyper.dropout > 0.0:
                    dm = rng.derive("drop", li, epoch, opt.step_count)
                    masks = {
                        k: (dm.derive(k).random(batch.tokens.shape + (b.shape[1],)) >= hyper.dropout).astype(float)
                        for k, (a, b) in factors.items()
                    }
                _, adapter_grads = distill_objective_grad(
                    t, base, factors, scale, batch, hyper.dropout, masks
                )
                flat_params = {}
                flat_grads = {}
                for k, (a, b) in factors.items():
                    flat_params[k + ".A"], flat_params[k + ".B"] = a, b
                    flat_grads[k + ".A"], flat_grads[k + ".B"] = adapter_grads[k]
                updated = opt.step(flat_params, flat_grads)
                factors = {k: (updated[k + ".A"], updated[k + ".B"]) for k in factors}
        score = eval_fn(factors, "val")
        if best is None or score < best[0]:
            best = (score, lr, factors)
    score, lr, factors = best
    student = LoraAdapter(
        factors=factors,
        rank=rank,
        alpha=teacher.library.alpha,
        base_fingerprint=base.fingerprint,
        task=None,
    )
    info = {
        "lr": lr,
        "val_soft_ce": score,
        "kl_initial": kl_initial,
        "kl_final": mean_kl(factors, splits["val"]),
    }
    return student, info


def _mean_examples_nll(predict_fn, examples, batch_size: int) -> float:
    total, count = 0.0, 0.0
    for batch in iter_batches(examples, batch_size):
        probs = predict_fn(batch)
        c = float(batch.mask.sum())
        total += engine.batch_nll(probs, batch) * c
        count += c
    if count == 0.0:
        raise ValueError("no masked positions in evaluation data")
    return total / count


def lp_minimax_weights(matrix) -> tuple[np.ndarray, float, int]:
    """Coefficients minimizing the worst-case per-task ensemble error.

    Solves min c s.t. lam on the simplex and lam^T M[:, t] <= c for every
    task t, by the two-phase simplex method. Returns (lam, c, support size).
    """
    values = matrix.values if isinstance(matrix, ErrorMatrix) else np.asarray(matrix, float)
    lam, c = minimax_lp.solve_minimax(values)
    support = int(np.sum(lam > 1e-9))
    return lam, c, support


# ---------------------------------------------------------------------------
# serialization


def save_weights(weights: SimplexWeights, path) -> None:
    payload = {
        "mode": weights.mode,
        "logits": weights.logits.tolist(),
        "lambda": weights.lam.tolist(),
    }
    with open(path, "w") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_weights(path) -> SimplexWeights:
    with open(path) as fh:
        payload = json.load(fh)
    return SimplexWeights(np.asarray(payload["logits"], dtype=np.float64), payload["mode"])


def save_error_matrix(matrix: ErrorMatrix, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["expert", *matrix.task_names])
        for name, row in zip(matrix.expert_names, matrix.values):
            writer.writerow([name, *(repr(float(x)) for x in row)])


def load_error_matrix(path) -> ErrorMatrix:
    with open(path, newline="") as fh:
        rows = list(csv.reader(fh))
    task_names = rows[0][1:]
    expert_names = [r[0] for r in rows[1:]]
    values = np.array([[float(x) for x in r[1:]] for r in rows[1:]])
    return ErrorMatrix(values, expert_names, task_names)
