"""Base-model pretraining and LoRA expert training loops."""

from __future__ import annotations

import numpy as np

from . import engine
from .data import Example, Hyper, iter_batches
from .engine import LoraPlan
from .experts import LoraAdapter, init_adapter
from .model import BaseLM, ModelConfig, build_base
from .numerics import Optimizer, Rng


class DivergenceError(RuntimeError):
    def __init__(self, step: int):
        super().__init__(f"training diverged (non-finite loss) at step {step}")
        self.step = step


def pretrain_base(
    config: ModelConfig,
    examples: list[Example],
    hyper: Hyper,
    rng: Rng,
) -> BaseLM:
    """Train every parameter briefly on the task mixture, then freeze."""
    model = build_base(config, rng)
    if hyper.epochs == 0 or not examples:
        return model
    lr = hyper.lr if hyper.lr is not None else 3e-3
    opt = Optimizer(kind=hyper.optimizer, lr=lr)
    params = {k: v.copy() for k, v in model.params.items()}
    live = BaseLM(config=config, params=params, fingerprint="live")
    step = 0
    for epoch in range(hyper.epochs):
        shuffle = rng.derive("pretrain-shuffle", epoch)
        for batch in iter_batches(examples, hyper.batch_size, shuffle):
            try:
                fwd = engine.forward(live, batch.tokens)
                loss = engine.batch_nll(fwd.probs, batch)
            except ValueError as exc:
                if "non-finite" in str(exc):
                    raise DivergenceError(step) from exc
                raise
            if not np.isfinite(loss):
                raise DivergenceError(step)
            grads = engine.backward(
                live, fwd, engine.nll_grad_logits(fwd.probs, batch), want_base=True
            )
            params = opt.step(params, grads.base)
            live = BaseLM(config=config, params=params, fingerprint="live")
            step += 1
    return BaseLM(config=config, params=params)


def train_lora(
    base: BaseLM,
    examples: list[Example],
    hyper: Hyper,
    rng: Rng,
    rank: int = 4,
    alpha: float = 16.0,
    task: str | None = None,
    init_rng: Rng | None = None,
) -> LoraAdapter:
    """Adapter training: only (A, B) move; dropout on the adapter branch.

    ``init_rng`` pins the (A, B) starting point; experts trained from one
    library share it so they stay in a common region of parameter space.
    """
    adapter = init_adapter(
        base, init_rng or rng.derive("init"), rank=rank, alpha=alpha, task=task
    )
    if hyper.epochs == 0 or not examples:
        return adapter
    lr = hyper.lr if hyper.lr is not None else 3e-3
    opt = Optimizer(kind=hyper.optimizer, lr=lr)
    factors = adapter.factors
    step = 0
    for epoch in range(hyper.epochs):
        shuffle = rng.derive("shuffle", epoch)
        for batch in iter_batches(examples, hyper.batch_size, shuffle):
            masks = None
            if hyper.dropout > 0.0:
                droot = rng.derive("drop", step)
                masks = {
                    k: (
                        droot.derive(k).random(batch.tokens.shape + (b.shape[1],))
                        >= hyper.dropout
                    ).astype(float)
                    for k, (_, b) in factors.items()
                }
            plan = LoraPlan(
                factors=factors,
                scale=adapter.scale,
                dropout_p=hyper.dropout,
                dropout_masks=masks,
            )
            try:
                fwd = engine.forward(base, batch.tokens, plan)
                loss = engine.batch_nll(fwd.probs, batch)
            except ValueError as exc:
                if "non-finite" in str(exc):
                    raise DivergenceError(step) from exc
                raise
            if not np.isfinite(loss):
                raise DivergenceError(step)
            grads = engine.backward(
                base, fwd, engine.nll_grad_logits(fwd.probs, batch), plan, want_adapter=True
            )
            flat_p, flat_g = {}, {}
            for k, (a, b) in factors.items():
                flat_p[k + ".A"], flat_p[k + ".B"] = a, b
                flat_g[k + ".A"], flat_g[k + ".B"] = grads.adapter[k]
            upd = opt.step(flat_p, flat_g)
            factors = {k: (upd[k + ".A"], upd[k + ".B"]) for k in factors}
            step += 1
    return LoraAdapter(
        factors=factors,
        rank=rank,
        alpha=alpha,
        base_fingerprint=base.fingerprint,
        task=task,
    )


def heldout_loss(base: BaseLM, adapter: LoraAdapter | None, examples, batch_size=32) -> float:
    plan = None if adapter is None else LoraPlan(factors=adapter.factors, scale=adapter.scale)
    total, count = 0.0, 0.0
    for batch in iter_batches(examples, batch_size):
        probs = engine.forward(base, batch.tokens, plan).probs
        c = float(batch.mask.sum())
        total += engine.batch_nll(probs, batch) * c
        count += c
    return total / count


def train_expert(
    base: BaseLM,
    task_name: str,
    train_examples: list[Example],
    val_examples: list[Example],
    hyper: Hyper,
    rng: Rng,
    rank: int = 4,
    alpha: float = 16.0,
    init_rng: Rng | None = None,
) -> LoraAdapter:
    """One specialist adapter; must beat the frozen base on its own task.

    ``rng`` is the per-job stream (callers derive it positionally so labels
    stay decorative); experts of one library share ``init_rng`` so they start
    from one factor initialization.
    """
    adapter = train_lora(
        base,
        train_examples,
        hyper,
        rng,
        rank,
        alpha,
        task=task_name,
        init_rng=init_rng or rng.derive("lora-init"),
    )
    if hyper.epochs > 0 and val_examples:
        base_loss = heldout_loss(base, None, val_examples, hyper.batch_size)
        tuned_loss = heldout_loss(base, adapter, val_examples, hyper.batch_size)
        if not tuned_loss < base_loss:
            raise RuntimeError(
                f"expert for {task_name!r} failed to improve on the base "
                f"({tuned_loss:.4f} vs {base_loss:.4f})"
            )
    return adapter


def train_shared_expert(
    base: BaseLM,
    mixture: list[Example],
    hyper: Hyper,
    rng: Rng,
    rank: int = 4,
    alpha: float = 16.0,
) -> LoraAdapter:
    """One adapter fine-tuned on the concatenated mixture of every task."""
    return train_lora(
        base, mixture, hyper, rng.derive("shared"), rank, alpha, task=None,
        init_rng=rng.derive("lora-init"),
    )
