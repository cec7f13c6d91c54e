"""Encoded examples and batching shared by the trainers and evaluators."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import TokenBatch
from .numerics import Rng

PAD = 27


@dataclass(frozen=True)
class Example:
    """One sequence: input tokens ++ separator ++ target tokens.

    ``mask_from`` is the first model position whose next-token prediction is
    scored, i.e. the separator position; everything after it is target.
    """

    tokens: tuple[int, ...]
    mask_from: int


def make_batch(examples: list[Example], pad: int = PAD) -> TokenBatch:
    """Pad a group of examples into one TokenBatch."""
    if not examples:
        raise ValueError("empty batch")
    max_len = max(len(e.tokens) for e in examples) - 1
    b = len(examples)
    tokens = np.full((b, max_len), pad, dtype=np.int64)
    targets = np.zeros((b, max_len), dtype=np.int64)
    mask = np.zeros((b, max_len))
    for i, e in enumerate(examples):
        seq = np.asarray(e.tokens, dtype=np.int64)
        t = len(seq) - 1
        tokens[i, :t] = seq[:-1]
        targets[i, :t] = seq[1:]
        mask[i, e.mask_from : t] = 1.0
    return TokenBatch(tokens=tokens, targets=targets, mask=mask)


def iter_batches(examples: list[Example], batch_size: int, rng: Rng | None = None):
    """Yield TokenBatches; shuffles example order when an rng is given."""
    order = rng.permutation(len(examples)) if rng is not None else np.arange(len(examples))
    for start in range(0, len(examples), batch_size):
        chunk = [examples[int(i)] for i in order[start : start + batch_size]]
        yield make_batch(chunk)


@dataclass
class Hyper:
    """Trainer settings shared by expert, coefficient, and router training."""

    epochs: int = 5
    batch_size: int = 32
    optimizer: str = "adam"
    lr: float | None = None  # fixed rate; when None the grid is searched
    lr_grid: tuple[float, ...] = (1e-3, 1e-4, 1e-5)
    dropout: float = 0.05
    l1_penalty: float = 0.0  # optional sparsity pressure on fusion coefficients

    def rates(self) -> tuple[float, ...]:
        return (self.lr,) if self.lr is not None else tuple(self.lr_grid)
