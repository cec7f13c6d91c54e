"""Tiny frozen causal LM with named low-rank-adapter injection sites.

The stack is a pre-norm transformer: per layer one single-head causal
attention block and one feed-forward block. Two sites per layer accept
low-rank deltas: the attention output projection ("attn") and the first
feed-forward projection ("ffn"). Everything is float64 numpy.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field

import numpy as np

from . import binio
from .numerics import Rng

INIT_SCALE = 0.02


@dataclass(frozen=True)
class SiteDef:
    key: str
    layer: int
    name: str
    n_out: int
    n_in: int


@dataclass(frozen=True)
class ModelConfig:
    vocab: int = 32
    width: int = 32
    layers: int = 2
    ff_width: int = 64
    max_seq: int = 48
    n_heads: int = 4

    def validate(self) -> None:
        if self.layers < 1:
            raise ValueError("layers must be >= 1")
        for name in ("vocab", "width", "ff_width", "max_seq", "n_heads"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be >= 1")
        if self.width % self.n_heads != 0:
            raise ValueError("width must be divisible by n_heads")

    def sites(self) -> list[SiteDef]:
        out = []
        for l in range(self.layers):
            out.append(SiteDef(f"L{l}.attn", l, "attn", self.width, self.width))
            out.append(SiteDef(f"L{l}.ffn", l, "ffn", self.ff_width, self.width))
        return out


@dataclass
class BaseLM:
    config: ModelConfig
    params: dict[str, np.ndarray]
    fingerprint: str = ""
    sites: list[SiteDef] = field(default_factory=list)

    def __post_init__(self):
        if not self.sites:
            self.sites = self.config.sites()
        if not self.fingerprint:
            self.fingerprint = fingerprint_params(self.params)

    def site(self, key: str) -> SiteDef:
        for s in self.sites:
            if s.key == key:
                return s
        raise KeyError(key)


@dataclass
class TokenBatch:
    """Padded token batch: inputs, next-token targets, and a loss mask."""

    tokens: np.ndarray  # (B, T) int
    targets: np.ndarray  # (B, T) int
    mask: np.ndarray  # (B, T) float, 1.0 on positions whose target is scored

    def __post_init__(self):
        if self.tokens.shape != self.targets.shape or self.tokens.shape != self.mask.shape:
            raise ValueError("tokens, targets, mask must share one shape")

    @property
    def size(self) -> int:
        return self.tokens.shape[0]


def fingerprint_params(params: dict) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        arr = np.ascontiguousarray(params[name], dtype="<f8")
        h.update(name.encode("utf-8"))
        h.update(str(arr.shape).encode("ascii"))
        h.update(arr.tobytes(order="C"))
    return h.hexdigest()


def build_base(config: ModelConfig, rng: Rng) -> BaseLM:
    """Freshly initialized model; weights N(0, 0.02^2), biases zero, LN identity."""
    config.validate()
    m, dff, v = config.width, config.ff_width, config.vocab
    r = rng.derive("base-init")
    p: dict[str, np.ndarray] = {}
    p["tok_emb"] = r.normal((v, m), INIT_SCALE)
    p["pos_emb"] = r.normal((config.max_seq, m), INIT_SCALE)
    for l in range(config.layers):
        p[f"L{l}.ln1.g"] = np.ones(m)
        p[f"L{l}.ln1.b"] = np.zeros(m)
        for name in ("wq", "wk", "wv"):
            p[f"L{l}.attn.{name}"] = r.normal((m, m), INIT_SCALE)
        for name in ("bq", "bk", "bv"):
            p[f"L{l}.attn.{name}"] = np.zeros(m)
        p[f"L{l}.attn.wo"] = r.normal((m, m), INIT_SCALE)
        p[f"L{l}.attn.bo"] = np.zeros(m)
        p[f"L{l}.ln2.g"] = np.ones(m)
        p[f"L{l}.ln2.b"] = np.zeros(m)
        p[f"L{l}.ffn.w1"] = r.normal((dff, m), INIT_SCALE)
        p[f"L{l}.ffn.b1"] = np.zeros(dff)
        p[f"L{l}.ffn.w2"] = r.normal((m, dff), INIT_SCALE)
        p[f"L{l}.ffn.b2"] = np.zeros(m)
    p["lnf.g"] = np.ones(m)
    p["lnf.b"] = np.zeros(m)
    p["head.w"] = r.normal((v, m), INIT_SCALE)
    p["head.b"] = np.zeros(v)
    return BaseLM(config=config, params=p)


_CONFIG_KEY = "_config"


def save_base(base: BaseLM, path) -> None:
    arrays = dict(base.params)
    cfg = base.config
    arrays[_CONFIG_KEY] = np.array(
        [cfg.vocab, cfg.width, cfg.layers, cfg.ff_width, cfg.max_seq, cfg.n_heads],
        dtype=np.float64,
    )
    binio.write_arrays(path, binio.KIND_BASE, base.fingerprint, arrays)


def load_base(path) -> BaseLM:
    _, fingerprint, arrays = binio.read_arrays(path, expect_kind=binio.KIND_BASE)
    raw = arrays.pop(_CONFIG_KEY, None)
    if raw is None or raw.shape != (6,):
        raise binio.StoreError(f"missing model dims in {path}")
    cfg = ModelConfig(*(int(x) for x in raw))
    base = BaseLM(config=cfg, params=arrays)
    if base.fingerprint != fingerprint:
        raise binio.FingerprintMismatchError(f"fingerprint mismatch (corrupt base file): {path}")
    return base
