"""LoRA expert representation, libraries, persistence, and vectorization."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import binio
from .model import BaseLM
from .numerics import Rng

MANIFEST_VERSION = 1


@dataclass
class LoraAdapter:
    """Per-site low-rank factor pair (A, B) tied to one base model."""

    factors: dict[str, tuple[np.ndarray, np.ndarray]]
    rank: int
    alpha: float
    base_fingerprint: str
    task: str | None = None

    @property
    def scale(self) -> float:
        return self.alpha / self.rank

    def site_delta(self, key: str) -> np.ndarray:
        """Dense update (alpha/r) A B for one site."""
        a, b = self.factors[key]
        return self.scale * (a @ b)

    def copy(self) -> "LoraAdapter":
        return LoraAdapter(
            factors={k: (a.copy(), b.copy()) for k, (a, b) in self.factors.items()},
            rank=self.rank,
            alpha=self.alpha,
            base_fingerprint=self.base_fingerprint,
            task=self.task,
        )

    def validate_against(self, base: BaseLM) -> None:
        if self.base_fingerprint != base.fingerprint:
            raise binio.FingerprintMismatchError("adapter/base mismatch")
        if self.rank < 1:
            raise ValueError("rank must be >= 1")
        for site in base.sites:
            if site.key not in self.factors:
                raise ValueError(f"adapter missing site {site.key}")
            a, b = self.factors[site.key]
            if a.shape != (site.n_out, self.rank) or b.shape != (self.rank, site.n_in):
                raise ValueError(f"adapter factor shape mismatch at {site.key}")


def zero_adapter(base: BaseLM, rank: int = 4, alpha: float = 16.0, task=None) -> LoraAdapter:
    factors = {
        s.key: (np.zeros((s.n_out, rank)), np.zeros((rank, s.n_in))) for s in base.sites
    }
    return LoraAdapter(factors, rank, alpha, base.fingerprint, task)


def init_adapter(base: BaseLM, rng: Rng, rank: int = 4, alpha: float = 16.0, task=None) -> LoraAdapter:
    """Fresh trainable adapter: A small random, B zero, so the initial update is 0."""
    factors = {}
    for s in base.sites:
        a = rng.derive("lora-A", s.key).normal((s.n_out, rank), 0.02)
        factors[s.key] = (a, np.zeros((rank, s.n_in)))
    return LoraAdapter(factors, rank, alpha, base.fingerprint, task)


@dataclass
class ExpertLibrary:
    """Ordered collection of adapters sharing one base, rank, and scaling."""

    adapters: list[LoraAdapter]
    names: list[str] = field(default_factory=list)
    provenance: str = ""

    def __post_init__(self):
        if not self.adapters:
            raise ValueError("library must hold at least one expert")
        if not self.names:
            self.names = [f"expert{i:02d}" for i in range(len(self.adapters))]
        if len(self.names) != len(self.adapters):
            raise ValueError("names/adapters length mismatch")
        first = self.adapters[0]
        for ad in self.adapters[1:]:
            if ad.base_fingerprint != first.base_fingerprint:
                raise binio.FingerprintMismatchError("adapter/base mismatch within library")
            if ad.rank != first.rank or ad.alpha != first.alpha:
                raise ValueError("library adapters must share rank and alpha")
            if set(ad.factors) != set(first.factors):
                raise ValueError("library adapters must share site layout")
        labels = [ad.task for ad in self.adapters if ad.task is not None]
        if len(labels) != len(set(labels)):
            raise ValueError("duplicate task labels in library")

    def __len__(self) -> int:
        return len(self.adapters)

    @property
    def base_fingerprint(self) -> str:
        return self.adapters[0].base_fingerprint

    @property
    def rank(self) -> int:
        return self.adapters[0].rank

    @property
    def alpha(self) -> float:
        return self.adapters[0].alpha

    @property
    def scale(self) -> float:
        return self.adapters[0].scale

    @property
    def site_keys(self) -> list[str]:
        return list(self.adapters[0].factors.keys())

    def tasks(self) -> list[str | None]:
        return [ad.task for ad in self.adapters]

    def stacks(self) -> dict[str, list[tuple[np.ndarray, np.ndarray]]]:
        """Per-site expert stacks in library order, as the engine consumes them."""
        return {k: [ad.factors[k] for ad in self.adapters] for k in self.site_keys}


def flatten(adapter: LoraAdapter) -> np.ndarray:
    """Canonical parameter vector: per site in layout order, A then B, row-major."""
    parts = []
    for key in adapter.factors:
        a, b = adapter.factors[key]
        parts.append(a.ravel())
        parts.append(b.ravel())
    return np.concatenate(parts)


def unflatten(vec: np.ndarray, like: LoraAdapter) -> LoraAdapter:
    out = like.copy()
    pos = 0
    for key, (a, b) in like.factors.items():
        na, nb = a.size, b.size
        out.factors[key] = (
            vec[pos : pos + na].reshape(a.shape).copy(),
            vec[pos + na : pos + na + nb].reshape(b.shape).copy(),
        )
        pos += na + nb
    if pos != vec.size:
        raise ValueError("vector length does not match adapter layout")
    return out


def cosine_similarity_matrix(library: ExpertLibrary, on: str = "params") -> np.ndarray:
    """Pairwise cosine similarities between expert parameter vectors.

    ``on='params'`` uses the raw concatenated (A, B) factors; ``on='delta'``
    uses the reconstructed dense updates instead.
    """
    if on == "params":
        vecs = [flatten(ad) for ad in library.adapters]
    elif on == "delta":
        vecs = [
            np.concatenate([ad.site_delta(k).ravel() for k in library.site_keys])
            for ad in library.adapters
        ]
    else:
        raise ValueError(f"unknown vectorization {on!r}")
    mat = np.stack(vecs)
    norms = np.linalg.norm(mat, axis=1)
    if np.any(norms == 0.0):
        idx = int(np.argmin(norms))
        raise ValueError(f"zero-norm adapter at index {idx}")
    unit = mat / norms[:, None]
    sim = unit @ unit.T
    np.fill_diagonal(sim, 1.0)
    return np.clip(sim, -1.0, 1.0)


# ---------------------------------------------------------------------------
# persistence


def save_adapter(adapter: LoraAdapter, path) -> None:
    arrays = {"alpha": np.array(adapter.alpha)}
    for key, (a, b) in adapter.factors.items():
        arrays[f"{key}.A"] = a
        arrays[f"{key}.B"] = b
    binio.write_arrays(path, binio.KIND_ADAPTER, adapter.base_fingerprint, arrays)


def load_adapter(path, task=None) -> LoraAdapter:
    _, fingerprint, arrays = binio.read_arrays(path, expect_kind=binio.KIND_ADAPTER)
    alpha = float(arrays.pop("alpha").reshape(-1)[0])
    keys = sorted({name.rsplit(".", 1)[0] for name in arrays})

    def site_sort(key: str):
        layer, name = key.split(".")
        return (int(layer[1:]), 0 if name == "attn" else 1)

    factors = {}
    rank = None
    for key in sorted(keys, key=site_sort):
        a, b = arrays[f"{key}.A"], arrays[f"{key}.B"]
        factors[key] = (a, b)
        rank = a.shape[1] if rank is None else rank
        if a.shape[1] != rank or b.shape[0] != rank:
            raise binio.StoreError(f"inconsistent rank in {path}")
    return LoraAdapter(factors, int(rank), alpha, fingerprint, task)


def save_library(library: ExpertLibrary, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    experts = []
    for name, adapter in zip(library.names, library.adapters):
        fname = f"{name}.bin"
        save_adapter(adapter, directory / fname)
        experts.append({"name": name, "task": adapter.task, "file": fname})
    manifest = {
        "version": MANIFEST_VERSION,
        "base_fingerprint": library.base_fingerprint,
        "rank": library.rank,
        "alpha": library.alpha,
        "provenance": library.provenance,
        "experts": experts,
    }
    with open(directory / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")


def load_library(directory, base: BaseLM | None = None) -> ExpertLibrary:
    directory = Path(directory)
    with open(directory / "manifest.json") as fh:
        manifest = json.load(fh)
    if manifest.get("version") != MANIFEST_VERSION:
        raise binio.UnsupportedVersionError(
            f"unknown manifest version {manifest.get('version')!r}"
        )
    adapters, names = [], []
    for entry in manifest["experts"]:
        path = directory / entry["file"]
        if not path.exists():
            raise binio.MissingExpertFileError(f"missing expert file: {entry['file']}")
        adapter = load_adapter(path, task=entry.get("task"))
        if adapter.base_fingerprint != manifest["base_fingerprint"]:
            raise binio.FingerprintMismatchError("adapter/base mismatch")
        if adapter.rank != manifest["rank"] or adapter.alpha != manifest["alpha"]:
            raise binio.StoreError(f"adapter {entry['name']} disagrees with manifest")
        adapters.append(adapter)
        names.append(entry["name"])
    library = ExpertLibrary(adapters, names, provenance=manifest.get("provenance", ""))
    if base is not None:
        for adapter in adapters:
            adapter.validate_against(base)
    return library
