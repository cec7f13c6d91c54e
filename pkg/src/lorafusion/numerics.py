"""Dense float64 linear algebra, deterministic RNG, optimizers, and
numerical verification helpers shared by every other module.

Matrices are plain row-major ``numpy.ndarray`` objects in float64; this
module owns the few numerical kernels the rest of the code base leans on
(stable softmax, clamped cross-entropy, a one-sided Jacobi SVD with a fixed
sign convention, central finite differences, and the two trainers).
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import dataclass, field

import numpy as np

EPS_PROB = 1e-12


def softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Stable softmax along ``axis`` (max-subtracted)."""
    z = np.asarray(logits, dtype=np.float64)
    if z.size == 0 or z.shape[axis] == 0:
        raise ValueError("empty logits")
    if not np.all(np.isfinite(z)):
        raise ValueError("non-finite logits")
    shifted = z - np.max(z, axis=axis, keepdims=True)
    e = np.exp(shifted)
    return e / np.sum(e, axis=axis, keepdims=True)


def softmax_vjp(s: np.ndarray, ds: np.ndarray, axis: int = -1) -> np.ndarray:
    """Backprop through softmax: given s = softmax(z) and dL/ds, return dL/dz."""
    inner = np.sum(ds * s, axis=axis, keepdims=True)
    return s * (ds - inner)


def cross_entropy(pred: np.ndarray, target: int) -> float:
    """Negative log-likelihood (nats) of ``target`` under distribution ``pred``."""
    p = np.asarray(pred, dtype=np.float64)
    if p.ndim != 1:
        raise ValueError("pred must be a 1-D distribution")
    if not (0 <= int(target) < p.shape[0]):
        raise ValueError(f"target {target} out of range for vocabulary {p.shape[0]}")
    return float(-np.log(p[int(target)] + EPS_PROB))


def svd_top(mat: np.ndarray, k: int, max_sweeps: int = 64, tol: float = 1e-13):
    """Top-k singular triplets of a dense matrix via one-sided Jacobi.

    Rotations are applied on the smaller Gram dimension in a fixed (p, q)
    sweep order so results are bit-reproducible. Singular values come back
    non-increasing; the sign convention is that the first entry of each V
    column with magnitude above 1e-12 is non-negative.

    Returns (U, sigma, V) with ``mat ~= U @ diag(sigma) @ V.T`` restricted to
    the leading k triplets.
    """
    m = np.asarray(mat, dtype=np.float64)
    if m.ndim != 2:
        raise ValueError("svd_top expects a 2-D matrix")
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > min(m.shape):
        raise ValueError(f"k={k} exceeds min(shape)={min(m.shape)}")

    transposed = m.shape[1] > m.shape[0]
    g = (m.T if transposed else m).copy()
    cols = g.shape[1]
    v = np.eye(cols)

    converged = False
    residual = math.inf
    for _ in range(max_sweeps):
        residual = 0.0
        for p in range(cols - 1):
            for q in range(p + 1, cols):
                gp = g[:, p]
                gq = g[:, q]
                app = float(gp @ gp)
                aqq = float(gq @ gq)
                apq = float(gp @ gq)
                denom = math.sqrt(app * aqq)
                if denom == 0.0 or abs(apq) <= tol * denom:
                    continue
                residual = max(residual, abs(apq) / denom)
                tau = (aqq - app) / (2.0 * apq)
                t = math.copysign(1.0, tau) / (abs(tau) + math.sqrt(1.0 + tau * tau))
                c = 1.0 / math.sqrt(1.0 + t * t)
                s = c * t
                rot = np.array([[c, s], [-s, c]])
                g[:, [p, q]] = g[:, [p, q]] @ rot
                v[:, [p, q]] = v[:, [p, q]] @ rot
        if residual <= tol:
            converged = True
            break
    if not converged and residual > 1e-10:
        raise ValueError(f"svd_top did not converge; residual {residual:.3e}")

    sigma = np.sqrt(np.sum(g * g, axis=0))
    order = np.argsort(-sigma, kind="stable")
    sigma = sigma[order]
    g = g[:, order]
    v = v[:, order]
    u = np.zeros_like(g)
    nz = sigma > 0.0
    u[:, nz] = g[:, nz] / sigma[nz]

    if transposed:
        u, v = v, u

    # Sign convention keyed on V so downstream routing init is reproducible.
    for j in range(min(k, v.shape[1])):
        col = v[:, j]
        idx = np.flatnonzero(np.abs(col) > 1e-12)
        if idx.size and col[idx[0]] < 0.0:
            v[:, j] = -col
            u[:, j] = -u[:, j]

    return u[:, :k].copy(), sigma[:k].copy(), v[:, :k].copy()


def finite_diff_grad(f, params, step: float = 1e-5):
    """Central-difference gradient of a scalar function of parameter blocks.

    ``params`` is either a single array or a dict of named arrays; the return
    value mirrors that structure. The function is re-evaluated 2x per
    coordinate, so keep instances small.
    """
    single = isinstance(params, np.ndarray)
    blocks = {"_": params} if single else params
    work = {name: np.array(arr, dtype=np.float64) for name, arr in blocks.items()}

    def call():
        val = float(f(work["_"] if single else work))
        if not math.isfinite(val):
            raise ValueError("objective returned a non-finite value")
        return val

    grads = {}
    for name, arr in work.items():
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)
        gflat = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            fp = call()
            flat[i] = orig - step
            fm = call()
            flat[i] = orig
            gflat[i] = (fp - fm) / (2.0 * step)
        grads[name] = g
    return grads["_"] if single else grads


def rel_err(a, b) -> float:
    """Relative error between two arrays/blocks, for gradient checks."""
    if isinstance(a, dict):
        av = np.concatenate([np.ravel(a[k]) for k in sorted(a)])
        bv = np.concatenate([np.ravel(b[k]) for k in sorted(b)])
    else:
        av, bv = np.ravel(a), np.ravel(b)
    denom = max(float(np.linalg.norm(av)), float(np.linalg.norm(bv)), 1e-12)
    return float(np.linalg.norm(av - bv)) / denom


class Rng:
    """Seed-derivable deterministic random stream.

    Backed by PCG64 with an explicit SeedSequence, so equal seeds yield
    bit-identical streams across runs and platforms. ``derive`` builds an
    independent child stream from (seed, tags...), which is how parallel
    jobs get their own reproducible randomness.
    """

    def __init__(self, seed: int, _path: tuple = ()):
        self.seed = int(seed)
        self._path = tuple(_path)
        entropy = [self.seed & 0xFFFFFFFFFFFFFFFF, *self._path]
        self._gen = np.random.Generator(np.random.PCG64(np.random.SeedSequence(entropy)))

    @staticmethod
    def _tag_to_int(tag) -> int:
        if isinstance(tag, (int, np.integer)):
            return int(tag) & 0xFFFFFFFFFFFFFFFF
        digest = hashlib.sha256(str(tag).encode("utf-8")).digest()
        return int.from_bytes(digest[:8], "little")

    def derive(self, *tags) -> "Rng":
        return Rng(self.seed, self._path + tuple(self._tag_to_int(t) for t in tags))

    def normal(self, shape, scale: float = 1.0) -> np.ndarray:
        return scale * self._gen.standard_normal(size=shape, dtype=np.float64)

    def integers(self, low: int, high: int, size=None):
        return self._gen.integers(low, high, size=size)

    def permutation(self, n: int) -> np.ndarray:
        return self._gen.permutation(n)

    def random(self, size=None):
        return self._gen.random(size=size, dtype=np.float64)


@dataclass
class Optimizer:
    """Plain gradient descent or adaptive-moment trainer over named blocks."""

    kind: str = "adam"  # {"sgd", "adam"}
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    step_count: int = 0
    _m: dict = field(default_factory=dict, repr=False)
    _v: dict = field(default_factory=dict, repr=False)

    def step(self, params: dict, grads: dict) -> dict:
        if self.kind not in ("sgd", "adam"):
            raise ValueError(f"unknown optimizer kind {self.kind!r}")
        for name, p in params.items():
            if name not in grads or np.shape(grads[name]) != np.shape(p):
                raise ValueError(f"gradient shape mismatch for block {name!r}")
        self.step_count += 1
        out = {}
        for name, p in params.items():
            g = np.asarray(grads[name], dtype=np.float64)
            if self.kind == "sgd":
                out[name] = p - self.lr * g
                continue
            m = self._m.setdefault(name, np.zeros_like(p))
            v = self._v.setdefault(name, np.zeros_like(p))
            m *= self.beta1
            m += (1.0 - self.beta1) * g
            v *= self.beta2
            v += (1.0 - self.beta2) * g * g
            mhat = m / (1.0 - self.beta1**self.step_count)
            vhat = v / (1.0 - self.beta2**self.step_count)
            out[name] = p - self.lr * mhat / (np.sqrt(vhat) + self.eps)
        return out


def optimizer_step(opt: Optimizer, params: dict, grads: dict) -> dict:
    return opt.step(params, grads)
