"""Forward and reverse passes through the base LM under every site plan.

A "plan" describes what happens at the adapter sites:

  * None           -- frozen base only
  * LoraPlan       -- one static low-rank delta per site
  * DensePlan      -- one static dense delta per site (scaling folded in)
  * RoutedPlan     -- per-token mixture of a stack of low-rank experts,
                      coefficients computed from each site's incoming
                      hidden state by a per-layer routing matrix

The backward pass mirrors the forward exactly and can return gradients for
the base parameters, the plan's adapter factors, the routing matrices, and
(for cluster training) each expert in a routed stack. All gradients are
validated against central finite differences in the test suite.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .model import BaseLM, TokenBatch
from .numerics import EPS_PROB, softmax, softmax_vjp

LN_EPS = 1e-5
_GELU_C = math.sqrt(2.0 / math.pi)
_GELU_A = 0.044715


@dataclass
class LoraPlan:
    factors: dict[str, tuple[np.ndarray, np.ndarray]]  # site -> (A, B)
    scale: float
    dropout_p: float = 0.0
    dropout_masks: dict[str, np.ndarray] | None = None  # site -> (B,T,n_in) 0/1


@dataclass
class DensePlan:
    deltas: dict[str, np.ndarray]  # site -> (n_out, n_in), already scaled


@dataclass
class RoutedPlan:
    stacks: dict[str, list[tuple[np.ndarray, np.ndarray]]]  # site -> [(A_i, B_i)]
    scale: float
    layer_weights: list[np.ndarray]  # per layer (N, m)
    score_mode: str = "plain"  # {"plain", "absolute"}
    top_k: int | None = None


@dataclass
class Fwd:
    logits: np.ndarray | None = None
    probs: np.ndarray | None = None
    caches: list = field(default_factory=list)
    final: dict = field(default_factory=dict)
    x0: np.ndarray | None = None
    tokens: np.ndarray | None = None


@dataclass
class Grads:
    base: dict | None = None
    adapter: dict | None = None  # site -> (dA, dB)
    router: list | None = None  # per layer dW
    stack: dict | None = None  # site -> [(dA_i, dB_i)]



def _acc_outer(g, h):
    """Sum over leading dims of the outer product: (..., n) x (..., m) -> (n, m)."""
    return g.reshape(-1, g.shape[-1]).T @ h.reshape(-1, h.shape[-1])

def _layernorm(x, g, b):
    mu = x.mean(axis=-1, keepdims=True)
    xc = x - mu
    var = (xc * xc).mean(axis=-1, keepdims=True)
    iv = 1.0 / np.sqrt(var + LN_EPS)
    xhat = xc * iv
    return g * xhat + b, {"xhat": xhat, "iv": iv, "g": g}


def _layernorm_bwd(dy, cache):
    xhat, iv, g = cache["xhat"], cache["iv"], cache["g"]
    lead = tuple(range(dy.ndim - 1))
    dg = (dy * xhat).sum(axis=lead)
    db = dy.sum(axis=lead)
    dxhat = dy * g
    m = xhat.shape[-1]
    dx = iv * (dxhat - dxhat.mean(axis=-1, keepdims=True) - xhat * (dxhat * xhat).sum(axis=-1, keepdims=True) / m)
    return dx, dg, db


def _gelu(x):
    inner = _GELU_C * (x + _GELU_A * x * x * x)
    t = np.tanh(inner)
    return 0.5 * x * (1.0 + t), t


def _gelu_bwd(dy, x, t):
    du = _GELU_C * (1.0 + 3.0 * _GELU_A * x * x)
    return dy * (0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du)


def _route_coeffs_batch(w, h, score_mode, top_k):
    """Routing coefficients for a whole (B,T,m) activation block.

    Returns (lam, cache); cache carries what the backward needs. Top-k
    sparsification is eval-only: gradients through the mask are unsupported.
    """
    raw = h @ w.T
    scores = np.abs(raw) if score_mode == "absolute" else raw
    lam = softmax(scores, axis=-1)
    cache = {"raw": raw, "lam_soft": lam}
    if top_k is not None and top_k < w.shape[0]:
        lam = _topk_batch(lam, top_k)
    cache["lam"] = lam
    return lam, cache


def _topk_batch(lam, k):
    n = lam.shape[-1]
    # argsort on (-lam, index) keeps ties on the lower expert index
    order = np.argsort(-lam, axis=-1, kind="stable")
    keep = order[..., :k]
    mask = np.zeros_like(lam)
    np.put_along_axis(mask, keep, 1.0, axis=-1)
    kept = lam * mask
    denom = kept.sum(axis=-1, keepdims=True)
    if np.any(denom <= 0.0):
        raise ValueError("degenerate routing")
    out = kept / denom
    # the highest-index survivor absorbs the division rounding residual, so
    # renormalized coefficients sum to exactly one
    last = n - 1 - np.argmax(mask[..., ::-1], axis=-1)[..., None]
    at_last = np.take_along_axis(out, last, axis=-1)
    rest = out.sum(axis=-1, keepdims=True) - at_last
    np.put_along_axis(out, last, np.maximum(1.0 - rest, 0.0), axis=-1)
    return out


def _frozen_names(site):
    if site.name == "attn":
        return f"L{site.layer}.attn.wo", f"L{site.layer}.attn.bo"
    return f"L{site.layer}.ffn.w1", f"L{site.layer}.ffn.b1"


def site_forward(base, site, h, plan):
    wname, bname = _frozen_names(site)
    out = h @ base.params[wname].T + base.params[bname]
    cache = {"h": h}
    if plan is None:
        return out, cache
    if isinstance(plan, LoraPlan):
        a, b = plan.factors[site.key]
        hd = h
        if plan.dropout_masks is not None:
            mask = plan.dropout_masks[site.key]
            hd = h * mask / (1.0 - plan.dropout_p)
            cache["dropmask"] = mask
        z = hd @ b.T
        out = out + plan.scale * (z @ a.T)
        cache["hd"] = hd
        cache["z"] = z
        return out, cache
    if isinstance(plan, DensePlan):
        out = out + h @ plan.deltas[site.key].T
        return out, cache
    if isinstance(plan, RoutedPlan):
        w = plan.layer_weights[site.layer]
        lam, rcache = _route_coeffs_batch(w, h, plan.score_mode, plan.top_k)
        stack = plan.stacks[site.key]
        zb = np.stack([h @ b.T for (_, b) in stack], axis=0)  # (N,B,T,r)
        zmix = np.zeros(h.shape[:-1] + (zb.shape[-1],))
        for i in range(len(stack)):
            zmix += lam[..., i, None] * zb[i]
        delta = np.zeros_like(out)
        for i, (a, _) in enumerate(stack):
            delta += lam[..., i, None] * (zmix @ a.T)
        out = out + plan.scale * delta
        cache.update(rcache)
        cache["zb"] = zb
        cache["zmix"] = zmix
        return out, cache
    raise TypeError(f"unknown plan type {type(plan).__name__}")


def site_backward(base, site, g, cache, plan, grads, want_base):
    """Backprop a site. Returns dL/dh and accumulates plan grads in ``grads``."""
    wname, bname = _frozen_names(site)
    h = cache["h"]
    if want_base:
        gb = grads.base
        gb[wname] = gb.get(wname, 0.0) + _acc_outer(g, h)
        gb[bname] = gb.get(bname, 0.0) + g.sum(axis=(0, 1))
    dh = g @ base.params[wname]

    if plan is None:
        return dh
    if isinstance(plan, LoraPlan):
        a, b = plan.factors[site.key]
        hd, z = cache["hd"], cache["z"]
        if grads.adapter is not None:
            da = plan.scale * _acc_outer(g, z)
            dz = plan.scale * (g @ a)
            db = _acc_outer(dz, hd)
            old = grads.adapter.get(site.key)
            grads.adapter[site.key] = (
                (da, db) if old is None else (old[0] + da, old[1] + db)
            )
        else:
            dz = plan.scale * (g @ a)
        dhd = dz @ b
        if "dropmask" in cache:
            dhd = dhd * cache["dropmask"] / (1.0 - plan.dropout_p)
        return dh + dhd
    if isinstance(plan, DensePlan):
        return dh + g @ plan.deltas[site.key]
    if isinstance(plan, RoutedPlan):
        if plan.top_k is not None and plan.top_k < plan.layer_weights[site.layer].shape[0]:
            raise ValueError("backward through top-k routing is unsupported")
        stack = plan.stacks[site.key]
        lam, zb, zmix = cache["lam"], cache["zb"], cache["zmix"]
        scale = plan.scale
        n_exp = len(stack)
        dzmix = np.zeros_like(zmix)
        dlam = np.empty_like(lam)
        for i, (a, _) in enumerate(stack):
            ga = g @ a  # (B,T,r)
            dzmix += scale * lam[..., i, None] * ga
            dlam[..., i] = scale * (ga * zmix).sum(axis=-1)
        for i in range(n_exp):
            dlam[..., i] += (dzmix * zb[i]).sum(axis=-1)
        if grads.stack is not None:
            site_stack = grads.stack.setdefault(site.key, [None] * n_exp)
            for i, (a, b) in enumerate(stack):
                da = scale * _acc_outer(g * lam[..., i, None], zmix)
                db = _acc_outer(lam[..., i, None] * dzmix, h)
                prev = site_stack[i]
                site_stack[i] = (da, db) if prev is None else (prev[0] + da, prev[1] + db)
        for i, (_, b) in enumerate(stack):
            dh += lam[..., i, None] * (dzmix @ b)
        # routing-score path
        draw = softmax_vjp(lam, dlam, axis=-1)
        if plan.score_mode == "absolute":
            draw = draw * np.sign(cache["raw"])
        w = plan.layer_weights[site.layer]
        if grads.router is not None:
            dw = _acc_outer(draw, h)
            if grads.router[site.layer] is None:
                grads.router[site.layer] = dw
            else:
                grads.router[site.layer] += dw
        dh += draw @ w
        return dh
    raise TypeError(f"unknown plan type {type(plan).__name__}")


def forward(base: BaseLM, tokens: np.ndarray, plan=None) -> Fwd:
    cfg = base.config
    tokens = np.asarray(tokens)
    if tokens.ndim != 2:
        raise ValueError("tokens must be (batch, time)")
    b_sz, t_len = tokens.shape
    if t_len > cfg.max_seq:
        raise ValueError(f"sequence length {t_len} exceeds max {cfg.max_seq}")
    if tokens.min() < 0 or tokens.max() >= cfg.vocab:
        raise ValueError("token index out of vocabulary range")
    p = base.params
    heads = cfg.n_heads
    head_dim = cfg.width // heads
    scale = 1.0 / math.sqrt(head_dim)
    causal = np.triu(np.full((t_len, t_len), -1e30), k=1)

    def split_heads(z):  # (B,T,m) -> (B,H,T,d)
        return z.reshape(b_sz, t_len, heads, head_dim).transpose(0, 2, 1, 3)

    x = p["tok_emb"][tokens] + p["pos_emb"][:t_len]
    fwd = Fwd(x0=x, tokens=tokens)
    for l in range(cfg.layers):
        c: dict = {"x_in": x}
        u, c["ln1"] = _layernorm(x, p[f"L{l}.ln1.g"], p[f"L{l}.ln1.b"])
        c["u"] = u
        q = split_heads(u @ p[f"L{l}.attn.wq"].T + p[f"L{l}.attn.bq"])
        k = split_heads(u @ p[f"L{l}.attn.wk"].T + p[f"L{l}.attn.bk"])
        v = split_heads(u @ p[f"L{l}.attn.wv"].T + p[f"L{l}.attn.bv"])
        scores = q @ k.swapaxes(-1, -2) * scale + causal
        att = softmax(scores, axis=-1)
        ctx = att @ v
        ctx = ctx.transpose(0, 2, 1, 3).reshape(b_sz, t_len, cfg.width)
        c.update(q=q, k=k, v=v, att=att, ctx=ctx)
        attn_site = base.site(f"L{l}.attn")
        attn_out, c["site_attn"] = site_forward(base, attn_site, ctx, plan)
        x = x + attn_out
        c["x_mid"] = x
        u2, c["ln2"] = _layernorm(x, p[f"L{l}.ln2.g"], p[f"L{l}.ln2.b"])
        c["u2"] = u2
        ffn_site = base.site(f"L{l}.ffn")
        hff, c["site_ffn"] = site_forward(base, ffn_site, u2, plan)
        act, tanh_c = _gelu(hff)
        c.update(hff=hff, act=act, tanh=tanh_c)
        x = x + act @ p[f"L{l}.ffn.w2"].T + p[f"L{l}.ffn.b2"]
        fwd.caches.append(c)
    xf, lnf_c = _layernorm(x, p["lnf.g"], p["lnf.b"])
    logits = xf @ p["head.w"].T + p["head.b"]
    fwd.final = {"x_last": x, "lnf": lnf_c, "xf": xf}
    fwd.logits = logits
    fwd.probs = softmax(logits, axis=-1)
    return fwd


def backward(
    base: BaseLM,
    fwd: Fwd,
    dlogits: np.ndarray,
    plan=None,
    *,
    want_base: bool = False,
    want_adapter: bool = False,
    want_router: bool = False,
    want_stack: bool = False,
) -> Grads:
    cfg = base.config
    p = base.params
    heads = cfg.n_heads
    head_dim = cfg.width // heads
    scale = 1.0 / math.sqrt(head_dim)
    grads = Grads(
        base={} if want_base else None,
        adapter={} if want_adapter else None,
        router=[None] * cfg.layers if want_router else None,
        stack={} if want_stack else None,
    )
    xf = fwd.final["xf"]
    if want_base:
        grads.base["head.w"] = _acc_outer(dlogits, xf)
        grads.base["head.b"] = dlogits.sum(axis=(0, 1))
    dxf = dlogits @ p["head.w"]
    dx, dg, db = _layernorm_bwd(dxf, fwd.final["lnf"])
    if want_base:
        grads.base["lnf.g"] = dg
        grads.base["lnf.b"] = db

    for l in reversed(range(cfg.layers)):
        c = fwd.caches[l]
        # feed-forward block
        dffn_out = dx
        dact = dffn_out @ p[f"L{l}.ffn.w2"]
        if want_base:
            grads.base[f"L{l}.ffn.w2"] = _acc_outer(dffn_out, c["act"])
            grads.base[f"L{l}.ffn.b2"] = dffn_out.sum(axis=(0, 1))
        dhff = _gelu_bwd(dact, c["hff"], c["tanh"])
        ffn_site = base.site(f"L{l}.ffn")
        du2 = site_backward(base, ffn_site, dhff, c["site_ffn"], plan, grads, want_base)
        dx_mid, dg, db = _layernorm_bwd(du2, c["ln2"])
        if want_base:
            grads.base[f"L{l}.ln2.g"] = dg
            grads.base[f"L{l}.ln2.b"] = db
        dx_mid = dx_mid + dx
        # attention block
        attn_site = base.site(f"L{l}.attn")
        dctx = site_backward(base, attn_site, dx_mid, c["site_attn"], plan, grads, want_base)
        b_sz, t_len = dctx.shape[:2]
        dctx_h = dctx.reshape(b_sz, t_len, heads, head_dim).transpose(0, 2, 1, 3)
        datt = dctx_h @ c["v"].swapaxes(-1, -2)
        dv = c["att"].swapaxes(-1, -2) @ dctx_h
        dscores = softmax_vjp(c["att"], datt, axis=-1)
        dq = dscores @ c["k"] * scale
        dk = dscores.swapaxes(-1, -2) @ c["q"] * scale

        def merge_heads(z):
            return z.transpose(0, 2, 1, 3).reshape(b_sz, t_len, cfg.width)

        dq, dk, dv = merge_heads(dq), merge_heads(dk), merge_heads(dv)
        du = dq @ p[f"L{l}.attn.wq"] + dk @ p[f"L{l}.attn.wk"] + dv @ p[f"L{l}.attn.wv"]
        if want_base:
            u = c["u"]
            grads.base[f"L{l}.attn.wq"] = _acc_outer(dq, u)
            grads.base[f"L{l}.attn.wk"] = _acc_outer(dk, u)
            grads.base[f"L{l}.attn.wv"] = _acc_outer(dv, u)
            grads.base[f"L{l}.attn.bq"] = dq.sum(axis=(0, 1))
            grads.base[f"L{l}.attn.bk"] = dk.sum(axis=(0, 1))
            grads.base[f"L{l}.attn.bv"] = dv.sum(axis=(0, 1))
        dx_in, dg, db = _layernorm_bwd(du, c["ln1"])
        if want_base:
            grads.base[f"L{l}.ln1.g"] = dg
            grads.base[f"L{l}.ln1.b"] = db
        dx = dx_in + dx_mid

    if want_base:
        dtok = np.zeros_like(p["tok_emb"])
        flat = dx.reshape(-1, cfg.width)
        np.add.at(dtok, fwd.tokens.reshape(-1), flat)
        grads.base["tok_emb"] = dtok
        dpos = np.zeros_like(p["pos_emb"])
        dpos[: dx.shape[1]] = dx.sum(axis=0)
        grads.base["pos_emb"] = dpos
    return grads


def batch_nll(probs: np.ndarray, batch: TokenBatch) -> float:
    """Mean negative log-likelihood (nats) over masked positions."""
    mask = batch.mask
    count = float(mask.sum())
    if count == 0.0:
        raise ValueError("batch has no masked positions")
    py = np.take_along_axis(probs, batch.targets[..., None], axis=-1)[..., 0]
    return float((-np.log(py + EPS_PROB) * mask).sum() / count)


def nll_grad_logits(probs: np.ndarray, batch: TokenBatch) -> np.ndarray:
    """Exact dL/dlogits for batch_nll, including the probability clamp."""
    mask = batch.mask
    count = float(mask.sum())
    py = np.take_along_axis(probs, batch.targets[..., None], axis=-1)[..., 0]
    factor = py / (py + EPS_PROB)  # d(-log(p+eps))/dp = -1/(p+eps)
    dlogits = probs * (factor * mask / count)[..., None]
    np.subtract.at(
        dlogits.reshape(-1, probs.shape[-1]),
        (np.arange(mask.size), batch.targets.reshape(-1)),
        (factor * mask / count).reshape(-1),
    )
    return dlogits


def soft_ce(probs: np.ndarray, teacher: np.ndarray, mask: np.ndarray) -> float:
    """Mean cross-entropy against full soft target distributions."""
    count = float(mask.sum())
    ce = -(teacher * np.log(probs + EPS_PROB)).sum(axis=-1)
    return float((ce * mask).sum() / count)


def soft_ce_grad_logits(probs, teacher, mask) -> np.ndarray:
    count = float(mask.sum())
    dprobs = -(teacher / (probs + EPS_PROB)) * (mask / count)[..., None]
    return softmax_vjp(probs, dprobs, axis=-1)


def mean_kl(teacher: np.ndarray, probs: np.ndarray, mask: np.ndarray) -> float:
    """Mean KL(teacher || model) over masked positions."""
    count = float(mask.sum())
    kl = (teacher * (np.log(teacher + EPS_PROB) - np.log(probs + EPS_PROB))).sum(axis=-1)
    return float((kl * mask).sum() / count)
