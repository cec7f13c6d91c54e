import math

import numpy as np
import pytest

from lorafusion import binio, engine
from lorafusion.data import make_batch, Example
from lorafusion.engine import DensePlan, LoraPlan
from lorafusion.experts import init_adapter, zero_adapter
from lorafusion.model import BaseLM, ModelConfig, TokenBatch, build_base, load_base, save_base
from lorafusion.numerics import Rng

CFG = ModelConfig(vocab=32, width=32, layers=2, ff_width=64, max_seq=48)


@pytest.fixture(scope="module")
def base():
    return build_base(CFG, Rng(0))


def _batch(rng, b=3, t=7, vocab=32):
    tokens = rng.integers(0, vocab, size=(b, t))
    targets = rng.derive("t").integers(0, vocab, size=(b, t))
    mask = np.ones((b, t))
    return TokenBatch(tokens=tokens, targets=targets, mask=mask)


class TestBuildBase:
    def test_same_seed_same_fingerprint(self):
        a = build_base(CFG, Rng(0))
        b = build_base(CFG, Rng(0))
        assert a.fingerprint == b.fingerprint
        assert a.fingerprint != build_base(CFG, Rng(1)).fingerprint

    def test_zero_layers_rejected(self):
        with pytest.raises(ValueError, match="layers"):
            build_base(ModelConfig(layers=0), Rng(0))

    def test_reference_sites(self, base):
        keys = [s.key for s in base.sites]
        assert keys == ["L0.attn", "L0.ffn", "L1.attn", "L1.ffn"]
        assert base.site("L1.ffn").n_out == CFG.ff_width

    def test_save_load_roundtrip(self, base, tmp_path):
        path = tmp_path / "base.bin"
        save_base(base, path)
        loaded = load_base(path)
        assert loaded.fingerprint == base.fingerprint
        for k in base.params:
            assert np.array_equal(loaded.params[k], base.params[k])

    def test_corrupt_file_detected(self, base, tmp_path):
        path = tmp_path / "base.bin"
        save_base(base, path)
        blob = bytearray(path.read_bytes())
        blob[20] ^= 0xFF  # flip a byte inside the stored fingerprint
        path.write_bytes(bytes(blob))
        with pytest.raises(binio.FingerprintMismatchError):
            load_base(path)

    def test_truncated_file_detected(self, base, tmp_path):
        path = tmp_path / "base.bin"
        save_base(base, path)
        path.write_bytes(path.read_bytes()[:100])
        with pytest.raises(binio.TruncatedFileError):
            load_base(path)


def _oracle_forward_single(base, tokens):
    """Independent step-by-step evaluation for one sequence, no batching."""
    p = base.params
    cfg = base.config
    t_len = len(tokens)
    hd = cfg.width // cfg.n_heads

    def layer_norm(vec, g, b):
        mu = sum(vec) / len(vec)
        var = sum((x - mu) ** 2 for x in vec) / len(vec)
        return [
            g[i] * ((vec[i] - mu) / math.sqrt(var + 1e-5)) + b[i] for i in range(len(vec))
        ]

    x = [
        [p["tok_emb"][tok][i] + p["pos_emb"][pos][i] for i in range(cfg.width)]
        for pos, tok in enumerate(tokens)
    ]
    for l in range(cfg.layers):
        u = [layer_norm(row, p[f"L{l}.ln1.g"], p[f"L{l}.ln1.b"]) for row in x]
        q = [p[f"L{l}.attn.wq"] @ np.array(row) + p[f"L{l}.attn.bq"] for row in u]
        k = [p[f"L{l}.attn.wk"] @ np.array(row) + p[f"L{l}.attn.bk"] for row in u]
        v = [p[f"L{l}.attn.wv"] @ np.array(row) + p[f"L{l}.attn.bv"] for row in u]
        ctx = []
        for t in range(t_len):
            out = np.zeros(cfg.width)
            for h in range(cfg.n_heads):
                sl = slice(h * hd, (h + 1) * hd)
                scores = [float(q[t][sl] @ k[s][sl]) / math.sqrt(hd) for s in range(t + 1)]
                mx = max(scores)
                ws = [math.exp(s - mx) for s in scores]
                tot = sum(ws)
                for s in range(t + 1):
                    out[sl] += (ws[s] / tot) * v[s][sl]
            ctx.append(out)
        x = [
            np.array(x[t]) + p[f"L{l}.attn.wo"] @ ctx[t] + p[f"L{l}.attn.bo"]
            for t in range(t_len)
        ]
        u2 = [layer_norm(list(row), p[f"L{l}.ln2.g"], p[f"L{l}.ln2.b"]) for row in x]
        new_x = []
        for t in range(t_len):
            hff = p[f"L{l}.ffn.w1"] @ np.array(u2[t]) + p[f"L{l}.ffn.b1"]
            act = np.array(
                [
                    0.5 * z * (1 + math.tanh(math.sqrt(2 / math.pi) * (z + 0.044715 * z**3)))
                    for z in hff
                ]
            )
            new_x.append(x[t] + p[f"L{l}.ffn.w2"] @ act + p[f"L{l}.ffn.b2"])
        x = new_x
    probs = []
    for t in range(t_len):
        xf = layer_norm(list(x[t]), p["lnf.g"], p["lnf.b"])
        logits = p["head.w"] @ np.array(xf) + p["head.b"]
        mx = logits.max()
        e = np.exp(logits - mx)
        probs.append(e / e.sum())
    return np.stack(probs)


class TestForward:
    def test_matches_independent_oracle(self, base):
        tokens = [4, 19, 2, 11, 26, 4]
        fwd = engine.forward(base, np.array([tokens]))
        oracle = _oracle_forward_single(base, tokens)
        np.testing.assert_allclose(fwd.probs[0], oracle, atol=1e-10)

    def test_zero_adapter_matches_no_adapter(self, base):
        rng = Rng(1)
        batch = _batch(rng)
        plain = engine.forward(base, batch.tokens).probs
        zeroed = zero_adapter(base, rank=4)
        plan = LoraPlan(factors=zeroed.factors, scale=zeroed.scale)
        with_zero = engine.forward(base, batch.tokens, plan).probs
        np.testing.assert_allclose(plain, with_zero, atol=1e-12)

    def test_alpha_over_rank_invariance(self, base):
        rng = Rng(2)
        batch = _batch(rng)
        adapter = init_adapter(base, rng.derive("a"), rank=4, alpha=16.0)
        factors = {
            k: (a, rng.derive("b", k).normal(b.shape, 0.05))
            for k, (a, b) in adapter.factors.items()
        }
        doubled = {k: (a, 0.5 * b) for k, (a, b) in factors.items()}
        p1 = engine.forward(base, batch.tokens, LoraPlan(factors=factors, scale=16 / 4)).probs
        p2 = engine.forward(base, batch.tokens, LoraPlan(factors=doubled, scale=32 / 4)).probs
        np.testing.assert_allclose(p1, p2, atol=1e-12)

    def test_causality(self, base):
        rng = Rng(3)
        tokens = rng.integers(0, CFG.vocab, size=(1, 9))
        before = engine.forward(base, tokens).probs
        mutated = tokens.copy()
        mutated[0, 6] = (mutated[0, 6] + 5) % CFG.vocab
        after = engine.forward(base, mutated).probs
        np.testing.assert_allclose(before[0, :6], after[0, :6], atol=1e-15)
        assert np.abs(before[0, 6:] - after[0, 6:]).max() > 0

    def test_pure_function(self, base):
        rng = Rng(4)
        batch = _batch(rng)
        a = engine.forward(base, batch.tokens).probs
        b = engine.forward(base, batch.tokens).probs
        assert np.array_equal(a, b)

    def test_distributions_on_simplex(self, base):
        rng = Rng(5)
        batch = _batch(rng)
        probs = engine.forward(base, batch.tokens).probs
        assert probs.min() >= 0
        np.testing.assert_allclose(probs.sum(axis=-1), 1.0, atol=1e-12)

    def test_token_range_checked(self, base):
        with pytest.raises(ValueError, match="vocabulary"):
            engine.forward(base, np.array([[0, 99]]))

    def test_dense_plan_matches_lora(self, base):
        rng = Rng(6)
        batch = _batch(rng)
        adapter = init_adapter(base, rng.derive("a"))
        factors = {
            k: (a, rng.derive("bb", k).normal(b.shape, 0.05))
            for k, (a, b) in adapter.factors.items()
        }
        plan_l = LoraPlan(factors=factors, scale=4.0)
        deltas = {k: 4.0 * (a @ b) for k, (a, b) in factors.items()}
        plan_d = DensePlan(deltas=deltas)
        p1 = engine.forward(base, batch.tokens, plan_l).probs
        p2 = engine.forward(base, batch.tokens, plan_d).probs
        np.testing.assert_allclose(p1, p2, atol=1e-12)


class TestBatchLoss:
    def test_masked_only(self, base):
        ex1 = Example(tokens=(1, 2, 26, 3), mask_from=2)
        batch = make_batch([ex1])
        probs = engine.forward(base, batch.tokens).probs
        loss = engine.batch_nll(probs, batch)
        # manual: positions 2..2 predict token 3
        manual = -math.log(probs[0, 2, 3] + 1e-12)
        assert abs(loss - manual) < 1e-12

    def test_padding_does_not_leak(self, base):
        ex = Example(tokens=(5, 6, 26, 7, 8), mask_from=2)
        longer = Example(tokens=(1, 2, 3, 4, 26, 1, 2, 3, 4), mask_from=4)
        solo = engine.batch_nll(engine.forward(base, make_batch([ex]).tokens).probs, make_batch([ex]))
        padded_batch = make_batch([ex, longer])
        probs = engine.forward(base, padded_batch.tokens).probs
        mask_ex = padded_batch.mask.copy()
        mask_ex[1] = 0.0
        only_ex = TokenBatch(padded_batch.tokens, padded_batch.targets, mask_ex)
        assert abs(engine.batch_nll(probs, only_ex) - solo) < 1e-12
