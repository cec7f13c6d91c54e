import numpy as np
import pytest

from lorafusion import engine, fusion
from lorafusion.data import Example, Hyper, make_batch
from lorafusion.engine import DensePlan, LoraPlan
from lorafusion.experts import ExpertLibrary, init_adapter, zero_adapter
from lorafusion.fusion import (
    EnsembleSpec,
    ErrorMatrix,
    SimplexWeights,
    combine_logits,
    combine_probs,
    distill,
    distill_objective_grad,
    ensemble_objective_grad,
    ensemble_predict,
    fit_ensemble_weights,
    fit_merge_weights,
    load_error_matrix,
    load_weights,
    merge_fullrank,
    merge_lowrank,
    merge_objective_grad,
    save_error_matrix,
    save_weights,
)
from lorafusion.model import ModelConfig, build_base
from lorafusion.numerics import Rng, finite_diff_grad, rel_err

CFG = ModelConfig(vocab=16, width=16, layers=2, ff_width=24, max_seq=24, n_heads=2)


@pytest.fixture(scope="module")
def base():
    return build_base(CFG, Rng(0))


def make_library(base, n=3, seed=50, shared_a=False, zero=False):
    adapters = []
    a_rng = Rng(seed).derive("sharedA")
    for i in range(n):
        rng = Rng(seed + i)
        ad = init_adapter(base, a_rng if shared_a else rng, rank=3, alpha=12.0, task=f"t{i}")
        if not zero:
            ad.factors = {
                k: (a, rng.derive("b", k).normal(b.shape, 0.1))
                for k, (a, b) in ad.factors.items()
            }
        adapters.append(ad)
    return ExpertLibrary(adapters)


def rand_batch(rng, b=3, t=6):
    examples = [
        Example(tokens=tuple(int(x) for x in rng.derive(i).integers(0, CFG.vocab, 7)), mask_from=3)
        for i in range(b)
    ]
    return make_batch(examples)


class TestCombine:
    def test_hand_arithmetic(self):
        stack = np.array([[0.6, 0.3, 0.1], [0.2, 0.2, 0.6]])
        out = combine_probs(stack, np.array([0.5, 0.5]))
        np.testing.assert_allclose(out, [0.4, 0.25, 0.35], atol=1e-15)

    def test_single_expert_identity(self, base):
        lib = make_library(base, 1)
        batch = rand_batch(Rng(1))
        spec = EnsembleSpec(lib, None)
        ens = ensemble_predict(spec, base, batch)
        ad = lib.adapters[0]
        single = engine.forward(base, batch.tokens, LoraPlan(ad.factors, ad.scale)).probs
        np.testing.assert_allclose(ens, single, atol=1e-12)

    def test_identical_experts_prob_equals_logit(self, base):
        lib0 = make_library(base, 1)
        twins = [lib0.adapters[0].copy(), lib0.adapters[0].copy()]
        twins[0].task, twins[1].task = "a", "b"
        lib = ExpertLibrary(twins)
        batch = rand_batch(Rng(2))
        p = ensemble_predict(EnsembleSpec(lib, None, "probability"), base, batch)
        z = ensemble_predict(EnsembleSpec(lib, None, "logit"), base, batch)
        np.testing.assert_allclose(p, z, atol=1e-12)

    def test_per_layer_weights_rejected(self, base):
        lib = make_library(base, 2)
        with pytest.raises(ValueError, match="per-layer"):
            EnsembleSpec(lib, SimplexWeights(np.zeros((2, 2)), "per-layer"))

    def test_one_hot_reduction(self, base):
        lib = make_library(base, 3)
        batch = rand_batch(Rng(3))
        onehot = np.array([0.0, 1.0, 0.0])
        ens = ensemble_predict(EnsembleSpec(lib, onehot), base, batch)
        ad = lib.adapters[1]
        direct = engine.forward(base, batch.tokens, LoraPlan(ad.factors, ad.scale)).probs
        assert np.abs(ens - direct).max() <= 1e-10


class TestMergeLowrank:
    def test_identical_experts_any_lambda(self, base):
        lib0 = make_library(base, 1)
        twins = [lib0.adapters[0].copy(), lib0.adapters[0].copy()]
        twins[0].task, twins[1].task = "a", "b"
        lib = ExpertLibrary(twins)
        merged = merge_lowrank(lib, np.array([0.3, 0.7]))
        for k, (a, b) in merged.factors.items():
            ref_a, ref_b = lib.adapters[0].factors[k]
            np.testing.assert_allclose(a, ref_a, atol=1e-15)
            np.testing.assert_allclose(b, ref_b, atol=1e-15)

    def test_one_hot_exact(self, base):
        lib = make_library(base, 3)
        merged = merge_lowrank(lib, np.array([0.0, 0.0, 1.0]))
        for k in merged.factors:
            assert np.array_equal(merged.factors[k][0], lib.adapters[2].factors[k][0])
            assert np.array_equal(merged.factors[k][1], lib.adapters[2].factors[k][1])

    def test_shared_a_matches_fullrank(self, base):
        # with one shared A factor, sum_i lam_i A B_i == A (sum_i lam_i B_i)
        lib = make_library(base, 2, shared_a=True)
        batch = rand_batch(Rng(4))
        merged = merge_lowrank(lib, None)
        p_low = engine.forward(base, batch.tokens, LoraPlan(merged.factors, merged.scale)).probs
        deltas = merge_fullrank(lib, None)
        p_full = engine.forward(base, batch.tokens, DensePlan(deltas)).probs
        np.testing.assert_allclose(p_low, p_full, atol=1e-12)

    def test_linearity_in_expert_params(self, base):
        lib = make_library(base, 2)
        scaled = ExpertLibrary([lib.adapters[0].copy(), lib.adapters[1].copy()])
        scaled.adapters[0].factors = {
            k: (3 * a, b) for k, (a, b) in lib.adapters[0].factors.items()
        }
        lam = np.array([0.25, 0.75])
        m1 = merge_lowrank(lib, lam)
        m2 = merge_lowrank(scaled, lam)
        for k in m1.factors:
            np.testing.assert_allclose(
                m2.factors[k][0] - m1.factors[k][0],
                2 * lam[0] * lib.adapters[0].factors[k][0],
                atol=1e-12,
            )

    def test_per_layer_rows(self, base):
        lib = make_library(base, 2)
        rows = np.array([[1.0, 0.0], [0.0, 1.0]])
        merged = merge_lowrank(lib, rows)
        assert np.array_equal(merged.factors["L0.attn"][0], lib.adapters[0].factors["L0.attn"][0])
        assert np.array_equal(merged.factors["L1.ffn"][1], lib.adapters[1].factors["L1.ffn"][1])


class TestMergeFullrank:
    def test_one_hot_matches_expert_delta(self, base):
        lib = make_library(base, 3)
        deltas = merge_fullrank(lib, np.array([1.0, 0.0, 0.0]))
        for k in lib.site_keys:
            np.testing.assert_allclose(deltas[k], lib.adapters[0].site_delta(k), atol=1e-12)

    def test_differs_from_lowrank_in_general(self, base):
        lib = make_library(base, 2)
        deltas_full = merge_fullrank(lib, None)
        merged = merge_lowrank(lib, None)
        gap = 0.0
        for k in lib.site_keys:
            low = merged.scale * (merged.factors[k][0] @ merged.factors[k][1])
            gap = max(gap, np.linalg.norm(deltas_full[k] - low))
        assert gap > 1e-6

    def test_zero_experts_zero_delta(self, base):
        lib = ExpertLibrary([zero_adapter(base, 3, 12.0), zero_adapter(base, 3, 12.0)])
        deltas = merge_fullrank(lib, None)
        assert all(not d.any() for d in deltas.values())


class TestGradients:
    def test_ensemble_objective_vs_fd(self, base):
        lib = make_library(base, 3)
        batch = rand_batch(Rng(5))
        theta = Rng(6).normal(3, 0.5)
        _, analytic = ensemble_objective_grad(lib, base, theta, batch)
        fd = finite_diff_grad(
            lambda t: ensemble_objective_grad(lib, base, t, batch)[0], theta
        )
        assert rel_err(analytic, fd) < 1e-4

    @pytest.mark.parametrize("mode", ["global", "per-layer"])
    def test_merge_objective_vs_fd(self, base, mode):
        lib = make_library(base, 3)
        batch = rand_batch(Rng(7))
        shape = (3,) if mode == "global" else (CFG.layers, 3)
        theta = Rng(8).normal(shape, 0.5)
        _, analytic = merge_objective_grad(lib, base, theta, mode, batch)
        fd = finite_diff_grad(
            lambda t: merge_objective_grad(lib, base, t, mode, batch)[0], theta
        )
        assert rel_err(analytic, fd) < 1e-4

    def test_distill_objective_vs_fd(self, base):
        lib = make_library(base, 2)
        batch = rand_batch(Rng(9))
        teacher = ensemble_predict(EnsembleSpec(lib, None), base, batch)
        student = init_adapter(base, Rng(10), rank=3, alpha=12.0)
        factors = {
            k: (a, Rng(11).derive(k).normal(b.shape, 0.05))
            for k, (a, b) in student.factors.items()
        }
        _, grads = distill_objective_grad(teacher, base, factors, 4.0, batch)
        key = "L1.attn"

        def f(blocks):
            fac = dict(factors)
            fac[key] = (blocks["A"], blocks["B"])
            return distill_objective_grad(teacher, base, fac, 4.0, batch)[0]

        fd = finite_diff_grad(f, {"A": factors[key][0], "B": factors[key][1]})
        err = max(rel_err(grads[key][0], fd["A"]), rel_err(grads[key][1], fd["B"]))
        assert err < 1e-4


def _mixture_examples(rng, n=40):
    out = []
    for i in range(n):
        toks = tuple(int(x) for x in rng.derive(i).integers(0, CFG.vocab, 6))
        out.append(Example(tokens=toks, mask_from=3))
    return out


def _constant_target_examples(rng, n=60, target=7):
    out = []
    for i in range(n):
        toks = list(int(x) for x in rng.derive(i).integers(0, CFG.vocab, 6))
        toks[3:] = [target] * 3
        out.append(Example(tokens=tuple(toks), mask_from=2))
    return out


@pytest.fixture(scope="module")
def skilled_expert(base):
    """Adapter trained to predict the constant-target rule, plus its data."""
    from lorafusion.training import train_lora

    data = _constant_target_examples(Rng(30), 60)
    adapter = train_lora(
        base, data, Hyper(epochs=5, lr=1e-2, dropout=0.0), Rng(31), rank=3, alpha=12.0, task="skilled"
    )
    return adapter, data


class TestFitEnsemble:
    def test_single_expert_stays_unit(self, base):
        lib = make_library(base, 1)
        data = _mixture_examples(Rng(12))
        weights, _ = fit_ensemble_weights(
            lib, base, data, data, Hyper(epochs=1, lr=1e-3), Rng(0)
        )
        np.testing.assert_allclose(weights.lam, [1.0])

    def test_dominant_expert_wins_mass(self, base, skilled_expert):
        # expert 1 knows the constant-target rule, expert 0 is the plain base;
        # the skilled expert is strictly better on every batch
        skilled, data = skilled_expert
        lib = ExpertLibrary([zero_adapter(base, 3, 12.0, task="plain"), skilled])
        weights, info = fit_ensemble_weights(
            lib, base, data, data, Hyper(epochs=5, lr=1e-1), Rng(0)
        )
        assert weights.lam[1] > 0.5
        assert info["train_loss_final"] <= info["train_loss_initial"] + 1e-12

    def test_empty_data_rejected(self, base):
        lib = make_library(base, 2)
        with pytest.raises(ValueError, match="empty training data"):
            fit_ensemble_weights(lib, base, [], [], Hyper(epochs=1, lr=1e-3), Rng(0))


class TestFitMerge:
    def test_identical_experts_flat_objective(self, base):
        lib0 = make_library(base, 1)
        twins = [lib0.adapters[0].copy(), lib0.adapters[0].copy()]
        twins[0].task, twins[1].task = "a", "b"
        lib = ExpertLibrary(twins)
        data = _mixture_examples(Rng(14), 30)
        _, info = fit_merge_weights(
            lib, base, data, data, "global", Hyper(epochs=2, lr=1e-2), Rng(0)
        )
        assert abs(info["train_loss_final"] - info["train_loss_initial"]) < 1e-9

    def test_one_hot_optimum_found(self, base, skilled_expert):
        # one expert fits all the data; merging should drive its mass to ~1
        skilled, data = skilled_expert
        lib = ExpertLibrary([zero_adapter(base, 3, 12.0, task="plain"), skilled])
        weights, _ = fit_merge_weights(
            lib, base, data, data, "global", Hyper(epochs=10, lr=1e-1), Rng(0)
        )
        assert weights.lam[1] > 0.9


class TestDistill:
    def test_zero_steps_keeps_init(self, base):
        lib = make_library(base, 2)
        data = _mixture_examples(Rng(16), 20)
        teacher = EnsembleSpec(lib, None)
        student, info = distill(teacher, base, data, data, Hyper(epochs=0, lr=1e-2), Rng(3))
        for k, (a, b) in student.factors.items():
            assert not b.any()  # B starts at zero and nothing moved
        assert info["kl_initial"] == info["kl_final"]

    def test_kl_halves_for_single_expert_teacher(self, base):
        lib = make_library(base, 1)
        data = _mixture_examples(Rng(17), 60)
        teacher = EnsembleSpec(lib, None)
        student, info = distill(
            teacher, base, data, data, Hyper(epochs=6, lr=1e-2, dropout=0.0), Rng(4)
        )
        assert info["kl_final"] < info["kl_initial"]
        assert info["kl_final"] <= 0.5 * info["kl_initial"]


class TestSerialization:
    def test_weights_roundtrip(self, tmp_path):
        w = SimplexWeights(np.array([[0.1, -0.4], [1.2, 0.0]]), "per-layer")
        save_weights(w, tmp_path / "w.json")
        back = load_weights(tmp_path / "w.json")
        assert back.mode == "per-layer"
        assert np.array_equal(back.logits, w.logits)

    def test_error_matrix_roundtrip(self, tmp_path):
        m = ErrorMatrix(np.array([[0.5, 1.25], [2.0, 0.125]]), ["e0", "e1"], ["ta", "tb"])
        save_error_matrix(m, tmp_path / "m.csv")
        back = load_error_matrix(tmp_path / "m.csv")
        assert back.expert_names == ["e0", "e1"] and back.task_names == ["ta", "tb"]
        assert np.array_equal(back.values, m.values)

    def test_error_matrix_validation(self):
        with pytest.raises(ValueError, match="finite"):
            ErrorMatrix(np.array([[np.nan]]), ["e"], ["t"])
