import numpy as np
import pytest

from ptqlab import mitigation as M
from ptqlab.errors import NotPositiveDefiniteError, ValidationError
from ptqlab.quantizers import QuantSpec

SPEC3 = QuantSpec(bits=3, granularity="row")


def correlated_inputs(rng, tokens, c_in):
    mix = rng.normal(size=(c_in, c_in)) + 2 * np.eye(c_in)
    return rng.normal(size=(tokens, c_in)) @ mix


def instance(seed, c_in=8, c_out=4, damping=0.01):
    rng = np.random.default_rng(seed)
    x = correlated_inputs(rng, 4 * c_in, c_in)
    return rng.normal(size=(c_in, c_out)), M.build_hessian(x, damping)


class TestHessian:
    def test_matches_naive_accumulation(self):
        x = np.random.default_rng(0).normal(size=(128, 6))
        naive = np.zeros((6, 6))
        for row in x:
            for i in range(6):
                for j in range(6):
                    naive[i, j] += 2 * row[i] * row[j]
        naive[np.diag_indices(6)] += 0.01 * np.mean(np.diag(naive))
        h = M.build_hessian(x, 0.01).h
        np.testing.assert_array_equal(h, h.T)
        assert np.abs(h - naive).max() <= 1e-10 * np.abs(naive).max()
        assert np.all(np.linalg.eigvalsh(h) > 0)

    def test_isotropic(self):
        q, _ = np.linalg.qr(np.random.default_rng(1).normal(size=(10, 4)))
        h = M.build_hessian(3 * q, 0.1).h
        np.testing.assert_allclose(h, 18 * 1.1 * np.eye(4), atol=1e-12)

    def test_single_token_rank_one_plus_damping(self):
        x = np.array([[1.0, 2.0, 3.0]])
        h = M.build_hessian(x, 0.5).h
        damping = 0.5 * np.mean(np.diag(2 * x.T @ x))
        np.testing.assert_allclose(h - damping * np.eye(3), 2 * x.T @ x, atol=1e-12)

    def test_undamped_rank_deficiency_asks_for_damping(self):
        with pytest.raises(NotPositiveDefiniteError, match="increase"):
            M.build_hessian(np.array([[1.0, 2.0, 3.0]]), 0.0)


class TestRounding:
    def test_identity_hessian_gptq_is_rtn(self):
        w = np.random.default_rng(0).normal(size=(12, 5))
        h = M.Hessian(np.eye(12))
        np.testing.assert_array_equal(M.gptq_quantize(w, h, SPEC3).w_dequant, M.rtn_quantize(w, h, SPEC3).w_dequant)

    def test_single_input_gptq_is_rtn(self):
        w, h = instance(0, c_in=1)
        np.testing.assert_array_equal(M.gptq_quantize(w, h, SPEC3).w_dequant, M.rtn_quantize(w, h, SPEC3).w_dequant)

    def test_diagonal_hessian_ldlq_is_rtn(self):
        w = np.random.default_rng(1).normal(size=(6, 3))
        h = M.Hessian(np.diag([1.0, 4.0, 2.0, 3.0, 0.5, 7.0]))
        np.testing.assert_array_equal(M.ldlq_quantize(w, h, SPEC3).w_dequant, M.rtn_quantize(w, h, SPEC3).w_dequant)

    def test_ldlq_two_dim_hand_step(self):
        # H = [[2, 1], [1, 2]]: U = [[1, 1/2], [0, 1]], so q2 = round(w2 - (q1 - w1) / 2)
        h = M.Hessian(np.array([[2.0, 1.0], [1.0, 2.0]]))
        spec = QuantSpec(bits=4, granularity="tensor")
        w = np.array([[0.3], [0.7]])
        scale = 0.7 / 7
        res = M.ldlq_quantize(w, h, spec)
        q1 = np.round(0.3 / scale) * scale
        q2 = np.round((0.7 - (q1 - 0.3) / 2) / scale) * scale
        np.testing.assert_allclose(res.w_dequant[:, 0], [q1, q2], atol=1e-15)
        upper, d = M.feedback_factor(h)
        np.testing.assert_allclose(upper, [[1, 0.5], [0, 1]])
        np.testing.assert_allclose(upper @ np.diag(d) @ upper.T, h.h)

    @pytest.mark.parametrize("seed", range(10))
    @pytest.mark.parametrize("block", [1, 3, 128])
    def test_gptq_equals_ldlq(self, seed, block):
        w, h = instance(seed)
        g = M.gptq_quantize(w, h, SPEC3, block=block)
        l = M.ldlq_quantize(w, h, SPEC3)
        assert abs(g.proxy_loss - l.proxy_loss) <= 1e-9 * max(l.proxy_loss, 1e-300)

    @pytest.mark.parametrize("seed", range(5))
    def test_brute_force_lower_bounds_gptq(self, seed):
        w, h = instance(seed, c_in=6)
        g = M.gptq_quantize(w, h, SPEC3)
        b = M.brute_force_round(w, h, SPEC3)
        assert np.all(b.row_losses <= g.row_losses * (1 + 1e-12))
        assert np.all(b.row_losses <= M.brute_force_round(w, h, SPEC3, search="neighbors").row_losses * (1 + 1e-12))

    def test_brute_force_matches_exhaustive_grid(self):
        # Oracle: enumerate every code vector of a 3-dim, 2-bit row.
        w, h = instance(7, c_in=3, c_out=2)
        spec = QuantSpec(bits=2, granularity="row")
        res = M.brute_force_round(w, h, spec)
        scale = np.abs(w).max(axis=0) / 1
        for o in range(2):
            best = np.inf
            for codes in np.stack(np.meshgrid(*[[-1, 0, 1]] * 3), -1).reshape(-1, 3):
                d = codes * scale[o] - w[:, o]
                best = min(best, d @ h.h @ d)
            assert res.row_losses[o] == pytest.approx(best, rel=1e-12)

    @pytest.mark.parametrize("c_in", [1, 4])
    def test_brute_force_separable_is_rtn(self, c_in):
        w = np.random.default_rng(c_in).normal(size=(c_in, 3))
        h = M.Hessian(np.eye(c_in))
        np.testing.assert_array_equal(
            M.brute_force_round(w, h, SPEC3).w_dequant, M.rtn_quantize(w, h, SPEC3).w_dequant
        )

    def test_brute_force_size_limit(self):
        w, h = instance(0, c_in=17)
        with pytest.raises(ValidationError):
            M.brute_force_round(w, h, SPEC3)

    def test_gptq_beats_rtn_on_average(self):
        g, r = [], []
        for seed in range(30):
            w, h = instance(seed, c_in=16, c_out=8)
            g.append(M.gptq_quantize(w, h, SPEC3).proxy_loss)
            r.append(M.rtn_quantize(w, h, SPEC3).proxy_loss)
        assert np.mean(g) < np.mean(r)

    def test_mxfp4_weights(self):
        w, h = instance(3, c_in=64, c_out=4)
        spec = QuantSpec.mxfp4()
        g = M.gptq_quantize(w, h, spec)
        l = M.ldlq_quantize(w, h, spec)
        assert g.proxy_loss == pytest.approx(l.proxy_loss, rel=1e-9)
        assert g.w_q.codes.dtype == np.uint8

    def test_proxy_loss_definition(self):
        w, h = instance(4)
        res = M.gptq_quantize(w, h, SPEC3)
        d = res.w_dequant - w
        np.testing.assert_allclose(res.row_losses, [d[:, o] @ h.h @ d[:, o] for o in range(w.shape[1])])
        assert res.proxy_loss == pytest.approx(res.row_losses.sum())

    def test_codes_reproduce_dequant(self):
        from ptqlab.quantizers import dequantize

        w, h = instance(5)
        res = M.gptq_quantize(w, h, SPEC3)
        np.testing.assert_allclose(dequantize(res.w_q).T, res.w_dequant, atol=1e-14)

    def test_hessian_shape_mismatch(self):
        w, h = instance(0)
        with pytest.raises(ValidationError):
            M.gptq_quantize(w[:3], h, SPEC3)


class TestLowRank:
    def test_zero_residual(self):
        w = np.random.default_rng(0).normal(size=(5, 4))
        branch = M.lowrank_compensate(w, w, 2)
        np.testing.assert_allclose(branch.dense(), 0, atol=1e-14)

    def test_diagonal_residual(self):
        branch = M.lowrank_compensate(np.diag([3.0, 2.0, 1.0]), np.zeros((3, 3)), 1)
        assert np.sum((np.diag([3.0, 2.0, 1.0]) - branch.dense()) ** 2) == pytest.approx(5.0)

    def test_full_rank_recovers(self):
        rng = np.random.default_rng(1)
        w, wq = rng.normal(size=(6, 4)), rng.normal(size=(6, 4))
        assert np.abs(wq + M.lowrank_compensate(w, wq, 4).dense() - w).max() < 1e-8

    @pytest.mark.parametrize("seed", range(10))
    def test_eckart_young_and_monotone(self, seed):
        rng = np.random.default_rng(seed)
        w = rng.normal(size=(12, 9))
        wq = w + rng.normal(scale=0.1, size=w.shape)
        s_all = np.linalg.svd(w - wq, compute_uv=False)
        base = np.linalg.norm(w - wq)
        for k in range(1, 10):
            resid = w - wq - M.lowrank_compensate(w, wq, k).dense()
            assert np.sum(resid**2) == pytest.approx(np.sum(s_all[k:] ** 2), rel=1e-6, abs=1e-20)
            assert np.linalg.norm(resid) <= base * (1 + 1e-12)

    def test_unit_scale_matches_plain(self):
        rng = np.random.default_rng(2)
        w, wq = rng.normal(size=(6, 5)), rng.normal(size=(6, 5))
        np.testing.assert_allclose(
            M.scaled_lowrank_compensate(w, wq, 2, np.ones(6)).dense(), M.lowrank_compensate(w, wq, 2).dense()
        )

    def test_scaled_emphasizes_salient_channel(self):
        delta = np.diag([1.0, 1.1, 0.9, 1.0])
        s = np.array([1.0, 1.0, 1.0, 10.0])
        branch = M.scaled_lowrank_compensate(delta, np.zeros((4, 4)), 1, s)
        expected = np.zeros((4, 4))
        expected[3, 3] = 1.0
        np.testing.assert_allclose(branch.dense(), expected, atol=1e-12)
        plain = M.lowrank_compensate(delta, np.zeros((4, 4)), 1).dense()
        assert plain[1, 1] == pytest.approx(1.1)

    @pytest.mark.parametrize("seed", range(5))
    def test_scaled_two_step_oracle(self, seed):
        rng = np.random.default_rng(seed)
        w, wq = rng.normal(size=(8, 6)), rng.normal(size=(8, 6))
        s = rng.uniform(0.2, 5.0, size=8)
        u, sv, vt = np.linalg.svd(s[:, None] * (w - wq))
        expected = (u[:, :3] * sv[:3]) @ vt[:3] / s[:, None]
        np.testing.assert_allclose(M.scaled_lowrank_compensate(w, wq, 3, s).dense(), expected, atol=1e-10)

    def test_scaled_rejects_bad_scale(self):
        with pytest.raises(ValidationError):
            M.scaled_lowrank_compensate(np.ones((2, 2)), np.zeros((2, 2)), 1, [1.0, 0.0])

    def test_salience_geometric_mean_one(self):
        x = np.random.default_rng(3).normal(size=(20, 6)) * [1, 2, 3, 4, 5, 0]
        s = M.salience_scales(x)
        assert np.all(s > 0)
        assert np.exp(np.mean(np.log(s))) == pytest.approx(1.0)


class TestLayerOutput:
    def test_without_branch(self):
        rng = np.random.default_rng(0)
        x, wq, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3)), rng.normal(size=3)
        np.testing.assert_allclose(M.layer_output(x, wq, None, b), x @ wq + b)

    def test_full_rank_branch_restores(self):
        rng = np.random.default_rng(1)
        x, w, b = rng.normal(size=(5, 4)), rng.normal(size=(4, 3)), rng.normal(size=3)
        wq = np.round(w)
        y = M.layer_output(x, wq, M.lowrank_compensate(w, wq, 3), b)
        assert np.abs(y - (x @ w + b)).max() < 1e-6

    def test_associativity_oracle(self):
        rng = np.random.default_rng(2)
        x, wq = rng.normal(size=(7, 6)), rng.normal(size=(6, 5))
        branch = M.LowRankBranch(rng.normal(size=(6, 2)), rng.normal(size=(2, 5)))
        np.testing.assert_allclose(M.layer_output(x, wq, branch), x @ (wq + branch.a @ branch.b), rtol=1e-12)

    def test_branch_shape_mismatch(self):
        branch = M.LowRankBranch(np.ones((3, 1)), np.ones((1, 2)))
        with pytest.raises(ValidationError):
            M.layer_output(np.ones((2, 4)), np.ones((4, 2)), branch)
