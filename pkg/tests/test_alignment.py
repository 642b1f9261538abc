"""
Tests for MFMS search, sparsification, the alignment losses and the convergence indicator
"""

import math

import numpy as np
import pandas as pd
import pytest

from src import alignment
from src import autodiff as ad
from src.alignment import (ConvergenceWindow, MfmsAssignment, Projection, alignment_loss, assign_greedy, aux_mil,
                           convergence_update, cosine_align_loss, project_secondary, score_cross_entropy,
                           search_mfms, similarity_matrix, sparsify, write_convergence_trace,
                           write_selection_frequency)
from src.autodiff import Tensor
from src.encoders import Regressor
from src.errors import ShapeError


def assignment(theta, d_p):
    theta = np.asarray(theta)
    rest = np.setdiff1d(np.arange(d_p), theta)
    return MfmsAssignment(theta=theta, theta_hat=rest, d_p=d_p)


def loop_alignment_total(z_r, zt_a, zt_f, s_r, sh_a, sh_f, aux_a, aux_f, lam, eps, lengths):
    """Walk every real timestep with plain floats"""
    def cos(x, y, b, t):
        nx = math.sqrt(sum(v * v for v in x[b, t]))
        ny = math.sqrt(sum(v * v for v in y[b, t]))
        if nx == 0.0 or ny == 0.0:
            return 0.0
        return sum(u * v for u, v in zip(x[b, t], y[b, t])) / (nx * ny)

    def xent(p, q, b, t):
        cp = min(max(p[b, t], eps), 1.0 - eps)
        cq = min(max(q[b, t], eps), 1.0 - eps)
        return -(cp * math.log(cq) + (1.0 - cp) * math.log(1.0 - cq))

    steps = [(b, t) for b in range(len(lengths)) for t in range(lengths[b])]
    n = max(len(steps), 1)
    total = 0.0
    for x, y, p, q in ((z_r, zt_a, s_r, sh_a), (z_r, zt_f, s_r, sh_f), (zt_a, zt_f, sh_a, sh_f)):
        total += 1.0 - sum(cos(x, y, b, t) for b, t in steps) / n
        total += sum(xent(p, q, b, t) for b, t in steps) / n
    return total + lam * (aux_a + aux_f)


class TestProjection:
    def test_identity_init(self, rng):
        z = rng.standard_normal((2, 5, 6))
        np.testing.assert_array_equal(Projection(6, rng)(Tensor(z)).data, z)

    @pytest.mark.parametrize("T", [1, 7])
    def test_shape_preserved(self, rng, T):
        projection = Projection(4, rng, identity=False)
        assert projection(Tensor(rng.standard_normal((3, T, 4)))).shape == (3, T, 4)

    def test_rgb_is_never_projected(self, rng):
        with pytest.raises(ValueError):
            project_secondary(Tensor(np.zeros((1, 2, 4))), Projection(4, rng), "rgb")

    def test_alignment_gradient_reaches_projection(self, rng):
        projection = Projection(4, rng)
        z_r = Tensor(rng.standard_normal((2, 6, 8)))
        z_a = Tensor(rng.standard_normal((2, 6, 4)))
        projected = project_secondary(z_a, projection, "audio")
        loss = cosine_align_loss(ad.stop_gradient(z_r), sparsify(projected, assignment([1, 3, 4, 6], 8)))
        grads = ad.backward(loss, projection.named_parameters())
        assert np.abs(grads["fc3.weight"]).sum() > 0


class TestSearch:
    def test_hand_example(self):
        S = np.array([[0.9, 0.1, 0.2], [0.8, 0.7, 0.3]])
        a = assign_greedy(S, 3)
        np.testing.assert_array_equal(a.theta, [0, 1])
        np.testing.assert_array_equal(a.theta_hat, [2])
        np.testing.assert_array_equal(a.theta_pad, [0, 1, 2])

    @pytest.mark.parametrize("k", [3, 4, 5])
    def test_unambiguous_maxima(self, k):
        S = np.zeros((3, 5))
        S[0, 4] = S[1, 0] = S[2, 2] = 1.0
        np.testing.assert_array_equal(assign_greedy(S, k).theta, [4, 0, 2])

    def test_ties_prefer_lower_index(self):
        S = np.array([[0.5, 0.5, 0.1], [0.2, 0.4, 0.4]])
        np.testing.assert_array_equal(assign_greedy(S).theta, [0, 1])

    def test_ties_exhaustive_small_cases(self):
        values = [0.0, 0.5, 1.0]
        rng = np.random.default_rng(0)
        for _ in range(200):
            S = rng.choice(values, size=(2, 3))
            expected, used = [], set()
            for row in S:
                order = sorted(range(3), key=lambda j: (-row[j], j))
                expected.append(next(j for j in order if j not in used))
                used.add(expected[-1])
            np.testing.assert_array_equal(assign_greedy(S).theta, expected)

    def test_k_below_d_s(self):
        with pytest.raises(ValueError):
            assign_greedy(np.zeros((3, 5)), 2)

    def test_d_s_must_be_smaller(self):
        with pytest.raises(ValueError):
            assign_greedy(np.zeros((4, 4)))

    def test_always_injective_and_total(self, rng):
        for _ in range(1000):
            d_p = int(rng.integers(2, 12))
            d_s = int(rng.integers(1, d_p))
            k = int(rng.integers(d_s, d_p + 1))
            a = assign_greedy(rng.standard_normal((d_s, d_p)), k)
            assert len(set(a.theta.tolist())) == d_s
            assert sorted(a.theta_pad.tolist()) == list(range(d_p))
            assert a.theta_hat.tolist() == sorted(a.theta_hat.tolist())

    def test_sample_permutation_invariance(self, rng):
        z_s = rng.standard_normal((1, 30, 3))
        z_p = rng.standard_normal((1, 30, 7))
        perm = rng.permutation(30)
        a = search_mfms(z_s, z_p)
        b = search_mfms(z_s[:, perm], z_p[:, perm])
        np.testing.assert_array_equal(a.theta, b.theta)

    def test_similarity_uses_valid_rows_only(self, rng):
        z_s = rng.standard_normal((1, 6, 2))
        z_p = rng.standard_normal((1, 6, 4))
        valid = np.array([[True] * 4 + [False] * 2])
        np.testing.assert_allclose(similarity_matrix(z_s, z_p, valid), similarity_matrix(z_s[:, :4], z_p[:, :4]))

    def test_counter(self, rng):
        search_mfms(rng.standard_normal((1, 4, 2)), rng.standard_normal((1, 4, 3)))
        assert alignment.SEARCH_CALLS == 1


class TestSparsify:
    def test_hand_example(self):
        out = sparsify(Tensor([[1.0, 2.0]]), assignment([2, 0], 3))
        np.testing.assert_array_equal(out.data, [[2.0, 0.0, 1.0]])

    def test_zero_input(self):
        out = sparsify(Tensor(np.zeros((2, 3, 2))), assignment([1, 3], 5))
        assert not out.data.any()

    def test_identity_prefix(self, rng):
        z = rng.standard_normal((2, 3, 2))
        out = sparsify(Tensor(z), assignment([0, 1], 5))
        np.testing.assert_array_equal(out.data, np.concatenate([z, np.zeros((2, 3, 3))], axis=-1))

    def test_zero_columns_and_read_back(self, rng):
        for _ in range(50):
            d_p = int(rng.integers(3, 10))
            d_s = int(rng.integers(1, d_p))
            theta = rng.permutation(d_p)[:d_s]
            z = rng.standard_normal((2, 4, d_s)) + 0.1
            out = sparsify(Tensor(z), assignment(theta, d_p)).data
            zero_columns = [j for j in range(d_p) if not out[..., j].any()]
            assert len(zero_columns) == d_p - d_s
            np.testing.assert_array_equal(out[..., theta], z)

    def test_gather_reading_differs(self):
        a = assignment([2, 0], 3)
        literal = sparsify(Tensor([[1.0, 2.0]]), a, mode="gather")
        # z_pad = [1, 2, 0] indexed by theta_pad = [2, 0, 1]
        np.testing.assert_array_equal(literal.data, [[0.0, 1.0, 2.0]])

    def test_gradient_routes_through_scatter(self, rng):
        z = ad.parameter(rng.standard_normal((1, 3, 2)))
        weights = rng.standard_normal((1, 3, 4))
        out = sparsify(z, assignment([3, 1], 4))
        grads = ad.backward(ad.tsum(out * weights), {"z": z})
        np.testing.assert_array_equal(grads["z"], weights[..., [3, 1]])

    def test_wrong_width(self):
        with pytest.raises(ShapeError):
            sparsify(Tensor(np.zeros((1, 3))), assignment([0, 1], 4))

    def test_unknown_mode(self):
        with pytest.raises(ValueError):
            sparsify(Tensor(np.zeros((1, 2))), assignment([0, 1], 4), mode="fancy")


class TestCosineAlign:
    def test_self_similarity(self, rng):
        x = Tensor(rng.standard_normal((2, 3, 4)))
        assert cosine_align_loss(x, x).item() == pytest.approx(0.0, abs=1e-12)

    def test_extremes(self):
        x = Tensor([[1.0, 0.0]])
        assert cosine_align_loss(x, Tensor([[0.0, 3.0]])).item() == pytest.approx(1.0)
        assert cosine_align_loss(x, Tensor([[-2.0, 0.0]])).item() == pytest.approx(2.0)

    def test_zero_row_counts_as_cosine_zero(self):
        x = ad.parameter([[0.0, 0.0], [1.0, 1.0]])
        loss = cosine_align_loss(x, Tensor([[1.0, 0.0], [1.0, 1.0]]))
        assert loss.item() == pytest.approx(0.5)
        grads = ad.backward(loss, {"x": x})
        np.testing.assert_array_equal(grads["x"][0], [0.0, 0.0])

    def test_fixed_rgb_gets_no_gradient(self, rng):
        z_r = ad.parameter(rng.standard_normal((2, 3, 5)))
        z_a = ad.parameter(rng.standard_normal((2, 3, 2)))
        s = ad.parameter(rng.random((2, 3)))
        zt = sparsify(z_a, assignment([4, 1], 5))
        total, _ = alignment_loss(z_r, zt, zt, s, ad.sigmoid(z_a.sum(axis=-1)), ad.sigmoid(z_a.mean(axis=-1)),
                                  Tensor(0.0), Tensor(0.0))
        grads = ad.backward(total, {"z_r": z_r, "s": s, "z_a": z_a})
        assert not grads["z_r"].any()
        assert not grads["s"].any()
        assert grads["z_a"].any()


class TestScoreCrossEntropy:
    def test_fair_coin(self):
        assert score_cross_entropy(Tensor([0.5]), Tensor([0.5])).item() == pytest.approx(math.log(2), abs=1e-12)

    def test_clamped_certainty(self):
        value = score_cross_entropy(Tensor([1.0]), Tensor([1.0]), eps=1e-6).item()
        eps = 1e-6
        expected = -((1 - eps) * math.log(1 - eps) + eps * math.log(eps))
        assert value == pytest.approx(expected, rel=1e-9)
        assert value == pytest.approx(1.48e-5, rel=1e-2)

    def test_minimum_at_target(self):
        grid = np.linspace(0.01, 0.99, 99)
        values = [score_cross_entropy(Tensor([0.3]), Tensor([q])).item() for q in grid]
        assert grid[int(np.argmin(values))] == pytest.approx(0.3)

    def test_length_mismatch(self):
        with pytest.raises(ShapeError):
            score_cross_entropy(Tensor([0.5, 0.5]), Tensor([0.5]))


class TestAuxMil:
    def test_identity_projection_keeps_scores(self, rng):
        regressor = Regressor(4, rng)
        z = Tensor(rng.standard_normal((2, 8, 4)))
        loss, scores = aux_mil(Projection(4, rng)(z), regressor, [0, 1])
        np.testing.assert_array_equal(scores.data, regressor(z).data)
        assert loss.item() >= 0.0

    def test_gradient_reaches_projection_and_regressor(self, rng):
        projection, regressor = Projection(4, rng), Regressor(4, rng)
        loss, _ = aux_mil(projection(Tensor(rng.standard_normal((2, 8, 4)))), regressor, [0, 1])
        params = {**projection.named_parameters("p."), **regressor.named_parameters("r.")}
        grads = ad.backward(loss, params)
        assert grads["p.fc3.weight"].any()
        assert grads["r.fc3.weight"].any()


class TestAlignmentLoss:
    def _inputs(self, rng):
        z_r = Tensor(rng.standard_normal((2, 5, 6)))
        zt_a = Tensor(rng.standard_normal((2, 5, 6)))
        zt_f = Tensor(rng.standard_normal((2, 5, 6)))
        s_r, sh_a, sh_f = (Tensor(rng.random((2, 5))) for _ in range(3))
        return z_r, zt_a, zt_f, s_r, sh_a, sh_f

    def test_matches_term_by_term_sum(self, rng):
        for trial in range(500):
            B, T, D = int(rng.integers(1, 4)), int(rng.integers(1, 9)), int(rng.integers(1, 7))
            z_r, zt_a, zt_f = (rng.standard_normal((B, T, D)) for _ in range(3))
            s_r, sh_a, sh_f = (rng.random((B, T)) for _ in range(3))
            if trial % 4 == 0:
                zt_a[0, 0] = 0.0
                s_r[0, -1], sh_f[-1, 0] = 0.0, 1.0
            lengths = rng.integers(1, T + 1, B) if trial % 2 else np.full(B, T)
            valid = np.arange(T)[None, :] < lengths[:, None]
            lam = float(10.0 ** rng.uniform(-4, 1))
            aux_a, aux_f = rng.uniform(0.0, 3.0, 2)
            total, parts = alignment_loss(Tensor(z_r), Tensor(zt_a), Tensor(zt_f), Tensor(s_r), Tensor(sh_a),
                                          Tensor(sh_f), Tensor(aux_a), Tensor(aux_f), lam=lam, valid=valid)
            expected = loop_alignment_total(z_r, zt_a, zt_f, s_r, sh_a, sh_f, aux_a, aux_f, lam, 1e-6, lengths)
            assert total.item() == pytest.approx(expected, abs=1e-10), trial
            assert set(parts) == set(alignment.ALIGNMENT_TERMS)

    def test_identical_inputs_leave_only_score_terms(self, rng):
        z = Tensor(rng.standard_normal((2, 5, 6)))
        p = Tensor(rng.random((2, 5)))
        total, parts = alignment_loss(z, z, z, p, p, p, Tensor(0.0), Tensor(0.0))
        sce = score_cross_entropy(p, p).item()
        assert total.item() == pytest.approx(3 * sce, abs=1e-12)
        assert total.item() > 0
        for name in ("cos_ra", "cos_rf", "cos_af"):
            assert parts[name].item() == pytest.approx(0.0, abs=1e-12)

    def test_zero_lambda_removes_aux_gradient(self, rng):
        z_r, zt_a, zt_f, s_r, sh_a, sh_f = self._inputs(rng)
        aux = ad.parameter(0.7)
        total, _ = alignment_loss(z_r, zt_a, zt_f, s_r, sh_a, sh_f, aux, Tensor(0.2), lam=0.0)
        assert ad.backward(total, {"aux": aux})["aux"] == 0.0


class TestConvergence:
    def test_identical_assignments_give_one(self):
        window = ConvergenceWindow(2, 5, w=4)
        for _ in range(4):
            m = convergence_update(window, assignment([3, 1], 5))
        assert m == pytest.approx(1.0)

    def test_hand_count(self):
        window = ConvergenceWindow(2, 3, w=2)
        window.update(assignment([0, 1], 3))
        assert window.update(assignment([0, 2], 3)) == pytest.approx(2.0)
        np.testing.assert_array_equal(window.selection_frequency(), [2, 1, 1])

    def test_eviction(self):
        window = ConvergenceWindow(2, 3, w=2)
        window.update(assignment([1, 2], 3))
        window.update(assignment([0, 1], 3))
        assert window.update(assignment([0, 1], 3)) == pytest.approx(1.0)
        assert len(window) == 2

    def test_lower_bound(self, rng):
        for _ in range(300):
            d_p = int(rng.integers(2, 8))
            d_s = int(rng.integers(1, d_p))
            window = ConvergenceWindow(d_s, d_p, w=int(rng.integers(1, 6)))
            for _ in range(int(rng.integers(1, 10))):
                m = window.update(assignment(rng.permutation(d_p)[:d_s], d_p))
                assert m >= 1.0 - 1e-12

    def test_one_only_for_constant_set(self, rng):
        window = ConvergenceWindow(2, 4, w=3)
        window.update(assignment([0, 1], 4))
        window.update(assignment([1, 0], 4))
        assert window.indicator() == pytest.approx(1.0)
        window.update(assignment([0, 2], 4))
        assert window.indicator() > 1.0

    def test_dimension_mismatch(self):
        with pytest.raises(ShapeError):
            ConvergenceWindow(3, 5).update(assignment([0, 1], 5))

    def test_exports(self, tmp_path):
        window_ra, window_rf = ConvergenceWindow(1, 3), ConvergenceWindow(2, 3)
        window_ra.update(assignment([2], 3))
        window_rf.update(assignment([0, 2], 3))
        frame = pd.read_csv(write_selection_frequency(window_ra, window_rf, tmp_path / "freq.csv"))
        assert frame["audio_count"].tolist() == [0, 0, 1]
        assert frame["flow_count"].tolist() == [1, 0, 1]
        trace = write_convergence_trace([{"iteration": 0, "m_ra": 1.0, "m_rf": 1.0,
                                          "theta_ra": [2], "theta_rf": [0, 2]}], tmp_path / "conv.jsonl")
        back = pd.read_json(trace, lines=True)
        assert back["theta_rf"].iloc[0] == [0, 2]
