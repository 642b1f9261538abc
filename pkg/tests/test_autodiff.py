"""
Tests for the tensor / reverse-mode differentiation layer
"""

import numpy as np
import pytest

from src import autodiff as ad
from src.autodiff import AdamState, Graph, Tensor
from src.errors import GraphError, ShapeError


def scalar_graph(fn, **arrays):
    """Graph whose parameters are `arrays` and whose loss is a weighted sum of fn(*params)"""
    params = {name: ad.parameter(value, name=name) for name, value in arrays.items()}
    rng = np.random.default_rng(1)
    weights = {}

    def build(_inputs):
        out = fn(*params.values())
        if out.data.size == 1:
            return {"loss": out}
        if "w" not in weights:
            weights["w"] = rng.standard_normal(out.shape)
        return {"loss": ad.tsum(out * weights["w"])}

    return Graph(build, params=params)


class TestForward:
    def test_identity_graph(self):
        graph = Graph(lambda inputs: {"out": inputs["x"]})
        out = ad.forward(graph, {"x": [1.0, 2.0, 3.0]})
        np.testing.assert_array_equal(out["out"].data, [1.0, 2.0, 3.0])

    def test_leaves_and_recorded_outputs(self):
        w = ad.parameter([1.0, 2.0])
        out = ad.tsum(w * w)
        assert w.is_leaf
        assert not out.is_leaf
        with ad.no_grad():
            assert ad.tsum(w * w).is_leaf

    def test_softmax_symmetric(self):
        np.testing.assert_allclose(ad.softmax(Tensor([0.0, 0.0])).data, [0.5, 0.5])

    def test_softmax_mask_gives_exact_zero(self):
        out = ad.softmax(Tensor([1.0, 5.0, 2.0]), mask=np.array([True, False, True]))
        assert out.data[1] == 0.0
        np.testing.assert_allclose(out.data.sum(), 1.0)

    def test_conv1d_unit_kernel(self):
        x = Tensor(np.array([[4.0], [5.0]]))
        weight = Tensor(np.ones((1, 1, 1)))
        np.testing.assert_allclose(ad.conv1d(x, weight).data, [[4.0], [5.0]])

    def test_conv1d_same_padding_matches_loop(self, rng):
        x = rng.standard_normal((2, 7, 3))
        w = rng.standard_normal((3, 3, 4))
        out = ad.conv1d(Tensor(x), Tensor(w), dilation=2).data
        expected = np.zeros((2, 7, 4))
        for t in range(7):
            for j in range(3):
                src = t + (j - 1) * 2
                if 0 <= src < 7:
                    expected[:, t] += x[:, src] @ w[j]
        np.testing.assert_allclose(out, expected, atol=1e-12)

    def test_conv1d_weight_gradient_without_input_gradient(self, rng):
        x = rng.standard_normal((2, 7, 3))
        w = rng.standard_normal((3, 3, 4))
        frozen, weight = Tensor(x), ad.parameter(w)
        grads = ad.backward(ad.tsum(ad.conv1d(frozen, weight, dilation=2)), {"w": weight, "x": frozen})
        assert set(grads) == {"w"}
        trainable, weight2 = ad.parameter(x), ad.parameter(w)
        both = ad.backward(ad.tsum(ad.conv1d(trainable, weight2, dilation=2)), {"w": weight2, "x": trainable})
        np.testing.assert_allclose(grads["w"], both["w"], atol=1e-12)
        assert both["x"].shape == x.shape

    def test_matmul_shape_error_names_op(self):
        with pytest.raises(ShapeError) as err:
            ad.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 5))))
        assert err.value.op == "matmul"
        assert (2, 3) in err.value.dims

    def test_forward_is_bitwise_repeatable(self, rng):
        x = rng.standard_normal((3, 5))
        graph = scalar_graph(lambda p: ad.gelu(ad.layer_norm(p, Tensor(np.ones(5)), Tensor(np.zeros(5)))), p=x)
        first = graph.forward()["loss"].data.copy()
        second = graph.forward()["loss"].data
        assert first.tobytes() == second.tobytes()

    def test_scatter_rejects_duplicate_indices(self):
        with pytest.raises(ShapeError):
            ad.scatter(Tensor(np.ones((2, 2))), np.array([1, 1]), 4)


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = ad.parameter([1.0, 2.0, 3.0])
        grads = ad.backward(ad.tsum(x), {"x": x})
        np.testing.assert_array_equal(grads["x"], [1.0, 1.0, 1.0])

    def test_square_gradient(self):
        x = ad.parameter([1.0, 2.0])
        grads = ad.backward(ad.tsum(x * x), {"x": x})
        np.testing.assert_allclose(grads["x"], [2.0, 4.0])

    def test_stop_gradient_blocks_flow(self):
        x = ad.parameter([1.0, 2.0])
        y = ad.parameter([3.0, -1.0])
        grads = ad.backward(ad.tsum(ad.stop_gradient(x) * y), {"x": x, "y": y})
        np.testing.assert_array_equal(grads["x"], [0.0, 0.0])
        np.testing.assert_allclose(grads["y"], [1.0, 2.0])

    def test_non_scalar_loss_raises(self):
        x = ad.parameter([1.0, 2.0])
        with pytest.raises(GraphError):
            ad.backward(x * 2.0, {"x": x})

    def test_backward_before_forward_raises(self):
        graph = scalar_graph(lambda p: ad.tsum(p), p=np.ones(3))
        with pytest.raises(GraphError):
            graph.backward("loss")

    def test_broadcast_gradient_is_reduced(self):
        a = ad.parameter(np.ones((2, 3)))
        b = ad.parameter(np.ones(3))
        grads = ad.backward(ad.tsum(a * b), {"a": a, "b": b})
        np.testing.assert_allclose(grads["b"], [2.0, 2.0, 2.0])

    def test_topk_gradient_is_one_over_k_on_selected(self):
        s = ad.parameter([[0.1, 0.9, 0.5, 0.9]])
        grads = ad.backward(ad.tsum(ad.topk_mean(s, 2)), {"s": s})
        np.testing.assert_allclose(grads["s"], [[0.0, 0.5, 0.0, 0.5]])

    def test_topk_ties_go_to_lower_index(self):
        s = ad.parameter([[0.7, 0.7, 0.7]])
        grads = ad.backward(ad.tsum(ad.topk_mean(s, 1)), {"s": s})
        np.testing.assert_allclose(grads["s"], [[1.0, 0.0, 0.0]])

    def test_topk_ignores_invalid_positions(self):
        s = Tensor([[0.1, 0.2, 5.0]])
        out = ad.topk_mean(s, 1, valid=np.array([[True, True, False]]))
        assert out.item() == pytest.approx(0.2)

    def test_topk_k_out_of_range(self):
        with pytest.raises(ValueError):
            ad.topk_mean(Tensor([[0.1, 0.2]]), 3)


# (name, fn, shapes) for the per-op finite-difference sweep
UNARY_CASES = [
    ("exp", lambda a: ad.exp(a * 0.3), (3, 4)),
    ("log", lambda a: ad.log(ad.exp(a) + 1.0), (3, 4)),
    ("sqrt", lambda a: ad.sqrt(a * a + 1.0), (3, 4)),
    ("gelu", ad.gelu, (3, 4)),
    ("sigmoid", ad.sigmoid, (3, 4)),
    ("softmax", lambda a: ad.softmax(a, axis=-1), (3, 4)),
    ("l2_normalize", ad.l2_normalize, (3, 4)),
    ("norm", ad.norm, (3, 4)),
    ("mean", lambda a: ad.mean(a, axis=0), (3, 4)),
    ("transpose", lambda a: ad.transpose(a, (1, 0)), (3, 4)),
    ("reshape", lambda a: ad.reshape(a, (4, 3)), (3, 4)),
    ("take", lambda a: ad.take(a, np.array([2, 0, 3]), axis=-1), (3, 4)),
    ("scatter", lambda a: ad.scatter(a, np.array([4, 0, 2, 5]), 6), (3, 4)),
    ("topk_mean", lambda a: ad.topk_mean(a, 2), (3, 4)),
]

BINARY_CASES = [
    ("add", lambda a, b: a + b, (3, 4), (4,)),
    ("sub", lambda a, b: a - b, (3, 4), (3, 4)),
    ("mul", lambda a, b: a * b, (3, 4), (1, 4)),
    ("div", lambda a, b: a / (b * b + 1.0), (3, 4), (3, 4)),
    ("matmul", ad.matmul, (2, 3, 4), (4, 5)),
    ("concat", lambda a, b: ad.concat([a, b], axis=-1), (3, 4), (3, 2)),
    ("cosine_similarity", ad.cosine_similarity, (3, 4), (3, 4)),
    ("conv1d", lambda a, b: ad.conv1d(a, ad.reshape(b, (3, 4, 2)), dilation=2), (2, 6, 4), (24,)),
]


class TestGradCheck:
    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("name,fn,shape", UNARY_CASES, ids=[c[0] for c in UNARY_CASES])
    def test_unary_ops(self, name, fn, shape, seed):
        x = np.random.default_rng(seed).standard_normal(shape)
        assert ad.grad_check(scalar_graph(fn, a=x), {}) < 1e-4

    @pytest.mark.parametrize("seed", range(20))
    @pytest.mark.parametrize("name,fn,sa,sb", BINARY_CASES, ids=[c[0] for c in BINARY_CASES])
    def test_binary_ops(self, name, fn, sa, sb, seed):
        rng = np.random.default_rng(seed)
        graph = scalar_graph(fn, a=rng.standard_normal(sa), b=rng.standard_normal(sb))
        assert ad.grad_check(graph, {}) < 1e-4

    @pytest.mark.parametrize("seed", range(20))
    def test_layer_norm(self, seed):
        rng = np.random.default_rng(seed)
        graph = scalar_graph(ad.layer_norm, a=rng.standard_normal((3, 5)),
                             g=rng.standard_normal(5), b=rng.standard_normal(5))
        assert ad.grad_check(graph, {}) < 1e-4

    @pytest.mark.parametrize("seed", range(20))
    def test_relu_and_clamp_away_from_kinks(self, seed):
        rng = np.random.default_rng(seed)
        x = rng.uniform(0.05, 0.45, size=(4, 3)) * rng.choice([-1.0, 1.0], size=(4, 3))
        graph = scalar_graph(lambda a: ad.relu(a) + ad.clamp(a, -0.5, 0.5), a=x)
        assert ad.grad_check(graph, {}) < 1e-4

    def test_quadratic_loss(self):
        x = np.array([0.3, -1.2, 2.0])
        graph = scalar_graph(lambda p: ad.tsum(p * p * 0.5), p=x)
        assert ad.grad_check(graph, {}, eps=1e-5) < 1e-6

    def test_zero_parameter_graph(self):
        graph = Graph(lambda inputs: {"loss": ad.tsum(inputs["x"])})
        assert ad.grad_check_report(graph, {"x": np.ones(3)}) == {}
        assert ad.grad_check(graph, {"x": np.ones(3)}) == 0.0

    def test_input_leaves_are_checked(self):
        graph = Graph(lambda inputs: {"loss": ad.tsum(ad.sigmoid(inputs["x"]))})
        x = ad.parameter(np.array([0.1, -0.4]))
        report = ad.grad_check_report(graph, {"x": x})
        assert list(report) == ["input:x"]
        assert report["input:x"] < 1e-6

    def test_fault_injection_is_detected(self, rng):
        graph = scalar_graph(ad.matmul, a=rng.standard_normal((3, 4)), b=rng.standard_normal((4, 2)))
        with ad.fault_injection("matmul", 1.5):
            assert ad.grad_check(graph, {}) > 1e-2

    def test_eps_out_of_range(self):
        graph = scalar_graph(ad.tsum, a=np.ones(2))
        with pytest.raises(ValueError):
            ad.grad_check(graph, {}, eps=1e-2)

    def test_requires_64_bit(self):
        graph = scalar_graph(ad.tsum, a=np.ones(2))
        with ad.default_dtype("float32"):
            with pytest.raises(GraphError):
                ad.grad_check(graph, {})

    def test_selection_constants_are_replayed(self, rng):
        # top-K selection flips under perturbation when entries are nearly tied
        x = np.array([[0.5, 0.5 + 1e-9, 0.1]])
        graph = scalar_graph(lambda a: ad.topk_mean(a, 1), a=x)
        assert ad.grad_check(graph, {}) < 1e-6


class TestNoGrad:
    def test_no_nodes_recorded(self):
        x = ad.parameter([1.0, 2.0])
        with ad.no_grad():
            y = ad.tsum(x * x)
        assert y.node is None
        assert not y.requires_grad


class TestAdam:
    def test_zero_gradient_is_fixed_point(self):
        p = ad.parameter(np.array([1.0, -2.0]))
        state = AdamState(lr=0.1, weight_decay=0.0)
        ad.adam_step(state, {"p": p}, {"p": np.zeros(2)})
        np.testing.assert_array_equal(p.data, [1.0, -2.0])
        assert state.step == 1

    def test_first_step_moves_by_lr_against_gradient(self):
        p = ad.parameter(np.array([1.0, -2.0, 0.5]))
        state = AdamState(lr=1e-3, weight_decay=0.0)
        ad.adam_step(state, {"p": p}, {"p": np.array([0.3, -4.0, 1e-2])})
        delta = p.data - np.array([1.0, -2.0, 0.5])
        assert np.all(np.sign(delta) == [-1.0, 1.0, -1.0])
        assert np.all(np.abs(delta) <= 1e-3 * (1 + 1e-6))

    def test_same_state_copy_is_deterministic(self):
        state = AdamState(lr=1e-2)
        state.step, state.m["p"], state.v["p"] = 3, np.array([0.1]), np.array([0.02])
        outputs = []
        for _ in range(2):
            p = ad.parameter(np.array([0.7]))
            ad.adam_step(state.copy(), {"p": p}, {"p": np.array([0.4])})
            outputs.append(p.data.copy())
        np.testing.assert_array_equal(outputs[0], outputs[1])

    def test_decoupled_weight_decay(self):
        p = ad.parameter(np.array([2.0]))
        ad.adam_step(AdamState(lr=0.1, weight_decay=0.5), {"p": p}, {"p": np.zeros(1)})
        np.testing.assert_allclose(p.data, [2.0 - 0.1 * 0.5 * 2.0])

    def test_shape_mismatch(self):
        p = ad.parameter(np.ones(3))
        with pytest.raises(ShapeError):
            ad.adam_step(AdamState(), {"p": p}, {"p": np.ones(2)})
