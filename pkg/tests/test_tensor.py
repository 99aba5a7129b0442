"""Tensor-engine oracles: trivial identities, independent reimplementations,
and finite-difference gradient checks for every op."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from crossmodal import tensor as T
from crossmodal.errors import ContractError, DimensionError, NumericsError
from crossmodal.tensor import Tensor

from conftest import fd_gradcheck

# high-precision erf oracle value for x * Phi(x) at x = 1 (mpmath, 40 digits)
GELU_AT_ONE = 0.8413447460685429


class TestMatmul:
    def test_identity(self):
        out = T.matmul(Tensor([[1, 0], [0, 1]]), Tensor([[3, 4], [5, 6]]))
        assert np.array_equal(out.data, [[3, 4], [5, 6]])

    def test_scalar_case(self):
        assert T.matmul(Tensor([[2]]), Tensor([[3]])).data.tolist() == [[6]]

    def test_against_triple_loop(self, rng):
        a = rng.uniform(-2, 2, (3, 4))
        b = rng.uniform(-2, 2, (4, 2))
        want = np.zeros((3, 2))
        for i in range(3):
            for j in range(2):
                for k in range(4):
                    want[i, j] += a[i, k] * b[k, j]
        got = T.matmul(Tensor(a), Tensor(b)).data
        assert np.max(np.abs(got - want)) <= 1e-12

    def test_shape_mismatch_names_both_shapes(self):
        with pytest.raises(DimensionError) as err:
            T.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 2))))
        assert "(2, 3)" in str(err.value) and "(4, 2)" in str(err.value)

    def test_batched(self, rng):
        a = rng.standard_normal((5, 2, 3))
        b = rng.standard_normal((5, 3, 4))
        got = T.matmul(Tensor(a), Tensor(b)).data
        assert np.allclose(got, a @ b, atol=1e-15)


class TestLayerNorm:
    def test_constant_vector_normalizes_to_zero(self):
        out = T.layer_norm(Tensor([1.0, 1.0, 1.0]), Tensor([1.0, 1.0, 1.0]),
                           Tensor([0.0, 0.0, 0.0]))
        assert np.max(np.abs(out.data)) < 1e-3   # eps keeps it finite, near zero

    def test_already_normalized_identity(self):
        out = T.layer_norm(Tensor([-1.0, 1.0]), Tensor([1.0, 1.0]),
                           Tensor([0.0, 0.0]), eps=1e-12)
        assert np.allclose(out.data, [-1.0, 1.0], atol=1e-9)

    def test_mean_var_oracle(self, rng):
        x = rng.uniform(-2, 2, 8)
        out = T.layer_norm(Tensor(x), Tensor(np.ones(8)), Tensor(np.zeros(8)),
                           eps=1e-12).data
        assert abs(out.mean()) < 1e-9
        assert abs(out.var() - 1.0) < 1e-6

    def test_dim_mismatch(self):
        with pytest.raises(DimensionError):
            T.layer_norm(Tensor(np.ones((2, 4))), Tensor(np.ones(3)),
                         Tensor(np.zeros(3)))

    @given(st.integers(min_value=-50, max_value=50))
    @settings(max_examples=30, deadline=None)
    def test_shift_invariance(self, shift):
        x = np.linspace(-1.7, 2.2, 6)
        gain, bias = Tensor(np.ones(6)), Tensor(np.zeros(6))
        base = T.layer_norm(Tensor(x), gain, bias).data
        moved = T.layer_norm(Tensor(x + shift), gain, bias).data
        assert np.max(np.abs(base - moved)) < 1e-9


class TestGelu:
    def test_zero(self):
        assert T.gelu(Tensor([0.0])).data[0] == 0.0

    @given(st.floats(min_value=-6, max_value=6, allow_nan=False))
    @settings(max_examples=50, deadline=None)
    def test_odd_part_identity(self, x):
        # gelu(x) - gelu(-x) = x, from Phi(x) + Phi(-x) = 1
        g = T.gelu(Tensor([x, -x])).data
        assert abs((g[0] - g[1]) - x) < 1e-12

    def test_against_high_precision_erf(self):
        assert abs(T.gelu(Tensor([1.0])).data[0] - GELU_AT_ONE) < 1e-10


class TestSoftmaxAttention:
    def test_single_row_returns_v(self, rng):
        q = Tensor(rng.standard_normal((1, 4)))
        k = Tensor(rng.standard_normal((1, 4)))
        v = Tensor(rng.standard_normal((1, 3)))
        out = T.softmax_attention(q, k, v)
        assert np.allclose(out.data, v.data, atol=1e-12)

    def test_identical_keys_average_v(self, rng):
        q = Tensor(rng.standard_normal((3, 4)))
        k = Tensor(np.tile(rng.standard_normal(4), (5, 1)))
        v = Tensor(rng.standard_normal((5, 2)))
        out = T.softmax_attention(q, k, v)
        want = np.tile(v.data.mean(axis=0), (3, 1))
        assert np.allclose(out.data, want, atol=1e-12)

    def test_explicit_steps_oracle(self, rng):
        q = rng.uniform(-2, 2, (4, 8))
        k = rng.uniform(-2, 2, (4, 8))
        v = rng.uniform(-2, 2, (4, 8))
        logits = q @ k.T / np.sqrt(8)
        e = np.exp(logits)
        w = e / e.sum(axis=1, keepdims=True)
        want = w @ v
        got = T.softmax_attention(Tensor(q), Tensor(k), Tensor(v)).data
        assert np.max(np.abs(got - want)) < 1e-10

    def test_dimension_mismatches(self):
        with pytest.raises(DimensionError):
            T.softmax_attention(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 4))),
                                Tensor(np.ones((2, 2))))
        with pytest.raises(DimensionError):
            T.softmax_attention(Tensor(np.ones((2, 3))), Tensor(np.ones((4, 3))),
                                Tensor(np.ones((5, 2))))

    @given(st.lists(st.floats(min_value=-50, max_value=50), min_size=2, max_size=9))
    @settings(max_examples=60, deadline=None)
    def test_softmax_rows_sum_to_one(self, logits):
        row = T.softmax(Tensor([logits])).data
        assert abs(row.sum() - 1.0) <= 1e-9


class TestBackward:
    def test_sum_gives_ones(self, rng):
        w = T.parameter(rng.standard_normal((3, 5)))
        T.backward(T.sum_all(w))
        assert np.array_equal(w.grad, np.ones((3, 5)))

    def test_quadratic(self, rng):
        w = T.parameter(rng.standard_normal(7))
        T.backward(T.sum_all(T.mul(w, w)))
        assert np.allclose(w.grad, 2 * w.data, atol=1e-12)

    def test_non_scalar_loss_rejected(self):
        w = T.parameter(np.ones(3))
        with pytest.raises(ContractError):
            T.backward(T.mul(w, w))

    def test_unused_parameters_get_zero(self, rng):
        used = T.parameter(rng.standard_normal(4))
        unused = T.parameter(rng.standard_normal(4))
        T.backward(T.sum_all(used), [used, unused])
        assert np.array_equal(unused.grad, np.zeros(4))

    def test_reused_tensor_accumulates(self, rng):
        w = T.parameter(rng.standard_normal(5))
        loss = T.sum_all(T.add(T.mul(w, w), T.scale(w, 3.0)))
        T.backward(loss)
        assert np.allclose(w.grad, 2 * w.data + 3.0, atol=1e-12)

    def test_tiny_transformer_block_every_parameter(self, rng):
        # width 8, 2 heads: finite differences over all parameters
        from crossmodal.blocks import TransformerBlock
        block = TransformerBlock(np.random.default_rng(3), width=8, heads=2,
                                 mlp_ratio=2)
        x = rng.uniform(-2, 2, (5, 8))
        params = list(block.named_params().values())

        def loss():
            out = block(Tensor(x))
            return T.mean_all(T.mul(out, out))

        fd_gradcheck(loss, params)


class TestOpGradients:
    """Finite differences for each primitive, randomized inputs in [-2, 2]."""

    def test_add_sub_mul_scale(self, rng):
        a = T.parameter(rng.uniform(-2, 2, (3, 4)))
        b = T.parameter(rng.uniform(-2, 2, (3, 4)))
        fd_gradcheck(lambda: T.sum_all(T.mul(T.add(a, b), T.sub(a, T.scale(b, 0.7)))),
                     [a, b])

    def test_add_trailing_broadcast(self, rng):
        a = T.parameter(rng.uniform(-2, 2, (3, 4)))
        bias = T.parameter(rng.uniform(-2, 2, 4))
        fd_gradcheck(lambda: T.sum_all(T.mul(T.add(a, bias), T.add(a, bias))),
                     [a, bias])

    def test_matmul_grad(self, rng):
        a = T.parameter(rng.uniform(-2, 2, (3, 4)))
        b = T.parameter(rng.uniform(-2, 2, (4, 2)))
        fd_gradcheck(lambda: T.sum_all(T.mul(T.matmul(a, b), T.matmul(a, b))), [a, b])

    def test_batched_matmul_grad(self, rng):
        a = T.parameter(rng.uniform(-2, 2, (2, 3, 4)))
        b = T.parameter(rng.uniform(-2, 2, (2, 4, 3)))
        fd_gradcheck(lambda: T.sum_all(T.matmul(a, b)), [a, b])

    def test_gelu_grad(self, rng):
        a = T.parameter(rng.uniform(-2, 2, (4, 5)))
        fd_gradcheck(lambda: T.sum_all(T.mul(T.gelu(a), T.gelu(a))), [a])

    def test_softmax_grad(self, rng):
        a = T.parameter(rng.uniform(-2, 2, (3, 6)))
        w = rng.uniform(-2, 2, (3, 6))
        fd_gradcheck(lambda: T.sum_all(T.mul(T.softmax(a), Tensor(w))), [a])

    def test_layer_norm_grad(self, rng):
        x = T.parameter(rng.uniform(-2, 2, (4, 6)))
        g = T.parameter(rng.uniform(0.5, 2, 6))
        b = T.parameter(rng.uniform(-1, 1, 6))
        w = rng.uniform(-2, 2, (4, 6))
        fd_gradcheck(lambda: T.sum_all(T.mul(T.layer_norm(x, g, b), Tensor(w))),
                     [x, g, b])

    def test_attention_grad(self, rng):
        q = T.parameter(rng.uniform(-2, 2, (4, 3)))
        k = T.parameter(rng.uniform(-2, 2, (4, 3)))
        v = T.parameter(rng.uniform(-2, 2, (4, 5)))
        fd_gradcheck(lambda: T.sum_all(T.softmax_attention(q, k, v)), [q, k, v])

    def test_take_concat_tile_swap_reshape_grads(self, rng):
        table = T.parameter(rng.uniform(-2, 2, (6, 3)))
        vec = T.parameter(rng.uniform(-2, 2, 3))
        idx = np.array([4, 0, 0, 2])

        def loss():
            rows = T.take_rows(table, idx)
            tiles = T.tile_rows(vec, 4)
            both = T.concat_rows([rows, tiles])          # (8, 3)
            out = T.swap_axes(T.reshape(both, (2, 4, 3)), 0, 1)
            return T.mean_all(T.mul(out, out))

        fd_gradcheck(loss, [table, vec])

    def test_cross_entropy_grad(self, rng):
        logits = T.parameter(rng.uniform(-2, 2, (5, 4)))
        targets = rng.integers(4, size=5)
        fd_gradcheck(lambda: T.cross_entropy_logits(logits, targets), [logits])

    def test_mean_sum_grad(self, rng):
        a = T.parameter(rng.uniform(-2, 2, (3, 3)))
        fd_gradcheck(lambda: T.add(T.mean_all(T.mul(a, a)), T.sum_all(a)), [a])


class TestInvariants:
    def test_determinism_bitwise(self):
        def run():
            rng = np.random.default_rng(99)
            a = T.parameter(rng.standard_normal((6, 6)))
            b = T.parameter(rng.standard_normal((6, 6)))
            out = T.softmax_attention(a, b, T.gelu(T.matmul(a, b)))
            loss = T.mean_all(T.mul(out, out))
            T.backward(loss, [a, b])
            return loss.data.tobytes(), a.grad.tobytes(), b.grad.tobytes()

        assert run() == run()

    @pytest.mark.filterwarnings("ignore:overflow")
    def test_nonfinite_is_reported_not_silent(self):
        big = Tensor([1e308])
        with pytest.raises(NumericsError):
            T.mul(big, big)
        with pytest.raises(NumericsError):
            Tensor([np.nan])

    def test_toposort_orders_inputs_first(self, rng):
        a = T.parameter(rng.standard_normal((2, 2)))
        b = T.matmul(a, a)
        c = T.add(b, a)
        loss = T.sum_all(c)
        order = T.toposort(loss)
        pos = {id(t): i for i, t in enumerate(order)}
        for t in order:
            for inp in t.node.inputs:
                if inp.node is not None:
                    assert pos[id(inp)] < pos[id(t)]

    def test_item_and_contract_errors(self):
        with pytest.raises(ContractError):
            Tensor(np.ones((2, 2))).item()
        with pytest.raises(DimensionError):
            T.mul(Tensor(np.ones(3)), Tensor(np.ones(4)))
        with pytest.raises(ContractError):
            T.take_rows(Tensor(np.ones((3, 2))), np.array([3]))
