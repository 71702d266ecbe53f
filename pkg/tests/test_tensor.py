from __future__ import annotations

import numpy as np
import pytest

from e2eie.tensor import (
    CROSS_ENTROPY_FLOOR,
    DimensionError,
    SoftmaxError,
    Tape,
    TapeError,
    Tensor,
    add,
    add_n,
    backward,
    concat,
    cross_entropy,
    default_dtype,
    dropout,
    elementwise,
    embedding_lookup,
    get_default_dtype,
    gradient_check,
    matmul,
    mul,
    relative_error,
    scale,
    sigmoid,
    slice_,
    softmax,
    stack,
    sub,
    sum_,
    tanh,
    weighted_onehot_sum,
    weighted_sum,
)


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def _param(rng: np.random.Generator, *shape: int) -> Tensor:
    return Tensor(rng.normal(size=shape), requires_grad=True)


class TestTensor:
    def test_constructor(self):
        t = Tensor([[1, 2], [3, 4]])
        assert t.shape == (2, 2)
        assert t.ndim == 2
        assert t.size == 4
        assert t.dtype is np.float32
        assert t.grad is None
        assert not t.requires_grad

    def test_default_dtype(self):
        assert get_default_dtype() is np.float32
        with default_dtype(np.float64):
            assert Tensor([1.0]).dtype is np.float64
        assert Tensor([1.0]).dtype is np.float32

    def test_item(self):
        assert Tensor([2.5]).item() == 2.5
        with pytest.raises(ValueError):
            Tensor([1.0, 2.0]).item()

    def test_operators(self):
        a, b = Tensor([1.0, 2.0]), Tensor([3.0, 5.0])
        np.testing.assert_allclose((a + b).data, [4.0, 7.0])
        np.testing.assert_allclose((a - b).data, [-2.0, -3.0])
        np.testing.assert_allclose((a * b).data, [3.0, 10.0])
        assert (a @ b).item() == pytest.approx(13.0)


class TestTape:
    def test_no_recording_outside_tape(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        y = sum_(mul(x, x))
        with pytest.raises(TapeError):
            backward(y)

    def test_no_recording_without_grad_inputs(self):
        with Tape() as tape:
            sum_(Tensor([1.0, 2.0]))
        assert len(tape) == 0

    def test_backward(self):
        x = Tensor([1.0, 2.0, 3.0], requires_grad=True)
        with Tape():
            y = sum_(mul(x, x))
        backward(y)
        np.testing.assert_allclose(x.grad, [2.0, 4.0, 6.0])

    def test_gradients_accumulate(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        for _ in range(2):
            with Tape():
                y = sum_(scale(x, 3.0))
            backward(y)
        np.testing.assert_allclose(x.grad, [6.0, 6.0])

        x.zero_grad()
        assert x.grad is None

    def test_backward_twice(self):
        x = Tensor([1.0], requires_grad=True)
        with Tape() as tape:
            y = sum_(x)
        backward(y)
        assert tape.consumed
        with pytest.raises(TapeError):
            backward(y)

    def test_backward_non_scalar(self):
        x = Tensor([1.0, 2.0], requires_grad=True)
        with Tape():
            y = scale(x, 2.0)
        with pytest.raises(TapeError):
            backward(y)

    def test_shared_input(self):
        # 同じテンソルを2回使った場合、勾配は両方の経路の和
        x = Tensor([3.0], requires_grad=True)
        with Tape():
            y = sum_(add(x, mul(x, x)))
        backward(y)
        np.testing.assert_allclose(x.grad, [7.0])


class TestShapes:
    def test_add_broadcast_row(self):
        out = add(Tensor(np.ones((2, 3))), Tensor([1.0, 2.0, 3.0]))
        np.testing.assert_allclose(out.data, [[2, 3, 4], [2, 3, 4]])

    @pytest.mark.parametrize(
        "op, a, b",
        [
            (add, (2, 3), (3, 2)),
            (sub, (2,), (3,)),
            (mul, (2, 2), (2,)),
            (matmul, (2, 3), (2, 3)),
            (matmul, (3,), (4,)),
        ],
    )
    def test_mismatch(self, op, a, b):
        with pytest.raises(DimensionError) as e:
            op(Tensor(np.zeros(a)), Tensor(np.zeros(b)))
        assert e.value.shapes == (a, b)
        assert str(a) in str(e.value) and str(b) in str(e.value)

    def test_matmul_forms(self):
        m = Tensor(np.arange(6.0).reshape(2, 3))
        assert matmul(m, Tensor(np.ones((3, 4)))).shape == (2, 4)
        assert matmul(Tensor(np.ones(2)), m).shape == (3,)
        assert matmul(m, Tensor(np.ones(3))).shape == (2,)
        assert matmul(Tensor(np.ones(3)), Tensor(np.ones(3))).shape == ()

    def test_concat_stack_slice(self):
        a, b = Tensor([1.0, 2.0]), Tensor([3.0])
        np.testing.assert_allclose(concat([a, b]).data, [1.0, 2.0, 3.0])
        assert stack([a, a, a]).shape == (3, 2)
        np.testing.assert_allclose(slice_(concat([a, b]), 1, 3).data, [2.0, 3.0])

        with pytest.raises(DimensionError):
            stack([a, b])
        with pytest.raises(DimensionError):
            slice_(a, 1, 3)

    def test_elementwise_dispatch(self):
        x = Tensor([0.0])
        assert elementwise("sigmoid", x).item() == pytest.approx(0.5)
        assert elementwise("tanh", x).item() == pytest.approx(0.0)
        with pytest.raises(ValueError):
            elementwise("relu", x)


class TestSoftmax:
    def test_sums_to_one(self, rng):
        for _ in range(100):
            y = softmax(Tensor(rng.normal(scale=20.0, size=int(rng.integers(1, 20)))))
            assert y.data.sum() == pytest.approx(1.0, abs=1e-6)

    def test_large_values(self):
        y = softmax(Tensor([1000.0, 1000.0]))
        np.testing.assert_allclose(y.data, [0.5, 0.5])

    def test_masked_positions_are_zero(self):
        y = softmax(Tensor([5.0, 1.0, 2.0]), mask=[False, True, True])
        assert y.data[0] == 0.0
        assert y.data.sum() == pytest.approx(1.0)

    def test_all_masked(self):
        with pytest.raises(SoftmaxError):
            softmax(Tensor([1.0, 2.0]), mask=[False, False])

    def test_mask_shape(self):
        with pytest.raises(DimensionError):
            softmax(Tensor([1.0, 2.0]), mask=[True])


class TestCrossEntropy:
    def test_value(self):
        loss = cross_entropy(Tensor([0.25, 0.75]), 1)
        assert loss.item() == pytest.approx(-np.log(0.75 + CROSS_ENTROPY_FLOOR), rel=1e-5)

    def test_zero_probability_is_finite(self):
        assert np.isfinite(cross_entropy(Tensor([0.0, 1.0]), 0).item())

    def test_invalid_target(self):
        with pytest.raises(IndexError):
            cross_entropy(Tensor([0.5, 0.5]), 2)

    def test_not_a_distribution(self):
        with pytest.raises(ValueError):
            cross_entropy(Tensor([0.5, 0.7]), 0)


class TestEmbedding:
    def test_lookup(self):
        table = Tensor(np.arange(6.0).reshape(3, 2))
        np.testing.assert_allclose(embedding_lookup(table, 1).data, [2.0, 3.0])
        assert embedding_lookup(table, [0, 2, 2]).shape == (3, 2)

    def test_repeated_rows_accumulate(self):
        table = Tensor(np.zeros((3, 2)), requires_grad=True)
        with Tape():
            y = sum_(embedding_lookup(table, [2, 0, 2]))
        backward(y)
        np.testing.assert_allclose(table.grad, [[1, 1], [0, 0], [2, 2]])

    def test_out_of_range(self):
        with pytest.raises(IndexError):
            embedding_lookup(Tensor(np.zeros((3, 2))), 3)


def test_weighted_onehot_sum_merges_repeated_indices():
    out = weighted_onehot_sum(Tensor([0.2, 0.5, 0.3]), [4, 1, 4], 5)
    np.testing.assert_allclose(out.data, [0.0, 0.5, 0.0, 0.0, 0.5], atol=1e-7)


def test_weighted_onehot_sum_matches_dense():
    weights = Tensor([0.1, 0.6, 0.3])
    indices = [2, 0, 2]
    dense = Tensor(np.eye(4)[indices])
    np.testing.assert_allclose(weighted_onehot_sum(weights, indices, 4).data, weighted_sum(weights, dense).data)


def test_dropout_applies_mask():
    x = Tensor([1.0, 2.0], requires_grad=True)
    mask = Tensor([0.0, 2.0])
    with Tape():
        y = sum_(dropout(x, mask))
    backward(y)
    assert y.item() == pytest.approx(4.0)
    np.testing.assert_allclose(x.grad, [0.0, 2.0])


def test_add_n():
    total = add_n([Tensor([1.0]), Tensor([2.0]), Tensor([3.0])])
    assert total.item() == pytest.approx(6.0)
    with pytest.raises(ValueError):
        add_n([])


def test_relative_error_floor():
    assert relative_error(np.array([0.0]), np.array([1e-9])) < 1e-3
    assert relative_error(np.array([1.0]), np.array([1.1])) == pytest.approx(0.1 / 1.1)


class TestGradientCheck:
    def test_composite(self, rng):
        with default_dtype(np.float64):
            w = _param(rng, 3, 4)
            b = _param(rng, 4)
            x = Tensor(rng.normal(size=3))
            table = _param(rng, 5, 4)

            def loss_fn():
                h = tanh(add(matmul(x, w), b))
                g = sigmoid(mul(h, embedding_lookup(table, 2)))
                p = softmax(concat([slice_(g, 0, 2), h]), mask=[True, True, False, True, True, True])
                q = weighted_onehot_sum(p, [0, 1, 1, 2, 3, 4], 5)
                return add(cross_entropy(q, 1), sum_(sub(h, g)))

            errors = gradient_check(loss_fn, {"w": w, "b": b, "table": table})

        assert set(errors) == {"w", "b", "table"}
        assert max(errors.values()) < 1e-4

    def test_matmul_matrix(self, rng):
        with default_dtype(np.float64):
            a = _param(rng, 2, 3)
            b = _param(rng, 3, 2)
            v = _param(rng, 2)
            errors = gradient_check(lambda: sum_(matmul(matmul(a, b), v)), {"a": a, "b": b, "v": v})
        assert max(errors.values()) < 1e-4

    def test_weighted_sum_and_stack(self, rng):
        with default_dtype(np.float64):
            rows = [_param(rng, 3) for _ in range(4)]
            logits = _param(rng, 4)
            errors = gradient_check(
                lambda: sum_(weighted_sum(softmax(logits), stack(rows))),
                {"logits": logits, **{f"row{i}": row for i, row in enumerate(rows)}},
            )
        assert max(errors.values()) < 1e-4
