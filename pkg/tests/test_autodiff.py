"""Tape engine tests: op semantics, FD gradient checks, Adam, custom ops."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from neuralmesh import autodiff as ad
from helpers import check_gradients


def rand(rng, *shape):
    return ad.Tensor(rng.uniform(-2, 2, shape), requires_grad=True)


@pytest.fixture(autouse=True)
def fresh_tape():
    ad.get_tape().clear()
    yield
    ad.get_tape().clear()


class TestForwardSemantics:
    def test_relu(self):
        out = ad.relu(ad.Tensor([-1.0, 0.0, 2.0]))
        np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])

    def test_sigmoid_at_zero(self):
        assert ad.sigmoid(ad.Tensor([0.0])).data[0] == 0.5

    def test_matmul_identity(self):
        x = np.arange(9.0).reshape(3, 3)
        out = ad.matmul(ad.Tensor(np.eye(3)), ad.Tensor(x))
        np.testing.assert_array_equal(out.data, x)

    def test_matmul_shape_error_names_shapes(self):
        with pytest.raises(ad.AutodiffError, match=r"matmul.*\(3, 4\).*\(5, 2\)"):
            ad.matmul(ad.Tensor(np.zeros((3, 4))), ad.Tensor(np.zeros((5, 2))))

    def test_add_shape_error(self):
        with pytest.raises(ad.AutodiffError, match="add"):
            ad.add(ad.Tensor(np.zeros(3)), ad.Tensor(np.zeros(4)))

    def test_concat_and_gather(self):
        a = ad.Tensor([[1.0, 2.0]])
        b = ad.Tensor([[3.0]])
        cat = ad.concat([a, b], axis=-1)
        np.testing.assert_array_equal(cat.data, [[1.0, 2.0, 3.0]])
        g = ad.gather(cat, [2, 0], axis=-1)
        np.testing.assert_array_equal(g.data, [[3.0, 1.0]])

    def test_gather_out_of_range(self):
        with pytest.raises(ad.AutodiffError, match="gather"):
            ad.gather(ad.Tensor(np.zeros((2, 3))), [2], axis=0)

    def test_min_zero(self):
        out = ad.min_zero(ad.Tensor([-0.5, 0.25]))
        np.testing.assert_array_equal(out.data, [-0.5, 0.0])

    def test_l2_normalize_rows(self):
        out = ad.l2_normalize(ad.Tensor([[3.0, 4.0]]))
        np.testing.assert_allclose(out.data, [[0.6, 0.8]], atol=1e-12)

    def test_cross3_matches_numpy(self):
        rng = np.random.default_rng(0)
        a, b = rng.normal(size=(2, 5, 3))
        out = ad.cross3(ad.Tensor(a), ad.Tensor(b))
        np.testing.assert_allclose(out.data, np.cross(a, b), atol=1e-12)

    def test_clamp01(self):
        out = ad.clamp01(ad.Tensor([-0.5, 0.3, 1.7]))
        np.testing.assert_allclose(out.data, [0.0, 0.3, 1.0])


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = ad.Tensor([1.0, 2.0, 3.0, 4.0], requires_grad=True)
        ad.backward(ad.tsum(x))
        np.testing.assert_array_equal(x.grad, np.ones(4))

    def test_power_rule(self):
        x = ad.Tensor([3.0], requires_grad=True)
        ad.backward(ad.tsum(ad.multiply(x, x)))
        np.testing.assert_allclose(x.grad, [6.0])

    def test_non_scalar_loss_rejected(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        y = ad.scale(x, 2.0)
        with pytest.raises(ad.AutodiffError, match="scalar"):
            ad.backward(y)

    def test_accumulation_across_uses(self):
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        y = ad.add(ad.scale(x, 3.0), ad.scale(x, 2.0))
        ad.backward(ad.tsum(y))
        np.testing.assert_allclose(x.grad, [5.0, 5.0])

    def test_backward_twice_is_error(self):
        x = ad.Tensor([1.0], requires_grad=True)
        loss = ad.tsum(ad.square(x))
        ad.backward(loss)
        with pytest.raises(ad.AutodiffError, match="tape"):
            ad.backward(loss)

    def test_no_grad_suppresses_recording(self):
        x = ad.Tensor([1.0], requires_grad=True)
        with ad.no_grad():
            y = ad.square(x)
        assert not y.requires_grad
        assert len(ad.get_tape()) == 0


FD_CASES = {
    "matmul": lambda rng: (
        [rand(rng, 3, 4), rand(rng, 4, 2)],
        lambda a, b: ad.tsum(ad.matmul(a, b)),
    ),
    "add": lambda rng: ([rand(rng, 3, 2), rand(rng, 3, 2)], lambda a, b: ad.tsum(ad.add(a, b))),
    "add_broadcast": lambda rng: (
        [rand(rng, 3, 2), rand(rng, 2)],
        lambda a, b: ad.tsum(ad.square(ad.add(a, b))),
    ),
    "subtract": lambda rng: (
        [rand(rng, 4), rand(rng, 4)],
        lambda a, b: ad.tsum(ad.square(ad.subtract(a, b))),
    ),
    "multiply": lambda rng: (
        [rand(rng, 3, 2), rand(rng, 3, 2)],
        lambda a, b: ad.tsum(ad.multiply(a, b)),
    ),
    "multiply_broadcast": lambda rng: (
        [rand(rng, 5, 1), rand(rng, 5, 3)],
        lambda a, b: ad.tsum(ad.multiply(a, b)),
    ),
    "scale": lambda rng: ([rand(rng, 4)], lambda a: ad.tsum(ad.scale(a, -1.7))),
    "relu": lambda rng: ([rand(rng, 20)], lambda a: ad.tsum(ad.relu(a))),
    "sigmoid": lambda rng: ([rand(rng, 6)], lambda a: ad.tsum(ad.sigmoid(a))),
    "tanh": lambda rng: ([rand(rng, 6)], lambda a: ad.tsum(ad.tanh(a))),
    "square": lambda rng: ([rand(rng, 6)], lambda a: ad.tsum(ad.square(a))),
    "absolute": lambda rng: ([rand(rng, 12)], lambda a: ad.tsum(ad.absolute(a))),
    "min_zero": lambda rng: ([rand(rng, 12)], lambda a: ad.tsum(ad.square(ad.min_zero(a)))),
    "sum": lambda rng: ([rand(rng, 7)], lambda a: ad.tsum(a)),
    "mean": lambda rng: ([rand(rng, 5, 2)], lambda a: ad.tmean(ad.square(a))),
    "concat": lambda rng: (
        [rand(rng, 3, 2), rand(rng, 3, 3)],
        lambda a, b: ad.tsum(ad.square(ad.concat([a, b], axis=-1))),
    ),
    "gather_rows": lambda rng: (
        [rand(rng, 6, 3)],
        lambda a: ad.tsum(ad.square(ad.gather(a, [0, 2, 2, 5]))),
    ),
    "gather_cols": lambda rng: (
        [rand(rng, 4, 3)],
        lambda a: ad.tsum(ad.square(ad.gather(a, [1, 1, 0], axis=-1))),
    ),
    "scatter_add": lambda rng: (
        [rand(rng, 6, 2)],
        lambda a: ad.tsum(ad.square(ad.scatter_add(a, [0, 3, 3, 1, 0, 2], 4))),
    ),
    "sum_groups": lambda rng: (
        [rand(rng, 8, 2)],
        lambda a: ad.tsum(ad.square(ad.sum_groups(a, 4))),
    ),
    "l2_normalize": lambda rng: ([rand(rng, 4, 3)], lambda a: ad.tsum(ad.l2_normalize(a))),
    "dot": lambda rng: (
        [rand(rng, 5, 3), rand(rng, 5, 3)],
        lambda a, b: ad.tsum(ad.square(ad.dot(a, b))),
    ),
    "cross3": lambda rng: (
        [rand(rng, 5, 3), rand(rng, 5, 3)],
        lambda a, b: ad.tsum(ad.square(ad.cross3(a, b))),
    ),
}


@pytest.mark.parametrize("name", sorted(FD_CASES))
def test_gradient_matches_finite_differences(name):
    rng = np.random.default_rng(hash(name) % 2**32)
    tensors, fn = FD_CASES[name](rng)
    if name in ("relu", "absolute", "min_zero"):
        # keep probes away from the kink at zero
        for t in tensors:
            t.data[np.abs(t.data) < 0.05] += 0.1
    check_gradients(lambda: fn(*tensors), tensors)


class TestCustomOps:
    def test_identity_passthrough(self):
        op = ad.register_custom_op(
            lambda x: (x.copy(), None),
            lambda ctx, g: (g,),
            name="identity",
        )
        x = ad.Tensor([1.0, -2.0], requires_grad=True)
        ad.backward(ad.tsum(ad.square(op(x))))
        np.testing.assert_allclose(x.grad, 2.0 * x.data)

    def test_zero_backward_blocks_upstream(self):
        op = ad.register_custom_op(
            lambda x: (x * 2.0, x.shape),
            lambda ctx, g: (np.zeros(ctx),),
            name="blocker",
        )
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        ad.backward(ad.tsum(op(x)))
        np.testing.assert_array_equal(x.grad, np.zeros(2))

    def test_shape_inconsistent_backward_rejected(self):
        op = ad.register_custom_op(
            lambda x: (x.copy(), None),
            lambda ctx, g: (np.zeros(99),),
            name="badshape",
        )
        x = ad.Tensor([1.0, 2.0], requires_grad=True)
        y = op(x)
        with pytest.raises(ad.AutodiffError, match="badshape"):
            ad.backward(ad.tsum(y))

    def test_multi_output_custom_op(self):
        op = ad.register_custom_op(
            lambda x: ((x * 2.0, x * 3.0), None),
            lambda ctx, g1, g2: (2.0 * g1 + 3.0 * g2,),
            name="fanout",
        )
        x = ad.Tensor([1.0, 1.0], requires_grad=True)
        a, b = op(x)
        ad.backward(ad.add(ad.tsum(a), ad.tsum(b)))
        np.testing.assert_allclose(x.grad, [5.0, 5.0])


class TestAdam:
    def test_first_step_magnitude(self):
        p = ad.Tensor([0.5], requires_grad=True)
        p.grad = np.ones(1)
        state = ad.AdamState()
        ad.adam_step([p], state, lr=1e-3)
        # bias-corrected m/sqrt(v) is exactly 1 for a constant gradient
        assert abs((0.5 - p.data[0]) - 1e-3 / (1 + 1e-8)) < 1e-12
        assert p.grad is None
        assert state.step == 1

    def test_zero_grad_keeps_param(self):
        p = ad.Tensor([1.0, 2.0], requires_grad=True)
        p.grad = np.zeros(2)
        state = ad.AdamState()
        ad.adam_step([p], state, lr=0.1)
        np.testing.assert_array_equal(p.data, [1.0, 2.0])
        assert state.step == 1

    def test_missing_grad_rejected(self):
        p = ad.Tensor([1.0], requires_grad=True)
        with pytest.raises(ad.AutodiffError, match="gradient"):
            ad.adam_step([p], ad.AdamState(), lr=0.1)

    def test_deterministic_runs(self):
        def run():
            rng = np.random.default_rng(42)
            p = ad.Tensor(rng.normal(size=(4, 3)), requires_grad=True)
            state = ad.AdamState()
            for _ in range(25):
                loss = ad.tsum(ad.square(ad.subtract(p, ad.const(np.ones((4, 3))))))
                ad.backward(loss)
                ad.adam_step([p], state, lr=1e-2)
            return p.data.copy()

        a, b = run(), run()
        assert np.array_equal(a, b)


@settings(max_examples=30, deadline=None)
@given(
    data=st.lists(st.floats(-2, 2, allow_nan=False), min_size=1, max_size=16),
    uses=st.integers(min_value=1, max_value=4),
)
def test_accumulation_property(data, uses):
    """Using a tensor k times scales the sum-gradient by k."""
    ad.get_tape().clear()
    x = ad.Tensor(np.asarray(data), requires_grad=True)
    total = ad.tsum(x)
    for _ in range(uses - 1):
        total = ad.add(total, ad.tsum(x))
    ad.backward(total)
    np.testing.assert_allclose(x.grad, float(uses) * np.ones(len(data)))
