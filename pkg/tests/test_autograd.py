import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from conftest import REL_TOL, gradient_cases, gradient_check
from gflowmask import autograd as ag
from gflowmask.autograd import BackwardError, NonFiniteError, Tensor, no_grad, tape_of


class TestBackwardExamples:
    def test_sum_gives_all_ones(self):
        x = Tensor(np.arange(24.0).reshape(2, 3, 4), requires_grad=True)
        x.sum().backward()
        np.testing.assert_array_equal(x.grad, np.ones((2, 3, 4)))

    def test_square_at_three(self):
        x = Tensor(3.0, requires_grad=True)
        (x * x).backward()
        assert x.grad == 6.0

    def test_backward_twice_raises(self):
        x = Tensor(np.ones(3), requires_grad=True)
        loss = (x * 2.0).sum()
        loss.backward()
        with pytest.raises(BackwardError):
            loss.backward()

    def test_backward_without_forward_raises(self):
        with pytest.raises(BackwardError):
            Tensor(1.0, requires_grad=True).backward()

    def test_backward_needs_scalar(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(BackwardError):
            (x * 2.0).backward()

    def test_shared_subexpression_accumulates(self):
        x = Tensor(2.0, requires_grad=True)
        y = x * x
        (y + y * x).backward()  # d/dx (x^2 + x^3) = 2x + 3x^2
        assert x.grad == pytest.approx(16.0)


class TestTape:
    def test_topological_order(self):
        x = Tensor(np.ones((2, 2)), requires_grad=True)
        w = Tensor(np.eye(2), requires_grad=True)
        loss = ag.relu(x @ w + 1.0).sum()
        tape = tape_of(loss)
        assert tape.is_topological()
        assert tape.ops[-1] == "sum"
        assert loss.backward().is_topological()

    def test_no_grad_records_nothing(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            y = (x * 3.0).sum()
        assert not y.requires_grad
        with pytest.raises(BackwardError):
            y.backward()


class TestNonFinite:
    def test_forward_nan_raises(self):
        with pytest.raises(NonFiniteError):
            ag.log(Tensor(np.array([-1.0])))

    def test_overflow_raises(self):
        with pytest.raises(NonFiniteError):
            ag.exp(Tensor(np.array([1000.0])))

    def test_grad_buffer_matches_shape(self):
        x = Tensor(np.zeros((3, 2)), requires_grad=True)
        assert x.grad.shape == x.data.shape
        assert Tensor(np.zeros(2)).grad is None


@pytest.mark.parametrize("case", sorted(gradient_cases()))
def test_gradient_matches_central_differences(case):
    rng = np.random.default_rng(7)
    loss_fn, leaves = gradient_cases()[case](rng)
    assert gradient_check(loss_fn, leaves, rng) < REL_TOL


class TestSoftmax:
    @settings(max_examples=50, deadline=None)
    @given(arrays(np.float64, st.tuples(st.integers(1, 4), st.integers(1, 8)),
                  elements=st.floats(-50, 50, allow_nan=False)))
    def test_rows_sum_to_one(self, z):
        p = ag.softmax(Tensor(z)).data
        assert np.all((p >= 0) & (p <= 1))
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-9)

    def test_log_softmax_is_stable_at_large_margin(self):
        out = ag.log_softmax(Tensor(np.array([0.0, 1000.0]))).data
        assert out[1] == 0.0
        assert out[0] == -1000.0


class TestConv:
    def test_matches_direct_sum(self, rng):
        x = rng.normal(size=(1, 2, 5, 5))
        w = rng.normal(size=(3, 2, 3, 3))
        out = ag.conv2d(Tensor(x), Tensor(w), stride=2, padding=1).data
        xp = np.pad(x, ((0, 0), (0, 0), (1, 1), (1, 1)))
        ref = np.zeros((1, 3, 3, 3))
        for o in range(3):
            for i in range(3):
                for j in range(3):
                    ref[0, o, i, j] = (xp[0, :, 2 * i : 2 * i + 3, 2 * j : 2 * j + 3] * w[o]).sum()
        np.testing.assert_allclose(out, ref, atol=1e-12)

    def test_channel_mismatch(self):
        with pytest.raises(ValueError):
            ag.conv2d(Tensor(np.zeros((1, 2, 3, 3))), Tensor(np.zeros((1, 3, 3, 3))))
