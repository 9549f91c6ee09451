import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from vphype.errors import ContractError, DimensionError
from vphype.tensor import (
    Tape,
    Tensor,
    concat,
    count_flops,
    getitem,
    is_grad_enabled,
    matmul,
    no_grad,
    split,
    take,
    tsum,
    unbroadcast,
)


def triple_loop_matmul(a, b):
    m, k = a.shape
    _, p = b.shape
    out = np.zeros((m, p))
    for i in range(m):
        for j in range(p):
            for t in range(k):
                out[i, j] += a[i, t] * b[t, j]
    return out


class TestMatmul:
    @pytest.mark.parametrize("m,k,p", [(1, 1, 1), (2, 3, 4), (5, 1, 3), (4, 7, 2)])
    def test_matches_triple_loop(self, rng, m, k, p):
        a, b = rng.normal(size=(m, k)), rng.normal(size=(k, p))
        np.testing.assert_allclose(matmul(a, b).data, triple_loop_matmul(a, b), rtol=0, atol=1e-12)

    def test_batched_broadcast(self, rng):
        a, b = rng.normal(size=(3, 2, 4)), rng.normal(size=(4, 5))
        out = matmul(a, b).data
        for i in range(3):
            np.testing.assert_allclose(out[i], triple_loop_matmul(a[i], b), atol=1e-12)

    def test_shape_error_names_both_shapes(self):
        with pytest.raises(DimensionError, match=r"\(2, 3\).*\(4, 5\)"):
            matmul(np.ones((2, 3)), np.ones((4, 5)))

    def test_flop_count(self):
        with count_flops() as c:
            matmul(np.ones((3, 2, 4)), np.ones((4, 5)))
        assert c.by_op["matmul"] == 2 * 3 * 2 * 4 * 5


class TestBackward:
    def test_product_rule(self):
        x = Tensor(np.array([2.0, -3.0]), requires_grad=True)
        y = tsum(x * x * 3.0)
        y.backward()
        np.testing.assert_array_equal(x.grad, [12.0, -18.0])

    def test_shared_subexpression_accumulates(self):
        x = Tensor(np.array(1.5), requires_grad=True)
        a = x * 2.0
        (a * a + a).backward()
        assert x.grad == pytest.approx(2 * 2 * 3.0 + 2.0)

    def test_leaf_grads_accumulate_across_calls(self):
        x = Tensor(np.ones(3), requires_grad=True)
        tsum(x).backward()
        tsum(x * 2.0).backward()
        np.testing.assert_array_equal(x.grad, [3.0, 3.0, 3.0])

    def test_non_scalar_seed_rejected(self):
        x = Tensor(np.ones(3), requires_grad=True)
        with pytest.raises(ContractError):
            (x * 2.0).backward()

    def test_deep_chain_does_not_recurse(self):
        x = Tensor(np.array(1.0), requires_grad=True)
        y = x
        for _ in range(5000):
            y = y * 1.0
        y.backward()
        assert x.grad == 1.0

    def test_tape_visits_each_node_once(self):
        x = Tensor(np.ones(2), requires_grad=True)
        y = x + x
        z = tsum(y * y)
        tape = Tape.from_output(z)
        assert len(tape.nodes) == len({id(n) for n in tape.nodes})

    def test_numpy_scalar_on_left(self):
        x = Tensor(np.ones(2), requires_grad=True)
        out = np.float64(2.0) * x
        assert isinstance(out, Tensor)
        tsum(out).backward()
        np.testing.assert_array_equal(x.grad, [2.0, 2.0])


class TestNoGrad:
    def test_no_graph_recorded(self):
        x = Tensor(np.ones(2), requires_grad=True)
        with no_grad():
            y = x * 2.0
            assert not is_grad_enabled()
        assert is_grad_enabled()
        assert not y.requires_grad

    def test_thread_local(self):
        seen = []
        with no_grad():
            t = threading.Thread(target=lambda: seen.append(is_grad_enabled()))
            t.start()
            t.join()
        assert seen == [True]


class TestIndexing:
    def test_advanced_index_repeats_accumulate(self):
        x = Tensor(np.arange(3.0), requires_grad=True)
        tsum(getitem(x, np.array([0, 0, 2]))).backward()
        np.testing.assert_array_equal(x.grad, [2.0, 0.0, 1.0])

    def test_take_repeats_accumulate(self):
        x = Tensor(np.ones((3, 2)), requires_grad=True)
        tsum(take(x, np.array([1, 1, 1]), axis=0)).backward()
        np.testing.assert_array_equal(x.grad[:, 0], [0.0, 3.0, 0.0])

    def test_concat_split_inverse(self, rng):
        a = rng.normal(size=(2, 6))
        parts = split(Tensor(a), 3, axis=1)
        np.testing.assert_array_equal(concat(parts, axis=1).data, a)


@settings(max_examples=40, deadline=None)
@given(
    st.lists(st.integers(1, 3), min_size=1, max_size=3),
    st.lists(st.booleans(), min_size=3, max_size=3),
    st.integers(0, 2),
)
def test_unbroadcast_sums_to_shape(full, squeeze, lead):
    target = tuple(1 if sq else s for s, sq in zip(full, squeeze))
    g = np.random.default_rng(0).normal(size=(2,) * lead + tuple(full))
    out = unbroadcast(g, target)
    assert out.shape == target
    assert out.sum() == pytest.approx(g.sum())
