import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from alst import numcore as nc
from alst.numcore import Tensor

from gradcheck import max_rel_error, numeric_grad


def _leaves(arrays_):
    return [Tensor(a.copy(), requires_grad=True) for a in arrays_]


def _check_op(build, shapes, seed, positive=False):
    rng = np.random.default_rng(seed)
    arrs = [rng.standard_normal(s) for s in shapes]
    if positive:
        arrs = [np.abs(a) + 0.5 for a in arrs]
    # fixed random projection turns any output into a scalar loss
    probe = None

    def scalar(values):
        nonlocal probe
        out = build(*[Tensor(v) for v in values])
        if probe is None:
            probe = np.random.default_rng(seed + 1000).standard_normal(out.shape)
        return float((out.data * probe).sum())

    scalar(arrs)
    leaves = _leaves(arrs)
    out = build(*leaves)
    nc.tsum(nc.mul(out, probe)).backward()
    numeric = numeric_grad(scalar, [a.copy() for a in arrs])
    return max_rel_error([l.grad for l in leaves], numeric)


OPS = {
    "add_bias": (lambda a, b: a + b, [(4, 5), (5,)]),
    "sub": (lambda a, b: a - b, [(3, 4), (3, 4)]),
    "mul": (lambda a, b: a * b, [(3, 4), (1, 4)]),
    "matmul": (lambda a, b: a @ b, [(3, 4), (4, 2)]),
    "batched_matmul": (lambda a, b: a @ b, [(2, 3, 4), (4, 5)]),
    "mean_axis": (lambda a: a.mean(axis=1), [(3, 4, 2)]),
    "sum_all": (lambda a: a.sum(), [(3, 4)]),
    "square": (lambda a: nc.square(a), [(5,)]),
    "relu": (lambda a: nc.relu(a), [(6, 3)]),
    "softmax": (lambda a: nc.softmax(a), [(3, 5)]),
    "layer_norm": (lambda x, g, b: nc.layer_norm(x, g, b), [(4, 6), (6,), (6,)]),
    "transpose": (lambda a: nc.transpose_last(a), [(2, 3, 4)]),
    "permute": (lambda a: nc.permute(a, (1, 2, 0)), [(2, 3, 4)]),
    "getitem": (lambda a: a[np.array([0, 2, 2])], [(4, 3)]),
    "embedding": (lambda t: nc.embedding(t, np.array([[1, 0], [1, 3]])), [(4, 3)]),
    "concat": (lambda a, b: nc.concat([a, b], axis=1), [(2, 3), (2, 1)]),
    "attention": (
        lambda q, k, v: nc.attention(q, k, v, mask=np.array([0.0, 0.0, nc.MASK_VALUE])),
        [(2, 3, 4), (2, 3, 4), (2, 3, 4)],
    ),
}


@pytest.mark.parametrize("name", sorted(OPS))
@pytest.mark.parametrize("seed", range(3))
def test_op_gradients_match_finite_differences(name, seed):
    build, shapes = OPS[name]
    assert _check_op(build, shapes, seed) <= 1e-4


def test_log_gradient():
    assert _check_op(lambda a: nc.log(a), [(4,)], 0, positive=True) <= 1e-4


@pytest.mark.parametrize("seed", range(10))
def test_random_three_layer_composition(seed):
    rng = np.random.default_rng(seed)
    d = int(rng.integers(2, 8))

    def build(x, w1, w2, w3, g, b):
        h = nc.relu(nc.linear(x, w1))
        h = nc.layer_norm(h, g, b)
        h = nc.attention(h, h, h)
        return nc.softmax(h @ w2) @ w3

    shapes = [(2, 3, d), (d, 6), (6, 5), (5, 2), (6,), (6,)]
    assert _check_op(build, shapes, seed) <= 1e-4


def test_softmax_of_zeros_is_uniform():
    np.testing.assert_allclose(nc.softmax(Tensor(np.zeros(3))).data, [1 / 3] * 3, atol=1e-15)


def test_masked_attention_weight_is_exactly_zero():
    rng = np.random.default_rng(3)
    q, k, v = (Tensor(rng.standard_normal((3, 4)) * 5) for _ in range(3))
    mask = np.array([0.0, 0.0, nc.MASK_VALUE])
    _, w = nc.attention(q, k, v, mask=mask, return_weights=True)
    assert np.all(w.data[:, 2] == 0.0)
    np.testing.assert_allclose(w.data.sum(axis=-1), 1.0, atol=1e-6)


def test_layer_norm_matches_direct_formula():
    x = np.array([1.0, 2.0, 3.0])
    mu = sum(x) / 3
    var = sum((xi - mu) ** 2 for xi in x) / 3
    expected = [(xi - mu) / math.sqrt(var + 1e-5) for xi in x]
    out = nc.layer_norm(Tensor(x), Tensor(np.ones(3)), Tensor(np.zeros(3)))
    np.testing.assert_allclose(out.data, expected, atol=1e-10)


def test_backward_of_sum_gives_ones():
    w = Tensor(np.array([0.3, -1.0, 2.0]), requires_grad=True)
    w.sum().backward()
    np.testing.assert_array_equal(w.grad, np.ones(3))


def test_backward_of_sum_of_squares():
    w = Tensor(np.array([1.0, -2.0]), requires_grad=True)
    (w * w).sum().backward()
    np.testing.assert_array_equal(w.grad, [2.0, -4.0])


def test_unreachable_parameter_gets_zero_gradient():
    w = Tensor(np.ones(2), requires_grad=True)
    unused = Tensor(np.ones(3), requires_grad=True)
    (w * 2.0).sum().backward()
    np.testing.assert_array_equal(unused.grad, np.zeros(3))


def test_backward_requires_scalar():
    w = Tensor(np.ones(2), requires_grad=True)
    with pytest.raises(nc.ContractError):
        (w * 2.0).backward()


def test_shape_mismatch_is_contract_error():
    with pytest.raises(nc.ContractError):
        nc.matmul(Tensor(np.ones((2, 3))), Tensor(np.ones((2, 3))))
    with pytest.raises(nc.ContractError):
        nc.add(Tensor(np.ones((2, 3))), Tensor(np.ones(4)))


@pytest.mark.filterwarnings("ignore:overflow")
def test_non_finite_output_names_op():
    with pytest.raises(nc.NumericError, match="mul"):
        nc.mul(Tensor(np.array([1e308])), Tensor(np.array([1e308])))


@settings(max_examples=50, deadline=None)
@given(arrays(np.float64, st.tuples(st.integers(1, 6), st.integers(1, 8)),
              elements=st.floats(-50, 50)))
def test_softmax_rows_are_distributions(x):
    p = nc.softmax(Tensor(x)).data
    assert np.all(p >= 0)
    np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**16), st.integers(2, 7))
def test_attention_weights_over_kept_positions_sum_to_one(seed, t):
    rng = np.random.default_rng(seed)
    keep = rng.random(t) < 0.6
    keep[0] = True
    mask = np.where(keep, 0.0, nc.MASK_VALUE)
    q, k, v = (Tensor(rng.standard_normal((t, 3))) for _ in range(3))
    _, w = nc.attention(q, k, v, mask=mask, return_weights=True)
    np.testing.assert_allclose(w.data[:, keep].sum(axis=-1), 1.0, atol=1e-6)
    assert np.all(w.data[:, ~keep] == 0.0)


# ---------------------------------------------------------------------------
# Adam and the learning-rate schedule
# ---------------------------------------------------------------------------


def test_adam_first_step_is_about_lr_times_sign():
    for g in (0.3, -7.0):
        p = Tensor(np.array([1.0]), requires_grad=True)
        nc.adam_step([p], [np.array([g])], nc.AdamState(), lr=1e-3)
        assert p.data[0] - 1.0 == pytest.approx(-1e-3 * np.sign(g), rel=1e-4)


def test_adam_zero_grad_is_bitwise_fixed_point():
    rng = np.random.default_rng(0)
    start = rng.standard_normal((3, 4))
    p = Tensor(start.copy(), requires_grad=True)
    state = nc.AdamState()
    for _ in range(3):
        nc.adam_step([p], [np.zeros((3, 4))], state, lr=0.1)
    assert np.array_equal(p.data, start)
    assert state.step_count == 3


def test_adam_refuses_non_finite_grads():
    p = Tensor(np.array([1.0]), requires_grad=True)
    state = nc.AdamState()
    with pytest.raises(nc.NumericError):
        nc.adam_step([p], [np.array([np.nan])], state, lr=0.1)
    assert state.step_count == 0 and p.data[0] == 1.0


def test_adam_converges_on_scalar_quadratic():
    w = Tensor(np.array([0.0]), requires_grad=True)
    state = nc.AdamState()
    dist = []
    for _ in range(100):
        w.zero_grad()
        nc.square(w - 3.0).sum().backward()
        nc.adam_step([w], [w.grad], state, lr=0.1)
        dist.append(abs(w.data[0] - 3.0))
    # lr 0.1 moves ~0.1 per step, so the first 25 steps are the burn-in
    burn = dist[:25]
    assert all(b > a for a, b in zip(burn[1:], burn[:-1]))
    assert dist[-1] < 0.5


def test_lr_examples():
    s = nc.LrSchedule()
    assert nc.lr_at(s, 99, 10) == pytest.approx(1e-4, rel=1e-15)
    assert nc.lr_at(s, 500, 10) == pytest.approx(1e-4, rel=1e-15)
    assert nc.lr_at(s, 49, 0) == pytest.approx(5e-5, rel=1e-15)
    assert nc.lr_at(s, 1000, 25) == pytest.approx(1e-4 * 0.25, rel=1e-15)
    assert nc.lr_at(s, 1000, 19) == pytest.approx(1e-4, rel=1e-15)
    assert nc.lr_at(s, 1000, 20) == pytest.approx(5e-5, rel=1e-15)
    assert nc.lr_at(s, 1000, 24) == pytest.approx(5e-5, rel=1e-15)


@settings(max_examples=200, deadline=None)
@given(st.integers(0, 5000), st.integers(0, 200))
def test_lr_positive_pure_and_monotone(step, epoch):
    s = nc.LrSchedule()
    lr = nc.lr_at(s, step, epoch)
    assert lr > 0 and lr == nc.lr_at(s, step, epoch)
    if step + 1 < s.warmup_steps:
        assert nc.lr_at(s, step + 1, epoch) >= lr
    if step + 1 >= s.warmup_steps:
        assert nc.lr_at(s, step, epoch + 1) <= lr
