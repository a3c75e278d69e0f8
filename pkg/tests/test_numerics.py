import math
import zlib

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays
from scipy.special import softmax as sp_softmax
from scipy.stats import entropy

from momehtl.numerics import (
    Tensor, check_gradients, concat, cross_entropy, finite_diff_gradient, gelu, grad,
    kl_divergence, kl_from_logits, layer_norm, log_softmax, matmul, mse_pair, no_grad,
    parameter, softmax, stack,
)

finite = st.floats(-30, 30, allow_nan=False, allow_infinity=False)


def vec(n_min=2, n_max=8):
    return st.integers(n_min, n_max).flatmap(lambda n: arrays(np.float64, n, elements=finite))


# --- closed-form values -----------------------------------------------------

def test_softmax_examples():
    np.testing.assert_allclose(softmax([0.0, 0.0, 0.0]).data, [1 / 3] * 3, rtol=0, atol=1e-15)
    np.testing.assert_allclose(softmax([math.log(2), 0.0]).data, [2 / 3, 1 / 3], atol=1e-15)


def test_softmax_rejects_nonpositive_temperature():
    for t in (0.0, -1.0):
        with pytest.raises(ValueError):
            softmax([1.0, 2.0], temperature=t)


def test_softmax_temperature_divides_logits():
    v = np.array([1.0, -2.0, 0.5])
    np.testing.assert_allclose(softmax(v, 2.5).data, sp_softmax(v / 2.5), rtol=1e-14)


def test_kl_examples():
    assert kl_divergence([0.5, 0.5], [0.5, 0.5]).item() == 0.0
    # the oracle is scipy's relative entropy
    ref = entropy([0.5, 0.5], [0.25, 0.75])
    assert abs(kl_divergence([0.5, 0.5], [0.25, 0.75]).item() - ref) < 1e-12
    assert abs(ref - 0.14384) < 1e-5
    ref = entropy([2 / 3, 1 / 3], [0.5, 0.5])
    assert abs(kl_divergence([2 / 3, 1 / 3], [0.5, 0.5]).item() - ref) < 1e-12
    assert abs(ref - 0.05663) < 1e-5


def test_kl_length_mismatch():
    with pytest.raises(ValueError):
        kl_divergence([0.5, 0.5], [0.2, 0.3, 0.5])


def test_cross_entropy_examples():
    assert abs(cross_entropy([0.0, 0.0], 0).item() - math.log(2)) < 1e-9
    # -log(sigmoid(20)) = log1p(exp(-20))
    assert abs(cross_entropy([10.0, -10.0], 0).item() - math.log1p(math.exp(-20))) < 1e-15
    assert abs(cross_entropy([10.0, -10.0], 0).item() - 2.06e-9) < 1e-11
    assert abs(cross_entropy([10.0, -10.0], 1).item() - (20 + math.log1p(math.exp(-20)))) < 1e-12


def test_cross_entropy_is_log_space():
    # softmax-then-log would give inf here
    assert cross_entropy([1000.0, -1000.0], 1).item() == pytest.approx(2000.0)


def test_cross_entropy_label_errors():
    with pytest.raises(ValueError):
        cross_entropy([0.0, 0.0], 2)
    with pytest.raises(ValueError):
        cross_entropy([0.0, 0.0], -1)
    with pytest.raises(ValueError):
        cross_entropy(np.zeros((3, 2)), np.array([0, 1]))


def test_cross_entropy_batched_matches_rows():
    rng = np.random.default_rng(0)
    logits = rng.standard_normal((5, 4))
    labels = rng.integers(0, 4, 5)
    batched = cross_entropy(logits, labels).data
    rows = [cross_entropy(logits[i], labels[i]).item() for i in range(5)]
    np.testing.assert_allclose(batched, rows, rtol=1e-14)


def test_mse_pair_examples():
    assert mse_pair([1.0, 2.0], [1.0, 2.0]).item() == 0.0
    assert mse_pair([1.0, 0.0], [0.0, 1.0]).item() == 2.0
    with pytest.raises(ValueError):
        mse_pair([1.0], [1.0, 2.0])


@given(vec(), vec(), st.floats(0.1, 10))
def test_mse_pair_homogeneous(a, b, s):
    n = min(len(a), len(b))
    a, b = a[:n], b[:n]
    assert mse_pair(s * a, s * b).item() == pytest.approx(s * s * mse_pair(a, b).item(), rel=1e-9, abs=1e-9)


def test_core_op_examples():
    x = np.random.default_rng(1).standard_normal((3, 4))
    np.testing.assert_array_equal(matmul(np.eye(3), x).data, x)
    np.testing.assert_array_equal(layer_norm(np.full((2, 5), 7.0)).data, np.zeros((2, 5)))
    assert gelu(0.0).item() == 0.0


def test_layer_norm_statistics():
    x = np.random.default_rng(2).standard_normal((4, 16)) * 3 + 1
    y = layer_norm(x).data
    np.testing.assert_allclose(y.mean(-1), 0, atol=1e-12)
    ref = (x - x.mean(-1, keepdims=True)) / np.sqrt(x.var(-1, keepdims=True) + 1e-5)
    np.testing.assert_allclose(y, ref, rtol=1e-12)


def test_matmul_shape_mismatch():
    with pytest.raises(ValueError):
        matmul(np.ones((2, 3)), np.ones((2, 3)))


# --- properties -------------------------------------------------------------

@given(vec(), st.floats(0.05, 20))
def test_softmax_on_simplex(v, t):
    p = softmax(v, t).data
    assert abs(p.sum() - 1.0) <= 1e-12
    assert np.all(p > 0) and np.all(p <= 1)


@given(vec(), st.floats(-50, 50))
def test_softmax_shift_invariant(v, c):
    np.testing.assert_allclose(softmax(v + c).data, softmax(v).data, rtol=1e-9, atol=1e-15)


@given(vec(), vec())
def test_gibbs_inequality(a, b):
    n = min(len(a), len(b))
    p, q = sp_softmax(a[:n] / 4), sp_softmax(b[:n] / 4)
    kl = kl_divergence(p, q).item()
    assert kl >= -1e-12
    assert kl_divergence(p, p).item() == 0.0


@given(vec(), vec())
def test_kl_from_logits_matches_probability_form(a, b):
    n = min(len(a), len(b))
    a, b = a[:n] / 4, b[:n] / 4
    direct = kl_divergence(sp_softmax(a), sp_softmax(b)).item()
    assert kl_from_logits(a, b).item() == pytest.approx(direct, rel=1e-9, abs=1e-12)


@given(vec(), st.data())
def test_cross_entropy_equals_kl_to_onehot(v, data):
    # KL(onehot(y) || softmax(v)) = -ln max(q_y, eps); the constant is zero
    v = v / 10
    y = data.draw(st.integers(0, len(v) - 1))
    onehot = np.eye(len(v))[y]
    kl = kl_divergence(onehot, sp_softmax(v)).item()
    assert cross_entropy(v, y).item() == pytest.approx(kl, rel=1e-9, abs=1e-12)


# --- finite differences -----------------------------------------------------

def test_finite_diff_examples():
    assert abs(finite_diff_gradient(lambda x: float(x[0] ** 2), [3.0], h=1e-4)[0] - 6.0) < 1e-6
    np.testing.assert_array_equal(finite_diff_gradient(lambda x: 4.0, np.ones(5)), np.zeros(5))
    x = np.random.default_rng(3).standard_normal(6)
    np.testing.assert_allclose(finite_diff_gradient(lambda z: float(z.sum()), x), np.ones(6), rtol=1e-8)


def test_finite_diff_rejects_bad_step():
    with pytest.raises(ValueError):
        finite_diff_gradient(lambda x: 0.0, [1.0], h=0.0)


def test_check_gradients_empty_model_passes():
    report = check_gradients(lambda: Tensor(np.float64(1.0)), {})
    assert report.passed and report.checked == 0
    assert report.max_abs_diff == 0.0 and report.max_rel_diff == 0.0


def test_check_gradients_flags_sign_flipped_backward():
    def bad_square(x):
        return Tensor.from_op(x.data ** 2, (x,), lambda g: (-2.0 * x.data * g,))

    p = parameter(np.array([0.5, -1.5, 2.0]))
    report = check_gradients(lambda: bad_square(p).sum(), {"p": p})
    assert not report.passed
    assert len(report.failures) == 3
    assert report.worst["p"][1] == pytest.approx(2.0)


def test_grad_leaves_parameters_untouched():
    p = parameter(np.array([1.0, 2.0]))
    before = p.data.copy()
    g1 = grad((p * p).sum(), [p])[0]
    g2 = grad((p * p).sum(), [p])[0]
    np.testing.assert_array_equal(p.data, before)
    np.testing.assert_array_equal(g1, g2)


def test_no_grad_records_nothing():
    p = parameter(np.ones(3))
    with no_grad():
        y = (p * 2).sum()
    assert not y.requires_grad
    np.testing.assert_array_equal(grad((p * 2).sum(), [p])[0], [2, 2, 2])


def test_unused_parameter_gets_zero_gradient():
    a, b = parameter(np.ones(2)), parameter(np.ones(3))
    ga, gb = grad(a.sum(), [a, b])
    np.testing.assert_array_equal(gb, np.zeros(3))


# every differentiable op, as (name, builder(params) -> Tensor, param shapes)
OPS = [
    ("add_broadcast", lambda a, b: a + b, [(3, 4), (4,)]),
    ("sub", lambda a, b: a - b, [(3, 4), (3, 1)]),
    ("mul", lambda a, b: a * b, [(3, 4), (1, 4)]),
    ("div", lambda a, b: a / (b * b + 1.0), [(3, 4), (3, 4)]),
    ("pow", lambda a: (a * a + 0.5) ** 1.5, [(5,)]),
    ("neg", lambda a: -a, [(4,)]),
    ("matmul", lambda a, b: a @ b, [(3, 4), (4, 2)]),
    ("matmul_batched", lambda a, b: matmul(a, b), [(2, 3, 4), (4, 5)]),
    ("getitem_slice", lambda a: a[1:, ::2], [(3, 4)]),
    ("getitem_fancy", lambda a: a[np.array([0, 2, 0]), np.array([1, 1, 3])], [(3, 4)]),
    ("reshape", lambda a: a.reshape(4, 3), [(3, 4)]),
    ("transpose", lambda a: a.transpose(2, 0, 1), [(2, 3, 4)]),
    ("swapaxes", lambda a: a.swapaxes(0, 1), [(2, 3)]),
    ("broadcast_to", lambda a: a.broadcast_to((3, 4)), [(1, 4)]),
    ("sum_axis", lambda a: a.sum(axis=1, keepdims=True), [(3, 4)]),
    ("mean", lambda a: a.mean(axis=0), [(3, 4)]),
    ("exp", lambda a: a.exp(), [(4,)]),
    ("log", lambda a: (a * a + 0.1).log(), [(4,)]),
    ("clamp_min", lambda a: a.clamp_min(0.05), [(6,)]),
    ("concat", lambda a, b: concat([a, b], axis=1), [(2, 3), (2, 2)]),
    ("stack", lambda a, b: stack([a, b], axis=0), [(2, 3), (2, 3)]),
    ("gelu", gelu, [(6,)]),
    ("layer_norm", layer_norm, [(3, 5)]),
    ("softmax", lambda a: softmax(a, 0.7), [(2, 5)]),
    ("log_softmax", lambda a: log_softmax(a, 1.3), [(2, 5)]),
    ("kl_divergence", lambda a, b: kl_divergence(softmax(a), softmax(b)), [(4,), (4,)]),
    ("kl_from_logits", lambda a, b: kl_from_logits(a, b, 1.5), [(2, 4), (2, 4)]),
    ("cross_entropy", lambda a: cross_entropy(a, np.array([2, 0, 1])), [(3, 4)]),
    ("mse_pair", mse_pair, [(5,), (5,)]),
]


@pytest.mark.parametrize("name,build,shapes", OPS, ids=[o[0] for o in OPS])
def test_op_gradient_at_100_random_points(name, build, shapes):
    rng = np.random.default_rng(zlib.crc32(name.encode()))
    for _ in range(100):
        params = {f"x{i}": parameter(rng.standard_normal(s)) for i, s in enumerate(shapes)}
        out_shape = build(*params.values()).shape
        proj = rng.standard_normal(out_shape)  # random projection to a scalar
        report = check_gradients(lambda: (build(*params.values()) * proj).sum(), params,
                                 h=1e-6, tol=1e-4)
        assert report.passed, f"{name}: {report.summary()}"
