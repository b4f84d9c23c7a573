import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from bigru_fss.numerics import (
    AdamState,
    NonDeterministicLossError,
    NonFiniteError,
    NonFiniteGradientError,
    ShapeError,
    Tensor,
    adam_step,
    concat_channels,
    conv2d,
    elementwise,
    getitem,
    grad_check,
    he_init,
    maxpool2d,
    mean,
    mul,
    record_branches,
    relu,
    sigmoid,
    tanh,
    tsum,
    upsample2d,
)


def central_diff(f, x, eps=1e-6):
    """Brute-force gradient of scalar f at array x."""
    g = np.zeros_like(x)
    for i in range(x.size):
        xp = x.copy()
        xp.flat[i] += eps
        xm = x.copy()
        xm.flat[i] -= eps
        g.flat[i] = (f(xp) - f(xm)) / (2 * eps)
    return g


def rel_err(a, b):
    return np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8))


def leaf(arr):
    return Tensor(np.asarray(arr, dtype=np.float64), requires_grad=True)


# -- conv2d ---------------------------------------------------------------------------

def test_conv_identity_kernel():
    x = np.arange(9.0).reshape(1, 3, 3)
    out = conv2d(Tensor(x), Tensor(np.ones((1, 1, 1, 1))), Tensor(np.zeros(1)))
    np.testing.assert_array_equal(out.data, x)


def test_conv_overlap_counts():
    out = conv2d(Tensor(np.ones((1, 4, 4))), Tensor(np.ones((1, 1, 3, 3))), Tensor(np.zeros(1)),
                 padding=1).data[0]
    expected = np.array([[4, 6, 6, 4], [6, 9, 9, 6], [6, 9, 9, 6], [4, 6, 6, 4]], dtype=float)
    np.testing.assert_array_equal(out, expected)


@pytest.mark.parametrize("h,k,s,p", [(5, 3, 1, 0), (5, 3, 2, 1), (7, 1, 1, 0), (6, 3, 3, 2)])
def test_conv_output_extent(h, k, s, p):
    out = conv2d(Tensor(np.zeros((2, h, h))), Tensor(np.zeros((3, 2, k, k))), stride=s, padding=p)
    ho = (h + 2 * p - k) // s + 1
    assert out.shape == (3, ho, ho)


def test_conv_channel_mismatch():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((2, 5, 5))), Tensor(np.zeros((1, 3, 3, 3))))


def test_conv_kernel_too_large():
    with pytest.raises(ShapeError):
        conv2d(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 1, 3, 3))))


def test_conv_matches_direct_loop():
    rng = np.random.default_rng(3)
    x = rng.normal(size=(2, 5, 6))
    w = rng.normal(size=(3, 2, 3, 3))
    b = rng.normal(size=3)
    out = conv2d(Tensor(x), Tensor(w), Tensor(b), stride=2, padding=1).data
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    ref = np.zeros_like(out)
    for o in range(3):
        for i in range(out.shape[1]):
            for j in range(out.shape[2]):
                ref[o, i, j] = np.sum(xp[:, 2 * i:2 * i + 3, 2 * j:2 * j + 3] * w[o]) + b[o]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


@pytest.mark.parametrize("stride,padding", [(1, 1), (2, 0), (1, 0)])
def test_conv_gradients_finite_difference(stride, padding):
    rng = np.random.default_rng(0)
    x0 = rng.normal(size=(2, 5, 5))
    w0 = rng.normal(size=(3, 2, 3, 3))
    b0 = rng.normal(size=3)

    def f(x, w, b):
        return float(conv2d(Tensor(x), Tensor(w), Tensor(b), stride, padding).data.sum())

    x, w, b = leaf(x0), leaf(w0), leaf(b0)
    tsum(conv2d(x, w, b, stride, padding)).backward()
    assert rel_err(x.grad, central_diff(lambda v: f(v, w0, b0), x0)) < 1e-5
    assert rel_err(w.grad, central_diff(lambda v: f(x0, v, b0), w0)) < 1e-5
    assert rel_err(b.grad, central_diff(lambda v: f(x0, w0, v), b0)) < 1e-5


def test_conv_batched_equals_per_sample():
    rng = np.random.default_rng(1)
    x = rng.normal(size=(4, 2, 6, 6))
    w = Tensor(rng.normal(size=(3, 2, 3, 3)))
    batched = conv2d(Tensor(x), w, padding=1).data
    for n in range(4):
        np.testing.assert_allclose(batched[n], conv2d(Tensor(x[n]), w, padding=1).data, rtol=1e-13)


# -- elementwise ----------------------------------------------------------------------

def test_elementwise_trivial_values():
    z = Tensor(np.zeros(1))
    assert elementwise("sigmoid", z).data[0] == 0.5
    assert elementwise("tanh", z).data[0] == 0.0
    assert elementwise("relu", Tensor(np.array([-1.0]))).data[0] == 0.0
    assert elementwise("one_minus", Tensor(np.array([0.25]))).data[0] == 0.75


def test_elementwise_shape_mismatch():
    with pytest.raises(ShapeError):
        elementwise("add", Tensor(np.zeros(2)), Tensor(np.zeros(3)))
    with pytest.raises(ValueError):
        elementwise("softplus", Tensor(np.zeros(2)))


def test_mul_gradient_is_other_operand():
    rng = np.random.default_rng(5)
    a0, b0 = rng.normal(size=(3, 4)), rng.normal(size=(3, 4))
    a, b = leaf(a0), leaf(b0)
    tsum(mul(a, b)).backward()
    np.testing.assert_array_equal(a.grad, b0)
    fd = central_diff(lambda v: float((v * b0).sum()), a0)
    assert rel_err(a.grad, fd) < 1e-6


@pytest.mark.parametrize("kind", ["sigmoid", "tanh", "relu", "one_minus"])
def test_unary_gradients(kind):
    rng = np.random.default_rng(7)
    x0 = rng.normal(size=(2, 3, 3)) * 2
    x0[np.abs(x0) < 1e-3] = 0.5  # keep away from the relu kink
    x = leaf(x0)
    tsum(elementwise(kind, x)).backward()
    fd = central_diff(lambda v: float(elementwise(kind, Tensor(v)).data.sum()), x0)
    assert rel_err(x.grad, fd) < 1e-6


@given(st.floats(-700, 700))
def test_sigmoid_symmetry(v):
    x = np.array([v])
    s = sigmoid(Tensor(x)).data + sigmoid(Tensor(-x)).data
    assert abs(s[0] - 1.0) <= 2 * np.finfo(float).eps


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=20))
def test_no_nonfinite_within_range(values):
    x = Tensor(np.array(values))
    for kind in ("sigmoid", "tanh", "relu", "one_minus"):
        out = elementwise(kind, x).data
        assert np.isfinite(out).all()
    assert ((sigmoid(x).data >= 0) & (sigmoid(x).data <= 1)).all()
    assert (np.abs(tanh(x).data) <= 1).all()


def test_sigmoid_open_interval_for_moderate_inputs():
    out = sigmoid(Tensor(np.linspace(-30, 30, 101))).data
    assert (out > 0).all() and (out < 1).all()


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_nonfinite_is_an_error():
    with pytest.raises(NonFiniteError):
        mul(Tensor(np.array([1e200])), Tensor(np.array([1e200])))


# -- pooling / upsampling / concat ------------------------------------------------------

def test_maxpool_value():
    out = maxpool2d(Tensor(np.array([[[1.0, 2.0], [3.0, 4.0]]])), 2)
    assert out.data.tolist() == [[[4.0]]]


def test_maxpool_ties_go_to_first_index():
    x = leaf(np.full((1, 4, 4), 2.0))
    out = maxpool2d(x, 2)
    np.testing.assert_array_equal(out.data, np.full((1, 2, 2), 2.0))
    tsum(out).backward()
    expected = np.zeros((1, 4, 4))
    expected[0, ::2, ::2] = 1.0
    np.testing.assert_array_equal(x.grad, expected)


def test_maxpool_gradient_finite_difference():
    rng = np.random.default_rng(11)
    x0 = rng.permutation(16).reshape(1, 4, 4).astype(float)  # distinct values, gaps of 1
    w = rng.normal(size=(1, 2, 2))
    x = leaf(x0)
    tsum(mul(maxpool2d(x, 2), Tensor(w))).backward()
    fd = central_diff(lambda v: float((maxpool2d(Tensor(v), 2).data * w).sum()), x0, eps=1e-4)
    assert rel_err(x.grad, fd) < 1e-5


def test_maxpool_non_divisible():
    with pytest.raises(ShapeError):
        maxpool2d(Tensor(np.zeros((1, 5, 4))), 2)


def test_upsample_blocks_and_identity():
    x = np.array([[[1.0, 2.0], [3.0, 4.0]]])
    out = upsample2d(Tensor(x), 2).data[0]
    np.testing.assert_array_equal(out, np.kron(x[0], np.ones((2, 2))))
    np.testing.assert_array_equal(upsample2d(Tensor(x), 1).data, x)


@pytest.mark.parametrize("factor", [1, 2, 3])
def test_upsample_gradient(factor):
    rng = np.random.default_rng(2)
    x0 = rng.normal(size=(2, 3, 3))
    x = leaf(x0)
    tsum(upsample2d(x, factor)).backward()
    np.testing.assert_array_equal(x.grad, np.full_like(x0, factor ** 2))
    fd = central_diff(lambda v: float(upsample2d(Tensor(v), factor).data.sum()), x0)
    assert rel_err(x.grad, fd) < 1e-6


def test_concat_channels_order_and_roundtrip():
    a, b = np.zeros((1, 2, 2)), np.ones((1, 2, 2))
    out = concat_channels(Tensor(a), Tensor(b))
    assert out.shape == (2, 2, 2)
    np.testing.assert_array_equal(out.data[0], a[0])
    np.testing.assert_array_equal(out.data[1], b[0])
    np.testing.assert_array_equal(getitem(out, slice(0, 1)).data, a)
    np.testing.assert_array_equal(getitem(out, slice(1, 2)).data, b)


def test_concat_channels_gradient_partition():
    rng = np.random.default_rng(4)
    a0, b0 = rng.normal(size=(2, 3, 3)), rng.normal(size=(1, 3, 3))
    w = rng.normal(size=(3, 3, 3))
    a, b = leaf(a0), leaf(b0)
    tsum(mul(concat_channels(a, b), Tensor(w))).backward()
    fa = central_diff(lambda v: float((np.concatenate([v, b0]) * w).sum()), a0)
    fb = central_diff(lambda v: float((np.concatenate([a0, v]) * w).sum()), b0)
    assert rel_err(a.grad, fa) < 1e-6
    assert rel_err(b.grad, fb) < 1e-6


def test_concat_spatial_mismatch():
    with pytest.raises(ShapeError):
        concat_channels(Tensor(np.zeros((1, 2, 2))), Tensor(np.zeros((1, 3, 2))))


# -- initialisation -------------------------------------------------------------------

def test_he_init_deterministic():
    a = he_init((4, 3, 3, 3), 27, 123)
    b = he_init((4, 3, 3, 3), 27, 123)
    assert a.data.tobytes() == b.data.tobytes()
    assert he_init((4, 3, 3, 3), 27, 124).data.tobytes() != a.data.tobytes()


def test_he_init_statistics():
    n = 100_000
    x = he_init((n,), 50, 0).data
    target = np.sqrt(2 / 50)
    assert abs(x.std() - target) / target < 0.02
    assert abs(x.mean()) < 3 * target / np.sqrt(n)


def test_he_init_rejects_zero_fan_in():
    with pytest.raises(ValueError):
        he_init((3,), 0, 0)


# -- Adam -------------------------------------------------------------------------------

def test_adam_zero_gradient_leaves_params():
    params = {"w": Tensor(np.array([1.0, -2.0]))}
    state = AdamState.for_params(params)
    new, state = adam_step(params, {"w": np.zeros(2)}, state, 0.1)
    np.testing.assert_array_equal(new["w"].data, [1.0, -2.0])
    assert state.step_count == 1


def test_adam_first_step_closed_form():
    params = {"w": Tensor(np.array([1.0]))}
    new, state = adam_step(params, {"w": np.array([1.0])}, AdamState.for_params(params), 0.1)
    # bias-corrected moments are exactly 1, so the step is lr / (1 + eps)
    assert new["w"].data[0] == pytest.approx(1.0 - 0.1 / (1 + 1e-8), abs=1e-15)
    assert new["w"].data[0] == pytest.approx(0.9, abs=1e-8)
    assert params["w"].data[0] == 1.0


def test_adam_deterministic_trajectories():
    def run():
        rng = np.random.default_rng(9)
        params = {"a": Tensor(rng.normal(size=(3, 3))), "b": Tensor(rng.normal(size=3))}
        state = AdamState.for_params(params)
        for _ in range(5):
            grads = {k: 2 * p.data for k, p in params.items()}
            params, state = adam_step(params, grads, state, 0.01)
        return b"".join(p.data.tobytes() for p in params.values())

    assert run() == run()


def test_adam_nonfinite_gradient_names_parameter():
    params = {"good": Tensor(np.zeros(2)), "bad": Tensor(np.zeros(2))}
    with pytest.raises(NonFiniteGradientError, match="bad"):
        adam_step(params, {"good": np.zeros(2), "bad": np.array([np.nan, 0.0])},
                  AdamState.for_params(params), 0.1)


def test_adam_shape_mismatch():
    params = {"w": Tensor(np.zeros(2))}
    with pytest.raises(ValueError):
        adam_step(params, {"w": np.zeros(3)}, AdamState.for_params(params), 0.1)


# -- gradient checker --------------------------------------------------------------------

def test_grad_check_quadratic():
    rng = np.random.default_rng(0)
    params = {"theta": Tensor(rng.normal(size=(4, 3)))}

    def loss(p):
        t = p["theta"]
        return tsum(mul(t, t)) * 0.5

    report = grad_check(loss, params, eps=1e-5, tolerance=1e-8)
    assert report.passed, report.params


def test_grad_check_flags_corrupted_gradient():
    rng = np.random.default_rng(0)
    params = {"theta": Tensor(rng.normal(size=(5,)))}

    def loss(p):
        return mean(mul(p["theta"], p["theta"]))

    good = grad_check(loss, params, tolerance=1e-6)
    assert good.passed
    bad = grad_check(loss, params, tolerance=1e-6,
                     grad_fn=lambda p: {"theta": 1.01 * 2 * p["theta"].data / 5})
    assert not bad.passed
    assert bad.violations[0].name == "theta"


def test_grad_check_shrinks_step_at_relu_kink():
    params = {"theta": Tensor(np.array([1e-5, -3e-5, 0.5]))}

    def loss(p):
        return tsum(relu(p["theta"]))

    naive = grad_check(loss, params, eps=1e-4, max_step_reductions=0)
    assert not naive.passed
    report = grad_check(loss, params, eps=1e-4)
    assert report.passed, report.params
    assert report.params[0].reduced_steps == 2


def test_grad_check_shrinks_step_at_maxpool_tie():
    x = np.array([[[1.0, 1.00005], [0.3, 0.2]]])
    params = {"x": Tensor(x)}

    def loss(p):
        return tsum(maxpool2d(p["x"], 2))

    assert not grad_check(loss, params, eps=1e-4, max_step_reductions=0).passed
    report = grad_check(loss, params, eps=1e-4)
    assert report.passed, report.params
    assert report.params[0].reduced_steps == 2


def test_record_branches_fingerprints_decisions():
    def digest(values):
        with record_branches() as branches:
            relu(Tensor(np.array(values)))
        return branches.digest()

    assert digest([1.0, -2.0]) == digest([3.0, -0.5])
    assert digest([1.0, -2.0]) != digest([-1.0, -2.0])
    with record_branches() as outer:
        digest([1.0])
        relu(Tensor(np.array([1.0])))
    with record_branches() as alone:
        relu(Tensor(np.array([1.0])))
    assert outer.digest() == alone.digest()


def test_grad_check_detects_nondeterminism():
    params = {"theta": Tensor(np.ones(2))}
    rng = np.random.default_rng(0)

    def loss(p):
        return tsum(p["theta"]) * float(rng.uniform(1, 2))

    with pytest.raises(NonDeterministicLossError):
        grad_check(loss, params)


def test_grad_check_requires_64_bit():
    params = {"theta": Tensor(np.ones(2, dtype=np.float32))}
    with pytest.raises(TypeError):
        grad_check(lambda p: tsum(p["theta"]), params)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 10_000))
def test_composite_graph_gradients(seed):
    """Random small graph mixing every differentiable op, checked against finite differences."""
    rng = np.random.default_rng(seed)
    params = {
        "x": Tensor(rng.normal(size=(2, 4, 4))),
        "w": Tensor(rng.normal(size=(3, 2, 3, 3)) * 0.5),
        "b": Tensor(rng.normal(size=3) * 0.1),
        "v": Tensor(rng.normal(size=(1, 4, 4))),
    }

    def loss(p):
        h = tanh(conv2d(p["x"], p["w"], p["b"], padding=1))
        pooled = upsample2d(maxpool2d(sigmoid(h), 2), 2)
        mixed = concat_channels(pooled, p["v"])
        return mean(mul(mixed, mixed))

    # saturated tanh units give gradients near 1e-8 where central differences are
    # dominated by roundoff, so compare against an absolute floor of 1e-6
    report = grad_check(loss, params, tolerance=1e-4, floor=1e-6)
    assert report.passed, [(c.name, c.max_rel_error) for c in report.violations]
