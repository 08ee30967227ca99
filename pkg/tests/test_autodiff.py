import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from lgdgcn import autodiff as ad
from lgdgcn.autodiff import EdgeIndex, ShapeError, SpdFactor, NumericalError

from helpers import check_grad, weighted_sum

SEEDS = range(20)


def spd(rng, d, jitter=0.5):
    a = rng.normal(size=(d, d))
    return a @ a.T + jitter * np.eye(d)


# ------------------------------------------------------------------ matmul

def test_matmul_identity():
    m = np.arange(6.0).reshape(2, 3)
    out = ad.matmul(ad.constant(np.eye(2)), ad.constant(m))
    np.testing.assert_array_equal(out.data, m)


def test_matmul_hand_product():
    out = ad.matmul(ad.constant([[1.0, 2.0], [3.0, 4.0]]), ad.constant([[1.0], [1.0]]))
    np.testing.assert_array_equal(out.data, [[3.0], [7.0]])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ShapeError, match=r"\(2, 3\).*\(2, 3\)"):
        ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))


@pytest.mark.parametrize("seed", SEEDS)
def test_matmul_grad_both_sides(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.normal(size=(3, 4)), rng.normal(size=(4, 2))
    check_grad(lambda v: ad.sum(ad.matmul(v, ad.constant(b))), a)
    check_grad(lambda v: ad.sum(ad.matmul(ad.constant(a), v)), b)


# -------------------------------------------------------------------- relu

def test_relu_values_and_grad():
    np.testing.assert_array_equal(ad.relu(ad.constant([[-1.0, 0.0, 2.0]])).data, [[0, 0, 2]])
    pos = np.array([[0.5, 3.0]])
    np.testing.assert_array_equal(ad.relu(ad.constant(pos)).data, pos)
    x = ad.parameter([[-1.0, 2.0]])
    ad.backward(ad.sum(ad.relu(x)))
    np.testing.assert_array_equal(x.grad, [[0.0, 1.0]])


def test_relu_grad_at_zero_is_zero():
    x = ad.parameter([[0.0]])
    ad.backward(ad.sum(ad.relu(x)))
    assert x.grad[0, 0] == 0.0


# ------------------------------------------------------------ normalisation

def test_l2_normalize_examples():
    np.testing.assert_allclose(ad.l2_normalize_rows(ad.constant([[3.0, 4.0]])).data, [[0.6, 0.8]])
    unit = np.array([[0.0, 1.0, 0.0]])
    np.testing.assert_array_equal(ad.l2_normalize_rows(ad.constant(unit)).data, unit)
    np.testing.assert_array_equal(ad.l2_normalize_rows(ad.constant(np.zeros((1, 3)))).data,
                                  np.zeros((1, 3)))


@pytest.mark.parametrize("seed", SEEDS)
def test_l2_normalize_grad(seed):
    rng = np.random.default_rng(seed)
    x, w = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    check_grad(lambda v: weighted_sum(ad.l2_normalize_rows(v), w), x)


@given(arrays(np.float64, (5, 4), elements=st.floats(-10, 10)))
def test_l2_normalize_rows_unit_or_zero(x):
    out = ad.l2_normalize_rows(ad.constant(x)).data
    norms = np.linalg.norm(out, axis=1)
    zero_rows = np.linalg.norm(x, axis=1) < 1e-12
    assert np.all(np.abs(norms[~zero_rows] - 1.0) < 1e-10)
    assert np.all(norms[zero_rows] <= 1.0 + 1e-10)


# ------------------------------------------------------------------ softmax

def test_softmax_examples():
    np.testing.assert_allclose(ad.softmax_rows(ad.constant([[0.0, 0.0]])).data, [[0.5, 0.5]])
    out = ad.softmax_rows(ad.constant([[1000.0, 0.0]])).data
    assert np.all(np.isfinite(out))
    np.testing.assert_allclose(out, [[1.0, 0.0]], atol=1e-300)


@pytest.mark.parametrize("seed", SEEDS)
def test_softmax_grad(seed):
    rng = np.random.default_rng(seed)
    x, w = rng.normal(size=(3, 5)), rng.normal(size=(3, 5))
    check_grad(lambda v: weighted_sum(ad.softmax_rows(v), w), x)
    check_grad(lambda v: weighted_sum(ad.log_softmax_rows(v), w), x)


@given(arrays(np.float64, (4, 6), elements=st.floats(-700, 700)))
def test_softmax_rows_sum_to_one(x):
    out = ad.softmax_rows(ad.constant(x)).data
    assert np.all(np.abs(out.sum(axis=1) - 1.0) < 1e-12)


# ------------------------------------------------------------ SPD machinery

def test_spd_factor_invariants():
    rng = np.random.default_rng(3)
    s = spd(rng, 5)
    f = SpdFactor(s)
    np.testing.assert_allclose(f.cholesky @ f.cholesky.T, s, atol=1e-10)
    assert np.all(np.diag(f.cholesky) > 0)
    assert f.log_det == pytest.approx(np.linalg.slogdet(s)[1], rel=1e-12)


def test_spd_factor_rejects_indefinite():
    with pytest.raises(NumericalError):
        SpdFactor(np.diag([1.0, -1.0]))


def test_from_covariance_adds_ridge_to_singular():
    f = SpdFactor.from_covariance(np.zeros((3, 3)), ridge=1e-4)
    np.testing.assert_allclose(f.matrix, 1e-4 * np.eye(3))


def test_mahalanobis_examples():
    mu = np.array([1.0, -2.0])
    eye = SpdFactor(np.eye(2))
    assert ad.mahalanobis(ad.constant([mu]), mu, eye).item() == 0.0
    assert ad.mahalanobis(ad.constant([[1.0, 0.0]]), np.zeros(2), eye).item() == pytest.approx(1.0)
    # diag(2, 0.5)^-1 = diag(0.5, 2): 0.5 + 2
    f = SpdFactor(np.diag([2.0, 0.5]))
    assert ad.mahalanobis(ad.constant([[1.0, 1.0]]), np.zeros(2), f).item() == pytest.approx(2.5)


def test_mahalanobis_shape_error():
    with pytest.raises(ShapeError):
        ad.mahalanobis(ad.constant([[1.0, 2.0, 3.0]]), np.zeros(2), SpdFactor(np.eye(2)))


@pytest.mark.parametrize("seed", SEEDS)
def test_mahalanobis_grad_and_reference(seed):
    rng = np.random.default_rng(seed)
    s, mu = spd(rng, 4), rng.normal(size=4)
    f = SpdFactor(s)
    z = rng.normal(size=(6, 4))
    ref = np.array([(r - mu) @ np.linalg.inv(s) @ (r - mu) for r in z])
    np.testing.assert_allclose(ad.mahalanobis_rows(ad.constant(z), mu, f).data[:, 0], ref, rtol=1e-10)
    check_grad(lambda v: ad.sum(ad.mahalanobis_rows(v, mu, f)), z)


@given(arrays(np.float64, (1, 3), elements=st.floats(-5, 5)))
@settings(max_examples=50)
def test_mahalanobis_nonnegative_zero_iff_equal(z):
    rng = np.random.default_rng(0)
    f = SpdFactor(spd(rng, 3))
    mu = np.array([0.3, -0.2, 1.0])
    val = ad.mahalanobis(ad.constant(z), mu, f).item()
    assert val >= 0
    if not np.allclose(z[0], mu):
        assert val > 0


def test_gaussian_pdf_examples():
    one = SpdFactor(np.eye(1))
    assert ad.gaussian_pdf(ad.constant([[0.0]]), np.zeros(1), one).item() == pytest.approx(0.398942, abs=1e-6)
    two = SpdFactor(np.eye(2))
    val = ad.gaussian_pdf(ad.constant([[1.0, 0.0]]), np.zeros(2), two).item()
    assert val == pytest.approx(np.exp(-0.5) / (2 * np.pi), rel=1e-12)
    assert val == pytest.approx(0.096532, abs=1e-6)
    far = ad.gaussian_pdf(ad.constant([[3.0, -4.0]]), np.zeros(2), two).item()
    assert far > 0


@pytest.mark.parametrize("seed", SEEDS)
def test_gaussian_pdf_grad(seed):
    rng = np.random.default_rng(seed)
    f = SpdFactor(spd(rng, 3, jitter=2.0))
    mu = rng.normal(size=3)
    z = mu + 0.5 * rng.normal(size=(1, 3))
    check_grad(lambda v: ad.gaussian_pdf(v, mu, f), z)


# ---------------------------------------------------------------- log-det

def test_logdet_gram_identity():
    assert ad.logdet_gram(ad.constant(np.eye(3))).item() == pytest.approx(3 * np.log(1 + 1e-8), abs=1e-15)


def test_logdet_gram_sixty_degrees():
    a = np.array([1.0, 0.0])
    b = np.array([np.cos(np.pi / 3), np.sin(np.pi / 3)])
    f = np.array([[a @ a, a @ b], [b @ a, b @ b]])
    assert ad.logdet_gram(ad.constant(f)).item() == pytest.approx(np.log(0.75), abs=1e-7)
    assert ad.logdet_gram(ad.constant(f)).item() == pytest.approx(-0.2877, abs=1e-4)


@pytest.mark.parametrize("seed", SEEDS)
def test_logdet_gram_grad(seed):
    rng = np.random.default_rng(seed)
    s = spd(rng, 4)
    # perturb symmetrically: differentiate through a symmetric parametrisation
    check_grad(lambda v: ad.logdet_gram(ad.scale(ad.add(v, ad.swap_last(v)), 0.5)), s, rtol=1e-5)


def test_logdet_gram_batched_matches_single():
    rng = np.random.default_rng(1)
    stack = np.stack([spd(rng, 3) for _ in range(4)])
    out = ad.logdet_gram(ad.constant(stack)).data[:, 0]
    single = [ad.logdet_gram(ad.constant(m)).item() for m in stack]
    np.testing.assert_allclose(out, single, rtol=1e-13)


def test_logdet_gram_reports_failing_minor():
    bad = np.array([[1.0, 0.0], [0.0, -1.0]])
    with pytest.raises(NumericalError, match="leading minor 2"):
        ad.logdet_gram(ad.constant(bad))


@given(arrays(np.float64, (4, 3), elements=st.floats(-3, 3)))
def test_logdet_gram_hadamard_bound(cols):
    norms = np.linalg.norm(cols, axis=0)
    if np.any(norms < 1e-6):
        return
    unit = cols / norms
    val = ad.logdet_gram(ad.constant(unit.T @ unit)).item()
    assert val <= np.log(1 + 1e-8 * 3) + 1e-9


# --------------------------------------------------------------- backward

def test_backward_linear_and_disconnected():
    x = ad.parameter(np.ones((2, 2)))
    ad.backward(ad.sum(x))
    np.testing.assert_array_equal(x.grad, np.ones((2, 2)))
    y = ad.parameter(np.ones((2, 2)))
    ad.backward(ad.sum(ad.constant(np.ones((2, 2)))))
    np.testing.assert_array_equal(y.grad, np.zeros((2, 2)))


def test_backward_accumulates_and_rejects_non_scalar():
    x = ad.parameter(np.ones((1, 3)))
    loss = ad.sum(ad.scale(x, 2.0))
    ad.backward(loss)
    ad.backward(loss)
    np.testing.assert_array_equal(x.grad, 4.0 * np.ones((1, 3)))
    with pytest.raises(ShapeError):
        ad.backward(x)


def test_backward_visits_shared_node_once():
    x = ad.parameter([[2.0]])
    y = ad.mul(x, x)
    loss = ad.sum(ad.add(y, y))
    ad.backward(loss)
    assert x.grad[0, 0] == pytest.approx(8.0)


def test_constant_never_gets_gradient():
    c = ad.constant([[1.0, 2.0]])
    x = ad.parameter([[3.0, 4.0]])
    ad.backward(ad.sum(ad.mul(c, x)))
    np.testing.assert_array_equal(c.grad, 0.0)


@pytest.mark.parametrize("seed", SEEDS)
def test_projection_chain_grad(seed):
    """normalize(relu(h W + b)) composed with a weighted sum, through W."""
    rng = np.random.default_rng(seed)
    h, b = rng.normal(size=(5, 4)), rng.normal(size=(1, 3))
    w = rng.normal(size=(5, 3))
    W = rng.normal(size=(4, 3))

    def build(v):
        return weighted_sum(ad.l2_normalize_rows(ad.relu(ad.matmul(ad.constant(h), v) + b)), w)

    check_grad(build, W, rtol=1e-5)


# ------------------------------------------------------ elementwise plumbing

ELEMENTWISE = {
    "add": lambda v, c: ad.add(v, c),
    "sub": lambda v, c: ad.sub(c, v),
    "mul": lambda v, c: ad.mul(v, c),
    "scale": lambda v, c: ad.scale(v, -1.7),
    "exp": lambda v, c: ad.exp(v),
    "log": lambda v, c: ad.log(ad.exp(v) + 1.0),
    "softplus": lambda v, c: ad.softplus(v),
    "mean_rows": lambda v, c: ad.mean(v, axis=1),
    "sum_cols": lambda v, c: ad.sum(v, axis=0),
    "concat": lambda v, c: ad.concat_cols([v, c, v]),
    "slice": lambda v, c: ad.slice_cols(v, 1, 3),
    "take_rows": lambda v, c: ad.take_rows(v, [2, 0, 2]),
    "reshape": lambda v, c: ad.reshape(v, (4, 3)),
    "dropout": lambda v, c: ad.dropout_apply(v, np.array([[1, 0, 1, 1]] * 3, bool), 0.25),
    "broadcast_add": lambda v, c: ad.add(v, ad.constant(np.ones((1, 4)))),
}


@pytest.mark.parametrize("name", sorted(ELEMENTWISE))
@pytest.mark.parametrize("seed", SEEDS)
def test_elementwise_grads(name, seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(3, 4))
    c = ad.constant(rng.normal(size=(3, 4)))
    op = ELEMENTWISE[name]
    w = rng.normal(size=op(ad.constant(x), c).shape)
    check_grad(lambda v: weighted_sum(op(v, c), w), x)


def test_dropout_mask_scaling():
    out = ad.dropout_apply(ad.constant(np.ones((1, 4))), np.array([[1, 0, 1, 0]], bool), 0.5)
    np.testing.assert_array_equal(out.data, [[2.0, 0.0, 2.0, 0.0]])


@pytest.mark.parametrize("seed", SEEDS)
def test_batched_gram_and_exp_normalize_grad(seed):
    rng = np.random.default_rng(seed)
    x = rng.normal(size=(2, 3, 3))
    w = rng.normal(size=(2, 3, 3))
    check_grad(lambda v: weighted_sum(ad.batched_gram(v), w), x)
    check_grad(lambda v: weighted_sum(ad.exp_normalize_last(v), w), x)


def test_exp_normalize_matches_direct_and_guards_underflow():
    lx = np.log(np.array([[[3.0, 4.0], [1.0, 1.0]]]))
    out = ad.exp_normalize_last(ad.constant(lx)).data
    np.testing.assert_allclose(out[0, 0], [0.6, 0.8])
    np.testing.assert_allclose(out[0, 1], [2 ** -0.5, 2 ** -0.5])
    dead = np.full((1, 2, 2), -1000.0)
    v = ad.parameter(dead)
    out = ad.exp_normalize_last(v)
    np.testing.assert_array_equal(out.data[0], np.eye(2))
    ad.backward(ad.sum(ad.reshape(out, (1, 4))))
    np.testing.assert_array_equal(v.grad, 0.0)


# ------------------------------------------------------------ edge kernels

def _random_edges(rng, n, e):
    return EdgeIndex(n, rng.integers(0, n, e), rng.integers(0, n, e))


@pytest.mark.parametrize("seed", SEEDS)
def test_edge_block_dot_reference_and_grad(seed):
    rng = np.random.default_rng(seed)
    edges = _random_edges(rng, 5, 9)
    z, c = rng.normal(size=(5, 6)), rng.normal(size=(5, 6))
    out = ad.edge_block_dot(ad.constant(z), ad.constant(c), edges, 3).data
    for e, (s, d) in enumerate(zip(edges.src, edges.dst)):
        for m in range(3):
            assert out[e, m] == pytest.approx(z[s, 2 * m:2 * m + 2] @ c[d, 2 * m:2 * m + 2], rel=1e-12)
    w = rng.normal(size=out.shape)
    check_grad(lambda v: weighted_sum(ad.edge_block_dot(v, ad.constant(c), edges, 3), w), z)
    check_grad(lambda v: weighted_sum(ad.edge_block_dot(ad.constant(z), v, edges, 3), w), c)


@pytest.mark.parametrize("seed", SEEDS)
def test_edge_block_scatter_reference_and_grad(seed):
    rng = np.random.default_rng(seed)
    edges = _random_edges(rng, 4, 8)
    p, z = rng.random((8, 2)), rng.normal(size=(4, 6))
    out = ad.edge_block_scatter(ad.constant(p), ad.constant(z), edges).data
    ref = np.zeros_like(z)
    for e, (s, d) in enumerate(zip(edges.src, edges.dst)):
        ref[d] += np.repeat(p[e], 3) * z[s]
    np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-14)
    w = rng.normal(size=out.shape)
    check_grad(lambda v: weighted_sum(ad.edge_block_scatter(v, ad.constant(z), edges), w), p)
    check_grad(lambda v: weighted_sum(ad.edge_block_scatter(ad.constant(p), v, edges), w), z)
