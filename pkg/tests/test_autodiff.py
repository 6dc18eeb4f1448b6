import math
import threading

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from hapkit import autodiff as ad
from hapkit.errors import NonFiniteError, ShapeError

from conftest import fd_gradient, fd_hvp, flat, random_small_model

DUMMY = (np.zeros((1, 1)), np.zeros((1, 1)))


def half_sq_norm(ps, x, y):
    return ad.scale(ad.sum_all(ad.mul(ps[0], ps[0])), 0.5)


def diag_quadratic(d):
    d = np.asarray(d, dtype=float)

    def fn(ps, x, y):
        return ad.scale(ad.sum_all(ad.mul(ad.mul(ps[0], ps[0]), ad.constant(d))), 0.5)

    return fn


def mlp_fn(ps, x, y):
    h = ad.relu(ad.add(ad.matmul(ad.constant(x), ps[0]), ps[1]))
    return ad.cross_entropy(ad.add(ad.matmul(h, ps[2]), ps[3]), y)


def mlp_params(rng, sizes=(3, 5, 4)):
    a, b, c = sizes
    return [rng.normal(size=(a, b)), rng.normal(size=b) * 0.1, rng.normal(size=(b, c)), rng.normal(size=c) * 0.1]


def mlp_batch(rng, n=8, sizes=(3, 5, 4)):
    return rng.normal(size=(n, sizes[0])), np.eye(sizes[2])[rng.integers(0, sizes[2], n)]


# -- forward ---------------------------------------------------------------


def test_mse_of_zero_model_on_zero_targets_is_zero():
    fn = lambda ps, x, y: ad.mse(ad.mul(ad.constant(x), ps[0]), y)  # noqa: E731
    loss, _ = ad.forward(fn, [np.zeros(1)], (np.ones((4, 1)), np.zeros((4, 1))))
    assert loss == 0.0


def test_single_linear_unit_mse_by_hand():
    fn = lambda ps, x, y: ad.mse(ad.mul(ad.constant(x), ps[0]), y)  # noqa: E731
    loss, _ = ad.forward(fn, [np.array([2.0])], (np.ones((1, 1)), np.zeros((1, 1))))
    assert loss == 2.0


def test_uniform_logits_cross_entropy_is_log_k():
    fn = lambda ps, x, y: ad.cross_entropy(ad.mul(ad.constant(x), ps[0]), y)  # noqa: E731
    targets = np.eye(4)[[0, 1, 2, 3, 1]]
    loss, _ = ad.forward(fn, [np.zeros(4)], (np.ones((5, 4)), targets))
    assert loss == pytest.approx(math.log(4), abs=1e-15)
    assert loss == pytest.approx(1.3863, abs=1e-4)


def test_forward_is_mean_over_examples(rng):
    params = mlp_params(rng)
    X, Y = mlp_batch(rng, n=6)
    full, _ = ad.forward(mlp_fn, params, (X, Y))
    singles = [ad.forward(mlp_fn, params, (X[i:i + 1], Y[i:i + 1]))[0] for i in range(6)]
    assert full == pytest.approx(np.mean(singles), rel=1e-12)


def test_forward_rejects_empty_batch_and_bad_shapes(rng):
    with pytest.raises(ShapeError):
        ad.forward(mlp_fn, mlp_params(rng), (np.zeros((0, 3)), np.zeros((0, 4))))
    fn = lambda ps, x, y: half_sq_norm(ps, x, y)  # noqa: E731
    fn.param_shapes = [(2,)]
    with pytest.raises(ShapeError):
        ad.forward(fn, [np.zeros(3)], DUMMY)


def test_non_finite_loss_raises():
    fn = lambda ps, x, y: ad.cross_entropy(ad.mul(ad.constant(x), ps[0]), y)  # noqa: E731
    with pytest.raises(NonFiniteError):
        ad.forward(fn, [np.array([np.inf, 0.0])], (np.ones((1, 2)), np.eye(2)[:1]))


def test_replay_is_bitwise_deterministic(rng):
    params = mlp_params(rng)
    batch = mlp_batch(rng)
    l1, t1 = ad.forward(mlp_fn, params, batch)
    l2, t2 = ad.forward(mlp_fn, params, batch)
    assert l1 == l2
    assert all(np.array_equal(a, b) for a, b in zip(ad.gradient(t1), ad.gradient(t2)))
    v = [rng.normal(size=p.shape) for p in params]
    assert np.array_equal(flat(ad.hvp(t1, v)), flat(ad.hvp(t2, v)))


def test_tape_is_topologically_ordered(rng):
    _, tape = ad.forward(mlp_fn, mlp_params(rng), mlp_batch(rng))
    position = {n.uid: i for i, n in enumerate(tape.nodes)}
    for node in tape.nodes:
        for parent in node.parents:
            if parent.uid in position:
                assert position[parent.uid] < position[node.uid]
    assert tape.output_id == tape.nodes[-1].uid
    assert len(tape.param_ids) == 4


# -- gradient --------------------------------------------------------------


def test_gradient_of_half_sq_norm_is_w():
    _, tape = ad.forward(half_sq_norm, [np.array([3.0, 4.0])], DUMMY)
    np.testing.assert_array_equal(ad.gradient(tape)[0], [3.0, 4.0])


def test_gradient_vanishes_at_quadratic_minimum():
    _, tape = ad.forward(half_sq_norm, [np.zeros(3)], DUMMY)
    np.testing.assert_array_equal(ad.gradient(tape)[0], np.zeros(3))


def test_gradient_matches_finite_differences_on_mlp(rng):
    for _ in range(3):
        params = mlp_params(rng)
        batch = mlp_batch(rng)
        g = flat(ad.gradient(ad.forward(mlp_fn, params, batch)[1]))
        fd = fd_gradient(mlp_fn, params, batch)
        assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-6


@pytest.mark.parametrize("seed", range(10))
def test_gradient_matches_finite_differences_across_layer_types(seed):
    model, batch = random_small_model(seed)
    g = flat(ad.gradient(ad.forward(model.loss_fn, model.params, batch)[1]))
    fd = fd_gradient(model.loss_fn, model.params, batch)
    assert np.linalg.norm(g - fd) / np.linalg.norm(fd) < 1e-5


def test_gradient_rejects_non_scalar_root():
    x = ad.Node(np.ones(3), requires_grad=True)
    with pytest.raises(ShapeError):
        ad.backward(ad.mul(x, x), [x])


# -- hvp -------------------------------------------------------------------


def test_hvp_of_identity_hessian_returns_v(rng):
    _, tape = ad.forward(half_sq_norm, [rng.normal(size=5)], DUMMY)
    v = rng.normal(size=5)
    np.testing.assert_allclose(ad.hvp(tape, [v])[0], v, rtol=0, atol=1e-15)


def test_hvp_diagonal_quadratic():
    _, tape = ad.forward(diag_quadratic([1.0, 2.0]), [np.array([0.3, -0.7])], DUMMY)
    np.testing.assert_allclose(ad.hvp(tape, [np.ones(2)])[0], [1.0, 2.0], atol=1e-15)


def test_hvp_matches_finite_differences_on_mlp(rng):
    params = mlp_params(rng)
    batch = mlp_batch(rng)
    _, tape = ad.forward(mlp_fn, params, batch)
    v = [rng.normal(size=p.shape) for p in params]
    hv = flat(ad.hvp(tape, v))
    fd = fd_hvp(mlp_fn, params, batch, v)
    assert np.linalg.norm(hv - fd) / np.linalg.norm(fd) < 1e-5


def test_hvp_rejects_mismatched_direction(rng):
    _, tape = ad.forward(half_sq_norm, [np.zeros(3)], DUMMY)
    with pytest.raises(ShapeError):
        ad.hvp(tape, [np.zeros(4)])
    with pytest.raises(ShapeError):
        ad.hvp(tape, [np.zeros(3), np.zeros(3)])


def test_relu_curvature_is_zero_and_kink_gradient_is_zero():
    fn = lambda ps, x, y: ad.sum_all(ad.relu(ps[0]))  # noqa: E731
    _, tape = ad.forward(fn, [np.array([-1.0, 0.0, 2.0])], DUMMY)
    np.testing.assert_array_equal(ad.gradient(tape)[0], [0.0, 0.0, 1.0])
    np.testing.assert_array_equal(ad.hvp(tape, [np.ones(3)])[0], np.zeros(3))


@settings(max_examples=25, deadline=None)
@given(st.integers(0, 10_000), st.floats(-3, 3), st.floats(-3, 3))
def test_hvp_is_linear_in_v(seed, a, b):
    model, batch = random_small_model(seed)
    rng = np.random.default_rng(seed)
    _, tape = ad.forward(model.loss_fn, model.params, batch)
    v1 = [rng.normal(size=p.shape) for p in model.params]
    v2 = [rng.normal(size=p.shape) for p in model.params]
    combo = flat(ad.hvp(tape, [a * x + b * y for x, y in zip(v1, v2)]))
    separate = a * flat(ad.hvp(tape, v1)) + b * flat(ad.hvp(tape, v2))
    assert np.max(np.abs(combo - separate)) <= 1e-10 * max(1.0, np.max(np.abs(separate)))


@pytest.mark.parametrize("seed", range(8))
def test_hessian_symmetry(seed):
    model, batch = random_small_model(seed)
    rng = np.random.default_rng(seed + 100)
    _, tape = ad.forward(model.loss_fn, model.params, batch)
    u = [rng.normal(size=p.shape) for p in model.params]
    v = [rng.normal(size=p.shape) for p in model.params]
    uHv = np.dot(flat(u), flat(ad.hvp(tape, v)))
    vHu = np.dot(flat(v), flat(ad.hvp(tape, u)))
    assert abs(uHv - vHu) < 1e-8


# -- quadratic form --------------------------------------------------------


def test_quadratic_form_identity():
    _, tape = ad.forward(half_sq_norm, [np.array([0.1, 0.2, 0.3])], DUMMY)
    assert ad.quadratic_form(tape, [np.ones(3)]) == pytest.approx(3.0, abs=1e-14)


def test_quadratic_form_sums_diagonal():
    _, tape = ad.forward(diag_quadratic([1, 2, 3, 4]), [np.ones(4)], DUMMY)
    assert ad.quadratic_form(tape, [np.ones(4)]) == pytest.approx(10.0, abs=1e-13)


def test_quadratic_form_equals_inner_product_with_hvp(rng):
    model, batch = random_small_model(2)
    _, tape = ad.forward(model.loss_fn, model.params, batch)
    v = [rng.normal(size=p.shape) for p in model.params]
    assert ad.quadratic_form(tape, v) == pytest.approx(np.dot(flat(v), flat(ad.hvp(tape, v))), rel=1e-12)


def test_quadratic_form_nonnegative_at_convex_minimum(rng):
    # least squares is convex; solve it exactly, then probe the curvature
    X = rng.normal(size=(40, 3))
    Y = X @ rng.normal(size=(3, 2)) + 0.1 * rng.normal(size=(40, 2))
    W = np.linalg.lstsq(X, Y, rcond=None)[0]
    fn = lambda ps, x, y: ad.mse(ad.matmul(ad.constant(x), ps[0]), y)  # noqa: E731
    _, tape = ad.forward(fn, [W], (X, Y))
    assert np.abs(ad.gradient(tape)[0]).max() < 1e-12
    for _ in range(100):
        assert ad.quadratic_form(tape, [rng.normal(size=W.shape)]) >= 0.0


# -- primitives and concurrency --------------------------------------------


def test_conv2d_matches_direct_loops(rng):
    x = rng.normal(size=(2, 3, 5, 5))
    w = rng.normal(size=(4, 3, 3, 3))
    b = rng.normal(size=4)
    for padding in ("same", "valid"):
        pad = 1 if padding == "same" else 0
        xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
        ho = xp.shape[2] - 2
        ref = np.zeros((2, 4, ho, ho))
        for i in range(ho):
            for j in range(ho):
                ref[:, :, i, j] = np.einsum("ncij,ocij->no", xp[:, :, i:i + 3, j:j + 3], w) + b
        out = ad.conv2d(ad.constant(x), ad.constant(w), ad.constant(b), padding).data
        np.testing.assert_allclose(out, ref, rtol=1e-12, atol=1e-12)


def test_conv_and_pool_gradients_match_finite_differences(rng):
    x = rng.normal(size=(2, 2, 4, 4))

    def fn(ps, inputs, y):
        h = ad.relu(ad.conv2d(ad.constant(inputs), ps[0], ps[1], "valid"))
        return ad.sum_all(ad.mul(ad.avg_pool(h, 2), ad.avg_pool(h, 2)))

    params = [rng.normal(size=(3, 2, 3, 3)), rng.normal(size=3)]
    batch = (x, np.zeros((2, 1)))
    g = flat(ad.gradient(ad.forward(fn, params, batch)[1]))
    assert np.linalg.norm(g - fd_gradient(fn, params, batch)) / np.linalg.norm(g) < 1e-6


def test_softmax_rows_sum_to_one(rng):
    s = ad.softmax(ad.constant(rng.normal(size=(4, 6)) * 50)).data
    np.testing.assert_allclose(s.sum(axis=1), 1.0, atol=1e-14)


def test_shape_errors():
    with pytest.raises(ShapeError):
        ad.matmul(ad.constant(np.ones((2, 3))), ad.constant(np.ones((2, 3))))
    with pytest.raises(ShapeError):
        ad.conv2d(ad.constant(np.ones((1, 2, 4, 4))), ad.constant(np.ones((1, 3, 3, 3))))
    with pytest.raises(ShapeError):
        ad.avg_pool(ad.constant(np.ones((1, 1, 5, 5))), 2)
    with pytest.raises(ShapeError):
        ad.cross_entropy(ad.constant(np.ones((2, 3))), np.ones((2, 4)))


def test_concurrent_hvps_on_shared_tape_agree(rng):
    model, batch = random_small_model(2)
    _, tape = ad.forward(model.loss_fn, model.params, batch)
    vs = [[rng.normal(size=p.shape) for p in model.params] for _ in range(8)]
    expected = [flat(ad.hvp(tape, v)) for v in vs]
    results = [None] * len(vs)

    def work(i):
        results[i] = flat(ad.hvp(tape, vs[i]))

    threads = [threading.Thread(target=work, args=(i,)) for i in range(len(vs))]
    for t in threads:
        t.start()
    for t in threads:
        t.join()
    for got, want in zip(results, expected):
        np.testing.assert_array_equal(got, want)


def test_no_grad_records_nothing():
    x = ad.Node(np.ones(2), requires_grad=True)
    with ad.no_grad():
        y = ad.mul(x, x)
    assert not y.requires_grad and y.parents == ()
