import numpy as np
import pytest

from robinlab import autodiff as ad

from fd import ad_gradient, check_grad, fd_gradient, max_rel_err

RNG = np.random.default_rng(20240811)


def rand(*shape, lo=-2.0, hi=2.0):
    return RNG.uniform(lo, hi, shape)


# ---------------------------------------------------------------------------
# forward values
# ---------------------------------------------------------------------------

def test_matmul_identity():
    m = rand(2, 2)
    out = ad.matmul(ad.constant(np.eye(2)), ad.constant(m))
    np.testing.assert_array_equal(out.data, m)


def test_matmul_hand():
    out = ad.matmul(ad.constant([[1.0, 2.0]]), ad.constant([[3.0], [4.0]]))
    np.testing.assert_array_equal(out.data, [[11.0]])


def test_matmul_shape_error_names_shapes():
    with pytest.raises(ad.DimensionError, match=r"\(2, 3\).*\(2, 2\)"):
        ad.matmul(ad.constant(np.zeros((2, 3))), ad.constant(np.zeros((2, 2))))


def test_relu_values():
    out = ad.relu(ad.constant([-1.0, 0.0, 2.0]))
    np.testing.assert_array_equal(out.data, [0.0, 0.0, 2.0])


def test_sigmoid_of_zero():
    assert ad.sigmoid(ad.constant([0.0])).data[0] == 0.5


def test_sigmoid_extreme_inputs_stay_finite():
    out = ad.sigmoid(ad.constant([-800.0, 800.0])).data
    assert out[0] == 0.0 and out[1] == 1.0


def test_elementwise_shape_mismatch():
    with pytest.raises(ad.DimensionError):
        ad.add(ad.constant([1.0, 2.0]), ad.constant([1.0, 2.0, 3.0]))


def test_uniform_logits_cross_entropy_is_log_k():
    logits = ad.constant(np.zeros((3, 4)))
    loss = ad.softmax_cross_entropy(logits, np.array([0, 1, 3]))
    assert abs(loss.item() - np.log(4.0)) < 1e-12


def test_large_margin_cross_entropy_goes_to_zero():
    logits = np.zeros((2, 3))
    logits[np.arange(2), [1, 2]] = 80.0
    loss = ad.softmax_cross_entropy(ad.constant(logits), np.array([1, 2]))
    assert loss.item() < 1e-30


def test_cross_entropy_label_out_of_range():
    with pytest.raises(IndexError):
        ad.softmax_cross_entropy(ad.constant(np.zeros((2, 3))), np.array([0, 3]))


def test_kl_of_identical_logits_is_zero():
    z = rand(4, 5)
    assert ad.kl_divergence(ad.constant(z), ad.constant(z)).item() == 0.0


def test_kl_against_direct_summation():
    p_logits = np.zeros((1, 4))                      # uniform
    q_logits = np.array([[8.0, 0.0, 0.0, 0.0]])      # concentrated
    got = ad.kl_divergence(ad.constant(p_logits), ad.constant(q_logits)).item()
    p = np.exp(p_logits[0]) / np.exp(p_logits[0]).sum()
    q = np.exp(q_logits[0]) / np.exp(q_logits[0]).sum()
    want = float((p * np.log(p / q)).sum())
    assert abs(got - want) < 1e-12
    assert got > 0.0


def test_softmax_rows_sum_to_one_and_nonnegative():
    for _ in range(50):
        z = rand(6, 5, lo=-30, hi=30)
        p = ad.softmax_rows(z)
        assert (p >= 0).all()
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-12)


def test_kl_nonnegative_on_random_inputs():
    for _ in range(100):
        p = ad.constant(rand(3, 4, lo=-5, hi=5))
        q = ad.constant(rand(3, 4, lo=-5, hi=5))
        assert ad.kl_divergence(p, q).item() >= -1e-12


def test_forward_determinism_bit_identical():
    a, b = rand(7, 3), rand(3, 2)
    one = ad.matmul(ad.constant(a), ad.constant(b)).data
    two = ad.matmul(ad.constant(a), ad.constant(b)).data
    np.testing.assert_array_equal(one, two)


def test_overflow_to_infinity_is_an_error():
    with np.errstate(over="ignore"), pytest.raises(ad.NonFiniteError):
        ad.mul(ad.constant([1e308]), ad.constant([1e308]))


def test_pair_logits_matches_sigmoid():
    z = rand(5, 1)
    pair = ad.pair_logits(ad.constant(z))
    p = ad.softmax_rows(pair.data)
    np.testing.assert_allclose(p[:, 1], ad.sigmoid_np(z[:, 0]), atol=1e-12)


def test_hstack_concatenates_columns():
    a, b = rand(3, 2), rand(3, 1)
    out = ad.hstack([ad.constant(a), ad.constant(b)])
    np.testing.assert_array_equal(out.data, np.concatenate([a, b], axis=1))


def test_take_per_row():
    z = rand(4, 3)
    idx = np.array([2, 0, 1, 2])
    out = ad.take_per_row(ad.constant(z), idx)
    np.testing.assert_array_equal(out.data, z[np.arange(4), idx])


def test_cw_hinge_values():
    logits = np.array([[3.0, 1.0, 0.0], [0.0, 5.0, 9.0]])
    f = ad.cw_hinge(ad.constant(logits), np.array([0, 1]), kappa=0.0)
    np.testing.assert_allclose(f.data, [2.0, 0.0])
    f2 = ad.cw_hinge(ad.constant(logits), np.array([0, 1]), kappa=1.5)
    np.testing.assert_allclose(f2.data, [2.0, -1.5])


def test_mart_bce_uniform_binary():
    # uniform 2-class prediction: -log .5 - log .5 = 2 ln 2
    loss = ad.mart_bce(ad.constant(np.zeros((3, 2))), np.array([0, 1, 0]))
    assert abs(loss.item() - 2.0 * np.log(2.0)) < 1e-12


# ---------------------------------------------------------------------------
# backward rules vs finite differences
# ---------------------------------------------------------------------------

def test_backward_of_sum_is_ones():
    x = ad.tensor(rand(3, 4), requires_grad=True)
    ad.backward(ad.sum_all(x))
    np.testing.assert_array_equal(x.grad, np.ones((3, 4)))


def test_backward_of_half_square_norm_is_x():
    data = rand(5)
    x = ad.tensor(data, requires_grad=True)
    ad.backward(ad.scale(ad.sum_all(ad.mul(x, x)), 0.5))
    np.testing.assert_allclose(x.grad, data, atol=1e-12)


def test_matmul_backward_matches_fd():
    a0, b0, w = rand(3, 4), rand(4, 2), rand(3, 2)
    check_grad(lambda a: ad.sum_all(ad.mul(ad.matmul(a, ad.constant(b0)),
                                           ad.constant(w))), a0)
    check_grad(lambda b: ad.sum_all(ad.matmul(ad.constant(a0), b)), b0)


def test_tanh_backward_matches_fd():
    w = rand(6)
    check_grad(lambda t: ad.sum_all(ad.mul(ad.tanh(t), ad.constant(w))), rand(6))


def test_sigmoid_backward_matches_fd():
    w = rand(6)
    check_grad(lambda t: ad.sum_all(ad.mul(ad.sigmoid(t), ad.constant(w))), rand(6))


def test_relu_backward_matches_fd_away_from_kink():
    x, w = rand(8), rand(8)
    x[np.abs(x) < 0.05] = 0.5
    check_grad(lambda t: ad.sum_all(ad.mul(ad.relu(t), ad.constant(w))), x)


def test_cross_entropy_backward_matches_fd():
    y = np.array([0, 2])
    check_grad(lambda t: ad.softmax_cross_entropy(t, y), rand(2, 3))


def test_kl_backward_matches_fd_both_sides():
    p0, q0 = rand(3, 4), rand(3, 4)
    check_grad(lambda p: ad.kl_divergence(p, ad.constant(q0)), p0)
    check_grad(lambda q: ad.kl_divergence(ad.constant(p0), q), q0)


def test_conv2d_backward_matches_fd():
    x0, w0, b0 = rand(2, 2, 5, 5), rand(3, 2, 3, 3), rand(3)
    mix_plain = rand(2, 3, 3, 3)
    mix_padded = rand(2, 3, 5, 5)
    check_grad(lambda x: ad.sum_all(ad.mul(
        ad.conv2d(x, ad.constant(w0), ad.constant(b0)), ad.constant(mix_plain))), x0)
    check_grad(lambda w: ad.sum_all(ad.mul(
        ad.conv2d(ad.constant(x0), w, ad.constant(b0), padding=1),
        ad.constant(mix_padded))), w0)
    check_grad(lambda b: ad.sum_all(
        ad.conv2d(ad.constant(x0), ad.constant(w0), b)), b0)


def test_add_bias_backward_matches_fd():
    x0, b0 = rand(4, 3), rand(3)
    weight = rand(4, 3)  # fixed mixing weights, sampled once
    check_grad(lambda x: ad.sum_all(ad.mul(ad.add_bias(x, ad.constant(b0)),
                                           ad.constant(weight))), x0)
    check_grad(lambda b: ad.sum_all(ad.mul(ad.add_bias(ad.constant(x0), b),
                                           ad.constant(weight))), b0)


def test_structural_ops_backward_match_fd():
    x0 = rand(2, 6)
    w = rand(2, 3, 2)
    w2 = rand(2)
    check_grad(lambda x: ad.sum_all(ad.mul(ad.reshape(x, (2, 3, 2)),
                                           ad.constant(w))), x0)
    check_grad(lambda x: ad.sum_all(ad.mul(ad.sum_per_example(x),
                                           ad.constant(w2))), x0)
    z0 = rand(4, 1)
    check_grad(lambda z: ad.softmax_cross_entropy(ad.pair_logits(z),
                                                  np.array([0, 1, 1, 0])), z0)
    w3 = rand(2)
    check_grad(lambda z: ad.sum_all(ad.mul(
        ad.take_per_row(z, np.array([1, 0])), ad.constant(w3))), rand(2, 3))


def test_cw_hinge_backward_matches_fd():
    z0 = np.array([[2.0, 0.2, -1.0], [0.1, 1.4, 0.4]])  # clear of the hinge
    y = np.array([0, 2])
    w = rand(2)
    check_grad(lambda z: ad.sum_all(ad.mul(ad.cw_hinge(z, y, kappa=0.0),
                                           ad.constant(w))), z0)


def test_mart_bce_backward_matches_fd():
    z0 = np.array([[1.5, 0.2, -0.8], [-0.4, 0.9, 0.1], [2.0, 0.5, 0.4]])
    y = np.array([0, 1, 2])
    check_grad(lambda z: ad.mart_bce(z, y), z0)


def test_true_class_prob_backward_matches_fd():
    y = np.array([1, 0, 2])
    w = rand(3)
    check_grad(lambda z: ad.sum_all(ad.mul(ad.true_class_prob(z, y),
                                           ad.constant(w))), rand(3, 3))


def test_two_layer_mlp_full_gradient_vs_fd():
    w1, b1, w2, b2 = rand(3, 8), rand(8), rand(8, 2), rand(2)
    x = rand(4, 3)
    y = np.array([0, 1, 1, 0])

    def loss_at(w1v, b1v, w2v, b2v):
        h = ad.relu(ad.add_bias(ad.matmul(ad.constant(x), w1v), b1v))
        return ad.softmax_cross_entropy(ad.add_bias(ad.matmul(h, w2v), b2v), y)

    tensors = [ad.tensor(v, requires_grad=True) for v in (w1, b1, w2, b2)]
    ad.backward(loss_at(*tensors))
    got = np.concatenate([t.grad.ravel() for t in tensors])

    def value(theta):
        parts, offset = [], 0
        for ref in (w1, b1, w2, b2):
            parts.append(ad.constant(theta[offset:offset + ref.size].reshape(ref.shape)))
            offset += ref.size
        return loss_at(*parts).item()

    theta0 = np.concatenate([v.ravel() for v in (w1, b1, w2, b2)])
    want = fd_gradient(value, theta0)
    assert max_rel_err(got, want) < 1e-5


def test_grad_accumulates_across_multiple_uses():
    x = ad.tensor([3.0], requires_grad=True)
    ad.backward(ad.sum_all(ad.mul(x, x)))       # d/dx x^2 = 2x
    np.testing.assert_allclose(x.grad, [6.0])


# ---------------------------------------------------------------------------
# tape discipline
# ---------------------------------------------------------------------------

def test_backward_rejects_non_scalar():
    x = ad.tensor(rand(3), requires_grad=True)
    with pytest.raises(ad.TapeError, match="scalar"):
        ad.backward(ad.mul(x, x))


def test_backward_rejects_detached_tensor():
    with pytest.raises(ad.TapeError, match="detached"):
        ad.backward(ad.tensor(1.0, requires_grad=True))


def test_repeated_backward_is_an_error():
    x = ad.tensor(rand(3), requires_grad=True)
    loss = ad.sum_all(ad.mul(x, x))
    ad.backward(loss)
    with pytest.raises(ad.TapeError, match="consumed"):
        ad.backward(loss)


def test_every_requires_grad_ancestor_gets_a_grad():
    x = ad.tensor(rand(2, 2), requires_grad=True)
    mid = ad.relu(x)
    loss = ad.sum_all(mid)
    ad.backward(loss)
    assert x.grad is not None and mid.grad is not None and loss.grad is not None


def test_no_recording_without_requires_grad():
    out = ad.mul(ad.constant([1.0]), ad.constant([2.0]))
    assert out._tape is None and not out.requires_grad


def test_cross_entropy_gradients_on_many_random_instances():
    rng = np.random.default_rng(7)
    for _ in range(40):
        n, k = int(rng.integers(1, 5)), int(rng.integers(2, 6))
        z = rng.normal(size=(n, k))
        y = rng.integers(0, k, size=n)
        check_grad(lambda t: ad.softmax_cross_entropy(t, y), z, tol=1e-5)
