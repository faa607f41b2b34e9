import numpy as np
import pytest

from screenalign import autodiff as ad

from conftest import assert_grads_match_dual, fd_gradient, worst_grad_err


def t(data, requires_grad=False, dtype=np.float64):
    return ad.Tensor(np.asarray(data, dtype=dtype), requires_grad=requires_grad, dtype=dtype)


class TestMatmul:
    def test_identity(self):
        a = t([[1.0, 2.0], [3.0, 4.0]])
        eye = t(np.eye(2))
        assert np.array_equal(ad.matmul(a, eye).data, a.data)

    def test_hand_product(self):
        a = t([[1.0, 2.0], [3.0, 4.0]])
        b = t([[1.0], [1.0]])
        assert np.array_equal(ad.matmul(a, b).data, [[3.0], [7.0]])

    def test_shape_mismatch(self):
        with pytest.raises(ValueError):
            ad.matmul(t(np.ones((2, 3))), t(np.ones((2, 3))))

    def test_grad_of_sum_is_broadcast_of_b_sums(self):
        rng = np.random.default_rng(1)
        a = t(rng.normal(size=(3, 4)), requires_grad=True)
        b = t(rng.normal(size=(4, 2)))
        ad.backward(ad.sum_all(ad.matmul(a, b)))
        expected = np.tile(b.data.sum(axis=1), (3, 1))
        assert np.allclose(a.grad, expected)
        # and the independent oracle agrees (f64, h = 1e-4)
        _, numeric = fd_gradient(lambda: ad.sum_all(ad.matmul(a, b)), a, h=1e-4)
        assert worst_grad_err(a.grad.ravel(), numeric, atol=1e-10) < 1e-5


class TestSoftmax:
    def test_equal_row_uniform(self):
        for n in (2, 5, 9):
            out = ad.softmax_rows(t(np.zeros((1, n)))).data
            assert np.allclose(out, 1.0 / n)

    def test_hand_values(self):
        out = ad.softmax_rows(t([[0.0, np.log(3.0)]])).data
        assert np.allclose(out, [[0.25, 0.75]], atol=1e-12)

    def test_shift_invariance(self):
        rng = np.random.default_rng(2)
        x = rng.normal(size=(4, 6))
        a = ad.softmax_rows(t(x)).data
        b = ad.softmax_rows(t(x + 13.7)).data
        assert np.allclose(a, b, atol=1e-12)

    def test_rows_sum_to_one(self):
        rng = np.random.default_rng(3)
        out = ad.softmax_rows(ad.Tensor(rng.normal(size=(8, 11)).astype(np.float32))).data
        assert np.abs(out.sum(axis=1) - 1.0).max() < 1e-6

    def test_no_nan_at_extremes(self):
        x = t([[-80.0, 0.0, 80.0], [80.0, 80.0, -80.0]])
        for fn in (ad.softmax_rows, ad.log_softmax_rows):
            assert np.isfinite(fn(x).data).all()


class TestLayerNorm:
    def gb(self, d):
        return t(np.ones((1, d)), requires_grad=True), t(np.zeros((1, d)), requires_grad=True)

    def test_constant_row_zeros(self):
        gain, bias = self.gb(4)
        out = ad.layer_norm(t(np.full((1, 4), 3.0)), gain, bias).data
        assert np.allclose(out, 0.0)

    def test_hand_row(self):
        gain, bias = self.gb(2)
        out = ad.layer_norm(t([[1.0, 3.0]]), gain, bias, eps=1e-12).data
        assert np.allclose(out, [[-1.0, 1.0]], atol=1e-5)

    def test_output_mean_tracks_bias_mean(self):
        rng = np.random.default_rng(4)
        gain = t(np.ones((1, 16)))
        bias = t(rng.normal(size=(1, 16)))
        out = ad.layer_norm(t(rng.normal(size=(7, 16))), gain, bias).data
        assert np.abs(out.mean(axis=1) - bias.data.mean()).max() < 1e-5


class TestCosineSimMatrix:
    def test_self_similarity_diag(self):
        rng = np.random.default_rng(5)
        p = rng.normal(size=(4, 8))
        p /= np.linalg.norm(p, axis=1, keepdims=True)
        s = ad.cosine_sim_matrix(t(p), t(p)).data
        assert np.allclose(np.diag(s), 1.0, atol=1e-12)
        assert s.min() >= -1.0 - 1e-12 and s.max() <= 1.0 + 1e-12

    def test_orthogonal_rows(self):
        p = t([[1.0, 0.0]])
        q = t([[0.0, 1.0]])
        assert abs(ad.cosine_sim_matrix(p, q).item()) < 1e-12

    def test_scale_invariance(self):
        rng = np.random.default_rng(6)
        p = rng.normal(size=(3, 5))
        q = rng.normal(size=(4, 5))
        s1 = ad.cosine_sim_matrix(t(p), t(q)).data
        p2 = p.copy()
        p2[1] *= 5.0
        s2 = ad.cosine_sim_matrix(t(p2), t(q)).data
        assert np.allclose(s1, s2, atol=1e-12)

    def test_zero_norm_row_rejected(self):
        with pytest.raises(ValueError):
            ad.cosine_sim_matrix(t([[0.0, 0.0]]), t([[1.0, 0.0]]))


class TestBackward:
    def test_sum_gradient_is_ones(self):
        x = t(np.arange(6.0).reshape(2, 3), requires_grad=True)
        ad.backward(ad.sum_all(x))
        assert np.array_equal(x.grad, np.ones((2, 3)))

    def test_detached_receives_no_gradient(self):
        x = t([[2.0]], requires_grad=True)
        d = x.detach()
        loss = ad.sum_all(ad.mul(ad.Tensor(d.data, dtype=np.float64), x))
        ad.backward(loss)
        assert x.grad is not None and d.grad is None

    def test_non_scalar_loss_rejected(self):
        x = t(np.ones((2, 2)), requires_grad=True)
        with pytest.raises(ValueError):
            ad.backward(ad.mul(x, 2.0))

    def test_idempotent_after_zeroing(self):
        x = t([[1.0, -2.0, 0.5]], requires_grad=True)
        loss_nodes = []

        def make():
            node = ad.sum_all(ad.gelu(ad.mul(x, x)))
            loss_nodes.append(node)
            return node

        ad.backward(make())
        first = x.grad.copy()
        x.zero_grad()
        ad.backward(loss_nodes[0])
        assert np.array_equal(first, x.grad)

    def test_diamond_accumulation(self):
        x = t([[3.0]], requires_grad=True)
        y = ad.add(ad.mul(x, x), ad.mul(x, 2.0))  # x^2 + 2x -> grad 2x + 2
        ad.backward(ad.sum_all(y))
        assert np.allclose(x.grad, [[8.0]])


class TestFiniteChecks:
    def test_forward_nan_rejected(self):
        with np.errstate(all="ignore"), pytest.raises(FloatingPointError):
            ad.log(t([[-1.0]]))

    def test_forward_inf_rejected(self):
        with np.errstate(all="ignore"), pytest.raises(FloatingPointError):
            ad.exp(ad.Tensor(np.array([[1000.0]], dtype=np.float32)))


PRIMITIVES = {
    "add": lambda x, y: ad.add(x, y),
    "sub": lambda x, y: ad.sub(x, y),
    "mul": lambda x, y: ad.mul(x, y),
    "div": lambda x, y: ad.div(x, ad.add(ad.mul(y, y), 0.5)),
    "matmul": lambda x, y: ad.matmul(x, ad.transpose(y)),
    "tanh": lambda x, y: ad.tanh(x),
    "sigmoid": lambda x, y: ad.sigmoid(x),
    "gelu": lambda x, y: ad.gelu(x),
    "exp": lambda x, y: ad.exp(ad.mul(x, 0.3)),
    "log": lambda x, y: ad.log(ad.add(ad.mul(x, x), 1.0)),
    "log_sigmoid": lambda x, y: ad.log_sigmoid(x),
    "softmax": lambda x, y: ad.softmax_rows(x),
    "log_softmax": lambda x, y: ad.log_softmax_rows(x),
    "normalize": lambda x, y: ad.normalize_rows(ad.add(x, 3.0)),
    "transpose": lambda x, y: ad.transpose(x),
    "slice_cols": lambda x, y: ad.slice_cols(x, 1, 3),
    "slice_rows": lambda x, y: ad.slice_rows(x, 0, 2),
    "concat_rows": lambda x, y: ad.concat_rows([x, y]),
    "concat_cols": lambda x, y: ad.concat_cols([x, y]),
    "sum_axis0": lambda x, y: ad.sum_axis(x, 0),
    "sum_axis1": lambda x, y: ad.sum_axis(x, 1),
    "clamp": lambda x, y: ad.clamp_max(x, 0.25),
}


@pytest.mark.parametrize("name", sorted(PRIMITIVES))
def test_primitive_gradients_match_finite_differences(name):
    fn = PRIMITIVES[name]

    def builder(dtype):
        rng = np.random.default_rng(7)
        x = ad.Tensor(rng.normal(size=(3, 4)).astype(np.float32).astype(dtype),
                      requires_grad=True, dtype=dtype)
        y = ad.Tensor(rng.normal(size=(3, 4)).astype(np.float32).astype(dtype),
                      requires_grad=True, dtype=dtype)

        def make_loss():
            out = fn(x, y)
            # mix coordinates so the gradient is not trivially uniform
            mix = ad.Tensor(np.linspace(0.5, 1.5, out.data.size).reshape(out.shape), dtype=dtype)
            return ad.sum_all(ad.mul(out, mix))

        return make_loss, {"x": x, "y": y}

    assert_grads_match_dual(builder)


def test_layer_norm_gradients_match_finite_differences():
    def builder(dtype):
        rng = np.random.default_rng(8)
        x = ad.Tensor(rng.normal(size=(3, 5)).astype(np.float32).astype(dtype),
                      requires_grad=True, dtype=dtype)
        gain = ad.Tensor(rng.normal(1.0, 0.1, size=(1, 5)).astype(np.float32).astype(dtype),
                         requires_grad=True, dtype=dtype)
        bias = ad.Tensor(rng.normal(size=(1, 5)).astype(np.float32).astype(dtype),
                         requires_grad=True, dtype=dtype)

        def make_loss():
            out = ad.layer_norm(x, gain, bias)
            mix = ad.Tensor(np.linspace(-1, 1, 15).reshape(3, 5), dtype=dtype)
            return ad.sum_all(ad.mul(out, mix))

        return make_loss, {"x": x, "gain": gain, "bias": bias}

    assert_grads_match_dual(builder)


def test_masked_softmax_exact_zero_and_gradient():
    mask = np.array([[True, True, False], [True, False, False]])
    x = ad.Tensor(np.array([[0.0, 1.0, 50.0], [2.0, 9.0, 9.0]]), requires_grad=True, dtype=np.float64)
    out = ad.masked_softmax_rows(x, mask)
    assert out.data[0, 2] == 0.0 and out.data[1, 1] == 0.0
    assert np.allclose(out.data.sum(axis=1), 1.0)
    assert out.data[1, 0] == 1.0

    def builder(dtype):
        xx = ad.Tensor(x.data.astype(dtype), requires_grad=True, dtype=dtype)

        def make_loss():
            mix = ad.Tensor(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]), dtype=dtype)
            return ad.sum_all(ad.mul(ad.masked_softmax_rows(xx, mask), mix))

        return make_loss, {"x": xx}

    assert_grads_match_dual(builder)
    # masked-out logits have exactly zero influence
    x.zero_grad()
    mix = ad.Tensor(np.array([[1.0, 2.0, 3.0], [4.0, 5.0, 6.0]]), dtype=np.float64)
    ad.backward(ad.sum_all(ad.mul(ad.masked_softmax_rows(x, mask), mix)))
    assert x.grad[0, 2] == 0.0


def test_gather_rows_accumulates_duplicate_ids():
    table = ad.Tensor(np.arange(8.0).reshape(4, 2), requires_grad=True, dtype=np.float64)
    out = ad.gather_rows(table, [1, 1, 3])
    ad.backward(ad.sum_all(out))
    assert np.array_equal(table.grad, [[0, 0], [2, 2], [0, 0], [1, 1]])


def test_determinism_bitwise():
    def run():
        rng = np.random.default_rng(99)
        x = ad.Tensor(rng.normal(size=(4, 4)).astype(np.float32), requires_grad=True)
        w = ad.Tensor(rng.normal(size=(4, 4)).astype(np.float32), requires_grad=True)
        h = ad.gelu(ad.matmul(x, w))
        loss = ad.sum_all(ad.mul(ad.softmax_rows(h), h))
        ad.backward(loss)
        return loss.data.copy(), x.grad.copy(), w.grad.copy()

    a = run()
    b = run()
    for u, v in zip(a, b):
        assert np.array_equal(u, v)
