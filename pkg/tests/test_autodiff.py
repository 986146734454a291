import numpy as np
import pytest

from patchmix import autodiff as ad


def fd_ok(fn, *arrays, step=1e-4, tol=1e-6):
    res = ad.check_gradients(fn, list(arrays), step=step)
    assert res.checked > 0
    assert res.max_rel_err <= tol, f"max rel err {res.max_rel_err}"
    return res


class TestTapeBasics:
    def test_backward_requires_scalar(self):
        tape = ad.Tape()
        x = tape.var(np.ones((2, 2)))
        with pytest.raises(ValueError):
            tape.backward(ad.scale(x, 2.0))

    def test_grad_defaults_to_zeros(self):
        tape = ad.Tape()
        x = tape.var(np.ones(3))
        y = tape.var(np.ones(3))
        tape.backward(ad.asum(ad.mul(x, x)))
        np.testing.assert_array_equal(tape.grad(y), np.zeros(3))

    def test_gradient_accumulates_over_reuse(self):
        tape = ad.Tape()
        x = tape.var(np.array([3.0]))
        tape.backward(ad.asum(ad.add(x, x)))
        np.testing.assert_array_equal(tape.grad(x), [2.0])

    def test_operator_sugar(self):
        tape = ad.Tape()
        x = tape.var(np.array([2.0, 4.0]))
        y = (x * 3.0 - 1.0) / 2.0 + x
        np.testing.assert_allclose(y.data, [4.5, 9.5])
        tape.backward(ad.asum(y))
        np.testing.assert_allclose(tape.grad(x), [2.5, 2.5])


class TestElementwise:
    def test_add_mul_div_grads(self):
        rng = np.random.default_rng(0)
        a, b = rng.random((3, 4)) + 0.5, rng.random((3, 4)) + 0.5
        fd_ok(lambda x, y: ad.asum(ad.div(ad.mul(x, y), ad.add(x, y))), a, b)

    def test_broadcasting_unbroadcasts_adjoints(self):
        rng = np.random.default_rng(1)
        a, b = rng.random((3, 4)), rng.random((4,))
        fd_ok(lambda x, y: ad.asum(ad.mul(x, y)), a, b)
        # row vector against column vector
        c, d = rng.random((3, 1)), rng.random((1, 4))
        fd_ok(lambda x, y: ad.asum(ad.add(x, y)), c, d)

    def test_exp_log_sqrt(self):
        rng = np.random.default_rng(2)
        a = rng.random((2, 5)) + 0.5
        fd_ok(lambda x: ad.asum(ad.exp(x)), a)
        fd_ok(lambda x: ad.asum(ad.log(x)), a)
        fd_ok(lambda x: ad.asum(ad.sqrt(x)), a)

    def test_gelu_matches_erf_form(self):
        from scipy.special import erf

        x = np.linspace(-3, 3, 13)
        got = ad.gelu(ad.Tensor(x)).data
        expect = x * 0.5 * (1.0 + erf(x / np.sqrt(2.0)))
        np.testing.assert_allclose(got, expect, rtol=0, atol=1e-15)
        fd_ok(lambda t: ad.asum(ad.gelu(t)), x + 0.001)

    def test_relu_kink_excluded_not_failed(self):
        x = np.array([-1.0, 0.0, 1.0])
        res = ad.check_gradients(lambda t: ad.asum(ad.relu(t)), x, step=1e-3)
        assert res.max_rel_err <= 1e-8
        assert any(coord == (0, (1,)) for coord in res.nonsmooth)


class TestMatmul:
    def test_2d(self):
        rng = np.random.default_rng(3)
        fd_ok(
            lambda a, b: ad.asum(ad.matmul(a, b)),
            rng.random((3, 4)),
            rng.random((4, 2)),
        )

    def test_batched_broadcast(self):
        rng = np.random.default_rng(4)
        fd_ok(
            lambda a, b: ad.asum(ad.matmul(a, b)),
            rng.random((5, 3, 4)),
            rng.random((4, 2)),
        )
        fd_ok(
            lambda a, b: ad.asum(ad.matmul(a, b)),
            rng.random((2, 3, 4)),
            rng.random((2, 4, 3)),
        )


class TestReductionsAndShape:
    def test_sum_mean_axes(self):
        rng = np.random.default_rng(5)
        a = rng.random((3, 4, 2))
        fd_ok(lambda x: ad.asum(ad.mean(x, axis=1)), a)
        fd_ok(lambda x: ad.mean(ad.asum(x, axis=(0, 2))), a)
        fd_ok(lambda x: ad.asum(ad.mean(x, axis=0, keepdims=True)), a)

    def test_transpose_reshape_concat(self):
        rng = np.random.default_rng(6)
        a, b = rng.random((2, 3)), rng.random((2, 3))
        fd_ok(
            lambda x, y: ad.asum(
                ad.mul(ad.reshape(ad.transpose(x), (6,)), ad.reshape(y, (6,)))
            ),
            a,
            b,
        )
        fd_ok(lambda x, y: ad.asum(ad.concat([x, y], axis=0)), a, b)

    def test_broadcast_to(self):
        a = np.random.default_rng(7).random((1, 4))
        fd_ok(lambda x: ad.asum(ad.broadcast_to(x, (3, 4))), a)


class TestIndexing:
    def test_take_repeated_rows_accumulate(self):
        tape = ad.Tape()
        x = tape.var(np.arange(6.0).reshape(3, 2))
        y = ad.take(x, np.array([0, 0, 2]))
        tape.backward(ad.asum(y))
        np.testing.assert_array_equal(
            tape.grad(x), [[2.0, 2.0], [0.0, 0.0], [1.0, 1.0]]
        )

    def test_gather_rows(self):
        rng = np.random.default_rng(8)
        a = rng.random((4, 6))
        idx = np.array([[0, 5, 5], [1, 2, 3], [4, 4, 4], [0, 1, 2]])
        tape = ad.Tape()
        x = tape.var(a)
        y = ad.gather(x, idx)
        np.testing.assert_array_equal(
            y.data, a[np.arange(4)[:, None], idx]
        )
        tape.backward(ad.asum(y))
        expect = np.zeros_like(a)
        np.add.at(expect, (np.arange(4)[:, None], idx), 1.0)
        np.testing.assert_array_equal(tape.grad(x), expect)


class TestNormalization:
    def test_softmax_log_softmax(self):
        rng = np.random.default_rng(9)
        a = rng.random((3, 5)) * 4
        rows = ad.softmax(ad.Tensor(a)).data
        np.testing.assert_allclose(rows.sum(axis=1), np.ones(3), atol=1e-12)
        w = rng.random((3, 5))
        fd_ok(lambda x: ad.asum(ad.mul(ad.softmax(x), w)), a)
        fd_ok(lambda x: ad.asum(ad.mul(ad.log_softmax(x), w)), a)

    def test_softmax_shift_invariance(self):
        a = np.array([[1.0, 2.0, 3.0]])
        np.testing.assert_allclose(
            ad.softmax(ad.Tensor(a)).data,
            ad.softmax(ad.Tensor(a + 500.0)).data,
            atol=1e-12,
        )

    def test_layer_norm(self):
        rng = np.random.default_rng(10)
        a = rng.random((4, 6))
        g, b = rng.random(6) + 0.5, rng.random(6)
        out = ad.layer_norm(ad.Tensor(a), ad.Tensor(g), ad.Tensor(b)).data
        back = (out - b) / g
        np.testing.assert_allclose(back.mean(axis=1), 0.0, atol=1e-12)
        w = rng.random((4, 6))
        fd_ok(
            lambda x, gg, bb: ad.asum(ad.mul(ad.layer_norm(x, gg, bb), w)),
            a,
            g,
            b,
            tol=1e-5,
        )

    def test_l2_normalize(self):
        rng = np.random.default_rng(11)
        a = rng.random((3, 4)) + 0.2
        out = ad.l2_normalize(ad.Tensor(a)).data
        np.testing.assert_allclose(
            np.linalg.norm(out, axis=1), np.ones(3), atol=1e-12
        )
        w = rng.random((3, 4))
        fd_ok(lambda x: ad.asum(ad.mul(ad.l2_normalize(x), w)), a)

    def test_l2_normalize_zero_row_names_index(self):
        a = np.ones((3, 4))
        a[1] = 0.0
        with pytest.raises(ValueError, match="1"):
            ad.l2_normalize(ad.Tensor(a))


class TestStopGradient:
    def test_blocks_gradient(self):
        tape = ad.Tape()
        x = tape.var(np.array([2.0, 3.0]))
        y = ad.mul(x, ad.stop_gradient(x))  # d/dx (x * const(x)) = const(x)
        tape.backward(ad.asum(y))
        np.testing.assert_array_equal(tape.grad(x), [2.0, 3.0])

    def test_shares_data_bitwise(self):
        x = ad.Tensor(np.array([1.0, 2.0]))
        assert ad.stop_gradient(x).data is x.data


class TestCheckGradients:
    def test_known_function(self):
        rng = np.random.default_rng(12)
        res = fd_ok(
            lambda a, b: ad.mean(ad.gelu(ad.matmul(a, b))),
            rng.random((3, 4)),
            rng.random((4, 3)),
        )
        assert res.nonsmooth == [] and res.nonfinite == []

    def test_single_array_accepted(self):
        res = ad.check_gradients(
            lambda x: ad.asum(ad.mul(x, x)), np.array([1.0, 2.0])
        )
        assert res.checked == 2

    def test_non_scalar_output_rejected(self):
        with pytest.raises(ValueError, match="scalar"):
            ad.check_gradients(lambda x: x, np.ones(3))
