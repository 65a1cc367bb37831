import math

import numpy as np
import pytest

from hldlab import autodiff as ad
from conftest import check_grads

SEEDS = range(10)


class TestForwardValues:
    def test_identity_product(self):
        eye = ad.Tensor(np.eye(2))
        np.testing.assert_array_equal(ad.matmul(eye, eye).data, np.eye(2))

    def test_hand_product(self):
        a = ad.Tensor(np.array([[1.0, 2.0], [3.0, 4.0]]))
        b = ad.Tensor(np.array([[1.0], [1.0]]))
        np.testing.assert_array_equal((a @ b).data, [[3.0], [7.0]])

    def test_matmul_mismatch_names_shapes(self):
        with pytest.raises(ValueError, match=r"\(2, 3\).*\(2, 3\)"):
            ad.matmul(ad.Tensor(np.ones((2, 3))), ad.Tensor(np.ones((2, 3))))

    def test_softmax_symmetric(self):
        np.testing.assert_allclose(ad.softmax(ad.Tensor(np.zeros(2))).data, [0.5, 0.5])

    def test_softmax_closed_form(self):
        x = ad.Tensor(np.log(np.array([1.0, 3.0])))
        np.testing.assert_allclose(ad.softmax(x).data, [0.25, 0.75], atol=1e-12)

    def test_softmax_high_temperature_is_uniform(self, rng):
        x = ad.Tensor(rng.uniform(-5, 5, size=(4, 7)))
        p = ad.softmax(x, temperature=1e6).data
        assert np.max(np.abs(p - 1 / 7)) < 1e-5

    @pytest.mark.parametrize("temperature", [0.0, -1.0])
    def test_softmax_rejects_bad_temperature(self, temperature):
        with pytest.raises(ValueError):
            ad.softmax(ad.Tensor(np.zeros(3)), temperature=temperature)

    def test_softmax_rows_sum_to_one_for_large_inputs(self, rng):
        x = ad.Tensor(rng.uniform(-50, 50, size=(64, 33)).astype(np.float32))
        p = ad.softmax(x).data
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=-1), 1.0, atol=1e-6)

    def test_rms_norm_unit_vector(self):
        out = ad.rms_norm(ad.Tensor(np.ones(5)), ad.Tensor(np.ones(5)), eps=0.0)
        np.testing.assert_allclose(out.data, np.ones(5))

    def test_rms_norm_formula(self):
        out = ad.rms_norm(ad.Tensor(np.array([3.0, 4.0])), ad.Tensor(np.ones(2)), eps=0.0)
        np.testing.assert_allclose(out.data, np.array([3.0, 4.0]) / math.sqrt(12.5))

    def test_gelu_matches_erf_definition(self):
        x = np.linspace(-4, 4, 17)
        expected = [v * 0.5 * (1 + math.erf(v / math.sqrt(2))) for v in x]
        np.testing.assert_allclose(ad.gelu(ad.Tensor(x)).data, expected, rtol=1e-12, atol=1e-15)

    def test_causal_softmax_ignores_future(self, rng):
        s = rng.standard_normal((3, 3))
        p = ad.causal_softmax(ad.Tensor(s)).data
        assert p[0, 0] == 1.0
        assert np.all(np.triu(p, k=1) == 0)
        np.testing.assert_allclose(p[1, :2], np.exp(s[1, :2]) / np.exp(s[1, :2]).sum())

    def test_embedding_out_of_range(self):
        with pytest.raises(IndexError):
            ad.embedding(ad.Tensor(np.ones((4, 2))), [0, 4])

    def test_float32_by_default(self):
        assert ad.Tensor([1, 2, 3]).dtype == np.float32
        assert ad.Tensor(np.ones(2)).dtype == np.float64


class TestBackward:
    def test_sum_gives_ones(self):
        x = ad.Tensor(np.arange(4.0), requires_grad=True)
        with ad.Tape():
            ad.backward(ad.sum(x))
        np.testing.assert_array_equal(x.grad, np.ones(4))

    def test_square(self):
        x = ad.Tensor(np.array([1.0, 2.0, 3.0]), requires_grad=True)
        with ad.Tape():
            ad.backward(ad.sum(x * x))
        np.testing.assert_array_equal(x.grad, [2.0, 4.0, 6.0])

    def test_convex_combination_is_linear(self, rng):
        a = rng.standard_normal((3, 4))
        alpha = 0.3

        def grad_of(fn):
            x = ad.Tensor(a.copy(), requires_grad=True)
            with ad.Tape():
                ad.backward(fn(x))
            return x.grad

        l1 = lambda x: ad.sum(ad.gelu(x))
        l2 = lambda x: ad.mean(ad.exp(x))
        mixed = grad_of(lambda x: ad.scale(l1(x), 1 - alpha) + ad.scale(l2(x), alpha))
        expected = (1 - alpha) * grad_of(l1) + alpha * grad_of(l2)
        np.testing.assert_allclose(mixed, expected, rtol=1e-10, atol=1e-14)

    def test_second_backward_is_an_error(self):
        x = ad.Tensor(np.ones(2), requires_grad=True)
        with ad.Tape():
            loss = ad.sum(x)
            ad.backward(loss)
            with pytest.raises(ad.TapeError):
                ad.backward(loss)

    def test_reset_makes_tape_reusable(self):
        x = ad.Tensor(np.ones(2), requires_grad=True)
        with ad.Tape() as tape:
            ad.backward(ad.sum(x))
            tape.reset()
            ad.backward(ad.sum(x * 3.0))
        np.testing.assert_array_equal(x.grad, [4.0, 4.0])

    def test_non_scalar_loss_rejected(self):
        x = ad.Tensor(np.ones(2), requires_grad=True)
        with ad.Tape():
            with pytest.raises(ad.TapeError):
                ad.backward(x * 2.0)

    def test_no_tape_no_graph(self):
        x = ad.Tensor(np.ones(2), requires_grad=True)
        loss = ad.sum(x)
        with pytest.raises(ad.TapeError):
            ad.backward(loss)

    def test_deterministic(self, rng):
        a = rng.standard_normal((5, 6)).astype(np.float32)
        grads = []
        for _ in range(2):
            x = ad.Tensor(a.copy(), requires_grad=True)
            with ad.Tape():
                ad.backward(ad.sum(ad.softmax(x @ x.T)))
            grads.append(x.grad)
        assert np.array_equal(grads[0], grads[1])

    def test_every_reachable_tensor_gets_grad(self, rng):
        x = ad.Tensor(rng.standard_normal(3), requires_grad=True)
        with ad.Tape():
            h = ad.exp(x)
            loss = ad.sum(h)
            ad.backward(loss)
        assert h.grad is not None and x.grad is not None


PRIMITIVES = {
    "add": (lambda t: ad.sum(ad.add(t[0], t[1]) * t[1]), [(3, 4), (4,)]),
    "sub": (lambda t: ad.sum(ad.sub(t[0], t[1]) * t[0]), [(3, 4), (3, 4)]),
    "mul": (lambda t: ad.sum(ad.mul(t[0], t[1])), [(2, 5), (2, 5)]),
    "scale": (lambda t: ad.sum(ad.scale(t[0], -1.7) * t[0]), [(6,)]),
    "reciprocal": (lambda t: ad.sum(ad.reciprocal(ad.exp(t[0]))), [(5,)]),
    "exp": (lambda t: ad.sum(ad.exp(t[0])), [(3, 3)]),
    "log": (lambda t: ad.sum(ad.log(ad.exp(t[0]) + 1.0)), [(4,)]),
    "sqrt": (lambda t: ad.sum(ad.sqrt(ad.exp(t[0]))), [(4,)]),
    "gelu": (lambda t: ad.sum(ad.gelu(t[0]) * t[0]), [(3, 5)]),
    "mean": (lambda t: ad.mean(ad.mean(t[0] * t[0], axis=1)), [(3, 4)]),
    "reshape": (lambda t: ad.sum(ad.reshape(t[0], (6, 2)) @ t[1]), [(3, 4), (2, 3)]),
    "transpose": (lambda t: ad.sum(ad.transpose(t[0], (1, 0, 2)) * t[1]), [(2, 3, 4), (3, 2, 4)]),
    "matmul": (lambda t: ad.sum(ad.matmul(t[0], t[1])), [(3, 3), (3, 3)]),
    "batched_matmul": (lambda t: ad.sum(ad.gelu(ad.matmul(t[0], t[1]))), [(2, 3, 4), (4, 5)]),
    "stacked_matmul": (lambda t: ad.sum(ad.gelu(ad.matmul(t[0], t[1]))), [(2, 3, 4), (2, 4, 5)]),
    "softmax": (lambda t: ad.sum(ad.softmax(t[0], temperature=0.7) * t[1]), [(3, 5), (3, 5)]),
    "log_softmax": (lambda t: ad.sum(ad.log_softmax(t[0], temperature=2.0) * t[1]), [(3, 5), (3, 5)]),
    "causal_softmax": (lambda t: ad.sum(ad.causal_softmax(t[0]) * t[1]), [(2, 4, 4), (2, 4, 4)]),
    "rms_norm": (lambda t: ad.sum(ad.rms_norm(t[0], t[1], eps=1e-6) * t[0]), [(3, 6), (6,)]),
    "normalize_rows": (lambda t: ad.sum(ad.normalize_rows(t[0]) * t[1]), [(4, 5), (4, 5)]),
}


class TestFiniteDifferences:
    @pytest.mark.parametrize("name", sorted(PRIMITIVES))
    def test_primitive(self, name):
        fn, shapes = PRIMITIVES[name]
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            arrays = [rng.standard_normal(s) for s in shapes]
            assert check_grads(fn, arrays) < 1e-4, (name, seed)

    def test_matmul_tight(self):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            err = check_grads(lambda t: ad.sum(t[0] @ t[1]), [rng.standard_normal((3, 3)) for _ in range(2)])
            assert err < 1e-5

    def test_rms_norm_tight(self):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            arrays = [rng.standard_normal((2, 5)), rng.standard_normal(5), rng.standard_normal((2, 5))]
            err = check_grads(lambda t: ad.sum(ad.rms_norm(t[0], t[1]) * t[2]), arrays)
            assert err < 1e-5

    def test_embedding(self):
        ids = np.array([[0, 2, 2], [3, 1, 0]])
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            arrays = [rng.standard_normal((4, 3)), rng.standard_normal((2, 3, 3))]
            assert check_grads(lambda t: ad.sum(ad.embedding(t[0], ids) * t[1]), arrays) < 1e-4

    def test_gather_last(self):
        for seed in SEEDS:
            rng = np.random.default_rng(seed)
            idx = np.argsort(rng.standard_normal((3, 6)), axis=-1)[:, :2]
            arrays = [rng.standard_normal((3, 6)), rng.standard_normal((3, 2))]
            assert check_grads(lambda t: ad.sum(ad.gather_last(t[0], idx) * t[1]), arrays) < 1e-4
