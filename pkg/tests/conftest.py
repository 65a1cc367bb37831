import numpy as np
import pytest

from hldlab import autodiff as ad


def numeric_grad(f, x: np.ndarray, h: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar function ``f`` at ``x`` (float64)."""
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        old = x[i]
        x[i] = old + h
        up = f(x)
        x[i] = old - h
        down = f(x)
        x[i] = old
        g[i] = (up - down) / (2 * h)
    return g


def rel_err(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.max(np.abs(a - b)) / max(np.max(np.abs(a)), np.max(np.abs(b)), 1e-12))


def check_grads(loss_fn, arrays: list[np.ndarray], h: float = 1e-5) -> float:
    """Worst relative error between tape gradients and central differences.

    ``loss_fn`` maps a list of Tensors to a scalar Tensor.
    """
    tensors = [ad.Tensor(a.copy(), requires_grad=True) for a in arrays]
    with ad.Tape():
        loss = loss_fn(tensors)
        ad.backward(loss)
    worst = 0.0
    for k, t in enumerate(tensors):
        base = [a.copy() for a in arrays]

        def f(x, k=k, base=base):
            base[k] = x
            return loss_fn([ad.Tensor(a) for a in base]).item()

        num = numeric_grad(f, base[k].copy(), h)
        worst = max(worst, rel_err(t.grad, num))
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
