import numpy as np
import pytest

from prism_vq import autodiff as ad


def finite_difference(f, leaves, h=1e-6):
    """Max relative error between reverse-mode grads of f() and central differences.

    ``f`` rebuilds the scalar loss from the given leaf tensors on each call;
    leaf grads are cleared first so earlier accumulation cannot leak in.
    """
    for leaf in leaves:
        leaf.zero_grad()
    with ad.tape():
        ad.backward(f())
    worst = 0.0
    for leaf in leaves:
        grad = leaf.grad if leaf.grad is not None else np.zeros_like(leaf.values)
        it = np.nditer(leaf.values, flags=["multi_index"])
        for _ in it:
            idx = it.multi_index
            orig = leaf.values[idx]
            leaf.values[idx] = orig + h
            up = float(f().values)
            leaf.values[idx] = orig - h
            down = float(f().values)
            leaf.values[idx] = orig
            numeric = (up - down) / (2.0 * h)
            denom = max(abs(numeric), abs(grad[idx]), 1e-6)
            worst = max(worst, abs(numeric - grad[idx]) / denom)
    return worst


@pytest.fixture
def rng():
    return np.random.default_rng(1234)
