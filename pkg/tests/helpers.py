import numpy as np

from lgdgcn import autodiff as ad


def numeric_grad(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of the scalar function ``f`` at ``x``."""
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    it = np.nditer(x, flags=["multi_index"])
    for _ in it:
        idx = it.multi_index
        old = x[idx]
        x[idx] = old + step
        fp = f(x)
        x[idx] = old - step
        fm = f(x)
        x[idx] = old
        g[idx] = (fp - fm) / (2 * step)
    return g


def analytic_grad(build, x: np.ndarray) -> np.ndarray:
    v = ad.parameter(np.array(x, dtype=np.float64))
    ad.backward(build(v))
    return v.grad


def check_grad(build, x, rtol: float = 1e-4, atol: float = 1e-6, step: float = 1e-5):
    """Compare reverse-mode and finite-difference gradients of ``build`` (Value -> scalar Value).

    Coordinates whose gradient is below ``atol`` in magnitude are compared
    absolutely (to 1e-7); all others relatively. Below ``atol`` the central
    difference roundoff is no longer small against the gradient itself.
    """
    num = numeric_grad(lambda a: build(ad.constant(a)).item(), x, step)
    ana = analytic_grad(build, x)
    big = np.abs(num) > atol
    rel = np.abs(ana - num)[big] / np.abs(num)[big]
    assert np.all(rel < rtol), f"max relative error {rel.max() if rel.size else 0:.3e}"
    assert np.allclose(ana[~big], num[~big], rtol=0, atol=1e-7)
    return ana, num


def weighted_sum(v, w):
    """Scalar <v, w> with fixed weights so every output entry matters."""
    return ad.sum(ad.mul(v, ad.constant(w)))
