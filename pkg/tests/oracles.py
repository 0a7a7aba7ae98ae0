"""Independent oracles shared across the test suite.

These deliberately avoid the library's own differentiation / compositing
paths: finite differences, brute-force per-pixel loops, direct products.
"""

import numpy as np

from dragsplat.tensor import Tensor


def finite_difference(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central finite differences of scalar f w.r.t. every element of x."""
    x = x.astype(np.float64)
    grad = np.zeros_like(x)
    flat = x.ravel()
    gflat = grad.ravel()
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        fp = f(x)
        flat[i] = orig - step
        fm = f(x)
        flat[i] = orig
        gflat[i] = (fp - fm) / (2.0 * step)
    return grad


def check_grads(build, inputs, step: float = 1e-5, rtol: float = 1e-6):
    """Compare analytic grads of ``build(*tensors)`` against central differences.

    ``build`` maps Tensor inputs to a scalar Tensor loss. Returns the max
    relative error observed. Relative error is measured against the scale of
    the gradient vector (avoids blowups where individual entries are ~0).
    """
    tensors = [Tensor(x.astype(np.float64), requires_grad=True) for x in inputs]
    loss = build(*tensors)
    for t in tensors:
        t.zero_grad()
    loss.backward()
    worst = 0.0
    for k, t in enumerate(tensors):

        def f(x, k=k):
            trial = [Tensor(inp.data if j != k else x) for j, inp in enumerate(tensors)]
            return float(build(*trial).data)

        num = finite_difference(f, t.data.copy(), step=step)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        scale = max(np.abs(num).max(), np.abs(ana).max(), 1e-8)
        err = np.abs(ana - num).max() / scale
        worst = max(worst, err)
        assert err < rtol, f"input {k}: rel err {err:.3g} >= {rtol}"
    return worst


def brute_force_composite(order, colors, sigmas, background=(0.0, 0.0, 0.0)):
    """Reference alpha compositing over an explicit ordered contribution list."""
    t = 1.0
    c = np.array(background, dtype=np.float64)
    acc = np.zeros(3)
    for i in order:
        acc += np.asarray(colors[i], dtype=np.float64) * sigmas[i] * t
        t *= 1.0 - sigmas[i]
    return acc + np.array(background) * t, 1.0 - t
