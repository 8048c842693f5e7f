"""Central finite differences, independent of the tape."""

import numpy as np

from davegan.autodiff import Tape, Tensor, default_dtype, grad

H = 1e-5


def numeric_grad(f, arrays, h=H):
    """d f(*arrays) / d arrays[k] for every k, by central differences (float64)."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    out = []
    for k, a in enumerate(arrays):
        g = np.zeros_like(a)
        flat = a.reshape(-1)
        gf = g.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = f(*arrays)
            flat[i] = orig - h
            down = f(*arrays)
            flat[i] = orig
            gf[i] = (up - down) / (2 * h)
        out.append(g)
    return out


def tape_grad(fn, arrays):
    """Gradients of ``fn(*tensors).sum()`` with respect to every input, via the tape."""
    with default_dtype(np.float64), Tape():
        ts = [Tensor(np.array(a, dtype=np.float64), requires_grad=True) for a in arrays]
        loss = fn(*ts)
        if loss.size != 1:
            loss = loss.sum()
        return grad(loss, ts)


def scalar_fn(fn):
    def f(*arrays):
        with default_dtype(np.float64), Tape():
            y = fn(*[Tensor(a) for a in arrays])
            return float(y.data.sum())
    return f


def rel_err(a, b):
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-12)
    return float(np.linalg.norm(a - b) / scale)


def check(fn, arrays, tol=1e-5):
    """Largest relative error between tape and finite-difference gradients."""
    analytic = tape_grad(fn, arrays)
    numeric = numeric_grad(scalar_fn(fn), arrays)
    return max(rel_err(a, n) for a, n in zip(analytic, numeric))
