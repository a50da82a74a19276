"""Shared test oracles: finite differences and tolerance helpers."""

import numpy as np

from lrimpute.autodiff import Tensor, backward


def rel_err(a, b, floor=1e-6):
    """Worst elementwise |a-b| / max(|a|, |b|, floor)."""
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    denom = np.maximum(np.maximum(np.abs(a), np.abs(b)), floor)
    return float(np.max(np.abs(a - b) / denom))


def central_diff(f, arr, h=1e-5):
    """Central finite differences of a scalar function, elementwise."""
    arr = np.array(arr, dtype=float)
    grad = np.zeros_like(arr)
    it = np.nditer(arr, flags=["multi_index"])
    for _ in it:
        i = it.multi_index
        orig = arr[i]
        arr[i] = orig + h
        fp = f(arr)
        arr[i] = orig - h
        fm = f(arr)
        arr[i] = orig
        grad[i] = (fp - fm) / (2.0 * h)
    return grad


def gradcheck(make_loss, arrays, h=1e-5, floor=1e-6):
    """Worst relative error between autodiff and central differences.

    ``make_loss`` maps one Tensor per input array to a scalar Tensor. The
    autodiff pass runs once; each array is then probed by finite
    differences at the same point.
    """
    tensors = [Tensor(a, requires_grad=True) for a in arrays]
    loss = make_loss(*tensors)
    backward(loss)
    worst = 0.0
    for k in range(len(arrays)):
        def value(arr, k=k):
            probe = [Tensor(a) for a in arrays]
            probe[k] = Tensor(arr)
            return make_loss(*probe).item()

        num = central_diff(value, arrays[k], h=h)
        worst = max(worst, rel_err(tensors[k].grad, num, floor=floor))
    return worst


def sample_param_indices(rng, tensor, count):
    flat = rng.choice(tensor.size, size=min(count, tensor.size), replace=False)
    return [np.unravel_index(i, tensor.shape) for i in np.atleast_1d(flat)]
