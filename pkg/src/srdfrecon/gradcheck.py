"""Central finite-difference verification of reverse-mode gradients."""

import numpy as np

from .autodiff import Tensor

DEFAULT_H = 1e-5
DEFAULT_TOL = 1e-4


def relative_error(a, b):
    """|a - b| / max(|a|, |b|, 1): absolute near zero, relative at scale."""
    return np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1.0)


def numeric_gradient(fn, inputs, which, h=DEFAULT_H, indices=None):
    """Central finite differences of scalar fn(*inputs) w.r.t. inputs[which].

    `indices` limits the probed flat positions (spot checks); default all.
    """
    base = inputs[which].data
    flat = base.reshape(-1)
    probe = range(flat.size) if indices is None else indices
    grad = np.zeros(flat.size)

    def run():
        args = [Tensor(t.data) for t in inputs]
        args[which] = Tensor(work.reshape(base.shape))
        return float(fn(*args).data)

    for i in probe:
        keep = flat[i]
        work = flat.copy()
        work[i] = keep + h
        fp = run()
        work = flat.copy()
        work[i] = keep - h
        fm = run()
        grad[i] = (fp - fm) / (2 * h)
    return grad.reshape(base.shape)


def check_gradients(fn, inputs, h=DEFAULT_H, tol=DEFAULT_TOL, indices=None):
    """Run fn(*inputs) -> scalar Tensor, backprop, and compare each
    requires_grad input's gradient against central differences.

    Returns the max relative error over all checked entries; raises
    AssertionError if it exceeds `tol`.
    """
    live = [Tensor(t.data, requires_grad=t.requires_grad) for t in inputs]
    out = fn(*live)
    if out.size != 1:
        raise ValueError("check_gradients expects a scalar objective")
    out.backward(np.ones_like(out.data))
    worst = 0.0
    for i, t in enumerate(live):
        if not t.requires_grad:
            continue
        probe = None if indices is None else indices
        num = numeric_gradient(fn, inputs, i, h=h, indices=probe)
        ana = t.grad if t.grad is not None else np.zeros_like(t.data)
        if probe is None:
            err = relative_error(ana, num).max()
        else:
            sel = np.asarray(list(probe))
            err = relative_error(ana.reshape(-1)[sel], num.reshape(-1)[sel]).max()
        worst = max(worst, float(err))
    if worst > tol:
        raise AssertionError(f"gradient check failed: max relative error {worst:.3e} > {tol:.1e}")
    return worst
