"""Finite-difference checks over model parameters, shared by test modules."""

import numpy as np

from pavedet import tensor as T


def max_rel_err(analytic, numeric):
    a = np.asarray(analytic, dtype=np.float64)
    n = np.asarray(numeric, dtype=np.float64)
    return np.max(np.abs(a - n) / np.maximum(1.0, np.abs(a)))


def param_grad_errors(loss_fn, named, h=1e-5):
    """Max relative error between backprop and central differences per tensor.

    loss_fn() must rebuild the forward pass from the current parameter data
    and return a scalar Tensor. Yields (name, err) for each named tensor.
    """
    for _, t in named:
        t.zero_grad()
    loss_fn().backward()
    grads = {name: (t.grad.copy() if t.grad is not None else np.zeros(t.shape))
             for name, t in named}

    results = []
    with T.no_grad():
        for name, t in named:
            num = np.zeros(t.shape)
            flat = t.data.reshape(-1)
            nflat = num.reshape(-1)
            for i in range(flat.size):
                keep = flat[i]
                flat[i] = keep + h
                hi = loss_fn().item()
                flat[i] = keep - h
                lo = loss_fn().item()
                flat[i] = keep
                nflat[i] = (hi - lo) / (2.0 * h)
            results.append((name, max_rel_err(grads[name], num)))
    return results
