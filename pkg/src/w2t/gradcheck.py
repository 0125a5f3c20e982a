"""Central finite-difference gradient checking for the tensor engine."""

from __future__ import annotations

import numpy as np

from . import nn


def check_gradients(f, inputs, n_probes=20, h=1e-5, rng=None):
    """Compare analytic gradients of f against central finite differences.

    `f` maps a list of Tensors to a scalar Tensor; `inputs` is a list of
    float64 arrays. Probes `n_probes` random coordinates per input and
    returns the worst relative error across all probes.
    """
    rng = rng or np.random.default_rng(0)
    inputs = [np.asarray(x, dtype=np.float64) for x in inputs]
    tensors = [nn.Tensor(x.copy(), requires_grad=True) for x in inputs]
    loss = f(tensors)
    grads = nn.backward(loss, params=tensors)

    worst = 0.0
    for idx, x in enumerate(inputs):
        if x.size == 0:
            continue
        analytic = grads[tensors[idx]]
        flat_positions = rng.choice(x.size, size=min(n_probes, x.size), replace=False)
        for pos in flat_positions:
            numeric = _central_difference(f, inputs, idx, int(pos), h)
            a = analytic.ravel()[int(pos)]
            scale = max(abs(numeric), abs(a), 1e-8)
            worst = max(worst, abs(numeric - a) / scale)
    return worst


def _central_difference(f, inputs, tensor_idx, flat_pos, h):
    def eval_at(delta):
        arrays = [x.copy() for x in inputs]
        arrays[tensor_idx].ravel()[flat_pos] += delta
        return f([nn.Tensor(x) for x in arrays]).item()

    return (eval_at(h) - eval_at(-h)) / (2.0 * h)
