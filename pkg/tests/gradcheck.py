"""Central finite-difference gradient checking for numcore graphs."""

import numpy as np

from metatrade import numcore as nc


def max_rel_error(fn, arrays, h=1e-6, floor=1e-6, seed=0):
    """Worst relative error between tape gradients and central differences.

    ``fn`` maps a list of Tensors to a Tensor; the scalar loss is
    ``sum(fn(...) * W)`` for a fixed random W so every output entry counts.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    rng = np.random.default_rng(seed)
    probe = nc.no_grad()
    with probe:
        shape = fn([nc.Tensor(a) for a in arrays]).shape
    weight = rng.normal(size=shape)

    def loss_value(arrs):
        with nc.no_grad():
            out = fn([nc.Tensor(a) for a in arrs])
        return float(np.sum(out.data * weight))

    params = [nc.parameter(a.copy()) for a in arrays]
    with nc.Tape() as tape:
        out = fn(params)
        loss = nc.sum_(nc.mul(out, nc.Tensor(weight)))
    grads = nc.backward(loss, tape)
    worst = 0.0
    for i, p in enumerate(params):
        analytic = grads.get(p, np.zeros_like(p.data))
        for idx in np.ndindex(arrays[i].shape):
            plus = [a.copy() for a in arrays]
            minus = [a.copy() for a in arrays]
            plus[i][idx] += h
            minus[i][idx] -= h
            numeric = (loss_value(plus) - loss_value(minus)) / (2 * h)
            a = analytic[idx]
            err = abs(a - numeric) / max(abs(a), abs(numeric), floor)
            worst = max(worst, err)
    return worst
