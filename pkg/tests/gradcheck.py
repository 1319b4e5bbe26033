"""Central finite differences against the tape's gradients."""
from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from beamstop.autodiff import Tape, Tensor


def rel_error(a: np.ndarray, b: np.ndarray) -> float:
    scale = max(np.linalg.norm(a), np.linalg.norm(b), 1e-8)
    return float(np.linalg.norm(a - b) / scale)


def numeric_grad(f: Callable[[], float], x: Tensor, h: float = 1e-6, coords=None) -> np.ndarray:
    g = np.zeros_like(x.data)
    flat, gflat = x.data.reshape(-1), g.reshape(-1)
    for i in range(flat.size) if coords is None else coords:
        old = flat[i]
        flat[i] = old + h
        up = f()
        flat[i] = old - h
        down = f()
        flat[i] = old
        gflat[i] = (up - down) / (2 * h)
    return g


def analytic_grads(loss_fn: Callable[[], Tensor], params: Sequence[Tensor]) -> list[np.ndarray]:
    for p in params:
        p.grad = None
    with Tape() as tape:
        loss = loss_fn()
    tape.backward(loss)
    return [np.zeros_like(p.data) if p.grad is None else p.grad.copy() for p in params]


def check(loss_fn: Callable[[], Tensor], params: Sequence[Tensor], h: float = 1e-6, coords=None) -> float:
    """Relative error of the stacked gradient over ``params``; ``coords``
    optionally restricts the finite differences to a few flat indices per
    parameter."""
    grads = analytic_grads(loss_fn, params)
    got, want = [], []
    for p, g in zip(params, grads):
        sel = None if coords is None else coords(p)
        num = numeric_grad(lambda: loss_fn().item(), p, h, sel)
        if sel is not None:
            g = g.reshape(-1)[sel]
            num = num.reshape(-1)[sel]
        got.append(g.reshape(-1))
        want.append(num.reshape(-1))
    return rel_error(np.concatenate(got), np.concatenate(want))
