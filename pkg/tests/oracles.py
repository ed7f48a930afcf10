"""Independent reference implementations used as test oracles.

These deliberately avoid the library's traversal/compositing code paths:
marching is checked against intersect-everything-and-sort, compositing and
Adam against scalar loops, and gradients against central finite differences.
"""

from __future__ import annotations

import numpy as np


def brute_force_march(centers: np.ndarray, edges: np.ndarray, origin: np.ndarray,
                      direction: np.ndarray, t_max: float = np.inf):
    """All ray-cube overlaps sorted by entry; returns (ids, t0, t1)."""
    lo = centers - edges[:, None] / 2.0
    hi = centers + edges[:, None] / 2.0
    t0s, t1s = [], []
    for axis in range(3):
        d = direction[axis]
        if d == 0.0:
            inside = (origin[axis] >= lo[:, axis]) & (origin[axis] <= hi[:, axis])
            t0s.append(np.where(inside, -np.inf, np.inf))
            t1s.append(np.where(inside, np.inf, -np.inf))
        else:
            a = (lo[:, axis] - origin[axis]) / d
            b = (hi[:, axis] - origin[axis]) / d
            t0s.append(np.minimum(a, b))
            t1s.append(np.maximum(a, b))
    t_in = np.max(t0s, axis=0)
    t_out = np.min(t1s, axis=0)
    t0 = np.maximum(t_in, 0.0)
    t1 = np.minimum(t_out, t_max)
    keep = t1 > t0 + 1e-12
    ids = np.flatnonzero(keep)
    order = np.argsort(t0[ids], kind="stable")
    ids = ids[order]
    return ids, t0[ids], t1[ids]


def composite_reference(alphas, colors, t_mids, background, stop: float = 0.99):
    """Scalar front-to-back compositing with the freeze-at-threshold rule."""
    t = 1.0
    color = np.zeros(3)
    wsum = 0.0
    depth_num = 0.0
    for a, c, tm in zip(alphas, colors, t_mids):
        if t <= 1.0 - stop:
            continue
        w = t * a
        color += w * np.asarray(c, dtype=np.float64)
        wsum += w
        depth_num += w * tm
        t *= 1.0 - a
    color += t * np.asarray(background, dtype=np.float64)
    depth = depth_num / wsum if wsum > 0.5 else np.nan
    return color, 1.0 - t, depth, wsum


def adam_reference(param, grads, lr_fn, beta1=0.9, beta2=0.999, eps=1e-8):
    """Scalar Adam trace over a list of gradients; returns the parameter path."""
    m = 0.0
    v = 0.0
    path = []
    p = float(param)
    for t, g in enumerate(grads, start=1):
        lr = lr_fn(t - 1)
        m = beta1 * m + (1 - beta1) * g
        v = beta2 * v + (1 - beta2) * g * g
        m_hat = m / (1 - beta1**t)
        v_hat = v / (1 - beta2**t)
        p -= lr * m_hat / (np.sqrt(v_hat) + eps)
        path.append(p)
    return np.array(path)


def finite_difference(fn, arr: np.ndarray, index: tuple, h: float = 1e-4) -> float:
    """Central difference of a scalar function w.r.t. one array entry."""
    old = arr[index]
    arr[index] = old + h
    f_plus = fn()
    arr[index] = old - h
    f_minus = fn()
    arr[index] = old
    return (f_plus - f_minus) / (2.0 * h)
