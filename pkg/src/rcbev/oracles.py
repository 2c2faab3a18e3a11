"""Naive reference implementations used by the selfcheck suite.

Everything here is written as plain loops or textbook formulas, independent of
the vectorized kernels it cross-checks.
"""

from __future__ import annotations

import math

import numpy as np


def naive_linear(x: np.ndarray, w: np.ndarray, b: np.ndarray) -> np.ndarray:
    n, cin = x.shape
    cout = w.shape[0]
    out = np.zeros((n, cout))
    for i in range(n):
        for o in range(cout):
            acc = b[o]
            for j in range(cin):
                acc += w[o, j] * x[i, j]
            out[i, o] = acc
    return out


def naive_conv3x3(x: np.ndarray, k: np.ndarray, b: np.ndarray) -> np.ndarray:
    c_in, h, w = x.shape
    c_out = k.shape[0]
    out = np.zeros((c_out, h, w))
    for o in range(c_out):
        for y in range(h):
            for xx in range(w):
                acc = b[o]
                for i in range(c_in):
                    for dy in (-1, 0, 1):
                        for dx in (-1, 0, 1):
                            yy, xs = y + dy, xx + dx
                            if 0 <= yy < h and 0 <= xs < w:
                                acc += k[o, i, dy + 1, dx + 1] * x[i, yy, xs]
                out[o, y, xx] = acc
    return out


def dense_attention(q: np.ndarray, k: np.ndarray, v: np.ndarray) -> np.ndarray:
    """Scaled dot-product attention, textbook form."""
    d = q.shape[1]
    logits = q @ k.T / math.sqrt(d)
    e = np.exp(logits - logits.max(axis=1, keepdims=True))
    return (e / e.sum(axis=1, keepdims=True)) @ v


def dense_multi_head_attention(
    f: np.ndarray,
    head_projs: list[tuple[np.ndarray, np.ndarray, np.ndarray]],
    wo: np.ndarray,
    bo: np.ndarray,
) -> np.ndarray:
    outs = [dense_attention(f @ wq.T, f @ wk.T, f @ wv.T) for wq, wk, wv in head_projs]
    return np.concatenate(outs, axis=1) @ wo.T + bo


def brute_force_scatter(
    features: np.ndarray,
    pixels: np.ndarray,
    radii: np.ndarray,
    h: int,
    w: int,
) -> np.ndarray:
    """Per-(pixel, point) predicate evaluation with point-order accumulation."""
    c = features.shape[1]
    grid = np.zeros((c, h, w))
    for qy in range(h):
        for qx in range(w):
            for i in range(pixels.shape[0]):
                px, py = pixels[i]
                dx, dy = qx - px, qy - py
                if (dx == 0 and dy == 0) or dx * dx + dy * dy < radii[i] * radii[i]:
                    grid[:, qy, qx] += features[i]
    return grid


def gaussian_point_value(
    q: tuple[int, int], p: tuple[int, int], c_uv: tuple[float, float], v_rcs: float
) -> float:
    """Direct scalar evaluation of one point's Gaussian BEV weight at pixel q."""
    denom = (c_uv[0] ** 2 + c_uv[1] ** 2) * v_rcs / 3.0
    if denom < 1e-9:
        return 1.0 if q == p else 0.0
    d2 = (q[0] - p[0]) ** 2 + (q[1] - p[1]) ** 2
    return math.exp(-d2 / denom)


def bilinear_reference(grid: np.ndarray, u: float, v: float) -> np.ndarray:
    """Zero-padded bilinear interpolation written pointwise."""
    c, h, w = grid.shape
    x0, y0 = math.floor(u), math.floor(v)
    fx, fy = u - x0, v - y0
    out = np.zeros(c)
    for xi, yi, wt in (
        (x0, y0, (1 - fx) * (1 - fy)),
        (x0 + 1, y0, fx * (1 - fy)),
        (x0, y0 + 1, (1 - fx) * fy),
        (x0 + 1, y0 + 1, fx * fy),
    ):
        if 0 <= xi < w and 0 <= yi < h:
            out = out + wt * grid[:, yi, xi]
    return out


def deform_attention_reference(
    queries: np.ndarray,
    values: np.ndarray,
    ref_points: np.ndarray,
    w_off: np.ndarray,
    b_off: np.ndarray,
    w_att: np.ndarray,
    b_att: np.ndarray,
    w_val: np.ndarray,
    w_out: np.ndarray,
    adapt: tuple[np.ndarray, np.ndarray] | None = None,
) -> np.ndarray:
    """Nested-loop evaluation: per query, per head, per sampled key: project
    the query to offsets/weights, sample the raw value grid bilinearly, apply
    the per-head value and output projections, sum over keys and heads."""
    cv, h, w = values.shape
    m, d = w_val.shape[0], w_val.shape[1]
    k = w_att.shape[0] // m
    n = h * w
    cq = queries.shape[0]
    z_all = queries.reshape(cq, n).T
    out = np.zeros((cv, h, w))
    for q in range(n):
        z = z_all[q]
        if adapt is not None:
            z = adapt[0] @ z + adapt[1]
        offs = (w_off @ z + b_off).reshape(m, k, 2)
        logits = (w_att @ z + b_att).reshape(m, k)
        acc = np.zeros(cv)
        for mi in range(m):
            e = np.exp(logits[mi] - logits[mi].max())
            a = e / e.sum()
            head = np.zeros(d)
            for ki in range(k):
                u = ref_points[q, 0] + offs[mi, ki, 0]
                v = ref_points[q, 1] + offs[mi, ki, 1]
                sample = bilinear_reference(values, u, v)
                head = head + a[ki] * (w_val[mi] @ sample)
            acc = acc + w_out[mi] @ head
        out[:, q // w, q % w] = acc
    return out


def dense_cross_attention_grid(
    z: np.ndarray, kv: np.ndarray, wq: np.ndarray, wk: np.ndarray, wv: np.ndarray,
    block: int = 1024,
) -> np.ndarray:
    """Vanilla dense cross-attention over all pixel pairs (the O(H^2 W^2 C)
    comparator used by the benchmark), row-blocked to bound memory."""
    q = z @ wq.T
    k = kv @ wk.T
    v = kv @ wv.T
    d = q.shape[1]
    out = np.empty_like(v, shape=(q.shape[0], v.shape[1]))
    scale = 1.0 / math.sqrt(d)
    for i0 in range(0, q.shape[0], block):
        logits = q[i0 : i0 + block] @ k.T * scale
        e = np.exp(logits - logits.max(axis=1, keepdims=True))
        out[i0 : i0 + block] = (e / e.sum(axis=1, keepdims=True)) @ v
    return out
