"""Independent brute-force oracles used by the test suite.

Everything here is deliberately written as plain Python loops over scalar
values, sharing no code with the library's vectorized implementations.
"""

from __future__ import annotations

import math

import numpy as np

from stgcl.autodiff import Tape, Tensor


def cosine(u, v) -> float:
    nu = math.sqrt(sum(float(x) * float(x) for x in u))
    nv = math.sqrt(sum(float(x) * float(x) for x in v))
    dot = sum(float(a) * float(b) for a, b in zip(u, v))
    return dot / (nu * nv)


def global_contrastive(g: np.ndarray, tau: float) -> float:
    """Exhaustive double loop over (sample, view) pairs; g is (N, V, D)."""
    n, v, _ = g.shape
    total = 0.0
    for i in range(n):
        num = sum(math.exp(cosine(g[i, v1], g[i, v2]) / tau)
                  for v1 in range(v) for v2 in range(v) if v1 != v2)
        den = sum(math.exp(cosine(g[i, v1], g[k, v2]) / tau)
                  for k in range(n) if k != i
                  for v1 in range(v) for v2 in range(v) if v1 != v2)
        total += -math.log(num / den)
    return total / (v * n)


def local_contrastive(l: np.ndarray, tau: float, mode: str) -> float:
    """Exhaustive loop over (sample, subgraph, view); l is (N, S, V, D)."""
    n, s, v, _ = l.shape
    total = 0.0
    for i in range(n):
        num = sum(math.exp(cosine(l[i, si, v1], l[i, si, v2]) / tau)
                  for si in range(s)
                  for v1 in range(v) for v2 in range(v) if v1 != v2)
        if mode == "literal":
            den = sum(math.exp(cosine(l[i, s1, v1], l[k, s2, v2]) / tau)
                      for k in range(n) if k != i
                      for s1 in range(s) for s2 in range(s) if s1 != s2
                      for v1 in range(v) for v2 in range(v) if v1 != v2)
        elif mode == "stated_count":
            den = sum(math.exp(cosine(l[i, s1, v1], l[k, s2, v2]) / tau)
                      for k in range(n) if k != i
                      for s1 in range(s) for s2 in range(s)
                      for v1 in range(v) for v2 in range(v) if v1 != v2)
        else:
            raise ValueError(mode)
        total += -math.log(num / den)
    return total / (s * v * n)


def spatial_gcn(normalized, features, weights) -> np.ndarray:
    """Triple-loop graph convolution over one frame: sum_p A_p F W_p."""
    m, c = features.shape
    c_out = weights[0].shape[1]
    out = np.zeros((m, c_out))
    for a_p, w_p in zip(normalized, weights):
        for i in range(m):
            for j in range(m):
                for ci in range(c):
                    for co in range(c_out):
                        out[i, co] += a_p[i, j] * features[j, ci] * w_p[ci, co]
    return out


def temporal_conv(features, kernel, stride) -> np.ndarray:
    """Direct-loop 1-D temporal convolution with symmetric zero padding."""
    t, m, c = features.shape
    k, _, c_out = kernel.shape
    pad = (k - 1) // 2
    padded = np.zeros((t + 2 * pad, m, c))
    padded[pad:pad + t] = features
    t_out = (t - 1) // stride + 1
    out = np.zeros((t_out, m, c_out))
    for to in range(t_out):
        for tap in range(k):
            for mi in range(m):
                for ci in range(c):
                    for co in range(c_out):
                        out[to, mi, co] += padded[to * stride + tap, mi, ci] * kernel[tap, ci, co]
    return out


def mlp_project(w1, b1, w2, b2, x) -> np.ndarray:
    """Two-loop matrix-vector evaluation of the projection head."""
    hidden = np.zeros(w1.shape[0])
    for i in range(w1.shape[0]):
        acc = b1[i]
        for j in range(w1.shape[1]):
            acc += w1[i, j] * x[j]
        hidden[i] = max(acc, 0.0)
    out = np.zeros(w2.shape[0])
    for i in range(w2.shape[0]):
        acc = b2[i]
        for j in range(w2.shape[1]):
            acc += w2[i, j] * hidden[j]
        out[i] = acc
    return out


def composite_grad_error(loss_fn, params: dict[str, Tensor], eps: float = 1e-5) -> float:
    """Max relative error of analytic vs central-difference gradients.

    `loss_fn()` must rebuild the forward pass from the current parameter
    values each call; parameters are perturbed in place.
    """
    with Tape() as tape:
        loss = loss_fn()
        grads = tape.backward(loss)
    worst = 0.0
    for p in params.values():
        analytic = grads[p].data.ravel() if p in grads else np.zeros(p.size)
        flat = p.data.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + eps
            f_plus = loss_fn().item()
            flat[i] = orig - eps
            f_minus = loss_fn().item()
            flat[i] = orig
            numeric = (f_plus - f_minus) / (2.0 * eps)
            worst = max(worst, abs(analytic[i] - numeric) / max(1.0, abs(numeric)))
    return worst
