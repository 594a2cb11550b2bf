"""Brute-force double-precision reference implementations.

Deliberately written as explicit loops over plain Python floats / numpy
scalars so they share no code path with the vectorized implementations.
"""
from __future__ import annotations

import math

import numpy as np
import torch


def softmax_row(row):
    m = max(row)
    e = [math.exp(v - m) for v in row]
    s = sum(e)
    return [v / s for v in e]


def matmul(a, b):
    n, k = len(a), len(a[0])
    m = len(b[0])
    return [[sum(a[i][t] * b[t][j] for t in range(k)) for j in range(m)] for i in range(n)]


def transpose(a):
    return [list(col) for col in zip(*a)]


def attention_head_loop(z, wq, wk, wv):
    """softmax(QK^T/sqrt(d))V for one head; z (T, C), w (C, d) as nested lists."""
    q, k, v = matmul(z, wq), matmul(z, wk), matmul(z, wv)
    d = len(wq[0])
    t = len(z)
    out = []
    for i in range(t):
        scores = [sum(q[i][c] * k[j][c] for c in range(d)) / math.sqrt(d) for j in range(t)]
        w = softmax_row(scores)
        out.append([sum(w[j] * v[j][c] for j in range(t)) for c in range(d)])
    return out


def position_attention_loop(z, wq, bq, wk, bk, wv, bv):
    """z (C, N); w (C_out, C); returns (C, N)."""
    c_in, n = len(z), len(z[0])

    def conv1x1(w, b):
        return [[sum(w[o][c] * z[c][p] for c in range(c_in)) + b[o] for o in range(len(w))] for p in range(n)]

    q, k, v = conv1x1(wq, bq), conv1x1(wk, bk), conv1x1(wv, bv)  # (N, C_out)
    out = [[0.0] * n for _ in range(len(wv))]
    for i in range(n):
        w = softmax_row([sum(q[i][c] * k[j][c] for c in range(len(wq))) for j in range(n)])
        for o in range(len(wv)):
            out[o][i] = sum(w[j] * v[j][o] for j in range(n))
    return out


def channel_attention_loop(z):
    c, n = len(z), len(z[0])
    out = [[0.0] * n for _ in range(c)]
    for i in range(c):
        w = softmax_row([sum(z[i][p] * z[j][p] for p in range(n)) for j in range(c)])
        for p in range(n):
            out[i][p] = sum(w[j] * z[j][p] for j in range(c))
    return out


def conv2d_loop(x, weight, bias):
    """x (C, H, W), weight (O, C, k, k) odd k, zero padding, stride 1."""
    c, h, w = x.shape
    o, _, k, _ = weight.shape
    r = k // 2
    out = np.zeros((o, h, w))
    for oc in range(o):
        for i in range(h):
            for j in range(w):
                acc = bias[oc] if bias is not None else 0.0
                for ic in range(c):
                    for di in range(k):
                        for dj in range(k):
                            ii, jj = i + di - r, j + dj - r
                            if 0 <= ii < h and 0 <= jj < w:
                                acc += weight[oc, ic, di, dj] * x[ic, ii, jj]
                out[oc, i, j] = acc
    return out


def ffd_fuse_loop(z, a_p, a_c, x_prev, w_p, w_c, alpha, beta, gamma, conv_w, conv_b, eps=1e-5):
    """Single-sample fusion written straight from the formula; arrays (C, h, w)."""
    mixed = w_p * a_p + w_c * a_c + z
    x_hat = conv2d_loop(mixed, conv_w, conv_b) + x_prev
    c = x_hat.shape[0]
    s = []
    for ch in range(c):
        norm = math.sqrt(sum(float(v) ** 2 for v in x_hat[ch].ravel()) + eps)
        s.append(alpha[ch] * norm + beta[ch])
    rms = math.sqrt(sum(v * v for v in s) / c + eps)
    out = np.empty_like(x_hat)
    for ch in range(c):
        out[ch] = x_hat[ch] * (1.0 + math.tanh(gamma[ch] * s[ch] / rms))
    return out


def hsic_loop(K, L):
    """trace(K H L H)/(m-1)^2 by explicit quadruple summation."""
    m = len(K)
    H = [[(1.0 if i == j else 0.0) - 1.0 / m for j in range(m)] for i in range(m)]
    total = 0.0
    for i in range(m):
        for j in range(m):
            for k in range(m):
                for l in range(m):
                    total += K[i][j] * H[j][k] * L[k][l] * H[l][i]
    return total / (m - 1) ** 2


def hsic_centered_features(z_a, z_b):
    """||Za_c^T Zb_c||_F^2 / (m-1)^2 with column-centered features."""
    za = z_a - z_a.mean(0)
    zb = z_b - z_b.mean(0)
    m = z_a.shape[0]
    return float(np.linalg.norm(za.T @ zb, "fro") ** 2 / (m - 1) ** 2)


def depth_metrics_loop(pred, gt):
    n = 0
    abs_rel = sq_rel = se = sle = 0.0
    d = [0, 0, 0]
    for p, g in zip(np.ravel(pred), np.ravel(gt)):
        p, g = float(p), float(g)
        n += 1
        abs_rel += abs(p - g) / g
        sq_rel += (p - g) ** 2 / g
        se += (p - g) ** 2
        sle += (math.log(p) - math.log(g)) ** 2
        ratio = max(p / g, g / p)
        for k in range(3):
            if ratio < 1.25 ** (k + 1):
                d[k] += 1
    return {
        "abs_rel": abs_rel / n,
        "sq_rel": sq_rel / n,
        "rmse": math.sqrt(se / n),
        "rmse_log": math.sqrt(sle / n),
        "delta1": d[0] / n,
        "delta2": d[1] / n,
        "delta3": d[2] / n,
    }


def ssim_constant(a: float, b: float, c1: float = 0.01**2, c2: float = 0.03**2) -> float:
    """SSIM between two constant images: variances and covariance vanish."""
    return (2 * a * b + c1) * c2 / ((a * a + b * b + c1) * c2)


def relative_error(a, b) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return float(np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300))


def finite_difference_check(fn, inputs, eps=1e-5, max_entries=60, seed=0):
    """Relative error between autograd and central finite differences.

    ``fn`` maps the list of double tensors ``inputs`` to a tensor; the output is
    contracted with a fixed random vector to a scalar. Up to ``max_entries``
    randomly chosen coordinates per input are probed.
    """
    gen = np.random.default_rng(seed)
    inputs = [x.detach().clone().double().requires_grad_(True) for x in inputs]
    out = fn(*inputs)
    weights = torch.from_numpy(gen.standard_normal(tuple(out.shape)))
    scalar = (out * weights).sum()
    grads = torch.autograd.grad(scalar, inputs, allow_unused=True)
    analytic, numeric = [], []
    for pos, (x, g) in enumerate(zip(inputs, grads)):
        g = torch.zeros_like(x) if g is None else g
        n = x.numel()
        picks = gen.choice(n, size=min(n, max_entries), replace=False)
        for idx in picks:
            vals = []
            for sign in (1.0, -1.0):
                probe = [y.detach().clone() for y in inputs]
                probe[pos].reshape(-1)[idx] += sign * eps
                with torch.no_grad():
                    vals.append(float((fn(*probe) * weights).sum()))
            numeric.append((vals[0] - vals[1]) / (2 * eps))
            analytic.append(float(g.reshape(-1)[idx]))
    return relative_error(analytic, numeric)
