"""Compiled loops for the two primitives that dominate a training step.

Reductions run in a fixed sequential order, so results are bit-reproducible.
"""
import math

import numba
import numpy as np


@numba.njit(cache=True)
def layer_norm_fwd(x, gamma, beta, eps):
    n, d = x.shape
    out = np.empty_like(x)
    xhat = np.empty_like(x)
    inv = np.empty(n)
    for i in range(n):
        s = 0.0
        for j in range(d):
            s += x[i, j]
        mu = s / d
        v = 0.0
        for j in range(d):
            c = x[i, j] - mu
            v += c * c
        r = 1.0 / math.sqrt(v / d + eps)
        inv[i] = r
        for j in range(d):
            h = (x[i, j] - mu) * r
            xhat[i, j] = h
            out[i, j] = h * gamma[j] + beta[j]
    return out, xhat, inv


@numba.njit(cache=True)
def layer_norm_bwd(g, xhat, inv, gamma):
    n, d = g.shape
    gx = np.empty_like(g)
    ggamma = np.zeros(d)
    gbeta = np.zeros(d)
    for i in range(n):
        s1 = 0.0
        s2 = 0.0
        for j in range(d):
            gh = g[i, j] * gamma[j]
            s1 += gh
            s2 += gh * xhat[i, j]
            ggamma[j] += g[i, j] * xhat[i, j]
            gbeta[j] += g[i, j]
        s1 /= d
        s2 /= d
        for j in range(d):
            gx[i, j] = inv[i] * (g[i, j] * gamma[j] - s1 - xhat[i, j] * s2)
    return gx, ggamma, gbeta


@numba.njit(cache=True)
def mha_fwd(q, k, v, h):
    B, nq, d = q.shape
    nk = k.shape[1]
    dh = d // h
    s = 1.0 / math.sqrt(dh)
    out = np.zeros((B, nq, d))
    w = np.empty((B, h, nq, nk))
    for b in range(B):
        for hd in range(h):
            c0 = hd * dh
            for i in range(nq):
                m = -np.inf
                for j in range(nk):
                    acc = 0.0
                    for c in range(c0, c0 + dh):
                        acc += q[b, i, c] * k[b, j, c]
                    acc *= s
                    w[b, hd, i, j] = acc
                    if acc > m:
                        m = acc
                z = 0.0
                for j in range(nk):
                    e = math.exp(w[b, hd, i, j] - m)
                    w[b, hd, i, j] = e
                    z += e
                for j in range(nk):
                    w[b, hd, i, j] /= z
                for j in range(nk):
                    wij = w[b, hd, i, j]
                    for c in range(c0, c0 + dh):
                        out[b, i, c] += wij * v[b, j, c]
    return out, w


@numba.njit(cache=True)
def mha_bwd(g, q, k, v, w, h):
    B, nq, d = q.shape
    nk = k.shape[1]
    dh = d // h
    s = 1.0 / math.sqrt(dh)
    gq = np.zeros_like(q)
    gk = np.zeros_like(k)
    gv = np.zeros_like(v)
    gs = np.empty(nk)
    for b in range(B):
        for hd in range(h):
            c0 = hd * dh
            for i in range(nq):
                dot = 0.0
                for j in range(nk):
                    acc = 0.0
                    for c in range(c0, c0 + dh):
                        acc += g[b, i, c] * v[b, j, c]
                    gs[j] = acc
                    dot += acc * w[b, hd, i, j]
                for j in range(nk):
                    wij = w[b, hd, i, j]
                    gsj = wij * (gs[j] - dot) * s
                    for c in range(c0, c0 + dh):
                        gq[b, i, c] += gsj * k[b, j, c]
                        gk[b, j, c] += gsj * q[b, i, c]
                        gv[b, j, c] += wij * g[b, i, c]
    return gq, gk, gv
