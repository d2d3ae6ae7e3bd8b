"""Patch-gather kernels for conv3d (channels-last layout).

``unfold_cl`` lowers a (B, D, H, W, C) volume into a patch matrix
(B, L, k0*k1*k2*C) whose rows are output positions and whose columns run
over (kd, kh, kw, c) — channel fastest.  Zero padding is handled inside
the kernel via bounds checks, so no padded copy is materialized.
``fold_cl`` is the exact adjoint (scatter-add, out-of-bounds taps
dropped).  Channels-last keeps inner copies contiguous, which is the
whole point; the public conv op transposes at the boundary.

Numba compiles these when available; the numpy fallback does one strided
slice copy per kernel offset and is a few times slower but identical.
"""

from __future__ import annotations

import numpy as np

try:  # pragma: no cover - exercised implicitly by whichever env runs
    from numba import njit

    HAVE_NUMBA = True
except ImportError:  # pragma: no cover
    HAVE_NUMBA = False

    def njit(*a, **k):  # type: ignore
        def deco(fn):
            return fn

        return deco


@njit(cache=True)
def _unfold_cl_nb(x, k0, k1, k2, s, p, Do, Ho, Wo, out):  # pragma: no cover
    B, D, H, W, C = x.shape
    for b in range(B):
        pos = 0
        for d in range(Do):
            for h in range(Ho):
                for w in range(Wo):
                    q = 0
                    for kd in range(k0):
                        zd = d * s + kd - p
                        for kh in range(k1):
                            zh = h * s + kh - p
                            for kw in range(k2):
                                zw = w * s + kw - p
                                if 0 <= zd < D and 0 <= zh < H and 0 <= zw < W:
                                    for c in range(C):
                                        out[b, pos, q + c] = x[b, zd, zh, zw, c]
                                else:
                                    for c in range(C):
                                        out[b, pos, q + c] = 0.0
                                q += C
                    pos += 1


@njit(cache=True)
def _fold_cl_nb(g, k0, k1, k2, s, p, Do, Ho, Wo, acc):  # pragma: no cover
    B, D, H, W, C = acc.shape
    for b in range(B):
        pos = 0
        for d in range(Do):
            for h in range(Ho):
                for w in range(Wo):
                    q = 0
                    for kd in range(k0):
                        zd = d * s + kd - p
                        for kh in range(k1):
                            zh = h * s + kh - p
                            for kw in range(k2):
                                zw = w * s + kw - p
                                if 0 <= zd < D and 0 <= zh < H and 0 <= zw < W:
                                    for c in range(C):
                                        acc[b, zd, zh, zw, c] += g[b, pos, q + c]
                                q += C
                    pos += 1


def _pad_cl(x: np.ndarray, p: int) -> np.ndarray:
    if p == 0:
        return x
    B, D, H, W, C = x.shape
    out = np.zeros((B, D + 2 * p, H + 2 * p, W + 2 * p, C), dtype=x.dtype)
    out[:, p:p + D, p:p + H, p:p + W, :] = x
    return out


@njit(cache=True)
def _cn_fwd_nb(x, gamma, beta, cpg, eps, y, xn, rs):  # pragma: no cover
    # x: (B, C, S) contiguous; groups are consecutive channel runs of cpg
    B, C, S = x.shape
    M = cpg * S
    for b in range(B):
        for g in range(C // cpg):
            c0 = g * cpg
            acc = 0.0
            for c in range(c0, c0 + cpg):
                for i in range(S):
                    acc += x[b, c, i]
            m = acc / M
            acc = 0.0
            for c in range(c0, c0 + cpg):
                for i in range(S):
                    d = x[b, c, i] - m
                    acc += d * d
            r = 1.0 / np.sqrt(acc / M + eps)
            rs[b, g] = r
            for c in range(c0, c0 + cpg):
                ga = gamma[c]
                be = beta[c]
                for i in range(S):
                    v = (x[b, c, i] - m) * r
                    xn[b, c, i] = v
                    y[b, c, i] = ga * v + be


@njit(cache=True)
def _cn_bwd_nb(gy, xn, rs, gamma, cpg, gx, ggamma, gbeta):  # pragma: no cover
    B, C, S = gy.shape
    M = cpg * S
    for b in range(B):
        for g in range(C // cpg):
            c0 = g * cpg
            m1 = 0.0
            m2 = 0.0
            for c in range(c0, c0 + cpg):
                ga = gamma[c]
                for i in range(S):
                    gh = gy[b, c, i] * ga
                    m1 += gh
                    m2 += gh * xn[b, c, i]
            m1 /= M
            m2 /= M
            r = rs[b, g]
            for c in range(c0, c0 + cpg):
                ga = gamma[c]
                for i in range(S):
                    gh = gy[b, c, i] * ga
                    gx[b, c, i] = (gh - m1 - xn[b, c, i] * m2) * r
    for c in range(C):
        sg = 0.0
        sb = 0.0
        for b in range(B):
            for i in range(S):
                sg += gy[b, c, i] * xn[b, c, i]
                sb += gy[b, c, i]
        ggamma[c] = sg
        gbeta[c] = sb


def unfold_cl(x: np.ndarray, k: tuple[int, int, int], s: int, p: int,
              out_dims: tuple[int, int, int]) -> np.ndarray:
    """(B, D, H, W, C) volume -> (B, L, K*C) patch matrix with zero padding."""
    B, _, _, _, C = x.shape
    Do, Ho, Wo = out_dims
    k0, k1, k2 = k
    L = Do * Ho * Wo
    out = np.empty((B, L, k0 * k1 * k2 * C), dtype=x.dtype)
    if HAVE_NUMBA and x.dtype in (np.float32, np.float64):
        _unfold_cl_nb(np.ascontiguousarray(x), k0, k1, k2, s, p, Do, Ho, Wo, out)
        return out
    xp = _pad_cl(x, p)
    ov = out.reshape(B, Do, Ho, Wo, k0 * k1 * k2, C)
    q = 0
    for kd in range(k0):
        for kh in range(k1):
            for kw in range(k2):
                ov[:, :, :, :, q, :] = xp[:, kd:kd + s * (Do - 1) + 1:s,
                                          kh:kh + s * (Ho - 1) + 1:s,
                                          kw:kw + s * (Wo - 1) + 1:s, :]
                q += 1
    return out


def fold_cl(g: np.ndarray, k: tuple[int, int, int], s: int, p: int,
            out_dims: tuple[int, int, int],
            dims: tuple[int, int, int]) -> np.ndarray:
    """Adjoint of unfold_cl: (B, L, K*C) -> (B, D, H, W, C) scatter-add."""
    B, L, KC = g.shape
    k0, k1, k2 = k
    C = KC // (k0 * k1 * k2)
    Do, Ho, Wo = out_dims
    acc = np.zeros((B, *dims, C), dtype=g.dtype)
    if HAVE_NUMBA and g.dtype in (np.float32, np.float64):
        _fold_cl_nb(np.ascontiguousarray(g), k0, k1, k2, s, p, Do, Ho, Wo, acc)
        return acc
    D, H, W = dims
    pad = np.zeros((B, D + 2 * p, H + 2 * p, W + 2 * p, C), dtype=g.dtype)
    gv = g.reshape(B, Do, Ho, Wo, k0 * k1 * k2, C)
    q = 0
    for kd in range(k0):
        for kh in range(k1):
            for kw in range(k2):
                pad[:, kd:kd + s * (Do - 1) + 1:s,
                    kh:kh + s * (Ho - 1) + 1:s,
                    kw:kw + s * (Wo - 1) + 1:s, :] += gv[:, :, :, :, q, :]
                q += 1
    acc[...] = pad[:, p:p + D, p:p + H, p:p + W, :] if p else pad
    return acc
