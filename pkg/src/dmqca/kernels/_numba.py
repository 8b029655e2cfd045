"""numba-compiled kernels.

The forward convolution gathers one tap into a contiguous buffer, then adds it into
every output channel; per output element the accumulation order is still
``(c, kt, kh, kw)``, the same as ``_numpy`` and a naive loop. Backward passes go
through im2col/col2im plus a BLAS product, where summation order is free.
"""
import numpy as np
from numba import njit


@njit(cache=True)
def _conv_forward(x, k, st, sh, sw, dt, dh, dw):
    C, T, H, W = x.shape
    O, _, KT, KH, KW = k.shape
    OT = (T - (KT - 1) * dt - 1) // st + 1
    OH = (H - (KH - 1) * dh - 1) // sh + 1
    OW = (W - (KW - 1) * dw - 1) // sw + 1
    P = OT * OH * OW
    out = np.zeros((O, P))
    buf = np.empty(P)
    for c in range(C):
        for a in range(KT):
            for b in range(KH):
                for e in range(KW):
                    p = 0
                    for t in range(OT):
                        ti = t * st + a * dt
                        for i in range(OH):
                            hi = i * sh + b * dh
                            for j in range(OW):
                                buf[p] = x[c, ti, hi, j * sw + e * dw]
                                p += 1
                    for o in range(O):
                        wv = k[o, c, a, b, e]
                        for q in range(P):
                            out[o, q] += wv * buf[q]
    return out.reshape((O, OT, OH, OW))


@njit(cache=True)
def _im2col(x, KT, KH, KW, st, sh, sw, dt, dh, dw, OT, OH, OW):
    C = x.shape[0]
    cols = np.empty((C * KT * KH * KW, OT * OH * OW))
    r = 0
    for c in range(C):
        for a in range(KT):
            for b in range(KH):
                for e in range(KW):
                    p = 0
                    for t in range(OT):
                        ti = t * st + a * dt
                        for i in range(OH):
                            hi = i * sh + b * dh
                            for j in range(OW):
                                cols[r, p] = x[c, ti, hi, j * sw + e * dw]
                                p += 1
                    r += 1
    return cols


@njit(cache=True)
def _col2im(cols, C, T, H, W, KT, KH, KW, st, sh, sw, dt, dh, dw, OT, OH, OW):
    dx = np.zeros((C, T, H, W))
    r = 0
    for c in range(C):
        for a in range(KT):
            for b in range(KH):
                for e in range(KW):
                    p = 0
                    for t in range(OT):
                        ti = t * st + a * dt
                        for i in range(OH):
                            hi = i * sh + b * dh
                            for j in range(OW):
                                dx[c, ti, hi, j * sw + e * dw] += cols[r, p]
                                p += 1
                    r += 1
    return dx


@njit(cache=True)
def _matmul(a, b):
    B, M, K = a.shape
    N = b.shape[2]
    out = np.zeros((B, M, N))
    for bb in range(B):
        for i in range(M):
            for kk in range(K):
                aik = a[bb, i, kk]
                for j in range(N):
                    out[bb, i, j] += aik * b[bb, kk, j]
    return out


def conv_forward(x, k, stride, dilation):
    return _conv_forward(x, k, *stride, *dilation)


def conv_grad_input(dy, k, stride, dilation, in_shape):
    O, OT, OH, OW = dy.shape
    cols = k.reshape(O, -1).T @ dy.reshape(O, -1)
    return _col2im(cols, *in_shape, *k.shape[2:], *stride, *dilation, OT, OH, OW)


def conv_grad_weight(dy, x, k_shape, stride, dilation):
    O, OT, OH, OW = dy.shape
    cols = _im2col(x, *k_shape[2:], *stride, *dilation, OT, OH, OW)
    return (dy.reshape(O, -1) @ cols.T).reshape(k_shape)


def matmul(a, b):
    return _matmul(a, b)
