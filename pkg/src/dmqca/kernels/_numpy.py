"""Pure-numpy kernels.

Forward convolution and matmul add one tap (or one contraction index) at a
time into a zero-initialised accumulator, so every output element is summed
in the same order as a plain nested loop. That keeps this path bitwise equal
to the numba path and to naive reference loops.
"""
import numpy as np


def _out_extent(n, k, s, d):
    return (n - (k - 1) * d - 1) // s + 1


def conv_forward(x, k, stride, dilation):
    """Correlate pre-padded ``x[C,T,H,W]`` with ``k[O,C,kT,kH,kW]``."""
    C, T, H, W = x.shape
    O, _, KT, KH, KW = k.shape
    st, sh, sw = stride
    dt, dh, dw = dilation
    OT, OH, OW = _out_extent(T, KT, st, dt), _out_extent(H, KH, sh, dh), _out_extent(W, KW, sw, dw)
    out = np.zeros((O, OT, OH, OW))
    for c in range(C):
        for a in range(KT):
            ta = a * dt
            for b in range(KH):
                hb = b * dh
                for e in range(KW):
                    we = e * dw
                    patch = x[c, ta:ta + (OT - 1) * st + 1:st,
                              hb:hb + (OH - 1) * sh + 1:sh,
                              we:we + (OW - 1) * sw + 1:sw]
                    out += k[:, c, a, b, e, None, None, None] * patch[None]
    return out


def conv_grad_input(dy, k, stride, dilation, in_shape):
    O, OT, OH, OW = dy.shape
    _, C, KT, KH, KW = k.shape
    st, sh, sw = stride
    dt, dh, dw = dilation
    dx = np.zeros(in_shape)
    dy2 = dy.reshape(O, -1)
    for a in range(KT):
        ta = a * dt
        for b in range(KH):
            hb = b * dh
            for e in range(KW):
                we = e * dw
                contrib = (k[:, :, a, b, e].T @ dy2).reshape(C, OT, OH, OW)
                dx[:, ta:ta + (OT - 1) * st + 1:st,
                   hb:hb + (OH - 1) * sh + 1:sh,
                   we:we + (OW - 1) * sw + 1:sw] += contrib
    return dx


def conv_grad_weight(dy, x, k_shape, stride, dilation):
    O, OT, OH, OW = dy.shape
    _, C, KT, KH, KW = k_shape
    st, sh, sw = stride
    dt, dh, dw = dilation
    dk = np.zeros(k_shape)
    dy2 = dy.reshape(O, -1)
    for a in range(KT):
        ta = a * dt
        for b in range(KH):
            hb = b * dh
            for e in range(KW):
                we = e * dw
                patch = x[:, ta:ta + (OT - 1) * st + 1:st,
                          hb:hb + (OH - 1) * sh + 1:sh,
                          we:we + (OW - 1) * sw + 1:sw]
                dk[:, :, a, b, e] = dy2 @ patch.reshape(C, -1).T
    return dk


def matmul(a, b):
    """Batched ``a[B,M,K] @ b[B,K,N]`` accumulated sequentially over K."""
    B, M, K = a.shape
    out = np.zeros((B, M, b.shape[2]))
    for kk in range(K):
        out += a[:, :, kk, None] * b[:, None, kk, :]
    return out
