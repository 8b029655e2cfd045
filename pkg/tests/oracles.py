"""Independent reference implementations written as plain scalar loops.

They share only elementary functions (``np.exp``/``np.tanh`` on scalars) with the
library, and accumulate every sum left to right so results can be compared bit for bit.
"""
import numpy as np


def conv3d(x, k, stride=(1, 1, 1), padding=(0, 0, 0)):
    C, T, H, W = x.shape
    O, _, KT, KH, KW = k.shape
    st, sh, sw = stride
    pt, ph, pw = padding
    OT = (T + 2 * pt - KT) // st + 1
    OH = (H + 2 * ph - KH) // sh + 1
    OW = (W + 2 * pw - KW) // sw + 1
    out = np.zeros((O, OT, OH, OW))
    for o in range(O):
        for t in range(OT):
            for i in range(OH):
                for j in range(OW):
                    s = 0.0
                    for c in range(C):
                        for a in range(KT):
                            for b in range(KH):
                                for e in range(KW):
                                    ti, hi, wi = t * st + a - pt, i * sh + b - ph, j * sw + e - pw
                                    if 0 <= ti < T and 0 <= hi < H and 0 <= wi < W:
                                        v = x[c, ti, hi, wi]
                                    else:
                                        v = 0.0
                                    s += v * k[o, c, a, b, e]
                    out[o, t, i, j] = s
    return out


def conv2d(x, k, stride=(1, 1), padding=(0, 0), dilation=(1, 1)):
    C, H, W = x.shape
    O, _, KH, KW = k.shape
    sh, sw = stride
    ph, pw = padding
    dh, dw = dilation
    OH = (H + 2 * ph - ((KH - 1) * dh + 1)) // sh + 1
    OW = (W + 2 * pw - ((KW - 1) * dw + 1)) // sw + 1
    out = np.zeros((O, OH, OW))
    for o in range(O):
        for i in range(OH):
            for j in range(OW):
                s = 0.0
                for c in range(C):
                    for b in range(KH):
                        for e in range(KW):
                            hi, wi = i * sh + b * dh - ph, j * sw + e * dw - pw
                            v = x[c, hi, wi] if 0 <= hi < H and 0 <= wi < W else 0.0
                            s += v * k[o, c, b, e]
                out[o, i, j] = s
    return out


def matmul(a, b):
    n, m = a.shape
    p = b.shape[1]
    out = np.zeros((n, p))
    for i in range(n):
        for j in range(p):
            s = 0.0
            for q in range(m):
                s += a[i, q] * b[q, j]
            out[i, j] = s
    return out


def softmax(v):
    mx = max(v)
    e = [np.exp(x - mx) for x in v]
    total = 0.0
    for x in e:
        total += x
    return [x / total for x in e]


def self_attention(x, wf, wg, wh, gamma):
    C, M = x.shape
    f, g, h = matmul(wf, x), matmul(wg, x), matmul(wh, x)
    S = np.zeros((M, M))
    for i in range(M):
        for j in range(M):
            s = 0.0
            for c in range(f.shape[0]):
                s += f[c, i] * g[c, j]
            S[i, j] = s
    out = np.zeros((C, M))
    for j in range(M):
        alpha = softmax([S[i, j] for i in range(M)])  # alpha[i] = weight of source i for target j
        for c in range(C):
            acc = 0.0
            for i in range(M):
                acc += h[c, i] * alpha[i]
            out[c, j] = x[c, j] + gamma * acc
    return out


def context_attention(items, w, b, u):
    F, R = items.shape
    A = w.shape[0]
    scores = []
    for r in range(R):
        score = 0.0
        for a in range(A):
            s = 0.0
            for f in range(F):
                s += w[a, f] * items[f, r]
            score += u[a] * np.tanh(s + b[a])
        scores.append(score)
    beta = softmax(scores)
    summary = np.zeros(F)
    for f in range(F):
        acc = 0.0
        for r in range(R):
            acc += items[f, r] * beta[r]
        summary[f] = acc
    return summary, np.array(beta)


def leaky(x, slope=0.2):
    return np.where(x >= 0, x, slope * x)


def view_oracle(frames, cfg, p, prefix="view"):
    x = frames[None]
    for s in range(5):
        k = p[f"{prefix}.conv{s}.w"].data
        pad = tuple((n - 1) // 2 for n in k.shape[2:])
        x = leaky(conv3d(x, k, (1, 2, 2), pad) + p[f"{prefix}.conv{s}.b"].data[:, None, None, None])
    c, t = x.shape[:2]
    vecs = []
    for f in range(t):
        m = x[:, f].reshape(c, -1)
        m = self_attention(m, *(p[f"{prefix}.sa.{n}"].data for n in ("wf", "wg", "wh", "gamma")))
        vecs.append(context_attention(m, *(p[f"{prefix}.region.{n}"].data for n in ("w", "b", "u")))[0])
    v, _ = context_attention(np.stack(vecs, axis=1), *(p[f"{prefix}.frame.{n}"].data for n in ("w", "b", "u")))
    if cfg.projects:
        v = matmul(p[f"{prefix}.proj.w"].data, v[:, None])[:, 0] + p[f"{prefix}.proj.b"].data
    return v


def maxpool(x):
    c, h, w = x.shape
    out = np.empty((c, h // 2, w // 2))
    for k in range(c):
        for i in range(h // 2):
            for j in range(w // 2):
                out[k, i, j] = max(x[k, 2 * i, 2 * j], x[k, 2 * i, 2 * j + 1], x[k, 2 * i + 1, 2 * j], x[k, 2 * i + 1, 2 * j + 1])
    return out


def keyframe_oracle(image, cfg, p, prefix="key"):
    x = image[None]
    for i, d in enumerate(cfg.dilations):
        for j in range(2):
            u = f"{prefix}.block{i}.unit{j}"
            wa, ba, wb, bb = (p[f"{u}.{n}"].data for n in ("wa", "ba", "wb", "bb"))
            r = leaky(conv2d(x, wa, padding=(d, d), dilation=(d, d)) + ba[:, None, None])
            r = conv2d(r, wb, padding=(d, d), dilation=(d, d)) + bb[:, None, None]
            skip = np.concatenate([x, np.zeros((wa.shape[0] - x.shape[0],) + x.shape[1:])]) if wa.shape[0] > x.shape[0] else x
            x = skip + r
        x = maxpool(x)
    return matmul(p[f"{prefix}.fc.w"].data, x.reshape(-1, 1))[:, 0] + p[f"{prefix}.fc.b"].data
