"""Central finite-difference verification of analytic gradients."""
import numpy as np


TOLERANCE = 1e-4


def _central(f, x, flat, idx, eps):
    out = np.empty(idx.size)
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + eps
        hi = float(f(x).data)
        flat[i] = orig - eps
        lo = float(f(x).data)
        flat[i] = orig
        out[n] = (hi - lo) / (2.0 * eps)
    return out


def _one_sided(f, x, flat, idx, h):
    # second-order accurate, stencil x, x + h, x + 2h (h may be negative)
    f0 = float(f(x).data)
    out = np.empty(idx.size)
    for n, i in enumerate(idx):
        orig = flat[i]
        flat[i] = orig + h
        f1 = float(f(x).data)
        flat[i] = orig + 2 * h
        f2 = float(f(x).data)
        flat[i] = orig
        out[n] = (-3.0 * f0 + 4.0 * f1 - f2) / (2.0 * h)
    return out


def _rel_err(a, n, floor):
    return np.abs(a - n) / np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)


def finite_diff_check(f, x, eps=1e-5, entries=None, rng=None, robust=False):
    """Max relative error between the analytic and central-difference gradient of ``f`` at ``x``.

    ``f`` maps the (mutated in place) tensor ``x`` to a scalar tensor. Error per entry is
    ``|a - n| / max(|a|, |n|, 1e-8)``. ``entries`` limits the check to a random subset.

    ``robust`` is for deep compositions. The floor becomes the smallest derivative the central
    difference resolves to ``TOLERANCE`` given float64 roundoff in ``f``, and entries that fail
    are re-measured with ``eps / 10`` and then ``eps / 100``, each time centrally and with
    second-order one-sided stencils on both sides. A LeakyReLU or max-pool kink near ``x``
    corrupts the wider stencil or the side it lies on; a wrong gradient fails them all.
    """
    if x.grad is None:
        raise ValueError("x must require grad")
    x.zero_grad()
    out = f(x)
    out.backward()
    analytic = x.grad.copy()
    flat = x.data.reshape(-1)
    idx = np.arange(flat.size)
    if entries is not None and entries < flat.size:
        rng = np.random.default_rng(0) if rng is None else rng
        idx = rng.choice(flat.size, size=entries, replace=False)
    if not idx.size:
        return 0.0
    a = analytic.reshape(-1)[idx]
    scale = abs(float(out.data)) + 1.0

    def floor(h):
        return max(1e-8, scale * np.finfo(np.float64).eps / h / TOLERANCE) if robust else 1e-8

    err = _rel_err(a, _central(f, x, flat, idx, eps), floor(eps))
    bad = err >= TOLERANCE
    for small in (eps / 10, eps / 100) if robust else ():
        if not bad.any():
            break
        err[bad] = np.minimum(err[bad], _rel_err(a[bad], _central(f, x, flat, idx[bad], small), floor(small)))
        bad = err >= TOLERANCE
        for h in (small, -small):
            if bad.any():
                # one-sided stencils have 4x the roundoff of the central one
                n = _one_sided(f, x, flat, idx[bad], h)
                err[bad] = np.minimum(err[bad], _rel_err(a[bad], n, 4 * floor(small)))
                bad = err >= TOLERANCE
    return float(err.max())


# operator suite


def _projector(rng, shape):
    from .tensor import Tensor

    return Tensor(rng.normal(size=shape))


def _scalar(out, proj):
    from . import tensor as T

    return T.tsum(T.mul(out, proj))


def operator_cases(rng):
    """Yield ``(label, f, x)`` triples covering every differentiable operation on toy shapes."""
    from . import tensor as T
    from .attention import ContextAttentionParams, SelfAttentionParams, context_attention, self_attention

    def p(*shape):
        return T.parameter(rng.normal(size=shape))

    def case(label, build, *inputs):
        out = build(*inputs)
        proj = _projector(rng, out.shape)
        for k, x in enumerate(inputs):
            if isinstance(x, T.Tensor) and x.requires_grad:
                yield f"{label}[{k}]", (lambda _x, b=build, ins=inputs: _scalar(b(*ins), proj)), x

    a, b = p(3, 4), p(3, 4)
    yield from case("add", T.add, a, p(4))
    yield from case("sub", T.sub, a, b)
    yield from case("mul", T.mul, a, b)
    yield from case("scale", lambda x: T.scale(x, -1.7), p(2, 5))
    yield from case("abs", T.tabs, p(7))
    yield from case("square", T.square, p(2, 3))
    yield from case("tanh", T.tanh, p(6))
    yield from case("leaky_relu", lambda x: T.leaky_relu(x, 0.2), p(3, 4))
    yield from case("sum", lambda x: T.tsum(x, axis=1), p(3, 4, 2))
    yield from case("mean", lambda x: T.mean(x, axis=0), p(3, 4))
    ax = int(rng.integers(0, 3))
    yield from case(f"softmax(axis={ax})", lambda x: T.softmax(x, axis=ax), p(3, 4, 5))
    yield from case("concat", lambda x, y: T.concat([x, y], axis=1), p(2, 3), p(2, 5))
    yield from case("split", lambda x: T.split(x, [2, 3], axis=1)[1], p(2, 5))
    yield from case("reshape", lambda x: T.reshape(x, (6, 2)), p(3, 4))
    yield from case("transpose", lambda x: T.transpose(x, (2, 0, 1)), p(2, 3, 4))
    yield from case("matmul", T.matmul, p(3, 4), p(4, 5))
    yield from case("matmul_batched", T.matmul, p(2, 3, 4), p(2, 4, 5))
    yield from case("matmul_shared", T.matmul, p(3, 4), p(2, 4, 5))
    yield from case("matvec", T.matvec, p(3, 4), p(4))
    yield from case("one_by_one_conv", T.one_by_one_conv, p(3, 5), p(2, 3))
    yield from case("conv3d", lambda x, k: T.conv3d(x, k, stride=(1, 2, 2)), p(2, 3, 6, 6), p(3, 2, 3, 3, 3))
    yield from case("conv3d_valid", lambda x, k: T.conv3d(x, k, padding=0), p(2, 3, 4, 4), p(2, 2, 2, 2, 2))
    yield from case("conv2d_dilated", lambda x, k: T.conv2d(x, k, padding=(2, 2), dilation=(2, 2)),
                    p(3, 7, 8), p(2, 3, 3, 3))
    yield from case("maxpool2d", T.maxpool2d, p(2, 4, 6))
    yield from case("avgpool2d", T.avgpool2d, p(2, 4, 6))
    c, m = 9, 5
    sa = SelfAttentionParams(p(1, c), p(1, c), p(c, c), T.parameter(rng.normal()))
    yield from case("self_attention", lambda x, *_: self_attention(x, sa), p(c, m), *sa.tensors())
    ca = ContextAttentionParams(p(4, 5), p(4), p(4))
    yield from case("context_attention", lambda x, *_: context_attention(x, ca)[0], p(5, 3), *ca.tensors())
    yield from case("context_attention_batched", lambda x, *_: context_attention(x, ca)[0], p(2, 5, 3), *ca.tensors())


def toy_model(seed, ablation=None):
    """Small model with the full topology, fast enough for per-entry finite differences."""
    from .model import DMQCA, ModelConfig

    cfg = ModelConfig(frames=2, height=64, width=64, filters=(2, 2, 3, 3, 4), key_widths=(2, 2, 2, 3, 3, 3),
                      feature_dim=3, hidden=8)
    model = DMQCA(cfg, ablation, seed=seed)
    rng = np.random.default_rng(seed + 1000)
    # move gamma and biases off their zero init so every path carries gradient
    for name, t in model.params.items():
        if name.endswith(("gamma", ".b", ".ba", ".bb")):
            t.data[...] = rng.normal(0.0, 0.3, t.shape)
    return model


def toy_batch(model, rng, n=2):
    from .phantom import Sample

    c = model.config
    return [Sample(rng.uniform(size=(c.frames, c.height, c.width)), rng.uniform(size=(c.frames, c.height, c.width)),
                   rng.uniform(size=(c.height, c.width)), rng.uniform(1.0, 8.0, size=c.n_outputs)) for _ in range(n)]


def model_cases(seed, entries=4):
    """Finite-difference cases for the full forward pass plus loss, one per parameter tensor."""
    from . import tensor as T
    from .model import loss

    model = toy_model(seed)
    rng = np.random.default_rng(seed)
    batch = toy_batch(model, rng, 1)
    labels = np.stack([s.label for s in batch])

    def f(_x):
        preds = T.concat([T.reshape(model.forward(s), (1, -1)) for s in batch], axis=0)
        return loss(preds, labels, model.regularised, 1e-3)

    for name, t in model.params.items():
        yield name, f, t


def run_suite(seed=0, n_configs=20, eps=1e-5, include_model=True, entries=4):
    """Return ``{label: worst relative error}`` over ``n_configs`` seeded configurations."""
    worst = {}
    for k in range(n_configs):
        rng = np.random.default_rng([seed, k])
        for label, f, x in operator_cases(rng):
            err = finite_diff_check(f, x, eps)
            worst[label] = max(worst.get(label, 0.0), err)
        if include_model:
            sub = np.random.default_rng([seed, k, 1])
            for name, f, x in model_cases(seed * 1000 + k):
                err = finite_diff_check(f, x, eps, entries=entries, rng=sub, robust=True)
                key = "model." + name.split(".", 1)[0]
                worst[key] = max(worst.get(key, 0.0), err)
    return worst
