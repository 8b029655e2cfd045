"""Per-view spatio-temporal encoder and dilated-residual keyframe encoder."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .attention import (
    ContextAttentionParams,
    SelfAttentionParams,
    context_attention,
    self_attention,
    uniform_pool,
)
from .errors import ArgumentError, DimensionError

VIEW_STRIDE = (1, 2, 2)


@dataclass
class ViewEncoderConfig:
    filters: tuple = (8, 16, 32, 64, 64)
    kernels: tuple = ((3, 3, 3),) * 5
    feature_dim: int = 128
    attention_dim: int | None = None  # None -> final filter count
    leaky_slope: float = 0.2
    use_self_attention: bool = True
    use_context_attention: bool = True

    def __post_init__(self):
        self.filters = tuple(int(f) for f in self.filters)
        self.kernels = tuple(tuple(int(v) for v in k) for k in self.kernels)
        if len(self.filters) != 5 or len(self.kernels) != 5:
            raise ArgumentError("view encoder needs exactly 5 conv stages")

    @property
    def channels(self):
        return self.filters[-1]

    @property
    def projects(self):
        return self.feature_dim != self.channels


@dataclass
class KeyframeEncoderConfig:
    widths: tuple = (8, 8, 16, 16, 32, 32)
    dilations: tuple = (1, 1, 2, 2, 4, 4)
    feature_dim: int = 128
    leaky_slope: float = 0.2
    residual_scale: float = 0.1  # init scale of the second conv in each residual unit

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.dilations = tuple(int(d) for d in self.dilations)
        if len(self.widths) != 6 or len(self.dilations) != 6:
            raise ArgumentError("keyframe encoder needs exactly 6 dilated residual blocks")
        if any(b < a for a, b in zip(self.widths, self.widths[1:])):
            raise ArgumentError("keyframe widths must be non-decreasing (zero-padded shortcuts)")


def _he(rng, shape, fan_in, slope, gain=1.0):
    return rng.normal(0.0, gain * np.sqrt(2.0 / ((1.0 + slope**2) * fan_in)), shape)


# view encoder


def init_view_params(cfg: ViewEncoderConfig, rng, prefix="view", in_channels=1):
    params = {}
    c_in = in_channels
    for s, (c_out, k) in enumerate(zip(cfg.filters, cfg.kernels)):
        fan_in = c_in * int(np.prod(k))
        params[f"{prefix}.conv{s}.w"] = T.parameter(_he(rng, (c_out, c_in) + k, fan_in, cfg.leaky_slope))
        params[f"{prefix}.conv{s}.b"] = T.parameter(np.zeros(c_out))
        c_in = c_out
    c = cfg.channels
    if cfg.use_self_attention:
        sa = SelfAttentionParams.init(c, rng, prefix=f"{prefix}.sa")
        params.update({t.name: t for t in sa.tensors()})
    if cfg.use_context_attention:
        for level in ("region", "frame"):
            ca = ContextAttentionParams.init(c, rng, cfg.attention_dim, prefix=f"{prefix}.{level}")
            params.update({t.name: t for t in ca.tensors()})
    if cfg.projects:
        params[f"{prefix}.proj.w"] = T.parameter(rng.normal(0.0, 1.0 / np.sqrt(c), (cfg.feature_dim, c)))
        params[f"{prefix}.proj.b"] = T.parameter(np.zeros(cfg.feature_dim))
    for name, t in params.items():
        t.name = name
    return params


def _sa(params, prefix):
    return SelfAttentionParams(*(params[f"{prefix}.sa.{n}"] for n in ("wf", "wg", "wh", "gamma")))


def _ca(params, prefix, level):
    return ContextAttentionParams(*(params[f"{prefix}.{level}.{n}"] for n in ("w", "b", "u")))


def view_conv_stack(frames, cfg, params, prefix="view"):
    """Five strided 3-d conv stages; returns the ``[C, T, H/32, W/32]`` feature volume."""
    if frames.ndim != 3:
        raise DimensionError(f"view input must be [T,H,W], got {frames.shape}")
    t, h, w = frames.shape
    if h % 32 or w % 32:
        raise DimensionError(f"frame size {h}x{w} must be divisible by 32")
    x = T.reshape(frames, (1, t, h, w))
    for s in range(5):
        k = params[f"{prefix}.conv{s}.w"]
        b = T.reshape(params[f"{prefix}.conv{s}.b"], (-1, 1, 1, 1))
        x = T.leaky_relu(T.add(T.conv3d(x, k, stride=VIEW_STRIDE), b), cfg.leaky_slope)
    return x


def encode_view(frames, cfg: ViewEncoderConfig, params, prefix="view"):
    """Encode a ``[T, H, W]`` sequence into a ``[feature_dim]`` view vector."""
    x = view_conv_stack(frames, cfg, params, prefix)
    c, t, h, w = x.shape
    per_frame = T.transpose(T.reshape(x, (c, t, h * w)), (1, 0, 2))  # [T, C, M]
    if cfg.use_self_attention:
        per_frame = self_attention(per_frame, _sa(params, prefix))
    if cfg.use_context_attention:
        frame_vecs, _ = context_attention(per_frame, _ca(params, prefix, "region"))  # [T, C]
        v, _ = context_attention(T.transpose(frame_vecs), _ca(params, prefix, "frame"))
    else:
        frame_vecs = uniform_pool(per_frame)
        v = uniform_pool(T.transpose(frame_vecs))
    if cfg.projects:
        v = T.add(T.matvec(params[f"{prefix}.proj.w"], v), params[f"{prefix}.proj.b"])
    return v


# keyframe encoder


def init_keyframe_params(cfg: KeyframeEncoderConfig, rng, image_shape, prefix="key"):
    params = {}
    c_in = 1
    for i, c in enumerate(cfg.widths):
        for j in range(2):
            u = f"{prefix}.block{i}.unit{j}"
            params[f"{u}.wa"] = T.parameter(_he(rng, (c, c_in, 3, 3), c_in * 9, cfg.leaky_slope))
            params[f"{u}.ba"] = T.parameter(np.zeros(c))
            params[f"{u}.wb"] = T.parameter(_he(rng, (c, c, 3, 3), c * 9, cfg.leaky_slope, cfg.residual_scale))
            params[f"{u}.bb"] = T.parameter(np.zeros(c))
            c_in = c
    h, w = keyframe_trail(image_shape)[-1]
    flat = cfg.widths[-1] * h * w
    params[f"{prefix}.fc.w"] = T.parameter(rng.normal(0.0, 1.0 / np.sqrt(flat), (cfg.feature_dim, flat)))
    params[f"{prefix}.fc.b"] = T.parameter(np.zeros(cfg.feature_dim))
    for name, t in params.items():
        t.name = name
    return params


def keyframe_trail(image_shape):
    """Spatial extents after each of the six poolings, input first."""
    h, w = image_shape
    if h % 64 or w % 64:
        raise DimensionError(f"keyframe {h}x{w} too small or not divisible for 6 halvings (needs multiples of 64)")
    return [(h >> i, w >> i) for i in range(7)]


def _pad_channels(x, c):
    extra = c - x.shape[0]
    if extra == 0:
        return x
    return T.concat([x, T.Tensor(np.zeros((extra,) + x.shape[1:]))], axis=0)


def residual_unit(x, wa, ba, wb, bb, dilation, slope):
    """``skip(x) + conv(leaky(conv(x)))`` with "same" dilated 3x3 convs; skip zero-pads channels."""
    pad = (dilation, dilation)
    r = T.leaky_relu(T.add(T.conv2d(x, wa, padding=pad, dilation=pad), T.reshape(ba, (-1, 1, 1))), slope)
    r = T.add(T.conv2d(r, wb, padding=pad, dilation=pad), T.reshape(bb, (-1, 1, 1)))
    return T.add(_pad_channels(x, wa.shape[0]), r)


def dilated_residual_block(x, params, prefix, dilation, slope):
    for j in range(2):
        u = f"{prefix}.unit{j}"
        x = residual_unit(x, params[f"{u}.wa"], params[f"{u}.ba"], params[f"{u}.wb"], params[f"{u}.bb"],
                          dilation, slope)
    return T.maxpool2d(x, 2)


def encode_keyframe(image, cfg: KeyframeEncoderConfig, params, prefix="key"):
    """Six dilated residual blocks, flatten, then one FC layer to ``feature_dim``."""
    if image.ndim != 2:
        raise DimensionError(f"keyframe must be [H,W], got {image.shape}")
    keyframe_trail(image.shape)
    x = T.reshape(image, (1,) + image.shape)
    for i, d in enumerate(cfg.dilations):
        x = dilated_residual_block(x, params, f"{prefix}.block{i}", d, cfg.leaky_slope)
    flat = T.reshape(x, (-1,))
    return T.add(T.matvec(params[f"{prefix}.fc.w"], flat), params[f"{prefix}.fc.b"])
