"""DMQCA assembly: view encoders + keyframe encoder + two-layer regression head."""
from __future__ import annotations

import hashlib
import json
import struct
import zlib
from dataclasses import asdict, dataclass

import numpy as np

from . import tensor as T
from .encoders import (
    KeyframeEncoderConfig,
    ViewEncoderConfig,
    encode_keyframe,
    encode_view,
    init_keyframe_params,
    init_view_params,
)
from .errors import ArgumentError, CheckpointError, DimensionError, NumericError, TrainingError

INDEX_NAMES = ("RVD1", "RVD2", "RVD", "MLD", "LL1", "LL2")

# multiplicative weights; biases and gamma are not regularised
_REGULARISED_SUFFIXES = (".w", ".wa", ".wb", ".wf", ".wg", ".wh", ".u")


@dataclass(frozen=True)
class AblationConfig:
    use_main: bool = True
    use_support: bool = True
    use_keyframe: bool = True
    use_self_attention: bool = True
    use_context_attention: bool = True

    def __post_init__(self):
        if not (self.use_main or self.use_support or self.use_keyframe):
            raise ArgumentError("at least one branch must be enabled")

    @property
    def n_branches(self):
        return int(self.use_main) + int(self.use_support) + int(self.use_keyframe)


ABLATIONS = {
    "Ours": AblationConfig(),
    "Ours-SelfAtt": AblationConfig(use_self_attention=False),
    "Main+Key": AblationConfig(use_support=False),
    "Sup+Key": AblationConfig(use_main=False),
    "Main": AblationConfig(use_support=False, use_keyframe=False),
    "Key": AblationConfig(use_main=False, use_support=False),
    "Main-ConAtt": AblationConfig(use_support=False, use_keyframe=False, use_context_attention=False),
}


def ablation(name):
    try:
        return ABLATIONS[name]
    except KeyError:
        raise ArgumentError(f"unknown ablation {name!r}; valid: {', '.join(ABLATIONS)}") from None


@dataclass
class ModelConfig:
    frames: int = 4
    height: int = 64
    width: int = 64
    filters: tuple = (8, 16, 32, 64, 64)
    kernels: tuple = ((3, 3, 3),) * 5
    key_widths: tuple = (8, 8, 16, 16, 32, 32)
    key_dilations: tuple = (1, 1, 2, 2, 4, 4)
    feature_dim: int = 128
    attention_dim: int | None = None
    hidden: int = 512
    n_outputs: int = 6
    leaky_slope: float = 0.2
    input_offset: float = 0.0

    def __post_init__(self):
        self.filters = tuple(int(f) for f in self.filters)
        self.kernels = tuple(tuple(int(v) for v in k) for k in self.kernels)
        self.key_widths = tuple(int(w) for w in self.key_widths)
        self.key_dilations = tuple(int(d) for d in self.key_dilations)

    @classmethod
    def desk(cls, **kw):
        return cls(**kw)

    @classmethod
    def paper(cls, **kw):
        base = dict(frames=10, height=256, width=256, filters=(16, 32, 64, 128, 256))
        base.update(kw)
        return cls(**base)

    def view_config(self, ablation: AblationConfig):
        return ViewEncoderConfig(self.filters, self.kernels, self.feature_dim, self.attention_dim,
                                 self.leaky_slope, ablation.use_self_attention, ablation.use_context_attention)

    def keyframe_config(self):
        return KeyframeEncoderConfig(self.key_widths, self.key_dilations, self.feature_dim, self.leaky_slope)

    def to_dict(self):
        d = asdict(self)
        d["filters"] = list(self.filters)
        d["kernels"] = [list(k) for k in self.kernels]
        d["key_widths"] = list(self.key_widths)
        d["key_dilations"] = list(self.key_dilations)
        return d


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"))


class DMQCA:
    """Parameters plus forward pass for one model configuration and ablation."""

    def __init__(self, config: ModelConfig | None = None, ablation: AblationConfig | None = None, seed=0):
        self.config = config or ModelConfig()
        self.ablation = ablation or AblationConfig()
        self.seed = seed
        rng = np.random.default_rng(seed)
        cfg, ab = self.config, self.ablation
        self.view_cfg = cfg.view_config(ab)
        self.key_cfg = cfg.keyframe_config()
        params = {}
        if ab.use_main:
            params.update(init_view_params(self.view_cfg, rng, prefix="main"))
        if ab.use_support:
            params.update(init_view_params(self.view_cfg, rng, prefix="support"))
        if ab.use_keyframe:
            params.update(init_keyframe_params(self.key_cfg, rng, (cfg.height, cfg.width), prefix="key"))
        width = ab.n_branches * cfg.feature_dim
        params["head.fc1.w"] = T.parameter(rng.normal(0.0, np.sqrt(2.0 / width), (cfg.hidden, width)))
        params["head.fc1.b"] = T.parameter(np.zeros(cfg.hidden))
        params["head.out.w"] = T.parameter(rng.normal(0.0, np.sqrt(1.0 / cfg.hidden), (cfg.n_outputs, cfg.hidden)))
        params["head.out.b"] = T.parameter(np.zeros(cfg.n_outputs))
        for name, t in params.items():
            t.name = name
        self.params = params
        # affine map from head output to millimetres; identity unless labels were z-scored
        self.label_mean = np.zeros(cfg.n_outputs)
        self.label_scale = np.ones(cfg.n_outputs)

    # identity

    def describe(self):
        return {"model": self.config.to_dict(), "ablation": asdict(self.ablation)}

    def fingerprint(self):
        return hashlib.sha256(canonical_json(self.describe()).encode()).digest()

    @property
    def regularised(self):
        return [t for n, t in self.params.items() if n.endswith(_REGULARISED_SUFFIXES)]

    def zero_grad(self):
        for t in self.params.values():
            t.zero_grad()

    # forward

    def _check(self, arr, shape, what):
        if arr.shape != shape:
            raise DimensionError(f"{what} has shape {arr.shape}, expected {shape}")

    def features(self, sample):
        cfg, ab = self.config, self.ablation
        seq = (cfg.frames, cfg.height, cfg.width)
        feats = []
        if ab.use_main:
            self._check(sample.main_view, seq, "main view")
            feats.append(encode_view(self._input(sample.main_view), self.view_cfg, self.params, "main"))
        if ab.use_support:
            self._check(sample.support_view, seq, "support view")
            feats.append(encode_view(self._input(sample.support_view), self.view_cfg, self.params, "support"))
        if ab.use_keyframe:
            self._check(sample.keyframe, seq[1:], "keyframe")
            feats.append(encode_keyframe(self._input(sample.keyframe), self.key_cfg, self.params, "key"))
        return feats

    def _input(self, arr):
        a = np.asarray(arr, dtype=np.float64)
        return T.Tensor(a - self.config.input_offset if self.config.input_offset else a)

    def head(self, features):
        p, slope = self.params, self.config.leaky_slope
        z = features[0] if len(features) == 1 else T.concat(features, axis=0)
        z = T.leaky_relu(T.add(T.matvec(p["head.fc1.w"], z), p["head.fc1.b"]), slope)
        return T.leaky_relu(T.add(T.matvec(p["head.out.w"], z), p["head.out.b"]), slope)

    def raw(self, sample):
        """Head output before the label de-normalisation map."""
        return self.head(self.features(sample))

    @property
    def normalised(self):
        return bool(self.label_mean.any() or (self.label_scale != 1.0).any())

    def set_label_stats(self, labels):
        """Z-score targets with the per-index mean and sd of ``labels``."""
        labels = np.asarray(labels, dtype=np.float64)
        sd = labels.std(axis=0)
        self.label_mean = labels.mean(axis=0)
        self.label_scale = np.where(sd > 0, sd, 1.0)

    def forward(self, sample):
        """Predicted (RVD1, RVD2, RVD, MLD, LL1, LL2) in mm as a ``[6]`` tensor."""
        out = self.raw(sample)
        if not self.normalised:
            return out
        return T.add(T.mul(out, T.Tensor(self.label_scale)), T.Tensor(self.label_mean))

    __call__ = forward

    def predict(self, samples):
        return np.stack([self.forward(s).data for s in samples]) if samples else np.zeros((0, self.config.n_outputs))


def loss(preds, labels, weights=(), lam=0.0):
    """Mean absolute error over all ``6N`` entries plus ``lam * sum ||w||^2``."""
    labels = np.asarray(labels, dtype=np.float64)
    if preds.shape != labels.shape:
        raise DimensionError(f"preds {preds.shape} vs labels {labels.shape}")
    if not np.isfinite(preds.data).all() or not np.isfinite(labels).all():
        raise NumericError("loss received non-finite values")
    data = T.scale(T.tsum(T.tabs(T.sub(preds, T.Tensor(labels)))), 1.0 / preds.data.size)
    if lam and weights:
        reg = T.tsum(T.concat([T.reshape(T.square(w), (-1,)) for w in weights], axis=0))
        data = T.add(data, T.scale(reg, lam))
    return data


# optimisation


@dataclass
class TrainConfig:
    lr: float = 2e-4
    lr_decay: float = 0.97  # multiplicative, per epoch
    lam: float = 1e-6
    epochs: int = 30
    batch_size: int = 4
    seed: int = 0
    shuffle: bool = True
    normalize_labels: bool = False
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def __post_init__(self):
        if self.lr < 0 or self.lam < 0 or self.batch_size < 1 or self.epochs < 0:
            raise ArgumentError(f"invalid training config: {self}")

    def lr_at(self, epoch):
        return self.lr * self.lr_decay**epoch


class Adam:
    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8):
        self.params = list(params)
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]
        self.t = 0

    def step(self, lr):
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1, c2 = 1.0 - b1**self.t, 1.0 - b2**self.t
        for p, m, v in zip(self.params, self.m, self.v):
            g = p.grad
            m *= b1
            m += (1.0 - b1) * g
            v *= b2
            v += (1.0 - b2) * g * g
            p.data -= lr * (m / c1) / (np.sqrt(v / c2) + self.eps)


def train_step(model, batch, optimizer, lr, lam, step=None):
    """One Adam update on ``batch`` (a list of samples); returns the loss before the update."""
    if not batch:
        raise ArgumentError("empty batch")
    model.zero_grad()
    labels = (np.stack([s.label for s in batch]) - model.label_mean) / model.label_scale
    try:
        preds = T.concat([T.reshape(model.raw(s), (1, -1)) for s in batch], axis=0)
        L = loss(preds, labels, model.regularised, lam)
    except NumericError as exc:
        raise TrainingError(f"non-finite loss at step {step}: {exc}", step=step) from None
    if not np.isfinite(L.data):
        raise TrainingError(f"non-finite loss at step {step}", step=step)
    L.backward()
    optimizer.step(lr)
    return float(L.data)


def train(model, samples, cfg: TrainConfig, on_epoch=None):
    """Train in place; returns the mean batch loss per epoch."""
    if cfg.normalize_labels:
        model.set_label_stats([s.label for s in samples])
    opt = Adam(model.params.values(), cfg.beta1, cfg.beta2, cfg.eps)
    rng = np.random.default_rng(cfg.seed)
    history, step = [], 0
    for epoch in range(cfg.epochs):
        order = rng.permutation(len(samples)) if cfg.shuffle else np.arange(len(samples))
        lr = cfg.lr_at(epoch)
        losses = []
        for lo in range(0, len(order), cfg.batch_size):
            batch = [samples[i] for i in order[lo:lo + cfg.batch_size]]
            losses.append(train_step(model, batch, opt, lr, cfg.lam, step))
            step += 1
        history.append(float(np.mean(losses)))
        if on_epoch is not None:
            on_epoch(epoch, history[-1], lr)
    return history


# checkpoints

MAGIC = b"DMQC"
FORMAT_VERSION = 1


def _stat_records(model):
    return {"norm.mean": model.label_mean, "norm.scale": model.label_scale}


def save_checkpoint(model, path):
    """Write parameters as little-endian float32 records behind a config fingerprint."""
    cfg = canonical_json(model.describe()).encode()
    out = bytearray(MAGIC)
    out += struct.pack("<I", FORMAT_VERSION)
    out += model.fingerprint()
    out += struct.pack("<I", len(cfg)) + cfg
    records = {**{n: t.data for n, t in model.params.items()}, **_stat_records(model)}
    out += struct.pack("<I", len(records))
    for name, data in records.items():
        raw = name.encode()
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", data.ndim)
        out += struct.pack(f"<{data.ndim}I", *data.shape)
        out += data.astype("<f4").tobytes()
    out += struct.pack("<I", zlib.crc32(out))
    with open(path, "wb") as fh:
        fh.write(out)


def load_checkpoint(path, expect=None):
    """Rebuild a model from ``path``; ``expect`` (a model) makes fingerprint mismatch fatal."""
    with open(path, "rb") as fh:
        buf = fh.read()
    if len(buf) < 48 or buf[:4] != MAGIC:
        raise CheckpointError(f"{path}: not a DMQC checkpoint")
    (crc,) = struct.unpack("<I", buf[-4:])
    if zlib.crc32(buf[:-4]) != crc:
        raise CheckpointError(f"{path}: integrity check failed (truncated or corrupt)")
    (version,) = struct.unpack_from("<I", buf, 4)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {FORMAT_VERSION}")
    fp = bytes(buf[8:40])
    if expect is not None and fp != expect.fingerprint():
        raise CheckpointError(f"{path}: config fingerprint mismatch")
    pos = 40
    (n,) = struct.unpack_from("<I", buf, pos)
    desc = json.loads(buf[pos + 4:pos + 4 + n])
    pos += 4 + n
    model = DMQCA(ModelConfig(**desc["model"]), AblationConfig(**desc["ablation"]))
    if model.fingerprint() != fp:
        raise CheckpointError(f"{path}: embedded config does not match its fingerprint")
    (count,) = struct.unpack_from("<I", buf, pos)
    pos += 4
    stats = _stat_records(model)
    seen = set()
    for _ in range(count):
        (ln,) = struct.unpack_from("<H", buf, pos)
        name = buf[pos + 2:pos + 2 + ln].decode()
        pos += 2 + ln
        (nd,) = struct.unpack_from("<B", buf, pos)
        shape = struct.unpack_from(f"<{nd}I", buf, pos + 1)
        pos += 1 + 4 * nd
        size = int(np.prod(shape)) if nd else 1
        data = np.frombuffer(buf, dtype="<f4", count=size, offset=pos).astype(np.float64).reshape(shape)
        pos += 4 * size
        target = model.params[name].data if name in model.params else stats.get(name)
        if target is None or target.shape != data.shape:
            raise CheckpointError(f"{path}: unexpected parameter {name} {shape}")
        target[...] = data
        seen.add(name)
    if seen != set(model.params) | set(stats) or pos != len(buf) - 4:
        raise CheckpointError(f"{path}: parameter set incomplete")
    return model


def quantize(model):
    """Round every parameter to float32 in place (the precision checkpoints store)."""
    for t in model.params.values():
        t.data[...] = t.data.astype(np.float32)
    for a in _stat_records(model).values():
        a[...] = a.astype(np.float32)
    return model
