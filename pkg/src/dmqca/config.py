"""Run configuration: one JSON file covering phantom, model, training and protocol settings.

Every key is optional; omitted keys take the defaults below.  Unknown keys are
rejected at every nesting level so typos fail loudly.

    {
      "preset": "desk",            # "desk" (T=4, 64x64) or "paper" (T=10, 256x256) base sizes
      "data": "data",              # dataset directory (generate/train/crossval)
      "out": "runs",               # output directory for reports and logs
      "ablation": "Ours",          # configuration trained by `train`
      "ablations": ["Ours", "Key"],  # configurations compared by `crossval` (mean baseline always added)
      "folds": 10,                 # k of the k-fold protocol
      "fold_seed": 0,              # shuffling seed of the fold split
      "phantom": {...},            # PhantomConfig fields; "ranges": {"rvd", "mld_fraction", "ll"}
      "model": {...},              # ModelConfig fields
      "train": {...}               # TrainConfig fields
    }

`dmqca config` prints the fully expanded defaults.
"""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .errors import ArgumentError
from .model import ABLATIONS, ModelConfig, TrainConfig
from .phantom import PhantomConfig, PhantomRanges

PRESETS = ("desk", "paper")


def _check_keys(d, cls, where):
    if not isinstance(d, dict):
        raise ArgumentError(f"{where}: expected an object, got {type(d).__name__}")
    allowed = {f.name for f in fields(cls)}
    unknown = sorted(set(d) - allowed)
    if unknown:
        raise ArgumentError(f"{where}: unknown key(s) {unknown}; allowed: {sorted(allowed)}")


def _build(cls, d, where, base=None):
    _check_keys(d, cls, where)
    try:
        return cls(**{**(base or {}), **d})
    except TypeError as exc:
        raise ArgumentError(f"{where}: {exc}") from None


@dataclass
class RunConfig:
    preset: str = "desk"
    data: str = "data"
    out: str = "runs"
    ablation: str = "Ours"
    ablations: list = field(default_factory=lambda: ["Ours", "Key"])
    folds: int = 10
    fold_seed: int = 0
    phantom: PhantomConfig = field(default_factory=PhantomConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)

    @classmethod
    def from_dict(cls, d):
        _check_keys(d, cls, "config")
        preset = d.get("preset", "desk")
        if preset not in PRESETS:
            raise ArgumentError(f"preset must be one of {PRESETS}, got {preset!r}")
        ph = dict(d.get("phantom", {}))
        if "ranges" in ph:
            ph["ranges"] = _build(PhantomRanges, ph["ranges"], "phantom.ranges")
        phantom = _build(PhantomConfig, ph, "phantom", asdict_shallow(getattr(PhantomConfig, preset)()))
        model = _build(ModelConfig, d.get("model", {}), "model", asdict_shallow(getattr(ModelConfig, preset)()))
        train = _build(TrainConfig, d.get("train", {}), "train")
        top = {k: v for k, v in d.items() if k not in ("phantom", "model", "train")}
        cfg = cls(**top, phantom=phantom, model=model, train=train)
        cfg.validate()
        return cfg

    @classmethod
    def load(cls, path):
        with open(path) as fh:
            try:
                d = json.load(fh)
            except json.JSONDecodeError as exc:
                raise ArgumentError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(d)

    def validate(self):
        for name in [self.ablation, *self.ablations]:
            if name not in ABLATIONS:
                raise ArgumentError(f"unknown ablation {name!r}; valid: {', '.join(ABLATIONS)}")
        if self.folds < 2:
            raise ArgumentError("folds must be >= 2")
        p, m = self.phantom, self.model
        if (p.frames, p.height, p.width) != (m.frames, m.height, m.width):
            raise ArgumentError(f"phantom frames {(p.frames, p.height, p.width)} do not match "
                                f"model input {(m.frames, m.height, m.width)}")

    def to_dict(self):
        return {
            "preset": self.preset, "data": self.data, "out": self.out, "ablation": self.ablation,
            "ablations": list(self.ablations), "folds": self.folds, "fold_seed": self.fold_seed,
            "phantom": self.phantom.to_dict(), "model": self.model.to_dict(), "train": asdict(self.train),
        }

    def dump(self, path):
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")


def asdict_shallow(obj):
    return {f.name: getattr(obj, f.name) for f in fields(obj)}
