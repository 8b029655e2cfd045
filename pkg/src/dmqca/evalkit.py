"""Agreement metrics and the k-fold evaluation protocol.

Pearson is computed per index and per fold, then summarised as mean +/- sd across
all (fold, index) pairs. Bland-Altman limits use the sample sd (N - 1).
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import ArgumentError, DimensionError, TrainingError
from .model import DMQCA, INDEX_NAMES, ModelConfig, TrainConfig, ablation, train


class UndefinedCorrelation(ArithmeticError):
    """Pearson's r is undefined because one argument has zero variance."""


def _pair(preds, labels):
    p, y = np.asarray(preds, dtype=np.float64), np.asarray(labels, dtype=np.float64)
    if p.shape != y.shape:
        raise DimensionError(f"preds {p.shape} vs labels {y.shape}")
    if p.shape[0] < 1:
        raise ArgumentError("need at least one sample")
    return p, y


def mae(preds, labels):
    """Returns ``(per_index[6], overall)``."""
    p, y = _pair(preds, labels)
    err = np.abs(p - y)
    return err.mean(axis=0), float(err.mean())


def pearson(preds, labels):
    p, y = _pair(preds, labels)
    if p.ndim != 1 or p.size < 2:
        raise ArgumentError("pearson needs two 1-d arrays of length >= 2")
    dp, dy = p - p.mean(), y - y.mean()
    sp, sy = math.sqrt(float(dp @ dp)), math.sqrt(float(dy @ dy))
    if sp == 0.0 or sy == 0.0 or sp < 1e-12 * max(1.0, float(np.abs(p).max())) or sy < 1e-12 * max(1.0, float(np.abs(y).max())):
        raise UndefinedCorrelation("zero variance")
    return float(np.clip((dp @ dy) / (sp * sy), -1.0, 1.0))


@dataclass
class BlandAltman:
    mean_diff: float
    sd: float
    loa_low: float
    loa_high: float
    means: np.ndarray
    diffs: np.ndarray

    def coverage(self):
        return float(np.mean((self.diffs >= self.loa_low) & (self.diffs <= self.loa_high)))


def bland_altman(preds, labels):
    p, y = _pair(preds, labels)
    if p.ndim != 1 or p.size < 2:
        raise ArgumentError("bland_altman needs two 1-d arrays of length >= 2")
    diffs = p - y
    md = float(diffs.mean())
    sd = float(diffs.std(ddof=1))
    return BlandAltman(md, sd, md - 1.96 * sd, md + 1.96 * sd, (p + y) / 2.0, diffs)


def kfold(n_samples, k=10, seed=0):
    """Shuffled partition of ``range(n_samples)`` into ``k`` (train, test) id arrays."""
    if k < 2 or n_samples < k:
        raise ArgumentError(f"need 2 <= k <= n_samples, got k={k}, n={n_samples}")
    perm = np.random.default_rng(seed).permutation(n_samples)
    folds = np.array_split(perm, k)
    out = []
    for i, test in enumerate(folds):
        train_ids = np.sort(np.concatenate([f for j, f in enumerate(folds) if j != i]))
        out.append((train_ids, np.sort(test)))
    return out


# protocol


class AuditedSamples:
    """Sequence view over a subset of samples that records every id it hands out."""

    def __init__(self, samples, ids):
        self._samples = samples
        self._ids = list(ids)
        self.accessed = set()

    def __len__(self):
        return len(self._ids)

    def __getitem__(self, i):
        sid = self._ids[i]
        self.accessed.add(sid)
        return self._samples[sid]


class Predictor:
    """Trains on a training view and predicts labels for held-out samples."""

    name = "predictor"

    def fit(self, train_samples):
        pass

    def predict(self, samples):
        raise NotImplementedError


class OraclePredictor(Predictor):
    name = "Oracle"

    def predict(self, samples):
        return np.stack([s.label for s in samples])


class MeanPredictor(Predictor):
    name = "Mean"

    def fit(self, train_samples):
        self.mean = np.mean([train_samples[i].label for i in range(len(train_samples))], axis=0)

    def predict(self, samples):
        return np.tile(self.mean, (len(samples), 1))


class ModelPredictor(Predictor):
    def __init__(self, ablation_name, model_cfg: ModelConfig, train_cfg: TrainConfig, on_epoch=None):
        self.name = ablation_name
        self.model_cfg, self.train_cfg = model_cfg, train_cfg
        self.on_epoch = on_epoch
        self.model = None
        self.history = []

    def fit(self, train_samples):
        self.model = DMQCA(self.model_cfg, ablation(self.name), seed=self.train_cfg.seed)
        self.history = train(self.model, train_samples, self.train_cfg, self.on_epoch)

    def predict(self, samples):
        return self.model.predict(samples)


@dataclass
class FoldResult:
    fold: int
    test_ids: list
    preds: np.ndarray
    labels: np.ndarray
    failed: str | None = None


@dataclass
class EvalReport:
    name: str
    per_index_mae: list
    mae_mean: float
    mae_sd_folds: float
    mae_sd_samples: float
    pearson_mean: float | None
    pearson_sd: float | None
    pearson_undefined: int
    bland_altman: dict
    folds: list = field(default_factory=list)
    failed_folds: list = field(default_factory=list)

    def row(self):
        pear = "undefined" if self.pearson_mean is None else f"{100 * self.pearson_mean:.2f} ± {100 * self.pearson_sd:.2f}"
        return [self.name, f"{self.mae_mean:.4f} ± {self.mae_sd_folds:.4f}", pear] + [f"{v:.4f}" for v in self.per_index_mae]

    def to_dict(self):
        return {
            "name": self.name,
            "per_index_mae": dict(zip(INDEX_NAMES, self.per_index_mae)),
            "mae": {"mean": self.mae_mean, "sd_over_folds": self.mae_sd_folds, "sd_over_samples": self.mae_sd_samples},
            "pearson": {"mean": self.pearson_mean, "sd": self.pearson_sd,
                        "undefined_pairs": self.pearson_undefined,
                        "aggregation": "per index per fold, mean and sd across (fold, index) pairs"},
            "bland_altman": self.bland_altman,
            "failed_folds": self.failed_folds,
            "folds": [{"fold": f.fold, "test_ids": [int(i) for i in f.test_ids],
                       "preds": f.preds.tolist(), "labels": f.labels.tolist()} for f in self.folds],
        }


def summarize(name, folds):
    """Aggregate per-fold predictions into an ``EvalReport``."""
    ok = [f for f in folds if f.failed is None]
    if not ok:
        raise TrainingError(f"{name}: every fold failed")
    preds = np.concatenate([f.preds for f in ok])
    labels = np.concatenate([f.labels for f in ok])
    per_index, overall = mae(preds, labels)
    fold_maes = [mae(f.preds, f.labels)[1] for f in ok]
    sample_maes = np.abs(preds - labels).mean(axis=1)
    rs, undefined = [], 0
    for f in ok:
        for k in range(f.labels.shape[1]):
            try:
                rs.append(pearson(f.preds[:, k], f.labels[:, k]))
            except (UndefinedCorrelation, ArgumentError):
                undefined += 1
    ba = {}
    for k, idx in enumerate(INDEX_NAMES):
        b = bland_altman(preds[:, k], labels[:, k])
        ba[idx] = {"mean_diff": b.mean_diff, "sd": b.sd, "loa_low": b.loa_low, "loa_high": b.loa_high}
    return EvalReport(
        name=name,
        per_index_mae=[float(v) for v in per_index],
        mae_mean=overall,
        mae_sd_folds=float(np.std(fold_maes, ddof=1)) if len(fold_maes) > 1 else 0.0,
        mae_sd_samples=float(np.std(sample_maes, ddof=1)) if len(sample_maes) > 1 else 0.0,
        pearson_mean=float(np.mean(rs)) if rs else None,
        pearson_sd=float(np.std(rs, ddof=1)) if len(rs) > 1 else (0.0 if rs else None),
        pearson_undefined=undefined,
        bland_altman=ba,
        folds=folds,
        failed_folds=[f.fold for f in folds if f.failed is not None],
    )


def run_protocol(samples, predictor, k=10, seed=0, on_fold=None):
    """k-fold train/evaluate loop; training sees only its own fold's ids (audited)."""
    folds = []
    for i, (train_ids, test_ids) in enumerate(kfold(len(samples), k, seed)):
        view = AuditedSamples(samples, train_ids)
        failed = None
        try:
            predictor.fit(view)
            preds = np.asarray(predictor.predict([samples[j] for j in test_ids]), dtype=np.float64)
            if not np.isfinite(preds).all():
                raise TrainingError("non-finite predictions")
        except TrainingError as exc:
            failed, preds = str(exc), np.full((len(test_ids), len(INDEX_NAMES)), np.nan)
        leaked = view.accessed & set(int(j) for j in test_ids)
        if leaked:
            raise AssertionError(f"fold {i}: training read test ids {sorted(leaked)}")
        labels = np.stack([samples[j].label for j in test_ids])
        folds.append(FoldResult(i, [int(j) for j in test_ids], preds, labels, failed))
        if on_fold is not None:
            on_fold(i, folds[-1])
    return summarize(predictor.name, folds)


# report files

HEADER = ["Method", "MAE", "Pearson(%)"] + list(INDEX_NAMES)


def format_table(reports):
    rows = [HEADER] + [r.row() for r in reports]
    widths = [max(len(row[c]) for row in rows) for c in range(len(HEADER))]
    lines = ["  ".join(cell.ljust(w) for cell, w in zip(row, widths)).rstrip() for row in rows]
    lines.insert(1, "-" * len(lines[0]))
    notes = [
        "",
        "MAE: mean ± sd over folds (mm). Pearson: per index per fold, mean ± sd over (fold, index) pairs.",
        "Bland-Altman limits: mean difference ± 1.96 sample sd (N-1).",
    ]
    return "\n".join(lines + notes) + "\n"


def write_reports(reports, out_dir, stem="report"):
    from pathlib import Path

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{stem}.txt").write_text(format_table(reports))
    with open(out / f"{stem}.json", "w") as fh:
        json.dump({"reports": [r.to_dict() for r in reports]}, fh, indent=1, sort_keys=True)
        fh.write("\n")
    for r in reports:
        ok = [f for f in r.folds if f.failed is None]
        preds = np.concatenate([f.preds for f in ok])
        labels = np.concatenate([f.labels for f in ok])
        for k, idx in enumerate(INDEX_NAMES):
            b = bland_altman(preds[:, k], labels[:, k])
            with open(out / f"{stem}_{_slug(r.name)}_bland_altman_{idx}.csv", "w", newline="") as fh:
                w = csv.writer(fh)
                w.writerow(["mean", "diff"])
                w.writerows(zip(map(repr, b.means.tolist()), map(repr, b.diffs.tolist())))
    return out


def _slug(name):
    return name.replace("+", "_plus_").replace("-", "_minus_").lower()
