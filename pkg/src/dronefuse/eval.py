"""RID/OODD metrics, the ablation ladder and robustness sweeps."""

from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .corpus import (Corpus, CorpusSpec, FeatureConfig, FeatureSet, SPLIT_OOD, SPLIT_TEST,
                     build_features, plan_records)
from .errors import DiagnosticError, InvariantError, ParameterError
from .fusion_net import ABLATIONS, FusionNet, NetConfig, OodPolicy
from .signal_synth import DISTANCE_ATTENUATION_DB
from .train import TrainConfig, model_inputs, train

log = logging.getLogger(__name__)

METRIC_KEYS = ("accuracy", "precision", "recall", "oodd_acc", "auroc")
SWEEP_HEADER = ("axis", "value", "seed") + METRIC_KEYS
SWEEP_AXES = ("snr", "distance", "los", "duration", "ood_type")


# ---------------------------------------------------------------------------
# confusion counts and formulas
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class Confusion:
    """One-vs-rest counts for a single class."""

    tp: int
    tn: int
    fp: int
    fn: int

    def __post_init__(self):
        for name in ("tp", "tn", "fp", "fn"):
            v = getattr(self, name)
            if int(v) != v or v < 0:
                raise ParameterError(f"confusion count {name} must be a non-negative integer, got {v}")

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def _ratio(num: int, den: int):
    return num / den if den else None


def metrics(conf: Confusion) -> dict:
    """Accuracy, precision and recall; a zero denominator gives ``None``."""
    if conf.total == 0:
        raise ParameterError("metrics need at least one sample")
    return {
        "accuracy": (conf.tp + conf.tn) / conf.total,
        "precision": _ratio(conf.tp, conf.tp + conf.fp),
        "recall": _ratio(conf.tp, conf.tp + conf.fn),
    }


def confusion_matrix(y_true, y_pred, classes) -> np.ndarray:
    """Rows are true classes, columns predictions; labels outside ``classes`` count nowhere."""
    classes = list(classes)
    pos = {c: i for i, c in enumerate(classes)}
    m = np.zeros((len(classes), len(classes)), dtype=np.int64)
    t = np.array([pos.get(int(c), -1) for c in np.asarray(y_true)])
    p = np.array([pos.get(int(c), -1) for c in np.asarray(y_pred)])
    ok = (t >= 0) & (p >= 0)
    np.add.at(m, (t[ok], p[ok]), 1)
    return m


def confusions_from_predictions(y_true, y_pred, classes) -> list:
    """Per-class one-vs-rest confusions, in ``classes`` order."""
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ParameterError(f"label/prediction shapes differ: {y_true.shape} vs {y_pred.shape}")
    out = []
    for c in classes:
        t, p = y_true == c, y_pred == c
        out.append(Confusion(int(np.sum(t & p)), int(np.sum(~t & ~p)), int(np.sum(~t & p)), int(np.sum(t & ~p))))
    return out


def _recount(y_true, y_pred, classes) -> list:
    # plain loop, used to audit the vectorized counts
    out = []
    for c in classes:
        tp = tn = fp = fn = 0
        for t, p in zip(y_true, y_pred):
            if t == c:
                tp, fn = (tp + 1, fn) if p == c else (tp, fn + 1)
            else:
                fp, tn = (fp + 1, tn) if p == c else (fp, tn + 1)
        out.append(Confusion(tp, tn, fp, fn))
    return out


def rid_metrics(y_true, y_pred, classes, audit: bool = True) -> dict:
    """Top-1 accuracy plus macro precision/recall over ``classes``.

    Classes whose precision or recall is undefined are left out of that
    average and listed under ``undefined``.
    """
    y_true, y_pred = np.asarray(y_true), np.asarray(y_pred)
    if y_true.size == 0:
        raise ParameterError("metrics need at least one sample")
    confs = confusions_from_predictions(y_true, y_pred, classes)
    if audit and confs != _recount(y_true.tolist(), y_pred.tolist(), list(classes)):
        raise InvariantError("vectorized confusion counts disagree with the recount")
    per = [metrics(c) for c in confs]
    out = {"accuracy": float(np.mean(y_true == y_pred)), "undefined": []}
    for key in ("precision", "recall"):
        vals = [m[key] for m in per if m[key] is not None]
        out["undefined"] += [(key, c) for c, m in zip(classes, per) if m[key] is None]
        out[key] = float(np.mean(vals)) if vals else math.nan
    return out


def _split(scores, is_ood):
    scores = np.asarray(scores, dtype=np.float64)
    is_ood = np.asarray(is_ood, dtype=bool)
    if scores.shape != is_ood.shape or scores.ndim != 1:
        raise ParameterError(f"scores {scores.shape} and labels {is_ood.shape} must be equal-length vectors")
    return scores[~is_ood], scores[is_ood]


def oodd_accuracy(scores, is_ood, tau: float) -> float:
    """Fraction of OOD samples whose max-softmax score is below ``tau``."""
    ind, ood = _split(scores, is_ood)
    if ood.size == 0:
        raise DiagnosticError("OODD accuracy needs at least one OOD sample")
    if ind.size == 0:
        raise DiagnosticError("OODD accuracy needs at least one in-distribution sample")
    return float(np.mean(ood < tau))


def _average_ranks(x: np.ndarray) -> np.ndarray:
    order = np.argsort(x, kind="mergesort")
    sx = x[order]
    ranks = np.empty(x.size)
    start = 0
    while start < x.size:
        stop = start
        while stop + 1 < x.size and sx[stop + 1] == sx[start]:
            stop += 1
        ranks[order[start:stop + 1]] = 0.5 * (start + stop) + 1.0
        start = stop + 1
    return ranks


def auroc(scores, is_ood) -> float:
    """P(ID score > OOD score), ties counting one half (rank-sum form)."""
    ind, ood = _split(scores, is_ood)
    if ind.size == 0 or ood.size == 0:
        raise DiagnosticError("AUROC needs both ID and OOD samples")
    ranks = _average_ranks(np.concatenate([ind, ood]))
    u = ranks[:ind.size].sum() - ind.size * (ind.size + 1) / 2.0
    return float(u / (ind.size * ood.size))


# ---------------------------------------------------------------------------
# evaluating a trained model
# ---------------------------------------------------------------------------

@dataclass
class TrainedModel:
    net: FusionNet
    policy: OodPolicy
    log: object = None


def evaluate(model: TrainedModel, test: FeatureSet, ood: FeatureSet | None = None) -> dict:
    """Metric bundle with keys ``METRIC_KEYS`` (OOD entries NaN without an OOD set)."""
    net = model.net
    classes = list(range(net.cfg.class_count))
    probs = net.predict_proba(**model_inputs(net, test))
    out = rid_metrics(test.labels, probs.argmax(axis=1), classes)
    out["oodd_acc"] = out["auroc"] = math.nan
    if ood is not None and len(ood):
        po = net.predict_proba(**model_inputs(net, ood))
        scores = np.concatenate([probs.max(axis=1), po.max(axis=1)])
        flags = np.concatenate([np.zeros(len(test), bool), np.ones(len(ood), bool)])
        out["oodd_acc"] = oodd_accuracy(scores, flags, model.policy.tau)
        out["auroc"] = auroc(scores, flags)
    return out


@dataclass
class AblationResult:
    ablation: str
    seed: int
    metrics: dict
    model: TrainedModel


def run_ablation(ablation: str, corpus: Corpus, seed: int, train_cfg: TrainConfig = TrainConfig(),
                 net_cfg: NetConfig | None = None) -> AblationResult:
    """Train the ``ablation`` rung on ``corpus.train`` and score it on test + OOD."""
    if ablation not in ABLATIONS:
        raise ParameterError(f"unknown ablation id {ablation!r}; expected one of {ABLATIONS}")
    net_cfg = dataclasses.replace(net_cfg or NetConfig(), variant=ablation)
    net, policy, tlog = train(corpus.train, corpus.val, net_cfg, train_cfg, seed=seed)
    model = TrainedModel(net, policy, tlog)
    res = evaluate(model, corpus.test, corpus.ood)
    log.info("%s seed %d: %s", ablation, seed, {k: round(res[k], 4) for k in METRIC_KEYS})
    return AblationResult(ablation, seed, res, model)


# ---------------------------------------------------------------------------
# sweeps
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class SweepSpec:
    axis: str
    values: tuple
    repetitions: int = 1
    seed: int = 0

    def __post_init__(self):
        if self.axis not in SWEEP_AXES:
            raise ParameterError(f"unknown sweep axis {self.axis!r}; expected one of {SWEEP_AXES}")
        if len(self.values) == 0:
            raise ParameterError("sweep needs at least one value")
        if self.repetitions < 1:
            raise ParameterError(f"repetitions must be >= 1, got {self.repetitions}")


def _check_value(axis: str, value, base: CorpusSpec, frame_cap: int):
    try:
        if axis == "snr":
            v = float(value)
            if not math.isfinite(v):
                raise ValueError
            return v
        if axis == "distance":
            if value not in DISTANCE_ATTENUATION_DB:
                raise ValueError
            return value
        if axis == "los":
            if value not in ("S00", "S01"):
                raise ValueError
            return value
        if axis == "duration":
            v = int(value)
            if v != value or v < frame_cap:
                raise ValueError
            return v
        v = int(value)
        if v not in base.ood_classes:
            raise ValueError
        return v
    except (TypeError, ValueError):
        raise ParameterError(f"value {value!r} is not valid for sweep axis {axis!r}") from None


@dataclass
class SweepGenerator:
    """Builds the (test, ood) feature sets for one sweep cell.

    Every axis value regenerates records from the base corpus spec with that
    one field changed; repetition ``k`` uses seed ``spec.seed + k``.
    """

    base: CorpusSpec = CorpusSpec()
    n_per_class: int = 20
    features: FeatureConfig = field(default_factory=FeatureConfig)
    profiles: dict | None = None
    workers: int = 1

    def min_length(self) -> int:
        from .corpus import default_profiles
        profiles = self.profiles or default_profiles()
        return max(max(p.frame_len for p in profiles.values()), self.features.zc.n_seg * self.features.zc.seg_len)

    def __call__(self, axis: str, value, seed: int):
        b = self.base
        kw = dict(snrs=b.snrs, seed=seed, distance_tags=b.distance_tags, los_tags=b.los_tags, length=b.length)
        ood_classes = b.ood_classes
        if axis == "snr":
            kw["snrs"] = (value,)
        elif axis == "distance":
            kw["distance_tags"] = (value,)
        elif axis == "los":
            kw["los_tags"] = (value,)
        elif axis == "duration":
            kw["length"] = value
        else:
            ood_classes = (value,)
        test = plan_records(b.id_classes, self.n_per_class, split=SPLIT_TEST, **kw)
        ood = plan_records(ood_classes, self.n_per_class, split=SPLIT_OOD, **kw)
        return (build_features(test, self.features, self.profiles, self.workers),
                build_features(ood, self.features, self.profiles, self.workers))


def sweep(spec: SweepSpec, model: TrainedModel, generator: SweepGenerator | None = None) -> list:
    """One metrics row per (axis value, repetition), in that order."""
    generator = generator or SweepGenerator()
    values = [_check_value(spec.axis, v, generator.base, generator.min_length()) for v in spec.values]
    rows = []
    for value in values:
        for rep in range(spec.repetitions):
            seed = spec.seed + rep
            test, ood = generator(spec.axis, value, seed)
            res = evaluate(model, test, ood)
            rows.append({"axis": spec.axis, "value": value, "seed": seed,
                         **{k: res[k] for k in METRIC_KEYS}})
    return rows


def write_sweep(rows, csv_path, manifest_path=None, manifest: dict | None = None) -> None:
    """Fixed-header CSV of sweep rows plus an optional JSON run manifest."""
    with open(csv_path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(SWEEP_HEADER)
        for r in rows:
            w.writerow([r["axis"], r["value"], r["seed"]] + [repr(float(r[k])) for k in METRIC_KEYS])
    if manifest_path is not None:
        body = dict(manifest or {})
        body.update(rows=len(rows), header=list(SWEEP_HEADER), table=str(Path(csv_path).name))
        Path(manifest_path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def read_sweep(csv_path) -> list:
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        header = tuple(next(reader))
        if header != SWEEP_HEADER:
            raise ParameterError(f"{csv_path}: unexpected header {header}")
        return [dict(zip(header, row)) for row in reader]


def spearman(x, y) -> float:
    """Rank correlation with average ranks for ties."""
    rx, ry = _average_ranks(np.asarray(x, float)), _average_ranks(np.asarray(y, float))
    rx, ry = rx - rx.mean(), ry - ry.mean()
    den = math.sqrt(float(np.sum(rx * rx) * np.sum(ry * ry)))
    return float(np.sum(rx * ry) / den) if den else math.nan
