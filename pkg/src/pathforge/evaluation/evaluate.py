"""Fold-by-fold task evaluation with framework and metric dispatch."""

from __future__ import annotations

import csv
import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np

from ..errors import IncompatibleFrameworkError, MissingFeaturesError, ValidationError
from ..features.encoders import aggregate_patient, pool_slide
from ..features.store import FeatureStore
from ..task_splits import SplitTable, TaskSpec, few_shot_subsample
from .cox import CoxPH, survival_target
from .metrics import metric_auroc, metric_balanced_accuracy, metric_c_index, metric_qwk
from .mil import AttentionMIL
from .probe import DEFAULT_LAMBDAS, LinearProbe
from .retrieval import CaseRetrieval

FRAMEWORKS = ("linprobe", "cox", "mil", "retrieval")
COMPATIBLE = {
    "categorical": ("linprobe", "mil", "retrieval"),
    "ordinal": ("linprobe", "mil", "retrieval"),
    "survival": ("cox",),
}
CSV_COLUMNS = ("task_id", "model", "framework", "fold", "metric", "value")


def is_compatible(framework: str, label_kind: str) -> bool:
    return framework in COMPATIBLE.get(label_kind, ())


@dataclass
class EvalResult:
    task_id: str
    model_name: str
    framework: str
    metric: str
    fold_values: dict[str, float]
    metadata: dict = field(default_factory=dict)

    @property
    def values(self) -> np.ndarray:
        return np.array(list(self.fold_values.values()), dtype=np.float64)

    @property
    def mean(self) -> float:
        return float(self.values.mean())

    @property
    def std(self) -> float:
        return float(self.values.std(ddof=0))

    def rows(self) -> list[dict]:
        base = {"task_id": self.task_id, "model": self.model_name, "framework": self.framework, "metric": self.metric}
        return [{**base, "fold": fold, "value": repr(float(v))} for fold, v in self.fold_values.items()]

    def save(self, csv_path) -> Path:
        """Write fold rows to ``csv_path`` and a ``.json`` sidecar next to it."""
        csv_path = Path(csv_path)
        csv_path.parent.mkdir(parents=True, exist_ok=True)
        with open(csv_path, "w", newline="") as fh:
            writer = csv.DictWriter(fh, fieldnames=CSV_COLUMNS)
            writer.writeheader()
            writer.writerows(self.rows())
        sidecar = csv_path.with_suffix(".json")
        doc = {
            "task_id": self.task_id,
            "model": self.model_name,
            "framework": self.framework,
            "metric": self.metric,
            "mean": self.mean,
            "std": self.std,
            "metadata": self.metadata,
        }
        sidecar.write_text(json.dumps(doc, indent=2, sort_keys=True, default=_jsonable))
        return sidecar

    @classmethod
    def load(cls, csv_path) -> EvalResult:
        csv_path = Path(csv_path)
        with open(csv_path, newline="") as fh:
            rows = list(csv.DictReader(fh))
        if not rows:
            raise ValidationError(f"{csv_path}: no result rows")
        sidecar = csv_path.with_suffix(".json")
        meta = json.loads(sidecar.read_text())["metadata"] if sidecar.exists() else {}
        first = rows[0]
        return cls(
            first["task_id"],
            first["model"],
            first["framework"],
            first["metric"],
            {r["fold"]: float(r["value"]) for r in rows},
            meta,
        )


def _jsonable(obj):
    if isinstance(obj, np.generic):
        return obj.item()
    if isinstance(obj, np.ndarray):
        return obj.tolist()
    raise TypeError(f"not JSON serialisable: {type(obj).__name__}")


def load_feature_dir(directory, encoder_name: str | None = None) -> dict[str, np.ndarray]:
    """Map slide id to patch-feature matrix for every ``*.fstr`` in ``directory``."""
    out = {}
    for path in sorted(Path(directory).glob("*.fstr")):
        store = FeatureStore.load(path)
        if encoder_name is not None and store.encoder_name != encoder_name:
            continue
        out[store.slide_id] = store.matrix
    return out


def _as_matrix(value) -> np.ndarray:
    value = getattr(value, "matrix", value)
    arr = np.asarray(value, dtype=np.float64)
    return arr.reshape(1, -1) if arr.ndim == 1 else arr


def _as_vector(value) -> np.ndarray:
    arr = np.asarray(getattr(value, "matrix", value), dtype=np.float64)
    return arr if arr.ndim == 1 else pool_slide(arr)


class _Samples:
    """Evaluation units (patients or slides) with their inputs and targets."""

    def __init__(self, spec: TaskSpec, table: SplitTable, features: Mapping, as_bags: bool):
        missing = [f"row {i + 2} ({s})" for i, s in enumerate(table.slide_id) if s not in features]
        if missing:
            shown = ", ".join(missing[:5]) + (" ..." if len(missing) > 5 else "")
            raise MissingFeaturesError(f"{len(missing)} rows have no features: {shown}")
        if spec.level == "patient":
            keys = list(dict.fromkeys(table.patient_id))
            rows_of = {k: [i for i, p in enumerate(table.patient_id) if p == k] for k in keys}
        else:
            keys = list(range(len(table)))
            rows_of = {i: [i] for i in keys}
        self.first_row = np.array([rows_of[k][0] for k in keys])
        self.rows_of = rows_of
        self.keys = keys
        if as_bags:
            self.inputs = [np.vstack([_as_matrix(features[table.slide_id[i]]) for i in rows_of[k]]) for k in keys]
        else:
            self.inputs = np.vstack(
                [aggregate_patient([_as_vector(features[table.slide_id[i]]) for i in rows_of[k]]) for k in keys]
            )
        if table.is_survival:
            self.time = table.time[self.first_row]
            self.event = table.event[self.first_row]
            self.label = None
        else:
            self.label = np.array([table.label[i] for i in self.first_row])

    def take(self, idx):
        if isinstance(self.inputs, list):
            return [self.inputs[i] for i in idx]
        return self.inputs[idx]

    def units(self, table: SplitTable, fold: int):
        """Indices of training and test units for ``fold`` of ``table``."""
        test = table.is_test[self.first_row, fold]
        return np.flatnonzero(~test), np.flatnonzero(test)


def _make_model(framework: str, hyper: dict, seed: int):
    hyper = dict(hyper)
    if framework == "linprobe":
        lambdas = hyper.pop("lambdas", hyper.pop("lambda_grid", DEFAULT_LAMBDAS))
        return LinearProbe(lambdas=tuple(np.atleast_1d(lambdas).tolist()), seed=seed, **hyper)
    if framework == "cox":
        return CoxPH(**hyper)
    if framework == "mil":
        return AttentionMIL(seed=seed, **hyper)
    if framework == "retrieval":
        if "metric_space" in hyper:
            hyper["metric"] = hyper.pop("metric_space")
        return CaseRetrieval(**hyper)
    raise IncompatibleFrameworkError(f"unknown framework {framework!r} (choose from {', '.join(FRAMEWORKS)})")


def score_fold(spec: TaskSpec, model, X_test, y_test=None, time=None, event=None) -> float:
    """Apply the task's canonical metric to a fitted model on test data."""
    if spec.metric == "c_index":
        return metric_c_index(model.predict(X_test), time, event)
    classes = list(model.classes_)
    if spec.metric == "balanced_accuracy":
        return metric_balanced_accuracy(model.predict(X_test), y_test)
    if spec.metric == "auroc":
        proba = model.predict_proba(X_test)
        if len(classes) == 2:
            return metric_auroc(proba[:, 1], y_test == classes[1])
        # macro one-vs-rest over spec classes; classes unseen in training score 0
        order = list(spec.classes) or classes
        full = np.zeros((len(y_test), len(order)))
        for j, c in enumerate(classes):
            full[:, order.index(c)] = proba[:, j]
        return metric_auroc(full, np.array([order.index(v) for v in y_test]))
    if spec.metric == "qwk":
        order = list(spec.classes) or classes
        pred = np.array([order.index(v) for v in model.predict(X_test)])
        return metric_qwk(pred, np.array([order.index(v) for v in y_test]), len(order))
    raise ValidationError(f"no scorer for metric {spec.metric!r}")


def evaluate_task(
    spec: TaskSpec,
    table: SplitTable,
    features: Mapping,
    framework: str,
    hyper: dict | None = None,
    *,
    seed: int = 0,
    model_name: str = "",
    k_shots: int | None = None,
    shuffle_seed: int | None = None,
) -> EvalResult:
    """Fit on each fold's training side and score its test side.

    ``features`` maps slide id to a slide vector, a patch-feature matrix, or a
    :class:`FeatureStore`. Matrices are mean-pooled for slide-level
    frameworks and used as bags by ``mil``. Patient-level tasks average slide
    vectors per patient (bags are concatenated). ``k_shots`` subsamples the
    training side per class; ``shuffle_seed`` permutes training labels as a
    chance-level control.
    """
    if framework not in FRAMEWORKS:
        raise IncompatibleFrameworkError(f"unknown framework {framework!r} (choose from {', '.join(FRAMEWORKS)})")
    if not is_compatible(framework, spec.label_kind):
        raise IncompatibleFrameworkError(
            f"framework {framework!r} cannot evaluate {spec.label_kind} labels "
            f"(compatible: {', '.join(COMPATIBLE[spec.label_kind])})"
        )
    hyper = dict(hyper or {})
    results: dict[str, float] = {}
    extra: dict[str, list] = {}
    for fold in range(table.n_folds):
        fold_table = few_shot_subsample(table, fold, k_shots, seed + fold) if k_shots else table.subset(
            range(len(table)), [fold]
        )
        samples = _Samples(spec, fold_table, features, as_bags=framework == "mil")
        train, test = samples.units(fold_table, 0)
        if len(train) == 0 or len(test) == 0:
            raise ValidationError(f"fold {fold + 1} has an empty train or test side")
        model = _make_model(framework, hyper, seed)
        if spec.is_survival:
            order = train
            if shuffle_seed is not None:
                order = np.random.default_rng([shuffle_seed, fold]).permutation(train)
            model.fit(samples.take(train), survival_target(samples.time[order], samples.event[order]))
            value = score_fold(spec, model, samples.take(test), time=samples.time[test], event=samples.event[test])
        else:
            y_train = samples.label[train]
            if shuffle_seed is not None:
                y_train = np.random.default_rng([shuffle_seed, fold]).permutation(y_train)
            model.fit(samples.take(train), y_train)
            value = score_fold(spec, model, samples.take(test), samples.label[test])
            if framework == "retrieval":
                _, idx = model.kneighbors(samples.take(test))
                hits = model.gallery_labels_[idx] == samples.label[test][:, None]
                extra.setdefault("top_k_accuracy", []).append(float(hits.any(axis=1).mean()))
        if not math.isfinite(value):
            raise ValidationError(f"fold {fold + 1} produced a non-finite {spec.metric}")
        results[f"fold_{fold + 1}"] = float(value)
    metadata = {
        "hyper": hyper,
        "seed": seed,
        "k_shots": k_shots,
        "shuffle_seed": shuffle_seed,
        "level": spec.level,
        "standardization": "train-fold z-score, near-constant features dropped",
        "cox_ties": "breslow",
        "multiclass_auroc": "macro one-vs-rest",
        "std_ddof": 0,
        **extra,
    }
    return EvalResult(spec.task_id, model_name, framework, spec.metric, results, metadata)
