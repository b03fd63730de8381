"""Task definitions: a per-slide split CSV plus a YAML metadata file.

CSV columns are ``patient_id, slide_id`` then ``label`` (or ``time, event``)
then ``fold_1..fold_N`` holding ``train`` or ``test``. No validation split is
ever assigned; carving one out of the training side is left to the caller.
"""

from __future__ import annotations

import csv
import math
import warnings
from collections import defaultdict
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np
import yaml

from .errors import (
    ClassStarvationError,
    LabelConflictError,
    LeakageError,
    RatioWarning,
    SchemaError,
    TooFewSamplesError,
    ValidationError,
)

LEVELS = ("patient", "slide")
LABEL_KINDS = ("categorical", "ordinal", "survival")
SCHEMES = ("kfold", "monte_carlo", "official_single")
METRICS_FOR_KIND = {
    "categorical": ("balanced_accuracy", "auroc"),
    "ordinal": ("qwk",),
    "survival": ("c_index",),
}
TEST_FRACTION = 0.2


@dataclass(frozen=True)
class TaskSpec:
    task_id: str
    level: str
    label_kind: str
    n_folds: int
    metric: str
    split_scheme: str
    classes: tuple[str, ...] = ()
    n_samples: int = 0
    stratified: bool = True
    seed: int | None = None

    def __post_init__(self):
        if self.level not in LEVELS:
            raise SchemaError(f"level must be one of {LEVELS}, got {self.level!r}")
        if self.label_kind not in LABEL_KINDS:
            raise SchemaError(f"label_kind must be one of {LABEL_KINDS}, got {self.label_kind!r}")
        if self.split_scheme not in SCHEMES:
            raise SchemaError(f"split_scheme must be one of {SCHEMES}, got {self.split_scheme!r}")
        if self.metric not in METRICS_FOR_KIND[self.label_kind]:
            raise SchemaError(
                f"metric {self.metric!r} does not fit {self.label_kind} labels "
                f"(allowed: {', '.join(METRICS_FOR_KIND[self.label_kind])})"
            )
        if self.n_folds < 1:
            raise SchemaError("n_folds must be >= 1")
        if self.label_kind != "survival" and len(self.classes) < 2:
            raise SchemaError(f"{self.label_kind} task needs at least two classes")
        object.__setattr__(self, "classes", tuple(str(c) for c in self.classes))

    @property
    def is_survival(self) -> bool:
        return self.label_kind == "survival"

    def to_yaml_dict(self) -> dict:
        return {
            "task_id": self.task_id,
            "level": self.level,
            "label_kind": self.label_kind,
            "classes": list(self.classes),
            "n_samples": self.n_samples,
            "n_folds": self.n_folds,
            "metric": self.metric,
            "split_scheme": self.split_scheme,
            "stratified": self.stratified,
            "seed": self.seed,
        }


@dataclass
class SplitTable:
    """One row per slide; ``is_test[i, k]`` is True when row i is test in fold k."""

    patient_id: list[str]
    slide_id: list[str]
    is_test: np.ndarray
    label: list[str] | None = None
    time: np.ndarray | None = None
    event: np.ndarray | None = None

    def __post_init__(self):
        self.patient_id = [str(p) for p in self.patient_id]
        self.slide_id = [str(s) for s in self.slide_id]
        self.is_test = np.asarray(self.is_test, dtype=bool).reshape(len(self.slide_id), -1)
        if self.label is not None:
            self.label = [str(v) for v in self.label]
        if self.time is not None:
            self.time = np.asarray(self.time, dtype=np.float64)
            self.event = np.asarray(self.event, dtype=bool)

    def __len__(self):
        return len(self.slide_id)

    def __eq__(self, other):
        if not isinstance(other, SplitTable):
            return NotImplemented
        return (
            self.patient_id == other.patient_id
            and self.slide_id == other.slide_id
            and self.label == other.label
            and np.array_equal(self.is_test, other.is_test)
            and _opt_equal(self.time, other.time)
            and _opt_equal(self.event, other.event)
        )

    @property
    def n_folds(self) -> int:
        return self.is_test.shape[1]

    @property
    def fold_names(self) -> list[str]:
        return [f"fold_{k + 1}" for k in range(self.n_folds)]

    @property
    def is_survival(self) -> bool:
        return self.time is not None

    def patients(self) -> list[str]:
        return sorted(set(self.patient_id))

    def train_rows(self, fold: int) -> np.ndarray:
        return np.flatnonzero(~self.is_test[:, fold])

    def test_rows(self, fold: int) -> np.ndarray:
        return np.flatnonzero(self.is_test[:, fold])

    def subset(self, rows, folds=None) -> SplitTable:
        rows = np.asarray(rows, dtype=int)
        folds = list(range(self.n_folds)) if folds is None else list(folds)
        return SplitTable(
            [self.patient_id[i] for i in rows],
            [self.slide_id[i] for i in rows],
            self.is_test[np.ix_(rows, folds)],
            None if self.label is None else [self.label[i] for i in rows],
            None if self.time is None else self.time[rows],
            None if self.event is None else self.event[rows],
        )

    def patient_labels(self) -> dict[str, object]:
        """First-seen label per patient (``(time, event)`` for survival)."""
        out: dict[str, object] = {}
        for i, p in enumerate(self.patient_id):
            if p not in out:
                out[p] = (float(self.time[i]), bool(self.event[i])) if self.is_survival else self.label[i]
        return out


def _opt_equal(a, b) -> bool:
    if a is None or b is None:
        return a is None and b is None
    return np.array_equal(a, b)


# --------------------------------------------------------------------------
# validation


def check_leakage(table: SplitTable) -> None:
    for k in range(table.n_folds):
        sides: dict[str, dict[bool, int]] = defaultdict(dict)
        for i, p in enumerate(table.patient_id):
            sides[p].setdefault(bool(table.is_test[i, k]), i)
        for p, seen in sides.items():
            if len(seen) == 2:
                raise LeakageError(
                    f"patient {p} is train (row {seen[False] + 2}) and test (row {seen[True] + 2}) "
                    f"in {table.fold_names[k]}"
                )


def check_labels(table: SplitTable, spec: TaskSpec) -> None:
    if spec.is_survival:
        if table.time is None:
            raise SchemaError("survival task needs time and event columns")
        if not np.isfinite(table.time).all() or (table.time < 0).any():
            bad = int(np.flatnonzero(~np.isfinite(table.time) | (table.time < 0))[0])
            raise SchemaError(f"row {bad + 2}: survival time must be finite and >= 0")
    else:
        if table.label is None:
            raise SchemaError("task needs a label column")
        known = set(spec.classes)
        for i, v in enumerate(table.label):
            if v not in known:
                raise SchemaError(f"row {i + 2}: label {v!r} not among classes {list(spec.classes)}")
    if spec.level == "patient":
        first: dict[str, int] = {}
        for i, p in enumerate(table.patient_id):
            j = first.setdefault(p, i)
            same = (
                table.time[i] == table.time[j] and table.event[i] == table.event[j]
                if spec.is_survival
                else table.label[i] == table.label[j]
            )
            if not same:
                raise LabelConflictError(f"patient {p} has conflicting labels in rows {j + 2} and {i + 2}")


def expected_test_count(n_patients: int, spec: TaskSpec) -> float:
    if spec.split_scheme == "kfold":
        return n_patients / spec.n_folds
    return max(1, math.floor(TEST_FRACTION * n_patients + 0.5))


def check_ratio(table: SplitTable, spec: TaskSpec) -> list[str]:
    """Warn (``RatioWarning``) for folds whose patient test count is off by more than one."""
    if spec.split_scheme == "official_single":
        return []
    n = len(table.patients())
    want = expected_test_count(n, spec)
    issues = []
    for k in range(table.n_folds):
        got = len({table.patient_id[i] for i in table.test_rows(k)})
        if abs(got - want) > 1:
            issues.append(f"{table.fold_names[k]}: {got} test patients of {n}, expected ~{want:g}")
    for msg in issues:
        warnings.warn(msg, RatioWarning, stacklevel=3)
    return issues


def validate(spec: TaskSpec, table: SplitTable) -> None:
    if len(set(table.slide_id)) != len(table.slide_id):
        seen: dict[str, int] = {}
        for i, s in enumerate(table.slide_id):
            if s in seen:
                raise SchemaError(f"slide_id {s!r} repeated in rows {seen[s] + 2} and {i + 2}")
            seen[s] = i
    if table.n_folds != spec.n_folds:
        raise SchemaError(f"table has {table.n_folds} folds, metadata says {spec.n_folds}")
    check_labels(table, spec)
    check_leakage(table)
    n = len(table.patients()) if spec.level == "patient" else len(table)
    if spec.n_samples and spec.n_samples != n:
        raise SchemaError(f"metadata n_samples={spec.n_samples} but table has {n} {spec.level}s")
    check_ratio(table, spec)


# --------------------------------------------------------------------------
# file I/O


def _read_yaml(path) -> dict:
    try:
        doc = yaml.safe_load(Path(path).read_text())
    except yaml.YAMLError as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise SchemaError(f"{path}: expected a mapping")
    return doc


def spec_from_dict(doc: dict) -> TaskSpec:
    missing = [k for k in ("task_id", "level", "label_kind", "n_folds", "metric", "split_scheme") if k not in doc]
    if missing:
        raise SchemaError(f"task metadata missing fields: {', '.join(missing)}")
    return TaskSpec(
        task_id=str(doc["task_id"]),
        level=doc["level"],
        label_kind=doc["label_kind"],
        n_folds=int(doc["n_folds"]),
        metric=doc["metric"],
        split_scheme=doc["split_scheme"],
        classes=tuple(doc.get("classes") or ()),
        n_samples=int(doc.get("n_samples") or 0),
        stratified=bool(doc.get("stratified", True)),
        seed=doc.get("seed"),
    )


def read_task_spec(yaml_path) -> TaskSpec:
    return spec_from_dict(_read_yaml(yaml_path))


def parse_task(csv_path, yaml_path) -> tuple[TaskSpec, SplitTable]:
    """Load and fully validate a task (schema, labels, leakage, 80:20 ratio)."""
    for p in (csv_path, yaml_path):
        if not Path(p).is_file():
            raise SchemaError(f"missing task file {p}")
    spec = read_task_spec(yaml_path)
    with open(csv_path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        columns = reader.fieldnames or []
        rows = list(reader)
    folds = [f"fold_{k + 1}" for k in range(spec.n_folds)]
    need = ["patient_id", "slide_id"] + (["time", "event"] if spec.is_survival else ["label"]) + folds
    missing = [c for c in need if c not in columns]
    if missing:
        raise SchemaError(f"{csv_path}: missing columns {', '.join(missing)}")
    is_test = np.zeros((len(rows), spec.n_folds), dtype=bool)
    for i, row in enumerate(rows):
        for k, col in enumerate(folds):
            v = (row[col] or "").strip().lower()
            if v not in ("train", "test"):
                raise SchemaError(f"row {i + 2}: {col} must be train or test, got {row[col]!r}")
            is_test[i, k] = v == "test"
    try:
        time = np.array([float(r["time"]) for r in rows]) if spec.is_survival else None
        event = np.array([_parse_event(r["event"]) for r in rows]) if spec.is_survival else None
    except ValueError as exc:
        raise SchemaError(f"{csv_path}: {exc}") from exc
    table = SplitTable(
        [r["patient_id"] for r in rows],
        [r["slide_id"] for r in rows],
        is_test,
        None if spec.is_survival else [r["label"] for r in rows],
        time,
        event,
    )
    validate(spec, table)
    return spec, table


def _parse_event(v: str) -> bool:
    v = v.strip().lower()
    if v in ("1", "true", "yes"):
        return True
    if v in ("0", "false", "no"):
        return False
    raise ValueError(f"event must be 0/1, got {v!r}")


def write_task(spec: TaskSpec, table: SplitTable, csv_path, yaml_path) -> None:
    """Validate, then write the CSV and YAML pair."""
    validate(spec, table)
    header = ["patient_id", "slide_id"] + (["time", "event"] if spec.is_survival else ["label"])
    header += table.fold_names
    for p in (csv_path, yaml_path):
        Path(p).parent.mkdir(parents=True, exist_ok=True)
    with open(csv_path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(len(table)):
            row = [table.patient_id[i], table.slide_id[i]]
            row += [repr(float(table.time[i])), int(table.event[i])] if spec.is_survival else [table.label[i]]
            row += ["test" if t else "train" for t in table.is_test[i]]
            w.writerow(row)
    with open(yaml_path, "w", encoding="utf-8") as fh:
        yaml.safe_dump(spec.to_yaml_dict(), fh, sort_keys=False)


# --------------------------------------------------------------------------
# generation


def _strata(patients: Sequence[str], labels: Mapping[str, object], label_kind: str, stratify: bool):
    """Group patients by class (event status for survival), in a stable order."""
    if not stratify:
        return {"*": list(patients)}
    groups: dict[str, list[str]] = defaultdict(list)
    for p in patients:
        lab = labels[p]
        key = str(bool(lab[1])) if label_kind == "survival" else str(lab)
        groups[key].append(p)
    return dict(sorted(groups.items()))


def _largest_remainder(total: int, sizes: dict[str, int], rng: np.random.Generator) -> dict[str, int]:
    n = sum(sizes.values())
    exact = {c: total * s / n for c, s in sizes.items()}
    quota = {c: math.floor(v) for c, v in exact.items()}
    left = total - sum(quota.values())
    order = list(sizes)
    tiebreak = {c: i for i, c in enumerate(rng.permutation(order).tolist())}
    for c in sorted(order, key=lambda c: (-(exact[c] - quota[c]), tiebreak[c]))[:left]:
        quota[c] += 1
    return quota


def generate_splits(
    labels: Mapping[str, object],
    slides: Mapping[str, Sequence[str]] | None = None,
    *,
    scheme: str = "kfold",
    n_folds: int = 5,
    seed: int = 0,
    stratify: bool = True,
    label_kind: str = "categorical",
) -> SplitTable:
    """Patient-grouped splits.

    ``labels`` maps patient id to a class label, or to ``(time, event)`` for
    survival. ``slides`` maps patient id to slide ids (default: one slide named
    after the patient). Every slide inherits its patient's assignment.
    """
    if scheme not in ("kfold", "monte_carlo"):
        raise ValidationError(f"cannot generate {scheme!r} splits")
    patients = sorted(labels)
    n = len(patients)
    if n < 2:
        raise TooFewSamplesError("need at least two patients")
    if n_folds < 1:
        raise ValidationError("n_folds must be >= 1")
    if scheme == "kfold" and n_folds > n:
        raise TooFewSamplesError(f"{n_folds} folds need at least {n_folds} patients, have {n}")
    groups = _strata(patients, labels, label_kind, stratify)
    if stratify and label_kind != "survival":
        need = n_folds if scheme == "kfold" else 2
        starving = {c: len(g) for c, g in groups.items() if len(g) < need}
        if starving:
            raise ClassStarvationError(f"classes with fewer than {need} patients: {starving}")

    test = np.zeros((n, n_folds), dtype=bool)
    pos = {p: i for i, p in enumerate(patients)}
    rng = np.random.default_rng(seed)
    if scheme == "kfold":
        order = []
        for g in groups.values():
            order.extend(rng.permutation(g).tolist())
        for i, p in enumerate(order):
            test[pos[p], i % n_folds] = True
    else:
        n_test = max(1, math.floor(TEST_FRACTION * n + 0.5))
        for k, child in enumerate(np.random.SeedSequence(seed).spawn(n_folds)):
            frng = np.random.default_rng(child)
            quota = _largest_remainder(n_test, {c: len(g) for c, g in groups.items()}, frng)
            for c, g in groups.items():
                for p in frng.choice(g, size=quota[c], replace=False).tolist():
                    test[pos[p], k] = True

    slides = slides or {p: [p] for p in patients}
    rows_p, rows_s, rows_t = [], [], []
    for p in patients:
        for s in slides[p]:
            rows_p.append(p)
            rows_s.append(s)
            rows_t.append(test[pos[p]])
    if label_kind == "survival":
        return SplitTable(
            rows_p, rows_s, np.array(rows_t),
            time=[float(labels[p][0]) for p in rows_p],
            event=[bool(labels[p][1]) for p in rows_p],
        )
    return SplitTable(rows_p, rows_s, np.array(rows_t), label=[str(labels[p]) for p in rows_p])


def make_task(
    task_id: str,
    labels: Mapping[str, object],
    slides: Mapping[str, Sequence[str]] | None = None,
    *,
    label_kind: str = "categorical",
    metric: str | None = None,
    level: str = "patient",
    scheme: str = "kfold",
    n_folds: int = 5,
    seed: int = 0,
    stratify: bool = True,
    classes: Sequence[str] | None = None,
) -> tuple[TaskSpec, SplitTable]:
    """Generate splits and the matching metadata in one go."""
    table = generate_splits(
        labels, slides, scheme=scheme, n_folds=n_folds, seed=seed, stratify=stratify, label_kind=label_kind
    )
    if classes is None and label_kind != "survival":
        classes = sorted({str(v) for v in labels.values()})
    metric = metric or METRICS_FOR_KIND[label_kind][0]
    n_samples = len(labels) if level == "patient" else len(table)
    spec = TaskSpec(
        task_id, level, label_kind, n_folds, metric, scheme, tuple(classes or ()), n_samples, stratify, seed
    )
    return spec, table


def few_shot_subsample(table: SplitTable, fold: int, k_shots: int, seed: int = 0) -> SplitTable:
    """Keep ``k_shots`` training patients per class in ``fold``; test rows untouched.

    Returns a single-fold table; dropped training patients are removed.
    """
    if k_shots < 1:
        raise ValidationError("k_shots must be >= 1")
    labels = table.patient_labels()
    train_patients = sorted({table.patient_id[i] for i in table.train_rows(fold)})
    by_class: dict[str, list[str]] = defaultdict(list)
    for p in train_patients:
        lab = labels[p]
        by_class[str(bool(lab[1])) if table.is_survival else lab].append(p)
    short = {c: len(g) for c, g in by_class.items() if len(g) < k_shots}
    if short:
        raise TooFewSamplesError(f"fold {fold + 1}: classes with fewer than {k_shots} train patients: {short}")
    rng = np.random.default_rng(seed)
    keep = set()
    for c in sorted(by_class):
        keep.update(rng.choice(by_class[c], size=k_shots, replace=False).tolist())
    rows = [i for i in range(len(table)) if table.is_test[i, fold] or table.patient_id[i] in keep]
    return table.subset(rows, [fold])


def with_spec_folds(spec: TaskSpec, table: SplitTable) -> TaskSpec:
    """``spec`` adjusted to describe ``table`` (fold count and sample count)."""
    n = len(table.patients()) if spec.level == "patient" else len(table)
    return replace(spec, n_folds=table.n_folds, n_samples=n)
