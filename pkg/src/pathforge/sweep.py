"""Experiment sweeps: enumerate the matrix, run it on a slot-balanced worker
pool, track progress in an append-only JSONL ledger, and gather results.

Ledger events are ``{"ts", "exp_id", "transition", "slot", ...}`` with
transitions ``pending``, ``running``, ``done`` and ``failed``, plus one
``session`` marker per ``schedule`` call. Only the coordinator thread writes
the ledger; workers hand results back through futures.
"""

from __future__ import annotations

import csv
import hashlib
import itertools
import json
import logging
import os
import time
from collections import Counter, deque
from concurrent.futures import FIRST_COMPLETED, ThreadPoolExecutor, wait
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import yaml

from .errors import (
    EmptyMatrixError,
    MissingLedgerError,
    NoResultsError,
    PathforgeError,
    SchemaError,
    TaskParseFailure,
    ValidationError,
)
from .evaluation.evaluate import FRAMEWORKS, EvalResult, evaluate_task, is_compatible, load_feature_dir
from .task_splits import parse_task, read_task_spec

log = logging.getLogger(__name__)

LEDGER_NAME = "ledger.jsonl"
RESULTS_DIR = "results"
GATHER_NAME = "results.csv"
GATHER_COLUMNS = ("exp_id", "model", "task", "framework", "fold", "metric_name", "value", "std", "status", "reason")
TERMINAL = ("done", "failed")


@dataclass(frozen=True)
class DeviceSlot:
    slot_id: int
    capacity: int = 1

    def __post_init__(self):
        if self.capacity < 1:
            raise ValidationError(f"slot {self.slot_id}: capacity must be >= 1")


def _slots(device_slots) -> list[DeviceSlot]:
    out = []
    for s in device_slots:
        out.append(s if isinstance(s, DeviceSlot) else DeviceSlot(int(s["slot_id"]), int(s.get("capacity", 1))))
    if not out:
        raise ValidationError("at least one device slot is required")
    if len({s.slot_id for s in out}) != len(out):
        raise ValidationError("device slot ids must be unique")
    return sorted(out, key=lambda s: s.slot_id)


@dataclass
class SweepConfig:
    models: list[str]
    tasks: list[str]
    frameworks: list[str]
    hyper_grids: dict[str, dict[str, list]] = field(default_factory=dict)
    device_slots: list[DeviceSlot] = field(default_factory=lambda: [DeviceSlot(0, 1)])
    workers: int = 1
    out_dir: str = "sweep"
    features_dir: str = "features"
    seed: int = 0

    def __post_init__(self):
        for axis in ("models", "tasks", "frameworks"):
            if not getattr(self, axis):
                raise SchemaError(f"sweep axis {axis!r} is empty")
        unknown = sorted(set(self.frameworks) - set(FRAMEWORKS))
        if unknown:
            raise SchemaError(f"unknown frameworks {unknown} (choose from {', '.join(FRAMEWORKS)})")
        if self.workers < 1:
            raise SchemaError("workers must be >= 1")
        self.device_slots = _slots(self.device_slots)

    @classmethod
    def from_dict(cls, doc: dict, base_dir: str | os.PathLike = ".") -> SweepConfig:
        if not isinstance(doc, dict):
            raise SchemaError("sweep config must be a mapping")
        known = set(cls.__dataclass_fields__)
        extra = sorted(set(doc) - known)
        if extra:
            raise SchemaError(f"unknown sweep config keys: {extra}")
        base = Path(base_dir)
        doc = dict(doc)
        doc["tasks"] = [str(base / t) for t in doc.get("tasks", [])]
        for key in ("out_dir", "features_dir"):
            if key in doc:
                doc[key] = str(base / doc[key])
        try:
            return cls(**doc)
        except TypeError as exc:
            raise SchemaError(f"bad sweep config: {exc}") from exc

    @classmethod
    def load(cls, path: str | os.PathLike) -> SweepConfig:
        path = Path(path)
        if not path.exists():
            raise ValidationError(f"sweep config not found: {path}")
        try:
            doc = yaml.safe_load(path.read_text())
        except yaml.YAMLError as exc:
            raise SchemaError(f"{path}: invalid YAML: {exc}") from exc
        return cls.from_dict(doc, path.parent)


@dataclass(frozen=True)
class Experiment:
    exp_id: str
    model: str
    task: str
    framework: str
    hyper: tuple[tuple[str, object], ...] = ()

    @property
    def hyper_dict(self) -> dict:
        return dict(self.hyper)

    def describe(self) -> dict:
        return {"model": self.model, "task": self.task, "framework": self.framework, "hyper": self.hyper_dict}


def experiment_id(model: str, task: str, framework: str, hyper: dict) -> str:
    key = json.dumps([model, task, framework, hyper], sort_keys=True, default=str)
    return hashlib.sha256(key.encode()).hexdigest()[:16]


def hyper_combos(grid: dict[str, list] | None) -> list[dict]:
    if not grid:
        return [{}]
    names = sorted(grid)
    values = [v if isinstance(v, (list, tuple)) else [v] for v in (grid[n] for n in names)]
    return [dict(zip(names, combo)) for combo in itertools.product(*values)]


@dataclass
class ExperimentMatrix:
    experiments: list[Experiment]
    dropped: int = 0
    config: SweepConfig | None = None

    def __len__(self):
        return len(self.experiments)

    def __iter__(self):
        return iter(self.experiments)


def enumerate_matrix(config: SweepConfig) -> ExperimentMatrix:
    """Cartesian product of models, tasks, frameworks and hyper combos.

    Pairs whose framework cannot handle the task's label kind are dropped.
    Experiments are ordered by (model, task, framework, hyper).
    """
    kinds = {}
    for task in config.tasks:
        try:
            kinds[task] = read_task_spec(task).label_kind
        except PathforgeError as exc:
            raise TaskParseFailure(f"{task}: {exc}") from exc
        except OSError as exc:
            raise TaskParseFailure(f"{task}: {exc.strerror or exc}") from exc
    experiments = []
    dropped = 0
    for model, task, framework in itertools.product(sorted(config.models), sorted(config.tasks), sorted(config.frameworks)):
        combos = hyper_combos(config.hyper_grids.get(framework))
        if not is_compatible(framework, kinds[task]):
            dropped += len(combos)
            continue
        for hyper in sorted(combos, key=lambda h: json.dumps(h, sort_keys=True, default=str)):
            exp_id = experiment_id(model, task, framework, hyper)
            experiments.append(Experiment(exp_id, model, task, framework, tuple(sorted(hyper.items()))))
    if dropped:
        log.info("dropped %d incompatible (framework, label kind) experiments", dropped)
    if not experiments:
        raise EmptyMatrixError(f"every experiment was filtered out ({dropped} incompatible)")
    ids = [e.exp_id for e in experiments]
    if len(set(ids)) != len(ids):
        raise SchemaError("duplicate experiments in sweep (repeated axis values?)")
    return ExperimentMatrix(experiments, dropped, config)


# --------------------------------------------------------------------------
# ledger


@dataclass
class RunLedger:
    path: Path
    events: list[dict] = field(default_factory=list)

    @classmethod
    def load(cls, path: str | os.PathLike) -> RunLedger:
        path = Path(path)
        if not path.exists():
            raise MissingLedgerError(f"no ledger at {path}")
        events = []
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                try:
                    events.append(json.loads(line))
                except json.JSONDecodeError:
                    # a torn final line from a hard kill; everything before it is intact
                    break
        return cls(path, events)

    def state(self) -> dict[str, str]:
        """Latest status per experiment; a ``running`` entry left over from an
        earlier session means the process died mid-run."""
        out: dict[str, str] = {}
        for ev in self.events:
            if ev["transition"] != "session":
                out[ev["exp_id"]] = ev["transition"]
        return out

    def experiments(self) -> dict[str, dict]:
        return {ev["exp_id"]: ev["experiment"] for ev in self.events if ev["transition"] == "pending"}

    def reasons(self) -> dict[str, str]:
        return {ev["exp_id"]: ev.get("reason", "") for ev in self.events if ev["transition"] == "failed"}

    def durations(self) -> list[float]:
        return [ev["duration"] for ev in self.events if ev["transition"] == "done" and "duration" in ev]

    def order(self, transition: str = "running") -> list[str]:
        return [ev["exp_id"] for ev in self.events if ev["transition"] == transition]

    def max_occupancy(self) -> dict[int, int]:
        """Replay the event stream and report the peak concurrent runs per slot.

        Occupancy resets at each session marker, since runs interrupted by a
        crash no longer hold their slot.
        """
        current: Counter = Counter()
        peak: Counter = Counter()
        holder: dict[str, int] = {}
        for ev in self.events:
            t = ev["transition"]
            if t == "session":
                current.clear()
                holder.clear()
            elif t == "running":
                holder[ev["exp_id"]] = ev["slot"]
                current[ev["slot"]] += 1
                peak[ev["slot"]] = max(peak[ev["slot"]], current[ev["slot"]])
            elif t in TERMINAL and ev["exp_id"] in holder:
                current[holder.pop(ev["exp_id"])] -= 1
        return dict(peak)

    def sessions(self) -> list[dict]:
        return [ev for ev in self.events if ev["transition"] == "session"]


class _LedgerWriter:
    def __init__(self, path: Path, ledger: RunLedger):
        path.parent.mkdir(parents=True, exist_ok=True)
        self.fh = open(path, "a")
        self.ledger = ledger

    def write(self, transition: str, exp_id: str | None = None, slot: int | None = None, **extra) -> None:
        event = {"ts": time.time(), "exp_id": exp_id, "transition": transition, "slot": slot, **extra}
        self.fh.write(json.dumps(event, default=str) + "\n")
        self.fh.flush()
        os.fsync(self.fh.fileno())
        self.ledger.events.append(event)

    def close(self) -> None:
        self.fh.close()


# --------------------------------------------------------------------------
# running


def task_csv_path(task_yaml: str | os.PathLike) -> Path:
    return Path(task_yaml).with_suffix(".csv")


def result_path(results_dir: str | os.PathLike, exp_id: str) -> Path:
    return Path(results_dir) / f"{exp_id}.csv"


def make_runner(config: SweepConfig) -> Callable[[Experiment, int], EvalResult]:
    """Runner evaluating an experiment from task files and ``features_dir/<model>``."""
    cache: dict[str, dict] = {}

    def run(exp: Experiment, slot_id: int) -> EvalResult:
        spec, table = parse_task(task_csv_path(exp.task), exp.task)
        if exp.model not in cache:
            cache[exp.model] = load_feature_dir(Path(config.features_dir) / exp.model)
        result = evaluate_task(
            spec, table, cache[exp.model], exp.framework, exp.hyper_dict, seed=config.seed, model_name=exp.model
        )
        result.metadata["slot_id"] = slot_id
        return result

    return run


def _pick_slot(slots: list[DeviceSlot], load: Counter) -> DeviceSlot | None:
    free = [s for s in slots if load[s.slot_id] < s.capacity]
    if not free:
        return None
    return min(free, key=lambda s: (load[s.slot_id], s.slot_id))


def schedule(
    matrix: ExperimentMatrix,
    ledger_path: str | os.PathLike,
    device_slots=None,
    workers: int | None = None,
    runner: Callable[[Experiment, int], object] | None = None,
    *,
    results_dir: str | os.PathLike | None = None,
    max_runs: int | None = None,
    retry_failed: bool = False,
) -> RunLedger:
    """Run every experiment not already finished according to the ledger.

    Experiments are dispatched in matrix order, each onto the least-loaded
    slot with free capacity (ties to the lowest slot id), with at most
    ``workers`` in flight. A runner returning an :class:`EvalResult` has it
    saved under ``results_dir``. Failed experiments stay failed on resume
    unless ``retry_failed``. ``max_runs`` stops dispatching after that many
    runs, which lets tests simulate an interrupted sweep.
    """
    config = matrix.config
    slots = _slots(device_slots if device_slots is not None else config.device_slots)
    workers = workers if workers is not None else (config.workers if config else 1)
    if workers < 1:
        raise ValidationError("workers must be >= 1")
    ledger_path = Path(ledger_path)
    results_dir = Path(results_dir) if results_dir is not None else ledger_path.parent / RESULTS_DIR
    if runner is None:
        if config is None:
            raise ValidationError("schedule needs a runner or a matrix built from a SweepConfig")
        runner = make_runner(config)

    ledger = RunLedger.load(ledger_path) if ledger_path.exists() else RunLedger(ledger_path)
    known = ledger.state()
    writer = _LedgerWriter(ledger_path, ledger)
    try:
        writer.write("session", workers=workers, slots=[[s.slot_id, s.capacity] for s in slots])
        for exp in matrix:
            if exp.exp_id not in known:
                writer.write("pending", exp.exp_id, experiment=exp.describe())
        skip = set(TERMINAL) if not retry_failed else {"done"}
        queue = deque(exp for exp in matrix if known.get(exp.exp_id) not in skip)

        position = {e.exp_id: i for i, e in enumerate(matrix)}
        load: Counter = Counter()
        in_flight = {}
        launched = 0

        def work(exp: Experiment, slot_id: int):
            start = time.perf_counter()
            out = runner(exp, slot_id)
            if isinstance(out, EvalResult):
                out.save(result_path(results_dir, exp.exp_id))
            return time.perf_counter() - start

        with ThreadPoolExecutor(max_workers=workers) as pool:
            while queue or in_flight:
                while queue and len(in_flight) < workers and (max_runs is None or launched < max_runs):
                    slot = _pick_slot(slots, load)
                    if slot is None:
                        break
                    exp = queue.popleft()
                    load[slot.slot_id] += 1
                    writer.write("running", exp.exp_id, slot.slot_id)
                    in_flight[pool.submit(work, exp, slot.slot_id)] = (exp, slot.slot_id)
                    launched += 1
                if not in_flight:
                    break
                finished, _ = wait(in_flight, return_when=FIRST_COMPLETED)
                for fut in sorted(finished, key=lambda f: position[in_flight[f][0].exp_id]):
                    exp, slot_id = in_flight.pop(fut)
                    load[slot_id] -= 1
                    exc = fut.exception()
                    if exc is None:
                        writer.write("done", exp.exp_id, slot_id, duration=fut.result())
                    else:
                        writer.write("failed", exp.exp_id, slot_id, reason=f"{type(exc).__name__}: {exc}")
    finally:
        writer.close()
    return ledger


# --------------------------------------------------------------------------
# monitoring and gathering


@dataclass
class SweepStatus:
    counts: dict[str, int]
    slot_occupancy: dict[int, int]
    total: int
    eta_seconds: float | None

    def as_dict(self) -> dict:
        return {
            "counts": self.counts,
            "slot_occupancy": {str(k): v for k, v in self.slot_occupancy.items()},
            "total": self.total,
            "eta_seconds": self.eta_seconds,
        }


def status(ledger_path: str | os.PathLike) -> SweepStatus:
    """Read-only progress snapshot of a sweep ledger."""
    ledger = RunLedger.load(ledger_path)
    state = ledger.state()
    counts = {k: 0 for k in ("pending", "running", "done", "failed")}
    counts.update(Counter(state.values()))
    occupancy: Counter = Counter()
    sessions = ledger.sessions()
    last_session = max((i for i, ev in enumerate(ledger.events) if ev["transition"] == "session"), default=-1)
    holder: dict[str, int] = {}
    for ev in ledger.events[last_session + 1 :]:
        if ev["transition"] == "running":
            holder[ev["exp_id"]] = ev["slot"]
        elif ev["transition"] in TERMINAL:
            holder.pop(ev["exp_id"], None)
    for slot in holder.values():
        occupancy[slot] += 1
    if sessions:
        for slot_id, _ in sessions[-1].get("slots", []):
            occupancy.setdefault(slot_id, 0)
    durations = ledger.durations()
    remaining = counts["pending"] + counts["running"]
    eta = None
    if durations:
        parallel = sessions[-1].get("workers", 1) if sessions else 1
        eta = sum(durations) / len(durations) * remaining / max(parallel, 1)
    return SweepStatus(counts, dict(sorted(occupancy.items())), len(state), eta)


def gather_results(out_dir: str | os.PathLike, output: str | os.PathLike | None = None) -> Path:
    """Collect every finished experiment into one CSV.

    Each done experiment contributes one row per fold plus a ``summary`` row
    holding the mean in ``value`` and the fold std in ``std``. Each failed
    experiment contributes one row with ``status=failed``, an empty metric and
    the failure reason.
    """
    out_dir = Path(out_dir)
    ledger = RunLedger.load(out_dir / LEDGER_NAME)
    state = ledger.state()
    described = ledger.experiments()
    reasons = ledger.reasons()
    done = [e for e in described if state.get(e) == "done"]
    if not done:
        raise NoResultsError(f"no completed experiments in {out_dir}")
    output = Path(output) if output is not None else out_dir / GATHER_NAME
    rows = []
    for exp_id, desc in described.items():
        st = state.get(exp_id)
        if st not in TERMINAL:
            continue
        base = {"exp_id": exp_id, "model": desc["model"], "task": desc["task"], "framework": desc["framework"]}
        path = result_path(out_dir / RESULTS_DIR, exp_id)
        if st == "done" and path.exists():
            res = EvalResult.load(path)
            for fold, value in res.fold_values.items():
                rows.append({**base, "fold": fold, "metric_name": res.metric, "value": repr(value), "std": "", "status": "done", "reason": ""})
            rows.append(
                {**base, "fold": "summary", "metric_name": res.metric, "value": repr(res.mean), "std": repr(res.std), "status": "done", "reason": ""}
            )
        else:
            reason = reasons.get(exp_id) or "result file missing"
            rows.append({**base, "fold": "", "metric_name": "", "value": "", "std": "", "status": "failed", "reason": reason})
    tmp = output.with_name(output.name + ".tmp")
    with open(tmp, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=GATHER_COLUMNS)
        writer.writeheader()
        writer.writerows(rows)
    os.replace(tmp, output)
    return output


def run_sweep(config: SweepConfig, runner=None, **kwargs) -> RunLedger:
    """Enumerate and schedule ``config`` with the ledger under ``out_dir``."""
    matrix = enumerate_matrix(config)
    out = Path(config.out_dir)
    return schedule(
        matrix, out / LEDGER_NAME, config.device_slots, config.workers, runner, results_dir=out / RESULTS_DIR, **kwargs
    )
