"""Shared builders for sweep and acceptance tests."""

import hashlib
import threading
import time
from pathlib import Path

from pathforge.evaluation import EvalResult
from pathforge.task_splits import make_task, write_task


def write_tasks(root, n_tasks, n_patients=10, survival=()):
    """Write ``n_tasks`` small categorical tasks (survival for indices in ``survival``)."""
    root = Path(root)
    paths = []
    for t in range(n_tasks):
        tid = f"task_{t:02d}"
        if t in survival:
            labels = {f"P{i}": (float(i + 1), bool(i % 2)) for i in range(n_patients)}
            spec, table = make_task(tid, labels, label_kind="survival", seed=t)
        else:
            labels = {f"P{i}": ("a" if i % 2 else "b") for i in range(n_patients)}
            spec, table = make_task(tid, labels, seed=t)
        write_task(spec, table, root / f"{tid}.csv", root / f"{tid}.yaml")
        paths.append(str(root / f"{tid}.yaml"))
    return paths


class StubRunner:
    """No-op fit: five fold values derived from the experiment id.

    Tracks live concurrency per slot so tests can cross-check the ledger.
    """

    def __init__(self, delay=0.0, fail=()):
        self.delay = delay
        self.fail = set(fail)
        self.calls = []
        self.live = {}
        self.peak = {}
        self._lock = threading.Lock()

    def __call__(self, exp, slot_id):
        with self._lock:
            self.calls.append(exp.exp_id)
            self.live[slot_id] = self.live.get(slot_id, 0) + 1
            self.peak[slot_id] = max(self.peak.get(slot_id, 0), self.live[slot_id])
        try:
            if self.delay:
                time.sleep(self.delay)
            if exp.exp_id in self.fail:
                raise RuntimeError("planted failure")
            digest = hashlib.sha256(exp.exp_id.encode()).digest()
            folds = {f"fold_{k + 1}": digest[k] / 255 for k in range(5)}
            return EvalResult(Path(exp.task).stem, exp.model, exp.framework, "balanced_accuracy", folds)
        finally:
            with self._lock:
                self.live[slot_id] -= 1
