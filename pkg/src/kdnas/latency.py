"""Single-inference latency measurement and the persistent lookup table."""
from __future__ import annotations

import contextlib
import csv
import json
import logging
import os
import platform
import threading
import time
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from .exceptions import InputError, MeasurementConflict
from .model import ArchState, build_model
from .numerics import no_grad

log = logging.getLogger(__name__)

CSV_HEADER = ["layers", "heads", "hidden", "intermediate", "activation",
              "mean_ms", "std_ms", "n_samples", "n_runs"]
PAPER_N_SAMPLES = 10_000
PAPER_N_RUNS = 3
WARMUP_FORWARDS = 10
TIMED_REGION = "model forward only, batch size 1, single thread, excludes tokenisation and construction"

_active = {"evaluations": 0}
_lock = threading.Lock()


@contextlib.contextmanager
def evaluation_in_progress():
    """Mark a candidate evaluation as running; measurement refuses meanwhile."""
    with _lock:
        _active["evaluations"] += 1
    try:
        yield
    finally:
        with _lock:
            _active["evaluations"] -= 1


def _require_exclusive():
    with _lock:
        if _active["evaluations"]:
            raise MeasurementConflict(
                f"{_active['evaluations']} candidate evaluation(s) running; latency must be measured alone")


class MeasurementUnreliable(UserWarning):
    pass


@dataclass
class LatencyResult:
    mean_ms: float
    std_ms: float
    n_samples: int
    n_runs: int
    run_means_ms: list = field(default_factory=list)
    warning: str | None = None


def environment_descriptor(seq_len):
    return {
        "host": platform.node(),
        "machine": platform.machine(),
        "cpu_count": os.cpu_count(),
        "threads": 1,
        "seq_len": int(seq_len),
        "timed_region": TIMED_REGION,
    }


def measure_latency(arch, seq_len=32, n_samples=PAPER_N_SAMPLES, n_runs=PAPER_N_RUNS, seed=0,
                    vocab_size=512, max_seq=None, warmup=WARMUP_FORWARDS):
    """Mean and std (across runs) of per-forward wall-clock milliseconds.

    Each run times ``n_samples`` single-sequence forwards of a randomly
    initialised model after ``warmup`` untimed forwards.
    """
    _require_exclusive()
    if n_samples < 1 or n_runs < 1:
        raise InputError("n_samples and n_runs must be >= 1")
    model = build_model(arch, vocab_size, max_seq or seq_len, seed=seed)
    rng = np.random.default_rng([seed, 0x1A7])
    tokens = rng.integers(1, vocab_size, size=(n_samples, seq_len))
    resolution = time.get_clock_info("perf_counter").resolution
    run_means = []
    with threadpool_limits(limits=1), no_grad():
        for _ in range(n_runs):
            for i in range(warmup):
                model.forward(tokens[i % n_samples])
            start = time.perf_counter()
            for i in range(n_samples):
                model.forward(tokens[i])
            elapsed = time.perf_counter() - start
            run_means.append(elapsed / n_samples * 1e3)
    warning = None
    if min(run_means) * 1e-3 < resolution:
        warning = f"timer resolution {resolution:g}s is coarser than the measured interval"
        warnings.warn(warning, MeasurementUnreliable)
    return LatencyResult(float(np.mean(run_means)), float(np.std(run_means)), n_samples, n_runs,
                         run_means, warning)


@dataclass
class LatencyEntry:
    mean_ms: float
    std_ms: float
    n_samples: int
    n_runs: int


class LatencyTable:
    """Map ``ArchState -> LatencyEntry`` plus one environment descriptor.

    Persisted as ``<name>.csv`` with a ``<name>.env.json`` sidecar holding the
    environment and the teacher's state string.
    """

    def __init__(self, environment=None, teacher=None):
        self.entries = {}
        self.environment = dict(environment or {})
        self.teacher = teacher
        self.missing = []

    def __len__(self):
        return len(self.entries)

    def __contains__(self, state):
        return state in self.entries

    def add(self, state, entry):
        if entry.mean_ms <= 0 or entry.std_ms < 0:
            raise InputError(f"invalid latency entry for {state}: {entry}")
        self.entries[state] = entry

    def lookup(self, state):
        """Table read only; a missing state raises ``KeyError``, never measures."""
        return self.entries[state].mean_ms

    @property
    def teacher_latency(self):
        if self.teacher is None:
            raise KeyError("latency table has no teacher entry")
        return self.lookup(self.teacher)

    def check_environment(self, environment):
        keys = ("host", "cpu_count", "seq_len")
        diff = {k: (self.environment.get(k), environment.get(k)) for k in keys
                if self.environment.get(k) != environment.get(k)}
        if diff:
            warnings.warn(f"latency table environment differs from current: {diff}")
        return not diff

    @staticmethod
    def sidecar(path):
        path = Path(path)
        return path.with_name(path.stem + ".env.json")

    def save(self, path):
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        with open(tmp, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(CSV_HEADER)
            for state in sorted(self.entries):
                e = self.entries[state]
                w.writerow([*state.as_tuple(), repr(e.mean_ms), repr(e.std_ms), e.n_samples, e.n_runs])
        tmp.replace(path)
        meta = {"environment": self.environment,
                "teacher": None if self.teacher is None else str(self.teacher),
                "missing": [str(s) for s in self.missing]}
        self.sidecar(path).write_text(json.dumps(meta, indent=2, sort_keys=True))

    @classmethod
    def load(cls, path):
        path = Path(path)
        meta = json.loads(cls.sidecar(path).read_text()) if cls.sidecar(path).exists() else {}
        teacher = meta.get("teacher")
        if teacher is not None:
            teacher = ArchState(*_parse_tuple(teacher.split(",")))
        table = cls(meta.get("environment"), teacher)
        with open(path, newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != CSV_HEADER:
                raise InputError(f"{path}: unexpected header {header}")
            for row in reader:
                state = ArchState(*_parse_tuple(row[:5]))
                table.add(state, LatencyEntry(float(row[5]), float(row[6]), int(row[7]), int(row[8])))
        return table


def _parse_tuple(fields):
    return [int(fields[0]), int(fields[1]), int(fields[2]), int(fields[3]), fields[4]]


def build_table(space, teacher_arch, path=None, seq_len=32, n_samples=PAPER_N_SAMPLES,
                n_runs=PAPER_N_RUNS, seed=0, vocab_size=512, measure=measure_latency):
    """Measure every state of ``space`` plus the teacher; resumable and persisted.

    Existing entries in ``path`` are kept and never re-measured. A failure on
    one state is recorded in ``table.missing`` (and the sidecar) rather than
    aborting the build.
    """
    environment = environment_descriptor(seq_len)
    if path is not None and Path(path).exists():
        table = LatencyTable.load(path)
        table.check_environment(environment)
        table.teacher = teacher_arch
    else:
        table = LatencyTable(environment, teacher_arch)
    table.missing = []
    todo = [s for s in [*space.states(), teacher_arch] if s not in table]
    todo = list(dict.fromkeys(todo))
    for state in todo:
        try:
            res = measure(state, seq_len=seq_len, n_samples=n_samples, n_runs=n_runs, seed=seed,
                          vocab_size=vocab_size)
        except Exception as exc:  # noqa: BLE001 - recorded in the missing manifest
            log.warning("latency measurement failed for %s: %s", state, exc)
            table.missing.append(state)
            continue
        table.add(state, LatencyEntry(res.mean_ms, res.std_ms, res.n_samples, res.n_runs))
        if path is not None:
            table.save(path)
    if path is not None:
        table.save(path)
    table.measured = len(todo) - len(table.missing)
    return table


def flops_per_token(arch, seq_len):
    d, f = arch.hidden_size, arch.intermediate_size
    per_layer = 4 * d * d + 2 * seq_len * d + 2 * d * f
    return arch.hidden_layers * per_layer


def analytic_table(space, teacher_arch, teacher_latency_ms=64.98, seq_len=128):
    """FLOP-proportional latencies scaled so the teacher costs ``teacher_latency_ms``.

    Stands in for measurement where timing thousands of full-size models is
    impractical (surrogate search over the full space).
    """
    scale = teacher_latency_ms / flops_per_token(teacher_arch, seq_len)
    env = {"source": "analytic-flops", "seq_len": seq_len,
           "teacher_latency_ms": teacher_latency_ms}
    table = LatencyTable(env, teacher_arch)
    for state in [*space.states(), teacher_arch]:
        table.add(state, LatencyEntry(flops_per_token(state, seq_len) * scale, 0.0, 0, 0))
    return table
