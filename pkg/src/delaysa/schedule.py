"""Delay-sequence generation and statistics.

Every emitted delay satisfies the admissibility constraint
``0 <= tau_t <= min(t, tau_max)``: a stale index can never point before the
start of the run, and delays are bounded by assumption.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import TraceExhausted


@dataclass(frozen=True)
class DelayStats:
    tau_max_observed: int
    tau_avg: float


def stats(trace: np.ndarray) -> DelayStats:
    trace = np.asarray(trace)
    if trace.size == 0:
        raise ValueError("delay trace must be nonempty")
    return DelayStats(int(trace.max()), float(trace.mean()))


@dataclass(frozen=True)
class ConstantSchedule:
    """tau_t = tau, clamped to t during warm-up."""

    tau: int

    def __post_init__(self):
        if self.tau < 0:
            raise ValueError("tau must be nonnegative")

    @property
    def tau_max(self) -> int:
        return self.tau

    def raw(self, T: int, rng) -> np.ndarray:
        return np.full(T, self.tau, dtype=np.int64)


@dataclass(frozen=True)
class UniformSchedule:
    """tau_t uniform on {1, ..., tau_max}, clamped to t (t = 0 yields 0)."""

    tau_max: int

    def __post_init__(self):
        if self.tau_max < 1:
            raise ValueError("uniform schedule needs tau_max >= 1")

    def raw(self, T: int, rng) -> np.ndarray:
        return rng.integers(1, self.tau_max + 1, T)


@dataclass(frozen=True)
class BurstySchedule:
    """Sawtooth: a spike every ``period`` steps, ``base`` otherwise.

    With base << spike the average delay is far below the maximum, the
    regime where rates driven by the average beat rates driven by the cap.
    """

    base: int
    spike: int
    period: int

    def __post_init__(self):
        if self.base < 0 or self.spike < 0 or self.period < 1:
            raise ValueError("bursty schedule needs base, spike >= 0 and period >= 1")

    @property
    def tau_max(self) -> int:
        return max(self.base, self.spike)

    def raw(self, T: int, rng) -> np.ndarray:
        out = np.full(T, self.base, dtype=np.int64)
        out[:: self.period] = self.spike
        return out


@dataclass(frozen=True)
class TraceSchedule:
    """Replays a recorded delay sequence."""

    trace: tuple[int, ...]

    @property
    def tau_max(self) -> int:
        return max(self.trace) if self.trace else 0

    def raw(self, T: int, rng) -> np.ndarray:
        if len(self.trace) < T:
            raise TraceExhausted(f"trace has {len(self.trace)} entries, horizon is {T}")
        return np.asarray(self.trace[:T], dtype=np.int64)


DelaySchedule = ConstantSchedule | UniformSchedule | BurstySchedule | TraceSchedule


def generate(sched: DelaySchedule, T: int, rng: np.random.Generator) -> np.ndarray:
    """Admissible delay sequence of length T: raw values clamped to min(t, tau_max)."""
    raw = sched.raw(T, rng)
    clamp = np.minimum(np.arange(T, dtype=np.int64), sched.tau_max)
    return np.minimum(raw, clamp)


def next_delay(sched: DelaySchedule, t: int, rng: np.random.Generator) -> int:
    """Single admissible draw at iteration t (convenience over ``generate``)."""
    if t < 0:
        raise ValueError("t must be nonnegative")
    if isinstance(sched, TraceSchedule) and t >= len(sched.trace):
        raise TraceExhausted(f"trace has {len(sched.trace)} entries, asked for index {t}")
    if isinstance(sched, UniformSchedule):
        raw = int(rng.integers(1, sched.tau_max + 1))
    elif isinstance(sched, ConstantSchedule):
        raw = sched.tau
    elif isinstance(sched, BurstySchedule):
        raw = sched.spike if t % sched.period == 0 else sched.base
    else:
        raw = int(sched.trace[t])
    return min(raw, t, sched.tau_max)


def load_trace(path: str | Path) -> TraceSchedule:
    """Trace file: one nonnegative integer per line."""
    values = tuple(int(line) for line in Path(path).read_text().split())
    if any(v < 0 for v in values):
        raise ValueError("delay trace entries must be nonnegative")
    return TraceSchedule(values)


def schedule_from_config(doc: dict) -> DelaySchedule | None:
    kind = doc.get("kind", "none")
    if kind == "none":
        return None
    if kind == "constant":
        return ConstantSchedule(int(doc["tau"]))
    if kind == "uniform":
        return UniformSchedule(int(doc["tau_max"]))
    if kind == "bursty":
        return BurstySchedule(int(doc["base"]), int(doc["spike"]), int(doc["period"]))
    if kind == "trace":
        return load_trace(doc["trace_file"])
    raise ValueError(f"unknown delay kind: {kind!r}")
