"""Iterative update engines.

Four rules run through one loop so that zero-delay configurations reproduce
the non-delayed trajectory bitwise:

  non-delayed:      theta_{t+1} = theta_t + alpha g(theta_t, o_t)
  constant delay:   theta_{t+1} = theta_0 for t < tau, then
                    theta_t + alpha g(theta_{t-tau}, o_{t-tau})
  time-varying:     theta_{t+1} = theta_t + alpha g(theta_{t-tau_t}, o_{t-tau_t}),
                    tau_t <= min(t, tau_max)
  delay-adaptive:   the time-varying step fires only when the staleness
                    |theta_t - theta_{t-tau_t}| <= epsilon, else theta is held

Stale arguments come from a bounded ring buffer; a skipped pseudo-gradient is
discarded (each step consumes the arrival at that step). A run that produces
non-finite or astronomically large errors is marked diverged and returned,
never raised.
"""
from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .chain import operator_mixing_time
from .rng import stream
from .schedule import DelaySchedule, generate


@dataclass(frozen=True)
class NonDelayed:
    pass


@dataclass(frozen=True)
class ConstantDelay:
    tau: int


@dataclass(frozen=True)
class TimeVarying:
    schedule: DelaySchedule


@dataclass(frozen=True)
class DelayAdaptive:
    schedule: DelaySchedule
    epsilon: float


Rule = NonDelayed | ConstantDelay | TimeVarying | DelayAdaptive


@dataclass(frozen=True)
class ManualStep:
    alpha: float


@dataclass(frozen=True)
class TheoremStep:
    """alpha = mu / (C L^2 tau_bar), with tau_bar the larger of the mixing
    time and the rule's delay scale (the mixing time alone for the adaptive
    rule, whose tuning must not depend on the delay sequence)."""

    C: float = 196.0

    def __post_init__(self):
        if self.C < 2.0:
            raise ValueError("theorem step-size constant must be >= 2")


@dataclass(frozen=True)
class StepSizeInfo:
    alpha: float
    tau_mix: int | None = None
    tau_bar: float | None = None
    C: float | None = None


def rule_delay_scale(rule: Rule) -> int:
    if isinstance(rule, NonDelayed):
        return 0
    if isinstance(rule, ConstantDelay):
        return rule.tau
    return rule.schedule.tau_max


def resolve_step_size(op, rule: Rule, mode: ManualStep | TheoremStep, passes: int = 2,
                      mix_cap: int = 50_000, grid_seed: int = 0) -> StepSizeInfo:
    """Resolve the step size, iterating the mutually referential pair
    (alpha, tau_mix(alpha)) a fixed number of passes for theorem rules."""
    if isinstance(mode, ManualStep):
        if mode.alpha <= 0:
            raise ValueError("alpha must be positive")
        return StepSizeInfo(alpha=mode.alpha)
    c = op.constants()
    scale = rule_delay_scale(rule)
    adaptive = isinstance(rule, DelayAdaptive)
    alpha = c.mu / (mode.C * c.L**2 * max(1, scale))
    tau_mix = None
    tau_bar = None
    for _ in range(passes):
        tau_mix = operator_mixing_time(op.chain, op, alpha, cap=mix_cap, grid_seed=grid_seed)
        tau_bar = max(1, tau_mix) if adaptive else max(1, tau_mix, scale)
        alpha = c.mu / (mode.C * c.L**2 * tau_bar)
    return StepSizeInfo(alpha=alpha, tau_mix=tau_mix, tau_bar=tau_bar, C=mode.C)


@dataclass
class RunConfig:
    rule: Rule
    alpha: float
    T: int
    seed: int
    run_index: int = 0
    theta0: np.ndarray | None = None
    record_iterates: bool = False
    record_errors: bool = False
    check_history: bool = False
    divergence_threshold: float = 1e100

    def __post_init__(self):
        if self.alpha <= 0:
            raise ValueError("alpha must be positive")
        if self.T < 1:
            raise ValueError("T must be >= 1")


@dataclass
class RunTrace:
    """Per-run record: squared errors r_t^2 (length T+1), the update mask,
    the delays used, and optionally the delay-error norms and full iterates."""

    sq_err: np.ndarray
    update_mask: np.ndarray
    delays: np.ndarray
    diverged: bool
    theta_final: np.ndarray
    err_norms: np.ndarray | None = None
    iterates: np.ndarray | None = None

    @property
    def T(self) -> int:
        return len(self.update_mask)


class HistoryBuffer:
    """Ring of (theta, observation) pairs with capacity tau_max + 1.

    lookup(l) is defined for the last capacity indices pushed; the engine
    never asks further back because tau_t <= tau_max.
    """

    def __init__(self, capacity: int, dim: int):
        self.capacity = capacity
        self.thetas = np.empty((capacity, dim))
        self.obs: list = [None] * capacity
        self.latest = -1

    def push(self, t: int, theta: np.ndarray, obs) -> None:
        slot = t % self.capacity
        self.thetas[slot] = theta
        self.obs[slot] = obs
        self.latest = t

    def lookup(self, t: int):
        if not (self.latest - self.capacity < t <= self.latest):
            raise IndexError(f"history index {t} outside ring window ending at {self.latest}")
        slot = t % self.capacity
        return self.thetas[slot], self.obs[slot]


def run(op, cfg: RunConfig) -> RunTrace:
    """Execute one run of the configured rule; deterministic given the seed."""
    rule = cfg.rule
    T, alpha = cfg.T, cfg.alpha
    d = op.dim
    theta_star = op.fixed_point()

    states, rewards = op.sample_observations(
        T, stream(cfg.seed, cfg.run_index, "path"), stream(cfg.seed, cfg.run_index, "reward")
    )
    freeze = 0
    eps = None
    if isinstance(rule, NonDelayed):
        delays = np.zeros(T, dtype=np.int64)
    elif isinstance(rule, ConstantDelay):
        if rule.tau < 0:
            raise ValueError("constant delay must be nonnegative")
        delays = np.full(T, rule.tau, dtype=np.int64)
        freeze = min(rule.tau, T)
    else:
        delays = generate(rule.schedule, T, stream(cfg.seed, cfg.run_index, "delay"))
        if isinstance(rule, DelayAdaptive):
            if rule.epsilon < 0:
                raise ValueError("epsilon must be nonnegative")
            eps = rule.epsilon

    theta = np.zeros(d) if cfg.theta0 is None else np.array(cfg.theta0, dtype=float)
    if theta.shape != (d,):
        raise ValueError(f"theta0 must have shape ({d},)")

    hist = HistoryBuffer(rule_delay_scale(rule) + 1, d)
    hist.push(0, theta, op.obs_at(states, rewards, 0))
    shadow = [(theta.copy(), hist.obs[0])] if cfg.check_history else None

    sq = np.empty(T + 1)
    mask = np.zeros(T, dtype=np.uint8)
    err = np.empty(T) if cfg.record_errors else None
    iterates = np.empty((T + 1, d)) if cfg.record_iterates else None
    if iterates is not None:
        iterates[0] = theta
    dv = theta - theta_star
    sq[0] = float(dv @ dv)
    diverged = False

    for t in range(T):
        if t < freeze:
            # constant-delay warm-up: the next iterate is pinned at theta0
            mask[t] = 1
            sq[t + 1] = sq[t]
            if err is not None:
                err[t] = 0.0
            if t + 1 < T:
                hist.push(t + 1, theta, op.obs_at(states, rewards, t + 1))
                if shadow is not None:
                    shadow.append((theta.copy(), hist.obs[(t + 1) % hist.capacity]))
            if iterates is not None:
                iterates[t + 1] = theta
            continue

        tl = t - delays[t]
        th_old, obs_old = hist.lookup(tl)
        if shadow is not None:
            ref_theta, ref_obs = shadow[tl]
            assert np.array_equal(th_old, ref_theta) and obs_old is ref_obs, (
                f"history ring returned a wrong entry at t={t}, lag={delays[t]}"
            )
        g = op.noisy_update(th_old, obs_old)
        if err is not None:
            g_now = op.noisy_update(theta, op.obs_at(states, rewards, t))
            err[t] = float(np.linalg.norm(g_now - g))
        fire = True
        if eps is not None:
            diff = theta - th_old
            fire = math.sqrt(float(diff @ diff)) <= eps
        if fire:
            theta = theta + alpha * g
        mask[t] = fire
        dv = theta - theta_star
        s = float(dv @ dv)
        sq[t + 1] = s
        if not math.isfinite(s) or s > cfg.divergence_threshold:
            diverged = True
            sq[t + 2 :] = np.nan
            if err is not None:
                err[t + 1 :] = np.nan
            if iterates is not None:
                iterates[t + 1 :] = np.nan
                iterates[t + 1] = theta
            break
        if t + 1 < T:
            hist.push(t + 1, theta, op.obs_at(states, rewards, t + 1))
            if shadow is not None:
                shadow.append((theta.copy(), hist.obs[(t + 1) % hist.capacity]))
        if iterates is not None:
            iterates[t + 1] = theta

    return RunTrace(
        sq_err=sq,
        update_mask=mask,
        delays=delays,
        diverged=diverged,
        theta_final=theta,
        err_norms=err,
        iterates=iterates,
    )


def run_non_delayed(op, cfg: RunConfig) -> RunTrace:
    return run(op, replace(cfg, rule=NonDelayed()))


def run_constant_delay(op, cfg: RunConfig) -> RunTrace:
    if not isinstance(cfg.rule, ConstantDelay):
        raise ValueError("config rule must be ConstantDelay")
    return run(op, cfg)


def run_time_varying(op, cfg: RunConfig) -> RunTrace:
    if not isinstance(cfg.rule, TimeVarying):
        raise ValueError("config rule must be TimeVarying")
    return run(op, cfg)


def run_delay_adaptive(op, cfg: RunConfig) -> RunTrace:
    if not isinstance(cfg.rule, DelayAdaptive):
        raise ValueError("config rule must be DelayAdaptive")
    return run(op, cfg)


def step_non_delayed(op, theta: np.ndarray, obs, alpha: float) -> np.ndarray:
    """Single step of the plain rule: theta + alpha g(theta, obs)."""
    return theta + alpha * op.noisy_update(theta, obs)


def _worker(args):
    op, cfg = args
    return run(op, cfg)


def worker_count(threads: int | None = None) -> int:
    if threads is not None:
        return max(1, int(threads))
    env = os.environ.get("DELAYSA_THREADS")
    if env:
        return max(1, int(env))
    return os.cpu_count() or 1


def run_ensemble(op, cfg: RunConfig, n_seeds: int, threads: int | None = None) -> list[RunTrace]:
    """Independent runs indexed 0..n_seeds-1 over the shared problem object.

    Runs own their state; results are ordered by run index regardless of
    completion order. DELAYSA_THREADS caps the process pool.
    """
    if n_seeds < 1:
        raise ValueError("n_seeds must be >= 1")
    op.fixed_point()  # materialize caches before forking/pickling
    cfgs = [replace(cfg, run_index=i) for i in range(n_seeds)]
    workers = min(worker_count(threads), n_seeds)
    if workers == 1:
        return [run(op, c) for c in cfgs]
    with ProcessPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(_worker, [(op, c) for c in cfgs]))
