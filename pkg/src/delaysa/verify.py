"""Numerical audits of the standing assumptions and the finite-time bounds.

Checks compare Monte-Carlo estimates (or realized paths) against the
explicit constant forms of the bounds:

  drift:        E|theta_t - theta_{t-tau_mix}|^2
                  <= 2 a^2 tau_mix^2 L^2 (2 r_{t,2} + 3 sigma^2), t >= tau_mix
                and the same with tau_t / tau_max in place of tau_mix,
                where r_{t,2} = max over [t - tau', t] of E r_l^2 and
                tau' = 2 tau_max + tau_mix
  boundedness:  max_t E r_t^2 <= 9 sigma^2 under a <= mu / (196 L^2 tau_bar)
  adaptive
  drift:        |theta_t - theta_{t-tau}| <= 4 L a tau (r_t + 2 beta),
                beta = L (epsilon + sigma), path-wise, for a tau L <= 1/4
  last-iterate: E r_T^2 <= exp(-2 a mu (T - tau')) 18 sigma^2
                  + 98 L^2 a (tau_mix + tau_max) 9 sigma^2 / mu
                for the time-varying rule, and the adaptive analogue with
                exponent a mu T / (4 (tau_avg + 1)), head constant 6 sigma^2,
                and tail 1418 L^2 a tau_mix beta^2 / mu with epsilon = a

Expectation bounds are checked with a 5% default tolerance plus the CI slack
of the estimated left side; path-wise inequalities are checked exactly.
"""
from __future__ import annotations

import json
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from .engine import RunTrace
from .errors import MissingIterates, StepSizeTooLarge
from .metrics import EnsembleResult, ensemble_mse

BOUNDEDNESS_C = 196.0
BOUNDEDNESS_FACTOR = 9.0
RECURSION_COEFF = 98.0
ADAPTIVE_C = 1152.0
ADAPTIVE_TAIL_COEFF = 1418.0
ADAPTIVE_HEAD_FACTOR = 6.0


@dataclass
class BoundCheck:
    name: str
    lhs_series: np.ndarray
    rhs_series: np.ndarray
    holds: bool
    max_ratio: float
    window: int | None = None
    tolerance: float = 0.0
    t_start: int = 0
    skipped: bool = False
    reason: str | None = None

    def to_dict(self) -> dict:
        return {
            "name": self.name,
            "holds": None if self.skipped else bool(self.holds),
            "max_ratio": None if self.skipped else float(self.max_ratio),
            "window": self.window,
            "tolerance": self.tolerance,
            "skipped": self.skipped,
            "reason": self.reason,
        }


def _ratio_check(name, lhs, rhs, tol, window=None, t_start=0) -> BoundCheck:
    lhs = np.asarray(lhs, dtype=float)
    rhs = np.asarray(rhs, dtype=float)
    with np.errstate(divide="ignore", invalid="ignore"):
        ratios = np.where(rhs > 0, lhs / rhs, np.where(lhs > 0, np.inf, 0.0))
    max_ratio = float(ratios.max()) if ratios.size else 0.0
    return BoundCheck(
        name=name,
        lhs_series=lhs,
        rhs_series=rhs,
        holds=max_ratio <= 1.0 + tol,
        max_ratio=max_ratio,
        window=window,
        tolerance=tol,
        t_start=t_start,
    )


def _skipped(name: str, reason: str) -> BoundCheck:
    return BoundCheck(
        name=name,
        lhs_series=np.empty(0),
        rhs_series=np.empty(0),
        holds=True,
        max_ratio=0.0,
        skipped=True,
        reason=reason,
    )


def windowed_max(series: np.ndarray, window: int) -> np.ndarray:
    """out[t] = max(series[max(0, t - window) : t + 1]) via a monotone deque."""
    series = np.asarray(series, dtype=float)
    out = np.empty_like(series)
    dq: deque[int] = deque()
    for t in range(len(series)):
        while dq and series[dq[-1]] <= series[t]:
            dq.pop()
        dq.append(t)
        if dq[0] < t - window:
            dq.popleft()
        out[t] = series[dq[0]]
    return out


def _require_iterates(traces: list[RunTrace]) -> list[RunTrace]:
    kept = [tr for tr in traces if not tr.diverged]
    if any(tr.iterates is None for tr in kept):
        raise MissingIterates("bound checks need runs with record_iterates=True")
    return kept


def check_drift_lemma(
    traces: list[RunTrace],
    op,
    alpha: float,
    tau_mix: int,
    tau_max: int,
    tol: float = 0.05,
) -> list[BoundCheck]:
    """Drift of the iterates over mixing-time and realized-delay lags, against
    the windowed-max bound; returns the two checks (fixed lag, realized lag)."""
    kept = _require_iterates(traces)
    c = op.constants()
    T = kept[0].T
    mean_sq = ensemble_mse(kept).mean_sq_err
    tau_prime = 2 * tau_max + tau_mix
    r_t2 = windowed_max(mean_sq, tau_prime)
    scale = 2.0 * alpha**2 * c.L**2 * (2.0 * r_t2 + 3.0 * c.sigma**2)

    checks = []
    if tau_mix >= 1 and T >= tau_mix:
        lags = np.stack(
            [
                ((tr.iterates[tau_mix:] - tr.iterates[:-tau_mix]) ** 2).sum(axis=1)
                for tr in kept
            ]
        ).mean(axis=0)
        rhs = tau_mix**2 * scale[tau_mix:]
        checks.append(
            _ratio_check("drift-mixing-lag", lags, rhs, tol, window=tau_prime, t_start=tau_mix)
        )
    else:
        checks.append(_skipped("drift-mixing-lag", f"tau_mix={tau_mix} leaves no lag to check"))

    ts = np.arange(T)
    lhs_delay = np.zeros(T)
    for tr in kept:
        src = tr.iterates[ts - tr.delays]
        lhs_delay += ((tr.iterates[ts] - src) ** 2).sum(axis=1)
    lhs_delay /= len(kept)
    rhs_delay = max(1, tau_max) ** 2 * scale[:T]
    checks.append(
        _ratio_check("drift-realized-lag", lhs_delay, rhs_delay, tol, window=tau_prime)
    )
    return checks


def check_uniform_boundedness(
    result: EnsembleResult,
    sigma: float,
    alpha: float,
    mu: float,
    L: float,
    tau_bar: float,
    tol: float = 0.05,
) -> BoundCheck:
    """max_t mean squared error against 9 sigma^2, gated on the 196-rule."""
    limit = mu / (BOUNDEDNESS_C * L**2 * tau_bar)
    if alpha > limit * (1.0 + 1e-9):
        raise StepSizeTooLarge(
            f"alpha={alpha:.3e} exceeds mu/(196 L^2 tau_bar)={limit:.3e}; check not applicable"
        )
    m = result.mean_sq_err
    rhs = np.full_like(m, BOUNDEDNESS_FACTOR * sigma**2)
    return _ratio_check("uniform-boundedness", m, rhs, tol)


def check_adaptive_drift(
    trace: RunTrace,
    alpha: float,
    L: float,
    epsilon: float,
    sigma: float,
    tau: int,
    tol: float = 0.0,
) -> BoundCheck:
    """Path-wise staleness bound for the adaptive rule at a fixed lag tau."""
    if tau < 1:
        raise ValueError("tau must be >= 1")
    if alpha * tau * L > 0.25:
        return _skipped(
            "adaptive-drift", f"alpha tau L = {alpha * tau * L:.3g} > 1/4; lemma not applicable"
        )
    if trace.iterates is None:
        raise MissingIterates("adaptive drift check needs recorded iterates")
    beta = L * (epsilon + sigma)
    n = len(trace.iterates)
    lag_idx = np.maximum(np.arange(n) - tau, 0)  # iterates before the start equal theta_0
    lhs = np.linalg.norm(trace.iterates - trace.iterates[lag_idx], axis=1)
    rhs = 4.0 * L * alpha * tau * (np.sqrt(trace.sq_err) + 2.0 * beta)
    return _ratio_check("adaptive-drift", lhs, rhs, tol)


def check_theorem_bound(
    traces: list[RunTrace],
    theorem: str,
    mu: float,
    L: float,
    sigma: float,
    alpha: float,
    tau_mix: int,
    tau_max: int,
    epsilon: float | None = None,
    tol: float = 0.05,
) -> BoundCheck:
    """Directional last-iterate bound check ('two' or 'three'); the bound must
    hold at every admissible checkpoint, with CI slack on the estimated side."""
    kept = [tr for tr in traces if not tr.diverged]
    result = ensemble_mse(kept)
    m = result.mean_sq_err
    ci = result.ci_half_width if result.ci_half_width is not None else np.zeros_like(m)
    lhs = np.maximum(m - ci, 0.0)
    tau_bar = max(tau_mix, tau_max, 1)
    B = BOUNDEDNESS_FACTOR * sigma**2
    T = len(m) - 1

    if theorem == "two":
        limit = mu / (BOUNDEDNESS_C * L**2 * tau_bar)
        if alpha > limit * (1.0 + 1e-9):
            raise StepSizeTooLarge(
                f"alpha={alpha:.3e} exceeds the rule {limit:.3e} for the time-varying bound"
            )
        tau_prime = 2 * tau_max + tau_mix
        t0 = int(max(3 * tau_bar, tau_prime))
        if t0 >= T:
            return _skipped("theorem-two", f"horizon {T} shorter than start {t0}")
        ts = np.arange(t0, T + 1)
        rhs = (
            np.exp(-2.0 * alpha * mu * (ts - tau_prime)) * 2.0 * B
            + RECURSION_COEFF * L**2 * alpha * (tau_mix + tau_max) * B / mu
        )
        return _ratio_check("theorem-two", lhs[t0:], rhs, tol, window=tau_prime, t_start=t0)

    if theorem == "three":
        if epsilon is None or abs(epsilon - alpha) > 1e-12 * max(1.0, alpha):
            return _skipped("theorem-three", "bound is stated for epsilon = alpha only")
        limit = mu / (ADAPTIVE_C * L**2 * max(tau_mix, 1))
        if alpha > limit * (1.0 + 1e-9):
            raise StepSizeTooLarge(
                f"alpha={alpha:.3e} exceeds the rule {limit:.3e} for the adaptive bound"
            )
        delays = np.stack([tr.delays for tr in kept]).mean(axis=0)
        prefix_avg = np.cumsum(delays) / np.arange(1, T + 1)
        tau_avg_total = float(prefix_avg[-1])
        t0 = int(max(tau_mix * max(tau_avg_total, 1.0), tau_mix + tau_max))
        if t0 >= T:
            return _skipped("theorem-three", f"horizon {T} shorter than start {t0}")
        beta = L * (alpha + sigma)
        ts = np.arange(t0, T + 1)
        head = ADAPTIVE_HEAD_FACTOR * sigma**2 * np.exp(
            -alpha * mu * ts / (4.0 * (prefix_avg[ts - 1] + 1.0))
        )
        tail = ADAPTIVE_TAIL_COEFF * L**2 * alpha * tau_mix * beta**2 / mu
        return _ratio_check("theorem-three", lhs[t0:], head + tail, tol, t_start=t0)

    raise ValueError(f"theorem must be 'two' or 'three', got {theorem!r}")


def report_to_json(checks: list[BoundCheck]) -> str:
    payload = {
        "checks": [c.to_dict() for c in checks],
        "all_hold": all(c.holds for c in checks if not c.skipped),
    }
    return json.dumps(payload, indent=2)
