"""Ensemble statistics, the weighted output iterate, and rate fitting."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .engine import RunTrace
from .errors import AllDiverged, MissingIterates, WindowTooSmall
from .rng import stream


@dataclass(frozen=True)
class EnsembleResult:
    """Pointwise mean squared error over seeds with a 95% normal-approximation
    half width; diverged runs are excluded and counted, never averaged."""

    mean_sq_err: np.ndarray
    ci_half_width: np.ndarray | None
    n_seeds: int
    diverged_count: int


def ensemble_mse(traces: list[RunTrace]) -> EnsembleResult:
    if not traces:
        raise ValueError("need at least one trace")
    lengths = {len(tr.sq_err) for tr in traces}
    if len(lengths) != 1:
        raise ValueError(f"traces have unequal lengths: {sorted(lengths)}")
    kept = [tr for tr in traces if not tr.diverged]
    if not kept:
        raise AllDiverged(f"all {len(traces)} runs diverged")
    stacked = np.stack([tr.sq_err for tr in kept])
    mean = stacked.mean(axis=0)
    ci = None
    if len(kept) >= 2:
        ci = 1.96 * stacked.std(axis=0, ddof=1) / math.sqrt(len(kept))
    return EnsembleResult(
        mean_sq_err=mean,
        ci_half_width=ci,
        n_seeds=len(kept),
        diverged_count=len(traces) - len(kept),
    )


@dataclass(frozen=True)
class WeightScheme:
    """Geometric output-iterate weights w_t = (1 - 0.5 alpha mu)^-(t+1).

    Raw weights overflow for large alpha mu T, so sampling works in log space
    (max-shifted exact categorical); probabilities are renormalized with
    compensated summation.
    """

    alpha: float
    mu: float
    T: int

    def __post_init__(self):
        if not 0.0 < self.alpha * self.mu < 2.0:
            raise ValueError("weights need 0 < alpha mu < 2")
        if self.T < 0:
            raise ValueError("T must be nonnegative")

    @property
    def log_w(self) -> np.ndarray:
        base = -math.log1p(-0.5 * self.alpha * self.mu)  # log 1/(1 - 0.5 alpha mu)
        return base * np.arange(1, self.T + 2)

    @property
    def w(self) -> np.ndarray:
        with np.errstate(over="ignore"):
            return np.exp(self.log_w)

    @property
    def W_T(self) -> float:
        return math.fsum(self.w)

    def probabilities(self) -> np.ndarray:
        lw = self.log_w
        p = np.exp(lw - lw.max())
        p /= math.fsum(p)
        return p


def select_weighted_iterate(
    trace: RunTrace, alpha: float, mu: float, rng: np.random.Generator | int
) -> tuple[int, np.ndarray]:
    """Draw index t with probability w_t / W_T and return (t, theta_t)."""
    if trace.iterates is None:
        raise MissingIterates("run was not configured with record_iterates")
    if isinstance(rng, (int, np.integer)):
        rng = stream(int(rng), 0, "select")
    scheme = WeightScheme(alpha=alpha, mu=mu, T=len(trace.iterates) - 1)
    idx = int(rng.choice(len(trace.iterates), p=scheme.probabilities()))
    return idx, trace.iterates[idx]


@dataclass(frozen=True)
class RateFit:
    """Exponential decay fit y_t ~ a exp(-rate t) + floor.

    The floor is the tail mean; the line is fit on log(y - floor) over the
    points still at least ``window_threshold`` floors above zero, which keeps
    the floor-subtraction bias out of the slope.
    """

    rate: float
    floor: float
    fit_window: tuple[int, int]
    r_squared: float
    n_points: int


def fit_rate(
    series: np.ndarray,
    floor_fraction: float = 0.1,
    window_threshold: float = 3.0,
    min_points: int = 10,
) -> RateFit:
    y = np.asarray(series, dtype=float)
    if y.ndim != 1 or len(y) < 50:
        raise ValueError("need a 1-d series of at least 50 points")
    tail = max(1, int(round(floor_fraction * len(y))))
    floor = float(y[-tail:].mean())
    resid = y - floor * (1.0 - 1e-6)
    mask = (y >= window_threshold * floor) & (resid > 0)
    # the fit window is the contiguous run above the threshold: once the
    # series first dips under it, later excursions are floor noise, not decay
    below = np.nonzero(~mask)[0]
    if below.size:
        mask[below[0] :] = False
    idx = np.nonzero(mask)[0]
    if len(idx) < min_points:
        raise WindowTooSmall(
            f"only {len(idx)} points above {window_threshold}x the floor; rate not resolvable"
        )
    t = idx.astype(float)
    logy = np.log(resid[idx])
    slope, intercept = np.polyfit(t, logy, 1)
    pred = slope * t + intercept
    ss_res = float(((logy - pred) ** 2).sum())
    ss_tot = float(((logy - logy.mean()) ** 2).sum())
    r2 = 1.0 if ss_tot == 0.0 else 1.0 - ss_res / ss_tot
    return RateFit(
        rate=max(0.0, -float(slope)),
        floor=floor,
        fit_window=(int(idx[0]), int(idx[-1])),
        r_squared=r2,
        n_points=len(idx),
    )


def update_count_check(mask: np.ndarray, tau_avg: float, T: int | None = None) -> bool:
    """True iff the number of fired updates is at least T / (4 tau_avg + 4)."""
    mask = np.asarray(mask)
    if T is None:
        T = len(mask)
    return int(mask.sum()) >= T / (4.0 * tau_avg + 4.0)


def update_fraction(traces: list[RunTrace]) -> float:
    """Mean fraction of steps that fired an update, over non-diverged runs."""
    kept = [tr for tr in traces if not tr.diverged]
    if not kept:
        raise AllDiverged("all runs diverged")
    return float(np.mean([tr.update_mask.mean() for tr in kept]))
