"""Finite-state Markov observation chains.

Construction and validation (ergodicity is required: irreducible plus
aperiodic), stationary distribution, path sampling, and two notions of
mixing time: the classic worst-case total-variation time and the
operator-relative time, i.e. the first step after which the conditional
expectation of a noisy operator is within ``alpha * (|theta| + 1)`` of its
stationary mean, uniformly over a theta grid and all start observations.
"""
from __future__ import annotations

import json
import math
from dataclasses import dataclass

import numpy as np

from .errors import CapExceeded, NoConvergence, NonStochasticRow, Periodic, Reducible
from .rng import stream

ROW_SUM_TOL = 1e-12
STATIONARY_TOL = 1e-10


@dataclass(frozen=True)
class MarkovChain:
    """Validated finite ergodic chain with per-transition reward model.

    ``reward_mean[s, s']`` is the expected reward on the transition s -> s';
    sampled rewards add Gaussian noise of std ``reward_noise_std`` truncated
    at five standard deviations so the noisy operator stays bounded.
    """

    P: np.ndarray
    reward_mean: np.ndarray
    reward_noise_std: float

    @property
    def n(self) -> int:
        return self.P.shape[0]

    def max_abs_reward(self) -> float:
        """Largest reward magnitude that can be sampled (mean plus truncation)."""
        return float(np.abs(self.reward_mean).max() + 5.0 * self.reward_noise_std)


@dataclass(frozen=True)
class StationaryDistribution:
    pi: np.ndarray


@dataclass(frozen=True)
class MixingReport:
    """TV mixing times per threshold, spectral rate, and operator mixing per alpha."""

    tv_times: dict[float, int]
    lambda2: float
    tau_mix_operator: dict[float, int]


def _strongly_connected(adj: np.ndarray) -> bool:
    n = adj.shape[0]

    def reachable(mat: np.ndarray) -> np.ndarray:
        seen = np.zeros(n, dtype=bool)
        seen[0] = True
        frontier = [0]
        while frontier:
            nxt = mat[frontier].any(axis=0) & ~seen
            seen |= nxt
            frontier = list(np.nonzero(nxt)[0])
        return seen

    return bool(reachable(adj).all() and reachable(adj.T).all())


def _period(adj: np.ndarray) -> int:
    # gcd of (depth[u] + 1 - depth[v]) over edges u->v, depths from a BFS
    # rooted at state 0; valid once the graph is strongly connected.
    n = adj.shape[0]
    depth = np.full(n, -1, dtype=int)
    depth[0] = 0
    frontier = [0]
    while frontier:
        nxt = []
        for u in frontier:
            for v in np.nonzero(adj[u])[0]:
                if depth[v] < 0:
                    depth[v] = depth[u] + 1
                    nxt.append(v)
        frontier = nxt
    g = 0
    for u in range(n):
        for v in np.nonzero(adj[u])[0]:
            g = math.gcd(g, depth[u] + 1 - depth[v])
    return abs(g)


def build_chain(
    P: np.ndarray,
    reward_mean: np.ndarray | None = None,
    reward_noise_std: float = 0.0,
) -> MarkovChain:
    """Validate and freeze a chain.

    Raises NonStochasticRow, Reducible, or Periodic when the matrix is not
    row-stochastic or the chain is not ergodic.
    """
    P = np.array(P, dtype=float)
    if P.ndim != 2 or P.shape[0] != P.shape[1]:
        raise NonStochasticRow(f"transition matrix must be square, got {P.shape}")
    if (P < 0).any():
        raise NonStochasticRow("transition matrix has negative entries")
    bad = np.nonzero(np.abs(P.sum(axis=1) - 1.0) > ROW_SUM_TOL)[0]
    if bad.size:
        raise NonStochasticRow(f"rows {bad.tolist()} do not sum to 1 within {ROW_SUM_TOL}")
    adj = P > 0.0
    if not _strongly_connected(adj):
        raise Reducible("transition graph is not strongly connected")
    if _period(adj) != 1:
        raise Periodic(f"chain has period {_period(adj)}")
    if reward_mean is None:
        reward_mean = np.zeros_like(P)
    else:
        reward_mean = np.array(reward_mean, dtype=float)
        if reward_mean.shape != P.shape:
            raise NonStochasticRow("reward_mean must match the transition matrix shape")
    if reward_noise_std < 0:
        raise NonStochasticRow("reward_noise_std must be nonnegative")
    P.setflags(write=False)
    reward_mean.setflags(write=False)
    return MarkovChain(P=P, reward_mean=reward_mean, reward_noise_std=float(reward_noise_std))


def stationary(chain: MarkovChain, tol: float = 1e-14, max_iter: int = 500_000) -> StationaryDistribution:
    """Stationary distribution by power iteration (unique by ergodicity)."""
    P = chain.P
    pi = np.full(chain.n, 1.0 / chain.n)
    for _ in range(max_iter):
        nxt = pi @ P
        if np.abs(nxt - pi).sum() < tol:
            pi = nxt
            break
        pi = nxt
    else:
        raise NoConvergence(f"power iteration did not converge within {max_iter} steps")
    pi = pi / pi.sum()
    pi.setflags(write=False)
    return StationaryDistribution(pi=pi)


def second_eigenvalue_modulus(chain: MarkovChain) -> float:
    """Modulus of the second-largest eigenvalue of the transition matrix."""
    mods = np.sort(np.abs(np.linalg.eigvals(chain.P)))
    return float(mods[-2])


def sample_path(chain: MarkovChain, rng: np.random.Generator | int, T: int, s0: int = 0) -> np.ndarray:
    """Sample ``T`` states starting from ``s0`` (the result includes ``s0``).

    Deterministic given the generator state; pass an int to seed a dedicated
    path stream.
    """
    if T < 1:
        raise ValueError("T must be >= 1")
    if not 0 <= s0 < chain.n:
        raise ValueError(f"s0 out of range: {s0}")
    if isinstance(rng, (int, np.integer)):
        rng = stream(int(rng), 0, "path")
    cum = np.cumsum(chain.P, axis=1)
    cum[:, -1] = 1.0  # guard against rounding in the last bin
    u = rng.random(T - 1)
    out = np.empty(T, dtype=np.int64)
    out[0] = s0
    s = s0
    searchsorted = np.searchsorted
    for t in range(T - 1):
        s = searchsorted(cum[s], u[t], side="right")
        out[t + 1] = s
    return out


def sample_rewards(chain: MarkovChain, states: np.ndarray, rng: np.random.Generator) -> np.ndarray:
    """Rewards along a state path: mean per transition plus truncated noise."""
    means = chain.reward_mean[states[:-1], states[1:]]
    if chain.reward_noise_std == 0.0:
        return means.copy()
    cut = 5.0 * chain.reward_noise_std
    noise = np.clip(rng.normal(0.0, chain.reward_noise_std, means.shape), -cut, cut)
    return means + noise


def tv_mixing_time(chain: MarkovChain, eps: float, cap: int = 100_000) -> int:
    """Smallest t with worst-case total variation ``max_i TV(P^t[i], pi) <= eps``.

    Computed with exact matrix powers; the worst-case TV distance is
    nonincreasing in t, so the first crossing is the answer.
    """
    if not 0.0 < eps < 1.0:
        raise ValueError("eps must lie in (0, 1)")
    pi = stationary(chain).pi
    M = np.eye(chain.n)
    for t in range(cap + 1):
        tv = 0.5 * np.abs(M - pi).sum(axis=1).max()
        if tv <= eps:
            return t
        M = M @ chain.P
    raise CapExceeded(f"worst-case TV still above {eps} after {cap} matrix powers")


def default_theta_grid(dim: int, sigma: float, seed: int = 0) -> list[np.ndarray]:
    """Default grid: origin, unit basis vectors, 8 random unit directions at radii {1, sigma, 2 sigma}."""
    rng = stream(seed, 0, "grid")
    grid = [np.zeros(dim)] + [np.eye(dim)[i] for i in range(dim)]
    for _ in range(8):
        v = rng.standard_normal(dim)
        v /= np.linalg.norm(v)
        for r in (1.0, sigma, 2.0 * sigma):
            grid.append(r * v)
    return grid


def operator_mixing_time(
    chain: MarkovChain,
    op,
    alpha: float,
    theta_grid: list[np.ndarray] | None = None,
    cap: int = 50_000,
    grid_seed: int = 0,
) -> int:
    """Smallest tau such that for every theta in the grid and every start
    observation, ``|E[g(theta, o_t) | o_0] - gbar(theta)| <= alpha (|theta| + 1)``
    for all t >= tau.

    Conditional expectations are exact: per-state operator expectations are
    propagated through powers of the transition matrix. The scan stops once a
    total-variation envelope certifies that every later step satisfies the
    threshold; the result is a lower-bound estimate in theta (the grid cannot
    cover all of R^m, but the threshold scales with |theta| + 1, so radial
    sampling covers the growth).
    """
    if alpha <= 0:
        raise ValueError("alpha must be positive")
    if theta_grid is None:
        theta_grid = default_theta_grid(op.dim, op.constants().sigma, seed=grid_seed)
    if not theta_grid:
        raise ValueError("theta grid must be nonempty")
    pi = stationary(chain).pi
    thresholds = [alpha * (np.linalg.norm(th) + 1.0) for th in theta_grid]
    gbars = [op.mean_field(th) for th in theta_grid]
    exps = [op.per_state_expectation(th) for th in theta_grid]
    # spread[k] bounds |U_k[s] - gbar_k| over states; with the anchor rows' TV
    # distance to pi it certifies every remaining deviation.
    spreads = [np.linalg.norm(U - g, axis=1).max() for U, g in zip(exps, gbars)]

    last_violation = -1
    if any(op.initial_deviation(th) > thr for th, thr in zip(theta_grid, thresholds)):
        last_violation = 0

    lag, anchors = op.anchor_distributions()
    W = anchors.copy()
    for t in range(max(1, lag), cap + 1):
        if t - lag > 0:
            W = W @ chain.P
        ok = True
        for U, g, thr in zip(exps, gbars, thresholds):
            dev = np.linalg.norm(W @ U - g, axis=1).max()
            if dev > thr:
                ok = False
        if not ok:
            last_violation = t
            continue
        tv = np.abs(W - pi).sum(axis=1).max() * 0.5
        if all(2.0 * tv * sp <= thr for sp, thr in zip(spreads, thresholds)):
            return last_violation + 1
    raise CapExceeded(f"operator mixing not certified within {cap} steps at alpha={alpha}")


def mixing_report(
    chain: MarkovChain,
    op=None,
    eps_list: tuple[float, ...] = (0.25, 0.1, 0.01),
    alphas: tuple[float, ...] = (1e-1, 1e-2, 1e-3, 1e-4),
    theta_grid: list[np.ndarray] | None = None,
) -> MixingReport:
    tv_times = {eps: tv_mixing_time(chain, eps) for eps in eps_list}
    tau_op: dict[float, int] = {}
    if op is not None:
        for a in alphas:
            tau_op[a] = operator_mixing_time(chain, op, a, theta_grid=theta_grid)
    return MixingReport(
        tv_times=tv_times,
        lambda2=second_eigenvalue_modulus(chain),
        tau_mix_operator=tau_op,
    )


def random_ergodic(
    n: int,
    seed: int,
    sparsity: float = 0.0,
    self_loop: float = 0.0,
    reward_offset: float = 0.0,
    reward_spread: float = 1.0,
    reward_noise_std: float = 0.1,
) -> MarkovChain:
    """Random ergodic chain: Dirichlet rows, optional sparsification and lazy
    self-loop weight, rewards uniform in [offset, offset + spread] per transition."""
    if not 0.0 <= self_loop < 1.0:
        raise ValueError("self_loop must lie in [0, 1)")
    rng = stream(seed, 0, "chain")
    G = rng.gamma(1.0, 1.0, (n, n))
    if sparsity > 0.0:
        keep = rng.random((n, n)) >= sparsity
        G = G * keep
        # a directed ring keeps the graph strongly connected after sparsification
        for i in range(n):
            G[i, (i + 1) % n] = max(G[i, (i + 1) % n], 0.05)
            G[i, i] = max(G[i, i], 0.05)
    Q = G / G.sum(axis=1, keepdims=True)
    P = self_loop * np.eye(n) + (1.0 - self_loop) * Q
    reward_mean = reward_offset + reward_spread * rng.uniform(0.0, 1.0, (n, n))
    return build_chain(P, reward_mean, reward_noise_std)


def chain_from_config(doc: dict) -> MarkovChain:
    """Build a chain from a JSON document: explicit matrices or a named recipe."""
    if "P" in doc:
        return build_chain(
            np.array(doc["P"], dtype=float),
            np.array(doc["reward_mean"], dtype=float) if "reward_mean" in doc else None,
            float(doc.get("reward_noise_std", 0.0)),
        )
    recipe = doc.get("recipe")
    if recipe == "random-ergodic":
        return random_ergodic(
            n=int(doc["n"]),
            seed=int(doc.get("seed", 0)),
            sparsity=float(doc.get("sparsity", 0.0)),
            self_loop=float(doc.get("self_loop", 0.0)),
            reward_offset=float(doc.get("reward_offset", 0.0)),
            reward_spread=float(doc.get("reward_spread", 1.0)),
            reward_noise_std=float(doc.get("reward_noise_std", 0.1)),
        )
    raise ValueError(f"unknown chain recipe: {recipe!r}")


def chain_to_json(chain: MarkovChain) -> str:
    return json.dumps(
        {
            "n": chain.n,
            "P": chain.P.tolist(),
            "reward_mean": chain.reward_mean.tolist(),
            "reward_noise_std": chain.reward_noise_std,
        }
    )
