"""Concrete stochastic-approximation problem instances.

Each instance exposes the noisy operator g(theta, o) evaluated at a sampled
observation, the exact mean field gbar(theta) under the stationary law of
the observation chain, the fixed point theta* solving gbar(theta*) = 0, and
the constants (mu, L, sigma): strong monotonicity of -gbar, the uniform
Lipschitz/growth constant of g, and the scale bound with
|g(theta, o)| <= L (|theta| + sigma).

Instances are immutable after construction and safe to share across runs;
every operation is a pure function of its inputs.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .chain import MarkovChain, sample_path, sample_rewards, stationary
from .errors import (
    DimensionMismatch,
    MonotonicityViolation,
    NoConvergence,
    SingularSystem,
)
from .rng import stream


@dataclass(frozen=True)
class OperatorConstants:
    """Constants of the standing assumptions, as used by step-size rules.

    mu is floored away from L^2 (mu <= L^2 keeps alpha rules below 1/L) and
    sigma is at least max(1, |theta0|, |theta*|) per the usual normalization.
    """

    mu: float
    L: float
    sigma: float
    mu_analytic: float | None = None

    def __post_init__(self):
        if self.mu <= 0:
            raise MonotonicityViolation(f"mu must be positive, got {self.mu}")
        if self.L < 1.0:
            raise ValueError("L is normalized to be >= 1")
        if self.mu > self.L**2 + 1e-12:
            raise ValueError(f"mu={self.mu} exceeds L^2={self.L**2}")
        if self.sigma < 1.0:
            raise ValueError("sigma is normalized to be >= 1")


@dataclass(frozen=True)
class TDObservation:
    reward: float
    s: int
    s_next: int


@dataclass(frozen=True)
class QObservation:
    reward: float
    s: int
    a: int
    s_next: int


@dataclass(frozen=True)
class SgdObservation:
    s: int


class TDProblem:
    """Policy evaluation with linear value approximation.

    g(theta, (r, s, s')) = (r + gamma * phi(s')' theta - phi(s)' theta) phi(s).
    The mean field is affine, gbar(theta) = b - A theta with
    A = Phi' D (I - gamma P) Phi and b = Phi' D rbar, D = diag(pi).
    """

    kind = "td"

    def __init__(self, chain: MarkovChain, Phi: np.ndarray, gamma: float):
        Phi = np.array(Phi, dtype=float)
        if Phi.ndim != 2 or Phi.shape[0] != chain.n:
            raise DimensionMismatch(f"Phi must be ({chain.n}, d), got {Phi.shape}")
        if Phi.shape[1] > chain.n:
            raise DimensionMismatch("d must not exceed the number of states")
        if not 0.0 <= gamma < 1.0:
            raise ValueError("gamma must lie in [0, 1)")
        if np.abs(Phi.T @ Phi - np.eye(Phi.shape[1])).max() > 1e-10:
            raise ValueError("feature columns must be orthonormal")
        Phi.setflags(write=False)
        self.chain = chain
        self.Phi = Phi
        self.gamma = float(gamma)
        self.dim = Phi.shape[1]
        self.pi = stationary(chain).pi
        self.rbar = (chain.P * chain.reward_mean).sum(axis=1)
        DPhi = self.pi[:, None] * Phi
        self.A = DPhi.T @ (Phi - gamma * (chain.P @ Phi))
        self.b = DPhi.T @ self.rbar
        try:
            self._theta_star = np.linalg.solve(self.A, self.b)
        except np.linalg.LinAlgError as exc:
            raise SingularSystem("mean-field matrix A is singular") from exc
        if not np.isfinite(self._theta_star).all():
            raise SingularSystem("mean-field solve produced non-finite values")
        # uniform Lipschitz constant of g in theta: sup over supported (s, s')
        # of |phi(s)| * |gamma phi(s') - phi(s)|
        norms = np.linalg.norm(Phi, axis=1)
        self._L_exact = 0.0
        for s in range(chain.n):
            supported = chain.P[s] > 0
            diff = gamma * Phi[supported] - Phi[s]
            self._L_exact = max(
                self._L_exact, norms[s] * np.linalg.norm(diff, axis=1).max()
            )
        L = max(1.0, self._L_exact)
        sigma = max(
            1.0,
            float(np.linalg.norm(self._theta_star)),
            chain.max_abs_reward() * norms.max() / L,
        )
        mu_analytic = float(np.linalg.eigvalsh(0.5 * (self.A + self.A.T)).min())
        if mu_analytic <= 0:
            raise MonotonicityViolation(
                f"lambda_min(sym(A)) = {mu_analytic} <= 0: instance not strongly monotone"
            )
        self._constants = OperatorConstants(
            mu=mu_analytic, L=L, sigma=sigma, mu_analytic=mu_analytic
        )

    def fixed_point(self) -> np.ndarray:
        return self._theta_star

    def constants(self) -> OperatorConstants:
        return self._constants

    def noisy_update(self, theta: np.ndarray, obs: TDObservation) -> np.ndarray:
        if theta.shape != (self.dim,):
            raise DimensionMismatch(f"theta must have shape ({self.dim},)")
        phi_s = self.Phi[obs.s]
        td = obs.reward + self.gamma * float(self.Phi[obs.s_next] @ theta) - float(phi_s @ theta)
        return td * phi_s

    def mean_field(self, theta: np.ndarray) -> np.ndarray:
        if theta.shape != (self.dim,):
            raise DimensionMismatch(f"theta must have shape ({self.dim},)")
        return self.b - self.A @ theta

    def sample_observations(self, T: int, rng_path, rng_reward):
        s0 = int(rng_path.choice(self.chain.n, p=self.pi))
        states = sample_path(self.chain, rng_path, T + 1, s0)
        rewards = sample_rewards(self.chain, states, rng_reward)
        return states, rewards

    def obs_at(self, states: np.ndarray, rewards: np.ndarray, t: int) -> TDObservation:
        return TDObservation(rewards[t], states[t], states[t + 1])

    def per_state_expectation(self, theta: np.ndarray) -> np.ndarray:
        """U[s] = E[g(theta, o_t) | s_t = s] with the reward at its mean."""
        v = self.Phi @ theta
        td = self.rbar + self.gamma * (self.chain.P @ v) - v
        return self.Phi * td[:, None]

    def anchor_distributions(self):
        # conditioning on o_0 = (r, s_0, s_1) pins the chain at s_1, one step
        # before the state entering o_t; every state is a possible anchor
        return 1, np.eye(self.chain.n)

    def initial_deviation(self, theta: np.ndarray) -> float:
        gbar = self.mean_field(theta)
        v = self.Phi @ theta
        worst = 0.0
        for s in range(self.chain.n):
            supported = self.chain.P[s] > 0
            td = self.chain.reward_mean[s, supported] + self.gamma * v[supported] - v[s]
            g = td[:, None] * self.Phi[s]
            worst = max(worst, float(np.linalg.norm(g - gbar, axis=1).max()))
        return worst

    def enumerate_observations(self, extreme_rewards: bool = False):
        """Pairs (probability, observation) under the stationary law; with
        extreme_rewards the reward takes its truncation endpoints as well."""
        cut = 5.0 * self.chain.reward_noise_std
        offsets = (0.0,) if not extreme_rewards or cut == 0.0 else (-cut, 0.0, cut)
        out = []
        for s in range(self.chain.n):
            for s_next in np.nonzero(self.chain.P[s] > 0)[0]:
                p = self.pi[s] * self.chain.P[s, s_next]
                for off in offsets:
                    r = self.chain.reward_mean[s, s_next] + off
                    out.append((p / len(offsets), TDObservation(r, int(s), int(s_next))))
        return out


class SgdProblem:
    """Markovian SGD on the quadratic f(theta, s) = 0.5 |theta - b_s|^2,
    so g(theta, s) = b_s - theta and theta* is the stationary mean target."""

    kind = "sgd"

    def __init__(self, chain: MarkovChain, targets: np.ndarray):
        targets = np.array(targets, dtype=float)
        if targets.ndim != 2 or targets.shape[0] != chain.n:
            raise DimensionMismatch(f"targets must be ({chain.n}, d), got {targets.shape}")
        if not np.isfinite(targets).all():
            raise ValueError("targets must be finite")
        targets.setflags(write=False)
        self.chain = chain
        self.targets = targets
        self.dim = targets.shape[1]
        self.pi = stationary(chain).pi
        self._theta_star = self.pi @ targets
        sigma = max(
            1.0,
            float(np.linalg.norm(targets, axis=1).max()),
            float(np.linalg.norm(self._theta_star)),
        )
        self._constants = OperatorConstants(mu=1.0, L=1.0, sigma=sigma, mu_analytic=1.0)

    def fixed_point(self) -> np.ndarray:
        return self._theta_star

    def constants(self) -> OperatorConstants:
        return self._constants

    def noisy_update(self, theta: np.ndarray, obs: SgdObservation) -> np.ndarray:
        if theta.shape != (self.dim,):
            raise DimensionMismatch(f"theta must have shape ({self.dim},)")
        return self.targets[obs.s] - theta

    def mean_field(self, theta: np.ndarray) -> np.ndarray:
        if theta.shape != (self.dim,):
            raise DimensionMismatch(f"theta must have shape ({self.dim},)")
        return self._theta_star - theta

    def sample_observations(self, T: int, rng_path, rng_reward):
        del rng_reward  # quadratic targets carry no reward noise
        s0 = int(rng_path.choice(self.chain.n, p=self.pi))
        return sample_path(self.chain, rng_path, T + 1, s0), None

    def obs_at(self, states: np.ndarray, rewards, t: int) -> SgdObservation:
        return SgdObservation(states[t])

    def per_state_expectation(self, theta: np.ndarray) -> np.ndarray:
        return self.targets - theta

    def anchor_distributions(self):
        # o_0 is the state itself: anchors are point masses at time 0
        return 0, np.eye(self.chain.n)

    def initial_deviation(self, theta: np.ndarray) -> float:
        return float(np.linalg.norm(self.targets - self._theta_star, axis=1).max())

    def enumerate_observations(self, extreme_rewards: bool = False):
        del extreme_rewards
        return [(float(self.pi[s]), SgdObservation(s)) for s in range(self.chain.n)]


class QProblem:
    """Q-learning with linear function approximation over an ergodic
    state-action chain induced by a behavior policy.

    g(theta, (r, s, a, s')) = (r + gamma max_a' phi(s', a')' theta
    - phi(s, a)' theta) phi(s, a); ties in the max break toward the lowest
    action index. Strong monotonicity is not guaranteed: instances are gated
    on a numerical audit before theorem-mode use.
    """

    kind = "q"

    def __init__(
        self,
        chain: MarkovChain,
        Phi: np.ndarray,
        gamma: float,
        n_states: int,
        n_actions: int,
    ):
        if chain.n != n_states * n_actions:
            raise DimensionMismatch("chain must be over state-action pairs")
        Phi = np.array(Phi, dtype=float)
        if Phi.shape[0] != chain.n:
            raise DimensionMismatch(f"Phi must be ({chain.n}, d), got {Phi.shape}")
        Phi.setflags(write=False)
        self.chain = chain
        self.Phi = Phi
        self.gamma = float(gamma)
        self.n_states = n_states
        self.n_actions = n_actions
        self.dim = Phi.shape[1]
        self.pi = stationary(chain).pi
        # next-state marginal M[p, s'] and mean reward per (pair, next state)
        P = chain.P
        self._M = P.reshape(chain.n, n_states, n_actions).sum(axis=2)
        R = chain.reward_mean.reshape(chain.n, n_states, n_actions)
        with np.errstate(invalid="ignore"):
            self._R_next = np.where(
                self._M > 0,
                (P.reshape(chain.n, n_states, n_actions) * R).sum(axis=2)
                / np.where(self._M > 0, self._M, 1.0),
                0.0,
            )
        self._theta_star: np.ndarray | None = None
        self._audited: OperatorConstants | None = None
        norms = np.linalg.norm(Phi, axis=1)
        self._L_upper = float(norms.max() * (norms.max() * (1.0 + gamma)))

    def pair_index(self, s: int, a: int) -> int:
        return s * self.n_actions + a

    def noisy_update(self, theta: np.ndarray, obs: QObservation) -> np.ndarray:
        if theta.shape != (self.dim,):
            raise DimensionMismatch(f"theta must have shape ({self.dim},)")
        phi = self.Phi[obs.s * self.n_actions + obs.a]
        base = obs.s_next * self.n_actions
        q_next = self.Phi[base : base + self.n_actions] @ theta
        td = obs.reward + self.gamma * float(q_next.max()) - float(phi @ theta)
        return td * phi

    def per_state_expectation(self, theta: np.ndarray) -> np.ndarray:
        v = self.Phi @ theta
        vmax = v.reshape(self.n_states, self.n_actions).max(axis=1)
        td = (self._M * (self._R_next + self.gamma * vmax)).sum(axis=1) - v
        return self.Phi * td[:, None]

    def mean_field(self, theta: np.ndarray) -> np.ndarray:
        if theta.shape != (self.dim,):
            raise DimensionMismatch(f"theta must have shape ({self.dim},)")
        return self.pi @ self.per_state_expectation(theta)

    def fixed_point(self, tol: float = 1e-12, max_iter: int = 2_000_000) -> np.ndarray:
        """Damped exact mean-field iteration; caches the root."""
        if self._theta_star is not None:
            return self._theta_star
        eta = 0.25 / self._L_upper**2
        theta = np.zeros(self.dim)
        for _ in range(max_iter):
            g = self.mean_field(theta)
            if np.linalg.norm(g) <= tol * max(1.0, np.linalg.norm(theta)):
                break
            theta = theta + eta * g
            if not np.isfinite(theta).all() or np.linalg.norm(theta) > 1e12:
                raise NoConvergence("mean-field iteration diverged")
        else:
            raise NoConvergence(f"mean-field iteration did not reach {tol} in {max_iter} steps")
        self._theta_star = theta
        return theta

    def constants(self) -> OperatorConstants:
        # no analytic route: audited estimates with a safety margin
        # (shrink mu, inflate L) so theorem step-size rules stay conservative
        if self._audited is None:
            self._audited = audit_constants(self)
        a = self._audited
        return OperatorConstants(mu=0.9 * a.mu, L=max(1.0, 1.1 * a.L), sigma=a.sigma)

    def sample_observations(self, T: int, rng_path, rng_reward):
        s0 = int(rng_path.choice(self.chain.n, p=self.pi))
        states = sample_path(self.chain, rng_path, T + 1, s0)
        rewards = sample_rewards(self.chain, states, rng_reward)
        return states, rewards

    def obs_at(self, states: np.ndarray, rewards: np.ndarray, t: int) -> QObservation:
        p, p_next = states[t], states[t + 1]
        return QObservation(
            rewards[t],
            p // self.n_actions,
            p % self.n_actions,
            p_next // self.n_actions,
        )

    def anchor_distributions(self):
        # o_0 reveals s_1 but not a_1: anchors are the behavior-policy rows
        # embedded in the pair chain, one per next state
        V = np.zeros((self.n_states, self.chain.n))
        pair_marg = self.pi.reshape(self.n_states, self.n_actions)
        behavior = pair_marg / pair_marg.sum(axis=1, keepdims=True)
        for s in range(self.n_states):
            V[s, s * self.n_actions : (s + 1) * self.n_actions] = behavior[s]
        return 1, V

    def initial_deviation(self, theta: np.ndarray) -> float:
        gbar = self.mean_field(theta)
        worst = 0.0
        for p in range(self.chain.n):
            s, a = divmod(p, self.n_actions)
            for s_next in np.nonzero(self._M[p] > 0)[0]:
                g = self.noisy_update(
                    theta, QObservation(self._R_next[p, s_next], s, a, int(s_next))
                )
                worst = max(worst, float(np.linalg.norm(g - gbar)))
        return worst

    def enumerate_observations(self, extreme_rewards: bool = False):
        cut = 5.0 * self.chain.reward_noise_std
        offsets = (0.0,) if not extreme_rewards or cut == 0.0 else (-cut, 0.0, cut)
        out = []
        for p in range(self.chain.n):
            s, a = divmod(p, self.n_actions)
            for s_next in np.nonzero(self._M[p] > 0)[0]:
                prob = self.pi[p] * self._M[p, s_next]
                for off in offsets:
                    out.append(
                        (
                            prob / len(offsets),
                            QObservation(self._R_next[p, s_next] + off, s, a, int(s_next)),
                        )
                    )
        return out


def audit_constants(
    op, n_probe: int = 200, radius: float | None = None, seed: int = 0
) -> OperatorConstants:
    """Empirical estimates of (mu, L, sigma) from probe evaluations.

    mu_hat is the worst directional monotonicity ratio of the mean field over
    probe pairs; probe directions include the eigenvectors of the symmetrized
    finite-difference Jacobian, so affine mean fields are resolved to within
    float error. L_hat is the largest operator-difference ratio over
    enumerated observations; sigma_hat is the smallest scale that keeps
    |g(theta, o)| <= L_hat (|theta| + sigma) over all probes and observations,
    floored at max(1, |theta*|).

    Raises MonotonicityViolation when mu_hat <= 0; such instances are
    rejected for theorem-mode runs.
    """
    if n_probe < 100:
        raise ValueError("n_probe must be at least 100")
    rng = stream(seed, 0, "probe")
    d = op.dim

    # pairwise monotonicity around random base points first: a violation is
    # detectable even when the fixed point is unavailable
    base_points = [np.zeros(d)] + [rng.standard_normal(d) for _ in range(3)]
    delta = 1e-6
    eig_dirs: list[np.ndarray] = []
    mu_hat = np.inf
    for base in base_points:
        g0 = op.mean_field(base)
        J = np.empty((d, d))
        for i in range(d):
            e = np.zeros(d)
            e[i] = delta
            J[:, i] = (op.mean_field(base + e) - g0) / delta
        sym = 0.5 * (J + J.T)
        vals, vecs = np.linalg.eigh(-sym)
        mu_hat = min(mu_hat, float(vals.min()))
        eig_dirs.extend(vecs[:, k] for k in range(d))
    if mu_hat <= 0:
        raise MonotonicityViolation(f"directional monotonicity {mu_hat} <= 0")

    theta_star = op.fixed_point()
    g_star = op.mean_field(theta_star)
    if radius is None:
        radius = max(1.0, 2.0 * float(np.linalg.norm(theta_star)))
    dirs = rng.standard_normal((n_probe, d))
    dirs /= np.linalg.norm(dirs, axis=1, keepdims=True)
    radii = rng.uniform(0.05 * radius, radius, n_probe)
    probes = [theta_star + r * u for r, u in zip(radii, dirs)]
    probes += [theta_star + r * u for u in eig_dirs for r in (1.0, radius)]
    for theta in probes:
        diff = theta - theta_star
        num = -float(diff @ (op.mean_field(theta) - g_star))
        mu_hat = min(mu_hat, num / float(diff @ diff))
    if mu_hat <= 0:
        raise MonotonicityViolation(f"audited mu {mu_hat} <= 0")

    observations = op.enumerate_observations(extreme_rewards=True)
    L_hat = 0.0
    lip_bases = [theta_star, probes[0], probes[1]]
    for _, obs in observations:
        for base in lip_bases:
            g0 = op.noisy_update(base, obs)
            G = np.empty((d, d))
            for i in range(d):
                e = np.zeros(d)
                e[i] = delta
                G[:, i] = (op.noisy_update(base + e, obs) - g0) / delta
            L_hat = max(L_hat, float(np.linalg.svd(G, compute_uv=False)[0]))
    pair_idx = rng.integers(0, len(probes), (30, 2))
    for i, j in pair_idx:
        if i == j:
            continue
        dtheta = probes[i] - probes[j]
        nd = float(np.linalg.norm(dtheta))
        if nd < 1e-12:
            continue
        for _, obs in observations[:: max(1, len(observations) // 20)]:
            dg = op.noisy_update(probes[i], obs) - op.noisy_update(probes[j], obs)
            L_hat = max(L_hat, float(np.linalg.norm(dg)) / nd)

    sigma_floor = max(1.0, float(np.linalg.norm(theta_star)))
    sigma_hat = sigma_floor
    sigma_probes = [np.zeros(d), theta_star] + probes[:50]
    for theta in sigma_probes:
        nt = float(np.linalg.norm(theta))
        for _, obs in observations:
            need = float(np.linalg.norm(op.noisy_update(theta, obs))) / L_hat - nt
            sigma_hat = max(sigma_hat, need)

    mu_an = getattr(op, "_constants", None)
    return OperatorConstants(
        mu=min(mu_hat, L_hat**2),
        L=max(1.0, L_hat),
        sigma=sigma_hat,
        mu_analytic=mu_an.mu_analytic if mu_an is not None else None,
    )


def orthonormal_features(
    n: int, d: int, seed: int, include_constant: bool = True
) -> np.ndarray:
    """Orthonormal feature matrix from the QR of a seeded Gaussian block.

    With include_constant the first basis direction spans the constant
    vector, so state-independent reward offsets are exactly representable.
    """
    rng = stream(seed, 0, "problem")
    G = rng.standard_normal((n, d))
    if include_constant:
        G[:, 0] = 1.0
    Q = np.linalg.qr(G)[0]
    # fix the sign convention so features are reproducible across BLAS builds
    signs = np.sign(Q[0])
    signs[signs == 0] = 1.0
    return Q * signs


def make_td(
    chain: MarkovChain, d: int, gamma: float, seed: int = 0, include_constant: bool = True
) -> TDProblem:
    return TDProblem(chain, orthonormal_features(chain.n, d, seed, include_constant), gamma)


def make_sgd(
    chain: MarkovChain, d: int, seed: int = 0, spread: float = 1.0, offset: float = 0.0
) -> SgdProblem:
    """Targets b_s = offset * 1/sqrt(d) + N(0, spread^2) per coordinate; the
    offset moves theta* away from the zero start without inflating the
    across-state target variance that sets the noise floor."""
    rng = stream(seed, 0, "problem")
    base = offset * np.ones(d) / math.sqrt(d)
    return SgdProblem(chain, base + rng.normal(0.0, spread, (chain.n, d)))


def make_q(
    env_P: np.ndarray,
    env_reward_mean: np.ndarray,
    behavior: np.ndarray,
    Phi: np.ndarray,
    gamma: float,
    reward_noise_std: float = 0.0,
) -> QProblem:
    """Assemble the state-action pair chain from an MDP and a behavior policy.

    env_P has shape (S, A, S); behavior has shape (S, A) with every action
    taken with positive probability.
    """
    from .chain import build_chain

    env_P = np.asarray(env_P, dtype=float)
    behavior = np.asarray(behavior, dtype=float)
    S, A = behavior.shape
    if (behavior <= 0).any():
        raise ValueError("behavior policy must give every action positive probability")
    P_pair = np.zeros((S * A, S * A))
    R_pair = np.zeros((S * A, S * A))
    for s in range(S):
        for a in range(A):
            p = s * A + a
            for s2 in range(S):
                P_pair[p, s2 * A : (s2 + 1) * A] = env_P[s, a, s2] * behavior[s2]
                R_pair[p, s2 * A : (s2 + 1) * A] = env_reward_mean[s, a, s2]
    pair_chain = build_chain(P_pair, R_pair, reward_noise_std)
    return QProblem(pair_chain, Phi, gamma, S, A)


def problem_from_config(doc: dict, chain: MarkovChain) -> TDProblem | SgdProblem | QProblem:
    kind = doc.get("kind")
    if kind == "td":
        return make_td(
            chain,
            d=int(doc["d"]),
            gamma=float(doc["gamma"]),
            seed=int(doc.get("seed", 0)),
            include_constant=bool(doc.get("include_constant", True)),
        )
    if kind == "sgd":
        return make_sgd(
            chain,
            d=int(doc.get("d", 1)),
            seed=int(doc.get("seed", 0)),
            spread=float(doc.get("target_spread", 1.0)),
            offset=float(doc.get("target_offset", 0.0)),
        )
    if kind == "q":
        raise ValueError("q problems are built programmatically via make_q")
    raise ValueError(f"unknown problem kind: {kind!r}")
