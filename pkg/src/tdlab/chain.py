"""Finite Markov reward processes under a fixed policy.

Covers the stationary distribution, geometric mixing estimates, the mixing
sums that feed the bound constants, and seeded trajectory sampling.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
from scipy.sparse.csgraph import connected_components

from tdlab import _kernels
from tdlab.errors import (
    DimensionMismatch,
    InvalidMRP,
    NotAperiodic,
    NotIrreducible,
    SolverFailure,
    TruncationTooSmall,
    ValidationError,
)
from tdlab.rng import generator

ROW_SUM_TOL = 1e-12
_RHO_FLOOR = 1e-12
BALANCE_TOL = 1e-10
# deviations below this are treated as round-off when fitting the geometric constant
_DEVIATION_FLOOR = 1e-13
_SETTLE_CAP = 5000


@dataclass(frozen=True, eq=False)
class MarkovRewardProcess:
    """Transition matrix, per-state reward and discount of a policy-induced chain.

    ``strict=True`` additionally enforces ``|r(s)| <= 1``.
    """

    transition: np.ndarray
    reward: np.ndarray
    discount: float
    strict: bool = False

    def __post_init__(self):
        P = np.array(self.transition, dtype=float)
        r = np.array(self.reward, dtype=float)
        object.__setattr__(self, "transition", P)
        object.__setattr__(self, "reward", r)
        object.__setattr__(self, "discount", float(self.discount))
        for problem in _mrp_violations(P, r, self.discount, self.strict):
            raise InvalidMRP(problem)
        P.setflags(write=False)
        r.setflags(write=False)

    @property
    def n_states(self) -> int:
        return self.transition.shape[0]

    def to_dict(self) -> dict:
        return {
            "transition": self.transition.tolist(),
            "reward": self.reward.tolist(),
            "discount": self.discount,
        }

    @classmethod
    def from_dict(cls, data: dict, strict: bool = False) -> "MarkovRewardProcess":
        missing = [k for k in ("transition", "reward", "discount") if k not in data]
        if missing:
            raise InvalidMRP(f"missing key(s): {', '.join(missing)}")
        return cls(data["transition"], data["reward"], data["discount"], strict=strict)


def _mrp_violations(P, r, beta, strict):
    """Yield human-readable invariant violations, first one first."""
    if P.ndim != 2 or P.shape[0] != P.shape[1] or P.shape[0] == 0:
        yield f"transition must be a non-empty square matrix, got shape {P.shape}"
        return
    if r.shape != (P.shape[0],):
        yield f"reward must have length {P.shape[0]}, got shape {r.shape}"
        return
    if not np.all(np.isfinite(P)):
        yield "transition has non-finite entries"
    if np.any(P < 0):
        i, j = np.argwhere(P < 0)[0]
        yield f"transition[{i}][{j}] = {P[i, j]} is negative"
    bad = np.flatnonzero(np.abs(P.sum(axis=1) - 1.0) > ROW_SUM_TOL)
    if bad.size:
        i = bad[0]
        yield f"row {i} of transition sums to {P[i].sum()!r}, not 1"
    if not np.all(np.isfinite(r)):
        yield "reward has non-finite entries"
    if strict and np.any(np.abs(r) > 1):
        i = int(np.argmax(np.abs(r)))
        yield f"reward[{i}] = {r[i]} violates |r| <= 1 (strict mode)"
    if not 0.0 < beta < 1.0:
        yield f"discount must lie in (0, 1), got {beta}"


def load_mrp(path, strict: bool = False) -> MarkovRewardProcess:
    with open(path) as fh:
        return MarkovRewardProcess.from_dict(json.load(fh), strict=strict)


def save_mrp(mrp: MarkovRewardProcess, path) -> None:
    Path(path).write_text(json.dumps(mrp.to_dict(), indent=2) + "\n")


@dataclass(frozen=True, eq=False)
class StationaryDistribution:
    psi: np.ndarray

    @property
    def as_matrix(self) -> np.ndarray:
        return np.diag(self.psi)


def is_irreducible(transition: np.ndarray) -> bool:
    n_comp, _ = connected_components(np.asarray(transition) > 0, directed=True, connection="strong")
    return n_comp == 1


def stationary_distribution(mrp: MarkovRewardProcess) -> StationaryDistribution:
    """Solve psi^T P = psi^T with sum(psi) = 1 as one overdetermined linear system."""
    P = mrp.transition
    S = mrp.n_states
    if not is_irreducible(P):
        raise NotIrreducible("transition graph is not strongly connected")
    lhs = np.vstack([P.T - np.eye(S), np.ones((1, S))])
    rhs = np.zeros(S + 1)
    rhs[-1] = 1.0
    psi, _, rank, _ = np.linalg.lstsq(lhs, rhs, rcond=None)
    if rank < S:
        raise SolverFailure(f"balance equations have rank {rank} < {S}")
    psi = np.clip(psi, 0.0, None)
    psi /= psi.sum()
    residual = np.max(np.abs(psi @ P - psi))
    if residual > BALANCE_TOL:
        raise SolverFailure(f"stationary residual {residual:.3e} exceeds {BALANCE_TOL}")
    psi.setflags(write=False)
    return StationaryDistribution(psi)


@dataclass(frozen=True, eq=False)
class MixingProfile:
    rho: float
    c_geo: float
    b_prime_per_state: np.ndarray
    truncation_horizon: int
    partial_sums: np.ndarray
    tail_bound: float
    diagonalizable: bool = True

    @property
    def b_prime_uniform(self) -> float:
        return float(np.max(self.b_prime_per_state))


def _second_eigen_modulus(P):
    vals, vecs = np.linalg.eig(P)
    order = np.argsort(-np.abs(vals))
    vals = vals[order]
    # drop the Perron eigenvalue (the one closest to 1), keep the largest remaining modulus
    k = int(np.argmin(np.abs(vals - 1.0)))
    rest = np.delete(vals, k)
    rho = float(np.max(np.abs(rest))) if rest.size else 0.0
    if rho < _RHO_FLOOR:
        rho = 0.0
    diagonalizable = np.linalg.cond(vecs) < 1e10
    return rho, diagonalizable


def _deviations(P, psi, horizon):
    """max_s |P^t(s,.) - psi|_inf for t = 0..horizon (inclusive)."""
    S = P.shape[0]
    out = np.empty(horizon + 1)
    Pt = np.eye(S)
    for t in range(horizon + 1):
        out[t] = np.max(np.abs(Pt - psi))
        Pt = Pt @ P
    return out


def _settled_deviations(P, psi, horizon):
    """Deviations up to ``horizon`` and on, until they sink below round-off."""
    devs = list(_deviations(P, psi, horizon))
    Pt = np.linalg.matrix_power(P, horizon + 1)
    t = horizon + 1
    while devs[-1] > _DEVIATION_FLOOR and t <= _SETTLE_CAP:
        devs.append(float(np.max(np.abs(Pt - psi))))
        Pt = Pt @ P
        t += 1
    return np.array(devs)


def _fit_decay_rate(devs):
    t = np.flatnonzero(devs > _DEVIATION_FLOOR)
    t = t[t >= 1]
    if t.size < 2:
        return 0.0
    slope = np.polyfit(t, np.log(devs[t]), 1)[0]
    return float(min(np.exp(slope), 1.0))


def mixing_profile(
    mrp: MarkovRewardProcess,
    truncation: int,
    tolerance: float = 1e-6,
    features=None,
    weight: Callable[[int], float] | None = None,
) -> MixingProfile:
    """Geometric mixing rate and per-state mixing sums B'(s).

    ``B'(s)`` is the largest of three sums over tau < ``truncation``:
    ``||E[r phi(s_tau) | s_0 = s] - E_psi[r phi]||`` and the matrix analogues
    for ``phi(s_tau) phi(s_{tau+m})^T`` with ``m`` in {0, 1} (spectral norm),
    computed exactly from powers of P. A geometric tail bound
    ``c_geo * rho**T / (1 - rho)`` scaled by the largest per-state gain is
    added. ``features`` defaults to the tabular identity. ``weight(tau)``
    multiplies the tau-th term, for the step-size weighted variant; the tail
    bound is not adjusted for it.

    ``c_geo`` is fitted over ``t <= truncation`` and onward until the
    deviations reach round-off, so it is a property of the chain rather
    than of the horizon.
    """
    truncation = int(truncation)
    P = mrp.transition
    S = mrp.n_states
    phi = np.eye(S) if features is None else np.asarray(getattr(features, "phi", features), dtype=float)
    if phi.shape[0] != S:
        raise DimensionMismatch(f"features have {phi.shape[0]} rows, chain has {S} states")
    psi = stationary_distribution(mrp).psi

    rho, diagonalizable = _second_eigen_modulus(P)
    devs = _settled_deviations(P, psi, max(truncation, 0))
    if not diagonalizable:
        rho = max(rho, _fit_decay_rate(devs))
    if rho >= 1.0 - 1e-12:
        raise NotAperiodic(f"second eigenvalue modulus {rho:.6g} is 1; the chain is periodic")

    keep = devs > _DEVIATION_FLOOR
    keep[0] = True
    t = np.arange(devs.size)
    with np.errstate(divide="ignore", over="ignore"):
        scale = np.where(t == 0, 1.0, np.power(rho, t.astype(float)))
        ratios = np.where(keep & (scale > 0), devs / np.where(scale > 0, scale, 1.0), 0.0)
    c_geo = float(np.max(ratios))

    # per-state gains: rows G_r = r(x) phi(x), G_m(x) = phi(x) (P^m phi)(x)^T
    g_r = mrp.reward[:, None] * phi
    next_phi = P @ phi
    outer0 = np.einsum("xi,xj->xij", phi, phi)
    outer1 = np.einsum("xi,xj->xij", phi, next_phi)
    target_r = psi @ g_r
    target0 = np.einsum("x,xij->ij", psi, outer0)
    target1 = np.einsum("x,xij->ij", psi, outer1)

    sums = np.zeros((3, S))
    Pt = np.eye(S)
    for tau in range(truncation):
        w = 1.0 if weight is None else float(weight(tau))
        sums[0] += w * np.linalg.norm(Pt @ g_r - target_r, axis=1)
        sums[1] += w * np.linalg.norm(np.einsum("sx,xij->sij", Pt, outer0) - target0, ord=2, axis=(1, 2))
        sums[2] += w * np.linalg.norm(np.einsum("sx,xij->sij", Pt, outer1) - target1, ord=2, axis=(1, 2))
        Pt = Pt @ P
    partial = sums.max(axis=0)

    gain = max(
        np.linalg.norm(g_r, axis=1).sum(),
        np.linalg.norm(outer0, ord=2, axis=(1, 2)).sum(),
        np.linalg.norm(outer1, ord=2, axis=(1, 2)).sum(),
    )
    geo = 1.0 if truncation == 0 else rho**truncation
    tail = float(c_geo * geo / (1.0 - rho) * gain)
    if tail > tolerance * float(np.max(partial)):
        raise TruncationTooSmall(
            f"tail bound {tail:.3e} exceeds {tolerance:g} x partial sum {float(np.max(partial)):.3e}"
            f" at truncation {truncation}"
        )
    b_prime = partial + tail
    b_prime.setflags(write=False)
    return MixingProfile(
        rho=rho,
        c_geo=c_geo,
        b_prime_per_state=b_prime,
        truncation_horizon=truncation,
        partial_sums=partial,
        tail_bound=tail,
        diagonalizable=bool(diagonalizable),
    )


@dataclass(frozen=True, eq=False)
class Trajectory:
    states: np.ndarray
    seed: int
    start_state: int = field(default=0)

    def __len__(self):
        return self.states.shape[0]


def cumulative_rows(transition: np.ndarray) -> np.ndarray:
    return np.cumsum(transition, axis=1)


def sample_trajectory(mrp: MarkovRewardProcess, start_state: int, length: int, seed: int) -> Trajectory:
    """Walk ``length`` transitions from ``start_state``; returns ``length + 1`` states."""
    if not 0 <= start_state < mrp.n_states:
        raise ValidationError(f"start_state {start_state} outside [0, {mrp.n_states})")
    if length < 0:
        raise ValidationError("length must be >= 0")
    uniforms = generator(seed).random(length)
    states = _kernels.walk(cumulative_rows(mrp.transition), int(start_state), uniforms)
    states.setflags(write=False)
    return Trajectory(states, int(seed), int(start_state))


def random_mrp(n_states: int, seed: int, discount: float = 0.9) -> MarkovRewardProcess:
    """Random chain: flat-Dirichlet rows and rewards uniform on [0, 1]."""
    if n_states < 2:
        raise ValidationError("n_states must be >= 2")
    rng = generator(seed)
    E = rng.standard_exponential((n_states, n_states))
    P = E / E.sum(axis=1, keepdims=True)
    r = rng.random(n_states)
    return MarkovRewardProcess(P, r, discount)
