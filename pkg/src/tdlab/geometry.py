"""Feature geometry and exact solutions of the projected Bellman equation."""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from tdlab.chain import MarkovRewardProcess, StationaryDistribution, stationary_distribution
from tdlab.errors import (
    DimensionMismatch,
    MaxIterExceeded,
    RankDeficientFeatures,
    SingularSystem,
)

FIXED_POINT_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class FeatureMap:
    """Feature matrix with one row ``phi(s)`` per state."""

    phi: np.ndarray
    strict: bool = False

    def __post_init__(self):
        phi = np.array(self.phi, dtype=float)
        if phi.ndim == 1:
            phi = phi[:, None]
        if phi.ndim != 2 or phi.size == 0:
            raise DimensionMismatch(f"features must be a non-empty 2-d array, got shape {phi.shape}")
        if not np.all(np.isfinite(phi)):
            raise RankDeficientFeatures("features contain non-finite entries")
        rank = np.linalg.matrix_rank(phi)
        if rank < phi.shape[1]:
            raise RankDeficientFeatures(f"feature matrix has rank {rank} < {phi.shape[1]} columns")
        if self.strict:
            norms = np.linalg.norm(phi, axis=1)
            if np.any(norms > 1.0 + 1e-12):
                i = int(np.argmax(norms))
                raise RankDeficientFeatures(
                    f"||phi({i})|| = {norms[i]:.6g} exceeds 1 (strict mode)"
                )
        phi.setflags(write=False)
        object.__setattr__(self, "phi", phi)

    @property
    def d(self) -> int:
        return self.phi.shape[1]

    @property
    def n_states(self) -> int:
        return self.phi.shape[0]

    @classmethod
    def identity(cls, n_states: int) -> "FeatureMap":
        return cls(np.eye(n_states))

    def assumption_warnings(self) -> list[str]:
        norms = np.linalg.norm(self.phi, axis=1)
        if np.any(norms > 1.0 + 1e-12):
            return [f"feature norms reach {norms.max():.6g} > 1 (bounded-feature assumption)"]
        return []

    def normalized(self) -> "FeatureMap":
        """Rows rescaled by a common factor so the largest has unit norm."""
        top = np.linalg.norm(self.phi, axis=1).max()
        return FeatureMap(self.phi / top, strict=self.strict)


def load_features(value, n_states: int | None = None) -> FeatureMap:
    """Parse a feature spec: a JSON path, a list of rows, or ``"identity"``."""
    if isinstance(value, str) and value != "identity":
        with open(value) as fh:
            value = json.load(fh)
    if value == "identity":
        if n_states is None:
            raise DimensionMismatch("'identity' features need the number of states")
        return FeatureMap.identity(n_states)
    return FeatureMap(value)


def _weights(psi) -> np.ndarray:
    if isinstance(psi, StationaryDistribution):
        return psi.psi
    return np.asarray(psi, dtype=float)


def _check_features(mrp: MarkovRewardProcess, features: FeatureMap):
    if features.n_states != mrp.n_states:
        raise DimensionMismatch(f"features have {features.n_states} rows, chain has {mrp.n_states} states")


def psi_norm(v, psi) -> float:
    """Stationary-weighted Euclidean norm sqrt(sum_s psi_s v_s^2)."""
    v = np.asarray(v, dtype=float)
    w = _weights(psi)
    if v.shape != w.shape:
        raise DimensionMismatch(f"vector shape {v.shape} vs distribution shape {w.shape}")
    return float(np.sqrt(np.dot(w, v * v)))


def bellman_apply(mrp: MarkovRewardProcess, v) -> np.ndarray:
    v = np.asarray(v, dtype=float)
    if v.shape != (mrp.n_states,):
        raise DimensionMismatch(f"value vector shape {v.shape}, expected ({mrp.n_states},)")
    return mrp.reward + mrp.discount * (mrp.transition @ v)


def project(v, features: FeatureMap, psi) -> np.ndarray:
    """Psi-orthogonal projection onto the column span of the features."""
    v = np.asarray(v, dtype=float)
    w = _weights(psi)
    phi = features.phi
    if v.shape != (phi.shape[0],) or w.shape != v.shape:
        raise DimensionMismatch("vector, features and distribution disagree on the number of states")
    gram = phi.T @ (w[:, None] * phi)
    coef = np.linalg.solve(gram, phi.T @ (w * v))
    return phi @ coef


def value_function(mrp: MarkovRewardProcess) -> np.ndarray:
    return np.linalg.solve(np.eye(mrp.n_states) - mrp.discount * mrp.transition, mrp.reward)


@dataclass(frozen=True, eq=False)
class ProjectedSystem:
    a_matrix: np.ndarray
    b_vector: np.ndarray
    theta_star: np.ndarray
    mu: float
    v_pi: np.ndarray
    psi: np.ndarray
    fixed_point_residual: float
    warnings: tuple = ()

    @property
    def d(self) -> int:
        return self.theta_star.shape[0]

    def expected_increment(self, theta) -> np.ndarray:
        """b - A theta."""
        return self.b_vector - self.a_matrix @ np.asarray(theta, dtype=float)


def build_system(mrp: MarkovRewardProcess, features: FeatureMap, psi=None) -> ProjectedSystem:
    """Assemble A = Phi^T Psi (I - beta P) Phi and b = Phi^T Psi r, and solve for theta*."""
    _check_features(mrp, features)
    w = stationary_distribution(mrp).psi if psi is None else _weights(psi)
    if w.shape != (mrp.n_states,):
        raise DimensionMismatch("stationary distribution does not match the chain")
    phi = features.phi
    beta = mrp.discount
    weighted = w[:, None] * phi
    gram = phi.T @ weighted
    mu = float(np.linalg.eigvalsh(gram)[0])
    if mu <= 1e-12:
        raise RankDeficientFeatures(f"smallest eigenvalue of Phi^T Psi Phi is {mu:.3e}")
    A = weighted.T @ (phi - beta * (mrp.transition @ phi))
    b = weighted.T @ mrp.reward
    if np.linalg.cond(A) > 1e12:
        raise SingularSystem(f"A is numerically singular (condition number {np.linalg.cond(A):.3e})")
    theta_star = np.linalg.solve(A, b)
    v_pi = value_function(mrp)

    fitted = phi @ theta_star
    residual = psi_norm(fitted - project(bellman_apply(mrp, fitted), features, w), w)
    warnings = tuple(features.assumption_warnings())
    if np.any(np.abs(mrp.reward) > 1):
        warnings += (f"rewards reach {np.abs(mrp.reward).max():.6g} in magnitude > 1 (bounded-reward assumption)",)
    for arr in (A, b, theta_star, v_pi):
        arr.setflags(write=False)
    return ProjectedSystem(A, b, theta_star, mu, v_pi, w, residual, warnings)


def stationary_expected_increment(mrp: MarkovRewardProcess, features: FeatureMap, psi, theta) -> np.ndarray:
    """E[f_X(theta)] with s ~ psi and s' ~ P(s, .), summed over every (s, s') pair.

    Enumerates transitions directly; it does not go through A and b.
    """
    _check_features(mrp, features)
    w = _weights(psi)
    phi = features.phi
    theta = np.asarray(theta, dtype=float)
    v = phi @ theta
    # td_error[s, s'] = r(s) + beta v(s') - v(s)
    td_error = mrp.reward[:, None] + mrp.discount * v[None, :] - v[:, None]
    joint = w[:, None] * mrp.transition
    per_state = (joint * td_error).sum(axis=1)
    return phi.T @ per_state


def projected_value_iteration(
    mrp: MarkovRewardProcess,
    features: FeatureMap,
    psi=None,
    tol: float = 1e-10,
    max_iter: int = 100_000,
    theta0=None,
) -> np.ndarray:
    """Iterate Phi theta <- Pi T(Phi theta) to its fixed point.

    Stops once the a-posteriori contraction bound guarantees
    ``||theta_k - theta*||_2 <= tol``.
    """
    _check_features(mrp, features)
    w = stationary_distribution(mrp).psi if psi is None else _weights(psi)
    phi = features.phi
    beta = mrp.discount
    gram = phi.T @ (w[:, None] * phi)
    mu = float(np.linalg.eigvalsh(gram)[0])
    if mu <= 1e-12:
        raise RankDeficientFeatures(f"smallest eigenvalue of Phi^T Psi Phi is {mu:.3e}")
    solve = np.linalg.inv(gram) @ (w[:, None] * phi).T
    base = solve @ mrp.reward
    step = beta * solve @ (mrp.transition @ phi)
    theta = np.zeros(phi.shape[1]) if theta0 is None else np.array(theta0, dtype=float)
    # ||Phi x||_psi >= sqrt(mu) ||x||, and the map contracts by beta in the psi-norm
    factor = beta / ((1.0 - beta) * np.sqrt(mu))
    for _ in range(max_iter):
        nxt = base + step @ theta
        diff = phi @ (nxt - theta)
        theta = nxt
        if factor * np.sqrt(np.dot(w, diff * diff)) <= tol:
            return theta
    raise MaxIterExceeded(f"no convergence to tol={tol:g} within {max_iter} iterations")
