"""Online estimators: TD(0), iterate-averaged TD(0) and centered TD (CTD).

The step functions (``td_step``, ``ctd_step``, ``ctd_epoch_transition``) are
the readable definition of each algorithm. ``run_estimator`` drives whole
trajectories through compiled kernels that perform the same arithmetic; pass
``backend="reference"`` to drive the step functions instead.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Literal

import numpy as np

from tdlab import _kernels
from tdlab.chain import MarkovRewardProcess, cumulative_rows
from tdlab.errors import (
    DimensionMismatch,
    EpochBufferIncomplete,
    NonFiniteIterate,
    ValidationError,
)
from tdlab.geometry import FeatureMap, ProjectedSystem, build_system
from tdlab.rng import generator

ALGORITHMS = ("td0", "td0_avg", "ctd")


@dataclass(frozen=True)
class StepSchedule:
    """Step-size sequence gamma_n, indexed from n = 0.

    inverse_linear: c0 * c / (c + n)
    inverse_power:  c0 * (c / (c + n)) ** alpha, alpha in (1/2, 1)
    constant:       gamma_const
    """

    kind: Literal["inverse_linear", "inverse_power", "constant"]
    c0: float = 1.0
    c: float = 1.0
    alpha: float = 1.0
    gamma_const: float = 0.0

    def __post_init__(self):
        if self.kind == "constant":
            if not self.gamma_const > 0:
                raise ValidationError("constant step must be > 0")
        elif self.kind in ("inverse_linear", "inverse_power"):
            if not (self.c0 > 0 and self.c > 0):
                raise ValidationError("c0 and c must be > 0")
            if self.kind == "inverse_power" and not 0.5 < self.alpha < 1.0:
                raise ValidationError(f"alpha must lie in (1/2, 1), got {self.alpha}")
        else:
            raise ValidationError(f"unknown schedule kind {self.kind!r}")

    @classmethod
    def inverse_linear(cls, c0: float, c: float) -> "StepSchedule":
        return cls("inverse_linear", c0=c0, c=c)

    @classmethod
    def inverse_power(cls, c0: float, c: float, alpha: float) -> "StepSchedule":
        return cls("inverse_power", c0=c0, c=c, alpha=alpha)

    @classmethod
    def constant(cls, gamma: float) -> "StepSchedule":
        return cls("constant", gamma_const=gamma)

    def __call__(self, n: int) -> float:
        return float(self.values(np.array([n]))[0])

    def values(self, n) -> np.ndarray:
        n = np.asarray(n, dtype=float)
        if self.kind == "constant":
            return np.full(n.shape, self.gamma_const)
        if self.kind == "inverse_linear":
            return self.c0 * self.c / (self.c + n)
        return self.c0 * (self.c / (self.c + n)) ** self.alpha

    def first(self, count: int) -> np.ndarray:
        return self.values(np.arange(count))


def td_increment(mrp: MarkovRewardProcess, features: FeatureMap, s: int, s_next: int, theta) -> np.ndarray:
    """f_X(theta) = (r(s) + beta theta.phi(s') - theta.phi(s)) phi(s) for X = (s, s')."""
    theta = np.asarray(theta, dtype=float)
    phi = features.phi
    if theta.shape != (phi.shape[1],):
        raise DimensionMismatch(f"theta has shape {theta.shape}, features have d={phi.shape[1]}")
    delta = mrp.reward[s] + mrp.discount * (phi[s_next] @ theta) - phi[s] @ theta
    return delta * phi[s]


@dataclass(frozen=True, eq=False)
class TdState:
    theta: np.ndarray
    theta_bar: np.ndarray
    n: int = 0

    @classmethod
    def start(cls, theta0) -> "TdState":
        theta0 = np.array(theta0, dtype=float)
        return cls(theta0, np.zeros_like(theta0), 0)


def td_step(state: TdState, schedule: StepSchedule, increment) -> TdState:
    """theta_{n+1} = theta_n + gamma_n * increment; theta_bar tracks mean(theta_1..theta_{n+1})."""
    gamma = schedule(state.n)
    theta = state.theta + gamma * np.asarray(increment, dtype=float)
    n = state.n + 1
    theta_bar = state.theta_bar + (theta - state.theta_bar) * (1.0 / n)
    return TdState(theta, theta_bar, n)


def project_ball(x: np.ndarray, radius: float) -> np.ndarray:
    norm = np.linalg.norm(x)
    if norm > radius:
        return x * (radius / norm)
    return x


def default_radius(mrp: MarkovRewardProcess, mu: float) -> float:
    return 2.0 * (1.0 + np.max(np.abs(mrp.reward))) / (mu * (1.0 - mrp.discount))


@dataclass(eq=False)
class CtdState:
    """Mutable CTD state; ``ctd_step`` and ``ctd_epoch_transition`` update it in place.

    ``anchor_samples`` are the previous epoch's transitions, over which
    ``f_hat`` was averaged. ``f_hat is None`` during epoch 0, which runs
    plain constant-step TD(0).
    """

    theta: np.ndarray
    radius_h: float
    epoch_length: int
    gamma: float
    anchor: np.ndarray = None
    f_hat: np.ndarray | None = None
    epoch_index: int = 0
    epoch_samples: list = field(default_factory=list)
    epoch_iterates: list = field(default_factory=list)
    anchor_samples: list = field(default_factory=list)
    anchor_history: list = field(default_factory=list)
    n: int = 0

    def __post_init__(self):
        self.theta = np.array(self.theta, dtype=float)
        if self.anchor is None:
            self.anchor = self.theta.copy()
        if not self.anchor_history:
            self.anchor_history.append(self.anchor.copy())
        if self.epoch_length < 1:
            raise ValidationError("epoch length must be >= 1")
        if not self.radius_h > 0:
            raise ValidationError("projection radius must be > 0")
        if not self.gamma > 0:
            raise ValidationError("CTD step must be > 0")

    @property
    def epoch_full(self) -> bool:
        return len(self.epoch_iterates) >= self.epoch_length


def ctd_epoch_transition(state: CtdState, mrp: MarkovRewardProcess, features: FeatureMap, rng) -> CtdState:
    """Start the next epoch.

    The new anchor is an iterate of the finished epoch picked uniformly at
    random; the centering vector is the mean increment at that anchor over
    the finished epoch's samples; the iterate restarts from the anchor.
    """
    M = state.epoch_length
    if len(state.epoch_iterates) != M or len(state.epoch_samples) != M:
        raise EpochBufferIncomplete(
            f"epoch buffers hold {len(state.epoch_iterates)} iterates and "
            f"{len(state.epoch_samples)} samples, need {M}"
        )
    rng = generator(rng) if isinstance(rng, (int, np.integer)) else rng
    pick = int(rng.integers(M))
    anchor = state.epoch_iterates[pick].copy()
    f_hat = np.zeros_like(anchor)
    for s, s_next in state.epoch_samples:
        f_hat += td_increment(mrp, features, s, s_next, anchor)
    f_hat /= M
    state.anchor = anchor
    state.f_hat = f_hat
    state.anchor_samples = state.epoch_samples
    state.epoch_samples = []
    state.epoch_iterates = []
    state.epoch_index += 1
    state.theta = anchor.copy()
    state.anchor_history.append(anchor.copy())
    return state


def ctd_step(state: CtdState, mrp: MarkovRewardProcess, features: FeatureMap, s: int, s_next: int,
             buffer_sample: tuple[int, int] | None = None) -> CtdState:
    """One CTD update with sample X = (s, s_next), projected onto the H-ball.

    The pre-update iterate and ``buffer_sample`` (default: X) are appended to
    the epoch buffers.
    """
    theta = state.theta
    state.epoch_iterates.append(theta.copy())
    state.epoch_samples.append(buffer_sample if buffer_sample is not None else (int(s), int(s_next)))
    inc = td_increment(mrp, features, s, s_next, theta)
    if state.f_hat is not None:
        inc = inc - td_increment(mrp, features, s, s_next, state.anchor) + state.f_hat
    state.theta = project_ball(theta + state.gamma * inc, state.radius_h)
    state.n += 1
    return state


@dataclass(frozen=True)
class CtdParams:
    gamma: float
    epoch_length: int
    radius_h: float | None = None
    sample_mode: Literal["online", "resample"] = "online"

    def __post_init__(self):
        if self.sample_mode not in ("online", "resample"):
            raise ValidationError(f"sample_mode must be 'online' or 'resample', got {self.sample_mode!r}")


@dataclass(frozen=True, eq=False)
class ErrorTrace:
    """Errors of one run at each checkpoint (iteration counts)."""

    algorithm: str
    checkpoints: np.ndarray
    thetas: np.ndarray
    param_error: np.ndarray
    psi_error: np.ndarray
    normalized: np.ndarray
    anchors: np.ndarray | None = None


def _check_checkpoints(checkpoints, n_iterations):
    cps = np.asarray(checkpoints, dtype=np.int64)
    if cps.ndim != 1 or cps.size == 0:
        raise ValidationError("need at least one checkpoint")
    if np.any(np.diff(cps) <= 0):
        raise ValidationError("checkpoints must be strictly increasing")
    if cps[0] < 1 or cps[-1] > n_iterations:
        raise ValidationError(f"checkpoints must lie in [1, {n_iterations}]")
    return cps


def run_estimator(
    algorithm: str,
    mrp: MarkovRewardProcess,
    features: FeatureMap,
    *,
    n_iterations: int,
    seed: int,
    checkpoints,
    schedule: StepSchedule | None = None,
    ctd: CtdParams | None = None,
    start_state: int = 0,
    theta0=None,
    system: ProjectedSystem | None = None,
    backend: Literal["fast", "reference"] = "fast",
) -> ErrorTrace:
    """Run one estimator along one sampled trajectory and record its errors.

    Streams derived from ``seed``: key 0 drives the trajectory, key 1 the
    CTD anchor draws, key 2 the CTD resampling indices.
    """
    if algorithm not in ALGORITHMS:
        raise ValidationError(f"unknown algorithm {algorithm!r}; expected one of {ALGORITHMS}")
    cps = _check_checkpoints(checkpoints, n_iterations)
    system = build_system(mrp, features) if system is None else system
    d = features.d
    theta0 = np.zeros(d) if theta0 is None else np.array(theta0, dtype=float)
    if theta0.shape != (d,):
        raise DimensionMismatch(f"theta0 has shape {theta0.shape}, expected ({d},)")
    if not 0 <= start_state < mrp.n_states:
        raise ValidationError(f"start_state {start_state} outside [0, {mrp.n_states})")

    uniforms = generator(seed, 0).random(n_iterations)
    states = _kernels.walk(cumulative_rows(mrp.transition), int(start_state), uniforms)

    anchors = None
    if algorithm in ("td0", "td0_avg"):
        if schedule is None:
            raise ValidationError(f"{algorithm} needs a step schedule")
        if backend == "fast":
            thetas, avgs = _kernels.td_path(states, mrp.reward, features.phi, mrp.discount, theta0,
                                            schedule.first(n_iterations), cps)
        else:
            thetas, avgs = _reference_td(states, mrp, features, theta0, schedule, cps)
        if algorithm == "td0_avg":
            thetas = avgs
    else:
        if ctd is None:
            raise ValidationError("ctd needs CtdParams")
        radius = default_radius(mrp, system.mu) if ctd.radius_h is None else ctd.radius_h
        M = int(ctd.epoch_length)
        n_transitions = n_iterations // M
        pick_rng = generator(seed, 1)
        picks = np.array([int(pick_rng.integers(M)) for _ in range(n_transitions)], dtype=np.int64)
        resample = ctd.sample_mode == "resample"
        draws = generator(seed, 2).integers(0, M, size=n_iterations) if resample else np.zeros(0, np.int64)
        if backend == "fast":
            thetas, anchors = _kernels.ctd_path(states, mrp.reward, features.phi, mrp.discount, theta0,
                                                float(ctd.gamma), M, float(radius), picks, resample, draws, cps)
        else:
            thetas, anchors = _reference_ctd(states, mrp, features, theta0, ctd.gamma, M, radius,
                                             generator(seed, 1), draws if resample else None, cps)

    if not np.all(np.isfinite(thetas)):
        bad = int(cps[np.argmax(~np.all(np.isfinite(thetas), axis=1))])
        raise NonFiniteIterate(bad)
    return _errors(algorithm, cps, thetas, features, system, anchors)


def _errors(algorithm, cps, thetas, features, system, anchors):
    diff = thetas - system.theta_star
    # huge but finite iterates overflow to inf here; the harness counts those runs as diverged
    with np.errstate(over="ignore", invalid="ignore"):
        param = np.linalg.norm(diff, axis=1)
        values = diff @ features.phi.T
        psi_err = np.sqrt((values * values) @ system.psi)
    scale = np.sqrt(((features.phi @ system.theta_star) ** 2) @ system.psi)
    normalized = psi_err / scale if scale > 0 else np.full_like(psi_err, np.nan)
    return ErrorTrace(algorithm, cps, thetas, param, psi_err, normalized, anchors)


def _reference_td(states, mrp, features, theta0, schedule, cps):
    state = TdState.start(theta0)
    thetas, avgs = [], []
    wanted = set(int(c) for c in cps)
    for k in range(cps[-1]):
        inc = td_increment(mrp, features, states[k], states[k + 1], state.theta)
        state = td_step(state, schedule, inc)
        if state.n in wanted:
            thetas.append(state.theta)
            avgs.append(state.theta_bar)
    return np.array(thetas), np.array(avgs)


def _reference_ctd(states, mrp, features, theta0, gamma, M, radius, pick_rng, draws, cps):
    state = CtdState(theta0, radius_h=radius, epoch_length=M, gamma=gamma)
    thetas = []
    wanted = set(int(c) for c in cps)
    for k in range(cps[-1]):
        if state.epoch_full:
            ctd_epoch_transition(state, mrp, features, pick_rng)
        fresh = (int(states[k]), int(states[k + 1]))
        if draws is not None and state.f_hat is not None:
            s, s_next = state.anchor_samples[draws[k]]
            ctd_step(state, mrp, features, s, s_next, buffer_sample=fresh)
        else:
            ctd_step(state, mrp, features, *fresh)
        if state.n in wanted:
            thetas.append(state.theta.copy())
    return np.array(thetas), np.array(state.anchor_history)
