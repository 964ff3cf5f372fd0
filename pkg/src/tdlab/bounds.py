"""Closed-form bound constants for TD(0), averaged TD(0) and CTD.

Each ``theoremN_constants`` function evaluates the displayed constants
verbatim and returns a frozen dataclass; ``bound_curve`` tabulates the
corresponding right-hand side on a grid.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import numpy as np
from scipy.special import gammaincc, gammaln

from tdlab.errors import AlphaOutOfRange, DenominatorNonPositive, InadmissibleStepSize, ValidationError

SERIES_TOL = 1e-10


@dataclass(frozen=True)
class Admissibility:
    admissible: bool
    step_bound: float
    step_margin: float
    rate_product: float
    rate_margin: float

    def failures(self) -> list[str]:
        out = []
        if self.step_margin <= 0:
            out.append(
                f"c0 < mu(1-beta)/(2(1+beta)^2) fails: bound is {self.step_bound:.6g}, "
                f"margin {self.step_margin:.3g}"
            )
        if self.rate_margin <= 0:
            out.append(f"mu(1-beta) c0 c > 1 fails: product is {self.rate_product:.6g}")
        return out


def check_td_admissible(mu: float, beta: float, c0: float, c: float) -> Admissibility:
    """Both step-size conditions for the 1/n schedule, with their margins."""
    if not mu > 0 or not 0 < beta < 1:
        raise ValidationError("need mu > 0 and 0 < beta < 1")
    step_bound = mu * (1 - beta) / (2 * (1 + beta) ** 2)
    product = mu * (1 - beta) * c0 * c
    return Admissibility(
        admissible=bool(c0 < step_bound and product > 1),
        step_bound=step_bound,
        step_margin=step_bound - c0,
        rate_product=product,
        rate_margin=product - 1,
    )


@dataclass(frozen=True)
class Theorem1Constants:
    mu: float
    beta: float
    c0: float
    c: float
    d: int
    b_mix: float
    b_uniform: float
    theta0_norm: float
    theta_star_norm: float
    initial_error: float
    delta: float
    c_big: float
    c_big_alt: float

    @property
    def exponent(self) -> float:
        return self.mu * (1 - self.beta) * self.c0 * self.c - 1

    def k1(self, n):
        n = np.asarray(n, dtype=float)
        c, c0, e = self.c, self.c0, self.exponent
        first = c * (self.initial_error + self.c_big) / (n + c) ** e
        second = ((1 + self.theta_star_norm) * c0**2 * c**2 + self.c_big * c0 * c) / e
        return np.sqrt(first + second)

    def k2(self, n):
        cc = self.c0 * self.c
        log_term = math.log(1.0 / self.delta)
        top = cc * self.b_uniform * math.sqrt(2 * (2 + cc) * (1 + self.beta * (3 - self.beta)) * log_term)
        return top / math.sqrt(self.exponent) + self.k1(n)

    def expectation_bound(self, n):
        n = np.asarray(n, dtype=float)
        return self.k1(n) / np.sqrt(n + self.c)

    def probability_bound(self, n):
        n = np.asarray(n, dtype=float)
        return self.k2(n) / np.sqrt(n + self.c)


def _mixing_constant(factor, b_mix, theta0_norm, d, theta_star_norm, beta):
    return factor * b_mix * ((theta0_norm + d + theta_star_norm) / (1 - beta)) ** 2


def c_big_forms(d: int, b_mix: float, theta0_norm: float, theta_star_norm: float,
                beta: float) -> tuple[float, float]:
    """The two forms of C: 6dB(...)^2 and 2(2+beta)(d+4)B(...)^2."""
    return (_mixing_constant(6 * d, b_mix, theta0_norm, d, theta_star_norm, beta),
            _mixing_constant(2 * (2 + beta) * (d + 4), b_mix, theta0_norm, d, theta_star_norm, beta))


def theorem1_constants(
    mu: float,
    beta: float,
    c0: float,
    c: float,
    d: int,
    b_mix: float,
    theta0_norm: float,
    theta_star_norm: float,
    delta: float = 0.05,
    *,
    initial_error: float | None = None,
    b_uniform: float | None = None,
    variant: str = "theorem",
) -> Theorem1Constants:
    """Constants of the 1/n-step bound.

    ``initial_error`` is ||theta_0 - theta*|| (defaults to the triangle bound
    ``theta0_norm + theta_star_norm``); ``b_uniform`` is the uniform mixing
    bound used by K2 (defaults to ``b_mix``). ``variant="alternate"``
    swaps in the alternative C = 2(2+beta)(d+4)B(...)^2; both are reported.
    """
    adm = check_td_admissible(mu, beta, c0, c)
    if not adm.admissible:
        raise InadmissibleStepSize("; ".join(adm.failures()))
    if not 0 < delta < 1:
        raise ValidationError("delta must lie in (0, 1)")
    c_thm, c_prop = c_big_forms(d, b_mix, theta0_norm, theta_star_norm, beta)
    if variant not in ("theorem", "alternate"):
        raise ValidationError(f"unknown variant {variant!r}")
    c_big, c_alt = (c_thm, c_prop) if variant == "theorem" else (c_prop, c_thm)
    return Theorem1Constants(
        mu=mu, beta=beta, c0=c0, c=c, d=d,
        b_mix=b_mix,
        b_uniform=b_mix if b_uniform is None else b_uniform,
        theta0_norm=theta0_norm,
        theta_star_norm=theta_star_norm,
        initial_error=theta0_norm + theta_star_norm if initial_error is None else initial_error,
        delta=delta,
        c_big=c_big,
        c_big_alt=c_alt,
    )


def _tail_correction(f_n, d1, d2):
    """Trapezoid correction for sum_{k>N} f(k) given f(N), |f'(N)|, f''(N).

    For a convex summand with decreasing f'', sum_{k>N} f(k) equals
    integral_N^inf f - f(N)/2 + E with 0 <= E <= (|f'(N)| + f''(N)) / 12;
    returns (-f(N)/2 + midpoint of E, half-width of E).
    """
    half = (d1 + d2) / 24
    return -f_n / 2 + half, half


def zeta_series(s: float, tol: float = SERIES_TOL) -> tuple[float, float]:
    """sum_{k>=1} k^-s for s > 1, with a guaranteed absolute error bound.

    Direct sum to N plus the integral tail with a trapezoid correction.
    """
    if s <= 1:
        raise AlphaOutOfRange(f"series sum k^-{s} diverges")
    n = int(math.ceil((s / (6 * tol)) ** (1.0 / (s + 1))))
    k = np.arange(1, n + 1, dtype=float)
    head = float(np.sum(k[::-1] ** -s))
    shift, err = _tail_correction(n ** -s, s * n ** (-s - 1), s * (s + 1) * n ** (-s - 2))
    return head + n ** (1 - s) / (s - 1) + shift, err + 1e-16 * head


def stretched_exp_series(kappa: float, p: float, c: float, offset: float,
                         tol: float = SERIES_TOL, max_terms: int = 1_000_000) -> tuple[float, float]:
    """sum_{k>=1} exp(-kappa ((k + c)^p - offset)) for kappa > 0, 0 < p < 1.

    Terms are summed directly until they drop below 1e-14 (or ``max_terms``);
    the remainder is the integral tail, an upper incomplete gamma function,
    with a trapezoid correction.
    """
    if not kappa > 0 or not 0 < p < 1:
        raise ValidationError("need kappa > 0 and 0 < p < 1")

    def log_term(k):
        return -kappa * ((k + c) ** p - offset)

    total = 0.0
    start = 1
    chunk = 1024
    last = 1
    while True:
        k = np.arange(start, min(start + chunk, max_terms + 1), dtype=float)
        terms = np.exp(log_term(k))
        small = np.flatnonzero(terms < 1e-14)
        if small.size:
            stop = small[0] + 1
            total += float(np.sum(terms[:stop]))
            last = int(k[stop - 1])
            break
        total += float(np.sum(terms))
        last = int(k[-1])
        if last >= max_terms:
            break
        start = last + 1
        chunk *= 2
    # integral_{N}^{inf} exp(-kappa((x+c)^p - offset)) dx via u = kappa (x+c)^p
    a = 1.0 / p
    x = kappa * (last + c) ** p
    log_integral = (kappa * offset - math.log(p) - a * math.log(kappa) + gammaln(a)
                    + math.log(max(gammaincc(a, x), 1e-300)))
    integral = math.exp(log_integral) if gammaincc(a, x) > 0 else 0.0
    f_last = math.exp(log_term(last))
    g = kappa * p * (last + c) ** (p - 1)
    d2 = f_last * (g * g + kappa * p * (1 - p) * (last + c) ** (p - 2))
    shift, err = _tail_correction(f_last, f_last * g, d2)
    return total + integral + shift, err + 1e-16 * total


@dataclass(frozen=True)
class Theorem2Constants:
    mu: float
    beta: float
    c0: float
    c: float
    alpha: float
    d: int
    b_uniform: float
    theta_star_norm: float
    c_big: float
    delta: float
    n0: float
    c_prime: float
    c_dprime: float
    c_tprime: float
    c_dprime_error: float
    c_tprime_error: float

    @property
    def _growth(self) -> float:
        q = self.c0 * self.c**self.alpha * (self.c + self.n0) ** (1 - self.alpha)
        return (1 + self.d * q) * math.exp((1 + self.beta) * q)

    def k1_ia(self, n):
        n = np.asarray(n, dtype=float)
        a, c, c0 = self.alpha, self.c, self.c0
        g = self._growth
        term1 = (g + self.theta_star_norm + self.c_big) * self.c_dprime / (n + c) ** ((1 - a) / 2)
        with np.errstate(divide="ignore"):
            term2 = self.n0 * (g + self.theta_star_norm) / n ** (1 - a / 2)
        rate = self.mu * (1 - self.beta) * c0 * c**a / (1 - a)
        term3 = (c**a * c0 * (1 + math.sqrt(self.theta_star_norm) + math.sqrt(self.c_big / (c**a * c0)))
                 * rate ** (-(a + 2 * a * a) / (2 * (1 - a))))
        return term1 + term2 + term3

    def k2_ia(self, n):
        n = np.asarray(n, dtype=float)
        lead = 4 * math.sqrt((1 + self.c_prime) * self.b_uniform) / (self.mu * (1 - self.beta))
        with np.errstate(divide="ignore"):
            return lead * self.c_tprime / n ** ((1 - self.alpha) / 2) + self.k1_ia(n - self.n0)

    def expectation_bound(self, n):
        n = np.asarray(n, dtype=float)
        return self.k1_ia(n) / (n + self.c) ** (self.alpha / 2)

    def probability_bound(self, n):
        n = np.asarray(n, dtype=float)
        return self.k2_ia(n) / (n + self.c) ** (self.alpha / 2)


def theorem2_constants(
    mu: float,
    beta: float,
    c0: float,
    c: float,
    alpha: float,
    d: int,
    b_mix: float,
    theta_star_norm: float,
    c_big: float,
    delta: float = 0.05,
) -> Theorem2Constants:
    """Constants of the averaged-iterate bound (valid for n > n0).

    ``b_mix`` is the uniform mixing bound B'. The summand of C''' is read as
    a function of the summation index k.
    """
    if not 0.5 < alpha < 1:
        raise AlphaOutOfRange(
            f"alpha = {alpha} outside (1/2, 1); sum k^(-2 alpha) diverges for alpha <= 1/2"
            if alpha <= 0.5 else f"alpha = {alpha} outside (1/2, 1)"
        )
    if not (mu > 0 and 0 < beta < 1 and c0 > 0 and c > 0):
        raise ValidationError("need mu, c0, c > 0 and 0 < beta < 1")
    n0 = (c * mu * (1 - beta) / (2 * c0 * (1 + beta) ** 2)) ** (-1 / alpha)
    lam = mu * (1 - beta) * c0 * c**alpha
    c_prime = math.sqrt(3**alpha + (4 * alpha / lam + 2**alpha / alpha) ** 2)
    c_dprime, err2 = zeta_series(2 * alpha)
    kappa = mu * c**alpha * (1 - beta) * c0 / (2 * (1 - alpha))
    c_tprime, err3 = stretched_exp_series(kappa, 1 - alpha, c, (c + n0) ** (1 - alpha))
    return Theorem2Constants(
        mu=mu, beta=beta, c0=c0, c=c, alpha=alpha, d=d,
        b_uniform=b_mix, theta_star_norm=theta_star_norm, c_big=c_big, delta=delta,
        n0=n0, c_prime=c_prime, c_dprime=c_dprime, c_tprime=c_tprime,
        c_dprime_error=err2, c_tprime_error=err3,
    )


@dataclass(frozen=True)
class Theorem3Constants:
    mu: float
    beta: float
    gamma: float
    epoch_length: int
    d: int
    radius_h: float
    rho: float
    c1: float
    c2: float

    @property
    def admissible(self) -> bool:
        return self.c1 < 1

    @property
    def decay_factor(self) -> float:
        """max{C1, rho^M}."""
        return max(self.c1, self.rho**self.epoch_length)

    def epoch_bound(self, m, initial_error_sq: float, c_geo: float):
        """Right-hand side for ||Phi(anchor_m - theta*)||_psi^2 on geometrically mixing chains."""
        m = np.asarray(m, dtype=float)
        mixing = c_geo * self.epoch_length * self.c2 * self.radius_h * (5 * self.gamma + 4)
        return self.c1**m * initial_error_sq + mixing * self.decay_factor ** (m - 1)


def theorem3_constants(mu: float, beta: float, gamma: float, m_epoch: int, d: int,
                       h: float, rho: float) -> Theorem3Constants:
    denom = (1 - beta) - d * d * gamma / 2
    if denom <= 0:
        raise DenominatorNonPositive(
            f"(1-beta) - d^2 gamma/2 = {denom:.6g} <= 0; need gamma < {2 * (1 - beta) / d**2:.6g}"
        )
    if not (mu > 0 and gamma > 0 and m_epoch >= 1):
        raise ValidationError("need mu > 0, gamma > 0, M >= 1")
    c1 = (1 / (2 * mu * gamma * m_epoch) + gamma * d * d / 2) / denom
    c2 = gamma / (m_epoch * denom)
    return Theorem3Constants(mu=mu, beta=beta, gamma=gamma, epoch_length=int(m_epoch), d=d,
                             radius_h=h, rho=rho, c1=c1, c2=c2)


def bound_curve(constants, n_grid, *, initial_error_sq: float | None = None,
                c_geo: float | None = None) -> list[tuple[float, float]]:
    """(n, bound) pairs: K1(n)/sqrt(n+c), K1_IA(n)/(n+c)^(alpha/2), or the per-epoch CTD bound."""
    grid = np.asarray(list(n_grid), dtype=float)
    if grid.size == 0:
        return []
    if isinstance(constants, Theorem3Constants):
        if initial_error_sq is None or c_geo is None:
            raise ValidationError("the CTD curve needs initial_error_sq and c_geo")
        values = constants.epoch_bound(grid, initial_error_sq, c_geo)
    else:
        values = constants.expectation_bound(grid)
    return [(float(n), float(v)) for n, v in zip(grid, np.atleast_1d(values))]


def report(constants) -> dict:
    return {k: (float(v) if isinstance(v, (float, np.floating)) else v) for k, v in asdict(constants).items()}
