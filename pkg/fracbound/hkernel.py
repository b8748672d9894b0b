"""
h(t, lambda) = E[exp(-lambda E_t)], the temporal eigenfunction of the
distributed-order derivative, evaluated by three independent routes:

- mittag-leffler: single atom, h = E_beta(-lambda t^beta / (w Gamma(1-beta)))
- kochubei-integral: pure density, real-axis integral along the branch cut
- laplace-inversion: any measure, numerical inversion of
  psi_W(s) / (s (lambda + psi_W(s)))
"""
import logging
import math
from collections.abc import Callable, Sequence
from dataclasses import dataclass
from enum import StrEnum
from functools import lru_cache
from threading import RLock
from typing import Any

import numpy as np
from scipy import integrate, special

from .fracops import TimeSeriesFn, distributed_caputo_at_indices, graded_grid
from .mixing import MixingMeasure, derivative_bounds, laplace_exponent, nu_rule
from .tools import (
    DEFAULT_TOLERANCES,
    CheckStatus,
    DerivativeBound,
    DomainError,
    EigenResidual,
    FloatArray,
    InversionError,
    QuadratureError,
    RouteAgreement,
    Tolerances,
    UnsupportedCaseError,
)

logger = logging.getLogger(__name__)

# Stehfest orders 12 and 14 disagreeing by more than this means divergence
STEHFEST_DIVERGENCE = 1e-4
PROBE_TIMES = (0.1, 1.0, 10.0)
PROBE_LAMBDAS = (0.5, 1.0, 5.0, 25.0)
# Relative step of the central differences on h
DIFF_STEP = 1e-3
SERIES_TERM_CUTOFF = 1e-17


class Route(StrEnum):
    MITTAG_LEFFLER = "mittag-leffler"
    KOCHUBEI = "kochubei-integral"
    LAPLACE = "laplace-inversion"
    AUTO = "auto"


class InversionMethod(StrEnum):
    TALBOT = "talbot"
    STEHFEST = "stehfest"


def _ml_series(beta: float, z: float) -> float:
    total, k = 0.0, 0
    while True:
        term = z**k * float(special.rgamma(beta * k + 1))
        total += term
        if k > 2 and abs(term) < SERIES_TERM_CUTOFF * max(1.0, abs(total)):
            return total
        k += 1


def _ml_integral(beta: float, x: float, tolerances: Tolerances) -> float:
    """
    E_beta(-x) = int_0^inf exp(-r x^(1/beta)) K_beta(r) dr, the r^(beta-1)
    endpoint singularity integrated by the algebraic-weight rule
    """
    rate = x ** (1 / beta)
    sin_b, cos_b = np.sin(beta * np.pi), np.cos(beta * np.pi)

    def regular(r: float) -> float:
        rb = r**beta
        return float(
            np.exp(-r * rate)
            * sin_b
            / (np.pi * (rb * rb + 2 * rb * cos_b + 1))
        )

    head, head_error = integrate.quad(
        regular,
        0,
        1,
        weight="alg",
        wvar=(beta - 1, 0),
        epsabs=tolerances.quad_abs * 1e-3,
        epsrel=tolerances.quad_rel,
        limit=tolerances.quad_limit,
    )
    tail, tail_error = integrate.quad(
        lambda r: regular(r) * r ** (beta - 1),
        1,
        np.inf,
        epsabs=tolerances.quad_abs * 1e-3,
        epsrel=tolerances.quad_rel,
        limit=tolerances.quad_limit,
    )
    error = head_error + tail_error
    if error > max(tolerances.quad_abs, tolerances.quad_rel * (head + tail)):
        raise QuadratureError("Mittag-Leffler integral", error, 0.0)
    return head + tail


def mittag_leffler(
    beta: float, z: float, tolerances: Tolerances = DEFAULT_TOLERANCES
) -> float:
    """
    E_beta(z) for z <= 0: power series inside the switch radius, integral
    representation outside
    """
    if not 0 < beta <= 1:
        raise DomainError(
            f"Mittag-Leffler order must lie in (0, 1], got {beta}"
        )
    if z > 0:
        raise DomainError(f"Only z <= 0 is supported, got {z}")
    if z == 0:
        return 1.0
    if beta == 1:
        return math.exp(z)
    if abs(z) <= tolerances.ml_series_radius:
        return _ml_series(beta, z)
    return _ml_integral(beta, -z, tolerances)


def h_transform(psi: Any, s: Any, lam: float) -> Any:
    """
    Laplace transform in t of h: psi / (s (lambda + psi))
    """
    return psi / (s * (lam + psi))


def talbot_contour(times: FloatArray, nodes: int) -> tuple[Any, Any]:
    """
    Fixed Talbot contour: f(t_k) = Re sum_j weights[k, j] F(s[k, j])
    """
    t = np.asarray(times, dtype=np.float64)[:, None]
    r = 2 * nodes / (5 * t)
    theta = np.arange(1, nodes) * np.pi / nodes
    cot = 1 / np.tan(theta)
    s = np.empty((t.shape[0], nodes), dtype=np.complex128)
    weights = np.empty_like(s)
    s[:, :1] = r
    weights[:, :1] = 0.5 * np.exp(r * t)
    s[:, 1:] = r * theta * (cot + 1j)
    sigma = theta + (theta * cot - 1) * cot
    weights[:, 1:] = np.exp(t * s[:, 1:]) * (1 + 1j * sigma)
    return s, weights * r / nodes


def talbot(
    transform: Callable[[Any], Any], times: Sequence[float], nodes: int = 32
) -> FloatArray:
    t = np.asarray(times, dtype=np.float64)
    if np.any(t <= 0):
        raise DomainError("Laplace inversion needs t > 0")
    s, weights = talbot_contour(t, nodes)
    return np.real(np.sum(weights * transform(s), axis=1))


@lru_cache(maxsize=8)
def stehfest_coefficients(order: int) -> tuple[float, ...]:
    if order % 2 or order < 2:
        raise DomainError("Gaver-Stehfest orders must be even and >= 2")
    half = order // 2
    coefficients = []
    for k in range(1, order + 1):
        total = 0.0
        for j in range((k + 1) // 2, min(k, half) + 1):
            total += (
                j**half
                * math.factorial(2 * j)
                / (
                    math.factorial(half - j)
                    * math.factorial(j)
                    * math.factorial(j - 1)
                    * math.factorial(k - j)
                    * math.factorial(2 * j - k)
                )
            )
        coefficients.append((-1) ** (k + half) * total)
    return tuple(coefficients)


def stehfest(
    transform: Callable[[Any], Any], times: Sequence[float], order: int = 14
) -> FloatArray:
    t = np.asarray(times, dtype=np.float64)
    if np.any(t <= 0):
        raise DomainError("Laplace inversion needs t > 0")
    coefficients = np.asarray(stehfest_coefficients(order))
    k = np.arange(1, order + 1)
    s = np.outer(np.log(2) / t, k)
    return np.log(2) / t * (transform(s) @ coefficients)


@dataclass(frozen=True)
class HValue:
    value: float
    error: float
    route: Route


class HEvaluator:
    """
    Evaluates h(t, lambda) for one mixing measure. Values are memoised per
    (t, lambda); the cache is shared by every method of the evaluator.
    """

    def __init__(
        self,
        measure: MixingMeasure,
        route: Route = Route.AUTO,
        tolerances: Tolerances = DEFAULT_TOLERANCES,
        inversion: InversionMethod = InversionMethod.TALBOT,
        probe: bool = True,
    ) -> None:
        super().__init__()
        self._measure = measure
        self._tolerances = tolerances
        self._inversion = inversion
        self._lock = RLock()
        self._cache: dict[tuple[float, float], HValue] = {}
        self._fallbacks = 0
        self._requested = Route(route)
        self._route = self._resolve_route(self._requested)
        self._probe_report: RouteAgreement | None = None
        if self._requested == Route.AUTO and probe:
            self._probe_report = self._probe()

    def __repr__(self) -> str:
        return f"HEvaluator(route={self._route}, measure={self._measure})"

    def _resolve_route(self, route: Route) -> Route:
        m = self._measure
        if route == Route.AUTO:
            if m.is_single_atom:
                return Route.MITTAG_LEFFLER
            return Route.LAPLACE
        if route == Route.MITTAG_LEFFLER and not m.is_single_atom:
            raise UnsupportedCaseError(
                "The Mittag-Leffler route needs a single-atom measure",
                hint="use laplace-inversion",
            )
        if route == Route.KOCHUBEI and (m.has_atoms or not m.has_density):
            raise UnsupportedCaseError(
                "The Kochubei route needs a pure density measure",
                hint="use laplace-inversion",
            )
        return route

    def _probe(self) -> RouteAgreement:
        m = self._measure
        if self._route == Route.MITTAG_LEFFLER:
            other = HEvaluator(m, Route.LAPLACE, self._tolerances)
            tolerance = self._tolerances.route_abs * 1e-2
        elif m.has_density and not m.has_atoms:
            other = HEvaluator(m, Route.KOCHUBEI, self._tolerances)
            tolerance = self._tolerances.route_abs
        else:
            other = HEvaluator(
                m,
                Route.LAPLACE,
                self._tolerances,
                inversion=InversionMethod.STEHFEST,
            )
            tolerance = STEHFEST_DIVERGENCE
        report = route_agreement(
            self, other, PROBE_TIMES, PROBE_LAMBDAS, tolerance
        )
        if report.passed():
            logger.debug(f"Route probe passed: {report}")
        else:
            logger.warning(f"Route probe did not pass: {report}")
        return report

    def get_measure(self) -> MixingMeasure:
        return self._measure

    def get_route(self) -> Route:
        return self._route

    def get_tolerances(self) -> Tolerances:
        return self._tolerances

    def get_probe_report(self) -> RouteAgreement | None:
        return self._probe_report

    def get_fallbacks(self) -> int:
        return self._fallbacks

    def describe(self) -> str:
        if self._route == Route.LAPLACE:
            return f"{self._route}/{self._inversion}"
        return str(self._route)

    def evaluate(self, t: float, lam: float) -> HValue:
        return self.table([t], [lam])[0][0]

    def h(self, t: float, lam: float) -> float:
        return self.evaluate(t, lam).value

    def h_grid(self, times: Sequence[float], lam: float) -> FloatArray:
        return np.array([x.value for x in self.table(times, [lam])[0]])

    def h_array(
        self, times: Sequence[float], lams: Sequence[float]
    ) -> FloatArray:
        """
        h values, shape (len(lams), len(times))
        """
        return np.array(
            [[x.value for x in row] for row in self.table(times, lams)]
        )

    def table(
        self, times: Sequence[float], lams: Sequence[float]
    ) -> list[list[HValue]]:
        t_array = np.asarray(times, dtype=np.float64).ravel()
        lam_array = np.asarray(lams, dtype=np.float64).ravel()
        if np.any(t_array < 0) or np.any(lam_array < 0):
            raise DomainError("h(t, lambda) needs t >= 0 and lambda >= 0")
        with self._lock:
            missing = [
                lam
                for lam in dict.fromkeys(lam_array.tolist())
                if any((t, lam) not in self._cache for t in t_array.tolist())
            ]
            for lam in missing:
                pending = [
                    t
                    for t in dict.fromkeys(t_array.tolist())
                    if (t, lam) not in self._cache
                ]
                for t, value in zip(pending, self._compute(pending, lam)):
                    self._cache[(t, lam)] = value
            return [
                [self._cache[(t, lam)] for t in t_array.tolist()]
                for lam in lam_array.tolist()
            ]

    def _compute(self, times: list[float], lam: float) -> list[HValue]:
        result: list[HValue | None] = [None] * len(times)
        positive = []
        for i, t in enumerate(times):
            if t == 0 or lam == 0:
                result[i] = HValue(1.0, 0.0, self._route)
            else:
                positive.append(i)
        if positive:
            t_positive = np.array([times[i] for i in positive])
            if self._route == Route.MITTAG_LEFFLER:
                values = self._mittag_leffler(t_positive, lam)
            elif self._route == Route.KOCHUBEI:
                values = self._kochubei(t_positive, lam)
            else:
                values = self._laplace(t_positive, lam)
            for i, value in zip(positive, values):
                result[i] = value
        return [x for x in result if x is not None]

    def _mittag_leffler(self, times: FloatArray, lam: float) -> list[HValue]:
        atom = self._measure.atoms[0]
        rate = lam / (atom.weight * special.gamma(1 - atom.beta))
        return [
            HValue(
                mittag_leffler(
                    atom.beta, -rate * t**atom.beta, self._tolerances
                ),
                self._tolerances.quad_abs,
                Route.MITTAG_LEFFLER,
            )
            for t in times
        ]

    def _kochubei(self, times: FloatArray, lam: float) -> list[HValue]:
        return [
            HValue(*kochubei_integral(self._measure, t, lam, self._tolerances))
            for t in times
        ]

    def _psi(self, s: Any) -> Any:
        return laplace_exponent(self._measure, s, self._tolerances.beta_nodes)

    def _talbot(self, times: FloatArray, lam: float) -> list[HValue]:
        nodes = self._tolerances.talbot_nodes
        coarse = max(8, 3 * nodes // 4)

        def transform(s: Any) -> Any:
            return h_transform(self._psi(s), s, lam)

        values = talbot(transform, times, nodes)
        errors = np.abs(values - talbot(transform, times, coarse))
        if not np.all(np.isfinite(values)):
            raise InversionError(
                f"Talbot inversion produced non-finite h at lambda={lam}"
            )
        return [
            HValue(float(v), float(e), Route.LAPLACE)
            for v, e in zip(values, errors)
        ]

    def _laplace(self, times: FloatArray, lam: float) -> list[HValue]:
        if self._inversion == InversionMethod.TALBOT:
            return self._talbot(times, lam)
        order = self._tolerances.stehfest_order

        def transform(s: Any) -> Any:
            return h_transform(self._psi(s), s, lam)

        values = stehfest(transform, times, order)
        errors = np.abs(values - stehfest(transform, times, order - 2))
        diverged = (
            ~np.isfinite(values)
            | (errors > STEHFEST_DIVERGENCE)
            | (values < 0)
            | (values > 1 + STEHFEST_DIVERGENCE)
        )
        result = [
            HValue(float(v), float(e), Route.LAPLACE)
            for v, e in zip(values, errors)
        ]
        if np.any(diverged):
            self._fallbacks += int(diverged.sum())
            logger.warning(
                f"Gaver-Stehfest diverged at {int(diverged.sum())} times for "
                f"lambda={lam}, falling back to Talbot"
            )
            fallback = self._talbot(times[diverged], lam)
            for i, value in zip(np.flatnonzero(diverged), fallback):
                result[i] = value
        return result

    def dt(self, t: float, lam: float) -> float:
        """
        Central difference of h in t
        """
        step = DIFF_STEP * t
        if step <= 0 or t - step <= 0:
            raise DomainError(f"Cannot difference h at t={t}")
        upper, lower = self.table([t + step, t - step], [lam])[0]
        return (upper.value - lower.value) / (2 * step)


def branch_cut_terms(m: MixingMeasure, r: Any, nodes: int) -> tuple[Any, Any]:
    """
    A(r) = int r^beta cos(beta pi) nu(dbeta) and B(r) with sin, i.e. the
    real and imaginary parts of psi_W on the upper side of the negative axis
    """
    rule = nu_rule(m, nodes)
    powers = np.power.outer(np.asarray(r, dtype=np.float64), rule.betas)
    a = powers @ (rule.nu_weights * np.cos(rule.betas * np.pi))
    b = powers @ (rule.nu_weights * np.sin(rule.betas * np.pi))
    return a, b


def phi_kernel(
    m: MixingMeasure, r: Any, lam: float, nodes: int = 64
) -> Any:
    """
    Phi(r, 1) = B / ((A + lambda)^2 + B^2)
    """
    a, b = branch_cut_terms(m, r, nodes)
    return b / ((a + lam) ** 2 + b**2)


def kochubei_integral(
    m: MixingMeasure,
    t: float,
    lam: float,
    tolerances: Tolerances = DEFAULT_TOLERANCES,
    derivative: bool = False,
) -> tuple[float, float, Route]:
    """
    h(t, lambda) = (lambda / pi) int_0^inf r^-1 exp(-t r) Phi(r, 1) dr, or
    d/dt h = -(lambda / pi) int_0^inf exp(-t r) Phi(r, 1) dr. The integral
    is split at r = 1 and at r = 1 / t.
    """
    if m.has_atoms or not m.has_density:
        raise UnsupportedCaseError(
            "The Kochubei route needs a pure density measure"
        )
    if t < 0 or (derivative and t == 0):
        raise DomainError(f"Invalid time {t} for the Kochubei integral")
    nodes = tolerances.beta_nodes

    def integrand(r: float) -> float:
        weight = math.exp(-t * r) if derivative else math.exp(-t * r) / r
        return float(weight * phi_kernel(m, r, lam, nodes))

    cuts = sorted({1.0, *([1 / t] if t > 0 else [])})
    bounds = [0.0, *cuts, np.inf]
    total = error = 0.0
    for low, high in zip(bounds, bounds[1:]):
        # full_output turns QUADPACK warnings into a returned message
        value, piece_error, _, *message = integrate.quad(
            integrand,
            low,
            high,
            epsabs=tolerances.quad_abs * 1e-2,
            epsrel=tolerances.quad_rel * 1e-2,
            limit=tolerances.quad_limit,
            full_output=1,
        )
        if message:
            logger.debug(
                f"Kochubei integral on [{low}, {high}]: {message[0]} "
                f"(error estimate {piece_error:.2e})"
            )
        total += value
        error += piece_error
    scale = lam / np.pi
    if error * scale > max(tolerances.quad_abs, tolerances.quad_rel * total):
        raise QuadratureError("Kochubei integral", error * scale, 0.0)
    sign = -1.0 if derivative else 1.0
    return sign * scale * total, scale * error, Route.KOCHUBEI


def h_eval(ev: HEvaluator, t: float, lam: float) -> float:
    return ev.h(t, lam)


def h_grid(ev: HEvaluator, times: Sequence[float], lam: float) -> FloatArray:
    return ev.h_grid(times, lam)


def h_dt_bound_check(
    ev: HEvaluator, t: float, lam: float
) -> DerivativeBound:
    """
    |d/dt h(t, lambda)| <= b(lambda) k(t) (1 + slack), d/dt h by central
    differences
    """
    values = {"t": t, "lambda": lam}
    if lam == 0:
        return DerivativeBound.from_bound(0.0, 0.0, values)
    if t <= 0:
        raise DomainError(f"The derivative bound needs t > 0, got {t}")
    tolerances = ev.get_tolerances()
    bounds = derivative_bounds(ev.get_measure(), tolerances)
    rhs = bounds.b(lam) * bounds.k(t) * (1 + tolerances.bound_slack)
    if DIFF_STEP * t < 1e-12:
        return DerivativeBound(
            CheckStatus.INCONCLUSIVE,
            {"lhs": float("nan"), "rhs": rhs, **values},
        )
    lhs = abs(ev.dt(t, lam))
    return DerivativeBound.from_bound(lhs, rhs, values)


def route_agreement(
    first: HEvaluator,
    second: HEvaluator,
    times: Sequence[float],
    lams: Sequence[float],
    tolerance: float,
) -> RouteAgreement:
    difference = np.max(
        np.abs(first.h_array(times, lams) - second.h_array(times, lams))
    )
    return RouteAgreement.from_bound(
        float(difference),
        tolerance,
        first=first.describe(),
        second=second.describe(),
    )


def eigen_residual(
    ev: HEvaluator,
    lam: float,
    t_end: float,
    steps: int,
    t_min: float,
    tolerance: float = 1e-3,
    grading: float = 1.0,
) -> EigenResidual:
    """
    max |D^(nu) h(., lambda)(t) + lambda h(t, lambda)| over grid times
    t >= t_min, the derivative by the L1 scheme on a grid graded towards 0
    """
    grid = graded_grid(t_end, steps, grading)
    dt = float(grid[-1] - grid[-2])
    series = TimeSeriesFn(grid, ev.h_grid(grid, lam))
    indices = np.flatnonzero(grid >= t_min)
    indices = indices[indices >= 1]
    if not indices.size:
        raise DomainError(f"No grid time in [{t_min}, {t_end}]")
    derivative = distributed_caputo_at_indices(
        series, ev.get_measure(), indices.tolist(), ev.get_tolerances()
    )
    residual = float(
        np.max(np.abs(derivative + lam * series.values[indices]))
    )
    logger.debug(f"Eigen residual {residual:.3e} at lambda={lam}, dt={dt:.2e}")
    return EigenResidual.from_bound(
        residual, tolerance, {"lambda": lam, "dt": dt}
    )
