"""
Series solution u(t, x) = sum_n f(n) phi_n(x) h(t, lambda_n) of the
distributed-order Cauchy problem with Dirichlet boundary conditions, and
the checks of its defining properties.
"""
import csv
import logging
from collections.abc import Sequence
from dataclasses import dataclass
from enum import StrEnum
from pathlib import Path
from typing import Any

import numpy as np

from .eigenbasis import (
    BoxDomain,
    InitialDatum,
    SpectralCoefficients,
    eigen_matrix,
    eigenvalue_growth,
    project,
)
from .fracops import distributed_caputo_matrix, graded_grid
from .hkernel import HEvaluator, Route
from .mixing import MixingMeasure, derivative_bounds
from .subordinate import DensityEstimate
from .tools import (
    DEFAULT_TOLERANCES,
    BoundaryCondition,
    CheckStatus,
    ClassicalHypothesis,
    DecayEstimate,
    DerivativeBound,
    DomainError,
    FloatArray,
    FracboundError,
    InitialDatumCheck,
    SpectralResidual,
    Tolerances,
    TruncationWarning,
)

logger = logging.getLogger(__name__)

# Coefficients below this fraction of the largest are treated as zero
NEGLIGIBLE = 1e-13
DECAY_SLACK = 1e-6
FINE_STEP = 1e-3
CLASSICAL_GROWTH = 1e-2
DEFAULT_MAX_MODES = 512
MIN_FIT_POINTS = 4


class TailKind(StrEnum):
    SUP = "sup"
    PARSEVAL = "parseval"


@dataclass(frozen=True)
class DecayFit:
    """
    |f(n)| <= constant * lambda_n^-exponent, fitted on the upper envelope
    of the computed coefficients
    """

    exponent: float
    constant: float
    estimable: bool
    exhausted: bool = False

    def sup_tail(self, dom: BoxDomain, count: int) -> float:
        """
        sup|phi| sum_{n > count} constant lambda_n^-exponent, with Weyl
        growth lambda_n >= c n^(2/d)
        """
        if self.exhausted:
            return 0.0
        power = 2 * self.exponent / dom.dims
        if not self.estimable or power <= 1:
            return float("inf")
        growth = eigenvalue_growth(dom, max(count, 1))
        sup = float(np.prod([np.sqrt(2 / s) for s in dom.sides]))
        return float(
            sup
            * self.constant
            * growth ** (-self.exponent)
            * count ** (1 - power)
            / (power - 1)
        )


def fit_decay(coefficients: SpectralCoefficients) -> DecayFit:
    magnitudes = np.abs(coefficients.coefficients)
    largest = float(magnitudes.max()) if magnitudes.size else 0.0
    if largest == 0:
        return DecayFit(np.inf, 0.0, True, exhausted=True)
    envelope = np.maximum.accumulate(magnitudes[::-1])[::-1]
    significant = envelope > NEGLIGIBLE * largest
    if not significant[-1]:
        return DecayFit(np.inf, 0.0, True, exhausted=True)
    lams = coefficients.lams
    start = magnitudes.size // 2
    x, y = np.log(lams[start:]), np.log(envelope[start:])
    if x.size < MIN_FIT_POINTS or np.ptp(x) == 0:
        return DecayFit(0.0, largest, False)
    slope = float(np.polyfit(x, y, 1)[0])
    # Constant so that the fitted line bounds the whole envelope tail
    constant = float(np.max(envelope[start:] * lams[start:] ** -slope))
    return DecayFit(float(-slope), constant, bool(-slope > 0))


@dataclass(frozen=True)
class TruncationChoice:
    count: int
    fit: DecayFit
    tail: float
    warning: TruncationWarning | None = None


def _abs_tails(coefficients: SpectralCoefficients) -> FloatArray:
    """
    sup|phi| sum_{n > N} |f(n)| for N = 0 .. len - 1 (within the computed
    coefficients)
    """
    sup = coefficients.eigens[0].sup_norm
    magnitudes = np.abs(coefficients.coefficients)
    return sup * (np.cumsum(magnitudes[::-1])[::-1] - magnitudes)


def choose_truncation(
    dom: BoxDomain,
    f: InitialDatum,
    target_tail: float,
    max_count: int = DEFAULT_MAX_MODES,
) -> TruncationChoice:
    """
    Smallest N whose estimated tail sup|phi| sum_{n > N} |f(n)| is below
    the target, the tail beyond `max_count` extrapolated from the fitted
    power decay
    """
    if target_tail <= 0:
        raise DomainError("The target tail must be positive")
    coefficients = project(dom, f, max_count)
    fit = fit_decay(coefficients)
    magnitudes = np.abs(coefficients.coefficients)
    noise = NEGLIGIBLE * float(magnitudes.max(initial=0.0))
    if fit.exhausted:
        nonzero = np.flatnonzero(magnitudes > noise)
        count = int(nonzero[-1]) + 1 if nonzero.size else 1
        return TruncationChoice(count, fit, 0.0)
    beyond = fit.sup_tail(dom, max_count)
    if not np.isfinite(beyond):
        reason = (
            "coefficients do not decay like a power of lambda fast enough "
            "for uniform convergence, no classical guarantee"
        )
        logger.warning(f"Falling back to N={max_count}: {reason}")
        tail = float(_abs_tails(coefficients)[-1])
        warning = TruncationWarning(
            CheckStatus.FAILED,
            {"n": max_count, "lhs": tail, "decay": fit.exponent},
            {"reason": reason},
        )
        return TruncationChoice(max_count, fit, tail, warning)
    tails = _abs_tails(coefficients) + beyond
    below = np.flatnonzero(tails < target_tail)
    if not below.size:
        reason = f"the tail target {target_tail:.1e} needs more modes"
        logger.warning(f"Falling back to N={max_count}: {reason}")
        warning = TruncationWarning(
            CheckStatus.FAILED,
            {"n": max_count, "lhs": float(tails[-1])},
            {"reason": reason},
        )
        return TruncationChoice(max_count, fit, float(tails[-1]), warning)
    count = int(below[0]) + 1
    logger.debug(
        f"Truncating at N={count}, fitted decay exponent {fit.exponent:.3g}"
    )
    return TruncationChoice(count, fit, float(tails[below[0]]), None)


class SpectralSolution:
    """
    The truncated series, with the data needed to evaluate it and to bound
    what was left out
    """

    def __init__(
        self,
        datum: InitialDatum,
        coefficients: SpectralCoefficients,
        evaluator: HEvaluator,
    ) -> None:
        super().__init__()
        self._datum = datum
        self._coefficients = coefficients
        self._evaluator = evaluator
        self._fit = fit_decay(coefficients)
        tail = self._fit.sup_tail(coefficients.domain, coefficients.count)
        if np.isfinite(tail):
            self._tail_kind = TailKind.SUP
            self._tail = tail
        else:
            self._tail_kind = TailKind.PARSEVAL
            self._tail = coefficients.tail_bound()

    def __repr__(self) -> str:
        return (
            f"SpectralSolution(N={self.count}, datum={self._datum.kind}, "
            f"route={self._evaluator.describe()})"
        )

    def __call__(self, t: float, x: Any) -> float:
        return float(self.values([t], x)[0, 0])

    @property
    def count(self) -> int:
        return self._coefficients.count

    @property
    def lams(self) -> FloatArray:
        return self._coefficients.lams

    def get_domain(self) -> BoxDomain:
        return self._coefficients.domain

    def get_datum(self) -> InitialDatum:
        return self._datum

    def get_coefficients(self) -> SpectralCoefficients:
        return self._coefficients

    def get_evaluator(self) -> HEvaluator:
        return self._evaluator

    def get_measure(self) -> MixingMeasure:
        return self._evaluator.get_measure()

    def get_decay_fit(self) -> DecayFit:
        return self._fit

    def get_tail_bound(self) -> float:
        return self._tail

    def get_tail_kind(self) -> TailKind:
        return self._tail_kind

    def h_table(self, times: Sequence[float]) -> FloatArray:
        """
        h(t_k, lambda_n), shape (N, K)
        """
        rows = []
        for n, lam in enumerate(self.lams):
            try:
                rows.append(self._evaluator.h_grid(times, float(lam)))
            except FracboundError as e:
                e.add_note(f"while evaluating h at lambda_{n + 1}={lam}")
                raise
        return np.array(rows).reshape(self.count, len(times))

    def h_errors(self, times: Sequence[float]) -> FloatArray:
        table = self._evaluator.table(times, self.lams)
        return np.array([[x.error for x in row] for row in table])

    def series(
        self,
        times: Sequence[float],
        points: Any,
        weights: FloatArray | None = None,
    ) -> FloatArray:
        """
        sum_n w_n f(n) phi_n(x) h(t, lambda_n), shape (K, P)
        """
        phi = eigen_matrix(self._coefficients.eigens, points)
        factors = self._coefficients.coefficients
        if weights is not None:
            factors = factors * weights
        return self.h_table(times).T @ (factors[:, None] * phi)

    def values(self, times: Sequence[float], points: Any) -> FloatArray:
        """
        u(t_k, x_p), shape (K, P). Rows at t = 0 are f itself.
        """
        t_array = np.asarray(times, dtype=np.float64)
        result = self.series(t_array, points)
        initial = t_array == 0
        if np.any(initial):
            result[initial] = self._datum.evaluate(
                self.get_domain(), points
            )[None, :]
        return result

    def laplacian(self, times: Sequence[float], points: Any) -> FloatArray:
        """
        Laplacian u = -sum_n lambda_n f(n) phi_n(x) h(t, lambda_n)
        """
        return -self.series(times, points, self.lams)


def solve(
    dom: BoxDomain,
    f: InitialDatum,
    m: MixingMeasure,
    count: int,
    tolerances: Tolerances = DEFAULT_TOLERANCES,
    route: Route = Route.AUTO,
) -> SpectralSolution:
    if count < 1:
        raise DomainError("The truncation needs at least one mode")
    coefficients = project(dom, f, count)
    evaluator = HEvaluator(m, route, tolerances)
    solution = SpectralSolution(f, coefficients, evaluator)
    logger.debug(
        f"Assembled {solution}, tail bound {solution.get_tail_bound():.3e} "
        f"({solution.get_tail_kind()})"
    )
    return solution


def l2_norm(sol: SpectralSolution, t: float) -> float:
    """
    ||u(t, .)||_2 of the truncated series, by Parseval
    """
    h = sol.h_table([t])[:, 0]
    coefficients = sol.get_coefficients().coefficients
    return float(np.sqrt(np.sum((coefficients * h) ** 2)))


def verify_residual(
    sol: SpectralSolution,
    t_end: float,
    steps: int,
    t_min: float,
    x_samples: Any,
    tolerance: float = 1e-3,
    grading: float = 1.0,
) -> SpectralResidual:
    """
    max |D^(nu) u - Laplacian u| / max |Laplacian u| over grid times in
    [t_min, t_end] and the sample points, the time derivative by the L1
    scheme on u sampled from 0 on a grid graded with the given exponent
    """
    if t_min <= 0:
        raise DomainError("Residuals are only checked away from t = 0")
    grid = graded_grid(t_end, steps, grading)
    indices = np.flatnonzero(grid >= t_min)
    if not indices.size:
        raise DomainError(f"No grid time in [{t_min}, {t_end}]")
    u = sol.series(grid, x_samples)
    derivative = distributed_caputo_matrix(
        grid,
        u,
        sol.get_measure(),
        indices.tolist(),
        sol.get_evaluator().get_tolerances(),
    )
    laplacian = sol.laplacian(grid[indices], x_samples)
    scale = float(np.max(np.abs(laplacian), initial=0.0))
    difference = float(
        np.max(np.abs(derivative - laplacian), initial=0.0)
    )
    residual = difference / scale if scale > 0 else difference
    dt = float(grid[-1] - grid[-2])
    values = {"lhs": residual, "rhs": tolerance, "dt": dt}
    if residual <= tolerance:
        status = CheckStatus.PASSED
    elif dt > FINE_STEP:
        status = CheckStatus.INCONCLUSIVE
    else:
        status = CheckStatus.FAILED
    logger.debug(f"Spectral residual {residual:.3e} at dt={dt}")
    return SpectralResidual(status, values)


def decay_check(
    sol: SpectralSolution, times: Sequence[float]
) -> DecayEstimate:
    """
    ||u(t, .)|| <= h(t, lambda_1) ||f||
    """
    coefficients = sol.get_coefficients()
    norm_f = np.sqrt(coefficients.norm_sq)
    if norm_f == 0:
        return DecayEstimate.from_bound(0.0, 1 + DECAY_SLACK)
    first = coefficients.eigens[0].lam
    ratios = [
        l2_norm(sol, t) / (sol.get_evaluator().h(t, first) * norm_f)
        for t in times
    ]
    return DecayEstimate.from_bound(max(ratios), 1 + DECAY_SLACK)


def initial_datum_check(
    sol: SpectralSolution, times: Sequence[float] = (1e-1, 1e-2, 1e-3)
) -> InitialDatumCheck:
    """
    ||u(t, .) - f|| decreasing along a decreasing sequence of times
    """
    coefficients = sol.get_coefficients()
    ordered = sorted(times, reverse=True)
    h = sol.h_table(ordered)
    residual = max(coefficients.parseval_residual, 0.0)
    distances = np.sqrt(
        np.sum((coefficients.coefficients[:, None] * (1 - h)) ** 2, axis=0)
        + residual
    )
    values = {f"distance_{i}": float(d) for i, d in enumerate(distances)}
    increase = float(np.max(np.diff(distances), initial=0.0))
    return InitialDatumCheck.from_bound(increase, 0.0, values)


def boundary_check(
    sol: SpectralSolution,
    times: Sequence[float],
    per_axis: int = 9,
) -> BoundaryCondition:
    samples = sol.get_domain().boundary_samples(per_axis)
    positive = [t for t in times if t > 0]
    largest = float(np.max(np.abs(sol.series(positive, samples)), initial=0))
    tolerances = sol.get_evaluator().get_tolerances()
    return BoundaryCondition.from_bound(
        largest, sol.get_tail_bound() + tolerances.boundary_eps
    )


def classical_hypothesis(sol: SpectralSolution) -> ClassicalHypothesis:
    """
    Heuristic for the uniform and absolute convergence of the expansion of
    the Laplacian of f: growth of the partial sums of
    lambda_n |f(n)| sup|phi_n| over the last quarter of the modes
    """
    coefficients = sol.get_coefficients()
    sup = coefficients.eigens[0].sup_norm
    partial = np.cumsum(coefficients.lams * np.abs(coefficients.coefficients))
    partial *= sup
    total = float(partial[-1])
    reference = 0.0
    if partial.size > 3:
        reference = float(partial[(3 * partial.size) // 4 - 1])
    growth = (total - reference) / total if total > 0 else 0.0
    # The modes carry all of f: the expansion is finite
    exhausted = coefficients.parseval_residual <= (
        NEGLIGIBLE * coefficients.norm_sq
    )
    if sol.get_decay_fit().exhausted or exhausted:
        growth = 0.0
    report = ClassicalHypothesis.from_bound(
        growth, CLASSICAL_GROWTH, {"decay": sol.get_decay_fit().exponent}
    )
    if not report.passed():
        logger.warning(f"Classical hypothesis not met numerically: {report}")
    return report


def _h_derivatives(sol: SpectralSolution, t: float) -> FloatArray:
    evaluator = sol.get_evaluator()
    return np.array([evaluator.dt(t, float(lam)) for lam in sol.lams])


def time_derivative_bound(
    sol: SpectralSolution, t: float, x: Any
) -> DerivativeBound:
    """
    |d/dt u(t, x)| <= k(t) sum_n lambda_n |f(n)| |phi_n(x)|
    """
    if t <= 0:
        raise DomainError(f"The derivative bound needs t > 0, got {t}")
    coefficients = sol.get_coefficients()
    phi = eigen_matrix(coefficients.eigens, x)[:, 0]
    derivative = float(
        np.sum(coefficients.coefficients * phi * _h_derivatives(sol, t))
    )
    tolerances = sol.get_evaluator().get_tolerances()
    bounds = derivative_bounds(sol.get_measure(), tolerances)
    g = float(
        np.sum(coefficients.lams * np.abs(coefficients.coefficients * phi))
    )
    rhs = bounds.k(t) * g * (1 + tolerances.bound_slack)
    return DerivativeBound.from_bound(abs(derivative), rhs, {"t": t})


def subordinated_value(
    sol: SpectralSolution, estimate: DensityEstimate, x: Any
) -> float:
    """
    u(t, x) = int T_D(l) f(x) g(t, l) dl with the semigroup expanded on the
    eigenbasis and g the estimated density of E_t
    """
    coefficients = sol.get_coefficients()
    phi = eigen_matrix(coefficients.eigens, x)[:, 0]
    transforms = np.array(
        [estimate.laplace(float(lam))[0] for lam in coefficients.lams]
    )
    return float(np.sum(coefficients.coefficients * phi * transforms))


@dataclass(frozen=True, eq=False)
class SolutionField:
    times: FloatArray
    points: FloatArray
    values: FloatArray
    errors: FloatArray

    def __post_init__(self) -> None:
        if not np.all(np.isfinite(self.values)):
            raise DomainError("The solution field has non-finite values")

    def header(self) -> list[str]:
        dims = self.points.shape[1]
        return ["t", *[f"x{i + 1}" for i in range(dims)], "u", "err"]

    def rows(self) -> list[list[float]]:
        result = []
        for k, t in enumerate(self.times):
            for p, point in enumerate(self.points):
                result.append(
                    [
                        float(t),
                        *[float(x) for x in point],
                        float(self.values[k, p]),
                        float(self.errors[k, p]),
                    ]
                )
        return result

    def write_csv(self, path: Path) -> None:
        with open(path, "w", newline="") as f:
            writer = csv.writer(f)
            writer.writerow(self.header())
            for row in self.rows():
                writer.writerow([repr(x) for x in row])


def field(
    sol: SpectralSolution, times: Sequence[float], points: Any
) -> SolutionField:
    """
    u on a (time, point) grid with per-value error estimates: truncation
    tail plus the propagated h errors
    """
    dom = sol.get_domain()
    point_array = dom.as_points(points)
    if np.any(dom.distance_to_boundary(point_array) < 0):
        raise DomainError("Field points must lie in the closed box")
    t_array = np.asarray(times, dtype=np.float64)
    values = sol.values(t_array, point_array)
    phi = np.abs(eigen_matrix(sol.get_coefficients().eigens, point_array))
    weights = np.abs(sol.get_coefficients().coefficients)[:, None] * phi
    errors = sol.h_errors(t_array).T @ weights + sol.get_tail_bound()
    errors[t_array == 0] = 0.0
    return SolutionField(t_array, point_array, values, errors)
