import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from typing import Any

import numpy as np
from scipy import integrate, optimize, special, stats

from .mixing import ORDER_MARGIN, Atom, MixingMeasure
from .tools import (
    DomainError,
    FloatArray,
    InsufficientHorizonError,
    MonteCarloAgreement,
    UnsupportedCaseError,
)

logger = logging.getLogger(__name__)

MAX_STEPS = 1 << 20
INITIAL_STEPS = 256
MIN_DENSITY_PATHS = 1000
DEFAULT_LEVELS = 16


@dataclass(frozen=True)
class StableComponent:
    beta: float
    scale: float

    def __post_init__(self) -> None:
        if not ORDER_MARGIN < self.beta < 1 - ORDER_MARGIN:
            raise DomainError(
                f"Stable orders must lie in (0, 1), got {self.beta}"
            )
        if self.scale <= 0:
            raise DomainError(
                f"Stable scales must be positive, got {self.scale}"
            )


@dataclass(frozen=True)
class SubordinatorSpec:
    """
    W_t = sum_j c_j W_t^(beta_j). Density measures are quantised into
    `levels` atoms on Gauss-Legendre nodes.
    """

    components: tuple[StableComponent, ...]
    levels: int = 0

    def __post_init__(self) -> None:
        if not self.components:
            raise DomainError("A subordinator needs at least one component")

    @classmethod
    def single(cls, beta: float, scale: float = 1.0) -> "SubordinatorSpec":
        return cls((StableComponent(beta, scale),))

    @classmethod
    def from_measure(
        cls, m: MixingMeasure, levels: int = DEFAULT_LEVELS
    ) -> "SubordinatorSpec":
        atoms = list(m.atoms)
        if m.density is not None:
            x, w = special.roots_legendre(levels)
            low, high = m.density.beta0, m.density.beta1
            half = (high - low) / 2
            betas = low + half * (x + 1)
            weights = half * w * m.density(betas)
            atoms.extend(
                Atom(float(b), float(p))
                for b, p in zip(betas, weights)
                if p > 0
            )
        components = tuple(StableComponent(a.beta, a.scale) for a in atoms)
        return cls(components, levels if m.density is not None else 0)

    @property
    def betas(self) -> FloatArray:
        return np.array([c.beta for c in self.components])

    @property
    def scales(self) -> FloatArray:
        return np.array([c.scale for c in self.components])

    @property
    def is_single(self) -> bool:
        return len(self.components) == 1

    def measure(self) -> MixingMeasure:
        return MixingMeasure.from_scales(
            (c.beta, c.scale) for c in self.components
        )

    def psi(self, s: Any) -> Any:
        """
        sum_j c_j^beta_j s^beta_j
        """
        s_array = np.asarray(s, dtype=np.float64)
        result = sum(
            c.scale**c.beta * s_array**c.beta for c in self.components
        )
        return float(result) if np.ndim(s) == 0 else np.asarray(result)

    def to_dict(self) -> dict[str, Any]:
        return {
            "components": [
                {"beta": c.beta, "scale": c.scale} for c in self.components
            ],
            "levels": self.levels,
        }


@dataclass(frozen=True, eq=False)
class SubordinatorPath:
    grid: FloatArray
    values: FloatArray = field(repr=False)

    def __post_init__(self) -> None:
        if self.values[0] != 0 or np.any(np.diff(self.values) < 0):
            raise DomainError(
                "Subordinator paths start at 0 and never decrease"
            )

    @property
    def step(self) -> float:
        return float(self.grid[1] - self.grid[0])


def standard_stable(
    beta: float, rng: np.random.Generator, size: Any = None
) -> Any:
    """
    One-sided stable S with E[exp(-s S)] = exp(-s^beta), by Kanter's
    representation
    """
    u = rng.uniform(0.0, 1.0, size)
    e = rng.standard_exponential(size)
    return (
        np.sin(beta * np.pi * u)
        / np.sin(np.pi * u) ** (1 / beta)
        * (np.sin((1 - beta) * np.pi * u) / e) ** ((1 - beta) / beta)
    )


def sample_stable_increment(
    beta: float, dt: float, rng: np.random.Generator, size: Any = None
) -> Any:
    if not 0 < beta < 1:
        raise DomainError(f"Stable orders must lie in (0, 1), got {beta}")
    if dt <= 0:
        raise DomainError(f"Increments need dt > 0, got {dt}")
    return dt ** (1 / beta) * standard_stable(beta, rng, size)


def sample_increments(
    spec: SubordinatorSpec,
    step: float,
    shape: tuple[int, ...],
    rng: np.random.Generator,
) -> FloatArray:
    """
    Increments of W over cells of length `step`, components drawn in order
    """
    total = np.zeros(shape)
    for component in spec.components:
        total += component.scale * sample_stable_increment(
            component.beta, step, rng, shape
        )
    return total


def sample_marginal(
    spec: SubordinatorSpec, t: float, count: int, rng: np.random.Generator
) -> FloatArray:
    """
    Exact draws of W_t
    """
    return sample_increments(spec, t, (count,), rng)


def increment_scale(spec: SubordinatorSpec, step: float) -> float:
    """
    Typical size of an increment of W over one step: 1 / s where
    step psi(s) = 1
    """
    if step <= 0:
        raise DomainError(f"Increments need a positive step, got {step}")
    betas, scales = spec.betas, spec.scales
    high = float(np.min(step ** (-1 / betas) / scales))
    if spec.is_single:
        return 1 / high
    # psi(low) <= 1 / step <= psi(high)
    low = float(np.min((len(betas) * step) ** (-1 / betas) / scales))
    root = optimize.brentq(
        lambda u: np.log(spec.psi(np.exp(u)) * step),
        np.log(low),
        np.log(high),
    )
    return float(np.exp(-root))


def sample_path(
    spec: SubordinatorSpec,
    horizon: float,
    step: float,
    rng: np.random.Generator,
    target: float | None = None,
) -> SubordinatorPath:
    """
    W on {k step}, up to the horizon and further (doubling) until W exceeds
    `target` when one is given
    """
    values = sample_paths(spec, horizon, step, 1, rng, target)[0]
    grid = step * np.arange(values.size)
    return SubordinatorPath(grid, values)


def sample_paths(
    spec: SubordinatorSpec,
    horizon: float,
    step: float,
    count: int,
    rng: np.random.Generator,
    target: float | None = None,
) -> FloatArray:
    """
    `count` paths on a shared grid, shape (count, steps + 1)
    """
    if horizon <= 0 or step <= 0:
        raise DomainError("Paths need a positive horizon and step")
    if step > horizon:
        raise DomainError(f"Step {step} exceeds the horizon {horizon}")
    steps = int(np.ceil(horizon / step - 1e-9))
    increments = sample_increments(spec, step, (count, steps), rng)
    values = np.concatenate(
        [np.zeros((count, 1)), np.cumsum(increments, axis=1)], axis=1
    )
    while target is not None and np.min(values[:, -1]) <= target:
        extra = values.shape[1] - 1
        if 2 * extra > MAX_STEPS:
            raise InsufficientHorizonError(
                f"W did not exceed {target} within {MAX_STEPS} steps"
            )
        increments = sample_increments(spec, step, (count, extra), rng)
        values = np.concatenate(
            [values, values[:, -1:] + np.cumsum(increments, axis=1)], axis=1
        )
        logger.debug(f"Extended subordinator paths to {2 * extra} steps")
    return values


def inverse_at(path: SubordinatorPath, t: float) -> float:
    """
    First grid time at which W strictly exceeds t
    """
    if t < 0:
        raise DomainError(f"E_t needs t >= 0, got {t}")
    index = int(np.searchsorted(path.values, t, side="right"))
    if index >= path.values.size:
        raise InsufficientHorizonError(
            f"The path stays below {t} up to its horizon {path.grid[-1]}"
        )
    return float(path.grid[index])


def sample_inverse(
    spec: SubordinatorSpec,
    times: Sequence[float],
    step: float,
    paths: int,
    rng: np.random.Generator,
) -> FloatArray:
    """
    E_t for several t on `paths` independent paths, shape (paths, len(times)).
    Paths are extended chunk by chunk, doubling the simulated horizon for
    those that have not passed max(times) yet.
    """
    t_array = np.asarray(times, dtype=np.float64)
    if np.any(t_array < 0):
        raise DomainError("E_t needs t >= 0")
    if step <= 0:
        raise DomainError(f"Steps must be positive, got {step}")
    result = np.full((paths, t_array.size), np.nan)
    level = np.zeros(paths)
    active = np.arange(paths)
    done_steps, chunk = 0, INITIAL_STEPS
    target = float(np.max(t_array)) if t_array.size else 0.0
    while active.size:
        if done_steps + chunk > MAX_STEPS:
            raise InsufficientHorizonError(
                f"{active.size} paths stayed below {target} within "
                f"{MAX_STEPS} steps"
            )
        increments = sample_increments(spec, step, (active.size, chunk), rng)
        values = level[active, None] + np.cumsum(increments, axis=1)
        for column, t in enumerate(t_array):
            pending = np.isnan(result[active, column])
            crossed = values > t
            hit = pending & np.any(crossed, axis=1)
            first = np.argmax(crossed, axis=1)
            result[active[hit], column] = step * (
                done_steps + first[hit] + 1
            )
        level[active] = values[:, -1]
        done_steps += chunk
        active = active[np.any(np.isnan(result[active]), axis=1)]
        chunk *= 2
    return result


@dataclass(frozen=True, eq=False)
class DensityEstimate:
    """
    Histogram (and optional kernel) estimate of the law of E_t
    """

    t: float
    edges: FloatArray
    density: FloatArray
    samples: FloatArray = field(repr=False)
    step: float
    kde: FloatArray | None = None

    @property
    def centers(self) -> FloatArray:
        return (self.edges[:-1] + self.edges[1:]) / 2

    @property
    def paths(self) -> int:
        return int(self.samples.size)

    def mass(self) -> float:
        return float(np.sum(self.density * np.diff(self.edges)))

    def kde_mass(self) -> float:
        if self.kde is None:
            return float("nan")
        return float(integrate.trapezoid(self.kde, self.centers))

    def cdf(self, x: float) -> float:
        return float(np.mean(self.samples <= x))

    def laplace(self, lam: float) -> tuple[float, float]:
        """
        int exp(-lambda x) g(x) dx from the histogram, integrated exactly
        per bin, with the standard error of the underlying sample mean
        """
        if lam == 0:
            return self.mass(), 0.0
        low, high = self.edges[:-1], self.edges[1:]
        per_bin = (np.exp(-lam * low) - np.exp(-lam * high)) / lam
        value = float(np.sum(self.density * per_bin))
        se = float(np.std(np.exp(-lam * self.samples), ddof=1))
        return value, se / np.sqrt(self.paths)

    def to_dict(self) -> dict[str, Any]:
        return {
            "t": self.t,
            "paths": self.paths,
            "step": self.step,
            "mass": self.mass(),
            "edges": self.edges.tolist(),
            "density": self.density.tolist(),
        }


def estimate_g(
    spec: SubordinatorSpec,
    t: float,
    paths: int,
    rng: np.random.Generator,
    step: float = 1e-3,
    kde: bool = False,
) -> DensityEstimate:
    if t <= 0:
        raise DomainError(f"g(t, .) needs t > 0, got {t}")
    if paths < MIN_DENSITY_PATHS:
        logger.warning(
            f"Only {paths} paths for the density of E_t, bands are wide"
        )
    samples = sample_inverse(spec, [t], step, paths, rng)[:, 0]
    edges = np.histogram_bin_edges(
        samples, bins="fd", range=(0, samples.max())
    )
    density, edges = np.histogram(samples, bins=edges, density=True)
    kde_values = None
    if kde and np.ptp(samples) > 0:
        centers = (edges[:-1] + edges[1:]) / 2
        kde_values = stats.gaussian_kde(samples)(centers)
    return DensityEstimate(t, edges, density, samples, step, kde_values)


def g_density(spec: SubordinatorSpec, t: float, x: Any) -> Any:
    """
    Density of E_t for a single component c W^beta: E_t = (t / (c S))^beta
    with S standard one-sided stable
    """
    if not spec.is_single:
        raise UnsupportedCaseError(
            "The density of E_t is only available for one stable component",
            hint="use estimate_g",
        )
    if t <= 0:
        raise DomainError(f"g(t, .) needs t > 0, got {t}")
    component = spec.components[0]
    beta, c = component.beta, component.scale
    x_array = np.asarray(x, dtype=np.float64)
    result = np.zeros(x_array.shape)
    positive = x_array > 0
    xp = x_array[positive]
    argument = t / (c * xp ** (1 / beta))
    law = stats.levy_stable(
        beta, 1.0, loc=0.0, scale=np.cos(np.pi * beta / 2) ** (1 / beta)
    )
    result[positive] = law.pdf(argument) * argument / (beta * xp)
    return float(result) if np.ndim(x) == 0 else result


@dataclass(frozen=True)
class LaplaceRow:
    s: float
    mean: float
    se: float
    exact: float

    @property
    def z(self) -> float:
        if self.se == 0:
            return 0.0 if self.mean == self.exact else float("inf")
        return (self.mean - self.exact) / self.se


def laplace_table(
    spec: SubordinatorSpec,
    s_values: Sequence[float],
    t: float,
    paths: int,
    rng: np.random.Generator,
) -> list[LaplaceRow]:
    """
    Empirical E[exp(-s W_t)] against exp(-t psi_W(s))
    """
    draws = sample_marginal(spec, t, paths, rng)
    rows = []
    for s in s_values:
        values = np.exp(-s * draws)
        rows.append(
            LaplaceRow(
                float(s),
                float(values.mean()),
                float(values.std(ddof=1) / np.sqrt(paths)),
                float(np.exp(-t * spec.psi(s))),
            )
        )
    return rows


def inverse_relation_check(
    spec: SubordinatorSpec,
    t: float,
    x: float,
    paths: int,
    step: float,
    rng: np.random.Generator,
) -> MonteCarloAgreement:
    """
    P(E_t <= x) from first passages against P(W_x >= t) from exact
    marginals, two independent estimators of the same probability
    """
    inverse = sample_inverse(spec, [t], step, paths, rng)[:, 0]
    first = float(np.mean(inverse <= x + step * 1e-9))
    second = float(np.mean(sample_marginal(spec, x, paths, rng) >= t))
    se = np.sqrt(
        (first * (1 - first) + second * (1 - second)) / max(paths - 1, 1)
    )
    return MonteCarloAgreement.from_bound(
        abs(first - second),
        3 * se,
        {"first": first, "second": second, "se": float(se)},
    )
