"""
Dirichlet Laplacian spectral data on axis-aligned boxes prod (0, M_i), the
initial data that can be expanded on it, and the killed heat kernel.
"""
import logging
from collections.abc import Sequence
from dataclasses import dataclass, field
from functools import lru_cache
from typing import Any

import numpy as np
from scipy import interpolate, special

from .tools import DomainError, FloatArray, QuadratureError

logger = logging.getLogger(__name__)

MultiIndex = tuple[int, ...]

MAX_DIMENSION = 3
MIN_PANEL_NODES = 24
NODES_PER_OSCILLATION = 4
# Kernel tail terms below this are treated as converged
TAIL_CUTOFF = 1e-18
MAX_TAIL_MODES = 1 << 16


@dataclass(frozen=True)
class BoxDomain:
    sides: tuple[float, ...]

    def __post_init__(self) -> None:
        object.__setattr__(self, "sides", tuple(float(x) for x in self.sides))
        if not 1 <= len(self.sides) <= MAX_DIMENSION:
            raise DomainError(
                f"Boxes have 1 to {MAX_DIMENSION} dimensions, "
                f"got {len(self.sides)}"
            )
        if any(x <= 0 for x in self.sides):
            raise DomainError("Box sides must be strictly positive")

    @classmethod
    def interval(cls, length: float) -> "BoxDomain":
        return cls((length,))

    @property
    def dims(self) -> int:
        return len(self.sides)

    @property
    def volume(self) -> float:
        return float(np.prod(self.sides))

    def as_points(self, points: Any) -> FloatArray:
        """
        Normalises points to shape (P, d)
        """
        array = np.asarray(points, dtype=np.float64)
        if array.ndim == 0 or (array.ndim == 1 and self.dims > 1):
            array = array.reshape(1, -1)
        if array.ndim == 1:
            array = array.reshape(-1, 1)
        if array.shape[-1] != self.dims:
            raise DomainError(
                f"Points must have {self.dims} coordinates, "
                f"got shape {array.shape}"
            )
        return array.reshape(-1, self.dims)

    def contains(self, points: Any) -> Any:
        """
        Strict interior membership, per point
        """
        array = self.as_points(points)
        sides = np.asarray(self.sides)
        return np.all((array > 0) & (array < sides), axis=1)

    def distance_to_boundary(self, points: Any) -> FloatArray:
        array = self.as_points(points)
        sides = np.asarray(self.sides)
        return np.min(np.minimum(array, sides - array), axis=1)

    def boundary_samples(self, per_axis: int = 9) -> FloatArray:
        """
        Points on every face, on a regular grid of the other coordinates
        """
        samples = []
        for axis, side in enumerate(self.sides):
            others = [
                np.linspace(0, s, per_axis)
                for a, s in enumerate(self.sides)
                if a != axis
            ]
            mesh = (
                np.stack(np.meshgrid(*others, indexing="ij"), axis=-1)
                .reshape(-1, self.dims - 1)
                if others
                else np.zeros((1, 0))
            )
            for value in (0.0, side):
                face = np.insert(mesh, axis, value, axis=1)
                samples.append(face)
        return np.concatenate(samples, axis=0)

    def to_dict(self) -> dict[str, Any]:
        return {"sides": list(self.sides)}


def eigenvalue_of(dom: BoxDomain, index: MultiIndex) -> float:
    return float(
        sum((n * np.pi / side) ** 2 for n, side in zip(index, dom.sides))
    )


def eigenfunction_values(
    dom: BoxDomain, index: MultiIndex, points: Any
) -> FloatArray:
    array = dom.as_points(points)
    values = np.ones(array.shape[0])
    for axis, (n, side) in enumerate(zip(index, dom.sides)):
        values *= np.sqrt(2 / side) * np.sin(n * np.pi * array[:, axis] / side)
    return values


@dataclass(frozen=True)
class EigenPair:
    index: MultiIndex
    lam: float
    domain: BoxDomain = field(repr=False)

    def __call__(self, points: Any) -> FloatArray:
        return eigenfunction_values(self.domain, self.index, points)

    @property
    def sup_norm(self) -> float:
        return float(np.prod([np.sqrt(2 / s) for s in self.domain.sides]))


@lru_cache(maxsize=32)
def _enumerate(dom: BoxDomain, count: int) -> tuple[EigenPair, ...]:
    sides = np.asarray(dom.sides)
    base = (np.pi / sides) ** 2
    per_axis = max(1, int(np.ceil(count ** (1 / dom.dims))))
    while True:
        ranges = [np.arange(1, per_axis + 1)] * dom.dims
        mesh = np.stack(np.meshgrid(*ranges, indexing="ij"), axis=-1).reshape(
            -1, dom.dims
        )
        lams = (mesh**2 * base).sum(axis=1)
        # Sort by eigenvalue, then lexicographically on the multi-index
        order = np.lexsort(
            tuple(mesh[:, a] for a in reversed(range(dom.dims))) + (lams,)
        )
        candidates = order[:count]
        worst = lams[candidates[-1]] if candidates.size == count else np.inf
        # Anything with a component beyond per_axis is at least this large
        excluded = min(
            ((per_axis + 1) ** 2 - 1) * base[a] + base.sum()
            for a in range(dom.dims)
        )
        if candidates.size == count and worst < excluded:
            break
        per_axis *= 2
    return tuple(
        EigenPair(
            tuple(int(x) for x in mesh[i]), float(lams[i]), dom
        )
        for i in candidates
    )


def enumerate_eigens(dom: BoxDomain, count: int) -> list[EigenPair]:
    """
    First `count` Dirichlet eigenpairs, sorted by eigenvalue with a
    lexicographic tie-break on the multi-index
    """
    if count < 1:
        raise DomainError("At least one eigenpair must be requested")
    return list(_enumerate(dom, count))


def eigen_matrix(eigens: Sequence[EigenPair], points: Any) -> FloatArray:
    """
    phi_n(x_p), shape (len(eigens), P)
    """
    if not eigens:
        return np.zeros((0, 0))
    dom = eigens[0].domain
    array = dom.as_points(points)
    return np.stack(
        [eigenfunction_values(dom, e.index, array) for e in eigens]
    )


def eigenvalue_growth(dom: BoxDomain, count: int) -> float:
    """
    Largest c with lambda_n >= c n^(2/d) over the first `count` eigenvalues
    """
    lams = np.array([e.lam for e in enumerate_eigens(dom, count)])
    n = np.arange(1, count + 1)
    return float(np.min(lams / n ** (2 / dom.dims)))


class InitialDatum:
    """
    Base class for initial data f. Subclasses are plain dataclasses so that
    they can be shipped to worker processes.
    """

    kind: str = ""
    # Whether the eigen-expansion of the Laplacian of f can be expected to
    # converge uniformly and absolutely
    is_classical: bool = True

    def evaluate(self, dom: BoxDomain, points: Any) -> FloatArray:
        raise NotImplementedError

    def breakpoints(self, dom: BoxDomain, axis: int) -> list[float]:
        return []

    def to_dict(self) -> dict[str, Any]:
        raise NotImplementedError


@dataclass(frozen=True)
class ZeroDatum(InitialDatum):
    kind = "zero"

    def evaluate(self, dom: BoxDomain, points: Any) -> FloatArray:
        return np.zeros(dom.as_points(points).shape[0])

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind}


@dataclass(frozen=True)
class ConstantDatum(InitialDatum):
    value: float = 1.0
    kind = "constant"
    is_classical = False

    def evaluate(self, dom: BoxDomain, points: Any) -> FloatArray:
        return np.full(dom.as_points(points).shape[0], float(self.value))

    def to_dict(self) -> dict[str, Any]:
        return {"kind": self.kind, "value": self.value}


@dataclass(frozen=True)
class ModesDatum(InitialDatum):
    """
    Finite combination sum_k a_k phi_{n_k}
    """

    modes: tuple[tuple[MultiIndex, float], ...] = ()
    kind = "modes"

    @classmethod
    def single(cls, index: Sequence[int]) -> "ModesDatum":
        return cls(((tuple(int(x) for x in index), 1.0),))

    def evaluate(self, dom: BoxDomain, points: Any) -> FloatArray:
        array = dom.as_points(points)
        values = np.zeros(array.shape[0])
        for index, coefficient in self.modes:
            if len(index) != dom.dims or min(index) < 1:
                raise DomainError(f"Invalid mode index {index}")
            values += coefficient * eigenfunction_values(dom, index, array)
        return values

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "modes": [
                {"index": list(index), "coefficient": coefficient}
                for index, coefficient in self.modes
            ],
        }


@dataclass(frozen=True)
class BumpDatum(InitialDatum):
    """
    C-infinity bump exp(-1 / (1 - r^2)), r = |x - center| / width
    """

    center: tuple[float, ...] = ()
    width: float = 1.0
    kind = "bump"

    def evaluate(self, dom: BoxDomain, points: Any) -> FloatArray:
        array = dom.as_points(points)
        r2 = np.sum(
            ((array - np.asarray(self.center)) / self.width) ** 2, axis=1
        )
        inside = r2 < 1
        values = np.zeros(array.shape[0])
        values[inside] = np.exp(-1 / (1 - r2[inside]))
        return values

    def breakpoints(self, dom: BoxDomain, axis: int) -> list[float]:
        return [
            self.center[axis] - self.width,
            self.center[axis] + self.width,
        ]

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "center": list(self.center),
            "width": self.width,
        }


@dataclass(frozen=True)
class IndicatorDatum(InitialDatum):
    lower: tuple[float, ...] = ()
    upper: tuple[float, ...] = ()
    kind = "indicator"
    is_classical = False

    def evaluate(self, dom: BoxDomain, points: Any) -> FloatArray:
        array = dom.as_points(points)
        inside = np.all(
            (array >= np.asarray(self.lower))
            & (array <= np.asarray(self.upper)),
            axis=1,
        )
        return inside.astype(np.float64)

    def breakpoints(self, dom: BoxDomain, axis: int) -> list[float]:
        return [self.lower[axis], self.upper[axis]]

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "lower": list(self.lower),
            "upper": list(self.upper),
        }


@dataclass(frozen=True)
class TabulatedDatum(InitialDatum):
    """
    Samples on a rectilinear grid, linearly interpolated, zero outside
    """

    axes: tuple[tuple[float, ...], ...] = ()
    values: tuple[float, ...] = ()
    kind = "tabulated"
    is_classical = False

    def evaluate(self, dom: BoxDomain, points: Any) -> FloatArray:
        array = dom.as_points(points)
        shape = tuple(len(x) for x in self.axes)
        table = np.asarray(self.values, dtype=np.float64).reshape(shape)
        if dom.dims == 1:
            return np.interp(
                array[:, 0], self.axes[0], table, left=0.0, right=0.0
            )
        interpolator = interpolate.RegularGridInterpolator(
            [np.asarray(x) for x in self.axes],
            table,
            bounds_error=False,
            fill_value=0.0,
        )
        return np.asarray(interpolator(array), dtype=np.float64)

    def breakpoints(self, dom: BoxDomain, axis: int) -> list[float]:
        return list(self.axes[axis])

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "grid": [list(x) for x in self.axes],
            "values": list(self.values),
        }


@dataclass(frozen=True)
class SemigroupDatum(InitialDatum):
    """
    T_D(l) f, evaluated through the truncated heat kernel
    """

    base: InitialDatum = field(default_factory=ZeroDatum)
    time: float = 0.0
    count: int = 64
    kind = "semigroup"

    def evaluate(self, dom: BoxDomain, points: Any) -> FloatArray:
        return apply_semigroup(dom, self.base, self.time, points, self.count)

    def to_dict(self) -> dict[str, Any]:
        return {
            "kind": self.kind,
            "base": self.base.to_dict(),
            "time": self.time,
            "count": self.count,
        }


def datum_from_dict(data: dict[str, Any], dom: BoxDomain) -> InitialDatum:
    kind = data.get("kind")
    d = dom.dims

    def vector(key: str) -> tuple[float, ...]:
        value = tuple(float(x) for x in data[key])
        if len(value) != d:
            raise DomainError(f"'{key}' must have {d} coordinates")
        return value

    if kind == "zero":
        return ZeroDatum()
    if kind == "constant":
        return ConstantDatum(float(data.get("value", 1.0)))
    if kind == "eigenmode":
        index = tuple(int(x) for x in data["index"])
        if len(index) != d or min(index) < 1:
            raise DomainError(f"Invalid eigenmode index {index}")
        return ModesDatum.single(index)
    if kind == "modes":
        modes = []
        for mode in data["modes"]:
            index = tuple(int(x) for x in mode["index"])
            if len(index) != d or min(index) < 1:
                raise DomainError(f"Invalid eigenmode index {index}")
            modes.append((index, float(mode.get("coefficient", 1.0))))
        return ModesDatum(tuple(modes))
    if kind == "bump":
        width = float(data["width"])
        if width <= 0:
            raise DomainError("Bump widths must be positive")
        return BumpDatum(vector("center"), width)
    if kind == "indicator":
        lower, upper = vector("lower"), vector("upper")
        if any(a >= b for a, b in zip(lower, upper)):
            raise DomainError("Indicator bounds must satisfy lower < upper")
        return IndicatorDatum(lower, upper)
    if kind == "tabulated":
        axes = tuple(tuple(float(x) for x in axis) for axis in data["grid"])
        values = tuple(float(x) for x in np.ravel(data["values"]))
        if len(axes) != d or len(values) != int(
            np.prod([len(x) for x in axes])
        ):
            raise DomainError("Tabulated data do not match their grid")
        return TabulatedDatum(axes, values)
    raise DomainError(f"Unknown initial datum kind '{kind}'")


def axis_rule(
    dom: BoxDomain, axis: int, breakpoints: Sequence[float], max_index: int
) -> tuple[FloatArray, FloatArray]:
    """
    Composite Gauss-Legendre rule on (0, M_axis), split at the datum's
    breakpoints, with enough nodes per panel for the highest frequency
    """
    side = dom.sides[axis]
    points = sorted({0.0, side, *[x for x in breakpoints if 0 < x < side]})
    nodes, weights = [], []
    for low, high in zip(points, points[1:]):
        oscillations = max_index * (high - low) / (2 * side)
        count = MIN_PANEL_NODES + int(
            np.ceil(NODES_PER_OSCILLATION * oscillations)
        )
        x, w = special.roots_legendre(count)
        half = (high - low) / 2
        nodes.append(low + half * (x + 1))
        weights.append(half * w)
    return np.concatenate(nodes), np.concatenate(weights)


def tensor_rule(
    dom: BoxDomain, f: InitialDatum, max_indices: Sequence[int]
) -> tuple[list[FloatArray], list[FloatArray], FloatArray]:
    """
    Per-axis rules and the values of f on the tensor grid
    """
    rules = [
        axis_rule(dom, a, f.breakpoints(dom, a), max_indices[a])
        for a in range(dom.dims)
    ]
    axes = [x for x, _ in rules]
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1)
    values = f.evaluate(dom, mesh.reshape(-1, dom.dims)).reshape(
        mesh.shape[:-1]
    )
    if not np.all(np.isfinite(values)):
        raise QuadratureError("initial datum", float("inf"), 0.0)
    return axes, [w for _, w in rules], values


@dataclass(frozen=True, eq=False)
class SpectralCoefficients:
    domain: BoxDomain
    eigens: tuple[EigenPair, ...]
    coefficients: FloatArray
    norm_sq: float
    parseval_residual: float

    @property
    def count(self) -> int:
        return len(self.eigens)

    @property
    def lams(self) -> FloatArray:
        return np.array([e.lam for e in self.eigens])

    def tail_bound(self) -> float:
        """
        L2 norm of the part of f beyond the truncation
        """
        return float(np.sqrt(max(self.parseval_residual, 0.0)))

    def partial_sums(self) -> FloatArray:
        return np.cumsum(self.coefficients**2)


def project(
    dom: BoxDomain, f: InitialDatum, count: int
) -> SpectralCoefficients:
    """
    f(n) = int_D f phi_n dx by tensorised Gauss-Legendre quadrature
    """
    eigens = enumerate_eigens(dom, count)
    max_indices = [max(e.index[a] for e in eigens) for a in range(dom.dims)]
    axes, weights, values = tensor_rule(dom, f, max_indices)
    table = values
    for a in range(dom.dims):
        n = np.arange(1, max_indices[a] + 1)
        side = dom.sides[a]
        basis = (
            np.sqrt(2 / side)
            * np.sin(np.outer(n, axes[a]) * np.pi / side)
            * weights[a][None, :]
        )
        table = np.moveaxis(
            np.tensordot(table, basis, axes=([a], [1])), -1, a
        )
    coefficients = np.array(
        [table[tuple(i - 1 for i in e.index)] for e in eigens]
    )
    weight_grid = weights[0]
    for w in weights[1:]:
        weight_grid = np.multiply.outer(weight_grid, w)
    norm_sq = float(np.sum(values**2 * weight_grid))
    residual = norm_sq - float(np.sum(coefficients**2))
    logger.debug(
        f"Projected {f.kind} datum on {count} modes, Parseval residual "
        f"{residual:.3e}"
    )
    return SpectralCoefficients(
        dom, tuple(eigens), coefficients, norm_sq, residual
    )


@dataclass(frozen=True)
class HeatKernelValue:
    value: float
    tail_bound: float


def _kernel_tail(dom: BoxDomain, t: float, count: int) -> float:
    """
    sup|phi|^2 sum_{n > count} exp(-lambda_n t), extending the enumeration
    until the terms are negligible
    """
    sup_sq = float(np.prod([2 / s for s in dom.sides]))
    total = 0.0
    start, stop = count, max(2 * count, count + 16)
    while True:
        lams = np.array([e.lam for e in enumerate_eigens(dom, stop)[start:]])
        terms = np.exp(-lams * t)
        total += float(terms.sum())
        if terms[-1] * stop < TAIL_CUTOFF or stop >= MAX_TAIL_MODES:
            return sup_sq * total
        start, stop = stop, 2 * stop


def heat_kernel_matrix(
    dom: BoxDomain, t: float, x: Any, y: Any, count: int
) -> FloatArray:
    if t <= 0:
        raise DomainError(f"The heat kernel needs t > 0, got {t}")
    eigens = enumerate_eigens(dom, count)
    decay = np.exp(-np.array([e.lam for e in eigens]) * t)
    phi_x = eigen_matrix(eigens, x)
    phi_y = eigen_matrix(eigens, y)
    return (phi_x * decay[:, None]).T @ phi_y


def heat_kernel(
    dom: BoxDomain, t: float, x: Any, y: Any, count: int
) -> HeatKernelValue:
    """
    Truncated p_D(t, x, y) = sum exp(-lambda_n t) phi_n(x) phi_n(y)
    """
    value = float(heat_kernel_matrix(dom, t, x, y, count)[0, 0])
    return HeatKernelValue(value, _kernel_tail(dom, t, count))


def apply_semigroup(
    dom: BoxDomain, f: InitialDatum, t: float, x: Any, count: int
) -> FloatArray:
    """
    T_D(t) f(x) = int_D p_D(t, x, y) f(y) dy, the kernel truncated at
    `count` modes and integrated on the tensor rule of f
    """
    eigens = enumerate_eigens(dom, count)
    max_indices = [max(e.index[a] for e in eigens) for a in range(dom.dims)]
    axes, weights, values = tensor_rule(dom, f, max_indices)
    mesh = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(
        -1, dom.dims
    )
    weight_grid = weights[0]
    for w in weights[1:]:
        weight_grid = np.multiply.outer(weight_grid, w)
    kernel = heat_kernel_matrix(dom, t, x, mesh, count)
    return kernel @ (values.ravel() * weight_grid.ravel())
