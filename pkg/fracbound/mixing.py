"""
Mixing measures over fractional orders and the functionals derived from them
"""
import logging
from collections.abc import Iterable, Sequence
from dataclasses import dataclass, field
from enum import StrEnum
from functools import lru_cache
from typing import Any

import numpy as np
from scipy import integrate, special

from .tools import (
    DEFAULT_TOLERANCES,
    Admissibility,
    DomainError,
    FloatArray,
    QuadratureError,
    Tolerances,
    UnsupportedCaseError,
)

logger = logging.getLogger(__name__)

# Orders this close to 0 or 1 make Gamma(1 - beta) (or beta^-1) explode
ORDER_MARGIN = 1e-6
ADMISSIBILITY_CAP = 1e12


class DensityShape(StrEnum):
    TABULATED = "tabulated"
    CONSTANT = "constant"
    POLYNOMIAL = "polynomial"


@dataclass(frozen=True)
class Atom:
    beta: float
    weight: float

    @property
    def scale(self) -> float:
        """
        The factor c of the stable component c W^beta carrying this atom,
        from w = c^beta / Gamma(1 - beta)
        """
        return float(
            (self.weight * special.gamma(1 - self.beta)) ** (1 / self.beta)
        )

    @classmethod
    def from_scale(cls, beta: float, scale: float) -> "Atom":
        if scale <= 0:
            raise DomainError(f"Stable scales must be positive, got {scale}")
        return cls(beta, scale**beta / float(special.gamma(1 - beta)))


@dataclass(frozen=True)
class DensityComponent:
    """
    p(beta) on [beta0, beta1]. Tabulated densities are interpolated
    linearly between their nodes; constant and polynomial shapes are
    evaluated in closed form.
    """

    beta0: float
    beta1: float
    nodes: tuple[float, ...] = ()
    values: tuple[float, ...] = ()
    shape: DensityShape = DensityShape.TABULATED
    coefficients: tuple[float, ...] = ()

    def __post_init__(self) -> None:
        if not (ORDER_MARGIN <= self.beta0 <= self.beta1 <= 1 - ORDER_MARGIN):
            raise DomainError(
                f"Density support [{self.beta0}, {self.beta1}] must lie "
                "strictly inside (0, 1)"
            )
        if self.shape == DensityShape.TABULATED:
            if len(self.nodes) < 2 or len(self.nodes) != len(self.values):
                raise DomainError(
                    "A tabulated density needs at least two (beta, p) pairs"
                )
            if any(b <= a for a, b in zip(self.nodes, self.nodes[1:])):
                raise DomainError("Density nodes must be strictly increasing")
            if min(self.values) < 0:
                raise DomainError("Density values must be nonnegative")
        elif self.shape == DensityShape.CONSTANT:
            if len(self.coefficients) != 1 or self.coefficients[0] < 0:
                raise DomainError("A constant density needs one value >= 0")
        else:
            probe = np.linspace(self.beta0, self.beta1, 257)
            if np.min(self(probe)) < 0:
                raise DomainError("Polynomial density takes negative values")

    @classmethod
    def constant(
        cls, beta0: float, beta1: float, value: float
    ) -> "DensityComponent":
        return cls(
            beta0,
            beta1,
            shape=DensityShape.CONSTANT,
            coefficients=(float(value),),
        )

    @classmethod
    def polynomial(
        cls, beta0: float, beta1: float, coefficients: Sequence[float]
    ) -> "DensityComponent":
        """
        Coefficients in increasing powers of beta
        """
        return cls(
            beta0,
            beta1,
            shape=DensityShape.POLYNOMIAL,
            coefficients=tuple(float(x) for x in coefficients),
        )

    @classmethod
    def tabulated(
        cls, table: Iterable[Sequence[float]]
    ) -> "DensityComponent":
        pairs = sorted((float(b), float(p)) for b, p in table)
        nodes = tuple(b for b, _ in pairs)
        values = tuple(p for _, p in pairs)
        if len(nodes) < 2:
            raise DomainError(
                "A tabulated density needs at least two (beta, p) pairs"
            )
        return cls(nodes[0], nodes[-1], nodes=nodes, values=values)

    def __call__(self, beta: Any) -> FloatArray:
        beta = np.asarray(beta, dtype=np.float64)
        inside = (beta >= self.beta0) & (beta <= self.beta1)
        if self.shape == DensityShape.CONSTANT:
            values = np.full(beta.shape, self.coefficients[0])
        elif self.shape == DensityShape.POLYNOMIAL:
            values = np.polynomial.polynomial.polyval(
                beta, np.asarray(self.coefficients)
            )
        else:
            values = np.interp(beta, self.nodes, self.values)
        return np.where(inside, values, 0.0)

    def breakpoints(self) -> list[float]:
        points = {self.beta0, self.beta1}
        points.update(x for x in self.nodes if self.beta0 < x < self.beta1)
        return sorted(points)

    def to_dict(self) -> dict[str, Any]:
        if self.shape == DensityShape.TABULATED:
            return {
                "beta0": self.beta0,
                "beta1": self.beta1,
                "p": [[b, p] for b, p in zip(self.nodes, self.values)],
            }
        return {
            "beta0": self.beta0,
            "beta1": self.beta1,
            "shape": str(self.shape),
            "coefficients": list(self.coefficients),
        }


def _merge_atoms(atoms: Iterable[Atom]) -> tuple[Atom, ...]:
    merged: dict[float, float] = {}
    for atom in atoms:
        merged[atom.beta] = merged.get(atom.beta, 0.0) + atom.weight
    return tuple(Atom(beta, weight) for beta, weight in sorted(merged.items()))


@dataclass(frozen=True)
class MixingMeasure:
    """
    mu(dbeta) = sum_j w_j delta_{beta_j} + p(beta) dbeta. Duplicated atom
    orders are merged by summing their weights.
    """

    atoms: tuple[Atom, ...] = ()
    density: DensityComponent | None = None
    _mass: float = field(default=0.0, compare=False, repr=False)

    def __post_init__(self) -> None:
        object.__setattr__(self, "atoms", _merge_atoms(self.atoms))
        for atom in self.atoms:
            if not (ORDER_MARGIN < atom.beta < 1 - ORDER_MARGIN):
                raise DomainError(
                    f"Atom order {atom.beta} must lie strictly inside (0, 1)"
                )
            if atom.weight <= 0:
                raise DomainError(
                    f"Atom weight {atom.weight} must be strictly positive"
                )
        mass = sum(x.weight for x in self.atoms)
        if self.density is not None:
            mass += _density_integral(self.density, lambda b: np.ones_like(b))
        if not mass > 0:
            raise DomainError("The mixing measure must have positive mass")
        object.__setattr__(self, "_mass", mass)

    @classmethod
    def single(cls, beta: float, weight: float = 1.0) -> "MixingMeasure":
        return cls(atoms=(Atom(beta, weight),))

    @classmethod
    def from_scales(
        cls, components: Iterable[tuple[float, float]]
    ) -> "MixingMeasure":
        """
        The measure of W = sum_j c_j W^{beta_j}, given (beta_j, c_j) pairs
        """
        return cls(atoms=tuple(Atom.from_scale(b, c) for b, c in components))

    @property
    def has_atoms(self) -> bool:
        return bool(self.atoms)

    @property
    def has_density(self) -> bool:
        return self.density is not None

    @property
    def is_single_atom(self) -> bool:
        return len(self.atoms) == 1 and self.density is None

    def support(self) -> tuple[float, float]:
        betas = [x.beta for x in self.atoms]
        if self.density is not None:
            betas += [self.density.beta0, self.density.beta1]
        return min(betas), max(betas)

    def to_dict(self) -> dict[str, Any]:
        result: dict[str, Any] = {
            "atoms": [{"beta": x.beta, "weight": x.weight} for x in self.atoms]
        }
        if self.density is not None:
            result["density"] = self.density.to_dict()
        return result


def _density_integral(
    density: DensityComponent,
    integrand: Any,
    tolerances: Tolerances = DEFAULT_TOLERANCES,
    what: str = "density integral",
) -> float:
    """
    Adaptive Gauss-Kronrod integral of integrand(beta) * p(beta) over the
    support, split at the tabulation nodes
    """
    total = 0.0
    points = density.breakpoints()
    for low, high in zip(points, points[1:]):
        value, error = integrate.quad(
            lambda b: float(integrand(np.asarray(b)) * density(b)),
            low,
            high,
            epsabs=tolerances.quad_abs,
            epsrel=tolerances.quad_rel,
            limit=tolerances.quad_limit,
        )
        if error > max(tolerances.quad_abs, tolerances.quad_rel * abs(value)):
            raise QuadratureError(what, error, tolerances.quad_abs)
        total += value
    return total


def total_mass(m: MixingMeasure) -> float:
    return m._mass


def psi_w(
    m: MixingMeasure,
    s: Any,
    tolerances: Tolerances = DEFAULT_TOLERANCES,
) -> Any:
    """
    Laplace exponent psi_W(s) = int s^beta Gamma(1 - beta) mu(dbeta) for
    s >= 0 (scalar or array), the density part by adaptive quadrature
    """
    s_array = np.asarray(s, dtype=np.float64)
    if np.any(s_array < 0):
        raise DomainError("psi_W is only defined for s >= 0")
    result = np.zeros(s_array.shape)
    for atom in m.atoms:
        result += (
            atom.weight * special.gamma(1 - atom.beta) * s_array**atom.beta
        )
    if m.density is not None:
        density = m.density
        flat = s_array.ravel()

        def integrand(beta: float) -> FloatArray:
            return (
                flat**beta * special.gamma(1 - beta) * density(beta)
            ).astype(np.float64)

        points = density.breakpoints()
        for low, high in zip(points, points[1:]):
            value, error, info = integrate.quad_vec(
                integrand,
                low,
                high,
                epsabs=tolerances.quad_abs,
                epsrel=tolerances.quad_rel,
                norm="max",
                full_output=True,
            )
            if not info.success:
                raise QuadratureError("psi_W", error, tolerances.quad_abs)
            result += np.reshape(value, s_array.shape)
    if np.ndim(s) == 0:
        return float(result)
    return result


def levy_tail(
    m: MixingMeasure,
    t: float,
    tolerances: Tolerances = DEFAULT_TOLERANCES,
) -> float:
    """
    phi_W(t, infinity) = int t^-beta mu(dbeta)
    """
    if t <= 0:
        raise DomainError(f"The Levy tail needs t > 0, got {t}")
    value = sum(x.weight * t ** (-x.beta) for x in m.atoms)
    if m.density is not None:
        value += _density_integral(
            m.density, lambda b: t ** (-b), tolerances, "Levy tail"
        )
    return float(value)


def admissibility(
    m: MixingMeasure, tolerances: Tolerances = DEFAULT_TOLERANCES
) -> tuple[float, Admissibility]:
    value = sum(x.weight / (1 - x.beta) for x in m.atoms)
    if m.density is not None:
        value += _density_integral(
            m.density, lambda b: 1 / (1 - b), tolerances, "admissibility"
        )
    report = Admissibility.from_bound(value, ADMISSIBILITY_CAP)
    return value, report


@lru_cache(maxsize=64)
def _constant_c(m: MixingMeasure, tolerances: Tolerances) -> float:
    assert m.density is not None
    return _density_integral(
        m.density,
        lambda b: np.sin(b * np.pi) * special.gamma(1 - b),
        tolerances,
        "C(beta0, beta1, p)",
    )


def constant_c(
    m: MixingMeasure, tolerances: Tolerances = DEFAULT_TOLERANCES
) -> float:
    """
    C(beta0, beta1, p) = int sin(beta pi) Gamma(1 - beta) p(beta) dbeta
    """
    if m.density is None:
        raise UnsupportedCaseError(
            "C(beta0, beta1, p) needs a density component",
            hint="use the atom-case bounds k_e(t) and b(lambda)",
        )
    value = _constant_c(m, tolerances)
    if value <= tolerances.quad_abs:
        raise DomainError(f"C must be > 0, got {value:.3e}")
    return value


class BoundKind(StrEnum):
    DENSITY = "density"
    ATOM = "atom"


@dataclass(frozen=True)
class DerivativeBounds:
    """
    |d/dt h(t, lambda)| <= b(lambda) k(t). With a density component the
    density-case k(t) applies (atoms only strengthen it); otherwise the
    atom-case k_e(t) is the smallest of the per-atom bounds.
    """

    C: float
    kind: BoundKind
    beta0: float = 0.0
    beta1: float = 0.0
    atom_betas: tuple[float, ...] = ()
    atom_factors: tuple[float, ...] = ()

    def k(self, t: float) -> float:
        if t <= 0:
            raise DomainError(f"k(t) needs t > 0, got {t}")
        if self.kind == BoundKind.DENSITY:
            return float(
                (
                    special.gamma(1 - self.beta1) * t ** (self.beta1 - 1)
                    + special.gamma(1 - self.beta0) * t ** (self.beta0 - 1)
                )
                / (self.C * np.pi)
            )
        return float(
            min(
                t ** (beta - 1) / factor
                for beta, factor in zip(self.atom_betas, self.atom_factors)
            )
        )

    def b(self, lam: float) -> float:
        return b_factor(lam)


def b_factor(lam: float) -> float:
    return float(lam)


def derivative_bounds(
    m: MixingMeasure, tolerances: Tolerances = DEFAULT_TOLERANCES
) -> DerivativeBounds:
    if m.density is not None:
        return DerivativeBounds(
            C=constant_c(m, tolerances),
            kind=BoundKind.DENSITY,
            beta0=m.density.beta0,
            beta1=m.density.beta1,
        )
    # c_j^beta_j sin(beta_j pi), with c_j^beta_j = w_j Gamma(1 - beta_j)
    factors = tuple(
        float(x.weight * special.gamma(1 - x.beta) * np.sin(x.beta * np.pi))
        for x in m.atoms
    )
    return DerivativeBounds(
        C=min(factors),
        kind=BoundKind.ATOM,
        atom_betas=tuple(x.beta for x in m.atoms),
        atom_factors=factors,
    )


def k_bound(
    m: MixingMeasure,
    t: float,
    tolerances: Tolerances = DEFAULT_TOLERANCES,
) -> float:
    return derivative_bounds(m, tolerances).k(t)


@dataclass(frozen=True)
class BetaRule:
    """
    Discrete rule for the orders: atoms exactly, the density through
    Gauss-Legendre nodes on each tabulation segment
    """

    betas: FloatArray
    mu_weights: FloatArray

    @property
    def nu_weights(self) -> FloatArray:
        return self.mu_weights * special.gamma(1 - self.betas)


@lru_cache(maxsize=64)
def nu_rule(m: MixingMeasure, nodes: int = 64) -> BetaRule:
    betas = [x.beta for x in m.atoms]
    weights = [x.weight for x in m.atoms]
    if m.density is not None:
        x, w = special.roots_legendre(nodes)
        points = m.density.breakpoints()
        for low, high in zip(points, points[1:]):
            half = (high - low) / 2
            segment = low + half * (x + 1)
            betas.extend(segment)
            weights.extend(half * w * m.density(segment))
    return BetaRule(
        np.asarray(betas, dtype=np.float64),
        np.asarray(weights, dtype=np.float64),
    )


def laplace_exponent(m: MixingMeasure, s: Any, nodes: int = 64) -> Any:
    """
    psi_W(s) for real or complex s (principal branch of s^beta) through the
    fixed rule of nu_rule, accurate to roughly machine precision on smooth
    densities
    """
    rule = nu_rule(m, nodes)
    s_array = np.asarray(s)
    complex_input = np.iscomplexobj(s_array)
    dtype = np.complex128 if complex_input else np.float64
    s_array = s_array.astype(dtype)
    result = np.zeros(s_array.shape, dtype=dtype)
    nonzero = s_array != 0
    log_s = np.log(np.where(nonzero, s_array, 1))
    for beta, weight in zip(rule.betas, rule.nu_weights):
        result += weight * np.exp(beta * log_s)
    result = np.where(nonzero, result, 0)
    if np.ndim(s) == 0:
        return complex(result) if complex_input else float(result)
    return result
