import math

import mpmath
import numpy as np
import pytest

from fracbound.mixing import (
    Atom,
    BoundKind,
    DensityComponent,
    MixingMeasure,
    admissibility,
    constant_c,
    derivative_bounds,
    k_bound,
    laplace_exponent,
    levy_tail,
    nu_rule,
    psi_w,
    total_mass,
)
from fracbound.tools import (
    CheckStatus,
    DomainError,
    Tolerances,
    UnsupportedCaseError,
)


def half_order() -> MixingMeasure:
    # psi_W(s) = s^(1/2)
    return MixingMeasure.from_scales([(0.5, 1.0)])


def flat_density() -> MixingMeasure:
    return MixingMeasure(
        density=DensityComponent.constant(0.25, 0.75, 2.0)
    )


def test_scale_and_weight_agree() -> None:
    atom = Atom.from_scale(0.5, 1.0)
    assert atom.weight == pytest.approx(1 / math.sqrt(math.pi), rel=1e-14)
    assert atom.scale == pytest.approx(1.0, rel=1e-14)
    assert Atom.from_scale(0.3, 2.5).scale == pytest.approx(2.5, rel=1e-12)


def test_psi_single_atom() -> None:
    m = half_order()
    for s in (0.0, 0.25, 1.0, 4.0, 100.0):
        assert psi_w(m, s) == pytest.approx(math.sqrt(s), rel=1e-13, abs=0)
    values = psi_w(m, np.array([1.0, 9.0]))
    assert values == pytest.approx([1.0, 3.0], rel=1e-13)


def test_psi_two_atoms_is_sum_of_scaled_powers() -> None:
    m = MixingMeasure.from_scales([(0.3, 1.0), (0.7, 0.5)])
    s = 2.0
    expected = s**0.3 + 0.5**0.7 * s**0.7
    assert psi_w(m, s) == pytest.approx(expected, rel=1e-12)


def test_psi_density_against_mpmath() -> None:
    m = flat_density()
    s = 3.0
    expected = float(
        mpmath.quad(
            lambda b: 2 * mpmath.power(s, b) * mpmath.gamma(1 - b),
            [0.25, 0.75],
        )
    )
    assert psi_w(m, s) == pytest.approx(expected, rel=1e-8)
    assert laplace_exponent(m, s) == pytest.approx(expected, rel=1e-12)


def test_laplace_exponent_complex_branch() -> None:
    value = laplace_exponent(half_order(), 1j)
    assert value == pytest.approx(np.exp(1j * np.pi / 4), abs=1e-14)
    assert laplace_exponent(half_order(), 0.0) == 0.0


def test_psi_rejects_negative_argument() -> None:
    with pytest.raises(DomainError):
        psi_w(half_order(), -1.0)


def test_invalid_measures() -> None:
    with pytest.raises(DomainError):
        MixingMeasure.single(1.0)
    with pytest.raises(DomainError):
        MixingMeasure.single(0.5, -1.0)
    with pytest.raises(DomainError):
        DensityComponent.constant(0.0, 0.5, 1.0)
    with pytest.raises(DomainError):
        DensityComponent.tabulated([(0.2, 1.0)])
    with pytest.raises(DomainError):
        DensityComponent.polynomial(0.2, 0.8, [-1.0])


def test_duplicate_atoms_are_merged() -> None:
    m = MixingMeasure((Atom(0.4, 1.0), Atom(0.4, 2.0), Atom(0.2, 1.0)))
    assert [x.beta for x in m.atoms] == [0.2, 0.4]
    assert m.atoms[1].weight == 3.0
    assert total_mass(m) == pytest.approx(4.0)


def test_mass_support_and_flags() -> None:
    m = flat_density()
    assert total_mass(m) == pytest.approx(1.0, rel=1e-12)
    assert m.support() == (0.25, 0.75)
    assert m.has_density and not m.has_atoms and not m.is_single_atom
    assert half_order().is_single_atom


def test_tabulated_density_is_piecewise_linear() -> None:
    density = DensityComponent.tabulated([(0.2, 0.0), (0.5, 3.0), (0.8, 0.0)])
    assert float(density(0.35)) == pytest.approx(1.5)
    assert float(density(0.9)) == 0.0
    m = MixingMeasure(density=density)
    assert total_mass(m) == pytest.approx(0.9, rel=1e-10)


def test_levy_tail() -> None:
    m = MixingMeasure.single(0.5, 2.0)
    assert levy_tail(m, 4.0) == pytest.approx(1.0)
    with pytest.raises(DomainError):
        levy_tail(m, 0.0)


def test_admissibility() -> None:
    value, report = admissibility(MixingMeasure.single(0.5, 1.0))
    assert value == pytest.approx(2.0)
    assert report.status == CheckStatus.PASSED
    value, report = admissibility(flat_density())
    assert value == pytest.approx(2 * math.log(3), rel=1e-8)


def test_constant_c() -> None:
    expected = float(
        mpmath.quad(
            lambda b: 2 * mpmath.sin(mpmath.pi * b) * mpmath.gamma(1 - b),
            [0.25, 0.75],
        )
    )
    assert constant_c(flat_density()) == pytest.approx(expected, rel=1e-8)
    with pytest.raises(UnsupportedCaseError):
        constant_c(half_order())


def test_density_k_bound() -> None:
    m = flat_density()
    c = constant_c(m)
    t = 0.5
    expected = (
        math.gamma(0.25) * t ** (-0.25) + math.gamma(0.75) * t ** (-0.75)
    ) / (c * math.pi)
    assert k_bound(m, t) == pytest.approx(expected, rel=1e-12)
    bounds = derivative_bounds(m)
    assert bounds.kind == BoundKind.DENSITY
    assert bounds.b(7.0) == 7.0


def test_atom_k_bound() -> None:
    # c^beta sin(beta pi) = 1 for the half-order atom with unit scale
    bounds = derivative_bounds(half_order())
    assert bounds.kind == BoundKind.ATOM
    assert bounds.k(4.0) == pytest.approx(0.5, rel=1e-12)
    with pytest.raises(DomainError):
        bounds.k(0.0)


def test_nu_rule_integrates_mass() -> None:
    m = MixingMeasure(
        atoms=(Atom(0.1, 0.5),),
        density=DensityComponent.constant(0.25, 0.75, 2.0),
    )
    rule = nu_rule(m, 32)
    assert rule.betas[0] == 0.1
    assert np.sum(rule.mu_weights) == pytest.approx(1.5, rel=1e-13)
    assert rule.nu_weights[0] == pytest.approx(0.5 * math.gamma(0.9))


def test_laplace_exponent_matches_adaptive_quadrature() -> None:
    m = MixingMeasure(
        atoms=(Atom(0.6, 0.3),),
        density=DensityComponent.polynomial(0.2, 0.9, [1.0, 2.0, -1.0]),
    )
    s = np.array([0.1, 1.0, 10.0])
    assert laplace_exponent(m, s) == pytest.approx(psi_w(m, s), rel=1e-8)


def test_tolerance_overrides() -> None:
    tolerances = Tolerances.from_dict({"talbot_nodes": 48, "quad_abs": 1e-9})
    assert tolerances.talbot_nodes == 48
    assert isinstance(tolerances.talbot_nodes, int)
    assert tolerances.quad_abs == 1e-9
    with pytest.raises(DomainError):
        Tolerances.from_dict({"unknown": 1})
