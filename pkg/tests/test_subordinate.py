import math

import numpy as np
import pytest
from scipy import stats

from fracbound.hkernel import mittag_leffler
from fracbound.mixing import DensityComponent, MixingMeasure
from fracbound.subordinate import (
    SubordinatorPath,
    SubordinatorSpec,
    estimate_g,
    g_density,
    increment_scale,
    inverse_at,
    inverse_relation_check,
    laplace_table,
    sample_inverse,
    sample_path,
    sample_paths,
    sample_stable_increment,
)
from fracbound.tools import (
    DomainError,
    InsufficientHorizonError,
    UnsupportedCaseError,
)

HALF = SubordinatorSpec.single(0.5)
MIXED = SubordinatorSpec.from_measure(
    MixingMeasure.from_scales([(0.3, 1.0), (0.7, 0.5)])
)


def rng(seed: int = 2024) -> np.random.Generator:
    return np.random.default_rng(seed)


def test_spec_from_measure() -> None:
    assert MIXED.betas == pytest.approx([0.3, 0.7])
    assert MIXED.scales == pytest.approx([1.0, 0.5])
    assert MIXED.levels == 0
    assert MIXED.psi(2.0) == pytest.approx(2.0**0.3 + 0.5**0.7 * 2.0**0.7)
    density = MixingMeasure(density=DensityComponent.constant(0.2, 0.8, 1.0))
    quantised = SubordinatorSpec.from_measure(density, levels=8)
    assert len(quantised.components) == 8
    assert quantised.levels == 8
    assert np.all((quantised.betas > 0.2) & (quantised.betas < 0.8))
    with pytest.raises(DomainError):
        SubordinatorSpec(())
    with pytest.raises(DomainError):
        SubordinatorSpec.single(1.0)


def test_increment_scale() -> None:
    assert increment_scale(HALF, 1e-3) == pytest.approx(1e-6)
    scale = increment_scale(MIXED, 1e-3)
    assert 1e-3 * MIXED.psi(1 / scale) == pytest.approx(1.0)
    assert increment_scale(MIXED, 1e-4) < scale
    with pytest.raises(DomainError):
        increment_scale(HALF, 0.0)


def test_laplace_table_matches_exponent() -> None:
    rows = laplace_table(MIXED, [0.1, 1.0, 10.0], 1.0, 20000, rng())
    for row in rows:
        assert row.exact == pytest.approx(math.exp(-MIXED.psi(row.s)))
        assert abs(row.z) < 4


def test_inverse_at_is_first_strict_passage() -> None:
    path = SubordinatorPath(
        np.array([0.0, 0.1, 0.2, 0.3]), np.array([0.0, 0.5, 0.5, 2.0])
    )
    assert path.step == pytest.approx(0.1)
    assert inverse_at(path, 0.0) == pytest.approx(0.1)
    assert inverse_at(path, 0.2) == pytest.approx(0.1)
    assert inverse_at(path, 0.5) == pytest.approx(0.3)
    with pytest.raises(InsufficientHorizonError):
        inverse_at(path, 3.0)
    with pytest.raises(DomainError):
        inverse_at(path, -1.0)
    with pytest.raises(DomainError):
        SubordinatorPath(np.array([0.0, 0.1]), np.array([0.0, -1.0]))


def test_sample_paths_reach_target() -> None:
    values = sample_paths(HALF, 0.01, 1e-3, 50, rng(), target=5.0)
    assert values.shape[0] == 50
    assert np.all(values[:, 0] == 0)
    assert np.all(np.diff(values, axis=1) >= 0)
    assert np.min(values[:, -1]) > 5.0
    path = sample_path(HALF, 1.0, 0.01, rng())
    assert path.grid.size == 101
    with pytest.raises(DomainError):
        sample_paths(HALF, 1.0, 2.0, 1, rng())
    with pytest.raises(DomainError):
        sample_stable_increment(0.5, 0.0, rng())


def test_sample_inverse_is_reproducible() -> None:
    first = sample_inverse(MIXED, [0.5, 1.0], 1e-3, 200, rng(7))
    second = sample_inverse(MIXED, [0.5, 1.0], 1e-3, 200, rng(7))
    assert np.array_equal(first, second)
    assert first.shape == (200, 2)
    assert np.all(first >= 1e-3)
    assert np.all(first[:, 1] >= first[:, 0])


def test_inverse_laplace_transform_is_h() -> None:
    estimate = estimate_g(HALF, 1.0, 4000, rng(), step=1e-3)
    assert estimate.mass() == pytest.approx(1.0)
    assert estimate.paths == 4000
    value, se = estimate.laplace(1.0)
    assert abs(value - mittag_leffler(0.5, -1.0)) < 4 * se + 2e-3
    assert estimate.laplace(0.0) == (pytest.approx(1.0), 0.0)
    assert estimate.cdf(float(np.median(estimate.samples))) == pytest.approx(
        0.5, abs=0.01
    )


def test_kernel_density_estimate() -> None:
    estimate = estimate_g(HALF, 1.0, 2000, rng(), step=1e-2, kde=True)
    assert estimate.kde is not None
    assert estimate.kde.shape == estimate.centers.shape
    assert estimate.kde_mass() == pytest.approx(1.0, abs=0.15)
    assert estimate.to_dict()["paths"] == 2000


def test_g_density_half_order() -> None:
    # For psi(s) = s^(1/2), E_t is half-normal with variance 2t
    x = np.array([0.5, 1.0, 2.0])
    expected = np.exp(-(x**2) / 4) / math.sqrt(math.pi)
    assert g_density(HALF, 1.0, x) == pytest.approx(expected, rel=1e-3)
    assert g_density(HALF, 1.0, 0.0) == 0.0
    with pytest.raises(UnsupportedCaseError):
        g_density(MIXED, 1.0, x)


def test_inverse_relation() -> None:
    report = inverse_relation_check(MIXED, 1.0, 0.8, 4000, 1e-3, rng())
    assert report.passed(), report
    for t, x in ((1.0, 1.0), (2.0, 0.5)):
        report = inverse_relation_check(HALF, t, x, 4000, 1e-3, rng(7))
        assert report.passed(), report
        assert 0 < report.values["first"] < 1


def test_stable_scaling_in_law() -> None:
    # W over time c t has the law of c^(1 / beta) W over time t
    generator = rng(31)
    long = sample_stable_increment(0.5, 2.0, generator, 10000)
    short = 4.0 * sample_stable_increment(0.5, 1.0, generator, 10000)
    assert stats.ks_2samp(long, short).pvalue > 0.01
    assert np.all(long > 0)
