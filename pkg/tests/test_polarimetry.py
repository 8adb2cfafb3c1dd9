import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from xspec.polarimetry import (
    AS_WRITTEN,
    IntensityMeasurements,
    dolp,
    stokes_from_intensities,
)
from xspec.synth import generate_polarized_intensities


def _pixel(i0, i90, i45, im45):
    return IntensityMeasurements(*(np.array([[v]], dtype=float) for v in (i0, i90, i45, im45)))


def test_unpolarized_ones():
    m = IntensityMeasurements(*(np.ones((4, 5)) for _ in range(4)))
    s = stokes_from_intensities(m)
    assert np.all(s.s0 == 2.0)
    assert np.all(s.s1 == 0.0) and np.all(s.s2 == 0.0)
    assert np.all(s.s3 == 0.0) and np.all(s.dolp == 0.0)


def test_hand_evaluated_pixel():
    s = stokes_from_intensities(_pixel(3, 1, 2, 2))
    assert (s.s0[0, 0], s.s1[0, 0], s.s2[0, 0]) == (4.0, 2.0, 0.0)
    assert dolp(s)[0, 0] == 0.5


def test_as_written_convention_sums():
    s = stokes_from_intensities(_pixel(3, 1, 2, 2), convention=AS_WRITTEN)
    assert s.s2[0, 0] == 4.0
    # the printed sum form reports polarization for unpolarized light
    assert stokes_from_intensities(_pixel(1, 1, 1, 1), convention=AS_WRITTEN).dolp[0, 0] == 1.0


def test_circular_channels():
    ones = np.ones((2, 2))
    m = IntensityMeasurements(ones, ones, ones, ones, i_right=3 * ones, i_left=ones)
    assert np.all(stokes_from_intensities(m).s3 == 2.0)
    assert np.all(stokes_from_intensities(m, convention=AS_WRITTEN).s3 == 4.0)


def test_dolp_zero_numerator_and_zero_s0():
    s = stokes_from_intensities(_pixel(2.5, 2.5, 1, 1))
    assert s.dolp[0, 0] == 0.0
    dark = stokes_from_intensities(_pixel(0, 0, 0, 0))
    assert np.isfinite(dark.dolp).all() and dark.dolp[0, 0] == 0.0


@pytest.mark.parametrize("bad", [
    dict(i90=np.ones((3, 3))),
    dict(i45=-np.ones((2, 2))),
    dict(i_neg45=np.full((2, 2), np.nan)),
])
def test_rejects_bad_input(bad):
    base = dict(i0=np.ones((2, 2)), i90=np.ones((2, 2)), i45=np.ones((2, 2)), i_neg45=np.ones((2, 2)))
    base.update(bad)
    with pytest.raises(ValueError):
        stokes_from_intensities(IntensityMeasurements(**base))


def test_rejects_unknown_convention():
    with pytest.raises(ValueError):
        stokes_from_intensities(_pixel(1, 1, 1, 1), convention="plus")


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1), st.floats(1e-3, 1e3))
def test_scale_invariance(seed, c):
    rng = np.random.default_rng(seed)
    m = IntensityMeasurements(*(rng.uniform(0.01, 1.0, (6, 7)) for _ in range(4)))
    scaled = IntensityMeasurements(*(c * v for v in (m.i0, m.i90, m.i45, m.i_neg45)))
    np.testing.assert_allclose(dolp(stokes_from_intensities(scaled)), dolp(stokes_from_intensities(m)),
                               rtol=0, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(st.integers(0, 2 ** 32 - 1))
def test_unpolarized_identity_and_round_trip(seed):
    rng = np.random.default_rng(seed)
    a, b = rng.uniform(0, 1, (2, 5, 5))
    s = stokes_from_intensities(IntensityMeasurements(a, a, b, b))
    assert np.all(s.s1 == 0) and np.all(s.s2 == 0) and np.all(s.dolp == 0)
    m = IntensityMeasurements(*rng.uniform(0, 1, (4, 5, 5)))
    s = stokes_from_intensities(m)
    np.testing.assert_allclose(s.s0 + s.s1, 2 * m.i0, rtol=0, atol=1e-15)
    np.testing.assert_allclose(s.s0 - s.s1, 2 * m.i90, rtol=0, atol=1e-15)


def test_physical_inputs_stay_in_unit_interval():
    rng = np.random.default_rng(3)
    for _ in range(100):
        m = generate_polarized_intensities(rng.uniform(0, 1), rng.uniform(-np.pi, np.pi), rng.uniform(0.1, 5), (3, 3))
        d = dolp(stokes_from_intensities(m))
        assert np.all(d >= 0) and np.all(d <= 1 + 1e-12)
