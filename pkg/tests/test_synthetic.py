"""Synthetic fixture sanity: determinism, class coverage, gray separability."""

import numpy as np

from voxelseg.synthetic import separable_phase_volume, three_phase_volume


def test_three_phase_volume_properties():
    gray, labels = three_phase_volume((48, 48, 48), seed=2)
    assert gray.raw.dtype == np.uint8 and labels.dtype == np.uint8
    frac = np.bincount(labels.ravel(), minlength=3) / labels.size
    assert frac[0] > 0.5            # matrix dominates
    assert frac[1] > 0.05 and frac[2] > 0.01
    # gray histograms overlap: some porosity voxels are brighter than some matrix
    assert gray.raw[labels == 2].max() > gray.raw[labels == 0].min()


def test_three_phase_volume_deterministic():
    a = three_phase_volume((24, 24, 24), seed=9)
    b = three_phase_volume((24, 24, 24), seed=9)
    np.testing.assert_array_equal(a[0].raw, b[0].raw)
    np.testing.assert_array_equal(a[1], b[1])


def test_separable_phase_volume_ranges_are_disjoint():
    gray, labels = separable_phase_volume((32, 32, 32), seed=4)
    lo_hi = {c: (gray.raw[labels == c].min(), gray.raw[labels == c].max())
             for c in range(3)}
    assert lo_hi[2][1] < lo_hi[0][0] < lo_hi[0][1] < lo_hi[1][0]
