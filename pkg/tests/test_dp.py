import math

import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import stats

from topoguard import rng as trng
from topoguard.dp import (DpParams, calibrate_sigma, clip, privatize, privatize_batch,
                          sensitivity_bound)
from topoguard.errors import InvalidParameter


def test_clip_examples():
    f = np.array([3.0, 4.0])
    assert np.array_equal(clip(f / 2, 5.0), f / 2)
    assert np.linalg.norm(clip(f * 2, 5.0)) == pytest.approx(5.0, abs=1e-14)
    assert np.array_equal(clip(np.zeros(3), 1.0), np.zeros(3))


@given(st.lists(st.floats(-1e6, 1e6), min_size=1, max_size=8), st.floats(1e-3, 1e3))
def test_clip_idempotent(v, B):
    f = np.array(v)
    once = clip(f, B)
    assert np.array_equal(clip(once, B), once)
    assert np.linalg.norm(once) <= B * (1 + 1e-12)


def test_sensitivity_examples():
    assert sensitivity_bound(1.0) == 2.0
    assert sensitivity_bound(0.5) == 1.0
    assert sensitivity_bound(10.0) == 20.0


def test_calibration_examples():
    assert calibrate_sigma(2.0, 0.03, 1e-6) == pytest.approx(353.3, abs=0.1)
    assert calibrate_sigma(1.0, 1.0, 1e-5) == pytest.approx(4.845, abs=1e-3)
    sig = [calibrate_sigma(1.0, e, 1e-5) for e in (0.1, 1, 10, 100, 1e4)]
    assert all(b < a for a, b in zip(sig, sig[1:]))
    assert calibrate_sigma(1.0, math.inf, 1e-5) == 0.0
    for bad in [(1.0, 0.0, 1e-5), (1.0, 1.0, 0.0), (1.0, 1.0, 1.0), (0.0, 1.0, 1e-5)]:
        with pytest.raises(InvalidParameter):
            calibrate_sigma(*bad)


def test_calibration_equality_grid():
    for eps in np.geomspace(0.01, 10, 10):
        for delta in np.geomspace(1e-9, 1e-2, 10):
            s = calibrate_sigma(2.0, eps, delta)
            assert s * eps / 2.0 == pytest.approx(math.sqrt(2 * math.log(1.25 / delta)),
                                                  rel=1e-12)


def test_params_validation():
    with pytest.raises(InvalidParameter):
        DpParams(1.0, 1.0, 1e-5, 2.0, 0.1)  # sigma below calibration
    with pytest.raises(InvalidParameter):
        DpParams(1.0, 1.0, 1e-5, 3.0, 100.0)  # sensitivity above 2B
    p = DpParams.calibrated(1.0, 2.0, 1e-5, seed=3)
    assert DpParams.from_dict(p.to_dict()) == p
    inf = DpParams.calibrated(1.0, math.inf, 1e-5)
    assert inf.to_dict()["epsilon"] == "inf" and not inf.is_private


def test_privatize_degenerate_and_determinism():
    f = np.array([3.0, 4.0, 0.0])
    p0 = DpParams.calibrated(1.0, math.inf, 1e-5)
    assert np.array_equal(privatize(f, p0), clip(f, 1.0))
    p = DpParams.calibrated(1.0, 2.0, 1e-5, seed=11)
    a = privatize(f, p, stream=0, counter=0)
    assert np.array_equal(a, privatize(f, p, stream=0, counter=0))
    assert not np.array_equal(a, privatize(f, p, stream=0, counter=1))
    assert not np.array_equal(a, privatize(f, p, stream=1, counter=0))


def test_batch_uses_ordinal_streams():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(5, 4))
    p = DpParams.calibrated(1.0, 2.0, 1e-5, seed=2)
    out = privatize_batch(X, p, counter=7)
    for i in range(5):
        assert np.array_equal(out[i], privatize(X[i], p, stream=i, counter=7))


def test_noise_passes_ks():
    z = trng.gaussian(100_000, seed=1234, stream=0, counter=0)
    assert stats.kstest(z, "norm").pvalue > 0.01
    p = DpParams.calibrated(1.0, 2.0, 1e-5, seed=5)
    noise = privatize_batch(np.zeros((100_000, 1)), p)[:, 0]
    assert stats.kstest(noise / p.noise_sigma, "norm").pvalue > 0.01


def test_derive_seed_is_stable():
    assert trng.derive_seed(1, 2) == trng.derive_seed(1, 2)
    assert trng.derive_seed(1, 2) != trng.derive_seed(2, 1)
