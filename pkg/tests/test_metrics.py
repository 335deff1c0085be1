import numpy as np
import pytest

from snri_lab import metrics as M
from snri_lab.errors import DegenerateSubspace, LengthMismatch, SilentNoise, SilentReference


def test_snr_hand_values():
    assert M.snr([1, 0], [0, 1]) == 0.0
    assert M.snr([2, 0], [0, 1]) == pytest.approx(6.020599913279624, abs=1e-12)
    with pytest.raises(SilentNoise):
        M.snr([1, 0], [0, 0])
    with pytest.raises(SilentReference):
        M.snr([0, 0], [0, 1])


def test_snri_hand_values():
    assert M.snri([1, 0], [0, 1], [1, 0.5]) == pytest.approx(6.020599913279624, abs=1e-12)
    assert M.snri([1, 0], [0, 1], [1, 1]) == pytest.approx(0.0, abs=1e-12)
    assert M.snri([1, 0], [0, 1], [1, 0]) == M.SNRI_CAP
    with pytest.raises(LengthMismatch):
        M.snri([1, 0], [0, 1], [1, 0, 0])


def test_thresholded_loss_values():
    a = np.array([0.3, -0.2, 0.9])
    assert M.thresholded_snr_loss(a, a, 1e-3) == pytest.approx(-30.0, abs=1e-12)
    assert M.thresholded_snr_loss(a, np.zeros(3), 1e-3) == pytest.approx(
        0.004340774793186, abs=1e-12)
    with pytest.raises(SilentReference):
        M.thresholded_snr_loss(np.zeros(3), a)


def test_sar_decomposition_hand_example():
    dec = M.sar_decompose([1, 0, 0], [0, 1, 0], [1, 0.2, 0.3])
    np.testing.assert_allclose(dec.e_interf, [0, 0.2, 0], atol=1e-15)
    np.testing.assert_allclose(dec.e_artif, [0, 0, 0.3], atol=1e-15)
    assert dec.sar_db == pytest.approx(10.457574905606752, abs=1e-12)
    assert dec.sar_loss == pytest.approx(-10 * np.log10(1 / (0.09 + 1e-3)), abs=1e-12)


def test_sar_perfect_and_degenerate():
    s = np.array([0.5, -1.0, 2.0, 0.1])
    dec = M.sar_decompose(s, np.array([1.0, 1.0, 0.0, 0.0]), s)
    assert not dec.e_interf.any() and not dec.e_artif.any()
    assert dec.sar_loss == pytest.approx(-30.0, abs=1e-12)
    with pytest.raises(DegenerateSubspace):
        M.sar_decompose(s, 2 * s, s + 1)


def test_se_loss_and_consistency():
    s = np.array([1.0, 2.0, -1.0])
    n = np.array([0.5, -0.5, 0.1])
    pair = M.SeparatedPair(s, n)
    assert M.se_loss(s, n, pair) == pytest.approx(-30.0, abs=1e-12)
    assert M.se_loss(s, n, M.SeparatedPair(s, 0 * n), M.ThresholdConfig(alpha=1.0)) == \
        pytest.approx(-30.0, abs=1e-12)
    out = M.mixture_consistency([1.0], M.SeparatedPair([0.3], [0.3]), 0.5)
    np.testing.assert_allclose([out.speech[0], out.noise[0]], [0.5, 0.5], atol=1e-15)
    out = M.mixture_consistency([1.0], M.SeparatedPair([0.3], [0.3]), 1.0)
    np.testing.assert_allclose([out.speech[0], out.noise[0]], [0.7, 0.3], atol=1e-15)


def test_postmix_weight_and_perfect_control():
    assert M.postmix_weight(0.0) == 1.0
    assert M.postmix_weight(6.020599913279624) == pytest.approx(0.5, abs=1e-12)
    rng = np.random.default_rng(3)
    s, n = rng.standard_normal(200), rng.standard_normal(200)
    for lam in (0.0, 3.0, 12.5, 20.0):
        y = M.postmix_control(M.SeparatedPair(s, n), lam)
        assert M.snri(s, n, y) == pytest.approx(lam, abs=1e-9)


def test_snri_target_loss_composition():
    s, n, y1 = [1, 0, 0], [0, 1, 0], [1, 0.5, 0.1]
    total, err, sar = M.snri_target_loss(s, n, y1, 3.0)
    assert err == pytest.approx((3.0 - M.snri(s, n, y1)) ** 2, abs=1e-12)
    assert sar == M.sar_decompose(s, n, y1).sar_loss
    assert total == pytest.approx(err + 0.01 * sar, abs=1e-12)


def test_metrics_report_fields():
    s = np.array([1.0, 0.2, -0.3, 0.0])
    n = np.array([0.1, 1.0, 0.0, 0.4])
    rep = M.metrics_report(s, n, s)
    assert set(rep) == {"snr_in_db", "snri_db", "sar_db", "sar_loss", "snri_loss"}
    assert rep["snri_db"] == M.SNRI_CAP
    assert rep["sar_loss"] == pytest.approx(-30.0, abs=1e-12)
    assert rep["snri_loss"] is None
    assert M.metrics_report(s, n, s + n, 3.0)["snri_loss"] is not None


def test_threshold_config_validation():
    with pytest.raises(ValueError):
        M.ThresholdConfig(tau=0.0)
    with pytest.raises(ValueError):
        M.ThresholdConfig(alpha=1.5)
