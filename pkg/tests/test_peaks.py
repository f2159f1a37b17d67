import numpy as np
import pytest

from ehsim import DomainError, ShapeError
from ehsim.integrate import Waveform, simulate_window
from ehsim.peaks import detect_peaks, event_peaks, r_peaks, systolic_peaks
from ehsim.simcore import GaussianComponent, default_params


def test_impulse_train():
    x = np.zeros(1000)
    x[[50, 150, 250, 350]] = 1.0
    np.testing.assert_array_equal(detect_peaks(x, 0.4, fs=100), [50, 150, 250, 350])


def test_constant_signal_has_no_peaks():
    assert len(detect_peaks(np.ones(100), 0.4, fs=100)) == 0


def test_equal_peaks_keep_earlier():
    x = np.zeros(200)
    x[[60, 80]] = 1.0
    np.testing.assert_array_equal(detect_peaks(x, 0.4, fs=100), [60])


def test_larger_peak_wins_conflict():
    x = np.zeros(200)
    x[60], x[80] = 1.0, 2.0
    np.testing.assert_array_equal(detect_peaks(Waveform(x, 100), 0.4), [80])


def test_minima_and_height():
    x = np.zeros(300)
    x[[50, 150]] = -1.0
    x[250] = -0.2
    np.testing.assert_array_equal(detect_peaks(x, 0.4, "min", height=0.5, fs=100), [50, 150])


def test_errors():
    with pytest.raises(ShapeError):
        detect_peaks(np.zeros(2), 0.4, fs=100)
    with pytest.raises(DomainError):
        detect_peaks(np.zeros(10), 0.0, fs=100)
    with pytest.raises(DomainError):
        detect_peaks(np.zeros(10), 0.4, "both", fs=100)


def test_r_and_systolic_peaks_track_beats():
    p = default_params(72)
    e, g = simulate_window(p, 10.0)
    r = r_peaks(e)
    s = systolic_peaks(g)
    expected = round(10 * 72 / 60)
    assert abs(len(r) - expected) <= 1
    assert abs(len(s) - expected) <= 1
    np.testing.assert_allclose(np.diff(r) / 120, 60 / 72, atol=2 / 120)
    np.testing.assert_array_equal(r, event_peaks(e))


def test_inverted_qrs_found():
    base = default_params()
    comps = dict(base.ecg.components)
    comps["R"] = GaussianComponent(0.0, -30.0, 0.1)
    p = base.replace(ecg=type(base.ecg)(comps))
    e, _ = simulate_window(p, 10.0)
    r = r_peaks(e)
    assert abs(len(r) - 10) <= 1
    assert np.all(e.samples[r] < np.median(e.samples))
