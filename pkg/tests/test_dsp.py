import numpy as np
import pytest
from hypothesis import given, strategies as st
from scipy import signal

from stmsim.dsp import (FilterDesignError, LiaChannel, design_filter, filter_response_csv, lia_step,
                        log_amp, lpf_time_constant, notch_bank, notch_bank_design, notch_frequencies,
                        quadrature_correlate, taylor_harmonics)

FS = 100e3


def db(x):
    return 20 * np.log10(np.abs(x))


def test_notch_response():
    n = design_filter("notch", 2000.0, Q=30.0, fs=FS)
    assert db(n.response(2000.0))[0] <= -40.0
    assert db(n.response(1000.0))[0] >= -1.0
    assert n.is_stable()


@pytest.mark.parametrize("fc", [300.0, 500.0, 700.0])
def test_lowpass_corner(fc):
    lp = design_filter("lowpass", fc, fs=FS)
    assert np.abs(lp.response(fc))[0] == pytest.approx(1 / np.sqrt(2), rel=0.05)
    assert lp.is_stable()


def test_butterworth_lowpass_option():
    lp = design_filter("lowpass", 300.0, fs=FS, order=2, family="butter")
    ref = signal.butter(2, 300.0, fs=FS, output="sos")
    assert np.allclose(lp.sos, ref)


def test_nyquist_guard():
    with pytest.raises(FilterDesignError):
        design_filter("lowpass", 60e3, fs=FS)
    with pytest.raises(FilterDesignError):
        design_filter("bandpass", 1e3, fs=FS)


def _tone(f, a=1.0, ph=0.0, seconds=0.1):
    t = np.arange(int(seconds * FS)) / FS
    return a * np.sin(2 * np.pi * f * t + ph)


@pytest.mark.parametrize("fc", [300.0, 500.0, 700.0])
def test_lia_recovers_amplitude_and_phase(fc):
    ch = LiaChannel(2000.0, FS, lpf_hz=fc)
    amp, ph, _, _ = ch.process(_tone(2000.0, 2.0, 0.4, 0.1))
    k = int(5 * lpf_time_constant(ch.lpf) * FS)
    assert np.max(np.abs(amp[k:] - 2.0)) < 0.02
    # the input high-pass adds its own phase at the reference frequency
    assert ph[-1] == pytest.approx(0.4 + np.angle(ch.hpf.response(2000.0)[0]), abs=0.01)


def test_lia_step_matches_block_processing():
    x = _tone(2000.0, 1.3, 0.2, 0.02) + 0.1
    a = LiaChannel(2000.0, FS)
    b = LiaChannel(2000.0, FS)
    amp_block = a.process(x)[0]
    amp_step = np.array([lia_step(b, v).amplitude for v in x])
    assert np.allclose(amp_block, amp_step, rtol=1e-10, atol=1e-12)


def test_lia_rejects_off_reference_tone_and_dc():
    ch = LiaChannel(2000.0, FS, lpf_hz=300.0)
    amp = ch.process(_tone(3000.0, 1.0, 0.0, 0.1))[0]
    assert np.max(amp[len(amp) // 2:]) < 0.02
    ch = LiaChannel(2000.0, FS)
    amp = ch.process(np.full(int(0.2 * FS), 3.0))[0]
    assert amp[-1] < 1e-3


def test_notch_bank_examples():
    x = _tone(2000.0, 1.0, 0.0, 0.3) + _tone(4000.0, 1.0, 0.0, 0.3)
    y = notch_bank(x, 2000.0, 5, FS)
    tail = slice(len(y) // 2, None)
    assert db(np.std(y[tail]) / np.std(x[tail])) <= -40.0
    z = notch_bank(_tone(500.0, 1.0, 0.0, 0.3), 2000.0, 5, FS)
    assert abs(db(np.std(z[tail]) / np.std(_tone(500.0, 1.0, 0.0, 0.3)[tail]))) < 1.0


def test_notch_bank_truncates_at_nyquist():
    with pytest.warns(UserWarning):
        assert notch_frequencies(15e3, 5, FS) == [15e3, 30e3, 45e3]
    with pytest.warns(UserWarning):
        assert notch_bank_design(15e3, 5, FS).sos.shape[0] == 3


def test_log_amp_examples():
    assert log_amp(1.0) == 0.0
    assert log_amp(-0.5) == pytest.approx(np.log(0.5))
    assert log_amp(0.0, floor=1e-6) == pytest.approx(np.log(1e-6))


def test_taylor_harmonics_examples():
    h1, h2, _ = taylor_harmonics(lambda p: p ** 2, 1.0, 0.1)
    assert h1 == pytest.approx(0.2, rel=1e-6)
    assert h2 == pytest.approx(0.01 / 4 * 2, rel=1e-6)
    _, h2, h3 = taylor_harmonics(lambda p: 3 * p + 1, 1.0, 0.1)
    assert abs(h2) < 1e-9 and abs(h3) < 1e-6
    with pytest.raises(ValueError):
        taylor_harmonics(np.exp, 1.0, 0.1, step=1e-16)


def test_taylor_first_harmonic_matches_simulation():
    # ln i is linear in z, so i = exp(p) under a small dither has first harmonic ~ A exp(p)
    pbar, A = 0.3, 0.01
    t = np.arange(2000) / 2000.0
    x = np.exp(pbar + A * np.sin(2 * np.pi * 10 * t))
    c = quadrature_correlate(x, 10.0, 2000.0)
    h1, _, _ = taylor_harmonics(np.exp, pbar, A)
    assert abs(c) == pytest.approx(h1, rel=1e-4)


@given(st.floats(0.1, 5.0), st.floats(-np.pi, np.pi), st.integers(1, 20))
def test_quadrature_correlate_tone(a, ph, periods):
    f, fs = 50.0, 5000.0
    n = int(periods * fs / f)
    t = np.arange(n) / fs
    c = quadrature_correlate(a * np.sin(2 * np.pi * f * t + ph), f, fs)
    assert abs(c) == pytest.approx(a, rel=1e-9)
    # compare on the unit circle so that +pi and -pi agree
    assert abs(np.angle(c * np.exp(1j * (np.pi / 2 - ph)))) < 1e-9


def test_filter_response_csv(tmp_path):
    lp = design_filter("lowpass", 300.0, fs=FS)
    filter_response_csv(lp, tmp_path / "r.csv", [10.0, 300.0])
    rows = (tmp_path / "r.csv").read_text().splitlines()
    assert rows[0] == "freq_hz,mag_db,phase_deg"
    assert float(rows[2].split(",")[1]) == pytest.approx(-3.01, abs=0.2)
