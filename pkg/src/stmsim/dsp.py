"""Digital signal chain: biquad filters, notch banks, lock-in demodulation, log amp.

Filters are cascades of second-order sections in scipy's ``sos`` layout
(b0 b1 b2 a0 a1 a2, a0 = 1) and are run in direct form II transposed.
"""
from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import signal


class FilterDesignError(ValueError):
    pass


@dataclass
class FilterSection:
    """A designed filter: one or more cascaded biquads."""

    sos: np.ndarray
    kind: str
    freq: float
    fs: float
    Q: float | None = None
    order: int = 2
    family: str = ""

    def __post_init__(self):
        self.sos = np.atleast_2d(np.asarray(self.sos, dtype=float))

    @property
    def poles(self):
        return np.concatenate([np.roots(s[3:]) for s in self.sos])

    def is_stable(self):
        return bool(np.all(np.abs(self.poles) < 1.0))

    def response(self, f_hz):
        """Complex response at frequencies in Hz."""
        _, H = signal.sosfreqz(self.sos, worN=np.atleast_1d(np.asarray(f_hz, dtype=float)), fs=self.fs)
        return H

    def filter(self, x, zi=None):
        if zi is None:
            return signal.sosfilt(self.sos, x)
        return signal.sosfilt(self.sos, x, zi=zi)


def design_filter(kind: str, freq: float, Q: float | None = None, fs: float = 100e3,
                  order: int | None = None, family: str | None = None) -> FilterSection:
    """Design a lowpass, highpass or notch section cascade.

    lowpass: Bessel (magnitude-normalized, so -3 dB at ``freq``) by default,
             order 6; family='butter' gives a Butterworth.
    highpass: Butterworth, order 2 by default.
    notch: second-order notch with quality factor Q (default 30).
    """
    if not (0.0 < freq < fs / 2.0):
        raise FilterDesignError(f"frequency {freq} Hz outside (0, fs/2 = {fs / 2} Hz)")
    if kind == "notch":
        Q = 30.0 if Q is None else Q
        b, a = signal.iirnotch(freq, Q, fs=fs)
        return FilterSection(np.hstack([b, a])[None, :], "notch", freq, fs, Q=Q, order=2, family="notch")
    if kind == "lowpass":
        order = 6 if order is None else order
        family = family or "bessel"
        if family == "bessel":
            sos = signal.bessel(order, freq, btype="low", norm="mag", output="sos", fs=fs)
        elif family == "butter":
            sos = signal.butter(order, freq, btype="low", output="sos", fs=fs)
        else:
            raise FilterDesignError(f"unknown family {family!r}")
        return FilterSection(sos, "lowpass", freq, fs, order=order, family=family)
    if kind == "highpass":
        order = 2 if order is None else order
        family = family or "butter"
        sos = signal.butter(order, freq, btype="high", output="sos", fs=fs)
        return FilterSection(sos, "highpass", freq, fs, order=order, family=family)
    raise FilterDesignError(f"unknown filter kind {kind!r}")


def lpf_time_constant(section: FilterSection) -> float:
    """Equivalent time constant 1/(2 pi fc) of a lowpass."""
    return 1.0 / (2 * np.pi * section.freq)


def notch_frequencies(f0: float, n_harmonics: int = 5, fs: float = 100e3):
    """Harmonics of f0 that fit below Nyquist; warns on truncation."""
    fr = [k * f0 for k in range(1, n_harmonics + 1)]
    keep = [f for f in fr if f < fs / 2.0]
    if len(keep) < len(fr):
        warnings.warn(f"notch bank truncated to {len(keep)} of {n_harmonics} harmonics (Nyquist {fs / 2} Hz)",
                      stacklevel=2)
    return keep


def notch_bank_design(f0: float, n_harmonics: int = 5, fs: float = 100e3, Q: float = 30.0) -> FilterSection:
    keep = notch_frequencies(f0, n_harmonics, fs)
    if not keep:
        return FilterSection(np.array([[1.0, 0, 0, 1.0, 0, 0]]), "notch", f0, fs, Q=Q, order=0, family="notch")
    sos = np.vstack([design_filter("notch", f, Q, fs).sos for f in keep])
    return FilterSection(sos, "notch", f0, fs, Q=Q, order=2 * len(keep), family="notch")


def notch_bank(x, f0: float, n_harmonics: int = 5, fs: float = 100e3, Q: float = 30.0):
    """Filter a sampled stream through notches at f0, 2 f0, ..., n f0."""
    return notch_bank_design(f0, n_harmonics, fs, Q).filter(np.asarray(x, dtype=float))


class SosStream:
    """Sample-by-sample DF2T runner for an sos cascade."""

    def __init__(self, sos):
        self.sos = np.atleast_2d(np.asarray(sos, dtype=float))
        self.z = np.zeros((self.sos.shape[0], 2))

    def reset(self):
        self.z[:] = 0.0

    def step(self, x: float) -> float:
        for k, (b0, b1, b2, _, a1, a2) in enumerate(self.sos):
            z = self.z[k]
            y = b0 * x + z[0]
            z[0] = b1 * x - a1 * y + z[1]
            z[1] = b2 * x - a2 * y
            x = y
        return x


def log_amp(v, floor: float = 1e-6):
    """ln(max(|v|, floor))."""
    return np.log(np.maximum(np.abs(np.asarray(v, dtype=float)), floor))


@dataclass
class LiaOutput:
    amplitude: float
    phase: float
    y_d_dc: float
    y_q_dc: float


def lia_amplitude(y_d, y_q):
    return 2.0 * np.hypot(y_d, y_q)


@dataclass
class LiaChannel:
    """Quadrature lock-in: HPF, mix with sin/cos of the reference, LPF each branch.

    For x = a sin(w t + p) the settled outputs are y_d = a/2 cos p and
    y_q = a/2 sin p, so amplitude = 2 sqrt(y_d^2 + y_q^2) = a and
    phase = atan2(y_q, y_d) = p.
    """

    f_ref: float
    fs: float = 100e3
    hpf_hz: float = 100.0
    lpf_hz: float = 300.0
    lpf_order: int = 6
    lpf_family: str = "bessel"
    ref_phase: float = 0.0
    n: int = 0
    hpf: FilterSection = field(init=False)
    lpf: FilterSection = field(init=False)

    def __post_init__(self):
        self.hpf = design_filter("highpass", self.hpf_hz, fs=self.fs)
        self.lpf = design_filter("lowpass", self.lpf_hz, fs=self.fs, order=self.lpf_order,
                                 family=self.lpf_family)
        self._h = SosStream(self.hpf.sos)
        self._d = SosStream(self.lpf.sos)
        self._q = SosStream(self.lpf.sos)
        self.y_d = 0.0
        self.y_q = 0.0

    @property
    def w_ref(self):
        return 2 * np.pi * self.f_ref

    def reset(self):
        self.n = 0
        for s in (self._h, self._d, self._q):
            s.reset()
        self.y_d = self.y_q = 0.0

    def step(self, x: float) -> LiaOutput:
        return lia_step(self, x)

    def process(self, x):
        """Block version of repeated ``step`` calls; returns (amplitude, phase, y_d, y_q) arrays."""
        x = np.asarray(x, dtype=float)
        t = (self.n + np.arange(x.size)) / self.fs
        th = self.w_ref * t + self.ref_phase
        xf, self._h.z[:] = signal.sosfilt(self.hpf.sos, x, zi=self._h.z)
        yd, self._d.z[:] = signal.sosfilt(self.lpf.sos, xf * np.sin(th), zi=self._d.z)
        yq, self._q.z[:] = signal.sosfilt(self.lpf.sos, xf * np.cos(th), zi=self._q.z)
        self.n += x.size
        if x.size:
            self.y_d, self.y_q = yd[-1], yq[-1]
        return lia_amplitude(yd, yq), np.arctan2(yq, yd), yd, yq

    def settle_time(self, n_tau: float = 5.0) -> float:
        return n_tau * lpf_time_constant(self.lpf)


def lia_step(ch: LiaChannel, x_sample: float) -> LiaOutput:
    th = ch.w_ref * ch.n / ch.fs + ch.ref_phase
    xf = ch._h.step(float(x_sample))
    ch.y_d = ch._d.step(xf * np.sin(th))
    ch.y_q = ch._q.step(xf * np.cos(th))
    ch.n += 1
    return LiaOutput(lia_amplitude(ch.y_d, ch.y_q), float(np.arctan2(ch.y_q, ch.y_d)), ch.y_d, ch.y_q)


def quadrature_correlate(x, f: float, fs: float, t0: float = 0.0):
    """Complex phasor of x at frequency f: 2/N sum x exp(-j w t).

    Exact for tones when the record spans an integer number of periods.
    The phasor c satisfies x ~ Re(c exp(j w t)), so a sin(w t + p) gives
    c = a exp(j (p - pi/2)).
    """
    x = np.asarray(x, dtype=float)
    t = t0 + np.arange(x.size) / fs
    return 2.0 * np.mean(x * np.exp(-1j * 2 * np.pi * f * t))


def taylor_harmonics(f, pbar: float, A_m: float, step: float | None = None):
    """Harmonic amplitudes of f(pbar + A_m sin wt) from the Taylor series.

    Returns (h1, h2, h3) = (A_m f', A_m^2 f''/4, A_m^3 f'''/24), the leading
    term of each harmonic. Derivatives are central finite differences.
    """
    if step is None:
        step = max(abs(pbar), 1.0) * 1e-3
    if step < 1e3 * np.finfo(float).eps * max(abs(pbar), 1.0):
        raise ValueError("finite-difference step too small to be stable")
    hs = step
    f0 = f(pbar)
    fp, fm = f(pbar + hs), f(pbar - hs)
    fp2, fm2 = f(pbar + 2 * hs), f(pbar - 2 * hs)
    d1 = (fp - fm) / (2 * hs)
    d2 = (fp - 2 * f0 + fm) / hs ** 2
    d3 = (fp2 - 2 * fp + 2 * fm - fm2) / (2 * hs ** 3)
    return A_m * d1, A_m ** 2 * d2 / 4.0, A_m ** 3 * d3 / 24.0


def filter_response_csv(section: FilterSection, path, f_hz=None):
    """Write freq, magnitude dB, phase deg."""
    import csv

    f_hz = np.logspace(0, np.log10(section.fs / 2 * 0.999), 400) if f_hz is None else np.asarray(f_hz)
    H = section.response(f_hz)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["freq_hz", "mag_db", "phase_deg"])
        for fi, h in zip(f_hz, H):
            w.writerow([repr(float(fi)), repr(float(20 * np.log10(abs(h)))), repr(float(np.degrees(np.angle(h))))])
