"""Linear time-invariant systems in zero-pole-gain form.

Continuous systems have dt = None; discrete systems carry their sample
period. A pure sample delay is a pole at z = 0.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import optimize, signal

from .dsp import SosStream


class ImproperSystemError(ValueError):
    pass


def _arr(x):
    return np.atleast_1d(np.asarray(x, dtype=complex)).ravel()


@dataclass
class LinearSystem:
    zeros: np.ndarray
    poles: np.ndarray
    gain: float
    dt: float | None = None
    name: str = ""

    def __post_init__(self):
        self.zeros = _arr(self.zeros) if len(np.atleast_1d(self.zeros)) else np.zeros(0, complex)
        self.poles = _arr(self.poles) if len(np.atleast_1d(self.poles)) else np.zeros(0, complex)
        self.gain = float(np.real(self.gain))

    # construction -------------------------------------------------------
    @classmethod
    def from_tf(cls, num, den, dt=None, name=""):
        num = np.trim_zeros(np.atleast_1d(np.asarray(num, dtype=float)), "f")
        den = np.trim_zeros(np.atleast_1d(np.asarray(den, dtype=float)), "f")
        if den.size == 0:
            raise ValueError("zero denominator")
        if num.size == 0:
            return cls([], [], 0.0, dt, name)
        z, p, k = signal.tf2zpk(num, den)
        return cls(z, p, k, dt, name)

    @classmethod
    def static(cls, g, dt=None, name=""):
        return cls([], [], g, dt, name)

    @property
    def is_discrete(self):
        return self.dt is not None

    @property
    def fs(self):
        return None if self.dt is None else 1.0 / self.dt

    @property
    def order(self):
        return self.poles.size

    def is_proper(self):
        return self.zeros.size <= self.poles.size

    @property
    def num(self):
        return np.real_if_close(self.gain * np.poly(self.zeros)).real if self.zeros.size else np.array([self.gain])

    @property
    def den(self):
        return np.real_if_close(np.poly(self.poles)).real if self.poles.size else np.array([1.0])

    def tf(self):
        return self.num, self.den

    def dcgain(self):
        s0 = 1.0 if self.is_discrete else 0.0
        dp = np.prod(s0 - self.poles)
        if abs(dp) == 0:
            return np.inf
        return float(np.real(self.gain * np.prod(s0 - self.zeros) / dp))

    def is_stable(self):
        if self.is_discrete:
            return bool(np.all(np.abs(self.poles) < 1.0))
        return bool(np.all(self.poles.real < 0.0))

    # evaluation ---------------------------------------------------------
    def evaluate(self, s):
        s = np.asarray(s, dtype=complex)
        out = np.full(s.shape, self.gain, dtype=complex)
        for z in self.zeros:
            out *= s - z
        for p in self.poles:
            out /= s - p
        return out

    def freq_response(self, w):
        """H(jw) or H(exp(jw dt)) for w in rad/s."""
        w = np.asarray(w, dtype=float)
        if self.is_discrete:
            return self.evaluate(np.exp(1j * w * self.dt))
        return self.evaluate(1j * w)

    # algebra ------------------------------------------------------------
    def _check_compat(self, other):
        if self.dt != other.dt:
            raise ValueError("cannot combine systems with different sample periods")

    def __mul__(self, other):
        if np.isscalar(other):
            return LinearSystem(self.zeros, self.poles, self.gain * other, self.dt, self.name)
        self._check_compat(other)
        return LinearSystem(np.concatenate([self.zeros, other.zeros]),
                            np.concatenate([self.poles, other.poles]),
                            self.gain * other.gain, self.dt)

    __rmul__ = __mul__

    def feedback_T(self):
        """Complementary sensitivity L/(1+L) as a new system."""
        n, d = self.num, self.den
        m = max(n.size, d.size)
        n = np.pad(n, (m - n.size, 0))
        d = np.pad(d, (m - d.size, 0))
        return LinearSystem.from_tf(n, d + n, self.dt)

    def sections(self, with_gain=True):
        """Split into first/second-order real factors (num, den) pairs, gain on the first."""
        pg = _pair_roots(self.poles)
        zg = _pair_roots(self.zeros)
        if len(zg) > len(pg):
            raise ImproperSystemError("more zero groups than pole groups")
        # hand the largest zero groups to the largest pole groups so every section is proper
        pg.sort(key=len, reverse=True)
        zg.sort(key=len, reverse=True)
        out = []
        for k, pp in enumerate(pg):
            zz = zg[k] if k < len(zg) else np.zeros(0)
            if zz.size > pp.size:
                raise ImproperSystemError("cannot split into proper sections")
            out.append((np.real(np.poly(zz)) if zz.size else np.array([1.0]), np.real(np.poly(pp))))
        if not out:
            out.append((np.array([1.0]), np.array([1.0])))
        if with_gain:
            n0, d0 = out[0]
            out[0] = (n0 * self.gain, d0)
        return out

    def to_ss(self):
        """Series connection of low-order sections (better conditioned than one polynomial)."""
        A = np.zeros((0, 0))
        B = np.zeros((0, 1))
        C = np.zeros((1, 0))
        D = np.ones((1, 1))
        for num, den in self.sections(with_gain=False):
            if den.size == 1:
                a2, b2, c2, d2 = np.zeros((0, 0)), np.zeros((0, 1)), np.zeros((1, 0)), np.array([[num[0] / den[0]]])
            else:
                a2, b2, c2, d2 = signal.tf2ss(num, den)
            n1, n2 = A.shape[0], a2.shape[0]
            An = np.zeros((n1 + n2, n1 + n2))
            An[:n1, :n1] = A
            An[n1:, :n1] = b2 @ C
            An[n1:, n1:] = a2
            B = np.vstack([B, b2 @ D])
            C = np.hstack([d2 @ C, c2])
            D = d2 @ D
            A = An
        return A, B, C * self.gain, D * self.gain

    def closed_loop_poles(self):
        """Poles of L/(1+L) under unity negative feedback."""
        A, B, C, D = self.to_ss()
        if A.size == 0:
            return np.zeros(0, complex)
        d = 1.0 + D[0, 0]
        return np.linalg.eigvals(A - B @ C / d)

    def delayed(self, n=1):
        if not self.is_discrete:
            raise ValueError("sample delay needs a discrete system")
        return LinearSystem(self.zeros, np.concatenate([self.poles, np.zeros(n)]), self.gain, self.dt, self.name)

    # discretization ----------------------------------------------------
    def discretize(self, fs: float = 100e3, prewarp_hz: float | None = None):
        return discretize(self, fs, prewarp_hz)

    def to_sos(self):
        z, p = self.zeros, self.poles
        if p.size == 0 and z.size == 0:
            return np.array([[self.gain, 0, 0, 1, 0, 0]], dtype=float)
        sos = signal.zpk2sos(z, p, self.gain)
        d = p.size - z.size
        if self.is_discrete and d > 0:
            # zpk2sos pads missing zeros at z = 0, which would advance the
            # response by d samples; undo with pure delay sections
            delay = [[0, 0, 1, 1, 0, 0]] * (d // 2) + [[0, 1, 0, 1, 0, 0]] * (d % 2)
            sos = np.vstack([sos, np.asarray(delay, dtype=float)])
        return sos

    # persistence ----------------------------------------------------------
    def to_text(self):
        lines = ["# LinearSystem coefficients, descending powers",
                 f"dt = {'none' if self.dt is None else repr(self.dt)}",
                 "num = " + " ".join(repr(float(c)) for c in self.num),
                 "den = " + " ".join(repr(float(c)) for c in self.den)]
        return "\n".join(lines) + "\n"

    @classmethod
    def from_text(cls, text):
        vals = {}
        for line in text.splitlines():
            line = line.split("#", 1)[0].strip()
            if "=" in line:
                k, v = (s.strip() for s in line.split("=", 1))
                vals[k] = v
        dt = None if vals.get("dt", "none") == "none" else float(vals["dt"])
        return cls.from_tf([float(c) for c in vals["num"].split()], [float(c) for c in vals["den"].split()], dt)


def _pair_roots(r):
    """Group roots into conjugate pairs and pairs of reals (a single real may remain)."""
    r = np.asarray(r, dtype=complex)
    cplx = r[np.abs(r.imag) > 1e-12 * np.maximum(1.0, np.abs(r))]
    real = np.sort(r[np.abs(r.imag) <= 1e-12 * np.maximum(1.0, np.abs(r))].real)
    groups = [np.array([c, np.conj(c)]) for c in cplx if c.imag > 0]
    for k in range(0, real.size - 1, 2):
        groups.append(real[k:k + 2].astype(complex))
    if real.size % 2:
        groups.append(real[-1:].astype(complex))
    return groups


def discretize(sys: LinearSystem, fs: float = 100e3, prewarp_hz: float | None = None) -> LinearSystem:
    """Bilinear (Tustin) map, optionally prewarped; DC gain kept exact."""
    if sys.is_discrete:
        raise ValueError("system already discrete")
    if not sys.is_proper():
        raise ImproperSystemError("improper system cannot be discretized")
    fs_eff = fs
    if prewarp_hz is not None:
        if not 0 < prewarp_hz < fs / 2:
            raise ValueError("prewarp frequency must lie below Nyquist")
        fs_eff = np.pi * prewarp_hz / np.tan(np.pi * prewarp_hz / fs)
    z, p, k = signal.bilinear_zpk(sys.zeros, sys.poles, sys.gain, fs_eff)
    out = LinearSystem(z, p, k, 1.0 / fs, sys.name)
    dc_c = sys.dcgain()
    if np.isfinite(dc_c) and dc_c != 0.0:
        dc_d = out.dcgain()
        if np.isfinite(dc_d) and dc_d != 0.0:
            out.gain *= dc_c / dc_d
    return out


def freq_response(sys: LinearSystem, w):
    return sys.freq_response(w)


class DiscreteSim:
    """Per-sample simulation of a discrete system."""

    def __init__(self, sys: LinearSystem):
        if not sys.is_discrete:
            raise ValueError("discretize first")
        if not sys.is_proper():
            raise ImproperSystemError("non-causal discrete system")
        self.sys = sys
        self._s = SosStream(sys.to_sos())

    def reset(self):
        self._s.reset()

    def step(self, u: float) -> float:
        return self._s.step(u)

    def run(self, u):
        return signal.sosfilt(self._s.sos, np.asarray(u, dtype=float))


def step_sim(sim: DiscreteSim, u: float) -> float:
    return sim.step(u)


# ---------------------------------------------------------------------------
# Standard blocks

def first_order_lowpass(f_hz, gain=1.0, name=""):
    w = 2 * np.pi * f_hz
    return LinearSystem([], [-w], gain * w, None, name)


def resonator(f0_hz, zeta, gain=1.0, name=""):
    w = 2 * np.pi * f0_hz
    p = np.roots([1.0, 2 * zeta * w, w * w])
    return LinearSystem([], p, gain * w * w, None, name)


def pi_controller(ki, wc, dt=None):
    """K(s) = ki (1/s + 1/wc) = (ki/wc) (s + wc)/s; Tustin form when dt is given."""
    c = LinearSystem([-wc], [0.0], ki / wc, None, "PI")
    if dt is None:
        return c
    # trapezoidal integrator without DC correction (the pole at z=1 has infinite DC gain)
    z, p, k = signal.bilinear_zpk(c.zeros, c.poles, c.gain, 1.0 / dt)
    return LinearSystem(z, p, k, dt, "PI")


def bessel_lowpass(f_hz, order=6, name=""):
    z, p, k = signal.bessel(order, 2 * np.pi * f_hz, btype="low", analog=True, norm="mag", output="zpk")
    return LinearSystem(z, p, k, None, name)


@dataclass(frozen=True)
class PlantParams:
    hv_gain: float = 13.5
    hv_pole_hz: float = 50e3
    piezo_sens_nm_per_V: float = 1.0
    piezo_f0_hz: float = 8e3
    piezo_zeta: float = 0.05
    preamp_R_V_per_nA: float = 1.0
    preamp_bw_hz: float = 1.1e3
    fs: float = 100e3


@dataclass
class PlantChain:
    """u -> HV amp -> piezo -> (junction) -> preamp."""

    params: PlantParams = field(default_factory=PlantParams)

    @property
    def hv_amp(self):
        p = self.params
        return first_order_lowpass(p.hv_pole_hz, p.hv_gain, "HV")

    @property
    def piezo(self):
        p = self.params
        return resonator(p.piezo_f0_hz, p.piezo_zeta, p.piezo_sens_nm_per_V, "piezo")

    @property
    def preamp(self):
        p = self.params
        return first_order_lowpass(p.preamp_bw_hz, p.preamp_R_V_per_nA, "preamp")

    def discrete(self):
        p = self.params
        return {"hv": self.hv_amp.discretize(p.fs),
                "piezo": self.piezo.discretize(p.fs, prewarp_hz=p.piezo_f0_hz),
                "preamp": self.preamp.discretize(p.fs)}

    @property
    def static_gain(self):
        """Tip extension per volt of controller output, nm/V."""
        return self.params.hv_gain * self.params.piezo_sens_nm_per_V


# ---------------------------------------------------------------------------
# Stability metrics

@dataclass
class StabilityMetrics:
    gain_margin: float
    phase_margin: float
    closedloop_inf_norm: float
    bandwidth: float          # Hz, -3 dB crossing of T
    w_phase_cross: float
    w_gain_cross: float
    closed_loop_stable: bool

    @property
    def inf_norm_db(self):
        return 20 * np.log10(self.closedloop_inf_norm)


def _grid(L: LinearSystem, w_min=None, w_max=None, n=3000):
    if L.is_discrete:
        hi = np.pi / L.dt * (1 - 1e-9)
    else:
        scale = np.max(np.abs(np.concatenate([L.poles, L.zeros, [1.0]])))
        hi = 1e3 * scale
    lo = 1e-3 if w_min is None else w_min
    hi = hi if w_max is None else w_max
    return np.logspace(np.log10(lo), np.log10(hi), n)


def stability_metrics(L: LinearSystem, w_min=None, w_max=None, n_grid=3000) -> StabilityMetrics:
    """Margins, peak of |T| and -3 dB bandwidth of T = L/(1+L)."""
    w = _grid(L, w_min, w_max, n_grid)
    H = L.freq_response(w)
    f_im = lambda x: L.freq_response(x).imag
    f_mag = lambda x: abs(L.freq_response(x)) - 1.0

    gm, w180 = np.inf, np.nan
    s = np.sign(H.imag)
    for k in np.flatnonzero(s[:-1] * s[1:] < 0):
        wc = optimize.brentq(f_im, w[k], w[k + 1], xtol=1e-12 * w[k], maxiter=200)
        Hc = L.freq_response(wc)
        if Hc.real < 0:
            m = 1.0 / abs(Hc)
            if m < gm:
                gm, w180 = m, wc

    pm, wgc = np.inf, np.nan
    mg = np.abs(H) - 1.0
    for k in np.flatnonzero(np.sign(mg[:-1]) * np.sign(mg[1:]) < 0):
        wc = optimize.brentq(f_mag, w[k], w[k + 1], xtol=1e-12 * w[k], maxiter=200)
        ph = np.degrees(np.angle(L.freq_response(wc)))
        marg = 180.0 + ph if ph <= 0 else ph - 180.0
        marg = (marg + 180.0) % 360.0 - 180.0
        if abs(marg) < abs(pm):
            pm, wgc = marg, wc

    T = np.abs(H / (1.0 + H))
    k = int(np.argmax(T))
    lo, hi = w[max(k - 1, 0)], w[min(k + 1, w.size - 1)]
    Tf = lambda lw: -abs(L.freq_response(np.exp(lw)) / (1 + L.freq_response(np.exp(lw))))
    if hi > lo:
        r = optimize.minimize_scalar(Tf, bounds=(np.log(lo), np.log(hi)), method="bounded",
                                     options={"xatol": 1e-10})
        tinf = max(T[k], -r.fun)
    else:
        tinf = T[k]

    bw = np.nan
    below = np.flatnonzero(T < 1 / np.sqrt(2))
    if below.size and below[0] > 0:
        j = below[0]
        g = lambda x: abs(L.freq_response(x) / (1 + L.freq_response(x))) - 1 / np.sqrt(2)
        bw = optimize.brentq(g, w[j - 1], w[j], xtol=1e-12 * w[j]) / (2 * np.pi)
    elif below.size == 0:
        bw = np.inf

    cl = L.closed_loop_poles()
    stable = bool(np.all(np.abs(cl) < 1.0)) if L.is_discrete else bool(np.all(cl.real < 0))
    return StabilityMetrics(gm, pm, tinf, bw, w180, wgc, stable)
