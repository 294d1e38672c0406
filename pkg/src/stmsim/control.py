"""Closed-loop z control in constant-current and constant-di/dz modes.

The loop runs at the DSP sample rate in ``_kernel.run_ticks``. This module
owns configuration, filter assembly, operating-point initialization, the
coarse approach, the switchover procedure and the linearized plants used
for identification and tuning.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field, replace

import numpy as np
from scipy import signal

from . import _kernel as K
from .dsp import design_filter, notch_bank_design
from .junction import JunctionParams, decay_constant, steady_state_gap
from .lti import LinearSystem, PlantChain, PlantParams, pi_controller
from .surface import SurfaceMap, sample_surface

CURRENT = "current"
DIDZ = "didz"


class LoopError(RuntimeError):
    pass


class CrashError(LoopError):
    def __init__(self, record):
        self.record = record
        super().__init__(f"tip crash at x={record.crash[0]:.3f} nm, y={record.crash[1]:.3f} nm")


class ApproachFailure(LoopError):
    pass


class LiaNotSettled(LoopError):
    pass


@dataclass(frozen=True)
class LoopConfig:
    fs_hz: float = 100e3
    ki: float = 1.625e4
    omega_c_rad_s: float = 1.0e4
    fine_range_nm: float = 10.0
    # V per neper between the log amplifier and the error junction; sized so
    # that ki = 1.625e4 at wc = 1e4 rad/s sits at half the 3 dB-limited
    # maximum gain of the default di/dz loop
    log_gain_V: float = 6.066e-5
    mode: str = CURRENT
    setpoint_current_nA: float = 0.5
    setpoint_didz_nA_per_nm: float = 0.25
    mod_enabled: bool = False
    mod_amp_V: float = 0.8e-3
    mod_freq_hz: float = 2.0e3
    lia_hpf_hz: float = 100.0
    lia_lpf_hz: float = 300.0
    lia_lpf_order: int = 6
    notch_q: float = 30.0
    notch_harmonics: int = 5
    bias_mod_enabled: bool = False
    bias_mod_amp_V: float = 0.02
    bias_mod_freq_hz: float = 700.0
    lia2_lpf_hz: float = 100.0
    plant: PlantParams = field(default_factory=PlantParams)
    junction: JunctionParams = field(default_factory=JunctionParams)

    def __post_init__(self):
        if self.mode not in (CURRENT, DIDZ):
            raise ValueError(f"mode must be {CURRENT!r} or {DIDZ!r}")
        if self.ki <= 0 or self.omega_c_rad_s <= 0:
            raise ValueError("ki and omega_c must be positive")
        if self.plant.fs != self.fs_hz:
            object.__setattr__(self, "plant", replace(self.plant, fs=self.fs_hz))
        if self.bias_mod_enabled and abs(self.bias_mod_freq_hz - self.mod_freq_hz) < 2 * max(
                self.lia_lpf_hz, self.lia2_lpf_hz):
            raise ValueError("bias and gap modulation frequencies collide within the LIA bandwidth")

    @property
    def chain(self):
        return PlantChain(self.plant)

    @property
    def u_limits(self):
        return 0.0, self.fine_range_nm / self.chain.static_gain

    def setpoint_ln(self, mode=None):
        mode = mode or self.mode
        R = self.junction.R
        if mode == CURRENT:
            return float(np.log(R * self.setpoint_current_nA))
        return float(np.log(R * self.setpoint_didz_nA_per_nm))


class PiController:
    """K(s) = ki (1/s + 1/wc) with a trapezoidal integrator and conditional integration."""

    def __init__(self, ki, omega_c, u_min=-np.inf, u_max=np.inf, integ=0.0):
        self.ki, self.omega_c = ki, omega_c
        self.u_min, self.u_max = u_min, u_max
        self.integ = integ
        self.e_prev = 0.0

    def step(self, e, dt):
        return pi_step(self, e, dt)

    @property
    def high_frequency_gain(self):
        return self.ki / self.omega_c


def pi_step(ctrl: PiController, error: float, dt: float) -> float:
    i_new = ctrl.integ + 0.5 * dt * (error + ctrl.e_prev)
    u = ctrl.ki * (i_new + error / ctrl.omega_c)
    if u > ctrl.u_max and error * ctrl.ki > 0:
        u = min(ctrl.ki * (ctrl.integ + error / ctrl.omega_c), ctrl.u_max)
    elif u < ctrl.u_min and error * ctrl.ki < 0:
        u = max(ctrl.ki * (ctrl.integ + error / ctrl.omega_c), ctrl.u_min)
    else:
        ctrl.integ = i_new
        u = min(max(u, ctrl.u_min), ctrl.u_max)
    ctrl.e_prev = error
    return u


# ---------------------------------------------------------------------------
# Filter assembly

def _lia_sections(cfg: LoopConfig, lpf_hz):
    hpf = design_filter("highpass", cfg.lia_hpf_hz, fs=cfg.fs_hz)
    lpf = design_filter("lowpass", lpf_hz, fs=cfg.fs_hz, order=cfg.lia_lpf_order)
    return hpf, lpf


def _notch_sos(cfg: LoopConfig):
    import warnings

    secs = []
    with warnings.catch_warnings():
        warnings.simplefilter("ignore")
        if cfg.mod_enabled or cfg.mode == DIDZ:
            secs.append(notch_bank_design(cfg.mod_freq_hz, cfg.notch_harmonics, cfg.fs_hz, cfg.notch_q).sos)
        if cfg.bias_mod_enabled:
            secs.append(notch_bank_design(cfg.bias_mod_freq_hz, cfg.notch_harmonics, cfg.fs_hz, cfg.notch_q).sos)
    return np.vstack(secs) if secs else np.zeros((0, 6))


def build_filters(cfg: LoopConfig):
    d = cfg.chain.discrete()
    hpf1, lpf1 = _lia_sections(cfg, cfg.lia_lpf_hz)
    hpf2, lpf2 = _lia_sections(cfg, cfg.lia2_lpf_hz)
    blocks = [d["hv"].to_sos(), d["piezo"].to_sos(), d["preamp"].to_sos(), _notch_sos(cfg),
              hpf1.sos, lpf1.sos, lpf1.sos, hpf2.sos, lpf2.sos, lpf2.sos]
    blk = np.zeros((K.N_BLOCKS, 2), dtype=np.int64)
    start = 0
    for b, s in enumerate(blocks):
        blk[b] = (start, s.shape[0])
        start += s.shape[0]
    sos = np.vstack([s for s in blocks if s.shape[0]])
    return sos, blk, d


def modulation_calibration(cfg: LoopConfig):
    """Nominal tip swing (nm) and the LIA-volts to nA/nm factor for the gap modulation."""
    d = cfg.chain.discrete()
    w = 2 * np.pi * cfg.mod_freq_hz
    hpf, lpf = _lia_sections(cfg, cfg.lia_lpf_hz)
    swing = cfg.mod_amp_V * abs((d["hv"] * d["piezo"]).freq_response(w))
    ga = abs(d["preamp"].freq_response(w)) * abs(hpf.response(cfg.mod_freq_hz)[0])
    return float(swing), float(1.0 / (ga * swing))


def bias_calibration(cfg: LoopConfig):
    d = cfg.chain.discrete()
    hpf, _ = _lia_sections(cfg, cfg.lia2_lpf_hz)
    ga = abs(d["preamp"].freq_response(2 * np.pi * cfg.bias_mod_freq_hz)) * abs(
        hpf.response(cfg.bias_mod_freq_hz)[0])
    return float(1.0 / (ga * cfg.bias_mod_amp_V))


# ---------------------------------------------------------------------------
# Records

@dataclass
class LoopRecord:
    data: np.ndarray          # (n_bins, n_channels)
    status: int = K.STATUS_OK
    crash: tuple | None = None
    mode: str = CURRENT
    meta: dict = field(default_factory=dict)

    def __getattr__(self, name):
        if name in K.CH:
            return self.data[:, K.CH[name]]
        raise AttributeError(name)

    def __len__(self):
        return self.data.shape[0]

    @property
    def crashed(self):
        return self.status == K.STATUS_CRASH

    def concat(self, other):
        return LoopRecord(np.vstack([self.data, other.data]), other.status, other.crash, other.mode,
                          {**self.meta, **other.meta})

    def write_csv(self, path, channels=("t", "U", "z_t", "h", "delta", "i", "lnRi", "didz", "lnRdidz")):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(list(channels) + ["mode"])
            for row in self.data:
                w.writerow([repr(float(row[K.CH[c]])) for c in channels] + [self.meta.get("mode_at", self.mode)])


# ---------------------------------------------------------------------------
# Loop runner

class Loop:
    """Owns the mutable loop state for one simulated instrument."""

    def __init__(self, cfg: LoopConfig, surface: SurfaceMap):
        self.cfg = cfg
        self.surface = surface
        self.sos, self.blk, self._disc = build_filters(cfg)
        self.zi = np.zeros((self.sos.shape[0], 2))
        self.st = np.zeros(K.N_STATE)
        self.prm = np.zeros(K.N_PARAMS)
        self.mode = cfg.mode
        self.x = 0.0
        self.y = 0.0
        self._fill_params()

    # parameters ---------------------------------------------------------
    def _fill_params(self):
        c, j, p = self.cfg, self.cfg.junction, self.prm
        lo, hi = c.u_limits
        swing, cal = modulation_calibration(c)
        self.swing_nominal = swing
        p[K.P_FS] = c.fs_hz
        p[K.P_KI] = c.ki
        p[K.P_WC] = c.omega_c_rad_s
        p[K.P_UMIN], p[K.P_UMAX] = lo, hi
        p[K.P_MODE] = 0.0 if self.mode == CURRENT else 1.0
        p[K.P_SP] = c.setpoint_ln(self.mode)
        p[K.P_G] = c.log_gain_V
        p[K.P_KAPPA0] = j.kappa0
        p[K.P_R] = j.R
        p[K.P_VB] = j.Vb
        p[K.P_IFLOOR] = j.i_floor
        p[K.P_VREF] = j.v_ref
        p[K.P_BETA] = j.beta
        p[K.P_SIGREF] = j.sigma_ref
        mod_on = c.mod_enabled or self.mode == DIDZ
        p[K.P_MOD_ON] = float(mod_on)
        p[K.P_LIA1_ON] = float(mod_on)
        p[K.P_MOD_AMP] = c.mod_amp_V
        p[K.P_MOD_W] = 2 * np.pi * c.mod_freq_hz
        p[K.P_BMOD_ON] = float(c.bias_mod_enabled)
        p[K.P_LIA2_ON] = float(c.bias_mod_enabled)
        p[K.P_BMOD_AMP] = c.bias_mod_amp_V
        p[K.P_BMOD_W] = 2 * np.pi * c.bias_mod_freq_hz
        p[K.P_DIDZ_CAL] = cal
        p[K.P_DIDV_CAL] = bias_calibration(c)
        p[K.P_STATIC] = c.chain.static_gain
        p[K.P_LOOP_ON] = 1.0
        p[K.P_GRID_DX] = self.surface.dx

    @property
    def setpoint(self):
        return self.prm[K.P_SP]

    def set_setpoint(self, sp_ln):
        self.prm[K.P_SP] = sp_ln

    def set_mode(self, mode, sp_ln=None):
        if mode not in (CURRENT, DIDZ):
            raise ValueError(mode)
        if mode == DIDZ and self.prm[K.P_LIA1_ON] == 0.0:
            raise LoopError("constant di/dz mode needs the modulation and LIA running")
        self.mode = mode
        self.prm[K.P_MODE] = 0.0 if mode == CURRENT else 1.0
        if sp_ln is not None:
            self.prm[K.P_SP] = sp_ln

    def enable_modulation(self, on=True):
        self.prm[K.P_MOD_ON] = float(on)
        self.prm[K.P_LIA1_ON] = float(on)

    def set_bias(self, vb):
        self.prm[K.P_VB] = vb

    def set_feedback(self, on=True):
        self.prm[K.P_LOOP_ON] = float(on)

    def set_injection(self, re_amp=0.0, ru_amp=0.0, f_hz=0.0, phase=0.0):
        w = 2 * np.pi * f_hz
        self.prm[K.P_RE_AMP], self.prm[K.P_RE_W], self.prm[K.P_RE_PH] = re_amp, w, phase
        self.prm[K.P_RU_AMP], self.prm[K.P_RU_W], self.prm[K.P_RU_PH] = ru_amp, w, phase

    @property
    def time(self):
        return self.st[K.S_N] / self.cfg.fs_hz

    @property
    def z_base(self):
        return self.prm[K.P_ZBASE]

    @property
    def integrator(self):
        return self.st[K.S_I]

    # operating point ----------------------------------------------------
    def gap_for_setpoint(self, x, y, mode=None, sp_ln=None):
        s = sample_surface(self.surface, x, y)
        mode = mode or self.mode
        sp = self.setpoint if sp_ln is None else sp_ln
        return steady_state_gap(sp, mode, s.sigma, s.phi, self.cfg.junction, Vb=self.prm[K.P_VB]), s

    def engage(self, x, y, ext_nm=None, prime=True):
        """Place the loop at its static operating point above (x, y).

        The coarse height is chosen so the set-point gap is reached with the
        piezo at ``ext_nm`` (default: mid-range). Actuator, preamp and notch
        states start in steady state; lock-in filters start empty and, with
        ``prime``, are filled with feedback held before the loop closes.
        """
        delta, s = self.gap_for_setpoint(x, y)
        if delta <= 0:
            raise LoopError("set-point not reachable without contact")
        ext = 0.5 * self.cfg.fine_range_nm if ext_nm is None else ext_nm
        self.prm[K.P_ZBASE] = s.h + self.prm[K.P_HOFF] + delta + ext
        self._set_static(ext, x, y)
        if prime and (self.prm[K.P_LIA1_ON] or self.prm[K.P_LIA2_ON]):
            self.prime_lia()

    def prime_lia(self, n_tau=8.0):
        """Run with feedback held until the lock-in outputs have settled."""
        c = self.cfg
        lpf = min(c.lia_lpf_hz, c.lia2_lpf_hz if c.bias_mod_enabled else np.inf)
        on = self.prm[K.P_LOOP_ON]
        self.set_feedback(False)
        self.run_for(n_tau / (2 * np.pi * lpf), bin_ticks=1000)
        self.prm[K.P_LOOP_ON] = on
        self.st[K.S_EPREV] = 0.0

    def _set_static(self, ext, x, y):
        u0 = ext / self.cfg.chain.static_gain
        self.zi[:] = 0.0
        self.st[K.S_I] = u0 / self.cfg.ki
        self.st[K.S_EPREV] = 0.0
        self.st[K.S_U] = u0
        self.st[K.S_EXT] = ext
        self.x, self.y = x, y
        s = sample_surface(self.surface, x, y)
        i0 = abs(self._current(self.prm[K.P_ZBASE] - ext - s.h - self.prm[K.P_HOFF], s.sigma, s.phi))
        i0 *= np.sign(self.prm[K.P_VB])
        self._init_block(K.B_HV, u0)
        self._init_block(K.B_PZ, u0 * self.cfg.plant.hv_gain)
        self._init_block(K.B_PRE, i0)
        self._init_block(K.B_NOTCH, i0 * self.cfg.junction.R)

    def _init_block(self, b, x_in):
        a, n = self.blk[b]
        if n:
            self.zi[a:a + n] = signal.sosfilt_zi(self.sos[a:a + n]) * x_in

    def _current(self, delta, sigma, phi):
        from .junction import bias_factor

        j = self.cfg.junction
        jj = replace(j, Vb=self.prm[K.P_VB])
        return bias_factor(sigma, jj.Vb, jj) * np.exp(-decay_constant(phi, j) * max(delta, 0.0))

    # running --------------------------------------------------------------
    def run(self, n_ticks, x1=None, y1=None, bin_ticks=1, bin_edges=None, raise_on_crash=False):
        """Advance n_ticks samples moving linearly from the current position to (x1, y1)."""
        n_ticks = int(n_ticks)
        x1 = self.x if x1 is None else x1
        y1 = self.y if y1 is None else y1
        if bin_edges is None:
            bin_edges = np.arange(0, n_ticks + bin_ticks, bin_ticks, dtype=np.int64)
            bin_edges[-1] = n_ticks
            if bin_edges.size > 1 and bin_edges[-1] == bin_edges[-2]:
                bin_edges = bin_edges[:-1]
        bin_edges = np.asarray(bin_edges, dtype=np.int64)
        out = np.full((bin_edges.size - 1, K.N_CH), np.nan)
        status, done = K.run_ticks(n_ticks, self.x, self.y, float(x1), float(y1), bin_edges, out,
                                   self.prm, self.st, self.sos, self.zi, self.blk, self.surface.h,
                                   self.surface.site_map, self.surface.sigma, self.surface.phi)
        if status == K.STATUS_OK:
            self.x, self.y = float(x1), float(y1)
            rec = LoopRecord(out, status, None, self.mode)
        else:
            self.x, self.y = self.st[K.S_CRASH_X], self.st[K.S_CRASH_Y]
            nb = int(np.searchsorted(bin_edges, done, side="right"))
            rec = LoopRecord(out[:nb], status, (self.x, self.y, self.st[K.S_CRASH_D]), self.mode)
            if raise_on_crash:
                raise CrashError(rec)
        return rec

    def run_for(self, seconds, **kw):
        return self.run(int(round(seconds * self.cfg.fs_hz)), **kw)

    def move_to(self, x, y, speed_nm_s, bin_ticks=1, **kw):
        dist = float(np.hypot(x - self.x, y - self.y))
        n = max(int(round(dist / speed_nm_s * self.cfg.fs_hz)), 1)
        return self.run(n, x, y, bin_ticks=bin_ticks, **kw)

    def jump_to(self, x, y):
        """Instantaneous lateral move (no ticks)."""
        self.x, self.y = float(x), float(y)

    # linearization -------------------------------------------------------
    def linearized_plant(self, mode=None, x=None, y=None):
        return linearized_plant(self.cfg, mode or self.mode, *(self._site_props(x, y)))

    def _site_props(self, x=None, y=None):
        s = sample_surface(self.surface, self.x if x is None else x, self.y if y is None else y)
        return s.phi,


def envelope_equivalent(G: LinearSystem, w_carrier: float) -> LinearSystem:
    """Real baseband system seen by the amplitude of a carrier passed through G.

    For small amplitude changes the in-phase envelope obeys
    H(z) = [G(z c)/G(c) + G(z c*)/G(c*)] / 2, c = exp(j w T).
    """
    c = np.exp(1j * w_carrier * G.dt)
    g1 = G.evaluate(c)
    # G(z c) has zeros z_i / c, poles p_i / c, gain k c^(nz - np)
    def shifted(cc, gc):
        zz, pp = G.zeros / cc, G.poles / cc
        k = G.gain * cc ** (G.zeros.size - G.poles.size) / gc
        return zz, pp, k
    z1, p1, k1 = shifted(c, g1)
    z2, p2, k2 = shifted(np.conj(c), np.conj(g1))
    n1 = k1 * np.poly(z1) if z1.size else np.array([k1])
    n2 = k2 * np.poly(z2) if z2.size else np.array([k2])
    d1, d2 = np.poly(p1), np.poly(p2)
    num = 0.5 * (np.polymul(n1, d2) + np.polymul(n2, d1))
    den = np.polymul(d1, d2)
    return LinearSystem.from_tf(np.real(num), np.real(den), G.dt, "envelope")


def linearized_plant(cfg: LoopConfig, mode: str = DIDZ, phi: float | None = None) -> LinearSystem:
    """Small-signal discrete plant from controller output U to the log-amp output Y.

    Includes the one-sample loop delay of the kernel. ``phi`` defaults to the
    hydrogenated-terrace barrier height of the default surface.
    """
    from .surface import SurfaceSpec

    phi = SurfaceSpec().phi_h if phi is None else phi
    d = cfg.chain.discrete()
    k = float(decay_constant(phi, cfg.junction))
    act = d["hv"] * d["piezo"]
    pre = d["preamp"] * (1.0 / cfg.junction.R)
    if mode == CURRENT:
        meas = pre
        nsos = _notch_sos(cfg)
        for s in nsos:
            z, p, kk = signal.tf2zpk(s[:3], s[3:])
            meas = meas * LinearSystem(z, p, kk, pre.dt)
    else:
        hpf, lpf = _lia_sections(cfg, cfg.lia_lpf_hz)
        zh, ph, kh = signal.sos2zpk(hpf.sos)
        zl, pl, kl = signal.sos2zpk(lpf.sos)
        carrier = pre * LinearSystem(zh, ph, kh, pre.dt)
        env = envelope_equivalent(carrier, 2 * np.pi * cfg.mod_freq_hz)
        meas = env * LinearSystem(zl, pl, kl, pre.dt)
    G = (act * meas) * (cfg.log_gain_V * k)
    G.name = f"G_{mode}"
    return G.delayed(1)


def controller_tf(cfg: LoopConfig, discrete=True) -> LinearSystem:
    return pi_controller(cfg.ki, cfg.omega_c_rad_s, 1.0 / cfg.fs_hz if discrete else None)


# ---------------------------------------------------------------------------
# Procedures

@dataclass
class ApproachResult:
    steps: int
    z_base: float
    ext_engaged: float


def coarse_approach(loop: Loop, x, y, start_gap_nm=50.0, threshold_nA=None, max_steps=100,
                    step_fraction=0.75, window=(0.25, 0.75), settle_s=0.02) -> ApproachResult:
    """Quasi-static coarse approach.

    Each cycle sweeps the piezo over its fine range; if the detection
    threshold is crossed, the coarse motion stops. Otherwise the piezo
    retracts and the coarse positioner moves by ``step_fraction`` of the
    fine range. Engagement is placed inside the ``window`` of the range,
    with a final partial coarse move when the crossing is near the top.
    ``start_gap_nm`` is the gap at zero extension.
    """
    cfg = loop.cfg
    rng = cfg.fine_range_nm
    s = sample_surface(loop.surface, x, y)
    h = s.h + loop.prm[K.P_HOFF]
    jp = replace(cfg.junction, Vb=loop.prm[K.P_VB])
    thr = cfg.setpoint_current_nA if threshold_nA is None else threshold_nA
    from .junction import bias_factor

    f = abs(float(bias_factor(s.sigma, jp.Vb, jp)))
    kap = float(decay_constant(s.phi, jp))
    if thr >= f:
        raise ApproachFailure("detection threshold above the largest achievable current")
    d_thr = np.log(f / thr) / kap        # gap at which the threshold is crossed
    z_base = h + start_gap_nm
    steps = 0
    while True:
        gap0 = z_base - h
        e_star = gap0 - d_thr               # extension where current reaches the threshold
        if e_star <= 0:
            break                            # already within detection range at zero extension
        if e_star <= rng:
            break
        if steps >= max_steps:
            raise ApproachFailure(f"no tunneling after {steps} coarse steps")
        z_base -= step_fraction * rng
        steps += 1
    lo, hi = window[0] * rng, window[1] * rng
    if e_star > hi or e_star < lo:
        # final fine adjustment of the coarse positioner to centre the range
        z_base -= e_star - 0.5 * rng
        e_star = 0.5 * rng
    # regulate from the threshold crossing to the set-point gap
    delta_sp, _ = loop.gap_for_setpoint(x, y)
    ext = z_base - h - delta_sp
    if not (0.0 < ext < rng):
        raise ApproachFailure("set-point gap outside the fine range after approach")
    loop.prm[K.P_ZBASE] = z_base
    loop._set_static(ext, x, y)
    if loop.prm[K.P_LIA1_ON] or loop.prm[K.P_LIA2_ON]:
        loop.prime_lia()
    if settle_s:
        loop.run_for(settle_s)
    return ApproachResult(steps, z_base, ext)


@dataclass
class SwitchResult:
    record: LoopRecord
    t_switch: float
    capture_window: tuple
    new_setpoint: float
    settled_rel_std: float
    refused: bool = False
    message: str = ""


def lia_settled(loop: Loop, window_s=0.1, rel_std_max=0.01):
    """Run ``window_s`` and report (settled, relative std of the LIA amplitude, record)."""
    rec = loop.run_for(window_s)
    a = rec.lia_amp_V
    rel = float(np.std(a) / np.mean(a)) if np.mean(a) > 0 else np.inf
    return rel < rel_std_max, rel, rec


def switchover(loop: Loop, to_mode=DIDZ, capture_s=1.0, check_s=0.1, rel_std_max=0.01,
               post_s=0.0, bin_ticks=1, raise_on_refusal=True) -> SwitchResult:
    """Bumpless transfer between the two regulated quantities.

    The mean of the new mode's log signal over ``capture_s`` becomes its
    set-point; the integrator is kept as is.
    """
    if loop.prm[K.P_LIA1_ON] == 0.0:
        raise LiaNotSettled("modulation and LIA are not running")
    ok, rel, rec0 = lia_settled(loop, check_s, rel_std_max)
    if not ok:
        msg = f"LIA amplitude relative std {rel:.3%} over {check_s} s exceeds {rel_std_max:.1%}"
        if raise_on_refusal:
            raise LiaNotSettled(msg)
        return SwitchResult(rec0, np.nan, (np.nan, np.nan), loop.setpoint, rel, True, msg)
    t0 = loop.time
    cap = loop.run_for(capture_s, bin_ticks=bin_ticks)
    t1 = loop.time
    sig = cap.lnRdidz if to_mode == DIDZ else cap.lnRi
    sp_new = float(np.mean(sig))
    loop.set_mode(to_mode, sp_new)
    rec = rec0.concat(cap)
    if post_s:
        rec = rec.concat(loop.run_for(post_s, bin_ticks=bin_ticks))
    rec.meta.update(capture_start=t0, capture_end=t1, t_switch=t1, mode_after=to_mode)
    return SwitchResult(rec, t1, (t0, t1), sp_new, rel)
