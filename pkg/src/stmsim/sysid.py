"""Closed-loop identification and PI tuning.

Two sinusoidal injection experiments are run with the loop closed: r_e is
added to the error at the set-point and r_u to the controller output. With
U the controller output (before r_u) and Y the measured log-amp output,

    G_reU = K/(1+KG)    G_reY = KG/(1+KG)
    G_ruU = -KG/(1+KG)  G_ruY = G/(1+KG)

so G = G_reY/G_reU and K = G_reY/G_ruY.
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np
from scipy import optimize

from . import _kernel as K
from .control import DIDZ, Loop, controller_tf
from .dsp import quadrature_correlate
from .lti import LinearSystem, pi_controller, stability_metrics

AT_SETPOINT = "at_setpoint"
AT_OUTPUT = "at_controller_output"
F_MIN_HZ, F_MAX_HZ = 5.0, 1500.0


class SysidError(ValueError):
    pass


def default_freq_grid(n=30, f_lo=F_MIN_HZ, f_hi=F_MAX_HZ):
    return np.logspace(np.log10(f_lo), np.log10(f_hi), n)


def clamp_freq_grid(f_hz):
    """Clamp to the identification band, warning when anything moved."""
    f = np.asarray(f_hz, dtype=float)
    g = np.clip(f, F_MIN_HZ, F_MAX_HZ)
    if np.any(np.abs(g - f) > 1e-9 * f):
        warnings.warn(f"frequency grid clamped to [{F_MIN_HZ}, {F_MAX_HZ}] Hz", stacklevel=2)
    return np.unique(g)


@dataclass
class FrfDataset:
    freq_hz: np.ndarray
    G_reU: np.ndarray
    G_reY: np.ndarray
    G_ruU: np.ndarray
    G_ruY: np.ndarray
    injection: str
    amplitude: float
    n_avg: int
    std: dict = field(default_factory=dict)
    controller: tuple = ()
    failed: bool = False
    message: str = ""

    @property
    def w(self):
        return 2 * np.pi * self.freq_hz

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            wr = csv.writer(fh)
            cols = ["G_reU", "G_reY", "G_ruU", "G_ruY"]
            wr.writerow(["freq_hz"] + [f"{c}_{p}" for c in cols for p in ("re", "im")])
            for k, f in enumerate(self.freq_hz):
                row = [repr(float(f))]
                for c in cols:
                    v = getattr(self, c)[k]
                    row += [repr(float(v.real)), repr(float(v.imag))]
                wr.writerow(row)

    @classmethod
    def read_csv(cls, path, injection="", amplitude=np.nan, n_avg=0):
        raw = np.genfromtxt(path, delimiter=",", skip_header=1, ndmin=2)
        cx = lambda k: raw[:, 1 + 2 * k] + 1j * raw[:, 2 + 2 * k]
        return cls(raw[:, 0], cx(0), cx(1), cx(2), cx(3), injection, amplitude, n_avg)


# ---------------------------------------------------------------------------
# Loop runners: both return the controller output U and measured Y sequences

class LinearLoopRunner:
    """PI around a discrete linear plant (must end in a pure sample delay)."""

    def __init__(self, G: LinearSystem, ki, omega_c, noise_std=0.0, seed=0, log_gain=1.0):
        if not G.is_discrete:
            raise SysidError("linear runner needs a discrete plant")
        self.G = G
        self.sos = G.to_sos()
        if self.sos[-1, 0] != 0.0:
            raise SysidError("plant must be strictly causal (end in a delay)")
        self.fs = 1.0 / G.dt
        self.controller = (float(ki), float(omega_c))
        self.noise_std = noise_std
        self.log_gain = log_gain
        self.rng = np.random.default_rng(seed)
        self.reset()

    def reset(self):
        self.zi = np.zeros((self.sos.shape[0], 2))
        self.st = np.zeros(3)

    def run(self, n, re_amp, ru_amp, f_hz):
        prm = np.zeros(K.N_LPARAMS)
        prm[K.L_KI], prm[K.L_WC] = self.controller
        prm[K.L_DT] = 1.0 / self.fs
        prm[K.L_RE_AMP], prm[K.L_RU_AMP] = re_amp, ru_amp
        prm[K.L_RE_W] = prm[K.L_RU_W] = 2 * np.pi * f_hz
        prm[K.L_UMIN], prm[K.L_UMAX] = -np.inf, np.inf
        noise = self.rng.normal(0.0, self.noise_std, n) if self.noise_std > 0 else np.zeros(0)
        u = np.empty(n)
        y = np.empty(n)
        t0 = self.st[0] / self.fs
        K.run_linear(n, prm, self.st, self.sos, self.zi, noise, u, y)
        return t0, u, y, False


class FullLoopRunner:
    """Injection on the full nonlinear loop, parked at its current position."""

    def __init__(self, loop: Loop):
        self.loop = loop
        self.fs = loop.cfg.fs_hz
        self.controller = (float(loop.prm[K.P_KI]), float(loop.prm[K.P_WC]))
        self._tref = None

    def reset(self):
        self._tref = None

    def run(self, n, re_amp, ru_amp, f_hz):
        lp = self.loop
        t0 = lp.time
        if self._tref is None:
            self._tref = t0
        # injection is sin(w (t - t_ref)), continuous across calls for one frequency
        ph = -2 * np.pi * f_hz * self._tref
        lp.set_injection(re_amp, ru_amp, f_hz, ph)
        rec = lp.run(n)
        lp.set_injection(0.0, 0.0, 0.0)
        return t0, rec.U, rec.Y, rec.crashed


def simulate_setpoint_step(G: LinearSystem, omega_c, ki, seconds=1.0, step=1.0):
    """Closed-loop error after a set-point step, PI around the discrete plant G."""
    runner = LinearLoopRunner(G, ki, omega_c)
    n = int(round(seconds * runner.fs))
    prm = np.zeros(K.N_LPARAMS)
    prm[K.L_KI], prm[K.L_WC] = ki, omega_c
    prm[K.L_DT] = 1.0 / runner.fs
    prm[K.L_SP] = step
    prm[K.L_UMIN], prm[K.L_UMAX] = -np.inf, np.inf
    u = np.empty(n)
    y = np.empty(n)
    K.run_linear(n, prm, runner.st, runner.sos, runner.zi, np.zeros(0), u, y)
    return step - y


def converges(G: LinearSystem, omega_c, ki, seconds=1.0, tol=0.02):
    """True when the step error is finite and has decayed below ``tol`` by the end."""
    e = simulate_setpoint_step(G, omega_c, ki, seconds)
    if not np.all(np.isfinite(e)):
        return False
    tail = e[-max(e.size // 10, 1):]
    return bool(np.max(np.abs(tail)) < tol)


def _snap(f_hz, fs, min_periods=8, min_s=0.02):
    """Record length N and frequency with an exact integer number of periods in N samples."""
    n = int(np.ceil(max(min_periods / f_hz, min_s) * fs))
    m = max(int(round(f_hz * n / fs)), 1)
    return n, m * fs / n


def run_frf_experiment(runner, freq_hz, injection=AT_SETPOINT, amplitude=None, n_avg=4,
                       min_periods=8, min_record_s=0.02, discard_s=0.05, discard_periods=3) -> FrfDataset:
    """Sweep sinusoidal injections and return the four closed-loop responses.

    Only the responses of the active injection point are measured; the
    other pair is left as NaN.
    """
    if injection not in (AT_SETPOINT, AT_OUTPUT):
        raise SysidError(f"unknown injection point {injection!r}")
    if amplitude is None or amplitude == 0 or not np.isfinite(amplitude):
        raise SysidError("injection amplitude must be non-zero")
    freq_hz = np.atleast_1d(np.asarray(freq_hz, dtype=float))
    fs = runner.fs
    n_f = freq_hz.size
    rU = np.full(n_f, np.nan + 0j)
    rY = np.full(n_f, np.nan + 0j)
    sU = np.full(n_f, np.nan)
    sY = np.full(n_f, np.nan)
    f_act = np.empty(n_f)
    failed, msg = False, ""
    re_a, ru_a = (amplitude, 0.0) if injection == AT_SETPOINT else (0.0, amplitude)
    for k, f in enumerate(freq_hz):
        n, fa = _snap(f, fs, min_periods, min_record_s)
        f_act[k] = fa
        nd = int(np.ceil(max(discard_s, discard_periods / fa) * fs))
        nd = int(np.ceil(nd / n)) * n       # keep the injection phase aligned to record starts
        runner.reset()
        t0, _, _, crashed = runner.run(nd, re_a, ru_a, fa)
        ratios_u, ratios_y = [], []
        if not crashed:
            t0, u, y, crashed = runner.run(n * n_avg, re_a, ru_a, fa)
        if crashed:
            failed, msg = True, f"loop crashed at {f:.4g} Hz"
            f_act = f_act[:k]
            rU, rY, sU, sY = rU[:k], rY[:k], sU[:k], sY[:k]
            break
        ref = amplitude * np.sin(2 * np.pi * fa * np.arange(n) / fs)
        pr = quadrature_correlate(ref, fa, fs)
        for a in range(n_avg):
            sl = slice(a * n, (a + 1) * n)
            ratios_u.append(quadrature_correlate(u[sl] - np.mean(u[sl]), fa, fs) / pr)
            ratios_y.append(quadrature_correlate(y[sl] - np.mean(y[sl]), fa, fs) / pr)
        rU[k], rY[k] = np.mean(ratios_u), np.mean(ratios_y)
        sU[k] = np.std(ratios_u) if n_avg > 1 else 0.0
        sY[k] = np.std(ratios_y) if n_avg > 1 else 0.0
    nan = np.full(f_act.size, np.nan + 0j)
    if injection == AT_SETPOINT:
        ds = FrfDataset(f_act, rU, rY, nan, nan.copy(), injection, amplitude, n_avg,
                        {"G_reU": sU, "G_reY": sY}, runner.controller, failed, msg)
    else:
        ds = FrfDataset(f_act, nan, nan.copy(), rU, rY, injection, amplitude, n_avg,
                        {"G_ruU": sU, "G_ruY": sY}, runner.controller, failed, msg)
    return ds


@dataclass
class FrfEstimate:
    freq_hz: np.ndarray
    H: np.ndarray
    dropped: np.ndarray
    n_avg: int
    mismatch: bool = False

    @property
    def w(self):
        return 2 * np.pi * self.freq_hz


def _drop_mask(den, floor_rel):
    mag = np.abs(den)
    ok = np.isfinite(mag) & (mag > floor_rel * np.nanmax(mag))
    return ~ok


def estimate_plant(ds: FrfDataset, floor_rel=1e-6) -> FrfEstimate:
    """G = G_reY / G_reU per frequency."""
    drop = _drop_mask(ds.G_reU, floor_rel)
    if np.any(drop):
        warnings.warn(f"dropped {int(drop.sum())} point(s) with |G_reU| below floor", stacklevel=2)
    keep = ~drop
    return FrfEstimate(ds.freq_hz[keep], ds.G_reY[keep] / ds.G_reU[keep], ds.freq_hz[drop], ds.n_avg)


def estimate_controller(ds_e: FrfDataset, ds_u: FrfDataset, floor_rel=1e-6) -> FrfEstimate:
    """K = G_reY (r_e experiment) / G_ruY (r_u experiment)."""
    if ds_e.freq_hz.size != ds_u.freq_hz.size or not np.allclose(ds_e.freq_hz, ds_u.freq_hz):
        raise SysidError("experiments use different frequency grids")
    mismatch = tuple(ds_e.controller) != tuple(ds_u.controller)
    if mismatch:
        warnings.warn("controller changed between the two experiments", stacklevel=2)
    drop = _drop_mask(ds_u.G_ruY, floor_rel)
    keep = ~drop
    return FrfEstimate(ds_e.freq_hz[keep], ds_e.G_reY[keep] / ds_u.G_ruY[keep], ds_e.freq_hz[drop],
                       min(ds_e.n_avg, ds_u.n_avg), mismatch)


# ---------------------------------------------------------------------------
# Rational fitting (vector fitting with real partial-fraction basis)

def _pairs(poles):
    """Real poles and one representative (positive imaginary part) per complex pair."""
    tol = 1e-9
    out = []
    used = np.zeros(poles.size, bool)
    for i, p in enumerate(poles):
        if used[i]:
            continue
        used[i] = True
        if abs(p.imag) > tol * max(abs(p), 1.0):
            cand = [k for k in range(poles.size) if not used[k]]
            j = min(cand, key=lambda k: abs(poles[k] - np.conj(p)))
            used[j] = True
            out.append(("c", p if p.imag > 0 else np.conj(p)))
        else:
            out.append(("r", p.real))
    return out


def _basis(s, prs):
    cols = []
    for kind, p in prs:
        if kind == "r":
            cols.append(1.0 / (s - p))
        else:
            cols.append(1.0 / (s - p) + 1.0 / (s - np.conj(p)))
            cols.append(1j / (s - p) - 1j / (s - np.conj(p)))
    return np.array(cols).T


def _state(prs):
    n = sum(1 if k == "r" else 2 for k, _ in prs)
    A = np.zeros((n, n))
    b = np.zeros(n)
    i = 0
    for kind, p in prs:
        if kind == "r":
            A[i, i], b[i] = p, 1.0
            i += 1
        else:
            A[i:i + 2, i:i + 2] = [[p.real, p.imag], [-p.imag, p.real]]
            b[i] = 2.0
            i += 2
    return A, b


def _lsq(M, rhs):
    Mr = np.vstack([M.real, M.imag])
    br = np.concatenate([rhs.real, rhs.imag])
    sc = np.linalg.norm(Mr, axis=0)
    sc[sc == 0] = 1.0
    x, _, rank, _ = np.linalg.lstsq(Mr / sc, br, rcond=None)
    return x / sc, rank, Mr.shape[1]


@dataclass
class FitResult:
    model: LinearSystem
    max_err_db: float
    max_err_deg: float
    order: int
    warnings: list = field(default_factory=list)


def fit_rational_model(freq_hz, H, order=7, n_iter=30, weight=None) -> FitResult:
    """Fit a stable continuous-time rational model of the given order.

    Poles are relocated iteratively (linearized least squares with weight
    1/|H|); any pole in the right half-plane is reflected into the left
    half-plane after each iteration, so the result is stable by
    construction. Rank deficiency lowers the order with a warning.
    """
    freq_hz = np.asarray(freq_hz, dtype=float)
    H = np.asarray(H, dtype=complex)
    if freq_hz.size < 2 * (order + 1):
        raise SysidError(f"need at least {2 * (order + 1)} frequency points for order {order}")
    s = 2j * np.pi * freq_hz
    W = 1.0 / np.abs(H) if weight is None else np.asarray(weight, dtype=float)
    notes = []
    while order >= 1:
        wmin, wmax = np.abs(s).min(), np.abs(s).max()
        beta = np.logspace(np.log10(wmin), np.log10(wmax), max(order // 2, 1))
        poles = []
        for b in beta[: order // 2]:
            poles += [-b / 100 + 1j * b, -b / 100 - 1j * b]
        if order % 2:
            poles.append(-wmax)
        poles = np.array(poles, dtype=complex)
        deficient = False
        for _ in range(n_iter):
            prs = _pairs(poles)
            B = _basis(s, prs)
            n = B.shape[1]
            M = np.hstack([B, np.ones((s.size, 1)), -H[:, None] * B]) * W[:, None]
            x, rank, ncol = _lsq(M, H * W)
            if rank < ncol:
                deficient = True
                break
            A, bvec = _state(prs)
            newp = np.linalg.eigvals(A - np.outer(bvec, x[n + 1:]))
            poles = np.where(newp.real > 0, -newp.real + 1j * newp.imag, newp)
        if deficient:
            notes.append(f"rank deficient at order {order}; reducing")
            warnings.warn(notes[-1], stacklevel=2)
            order -= 1
            continue
        break
    prs = _pairs(poles)
    B = _basis(s, prs)
    x, _, _ = _lsq(np.hstack([B, np.ones((s.size, 1))]) * W[:, None], H * W)
    model = _residues_to_system(prs, x)
    fit = model.freq_response(2 * np.pi * freq_hz)
    ratio = fit / H
    return FitResult(model, float(np.max(np.abs(20 * np.log10(np.abs(ratio))))),
                     float(np.max(np.abs(np.degrees(np.angle(ratio))))), model.order, notes)


def _residues_to_system(prs, x):
    poles, res = [], []
    i = 0
    for kind, p in prs:
        if kind == "r":
            poles.append(p)
            res.append(x[i])
            i += 1
        else:
            r = x[i] + 1j * x[i + 1]
            poles += [p, np.conj(p)]
            res += [r, np.conj(r)]
            i += 2
    d = x[i]
    poles = np.array(poles, dtype=complex)
    num = d * np.poly(poles)
    for k, r in enumerate(res):
        others = np.delete(poles, k)
        num = num + np.pad(r * np.poly(others), (1, 0))
    num = np.real(num)
    den = np.real(np.poly(poles))
    return LinearSystem.from_tf(num, den, None, "fit")


# ---------------------------------------------------------------------------
# Tuning region

@dataclass
class TuningRegion:
    omega_c: np.ndarray
    ki: np.ndarray
    gain_margin: np.ndarray          # per omega_c: largest stable ki from the phase crossover
    inf_norm_db: np.ndarray          # (n_wc, n_ki)
    bandwidth_hz: np.ndarray         # (n_wc, n_ki)
    feasible: np.ndarray             # (n_wc, n_ki) bool
    ki_max_3db: np.ndarray           # per omega_c
    recommended_ki: np.ndarray       # per omega_c, half of ki_max_3db
    tinf_db_max: float = 3.0
    bw_min_hz: float = 35.0

    def is_feasible(self, wc, ki, G):
        return evaluate_point(G, wc, ki, self.tinf_db_max, self.bw_min_hz)[0]

    def feasible_points(self):
        i, j = np.nonzero(self.feasible)
        return np.column_stack([self.omega_c[i], self.ki[j]])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["omega_c_rad_s", "ki", "gain_margin", "inf_norm_db", "bandwidth_hz", "feasible",
                        "recommended_ki"])
            for a, wc in enumerate(self.omega_c):
                for b, ki in enumerate(self.ki):
                    w.writerow([repr(float(wc)), repr(float(ki)), repr(float(self.gain_margin[a])),
                                repr(float(self.inf_norm_db[a, b])), repr(float(self.bandwidth_hz[a, b])),
                                int(self.feasible[a, b]), repr(float(self.recommended_ki[a]))])


def _pi_unit(G, wc):
    return pi_controller(1.0, wc, G.dt)


def evaluate_point(G: LinearSystem, wc, ki, tinf_db_max=3.0, bw_min_hz=35.0):
    """(feasible, metrics) for one PI setting."""
    L = _pi_unit(G, wc) * G * ki
    m = stability_metrics(L, w_min=1.0)
    gm_ki = ki * m.gain_margin
    ok = (0 < ki < gm_ki) and m.closed_loop_stable and (m.bandwidth >= bw_min_hz) \
        and (m.inf_norm_db < tinf_db_max)
    return bool(ok), m


def _tinf_db(G, wc, ki, w):
    L = ki * (_pi_unit(G, wc).freq_response(w) * G.freq_response(w))
    T = np.abs(L / (1 + L))
    k = int(np.argmax(T))
    if 0 < k < w.size - 1:
        f = lambda lw: -abs(_T_at(G, wc, ki, np.exp(lw)))
        r = optimize.minimize_scalar(f, bounds=(np.log(w[k - 1]), np.log(w[k + 1])), method="bounded",
                                     options={"xatol": 1e-9})
        return 20 * np.log10(max(T[k], -r.fun))
    return 20 * np.log10(T[k])


def _T_at(G, wc, ki, w):
    L = ki * _pi_unit(G, wc).freq_response(w) * G.freq_response(w)
    return L / (1 + L)


def _freq_grid(G, n=2000):
    hi = 0.999 * np.pi / G.dt if G.is_discrete else 1e6
    return np.logspace(0, np.log10(hi), n)


def ki_max_for_inf_norm(G, wc, tinf_db_max=3.0, lo=1.0, hi=1e8):
    """Largest ki with a stable loop and ||T||_inf below the threshold (bisection in log ki)."""
    w = _freq_grid(G)

    def ok(ki):
        return _stable(_pi_unit(G, wc) * G * ki) and _tinf_db(G, wc, ki, w) < tinf_db_max

    if not ok(lo):
        return 0.0
    while ok(hi) and hi < 1e12:
        hi *= 10
    for _ in range(60):
        mid = np.sqrt(lo * hi)
        if ok(mid):
            lo = mid
        else:
            hi = mid
        if hi / lo < 1 + 1e-6:
            break
    return lo


def _stable(L):
    cl = L.closed_loop_poles()
    return bool(np.all(np.abs(cl) < 1.0)) if L.is_discrete else bool(np.all(cl.real < 0))


def pi_tuning_region(G: LinearSystem, omega_c_grid, ki_grid, tinf_db_max=3.0, bw_min_hz=35.0) -> TuningRegion:
    """Grid evaluation of the three tuning criteria."""
    if not G.is_stable():
        raise SysidError("tuning needs a stable plant model")
    wcs = np.asarray(omega_c_grid, dtype=float)
    kis = np.asarray(ki_grid, dtype=float)
    w = _freq_grid(G)
    gm = np.empty(wcs.size)
    tinf = np.empty((wcs.size, kis.size))
    bw = np.empty((wcs.size, kis.size))
    feas = np.zeros((wcs.size, kis.size), bool)
    kmax = np.empty(wcs.size)
    Gw = G.freq_response(w)
    for a, wc in enumerate(wcs):
        m1 = stability_metrics(_pi_unit(G, wc) * G, w_min=1.0)
        gm[a] = m1.gain_margin
        Lw1 = _pi_unit(G, wc).freq_response(w) * Gw
        for b, ki in enumerate(kis):
            L = ki * Lw1
            T = np.abs(L / (1 + L))
            tinf[a, b] = _tinf_db(G, wc, ki, w)
            below = np.flatnonzero(T < 1 / np.sqrt(2))
            if below.size == 0:
                bw[a, b] = np.inf
            elif below[0] == 0:
                bw[a, b] = 0.0
            else:
                j = below[0]
                g = lambda x: abs(_T_at(G, wc, ki, x)) - 1 / np.sqrt(2)
                bw[a, b] = optimize.brentq(g, w[j - 1], w[j]) / (2 * np.pi)
            if 0 < ki < gm[a] and tinf[a, b] < tinf_db_max and bw[a, b] >= bw_min_hz:
                feas[a, b] = _stable(_pi_unit(G, wc) * G * ki)
        kmax[a] = ki_max_for_inf_norm(G, wc, tinf_db_max)
    return TuningRegion(wcs, kis, gm, tinf, bw, feas, kmax, 0.5 * kmax, tinf_db_max, bw_min_hz)


def identify(loop_or_runner, freq_hz=None, n_avg=4, re_amp=None, ru_amp=None, order=7):
    """Both experiments, both estimates and the fitted plant model."""
    runner = FullLoopRunner(loop_or_runner) if isinstance(loop_or_runner, Loop) else loop_or_runner
    freq_hz = default_freq_grid() if freq_hz is None else clamp_freq_grid(freq_hz)
    if re_amp is None or ru_amp is None:
        g, g0 = _amplitude_scale(runner)
        re_amp = 0.05 * g if re_amp is None else re_amp
        ru_amp = 0.05 * g / g0 if ru_amp is None else ru_amp
    ds_e = run_frf_experiment(runner, freq_hz, AT_SETPOINT, re_amp, n_avg)
    ds_u = run_frf_experiment(runner, freq_hz, AT_OUTPUT, ru_amp, n_avg)
    G = estimate_plant(ds_e)
    Kc = estimate_controller(ds_e, ds_u)
    fit = fit_rational_model(G.freq_hz, G.H, order)
    return {"ds_e": ds_e, "ds_u": ds_u, "G": G, "K": Kc, "fit": fit}


def _amplitude_scale(runner):
    """(log gain g, plant DC gain) to size the injections for ~0.05 neper excursions."""
    if isinstance(runner, FullLoopRunner):
        lp = runner.loop
        G = lp.linearized_plant()
        return lp.cfg.log_gain_V, abs(G.dcgain())
    return runner.log_gain, abs(runner.G.dcgain())


def truth_controller(cfg):
    return controller_tf(cfg, discrete=True)
