"""Raster imaging, spectroscopic maps, line profiles and tip lithography."""
from __future__ import annotations

import math
import os
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy import ndimage, signal
from scipy.spatial import cKDTree
from scipy.special import gamma

from . import _kernel as K
from .control import CURRENT, DIDZ, Loop
from .io import config_hash, write_json, write_pgm
from .junction import sigma_from_exponent
from .surface import SurfaceMap, depassivate_site

E_CHARGE = 1.602176634e-19   # C


class ScanError(ValueError):
    pass


class LithoError(ValueError):
    pass


# ---------------------------------------------------------------------------
# raster scanning

@dataclass(frozen=True)
class ScanConfig:
    extent_x_nm: float = 48.0
    extent_y_nm: float = 48.0
    pixels_x: int = 512
    pixels_y: int = 512
    speed_nm_per_s: float = 100.0
    bias_V: float | None = None          # None keeps the loop's bias
    mode: str = CURRENT
    setpoint: float | None = None        # nA (current) or nA/nm (di/dz); None keeps the loop's
    lia_lpf_hz: float = 300.0
    origin_x_nm: float = 0.0
    origin_y_nm: float = 0.0
    settle_s: float = 0.05
    spectroscopy: bool = False

    def __post_init__(self):
        if self.mode not in (CURRENT, DIDZ):
            raise ScanError(f"unknown mode {self.mode!r}")
        if min(self.extent_x_nm, self.extent_y_nm, self.speed_nm_per_s) <= 0:
            raise ScanError("extent and speed must be positive")
        if self.pixels_x < 2 or self.pixels_y < 1:
            raise ScanError("need at least 2 x 1 pixels")

    @property
    def pixel_size(self):
        return self.extent_x_nm / self.pixels_x, self.extent_y_nm / self.pixels_y

    def dwell_s(self):
        return self.extent_x_nm / (self.speed_nm_per_s * self.pixels_x)

    def check_dwell(self, fs_hz):
        if self.dwell_s() * fs_hz < 10.0 - 1e-9:
            raise ScanError(f"pixel dwell {self.dwell_s() * 1e6:.1f} us is shorter than 10 loop ticks")

    def line_ticks(self, fs_hz):
        return int(round(self.extent_x_nm / self.speed_nm_per_s * fs_hz))


@dataclass
class ScanResult:
    topography: np.ndarray            # nm, (pixels_y, pixels_x), row 0 at origin_y
    current: np.ndarray               # nA, filtered preamp output
    lbh: np.ndarray | None = None     # eV
    conductivity: np.ndarray | None = None   # nA/V
    extra: dict = field(default_factory=dict)
    x: np.ndarray | None = None
    y: np.ndarray | None = None
    status: int = K.STATUS_OK
    crash: tuple | None = None
    meta: dict = field(default_factory=dict)

    @property
    def crashed(self):
        return self.status == K.STATUS_CRASH

    def images(self):
        out = {"topography": self.topography, "current": self.current}
        if self.lbh is not None:
            out["lbh"] = self.lbh
            out["conductivity"] = self.conductivity
        return out

    def write(self, outdir, prefix=""):
        """topography PGM, one CSV with every image channel, JSON sidecar.

        Spectroscopic scans add lbh and conductivity PGMs. Returns the paths.
        """
        os.makedirs(outdir, exist_ok=True)
        paths = []
        scaling = {}
        for name, img in self.images().items():
            if name == "current":
                continue
            p = os.path.join(outdir, f"{prefix}{name}.pgm")
            scaling[name] = write_pgm(p, img)
            paths.append(p)
        p = os.path.join(outdir, f"{prefix}images.csv")
        _write_images_csv(p, self.images(), self.x, self.y)
        paths.append(p)
        meta = dict(self.meta)
        meta["pgm_scaling"] = scaling
        meta["status"] = "crash" if self.crashed else "ok"
        meta["crash"] = None if self.crash is None else [float(v) for v in self.crash]
        p = os.path.join(outdir, f"{prefix}metadata.json")
        write_json(p, meta)
        paths.append(p)
        return paths


def _write_images_csv(path, images, x, y):
    import csv

    names = list(images)
    ny, nx = images[names[0]].shape
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x_nm", "y_nm"] + names)
        for j in range(ny):
            for i in range(nx):
                w.writerow([repr(float(x[i])), repr(float(y[j]))]
                           + [repr(float(images[n][j, i])) for n in names])


_SCAN_CHANNELS = ("topo", "i_filt", "didz", "didV", "lnRi", "lnRdidz", "err_ln", "abs_i")


def _apply_scan_settings(loop: Loop, cfg: ScanConfig):
    if loop.mode != cfg.mode:
        raise ScanError(f"loop is engaged in {loop.mode!r} mode, scan asks for {cfg.mode!r}")
    if abs(loop.cfg.lia_lpf_hz - cfg.lia_lpf_hz) > 1e-9 and loop.prm[K.P_LIA1_ON]:
        raise ScanError("scan LIA low-pass differs from the loop's configured filter")
    if cfg.bias_V is not None:
        loop.set_bias(cfg.bias_V)
    if cfg.setpoint is not None:
        if cfg.setpoint <= 0:
            raise ScanError("set-point must be positive")
        loop.set_setpoint(float(np.log(loop.cfg.junction.R * cfg.setpoint)))


def raster_scan(surface: SurfaceMap, loop: Loop, cfg: ScanConfig, meta: dict | None = None) -> ScanResult:
    """Serpentine raster with per-pixel means of the loop channels.

    Line j is scanned at y = origin + (j + 1/2) dy, left to right on even
    lines and right to left on odd ones. A crash stops the scan and returns
    the image so far (NaN elsewhere) with the crash coordinates.
    """
    if loop.surface is not surface:
        raise ScanError("loop is not attached to this surface")
    fs = loop.cfg.fs_hz
    cfg.check_dwell(fs)
    ex, ey = surface.extent
    x0, y0 = cfg.origin_x_nm, cfg.origin_y_nm
    x1, y1 = x0 + cfg.extent_x_nm, y0 + cfg.extent_y_nm
    if x0 < 0 or y0 < 0 or x1 > ex + 1e-9 or y1 > ey + 1e-9:
        raise ScanError("scan frame exceeds the surface extent")
    if cfg.spectroscopy:
        if cfg.mode != CURRENT or not loop.cfg.bias_mod_enabled or not loop.prm[K.P_LIA1_ON]:
            raise ScanError("spectroscopic maps need constant-current mode with both modulations on")
    _apply_scan_settings(loop, cfg)

    px, py = cfg.pixels_x, cfg.pixels_y
    dx, dy = cfg.pixel_size
    ys = y0 + (np.arange(py) + 0.5) * dy
    xs = x0 + (np.arange(px) + 0.5) * dx
    n_line = cfg.line_ticks(fs)
    edges = np.rint(np.linspace(0, n_line, px + 1)).astype(np.int64)
    n_step = max(int(round(dy / cfg.speed_nm_per_s * fs)), 1)
    imgs = {c: np.full((py, px), np.nan) for c in _SCAN_CHANNELS}

    status, crash = K.STATUS_OK, None
    rec = loop.move_to(x0, ys[0], cfg.speed_nm_per_s, bin_ticks=10_000)
    if not rec.crashed:
        rec = loop.run_for(cfg.settle_s, bin_ticks=10_000)
    if rec.crashed:
        status, crash = rec.status, rec.crash
    for j in range(py if crash is None else 0):
        fwd = j % 2 == 0
        rec = loop.run(n_line, x1 if fwd else x0, ys[j], bin_edges=edges)
        n = len(rec)
        for c in _SCAN_CHANNELS:
            row = np.full(px, np.nan)
            row[:n] = rec.data[:, K.CH[c]]
            imgs[c][j] = row if fwd else row[::-1]
        if rec.crashed:
            status, crash = rec.status, rec.crash
            break
        if j + 1 < py:
            rec = loop.run(n_step, loop.x, ys[j + 1], bin_ticks=n_step)
            if rec.crashed:
                status, crash = rec.status, rec.crash
                break

    res = ScanResult(topography=imgs["topo"], current=imgs["i_filt"], x=xs, y=ys,
                     status=status, crash=crash)
    res.extra = {k: imgs[k] for k in ("didz", "lnRi", "lnRdidz", "err_ln", "abs_i", "didV")}
    if cfg.spectroscopy:
        res.lbh = lbh_from_gradient(imgs["didz"], imgs["i_filt"], loop.cfg.junction.kappa0)
        res.conductivity = imgs["didV"]
        vb = abs(loop.prm[K.P_VB])
        with np.errstate(invalid="ignore", divide="ignore"):
            n_exp = imgs["didV"] * vb / np.abs(imgs["i_filt"])
        res.extra["sigma_est"] = sigma_from_exponent(n_exp, loop.cfg.junction)
    info = {"scan": asdict(cfg), "loop": asdict(loop.cfg), "surface": asdict(surface.spec),
            "bias_V": float(loop.prm[K.P_VB]), "setpoint_ln": float(loop.setpoint)}
    res.meta = {"config_hash": config_hash(meta if meta is not None else info),
                "scan": asdict(cfg), "mode": cfg.mode, "dwell_s": cfg.dwell_s(),
                "bias_V": float(loop.prm[K.P_VB]), "setpoint_ln": float(loop.setpoint)}
    return res


def lbh_from_gradient(didz, i, kappa0):
    """phi = (|di/dz| / |i| / kappa0)^2, the log-derivative squared in eV."""
    with np.errstate(invalid="ignore", divide="ignore"):
        return (np.abs(didz) / np.abs(i) / kappa0) ** 2


def spectroscopic_maps(surface: SurfaceMap, loop: Loop, cfg: ScanConfig, meta=None):
    """Topography, LBH and conductivity acquired in one constant-current scan."""
    if loop.mode != CURRENT:
        raise ScanError("spectroscopic maps are taken in constant-current mode")
    c = loop.cfg
    if not c.bias_mod_enabled:
        raise ScanError("bias modulation is off")
    if abs(c.bias_mod_freq_hz - c.mod_freq_hz) < 2 * max(c.lia_lpf_hz, c.lia2_lpf_hz):
        raise ScanError("modulation frequencies collide within the LIA bandwidth")
    if not loop.prm[K.P_LIA1_ON]:
        loop.enable_modulation(True)
        loop.prime_lia()
    from dataclasses import replace

    return raster_scan(surface, loop, replace(cfg, spectroscopy=True), meta)


# ---------------------------------------------------------------------------
# line profiles and lattice analysis

@dataclass
class Profile:
    s: np.ndarray        # distance along the line (pixel units times pixel_size)
    values: np.ndarray

    def write_csv(self, path):
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["s", "value"])
            for a, b in zip(self.s, self.values):
                w.writerow([repr(float(a)), repr(float(b))])


def line_profile(image, p1, p2, spacing=0.25, pixel_size=1.0) -> Profile:
    """Bilinear samples between two (column, row) points given in pixels."""
    img = np.asarray(image, dtype=float)
    ny, nx = img.shape
    for (c, r) in (p1, p2):
        if not (0.0 <= c <= nx - 1 and 0.0 <= r <= ny - 1):
            raise ValueError(f"profile endpoint ({c}, {r}) outside the {nx}x{ny} image")
    length = math.hypot(p2[0] - p1[0], p2[1] - p1[1])
    n = max(int(math.ceil(length / spacing)), 1) + 1
    t = np.linspace(0.0, 1.0, n)
    cols = p1[0] + t * (p2[0] - p1[0])
    rows = p1[1] + t * (p2[1] - p1[1])
    vals = ndimage.map_coordinates(img, [rows, cols], order=1, mode="nearest")
    return Profile(s=t * length * pixel_size, values=vals)


def count_peaks(values, spacing=None, length=None, rel_prominence=0.25):
    """Maxima counted from the first local minimum onward.

    With ``spacing`` and ``length`` only the window of that length starting
    at the first minimum is examined. A peak needs a prominence of at least
    ``rel_prominence`` of the profile's peak-to-peak range, which rejects
    noise ripple.
    """
    v = np.asarray(values, dtype=float)
    if v.size < 3 or np.ptp(v) <= 1e-12 * np.max(np.abs(v)):
        return 0
    mins, _ = signal.find_peaks(-v)
    start = mins[0] if mins.size and v[0] > v[mins[0]] else 0
    stop = v.size
    if length is not None:
        if spacing is None:
            raise ValueError("a window length needs the sample spacing")
        stop = start + int(round(length / spacing)) + 1
        if stop > v.size:
            raise ValueError("profile shorter than the requested window")
    w = v[start:stop]
    pk, _ = signal.find_peaks(w, prominence=rel_prominence * np.ptp(v))
    return int(pk.size)


def lattice_frequency(values, spacing, pad=16, f_min=None):
    """Dominant spatial frequency (1/length) from a Hann-windowed, zero-padded FFT.

    The peak bin is refined by parabolic interpolation of the log magnitude.
    """
    v = signal.detrend(np.asarray(values, dtype=float))
    n = v.size
    nfft = int(2 ** math.ceil(math.log2(n * pad)))
    spec = np.abs(np.fft.rfft(v * np.hanning(n), nfft))
    f = np.fft.rfftfreq(nfft, spacing)
    lo = 2.0 / (n * spacing) if f_min is None else f_min
    band = np.flatnonzero(f >= lo)
    k = band[np.argmax(spec[band])]
    if 0 < k < spec.size - 1:
        a, b, c = np.log(spec[k - 1:k + 2] + 1e-300)
        den = a - 2 * b + c
        off = 0.5 * (a - c) / den if den != 0 else 0.0
    else:
        off = 0.0
    return float((k + off) * (f[1] - f[0]))


# ---------------------------------------------------------------------------
# lithography

AP = "AP"
FE = "FE"

# Depassivation efficiency, log10(eta) in nm per electron, interpolated
# linearly in bias. Anchors:
#   4.0 V  spiral (0.18 nA, 10 nm/s, D = 1.15e8 e/nm): eta D = 40, which puts
#          sites 0.384 nm off the path at p > 0.99 and sites 1.15 nm off at
#          p ~ 0, i.e. two dimer rows along the rows, three dimers across.
#   8.0 V  FE line (0.023 nA, 50 nm/s, D = 2.87e6 e/nm): eta D = 4.5, which
#          with the 2 nm kernel gives a 4-5 nm line with partial edges.
#   3.5 V  dots: about ten electrons per 1e-7 nm keeps short dwells reliable.
# Below 2 V the curve is pinned at its last anchor's slope; V <= 0 gives 0.
ETA_TABLE = ((2.0, -9.0), (3.5, -6.70), (4.0, -6.458), (4.5, -6.40), (7.0, -6.25),
             (8.0, -5.805), (10.0, -5.6))
KERNEL_HWHM = {AP: 0.3, FE: 2.0}     # nm
AP_MAX_V = 4.5
FE_MIN_V = 7.0


def eta(V, table=ETA_TABLE):
    V = np.asarray(V, dtype=float)
    vs = np.array([t[0] for t in table])
    ls = np.array([t[1] for t in table])
    slope = (ls[1] - ls[0]) / (vs[1] - vs[0])
    lg = np.where(V < vs[0], ls[0] + slope * (V - vs[0]), np.interp(V, vs, ls))
    return np.where(V > 0, 10.0 ** lg, 0.0)


def regime(V):
    return AP if V < AP_MAX_V else FE if V > FE_MIN_V else None


def kernel_r0(hwhm):
    """Scale of w(r) = exp(-(r/r0)^4) with w(hwhm) = 1/2."""
    return hwhm / math.log(2.0) ** 0.25


def lateral_kernel(r, hwhm):
    return np.exp(-(np.asarray(r, dtype=float) / kernel_r0(hwhm)) ** 4)


def kernel_line_integral(hwhm):
    """Integral of w along a line through the centre, 2 r0 Gamma(5/4)."""
    return 2.0 * kernel_r0(hwhm) * gamma(1.25)


def line_dose(I_nA, v_nm_s):
    """Electrons per nm of path, D = I / (e v)."""
    return abs(I_nA) * 1e-9 / E_CHARGE / v_nm_s


def dose_model(V, I, v, r=0.0, hwhm=None):
    """Depassivation probability of a site at distance r from a straight pass.

    p = 1 - exp(-eta(V) D w(r)); the kernel width follows the bias regime
    unless ``hwhm`` is given.
    """
    if V <= 0 or I <= 0 or v <= 0:
        raise ValueError("dose model needs V, I, v > 0")
    if hwhm is None:
        hwhm = KERNEL_HWHM[FE if V > FE_MIN_V else AP]
    if math.isinf(v):
        return np.zeros_like(np.asarray(r, dtype=float))
    return 1.0 - np.exp(-eta(V) * line_dose(I, v) * lateral_kernel(r, hwhm))


@dataclass(frozen=True)
class LithoJob:
    polylines: tuple = ()                # each a tuple of (x, y) points, nm
    dots: tuple = ()                     # (x, y) points, nm
    bias_V: float = 4.0
    setpoint_didz_nA_per_nm: float = 4.0
    speed_nm_per_s: float = 10.0
    mode_hint: str = AP
    settle_s: float = 0.02
    hold_s: float = 0.005
    dot_length_nm: float = 0.384
    travel_speed_nm_per_s: float = 20.0
    seed: int = 0

    def __post_init__(self):
        if self.mode_hint not in (AP, FE):
            raise LithoError(f"mode hint must be {AP} or {FE}")
        if self.mode_hint == AP and not self.bias_V < AP_MAX_V:
            raise LithoError(f"AP lithography needs bias < {AP_MAX_V} V")
        if self.mode_hint == FE and not self.bias_V > FE_MIN_V:
            raise LithoError(f"FE lithography needs bias > {FE_MIN_V} V")
        if self.speed_nm_per_s <= 0 or self.setpoint_didz_nA_per_nm <= 0:
            raise LithoError("speed and set-point must be positive")

    @property
    def hwhm(self):
        return KERNEL_HWHM[self.mode_hint]

    def points(self):
        pts = [p for line in self.polylines for p in line] + list(self.dots)
        return np.array(pts, dtype=float).reshape(-1, 2)

    def segments(self):
        """Exposure paths: each polyline, then one short x-directed stroke per dot."""
        out = [np.asarray(line, dtype=float) for line in self.polylines]
        half = 0.5 * self.dot_length_nm
        for (x, y) in self.dots:
            out.append(np.array([[x - half, y], [x + half, y]]))
        return out


@dataclass
class LithoResult:
    surface: SurfaceMap
    depassivated: list
    events: list
    exposure: np.ndarray
    status: int = K.STATUS_OK
    crash: tuple | None = None

    @property
    def crashed(self):
        return self.status == K.STATUS_CRASH

    def write_log(self, path):
        import csv

        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["t_s", "event", "x_nm", "y_nm", "detail"])
            for ev in self.events:
                w.writerow([repr(float(ev[0])), ev[1], repr(float(ev[2])), repr(float(ev[3])), ev[4]])


class _Exposure:
    """Accumulates eta * (electrons) * w(r) / L_w on every site near the path."""

    def __init__(self, surface, hwhm, chunk_bins):
        self.s = surface
        self.tree = cKDTree(np.column_stack([surface.site_x, surface.site_y]))
        self.hwhm = hwhm
        self.r0 = kernel_r0(hwhm)
        self.cut = 2.0 * self.r0        # w(2 r0) = e^-16
        self.lw = kernel_line_integral(hwhm)
        self.E = np.zeros(surface.n_sites)

    def add(self, rec, dt_bin):
        x, y = rec.x, rec.y
        ok = np.isfinite(x)
        if not ok.any():
            return
        x, y = x[ok], y[ok]
        electrons = np.abs(rec.abs_i[ok]) * 1e-9 * dt_bin[ok] / E_CHARGE
        w_eta = eta(rec.Vb[ok]) * electrons / self.lw
        if not np.any(w_eta > 0):
            return
        cx, cy = 0.5 * (x.min() + x.max()), 0.5 * (y.min() + y.max())
        rad = 0.5 * math.hypot(x.max() - x.min(), y.max() - y.min()) + self.cut
        cand = np.asarray(self.tree.query_ball_point([cx, cy], rad), dtype=np.int64)
        if cand.size == 0:
            return
        d = np.hypot(x[:, None] - self.s.site_x[cand][None, :], y[:, None] - self.s.site_y[cand][None, :])
        self.E[cand] += (w_eta[:, None] * np.exp(-(d / self.r0) ** 4)).sum(axis=0)


def run_lithography(surface: SurfaceMap, loop: Loop, job: LithoJob, chunk_ticks=2000, bin_ticks=10):
    """Write the job's pattern and depassivate sites from the accumulated dose.

    Every site draws an Exp(1) threshold from the job seed; it loses its
    hydrogen once its exposure exceeds the threshold, which reproduces
    p = 1 - exp(-exposure) per site.
    """
    if loop.surface is not surface:
        raise LithoError("loop is not attached to this surface")
    if loop.mode != DIDZ:
        raise LithoError("lithography runs in constant di/dz mode")
    pts = job.points()
    ex, ey = surface.extent
    margin = 0.5 * job.dot_length_nm
    if pts.size and (pts[:, 0].min() - margin < 0 or pts[:, 1].min() < 0
                     or pts[:, 0].max() + margin > ex or pts[:, 1].max() > ey):
        raise LithoError("pattern outside the surface extent")

    fs = loop.cfg.fs_hz
    rng = np.random.default_rng(job.seed)
    thresholds = rng.exponential(1.0, surface.n_sites)
    expo = _Exposure(surface, job.hwhm, chunk_ticks)
    img_bias = float(loop.prm[K.P_VB])
    img_sp = float(loop.setpoint)
    job_sp = float(np.log(loop.cfg.junction.R * job.setpoint_didz_nA_per_nm))
    events, written = [], []
    status, crash = K.STATUS_OK, None

    def advance(n, x1, y1):
        """Run n ticks towards (x1, y1) in chunks, accumulating exposure."""
        nonlocal status, crash
        xs, ys = loop.x, loop.y
        done = 0
        while done < n:
            m = min(chunk_ticks, n - done)
            f = (done + m) / n
            rec = loop.run(m, xs + f * (x1 - xs), ys + f * (y1 - ys), bin_ticks=bin_ticks)
            nb = len(rec)
            edges = np.minimum(np.arange(nb + 1) * bin_ticks, m)
            expo.add(rec, np.diff(edges) / fs)
            if rec.crashed:
                status, crash = rec.status, rec.crash
                events.append((loop.time, "crash", crash[0], crash[1], f"gap {crash[2]:.4f} nm"))
                return False
            done += m
        return True

    def switch(vb, sp):
        loop.set_feedback(False)
        loop.set_bias(vb)
        loop.set_setpoint(sp)
        if not advance(int(round(job.hold_s * fs)), loop.x, loop.y):
            return False
        loop.set_feedback(True)
        loop.st[K.S_EPREV] = 0.0
        return advance(int(round(job.settle_s * fs)), loop.x, loop.y)

    for path in job.segments():
        x0, y0 = path[0]
        events.append((loop.time, "travel", x0, y0, ""))
        dist = math.hypot(x0 - loop.x, y0 - loop.y)
        if not advance(max(int(round(dist / job.travel_speed_nm_per_s * fs)), 1), x0, y0):
            break
        events.append((loop.time, "bias_on", x0, y0, f"{job.bias_V} V"))
        if not switch(job.bias_V, job_sp):
            break
        ok = True
        for (xa, ya), (xb, yb) in zip(path[:-1], path[1:]):
            L = math.hypot(xb - xa, yb - ya)
            n = 1 if math.isinf(job.speed_nm_per_s) else max(int(round(L / job.speed_nm_per_s * fs)), 1)
            if not advance(n, xb, yb):
                ok = False
                break
        if not ok:
            break
        events.append((loop.time, "bias_off", loop.x, loop.y, f"{img_bias} V"))
        if not switch(img_bias, img_sp):
            break

    for k in np.flatnonzero((expo.E >= thresholds) & surface.hydrogenated):
        if depassivate_site(surface, int(k)):
            written.append(int(k))
            events.append((loop.time, "depassivated", surface.site_x[k], surface.site_y[k], f"site {k}"))
    if status != K.STATUS_OK:
        loop.set_bias(img_bias)
    return LithoResult(surface, written, events, expo.E, status, crash)


def square_spiral(cx, cy, arm_nm, loops=3):
    """Rectilinear outward spiral: arms of 1, 1, 2, 2, ... times arm_nm."""
    pts = [(cx, cy)]
    dirs = ((1, 0), (0, 1), (-1, 0), (0, -1))
    x, y = cx, cy
    for k in range(4 * loops):
        L = (k // 2 + 1) * arm_nm
        dxx, dyy = dirs[k % 4]
        x, y = x + dxx * L, y + dyy * L
        pts.append((x, y))
    return tuple(pts)


def dot_array(x0, y0, pitch_x, pitch_y, nx=3, ny=3):
    return tuple((x0 + i * pitch_x, y0 + j * pitch_y) for j in range(ny) for i in range(nx))


def path_distance(px, py, polyline):
    """Shortest distance from points to a polyline."""
    P = np.column_stack([np.ravel(px), np.ravel(py)])
    L = np.asarray(polyline, dtype=float)
    best = np.full(P.shape[0], np.inf)
    if L.shape[0] == 1:
        return np.hypot(*(P - L[0]).T)
    for a, b in zip(L[:-1], L[1:]):
        ab = b - a
        t = np.clip(((P - a) @ ab) / max(ab @ ab, 1e-300), 0.0, 1.0)
        d = np.hypot(*(P - (a + t[:, None] * ab)).T)
        best = np.minimum(best, d)
    return best


__all__ = [
    "ScanConfig", "ScanResult", "ScanError", "raster_scan", "spectroscopic_maps", "lbh_from_gradient",
    "Profile", "line_profile", "count_peaks", "lattice_frequency",
    "LithoJob", "LithoResult", "LithoError", "run_lithography", "dose_model", "eta", "line_dose",
    "lateral_kernel", "kernel_r0", "square_spiral", "dot_array", "path_distance", "AP", "FE",
]
