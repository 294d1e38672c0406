"""stmsim command line: scan, switchover, sysid, tune, litho, surface-gen."""
from __future__ import annotations

import argparse
import logging
import math
import os
import sys
import warnings

import numpy as np

from . import _kernel as K
from . import config as C
from .control import (CURRENT, DIDZ, ApproachFailure, CrashError, LiaNotSettled, Loop, LoopError,
                      coarse_approach, controller_tf, linearized_plant, switchover)
from .imaging import (LithoError, LithoJob, ScanConfig, ScanError, dot_array, raster_scan,
                      run_lithography, spectroscopic_maps, square_spiral)
from .io import write_json, write_pgm
from .lti import LinearSystem
from .surface import SurfaceError, build_surface, depassivate_site, write_surface_csv
from .sysid import LinearLoopRunner, SysidError, identify, pi_tuning_region

EXIT_OK = 0
EXIT_ERROR = 1
EXIT_CONFIG = 2
EXIT_CRASH = 3
EXIT_APPROACH = 4
EXIT_REFUSED = 5

log = logging.getLogger("stmsim")


class CrashExit(Exception):
    def __init__(self, where):
        self.where = where
        super().__init__(f"tip crash at {where}")


def _outdir(rc: C.RunConfig, override=None):
    d = override or rc["output_dir"]
    os.makedirs(d, exist_ok=True)
    return d


def _meta(rc: C.RunConfig, command, **extra):
    vals = {k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in rc.values.items()}
    return {"command": command, "config_hash": rc.hash, "config": vals, **extra}


def make_surface(rc: C.RunConfig):
    surf = build_surface(C.surface_spec(rc.values))
    xy = np.asarray(rc["surface_db_sites_xy_nm"], dtype=float).reshape(-1, 2)
    for x, y in xy:
        depassivate_site(surf, surf.site_at(x, y))
    frac = rc["surface_db_random_fraction"]
    if frac > 0:
        rng = np.random.default_rng(rc["seed"])
        for k in np.flatnonzero(rng.random(surf.n_sites) < frac):
            if surf.hydrogenated[k]:
                depassivate_site(surf, int(k))
    return surf


def make_loop(rc: C.RunConfig, surf, mode=None):
    cfg = C.loop_config(rc.values, mode)
    loop = Loop(cfg, surf)
    x = rc["approach_x_nm"]
    y = rc["approach_y_nm"]
    x = rc["scan_origin_x_nm"] + 0.5 if math.isnan(x) else x
    y = rc["scan_origin_y_nm"] + 0.5 if math.isnan(y) else y
    coarse_approach(loop, x, y, start_gap_nm=rc["approach_start_gap_nm"], settle_s=rc["approach_settle_s"])
    return loop


def scan_config(rc: C.RunConfig, mode, **kw):
    v = rc.values
    base = dict(extent_x_nm=v["scan_extent_x_nm"], extent_y_nm=v["scan_extent_y_nm"],
                pixels_x=v["scan_pixels_x"], pixels_y=v["scan_pixels_y"],
                speed_nm_per_s=v["scan_speed_nm_per_s"], mode=mode, lia_lpf_hz=v["lia_lpf_hz"],
                origin_x_nm=v["scan_origin_x_nm"], origin_y_nm=v["scan_origin_y_nm"],
                spectroscopy=v["scan_spectroscopy"])
    base.update(kw)
    try:
        return ScanConfig(**base)
    except ScanError as exc:
        raise C.ConfigError("scan", str(exc)) from None


# ---------------------------------------------------------------------------
# commands

def cmd_scan(rc: C.RunConfig, out=None):
    out = _outdir(rc, out)
    surf = make_surface(rc)
    loop = make_loop(rc, surf)
    sc = scan_config(rc, loop.mode)
    sc.check_dwell(loop.cfg.fs_hz)
    meta = _meta(rc, "scan")
    if sc.spectroscopy:
        res = spectroscopic_maps(surf, loop, sc, meta)
    else:
        res = raster_scan(surf, loop, sc, meta)
    res.meta.update(_meta(rc, "scan"))
    res.write(out)
    if res.crashed:
        raise CrashExit(res.crash)
    return res


def cmd_switchover(rc: C.RunConfig, out=None):
    """Regulate in constant current, switch to di/dz and (optionally) back."""
    out = _outdir(rc, out)
    surf = make_surface(rc)
    loop = make_loop(rc, surf, mode=CURRENT)
    bt = rc["switch_bin_ticks"]
    if not loop.prm[K.P_LIA1_ON]:
        loop.enable_modulation(True)
        loop.prime_lia()
    rec = loop.run_for(rc["switch_pre_s"], bin_ticks=bt)
    events = []
    kw = dict(capture_s=rc["switch_capture_s"], check_s=rc["switch_check_s"],
              rel_std_max=rc["switch_rel_std_max"], post_s=rc["switch_post_s"], bin_ticks=bt,
              raise_on_refusal=False)
    sp0 = loop.setpoint
    legs = [DIDZ, CURRENT] if rc["switch_round_trip"] else [DIDZ]
    refused = False
    for to in legs:
        res = switchover(loop, to, **kw)
        rec = rec.concat(res.record)
        events.append({"to_mode": to, "refused": res.refused, "message": res.message,
                       "t_switch_s": res.t_switch, "capture_window_s": list(res.capture_window),
                       "new_setpoint_ln": res.new_setpoint, "lia_rel_std": res.settled_rel_std})
        if res.refused:
            refused = True
            break
        if res.record.crashed:
            break
    path = os.path.join(out, "switchover.csv")
    rec.write_csv(path, channels=("t", "topo", "z_t", "i_filt", "lnRi", "lnRdidz", "err_ln", "U"))
    final = None if refused else float(np.exp(loop.setpoint - sp0) - 1.0)
    write_json(os.path.join(out, "metadata.json"),
               _meta(rc, "switchover", events=events, refused=refused,
                     reference_capture_s=rc["switch_capture_s"], setpoint_relative_change=final))
    if rec.crashed:
        raise CrashExit(rec.crash)
    if refused:
        return EXIT_REFUSED
    return EXIT_OK


def _sysid_plant(rc):
    cfg = C.loop_config(rc.values, rc["sysid_mode"])
    if rc["sysid_mode"] == DIDZ:
        from dataclasses import replace

        cfg = replace(cfg, mod_enabled=True)
    return cfg, linearized_plant(cfg, rc["sysid_mode"], rc["surface_phi_h_eV"])


def cmd_sysid(rc: C.RunConfig, out=None):
    out = _outdir(rc, out)
    cfg, G = _sysid_plant(rc)
    f = np.logspace(np.log10(rc["sysid_f_min_hz"]), np.log10(rc["sysid_f_max_hz"]), rc["sysid_n_freq"])
    if rc["sysid_runner"] == "linear":
        runner = LinearLoopRunner(G, cfg.ki, cfg.omega_c_rad_s, noise_std=rc["sysid_noise_std"],
                                  seed=rc["seed"], log_gain=cfg.log_gain_V)
    else:
        surf = make_surface(rc)
        runner = make_loop(rc, surf, mode=rc["sysid_mode"])
    res = identify(runner, f, n_avg=rc["sysid_n_avg"], order=rc["sysid_order"])
    res["ds_e"].write_csv(os.path.join(out, "frf_setpoint.csv"))
    res["ds_u"].write_csv(os.path.join(out, "frf_output.csv"))
    _write_estimates(os.path.join(out, "estimates.csv"), res, G, controller_tf(cfg))
    fit = res["fit"]
    with open(os.path.join(out, "model.txt"), "w") as fh:
        fh.write(fit.model.to_text())
    region = pi_tuning_region(fit.model, _grid(rc, "wc"), _grid(rc, "ki"),
                              rc["tune_tinf_db_max"], rc["tune_bw_min_hz"])
    region.write_csv(os.path.join(out, "tuning_region.csv"))
    w = 2 * np.pi * res["G"].freq_hz
    err = fit.model.freq_response(w) / G.freq_response(w)
    write_json(os.path.join(out, "metadata.json"),
               _meta(rc, "sysid", fit_order=fit.order, fit_max_err_db=fit.max_err_db,
                     fit_max_err_deg=fit.max_err_deg, fit_warnings=list(fit.warnings),
                     truth_max_err_db=float(np.max(np.abs(20 * np.log10(np.abs(err))))),
                     truth_max_err_deg=float(np.max(np.abs(np.angle(err, deg=True)))),
                     n_feasible=int(region.feasible.sum())))
    return res, region


def _write_estimates(path, res, G, Kt):
    import csv

    Ge, Ke = res["G"], res["K"]
    w = 2 * np.pi * Ge.freq_hz
    Gt, Ktr = G.freq_response(w), Kt.freq_response(2 * np.pi * Ke.freq_hz)
    with open(path, "w", newline="") as fh:
        wr = csv.writer(fh)
        wr.writerow(["freq_hz", "G_re", "G_im", "G_truth_re", "G_truth_im", "K_re", "K_im",
                     "K_truth_re", "K_truth_im"])
        for k in range(Ge.freq_hz.size):
            wr.writerow([repr(float(Ge.freq_hz[k])), repr(float(Ge.H[k].real)), repr(float(Ge.H[k].imag)),
                         repr(float(Gt[k].real)), repr(float(Gt[k].imag)),
                         repr(float(Ke.H[k].real)), repr(float(Ke.H[k].imag)),
                         repr(float(Ktr[k].real)), repr(float(Ktr[k].imag))])


def _grid(rc, which):
    if which == "wc":
        return np.logspace(np.log10(rc["tune_wc_min_rad_per_s"]), np.log10(rc["tune_wc_max_rad_per_s"]),
                           rc["tune_n_wc"])
    return np.logspace(np.log10(rc["tune_ki_min_per_s"]), np.log10(rc["tune_ki_max_per_s"]), rc["tune_n_ki"])


def cmd_tune(rc: C.RunConfig, out=None):
    out = _outdir(rc, out)
    if rc["tune_model_path"]:
        with open(rc["tune_model_path"]) as fh:
            G = LinearSystem.from_text(fh.read())
        src = rc["tune_model_path"]
    else:
        _, G = _sysid_plant(rc)
        src = "linearized default plant"
    region = pi_tuning_region(G, _grid(rc, "wc"), _grid(rc, "ki"), rc["tune_tinf_db_max"], rc["tune_bw_min_hz"])
    region.write_csv(os.path.join(out, "tuning_region.csv"))
    write_json(os.path.join(out, "metadata.json"),
               _meta(rc, "tune", model=src, n_feasible=int(region.feasible.sum()),
                     ki_max_3db=region.ki_max_3db, recommended_ki=region.recommended_ki))
    return region


def litho_job(rc: C.RunConfig, surf):
    a = surf.spec.lattice.dimer_pitch
    b = surf.spec.lattice.row_pitch
    cx, cy = rc["litho_center_x_nm"], rc["litho_center_y_nm"]
    common = dict(bias_V=rc["litho_bias_V"], setpoint_didz_nA_per_nm=rc["litho_setpoint_didz_nA_per_nm"],
                  speed_nm_per_s=rc["litho_speed_nm_per_s"], mode_hint=rc["litho_mode_hint"],
                  settle_s=rc["litho_settle_s"], seed=rc["seed"], dot_length_nm=a)
    pat = rc["litho_pattern"]
    try:
        if pat == "spiral":
            return LithoJob(polylines=(square_spiral(cx, cy, rc["litho_spiral_arm_nm"], rc["litho_spiral_loops"]),),
                            **common)
        if pat == "dots":
            nx, ny = rc["litho_dot_nx"], rc["litho_dot_ny"]
            px, py = rc["litho_dot_pitch_x_nm"], rc["litho_dot_pitch_y_nm"]
            x0 = cx - 0.5 * (nx - 1) * px
            y0 = cy + 0.5 * b - 0.5 * (ny - 1) * py
            return LithoJob(dots=dot_array(x0, y0, px, py, nx, ny), **common)
        pts = tuple(map(tuple, np.asarray(rc["litho_line_xy_nm"], dtype=float).reshape(-1, 2)))
        if len(pts) < 2:
            raise C.ConfigError("litho_line_xy_nm", "a line needs at least two points")
        return LithoJob(polylines=(pts,), **common)
    except LithoError as exc:
        raise C.ConfigError("litho", str(exc)) from None


def cmd_litho(rc: C.RunConfig, out=None):
    out = _outdir(rc, out)
    surf = make_surface(rc)
    job = litho_job(rc, surf)
    pts = job.points()
    ex, ey = surf.extent
    m = 0.5 * job.dot_length_nm
    if pts.size and (pts[:, 0].min() - m < 0 or pts[:, 1].min() < 0
                     or pts[:, 0].max() + m > ex or pts[:, 1].max() > ey):
        raise C.ConfigError("litho", "pattern outside the surface extent")
    loop = make_loop(rc, surf, mode=DIDZ)
    n = rc["litho_scan_pixels"]
    sc = scan_config(rc, DIDZ, extent_x_nm=ex, extent_y_nm=ey, origin_x_nm=0.0, origin_y_nm=0.0,
                     pixels_x=n, pixels_y=n, speed_nm_per_s=rc["litho_scan_speed_nm_per_s"], spectroscopy=False)
    before = raster_scan(surf, loop, sc, _meta(rc, "litho"))
    before.write(out, prefix="before_")
    if before.crashed:
        raise CrashExit(before.crash)
    res = run_lithography(surf, loop, job)
    res.write_log(os.path.join(out, "litho_events.csv"))
    write_surface_csv(surf, os.path.join(out, "surface_after.csv"))
    if res.crashed:
        raise CrashExit(res.crash)
    after = raster_scan(surf, loop, sc, _meta(rc, "litho"))
    after.write(out, prefix="after_")
    from .surface import site_clusters

    write_json(os.path.join(out, "metadata.json"),
               _meta(rc, "litho", n_depassivated=len(res.depassivated),
                     n_clusters=len(site_clusters(surf)), job=job))
    if after.crashed:
        raise CrashExit(after.crash)
    return res


def cmd_surface_gen(rc: C.RunConfig, out=None):
    out = _outdir(rc, out)
    surf = make_surface(rc)
    write_surface_csv(surf, os.path.join(out, "surface_sites.csv"))
    scaling = write_pgm(os.path.join(out, "surface_height.pgm"), surf.h)
    write_json(os.path.join(out, "metadata.json"),
               _meta(rc, "surface-gen", n_sites=surf.n_sites, step_types=list(surf.step_types),
                     warnings=list(surf.warnings), height_scaling=scaling))
    return surf


COMMANDS = {
    "scan": cmd_scan,
    "switchover": cmd_switchover,
    "sysid": cmd_sysid,
    "tune": cmd_tune,
    "litho": cmd_litho,
    "surface-gen": cmd_surface_gen,
}


def build_parser():
    p = argparse.ArgumentParser(prog="stmsim", description="Simulated STM feedback, imaging and lithography.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        s = sub.add_parser(name)
        s.add_argument("config", help="key = value configuration file")
        s.add_argument("-o", "--out", help="output directory (overrides output_dir)")
        s.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                       help="override a configuration key")
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        rc = C.RunConfig.from_file(args.config, args.set)
        with warnings.catch_warnings():
            warnings.simplefilter("default")
            ret = COMMANDS[args.command](rc, args.out)
    except C.ConfigError as exc:
        print(f"stmsim: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except (CrashExit, CrashError) as exc:
        print(f"stmsim: {exc}", file=sys.stderr)
        return EXIT_CRASH
    except ApproachFailure as exc:
        print(f"stmsim: approach failed: {exc}", file=sys.stderr)
        return EXIT_APPROACH
    except LiaNotSettled as exc:
        print(f"stmsim: switchover refused: {exc}", file=sys.stderr)
        return EXIT_REFUSED
    except (ScanError, LithoError, SurfaceError, SysidError) as exc:
        print(f"stmsim: config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except LoopError as exc:
        print(f"stmsim: {exc}", file=sys.stderr)
        return EXIT_ERROR
    return ret if isinstance(ret, int) else EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
