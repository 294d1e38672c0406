"""Flat, typed ``key = value`` run configuration.

One setting per line, ``#`` starts a comment. Every physical quantity
carries its unit in the key name. Lists are comma separated. The file must
declare ``schema_version`` and the surface extent; everything else has a
default listed in ``SCHEMA``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

from .control import CURRENT, DIDZ, LoopConfig
from .io import config_hash
from .junction import JunctionParams
from .lti import PlantParams
from .surface import SurfaceSpec

SCHEMA_VERSION = 1
REQUIRED = object()


class ConfigError(ValueError):
    """Invalid configuration; ``field`` names the offending key."""

    def __init__(self, field, msg):
        self.field = field
        super().__init__(f"{field}: {msg}")


# key: (type, default). Types: float, int, bool, str, "floats".
SCHEMA = {
    "schema_version": (int, REQUIRED),
    "seed": (int, 0),
    "output_dir": (str, "out"),
    # surface
    "surface_extent_x_nm": (float, REQUIRED),
    "surface_extent_y_nm": (float, REQUIRED),
    "surface_grid_spacing_nm": (float, 0.04),
    "surface_phi_h_eV": (float, 4.5),
    "surface_sigma_h_nA_per_V": (float, 1.0e4),
    "surface_db_sigma_factor": (float, 2.0),
    "surface_db_phi_factor": (float, 0.5),
    "surface_step_x_nm": ("floats", ()),
    "surface_db_sites_xy_nm": ("floats", ()),      # x0, y0, x1, y1, ...
    "surface_db_random_fraction": (float, 0.0),
    # plant
    "plant_hv_gain": (float, 13.5),
    "plant_hv_pole_hz": (float, 5.0e4),
    "plant_piezo_nm_per_V": (float, 1.0),
    "plant_piezo_f0_hz": (float, 8.0e3),
    "plant_piezo_zeta": (float, 0.05),
    "plant_preamp_bw_hz": (float, 1.1e3),
    # junction
    "junction_kappa0_per_nm_per_sqrt_eV": (float, 10.25),
    "junction_R_V_per_nA": (float, 1.0),
    "junction_bias_V": (float, -2.5),
    "junction_i_floor_nA": (float, 1e-6),
    "junction_v_ref_V": (float, 2.5),
    "junction_beta": (float, 1.0),
    "junction_sigma_ref_nA_per_V": (float, 1.0e4),
    # loop
    "loop_fs_hz": (float, 1.0e5),
    "loop_mode": (str, CURRENT),
    "loop_ki_per_s": (float, 1.625e4),
    "loop_omega_c_rad_per_s": (float, 1.0e4),
    "loop_fine_range_nm": (float, 10.0),
    "loop_log_gain_V_per_neper": (float, 6.066e-5),
    "loop_setpoint_current_nA": (float, 0.5),
    "loop_setpoint_didz_nA_per_nm": (float, 0.25),
    "loop_mod_enabled": (bool, False),
    "loop_mod_amp_V": (float, 0.8e-3),
    "loop_mod_freq_hz": (float, 2.0e3),
    "lia_hpf_hz": (float, 100.0),
    "lia_lpf_hz": (float, 300.0),
    "lia_lpf_order": (int, 6),
    "notch_q": (float, 30.0),
    "notch_harmonics": (int, 5),
    "bias_mod_enabled": (bool, False),
    "bias_mod_amp_V": (float, 0.02),
    "bias_mod_freq_hz": (float, 700.0),
    "lia2_lpf_hz": (float, 100.0),
    # coarse approach (NaN position: scan origin)
    "approach_x_nm": (float, math.nan),
    "approach_y_nm": (float, math.nan),
    "approach_start_gap_nm": (float, 50.0),
    "approach_settle_s": (float, 0.05),
    # scan
    "scan_extent_x_nm": (float, 48.0),
    "scan_extent_y_nm": (float, 48.0),
    "scan_pixels_x": (int, 512),
    "scan_pixels_y": (int, 512),
    "scan_speed_nm_per_s": (float, 100.0),
    "scan_origin_x_nm": (float, 0.0),
    "scan_origin_y_nm": (float, 0.0),
    "scan_spectroscopy": (bool, False),
    # switchover
    "switch_pre_s": (float, 0.2),
    "switch_capture_s": (float, 1.0),
    "switch_check_s": (float, 0.1),
    "switch_rel_std_max": (float, 0.01),
    "switch_post_s": (float, 0.5),
    "switch_round_trip": (bool, True),
    "switch_bin_ticks": (int, 10),
    # identification
    "sysid_mode": (str, DIDZ),
    "sysid_runner": (str, "linear"),
    "sysid_f_min_hz": (float, 5.0),
    "sysid_f_max_hz": (float, 1500.0),
    "sysid_n_freq": (int, 30),
    "sysid_n_avg": (int, 4),
    "sysid_order": (int, 7),
    "sysid_noise_std": (float, 0.0),
    # tuning region
    "tune_model_path": (str, ""),
    "tune_wc_min_rad_per_s": (float, 1.0e3),
    "tune_wc_max_rad_per_s": (float, 1.0e5),
    "tune_n_wc": (int, 9),
    "tune_ki_min_per_s": (float, 1.0e3),
    "tune_ki_max_per_s": (float, 1.0e5),
    "tune_n_ki": (int, 17),
    "tune_tinf_db_max": (float, 3.0),
    "tune_bw_min_hz": (float, 35.0),
    # lithography
    "litho_pattern": (str, "spiral"),          # spiral | dots | line
    "litho_bias_V": (float, 4.0),
    "litho_setpoint_didz_nA_per_nm": (float, 4.0),
    "litho_speed_nm_per_s": (float, 10.0),
    "litho_mode_hint": (str, "AP"),
    "litho_center_x_nm": (float, 10.176),
    "litho_center_y_nm": (float, 9.984),
    "litho_spiral_loops": (int, 3),
    "litho_spiral_arm_nm": (float, 2.304),
    "litho_dot_nx": (int, 3),
    "litho_dot_ny": (int, 3),
    "litho_dot_pitch_x_nm": (float, 4.608),
    "litho_dot_pitch_y_nm": (float, 3.072),
    "litho_line_xy_nm": ("floats", ()),        # x0, y0, x1, y1, ...
    "litho_settle_s": (float, 0.02),
    "litho_scan_pixels": (int, 128),
    "litho_scan_speed_nm_per_s": (float, 100.0),
}


def _parse_value(key, typ, raw):
    raw = raw.strip()
    try:
        if typ is bool:
            low = raw.lower()
            if low in ("true", "yes", "1", "on"):
                return True
            if low in ("false", "no", "0", "off"):
                return False
            raise ValueError(raw)
        if typ == "floats":
            return tuple(float(v) for v in raw.split(",") if v.strip())
        if typ is str:
            if len(raw) >= 2 and raw[0] == raw[-1] and raw[0] in "\"'":
                return raw[1:-1]
            return raw
        return typ(raw)
    except ValueError:
        name = typ if isinstance(typ, str) else typ.__name__
        raise ConfigError(key, f"cannot read {raw!r} as {name}") from None


def parse_config(text: str, overrides=()) -> dict:
    """Text to a fully populated, typed dict. ``overrides`` are ``key=value`` strings."""
    got = {}
    lines = list(enumerate(text.splitlines(), 1)) + [(0, o) for o in overrides]
    for lineno, line in lines:
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigError(f"line {lineno}", "expected 'key = value'")
        key, raw = (s.strip() for s in line.split("=", 1))
        if key not in SCHEMA:
            raise ConfigError(key, "unknown key")
        got[key] = _parse_value(key, SCHEMA[key][0], raw)
    cfg = {}
    for key, (_, default) in SCHEMA.items():
        if key in got:
            cfg[key] = got[key]
        elif default is REQUIRED:
            raise ConfigError(key, "required key missing")
        else:
            cfg[key] = default
    validate(cfg)
    return cfg


def load_config(path, overrides=()) -> dict:
    try:
        with open(path) as fh:
            text = fh.read()
    except OSError as exc:
        raise ConfigError("config", str(exc)) from None
    return parse_config(text, overrides)


def validate(cfg):
    if cfg["schema_version"] != SCHEMA_VERSION:
        raise ConfigError("schema_version", f"unsupported version {cfg['schema_version']}")
    for k in ("loop_mode", "sysid_mode"):
        if cfg[k] not in (CURRENT, DIDZ):
            raise ConfigError(k, f"must be {CURRENT} or {DIDZ}")
    if cfg["sysid_runner"] not in ("linear", "full"):
        raise ConfigError("sysid_runner", "must be linear or full")
    if cfg["litho_pattern"] not in ("spiral", "dots", "line"):
        raise ConfigError("litho_pattern", "must be spiral, dots or line")
    if len(cfg["surface_db_sites_xy_nm"]) % 2 or len(cfg["litho_line_xy_nm"]) % 2:
        raise ConfigError("surface_db_sites_xy_nm" if len(cfg["surface_db_sites_xy_nm"]) % 2
                          else "litho_line_xy_nm", "needs x, y pairs")
    for k in ("surface_extent_x_nm", "surface_extent_y_nm", "surface_grid_spacing_nm", "loop_fs_hz",
              "scan_speed_nm_per_s", "scan_extent_x_nm", "scan_extent_y_nm"):
        if not cfg[k] > 0:
            raise ConfigError(k, "must be positive")
    if not 0.0 <= cfg["surface_db_random_fraction"] <= 1.0:
        raise ConfigError("surface_db_random_fraction", "must lie in [0, 1]")


def dump_config(cfg: dict) -> str:
    out = []
    for key in SCHEMA:
        v = cfg[key]
        if isinstance(v, tuple):
            v = ", ".join(repr(x) for x in v)
        elif isinstance(v, bool):
            v = "true" if v else "false"
        elif isinstance(v, float):
            v = repr(v)
        out.append(f"{key} = {v}")
    return "\n".join(out) + "\n"


def run_hash(cfg: dict) -> str:
    return config_hash({k: (None if isinstance(v, float) and math.isnan(v) else v) for k, v in cfg.items()})


# ---------------------------------------------------------------------------
# builders

def surface_spec(cfg) -> SurfaceSpec:
    return SurfaceSpec(extent_x=cfg["surface_extent_x_nm"], extent_y=cfg["surface_extent_y_nm"],
                       grid_spacing=cfg["surface_grid_spacing_nm"], phi_h=cfg["surface_phi_h_eV"],
                       sigma_h=cfg["surface_sigma_h_nA_per_V"],
                       db_sigma_factor=cfg["surface_db_sigma_factor"],
                       db_phi_factor=cfg["surface_db_phi_factor"],
                       step_x=tuple(cfg["surface_step_x_nm"]), seed=cfg["seed"])


def plant_params(cfg) -> PlantParams:
    return PlantParams(hv_gain=cfg["plant_hv_gain"], hv_pole_hz=cfg["plant_hv_pole_hz"],
                       piezo_sens_nm_per_V=cfg["plant_piezo_nm_per_V"], piezo_f0_hz=cfg["plant_piezo_f0_hz"],
                       piezo_zeta=cfg["plant_piezo_zeta"], preamp_R_V_per_nA=cfg["junction_R_V_per_nA"],
                       preamp_bw_hz=cfg["plant_preamp_bw_hz"], fs=cfg["loop_fs_hz"])


def junction_params(cfg) -> JunctionParams:
    return JunctionParams(kappa0=cfg["junction_kappa0_per_nm_per_sqrt_eV"], R=cfg["junction_R_V_per_nA"],
                          Vb=cfg["junction_bias_V"], i_floor=cfg["junction_i_floor_nA"],
                          v_ref=cfg["junction_v_ref_V"], beta=cfg["junction_beta"],
                          sigma_ref=cfg["junction_sigma_ref_nA_per_V"])


def loop_config(cfg, mode=None) -> LoopConfig:
    try:
        return LoopConfig(fs_hz=cfg["loop_fs_hz"], ki=cfg["loop_ki_per_s"],
                          omega_c_rad_s=cfg["loop_omega_c_rad_per_s"], fine_range_nm=cfg["loop_fine_range_nm"],
                          log_gain_V=cfg["loop_log_gain_V_per_neper"], mode=mode or cfg["loop_mode"],
                          setpoint_current_nA=cfg["loop_setpoint_current_nA"],
                          setpoint_didz_nA_per_nm=cfg["loop_setpoint_didz_nA_per_nm"],
                          mod_enabled=cfg["loop_mod_enabled"], mod_amp_V=cfg["loop_mod_amp_V"],
                          mod_freq_hz=cfg["loop_mod_freq_hz"], lia_hpf_hz=cfg["lia_hpf_hz"],
                          lia_lpf_hz=cfg["lia_lpf_hz"], lia_lpf_order=cfg["lia_lpf_order"],
                          notch_q=cfg["notch_q"], notch_harmonics=cfg["notch_harmonics"],
                          bias_mod_enabled=cfg["bias_mod_enabled"], bias_mod_amp_V=cfg["bias_mod_amp_V"],
                          bias_mod_freq_hz=cfg["bias_mod_freq_hz"], lia2_lpf_hz=cfg["lia2_lpf_hz"],
                          plant=plant_params(cfg), junction=junction_params(cfg))
    except ValueError as exc:
        raise ConfigError("loop", str(exc)) from None


@dataclass(frozen=True)
class RunConfig:
    """Parsed configuration plus its hash."""
    values: dict
    hash: str

    @classmethod
    def from_file(cls, path, overrides=()):
        v = load_config(path, overrides)
        return cls(v, run_hash(v))

    @classmethod
    def from_text(cls, text, overrides=()):
        v = parse_config(text, overrides)
        return cls(v, run_hash(v))

    def __getitem__(self, key):
        return self.values[key]
