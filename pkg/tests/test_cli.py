import json
import warnings

import numpy as np
import pytest

from stmsim import cli
from stmsim.config import RunConfig
from stmsim.io import read_pgm

SCAN = """schema_version = 1
surface_extent_x_nm = 6
surface_extent_y_nm = 6
scan_extent_x_nm = 4
scan_extent_y_nm = 4
scan_pixels_x = 24
scan_pixels_y = 24
scan_speed_nm_per_s = 40
"""


def write(tmp_path, text, name="run.cfg"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


def test_scan_current_and_didz(tmp_path):
    cfg = write(tmp_path, SCAN)
    assert cli.main(["scan", cfg, "-o", str(tmp_path / "a")]) == cli.EXIT_OK
    files = sorted(f.name for f in (tmp_path / "a").iterdir())
    assert files == ["images.csv", "metadata.json", "topography.pgm"]
    meta = json.loads((tmp_path / "a" / "metadata.json").read_text())
    assert meta["config_hash"] == RunConfig.from_file(cfg).hash
    assert cli.main(["scan", cfg, "-o", str(tmp_path / "b"), "--set", "loop_mode=didz",
                     "--set", "loop_mod_enabled=true"]) == cli.EXIT_OK
    a = read_pgm(tmp_path / "a" / "topography.pgm")
    b = read_pgm(tmp_path / "b" / "topography.pgm")
    assert a.shape == b.shape == (24, 24)


def test_scan_spectroscopy_adds_maps(tmp_path):
    cfg = write(tmp_path, SCAN + "scan_spectroscopy = true\nloop_mod_enabled = true\nbias_mod_enabled = true\n"
                "scan_speed_nm_per_s = 20\n")
    assert cli.main(["scan", cfg, "-o", str(tmp_path / "s")]) == cli.EXIT_OK
    names = {f.name for f in (tmp_path / "s").iterdir()}
    assert {"lbh.pgm", "conductivity.pgm"} <= names


def test_missing_surface_is_usage_error(tmp_path, capsys):
    cfg = write(tmp_path, "schema_version = 1\n")
    assert cli.main(["scan", cfg, "-o", str(tmp_path / "x")]) == cli.EXIT_CONFIG
    assert "surface_extent_x_nm" in capsys.readouterr().err


def test_crash_has_own_exit_code(tmp_path):
    cfg = write(tmp_path, SCAN + "surface_step_x_nm = 2\nloop_setpoint_current_nA = 8400\n"
                "scan_speed_nm_per_s = 200\nscan_pixels_x = 16\nscan_pixels_y = 16\n")
    assert cli.main(["scan", cfg, "-o", str(tmp_path / "c")]) == cli.EXIT_CRASH
    meta = json.loads((tmp_path / "c" / "metadata.json").read_text())
    assert meta["status"] == "crash" and len(meta["crash"]) == 3


def test_switchover_round_trip(tmp_path):
    cfg = write(tmp_path, SCAN)
    assert cli.main(["switchover", cfg, "-o", str(tmp_path / "w")]) == cli.EXIT_OK
    meta = json.loads((tmp_path / "w" / "metadata.json").read_text())
    assert meta["reference_capture_s"] == 1.0
    ev = meta["events"]
    assert [e["to_mode"] for e in ev] == ["didz", "current"]
    assert ev[0]["capture_window_s"][1] - ev[0]["capture_window_s"][0] == pytest.approx(1.0)
    assert abs(meta["setpoint_relative_change"]) < 0.01
    head = (tmp_path / "w" / "switchover.csv").read_text().splitlines()[0]
    assert head.startswith("t,topo,z_t")


def test_switchover_refusal_recorded(tmp_path):
    cfg = write(tmp_path, SCAN + "switch_rel_std_max = 1e-12\n")
    assert cli.main(["switchover", cfg, "-o", str(tmp_path / "r")]) == cli.EXIT_REFUSED
    meta = json.loads((tmp_path / "r" / "metadata.json").read_text())
    assert meta["refused"] and meta["events"][0]["refused"]


def test_sysid_end_to_end(tmp_path):
    cfg = write(tmp_path, SCAN + "tune_n_wc = 3\ntune_n_ki = 5\ntune_ki_min_per_s = 1625\n"
                "tune_ki_max_per_s = 162500\ntune_wc_min_rad_per_s = 1000\ntune_wc_max_rad_per_s = 100000\n")
    assert cli.main(["sysid", cfg, "-o", str(tmp_path / "y")]) == cli.EXIT_OK
    d = tmp_path / "y"
    meta = json.loads((d / "metadata.json").read_text())
    assert meta["truth_max_err_db"] < 0.5
    rows = [r.split(",") for r in (d / "tuning_region.csv").read_text().splitlines()[1:]]
    hit = [r for r in rows if float(r[0]) == 1e4 and float(r[1]) == pytest.approx(1.625e4)]
    assert hit and hit[0][5] == "1"
    # the fitted model feeds the tune command
    cfg2 = write(tmp_path, SCAN + f"tune_model_path = {d / 'model.txt'}\ntune_n_wc = 2\ntune_n_ki = 3\n", "t.cfg")
    assert cli.main(["tune", cfg2, "-o", str(tmp_path / "t")]) == cli.EXIT_OK


def test_sysid_grid_clamped(tmp_path):
    rc = RunConfig.from_text(SCAN + "sysid_f_min_hz = 1\nsysid_f_max_hz = 3000\nsysid_n_freq = 20\n"
                             "tune_n_wc = 1\ntune_n_ki = 2\n")
    with pytest.warns(UserWarning, match="clamped"):
        res, _ = cli.cmd_sysid(rc, str(tmp_path / "z"))
    f = res["G"].freq_hz
    assert f.min() >= 5.0 - 1e-9 and f.max() <= 1500.0 + 1e-9


def test_litho_outside_extent_rejected(tmp_path):
    cfg = write(tmp_path, "schema_version = 1\nsurface_extent_x_nm = 8\nsurface_extent_y_nm = 8\n"
                "litho_center_x_nm = 7.5\nlitho_center_y_nm = 4\n")
    out = tmp_path / "l"
    assert cli.main(["litho", cfg, "-o", str(out)]) == cli.EXIT_CONFIG
    assert not (out / "surface_after.csv").exists()


def test_surface_gen(tmp_path):
    cfg = write(tmp_path, "schema_version = 1\nsurface_extent_x_nm = 4\nsurface_extent_y_nm = 4\n"
                "surface_step_x_nm = 2\nsurface_db_sites_xy_nm = 1.0, 1.0\n")
    assert cli.main(["surface-gen", cfg, "-o", str(tmp_path / "g")]) == cli.EXIT_OK
    rows = (tmp_path / "g" / "surface_sites.csv").read_text().splitlines()
    assert sum(r.endswith(",0") for r in rows[1:]) == 1
    meta = json.loads((tmp_path / "g" / "metadata.json").read_text())
    assert meta["step_types"] == ["S_A"]
