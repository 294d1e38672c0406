import numpy as np
import pytest

from stmsim.control import (ApproachFailure, CrashError, LiaNotSettled, Loop, LoopConfig, PiController,
                            coarse_approach, controller_tf, linearized_plant, modulation_calibration,
                            pi_step, switchover)
from stmsim.junction import steady_state_gap
from stmsim.surface import LatticeSpec, SurfaceSpec, build_surface


@pytest.fixture(scope="module")
def flat():
    return build_surface(SurfaceSpec(extent_x=4, extent_y=4, lattice=LatticeSpec(corrugation_amplitude=0.0)))


def engaged(surf, mode="current", mod=False, **kw):
    lp = Loop(LoopConfig(mode=mode, mod_enabled=mod, **kw), surf)
    lp.engage(2.0, 2.0)
    return lp


def test_pi_step_zero_error_holds_integrator():
    c = PiController(2.0, 1e4, integ=0.3)
    assert all(pi_step(c, 0.0, 1e-5) == pytest.approx(0.6) for _ in range(100))


def test_pi_step_pure_integrator():
    c = PiController(1.0, 1e15)
    for _ in range(100000):
        u = pi_step(c, 1.0, 1e-5)
    # trapezoidal start from e_prev = 0 loses half a sample
    assert u == pytest.approx(1.0 - 0.5e-5, rel=1e-9)


def test_pi_high_frequency_gain():
    assert PiController(1.625e4, 1e4).high_frequency_gain == pytest.approx(1.625)


def test_pi_anti_windup():
    c = PiController(1.0, 1e4, u_min=0.0, u_max=0.5)
    for _ in range(200000):
        u = pi_step(c, 1.0, 1e-5)
    assert u == pytest.approx(0.5, abs=1e-4) and u <= 0.5
    assert c.integ <= 0.5 + 1e-12
    # leaves saturation as soon as the error changes sign
    assert pi_step(c, -1.0, 1e-5) < 0.5


def test_current_mode_regulation(flat):
    lp = engaged(flat)
    lp.run_for(0.2)
    r = lp.run_for(0.1)
    assert np.mean(np.abs(r.i)) == pytest.approx(0.5, rel=0.01)
    assert abs(np.mean(r.err_ln)) < 1e-3


def test_didz_mode_regulation(flat):
    lp = engaged(flat, "didz", mod=True)
    lp.run_for(0.3)
    r = lp.run_for(0.2)
    assert np.mean(r.didz) == pytest.approx(0.25, rel=0.02)
    assert abs(np.mean(r.err_ln)) < 1e-3


def test_tip_swing_within_limit():
    swing, _ = modulation_calibration(LoopConfig(mod_enabled=True))
    assert swing <= 0.1


@pytest.mark.parametrize("mode", ["current", "didz"])
def test_step_disturbance_retracked(flat, mode):
    lp = engaged(flat, mode, mod=mode == "didz")
    lp.run_for(0.2)
    target = lp.gap_for_setpoint(2.0, 2.0)[0]
    lp.prm[30] = 0.136  # additive height offset
    r = lp.run_for(0.6)
    assert abs(np.mean(r.delta[-10000:]) - target) < 0.005


def test_coarse_approach_from_50_nm(flat):
    lp = Loop(LoopConfig(), flat)
    res = coarse_approach(lp, 2.0, 2.0, start_gap_nm=50.0)
    assert res.steps <= 6
    assert 0.0 < res.ext_engaged < lp.cfg.fine_range_nm
    r = lp.run_for(0.1)
    assert np.mean(np.abs(r.i[-2000:])) == pytest.approx(0.5, rel=0.01)


def test_coarse_approach_in_range_takes_no_steps(flat):
    assert coarse_approach(Loop(LoopConfig(), flat), 2.0, 2.0, start_gap_nm=5.0).steps == 0


def test_coarse_approach_unreachable_threshold(flat):
    with pytest.raises(ApproachFailure):
        coarse_approach(Loop(LoopConfig(), flat), 2.0, 2.0, threshold_nA=1e9)


def test_crash_reported_with_coordinates(flat):
    lp = engaged(flat)
    lp.set_setpoint(np.log(1e6))
    r = lp.run_for(0.05)
    assert r.crashed and r.crash is not None
    assert r.crash[2] < 0
    lp2 = engaged(flat)
    lp2.set_setpoint(np.log(1e6))
    with pytest.raises(CrashError):
        lp2.run_for(0.05, raise_on_crash=True)


def test_switchover_bumpless_and_reverse(flat):
    lp = engaged(flat, mod=True)
    lp.run_for(0.1)
    sw = switchover(lp, "didz", capture_s=1.0)
    assert sw.capture_window[1] - sw.capture_window[0] == pytest.approx(1.0)
    z0 = lp.run_for(1e-5).z_t[0]
    post = lp.run_for(0.05)
    assert np.max(np.abs(post.z_t - z0)) < 0.02
    back = switchover(lp, "current", capture_s=1.0)
    assert back.new_setpoint == pytest.approx(np.log(0.5), abs=0.01)


def test_lower_didz_setpoint_retracts(flat):
    lp = engaged(flat, "didz", mod=True)
    lp.run_for(0.2)
    d0 = np.mean(lp.run_for(0.05).delta)
    lp.set_setpoint(lp.setpoint - 0.5)
    lp.run_for(0.3)
    d1 = np.mean(lp.run_for(0.05).delta)
    assert d1 > d0
    k = 10.25 * np.sqrt(4.5)
    assert d1 - d0 == pytest.approx(0.5 / k, rel=0.02)


def test_switch_refused_when_lia_unsettled(flat):
    lp = Loop(LoopConfig(mod_enabled=True), flat)
    lp.engage(2.0, 2.0, prime=False)
    with pytest.raises(LiaNotSettled):
        switchover(lp, "didz", check_s=0.005)
    lp2 = Loop(LoopConfig(mod_enabled=True), flat)
    lp2.engage(2.0, 2.0, prime=False)
    res = switchover(lp2, "didz", check_s=0.005, raise_on_refusal=False)
    assert res.refused and lp2.mode == "current"


def test_linearized_plant_matches_loop_dc():
    cfg = LoopConfig()
    G = linearized_plant(cfg, "current")
    k = 10.25 * np.sqrt(4.5)
    assert G.dcgain() == pytest.approx(cfg.log_gain_V * k * cfg.chain.static_gain, rel=1e-6)
    assert controller_tf(cfg).is_discrete


def test_steady_state_gap_agrees_with_loop(flat):
    lp = engaged(flat)
    lp.run_for(0.2)
    d = steady_state_gap(np.log(0.5), "current", 1e4, 4.5, lp.cfg.junction)
    assert np.mean(lp.run_for(0.05).delta) == pytest.approx(d, abs=1e-4)
