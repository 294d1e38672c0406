import numpy as np
import pytest
from hypothesis import given, strategies as st

from stmsim.lti import (DiscreteSim, ImproperSystemError, LinearSystem, PlantChain, PlantParams,
                        discretize, first_order_lowpass, freq_response, pi_controller, resonator,
                        stability_metrics, step_sim)

FS = 100e3


def test_static_gain_discretizes_exactly():
    d = discretize(LinearSystem.static(13.5), FS)
    assert d.dcgain() == 13.5
    assert np.allclose(freq_response(d, [1.0, 1e3, 1e5]), 13.5)


def test_first_order_corner_after_discretization():
    d = first_order_lowpass(1.1e3).discretize(FS)
    mag = np.abs(d.freq_response(2 * np.pi * 1.1e3))
    assert 20 * np.log10(mag) == pytest.approx(-3.01, abs=0.1)


def test_unstable_pole_stays_unstable():
    d = LinearSystem([], [100.0], 1.0).discretize(FS)
    assert np.abs(d.poles[0]) > 1.0 and not d.is_stable()


def test_improper_rejected():
    with pytest.raises(ImproperSystemError):
        LinearSystem([-1.0, -2.0], [-3.0], 1.0).discretize(FS)


def test_unit_gain_passthrough():
    sim = DiscreteSim(LinearSystem.static(1.0, dt=1 / FS))
    x = np.random.default_rng(0).normal(size=50)
    assert np.array_equal([step_sim(sim, v) for v in x], x)


def test_integrator_one_second():
    ki = 3.0
    sim = DiscreteSim(pi_controller(ki, 1e12, dt=1 / FS))
    y = sim.run(np.ones(int(FS)))
    assert y[-1] == pytest.approx(ki, rel=1e-3)


def test_piezo_impulse_rings_at_resonance():
    pz = resonator(8e3, 0.05).discretize(FS, prewarp_hz=8e3)
    sim = DiscreteSim(pz)
    u = np.zeros(2 ** 14)
    u[0] = 1.0
    y = sim.run(u)
    spec = np.abs(np.fft.rfft(y, 2 ** 18))
    f = np.fft.rfftfreq(2 ** 18, 1 / FS)
    assert f[np.argmax(spec)] == pytest.approx(8e3, rel=0.02)
    assert np.max(np.abs(y[-1000:])) < 1e-3 * np.max(np.abs(y))


def test_step_steady_state_equals_dc_gain():
    for sys in PlantChain().discrete().values():
        y = DiscreteSim(sys).run(np.ones(20000))
        assert y[-1] == pytest.approx(sys.dcgain(), rel=1e-3)


@given(st.floats(10.0, 3e3), st.floats(0.1, 100.0))
def test_discrete_matches_continuous_below_fs_over_20(fc, g):
    c = first_order_lowpass(fc, g)
    d = c.discretize(FS)
    w = 2 * np.pi * np.logspace(0, np.log10(FS / 20), 50)
    err = 20 * np.log10(np.abs(d.freq_response(w) / c.freq_response(w)))
    assert np.max(np.abs(err)) < 0.2
    assert d.dcgain() == pytest.approx(g, rel=1e-12)


def test_pi_high_frequency_asymptote():
    K = pi_controller(1.625e4, 1e4)
    assert np.abs(K.freq_response(1e9)) == pytest.approx(1.625, rel=1e-6)


def test_integrator_loop_margins():
    m = stability_metrics(LinearSystem([], [0.0], 1.0))
    assert m.gain_margin == np.inf
    assert m.phase_margin == pytest.approx(90.0, abs=1e-6)
    assert m.closed_loop_stable


def test_gain_margin_definition():
    # three coincident poles at -1: phase -180 at w = sqrt(3), |L| = k / 8
    L = LinearSystem([], [-1.0, -1.0, -1.0], 4.0)
    m = stability_metrics(L)
    assert m.w_phase_cross == pytest.approx(np.sqrt(3), rel=1e-9)
    assert m.gain_margin == pytest.approx(2.0, rel=1e-9)


def test_inf_norm_grid_convergence():
    L = LinearSystem([], [-1.0, -1.0, -1.0], 6.0)
    a = stability_metrics(L, n_grid=3000).closedloop_inf_norm
    b = stability_metrics(L, n_grid=30000).closedloop_inf_norm
    assert a == pytest.approx(b, rel=0.01)


def test_default_plant_with_default_gains():
    from stmsim.control import LoopConfig, linearized_plant

    cfg = LoopConfig()
    G = linearized_plant(cfg, "didz")
    m = stability_metrics(pi_controller(cfg.ki, cfg.omega_c_rad_s, 1 / FS) * G, w_min=1.0)
    assert m.closed_loop_stable
    assert m.bandwidth >= 35.0


def test_text_round_trip():
    s = first_order_lowpass(300.0, 2.0).discretize(FS)
    r = LinearSystem.from_text(s.to_text())
    w = np.logspace(0, 5, 20)
    assert np.allclose(r.freq_response(w), s.freq_response(w), rtol=1e-9)


def test_plant_chain_composition():
    p = PlantParams()
    ch = PlantChain(p)
    assert ch.static_gain == p.hv_gain * p.piezo_sens_nm_per_V
    assert ch.hv_amp.dcgain() == pytest.approx(13.5)
    assert ch.preamp.dcgain() == pytest.approx(1.0)
