import numpy as np
import pytest
from hypothesis import given, strategies as st

from stmsim.surface import (LatticeSpec, SurfaceError, SurfaceSpec, build_surface, depassivate_site,
                            sample_height, sample_surface, site_clusters, sites_in_box,
                            write_surface_csv)

A, B = 0.384, 0.768


@pytest.fixture(scope="module")
def small():
    return build_surface(SurfaceSpec(extent_x=8.0, extent_y=8.0))


def test_row_count_default_extent():
    assert build_surface(SurfaceSpec()).dimer_rows == 62


def test_too_small_extent():
    with pytest.raises(SurfaceError):
        build_surface(SurfaceSpec(extent_x=0.1, extent_y=0.1))


def test_crest_and_trough(small):
    amp = small.spec.lattice.corrugation_amplitude
    crest = sample_surface(small, 2.5 * A, 2.5 * B)
    assert crest.h == pytest.approx(amp, abs=1e-12)
    assert crest.phi == 4.5
    # off-grid point: bilinear interpolation error is below 1% of the amplitude
    assert sample_surface(small, 2.5 * A, 3 * B).h == pytest.approx(0.0, abs=0.01 * amp)


def test_out_of_extent(small):
    with pytest.raises(SurfaceError):
        sample_surface(small, -0.1, 1.0)
    with pytest.raises(SurfaceError):
        sample_surface(small, 1.0, 8.5)


def test_eleven_maxima_over_4224_pm():
    surf = build_surface(SurfaceSpec(extent_x=6.0, extent_y=2.0, grid_spacing=0.012))
    x = np.linspace(0.0, 4.224, 4001)
    prof = sample_height(surf, x, np.full_like(x, 0.5 * B))
    inner = (prof[1:-1] > prof[:-2]) & (prof[1:-1] >= prof[2:])
    assert inner.sum() == 11


def test_depassivation_rule():
    surf = build_surface(SurfaceSpec(extent_x=4, extent_y=4, sigma_h=0.2))
    k = surf.site_at(1.5 * A, 1.5 * B)
    assert depassivate_site(surf, k)
    s = sample_surface(surf, 1.5 * A, 1.5 * B)
    assert (s.phi, s.sigma, s.hydrogenated) == (2.25, 0.4, False)
    h_before = surf.h.copy()
    with pytest.warns(UserWarning):
        assert not depassivate_site(surf, k)
    assert surf.phi[k] == 2.25 and surf.sigma[k] == 0.4
    assert np.array_equal(surf.h, h_before)
    assert surf.warnings


def test_dot_array_clusters():
    surf = build_surface(SurfaceSpec(extent_x=12, extent_y=12))
    for i in range(3):
        for j in range(3):
            depassivate_site(surf, surf.site_at((3 + 8 * i + 0.5) * A, (2 + 4 * j + 0.5) * B))
    assert len(site_clusters(surf)) == 9


def test_determinism():
    s1 = build_surface(SurfaceSpec(extent_x=5, extent_y=5, step_x=(2.5,)))
    s2 = build_surface(SurfaceSpec(extent_x=5, extent_y=5, step_x=(2.5,)))
    assert np.array_equal(s1.h, s2.h) and np.array_equal(s1.site_map, s2.site_map)


def test_step_edge_raises_terrace_and_rotates_rows():
    surf = build_surface(SurfaceSpec(extent_x=10, extent_y=10, step_x=(5.0,)))
    assert surf.step_types == ("S_A",)
    lo, hi = sample_surface(surf, 2.0, 2.0), sample_surface(surf, 8.0, 2.0)
    assert hi.h - lo.h == pytest.approx(0.136, abs=0.021)
    # upper terrace rows run along y: profile along y shows the dimer pitch
    y = np.linspace(1.0, 1.0 + 10 * A, 2001)
    prof = sample_height(surf, np.full_like(y, 7.5 * B), y)
    peaks = (prof[1:-1] > prof[:-2]) & (prof[1:-1] >= prof[2:])
    assert peaks.sum() == 10


@given(st.floats(0.0, 8.0), st.floats(0.0, 8.0))
def test_height_bounded_by_corrugation(x, y):
    surf = _SURF
    h = sample_surface(surf, x, y).h
    assert -1e-12 <= h <= surf.spec.lattice.corrugation_amplitude + 1e-12


_SURF = build_surface(SurfaceSpec(extent_x=8.0, extent_y=8.0))


def test_sites_in_box_and_csv(tmp_path, small):
    idx = sites_in_box(small, 0, 0, 2 * A, B)
    assert len(idx) == 2
    write_surface_csv(small, tmp_path / "s.csv")
    rows = (tmp_path / "s.csv").read_text().splitlines()
    assert len(rows) == small.n_sites + 1
    assert rows[0].startswith("x_nm,y_nm")


def test_grid_must_resolve_pitch():
    with pytest.raises(SurfaceError):
        build_surface(SurfaceSpec(extent_x=4, extent_y=4, grid_spacing=0.2))


def test_lattice_override():
    surf = build_surface(SurfaceSpec(extent_x=4, extent_y=4, lattice=LatticeSpec(corrugation_amplitude=0.0)))
    assert np.all(surf.h == 0.0)
