"""Synthetic Si(100)-2x1:H sample.

Topography lives on a fine regular grid and is sampled bilinearly. Electronic
properties (sigma, phi, hydrogen flag) live on lattice sites, one per dimer,
and are sampled nearest-site through an index map on the same grid, so a
dangling bond has atomically sharp edges.

Dimer rows run along x on even terraces and along y on odd terraces
(single-height steps rotate the 2x1 reconstruction by 90 degrees).
"""
from __future__ import annotations

import csv
import warnings
from dataclasses import dataclass, field

import numpy as np


class SurfaceError(ValueError):
    pass


@dataclass(frozen=True)
class LatticeSpec:
    dimer_pitch: float = 0.384      # nm, along a dimer row
    row_pitch: float = 0.768        # nm, across rows
    step_height: float = 0.136      # nm, single-layer step
    corrugation_amplitude: float = 0.02   # nm, row crest to trough
    dimer_depth: float = 0.5        # fraction of the amplitude modulated along a row


@dataclass(frozen=True)
class SurfaceSpec:
    extent_x: float = 48.0
    extent_y: float = 48.0
    grid_spacing: float = 0.04
    lattice: LatticeSpec = field(default_factory=LatticeSpec)
    phi_h: float = 4.5              # eV, hydrogenated terrace
    sigma_h: float = 1.0e4          # nA/V
    db_sigma_factor: float = 2.0
    db_phi_factor: float = 0.5
    step_x: tuple = ()              # x positions of step edges, each raising h by one step
    seed: int = 0


@dataclass
class SiteState:
    h: float
    sigma: float
    phi: float
    hydrogenated: bool
    index: int


@dataclass
class SurfaceMap:
    spec: SurfaceSpec
    h: np.ndarray            # (ny, nx) nm
    site_map: np.ndarray     # (ny, nx) int32 nearest-site index
    site_x: np.ndarray
    site_y: np.ndarray
    site_terrace: np.ndarray
    sigma: np.ndarray        # per site, nA/V
    phi: np.ndarray          # per site, eV
    hydrogenated: np.ndarray  # per site, bool
    step_types: tuple = ()   # 'S_A' or 'S_B' per step edge
    warnings: list = field(default_factory=list)

    @property
    def dx(self):
        return self.spec.grid_spacing

    @property
    def extent(self):
        return self.spec.extent_x, self.spec.extent_y

    @property
    def n_sites(self):
        return self.sigma.size

    @property
    def dimer_rows(self):
        """Complete dimer rows across the image height (rows along x)."""
        return int(self.spec.extent_y / self.spec.lattice.row_pitch + 1e-9)

    def copy(self):
        return SurfaceMap(self.spec, self.h.copy(), self.site_map.copy(), self.site_x.copy(),
                          self.site_y.copy(), self.site_terrace.copy(), self.sigma.copy(),
                          self.phi.copy(), self.hydrogenated.copy(), self.step_types,
                          list(self.warnings))

    def site_at(self, x, y):
        ix, iy = self._cell(x, y)
        return int(self.site_map[iy, ix])

    def _cell(self, x, y):
        ny, nx = self.h.shape
        ix = int(np.clip(np.rint(x / self.dx), 0, nx - 1))
        iy = int(np.clip(np.rint(y / self.dx), 0, ny - 1))
        return ix, iy

    def db_indices(self):
        return np.flatnonzero(~self.hydrogenated)


def corrugation(x, y, lat: LatticeSpec, rows_along_x=True):
    """Dimer-row corrugation with maxima on the dimer sites.

    Sites sit at ((j + 1/2) a, (i + 1/2) b) for rows along x, where a is the
    dimer pitch and b the row pitch.
    """
    if not rows_along_x:
        x, y = y, x
    a, b = lat.dimer_pitch, lat.row_pitch
    across = 0.5 * (1.0 + np.cos(2 * np.pi * (y - 0.5 * b) / b))
    d = lat.dimer_depth
    along = (1.0 - d) + d * 0.5 * (1.0 + np.cos(2 * np.pi * (x - 0.5 * a) / a))
    return lat.corrugation_amplitude * across * along


def build_surface(spec: SurfaceSpec = SurfaceSpec()) -> SurfaceMap:
    lat = spec.lattice
    if spec.extent_x < lat.row_pitch or spec.extent_y < lat.row_pitch:
        raise SurfaceError("extent smaller than one lattice cell")
    if spec.grid_spacing <= 0 or spec.grid_spacing > lat.dimer_pitch / 4:
        raise SurfaceError("grid spacing must resolve the dimer pitch (<= pitch/4)")
    nx = int(round(spec.extent_x / spec.grid_spacing)) + 1
    ny = int(round(spec.extent_y / spec.grid_spacing)) + 1
    xs = np.arange(nx) * spec.grid_spacing
    ys = np.arange(ny) * spec.grid_spacing
    X, Y = np.meshgrid(xs, ys)

    edges = np.sort(np.asarray(spec.step_x, dtype=float))
    terrace = np.searchsorted(edges, X, side="right")
    h = np.empty_like(X)
    site_map = np.empty(X.shape, dtype=np.int32)
    sx, sy, st = [], [], []
    offset = 0
    n_ter = len(edges) + 1
    a, b = lat.dimer_pitch, lat.row_pitch
    for k in range(n_ter):
        mask = terrace == k
        along_x = k % 2 == 0
        h[mask] = k * lat.step_height + corrugation(X[mask], Y[mask], lat, along_x)
        px, py = (a, b) if along_x else (b, a)
        nsx = int(np.ceil(spec.extent_x / px))
        nsy = int(np.ceil(spec.extent_y / py))
        ix = np.clip(np.floor(X[mask] / px).astype(np.int64), 0, nsx - 1)
        iy = np.clip(np.floor(Y[mask] / py).astype(np.int64), 0, nsy - 1)
        site_map[mask] = offset + iy * nsx + ix
        gx, gy = np.meshgrid((np.arange(nsx) + 0.5) * px, (np.arange(nsy) + 0.5) * py)
        sx.append(gx.ravel())
        sy.append(gy.ravel())
        st.append(np.full(gx.size, k, dtype=np.int32))
        offset += nsx * nsy
    site_x = np.concatenate(sx)
    site_y = np.concatenate(sy)
    site_t = np.concatenate(st)
    # drop sites of a terrace that fall outside that terrace
    used = np.unique(site_map)
    remap = np.full(site_x.size, -1, dtype=np.int32)
    remap[used] = np.arange(used.size, dtype=np.int32)
    site_map = remap[site_map]
    site_x, site_y, site_t = site_x[used], site_y[used], site_t[used]
    # S_A: dimer rows of the upper terrace parallel to the (vertical) edge
    step_types = tuple("S_A" if (k + 1) % 2 == 1 else "S_B" for k in range(len(edges)))
    n = site_x.size
    return SurfaceMap(spec=spec, h=h, site_map=site_map, site_x=site_x, site_y=site_y,
                      site_terrace=site_t, sigma=np.full(n, spec.sigma_h),
                      phi=np.full(n, spec.phi_h), hydrogenated=np.ones(n, dtype=bool),
                      step_types=step_types)


def sample_surface(surf: SurfaceMap, x: float, y: float) -> SiteState:
    ex, ey = surf.extent
    if not (0.0 <= x <= ex and 0.0 <= y <= ey):
        raise SurfaceError(f"({x}, {y}) outside surface extent {ex} x {ey} nm")
    hv = sample_height(surf, x, y)
    idx = surf.site_at(x, y)
    return SiteState(h=float(hv), sigma=float(surf.sigma[idx]), phi=float(surf.phi[idx]),
                     hydrogenated=bool(surf.hydrogenated[idx]), index=idx)


def sample_height(surf: SurfaceMap, x, y):
    """Bilinear interpolation of h (vectorized)."""
    ny, nx = surf.h.shape
    fx = np.clip(np.asarray(x, dtype=float) / surf.dx, 0, nx - 1)
    fy = np.clip(np.asarray(y, dtype=float) / surf.dx, 0, ny - 1)
    x0 = np.minimum(np.floor(fx).astype(np.int64), nx - 2)
    y0 = np.minimum(np.floor(fy).astype(np.int64), ny - 2)
    tx, ty = fx - x0, fy - y0
    H = surf.h
    return ((1 - ty) * ((1 - tx) * H[y0, x0] + tx * H[y0, x0 + 1])
            + ty * ((1 - tx) * H[y0 + 1, x0] + tx * H[y0 + 1, x0 + 1]))


def depassivate_site(surf: SurfaceMap, index: int) -> bool:
    """Remove the hydrogen of one site in place.

    Returns False (and records a warning) when the site is already a
    dangling bond; the map is then left untouched.
    """
    if not surf.hydrogenated[index]:
        msg = f"site {index} already depassivated"
        surf.warnings.append(msg)
        warnings.warn(msg, stacklevel=2)
        return False
    surf.hydrogenated[index] = False
    surf.phi[index] *= surf.spec.db_phi_factor
    surf.sigma[index] *= surf.spec.db_sigma_factor
    return True


def sites_in_box(surf: SurfaceMap, x0, y0, x1, y1):
    return np.flatnonzero((surf.site_x >= x0) & (surf.site_x <= x1)
                          & (surf.site_y >= y0) & (surf.site_y <= y1))


def site_clusters(surf: SurfaceMap, indices=None, link=None):
    """Group dangling-bond sites into connected clusters.

    Two sites are linked when closer than ``link`` (default: just over one
    row pitch, so nearest neighbours in both lattice directions connect).
    Returns a list of index arrays.
    """
    from scipy.sparse.csgraph import connected_components
    from scipy.spatial import cKDTree

    idx = surf.db_indices() if indices is None else np.asarray(indices)
    if idx.size == 0:
        return []
    link = 1.05 * surf.spec.lattice.row_pitch if link is None else link
    pts = np.column_stack([surf.site_x[idx], surf.site_y[idx]])
    graph = cKDTree(pts).sparse_distance_matrix(cKDTree(pts), link, output_type="coo_matrix")
    _, labels = connected_components(graph, directed=False)
    return [idx[labels == k] for k in range(labels.max() + 1)]


def write_surface_csv(surf: SurfaceMap, path):
    """Per-site dump: x, y, h, sigma, phi, hydrogenated."""
    hs = sample_height(surf, surf.site_x, surf.site_y)
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["x_nm", "y_nm", "h_nm", "sigma_nA_per_V", "phi_eV", "hydrogenated"])
        for k in range(surf.n_sites):
            w.writerow([f"{surf.site_x[k]:.6f}", f"{surf.site_y[k]:.6f}", f"{hs[k]:.6f}",
                        repr(float(surf.sigma[k])), repr(float(surf.phi[k])),
                        int(surf.hydrogenated[k])])
