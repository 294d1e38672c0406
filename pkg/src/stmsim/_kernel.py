"""Sample-rate loop kernels (numba).

All filter blocks share one sos array; ``blk[b] = (first section, count)``.
Parameters and mutable loop state are flat float arrays indexed by the
constants below so a run can be resumed chunk by chunk from Python.
"""
from __future__ import annotations

import numpy as np
from numba import njit

# parameter slots
P_FS = 0
P_KI = 1
P_WC = 2
P_UMIN = 3
P_UMAX = 4
P_MODE = 5          # 0 constant current, 1 constant di/dz
P_SP = 6            # ln-domain set-point
P_G = 7             # log-amp output gain, V per neper
P_ZBASE = 8         # coarse-positioner height of the tip at zero extension, nm
P_KAPPA0 = 9
P_R = 10
P_VB = 11
P_IFLOOR = 12
P_VREF = 13
P_BETA = 14
P_SIGREF = 15
P_MOD_ON = 16
P_MOD_AMP = 17      # V at the controller output
P_MOD_W = 18        # rad/s
P_BMOD_ON = 19
P_BMOD_AMP = 20     # V on the bias
P_BMOD_W = 21
P_RE_AMP = 22
P_RE_W = 23
P_RU_AMP = 24
P_RU_W = 25
P_DIDZ_CAL = 26     # nA/nm per volt of LIA amplitude
P_DIDV_CAL = 27     # (nA/V) per volt of LIA amplitude
P_STATIC = 28       # nm of extension per volt of u
P_LOOP_ON = 29
P_HOFF = 30         # additive topography offset (disturbance injection), nm
P_LIA1_ON = 31
P_LIA2_ON = 32
P_GRID_DX = 33
P_RE_PH = 34
P_RU_PH = 35
N_PARAMS = 36

# state slots
S_N = 0             # tick counter
S_I = 1             # integrator
S_EPREV = 2
S_EXT = 3           # piezo extension, nm
S_U = 4             # last PI output
S_CRASH_X = 5
S_CRASH_Y = 6
S_CRASH_D = 7
N_STATE = 8

# filter blocks
B_HV = 0
B_PZ = 1
B_PRE = 2
B_NOTCH = 3
B_HPF1 = 4
B_LPF1D = 5
B_LPF1Q = 6
B_HPF2 = 7
B_LPF2D = 8
B_LPF2Q = 9
N_BLOCKS = 10

# recorded channels
CHANNELS = ("t", "x", "y", "U", "u_total", "z_t", "topo", "h", "delta", "i", "i_filt",
            "lnRi", "didz", "lnRdidz", "err_ln", "didV", "Y", "lia_phase", "abs_i", "ext",
            "Vb", "lia_amp_V", "lia2_amp_V", "sigma", "phi")
CH = {name: k for k, name in enumerate(CHANNELS)}
N_CH = len(CHANNELS)

STATUS_OK = 0
STATUS_CRASH = 1


@njit(cache=True, inline="always")
def _sos_step(sos, zi, start, count, x):
    for k in range(start, start + count):
        y = sos[k, 0] * x + zi[k, 0]
        zi[k, 0] = sos[k, 1] * x - sos[k, 4] * y + zi[k, 1]
        zi[k, 1] = sos[k, 2] * x - sos[k, 5] * y
        x = y
    return x


@njit(cache=True)
def run_ticks(n_ticks, x0, y0, x1, y1, bin_edges, out, prm, st, sos, zi, blk,
              hgrid, site_map, s_sigma, s_phi):
    """Advance the loop n_ticks samples along a straight segment.

    Per-bin means of every channel are written to out[bin, channel].
    Returns (status, ticks_done).
    """
    fs = prm[P_FS]
    dt = 1.0 / fs
    ki = prm[P_KI]
    inv_wc = 1.0 / prm[P_WC]
    g = prm[P_G]
    R = prm[P_R]
    kappa0 = prm[P_KAPPA0]
    floor_v = R * prm[P_IFLOOR]
    dxg = prm[P_GRID_DX]
    ny, nx = hgrid.shape
    nb = bin_edges.size - 1
    acc = np.zeros(N_CH)
    b = 0
    cnt = 0
    mode = prm[P_MODE]
    for k in range(n_ticks):
        t = st[S_N] * dt
        frac = k / n_ticks
        x = x0 + (x1 - x0) * frac
        y = y0 + (y1 - y0) * frac

        # surface sample
        fx = x / dxg
        fy = y / dxg
        if fx < 0.0:
            fx = 0.0
        if fy < 0.0:
            fy = 0.0
        if fx > nx - 1:
            fx = nx - 1.0
        if fy > ny - 1:
            fy = ny - 1.0
        ix = int(fx)
        iy = int(fy)
        if ix > nx - 2:
            ix = nx - 2
        if iy > ny - 2:
            iy = ny - 2
        tx = fx - ix
        ty = fy - iy
        h = ((1 - ty) * ((1 - tx) * hgrid[iy, ix] + tx * hgrid[iy, ix + 1])
             + ty * ((1 - tx) * hgrid[iy + 1, ix] + tx * hgrid[iy + 1, ix + 1])) + prm[P_HOFF]
        jx = int(fx + 0.5)
        jy = int(fy + 0.5)
        site = site_map[jy, jx]
        sigma = s_sigma[site]
        phi = s_phi[site]

        # junction
        z_t = prm[P_ZBASE] - st[S_EXT]
        delta = z_t - h
        if delta < 0.0:
            st[S_CRASH_X] = x
            st[S_CRASH_Y] = y
            st[S_CRASH_D] = delta
            if cnt > 0 and b < nb:
                for c in range(N_CH):
                    out[b, c] = acc[c] / cnt
            return STATUS_CRASH, k
        vb = prm[P_VB]
        if prm[P_BMOD_ON] != 0.0:
            vb += prm[P_BMOD_AMP] * np.sin(prm[P_BMOD_W] * t)
        kap = kappa0 * np.sqrt(phi)
        f = sigma * vb
        if prm[P_BETA] != 0.0:
            f *= (abs(vb) / prm[P_VREF]) ** (prm[P_BETA] * np.log(sigma / prm[P_SIGREF]))
        cur = f * np.exp(-kap * delta)

        # measurement chain
        v = _sos_step(sos, zi, blk[B_PRE, 0], blk[B_PRE, 1], cur)
        vn = _sos_step(sos, zi, blk[B_NOTCH, 0], blk[B_NOTCH, 1], v)
        av = abs(vn)
        if av < floor_v:
            av = floor_v
        lnri = np.log(av)
        amp1 = 0.0
        ph1 = 0.0
        didz = 0.0
        if prm[P_LIA1_ON] != 0.0:
            th = prm[P_MOD_W] * t
            xf = _sos_step(sos, zi, blk[B_HPF1, 0], blk[B_HPF1, 1], v)
            yd = _sos_step(sos, zi, blk[B_LPF1D, 0], blk[B_LPF1D, 1], xf * np.sin(th))
            yq = _sos_step(sos, zi, blk[B_LPF1Q, 0], blk[B_LPF1Q, 1], xf * np.cos(th))
            amp1 = 2.0 * np.sqrt(yd * yd + yq * yq)
            ph1 = np.arctan2(yq, yd)
            didz = amp1 * prm[P_DIDZ_CAL]
        ad = R * didz
        if ad < floor_v:
            ad = floor_v
        lnrdidz = np.log(ad)
        amp2 = 0.0
        didv = 0.0
        if prm[P_LIA2_ON] != 0.0:
            th2 = prm[P_BMOD_W] * t
            xf2 = _sos_step(sos, zi, blk[B_HPF2, 0], blk[B_HPF2, 1], v)
            yd2 = _sos_step(sos, zi, blk[B_LPF2D, 0], blk[B_LPF2D, 1], xf2 * np.sin(th2))
            yq2 = _sos_step(sos, zi, blk[B_LPF2Q, 0], blk[B_LPF2Q, 1], xf2 * np.cos(th2))
            amp2 = 2.0 * np.sqrt(yd2 * yd2 + yq2 * yq2)
            didv = amp2 * prm[P_DIDV_CAL]

        # controller
        lnx = lnri if mode == 0.0 else lnrdidz
        err_ln = prm[P_SP] - lnx
        Y = g * lnx
        e = g * prm[P_SP] - Y
        if prm[P_RE_AMP] != 0.0:
            e += prm[P_RE_AMP] * np.sin(prm[P_RE_W] * t + prm[P_RE_PH])
        if prm[P_LOOP_ON] != 0.0:
            i_new = st[S_I] + 0.5 * dt * (e + st[S_EPREV])
            u = ki * (i_new + e * inv_wc)
            if u > prm[P_UMAX]:
                if e * ki <= 0.0:
                    st[S_I] = i_new
                u = ki * (st[S_I] + e * inv_wc)
                if u > prm[P_UMAX]:
                    u = prm[P_UMAX]
            elif u < prm[P_UMIN]:
                if e * ki >= 0.0:
                    st[S_I] = i_new
                u = ki * (st[S_I] + e * inv_wc)
                if u < prm[P_UMIN]:
                    u = prm[P_UMIN]
            else:
                st[S_I] = i_new
            st[S_EPREV] = e
            st[S_U] = u
        else:
            u = st[S_U]
        ut = u
        if prm[P_RU_AMP] != 0.0:
            ut += prm[P_RU_AMP] * np.sin(prm[P_RU_W] * t + prm[P_RU_PH])
        if prm[P_MOD_ON] != 0.0:
            ut += prm[P_MOD_AMP] * np.sin(prm[P_MOD_W] * t)
        hv = _sos_step(sos, zi, blk[B_HV, 0], blk[B_HV, 1], ut)
        ext_prev = st[S_EXT]
        st[S_EXT] = _sos_step(sos, zi, blk[B_PZ, 0], blk[B_PZ, 1], hv)

        # record
        while b < nb and k >= bin_edges[b + 1]:
            if cnt > 0:
                for c in range(N_CH):
                    out[b, c] = acc[c] / cnt
            acc[:] = 0.0
            cnt = 0
            b += 1
        acc[0] += t
        acc[1] += x
        acc[2] += y
        acc[3] += u
        acc[4] += ut
        acc[5] += z_t
        acc[6] += prm[P_ZBASE] - prm[P_STATIC] * u
        acc[7] += h
        acc[8] += delta
        acc[9] += cur
        acc[10] += vn / R
        acc[11] += lnri
        acc[12] += didz
        acc[13] += lnrdidz
        acc[14] += err_ln
        acc[15] += didv
        acc[16] += Y
        acc[17] += ph1
        acc[18] += abs(cur)
        acc[19] += ext_prev
        acc[20] += vb
        acc[21] += amp1
        acc[22] += amp2
        acc[23] += sigma
        acc[24] += phi
        cnt += 1
        st[S_N] += 1.0
    if cnt > 0 and b < nb:
        for c in range(N_CH):
            out[b, c] = acc[c] / cnt
    return STATUS_OK, n_ticks


# linear loop: discrete plant (ending in a pure delay) under the PI law
L_KI = 0
L_WC = 1
L_DT = 2
L_SP = 3
L_RE_AMP = 4
L_RE_W = 5
L_RU_AMP = 6
L_RU_W = 7
L_UMIN = 8
L_UMAX = 9
N_LPARAMS = 10


@njit(cache=True)
def run_linear(n_ticks, prm, st, sos, zi, noise, out_u, out_y):
    """PI around a strictly causal plant; records controller output U and measured Y.

    st = [tick, integrator, previous error]. Y carries additive noise[k]
    when a noise array of matching length is given.
    """
    dt = prm[L_DT]
    ki = prm[L_KI]
    inv_wc = 1.0 / prm[L_WC]
    last = sos.shape[0] - 1
    nn = noise.size
    for k in range(n_ticks):
        t = st[0] * dt
        y = zi[last, 0]
        if nn == n_ticks:
            y += noise[k]
        e = prm[L_SP] - y + prm[L_RE_AMP] * np.sin(prm[L_RE_W] * t)
        i_new = st[1] + 0.5 * dt * (e + st[2])
        u = ki * (i_new + e * inv_wc)
        if u > prm[L_UMAX] or u < prm[L_UMIN]:
            u = min(max(ki * (st[1] + e * inv_wc), prm[L_UMIN]), prm[L_UMAX])
        else:
            st[1] = i_new
        st[2] = e
        ut = u + prm[L_RU_AMP] * np.sin(prm[L_RU_W] * t)
        _sos_step(sos, zi, 0, sos.shape[0], ut)
        out_u[k] = u
        out_y[k] = y
        st[0] += 1.0
    return 0
