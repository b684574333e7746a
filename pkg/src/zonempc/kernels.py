"""Compiled fast paths for the absorber balances and RK4 propagation.

These mirror `column.rhs` exactly for property packages that can export a
flat constants vector (see properties.kernel_constants).  The closed-loop
controllers shoot thousands of 600 s horizons per scenario, which is only
affordable jitted.

Parameter packing:
  geom = [cross_section, stage_height, specific_area]
  bnd  = [c_l_in(4), c_g_in(4), T_l_in, T_g_in]
  prop = [k_g, k_l, k2, D_co2, He_ref, He_slope, T_ref, dH_abs,
          h2o_flag, mea_flag, k_g_h2o, He_h2o, cp_l(4), cp_g(4)]
"""

from __future__ import annotations

import numpy as np
from numba import njit

STAGE_WIDTH = 10


@njit(cache=True)
def deriv(x, u, fg, bnd, geom, prop, w, out):
    """Flat-state derivative plus additive disturbance w (physical units)."""
    ns = x.size // STAGE_WIDTH
    a_l = (u / geom[0]) / geom[1]
    a_g = (fg / geom[0]) / geom[1]
    area = geom[2]

    k_g = prop[0]
    k_l = prop[1]
    k2 = prop[2]
    d_co2 = prop[3]
    he_ref = prop[4]
    he_slope = prop[5]
    t_ref = prop[6]
    dh_abs = prop[7]
    h2o_on = prop[8] > 0.5
    mea_on = prop[9] > 0.5
    k_g_h2o = prop[10]
    he_h2o = prop[11]

    for j in range(ns):
        base = j * STAGE_WIDTH
        t_l = x[base + 8]
        t_g = x[base + 9]

        # interfacial fluxes (positive gas -> liquid)
        n0 = 0.0
        n2 = 0.0
        n3 = 0.0
        c_mea = x[base + 3]
        e_kl = np.sqrt(max(k2 * c_mea * d_co2, 0.0))
        if k_g > 0.0 and e_kl > 0.0:
            he = he_ref * np.exp(-he_slope * (t_l - t_ref))
            n0 = (he * x[base + 4] - x[base + 0]) / (1.0 / e_kl + he / k_g)
        if h2o_on:
            n2 = k_g_h2o * (x[base + 6] - x[base + 2] / he_h2o)
        if mea_on:
            n3 = k_g_h2o * (x[base + 7] - x[base + 3] / he_h2o)

        sum_cg_cp = 0.0
        sum_cl_cp = 0.0
        for i in range(4):
            sum_cl_cp += x[base + i] * prop[12 + i]
            sum_cg_cp += x[base + 4 + i] * prop[16 + i]
        h_gl = k_g * sum_cg_cp
        q_g = h_gl * (t_l - t_g)
        q_l = h_gl * (t_g - t_l) + dh_abs * n0

        # upstream values: liquid falls (from stage above), gas rises
        if j == ns - 1:
            ul0, ul1, ul2, ul3 = bnd[0], bnd[1], bnd[2], bnd[3]
            t_up_l = bnd[8]
        else:
            ub = base + STAGE_WIDTH
            ul0, ul1, ul2, ul3 = x[ub + 0], x[ub + 1], x[ub + 2], x[ub + 3]
            t_up_l = x[ub + 8]
        if j == 0:
            ug0, ug1, ug2, ug3 = bnd[4], bnd[5], bnd[6], bnd[7]
            t_up_g = bnd[9]
        else:
            db = base - STAGE_WIDTH
            ug0, ug1, ug2, ug3 = x[db + 4], x[db + 5], x[db + 6], x[db + 7]
            t_up_g = x[db + 9]

        out[base + 0] = a_l * (ul0 - x[base + 0]) + n0 * area + w[base + 0]
        out[base + 1] = a_l * (ul1 - x[base + 1]) + w[base + 1]
        out[base + 2] = a_l * (ul2 - x[base + 2]) + n2 * area + w[base + 2]
        out[base + 3] = a_l * (ul3 - x[base + 3]) + n3 * area + w[base + 3]
        out[base + 4] = a_g * (ug0 - x[base + 4]) - n0 * area + w[base + 4]
        out[base + 5] = a_g * (ug1 - x[base + 5]) + w[base + 5]
        out[base + 6] = a_g * (ug2 - x[base + 6]) - n2 * area + w[base + 6]
        out[base + 7] = a_g * (ug3 - x[base + 7]) - n3 * area + w[base + 7]
        out[base + 8] = a_l * (t_up_l - t_l) + q_l * area / sum_cl_cp + w[base + 8]
        out[base + 9] = a_g * (t_up_g - t_g) + q_g * area / sum_cg_cp + w[base + 9]


@njit(cache=True)
def rk4_span(x0, u, fg, bnd, geom, prop, w, n_steps, dt, clip):
    """Propagate n_steps classical RK4 steps.

    Returns (x_end, n_clipped, ok).  With clip=True, negative
    concentrations are zeroed after each step (plant-side guard; the
    controller-side predictions never clip so the map stays smooth).
    """
    nx = x0.size
    ns = nx // STAGE_WIDTH
    x = x0.copy()
    k1 = np.empty(nx)
    k2 = np.empty(nx)
    k3 = np.empty(nx)
    k4 = np.empty(nx)
    xt = np.empty(nx)
    n_clipped = 0
    for _ in range(n_steps):
        deriv(x, u, fg, bnd, geom, prop, w, k1)
        for i in range(nx):
            xt[i] = x[i] + 0.5 * dt * k1[i]
        deriv(xt, u, fg, bnd, geom, prop, w, k2)
        for i in range(nx):
            xt[i] = x[i] + 0.5 * dt * k2[i]
        deriv(xt, u, fg, bnd, geom, prop, w, k3)
        for i in range(nx):
            xt[i] = x[i] + dt * k3[i]
        deriv(xt, u, fg, bnd, geom, prop, w, k4)
        for i in range(nx):
            x[i] = x[i] + (dt / 6.0) * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
        if clip:
            for j in range(ns):
                base = j * STAGE_WIDTH
                for i in range(8):
                    if x[base + i] < 0.0:
                        x[base + i] = 0.0
                        n_clipped += 1
    ok = True
    for i in range(nx):
        if not np.isfinite(x[i]):
            ok = False
    return x, n_clipped, ok


@njit(cache=True)
def shoot(x0, v, fg, bnd, geom, prop, n_sub, dt):
    """States at the sampling instants under piecewise-constant inputs.

    v holds one input per interval; the returned array has len(v)+1 rows,
    row 0 being x0.  No disturbance, no clipping (smooth shooting map).
    """
    n_int = v.size
    nx = x0.size
    states = np.empty((n_int + 1, nx))
    states[0] = x0
    w = np.zeros(nx)
    x = x0.copy()
    ok = True
    for k in range(n_int):
        x, _, step_ok = rk4_span(x, v[k], fg, bnd, geom, prop, w, n_sub, dt, False)
        if not step_ok:
            ok = False
        states[k + 1] = x
    return states, ok


@njit(cache=True)
def shoot_tail(x_start, v_tail, fg, bnd, geom, prop, n_sub, dt):
    """Like shoot() but starting mid-horizon (for truncated FD columns)."""
    return shoot(x_start, v_tail, fg, bnd, geom, prop, n_sub, dt)
