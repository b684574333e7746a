"""Bundled absorber model: balances + boundary + properties + scaling.

AbsorberModel is the object the controllers, the zone-modification
pipeline and the harness share.  It owns the compiled parameter packs,
the steady-state solver and the state/input scaling (referenced to the
steady state at the center of the efficiency zone).
"""

from __future__ import annotations

import numpy as np

from . import kernels
from .column import (
    ColumnConfig,
    ColumnState,
    ModelError,
    Scaler,
    StreamBoundary,
    co2_flux_imbalance,
    efficiency,
    make_scale_reference,
    rhs,
)
from .properties import DefaultPropertyPackage, PropertyPackage

ZONE_CENTER_EFFICIENCY = 0.875  # scaling reference point


class SteadyStateError(ModelError):
    """Steady-state solve failed; carries the best residual reached."""

    def __init__(self, message, best_residual=None):
        super().__init__(message)
        self.best_residual = best_residual


class AbsorberModel:
    """Absorption column model with a fixed configuration and boundary."""

    def __init__(self, config: ColumnConfig | None = None,
                 boundary: StreamBoundary | None = None,
                 props: PropertyPackage | None = None,
                 dt: float = 1.0):
        self.config = config or ColumnConfig()
        self.boundary = boundary or StreamBoundary()
        self.props = props or DefaultPropertyPackage()
        if dt <= 0 or dt > 1.0:
            raise ModelError("integration step must lie in (0, 1] s for this column")
        self.dt = dt

        self._geom = np.array(
            [self.config.cross_section, self.config.stage_height,
             self.config.specific_area], dtype=np.float64)
        c_l_in = self.boundary.liquid_concentrations(self.props)
        c_g_in = self.boundary.gas_concentrations(self.props)
        self._bnd = np.concatenate([
            c_l_in, c_g_in,
            [self.boundary.liquid_inlet.temperature,
             self.boundary.gas_inlet.temperature],
        ]).astype(np.float64)
        self._prop = self.props.kernel_constants()
        if self._prop is not None:
            self._prop = np.asarray(self._prop, dtype=np.float64)
        self._zero_noise = np.zeros(self.n_states)
        self._scaler = None
        self._scale_ss = None

        # static residual scaling for the steady-state solver (phase totals)
        res = np.empty(self.n_states)
        grid = res.reshape(self.config.n_stages, 10)
        grid[:, 0:4] = self.props.liquid_molar_density
        grid[:, 4:8] = c_g_in.sum()
        grid[:, 8:10] = 300.0
        self._res_scale = res

    # -- basic evaluations -------------------------------------------------

    @property
    def n_states(self):
        return self.config.n_states

    @property
    def nominal_gas_flow(self):
        return self.boundary.gas_inlet.volumetric_flow

    def rhs(self, x, u, gas_flow_multiplier=1.0):
        """Flat-state derivative; mirrors column.rhs on the fast path."""
        if self._prop is not None:
            out = np.empty(self.n_states)
            kernels.deriv(np.asarray(x, dtype=np.float64), float(u),
                          gas_flow_multiplier * self.nominal_gas_flow,
                          self._bnd, self._geom, self._prop,
                          self._zero_noise, out)
            return out
        if gas_flow_multiplier != 1.0:
            from dataclasses import replace
            gi = replace(self.boundary.gas_inlet,
                         volumetric_flow=gas_flow_multiplier * self.nominal_gas_flow)
            bnd = StreamBoundary(gas_inlet=gi, liquid_inlet=self.boundary.liquid_inlet)
            return rhs(x, u, bnd, self.config, self.props)
        return rhs(x, u, self.boundary, self.config, self.props)

    def efficiency(self, x):
        return efficiency(x, self.boundary, self.props)

    def co2_flux_imbalance(self, x, u):
        return co2_flux_imbalance(x, u, self.boundary, self.props)

    # -- propagation -------------------------------------------------------

    def _substeps(self, span):
        n = int(round(span / self.dt))
        if n < 1 or abs(n * self.dt - span) > 1e-9 * max(span, 1.0):
            raise ModelError(f"dt={self.dt} must divide the span {span}")
        return n

    def step(self, x, u, span, gas_flow_multiplier=1.0, noise=None, clip=False):
        """Advance one span (plant or prediction step).

        noise, if given, is an additive state-derivative disturbance in
        physical units, held constant over the span.  Returns
        (x_end, n_clipped).
        """
        if self._prop is None:
            raise ModelError("plant stepping needs a kernel-compatible property package")
        w = self._zero_noise if noise is None else np.asarray(noise, dtype=np.float64)
        x_end, n_clip, ok = kernels.rk4_span(
            np.asarray(x, dtype=np.float64), float(u),
            gas_flow_multiplier * self.nominal_gas_flow,
            self._bnd, self._geom, self._prop, w,
            self._substeps(span), self.dt, clip)
        if not ok:
            raise ModelError("non-finite state during integration step")
        return x_end, n_clip

    def shoot(self, x0, inputs, delta):
        """Predicted states at sampling instants for per-interval inputs."""
        if self._prop is None:
            raise ModelError("shooting needs a kernel-compatible property package")
        states, ok = kernels.shoot(
            np.asarray(x0, dtype=np.float64),
            np.asarray(inputs, dtype=np.float64),
            self.nominal_gas_flow, self._bnd, self._geom, self._prop,
            self._substeps(delta), self.dt)
        if not ok:
            raise ModelError("non-finite state in shooting map")
        return states

    def shoot_tail(self, x_start, inputs_tail, delta):
        states, ok = kernels.shoot_tail(
            np.asarray(x_start, dtype=np.float64),
            np.asarray(inputs_tail, dtype=np.float64),
            self.nominal_gas_flow, self._bnd, self._geom, self._prop,
            self._substeps(delta), self.dt)
        if not ok:
            raise ModelError("non-finite state in shooting map")
        return states

    # -- steady states -----------------------------------------------------

    def initial_state(self):
        """Column filled with the two inlet streams (cold start)."""
        ns = self.config.n_stages
        c_l = np.tile(self.boundary.liquid_concentrations(self.props), (ns, 1))
        c_g = np.tile(self.boundary.gas_concentrations(self.props), (ns, 1))
        t_l = np.full(ns, self.boundary.liquid_inlet.temperature)
        t_g = np.full(ns, self.boundary.gas_inlet.temperature)
        return ColumnState(c_l, c_g, t_l, t_g).flatten()

    def _scaled_residual(self, x, u):
        return np.max(np.abs(self.rhs(x, u) / self._res_scale))

    def steady_state(self, u, x0=None, tol=1e-8, max_newton=60):
        """Solve rhs(x, u) = 0 by damped Newton with integration fallback.

        The residual is scaled by per-coordinate magnitude references
        (phase total concentrations, 300 K) before the infinity norm.
        """
        if u < 0:
            raise ModelError("liquid flow must be non-negative")
        # settle time: a few liquid residence times (the slow phase)
        column_volume = self.config.cross_section * self.config.packing_height
        t_settle = 600.0 * np.ceil(5.0 * column_volume / max(u, 1e-6) / 600.0)
        x = np.asarray(x0, dtype=float).copy() if x0 is not None else self.initial_state()
        if x0 is None:
            x, _ = self.step(x, u, max(t_settle, 18000.0))
        best = np.inf
        fallbacks = 0
        recent = []
        k = 0
        while k < max_newton:
            r = self.rhs(x, u)
            res = np.max(np.abs(r / self._res_scale))
            best = min(best, res)
            if res <= tol:
                return x
            recent.append(res)
            stalled = len(recent) >= 4 and recent[-1] > 0.3 * recent[-4]
            jac = self._state_jacobian(x, u)
            try:
                dx = np.linalg.solve(jac, -r)
            except np.linalg.LinAlgError:
                dx = np.linalg.lstsq(jac, -r, rcond=None)[0]
            lam = 1.0
            improved = False
            for _ in range(12):
                x_try = x + lam * dx
                if np.all(np.isfinite(x_try)):
                    r_try = self._scaled_residual(x_try, u)
                    if r_try < res:
                        x = x_try
                        improved = True
                        break
                lam *= 0.5
            if not improved or stalled:
                if fallbacks >= 4:
                    raise SteadyStateError(
                        f"steady state did not converge (residual {best:.3e})",
                        best_residual=best)
                x, _ = self.step(x, u, max(t_settle, 36000.0))
                fallbacks += 1
                recent = []
            k += 1
        raise SteadyStateError(
            f"steady state did not converge in {max_newton} iterations "
            f"(residual {best:.3e})", best_residual=best)

    def _state_jacobian(self, x, u):
        n = x.size
        jac = np.empty((n, n))
        f0 = self.rhs(x, u)
        for i in range(n):
            h = 1e-7 * max(abs(x[i]), self._res_scale[i] * 1e-3)
            xp = x.copy()
            xp[i] += h
            jac[:, i] = (self.rhs(xp, u) - f0) / h
        return jac

    def steady_efficiency(self, u, x0=None):
        return self.efficiency(self.steady_state(u, x0=x0))

    def solve_flow_for_output(self, y_target, bracket=(2e-5, 0.05), tol=1e-7,
                              ss_tol=1e-11):
        """Liquid flow whose steady efficiency equals y_target (bisection).

        Relies on the steady map u -> y being monotone increasing over the
        operating range.  The inner steady-state solves run well below the
        output tolerance so the bisection sees a clean monotone function.
        Returns (u, x_ss).
        """
        lo, hi = bracket
        x_lo = self.steady_state(lo, tol=ss_tol)
        y_lo = self.efficiency(x_lo)
        x_hi = self.steady_state(hi, x0=x_lo, tol=ss_tol)
        y_hi = self.efficiency(x_hi)
        if not (y_lo < y_target < y_hi):
            raise ModelError(
                f"target efficiency {y_target:.4f} outside reachable range "
                f"[{y_lo:.4f}, {y_hi:.4f}] for flows {bracket}")
        x_guess = x_lo
        for _ in range(80):
            mid = 0.5 * (lo + hi)
            x_mid = self.steady_state(mid, x0=x_guess, tol=ss_tol)
            y_mid = self.efficiency(x_mid)
            x_guess = x_mid
            if abs(y_mid - y_target) <= tol:
                return mid, x_mid
            if y_mid < y_target:
                lo = mid
            else:
                hi = mid
        raise ModelError(f"flow bisection stalled targeting y={y_target}")

    # -- scaling -----------------------------------------------------------

    def scaler(self) -> Scaler:
        """State/input scaling at the zone-center (y = 0.875) steady state."""
        if self._scaler is None:
            u_c, x_c = self.solve_flow_for_output(ZONE_CENTER_EFFICIENCY)
            x_scale = make_scale_reference(x_c, self.boundary, self.props)
            self._scaler = Scaler(x_scale=x_scale, u_scale=u_c)
            self._scale_ss = x_c
        return self._scaler

    def center_steady_state(self):
        """(u, x) at the scaling reference: steady efficiency 0.875."""
        self.scaler()
        return self._scaler.u_scale, self._scale_ss.copy()

    def scaled_rhs(self, x_hat, u_hat):
        """Derivative in scaled coordinates (for linearization)."""
        s = self.scaler()
        return self.rhs(s.unscale(x_hat), s.unscale_u(u_hat)) / s.x_scale

    def scaled_efficiency(self, x_hat):
        return self.efficiency(self.scaler().unscale(x_hat))
