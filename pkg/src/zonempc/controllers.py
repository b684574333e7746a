"""Receding-horizon zone-tracking EMPC controllers.

Two variants share one single-shooting transcription:

* NZEMPC tracks the original output interval; the interval slack of the
  zone penalty is eliminated in closed form, so the decisions are just
  the N piecewise-constant inputs.
* RZEMPC tracks an ellipsoidal control-invariant set in (scaled) state
  space with one scalar slack per interval.

Both minimize the horizon-average stage cost (a positive rescaling of
the integrated cost, so the minimizer is unchanged but tolerances are
meaningful at O(1)).  The quadrature anchors each interval at its left
endpoint, matching the piecewise-constant inputs.  Input sensitivities
come from central differences with tail-only re-simulation (perturbing
input j cannot change the trajectory before t_j); the same pass yields a
Gauss-Newton seed for the solver's BFGS updates.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .model import AbsorberModel
from .numerics import Ellipsoid
from .properties import CO2
from .sqp import NlpProblem, OcpSolution, solve_nlp


@dataclass(frozen=True)
class ZoneSpec:
    """Output target interval and the zone-tracking weight."""

    lower: float = 0.85
    upper: float = 0.90
    c1: float = 10000.0

    def __post_init__(self):
        if not (0.0 <= self.lower < self.upper <= 1.0):
            raise ValueError("zone must satisfy 0 <= lower < upper <= 1")
        if self.c1 < 0:
            raise ValueError("zone weight must be non-negative")


def zone_distance(y, zone: ZoneSpec):
    """Distance of y to the interval [lower, upper]; 0 inside."""
    y = np.asarray(y, dtype=float)
    return np.maximum.reduce([y - zone.upper, zone.lower - y, np.zeros_like(y)])


def zone_penalty(y, zone: ZoneSpec):
    """Closed form of the inner slack minimization: c1 * dist(y, zone)^2."""
    d = zone_distance(y, zone)
    return zone.c1 * d * d


def zone_penalty_gradient(y, zone: ZoneSpec):
    y = np.asarray(y, dtype=float)
    out = np.zeros_like(y)
    above = y > zone.upper
    below = y < zone.lower
    out[above] = 2.0 * zone.c1 * (y[above] - zone.upper)
    out[below] = 2.0 * zone.c1 * (y[below] - zone.lower)
    return out


def stage_cost(y, zone: ZoneSpec):
    """Economic term plus zone penalty: -y + c1 * dist(y, zone)^2."""
    return -np.asarray(y, dtype=float) + zone_penalty(y, zone)


@dataclass(frozen=True)
class ControllerParams:
    horizon: int = 10
    sampling: float = 600.0        # s
    input_lower: float = 0.2       # scaled liquid flow bounds
    input_upper: float = 3.0
    output_lower: float = 0.0
    output_upper: float = 1.0
    max_sqp_iter: int = 40
    kkt_tol: float = 2e-5          # shooting-map FD noise floor
    accept_kkt: float = 1e-3       # apply-anyway threshold on "max-iter"
    max_step: float = 0.5          # componentwise SQP trust box (scaled units)

    def __post_init__(self):
        if self.horizon < 1 or self.sampling <= 0:
            raise ValueError("horizon must be >= 1 and sampling positive")
        if not self.input_lower < self.input_upper:
            raise ValueError("empty input set")


class _FdPass:
    """Sampled trajectory plus its sensitivities along the inputs."""

    def __init__(self, states, dstates):
        self.states = states      # (N+1, nx)
        self.dstates = dstates    # (N, N+1, nx): d states / d v_j


class _ShootingOcp:
    """Shared single-shooting machinery (simulation, outputs, FD)."""

    FD_STEP = 3e-7

    def __init__(self, model: AbsorberModel, params: ControllerParams):
        self.model = model
        self.params = params
        self.scaler = model.scaler()
        ns = model.config.n_stages
        self._top_gas_co2 = (ns - 1) * 10 + 4
        self._c_in = model.boundary.gas_concentrations(model.props)[CO2]
        # instrumentation: every gas flow the controller's model ever used
        self.gas_flows_seen = set()

    def outputs(self, states):
        """Efficiency at each sampled state (consistent with the output map)."""
        return 1.0 - states[:, self._top_gas_co2] / self._c_in

    def output_jacobian(self, fd: _FdPass):
        """dy_i/dv_j from the state sensitivities, shape (N+1, N)."""
        return -fd.dstates[:, :, self._top_gas_co2].T / self._c_in

    def simulate(self, x0, v_hat):
        self.gas_flows_seen.add(self.model.nominal_gas_flow)
        return self.model.shoot(x0, v_hat * self.scaler.u_scale,
                                self.params.sampling)

    def _simulate_tail(self, x_start, v_hat_tail):
        self.gas_flows_seen.add(self.model.nominal_gas_flow)
        return self.model.shoot_tail(x_start, v_hat_tail * self.scaler.u_scale,
                                     self.params.sampling)

    def fd_pass(self, x0, v_hat) -> _FdPass:
        """Central-difference state sensitivities, tail re-simulation only.

        Perturbing v_j leaves samples 0..j untouched, so column j costs
        two tail simulations from the stored base state at t_j.
        """
        n = v_hat.size
        base = self.simulate(x0, v_hat)
        dstates = np.zeros((n, base.shape[0], base.shape[1]))
        h = self.FD_STEP
        for j in range(n):
            tails = []
            for sign in (1.0, -1.0):
                v_tail = v_hat[j:].copy()
                v_tail[0] += sign * h
                tails.append(self._simulate_tail(base[j], v_tail))
            dstates[j, j + 1:] = (tails[0][1:] - tails[1][1:]) / (2 * h)
        return _FdPass(base, dstates)


class _ZoneEmpcBase:
    """Warm-start bookkeeping and the solve/fallback protocol."""

    def __init__(self, model: AbsorberModel, params: ControllerParams):
        self.model = model
        self.params = params
        self.ocp = _ShootingOcp(model, params)
        self._prev_inputs = None   # scaled, length N

    def _input_guess(self):
        n = self.params.horizon
        if self._prev_inputs is None:
            return np.ones(n)
        shifted = np.roll(self._prev_inputs, -1)
        shifted[-1] = shifted[-2] if n > 1 else shifted[-1]
        return shifted

    def fallback_input(self):
        """Shift-by-one fallback when a solve is rejected (physical units)."""
        v = self._input_guess()
        return float(np.clip(v[0], self.params.input_lower,
                             self.params.input_upper) * self.ocp.scaler.u_scale)

    def solve(self, x_k) -> OcpSolution:
        raise NotImplementedError

    def accept(self, sol: OcpSolution):
        return sol.success or sol.kkt_residual < self.params.accept_kkt


class NzempcController(_ZoneEmpcBase):
    """EMPC tracking the original output zone (closed-form zone slack)."""

    # curvature band: samples this close to a zone edge still contribute
    # penalty curvature to the Hessian seed (the stage-cost optimum sits
    # 1/(2 c1) above the upper edge, i.e. inside this band)
    CREASE_BAND = 2e-4

    def __init__(self, model, params: ControllerParams | None = None,
                 zone: ZoneSpec | None = None):
        super().__init__(model, params or ControllerParams())
        self.zone = zone or ZoneSpec()
        self._cache = None

    def _objective(self, y):
        n = self.params.horizon
        return float(np.mean(stage_cost(y[:n], self.zone)))

    def _constraints(self, y):
        return np.concatenate([
            self.params.output_lower - y[1:],
            y[1:] - self.params.output_upper,
        ])

    def _eval_fc(self, x_k, z):
        y = self.ocp.outputs(self.ocp.simulate(x_k, z))
        return self._objective(y), self._constraints(y)

    def _eval_all(self, x_k, z):
        n = self.params.horizon
        fd = self.ocp.fd_pass(x_k, z)
        y = self.ocp.outputs(fd.states)
        dy = self.ocp.output_jacobian(fd)
        f = self._objective(y)
        c = self._constraints(y)
        lgrad = -1.0 + zone_penalty_gradient(y[:n], self.zone)
        g = (lgrad @ dy[:n]) / n
        jac = np.vstack([-dy[1:], dy[1:]])
        self._cache = (y, dy)
        return f, c, g, jac

    def _hessian_guess(self, z):
        n = self.params.horizon
        y, dy = self._cache
        b0 = 1e-2 * np.eye(n)
        for i in range(n):
            near_edge = (y[i] > self.zone.upper - self.CREASE_BAND
                         or y[i] < self.zone.lower + self.CREASE_BAND)
            if near_edge:
                b0 += (2.0 * self.zone.c1 / n) * np.outer(dy[i], dy[i])
        return b0

    def solve(self, x_k) -> OcpSolution:
        n = self.params.horizon
        x_k = np.asarray(x_k, dtype=float)
        guess = np.clip(self._input_guess(), self.params.input_lower,
                        self.params.input_upper)
        problem = NlpProblem(
            n=n, x0=guess,
            eval_fc=lambda z: self._eval_fc(x_k, z),
            eval_all=lambda z: self._eval_all(x_k, z),
            hessian_guess=self._hessian_guess,
            lower=np.full(n, self.params.input_lower),
            upper=np.full(n, self.params.input_upper),
            name="nzempc")
        sol = solve_nlp(problem, max_iter=self.params.max_sqp_iter,
                        kkt_tol=self.params.kkt_tol, max_step=self.params.max_step)
        states = self.ocp.simulate(x_k, sol.z)
        sol.inputs = sol.z * self.ocp.scaler.u_scale
        sol.slacks = np.zeros(n)
        sol.predicted_states = states
        sol.predicted_outputs = self.ocp.outputs(states)
        if self.accept(sol):
            self._prev_inputs = sol.z.copy()
        return sol


class RzempcController(_ZoneEmpcBase):
    """EMPC tracking an ellipsoidal invariant set with one slack/interval.

    The set lives in scaled state coordinates; the constraint per
    interval i is (x_i - x_s)^T M (x_i - x_s) <= level + s_i with
    s_i >= 0, and the zone term of the cost is c1 * s_i^2.
    """

    def __init__(self, model, ellipsoid: Ellipsoid,
                 params: ControllerParams | None = None,
                 zone: ZoneSpec | None = None):
        super().__init__(model, params or ControllerParams())
        self.ellipsoid = ellipsoid
        self.zone = zone or ZoneSpec()  # used only for logging stage costs
        self._cache = None

    def _quad_forms(self, states):
        n = self.params.horizon
        scaled = states[:n] / self.ocp.scaler.x_scale
        d = scaled - self.ellipsoid.center
        return np.einsum("ij,jk,ik->i", d, self.ellipsoid.m, d), d

    def _objective(self, y, s):
        n = self.params.horizon
        return float(np.mean(-y[:n]) + self.zone.c1 * np.mean(s * s))

    def _constraints(self, y, q, s):
        return np.concatenate([
            q - self.ellipsoid.level - s,
            self.params.output_lower - y[1:],
            y[1:] - self.params.output_upper,
        ])

    def _eval_fc(self, x_k, z):
        n = self.params.horizon
        v, s = z[:n], z[n:]
        states = self.ocp.simulate(x_k, v)
        y = self.ocp.outputs(states)
        q, _ = self._quad_forms(states)
        return self._objective(y, s), self._constraints(y, q, s)

    def _eval_all(self, x_k, z):
        n = self.params.horizon
        v, s = z[:n], z[n:]
        fd = self.ocp.fd_pass(x_k, v)
        y = self.ocp.outputs(fd.states)
        dy = self.ocp.output_jacobian(fd)
        q, d = self._quad_forms(fd.states)
        # dq_i/dv_j = 2 (M d_i) . (d x_i/d v_j)/x_scale
        md = d @ self.ellipsoid.m                        # (N, nx)
        dscaled = fd.dstates[:, :n, :] / self.ocp.scaler.x_scale
        dq = 2.0 * np.einsum("ik,jik->ij", md, dscaled)  # (sample, input)
        f = self._objective(y, s)
        c = self._constraints(y, q, s)
        g = np.concatenate([-(np.sum(dy[:n], axis=0)) / n,
                            2.0 * self.zone.c1 * s / n])
        jac = np.zeros((c.size, 2 * n))
        jac[:n, :n] = dq
        jac[:n, n:] = -np.eye(n)
        jac[n:, :n] = np.vstack([-dy[1:], dy[1:]])
        self._cache = (q, s.copy(), dscaled)
        return f, c, g, jac

    def _hessian_guess(self, z):
        """Gauss-Newton Lagrangian curvature of the active set constraints.

        With s_i > 0 the stationarity in s gives the multiplier
        lambda_i = 2 c1 s_i / N, and the constraint curvature is
        2 J_i^T M J_i for the state sensitivity J_i.
        """
        n = self.params.horizon
        q, s, dscaled = self._cache
        b0 = np.zeros((2 * n, 2 * n))
        b0[:n, :n] = 1e-2 * np.eye(n)
        b0[n:, n:] = (2.0 * self.zone.c1 / n) * np.eye(n)
        for i in range(n):
            s_eff = max(s[i], q[i] - self.ellipsoid.level, 0.0)
            lam_i = 2.0 * self.zone.c1 * s_eff / n
            if lam_i > 0:
                j_i = dscaled[:, i, :].T          # (nx, N)
                b0[:n, :n] += lam_i * 2.0 * (j_i.T @ self.ellipsoid.m @ j_i)
        return b0

    def solve(self, x_k) -> OcpSolution:
        n = self.params.horizon
        x_k = np.asarray(x_k, dtype=float)
        v_guess = np.clip(self._input_guess(), self.params.input_lower,
                          self.params.input_upper)
        base = self.ocp.simulate(x_k, v_guess)
        q0, _ = self._quad_forms(base)
        s_guess = np.maximum(q0 - self.ellipsoid.level, 0.0)
        problem = NlpProblem(
            n=2 * n, x0=np.concatenate([v_guess, s_guess]),
            eval_fc=lambda z: self._eval_fc(x_k, z),
            eval_all=lambda z: self._eval_all(x_k, z),
            hessian_guess=self._hessian_guess,
            lower=np.concatenate([np.full(n, self.params.input_lower), np.zeros(n)]),
            upper=np.concatenate([np.full(n, self.params.input_upper),
                                  np.full(n, np.inf)]),
            name="rzempc")
        sol = solve_nlp(problem, max_iter=self.params.max_sqp_iter,
                        kkt_tol=self.params.kkt_tol, max_step=self.params.max_step)
        v, s = sol.z[:n], sol.z[n:]
        states = self.ocp.simulate(x_k, v)
        sol.inputs = v * self.ocp.scaler.u_scale
        sol.slacks = s.copy()
        sol.predicted_states = states
        sol.predicted_outputs = self.ocp.outputs(states)
        if self.accept(sol):
            self._prev_inputs = v.copy()
        return sol


def validate_solution(controller, sol: OcpSolution, tol=1e-6):
    """Recompute constraint satisfaction of an accepted OCP solution.

    Checks input bounds, predicted outputs within the output set and,
    for RZEMPC, the quadratic-form constraint at the reported slacks.
    Returns the worst violation found.
    """
    p = controller.params
    u_hat = sol.inputs / controller.ocp.scaler.u_scale
    worst = max(float(np.max(p.input_lower - u_hat, initial=0.0)),
                float(np.max(u_hat - p.input_upper, initial=0.0)))
    states = controller.ocp.simulate(sol.predicted_states[0], u_hat)
    y = controller.ocp.outputs(states)
    worst = max(worst, float(np.max(p.output_lower - y[1:], initial=0.0)),
                float(np.max(y[1:] - p.output_upper, initial=0.0)))
    if isinstance(controller, RzempcController):
        q, _ = controller._quad_forms(states)
        worst = max(worst, float(np.max(
            q - controller.ellipsoid.level - sol.slacks, initial=0.0)))
    if worst > tol:
        raise RuntimeError(f"accepted solution violates constraints by {worst:.3e}")
    return worst


@dataclass
class StepRecord:
    time: float
    output: float
    applied_input: float
    cost: float
    slack: float
    fallback: bool
    clipped: int
    solver_status: str
    kkt_residual: float


def receding_horizon_step(controller, plant_state, noise=None,
                          gas_flow_multiplier=1.0, zone: ZoneSpec | None = None):
    """One closed-loop step: solve, apply the first input, advance the plant.

    noise is an additive state-derivative disturbance in physical units
    held constant over the sampling interval (drawn by the caller).  The
    plant step may clip grazing-negative concentrations; the count is
    logged in the record.  Returns (u, next_state, StepRecord).
    """
    zone = zone or getattr(controller, "zone", ZoneSpec())
    model = controller.model
    x = np.asarray(plant_state, dtype=float)
    sol = controller.solve(x)
    fallback = not controller.accept(sol)
    if fallback:
        u = controller.fallback_input()
        slack = np.nan
    else:
        u = float(sol.inputs[0])
        slack = float(sol.slacks[0])
    y = model.efficiency(x)
    x_next, clipped = model.step(x, u, controller.params.sampling,
                                 gas_flow_multiplier=gas_flow_multiplier,
                                 noise=noise, clip=True)
    record = StepRecord(
        time=np.nan, output=float(y), applied_input=u,
        cost=float(stage_cost(y, zone)), slack=slack, fallback=fallback,
        clipped=int(clipped), solver_status=sol.status,
        kkt_residual=float(sol.kkt_residual))
    return u, x_next, record
