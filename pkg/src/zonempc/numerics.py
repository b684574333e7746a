"""Shared numerical kernels: fixed-step RK4, finite-difference
linearization, Lyapunov solve, ellipsoids and the trace-maximizing
invariance LMI."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.linalg

HURWITZ_TOL = -1e-9


class NumericsError(RuntimeError):
    pass


class IntegrationError(NumericsError):
    """Non-finite state during integration; carries the time stamp."""

    def __init__(self, message, time=None):
        super().__init__(message)
        self.time = time


def integrate(rhs, x0, u, t_span, dt):
    """Classical RK4 with a fixed step over t_span = (t0, t1).

    rhs(x, u_value) gives the derivative; u is a constant or a callable
    of time (piecewise-constant inputs).  dt must divide the span.
    Returns (times, states) including both endpoints.
    """
    t0, t1 = float(t_span[0]), float(t_span[1])
    span = t1 - t0
    if dt <= 0:
        raise NumericsError("dt must be positive")
    n = int(round(span / dt))
    if n < 1 or abs(n * dt - span) > 1e-9 * max(abs(span), 1.0):
        raise NumericsError(f"dt={dt} must divide the time span {span}")
    u_of = u if callable(u) else (lambda t: u)
    x = np.array(x0, dtype=float)
    times = t0 + dt * np.arange(n + 1)
    states = np.empty((n + 1, x.size))
    states[0] = x
    for k in range(n):
        t = times[k]
        uk = u_of(t)
        k1 = np.asarray(rhs(x, uk))
        k2 = np.asarray(rhs(x + 0.5 * dt * k1, uk))
        k3 = np.asarray(rhs(x + 0.5 * dt * k2, uk))
        k4 = np.asarray(rhs(x + dt * k3, uk))
        x = x + (dt / 6.0) * (k1 + 2 * k2 + 2 * k3 + k4)
        if not np.all(np.isfinite(x)):
            raise IntegrationError(f"non-finite state at t={times[k + 1]:.6g}",
                                   time=times[k + 1])
        states[k + 1] = x
    return times, states


@dataclass(frozen=True)
class LinearModel:
    """dx/dt = A (x - x_s) + B (u - u_s) in the coordinates of f."""

    a: np.ndarray
    b: np.ndarray
    x_s: np.ndarray
    u_s: float

    def __post_init__(self):
        n = self.x_s.size
        if self.a.shape != (n, n) or self.b.shape != (n, 1):
            raise NumericsError("linear model dimensions inconsistent with the state")
        if not (np.all(np.isfinite(self.a)) and np.all(np.isfinite(self.b))):
            raise NumericsError("linear model entries must be finite")


def linearize(f, x_s, u_s) -> LinearModel:
    """Central finite differences of f(x, u) at (x_s, u_s).

    Per-coordinate steps h_i = max(1e-6, 1e-6*|x_s,i|); intended for
    already-scaled variables.
    """
    x_s = np.asarray(x_s, dtype=float)
    n = x_s.size
    a = np.empty((n, n))
    for i in range(n):
        h = max(1e-6, 1e-6 * abs(x_s[i]))
        xp = x_s.copy()
        xm = x_s.copy()
        xp[i] += h
        xm[i] -= h
        col = (np.asarray(f(xp, u_s)) - np.asarray(f(xm, u_s))) / (2 * h)
        if not np.all(np.isfinite(col)):
            raise NumericsError(f"non-finite Jacobian entries in state coordinate {i}")
        a[:, i] = col
    hu = max(1e-6, 1e-6 * abs(u_s))
    b = (np.asarray(f(x_s, u_s + hu)) - np.asarray(f(x_s, u_s - hu))) / (2 * hu)
    if not np.all(np.isfinite(b)):
        raise NumericsError("non-finite Jacobian entries in the input direction")
    return LinearModel(a=a, b=b.reshape(n, 1), x_s=x_s.copy(), u_s=float(u_s))


def is_hurwitz(a) -> bool:
    """True iff every eigenvalue real part is below -1e-9."""
    a = np.asarray(a, dtype=float)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise NumericsError("is_hurwitz needs a square matrix")
    try:
        eigs = np.linalg.eigvals(a)
    except np.linalg.LinAlgError as exc:
        raise NumericsError(f"eigensolver failed: {exc}") from exc
    return bool(np.max(eigs.real) < HURWITZ_TOL)


def solve_lyapunov(a, q):
    """Solve A P + P A^T + Q = 0 for Hurwitz A and symmetric PD Q.

    Schur-based dense solve (Bartels-Stewart via scipy); the residual is
    verified against 1e-8 * ||Q||_F before returning.
    """
    a = np.asarray(a, dtype=float)
    q = np.asarray(q, dtype=float)
    if not is_hurwitz(a):
        raise NumericsError("solve_lyapunov requires a Hurwitz matrix")
    p = scipy.linalg.solve_continuous_lyapunov(a, -q)
    p = 0.5 * (p + p.T)
    q_norm = np.linalg.norm(q)
    res = np.linalg.norm(a @ p + p @ a.T + q)
    if res > 1e-8 * q_norm:
        raise NumericsError(f"Lyapunov residual {res:.3e} exceeds 1e-8*||Q||_F")
    if np.min(np.linalg.eigvalsh(p)) <= 0:
        raise NumericsError("Lyapunov solution is not positive definite")
    return p


@dataclass(frozen=True)
class Ellipsoid:
    """{x : (x - center)^T M (x - center) <= level} with M symmetric PD."""

    center: np.ndarray
    m: np.ndarray
    level: float

    def __post_init__(self):
        m = self.m
        if np.linalg.norm(m - m.T) > 1e-10 * max(np.linalg.norm(m), 1.0):
            raise NumericsError("ellipsoid shape matrix must be symmetric")
        if np.min(np.linalg.eigvalsh(0.5 * (m + m.T))) <= 0:
            raise NumericsError("ellipsoid shape matrix must be positive definite")
        if self.level <= 0:
            raise NumericsError("ellipsoid level must be positive")

    def quadratic_form(self, x):
        d = np.asarray(x, dtype=float) - self.center
        return float(d @ self.m @ d)

    def contains(self, x):
        return self.quadratic_form(x) <= self.level

    def support_halfwidth(self, g):
        """max of g^T (x - center) over the set: sqrt(level * g^T M^-1 g)."""
        g = np.asarray(g, dtype=float)
        z = np.linalg.solve(self.m, g)
        return float(np.sqrt(self.level * max(g @ z, 0.0)))

    def sample_boundary(self, n_points, rng):
        """Points exactly on the level set, uniform in shape-direction."""
        n = self.center.size
        chol = np.linalg.cholesky(self.m)  # M = L L^T
        z = rng.standard_normal((n_points, n))
        z /= np.linalg.norm(z, axis=1, keepdims=True)
        # x = center + sqrt(level) * L^{-T} z  puts x on the boundary
        offs = scipy.linalg.solve_triangular(chol.T, z.T, lower=False).T
        return self.center + np.sqrt(self.level) * offs


class SdpError(NumericsError):
    pass


def solve_invariance_sdp(a, b, u_max, solvers=("CLARABEL", "SCS", "CVXOPT")):
    """Trace-maximizing ellipsoidal control-invariant set under |u| <= u_max.

    Solves  max trace(P)  s.t.  A P + P A^T + B Y + Y^T B^T < 0  and
    [[P, Y^T], [Y, u_max^2 I]] >= 0.  The invariant set is
    {x : x^T P^-1 x <= 1} with feedback K = Y P^-1.

    Feasibility is certified post-hoc by eigenvalue checks (strict LMI
    below -1e-9, Schur block above -1e-9); failing certificates raise.
    Returns (P, Y).
    """
    import cvxpy as cp

    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if b.ndim == 1:
        b = b.reshape(-1, 1)
    n = a.shape[0]
    m = b.shape[1]
    if u_max <= 0:
        raise SdpError("u_max must be positive")

    scale = max(np.abs(a).max(), 1.0)
    margin = 1e-6 * scale

    p = cp.Variable((n, n), symmetric=True)
    y = cp.Variable((m, n))
    lmi = a @ p + p @ a.T + b @ y + y.T @ b.T
    schur = cp.bmat([[p, y.T], [y, u_max**2 * np.eye(m)]])
    cons = [
        lmi << -margin * np.eye(n),
        schur >> 1e-8 * np.eye(n + m),
        p >> 1e-8 * np.eye(n),
    ]
    prob = cp.Problem(cp.Maximize(cp.trace(p)), cons)

    last_err = None
    for solver in solvers:
        try:
            prob.solve(solver=solver)
        except (cp.error.SolverError, cp.error.DCPError) as exc:
            last_err = exc
            continue
        if prob.status in ("optimal", "optimal_inaccurate") and p.value is not None:
            p_val = 0.5 * (p.value + p.value.T)
            y_val = y.value.reshape(m, n)
            try:
                certify_invariance_sdp(a, b, p_val, y_val, u_max)
            except SdpError as exc:
                last_err = exc
                continue
            return p_val, y_val
        last_err = SdpError(f"{solver} returned status {prob.status}")
    raise SdpError(f"invariance SDP failed: {last_err}")


def certify_invariance_sdp(a, b, p, y, u_max):
    """Post-hoc eigenvalue certificates for a candidate (P, Y)."""
    n = a.shape[0]
    m = y.shape[0]
    lmi = a @ p + p @ a.T + b @ y + y.T @ b.T
    lmi_max = np.max(np.linalg.eigvalsh(0.5 * (lmi + lmi.T)))
    if lmi_max > -1e-9:
        raise SdpError(f"strict LMI certificate failed (max eig {lmi_max:.3e})")
    schur = np.block([[p, y.T], [y, u_max**2 * np.eye(m)]])
    schur_min = np.min(np.linalg.eigvalsh(0.5 * (schur + schur.T)))
    if schur_min < -1e-9:
        raise SdpError(f"Schur certificate failed (min eig {schur_min:.3e})")
    if np.min(np.linalg.eigvalsh(p)) <= 0:
        raise SdpError("P is not positive definite")
    k = y @ np.linalg.inv(p)
    if not is_hurwitz(a + b @ k):
        raise SdpError("closed loop A + BK is not Hurwitz")
    # peak feedback magnitude over the ellipsoid boundary is sqrt(K P K^T)
    peak = float(np.sqrt(k @ p @ k.T))
    if peak > u_max * (1 + 1e-6):
        raise SdpError(f"feedback exceeds the input bound on the boundary ({peak:.3e})")
    return k
