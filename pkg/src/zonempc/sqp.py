"""Dense SQP solver for the optimal control problems.

Small-scale by design (tens of decision variables): BFGS approximation of
the Lagrangian Hessian, a dual active-set QP subproblem (Goldfarb-Idnani),
an elastic l1 restoration when the linearized constraints are
inconsistent, and an l1 merit line search.  The reported KKT residual is
always recomputed from scratch at the returned point.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import scipy.linalg
import scipy.optimize


class SqpError(RuntimeError):
    pass


class QpInfeasibleError(SqpError):
    pass


@dataclass
class NlpProblem:
    """min f(z) s.t. c(z) <= 0, lower <= z <= upper.

    eval_fc(z) -> (f, c) evaluates objective and constraints together
    (they usually share a simulation).  eval_all(z) -> (f, c, g, jac), if
    given, supplies derivatives; otherwise forward differences on eval_fc
    are used.  n_constraints may be 0 (c is then an empty array).
    """

    n: int
    x0: np.ndarray
    eval_fc: callable
    lower: np.ndarray | None = None
    upper: np.ndarray | None = None
    eval_all: callable | None = None
    hessian_guess: callable | None = None  # z -> B0 seed for the BFGS updates
    name: str = "nlp"

    def __post_init__(self):
        self.x0 = np.asarray(self.x0, dtype=float)
        if self.x0.shape != (self.n,):
            raise SqpError("initial guess has the wrong dimension")
        self.lower = (np.full(self.n, -np.inf) if self.lower is None
                      else np.asarray(self.lower, dtype=float))
        self.upper = (np.full(self.n, np.inf) if self.upper is None
                      else np.asarray(self.upper, dtype=float))
        if np.any(self.lower > self.upper):
            raise SqpError("inconsistent bounds")

    def evaluate_with_derivatives(self, z):
        if self.eval_all is not None:
            return self.eval_all(z)
        f0, c0 = self.eval_fc(z)
        c0 = np.atleast_1d(np.asarray(c0, dtype=float))
        g = np.empty(self.n)
        jac = np.empty((c0.size, self.n))
        for i in range(self.n):
            h = 6e-6 * max(1.0, abs(z[i]))
            zp = z.copy()
            zm = z.copy()
            zp[i] += h
            zm[i] -= h
            fp, cp = self.eval_fc(zp)
            fm, cm = self.eval_fc(zm)
            g[i] = (fp - fm) / (2 * h)
            jac[:, i] = (np.atleast_1d(cp) - np.atleast_1d(cm)) / (2 * h)
        return f0, c0, g, jac


@dataclass
class OcpSolution:
    """Solver output; controller transcriptions add their own views."""

    z: np.ndarray
    objective: float
    kkt_residual: float
    iterations: int
    status: str
    multipliers: np.ndarray = field(default_factory=lambda: np.zeros(0))
    # filled by the controllers
    inputs: np.ndarray | None = None
    slacks: np.ndarray | None = None
    predicted_states: np.ndarray | None = None
    predicted_outputs: np.ndarray | None = None
    diagnostics: dict = field(default_factory=dict)

    @property
    def success(self):
        return self.status == "converged"


# ----------------------------------------------------------------------
# dual active-set QP:  min 1/2 x^T G x + a^T x  s.t.  C^T x >= b
# ----------------------------------------------------------------------

def solve_qp(g_mat, a_vec, c_mat, b_vec, max_pivots=None, tol=1e-11):
    """Goldfarb-Idnani dual active-set method for strictly convex QPs.

    c_mat holds one constraint normal per column.  Returns (x, active
    indices, multipliers aligned with the active list).  Raises
    QpInfeasibleError when the constraints are inconsistent.
    """
    g_mat = np.asarray(g_mat, dtype=float)
    a_vec = np.asarray(a_vec, dtype=float)
    n = a_vec.size
    m = 0 if c_mat is None else c_mat.shape[1]
    cho = scipy.linalg.cho_factor(g_mat)
    x = -scipy.linalg.cho_solve(cho, a_vec)
    if m == 0:
        return x, [], np.zeros(0)

    scale = np.maximum(np.linalg.norm(c_mat, axis=0), 1.0)
    active: list[int] = []
    lam = np.zeros(0)
    if max_pivots is None:
        max_pivots = 100 * (n + m)

    for _ in range(max_pivots):
        resid = (c_mat.T @ x - b_vec) / scale
        resid[active] = 0.0
        p = int(np.argmin(resid))
        if resid[p] >= -tol:
            return x, active, lam
        n_plus = c_mat[:, p]
        lam_p = 0.0
        for _ in range(max_pivots):
            ginv_np = scipy.linalg.cho_solve(cho, n_plus)
            if active:
                n_act = c_mat[:, active]
                ginv_n = scipy.linalg.cho_solve(cho, n_act)
                m_small = n_act.T @ ginv_n
                rhs = n_act.T @ ginv_np
                try:
                    r = np.linalg.solve(m_small, rhs)
                except np.linalg.LinAlgError:
                    r = np.linalg.lstsq(m_small, rhs, rcond=None)[0]
                z = ginv_np - ginv_n @ r
            else:
                r = np.zeros(0)
                z = ginv_np
            # dual step length bound from multipliers of active constraints
            t1 = np.inf
            k_drop = -1
            for j in range(len(active)):
                if r[j] > tol:
                    t = lam[j] / r[j]
                    if t < t1:
                        t1 = t
                        k_drop = j
            z_norm = np.linalg.norm(z)
            if z_norm <= tol * max(1.0, np.linalg.norm(n_plus)):
                if not np.isfinite(t1):
                    raise QpInfeasibleError("QP constraints are inconsistent")
                lam = lam - t1 * r
                lam_p += t1
                del active[k_drop]
                lam = np.delete(lam, k_drop)
                continue
            t2 = (b_vec[p] - n_plus @ x) / (n_plus @ z)
            t = min(t1, t2)
            if not np.isfinite(t) or t < 0:
                raise QpInfeasibleError("QP step computation failed")
            x = x + t * z
            if len(active):
                lam = lam - t * r
            lam_p += t
            if t == t2:
                active.append(p)
                lam = np.append(lam, lam_p)
                break
            del active[k_drop]
            lam = np.delete(lam, k_drop)
    raise SqpError("QP pivot budget exhausted")


def _qp_direction(b_mat, g, jac, c, dl, du, elastic_rho=None):
    """One SQP subproblem: direction d and inequality multipliers.

    Constraints: jac @ d + c <= 0 and dl <= d <= du.  With elastic_rho
    set, solves the always-feasible elastic relaxation instead and
    returns the same interface.
    """
    n = g.size
    m = c.size
    cols = []
    bs = []
    kinds = []  # ('c', i) or ('lo', j) or ('hi', j)
    if elastic_rho is None:
        for i in range(m):
            cols.append(-jac[i])
            bs.append(c[i])
            kinds.append(("c", i))
        eye = np.eye(n)
        for j in range(n):
            if np.isfinite(dl[j]):
                cols.append(eye[j])
                bs.append(dl[j])
                kinds.append(("lo", j))
            if np.isfinite(du[j]):
                cols.append(-eye[j])
                bs.append(-du[j])
                kinds.append(("hi", j))
        c_mat = np.array(cols).T if cols else None
        b_vec = np.array(bs) if bs else None
        x, active, lam_act = solve_qp(b_mat, g, c_mat, b_vec)
        lam = np.zeros(m)
        for j, idx in enumerate(active):
            kind, i = kinds[idx]
            if kind == "c":
                lam[i] = lam_act[j]
        return x, lam
    # elastic: variables [d; t], t >= 0, constraints J d - t <= -c
    delta = 1e-8
    nt = n + m
    g_big = np.zeros((nt, nt))
    g_big[:n, :n] = b_mat
    g_big[n:, n:] = delta * np.eye(m)
    a_big = np.concatenate([g, np.full(m, elastic_rho)])
    cols = []
    bs = []
    kinds = []
    for i in range(m):
        col = np.zeros(nt)
        col[:n] = -jac[i]
        col[n + i] = 1.0
        cols.append(col)
        bs.append(c[i])
        kinds.append(("c", i))
    eye = np.eye(nt)
    for j in range(n):
        if np.isfinite(dl[j]):
            cols.append(eye[j])
            bs.append(dl[j])
            kinds.append(("lo", j))
        if np.isfinite(du[j]):
            cols.append(-eye[j])
            bs.append(-du[j])
            kinds.append(("hi", j))
    for i in range(m):
        cols.append(eye[n + i])
        bs.append(0.0)
        kinds.append(("t", i))
    x, active, lam_act = solve_qp(g_big, a_big, np.array(cols).T, np.array(bs))
    lam = np.zeros(m)
    for j, idx in enumerate(active):
        kind, i = kinds[idx]
        if kind == "c":
            lam[i] = lam_act[j]
    return x[:n], lam


def _kkt_residual(z, g, jac, c, lam, lower, upper, bound_tol=1e-9):
    """Scaled KKT residual: stationarity, feasibility, complementarity."""
    v = g + (jac.T @ lam if lam.size else 0.0)
    stat = 0.0
    for i in range(z.size):
        at_lo = z[i] <= lower[i] + bound_tol
        at_hi = z[i] >= upper[i] - bound_tol
        if at_lo and at_hi:
            continue
        if at_lo:
            stat = max(stat, max(0.0, -v[i]))
        elif at_hi:
            stat = max(stat, max(0.0, v[i]))
        else:
            stat = max(stat, abs(v[i]))
    scale = max(1.0, np.max(np.abs(g)))
    feas = float(np.max(np.maximum(c, 0.0))) if c.size else 0.0
    comp = float(np.max(lam * np.abs(np.minimum(c, 0.0)))) if c.size else 0.0
    return max(stat / scale, feas, comp)


def recompute_kkt(problem: NlpProblem, z):
    """Honest KKT residual at z: fresh evaluation, multipliers re-estimated
    by non-negative least squares on the near-active constraints."""
    f, c, g, jac = problem.evaluate_with_derivatives(np.asarray(z, dtype=float))
    c = np.atleast_1d(c)
    lam = np.zeros(c.size)
    act = [i for i in range(c.size) if c[i] >= -1e-5 * max(1.0, abs(c[i]))]
    free = [
        j for j in range(problem.n)
        if problem.lower[j] + 1e-9 < z[j] < problem.upper[j] - 1e-9
    ]
    if act and free:
        a_mat = jac[np.ix_(act, free)].T
        rhs = -g[free]
        sol, _ = scipy.optimize.nnls(a_mat, rhs)
        lam[act] = sol
    return _kkt_residual(z, g, jac, c, lam, problem.lower, problem.upper), f, c, lam


def _initial_hessian(problem: NlpProblem, z, n):
    """Seed for the BFGS updates: caller-provided guess (floored to PD)
    or the identity (then rescaled Shanno-Phua style on the first pair)."""
    if problem.hessian_guess is None:
        return np.eye(n), False
    b0 = np.asarray(problem.hessian_guess(z), dtype=float)
    b0 = 0.5 * (b0 + b0.T)
    evals, evecs = np.linalg.eigh(b0)
    evals = np.maximum(evals, 1e-8 * max(1.0, evals.max()))
    return (evecs * evals) @ evecs.T, True


def solve_nlp(problem: NlpProblem, max_iter=60, kkt_tol=1e-6, max_step=None,
              verbose=False) -> OcpSolution:
    """SQP with BFGS Hessian, active-set QP steps and l1 merit search.

    max_step, if given, caps each step componentwise (a box trust region
    folded into the QP bounds).  Returns the best point found with an
    honest status: "converged" only when the recomputed KKT residual
    confirms it, otherwise "max-iter" or "stalled" together with the
    residual actually reached.
    """
    n = problem.n
    z = np.clip(problem.x0, problem.lower, problem.upper).astype(float)
    f, c, g, jac = problem.evaluate_with_derivatives(z)
    c = np.atleast_1d(c)
    m = c.size
    b_mat, scaled_b = _initial_hessian(problem, z, n)
    lam = np.zeros(m)
    mu = 1.0
    best = (np.inf, z.copy())
    stalls = 0
    flat_iters = 0
    status = "max-iter"
    it = 0

    for it in range(1, max_iter + 1):
        kkt = _kkt_residual(z, g, jac, c, lam, problem.lower, problem.upper)
        merit = f + mu * np.sum(np.maximum(c, 0.0))
        if merit < best[0]:
            best = (merit, z.copy())
        if kkt <= kkt_tol:
            status = "converged"
            break
        if flat_iters >= 3:
            # accepted steps stopped moving the merit: FD-noise floor
            status = "stalled"
            break

        dl = problem.lower - z
        du = problem.upper - z
        if max_step is not None:
            dl = np.maximum(dl, -max_step)
            du = np.minimum(du, max_step)
        try:
            d, lam_qp = _qp_direction(b_mat, g, jac, c, dl, du)
        except QpInfeasibleError:
            rho = 10.0 * max(1.0, np.max(np.abs(lam)) if m else 1.0, mu)
            d, lam_qp = _qp_direction(b_mat, g, jac, c, dl, du, elastic_rho=rho)
        except SqpError:
            status = "stalled"
            break

        step_norm = np.max(np.abs(d))
        if step_norm <= 1e-12 * max(1.0, np.max(np.abs(z))):
            status = "converged" if kkt <= 10 * kkt_tol else "stalled"
            break

        mu = max(mu, 1.1 * (np.max(lam_qp) if m else 0.0), 1e-2)
        viol = np.sum(np.maximum(c, 0.0))
        d_merit = g @ d - mu * viol
        alpha = 1.0
        accepted = False
        f_new = c_new = None
        for _ in range(12):
            z_try = np.clip(z + alpha * d, problem.lower, problem.upper)
            f_try, c_try = problem.eval_fc(z_try)
            c_try = np.atleast_1d(c_try)
            phi_try = f_try + mu * np.sum(np.maximum(c_try, 0.0))
            if phi_try <= merit + 0.1 * alpha * min(d_merit, 0.0) + 1e-14 * abs(merit):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            stalls += 1
            if stalls >= 3:
                status = "stalled"
                break
            b_mat, scaled_b = _initial_hessian(problem, z, n)  # curvature reset
            continue
        stalls = 0

        z_new = np.clip(z + alpha * d, problem.lower, problem.upper)
        phi_new = f_try + mu * np.sum(np.maximum(c_try, 0.0))
        if phi_new >= merit - max(1e-12, 1e-9 * abs(merit)):
            flat_iters += 1
        else:
            flat_iters = 0
        f_new, c_new, g_new, jac_new = problem.evaluate_with_derivatives(z_new)
        c_new = np.atleast_1d(c_new)

        # damped BFGS on the Lagrangian gradient
        s = z_new - z
        grad_l_old = g + (jac.T @ lam_qp if m else 0.0)
        grad_l_new = g_new + (jac_new.T @ lam_qp if m else 0.0)
        yv = grad_l_new - grad_l_old
        sy = float(s @ yv)
        if not scaled_b and sy > 1e-14:
            # Shanno-Phua sizing of the initial Hessian
            b_mat = (float(yv @ yv) / sy) * np.eye(n)
            scaled_b = True
        sbs = float(s @ b_mat @ s)
        sy = float(s @ yv)
        if sbs > 1e-16:
            if sy < 0.2 * sbs:
                theta = 0.8 * sbs / (sbs - sy)
                yv = theta * yv + (1 - theta) * (b_mat @ s)
                sy = float(s @ yv)
            if sy > 1e-12 * max(1.0, float(s @ s)):
                bs = b_mat @ s
                b_mat = b_mat - np.outer(bs, bs) / sbs + np.outer(yv, yv) / sy
                b_mat = 0.5 * (b_mat + b_mat.T)

        z, f, c, g, jac, lam = z_new, f_new, c_new, g_new, jac_new, lam_qp
        if verbose:
            print(f"[{problem.name}] it={it} f={f:.6e} kkt={kkt:.2e} alpha={alpha}")

    kkt_final, f_final, c_final, lam_final = recompute_kkt(problem, z)
    if status == "converged" and kkt_final > 1e-5:
        status = "max-iter"  # never report success the recheck contradicts
    return OcpSolution(
        z=z.copy(),
        objective=float(f_final),
        kkt_residual=float(kkt_final),
        iterations=it,
        status=status,
        multipliers=lam_final,
        diagnostics={"merit_best": best[0], "mu": mu,
                     "constraint_violation": float(np.max(np.maximum(c_final, 0.0)))
                     if c_final.size else 0.0},
    )
