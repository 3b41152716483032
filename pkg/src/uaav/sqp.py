"""SQP solver: damped-BFGS Lagrangian Hessian, l1 merit line search.

When the problem exposes an ``elements`` partition (a list of variable index
arrays) together with ``element_gradients``, the Hessian is approximated block
by block (partitioned quasi-Newton), which keeps it sparse and learns the
curvature of each element from every step.  Otherwise a dense BFGS matrix is
used.

Subproblems are convex QPs handed to Clarabel.  When the linearized
constraints are inconsistent the QP is re-solved in elastic mode (l1 slack
penalty with the same weight as the merit function), so a step is always
available.
"""

from __future__ import annotations

import logging
import time
from dataclasses import dataclass, field

import clarabel
import numpy as np
import scipy.sparse as sp

log = logging.getLogger(__name__)


@dataclass
class SolverOptions:
    feas_tol: float = 1e-6
    opt_tol: float = 1e-4
    max_iter: int = 400
    armijo: float = 1e-4
    min_step: float = 1e-8
    verbose: bool = False
    time_limit: float | None = None
    restoration_iter: int = 60
    hessian: str = "auto"  # "auto", "exact" (needs element_hessians) or "bfgs"
    hessian_floor: float = 1e-4


@dataclass
class SQPResult:
    z: np.ndarray
    cost: float
    iterations: int
    max_violation: float
    kkt_residual: float
    lam_eq: np.ndarray
    lam_in: np.ndarray
    merit_history: list = field(default_factory=list)
    cost_history: list = field(default_factory=list)
    status: str = "converged"


class SolverError(RuntimeError):
    """Raised when the SQP stops without meeting its tolerances."""

    def __init__(self, message: str, worst_constraint: str = "", violation: float = float("nan"), result=None):
        super().__init__(f"{message} (worst constraint {worst_constraint}: {violation:.3e})")
        self.worst_constraint = worst_constraint
        self.violation = violation
        self.result = result


class NLP:
    """Interface expected by :func:`solve_sqp`.

    ``objective(z) -> (f, grad)`` and ``constraints(z) -> (c_eq, J_eq, c_in, J_in)``
    with inequalities meaning ``c_in <= 0``.  ``lb``/``ub`` are variable bounds.
    """

    n: int
    lb: np.ndarray
    ub: np.ndarray

    def objective(self, z):  # pragma: no cover - interface
        raise NotImplementedError

    def constraints(self, z):  # pragma: no cover - interface
        raise NotImplementedError

    def constraint_name(self, kind: str, index: int) -> str:
        return f"{kind}[{index}]"


def _violation(c_eq, c_in):
    v_eq = np.abs(c_eq).max(initial=0.0)
    v_in = np.maximum(c_in, 0.0).max(initial=0.0)
    return max(v_eq, v_in)


def _l1_violation(c_eq, c_in):
    return np.abs(c_eq).sum() + np.maximum(c_in, 0.0).sum()


def _solve_qp(H, g, A_eq, b_eq, A_in, b_in, lo, hi, elastic_weight=None):
    """min 1/2 d'Hd + g'd  s.t.  A_eq d = b_eq, A_in d <= b_in, lo <= d <= hi.

    Returns (d, lam_eq, lam_in, lam_bounds, status).  In elastic mode the
    general constraints are softened with l1 slacks weighted ``elastic_weight``.
    """
    n = g.size
    m_eq, m_in = A_eq.shape[0], A_in.shape[0]
    eye = sp.identity(n, format="csc")
    if elastic_weight is None:
        P = sp.triu(sp.csc_matrix(H), format="csc")
        q = g
        A = sp.vstack([sp.csc_matrix(A_eq), sp.csc_matrix(A_in), eye, -eye], format="csc")
        b = np.concatenate([b_eq, b_in, hi, -lo])
        cones = [clarabel.ZeroConeT(m_eq), clarabel.NonnegativeConeT(m_in + 2 * n)]
    else:
        ns = 2 * m_eq + m_in
        N = n + ns
        P = sp.triu(sp.block_diag([sp.csc_matrix(H), sp.csc_matrix((ns, ns))]), format="csc")
        q = np.concatenate([g, np.full(ns, elastic_weight)])
        Ieq = sp.identity(m_eq, format="csc")
        Iin = sp.identity(m_in, format="csc")
        Z = lambda r, c: sp.csc_matrix((r, c))  # noqa: E731
        rows_eq = sp.hstack([sp.csc_matrix(A_eq), -Ieq, Ieq, Z(m_eq, m_in)])
        rows_in = sp.hstack([sp.csc_matrix(A_in), Z(m_in, 2 * m_eq), -Iin])
        rows_bnd_hi = sp.hstack([eye, Z(n, ns)])
        rows_bnd_lo = sp.hstack([-eye, Z(n, ns)])
        rows_slack = sp.hstack([Z(ns, n), -sp.identity(ns)])
        A = sp.vstack([rows_eq, rows_in, rows_bnd_hi, rows_bnd_lo, rows_slack], format="csc")
        b = np.concatenate([b_eq, b_in, hi, -lo, np.zeros(ns)])
        cones = [clarabel.ZeroConeT(m_eq), clarabel.NonnegativeConeT(m_in + 2 * n + ns)]

    settings = clarabel.DefaultSettings()
    settings.verbose = False
    settings.tol_gap_abs = 1e-10
    settings.tol_gap_rel = 1e-10
    settings.tol_feas = 1e-10
    settings.max_iter = 200
    solver = clarabel.DefaultSolver(P.tocsc(), np.asarray(q, float), A.tocsc(), np.asarray(b, float), cones, settings)
    sol = solver.solve()
    status = str(sol.status)
    x = np.asarray(sol.x)
    zdual = np.asarray(sol.z)
    d = x[:n]
    lam_eq = zdual[:m_eq]
    lam_in = zdual[m_eq:m_eq + m_in]
    lam_hi = zdual[m_eq + m_in:m_eq + m_in + n]
    lam_lo = zdual[m_eq + m_in + n:m_eq + m_in + 2 * n]
    return d, lam_eq, lam_in, lam_hi - lam_lo, status


def _ok(status: str) -> bool:
    return status in ("Solved", "AlmostSolved", "SolverStatus.Solved", "SolverStatus.AlmostSolved")


def _infeasible(status: str) -> bool:
    return "Infeasible" in status


def solve_sqp(nlp: NLP, z0, opts: SolverOptions | None = None) -> SQPResult:
    opts = opts or SolverOptions()
    t_start = time.perf_counter()
    z = np.clip(np.asarray(z0, float).copy(), nlp.lb, nlp.ub)
    n = z.size
    if opts.restoration_iter > 0:
        z = _restore(nlp, z, opts)
    hess = _Hessian(nlp, n, opts)
    mu = 1.0

    f, g = nlp.objective(z)
    c_eq, J_eq, c_in, J_in = nlp.constraints(z)
    merit_hist: list[float] = []
    cost_hist: list[float] = [f]
    lam_eq = np.zeros(c_eq.size)
    lam_in = np.zeros(c_in.size)
    kkt = np.inf
    status = "max_iter"

    for it in range(opts.max_iter + 1):
        lo, hi = nlp.lb - z, nlp.ub - z
        d, le, li, lb_, qs = _solve_qp(hess.matrix(), g, J_eq, -c_eq, J_in, -c_in, lo, hi)
        elastic = False
        if not _ok(qs):
            d, le, li, lb_, qs = _solve_qp(hess.matrix(), g, J_eq, -c_eq, J_in, -c_in, lo, hi, elastic_weight=max(mu, 10.0))
            elastic = True
            if not _ok(qs):
                raise SolverError(f"QP subproblem failed ({qs}) at iteration {it}",
                                  *_worst(nlp, c_eq, c_in))
        lam_eq, lam_in = le, li
        grad_lag = g + J_eq.T @ lam_eq + J_in.T @ lam_in + lb_
        kkt = float(np.abs(grad_lag).max(initial=0.0))
        viol = _violation(c_eq, c_in)
        if opts.verbose:
            log.info("it %3d f=%.6g viol=%.2e kkt=%.2e |d|=%.2e mu=%.1f%s",
                     it, f, viol, kkt, np.abs(d).max(initial=0), mu, " elastic" if elastic else "")
        if viol <= opts.feas_tol and kkt <= opts.opt_tol:
            status = "converged"
            break
        if it == opts.max_iter:
            break
        if opts.time_limit is not None and time.perf_counter() - t_start > opts.time_limit:
            status = "time_limit"
            break

        lam_max = max(np.abs(lam_eq).max(initial=0.0), np.abs(lam_in).max(initial=0.0))
        if mu < 1.1 * lam_max:
            mu = max(1.5 * lam_max, 2.0 * mu)
        elif mu > 10.0 * lam_max and viol <= 1e3 * opts.feas_tol:
            # let the weight relax once the iterates are nearly feasible
            mu = max(1.5 * lam_max, 0.5 * mu, 1.0)

        phi0 = f + mu * _l1_violation(c_eq, c_in)
        lin_viol = _l1_violation(c_eq + J_eq @ d, c_in + J_in @ d)
        dphi = g @ d + mu * (lin_viol - _l1_violation(c_eq, c_in))
        dphi = min(dphi, -1e-12 * max(1.0, abs(phi0)))

        alpha = 1.0
        accepted = False
        soc_tried = False
        while alpha >= opts.min_step:
            z_try = np.clip(z + alpha * d, nlp.lb, nlp.ub)
            f_t, g_t = nlp.objective(z_try)
            ce_t, Je_t, ci_t, Ji_t = nlp.constraints(z_try)
            phi_t = f_t + mu * _l1_violation(ce_t, ci_t)
            if np.isfinite(phi_t) and phi_t <= phi0 + opts.armijo * alpha * dphi:
                accepted = True
                break
            if alpha == 1.0 and not soc_tried:
                soc_tried = True
                # second-order correction against the Maratos effect
                be = -(ce_t - J_eq @ d)
                bi = -(ci_t - J_in @ d)
                d2, *_rest, qs2 = _solve_qp(hess.matrix(), g, J_eq, be, J_in, bi, lo, hi)
                if _ok(qs2):
                    z_soc = np.clip(z + d2, nlp.lb, nlp.ub)
                    f_s, g_s = nlp.objective(z_soc)
                    ce_s, Je_s, ci_s, Ji_s = nlp.constraints(z_soc)
                    phi_s = f_s + mu * _l1_violation(ce_s, ci_s)
                    if np.isfinite(phi_s) and phi_s <= phi0 + opts.armijo * dphi:
                        z_try, f_t, g_t, ce_t, Je_t, ci_t, Ji_t, phi_t = (
                            z_soc, f_s, g_s, ce_s, Je_s, ci_s, Ji_s, phi_s)
                        accepted = True
                        break
            alpha *= 0.5
        if not accepted:
            # reset curvature and retry from the same point
            if hess.fresh:
                status = "line_search"
                break
            hess.reset()
            continue

        hess.update(z, z_try, g, g_t, J_eq, Je_t, J_in, Ji_t, lam_eq, lam_in, ci_t)
        # exact (unmodified) curvature once full steps are taken near feasibility
        hess.local = _violation(ce_t, ci_t) <= 1e3 * opts.feas_tol
        hess.adapt(alpha == 1.0)
        if opts.verbose:
            log.info("      step %.3g", alpha)

        z, f, g = z_try, f_t, g_t
        c_eq, J_eq, c_in, J_in = ce_t, Je_t, ci_t, Ji_t
        merit_hist.append(phi_t)
        cost_hist.append(f)

    viol = _violation(c_eq, c_in)
    result = SQPResult(z=z, cost=float(f), iterations=it, max_violation=float(viol), kkt_residual=kkt,
                       lam_eq=lam_eq, lam_in=lam_in, merit_history=merit_hist, cost_history=cost_hist,
                       status=status)
    if status != "converged":
        name, v = _worst(nlp, c_eq, c_in)
        raise SolverError(f"SQP stopped: {status} after {it} iterations, kkt={kkt:.2e}", name, v, result)
    return result


def _restore(nlp: NLP, z, opts: SolverOptions):
    """Drive the constraint violation down before optimizing.

    Each step is the minimum-norm correction satisfying the linearized
    constraints (elastic if they are inconsistent), accepted by backtracking on
    the l1 violation.  Returns the best point found; never raises.
    """
    n = z.size
    H = sp.identity(n, format="csc")
    zero = np.zeros(n)
    c_eq, J_eq, c_in, J_in = nlp.constraints(z)
    v = _l1_violation(c_eq, c_in)
    for it in range(opts.restoration_iter):
        if _violation(c_eq, c_in) <= 0.1 * opts.feas_tol:
            break
        lo, hi = nlp.lb - z, nlp.ub - z
        d, *_r, qs = _solve_qp(H, zero, J_eq, -c_eq, J_in, -c_in, lo, hi)
        if not _ok(qs):
            d, *_r, qs = _solve_qp(H, zero, J_eq, -c_eq, J_in, -c_in, lo, hi, elastic_weight=1e3)
            if not _ok(qs):
                break
        alpha = 1.0
        while alpha >= 1e-4:
            z_t = np.clip(z + alpha * d, nlp.lb, nlp.ub)
            try:
                ce, Je, ci, Ji = nlp.constraints(z_t)
            except Exception:  # non-finite dynamics: shorten the step
                alpha *= 0.5
                continue
            v_t = _l1_violation(ce, ci)
            if np.isfinite(v_t) and v_t <= (1.0 - 1e-4 * alpha) * v:
                break
            alpha *= 0.5
        else:
            break
        z, c_eq, J_eq, c_in, J_in, v = z_t, ce, Je, ci, Ji, v_t
        if opts.verbose:
            log.info("restore %3d viol=%.2e step=%.3g", it, _violation(c_eq, c_in), alpha)
    return z


def _worst(nlp: NLP, c_eq, c_in):
    ve = np.abs(c_eq)
    vi = np.maximum(c_in, 0.0)
    ie = int(np.argmax(ve)) if ve.size else -1
    ii = int(np.argmax(vi)) if vi.size else -1
    e = ve[ie] if ie >= 0 else 0.0
    i = vi[ii] if ii >= 0 else 0.0
    if e >= i and ie >= 0:
        return nlp.constraint_name("eq", ie), float(e)
    if ii >= 0:
        return nlp.constraint_name("in", ii), float(i)
    return "none", 0.0


def _damped_bfgs(H, s, y):
    Hs = H @ s
    sHs = float(s @ Hs)
    if sHs <= 1e-16:
        return H
    sy = float(s @ y)
    if sy < 0.2 * sHs:
        theta = 0.8 * sHs / (sHs - sy)
        y = theta * y + (1 - theta) * Hs
        sy = float(s @ y)
    H = H - np.outer(Hs, Hs) / sHs + np.outer(y, y) / sy
    return 0.5 * (H + H.T)


class _Hessian:
    """Quasi-Newton model of the Lagrangian Hessian (dense or partitioned)."""

    def __init__(self, nlp, n, opts):
        self.nlp = nlp
        self.n = n
        self.floor = opts.hessian_floor
        self.partitioned = getattr(nlp, "elements", None) is not None and hasattr(nlp, "element_gradients")
        has_exact = self.partitioned and hasattr(nlp, "element_hessians")
        if opts.hessian == "exact" and not has_exact:
            raise ValueError("exact Hessian requested but the problem does not provide element_hessians")
        self.exact = has_exact and opts.hessian in ("auto", "exact")
        if self.partitioned:
            self.idx = [np.asarray(e, dtype=int) for e in nlp.elements]
            rows = [np.repeat(e, e.size) for e in self.idx]
            cols = [np.tile(e, e.size) for e in self.idx]
            self._rows = np.concatenate(rows)
            self._cols = np.concatenate(cols)
        self.reset()

    def reset(self):
        self._P_exact = None
        self.local = False
        self.nu = 1.0
        if self.partitioned:
            self.blocks = [np.eye(e.size) for e in self.idx]
        else:
            self.H = np.eye(self.n)
        self.fresh = True

    def matrix(self):
        if self.local and self._P_exact is not None:
            return self._P_exact + self.nu * sp.identity(self.n, format="csc")
        if not self.partitioned:
            return self.H
        data = np.concatenate([b.ravel() for b in self.blocks])
        return sp.coo_matrix((data, (self._rows, self._cols)), shape=(self.n, self.n)).tocsc()

    def update(self, z, z_new, g, g_new, J_eq, J_eq_new, J_in, J_in_new, lam_eq, lam_in, c_in_new):
        s = z_new - z
        if self.exact:
            self.set_exact(z_new, lam_eq, lam_in, J_eq_new, J_in_new, c_in_new)
        elif self.partitioned:
            old = self.nlp.element_gradients(z, J_eq, J_in, lam_eq, lam_in)
            new = self.nlp.element_gradients(z_new, J_eq_new, J_in_new, lam_eq, lam_in)
            for i, e in enumerate(self.idx):
                self.blocks[i] = _damped_bfgs(self.blocks[i], s[e], new[i] - old[i])
        else:
            y = (g_new + J_eq_new.T @ lam_eq + J_in_new.T @ lam_in) - (g + J_eq.T @ lam_eq + J_in.T @ lam_in)
            self.H = _damped_bfgs(self.H, s, y)
        self.fresh = False

    def adapt(self, full_step: bool):
        """Levenberg damping of the exact model: relax after full steps."""
        self.nu = max(0.25 * self.nu, 1e-8) if full_step else min(4.0 * self.nu, 1e4)

    def set_exact(self, z, lam_eq, lam_in, J_eq, J_in, c_in, act_tol: float = 1e-6):
        """Exact Lagrangian Hessian, convexified only as far as needed.

        First try ``H + rho A'A`` for increasing ``rho``, where ``A`` stacks the
        equality Jacobian, the active inequality rows and the active bounds.
        While the active set is unchanged the extra term is constant on the
        linearized constraints, so the QP step is the exact SQP step whenever
        this matrix is positive definite.  If no ``rho`` works, fall back to
        element blocks with absolute eigenvalues.
        """
        blocks = self.nlp.element_hessians(z, lam_eq, lam_in)
        data = np.concatenate([0.5 * (b + b.T).ravel() for b in blocks])
        H = sp.coo_matrix((data, (self._rows, self._cols)), shape=(self.n, self.n)).toarray()
        fixed = self.nlp.lb >= self.nlp.ub
        H[fixed, :] = 0.0
        H[:, fixed] = 0.0
        H[fixed, fixed] = 1.0
        J = np.vstack([np.asarray(J_eq), np.asarray(J_in)[np.asarray(c_in) > -act_tol]])
        JtJ = J.T @ J
        scale_b = act_tol * np.maximum(1.0, np.abs(z))
        at_bound = ((z - self.nlp.lb) <= scale_b) | ((self.nlp.ub - z) <= scale_b)
        ib = np.flatnonzero(at_bound)
        JtJ[ib, ib] += 1.0
        scale = max(1.0, np.abs(H).max())
        eye = self.floor * np.eye(self.n)
        for rho in (0.0, 1e-2, 1e-1, 1.0, 10.0, 100.0, 1e3):
            K = H + (rho * scale) * JtJ + eye
            try:
                np.linalg.cholesky(K)
            except np.linalg.LinAlgError:
                continue
            self._P_exact = sp.csc_matrix(K)
            break
        else:
            self._P_exact = None
        out = []
        for Hb in blocks:
            w, V = np.linalg.eigh(0.5 * (Hb + Hb.T))
            w = np.maximum(np.abs(w), self.floor)
            out.append((V * w) @ V.T)
        self.blocks = out
