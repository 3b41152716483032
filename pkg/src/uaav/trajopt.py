"""Multi-phase Hermite-Simpson direct transcription over a fixed mode schedule."""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Sequence

import numpy as np
import yaml

from . import dynamics as dyn
from .dynamics import NU, NX, Mode, VehicleParams
from .sqp import NLP, SolverError, SolverOptions, SQPResult, solve_sqp

TRAJ_CSV_VERSION = 1


class ProblemValidationError(ValueError):
    pass


class DynamicsEvaluationError(RuntimeError):
    pass


# --------------------------------------------------------------------------
# problem data


@dataclass(frozen=True)
class ModeSchedule:
    phases: tuple = dyn.WATER_EXIT_SCHEDULE
    knots: tuple = (20, 8, 20)

    def __post_init__(self):
        object.__setattr__(self, "phases", tuple(Mode.parse(p) for p in self.phases))
        object.__setattr__(self, "knots", tuple(int(n) for n in self.knots))
        if len(self.phases) == 0 or len(self.phases) != len(self.knots):
            raise ProblemValidationError("schedule needs one knot count per phase")
        if any(n < 1 for n in self.knots):
            raise ProblemValidationError("knot counts must be positive")
        for a, b in zip(self.phases, self.phases[1:]):
            if boundary_guard(a, b) is None:
                raise ProblemValidationError(f"no guard connects {a.label} -> {b.label}")


def boundary_guard(a: Mode, b: Mode) -> int | None:
    """Index (0 nose, 1 elevon) of the guard taking ``a`` to ``b``, if adjacent."""
    for which in (0, 1):
        if dyn.successor(a, which) == b:
            return which
    return None


DEFAULT_X_INIT = (-3.5, -1.0, 0.0, 0.0, 0.5, 0.0, 0.0)
DEFAULT_DELTA_INIT = (0.5, 0.1, 0.05, 0.0, 0.0, 0.0, 0.0)
DEFAULT_X_FINAL = (0.0, 1.0, 0.0, 0.0, 10.0, 0.0, 0.0)
DEFAULT_DELTA_FINAL = (2.0, 0.5, 0.15, math.pi / 2, 2.0, 2.0, 10.0)


@dataclass(frozen=True)
class TrajOptProblem:
    schedule: ModeSchedule = field(default_factory=ModeSchedule)
    x_init: tuple = DEFAULT_X_INIT
    delta_init: tuple = DEFAULT_DELTA_INIT
    x_final: tuple = DEFAULT_X_FINAL
    delta_final: tuple = DEFAULT_DELTA_FINAL
    x_min: tuple = (-10.0,) * NX
    x_max: tuple = (10.0,) * NX
    u_min: tuple = (-10.0, 0.0)
    u_max: tuple = (10.0, 5.0)
    h_min: float = 1e-3
    h_max: float = 0.25
    R: tuple = ((1.0, 0.0), (0.0, 1.0))
    D: float = 1.0

    def __post_init__(self):
        for name in ("x_init", "delta_init", "x_final", "delta_final", "x_min", "x_max", "u_min", "u_max"):
            object.__setattr__(self, name, tuple(float(v) for v in getattr(self, name)))
        object.__setattr__(self, "R", tuple(tuple(float(v) for v in row) for row in self.R))
        self.validate()

    def validate(self) -> None:
        bad = []

        def check(label, lo, hi):
            for i, (a, b) in enumerate(zip(lo, hi)):
                if not a <= b:
                    bad.append(f"{label}[{i}]: {a} > {b}")

        if len(self.x_init) != NX or len(self.x_final) != NX:
            bad.append("x_init/x_final must have 7 entries")
        check("x bounds", self.x_min, self.x_max)
        check("u bounds", self.u_min, self.u_max)
        check("initial box", np.subtract(self.x_init, self.delta_init), np.add(self.x_init, self.delta_init))
        check("final box", np.subtract(self.x_final, self.delta_final), np.add(self.x_final, self.delta_final))
        if any(d < 0 for d in self.delta_init + self.delta_final):
            bad.append("box half-widths must be non-negative")
        if not 0 < self.h_min <= self.h_max:
            bad.append(f"h bounds: need 0 < h_min <= h_max, got ({self.h_min}, {self.h_max})")
        r = np.asarray(self.R)
        if r.shape != (NU, NU) or np.linalg.eigvalsh(0.5 * (r + r.T)).min() < 0:
            bad.append("R must be a PSD 2x2 matrix")
        if bad:
            raise ProblemValidationError("inconsistent problem data: " + "; ".join(bad))


# --------------------------------------------------------------------------
# collocation primitives


def hs_midpoint(xk, xk1, fk, fk1, h):
    return 0.5 * (xk + xk1) + h * (fk - fk1) / 8.0


def hs_defect(f: Callable, xk, xk1, uk, uk1, h):
    """Hermite-Simpson defect for an arbitrary ``f(x, u)``."""
    if not h > 0:
        raise ValueError("step must be positive")
    xk, xk1 = np.asarray(xk, float), np.asarray(xk1, float)
    uk, uk1 = np.asarray(uk, float), np.asarray(uk1, float)
    fk, fk1 = np.asarray(f(xk, uk), float), np.asarray(f(xk1, uk1), float)
    xc = hs_midpoint(xk, xk1, fk, fk1, h)
    fc = np.asarray(f(xc, 0.5 * (uk + uk1)), float)
    return xk - xk1 + h / 6.0 * (fk + 4.0 * fc + fk1)


def hermite_simpson_defect(xk, xk1, uk, uk1, h, mode: Mode, params: VehicleParams, index: int = 0):
    d = hs_defect(lambda x, u: dyn.dynamics_f(x, u, mode, params), xk, xk1, uk, uk1, h)
    if not np.all(np.isfinite(d)):
        raise DynamicsEvaluationError(f"non-finite dynamics at knot {index}")
    return d


def stage_cost(u, h, R, D) -> float:
    u = np.asarray(u, float)
    return float(u @ np.asarray(R, float) @ u * h + D * h)


# --------------------------------------------------------------------------
# generic multi-phase NLP


@dataclass
class PhaseDef:
    """One phase of a collocation problem.

    ``f(X, U)`` and ``jac(X, U)`` work on stacked rows; ``containment(X)``
    returns the guard-sign constraints ``(values (m, k), grads (m, k, nx))``
    that must stay non-positive inside the phase.
    """

    n: int
    f: Callable
    jac: Callable
    mode: Mode | None = None
    containment: Callable | None = None


@dataclass
class BoundaryGuard:
    """Equality ``g(x) = 0`` at the last knot of phase ``phase``."""

    phase: int
    value: Callable
    grad: Callable
    skip_component: int | None = None  # containment entry made redundant by the equality


class CollocationNLP(NLP):
    def __init__(self, nx: int, nu: int, phases: Sequence[PhaseDef], R, D: float,
                 x_lo, x_hi, u_lo, u_hi, h_lo: float, h_hi: float,
                 x0_lo, x0_hi, xN_lo, xN_hi, boundary_guards: Sequence[BoundaryGuard] = ()):
        self.nx, self.nu = nx, nu
        self.phases = list(phases)
        self.R = np.atleast_2d(np.asarray(R, float))
        self.D = float(D)
        self.boundary_guards = list(boundary_guards)
        self.n_intervals = sum(p.n for p in self.phases)
        self.K = self.n_intervals + 1
        self.n_phase = len(self.phases)
        self.n = self.K * (nx + nu) + self.n_phase
        starts = np.cumsum([0] + [p.n for p in self.phases])
        self.first_knot = starts[:-1]
        self.last_knot = starts[1:]

        lb = np.empty(self.n)
        ub = np.empty(self.n)
        Xlo = np.tile(np.asarray(x_lo, float), (self.K, 1))
        Xhi = np.tile(np.asarray(x_hi, float), (self.K, 1))
        Xlo[0] = np.maximum(Xlo[0], x0_lo)
        Xhi[0] = np.minimum(Xhi[0], x0_hi)
        Xlo[-1] = np.maximum(Xlo[-1], xN_lo)
        Xhi[-1] = np.minimum(Xhi[-1], xN_hi)
        if np.any(Xlo > Xhi):
            k, i = np.argwhere(Xlo > Xhi)[0]
            raise ProblemValidationError(f"empty state box at knot {k}, component {i}")
        lb[: self.K * nx] = Xlo.ravel()
        ub[: self.K * nx] = Xhi.ravel()
        su = slice(self.K * nx, self.K * (nx + nu))
        lb[su] = np.tile(np.asarray(u_lo, float), self.K)
        ub[su] = np.tile(np.asarray(u_hi, float), self.K)
        lb[self.K * (nx + nu):] = h_lo
        ub[self.K * (nx + nu):] = h_hi
        self.lb, self.ub = lb, ub

        # containment rows: (phase, knot, component)
        skip = set()
        for bg in self.boundary_guards:
            if bg.skip_component is not None:
                skip.add((bg.phase, int(self.last_knot[bg.phase]), bg.skip_component))
                if bg.phase + 1 < self.n_phase:
                    skip.add((bg.phase + 1, int(self.first_knot[bg.phase + 1]), bg.skip_component))
        self._skip = skip
        self._in_rows = []
        for j, ph in enumerate(self.phases):
            if ph.containment is None:
                continue
            knots = np.arange(self.first_knot[j], self.last_knot[j] + 1)
            vals, _ = ph.containment(np.zeros((1, nx)))
            for k in knots:
                for c in range(vals.shape[1]):
                    if (j, int(k), c) not in skip:
                        self._in_rows.append((j, int(k), c))
        self.m_eq = self.n_intervals * nx + len(self.boundary_guards)
        self.m_in = len(self._in_rows)
        self._build_elements()

    def _build_elements(self):
        """Split the Lagrangian into one element per collocation interval.

        Each element owns the variables (x_k, u_k, x_k+1, u_k+1, h_phase), its
        defect rows, the stage cost of knot k and any guard rows that only touch
        x_k or x_k+1.  The SQP keeps a small quasi-Newton block per element.
        """
        nx = self.nx
        self._elem_phase = np.empty(self.n_intervals, dtype=int)
        for j in range(self.n_phase):
            self._elem_phase[self.first_knot[j]:self.last_knot[j]] = j
        self.elements = []
        eq_rows = [list(range(i * nx, (i + 1) * nx)) for i in range(self.n_intervals)]
        in_rows = [[] for _ in range(self.n_intervals)]
        for r, bg in enumerate(self.boundary_guards):
            eq_rows[int(self.last_knot[bg.phase]) - 1].append(self.n_intervals * nx + r)
        for r, (_, k, _) in enumerate(self._in_rows):
            in_rows[min(k, self.n_intervals - 1)].append(r)
        for i in range(self.n_intervals):
            idx = np.r_[np.arange(self.n)[self.ix(i)], np.arange(self.n)[self.iu(i)],
                        np.arange(self.n)[self.ix(i + 1)], np.arange(self.n)[self.iu(i + 1)],
                        self.ih(self._elem_phase[i])]
            self.elements.append(idx)
        self._elem_eq = [np.asarray(r, dtype=int) for r in eq_rows]
        self._elem_in = [np.asarray(r, dtype=int) for r in in_rows]

    def element_gradients(self, z, J_eq, J_in, lam_eq, lam_in):
        """Gradient of each element Lagrangian with respect to its own variables."""
        X, U, h = self.split(z)
        Rs = 0.5 * (self.R + self.R.T)
        nx, nu = self.nx, self.nu
        out = []
        for i, idx in enumerate(self.elements):
            g = J_eq[self._elem_eq[i]][:, idx].T @ lam_eq[self._elem_eq[i]]
            if self._elem_in[i].size:
                g = g + J_in[self._elem_in[i]][:, idx].T @ lam_in[self._elem_in[i]]
            hj = h[self._elem_phase[i]]
            u = U[i]
            g[nx:nx + nu] += 2.0 * hj * (Rs @ u)
            g[-1] += u @ self.R @ u + self.D
            out.append(g)
        return out

    # -- layout helpers
    def split(self, z):
        nx, nu, K = self.nx, self.nu, self.K
        X = z[: K * nx].reshape(K, nx)
        U = z[K * nx: K * (nx + nu)].reshape(K, nu)
        h = z[K * (nx + nu):]
        return X, U, h

    def pack(self, X, U, h):
        return np.concatenate([np.asarray(X, float).ravel(), np.asarray(U, float).ravel(), np.asarray(h, float)])

    def ix(self, k):
        return slice(k * self.nx, (k + 1) * self.nx)

    def iu(self, k):
        o = self.K * self.nx
        return slice(o + k * self.nu, o + (k + 1) * self.nu)

    def ih(self, j):
        return self.K * (self.nx + self.nu) + j

    def constraint_name(self, kind, index):
        if kind == "eq":
            if index < self.n_intervals * self.nx:
                k, c = divmod(index, self.nx)
                return f"defect[interval {k}, component {c}]"
            return f"guard_equality[boundary {index - self.n_intervals * self.nx}]"
        j, k, c = self._in_rows[index]
        return f"containment[phase {j}, knot {k}, guard {c}]"

    def element_hessians(self, z, lam_eq, lam_in, eps: float = 1e-4):
        """Hessian of each element Lagrangian with respect to its own variables.

        Defect curvature comes from central second differences of the scalar
        multiplier-weighted defect (batched over all stencil points), guard
        curvature from differences of the analytic guard gradients, and the
        stage cost curvature is exact.
        """
        nx, nu = self.nx, self.nu
        m = 2 * nx + 2 * nu + 1
        X, U, h = self.split(z)
        pairs = [(a, b) for a in range(m) for b in range(a + 1, m)]
        # stencil: center, +-e_a, then (++, +-, -+, --) per pair
        S = [np.zeros(m)]
        for a in range(m):
            for sgn in (1.0, -1.0):
                v = np.zeros(m)
                v[a] = sgn
                S.append(v)
        for a, b in pairs:
            for sa, sb in ((1, 1), (1, -1), (-1, 1), (-1, -1)):
                v = np.zeros(m)
                v[a], v[b] = sa, sb
                S.append(v)
        S = np.asarray(S)
        pa = np.array([a for a, _ in pairs])
        pb = np.array([b for _, b in pairs])
        out = []
        Rs = 0.5 * (self.R + self.R.T)
        for j, ph in enumerate(self.phases):
            a0, b0 = self.first_knot[j], self.last_knot[j]
            W = np.concatenate([X[a0:b0], U[a0:b0], X[a0 + 1:b0 + 1], U[a0 + 1:b0 + 1],
                                np.full((b0 - a0, 1), h[j])], axis=1)
            step = eps * np.maximum(1.0, np.abs(W))  # (n, m)
            P = W[:, None, :] + S[None, :, :] * step[:, None, :]
            P = P.reshape(-1, m)
            xk, uk = P[:, :nx], P[:, nx:nx + nu]
            xk1, uk1 = P[:, nx + nu:2 * nx + nu], P[:, 2 * nx + nu:2 * nx + 2 * nu]
            hh = P[:, -1:]
            fk, fk1 = ph.f(xk, uk), ph.f(xk1, uk1)
            xc = 0.5 * (xk + xk1) + hh / 8.0 * (fk - fk1)
            fc = ph.f(xc, 0.5 * (uk + uk1))
            d = xk - xk1 + hh / 6.0 * (fk + 4.0 * fc + fk1)
            lam = lam_eq[a0 * nx:b0 * nx].reshape(-1, nx)
            L = np.einsum("npi,ni->np", d.reshape(b0 - a0, len(S), nx), lam)
            for i in range(b0 - a0):
                Li, e = L[i], step[i]
                Hm = np.zeros((m, m))
                diag = (Li[1:2 * m + 1:2] - 2.0 * Li[0] + Li[2:2 * m + 1:2]) / e ** 2
                Hm[np.arange(m), np.arange(m)] = diag
                q = Li[2 * m + 1:].reshape(-1, 4)
                off = (q[:, 0] - q[:, 1] - q[:, 2] + q[:, 3]) / (4.0 * e[pa] * e[pb])
                Hm[pa, pb] = off
                Hm[pb, pa] = off
                k = a0 + i
                # stage cost (u'Ru + D) h
                Hm[nx:nx + nu, nx:nx + nu] += 2.0 * h[j] * Rs
                gu = 2.0 * Rs @ U[k]
                Hm[nx:nx + nu, -1] += gu
                Hm[-1, nx:nx + nu] += gu
                out.append(Hm)
        # guard rows
        for r, bg in enumerate(self.boundary_guards):
            k = int(self.last_knot[bg.phase])
            lam = lam_eq[self.n_intervals * nx + r]
            Hg = _fd_jacobian(lambda x, bg=bg: np.asarray(bg.grad(x), float), X[k])
            blk = slice(nx + nu, 2 * nx + nu)
            out[k - 1][blk, blk] += lam * 0.5 * (Hg + Hg.T)
        rows_by_knot = {}
        for r, (j, k, c) in enumerate(self._in_rows):
            rows_by_knot.setdefault((j, k), []).append((r, c))
        for (j, k), rows in rows_by_knot.items():
            cont = self.phases[j].containment

            def gfun(x, cont=cont, rows=rows):
                g = cont(x[None, :])[1][0]
                return sum(lam_in[r] * g[c] for r, c in rows)

            Hg = _fd_jacobian(gfun, X[k])
            if k < self.n_intervals:
                out[k][:nx, :nx] += 0.5 * (Hg + Hg.T)
            else:
                blk = slice(nx + nu, 2 * nx + nu)
                out[k - 1][blk, blk] += 0.5 * (Hg + Hg.T)
        return out

    # -- objective
    def objective(self, z):
        X, U, h = self.split(z)
        grad = np.zeros(self.n)
        f = 0.0
        for j in range(self.n_phase):
            ks = slice(self.first_knot[j], self.last_knot[j])
            Uj = U[ks]
            quad = np.einsum("ki,ij,kj->k", Uj, self.R, Uj)
            f += h[j] * (quad.sum() + self.D * Uj.shape[0])
            gu = 2.0 * h[j] * (Uj @ (0.5 * (self.R + self.R.T)))
            for kk, k in enumerate(range(self.first_knot[j], self.last_knot[j])):
                grad[self.iu(k)] += gu[kk]
            grad[self.ih(j)] += quad.sum() + self.D * Uj.shape[0]
        return float(f), grad

    # -- constraints
    def defects(self, z):
        X, U, h = self.split(z)
        out = []
        for j, ph in enumerate(self.phases):
            a, b = self.first_knot[j], self.last_knot[j]
            Xj, Uj = X[a:b + 1], U[a:b + 1]
            F = ph.f(Xj, Uj)
            Xc = hs_midpoint(Xj[:-1], Xj[1:], F[:-1], F[1:], h[j])
            Fc = ph.f(Xc, 0.5 * (Uj[:-1] + Uj[1:]))
            out.append(Xj[:-1] - Xj[1:] + h[j] / 6.0 * (F[:-1] + 4.0 * Fc + F[1:]))
        return np.concatenate(out)

    def constraints(self, z):
        nx, nu = self.nx, self.nu
        X, U, h = self.split(z)
        c_eq = np.zeros(self.m_eq)
        J_eq = np.zeros((self.m_eq, self.n))
        I = np.eye(nx)
        row = 0
        for j, ph in enumerate(self.phases):
            a, b = self.first_knot[j], self.last_knot[j]
            Xj, Uj = X[a:b + 1], U[a:b + 1]
            hj = h[j]
            F = ph.f(Xj, Uj)
            if not np.all(np.isfinite(F)):
                k = int(np.argwhere(~np.isfinite(F))[0][0]) + a
                raise DynamicsEvaluationError(f"non-finite dynamics at knot {k}")
            A, B = ph.jac(Xj, Uj)
            Uc = 0.5 * (Uj[:-1] + Uj[1:])
            Xc = hs_midpoint(Xj[:-1], Xj[1:], F[:-1], F[1:], hj)
            Fc = ph.f(Xc, Uc)
            if not np.all(np.isfinite(Fc)):
                k = int(np.argwhere(~np.isfinite(Fc))[0][0]) + a
                raise DynamicsEvaluationError(f"non-finite dynamics at midpoint of interval {k}")
            Ac, Bc = ph.jac(Xc, Uc)
            d = Xj[:-1] - Xj[1:] + hj / 6.0 * (F[:-1] + 4.0 * Fc + F[1:])
            for i in range(ph.n):
                k = a + i
                rs = slice(row, row + nx)
                c_eq[rs] = d[i]
                # d xc / d(.)
                dxc_xk = 0.5 * I + hj / 8.0 * A[i]
                dxc_xk1 = 0.5 * I - hj / 8.0 * A[i + 1]
                dxc_uk = hj / 8.0 * B[i]
                dxc_uk1 = -hj / 8.0 * B[i + 1]
                dxc_h = (F[i] - F[i + 1]) / 8.0
                J_eq[rs, self.ix(k)] += I + hj / 6.0 * (A[i] + 4.0 * Ac[i] @ dxc_xk)
                J_eq[rs, self.ix(k + 1)] += -I + hj / 6.0 * (A[i + 1] + 4.0 * Ac[i] @ dxc_xk1)
                J_eq[rs, self.iu(k)] += hj / 6.0 * (B[i] + 4.0 * (Ac[i] @ dxc_uk + 0.5 * Bc[i]))
                J_eq[rs, self.iu(k + 1)] += hj / 6.0 * (B[i + 1] + 4.0 * (Ac[i] @ dxc_uk1 + 0.5 * Bc[i]))
                J_eq[rs, self.ih(j)] += (F[i] + 4.0 * Fc[i] + F[i + 1]) / 6.0 + hj / 6.0 * 4.0 * Ac[i] @ dxc_h
                row += nx
        for bg in self.boundary_guards:
            k = int(self.last_knot[bg.phase])
            c_eq[row] = bg.value(X[k])
            J_eq[row, self.ix(k)] = bg.grad(X[k])
            row += 1

        c_in = np.zeros(self.m_in)
        J_in = np.zeros((self.m_in, self.n))
        cache = {}
        for r, (j, k, c) in enumerate(self._in_rows):
            if (j, k) not in cache:
                vals, grads = self.phases[j].containment(X[k][None, :])
                cache[(j, k)] = (vals[0], grads[0])
            vals, grads = cache[(j, k)]
            c_in[r] = vals[c]
            J_in[r, self.ix(k)] = grads[c]
        return c_eq, J_eq, c_in, J_in

    # -- conversion
    def to_trajectory(self, z, result: SQPResult | None = None) -> "NominalTrajectory":
        X, U, h = self.split(z)
        phases = []
        t0 = 0.0
        for j, ph in enumerate(self.phases):
            a, b = self.first_knot[j], self.last_knot[j]
            Xj, Uj = X[a:b + 1].copy(), U[a:b + 1].copy()
            phases.append(PhaseTrajectory(mode=ph.mode, t0=t0, h=float(h[j]), X=Xj, U=Uj, F=ph.f(Xj, Uj)))
            t0 += ph.n * float(h[j])
        info = {}
        if result is not None:
            info = {"iterations": result.iterations, "cost": result.cost,
                    "max_violation": result.max_violation, "kkt_residual": result.kkt_residual,
                    "status": result.status}
        return NominalTrajectory(phases=phases, info=info)


def _fd_jacobian(fun, x, eps: float = 1e-6):
    x = np.asarray(x, float)
    cols = []
    for i in range(x.size):
        e = np.zeros_like(x)
        e[i] = eps * max(1.0, abs(x[i]))
        cols.append((fun(x + e) - fun(x - e)) / (2.0 * e[i]))
    return np.stack(cols, axis=-1)


# --------------------------------------------------------------------------
# vehicle problem


def _vehicle_phase(mode: Mode, n: int, params: VehicleParams) -> PhaseDef:
    def f(X, U):
        return dyn.dynamics_batch(X, U, mode, params)

    def jac(X, U):
        return dyn.linearize_batch(X, U, mode, params)

    def containment(X):
        X = np.atleast_2d(X)
        p1 = dyn.guard_psi1(X.T, params)
        p2 = dyn.guard_psi2(X.T, params)
        s1, s2 = dyn.guard_stack(mode, 1.0, 1.0)  # signs of the stack entries
        vals = np.stack([s1 * np.asarray(p1, float), s2 * np.asarray(p2, float)], axis=1)
        grads = np.empty((X.shape[0], 2, NX))
        for i, x in enumerate(X):
            g1, g2 = dyn.guard_gradients(x, params)
            grads[i, 0] = s1 * g1
            grads[i, 1] = s2 * g2
        return vals, grads

    return PhaseDef(n=n, f=f, jac=jac, mode=mode, containment=containment)


def build_problem(p: TrajOptProblem, params: VehicleParams) -> CollocationNLP:
    sched = p.schedule
    phases = [_vehicle_phase(m, n, params) for m, n in zip(sched.phases, sched.knots)]
    bgs = []
    for j, (a, b) in enumerate(zip(sched.phases, sched.phases[1:])):
        which = boundary_guard(a, b)

        def value(x, which=which):
            return float(dyn.guards(x, params)[which])

        def grad(x, which=which):
            return dyn.guard_gradients(x, params)[which]

        bgs.append(BoundaryGuard(phase=j, value=value, grad=grad, skip_component=which))
    xi, di = np.asarray(p.x_init), np.asarray(p.delta_init)
    xf, df = np.asarray(p.x_final), np.asarray(p.delta_final)
    return CollocationNLP(
        NX, NU, phases, p.R, p.D, p.x_min, p.x_max, p.u_min, p.u_max, p.h_min, p.h_max,
        xi - di, xi + di, xf - df, xf + df, boundary_guards=bgs,
    )


def initial_guess(nlp: CollocationNLP, p: TrajOptProblem) -> np.ndarray:
    """Straight line from x_init to x_final, mid-range controls and steps."""
    s = np.linspace(0.0, 1.0, nlp.K)[:, None]
    X = (1 - s) * np.asarray(p.x_init) + s * np.asarray(p.x_final)
    U = np.tile(0.5 * (np.asarray(p.u_min) + np.asarray(p.u_max)), (nlp.K, 1))
    h = np.full(nlp.n_phase, 0.5 * (p.h_min + p.h_max))
    return nlp.pack(X, U, h)


def solve(nlp: CollocationNLP, guess, opts: SolverOptions | None = None) -> "NominalTrajectory":
    guess = np.asarray(guess, float)
    if guess.shape != (nlp.n,):
        raise ValueError(f"guess has shape {guess.shape}, expected ({nlp.n},)")
    result = solve_sqp(nlp, guess, opts)
    return nlp.to_trajectory(result.z, result)


def optimize_water_exit(p: TrajOptProblem, params: VehicleParams, opts: SolverOptions | None = None,
                        guess=None) -> "NominalTrajectory":
    nlp = build_problem(p, params)
    z0 = initial_guess(nlp, p) if guess is None else guess
    return solve(nlp, z0, opts)


# --------------------------------------------------------------------------
# nominal trajectory


@dataclass
class PhaseTrajectory:
    mode: Mode | None
    t0: float
    h: float
    X: np.ndarray
    U: np.ndarray
    F: np.ndarray

    @property
    def n(self) -> int:
        return self.X.shape[0] - 1

    @property
    def duration(self) -> float:
        return self.n * self.h


@dataclass
class NominalTrajectory:
    phases: list
    info: dict = field(default_factory=dict)

    @property
    def schedule(self) -> tuple:
        return tuple(ph.mode for ph in self.phases)

    @property
    def duration(self) -> float:
        return sum(ph.duration for ph in self.phases)

    def phase_index(self, mode: Mode) -> int:
        for j, ph in enumerate(self.phases):
            if ph.mode == mode:
                return j
        raise KeyError(f"mode {mode} not in trajectory schedule")

    def phase(self, mode: Mode) -> PhaseTrajectory:
        return self.phases[self.phase_index(mode)]

    def knots(self) -> tuple[np.ndarray, np.ndarray]:
        X = np.concatenate([self.phases[0].X] + [ph.X[1:] for ph in self.phases[1:]])
        U = np.concatenate([self.phases[0].U] + [ph.U[1:] for ph in self.phases[1:]])
        return X, U

    def cost(self, R, D) -> float:
        total = 0.0
        for ph in self.phases:
            for k in range(ph.n):
                total += stage_cost(ph.U[k], ph.h, R, D)
        return total

    def sample(self, tau: float, mode: Mode) -> tuple[np.ndarray, np.ndarray]:
        x, u, _ = sample(self, tau, mode)
        return x, u

    # -- serialization
    def to_csv(self, path, metadata: dict | None = None) -> None:
        Path(path).write_text(self.to_csv_text(metadata))

    def to_csv_text(self, metadata: dict | None = None) -> str:
        meta = {"format": "uaav-trajectory", "version": TRAJ_CSV_VERSION,
                "schedule": [ph.mode.label if ph.mode is not None else None for ph in self.phases],
                "knots": [ph.n for ph in self.phases],
                "durations": [float(ph.duration) for ph in self.phases]}
        meta.update({k: _plain(v) for k, v in self.info.items()})
        if metadata:
            meta.update({k: _plain(v) for k, v in metadata.items()})
        buf = io.StringIO()
        for line in yaml.safe_dump(meta, sort_keys=True, default_flow_style=None).splitlines():
            buf.write(f"# {line}\n")
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["phase", "k", "t", *dyn.STATE_NAMES, *dyn.INPUT_NAMES, "h"])
        for j, ph in enumerate(self.phases):
            for k in range(ph.n + 1):
                w.writerow([j, k, _fmt(ph.t0 + k * ph.h), *map(_fmt, ph.X[k]), *map(_fmt, ph.U[k]), _fmt(ph.h)])
        return buf.getvalue()

    @classmethod
    def from_csv(cls, path, params: VehicleParams) -> "NominalTrajectory":
        text = Path(path).read_text()
        header = "\n".join(line[2:] for line in text.splitlines() if line.startswith("# "))
        meta = yaml.safe_load(header) or {}
        rows = list(csv.DictReader(line for line in text.splitlines() if not line.startswith("#")))
        if not rows:
            raise TrajectoryFormatError("trajectory file has no knots")
        schedule = [Mode.parse(m) for m in meta.get("schedule", [])]
        by_phase: dict[int, list] = {}
        for r in rows:
            by_phase.setdefault(int(r["phase"]), []).append(r)
        phases = []
        for j in sorted(by_phase):
            rs = sorted(by_phase[j], key=lambda r: int(r["k"]))
            X = np.array([[float(r[name]) for name in dyn.STATE_NAMES] for r in rs])
            U = np.array([[float(r[name]) for name in dyn.INPUT_NAMES] for r in rs])
            mode = schedule[j] if j < len(schedule) else None
            h = float(rs[0]["h"])
            F = dyn.dynamics_batch(X, U, mode, params)
            phases.append(PhaseTrajectory(mode=mode, t0=float(rs[0]["t"]), h=h, X=X, U=U, F=F))
        traj = cls(phases=phases, info={k: v for k, v in meta.items()
                                        if k in ("iterations", "cost", "max_violation", "kkt_residual", "status")})
        traj.validate()
        return traj

    def validate(self, tol: float = 1e-9) -> None:
        for j, (a, b) in enumerate(zip(self.phases, self.phases[1:])):
            gap = np.abs(a.X[-1] - b.X[0]).max()
            if gap > tol:
                raise TrajectoryFormatError(f"state discontinuity {gap:.3e} between phases {j} and {j + 1}")
            if abs(a.t0 + a.duration - b.t0) > 1e-6:
                raise TrajectoryFormatError(f"time gap between phases {j} and {j + 1}")
            if a.mode is not None and b.mode is not None and boundary_guard(a.mode, b.mode) is None:
                raise TrajectoryFormatError(f"phases {j} and {j + 1} are not adjacent modes")


class TrajectoryFormatError(ValueError):
    pass


def _fmt(v) -> str:
    return repr(float(v))


def _plain(v):
    if isinstance(v, (np.floating, np.integer)):
        return v.item()
    if isinstance(v, np.ndarray):
        return v.tolist()
    return v


def sample(traj: NominalTrajectory, tau: float, mode: Mode) -> tuple[np.ndarray, np.ndarray, bool]:
    """Reference state/control at phase-local time ``tau``.

    The state uses the cubic Hermite interpolant through the knots and the
    knot derivatives (its midpoint value is the collocation midpoint); the
    control is linear.  Returns ``(x, u, clamped)``.
    """
    ph = traj.phase(mode)
    T = ph.duration
    clamped = False
    if tau < 0.0:
        tau, clamped = 0.0, True
    elif tau > T:
        tau, clamped = T, True
    s = tau / ph.h
    nearest = round(s)
    if abs(s - nearest) <= 1e-9:  # knot times come back as the knots themselves
        return ph.X[nearest].copy(), ph.U[nearest].copy(), clamped
    k = min(int(s), ph.n - 1)
    s -= k
    if s == 0.0:
        return ph.X[k].copy(), ph.U[k].copy(), clamped
    if s == 1.0:
        return ph.X[k + 1].copy(), ph.U[k + 1].copy(), clamped
    x0, x1, f0, f1 = ph.X[k], ph.X[k + 1], ph.F[k], ph.F[k + 1]
    s2, s3 = s * s, s * s * s
    h00 = 2 * s3 - 3 * s2 + 1
    h10 = s3 - 2 * s2 + s
    h01 = -2 * s3 + 3 * s2
    h11 = s3 - s2
    x = h00 * x0 + h10 * ph.h * f0 + h01 * x1 + h11 * ph.h * f1
    u = (1 - s) * ph.U[k] + s * ph.U[k + 1]
    return x, u, clamped
