"""Solver for the box-constrained trajectory optimization problem.

Method of multipliers on the dynamics defects wrapped around a projected
Newton inner solve: the augmented Lagrangian subproblem keeps only box
constraints, which the inner solver handles with an active-set split and
a backtracking search along the projected step.  Curvature comes from a
Gauss-Newton model assembled from per-stage blocks, so the cost of one
iteration grows linearly with the horizon.

Everything is deterministic: same problem, guess and options give the
same iterates bit for bit.  A wall-clock budget turns an unfinished solve
into a usable iterate with status "max_iter" instead of an exception; the
control loop treats that as a signal to fall back on its previous plan.
"""

from __future__ import annotations

import time
from dataclasses import dataclass

import numpy as np
from scipy.linalg import LinAlgError, cho_factor, cho_solve, solveh_banded

from .dynamics import IBETA, NU, NX
from .kinematics import fk_array, jac_batch
from .ocp import (
    OcpProblem,
    OcpSolution,
    defect_jacobian_blocks,
    dynamics_defects,
    objective,
    objective_gradient,
    shift_warm_start,
)

__all__ = ["SolverOptions", "KktReport", "solve", "kkt_report", "minimize_box"]


@dataclass(frozen=True)
class SolverOptions:
    """Termination and penalty settings for one solve."""

    max_outer: int = 25
    max_inner: int = 30
    feasibility_tol: float = 1e-6
    optimality_tol: float = 1e-4
    bound_tol: float = 1e-8
    penalty0: float = 1e5
    penalty_growth: float = 10.0
    penalty_max: float = 1e8
    budget: float = 10.0  # wall-clock seconds
    inner_tol0: float = 1e-2

    def __post_init__(self):
        if min(self.feasibility_tol, self.optimality_tol, self.bound_tol) <= 0:
            raise ValueError("tolerances must be positive")
        if self.budget <= 0:
            raise ValueError("budget must be positive")
        if self.penalty0 <= 0 or self.penalty_growth <= 1:
            raise ValueError("penalty settings must be positive (growth > 1)")
        if self.penalty_max < self.penalty0:
            raise ValueError("penalty cap below initial penalty")


def _dense_newton_step(hess, z, g, free, damping=0.0):
    """Newton step on the free variables from a dense curvature model."""
    step = -g.copy()
    if not free.any():
        return step
    H = hess(z)
    Hff = H[np.ix_(free, free)]
    if damping > 0.0:
        idx = np.arange(Hff.shape[0])
        Hff = Hff.copy()
        Hff[idx, idx] += damping * (1.0 + np.abs(Hff[idx, idx]))
    reg = 0.0
    for _attempt in range(6):
        try:
            M = Hff if reg == 0.0 else Hff + reg * np.eye(Hff.shape[0])
            cf = cho_factor(M, lower=True, check_finite=False)
            step[free] = cho_solve(cf, -g[free], check_finite=False)
            return step
        except LinAlgError:
            trace = float(np.trace(Hff)) / Hff.shape[0]
            reg = 1e-8 * (1.0 + abs(trace)) if reg == 0.0 else reg * 100.0
    return step


def minimize_box(value, grad, hess, z0, lb, ub, tol, max_iter, deadline,
                 armijo=1e-4, newton_step=None):
    """Projected Newton descent of a smooth function over a box.

    ``value``/``grad``/``hess`` evaluate the function, its gradient and a
    positive-semidefinite curvature model.  Variables pressing against
    their bound are frozen out of the Newton system; trial points follow
    the projected arc clip(z + alpha * step).  A structured linear-algebra
    backend can replace the dense one via ``newton_step(z, g, free,
    damping)``.  Levenberg-style damping reacts to line-search feedback,
    which keeps progress steady when the curvature model turns poor (for
    example with references beyond the reachable workspace).  Returns
    (z, f, g, iterations, status) with status one of
    converged | budget | stalled | max_iter.
    """
    lb = np.asarray(lb, dtype=float)
    ub = np.asarray(ub, dtype=float)
    z = np.clip(np.asarray(z0, dtype=float), lb, ub)
    f = value(z)
    g = grad(z)
    iters = 0
    damping = 0.0
    alpha0 = 1.0  # line search resumes near the last accepted step size
    for _ in range(max_iter):
        pg = float(np.max(np.abs(z - np.clip(z - g, lb, ub))))
        if pg <= tol:
            return z, f, g, iters, "converged"
        if time.perf_counter() >= deadline:
            return z, f, g, iters, "budget"
        eps = min(1e-6, pg)
        active = ((z <= lb + eps) & (g > 0.0)) | ((z >= ub - eps) & (g < 0.0))
        free = ~active
        if newton_step is not None:
            step = newton_step(z, g, free, damping)
        else:
            step = _dense_newton_step(hess, z, g, free, damping)
        alpha = alpha0
        accepted = False
        for _ls in range(30):
            z_new = np.clip(z + alpha * step, lb, ub)
            dz = z_new - z
            if not dz.any():
                break
            f_new = value(z_new)
            if f_new <= f + armijo * float(g @ dz):
                accepted = True
                break
            alpha *= 0.5
        if not accepted:
            if damping < 1e6:
                # poor or indefinite model: damp harder, retry from here
                damping = max(16.0 * damping, 1e-3)
                alpha0 = 1.0
                continue
            return z, f, g, iters, "stalled"
        alpha0 = min(1.0, 2.0 * alpha)
        if alpha >= 1.0:
            damping *= 0.25
            if damping < 1e-8:
                damping = 0.0
        elif alpha < 0.25:
            # chronically short steps: the model overshoots, damp it and
            # let the step direction bend toward the gradient
            damping = max(4.0 * damping, 1e-3)
            alpha0 = 1.0
        z, f = z_new, f_new
        g = grad(z)
        iters += 1
    return z, f, g, iters, "max_iter"


_NS = NU + NX  # variables per stage in interleaved order: (u_k, xi_{k+1})


class _MeritModel:
    """Augmented-Lagrangian evaluations with stage-structured curvature.

    The defect Jacobian blocks at a given point are needed by both the
    gradient and the curvature model; they are recomputed only when the
    evaluation point changes.  The Gauss-Newton system is assembled from
    per-stage blocks into symmetric-banded storage (the Hessian is block
    tridiagonal once variables are ordered stage by stage) and solved
    with a banded Cholesky, so one Newton step costs O(N).
    """

    def __init__(self, problem: OcpProblem):
        self.problem = problem
        self._key: bytes | None = None
        self._blocks = None
        self._c_key: bytes | None = None
        self._c = None
        n = problem.n
        self.bw = _NS * 2 - 1 if n > 1 else _NS - 1
        # interleaved ordering: x_int[i] = z[perm[i]]
        stages = np.arange(n)
        perm = np.empty((n, _NS), dtype=np.intp)
        perm[:, :NU] = NU * stages[:, None] + np.arange(NU)
        perm[:, NU:] = NU * n + NX * stages[:, None] + np.arange(NX)
        self.perm = perm.ravel()
        # scatter maps: lower-banded storage ab[r, c] = H[c + r, c]
        ti, tj = np.tril_indices(_NS)
        self._d_rows = np.tile(ti - tj, n)
        self._d_cols = (_NS * stages[:, None] + tj[None, :]).ravel()
        self._d_ij = (ti, tj)
        if n > 1:
            p, q = np.meshgrid(np.arange(_NS), np.arange(_NS), indexing="ij")
            p, q = p.ravel(), q.ravel()
            self._o_rows = np.tile(_NS + q - p, n - 1)
            self._o_cols = (_NS * stages[: n - 1, None] + p[None, :]).ravel()
            self._o_ij = (p, q)
        self._ab = np.zeros((self.bw + 1, _NS * n))
        self._row_band = np.arange(1, self.bw + 1)

    def blocks(self, z: np.ndarray):
        key = z.tobytes()
        if key != self._key:
            self._blocks = defect_jacobian_blocks(self.problem, z)
            self._key = key
        return self._blocks

    def defects(self, z: np.ndarray) -> np.ndarray:
        key = z.tobytes()
        if key != self._c_key:
            self._c = dynamics_defects(self.problem, z)
            self._c_key = key
        return self._c

    def jac_t_vec(self, z: np.ndarray, y: np.ndarray) -> np.ndarray:
        """Defect-Jacobian transpose times a stage-stacked vector."""
        Ax, Bu = self.blocks(z)
        n = self.problem.n
        Y = y.reshape(n, NX)
        gU = np.einsum("kij,ki->kj", Bu, Y)
        gX = Y.copy()
        if n > 1:
            gX[:-1] += np.einsum("kij,ki->kj", Ax[1:], Y[1:])
        return np.concatenate([gU.ravel(), gX.ravel()])

    def value(self, z, lam, mu) -> float:
        U, X = self.problem.split(z)
        c = self.defects(z)
        J = objective(X, U, self.problem.refs, self.problem.weights, self.problem.robot)
        return float(J - lam @ c + 0.5 * mu * (c @ c))

    def grad(self, z, lam, mu) -> np.ndarray:
        c = self.defects(z)
        return objective_gradient(self.problem, z) + self.jac_t_vec(z, mu * c - lam)

    def stage_blocks(self, z, mu):
        """Diagonal and coupling blocks of the curvature model.

        Returns D: (n, 11, 11) with D[k] = H[s_k, s_k] and O: (n-1, 11, 11)
        with O[k] = H[s_k, s_{k+1}], where s_k = (u_k, xi_{k+1}).  The
        objective contributes its exact Hessian (including the forward-map
        curvature scaled by the tracking error, which dominates when the
        reference is far away); the defect penalty contributes its
        Gauss-Newton part.
        """
        problem = self.problem
        n = problem.n
        w = problem.weights
        lengths = problem.robot.lengths
        _, X = problem.split(z)
        Ax, Bu = self.blocks(z)
        D = np.zeros((n, _NS, _NS))
        Jb = jac_batch(X[:, 0:3], lengths)
        Hq = 2.0 * np.einsum("kri,r,krj->kij", Jb, w.q1, Jb)
        # error-weighted second derivative of the forward map:
        # d2x/dqi dqj = -sum_{k>=max(i,j)} L_k cos(phi_k), analogously for z
        phi = np.cumsum(X[:, 0:3], axis=-1)
        lc = lengths * np.cos(phi)
        ls = lengths * np.sin(phi)
        err = fk_array(X[:, 0:3], lengths) - problem.refs.poses
        mx = np.maximum.outer(np.arange(3), np.arange(3))
        d2x = -np.cumsum(lc[:, ::-1], axis=-1)[:, ::-1][:, mx]
        d2z = np.cumsum(ls[:, ::-1], axis=-1)[:, ::-1][:, mx]
        corr = 2.0 * (
            (w.q1[0] * err[:, 0])[:, None, None] * d2x
            + (w.q1[1] * err[:, 1])[:, None, None] * d2z
        )
        Hq += corr
        # large errors can turn these blocks indefinite; flip negative
        # curvature instead of letting the factorization fail; skip the
        # spectral fix while the correction is a small perturbation
        if np.max(np.abs(corr)) > 0.2 * np.max(np.abs(Hq)):
            eigval, eigvec = np.linalg.eigh(Hq)
            floor = 1e-8 * np.maximum(eigval[:, -1:], 1.0)
            eigval = np.maximum(np.abs(eigval), floor)
            Hq = np.einsum("kij,kj,klj->kil", eigvec, eigval, eigvec)
        D[:, NU : NU + 3, NU : NU + 3] = Hq
        D[:, NU + IBETA, NU + IBETA] += 2.0 * w.q2
        du = np.arange(NU)
        D[:, du, du] += 2.0 * w.r
        # one fused product covers all four Jacobian-transpose blocks:
        # G = [Bu|Ax]^T [Bu|Ax] = [[BtB, BtA], [AtB, AtA]]
        BA = np.concatenate([Bu, Ax], axis=2)
        G = mu * np.einsum("kij,kil->kjl", BA, BA)
        D[:, :NU, :NU] += G[:, :NU, :NU]
        D[:, :NU, NU:] += mu * Bu.transpose(0, 2, 1)
        D[:, NU:, :NU] += mu * Bu
        dx = np.arange(NU, _NS)
        D[:, dx, dx] += mu
        if n > 1:
            D[:-1, NU:, NU:] += G[1:, NU:, NU:]
            O = np.zeros((n - 1, _NS, _NS))
            O[:, NU:, :NU] = G[1:, NU:, :NU]
            O[:, NU:, NU:] = mu * Ax[1:].transpose(0, 2, 1)
        else:
            O = np.zeros((0, _NS, _NS))
        return D, O

    def newton_step(self, z, g, free, mu, damping=0.0):
        """Newton step on the free variables via banded Cholesky."""
        step = -g.copy()
        if not free.any():
            return step
        D, O = self.stage_blocks(z, mu)
        ab = self._ab
        ab.fill(0.0)
        ti, tj = self._d_ij
        ab[self._d_rows, self._d_cols] = D[:, ti, tj].ravel()
        if O.shape[0]:
            p, q = self._o_ij
            ab[self._o_rows, self._o_cols] = O[:, p, q].ravel()
        if damping > 0.0:
            ab[0] += damping * (1.0 + np.abs(ab[0]))
        # freeze actively bounded variables: unit diagonal, no coupling
        act = np.flatnonzero(~free[self.perm])
        if act.size:
            ab[:, act] = 0.0
            cols = act[:, None] - self._row_band[None, :]
            valid = cols >= 0
            rows = np.broadcast_to(self._row_band, cols.shape)
            ab[rows[valid], cols[valid]] = 0.0
            ab[0, act] = 1.0
        rhs = -g[self.perm]
        reg = 0.0
        for _attempt in range(6):
            try:
                M = ab if reg == 0.0 else ab + np.concatenate(
                    [np.full((1, ab.shape[1]), reg), np.zeros((self.bw, ab.shape[1]))]
                )
                sol = solveh_banded(M, rhs, lower=True, check_finite=False)
                step[self.perm] = sol
                return step
            except LinAlgError:
                scale = float(np.mean(np.abs(ab[0])))
                reg = 1e-8 * (1.0 + scale) if reg == 0.0 else reg * 100.0
        return step


def solve(
    problem: OcpProblem,
    initial_guess=None,
    options: SolverOptions | None = None,
    multipliers0=None,
    penalty0: float | None = None,
) -> OcpSolution:
    """Solve one receding-horizon problem to local optimality.

    ``multipliers0``/``penalty0`` re-seed the method of multipliers from a
    previous solve, which is what makes warm-started ticks cheap.  On
    budget exhaustion the best iterate so far comes back with status
    "max_iter"; the function never raises from inside the loop.
    """
    opts = options or SolverOptions()
    t_start = time.perf_counter()
    deadline = t_start + opts.budget
    n = problem.n
    lb, ub = problem.decision_bounds()

    if initial_guess is None:
        initial_guess = shift_warm_start(None, problem.xi0, problem)
    z = np.asarray(initial_guess, dtype=float)
    if z.shape != (problem.n_dec,):
        raise ValueError(f"initial guess must have dimension {problem.n_dec}")
    if not np.all(np.isfinite(z)):
        raise ValueError("initial guess contains non-finite values")
    if np.any(lb >= ub):
        U, X = problem.split(np.clip(z, np.minimum(lb, ub), np.maximum(lb, ub)))
        return OcpSolution(
            controls=U, states=X, objective=np.inf, status="infeasible_bounds",
            iterations=0, max_defect=np.inf, solve_time=time.perf_counter() - t_start,
        )
    z = np.clip(z, lb, ub)

    lam = (
        np.zeros(NX * n)
        if multipliers0 is None
        else np.array(multipliers0, dtype=float, copy=True)
    )
    if lam.shape != (NX * n,):
        raise ValueError("multiplier vector dimension mismatch")
    mu = float(penalty0) if penalty0 else opts.penalty0

    merit = _MeritModel(problem)
    # warm multipliers skip the loose-to-tight inner schedule
    omega = opts.optimality_tol if multipliers0 is not None else opts.inner_tol0
    prev_cnorm = np.inf
    status = "max_iter"
    outer_done = 0
    cnorm = float(np.max(np.abs(dynamics_defects(problem, z))))

    for _outer in range(opts.max_outer):
        # convergence is judged before each inner solve, so re-solving
        # from a converged point returns it untouched
        c = merit.defects(z)
        cnorm = float(np.max(np.abs(c)))
        glag = objective_gradient(problem, z) + merit.jac_t_vec(z, -lam)
        pg = float(np.max(np.abs(z - np.clip(z - glag, lb, ub))))
        if cnorm <= opts.feasibility_tol and pg <= opts.optimality_tol:
            status = "converged"
            break
        if time.perf_counter() >= deadline:
            break
        lam_k, mu_k = lam, mu
        tol_k = max(opts.optimality_tol, omega)
        z, _f, g_in, _inner, inner_status = minimize_box(
            lambda zz: merit.value(zz, lam_k, mu_k),
            lambda zz: merit.grad(zz, lam_k, mu_k),
            None,
            z, lb, ub,
            tol=tol_k,
            max_iter=opts.max_inner,
            deadline=deadline,
            newton_step=lambda zz, gg, fr, dmp: merit.newton_step(zz, gg, fr, mu_k, dmp),
        )
        outer_done += 1
        c = merit.defects(z)
        cnorm = float(np.max(np.abs(c)))
        pg_in = float(np.max(np.abs(z - np.clip(z - g_in, lb, ub))))
        if inner_status in ("converged", "stalled") or pg_in <= 10.0 * tol_k:
            # first-order multiplier update only near subproblem stationarity,
            # and penalty growth only when feasibility genuinely lags
            if cnorm <= max(opts.feasibility_tol, 0.25 * prev_cnorm):
                lam = lam - mu * c
                prev_cnorm = min(prev_cnorm, cnorm)
                omega = max(opts.optimality_tol, omega * 0.2)
            elif inner_status in ("converged", "stalled"):
                mu = min(mu * opts.penalty_growth, opts.penalty_max)
                omega = max(opts.optimality_tol, omega * 0.5)
        # an inner max_iter return resumes the same subproblem next round
        if inner_status == "budget":
            break

    U, X = problem.split(z)
    J = objective(X, U, problem.refs, problem.weights, problem.robot)
    return OcpSolution(
        controls=U,
        states=X,
        objective=float(J),
        status=status,
        iterations=outer_done,
        max_defect=cnorm,
        solve_time=time.perf_counter() - t_start,
        multipliers=lam,
        penalty=mu,
    )


@dataclass(frozen=True)
class KktReport:
    """First-order optimality summary of a returned solution.

    ``stationarity`` is the scale-invariant measure used by the solver:
    the projected Lagrangian-gradient norm divided by (1 + gradient norm).
    """

    defect_norm: float
    bound_violation: float
    stationarity: float
    lagrangian_gradient: np.ndarray

    def as_dict(self) -> dict:
        return {
            "defect_norm": self.defect_norm,
            "bound_violation": self.bound_violation,
            "stationarity": self.stationarity,
        }


def kkt_report(problem: OcpProblem, solution: OcpSolution) -> KktReport:
    """Defect norm, bound violation and projected stationarity of a solution."""
    z = problem.pack(solution.controls, solution.states)
    c = dynamics_defects(problem, z)
    lb, ub = problem.decision_bounds()
    bviol = float(max(np.max(lb - z, initial=0.0), np.max(z - ub, initial=0.0), 0.0))
    lam = (
        solution.multipliers
        if solution.multipliers is not None
        else np.zeros(NX * problem.n)
    )
    merit = _MeritModel(problem)
    glag = objective_gradient(problem, z) + merit.jac_t_vec(z, -lam)
    stationarity = float(np.max(np.abs(z - np.clip(z - glag, lb, ub)))) / (
        1.0 + float(np.max(np.abs(glag)))
    )
    return KktReport(
        defect_norm=float(np.max(np.abs(c))),
        bound_violation=bviol,
        stationarity=stationarity,
        lagrangian_gradient=glag,
    )
