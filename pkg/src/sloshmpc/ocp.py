"""Receding-horizon optimal control problem for the arm + liquid system.

Multiple-shooting transcription: the decision vector stacks the controls
for stages 0..N-1 followed by the states for stages 1..N,

    z = [u_0, ..., u_{N-1}, xi_1, ..., xi_N],   dim = 3N + 8N,

with the current state xi_0 substituted (not a decision variable).  The
discretized dynamics appear as per-stage defect equalities; joint angle,
velocity and acceleration limits appear as box bounds on z.  The slosh
states carry no bounds.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import dynamics
from .dynamics import NU, NX, LiquidParams, derivative_array, linearize_batch, rhs_batch
from .kinematics import RobotParams, fk_array, jac_batch


@dataclass(frozen=True)
class Weights:
    """Objective weights: task tracking, slosh angle, control effort."""

    q1: np.ndarray = field(default_factory=lambda: np.array([500.0, 500.0, 100.0]))
    q2: float = 0.1
    r: np.ndarray = field(default_factory=lambda: np.array([0.01, 0.01, 0.01]))

    def __post_init__(self):
        object.__setattr__(self, "q1", np.asarray(self.q1, dtype=float))
        object.__setattr__(self, "r", np.asarray(self.r, dtype=float))
        if self.q1.shape != (3,) or self.r.shape != (3,):
            raise ValueError("q1 and r must be 3-vectors")
        if np.any(self.q1 < 0) or self.q2 < 0 or np.any(self.r < 0):
            raise ValueError("weights cannot be negative")
        if not (np.any(self.q1 > 0) or self.q2 > 0):
            raise ValueError("at least one tracking or slosh weight must be positive")


#: Named weight sets: P1 prioritizes tracking, P2 prioritizes slosh suppression.
PRESETS = {
    "P1": Weights(q1=np.array([500.0, 500.0, 100.0]), q2=0.1, r=np.array([0.01] * 3)),
    "P2": Weights(q1=np.array([100.0, 100.0, 1.0]), q2=1000.0, r=np.array([0.01] * 3)),
}


def preset(name: str) -> Weights:
    """Look up a named weight set ("P1" or "P2", case-insensitive)."""
    key = str(name).upper()
    if key not in PRESETS:
        raise ValueError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    return PRESETS[key]


@dataclass(frozen=True)
class Bounds:
    """Box limits on joint angles, velocities and accelerations."""

    q_min: np.ndarray = field(default_factory=lambda: np.full(3, -2 * np.pi))
    q_max: np.ndarray = field(default_factory=lambda: np.full(3, 2 * np.pi))
    qdot_min: np.ndarray = field(default_factory=lambda: np.full(3, -np.pi))
    qdot_max: np.ndarray = field(default_factory=lambda: np.full(3, np.pi))
    u_min: np.ndarray = field(default_factory=lambda: np.full(3, -8.0))
    u_max: np.ndarray = field(default_factory=lambda: np.full(3, 8.0))

    def __post_init__(self):
        for name in ("q_min", "q_max", "qdot_min", "qdot_max", "u_min", "u_max"):
            object.__setattr__(self, name, np.asarray(getattr(self, name), dtype=float))
        for lo, hi in (
            (self.q_min, self.q_max),
            (self.qdot_min, self.qdot_max),
            (self.u_min, self.u_max),
        ):
            if lo.shape != (3,) or hi.shape != (3,):
                raise ValueError("bounds must be 3-vectors")
            if np.any(lo >= hi):
                raise ValueError("lower bounds must be strictly below upper bounds")

    def state_lower(self) -> np.ndarray:
        out = np.full(NX, -np.inf)
        out[0:3] = self.q_min
        out[3:6] = self.qdot_min
        return out

    def state_upper(self) -> np.ndarray:
        out = np.full(NX, np.inf)
        out[0:3] = self.q_max
        out[3:6] = self.qdot_max
        return out


@dataclass(frozen=True)
class HorizonConfig:
    """Stage count and sampling period of the prediction horizon."""

    n: int = 30
    dt: float = 1.0 / 30.0

    def __post_init__(self):
        if self.n < 1:
            raise ValueError("horizon must have at least one stage")
        if self.dt <= 0.0:
            raise ValueError("dt must be positive")


@dataclass(frozen=True)
class ReferenceTrajectory:
    """Reference container poses for stages 1..N, shape (N, 3)."""

    poses: np.ndarray

    def __post_init__(self):
        object.__setattr__(self, "poses", np.atleast_2d(np.asarray(self.poses, dtype=float)))
        if self.poses.ndim != 2 or self.poses.shape[1] != 3:
            raise ValueError("reference poses must have shape (N, 3)")
        if not np.all(np.isfinite(self.poses)):
            raise ValueError("reference poses must be finite")

    def __len__(self) -> int:
        return self.poses.shape[0]


def tracking_error(pose, ref) -> np.ndarray:
    """Componentwise pose - ref; theta as a plain (unwrapped) difference."""
    p = pose.as_array() if hasattr(pose, "as_array") else np.asarray(pose, dtype=float)
    r = ref.as_array() if hasattr(ref, "as_array") else np.asarray(ref, dtype=float)
    return p - r


@dataclass(frozen=True)
class OcpProblem:
    """One receding-horizon solve: initial state, references, weights, limits."""

    xi0: np.ndarray
    refs: ReferenceTrajectory
    weights: Weights
    bounds: Bounds
    horizon: HorizonConfig
    robot: RobotParams
    liquid: LiquidParams
    xi0_clamped: bool = False

    @property
    def n(self) -> int:
        return self.horizon.n

    @property
    def n_dec(self) -> int:
        return (NU + NX) * self.horizon.n

    def split(self, z: np.ndarray):
        """Decision vector -> (controls (N, 3), states (N, 8))."""
        n = self.n
        z = np.asarray(z, dtype=float)
        if z.shape != (self.n_dec,):
            raise ValueError(f"decision vector must have dimension {self.n_dec}")
        return z[: NU * n].reshape(n, NU), z[NU * n :].reshape(n, NX)

    def pack(self, controls: np.ndarray, states: np.ndarray) -> np.ndarray:
        return np.concatenate([np.ravel(controls), np.ravel(states)])

    def decision_bounds(self):
        """Box bounds (lb, ub) on the full decision vector."""
        n = self.n
        lb = np.concatenate([np.tile(self.bounds.u_min, n), np.tile(self.bounds.state_lower(), n)])
        ub = np.concatenate([np.tile(self.bounds.u_max, n), np.tile(self.bounds.state_upper(), n)])
        return lb, ub


def build_problem(xi0, refs, weights, bounds, horizon, robot, liquid) -> OcpProblem:
    """Assemble and validate a problem instance.

    An initial state outside the joint box is clamped onto it and the
    problem flagged, so a receding-horizon loop never hands the solver an
    infeasible anchor.
    """
    xi0 = np.asarray(xi0, dtype=float).copy()
    if xi0.shape != (NX,):
        raise ValueError(f"initial state must have dimension {NX}")
    if not np.all(np.isfinite(xi0)):
        raise ValueError("initial state must be finite")
    if not isinstance(refs, ReferenceTrajectory):
        refs = ReferenceTrajectory(refs)
    if len(refs) != horizon.n:
        raise ValueError(f"need {horizon.n} reference poses, got {len(refs)}")
    lo, hi = bounds.state_lower(), bounds.state_upper()
    clipped = np.clip(xi0, lo, hi)
    clamped = bool(np.any(clipped != xi0))
    return OcpProblem(
        xi0=clipped,
        refs=refs,
        weights=weights,
        bounds=bounds,
        horizon=horizon,
        robot=robot,
        liquid=liquid,
        xi0_clamped=clamped,
    )


def objective(states, controls, refs, weights: Weights, robot: RobotParams) -> float:
    """Finite-horizon cost over stages: tracking + slosh + effort.

    ``states`` are xi_1..xi_N, ``controls`` u_0..u_{N-1}; the tracking and
    slosh terms start at stage 1 and the effort term ends at stage N-1.
    """
    X = np.atleast_2d(np.asarray(states, dtype=float))
    U = np.atleast_2d(np.asarray(controls, dtype=float))
    R = refs.poses if isinstance(refs, ReferenceTrajectory) else np.atleast_2d(refs)
    if not (X.shape[0] == U.shape[0] == R.shape[0]):
        raise ValueError("states, controls and references must share the stage count")
    err = fk_array(X[:, 0:3], robot.lengths) - R
    cost = float(np.sum(err**2 @ weights.q1))
    cost += float(weights.q2 * np.sum(X[:, dynamics.IBETA] ** 2))
    cost += float(np.sum(U**2 @ weights.r))
    return cost


def objective_gradient(problem: OcpProblem, z: np.ndarray) -> np.ndarray:
    """Analytic gradient of the objective in the decision vector."""
    U, X = problem.split(z)
    n = problem.n
    w = problem.weights
    err = fk_array(X[:, 0:3], problem.robot.lengths) - problem.refs.poses
    g = np.zeros_like(np.asarray(z, dtype=float))
    gU = (2.0 * w.r) * U
    gX = np.zeros((n, NX))
    Jb = jac_batch(X[:, 0:3], problem.robot.lengths)
    gX[:, 0:3] = 2.0 * np.einsum("kri,kr->ki", Jb, w.q1 * err)
    gX[:, dynamics.IBETA] = 2.0 * w.q2 * X[:, dynamics.IBETA]
    g[: NU * n] = gU.ravel()
    g[NU * n :] = gX.ravel()
    return g


def dynamics_defects(problem: OcpProblem, z: np.ndarray) -> np.ndarray:
    """Stacked residuals xi_{k+1} - (xi_k + f(xi_k, u_k) dt), length 8N.

    Stage 0 anchors on the fixed initial state.  Zero residuals mean the
    decision trajectory satisfies the Euler-discretized dynamics.
    """
    U, X = problem.split(z)
    Xfrom = np.vstack([problem.xi0, X[:-1]])
    F = rhs_batch(Xfrom, U, problem.robot, problem.liquid)
    # grouped as X - (Xfrom + F dt) so an exact rollout cancels bitwise
    return (X - (Xfrom + F * problem.horizon.dt)).ravel()


def defect_jacobian_blocks(problem: OcpProblem, z: np.ndarray):
    """Stage blocks of the defect Jacobian.

    Defect k is  c_k = xi_{k+1} - xi_k - f(xi_k, u_k) dt,  so

        dc_k/du_k     = -B_k dt            (Bu: (N, 8, 3))
        dc_k/dxi_k    = -(I + A_k dt)      (Ax: (N, 8, 8); row 0 unused,
                                            xi_0 is not a decision variable)
        dc_k/dxi_{k+1} = I                 (implicit)
    """
    U, X = problem.split(z)
    dt = problem.horizon.dt
    Xfrom = np.vstack([problem.xi0, X[:-1]])
    A, B = linearize_batch(Xfrom, U, problem.robot, problem.liquid)
    eye = np.eye(NX)
    Ax = -(eye[None, :, :] + A * dt)
    Bu = -B * dt
    return Ax, Bu


def defect_jacobian_dense(problem: OcpProblem, z: np.ndarray) -> np.ndarray:
    """Full (8N, 11N) defect Jacobian; test and diagnostic use only."""
    n = problem.n
    Ax, Bu = defect_jacobian_blocks(problem, z)
    J = np.zeros((NX * n, problem.n_dec))
    xoff = NU * n
    for k in range(n):
        rows = slice(NX * k, NX * (k + 1))
        J[rows, NU * k : NU * (k + 1)] = Bu[k]
        if k > 0:
            J[rows, xoff + NX * (k - 1) : xoff + NX * k] = Ax[k]
        J[rows, xoff + NX * k : xoff + NX * (k + 1)] = np.eye(NX)
    return J


def rollout(xi0, controls, dt, robot, liquid) -> np.ndarray:
    """Euler rollout of a control sequence; returns states 1..N, shape (N, 8)."""
    U = np.atleast_2d(np.asarray(controls, dtype=float))
    X = np.empty((U.shape[0], NX))
    xi = np.asarray(xi0, dtype=float)[None, :]
    for k in range(U.shape[0]):
        # batched call so the arithmetic matches dynamics_defects bitwise
        xi = xi + rhs_batch(xi, U[k][None, :], robot, liquid) * dt
        X[k] = xi[0]
    return X


@dataclass
class OcpSolution:
    """Result of one receding-horizon solve."""

    controls: np.ndarray
    states: np.ndarray
    objective: float
    status: str  # converged | max_iter | infeasible_bounds
    iterations: int
    max_defect: float
    solve_time: float
    multipliers: np.ndarray | None = None
    penalty: float = 0.0


def shift_warm_start(previous: OcpSolution | None, xi0_new, problem: OcpProblem) -> np.ndarray:
    """Initial guess for the next solve, with zero defects by construction.

    Controls shift one stage left (last stage duplicated) and the states
    are re-rolled from the new anchor; with no previous solution the
    guess is zero controls rolled out from the anchor.
    """
    n = problem.n
    if previous is None:
        U = np.zeros((n, NU))
    else:
        U = np.vstack([previous.controls[1:], previous.controls[-1:]])
        if U.shape[0] != n:
            raise ValueError("previous solution horizon does not match problem")
    lo, hi = problem.bounds.u_min, problem.bounds.u_max
    U = np.clip(U, lo, hi)
    X = rollout(xi0_new, U, problem.horizon.dt, problem.robot, problem.liquid)
    return problem.pack(U, X)
