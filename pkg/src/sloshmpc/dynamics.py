"""Continuous-time models and integrators for the arm + liquid system.

The robot reduces to a joint-space double integrator (joint accelerations
are the control input).  The liquid inside the carried container is a
damped pendulum pivoting at the surface center; its deflection angle is
driven by the container's task-space motion.  Both are stacked into one
8-state system:

    state = [q1, q2, q3, qd1, qd2, qd3, beta, betadot]

Euler forward is the prediction model used inside the optimizer; RK4 at
a finer substep acts as the simulated plant, which deliberately leaves a
small model/plant mismatch for the feedback gate to absorb.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .kinematics import RobotParams, task_accel_array

GRAVITY = 9.81

# Packed-state slices.
IQ = slice(0, 3)
IQD = slice(3, 6)
IBETA = 6
IBETADOT = 7
NX = 8
NU = 3

# Beyond this deflection the flat-surface assumption is void; the
# simulation records a spill instead of erroring out.
BETA_VALID_LIMIT = np.pi / 2


@dataclass(frozen=True)
class LiquidParams:
    """Pendulum stand-in for the liquid.

    Attributes:
        l: virtual pendulum length [m], sets the natural frequency
        h: filling level of the container [m], pivot height above the base
        m: pendulum mass [kg]
        d: damping coefficient of the dissipation term
        g: gravity [m/s^2]
    """

    l: float = 0.02
    h: float = 0.08
    m: float = 1.0
    d: float = 0.005
    g: float = GRAVITY

    def __post_init__(self):
        if self.l <= 0.0:
            raise ValueError("pendulum length l must be positive")
        if self.h < 0.0:
            raise ValueError("filling level h cannot be negative")
        if self.m <= 0.0:
            raise ValueError("pendulum mass m must be positive")
        if self.d < 0.0:
            raise ValueError("damping d cannot be negative")
        if self.g <= 0.0:
            raise ValueError("gravity g must be positive")


@dataclass(frozen=True)
class SloshState:
    """Deflection angle of the liquid surface pendulum and its rate."""

    beta: float = 0.0
    betadot: float = 0.0

    @property
    def in_model_range(self) -> bool:
        """False once the flat-surface assumption is broken."""
        return abs(self.beta) <= BETA_VALID_LIMIT


@dataclass(frozen=True)
class CombinedState:
    """Joint state plus slosh state; packs to an 8-vector."""

    q: np.ndarray
    qdot: np.ndarray
    slosh: SloshState = SloshState()

    def as_array(self) -> np.ndarray:
        out = np.empty(NX)
        out[IQ] = self.q
        out[IQD] = self.qdot
        out[IBETA] = self.slosh.beta
        out[IBETADOT] = self.slosh.betadot
        return out

    @staticmethod
    def from_array(xi) -> "CombinedState":
        xi = np.asarray(xi, dtype=float)
        return CombinedState(
            q=xi[IQ].copy(),
            qdot=xi[IQD].copy(),
            slosh=SloshState(float(xi[IBETA]), float(xi[IBETADOT])),
        )


@dataclass(frozen=True)
class ControlInput:
    """Joint accelerations commanded to the low-level controller."""

    u: np.ndarray

    def as_array(self) -> np.ndarray:
        return np.asarray(self.u, dtype=float)


def natural_frequency(params: LiquidParams) -> float:
    """Natural frequency sqrt(g/l) of the liquid pendulum, rad/s."""
    return float(np.sqrt(params.g / params.l))


def slosh_acceleration(slosh, pose_theta, thetadot, accel, params: LiquidParams):
    """Angular acceleration of the liquid pendulum.

    ``accel`` carries the container's task accelerations (xddot, zddot,
    thetaddot); ``pose_theta``/``thetadot`` the container tilt and tilt
    rate.  Accepts SloshState or a (beta, betadot) pair, and TaskAccel or
    a 3-sequence.  Broadcasts over arrays.
    """
    if isinstance(slosh, SloshState):
        beta, betadot = slosh.beta, slosh.betadot
    else:
        beta, betadot = slosh
    if hasattr(accel, "as_array"):
        accel = accel.as_array()
    xdd, zdd, tdd = np.asarray(accel[0]), np.asarray(accel[1]), np.asarray(accel[2])
    l, h, m, d, g = params.l, params.h, params.m, params.d, params.g
    tilt = pose_theta + beta
    return (
        -(l - h * np.cos(beta)) * tdd
        + h * np.sin(beta) * thetadot**2
        + np.cos(tilt) * xdd
        - np.sin(tilt) * (g + zdd)
        - (d / (m * l)) * betadot
    ) / l


def derivative_array(xi, u, robot: RobotParams, liquid: LiquidParams) -> np.ndarray:
    """Packed time derivative of the combined state; broadcastable.

    ``xi``: [..., 8], ``u``: [..., 3]; returns [..., 8].
    """
    xi = np.asarray(xi, dtype=float)
    u = np.asarray(u, dtype=float)
    q = xi[..., IQ]
    qd = xi[..., IQD]
    theta = np.sum(q, axis=-1)
    thetadot = np.sum(qd, axis=-1)
    acc = task_accel_array(q, qd, u, robot.lengths)
    bdd = slosh_acceleration(
        (xi[..., IBETA], xi[..., IBETADOT]),
        theta,
        thetadot,
        (acc[..., 0], acc[..., 1], acc[..., 2]),
        liquid,
    )
    out = np.empty(xi.shape)
    out[..., IQ] = qd
    out[..., IQD] = u
    out[..., IBETA] = xi[..., IBETADOT]
    out[..., IBETADOT] = bdd
    return out


def combined_derivative(xi, u, robot: RobotParams, liquid: LiquidParams) -> np.ndarray:
    """Time derivative of the 8-state system, as a packed array."""
    if isinstance(xi, CombinedState):
        xi = xi.as_array()
    if isinstance(u, ControlInput):
        u = u.as_array()
    return derivative_array(xi, u, robot, liquid)


def euler_step(xi, u, dt: float, robot: RobotParams, liquid: LiquidParams):
    """One forward-Euler step; this is the optimizer's prediction model."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    as_state = isinstance(xi, CombinedState)
    x = xi.as_array() if as_state else np.asarray(xi, dtype=float)
    uu = u.as_array() if isinstance(u, ControlInput) else np.asarray(u, dtype=float)
    out = x + derivative_array(x, uu, robot, liquid) * dt
    return CombinedState.from_array(out) if as_state else out


def rk4_step(xi, u, dt: float, robot: RobotParams, liquid: LiquidParams):
    """Classical fourth-order step under zero-order-hold input (plant model)."""
    if dt <= 0.0:
        raise ValueError("dt must be positive")
    as_state = isinstance(xi, CombinedState)
    x = xi.as_array() if as_state else np.asarray(xi, dtype=float)
    uu = u.as_array() if isinstance(u, ControlInput) else np.asarray(u, dtype=float)
    k1 = derivative_array(x, uu, robot, liquid)
    k2 = derivative_array(x + 0.5 * dt * k1, uu, robot, liquid)
    k3 = derivative_array(x + 0.5 * dt * k2, uu, robot, liquid)
    k4 = derivative_array(x + dt * k3, uu, robot, liquid)
    out = x + (dt / 6.0) * (k1 + 2.0 * k2 + 2.0 * k3 + k4)
    return CombinedState.from_array(out) if as_state else out


def rhs_batch(X, U, robot: RobotParams, liquid: LiquidParams) -> np.ndarray:
    """Fused stage-batched derivative for the optimizer's hot path.

    Arithmetically identical to derivative_array on (N, 8)/(N, 3) inputs
    but evaluated in one pass without intermediate wrappers.
    """
    q = X[:, IQ]
    qd = X[:, IQD]
    beta = X[:, IBETA]
    betadot = X[:, IBETADOT]
    L = robot.lengths
    l, h, m, d, g = liquid.l, liquid.h, liquid.m, liquid.d, liquid.g
    phi = np.cumsum(q, axis=1)
    w = np.cumsum(qd, axis=1)
    nu = np.cumsum(U, axis=1)
    lc = L * np.cos(phi)
    ls = L * np.sin(phi)
    xdd = np.sum(-lc * w**2 - ls * nu, axis=1)
    zdd = np.sum(ls * w**2 - lc * nu, axis=1)
    theta = phi[:, 2]
    thetadot = w[:, 2]
    thetaddot = nu[:, 2]
    tilt = theta + beta
    bdd = (
        -(l - h * np.cos(beta)) * thetaddot
        + h * np.sin(beta) * thetadot**2
        + np.cos(tilt) * xdd
        - np.sin(tilt) * (g + zdd)
        - (d / (m * l)) * betadot
    ) / l
    out = np.empty_like(X)
    out[:, IQ] = qd
    out[:, IQD] = U
    out[:, IBETA] = betadot
    out[:, IBETADOT] = bdd
    return out


def _reverse_cumsum(a: np.ndarray) -> np.ndarray:
    return np.cumsum(a[..., ::-1], axis=-1)[..., ::-1]


def linearize_batch(X, U, robot: RobotParams, liquid: LiquidParams):
    """Exact Jacobians A = df/dxi, B = df/du of the combined derivative.

    ``X``: (N, 8), ``U``: (N, 3); returns A: (N, 8, 8), B: (N, 8, 3).
    Only the slosh-acceleration row is nontrivial; the robot block is the
    constant double-integrator pattern.
    """
    X = np.asarray(X, dtype=float)
    U = np.asarray(U, dtype=float)
    n = X.shape[0]
    L = robot.lengths
    l, h, m, d, g = liquid.l, liquid.h, liquid.m, liquid.d, liquid.g

    q = X[:, IQ]
    qd = X[:, IQD]
    beta = X[:, IBETA]
    phi = np.cumsum(q, axis=-1)
    w = np.cumsum(qd, axis=-1)
    nu = np.cumsum(U, axis=-1)
    cphi = np.cos(phi)
    sphi = np.sin(phi)
    theta = phi[:, 2]
    thetadot = w[:, 2]
    thetaddot = nu[:, 2]

    ax = np.sum(-L * cphi * w**2 - L * sphi * nu, axis=-1)
    az = np.sum(L * sphi * w**2 - L * cphi * nu, axis=-1)

    tilt = theta + beta
    ctilt = np.cos(tilt)
    stilt = np.sin(tilt)
    sbeta = np.sin(beta)
    cbeta = np.cos(beta)

    # Partial sums over links i >= j give the task-acceleration partials.
    dax_dq = _reverse_cumsum(L * sphi * w**2 - L * cphi * nu)      # (n, 3)
    daz_dq = _reverse_cumsum(L * cphi * w**2 + L * sphi * nu)
    dax_dqd = _reverse_cumsum(-2.0 * L * cphi * w)
    daz_dqd = _reverse_cumsum(2.0 * L * sphi * w)
    dax_du = _reverse_cumsum(-L * sphi)
    daz_du = _reverse_cumsum(-L * cphi)

    # Chain rule through (theta, thetadot, thetaddot, ax, az, beta, betadot).
    df_dtheta = (-stilt * ax - ctilt * (g + az)) / l
    df_dthetadot = 2.0 * h * sbeta * thetadot / l
    df_dthetaddot = -(l - h * cbeta) / l
    df_dax = ctilt / l
    df_daz = -stilt / l
    df_dbeta = (
        -h * sbeta * thetaddot + h * cbeta * thetadot**2 - stilt * ax - ctilt * (g + az)
    ) / l
    df_dbetadot = np.full(n, -d / (m * l * l))

    A = np.zeros((n, NX, NX))
    A[:, 0, 3] = A[:, 1, 4] = A[:, 2, 5] = 1.0
    A[:, IBETA, IBETADOT] = 1.0
    A[:, IBETADOT, IQ] = (
        df_dtheta[:, None] + df_dax[:, None] * dax_dq + df_daz[:, None] * daz_dq
    )
    A[:, IBETADOT, IQD] = (
        df_dthetadot[:, None] + df_dax[:, None] * dax_dqd + df_daz[:, None] * daz_dqd
    )
    A[:, IBETADOT, IBETA] = df_dbeta
    A[:, IBETADOT, IBETADOT] = df_dbetadot

    B = np.zeros((n, NX, NU))
    B[:, 3, 0] = B[:, 4, 1] = B[:, 5, 2] = 1.0
    B[:, IBETADOT, :] = (
        df_dthetaddot[:, None] + df_dax[:, None] * dax_du + df_daz[:, None] * daz_du
    )
    return A, B


def combined_jacobians(xi, u, robot: RobotParams, liquid: LiquidParams):
    """A, B Jacobians of the combined derivative at a single point."""
    if isinstance(xi, CombinedState):
        xi = xi.as_array()
    if isinstance(u, ControlInput):
        u = u.as_array()
    A, B = linearize_batch(np.asarray(xi)[None, :], np.asarray(u)[None, :], robot, liquid)
    return A[0], B[0]
