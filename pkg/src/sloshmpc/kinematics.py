"""Planar 3R kinematics: closed-form forward map and its time derivatives.

All three joints rotate about the out-of-plane axis.  Angles are plain,
unwrapped radians so the optimizer downstream sees a continuous map.
The Jacobians are hand-derived (no numeric differentiation in the loop)
and checked against finite differences in the test suite.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

# UR5e-style link lengths (m) for the three planar joints.
DEFAULT_LINK_LENGTHS = (0.425, 0.3922, 0.1)


@dataclass(frozen=True)
class RobotParams:
    """Link lengths of the planar 3R chain, meters."""

    l1: float = DEFAULT_LINK_LENGTHS[0]
    l2: float = DEFAULT_LINK_LENGTHS[1]
    l3: float = DEFAULT_LINK_LENGTHS[2]

    def __post_init__(self):
        if not (self.l1 > 0.0 and self.l2 > 0.0 and self.l3 > 0.0):
            raise ValueError("link lengths must be strictly positive")

    @property
    def lengths(self) -> np.ndarray:
        return np.array([self.l1, self.l2, self.l3])

    @property
    def reach(self) -> float:
        """Radius of the workspace disc."""
        return self.l1 + self.l2 + self.l3


@dataclass(frozen=True)
class Pose2D:
    """Container pose in the vertical working plane: x right, z up."""

    x: float
    z: float
    theta: float

    def __post_init__(self):
        if not np.all(np.isfinite([self.x, self.z, self.theta])):
            raise ValueError("pose components must be finite")

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.z, self.theta])

    @staticmethod
    def from_array(a) -> "Pose2D":
        return Pose2D(float(a[0]), float(a[1]), float(a[2]))


@dataclass(frozen=True)
class TaskRates:
    """Task-space velocity of the container."""

    xdot: float
    zdot: float
    thetadot: float

    def as_array(self) -> np.ndarray:
        return np.array([self.xdot, self.zdot, self.thetadot])


@dataclass(frozen=True)
class TaskAccel:
    """Task-space acceleration of the container."""

    xddot: float
    zddot: float
    thetaddot: float

    def as_array(self) -> np.ndarray:
        return np.array([self.xddot, self.zddot, self.thetaddot])


def _cumulative(q: np.ndarray) -> np.ndarray:
    # phi_i = q1 + ... + qi along the last axis
    return np.cumsum(q, axis=-1)


def fk_array(q, lengths) -> np.ndarray:
    """Forward map as arrays; broadcasts over leading axes of ``q``.

    Returns [..., (x, z, theta)].  Sign convention: z points up, links
    with all-zero angles stretch along +x, positive joint angles dip the
    chain below the x axis (hence the minus on z).
    """
    q = np.asarray(q, dtype=float)
    phi = _cumulative(q)
    x = np.sum(lengths * np.cos(phi), axis=-1)
    z = -np.sum(lengths * np.sin(phi), axis=-1)
    theta = phi[..., 2]
    return np.stack([x, z, theta], axis=-1)


def forward_kinematics(q, params: RobotParams = RobotParams()) -> Pose2D:
    """Pose of the carried container for joint angles ``q`` (radians[3])."""
    return Pose2D.from_array(fk_array(q, params.lengths))


def jacobian(q, params: RobotParams = RobotParams()) -> np.ndarray:
    """3x3 task Jacobian J with (xdot, zdot, thetadot) = J qdot.

    Row 3 is exactly (1, 1, 1) because theta is the plain angle sum.
    """
    q = np.asarray(q, dtype=float)
    phi = _cumulative(q)
    ls = params.lengths * np.sin(phi)
    lc = params.lengths * np.cos(phi)
    # dx/dq_j = -sum_{i>=j} L_i sin(phi_i); reversed cumulative sums
    sx = np.cumsum(ls[::-1])[::-1]
    sz = np.cumsum(lc[::-1])[::-1]
    return np.array([-sx, -sz, np.ones(3)])


def jac_batch(q, lengths) -> np.ndarray:
    """Task Jacobians for a batch of configurations, shape (..., 3, 3)."""
    q = np.asarray(q, dtype=float)
    phi = _cumulative(q)
    ls = lengths * np.sin(phi)
    lc = lengths * np.cos(phi)
    sx = np.cumsum(ls[..., ::-1], axis=-1)[..., ::-1]
    sz = np.cumsum(lc[..., ::-1], axis=-1)[..., ::-1]
    J = np.empty(q.shape[:-1] + (3, 3))
    J[..., 0, :] = -sx
    J[..., 1, :] = -sz
    J[..., 2, :] = 1.0
    return J


def jacobian_dot(q, qdot, params: RobotParams = RobotParams()) -> np.ndarray:
    """Time derivative of the task Jacobian along (q, qdot).

    Row 3 is identically zero (the theta row of J is constant).
    """
    q = np.asarray(q, dtype=float)
    qdot = np.asarray(qdot, dtype=float)
    phi = _cumulative(q)
    w = _cumulative(qdot)
    lcw = params.lengths * np.cos(phi) * w
    lsw = params.lengths * np.sin(phi) * w
    sx = np.cumsum(lcw[::-1])[::-1]
    sz = np.cumsum(lsw[::-1])[::-1]
    return np.array([-sx, sz, np.zeros(3)])


def task_velocity(q, qdot, params: RobotParams = RobotParams()) -> TaskRates:
    """Container velocity J(q) qdot."""
    v = jacobian(q, params) @ np.asarray(qdot, dtype=float)
    return TaskRates(float(v[0]), float(v[1]), float(v[2]))


def task_accel_array(q, qdot, u, lengths) -> np.ndarray:
    """Container acceleration Jdot qdot + J u, closed form, broadcastable.

    Uses cumulative joint sums: with phi_i, w_i, nu_i the partial sums of
    angles, rates and accelerations,
        xddot = sum_i (-L_i cos(phi_i) w_i^2 - L_i sin(phi_i) nu_i)
        zddot = sum_i ( L_i sin(phi_i) w_i^2 - L_i cos(phi_i) nu_i)
    and thetaddot = u1 + u2 + u3 exactly.
    """
    q = np.asarray(q, dtype=float)
    qdot = np.asarray(qdot, dtype=float)
    u = np.asarray(u, dtype=float)
    phi = _cumulative(q)
    w = _cumulative(qdot)
    nu = _cumulative(u)
    lc = lengths * np.cos(phi)
    ls = lengths * np.sin(phi)
    xdd = np.sum(-lc * w**2 - ls * nu, axis=-1)
    zdd = np.sum(ls * w**2 - lc * nu, axis=-1)
    tdd = nu[..., 2]
    return np.stack([xdd, zdd, tdd], axis=-1)


def task_acceleration(q, qdot, u, params: RobotParams = RobotParams()) -> TaskAccel:
    """Container acceleration for joint accelerations ``u``."""
    a = task_accel_array(q, qdot, u, params.lengths)
    return TaskAccel(float(a[0]), float(a[1]), float(a[2]))
