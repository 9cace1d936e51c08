"""Closed-loop simulation: input mapping, receding-horizon solve, plant.

Each control tick maps the newest operator sample to a target, predicts
references over the horizon, picks the solver's anchor state through a
threshold gate (model-predicted joints unless measurement disagrees by
more than delta_max; the slosh states always run open loop because they
are unmeasurable), solves the trajectory problem warm-started from the
previous plan, and applies the first control to the simulated plant.

The plant integrates with RK4 at a finer substep than the controller's
Euler prediction model, so a small, realistic model mismatch exercises
the gate.  A per-tick wall-clock budget turns slow solves into fallbacks
onto the previous plan instead of stalling the loop.
"""

from __future__ import annotations

import io
import time
from dataclasses import dataclass, field

import numpy as np

from .dynamics import (
    BETA_VALID_LIMIT,
    NX,
    LiquidParams,
    euler_step,
    rk4_step,
)
from .kinematics import Pose2D, RobotParams, fk_array
from .ocp import (
    Bounds,
    HorizonConfig,
    Weights,
    build_problem,
    preset,
    shift_warm_start,
)
from .operator_input import SampledSource, TargetTracker
from .solver import SolverOptions, solve

#: Column order of the serialized per-tick log.
CSV_HEADER = (
    "t,q1,q2,q3,qd1,qd2,qd3,beta,betadot,x,z,theta,"
    "xr,zr,thetar,u1,u2,u3,gate,solve_ms,status"
)

DEFAULT_START_Q = (-1.2, 2.4, -1.2)  # level container, mid workspace

# receding-horizon warm starts work best with a bounded penalty carry-over
_PENALTY_CARRY_MAX = 1e5


@dataclass(frozen=True)
class SimConfig:
    """Everything one closed-loop run needs."""

    rate_hz: float = 30.0
    substeps: int = 10
    delta_max_q: float = 0.01
    delta_max_qd: float = 0.05
    preset: str | None = "P1"
    weights: Weights | None = None
    duration: float = 10.0
    seed: int | None = None
    noise_std_q: float = 0.0
    noise_std_qd: float = 0.0
    q0: tuple[float, float, float] = DEFAULT_START_Q
    horizon: HorizonConfig = field(default_factory=HorizonConfig)
    bounds: Bounds = field(default_factory=Bounds)
    robot: RobotParams = field(default_factory=RobotParams)
    liquid: LiquidParams = field(default_factory=LiquidParams)
    plant_integrator: str = "rk4"  # rk4 | euler (test mode)
    budget_factor: float = 0.8
    device_scale: float = 1.0
    smoothing: float = 0.0
    feasibility_tol: float = 1e-6
    optimality_tol: float = 1e-3
    max_outer: int = 25

    def __post_init__(self):
        if self.rate_hz <= 0:
            raise ValueError("control rate must be positive")
        if self.substeps < 1:
            raise ValueError("need at least one plant substep")
        if self.delta_max_q < 0 or self.delta_max_qd < 0:
            raise ValueError("feedback thresholds cannot be negative")
        if self.plant_integrator not in ("rk4", "euler"):
            raise ValueError("plant integrator must be rk4 or euler")
        if self.preset is None and self.weights is None:
            raise ValueError("either a preset name or explicit weights required")

    def resolve_weights(self) -> Weights:
        return self.weights if self.weights is not None else preset(self.preset)

    def solver_options(self) -> SolverOptions:
        return SolverOptions(
            budget=self.budget_factor / self.rate_hz,
            feasibility_tol=self.feasibility_tol,
            optimality_tol=self.optimality_tol,
            max_outer=self.max_outer,
        )


@dataclass
class TrajectoryLog:
    """Per-tick record of one run; the unit of evaluation and streaming."""

    t: np.ndarray
    q: np.ndarray
    qdot: np.ndarray
    beta: np.ndarray
    betadot: np.ndarray
    pose: np.ndarray
    reference: np.ndarray
    u: np.ndarray
    gate: np.ndarray
    solve_ms: np.ndarray
    status: list[str]
    spill_ticks: int = 0
    diagnostic: str | None = None

    def __len__(self) -> int:
        return self.t.size

    def to_csv(self, path=None) -> str | None:
        buf = io.StringIO()
        buf.write(CSV_HEADER + "\n")
        for i in range(len(self)):
            cells = [f"{self.t[i]:.12g}"]
            cells += [f"{v:.12g}" for v in self.q[i]]
            cells += [f"{v:.12g}" for v in self.qdot[i]]
            cells += [f"{self.beta[i]:.12g}", f"{self.betadot[i]:.12g}"]
            cells += [f"{v:.12g}" for v in self.pose[i]]
            cells += [f"{v:.12g}" for v in self.reference[i]]
            cells += [f"{v:.12g}" for v in self.u[i]]
            cells += [str(int(self.gate[i])), f"{self.solve_ms[i]:.12g}", self.status[i]]
            buf.write(",".join(cells) + "\n")
        text = buf.getvalue()
        if path is None:
            return text
        with open(path, "w") as fh:
            fh.write(text)
        return None

    @staticmethod
    def from_csv(path) -> "TrajectoryLog":
        with open(path) as fh:
            header = fh.readline().strip()
            if header != CSV_HEADER:
                raise ValueError(f"{path}: unexpected log header")
            rows = [line.strip().split(",") for line in fh if line.strip()]
        arr = np.array([[float(v) for v in row[:20]] for row in rows])
        return TrajectoryLog(
            t=arr[:, 0],
            q=arr[:, 1:4],
            qdot=arr[:, 4:7],
            beta=arr[:, 7],
            betadot=arr[:, 8],
            pose=arr[:, 9:12],
            reference=arr[:, 12:15],
            u=arr[:, 15:18],
            gate=arr[:, 18].astype(bool),
            solve_ms=arr[:, 19],
            status=[row[20] for row in rows],
        )


@dataclass(frozen=True)
class Metrics:
    """Scalar summary of one run."""

    rmse_x: float
    rmse_z: float
    rmse_theta: float
    max_beta: float
    delay_ms: float
    solve_ms_mean: float
    solve_ms_max: float
    solve_ms_p95: float
    gate_fires: int
    ticks: int

    def to_dict(self) -> dict:
        return {
            "rmse_x": self.rmse_x,
            "rmse_z": self.rmse_z,
            "rmse_theta": self.rmse_theta,
            "max_beta": self.max_beta,
            "delay_ms": self.delay_ms,
            "solve_ms_mean": self.solve_ms_mean,
            "solve_ms_max": self.solve_ms_max,
            "solve_ms_p95": self.solve_ms_p95,
            "gate_fires": self.gate_fires,
            "ticks": self.ticks,
        }


def feedback_gate(predicted, measured, delta_max):
    """Anchor joints on the prediction unless measurement disagrees.

    Componentwise: if any |predicted - measured| exceeds its threshold
    the measured values are fed back (gate fired); otherwise the
    predicted ones continue open loop.
    """
    predicted = np.asarray(predicted, dtype=float)
    measured = np.asarray(measured, dtype=float)
    delta_max = np.asarray(delta_max, dtype=float)
    fired = bool(np.any(np.abs(predicted - measured) > delta_max))
    return (measured.copy() if fired else predicted.copy()), fired


@dataclass
class TickRecord:
    t: float
    state: np.ndarray
    pose: np.ndarray
    reference: np.ndarray
    u: np.ndarray
    gate: bool
    solve_ms: float
    status: str


class ControlLoop:
    """One live instance of the controller plus simulated plant.

    Drives a single logical timeline: call step() once per control tick
    with the newest operator sample.  Also used by the streaming service,
    which paces the calls with a wall clock.
    """

    def __init__(self, config: SimConfig):
        self.config = config
        self.weights = config.resolve_weights()
        self.options = config.solver_options()
        self.period = 1.0 / config.rate_hz
        self.sub_dt = self.period / config.substeps
        self.delta_max = np.array(
            [config.delta_max_q] * 3 + [config.delta_max_qd] * 3
        )
        self.plant = np.zeros(NX)
        self.plant[:3] = config.q0
        self.tracker = TargetTracker(scale=config.device_scale, smoothing=config.smoothing)
        self.plan = None  # last converged solution: control fallback + prediction
        self.seed = None  # last solver iterate of any status: warm-start source
        self.plan_age = 0
        self.spill_ticks = 0
        self._rng = (
            np.random.default_rng(config.seed)
            if (config.noise_std_q > 0 or config.noise_std_qd > 0)
            else None
        )

    def set_weights(self, weights: Weights) -> None:
        """Swap objective weights at a tick boundary (live preset toggle)."""
        self.weights = weights

    def current_pose(self) -> Pose2D:
        return Pose2D.from_array(fk_array(self.plant[:3], self.config.robot.lengths))

    def _measured(self) -> np.ndarray:
        measured = self.plant[:6].copy()
        if self._rng is not None:
            measured[:3] += self._rng.normal(0.0, self.config.noise_std_q, 3)
            measured[3:] += self._rng.normal(0.0, self.config.noise_std_qd, 3)
        return measured

    def step(self, t: float, sample) -> TickRecord:
        config = self.config
        pose_now = self.current_pose()
        target = self.tracker.update(sample, pose_now)
        refs = self.tracker.reference(config.horizon)

        measured = self._measured()
        if self.plan is not None:
            idx = min(self.plan_age - 1, config.horizon.n - 1)
            predicted = self.plan.states[idx]
            joints, fired = feedback_gate(predicted[:6], measured, self.delta_max)
            slosh = predicted[6:8]
        else:
            joints, fired = measured, False
            slosh = self.plant[6:8].copy()
        xi0 = np.concatenate([joints, slosh])

        problem = build_problem(
            xi0, refs, self.weights, config.bounds, config.horizon,
            config.robot, config.liquid,
        )
        guess = shift_warm_start(self.seed, problem.xi0, problem)
        t_solve = time.perf_counter()
        solution = solve(
            problem,
            guess,
            self.options,
            multipliers0=self.seed.multipliers if self.seed is not None else None,
            penalty0=min(self.seed.penalty, _PENALTY_CARRY_MAX) if self.seed is not None else None,
        )
        solve_ms = (time.perf_counter() - t_solve) * 1e3

        # warm-start continuation always adopts the newest iterate, even a
        # budget-truncated one, so optimization progress carries across ticks
        self.seed = solution
        if solution.status == "converged" or self.plan is None:
            self.plan = solution
            self.plan_age = 0
        # else: keep the previous plan and walk further along it
        u = self.plan.controls[min(self.plan_age, config.horizon.n - 1)].copy()
        u = np.clip(u, config.bounds.u_min, config.bounds.u_max)

        record = TickRecord(
            t=t,
            state=self.plant.copy(),
            pose=pose_now.as_array(),
            reference=target.as_array(),
            u=u,
            gate=fired,
            solve_ms=solve_ms,
            status=solution.status,
        )

        stepper = rk4_step if config.plant_integrator == "rk4" else euler_step
        xi = self.plant
        for _ in range(config.substeps):
            xi = stepper(xi, u, self.sub_dt, config.robot, config.liquid)
        self.plant = xi
        self.plan_age += 1
        if abs(self.plant[6]) > BETA_VALID_LIMIT:
            self.spill_ticks += 1
        return record


def run_closed_loop(config: SimConfig, source) -> TrajectoryLog:
    """Run the loop over a finite sample source and collect the log.

    ``source`` provides latest-value samples via ``sample_at(t)``; lists
    of samples are wrapped automatically.  A diverging plant (non-finite
    state) terminates the run early with a diagnostic on the log.
    """
    if isinstance(source, (list, tuple)):
        source = SampledSource(list(source), config.rate_hz)
    loop = ControlLoop(config)
    ticks = int(round(config.duration * config.rate_hz))
    records: list[TickRecord] = []
    diagnostic = None
    for k in range(ticks):
        t = k / config.rate_hz
        record = loop.step(t, source.sample_at(t))
        records.append(record)
        if not np.all(np.isfinite(loop.plant)):
            diagnostic = f"plant state diverged at t={t:.3f}s"
            break
    return TrajectoryLog(
        t=np.array([r.t for r in records]),
        q=np.array([r.state[:3] for r in records]),
        qdot=np.array([r.state[3:6] for r in records]),
        beta=np.array([r.state[6] for r in records]),
        betadot=np.array([r.state[7] for r in records]),
        pose=np.array([r.pose for r in records]),
        reference=np.array([r.reference for r in records]),
        u=np.array([r.u for r in records]),
        gate=np.array([r.gate for r in records], dtype=bool),
        solve_ms=np.array([r.solve_ms for r in records]),
        status=[r.status for r in records],
        spill_ticks=loop.spill_ticks,
        diagnostic=diagnostic,
    )


def crosscorr_delay_ms(actual, reference, dt, max_lag_s=2.0) -> float:
    """Lag maximizing the cross-correlation of two traces, in ms.

    Positive lag means the actual trace trails the reference.  Constant
    traces have no information and report zero.
    """
    a = np.asarray(actual, dtype=float)
    r = np.asarray(reference, dtype=float)
    a = a - a.mean()
    r = r - r.mean()
    if np.max(np.abs(a)) < 1e-12 or np.max(np.abs(r)) < 1e-12:
        return 0.0
    max_lag = min(len(a) - 1, int(round(max_lag_s / dt)))
    best_lag, best_val = 0, -np.inf
    for lag in range(max_lag + 1):
        n = len(a) - lag
        val = float(a[lag:] @ r[:n]) / n
        if val > best_val:
            best_val, best_lag = val, lag
    return best_lag * dt * 1e3


def compute_metrics(log: TrajectoryLog) -> Metrics:
    """Scalar summary: tracking RMSE, slosh peak, delay, solve times."""
    if len(log) == 0:
        raise ValueError("empty log")
    err = log.pose - log.reference
    rmse = np.sqrt(np.mean(err**2, axis=0))
    dt = float(log.t[1] - log.t[0]) if len(log) > 1 else 1.0
    delay = crosscorr_delay_ms(log.pose[:, 0], log.reference[:, 0], dt)
    return Metrics(
        rmse_x=float(rmse[0]),
        rmse_z=float(rmse[1]),
        rmse_theta=float(rmse[2]),
        max_beta=float(np.max(np.abs(log.beta))),
        delay_ms=float(delay),
        solve_ms_mean=float(np.mean(log.solve_ms)),
        solve_ms_max=float(np.max(log.solve_ms)),
        solve_ms_p95=float(np.percentile(log.solve_ms, 95)),
        gate_fires=int(np.sum(log.gate)),
        ticks=len(log),
    )
