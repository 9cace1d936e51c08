"""Operator input: device-to-workspace mapping and reference prediction.

The operator steers with any 2D pointer (replayed file, mouse drag, test
generator).  While the clutch is held, relative device motion displaces
the desired container position from the pose captured at engagement;
with the clutch released the desired pose tracks the current pose, so
engaging never makes the target jump.  Future references for the horizon
are extrapolated from the last two targets at constant velocity.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace

import numpy as np

from .kinematics import Pose2D
from .ocp import HorizonConfig


@dataclass(frozen=True)
class OperatorSample:
    """One timestamped device reading."""

    t: float
    device_x: float
    device_z: float
    clutch: bool


@dataclass(frozen=True)
class MappingState:
    """Reference points captured at the last clutch engagement."""

    saved_device: tuple[float, float] | None = None
    saved_pose: tuple[float, float] | None = None
    captured_theta: float | None = None
    clutch: bool = False


def map_input(
    sample: OperatorSample,
    current_pose: Pose2D,
    state: MappingState,
    scale: float = 1.0,
) -> tuple[Pose2D, MappingState]:
    """Desired container pose for one device sample.

    Inactive clutch holds the target at the current pose.  A rising edge
    captures device and pose reference points plus the tilt reference;
    while held, device displacement maps 1:1 (times ``scale``) onto the
    workspace, device-right giving +x and device-down giving -z.
    """
    if not sample.clutch:
        return current_pose, MappingState()
    if not state.clutch or state.saved_device is None:
        new_state = MappingState(
            saved_device=(sample.device_x, sample.device_z),
            saved_pose=(current_pose.x, current_pose.z),
            captured_theta=current_pose.theta,
            clutch=True,
        )
        return current_pose, new_state
    dx = scale * (sample.device_x - state.saved_device[0])
    dz = scale * (sample.device_z - state.saved_device[1])
    target = Pose2D(
        state.saved_pose[0] + dx, state.saved_pose[1] + dz, state.captured_theta
    )
    return target, replace(state, clutch=True)


def predict_reference(
    latest: tuple[float, Pose2D],
    previous: tuple[float, Pose2D] | None,
    horizon: HorizonConfig,
) -> np.ndarray:
    """Reference poses for stages 1..N, extrapolated at constant velocity.

    ``previous`` is None when only one target exists or the clutch is
    inactive, which pins the whole horizon to the latest target.  The
    tilt reference is held constant.
    """
    t1, p1 = latest
    ref = p1.as_array()
    v = np.zeros(3)
    if previous is not None:
        t0, p0 = previous
        dt_samples = t1 - t0
        if dt_samples > 0.0:
            v[:2] = (ref[:2] - p0.as_array()[:2]) / dt_samples
    steps = np.arange(1, horizon.n + 1)[:, None] * horizon.dt
    return ref[None, :] + steps * v[None, :]


class TargetTracker:
    """Stateful wrapper gluing input mapping to reference prediction.

    Keeps at most the last two targets for the velocity estimate and
    zeroes the estimate whenever the clutch is inactive.  An optional
    exponential smoothing factor (0 disables it) steadies the estimate.
    """

    def __init__(self, scale: float = 1.0, smoothing: float = 0.0):
        if not 0.0 <= smoothing < 1.0:
            raise ValueError("smoothing factor must lie in [0, 1)")
        self.scale = scale
        self.smoothing = smoothing
        self.state = MappingState()
        self._latest: tuple[float, Pose2D] | None = None
        self._previous: tuple[float, Pose2D] | None = None
        self._velocity = np.zeros(3)

    def update(self, sample: OperatorSample, current_pose: Pose2D) -> Pose2D:
        target, self.state = map_input(sample, current_pose, self.state, self.scale)
        if self.state.clutch:
            self._previous = self._latest
        else:
            self._previous = None
            self._velocity = np.zeros(3)
        self._latest = (sample.t, target)
        return target

    def reference(self, horizon: HorizonConfig) -> np.ndarray:
        if self._latest is None:
            raise RuntimeError("no target yet; feed update() first")
        refs = predict_reference(self._latest, self._previous, horizon)
        if self.smoothing > 0.0 and self._previous is not None:
            t1, p1 = self._latest
            t0, p0 = self._previous
            raw = np.zeros(3)
            if t1 > t0:
                raw[:2] = (p1.as_array()[:2] - p0.as_array()[:2]) / (t1 - t0)
            self._velocity = (
                self.smoothing * self._velocity + (1.0 - self.smoothing) * raw
            )
            steps = np.arange(1, horizon.n + 1)[:, None] * horizon.dt
            refs = p1.as_array()[None, :] + steps * self._velocity[None, :]
        return refs


def _parse_clutch(text: str, line_no: int) -> bool:
    norm = text.strip().lower()
    if norm in ("1", "true", "t", "yes"):
        return True
    if norm in ("0", "false", "f", "no"):
        return False
    raise ValueError(f"line {line_no}: cannot parse clutch value {text!r}")


def read_samples(path) -> list[OperatorSample]:
    """Parse a recorded input file: CSV with header t,device_x,device_z,clutch."""
    samples: list[OperatorSample] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None or [h.strip() for h in header] != ["t", "device_x", "device_z", "clutch"]:
            raise ValueError(f"{path}: expected header t,device_x,device_z,clutch")
        last_t = -np.inf
        for line_no, row in enumerate(reader, start=2):
            if not row or (len(row) == 1 and not row[0].strip()):
                continue
            if len(row) != 4:
                raise ValueError(f"line {line_no}: expected 4 fields, got {len(row)}")
            try:
                t = float(row[0])
                dx = float(row[1])
                dz = float(row[2])
            except ValueError as exc:
                raise ValueError(f"line {line_no}: {exc}") from None
            if t < last_t:
                raise ValueError(f"line {line_no}: timestamps must be non-decreasing")
            last_t = t
            samples.append(OperatorSample(t, dx, dz, _parse_clutch(row[3], line_no)))
    if not samples:
        raise ValueError(f"{path}: no samples")
    return samples


def resample_hold(
    samples: list[OperatorSample], rate_hz: float, duration: float | None = None
) -> list[OperatorSample]:
    """Zero-order hold of a sample stream onto the control-tick grid."""
    if duration is None:
        duration = samples[-1].t + 1.0 / rate_hz
    ticks = int(round(duration * rate_hz))
    out = []
    j = -1
    for k in range(ticks):
        t = k / rate_hz
        while j + 1 < len(samples) and samples[j + 1].t <= t + 1e-12:
            j += 1
        if j < 0:
            held = OperatorSample(t, samples[0].device_x, samples[0].device_z, False)
        else:
            s = samples[j]
            held = OperatorSample(t, s.device_x, s.device_z, s.clutch)
        out.append(held)
    return out


def replay_source(path, rate_hz: float = 30.0, duration: float | None = None):
    """Recorded operator input, resampled and held at the control rate."""
    return resample_hold(read_samples(path), rate_hz, duration)


def generate_input(
    name: str, rate_hz: float = 30.0, duration: float = 10.0, **params
) -> list[OperatorSample]:
    """Deterministic synthetic operator inputs for batch runs and tests.

    ramp: move ``amplitude`` meters along ``axis`` over ``ramp_time``
    seconds, then hold.  step: jump by ``amplitude`` at ``at`` seconds.
    sine: oscillate with ``amplitude`` and ``frequency``.  The clutch is
    held for the whole run.
    """
    ticks = int(round(duration * rate_hz))
    times = np.arange(ticks) / rate_hz
    axis = params.pop("axis", "x")
    if axis not in ("x", "z"):
        raise ValueError("axis must be 'x' or 'z'")
    if name == "ramp":
        amplitude = float(params.pop("amplitude", 0.3))
        ramp_time = float(params.pop("ramp_time", 1.0))
        values = amplitude * np.clip(times / ramp_time, 0.0, 1.0)
    elif name == "step":
        amplitude = float(params.pop("amplitude", 0.1))
        at = float(params.pop("at", 1.0))
        values = np.where(times >= at, amplitude, 0.0)
    elif name == "sine":
        amplitude = float(params.pop("amplitude", 0.1))
        frequency = float(params.pop("frequency", 0.5))
        values = amplitude * np.sin(2.0 * np.pi * frequency * times)
    else:
        raise ValueError(f"unknown input generator {name!r}")
    if params:
        raise ValueError(f"unknown parameters for {name!r}: {sorted(params)}")
    dx = values if axis == "x" else np.zeros(ticks)
    dz = values if axis == "z" else np.zeros(ticks)
    return [
        OperatorSample(float(t), float(x), float(z), True)
        for t, x, z in zip(times, dx, dz)
    ]


class SampledSource:
    """Latest-value view of a precomputed sample list for the loop."""

    def __init__(self, samples: list[OperatorSample], rate_hz: float):
        if not samples:
            raise ValueError("sample stream is empty")
        self.samples = samples
        self.rate_hz = rate_hz

    def sample_at(self, t: float) -> OperatorSample:
        idx = int(np.floor(t * self.rate_hz + 1e-9))
        idx = min(max(idx, 0), len(self.samples) - 1)
        return self.samples[idx]
