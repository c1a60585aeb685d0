"""Kinematic types, the target-centred frame and constant-velocity motion.

Conventions used throughout the package:

* headings are radians, counterclockwise, ``0`` along +x, wrapped to (-pi, pi];
* a track is a contiguous run of integer steps sampled every ``dt`` seconds;
* the target frame puts the target at the origin at its last observed step
  with its heading pointing along +y (frame heading ``pi/2``).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, InsufficientHistory, MissingObservation

DEFAULT_DT = 0.1
STATIONARY_EPS = 1e-6

# column order of the (T, 5) state arrays
X, Y, V, A, THETA = range(5)


def wrap_angle(a):
    """Wrap angles to (-pi, pi]."""
    return np.pi - np.mod(np.pi - np.asarray(a, dtype=float), 2 * np.pi)


@dataclass(frozen=True)
class AgentState:
    x: float
    y: float
    v: float
    a: float
    theta: float

    def __post_init__(self):
        vals = (self.x, self.y, self.v, self.a, self.theta)
        if not all(math.isfinite(c) for c in vals):
            raise ContractError(f"non-finite agent state {vals}")
        if self.v < 0:
            raise ContractError(f"negative speed {self.v}")

    @property
    def position(self) -> tuple[float, float]:
        return (self.x, self.y)

    def as_array(self) -> np.ndarray:
        return np.array([self.x, self.y, self.v, self.a, self.theta])

    @classmethod
    def from_array(cls, row) -> "AgentState":
        return cls(*(float(c) for c in row))


def _frozen(arr, dtype=float) -> np.ndarray:
    out = np.array(arr, dtype=dtype, copy=True)
    out.flags.writeable = False
    return out


@dataclass(frozen=True, eq=False)
class Track:
    """States of one agent over the contiguous steps ``start .. start+len-1``."""

    agent_id: str
    start: int
    states: np.ndarray  # (T, 5): x, y, v, a, theta
    agent_type: str = "car"
    length: float = 4.5
    width: float = 1.8

    def __post_init__(self):
        states = np.asarray(self.states, dtype=float)
        if states.ndim != 2 or states.shape[1] != 5 or len(states) == 0:
            raise ContractError(f"track {self.agent_id}: states must be a nonempty (T, 5) array")
        if not np.all(np.isfinite(states)):
            raise ContractError(f"track {self.agent_id}: non-finite state")
        if np.any(states[:, V] < 0):
            raise ContractError(f"track {self.agent_id}: negative speed")
        object.__setattr__(self, "states", _frozen(states))
        object.__setattr__(self, "start", int(self.start))

    def __len__(self) -> int:
        return len(self.states)

    def __eq__(self, other) -> bool:
        if not isinstance(other, Track):
            return NotImplemented
        return (
            self.agent_id == other.agent_id
            and self.start == other.start
            and self.agent_type == other.agent_type
            and self.length == other.length
            and self.width == other.width
            and np.array_equal(self.states, other.states)
        )

    @property
    def end(self) -> int:
        """Last step covered (inclusive)."""
        return self.start + len(self.states) - 1

    @property
    def steps(self) -> np.ndarray:
        return np.arange(self.start, self.end + 1)

    @property
    def positions(self) -> np.ndarray:
        return self.states[:, :2]

    def has(self, step: int) -> bool:
        return self.start <= step <= self.end

    def row(self, step: int) -> np.ndarray:
        if not self.has(step):
            raise MissingObservation(f"track {self.agent_id} has no state at step {step}")
        return self.states[step - self.start]

    def state_at(self, step: int) -> AgentState:
        return AgentState.from_array(self.row(step))

    def crop(self, first: int, last: int) -> Optional["Track"]:
        """Restrict to steps ``first..last`` (inclusive); None if no overlap."""
        lo, hi = max(first, self.start), min(last, self.end)
        if lo > hi:
            return None
        return replace(self, start=lo, states=self.states[lo - self.start : hi - self.start + 1])

    def shifted(self, offset: int) -> "Track":
        return replace(self, start=self.start + offset)


@dataclass(frozen=True)
class TargetFrame:
    """Rigid map from world coordinates into the target-centred frame."""

    origin: tuple[float, float]
    rotation: float  # radians added to world headings

    @classmethod
    def from_state(cls, state) -> "TargetFrame":
        x, y, theta = float(state[X]), float(state[Y]), float(state[THETA])
        return cls((x, y), float(np.pi / 2 - theta))

    def _rot(self, angle: float) -> np.ndarray:
        c, s = math.cos(angle), math.sin(angle)
        return np.array([[c, -s], [s, c]])

    def to_frame(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float) - np.asarray(self.origin)
        return p @ self._rot(self.rotation).T

    def to_world(self, points) -> np.ndarray:
        p = np.asarray(points, dtype=float) @ self._rot(-self.rotation).T
        return p + np.asarray(self.origin)

    def heading_to_frame(self, theta):
        return wrap_angle(np.asarray(theta) + self.rotation)

    def heading_to_world(self, theta):
        return wrap_angle(np.asarray(theta) - self.rotation)

    def states_to_frame(self, states: np.ndarray) -> np.ndarray:
        out = np.array(states, dtype=float, copy=True)
        out[:, :2] = self.to_frame(out[:, :2])
        out[:, THETA] = self.heading_to_frame(out[:, THETA])
        return out

    def states_to_world(self, states: np.ndarray) -> np.ndarray:
        out = np.array(states, dtype=float, copy=True)
        out[:, :2] = self.to_world(out[:, :2])
        out[:, THETA] = self.heading_to_world(out[:, THETA])
        return out


@dataclass(frozen=True)
class Scene:
    """A target track with its neighbours.

    ``t0`` is the first step of the observation window, so the last observed
    step is ``t0 + t_obs - 1`` and the future covers the ``t_f`` steps after it.
    """

    target: Track
    neighbors: tuple[Track, ...] = ()
    dt: float = DEFAULT_DT
    t_obs: int = 10
    t_f: int = 30
    t0: Optional[int] = None
    case_id: str = "0"
    frame: Optional[TargetFrame] = field(default=None, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "neighbors", tuple(self.neighbors))
        if self.t0 is None:
            object.__setattr__(self, "t0", self.target.start)
        if self.dt <= 0:
            raise ContractError(f"dt must be positive, got {self.dt}")

    @property
    def obs_step(self) -> int:
        """Step index of the last observation, ``t0 + t_obs - 1``."""
        return self.t0 + self.t_obs - 1

    @property
    def horizon(self) -> float:
        return self.t_f * self.dt

    @property
    def tracks(self) -> tuple[Track, ...]:
        return (self.target,) + self.neighbors

    def target_state(self) -> AgentState:
        return self.target.state_at(self.obs_step)


def to_target_frame(scene: Scene) -> Scene:
    """Re-express every track of ``scene`` in the frame of its target at ``obs_step``."""
    if not scene.target.has(scene.obs_step):
        raise MissingObservation(
            f"target {scene.target.agent_id} has no state at observation step {scene.obs_step}"
        )
    frame = TargetFrame.from_state(scene.target.row(scene.obs_step))

    def move(track: Track) -> Track:
        return replace(track, states=frame.states_to_frame(track.states))

    return replace(
        scene,
        target=move(scene.target),
        neighbors=tuple(move(n) for n in scene.neighbors),
        frame=frame,
    )


def derive_kinematics(positions, dt: float, headings=None) -> np.ndarray:
    """Fill speed, acceleration and heading from a position series.

    Returns a (T, 5) array of ``x, y, v, a, theta``. Speeds and headings come
    from backward differences; the first sample copies the second. When the
    displacement is below ``STATIONARY_EPS`` the previous heading is kept.
    ``headings`` overrides the derived headings when the source supplies them.
    """
    p = np.asarray(positions, dtype=float)
    if p.ndim != 2 or p.shape[1] != 2:
        raise ContractError("positions must be a (T, 2) array")
    if len(p) < 3:
        raise InsufficientHistory(f"need at least 3 samples, got {len(p)}")
    if dt <= 0:
        raise ContractError(f"dt must be positive, got {dt}")

    d = np.diff(p, axis=0)
    dist = np.hypot(d[:, 0], d[:, 1])
    v = np.empty(len(p))
    v[1:] = dist / dt
    v[0] = v[1]
    a = np.empty(len(p))
    a[1:] = np.diff(v) / dt
    a[0] = a[1]

    if headings is not None:
        theta = wrap_angle(headings)
    else:
        theta = np.empty(len(p))
        moving = dist >= STATIONARY_EPS
        raw = np.arctan2(d[:, 1], d[:, 0])
        # seed with the first well-defined heading so leading stops are not arbitrary
        prev = raw[np.argmax(moving)] if moving.any() else 0.0
        for i in range(len(d)):
            if moving[i]:
                prev = raw[i]
            theta[i + 1] = prev
        theta[0] = theta[1]
    return np.column_stack([p, v, a, theta])


def cv_extrapolate(state, horizon: float) -> tuple[float, float]:
    """Constant-velocity position after ``horizon`` seconds."""
    if horizon < 0:
        raise ContractError(f"horizon must be nonnegative, got {horizon}")
    if isinstance(state, AgentState):
        x, y, v, theta = state.x, state.y, state.v, state.theta
    else:
        x, y, v, theta = state[X], state[Y], state[V], state[THETA]
    return (x + v * math.cos(theta) * horizon, y + v * math.sin(theta) * horizon)


def cv_path(state, horizons: Sequence[float]) -> np.ndarray:
    """Vectorised :func:`cv_extrapolate` over several horizons, shape (H, 2)."""
    if isinstance(state, AgentState):
        state = state.as_array()
    h = np.asarray(horizons, dtype=float)[:, None]
    direction = np.array([math.cos(state[THETA]), math.sin(state[THETA])])
    return np.asarray(state[:2], dtype=float) + state[V] * h * direction
