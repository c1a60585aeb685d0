"""Radial goal grid: candidate endpoints, their sectors and the goal label."""
from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .errors import ConfigError, IoError
from .scene import THETA, V, X, Y, AgentState, wrap_angle

FIXED = "fixed"
DYNAMIC = "dynamic"


@dataclass(frozen=True)
class GridConfig:
    n_rings: int = 3
    n_angles: int = 5
    span_deg: float = 120.0  # full angular span, centred on the heading
    scales: tuple[float, ...] = (0.5, 1.0, 1.5)
    fixed_v: float = 5.83  # mean INTERACTION training speed
    v_floor: float = 0.5  # replaces an exactly-zero speed in dynamic mode

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        if len(self.scales) != self.n_rings:
            raise ConfigError(f"{self.n_rings} rings need {self.n_rings} scale factors, got {self.scales}")
        if self.n_rings < 1 or self.n_angles < 1:
            raise ConfigError("grid needs at least one ring and one angle")
        if any(s <= 0 for s in self.scales) or any(b <= a for a, b in zip(self.scales, self.scales[1:])):
            raise ConfigError(f"ring scales must be positive and strictly increasing: {self.scales}")
        if self.fixed_v <= 0 or self.v_floor <= 0 or not 0 < self.span_deg < 360:
            raise ConfigError(f"invalid grid config {self}")

    @property
    def n_goals(self) -> int:
        return self.n_rings * self.n_angles

    @property
    def angle_offsets(self) -> np.ndarray:
        """Bearing offsets from the heading, radians, ascending (right to left)."""
        if self.n_angles == 1:
            return np.zeros(1)
        half = math.radians(self.span_deg) / 2
        return np.linspace(-half, half, self.n_angles)

    @property
    def half_width(self) -> float:
        if self.n_angles == 1:
            return math.radians(self.span_deg) / 2
        return math.radians(self.span_deg) / (self.n_angles - 1) / 2


def _frozen(a, dtype=float):
    a = np.array(a, dtype=dtype)
    a.flags.writeable = False
    return a


@dataclass(frozen=True, eq=False)
class GoalGrid:
    """K goals indexed ``k = ring * n_angles + angle``.

    ``bearings`` and ``sectors`` are absolute frame angles; ``offsets`` are the
    same angles relative to ``heading``.
    """

    positions: np.ndarray  # (K, 2)
    rings: np.ndarray  # (K,)
    angles: np.ndarray  # (K,) angle index
    offsets: np.ndarray  # (K,) bearing offset from heading
    half_width: float
    bands: np.ndarray  # (K, 2) [r_lo, r_hi)
    center: tuple[float, float] = (0.0, 0.0)
    heading: float = math.pi / 2
    mode: str = FIXED
    v_used: float = 5.83

    def __post_init__(self):
        for name, dtype in (("positions", float), ("rings", int), ("angles", int), ("offsets", float), ("bands", float)):
            object.__setattr__(self, name, _frozen(getattr(self, name), dtype))
        if len(self.positions) == 0:
            raise ConfigError("empty goal grid")
        if not np.all(np.isfinite(self.positions)):
            raise ConfigError("non-finite goal position")

    def __len__(self) -> int:
        return len(self.positions)

    @property
    def bearings(self) -> np.ndarray:
        return wrap_angle(self.heading + self.offsets)

    @property
    def sectors(self) -> np.ndarray:
        """(K, 2) absolute angular interval [lo, hi) of each goal."""
        b = self.heading + self.offsets
        return np.column_stack([b - self.half_width, b + self.half_width])

    def relative_polar(self, points) -> tuple[np.ndarray, np.ndarray]:
        """Range and heading-relative bearing of points about the grid centre."""
        d = np.atleast_2d(np.asarray(points, dtype=float)) - np.asarray(self.center)
        r = np.hypot(d[:, 0], d[:, 1])
        rel = wrap_angle(np.arctan2(d[:, 1], d[:, 0]) - self.heading)
        return r, rel

    def angle_index(self, rel_bearing) -> np.ndarray:
        """Angle column containing each relative bearing, -1 outside the span."""
        offs = np.unique(self.offsets)
        rel = np.asarray(rel_bearing, dtype=float)
        idx = np.full(rel.shape, -1, dtype=int)
        for j, off in enumerate(offs):
            inside = (rel >= off - self.half_width) & (rel < off + self.half_width)
            idx[inside & (idx < 0)] = j
        return idx


def build_grid(target_state, horizon: float, config: GridConfig = GridConfig(), mode: str = FIXED) -> GoalGrid:
    """Goals on speed-scaled rings around the target heading.

    Ring ``i`` sits at ``scales[i] * v_used * horizon``; the band of each ring
    runs between the midpoints to its neighbours, the outermost is unbounded.
    """
    if horizon <= 0:
        raise ConfigError(f"horizon must be positive, got {horizon}")
    if isinstance(target_state, AgentState):
        target_state = target_state.as_array()
    x, y, v, theta = (float(target_state[i]) for i in (X, Y, V, THETA))
    if mode == FIXED:
        v_used = config.fixed_v
    elif mode == DYNAMIC:
        v_used = v if v != 0 else config.v_floor
    else:
        raise ConfigError(f"grid mode must be '{FIXED}' or '{DYNAMIC}', got {mode!r}")
    if v_used <= 0:
        raise ConfigError(f"dynamic grid needs a positive speed, got {v_used}")

    radii = np.array(config.scales) * v_used * horizon
    edges = np.concatenate([[0.0], (radii[1:] + radii[:-1]) / 2, [np.inf]])
    offsets = config.angle_offsets
    rings, angles = np.divmod(np.arange(config.n_goals), config.n_angles)
    bearing = theta + offsets[angles]
    positions = np.column_stack([x + radii[rings] * np.cos(bearing), y + radii[rings] * np.sin(bearing)])
    return GoalGrid(
        positions=positions,
        rings=rings,
        angles=angles,
        offsets=offsets[angles],
        half_width=config.half_width,
        bands=np.column_stack([edges[rings], edges[rings + 1]]),
        center=(x, y),
        heading=theta,
        mode=mode,
        v_used=v_used,
    )


def label_goal(grid: GoalGrid, endpoint) -> int:
    """Index of the goal nearest to ``endpoint``; ties go to the lowest index."""
    d = np.hypot(*(grid.positions - np.asarray(endpoint, dtype=float)).T)
    return int(np.argmin(d))


def locate_in_sector(grid: GoalGrid, point) -> Optional[int]:
    """Goal whose angular sector and radial band contain ``point``, else None."""
    r, rel = grid.relative_polar(point)
    j = int(grid.angle_index(rel)[0])
    if j < 0:
        return None
    hits = np.flatnonzero((grid.angles == j) & (grid.bands[:, 0] <= r[0]) & (r[0] < grid.bands[:, 1]))
    return int(hits[0]) if len(hits) else None


def write_grid_csv(grid: GoalGrid, path) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["goal", "x", "y", "ring", "angle"])
            for k, ((gx, gy), ring, ang) in enumerate(zip(grid.positions, grid.rings, grid.angles)):
                w.writerow([k, repr(float(gx)), repr(float(gy)), int(ring), int(ang)])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
