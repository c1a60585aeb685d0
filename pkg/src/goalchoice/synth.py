"""Synthetic driving scenes for desk-scale experiments.

Every scene is generated from its own ``default_rng([seed, index])`` stream, so
output depends only on ``(config, seed)`` and scenes can be produced in any
order or in parallel.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .errors import ConfigError
from .scene import Scene, Track, derive_kinematics

SCENARIOS = ("straight", "turn_left", "turn_right", "crossing", "follower", "oncoming")


@dataclass(frozen=True)
class SynthConfig:
    scenarios: tuple[str, ...] = ("straight",)
    n: int = 1
    n_frames: int = 40
    dt: float = 0.1
    t_obs: int = 10
    t_f: int = 30
    n_background: int = 1

    def __post_init__(self):
        if isinstance(self.scenarios, str):
            object.__setattr__(self, "scenarios", (self.scenarios,))
        unknown = [s for s in self.scenarios if s not in SCENARIOS]
        if unknown or not self.scenarios:
            raise ConfigError(f"unknown scenario(s) {unknown or self.scenarios}; choose from {', '.join(SCENARIOS)}")
        if self.n < 0 or self.n_frames < 3 or self.dt <= 0:
            raise ConfigError(f"invalid synth config {self}")


def _integrate(start, heading0, speeds, yaw_rates, dt) -> np.ndarray:
    """Positions from per-step speed and yaw rate (Euler, heading applied before the move)."""
    n = len(speeds)
    pos = np.empty((n, 2))
    pos[0] = start
    theta = heading0
    for t in range(1, n):
        theta += yaw_rates[t] * dt
        pos[t] = pos[t - 1] + speeds[t] * dt * np.array([math.cos(theta), math.sin(theta)])
    return pos


def _speed_profile(rng, n, dt, lo=4.0, hi=9.0, accel=0.5) -> np.ndarray:
    v0 = rng.uniform(lo, hi)
    a = rng.uniform(-accel, accel)
    return np.maximum(v0 + a * dt * np.arange(n), 0.5)


def _turn_rates(rng, n, dt, t_obs, sign, lo_deg, hi_deg, duration=None, lead=3) -> np.ndarray:
    start = int(rng.integers(max(1, t_obs - lead), t_obs + 6))
    end = n if duration is None else min(n, start + duration)
    total = math.radians(rng.uniform(lo_deg, hi_deg))
    rates = np.zeros(n)
    rates[start:end] = sign * total / ((end - start) * dt)
    return rates


def _track(agent_id, positions, dt) -> Track:
    return Track(agent_id=agent_id, start=1, states=derive_kinematics(positions, dt))


def _background(rng, anchor, heading, t_obs, n, dt) -> np.ndarray:
    """A straight-driving car that sits inside the target's interaction space at ``t_obs``."""
    ahead = np.array([math.cos(heading), math.sin(heading)])
    left = np.array([-ahead[1], ahead[0]])
    at_obs = anchor + ahead * rng.uniform(-8, 38) + left * rng.uniform(-23, 23)
    theta = rng.uniform(-math.pi, math.pi)
    speeds = _speed_profile(rng, n, dt, 1.0, 8.0)
    # walk back to the first frame so the car passes ``at_obs`` at step t_obs - 1
    start = at_obs - speeds[1:t_obs].sum() * dt * np.array([math.cos(theta), math.sin(theta)])
    return _integrate(start, theta, speeds, np.zeros(n), dt)


def generate_scene(config: SynthConfig, seed: int, index: int) -> Scene:
    rng = np.random.default_rng([seed, index])
    scenario = config.scenarios[index % len(config.scenarios)]
    n, dt, t_obs = config.n_frames, config.dt, config.t_obs

    heading = rng.uniform(-math.pi, math.pi)
    origin = rng.uniform(-100, 100, size=2)
    ahead = np.array([math.cos(heading), math.sin(heading)])
    left = np.array([-ahead[1], ahead[0]])
    speeds = _speed_profile(rng, n, dt)
    yaw = np.zeros(n)
    others = []

    if scenario == "turn_left":
        yaw = _turn_rates(rng, n, dt, t_obs, +1, 40, 80)
    elif scenario == "turn_right":
        yaw = _turn_rates(rng, n, dt, t_obs, -1, 40, 80)
    elif scenario == "crossing":
        side = rng.choice([-1.0, 1.0])
        direction = -side * left  # coming from the chosen side, moving across the target lane
        t_cross = rng.uniform(t_obs, n) * dt
        meet = origin + ahead * rng.uniform(15, 30)
        v = rng.uniform(4, 8)
        start = meet - direction * v * t_cross
        others.append(_integrate(start, math.atan2(direction[1], direction[0]), np.full(n, v), np.zeros(n), dt))
    elif scenario == "follower":
        gap = rng.uniform(12, 25)
        v = np.maximum(speeds + rng.uniform(-1, 1), 0.5)
        others.append(_integrate(origin + ahead * gap, heading, v, np.zeros(n), dt))
    elif scenario == "oncoming":
        # head-on neighbour in the target's path; the target swerves after t_obs
        v = rng.uniform(4, 8)
        dist_at_obs = rng.uniform(30, 45)
        pos_target_obs = origin + ahead * speeds[1:t_obs].sum() * dt
        start = pos_target_obs + ahead * (dist_at_obs + v * (t_obs - 1) * dt) + left * rng.uniform(-1, 1)
        opp = heading + math.pi + math.radians(rng.uniform(-5, 5))
        others.append(_integrate(start, opp, np.full(n, v), np.zeros(n), dt))
        yaw = _turn_rates(rng, n, dt, t_obs, rng.choice([-1.0, 1.0]), 35, 55, duration=15, lead=0)

    target = _integrate(origin, heading, speeds, yaw, dt)
    for _ in range(config.n_background):
        others.append(_background(rng, target[t_obs - 1], heading, t_obs, n, dt))
    return Scene(
        target=_track("1", target, dt),
        neighbors=tuple(_track(str(i + 2), p, dt) for i, p in enumerate(others)),
        dt=dt,
        t_obs=config.t_obs,
        t_f=config.t_f,
        case_id=f"{scenario}-{seed}-{index}",
    )


def synth_generate(config: SynthConfig, seed: int = 0) -> list[Scene]:
    """Generate ``config.n`` scenes, cycling through ``config.scenarios``."""
    return [generate_scene(config, seed, i) for i in range(config.n)]
