"""Shared fixtures and small builders for the test suite."""
from __future__ import annotations

import math

import numpy as np
import pytest

from goalchoice.config import ModelConfig, TrainConfig
from goalchoice.grid import GridConfig
from goalchoice.ingest import PredictionInstance, build_instances
from goalchoice.scene import Scene, Track, derive_kinematics
from goalchoice.synth import SCENARIOS, SynthConfig, synth_generate


def straight_track(agent_id, start_xy, heading, speed, n, dt=0.1, start=0) -> Track:
    d = np.array([math.cos(heading), math.sin(heading)])
    pos = np.asarray(start_xy, dtype=float) + speed * dt * np.arange(n)[:, None] * d
    states = np.column_stack([pos, np.full(n, speed), np.zeros(n), np.full(n, heading)])
    return Track(agent_id=agent_id, start=start, states=states)


def frame_instance(neighbors=(), t_obs=10, t_f=30, speed=5.0, dt=0.1, instance_id="x") -> PredictionInstance:
    """Target at the origin heading +y at the last observation step.

    ``neighbors`` are (x, y, heading, speed) tuples giving each neighbour's
    state at that step; they move at constant velocity across the whole window.
    """
    n = t_obs + t_f
    up = math.pi / 2
    target_start = (0.0, -speed * dt * (t_obs - 1))
    target = straight_track("t", target_start, up, speed, t_obs, dt)
    tracks = []
    for j, (x, y, th, v) in enumerate(neighbors):
        d = np.array([math.cos(th), math.sin(th)])
        start = np.array([x, y]) - v * dt * (t_obs - 1) * d
        tracks.append(straight_track(f"n{j}", start, th, v, n, dt))
    scene = Scene(target=target, neighbors=tuple(tracks), dt=dt, t_obs=t_obs, t_f=t_f, t0=0)
    gt = np.column_stack([np.zeros(t_f), speed * dt * np.arange(1, t_f + 1)])
    return PredictionInstance(scene, gt, (True,) * len(tracks), instance_id)


def small_model_config(method="III", dcm="1", **kw) -> ModelConfig:
    """Downsized network: K=5 goals, L=2 modes, C_h=8."""
    base = dict(
        method=method, dcm=dcm, n_modes=2, hidden=8, embed=4, attn_dim=4, goal_embed=4, dec_hidden=8,
        grid=GridConfig(n_rings=1, n_angles=5, scales=(1.0,)),
    )
    base.update(kw)
    return ModelConfig(**base)


def small_instances(n, seed=0, t_obs=4, t_f=6, scenarios=SCENARIOS, background=2):
    cfg = SynthConfig(scenarios=scenarios, n=n, n_frames=t_obs + t_f + 1, t_obs=t_obs, t_f=t_f,
                      n_background=background)
    return build_instances(synth_generate(cfg, seed), t_obs, t_f)


@pytest.fixture(scope="session")
def corpus():
    """Instances from 12 mixed synthetic scenes at default windows."""
    return build_instances(synth_generate(SynthConfig(scenarios=SCENARIOS, n=12), seed=3))


@pytest.fixture(scope="session")
def tiny_train_config():
    return TrainConfig(model=small_model_config(), epochs=2, batch_size=4, seed=5)


def numeric_grads(params, loss_fn, h=1e-5):
    """Central differences of ``loss_fn()`` (returning a scalar Tensor) for every parameter entry."""
    out = {}
    for name, t in params.items():
        g = np.zeros(t.shape, dtype=t.value.dtype)
        flat = t.value.reshape(-1)
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + h
            up = loss_fn().value
            flat[i] = orig - h
            down = loss_fn().value
            flat[i] = orig
            g.reshape(-1)[i] = (up - down) / (2 * h)
        out[name] = g
    return out


def max_rel_err(analytic, numeric, floor=1e-8):
    """Largest elementwise relative error over entries with |grad| above ``floor``."""
    worst = 0.0
    for name, a in analytic.items():
        a = np.asarray(a, dtype=np.longdouble)
        n = np.asarray(numeric[name], dtype=np.longdouble)
        big = np.abs(a) > floor
        if big.any():
            worst = max(worst, float(np.max(np.abs(a[big] - n[big]) / np.maximum(np.abs(a[big]), np.abs(n[big])))))
    return worst


ACCEPTANCE = pytest.StashKey[list]()


@pytest.fixture
def verdict(request):
    """Record one PASS/FAIL line per acceptance criterion and print it."""

    def record(number, title, ok, detail=""):
        line = f"[{'PASS' if ok else 'FAIL'}] criterion {number}: {title}" + (f" ({detail})" if detail else "")
        print(line)
        request.config.stash.setdefault(ACCEPTANCE, []).append((number, line))
        return ok

    return record


def pytest_terminal_summary(terminalreporter, exitstatus, config):
    lines = config.stash.get(ACCEPTANCE, [])
    if lines:
        terminalreporter.section("acceptance criteria")
        for _, line in sorted(lines):
            terminalreporter.write_line(line)
