"""Track files, prediction windows and interaction-space neighbour selection.

The CSV layout follows the public INTERACTION track files::

    case_id,track_id,frame_id,timestamp_ms,agent_type,x,y,vx,vy,psi_rad,length,width

Only ``case_id, track_id, frame_id, x, y`` are mandatory.
"""
from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Iterable, Iterator, Optional, Sequence

import numpy as np

from .errors import ContractError, IoError, OrderError, SchemaError
from .scene import (
    DEFAULT_DT,
    V,
    Scene,
    TargetFrame,
    Track,
    cv_extrapolate,
    cv_path,
    derive_kinematics,
    to_target_frame,
)

log = logging.getLogger(__name__)

CSV_COLUMNS = (
    "case_id", "track_id", "frame_id", "timestamp_ms", "agent_type",
    "x", "y", "vx", "vy", "psi_rad", "length", "width",
)
MANDATORY = ("case_id", "track_id", "frame_id", "x", "y")
NON_VEHICLE_TYPES = {"pedestrian", "bicycle", "pedestrian/bicycle"}


@dataclass(frozen=True)
class InteractionSpace:
    """Target-frame box: ``ahead``/``behind`` along +y/-y, ``side`` each way along x."""

    ahead: float = 40.0
    behind: float = 10.0
    side: float = 25.0

    def __post_init__(self):
        if min(self.ahead, self.behind, self.side) <= 0:
            raise ContractError(f"interaction space extents must be positive: {self}")

    def contains(self, points) -> np.ndarray:
        p = np.atleast_2d(np.asarray(points, dtype=float))
        return (
            (p[:, 0] >= -self.side) & (p[:, 0] <= self.side)
            & (p[:, 1] >= -self.behind) & (p[:, 1] <= self.ahead)
        )


@dataclass(frozen=True)
class PredictionInstance:
    """One target-frame prediction problem.

    Steps are relabelled so the window starts at 0; the last observation is
    ``scene.obs_step == t_obs - 1``. The target track holds observations only,
    neighbour tracks may extend into the future (used for Col-II and the
    training-time future-occupancy feature).
    """

    scene: Scene
    ground_truth_future: Optional[np.ndarray]
    neighbor_mask: tuple[bool, ...]
    instance_id: str = "0"

    def __post_init__(self):
        gt = self.ground_truth_future
        if gt is not None:
            gt = np.array(gt, dtype=float)
            if gt.shape != (self.scene.t_f, 2):
                raise ContractError(f"ground truth future must be ({self.scene.t_f}, 2), got {gt.shape}")
            gt.flags.writeable = False
            object.__setattr__(self, "ground_truth_future", gt)
        object.__setattr__(self, "neighbor_mask", tuple(bool(m) for m in self.neighbor_mask))
        if len(self.neighbor_mask) != len(self.scene.neighbors):
            raise ContractError("neighbor_mask length differs from neighbour count")

    def __eq__(self, other):
        if not isinstance(other, PredictionInstance):
            return NotImplemented
        a, b = self.ground_truth_future, other.ground_truth_future
        same_gt = (a is None and b is None) or (
            a is not None and b is not None and np.array_equal(a, b)
        )
        return (
            self.scene == other.scene
            and same_gt
            and self.neighbor_mask == other.neighbor_mask
            and self.instance_id == other.instance_id
        )

    @property
    def t_obs(self) -> int:
        return self.scene.t_obs

    @property
    def t_f(self) -> int:
        return self.scene.t_f

    @property
    def selected_neighbors(self) -> list[Track]:
        return [n for n, keep in zip(self.scene.neighbors, self.neighbor_mask) if keep]

    def target_obs(self) -> np.ndarray:
        """Observed target states, shape (t_obs, 5)."""
        s = self.scene
        return s.target.states[s.t0 - s.target.start : s.obs_step - s.target.start + 1]


# --------------------------------------------------------------------- parsing


def _opt_float(value: str) -> Optional[float]:
    value = value.strip()
    if value == "" or value.lower() == "nan":
        return None
    return float(value)


def parse_tracks(path, t_obs: int = 10, t_f: int = 30) -> list[Scene]:
    """Read an INTERACTION-style CSV into one :class:`Scene` per vehicle track.

    Each vehicle in a case becomes the target once; every other track of the
    case is a neighbour. Rows that fail to parse are skipped and logged with
    their line number.
    """
    path = Path(path)
    try:
        fh = open(path, newline="", encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc

    with fh:
        reader = csv.DictReader(fh)
        header = [h.strip() for h in (reader.fieldnames or [])]
        missing = [c for c in MANDATORY if c not in header]
        if missing:
            raise SchemaError(f"{path}: missing mandatory column(s) {', '.join(missing)}")
        reader.fieldnames = header

        # (case, track) -> accumulated rows; dicts keep file order
        tracks: dict[tuple[str, str], dict] = {}
        bad_rows = 0
        for row in reader:
            line = reader.line_num
            try:
                case, tid = row["case_id"].strip(), row["track_id"].strip()
                frame = int(float(row["frame_id"]))
                x, y = float(row["x"]), float(row["y"])
                if not (math.isfinite(x) and math.isfinite(y)):
                    raise ValueError("non-finite position")
                extra = {k: _opt_float(row.get(k) or "") for k in ("vx", "vy", "psi_rad", "length", "width", "timestamp_ms")}
            except (ValueError, TypeError, AttributeError) as exc:
                bad_rows += 1
                log.warning("%s:%d: malformed row skipped (%s)", path, line, exc)
                continue

            rec = tracks.setdefault((case, tid), {
                "frames": [], "xy": [], "vxy": [], "psi": [], "ts": [],
                "type": (row.get("agent_type") or "car").strip() or "car",
                "length": extra["length"], "width": extra["width"],
            })
            if rec["frames"]:
                last = rec["frames"][-1]
                if frame == last or (frame < last and frame in rec["frames"]):
                    raise OrderError(f"{path}:{line}: duplicate key (case_id={case}, track_id={tid}, frame_id={frame})")
                if frame < last:
                    raise OrderError(f"{path}:{line}: non-monotone frames for (case_id={case}, track_id={tid}): {frame} after {last}")
                if frame != last + 1:
                    raise OrderError(f"{path}:{line}: frame gap for (case_id={case}, track_id={tid}): {last} -> {frame}")
            rec["frames"].append(frame)
            rec["xy"].append((x, y))
            rec["vxy"].append((extra["vx"], extra["vy"]))
            rec["psi"].append(extra["psi_rad"])
            rec["ts"].append(extra["timestamp_ms"])

    if bad_rows:
        log.warning("%s: %d malformed row(s) skipped", path, bad_rows)

    by_case: dict[str, list[tuple[str, dict]]] = {}
    for (case, tid), rec in tracks.items():
        by_case.setdefault(case, []).append((tid, rec))

    scenes = []
    for case, recs in by_case.items():
        dt = _infer_dt(recs)
        built = []
        for tid, rec in recs:
            if len(rec["frames"]) < 3:
                log.warning("%s: case %s track %s has %d sample(s), skipped", path, case, tid, len(rec["frames"]))
                continue
            built.append(_build_track(tid, rec, dt))
        for target in built:
            if target.agent_type.lower() in NON_VEHICLE_TYPES:
                continue
            others = tuple(t for t in built if t is not target)
            scenes.append(Scene(target=target, neighbors=others, dt=dt, t_obs=t_obs, t_f=t_f, case_id=case))
    return scenes


def _infer_dt(recs) -> float:
    ratios = []
    for _, rec in recs:
        ts, fr = rec["ts"], rec["frames"]
        for i in range(1, len(fr)):
            if ts[i] is not None and ts[i - 1] is not None:
                ratios.append((ts[i] - ts[i - 1]) / 1000.0 / (fr[i] - fr[i - 1]))
    if not ratios:
        return DEFAULT_DT
    dt = float(np.median(ratios))
    return dt if dt > 0 else DEFAULT_DT


def _build_track(tid: str, rec: dict, dt: float) -> Track:
    xy = np.array(rec["xy"], dtype=float)
    vxy = rec["vxy"]
    psi = rec["psi"]
    headings = None
    if all(p is not None for p in psi):
        headings = np.array(psi, dtype=float)
    elif all(vx is not None and vy is not None for vx, vy in vxy):
        vel = np.array(vxy, dtype=float)
        if np.all(np.hypot(vel[:, 0], vel[:, 1]) >= 1e-6):
            headings = np.arctan2(vel[:, 1], vel[:, 0])
    states = derive_kinematics(xy, dt, headings=headings)
    if all(vx is not None and vy is not None for vx, vy in vxy):
        vel = np.array(vxy, dtype=float)
        speed = np.hypot(vel[:, 0], vel[:, 1])
        states[:, V] = speed
        states[1:, 3] = np.diff(speed) / dt
        states[0, 3] = states[1, 3]
    kw = {}
    if rec["length"] is not None:
        kw["length"] = rec["length"]
    if rec["width"] is not None:
        kw["width"] = rec["width"]
    return Track(agent_id=tid, start=rec["frames"][0], states=states, agent_type=rec["type"], **kw)


def write_tracks(scenes: Iterable[Scene], path) -> None:
    """Write the tracks of ``scenes`` (world frame) in the CSV layout above.

    Tracks shared by several scenes of the same case are written once.
    """
    path = Path(path)
    seen: set[tuple[str, str]] = set()
    rows = []
    for scene in scenes:
        frame = scene.frame
        for track in scene.tracks:
            key = (scene.case_id, track.agent_id)
            if key in seen:
                continue
            seen.add(key)
            states = track.states if frame is None else frame.states_to_world(track.states)
            for step, (x, y, v, _a, theta) in zip(track.steps, states):
                rows.append((
                    scene.case_id, track.agent_id, int(step), int(round(step * scene.dt * 1000)),
                    track.agent_type, repr(float(x)), repr(float(y)),
                    repr(float(v * math.cos(theta))), repr(float(v * math.sin(theta))),
                    repr(float(theta)), repr(float(track.length)), repr(float(track.width)),
                ))
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(CSV_COLUMNS)
            w.writerows(rows)
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


# ------------------------------------------------------------------- windowing


def anchor_state(track: Track, obs_step: int, dt: float) -> np.ndarray:
    """Track state at ``obs_step``, CV-extrapolated from its last state if it ended earlier."""
    if track.has(obs_step):
        return track.row(obs_step)
    if track.end < obs_step:
        last = np.array(track.row(track.end), copy=True)
        last[:2] = cv_extrapolate(last, (obs_step - track.end) * dt)
        return last
    raise ContractError(f"track {track.agent_id} starts after step {obs_step}")


def select_neighbors(instance: PredictionInstance, space: InteractionSpace = InteractionSpace()) -> tuple[bool, ...]:
    """Mask of neighbours inside ``space`` at t_obs or entering it under CV motion."""
    s = instance.scene
    horizons = np.arange(1, s.t_f + 1) * s.dt
    mask = []
    for track in s.neighbors:
        if track.start > s.obs_step:
            mask.append(False)
            continue
        state = anchor_state(track, s.obs_step, s.dt)
        if space.contains(state[:2])[0]:
            mask.append(True)
        else:
            mask.append(bool(space.contains(cv_path(state, horizons)).any()))
    return tuple(mask)


def window_instances(
    scene: Scene,
    t_obs: int = 10,
    t_f: int = 30,
    stride: Optional[int] = None,
    space: InteractionSpace = InteractionSpace(),
) -> list[PredictionInstance]:
    """Cut ``scene`` into target-frame instances with full observation and future windows."""
    if t_obs < 2 or t_f < 1:
        raise ContractError(f"need t_obs >= 2 and t_f >= 1, got {t_obs}, {t_f}")
    stride = t_f if stride is None else stride
    if stride < 1:
        raise ContractError(f"stride must be positive, got {stride}")

    target = scene.target
    out = []
    for first in range(target.start, target.end - (t_obs + t_f) + 2, stride):
        obs_end = first + t_obs - 1
        last = obs_end + t_f
        tgt = target.crop(first, obs_end).shifted(-first)
        gt = target.states[obs_end + 1 - target.start : last + 1 - target.start, :2]
        neighbors = []
        for n in scene.neighbors:
            # keep only neighbours seen during the observation window
            if n.crop(first, obs_end) is None:
                continue
            neighbors.append(n.crop(first, last).shifted(-first))
        windowed = Scene(
            target=tgt, neighbors=tuple(neighbors), dt=scene.dt, t_obs=t_obs, t_f=t_f,
            t0=0, case_id=scene.case_id,
        )
        framed = to_target_frame(windowed)
        gt_frame = framed.frame.to_frame(gt)
        inst = PredictionInstance(
            scene=framed,
            ground_truth_future=gt_frame,
            neighbor_mask=(True,) * len(neighbors),
            instance_id=f"{scene.case_id}:{target.agent_id}:{first}",
        )
        out.append(replace(inst, neighbor_mask=select_neighbors(inst, space)))
    return out


def build_instances(scenes: Sequence[Scene], t_obs: int = 10, t_f: int = 30, stride: Optional[int] = None,
                    space: InteractionSpace = InteractionSpace()) -> list[PredictionInstance]:
    out = []
    for scene in scenes:
        out.extend(window_instances(scene, t_obs, t_f, stride, space))
    return out


# ----------------------------------------------------------------- JSONL cache


def _track_record(t: Track) -> dict:
    return {
        "agent_id": t.agent_id,
        "agent_type": t.agent_type,
        "length": t.length,
        "width": t.width,
        "start": t.start,
        "states": t.states.tolist(),
    }


def _track_from_record(r: dict) -> Track:
    return Track(
        agent_id=r["agent_id"], start=r["start"], states=np.array(r["states"], dtype=float).reshape(-1, 5),
        agent_type=r["agent_type"], length=r["length"], width=r["width"],
    )


def instance_to_record(inst: PredictionInstance) -> dict:
    s = inst.scene
    frame = None if s.frame is None else {"origin": list(s.frame.origin), "rotation": s.frame.rotation}
    gt = inst.ground_truth_future
    return {
        "instance_id": inst.instance_id,
        "case_id": s.case_id,
        "dt": s.dt,
        "t_obs": s.t_obs,
        "t_f": s.t_f,
        "t0": s.t0,
        "frame": frame,
        "target": _track_record(s.target),
        "neighbors": [_track_record(n) for n in s.neighbors],
        "neighbor_mask": list(inst.neighbor_mask),
        "ground_truth_future": None if gt is None else gt.tolist(),
    }


def instance_from_record(r: dict) -> PredictionInstance:
    frame = None
    if r.get("frame") is not None:
        frame = TargetFrame(tuple(r["frame"]["origin"]), r["frame"]["rotation"])
    scene = Scene(
        target=_track_from_record(r["target"]),
        neighbors=tuple(_track_from_record(n) for n in r["neighbors"]),
        dt=r["dt"], t_obs=r["t_obs"], t_f=r["t_f"], t0=r["t0"], case_id=r["case_id"], frame=frame,
    )
    gt = r.get("ground_truth_future")
    return PredictionInstance(
        scene=scene,
        ground_truth_future=None if gt is None else np.array(gt, dtype=float).reshape(-1, 2),
        neighbor_mask=tuple(r["neighbor_mask"]),
        instance_id=r["instance_id"],
    )


def save_instances(instances: Iterable[PredictionInstance], path) -> None:
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for inst in instances:
                fh.write(json.dumps(instance_to_record(inst)) + "\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def iter_instances(path) -> Iterator[PredictionInstance]:
    try:
        fh = open(path, encoding="utf-8")
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    with fh:
        for lineno, line in enumerate(fh, 1):
            if not line.strip():
                continue
            try:
                yield instance_from_record(json.loads(line))
            except (KeyError, ValueError, TypeError) as exc:
                raise SchemaError(f"{path}:{lineno}: bad instance record ({exc})") from exc


def load_instances(path) -> list[PredictionInstance]:
    return list(iter_instances(path))
