"""minADE_k, minFDE_k and ground-truth collision rate (Col-II)."""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .errors import ContractError, IoError

DEFAULT_RADIUS = 1.0


def rank_modes(probs) -> np.ndarray:
    """Mode indices by descending probability, ties broken by index."""
    return np.argsort(-np.asarray(probs, dtype=float), kind="stable")


def _top(means, probs, top_k):
    means = np.asarray(means, dtype=float)
    if top_k < 1 or top_k > len(means):
        raise ContractError(f"top_k={top_k} must lie in 1..{len(means)}")
    return means[rank_modes(probs)[:top_k]]


def min_ade(means, probs, gt, top_k: int = 6) -> float:
    """Smallest mean pointwise L2 error among the ``top_k`` most likely modes.

    ``means`` is (L, T, 2), ``probs`` (L,), ``gt`` (T, 2).
    """
    err = np.linalg.norm(_top(means, probs, top_k) - np.asarray(gt, dtype=float), axis=-1)
    return float(err.mean(axis=-1).min())


def min_fde(means, probs, gt, top_k: int = 6) -> float:
    err = np.linalg.norm(_top(means, probs, top_k)[:, -1] - np.asarray(gt, dtype=float)[-1], axis=-1)
    return float(err.min())


def col_ii(predicted, neighbors_future: Sequence[np.ndarray], radius: float = DEFAULT_RADIUS) -> int:
    """1 if the predicted path comes within ``2 * radius`` of any neighbour at the same step.

    Neighbour arrays are (T, 2) and may hold NaN rows for steps where the
    neighbour is not observed; those steps are ignored.
    """
    pred = np.asarray(predicted, dtype=float)
    for nb in neighbors_future:
        d = np.linalg.norm(np.asarray(nb, dtype=float) - pred, axis=-1)
        if np.any(d[np.isfinite(d)] < 2 * radius):
            return 1
    return 0


def neighbor_futures(instance) -> list[np.ndarray]:
    """Ground-truth neighbour positions over the prediction window, NaN where unobserved."""
    s = instance.scene
    steps = np.arange(s.obs_step + 1, s.obs_step + s.t_f + 1)
    out = []
    for track in s.neighbors:
        pos = np.full((s.t_f, 2), np.nan)
        have = (steps >= track.start) & (steps <= track.end)
        if have.any():
            pos[have] = track.states[steps[have] - track.start, :2]
            out.append(pos)
    return out


@dataclass
class EvalReport:
    instance_ids: list[str] = field(default_factory=list)
    min_ade: list[float] = field(default_factory=list)
    min_fde: list[float] = field(default_factory=list)
    col_ii: list[int] = field(default_factory=list)
    top_k: int = 6

    def add(self, instance_id: str, ade: float, fde: float, col: int) -> None:
        self.instance_ids.append(instance_id)
        self.min_ade.append(ade)
        self.min_fde.append(fde)
        self.col_ii.append(col)

    @property
    def count(self) -> int:
        return len(self.instance_ids)

    @property
    def mean_ade(self) -> float:
        return float(np.mean(self.min_ade)) if self.count else float("nan")

    @property
    def mean_fde(self) -> float:
        return float(np.mean(self.min_fde)) if self.count else float("nan")

    @property
    def col_ii_percent(self) -> float:
        return 100.0 * float(np.mean(self.col_ii)) if self.count else float("nan")

    def write_csv(self, path) -> None:
        k = self.top_k
        try:
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["instance", f"minADE_{k}", f"minFDE_{k}", "col_ii"])
                for row in zip(self.instance_ids, self.min_ade, self.min_fde, self.col_ii):
                    w.writerow([row[0], repr(row[1]), repr(row[2]), row[3]])
                w.writerow(["mean", repr(self.mean_ade), repr(self.mean_fde), repr(self.col_ii_percent / 100)])
        except OSError as exc:
            raise IoError(f"cannot write {path}: {exc}") from exc

    def summary(self) -> str:
        k = self.top_k
        lines = [
            f"{'instances':>12} {'minADE_' + str(k):>10} {'minFDE_' + str(k):>10} {'Col-II':>8}",
            f"{self.count:>12d} {self.mean_ade:>10.4f} {self.mean_fde:>10.4f} {self.col_ii_percent:>7.2f}%",
        ]
        return "\n".join(lines)


def evaluate(instances, mode_sets, top_k: int = 6, radius: float = DEFAULT_RADIUS,
             all_modes_collision: bool = False) -> EvalReport:
    """Score predicted :class:`~goalchoice.neural.ModeSet` objects against ground truth.

    Col-II uses the most likely mode unless ``all_modes_collision`` is set, in
    which case an instance counts when any of the top-k modes collides.
    """
    report = EvalReport(top_k=top_k)
    for inst, modes in zip(instances, mode_sets):
        gt = inst.ground_truth_future
        if gt is None:
            raise ContractError(f"instance {inst.instance_id} has no ground truth")
        k = min(top_k, len(modes.probs))
        nbs = neighbor_futures(inst)
        order = rank_modes(modes.probs)
        if all_modes_collision:
            col = max(col_ii(modes.mu[m], nbs, radius) for m in order[:k])
        else:
            col = col_ii(modes.mu[order[0]], nbs, radius)
        report.add(inst.instance_id, min_ade(modes.mu, modes.probs, gt, k), min_fde(modes.mu, modes.probs, gt, k), col)
    return report
