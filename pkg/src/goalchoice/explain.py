"""Per-goal score decomposition and activation-map reports.

A report is a CSV with one row per goal plus an SVG with one panel per map:
predictions, NN map, DCM map, then one panel per active DCM feature. Panels
are ``<g id="panel-NAME">`` groups. The SVG is written with a fixed hash salt
and no date so identical inputs give identical bytes.
"""
from __future__ import annotations

import csv
import re
from dataclasses import dataclass
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .dcm import FEATURE_NAMES, BetaParams, DcmFeatures, mnl_probabilities
from .errors import ContractError, IoError, SchemaError
from .grid import GoalGrid

NN = "nn"
DCM = "dcm"
PREDICTIONS = "predictions"


@dataclass
class ScoreDecomposition:
    """Contributions per goal; DCM terms first (in feature order), then ``nn``."""

    instance_id: str
    goals: np.ndarray  # (K, 2)
    contributions: dict[str, np.ndarray]
    s: np.ndarray
    pi: np.ndarray
    chosen: int
    rings: Optional[np.ndarray] = None
    angles: Optional[np.ndarray] = None

    @property
    def n_goals(self) -> int:
        return len(self.s)

    @property
    def features(self) -> list[str]:
        return [k for k in self.contributions if k != NN]

    def dcm(self) -> np.ndarray:
        total = np.zeros(self.n_goals)
        for name in self.features:
            total = total + self.contributions[name]
        return total

    def maps(self) -> dict[str, np.ndarray]:
        """NN map, DCM map and per-feature maps, in panel order."""
        out = {NN: self.contributions[NN], DCM: self.dcm()}
        out.update((name, self.contributions[name]) for name in self.features)
        return out

    def favourable(self, name: str) -> np.ndarray:
        """True where the map is above its own mean."""
        values = self.maps()[name]
        return values > values.mean()

    @property
    def chosen_mask(self) -> np.ndarray:
        mask = np.zeros(self.n_goals, dtype=bool)
        mask[self.chosen] = True
        return mask


def decompose(instance, grid: GoalGrid, features: Optional[DcmFeatures], beta: Optional[BetaParams],
              nn_scores=None) -> ScoreDecomposition:
    """Split ``s_k = sum_f beta_f * x_kf + nn_k`` into its terms.

    ``features``/``beta`` may be None for a model without a DCM, ``nn_scores``
    None for a model whose NN goal score is switched off.
    """
    K = len(grid.positions)
    contributions: dict[str, np.ndarray] = {}
    if (features is None) != (beta is None):
        raise ContractError("features and beta must be given together")
    if features is not None:
        variant = features.variant
        coeffs = beta.vector(variant)
        for name, b in zip(variant.features, coeffs):
            x = np.asarray(getattr(features, name), dtype=float)
            if len(x) != K:
                raise ContractError(f"feature {name} has {len(x)} goals, grid has {K}")
            contributions[name] = b * x
    nn = np.zeros(K) if nn_scores is None else np.asarray(nn_scores, dtype=float)
    if nn.shape != (K,):
        raise ContractError(f"NN scores have shape {nn.shape}, grid has {K} goals")
    contributions[NN] = nn
    s = np.zeros(K)
    for v in contributions.values():
        s = s + v
    pi = mnl_probabilities(s)
    return ScoreDecomposition(
        instance_id=getattr(instance, "instance_id", str(instance)),
        goals=np.array(grid.positions, dtype=float),
        contributions=contributions,
        s=s,
        pi=pi,
        chosen=int(np.argmax(pi)),
        rings=np.array(grid.rings),
        angles=np.array(grid.angles),
    )


# ---------------------------------------------------------------------- CSV


def _columns(dec: ScoreDecomposition) -> list[str]:
    return ["goal", "x", "y", "ring", "angle", *dec.contributions, "s", "pi", "chosen"]


def write_decomposition_csv(dec: ScoreDecomposition, path) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(_columns(dec))
            for k in range(dec.n_goals):
                ring = "" if dec.rings is None else int(dec.rings[k])
                angle = "" if dec.angles is None else int(dec.angles[k])
                w.writerow([
                    k, repr(float(dec.goals[k, 0])), repr(float(dec.goals[k, 1])), ring, angle,
                    *(repr(float(v[k])) for v in dec.contributions.values()),
                    repr(float(dec.s[k])), repr(float(dec.pi[k])), int(k == dec.chosen),
                ])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_decomposition_csv(path, instance_id: str = "") -> ScoreDecomposition:
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            rows = list(csv.reader(fh))
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    if not rows:
        raise SchemaError(f"{path}: empty file")
    header, body = rows[0], rows[1:]
    fixed = ["goal", "x", "y", "ring", "angle"]
    if header[:5] != fixed or header[-3:] != ["s", "pi", "chosen"] or NN not in header:
        raise SchemaError(f"{path}: unexpected header {header}")
    names = header[5:-3]
    unknown = [n for n in names if n != NN and n not in FEATURE_NAMES]
    if unknown:
        raise SchemaError(f"{path}: unknown contribution columns {unknown}")
    try:
        cols = {name: np.array([float(r[i]) for r in body]) for i, name in enumerate(header) if name not in ("goal", "ring", "angle")}
        rings = np.array([int(r[3]) for r in body]) if body and body[0][3] != "" else None
        angles = np.array([int(r[4]) for r in body]) if body and body[0][4] != "" else None
    except (ValueError, IndexError) as exc:
        raise SchemaError(f"{path}: {exc}") from exc
    chosen = np.flatnonzero(cols["chosen"] == 1)
    if len(chosen) != 1:
        raise SchemaError(f"{path}: expected exactly one chosen goal, found {len(chosen)}")
    return ScoreDecomposition(
        instance_id=instance_id,
        goals=np.stack([cols["x"], cols["y"]], axis=1),
        contributions={n: cols[n] for n in names},
        s=cols["s"],
        pi=cols["pi"],
        chosen=int(chosen[0]),
        rings=rings,
        angles=angles,
    )


# ---------------------------------------------------------------------- SVG


_RC = {
    "svg.hashsalt": "goalchoice",
    "svg.fonttype": "none",
    "path.simplify": False,
    "font.size": 8,
}


def _norm(values: np.ndarray) -> np.ndarray:
    lo, hi = float(values.min()), float(values.max())
    if hi - lo <= 0:
        return np.full(len(values), 0.5)
    return (values - lo) / (hi - lo)


def _draw_scene(ax, instance, lw=1.0):
    if instance is None:
        return
    s = instance.scene
    for j, track in enumerate(s.neighbors):
        steps = np.arange(track.start, track.end + 1)
        keep = (steps >= s.t0) & (steps <= s.obs_step + s.t_f)
        if keep.any():
            xy = track.states[keep, :2]
            ax.plot(xy[:, 0], xy[:, 1], color="0.6", lw=lw, gid=f"neighbor-{j}")
            ax.plot(xy[-1, 0], xy[-1, 1], marker="s", ms=3, color="0.4")
    past = instance.target_obs()[:, :2]
    ax.plot(past[:, 0], past[:, 1], color="tab:blue", lw=1.5 * lw, gid="target-past")
    if instance.ground_truth_future is not None:
        fut = np.vstack([past[-1:], instance.ground_truth_future])
        ax.plot(fut[:, 0], fut[:, 1], color="tab:blue", lw=lw, ls="--", gid="target-future")


def _draw_goals(ax, dec: ScoreDecomposition, values: Optional[np.ndarray], cmap):
    g = dec.goals
    if values is None:
        colors = cmap(_norm(dec.pi))
        fav = np.ones(dec.n_goals, dtype=bool)
    else:
        colors = cmap(_norm(values))
        fav = values > values.mean()
    for k in range(dec.n_goals):
        ax.plot(
            g[k, 0], g[k, 1], marker="^" if fav[k] else "v", ms=6 if k != dec.chosen else 9,
            color=colors[k], markeredgecolor="k" if k == dec.chosen else "none", ls="none", gid=f"goal-{k}",
        )


def render_svg(dec: ScoreDecomposition, path, instance=None, modes=None) -> None:
    """Write the activation-map figure for ``dec`` to ``path``."""
    import matplotlib
    from matplotlib.figure import Figure

    maps = dec.maps()
    panels = [PREDICTIONS, *maps]
    with matplotlib.rc_context(_RC):
        fig = Figure(figsize=(2.6 * len(panels), 3.2))
        axes = fig.subplots(1, len(panels), squeeze=False)[0]
        cmap = matplotlib.colormaps["RdYlGn"]
        for ax, name in zip(axes, panels):
            ax.set_gid(f"panel-{name}")
            ax.set_title("predictions" if name == PREDICTIONS else f"{name} map")
            ax.set_aspect("equal", adjustable="datalim")
            _draw_scene(ax, instance)
            if name == PREDICTIONS:
                if modes is not None:
                    order = np.argsort(-modes.probs, kind="stable")
                    for rank, m in enumerate(order):
                        mu = modes.mu[m]
                        ax.plot(mu[:, 0], mu[:, 1], color="tab:red", lw=0.8,
                                alpha=0.3 + 0.7 * float(modes.probs[m] / modes.probs.max()), gid=f"mode-{rank}")
                _draw_goals(ax, dec, None, cmap)
            else:
                _draw_goals(ax, dec, maps[name], cmap)
            ax.tick_params(labelsize=6)
        fig.tight_layout()
        try:
            fig.savefig(path, format="svg", metadata={"Date": None})
        except OSError as exc:
            raise IoError(f"cannot write {path}: {exc}") from exc


def render_report(dec: ScoreDecomposition, grid: Optional[GoalGrid], instance, out_path, modes=None) -> tuple[Path, Path]:
    """Write ``<out_path>.csv`` and ``<out_path>.svg``; returns both paths.

    ``grid`` only supplies the ring/angle columns when ``dec`` lacks them.
    """
    base = Path(out_path)
    if base.suffix in (".csv", ".svg"):
        base = base.with_suffix("")
    if grid is not None and dec.rings is None:
        dec.rings, dec.angles = np.array(grid.rings), np.array(grid.angles)
    csv_path, svg_path = base.with_suffix(".csv"), base.with_suffix(".svg")
    write_decomposition_csv(dec, csv_path)
    render_svg(dec, svg_path, instance, modes)
    return csv_path, svg_path


def safe_name(text: str) -> str:
    return re.sub(r"[^A-Za-z0-9_.-]+", "_", text)


# ----------------------------------------------------------- model reports


def explain_predictions(model, instances: Sequence, out_dir=None, batch_size: int = 64) -> list[ScoreDecomposition]:
    """Decompose a trained model's goal scores for every instance.

    With ``out_dir`` a report pair is written per instance and an index CSV
    ``explain.csv`` (instance, chosen goal, model goal, file stem).
    """
    from .grid import build_grid

    cfg = model.cfg
    if not cfg.uses_goals:
        raise ContractError("explanations need a goal-based model (methods II-IV)")
    items = model.prepare(instances, "infer")
    preds = model.predict_data(items, batch_size)
    beta = model.beta
    out = []
    index_rows = []
    if out_dir is not None:
        Path(out_dir).mkdir(parents=True, exist_ok=True)
    for n, (inst, item, pred) in enumerate(zip(instances, items, preds)):
        grid = build_grid(item.target_obs[-1], inst.scene.horizon, cfg.grid, cfg.grid_mode)
        dec = decompose(inst, grid, item.features, beta, pred.nn)
        out.append(dec)
        if out_dir is not None:
            stem = f"{n:04d}_{safe_name(inst.instance_id)}"
            render_report(dec, grid, inst, Path(out_dir) / stem, pred.modes)
            index_rows.append([inst.instance_id, dec.chosen, pred.goal, stem])
    if out_dir is not None:
        path = Path(out_dir) / "explain.csv"
        try:
            with open(path, "w", newline="", encoding="utf-8") as fh:
                w = csv.writer(fh, lineterminator="\n")
                w.writerow(["instance", "chosen", "model_goal", "report"])
                w.writerows(index_rows)
        except OSError as exc:
            raise IoError(f"cannot write {path}: {exc}") from exc
    return out
