"""Discrete choice model over grid goals.

Features per goal ``k``:

* ``dir``   absolute bearing difference between goal and target heading, in [0, pi];
* ``occ``   neighbours at t_obs inside the goal's cell, each weighted ``exp(-d/rho_occ)``
  by its distance to the goal;
* ``col``   neighbours in the goal's angular sector heading towards the target
  (within ``theta_col`` of the goal->origin direction), weighted ``exp(-r/lambda_col)``
  by their range;
* ``occup`` like ``occ`` but with neighbour positions ``t_f`` steps ahead
  (ground truth when training, constant velocity at inference).

Utilities are linear in the raw features; probabilities are the multinomial logit.
"""
from __future__ import annotations

import csv
import enum
import logging
import math
import warnings
from dataclasses import dataclass, fields
from typing import Iterable, Optional, Sequence, Union

import numpy as np

from .errors import ConfigError, ContractError, IdentifiabilityWarning, IoError, NonConvergence
from .grid import GoalGrid
from .ingest import PredictionInstance, anchor_state
from .scene import THETA, V, cv_extrapolate, wrap_angle

log = logging.getLogger(__name__)

FEATURE_NAMES = ("dir", "occ", "col", "occup")


class DcmVariant(enum.Enum):
    DCM1 = ("dir", "occ", "col")
    DCM2 = ("dir", "occup")

    @property
    def features(self) -> tuple[str, ...]:
        return self.value

    @property
    def coefficients(self) -> tuple[str, ...]:
        return tuple(f"beta_{f}" for f in self.value)

    @classmethod
    def parse(cls, value) -> "DcmVariant":
        if isinstance(value, cls):
            return value
        key = str(value).strip().upper()
        if key in ("1", "DCM1"):
            return cls.DCM1
        if key in ("2", "DCM2"):
            return cls.DCM2
        raise ConfigError(f"unknown DCM variant {value!r}")


@dataclass(frozen=True)
class FeatureParams:
    rho_occ: float = 5.0
    lambda_col: float = 10.0
    theta_col_deg: float = 25.0


@dataclass(frozen=True, eq=False)
class DcmFeatures:
    dir: np.ndarray
    occ: np.ndarray
    col: np.ndarray
    occup: np.ndarray
    variant: DcmVariant = DcmVariant.DCM1

    def __post_init__(self):
        for name in FEATURE_NAMES:
            a = np.array(getattr(self, name), dtype=float)
            if not np.all(np.isfinite(a)) or np.any(a < 0):
                raise ContractError(f"feature {name} must be finite and nonnegative")
            a.flags.writeable = False
            object.__setattr__(self, name, a)
        if np.any(self.dir > math.pi):
            raise ContractError("dir feature must lie in [0, pi]")

    def __len__(self) -> int:
        return len(self.dir)

    def matrix(self, variant: Optional[DcmVariant] = None) -> np.ndarray:
        """(K, F) matrix of the features used by ``variant``."""
        variant = self.variant if variant is None else variant
        return np.column_stack([getattr(self, f) for f in variant.features])


@dataclass(frozen=True)
class BetaParams:
    beta_dir: float = 0.0
    beta_occ: float = 0.0
    beta_col: float = 0.0
    beta_occup: float = 0.0

    def vector(self, variant: DcmVariant) -> np.ndarray:
        unused = [f.name for f in fields(self) if f.name not in variant.coefficients and getattr(self, f.name) != 0]
        if unused:
            raise ConfigError(f"{variant.name} has no coefficient(s) {', '.join(unused)}")
        return np.array([getattr(self, c) for c in variant.coefficients], dtype=float)

    @classmethod
    def from_vector(cls, values, variant: DcmVariant) -> "BetaParams":
        return cls(**{c: float(v) for c, v in zip(variant.coefficients, values)})

    def as_dict(self) -> dict[str, float]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


# ------------------------------------------------------------------ features


def _future_position(track, obs_step: int, t_f: int, dt: float, phase: str) -> np.ndarray:
    step = obs_step + t_f
    if phase == "train" and track.has(step):
        return np.asarray(track.row(step)[:2], dtype=float)
    if phase == "train" and track.end > obs_step:
        # track ends inside the future window: continue from its last ground-truth state
        return np.asarray(cv_extrapolate(track.row(track.end), (step - track.end) * dt))
    return np.asarray(cv_extrapolate(anchor_state(track, obs_step, dt), t_f * dt))


def _cell_weights(grid: GoalGrid, points: np.ndarray, scale: float) -> np.ndarray:
    """Sum over points of exp(-distance to goal / scale), for the cell containing each point."""
    out = np.zeros(len(grid))
    if len(points) == 0:
        return out
    r, rel = grid.relative_polar(points)
    cols = grid.angle_index(rel)
    for p, ri, j in zip(points, r, cols):
        if j < 0:
            continue
        hit = np.flatnonzero((grid.angles == j) & (grid.bands[:, 0] <= ri) & (ri < grid.bands[:, 1]))
        for k in hit:
            out[k] += math.exp(-math.dist(p, grid.positions[k]) / scale)
    return out


def compute_features(
    grid: GoalGrid,
    instance: PredictionInstance,
    variant: Union[DcmVariant, str] = DcmVariant.DCM1,
    phase: str = "infer",
    params: FeatureParams = FeatureParams(),
) -> DcmFeatures:
    variant = DcmVariant.parse(variant)
    if len(grid) == 0:
        raise ConfigError("empty goal grid")
    if phase not in ("train", "infer"):
        raise ConfigError(f"phase must be 'train' or 'infer', got {phase!r}")
    s = instance.scene
    heading = float(s.target.row(s.obs_step)[THETA])
    origin = np.asarray(grid.center)
    dir_k = np.abs(wrap_angle(grid.bearings - heading))

    neighbors = [n for n in instance.selected_neighbors if n.start <= s.obs_step]
    now = np.array([anchor_state(n, s.obs_step, s.dt) for n in neighbors]).reshape(-1, 5)

    occ = _cell_weights(grid, now[:, :2], params.rho_occ)

    col = np.zeros(len(grid))
    cos_limit = math.cos(math.radians(params.theta_col_deg))
    if len(now):
        _, rel = grid.relative_polar(now[:, :2])
        cols = grid.angle_index(rel)
        for state, j in zip(now, cols):
            if j < 0 or state[V] <= 0:
                continue
            heading_vec = np.array([math.cos(state[THETA]), math.sin(state[THETA])])
            weight = math.exp(-math.dist(state[:2], origin) / params.lambda_col)
            for k in np.flatnonzero(grid.angles == j):
                to_origin = origin - grid.positions[k]
                norm = np.hypot(*to_origin)
                if norm > 0 and heading_vec @ to_origin / norm >= cos_limit:
                    col[k] += weight

    future = np.array([_future_position(n, s.obs_step, s.t_f, s.dt, phase) for n in neighbors]).reshape(-1, 2)
    occup = _cell_weights(grid, future, params.rho_occ)
    return DcmFeatures(dir=dir_k, occ=occ, col=col, occup=occup, variant=variant)


# ------------------------------------------------------------ probabilities


def utility(features: DcmFeatures, beta: BetaParams, variant: Union[DcmVariant, str]) -> np.ndarray:
    variant = DcmVariant.parse(variant)
    if features.variant is not variant:
        raise ConfigError(f"features computed for {features.variant.name}, utility requested for {variant.name}")
    return features.matrix(variant) @ beta.vector(variant)


def mnl_probabilities(u) -> np.ndarray:
    """Softmax along the last axis with max-subtraction."""
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise ContractError("utilities must be finite")
    e = np.exp(u - u.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


def _rng(seed) -> np.random.Generator:
    return seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)


def sample_choice(u, seed=None) -> int:
    """One random-utility draw: argmax of utilities plus i.i.d. standard Gumbel noise."""
    u = np.asarray(u, dtype=float)
    return int(np.argmax(u + _rng(seed).gumbel(0.0, 1.0, size=u.shape)))


def simulate_choices(utilities, seed=None) -> np.ndarray:
    """Vectorised :func:`sample_choice` over the rows of an (N, K) utility array."""
    u = np.asarray(utilities, dtype=float)
    return np.argmax(u + _rng(seed).gumbel(0.0, 1.0, size=u.shape), axis=-1)


# -------------------------------------------------------------- estimation


@dataclass(frozen=True)
class FitResult:
    beta: BetaParams
    loglik: float
    converged: bool
    n_iter: int
    grad_norm: float


def loglik_and_grad(beta: np.ndarray, X: np.ndarray, chosen: np.ndarray) -> tuple[float, np.ndarray]:
    """Log-likelihood of ``chosen`` under MNL with utilities ``X @ beta`` and its gradient.

    ``X`` is (N, K, F), ``chosen`` (N,) integer indices.
    """
    u = X @ beta
    m = u.max(axis=1, keepdims=True)
    logz = m[:, 0] + np.log(np.exp(u - m).sum(axis=1))
    rows = np.arange(len(chosen))
    ll = float(np.sum(u[rows, chosen] - logz))
    p = np.exp(u - logz[:, None])
    grad = (X[rows, chosen] - np.einsum("nk,nkf->nf", p, X)).sum(axis=0)
    return ll, grad


def fit_mle(
    dataset: Sequence[tuple[DcmFeatures, int]],
    variant: Union[DcmVariant, str] = DcmVariant.DCM1,
    tol: float = 1e-6,
    max_iter: int = 10_000,
    beta_bound: float = 1e3,
) -> FitResult:
    """Maximum-likelihood coefficients by gradient ascent with backtracking.

    Steps start from a Barzilai-Borwein guess and are halved until the Armijo
    condition holds. Coefficients whose feature never varies across
    alternatives are held at zero with an :class:`IdentifiabilityWarning`.
    """
    variant = DcmVariant.parse(variant)
    if not dataset:
        raise ContractError("fit_mle needs at least one observation")
    X = np.stack([f.matrix(variant) for f, _ in dataset])
    chosen = np.array([c for _, c in dataset], dtype=int)
    if np.any(chosen < 0) or np.any(chosen >= X.shape[1]):
        raise ContractError("chosen index out of range")
    return _fit_arrays(X, chosen, variant, tol, max_iter, beta_bound)


def _fit_arrays(X, chosen, variant, tol=1e-6, max_iter=10_000, beta_bound=1e3) -> FitResult:
    names = variant.coefficients
    varying = np.any(np.abs(X - X[:, :1, :]) > 0, axis=(0, 1))
    for name, ok in zip(names, varying):
        if not ok:
            warnings.warn(f"{name} is not identifiable: its feature never varies across goals", IdentifiabilityWarning, stacklevel=3)
    free = np.flatnonzero(varying)

    beta = np.zeros(X.shape[2])
    ll, g = loglik_and_grad(beta, X, chosen)
    g[~varying] = 0.0
    step = 1.0 / max(len(chosen), 1)
    prev_beta = prev_g = None
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        if np.max(np.abs(g)) < tol or len(free) == 0:
            converged = True
            it -= 1
            break
        if prev_g is not None:
            s, y = beta - prev_beta, g - prev_g
            sy = s @ y
            if sy < 0:  # concave objective: BB step is -s.s / s.y
                step = (s @ s) / -sy
        gg = g @ g
        while True:
            cand = beta + step * g
            ll_c, g_c = loglik_and_grad(cand, X, chosen)
            if np.isfinite(ll_c) and ll_c >= ll + 1e-4 * step * gg:
                break
            step *= 0.5
            if step < 1e-300:
                raise NonConvergence("line search failed to find an ascent step")
        prev_beta, prev_g = beta, g
        beta, ll, g = cand, ll_c, g_c
        g[~varying] = 0.0
        if not np.all(np.isfinite(beta)) or np.max(np.abs(beta)) > beta_bound:
            worst = names[int(np.argmax(np.abs(beta)))]
            raise NonConvergence(f"{worst} diverged beyond {beta_bound} (separable data?)")
    else:
        converged = np.max(np.abs(g)) < tol

    if not converged:
        log.warning("fit_mle stopped after %d iterations, |grad|=%.3g", max_iter, np.max(np.abs(g)))
    if ll > -1e-8 * len(chosen):
        warnings.warn("every choice is predicted with certainty; coefficients are not identified", IdentifiabilityWarning, stacklevel=3)
    return FitResult(BetaParams.from_vector(beta, variant), ll, bool(converged), it, float(np.max(np.abs(g))))


# ---------------------------------------------------------------- file i/o


def write_beta(beta: BetaParams, path, variant: Optional[DcmVariant] = None) -> None:
    keys = variant.coefficients if variant else tuple(beta.as_dict())
    try:
        with open(path, "w", encoding="utf-8") as fh:
            for k in keys:
                fh.write(f"{k} = {getattr(beta, k)!r}\n")
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_beta(path) -> BetaParams:
    values = {}
    try:
        with open(path, encoding="utf-8") as fh:
            lines = fh.readlines()
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    known = {f.name for f in fields(BetaParams)}
    for line in lines:
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        key, _, value = line.partition("=")
        key = key.strip()
        if key not in known:
            raise ConfigError(f"{path}: unknown coefficient {key!r}")
        values[key] = float(value)
    return BetaParams(**values)


def write_features_csv(rows: Iterable[tuple[str, DcmFeatures]], path) -> None:
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["instance", "goal", *FEATURE_NAMES])
            for inst_id, feats in rows:
                for k in range(len(feats)):
                    w.writerow([inst_id, k, *(repr(float(getattr(feats, f)[k])) for f in FEATURE_NAMES)])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc
