"""Score fusion, the three training losses and the training loop."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Optional, Sequence

import numpy as np

from . import autograd as ag
from .autograd import Adam, ParamStore, Tensor, load_checkpoint, save_checkpoint
from .config import ModelConfig, TrainConfig, build_config, config_to_text, read_config_file
from .dcm import BetaParams, DcmVariant, fit_mle, mnl_probabilities
from .errors import ContractError, IoError, NumericError
from .ingest import PredictionInstance
from .metrics import evaluate
from .neural import (
    Batch,
    ForwardOut,
    InstanceData,
    ModeSet,
    collate,
    forward,
    init_params,
    mode_sets,
    prepare_instance,
    top_goals,
)

log = logging.getLogger(__name__)

LOG_2PI = math.log(2 * math.pi)


class TrainingAborted(NumericError):
    pass


# ------------------------------------------------------------------- fusion


@dataclass
class FusedScores:
    s: np.ndarray
    pi: np.ndarray
    top_l: np.ndarray


def fuse(u, nn_scores, n_modes: int = 6) -> FusedScores:
    """``s = u + nn``; goal probabilities are the softmax of ``s``."""
    u = np.asarray(u, dtype=float)
    nn_scores = np.asarray(nn_scores, dtype=float)
    if u.shape != nn_scores.shape:
        raise ContractError(f"utility and network scores differ in shape: {u.shape} vs {nn_scores.shape}")
    s = u + nn_scores
    return FusedScores(s, mnl_probabilities(s), top_goals(s, min(n_modes, s.shape[-1])))


# ------------------------------------------------------------------- losses


@dataclass
class LossBreakdown:
    l_reg: float
    l_score: float
    l_cls: float
    total: float
    l_star: int
    k_star: Optional[int]


def mode_nll(modes: ModeSet, gt) -> np.ndarray:
    """Negative log-likelihood of ``gt`` under each mode, summed over steps: (L,)."""
    gt = np.asarray(gt, dtype=float)
    d = (gt[None] - modes.mu) / modes.sigma
    rho = modes.rho
    one_m = 1 - rho * rho
    if np.any(one_m <= 0) or np.any(modes.sigma <= 0):
        raise ContractError("invalid covariance in mode set")
    q = d[..., 0] ** 2 + d[..., 1] ** 2 - 2 * rho * d[..., 0] * d[..., 1]
    per_step = LOG_2PI + np.log(modes.sigma).sum(-1) + 0.5 * np.log(one_m) + 0.5 * q / one_m
    return per_step.sum(-1)


def loss_reg(modes: ModeSet, gt) -> tuple[float, int]:
    nll = mode_nll(modes, gt)
    l_star = int(np.argmin(nll))
    return float(nll[l_star]), l_star


def loss_score(probs, l_star: int) -> float:
    return float(-np.log(np.asarray(probs, dtype=float)[l_star]))


def loss_cls(pi, k_star: int) -> float:
    return float(-np.log(np.asarray(pi, dtype=float)[k_star]))


def _onehot(idx: np.ndarray, n: int) -> np.ndarray:
    out = np.zeros((len(idx), n))
    out[np.arange(len(idx)), idx] = 1.0
    return out


def nll_tensor(out: ForwardOut, gt: np.ndarray) -> Tensor:
    """Per-mode NLL (B, L) built from autograd ops."""
    dec = out.dec
    diff = ag.sub(gt[:, None], dec.mu)
    z = ag.mul(diff, ag.exp(ag.mul(dec.log_sigma, -1.0)))
    zx, zy = z[..., 0], z[..., 1]
    rho = dec.rho
    one_m = ag.add(ag.mul(ag.square(rho), -1.0), 1.0)
    l1m = ag.log(one_m)
    q = ag.sub(ag.add(ag.square(zx), ag.square(zy)), ag.mul(ag.mul(rho, 2.0), ag.mul(zx, zy)))
    per_step = ag.add(
        ag.add(ag.sum(dec.log_sigma, axis=-1), ag.mul(l1m, 0.5)),
        ag.mul(ag.mul(q, ag.reciprocal(one_m)), 0.5),
    )
    return ag.add(ag.sum(per_step, axis=-1), LOG_2PI * gt.shape[1])


@dataclass
class BatchLoss:
    total: Tensor
    l_reg: np.ndarray
    l_score: np.ndarray
    l_cls: np.ndarray
    l_star: np.ndarray


def batch_loss(out: ForwardOut, batch: Batch, cfg: ModelConfig, l_star: Optional[np.ndarray] = None) -> BatchLoss:
    """Mean over the batch of L_reg + L_score (+ L_cls when goals are predicted).

    Only the best-matching mode (lowest NLL) contributes to L_reg, unless
    ``l_star`` fixes the mode per instance.
    """
    if batch.gt is None:
        raise ContractError("training batch lacks ground truth")
    B, L = batch.size, cfg.n_modes
    nll = nll_tensor(out, batch.gt)
    l_star = np.argmin(nll.value, axis=1) if l_star is None else np.asarray(l_star)
    sel_l = _onehot(l_star, L)
    reg = ag.sum(ag.mul(nll, sel_l), axis=-1)
    score = ag.mul(ag.sum(ag.mul(ag.log_softmax(out.dec.p_logits, axis=-1), sel_l), axis=-1), -1.0)
    per = ag.add(reg, score)
    cls_vals = np.zeros(B)
    if out.log_pi is not None and batch.k_star is not None:
        cls = ag.mul(ag.sum(ag.mul(out.log_pi, _onehot(batch.k_star, cfg.n_goals)), axis=-1), -1.0)
        per = ag.add(per, cls)
        cls_vals = cls.value
    total = ag.mean(per)
    return BatchLoss(total, reg.value, score.value, cls_vals, l_star)


def loss_breakdown(out: ForwardOut, batch: Batch, cfg: ModelConfig) -> list[LossBreakdown]:
    bl = batch_loss(out, batch, cfg)
    rows = []
    for b in range(batch.size):
        k = None if batch.k_star is None else int(batch.k_star[b])
        total = float(bl.l_reg[b] + bl.l_score[b] + bl.l_cls[b])
        rows.append(LossBreakdown(float(bl.l_reg[b]), float(bl.l_score[b]), float(bl.l_cls[b]), total, int(bl.l_star[b]), k))
    return rows


# ------------------------------------------------------------------ model


@dataclass
class Prediction:
    instance_id: str
    modes: ModeSet
    goals: Optional[np.ndarray]
    u: Optional[np.ndarray]
    nn: Optional[np.ndarray]
    s: Optional[np.ndarray]
    pi: Optional[np.ndarray]
    top_l: Optional[np.ndarray]

    @property
    def goal(self) -> Optional[int]:
        return None if self.pi is None else int(np.argmax(self.pi))


@dataclass
class Model:
    cfg: ModelConfig
    params: ParamStore

    def frozen(self) -> set[str]:
        names = set()
        if self.cfg.method == "IV":
            names |= {"score.w", "dcm.beta"}
        return names

    @property
    def beta(self) -> Optional[BetaParams]:
        if self.cfg.dcm is None:
            return None
        return BetaParams.from_vector(self.params["dcm.beta"].value[:, 0], self.cfg.dcm)

    def prepare(self, instances: Sequence[PredictionInstance], phase: str = "infer") -> list[InstanceData]:
        return [prepare_instance(inst, self.cfg, phase) for inst in instances]

    def predict_data(self, items: Sequence[InstanceData], batch_size: int = 64) -> list[Prediction]:
        preds = []
        for lo in range(0, len(items), batch_size):
            batch = collate(items[lo : lo + batch_size], self.cfg)
            out = forward(batch, self.params, self.cfg)
            for b, ms in enumerate(mode_sets(out.dec)):
                def row(t):
                    return None if t is None else np.array(t.value[b])
                pi = None if out.log_pi is None else np.exp(out.log_pi.value[b])
                preds.append(Prediction(
                    batch.ids[b], ms,
                    None if batch.goals is None else batch.goals[b],
                    row(out.u), row(out.nn), row(out.s), pi,
                    None if out.top_l is None else out.top_l[b],
                ))
        return preds

    def predict(self, instances: Sequence[PredictionInstance], batch_size: int = 64) -> list[Prediction]:
        return self.predict_data(self.prepare(instances, "infer"), batch_size)

    def save(self, out_dir, train_cfg: Optional[TrainConfig] = None) -> None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_checkpoint(self.params, out_dir / "model.ckpt")
        cfg = train_cfg or TrainConfig(model=self.cfg)
        try:
            (out_dir / "model.cfg").write_text(config_to_text(cfg), encoding="utf-8")
        except OSError as exc:
            raise IoError(f"cannot write {out_dir / 'model.cfg'}: {exc}") from exc

    @classmethod
    def load(cls, out_dir) -> "Model":
        out_dir = Path(out_dir)
        cfg = build_config(read_config_file(out_dir / "model.cfg")).model
        params = init_params(cfg, 0)
        for name, value in load_checkpoint(out_dir / "model.ckpt").items():
            if name not in params:
                raise ContractError(f"checkpoint parameter {name!r} unknown to the model config")
            params.set(name, value)
        return cls(cfg, params)


# ----------------------------------------------------------------- training


@dataclass
class EpochRecord:
    epoch: int
    l_cls: float
    l_reg: float
    l_score: float
    min_ade: Optional[float] = None
    min_fde: Optional[float] = None
    col_ii: Optional[float] = None


@dataclass
class TrainResult:
    model: Model
    history: list[EpochRecord] = field(default_factory=list)
    seconds: float = 0.0


def fit_beta_mle(items: Sequence[InstanceData], variant: DcmVariant) -> BetaParams:
    """Estimate DCM coefficients from goal labels alone (the DCM-only method)."""
    return fit_mle([(it.features, it.k_star) for it in items], variant).beta


def clip_grads(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads.values()))
    if norm > max_norm:
        scale = max_norm / norm
        for k in grads:
            grads[k] = grads[k] * scale
    return norm


def train(
    train_set: Sequence[PredictionInstance],
    cfg: TrainConfig,
    val_set: Optional[Sequence[PredictionInstance]] = None,
    metrics_log=None,
    on_epoch: Optional[Callable[[EpochRecord], None]] = None,
    params: Optional[ParamStore] = None,
) -> TrainResult:
    """Minibatch Adam on L = L_cls + L_reg + L_score.

    Deterministic for a fixed ``cfg.seed``. Validation metrics are computed
    every ``cfg.eval_every`` epochs on ``val_set`` (the training set if none).
    ``params`` continues from existing weights (copied, not modified).
    """
    if not train_set:
        raise ContractError("training set is empty")
    mcfg = cfg.model
    init_seq, shuffle_seq = np.random.SeedSequence(cfg.seed).spawn(2)
    fresh = params is None
    if fresh:
        params = init_params(mcfg, np.random.default_rng(init_seq))
    else:
        expected = init_params(mcfg, 0)
        if params.names() != expected.names() or any(params[n].shape != expected[n].shape for n in expected):
            raise ContractError("initial parameters do not match the model config")
        params = params.copy()
    model = Model(mcfg, params)
    shuffle_rng = np.random.default_rng(shuffle_seq)

    train_items = model.prepare(train_set, "train")
    eval_items = model.prepare(val_set if val_set is not None else train_set, "infer")
    eval_instances = list(val_set if val_set is not None else train_set)

    if mcfg.method == "IV" and fresh:
        beta = fit_beta_mle(train_items, mcfg.dcm)
        params.set("dcm.beta", beta.vector(mcfg.dcm)[:, None])
        log.info("DCM-only goal model, fitted %s", beta)

    opt = Adam(lr=cfg.lr)
    frozen = model.frozen()
    history = []
    start = time.perf_counter()
    writer = None
    fh = None
    if metrics_log is not None:
        try:
            fh = open(metrics_log, "w", newline="", encoding="utf-8")
        except OSError as exc:
            raise IoError(f"cannot write {metrics_log}: {exc}") from exc
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["epoch", "l_cls", "l_reg", "l_score", "minADE_6", "minFDE_6", "Col-II"])
    try:
        for epoch in range(1, cfg.epochs + 1):
            order = shuffle_rng.permutation(len(train_items))
            sums = np.zeros(3)
            for bi, lo in enumerate(range(0, len(order), cfg.batch_size)):
                batch = collate([train_items[i] for i in order[lo : lo + cfg.batch_size]], mcfg)
                try:
                    out = forward(batch, params, mcfg)
                    bl = batch_loss(out, batch, mcfg)
                except NumericError as exc:
                    raise TrainingAborted(f"epoch {epoch} batch {bi}: {exc}") from exc
                for term, vals in (("l_reg", bl.l_reg), ("l_score", bl.l_score), ("l_cls", bl.l_cls)):
                    if not np.all(np.isfinite(vals)):
                        raise TrainingAborted(f"epoch {epoch} batch {bi}: non-finite {term}")
                params.zero_grad()
                ag.backward(bl.total)
                grads = params.grads()
                for name in frozen:
                    grads.pop(name, None)
                clip_grads(grads, cfg.clip)
                opt.step(params, grads, frozen)
                sums += [bl.l_cls.sum(), bl.l_reg.sum(), bl.l_score.sum()]
            means = sums / len(train_items)
            rec = EpochRecord(epoch, float(means[0]), float(means[1]), float(means[2]))
            if epoch % cfg.eval_every == 0 or epoch == cfg.epochs:
                preds = model.predict_data(eval_items, cfg.batch_size)
                k = min(6, mcfg.n_modes)
                report = evaluate(eval_instances, [p.modes for p in preds], top_k=k)
                rec.min_ade, rec.min_fde, rec.col_ii = report.mean_ade, report.mean_fde, report.col_ii_percent
            history.append(rec)
            if writer is not None:
                writer.writerow([
                    rec.epoch, repr(rec.l_cls), repr(rec.l_reg), repr(rec.l_score),
                    *("" if v is None else repr(v) for v in (rec.min_ade, rec.min_fde, rec.col_ii)),
                ])
            if on_epoch is not None:
                on_epoch(rec)
            log.debug("epoch %d: %s", epoch, rec)
    finally:
        if fh is not None:
            fh.close()
    return TrainResult(model, history, time.perf_counter() - start)


# ------------------------------------------------------------ prediction IO

PREDICTION_COLUMNS = ("instance", "mode", "t", "mu_x", "mu_y", "sigma_x", "sigma_y", "rho", "P")


def write_predictions(preds: Sequence[Prediction], path) -> None:
    """One row per instance, mode and future step (``t`` counts from 1)."""
    try:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PREDICTION_COLUMNS)
            for p in preds:
                m = p.modes
                for l in range(m.n_modes):
                    for t in range(m.mu.shape[1]):
                        w.writerow([
                            p.instance_id, l, t + 1,
                            repr(float(m.mu[l, t, 0])), repr(float(m.mu[l, t, 1])),
                            repr(float(m.sigma[l, t, 0])), repr(float(m.sigma[l, t, 1])),
                            repr(float(m.rho[l, t])), repr(float(m.probs[l])),
                        ])
    except OSError as exc:
        raise IoError(f"cannot write {path}: {exc}") from exc


def read_predictions(path) -> dict[str, ModeSet]:
    from .errors import SchemaError

    rows: dict[str, dict] = {}
    try:
        with open(path, newline="", encoding="utf-8") as fh:
            reader = csv.DictReader(fh)
            if tuple(reader.fieldnames or ()) != PREDICTION_COLUMNS:
                raise SchemaError(f"{path}: expected columns {','.join(PREDICTION_COLUMNS)}")
            for n, r in enumerate(reader, 2):
                try:
                    key = (int(r["mode"]), int(r["t"]))
                    vals = [float(r[c]) for c in PREDICTION_COLUMNS[3:]]
                except (TypeError, ValueError) as exc:
                    raise SchemaError(f"{path}:{n}: {exc}") from exc
                rows.setdefault(r["instance"], {})[key] = vals
    except OSError as exc:
        raise IoError(f"cannot read {path}: {exc}") from exc
    out = {}
    for inst, cells in rows.items():
        L = max(k[0] for k in cells) + 1
        T = max(k[1] for k in cells)
        if len(cells) != L * T:
            raise SchemaError(f"{path}: instance {inst} lacks some (mode, t) rows")
        a = np.array([[cells[(l, t + 1)] for t in range(T)] for l in range(L)])
        probs = a[:, 0, 5]
        out[inst] = ModeSet(mu=a[..., 0:2], sigma=a[..., 2:4], rho=a[..., 4], probs=probs)
    return out
