"""Three-stage training: dense baseline, group-Lasso sparsification, and
masked fine-tuning, all with plain SGD and cosine-annealed learning rate."""

from __future__ import annotations

import csv
import io
import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace

import numpy as np

from .eval import ScoreSet, Trial, eer, min_dcf, score_trials
from .loss import AmSoftmaxConfig, GroupLassoConfig, group_lasso, total_loss
from .model import ModelParams, embed
from .sparsity import (DEFAULT_TAU, Granularity, SparsityMask, apply_mask, build_groups,
                       group_norms, threshold_mask)

log = logging.getLogger(__name__)

FRAME_SHIFT = 0.010


class DivergenceError(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, msg, last_good: ModelParams | None = None):
        super().__init__(msg)
        self.last_good = last_good


@dataclass(frozen=True)
class Baseline:
    pass


@dataclass(frozen=True)
class Sparsify:
    lam: float
    granularity: Granularity
    tau_abs: float = DEFAULT_TAU


@dataclass(frozen=True)
class FineTune:
    mask: SparsityMask


@dataclass(frozen=True)
class TrainConfig:
    lr_start: float = 0.01
    lr_end: float = 0.0001
    epochs: int = 30
    weight_decay: float = 1e-6
    batch_size: int = 256
    segment_range: tuple[float, float] = (2.5, 3.0)
    seed: int = 0
    stage: object = Baseline()
    momentum: float = 0.0
    margin: float = 0.2
    scale: float = 30.0
    jobs: int = 1

    def __post_init__(self):
        if not self.lr_start >= self.lr_end > 0:
            raise ValueError("need lr_start >= lr_end > 0")
        if self.batch_size < 1 or self.epochs < 1:
            raise ValueError("batch_size and epochs must be positive")
        if self.segment_range[0] > self.segment_range[1]:
            raise ValueError("segment_range min exceeds max")


PAPER_EPOCHS = {"baseline": 30, "sparsify": 20, "finetune": 20}
DESK_EPOCHS = {"baseline": 10, "sparsify": 8, "finetune": 8}


def desk_config(stage=Baseline(), **overrides) -> TrainConfig:
    """Settings sized for the synthetic 64-speaker task on one CPU core."""
    name = {Baseline: "baseline", Sparsify: "sparsify", FineTune: "finetune"}[type(stage)]
    base = dict(epochs=DESK_EPOCHS[name], batch_size=32, segment_range=(1.0, 2.0),
                lr_start=0.05, lr_end=0.0005, stage=stage)
    base.update(overrides)
    return TrainConfig(**base)


def cosine_lr(epoch: int, cfg: TrainConfig) -> float:
    if not 0 <= epoch < cfg.epochs:
        raise ValueError(f"epoch {epoch} outside [0, {cfg.epochs})")
    if cfg.epochs == 1:
        return cfg.lr_start
    return cfg.lr_end + 0.5 * (cfg.lr_start - cfg.lr_end) * (1 + math.cos(math.pi * epoch / (cfg.epochs - 1)))


def frozen_elements(mask: SparsityMask | None) -> dict[str, np.ndarray]:
    if mask is None:
        return {}
    return {f"tdnn{layer}.weight": m for layer, m in mask.element_masks().items()}


def sgd_step(params: ModelParams, grads: dict, lr: float, weight_decay: float,
             frozen: dict | None = None, momentum: float = 0.0, velocity: dict | None = None) -> ModelParams:
    """``w <- w - lr * (g + wd * w)``; frozen elements stay exactly zero."""
    frozen = frozen or {}
    out = {}
    for name, w in params.tensors.items():
        g = grads.get(name)
        if g is None:
            out[name] = w
            continue
        if not np.all(np.isfinite(g)):
            bad = int((~np.isfinite(g)).sum())
            raise DivergenceError(f"non-finite gradient in {name} ({bad} entries)", params)
        step = g + weight_decay * w
        if momentum:
            v = velocity.get(name)
            v = step if v is None else momentum * v + step
            velocity[name] = v
            step = v
        new = w - lr * step
        fz = frozen.get(name)
        if fz is not None:
            new = np.where(fz, 0.0, new)
        out[name] = new
    return ModelParams(params.topology, out)


def crop_frames(range_s: tuple[float, float], n_frames: int, rng: np.random.Generator,
                min_frames: int = 13) -> int:
    lo = max(min_frames, int(round(range_s[0] / FRAME_SHIFT)))
    hi = max(lo, int(round(range_s[1] / FRAME_SHIFT)))
    return min(int(rng.integers(lo, hi + 1)), n_frames)


def sample_segment(utt: np.ndarray, range_s: tuple[float, float], rng: np.random.Generator,
                   length: int | None = None) -> np.ndarray:
    """Random crop with uniform length in ``range_s`` and uniform start."""
    if length is None:
        length = crop_frames(range_s, utt.shape[0], rng)
    length = min(length, utt.shape[0])
    start = int(rng.integers(0, utt.shape[0] - length + 1))
    return utt[start:start + length]


def _tree_sum(items):
    while len(items) > 1:
        items = [items[i] if i + 1 == len(items) else items[i] + items[i + 1] for i in range(0, len(items), 2)]
    return items[0]


def batch_gradient(params, x, y, am_cfg, gl_cfg, jobs: int = 1):
    """Mean-over-batch loss/gradient; shards are reduced by a fixed binary tree."""
    if jobs <= 1 or len(y) < 2 * jobs:
        return total_loss(x, y, params, am_cfg, gl_cfg)
    shards = np.array_split(np.arange(len(y)), jobs)
    no_gl = GroupLassoConfig()
    with ThreadPoolExecutor(jobs) as ex:
        parts = list(ex.map(lambda ids: total_loss(x[ids], y[ids], params, am_cfg, no_gl), shards))
    n = len(y)
    grads = {k: _tree_sum([p[1][k] * (len(ids) / n) for p, ids in zip(parts, shards)]) for k in parts[0][1]}
    e_d = _tree_sum([p[2][0] * len(ids) / n for p, ids in zip(parts, shards)])
    penalty, gl_grads = group_lasso(params, gl_cfg)
    for k, g in gl_grads.items():
        grads[k] = grads[k] + g
    return e_d + penalty, grads, (e_d, penalty)


def embed_all(params: ModelParams, feats, dtype=np.float64) -> list[np.ndarray]:
    p = params.astype(dtype) if dtype != np.float64 else params
    return [embed(p, np.asarray(f, dtype=dtype)) for f in feats]


def evaluate(params: ModelParams, feats, utt_ids, trials: list[Trial]):
    embs = dict(zip(utt_ids, embed_all(params, feats)))
    s: ScoreSet = score_trials(embs, trials)
    return eer(s), min_dcf(s)


@dataclass
class Validation:
    feats: list
    utt_ids: list
    trials: list


@dataclass
class EpochLog:
    stage: str
    epoch: int
    lr: float
    loss_ed: float
    loss_gl: float
    sparsity: list
    val_eer: float = float("nan")
    best_loss: float = float("nan")


@dataclass
class StageResult:
    params: ModelParams
    log: list = field(default_factory=list)
    mask: SparsityMask | None = None


def stage_name(stage) -> str:
    return {Baseline: "baseline", Sparsify: "sparsify", FineTune: "finetune"}[type(stage)]


def run_stage(cfg: TrainConfig, feats, labels, init: ModelParams,
              validation: Validation | None = None) -> StageResult:
    """Run one stage of the pipeline.

    Baseline and fine-tune keep the epoch with the best validation EER when
    a validation set is given.  Sparsify trains on the joint objective and
    thresholds group norms once at the end.
    """
    stage = cfg.stage
    name = stage_name(stage)
    labels = np.asarray(labels)
    rng = np.random.default_rng([cfg.seed, 17])
    am_cfg = AmSoftmaxConfig(cfg.margin, cfg.scale)
    partition = None
    gl_cfg = GroupLassoConfig()
    frozen = {}
    mask = None
    if isinstance(stage, Sparsify):
        partition = build_groups(init.topology, stage.granularity)
        gl_cfg = GroupLassoConfig(stage.lam, partition)
    elif isinstance(stage, FineTune):
        mask = stage.mask
        partition = mask.partition
        init = apply_mask(init, mask)
        frozen = frozen_elements(mask)

    params = init.copy()
    velocity: dict = {}
    history: list[EpochLog] = []
    best_loss = math.inf
    best_eer = math.inf
    best_params = params
    n = len(feats)
    for epoch in range(cfg.epochs):
        lr = cosine_lr(epoch, cfg)
        order = rng.permutation(n)
        sum_ed = sum_gl = 0.0
        n_batches = 0
        for start in range(0, n, cfg.batch_size):
            ids = order[start:start + cfg.batch_size]
            shortest = min(feats[i].shape[0] for i in ids)
            length = crop_frames(cfg.segment_range, shortest, rng)
            x = np.stack([sample_segment(feats[i], cfg.segment_range, rng, length) for i in ids]).astype(np.float64)
            _, grads, (e_d, pen) = batch_gradient(params, x, labels[ids], am_cfg, gl_cfg, cfg.jobs)
            if not (math.isfinite(e_d) and math.isfinite(pen)):
                raise DivergenceError(f"{name} epoch {epoch}: loss became non-finite", best_params)
            params = sgd_step(params, grads, lr, cfg.weight_decay, frozen, cfg.momentum, velocity)
            sum_ed += e_d
            sum_gl += pen
            n_batches += 1
        loss_ed = sum_ed / n_batches
        loss_gl = sum_gl / n_batches
        best_loss = min(best_loss, loss_ed + loss_gl)
        if partition is not None:
            tau = stage.tau_abs if isinstance(stage, Sparsify) else 0.0
            cur = mask if mask is not None else threshold_mask(group_norms(params, partition), partition, tau)
            sparsity = cur.fractions()
        else:
            sparsity = [0.0] * 4
        entry = EpochLog(name, epoch, lr, loss_ed, loss_gl, sparsity, best_loss=best_loss)
        if validation is not None:
            entry.val_eer, _ = evaluate(params, validation.feats, validation.utt_ids, validation.trials)
        history.append(entry)
        log.info("%s epoch %d lr %.5f E_D %.4f GL %.4f sparsity %s val_eer %.2f", name, epoch, lr,
                 loss_ed, loss_gl, " ".join(f"{s:.3f}" for s in sparsity), entry.val_eer)
        if validation is not None and not isinstance(stage, Sparsify):
            if entry.val_eer <= best_eer:
                best_eer, best_params = entry.val_eer, params
        else:
            best_params = params

    params = best_params
    if isinstance(stage, Sparsify):
        mask = threshold_mask(group_norms(params, partition), partition, stage.tau_abs)
        params = apply_mask(params, mask)
        history[-1].sparsity = mask.fractions()
    return StageResult(params, history, mask)


@dataclass
class PipelineResult:
    baseline: StageResult
    sparse: StageResult
    finetuned: StageResult


def run_pipeline(feats, labels, init: ModelParams, lam: float, granularity: Granularity,
                 cfgs: dict, validation: Validation | None = None,
                 baseline: StageResult | None = None) -> PipelineResult:
    """Baseline -> sparsify -> fine-tune; ``cfgs`` maps stage names to TrainConfig."""
    if baseline is None:
        baseline = run_stage(replace(cfgs["baseline"], stage=Baseline()), feats, labels, init, validation)
    sp_stage = Sparsify(lam, granularity, getattr(cfgs["sparsify"].stage, "tau_abs", DEFAULT_TAU))
    sparse = run_stage(replace(cfgs["sparsify"], stage=sp_stage), feats, labels, baseline.params, None)
    fine = run_stage(replace(cfgs["finetune"], stage=FineTune(sparse.mask)), feats, labels,
                     sparse.params, validation)
    fine.mask = sparse.mask
    return PipelineResult(baseline, sparse, fine)


METRIC_FIELDS = ["stage", "epoch", "lr", "loss_ED", "loss_GL",
                 "sparsity_l1", "sparsity_l2", "sparsity_l3", "sparsity_l4", "val_eer"]


def metrics_csv(entries: list[EpochLog], header: bool = True) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    if header:
        w.writerow(METRIC_FIELDS)
    for e in entries:
        w.writerow([e.stage, e.epoch, f"{e.lr:.8g}", f"{e.loss_ed:.6f}", f"{e.loss_gl:.6f}",
                    *(f"{s:.6f}" for s in e.sparsity), "" if math.isnan(e.val_eer) else f"{e.val_eer:.4f}"])
    return buf.getvalue()
