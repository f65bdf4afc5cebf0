"""AM-softmax, the group Lasso penalty and their sum, with analytic gradients."""

from __future__ import annotations

from collections import defaultdict
from dataclasses import dataclass

import numpy as np

from .model import ModelParams, backward, forward_with_cache
from .sparsity import GroupPartition

GROUP_EPS = 1e-12


@dataclass(frozen=True)
class AmSoftmaxConfig:
    margin: float = 0.2
    scale: float = 30.0

    def __post_init__(self):
        if not 0 <= self.margin < 1:
            raise ValueError("margin must be in [0, 1)")
        if not (self.scale > 0 and np.isfinite(self.scale)):
            raise ValueError("scale must be positive and finite")


@dataclass(frozen=True)
class GroupLassoConfig:
    lam: float = 0.0
    partition: GroupPartition | None = None

    def __post_init__(self):
        if not (self.lam >= 0 and np.isfinite(self.lam)):
            raise ValueError("lambda must be finite and non-negative")


def am_softmax(logits: np.ndarray, label, cfg: AmSoftmaxConfig = AmSoftmaxConfig()):
    """Loss and d(loss)/d(logits) for cosine logits.

    Accepts one sample (``(N,)`` logits, int label) or a batch (``(B, N)``,
    ``(B,)`` labels); batched input returns per-sample losses.
    """
    single = np.ndim(logits) == 1
    c = np.atleast_2d(np.asarray(logits, dtype=np.float64))
    y = np.atleast_1d(np.asarray(label))
    if np.any(y >= c.shape[1]) or np.any(y < 0):
        raise ValueError("label out of range")
    rows = np.arange(c.shape[0])
    z = cfg.scale * c
    z[rows, y] -= cfg.scale * cfg.margin
    z_max = z.max(axis=1, keepdims=True)
    e = np.exp(z - z_max)
    denom = e.sum(axis=1)
    loss = np.log(denom) + z_max[:, 0] - z[rows, y]
    p = e / denom[:, None]
    p[rows, y] -= 1.0
    grad = cfg.scale * p
    if single:
        return float(loss[0]), grad[0]
    return loss, grad


def group_lasso(params: ModelParams, cfg: GroupLassoConfig):
    """Penalty ``lam * sum_k ||w_k||`` and its subgradient per weight tensor."""
    grads: dict[str, np.ndarray] = {}
    if cfg.partition is None:
        return 0.0, grads
    total = 0.0
    for lg in cfg.partition.layers:
        name = f"tdnn{lg.layer}.weight"
        if name not in params.tensors:
            raise ValueError(f"partition references missing layer {lg.layer}")
        w = params.tensors[name]
        if w.shape != (lg.rows, lg.in_eff):
            raise ValueError(f"partition expects {name} of shape {(lg.rows, lg.in_eff)}, got {w.shape}")
        blocks = lg.blocks(w)
        norms = np.sqrt((blocks ** 2).sum(axis=-1))
        total += norms.sum()
        inv = np.where(norms > GROUP_EPS, 1.0 / np.maximum(norms, GROUP_EPS), 0.0)
        g = (blocks * inv[..., None]).reshape(lg.rows, -1)[:, : lg.in_eff]
        grads[name] = cfg.lam * g
    return cfg.lam * total, grads


def _classifier_backward(w: np.ndarray, emb: np.ndarray, d_logits: np.ndarray):
    """Backprop through ``cos = normalize(emb) @ normalize(w).T``."""
    en = np.linalg.norm(emb, axis=1, keepdims=True)
    wn = np.linalg.norm(w, axis=1, keepdims=True)
    e_hat, w_hat = emb / en, w / wn
    d_ehat = d_logits @ w_hat
    d_what = d_logits.T @ e_hat
    d_emb = (d_ehat - e_hat * (e_hat * d_ehat).sum(axis=1, keepdims=True)) / en
    d_w = (d_what - w_hat * (w_hat * d_what).sum(axis=1, keepdims=True)) / wn
    return d_emb, d_w


def data_loss(params: ModelParams, feats, labels, am_cfg: AmSoftmaxConfig = AmSoftmaxConfig()):
    """Summed AM-softmax loss over utterances and the summed gradient.

    ``feats`` is a ``(B, T, d)`` array or a list of ``(T_i, d)`` matrices;
    utterances of equal length are forwarded together.
    """
    labels = np.asarray(labels)
    if isinstance(feats, np.ndarray) and feats.ndim == 3:
        buckets = {feats.shape[1]: (feats, np.arange(len(labels)))}
    else:
        idx_by_len = defaultdict(list)
        for k, f in enumerate(feats):
            idx_by_len[f.shape[0]].append(k)
        buckets = {T: (np.stack([feats[k] for k in ids]), np.array(ids)) for T, ids in idx_by_len.items()}

    w_cls = params.tensors["classifier.weight"]
    total = 0.0
    grads = {k: np.zeros_like(v) for k, v in params.tensors.items()}
    for T in sorted(buckets):
        x, ids = buckets[T]
        cache = forward_with_cache(params, x)
        en = np.linalg.norm(cache.emb, axis=1, keepdims=True)
        wn = np.linalg.norm(w_cls, axis=1, keepdims=True)
        logits = (cache.emb / en) @ (w_cls / wn).T
        loss, d_logits = am_softmax(logits, labels[ids], am_cfg)
        total += float(loss.sum())
        d_emb, d_w = _classifier_backward(w_cls, cache.emb, d_logits)
        grads["classifier.weight"] += d_w
        for k, g in backward(params, cache, d_emb).items():
            grads[k] += g
    return total, grads


def total_loss(feats, labels, params: ModelParams, am_cfg: AmSoftmaxConfig = AmSoftmaxConfig(),
               gl_cfg: GroupLassoConfig = GroupLassoConfig()):
    """Joint objective: batch-mean AM-softmax plus the group Lasso penalty.

    Returns ``(E, grads, parts)`` with ``parts = (E_D, penalty)``.
    """
    n = len(labels)
    if n == 0:
        raise ValueError("empty batch")
    e_d, grads = data_loss(params, feats, labels, am_cfg)
    e_d /= n
    for g in grads.values():
        g /= n
    penalty, gl_grads = group_lasso(params, gl_cfg)
    for k, g in gl_grads.items():
        grads[k] += g
    return e_d + penalty, grads, (e_d, penalty)
