"""Training objectives.

Centroid arguments are mappings ``class index -> vector`` (numpy arrays are
treated as constants, Tensors carry gradients). Class-level sums iterate keys in
ascending order so results do not depend on dict insertion order.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Mapping

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor
from .records import NUM_CLASSES

log = logging.getLogger(__name__)

Centroids = Mapping[int, "np.ndarray | Tensor"]


@dataclass(frozen=True)
class LossWeights:
    alpha: float = 0.5
    gamma1: float = 0.1
    gamma2: float = 0.1
    beta1: float = 0.1
    beta2: float = 0.1
    beta3: float = 0.5
    beta4: float = 0.1
    t_m: float = 10.0

    def __post_init__(self):
        for name in ("alpha", "gamma1", "gamma2", "beta1", "beta2", "beta3", "beta4"):
            if getattr(self, name) < 0:
                raise ValueError(f"loss weight {name} must be >= 0")
        if self.t_m <= 0:
            raise ValueError("t_m must be > 0")


def class_weights_from_counts(counts) -> np.ndarray:
    """``N_total / (K * N_k)``; classes with no samples get weight 0."""
    counts = np.asarray(counts, dtype=np.float64)
    total, k = counts.sum(), len(counts)
    with np.errstate(divide="ignore"):
        w = np.where(counts > 0, total / (k * np.maximum(counts, 1)), 0.0)
    return w.astype(np.float32)


def weighted_ce(logits: Tensor, labels, class_weights=None) -> Tensor:
    """Per-sample ``-w[y] * log softmax(logits)[y]``."""
    labels = np.asarray(labels, dtype=np.int64)
    k = logits.shape[1]
    if labels.size and (labels.min() < 0 or labels.max() >= k):
        raise ValueError(f"labels must lie in 0..{k - 1}, got range [{labels.min()}, {labels.max()}]")
    nll = ad.pick(ad.log_softmax(logits, axis=1), labels) * -1.0
    if class_weights is None:
        return nll
    w = np.asarray([class_weights[i] for i in range(k)] if isinstance(class_weights, Mapping) else class_weights)
    return nll * Tensor(w[labels].astype(logits.dtype))


@dataclass
class GroupDROState:
    """Exponentiated-gradient group weights for the smoothed mode."""

    num_groups: int = NUM_CLASSES
    eta: float = 0.01
    q: np.ndarray = field(default=None)

    def __post_init__(self):
        if self.q is None:
            self.q = np.full(self.num_groups, 1.0 / self.num_groups)


def group_dro(per_sample: Tensor, groups, mode: str = "max", state: GroupDROState | None = None,
              num_groups: int = NUM_CLASSES) -> Tensor:
    """Worst-group loss. ``max``: largest per-group mean among groups in the batch.

    ``ema``: group weights ``q_g <- q_g * exp(eta * mean_g)``, renormalised, and
    the loss is ``sum_g q_g * mean_g`` (weights are treated as constants).
    """
    groups = np.asarray(groups, dtype=np.int64)
    if per_sample.size == 0:
        raise ValueError("group_dro: empty batch")
    means = ad.segment_mean(per_sample, groups, num_groups)
    present = np.flatnonzero(np.bincount(groups, minlength=num_groups))
    if mode == "max":
        return ad.max_all(ad.take(means, present))
    if mode == "ema":
        if state is None:
            raise ValueError("group_dro: ema mode needs a GroupDROState")
        gm = means.data.astype(np.float64)
        state.q = state.q * np.exp(state.eta * np.where(np.isin(np.arange(num_groups), present), gm, 0.0))
        state.q = state.q / state.q.sum()
        return ad.sum(means * Tensor(state.q.astype(per_sample.dtype)))
    raise ValueError(f"unknown DRO mode {mode!r}")


def classification_loss(logits1: Tensor, logits2: Tensor, labels, class_weights, mode: str = "max",
                        state: GroupDROState | None = None) -> Tensor:
    """Group-DRO over the summed weighted cross-entropy of both heads."""
    per_sample = weighted_ce(logits1, labels, class_weights) + weighted_ce(logits2, labels, class_weights)
    return group_dro(per_sample, labels, mode, state)


def discrepancy(probs1: Tensor, probs2: Tensor) -> Tensor:
    """Batch mean of the L2 distance between the two heads' probability vectors."""
    if probs1.shape != probs2.shape:
        raise ad.ShapeError(f"discrepancy: {probs1.shape} vs {probs2.shape}")
    return ad.mean(ad.euclidean(probs1, probs2))


def _stack(centroids: Centroids, keys) -> Tensor:
    rows = [ad.as_tensor(centroids[k]) for k in keys]
    d = rows[0].shape[-1]
    return ad.concat([ad.reshape(r, (1, d)) for r in rows], axis=0)


def compacting(features: Tensor, labels, centroids: Centroids) -> Tensor:
    """Sum of sample-to-own-centroid distances divided by the batch size."""
    labels = np.asarray(labels, dtype=np.int64)
    missing = sorted(set(np.unique(labels).tolist()) - set(centroids))
    if missing:
        raise KeyError(f"compacting: no centroid for classes {missing}")
    keys = sorted(centroids)
    pos = {k: i for i, k in enumerate(keys)}
    table = _stack(centroids, keys)
    own = ad.take(table, np.array([pos[y] for y in labels.tolist()], dtype=np.int64))
    return ad.sum(ad.euclidean(features, own)) * (1.0 / max(len(labels), 1))


def separating(centroids: Centroids, t_m: float) -> Tensor:
    """``sum_{k != l} max(T_m - ||c_k - c_l||, 0)`` over ordered pairs."""
    keys = sorted(centroids)
    if len(keys) < 2:
        log.warning("separating loss needs >= 2 centroids, got %d", len(keys))
        return Tensor(np.float32(0.0))
    table = _stack(centroids, keys)
    i, j = np.array([(a, b) for a in range(len(keys)) for b in range(len(keys)) if a != b]).T
    d = ad.euclidean(ad.take(table, i), ad.take(table, j))
    return ad.sum(ad.relu(ad.sub(float(t_m), d)))


def interdomain_cd(cc_s: Centroids, cc_t: Centroids) -> Tensor:
    """``sum_k ||CC_s^k - CC_t^k||``."""
    if set(cc_s) != set(cc_t):
        raise KeyError(f"interdomain_cd: class sets differ {sorted(cc_s)} vs {sorted(cc_t)}")
    keys = sorted(cc_s)
    return ad.sum(ad.euclidean(_stack(cc_s, keys), _stack(cc_t, keys)))


def batch_centroids(features: Tensor, labels, num_classes: int = NUM_CLASSES) -> dict[int, Tensor]:
    """Per-class mean feature of the classes present in ``labels``."""
    labels = np.asarray(labels, dtype=np.int64)
    means = ad.segment_mean(features, labels, num_classes)
    present = np.flatnonzero(np.bincount(labels, minlength=num_classes))
    return {int(k): ad.reshape(ad.take(means, np.array([k])), (features.shape[1],)) for k in present}


def running_combined(batch_cc: Centroids, cc_m: Centroids) -> Tensor:
    """``sum_k ||batch_CC^k - CC_m^k||`` over classes present in both."""
    keys = sorted(set(batch_cc) & set(cc_m))
    if not keys:
        log.warning("running combined loss: no class present in both centroid sets")
        return Tensor(np.float32(0.0))
    return ad.sum(ad.euclidean(_stack(batch_cc, keys), _stack(cc_m, keys)))


def mean_centroids(cc_s: Centroids, cc_t: Centroids) -> dict[int, np.ndarray]:
    return {k: (np.asarray(cc_s[k]) + np.asarray(cc_t[k])) / 2 for k in sorted(cc_s)}


# ---------------------------------------------------------------- stage totals


def weighted_sum(base: Tensor, terms) -> Tensor:
    """``base + sum w * t``; zero-weight terms are left out of the graph entirely."""
    total = base
    for w, t in terms:
        if w != 0:
            total = total + t * float(w)
    return total


def pretrain_total(l_cls, l_dis, w: LossWeights) -> Tensor:
    return weighted_sum(ad.as_tensor(l_cls), [(w.alpha, l_dis)])


def cluster_total(l_cls, l_comp, l_sep, w: LossWeights) -> Tensor:
    return weighted_sum(ad.as_tensor(l_cls), [(w.gamma1, l_comp), (w.gamma2, l_sep)])


def adapt_total(l_cls, comp_s, comp_t, sep_s, sep_t, l_cd, l_cmb, w: LossWeights) -> Tensor:
    return weighted_sum(ad.as_tensor(l_cls), [
        (w.beta1, comp_s), (w.beta1, comp_t), (w.beta2, sep_s), (w.beta2, sep_t), (w.beta3, l_cd), (w.beta4, l_cmb),
    ])
