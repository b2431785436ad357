"""Class centroids, source cluster statistics and confident target selection."""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .records import CLASS_NAMES, NUM_CLASSES, BeatClass

CONFIDENCE = 0.99


def compute_centroids(features: np.ndarray, labels, num_classes: int = NUM_CLASSES) -> dict[int, np.ndarray]:
    """Per-class mean feature; every class must be present."""
    labels = np.asarray(labels, dtype=np.int64)
    counts = np.bincount(labels, minlength=num_classes)
    missing = [CLASS_NAMES[k] for k in range(num_classes) if counts[k] == 0]
    if missing:
        raise ValueError(f"compute_centroids: classes absent from data: {missing}")
    f = np.asarray(features, dtype=np.float64)
    return {k: f[labels == k].mean(axis=0).astype(np.float32) for k in range(num_classes)}


def mean_intra_cluster_distance(features: np.ndarray, labels, centroids: Mapping[int, np.ndarray]) -> dict[int, float]:
    labels = np.asarray(labels, dtype=np.int64)
    out = {}
    for k in sorted(centroids):
        members = np.asarray(features, dtype=np.float64)[labels == k]
        if len(members) == 0:
            raise ValueError(f"mean_intra_cluster_distance: class {CLASS_NAMES[k]} has no samples")
        out[k] = float(np.linalg.norm(members - centroids[k], axis=1).mean())
    return out


def mean_classifier_discrepancy(probs1: np.ndarray, probs2: np.ndarray) -> float:
    if len(probs1) == 0:
        raise ValueError("mean_classifier_discrepancy: no samples")
    d = np.linalg.norm(np.asarray(probs1, np.float64) - np.asarray(probs2, np.float64), axis=1)
    return float(d.mean())


def select_confident(features: np.ndarray, probs: np.ndarray, probs1: np.ndarray, probs2: np.ndarray,
                     cc_s: Mapping[int, np.ndarray], m_ctr: Mapping[int, float], m_dis: float,
                     threshold: float = CONFIDENCE) -> list[tuple[int, int]]:
    """Target samples passing all three gates, as ``(index, pseudo_label)`` pairs.

    The combined probability of the predicted class must exceed ``threshold``, the
    feature must lie closer than ``M_ctr`` to that class's source centroid, and the
    two heads must disagree by less than ``M_dis``.
    """
    probs = np.asarray(probs)
    pred = np.argmax(probs, axis=1)
    conf = probs[np.arange(len(pred)), pred] > threshold
    centre = np.stack([cc_s[k] for k in range(probs.shape[1])])[pred].astype(np.float64)
    feat_d = np.linalg.norm(np.asarray(features, np.float64) - centre, axis=1)
    radius = np.array([m_ctr[k] for k in range(probs.shape[1])])[pred]
    head_d = np.linalg.norm(np.asarray(probs1, np.float64) - np.asarray(probs2, np.float64), axis=1)
    ok = conf & (feat_d < radius) & (head_d < m_dis)
    return [(int(i), int(pred[i])) for i in np.flatnonzero(ok)]


def selection_counts(confident: Sequence[tuple[int, int]], num_classes: int = NUM_CLASSES) -> dict[int, int]:
    labels = np.array([y for _, y in confident], dtype=np.int64)
    counts = np.bincount(labels, minlength=num_classes)
    return {k: int(counts[k]) for k in range(num_classes)}


def compute_target_centroids(confident: Sequence[tuple[int, int]], features: np.ndarray,
                             cc_s: Mapping[int, np.ndarray]) -> tuple[dict[int, np.ndarray], dict[int, bool]]:
    """Per-class mean of confident target features. Empty classes borrow the source centroid.

    Returns the centroids and a per-class flag marking the borrowed ones.
    """
    features = np.asarray(features, dtype=np.float64)
    idx = np.array([i for i, _ in confident], dtype=np.int64)
    lab = np.array([y for _, y in confident], dtype=np.int64)
    cc_t, fallback = {}, {}
    for k in sorted(cc_s):
        members = idx[lab == k]
        if len(members):
            cc_t[k] = features[members].mean(axis=0).astype(np.float32)
            fallback[k] = False
        else:
            cc_t[k] = np.array(cc_s[k], dtype=np.float32)
            fallback[k] = True
    return cc_t, fallback


@dataclass
class ClusterState:
    cc_s: dict[int, np.ndarray]
    cc_t: dict[int, np.ndarray]
    m_ctr: dict[int, float]
    m_dis: float
    confident_count: dict[int, int] = field(default_factory=dict)
    fallback: dict[int, bool] = field(default_factory=dict)

    @property
    def cc_m(self) -> dict[int, np.ndarray]:
        return {k: ((np.asarray(self.cc_s[k], np.float64) + self.cc_t[k]) / 2).astype(np.float32) for k in sorted(self.cc_s)}

    def with_target(self, cc_t, confident_count, fallback) -> "ClusterState":
        return ClusterState(self.cc_s, cc_t, self.m_ctr, self.m_dis, confident_count, fallback)

    # text serialisation: one block per class, floats in shortest round-trip form

    def dumps(self) -> str:
        lines = ["# cluster state v1", f"m_dis {self.m_dis!r}"]
        for k in sorted(self.cc_s):
            lines += [
                f"class {CLASS_NAMES[k]}",
                f"m_ctr {float(self.m_ctr[k])!r}",
                f"confident_count {int(self.confident_count.get(k, 0))}",
                f"fallback {int(bool(self.fallback.get(k, False)))}",
                "cc_s " + " ".join(repr(v) for v in np.asarray(self.cc_s[k], np.float32).tolist()),
                "cc_t " + " ".join(repr(v) for v in np.asarray(self.cc_t[k], np.float32).tolist()),
            ]
        return "\n".join(lines) + "\n"

    def save(self, path) -> None:
        Path(path).write_text(self.dumps(), encoding="utf-8")

    @classmethod
    def loads(cls, text: str) -> "ClusterState":
        cc_s, cc_t, m_ctr, count, fb = {}, {}, {}, {}, {}
        m_dis, k = None, None
        for lineno, line in enumerate(text.splitlines(), start=1):
            if not line.strip() or line.startswith("#"):
                continue
            key, _, rest = line.partition(" ")
            if key == "m_dis":
                m_dis = float(rest)
            elif key == "class":
                k = int(BeatClass[rest.strip()])
            elif k is None:
                raise ValueError(f"cluster state line {lineno}: {key!r} before any class block")
            elif key == "m_ctr":
                m_ctr[k] = float(rest)
            elif key == "confident_count":
                count[k] = int(rest)
            elif key == "fallback":
                fb[k] = bool(int(rest))
            elif key in ("cc_s", "cc_t"):
                vec = np.array([float(v) for v in rest.split()], dtype=np.float32)
                (cc_s if key == "cc_s" else cc_t)[k] = vec
            else:
                raise ValueError(f"cluster state line {lineno}: unknown key {key!r}")
        if m_dis is None:
            raise ValueError("cluster state: missing m_dis")
        return cls(cc_s, cc_t, m_ctr, m_dis, count, fb)

    @classmethod
    def load(cls, path) -> "ClusterState":
        return cls.loads(Path(path).read_text(encoding="utf-8"))
