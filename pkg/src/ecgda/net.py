"""Residual 1-D CNN feature extractor with two parallel classifier heads.

Each residual block: ``relu(deep2(relu(deep1(x))) + shortcut(x))`` followed by a
stride-2 max-pool; the last block is globally average-pooled over time. The heads
are two-layer MLPs whose last dense layer also sees the three (z-normalised) RR
features.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import asdict, dataclass, field

import numpy as np

from . import autodiff as ad
from .autodiff import Tensor


@dataclass(frozen=True)
class NetConfig:
    channels: tuple[int, ...] = (16, 32, 64)
    kernel: int = 5
    hidden: tuple[int, ...] = (64, 32)
    n_time: int = 3
    n_classes: int = 4

    @property
    def feature_dim(self) -> int:
        return self.channels[-1]

    @property
    def min_length(self) -> int:
        return 2 ** len(self.channels)

    def architecture_hash(self) -> str:
        blob = json.dumps(asdict(self), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


def _uniform(rng: np.random.Generator, shape, fan_in: int) -> np.ndarray:
    bound = np.sqrt(6.0 / fan_in)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)


@dataclass
class Normalizer:
    """Z-score for the RR features, fitted on source data."""

    mean: np.ndarray = field(default_factory=lambda: np.zeros(3, dtype=np.float32))
    std: np.ndarray = field(default_factory=lambda: np.ones(3, dtype=np.float32))

    @classmethod
    def fit(cls, feats: np.ndarray) -> "Normalizer":
        feats = np.asarray(feats, dtype=np.float64)
        std = feats.std(axis=0)
        std = np.where(std > 1e-8, std, 1.0)
        return cls(feats.mean(axis=0).astype(np.float32), std.astype(np.float32))

    def __call__(self, feats: np.ndarray) -> np.ndarray:
        return ((np.asarray(feats, dtype=np.float32) - self.mean) / self.std).astype(np.float32)


class BiClassifierNet:
    """Feature extractor ``F`` plus heads ``C1`` and ``C2``; parameters live in ``self.params``."""

    def __init__(self, cfg: NetConfig = NetConfig(), seed: int = 0):
        self.cfg = cfg
        self.normalizer = Normalizer()
        self.params: dict[str, Tensor] = {}
        rng_f, rng_c1, rng_c2 = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(3))
        cin = 1
        for b, cout in enumerate(cfg.channels):
            k = cfg.kernel
            self._add(f"F.block{b}.deep1.w", _uniform(rng_f, (cout, cin, k), cin * k))
            self._add(f"F.block{b}.deep1.b", np.zeros(cout, np.float32))
            self._add(f"F.block{b}.deep2.w", _uniform(rng_f, (cout, cout, k), cout * k))
            self._add(f"F.block{b}.deep2.b", np.zeros(cout, np.float32))
            self._add(f"F.block{b}.shortcut.w", _uniform(rng_f, (cout, cin, 1), cin))
            self._add(f"F.block{b}.shortcut.b", np.zeros(cout, np.float32))
            cin = cout
        for head, rng in (("C1", rng_c1), ("C2", rng_c2)):
            width = cfg.feature_dim
            for j, h in enumerate(cfg.hidden):
                self._add(f"{head}.fc{j}.w", _uniform(rng, (width, h), width))
                self._add(f"{head}.fc{j}.b", np.zeros(h, np.float32))
                width = h
            width += cfg.n_time
            self._add(f"{head}.out.w", _uniform(rng, (width, cfg.n_classes), width))
            self._add(f"{head}.out.b", np.zeros(cfg.n_classes, np.float32))

    def _add(self, name: str, value: np.ndarray) -> None:
        self.params[name] = Tensor(value, requires_grad=True)

    # ------------------------------------------------------------------ forward

    def extract(self, x) -> Tensor:
        """(B, L) waveforms -> (B, feature_dim) features."""
        x = x if isinstance(x, Tensor) else Tensor(np.asarray(x, dtype=np.float32))
        if x.ndim != 2:
            raise ad.ShapeError(f"extract: expected (B, L) batch, got {x.shape}")
        if x.shape[1] < self.cfg.min_length:
            raise ad.ShapeError(f"extract: segment length {x.shape[1]} < {self.cfg.min_length} (pooling underflow)")
        p = self.params
        h = ad.reshape(x, (x.shape[0], x.shape[1], 1))
        for b in range(len(self.cfg.channels)):
            pre = f"F.block{b}."
            deep = ad.relu(ad.conv1d(h, p[pre + "deep1.w"], p[pre + "deep1.b"]))
            deep = ad.conv1d(deep, p[pre + "deep2.w"], p[pre + "deep2.b"])
            short = ad.conv1d(h, p[pre + "shortcut.w"], p[pre + "shortcut.b"], pad=0)
            h = ad.maxpool1d(ad.relu(deep + short), 2, 2)
        return ad.mean(h, axis=1)

    def head(self, name: str, feats: Tensor, tfeat: Tensor) -> Tensor:
        p = self.params
        h = feats
        for j in range(len(self.cfg.hidden)):
            h = ad.relu(ad.dense(h, p[f"{name}.fc{j}.w"], p[f"{name}.fc{j}.b"]))
        h = ad.concat([h, tfeat], axis=1)
        return ad.dense(h, p[f"{name}.out.w"], p[f"{name}.out.b"])

    def classify(self, feats: Tensor, time_feats, normalized: bool = False) -> tuple[Tensor, Tensor]:
        """Two logit sets from the same features. ``time_feats`` are raw seconds unless ``normalized``."""
        if feats.ndim != 2 or feats.shape[1] != self.cfg.feature_dim:
            raise ad.ShapeError(f"classify: features {feats.shape}, expected (B, {self.cfg.feature_dim})")
        if not isinstance(time_feats, Tensor):
            tf = np.asarray(time_feats, dtype=np.float32)
            time_feats = Tensor(tf if normalized else self.normalizer(tf))
        if time_feats.shape != (feats.shape[0], self.cfg.n_time):
            raise ad.ShapeError(f"classify: time features {time_feats.shape} for {feats.shape[0]} samples")
        return self.head("C1", feats, time_feats), self.head("C2", feats, time_feats)

    def forward(self, x, time_feats) -> tuple[Tensor, Tensor, Tensor]:
        feats = self.extract(x)
        l1, l2 = self.classify(feats, time_feats)
        return feats, l1, l2

    def predict(self, waveforms: np.ndarray, time_feats: np.ndarray, batch_size: int = 1024) -> dict[str, np.ndarray]:
        """Inference pass (no graph): features, per-head and combined probabilities, predicted class."""
        chunks = []
        with ad.no_grad():
            for s in range(0, len(waveforms), batch_size):
                f, l1, l2 = self.forward(waveforms[s:s + batch_size], time_feats[s:s + batch_size])
                p1, p2 = ad.softmax(l1).data, ad.softmax(l2).data
                chunks.append((f.data, p1, p2))
        feats = np.concatenate([c[0] for c in chunks])
        p1 = np.concatenate([c[1] for c in chunks])
        p2 = np.concatenate([c[2] for c in chunks])
        probs, pred = combine_probs(p1, p2)
        return {"features": feats, "probs1": p1, "probs2": p2, "probs": probs, "pred": pred}

    # -------------------------------------------------------------- parameters

    def named_arrays(self) -> dict[str, np.ndarray]:
        return {k: v.data for k, v in self.params.items()}

    def head_params(self, head: str) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if k.startswith(head + ".")}

    def copy_head(self, src: str = "C1", dst: str = "C2") -> None:
        for k, v in self.head_params(src).items():
            self.params[dst + k[len(src):]].data = v.data.copy()

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def manifest(self, length: int | None = None, extra: dict | None = None) -> dict:
        out = {
            "architecture": self.cfg.architecture_hash(),
            "net": {k: list(v) if isinstance(v, tuple) else v for k, v in asdict(self.cfg).items()},
            "feature_dim": self.cfg.feature_dim,
            "L": length,
            "normalizer": {"mean": [float(v) for v in self.normalizer.mean], "std": [float(v) for v in self.normalizer.std]},
        }
        if extra:
            out.update(extra)
        return out

    def save(self, path, length: int | None = None, extra: dict | None = None) -> None:
        ad.save_checkpoint(path, self.named_arrays(), meta=self.manifest(length, extra))

    @classmethod
    def load(cls, path) -> tuple["BiClassifierNet", dict]:
        arrays, meta = ad.load_checkpoint(path)
        meta = meta or {}
        net_cfg = meta.get("net")
        cfg = NetConfig(**{k: tuple(v) if isinstance(v, list) else v for k, v in net_cfg.items()}) if net_cfg else NetConfig()
        model = cls(cfg, seed=0)
        if set(arrays) != set(model.params):
            missing = set(model.params) ^ set(arrays)
            raise ad.CheckpointError(f"{path}: parameter names do not match architecture: {sorted(missing)[:4]}")
        for k, v in arrays.items():
            if v.shape != model.params[k].shape:
                raise ad.CheckpointError(f"{path}: {k} has shape {v.shape}, expected {model.params[k].shape}")
            model.params[k].data = v
        norm = meta.get("normalizer")
        if norm:
            model.normalizer = Normalizer(np.array(norm["mean"], np.float32), np.array(norm["std"], np.float32))
        return model, meta


def combine_probs(p1: np.ndarray, p2: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Mean of the two heads' probabilities and its argmax (ties -> lowest class)."""
    if p1.shape != p2.shape:
        raise ad.ShapeError(f"combine: {p1.shape} vs {p2.shape}")
    probs = (p1 + p2) / 2
    return probs, np.argmax(probs, axis=1)


def combine(logits1, logits2) -> tuple[np.ndarray, np.ndarray]:
    a = logits1 if isinstance(logits1, Tensor) else Tensor(logits1)
    b = logits2 if isinstance(logits2, Tensor) else Tensor(logits2)
    with ad.no_grad():
        return combine_probs(ad.softmax(a).data, ad.softmax(b).data)
