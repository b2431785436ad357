"""ECG record I/O in a portable text layout, AAMI symbol mapping, class duplication.

Layout of one record directory ``<root>/<record_id>/``::

    meta.json         {"record_id", "fs", "channel_names", "n_samples"}
    signal.csv        header of channel names, one row per sample
    annotations.csv   header ``sample_index,symbol``, one row per beat
"""
from __future__ import annotations

import csv
import json
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from enum import IntEnum
from pathlib import Path
from typing import Iterable, Mapping, Sequence

import numpy as np


class BeatClass(IntEnum):
    N = 0
    V = 1
    S = 2
    F = 3


CLASS_NAMES = tuple(c.name for c in BeatClass)
NUM_CLASSES = len(BeatClass)

REJECTED = None

_AAMI = {
    **{s: BeatClass.N for s in "NLRej"},
    **{s: BeatClass.V for s in "VE"},
    **{s: BeatClass.S for s in "AaJS"},
    "F": BeatClass.F,
}


def map_symbol(symbol: str) -> BeatClass | None:
    """AAMI EC57 grouping of a beat annotation symbol; ``None`` means rejected (Q, paced, ...)."""
    return _AAMI.get(symbol, REJECTED)


class RecordFormatError(ValueError):
    """Malformed record directory. The message names the file and line."""


@dataclass
class EcgRecord:
    record_id: str
    channels: dict[str, np.ndarray]
    fs: int
    annotations: list[tuple[int, str]] = field(default_factory=list)

    def __post_init__(self):
        validate_record(self)

    @property
    def n_samples(self) -> int:
        return len(next(iter(self.channels.values())))

    @property
    def r_peaks(self) -> np.ndarray:
        return np.array([i for i, _ in self.annotations], dtype=np.int64)

    def channel(self, name: str | None = None) -> np.ndarray:
        if name is None:
            return next(iter(self.channels.values()))
        try:
            return self.channels[name]
        except KeyError:
            raise KeyError(f"record {self.record_id} has no channel {name!r}; has {list(self.channels)}") from None

    def __eq__(self, other):
        if not isinstance(other, EcgRecord):
            return NotImplemented
        return (
            self.record_id == other.record_id
            and self.fs == other.fs
            and self.annotations == other.annotations
            and list(self.channels) == list(other.channels)
            and all(np.array_equal(self.channels[k], other.channels[k]) for k in self.channels)
        )


def validate_record(rec: EcgRecord) -> None:
    if not isinstance(rec.fs, (int, np.integer)) or rec.fs <= 0:
        raise RecordFormatError(f"{rec.record_id}: fs must be a positive integer, got {rec.fs!r}")
    if not rec.channels:
        raise RecordFormatError(f"{rec.record_id}: no channels")
    lengths = {name: len(x) for name, x in rec.channels.items()}
    if len(set(lengths.values())) != 1:
        raise RecordFormatError(f"{rec.record_id}: channel length mismatch {lengths}")
    n = next(iter(lengths.values()))
    if n == 0:
        raise RecordFormatError(f"{rec.record_id}: empty channels")
    prev = -1
    for idx, sym in rec.annotations:
        if idx <= prev:
            raise RecordFormatError(f"{rec.record_id}: non-monotone annotation index {idx} after {prev}")
        if idx >= n:
            raise RecordFormatError(f"{rec.record_id}: annotation index {idx} beyond length {n}")
        prev = idx


# --------------------------------------------------------------------- reading


def _read_meta(path: Path) -> dict:
    if not path.exists():
        raise RecordFormatError(f"missing file {path}")
    try:
        meta = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise RecordFormatError(f"{path}:{exc.lineno}: malformed header: {exc.msg}") from None
    for key in ("record_id", "fs", "channel_names", "n_samples"):
        if key not in meta:
            raise RecordFormatError(f"{path}:1: malformed header: missing field {key!r}")
    if not isinstance(meta["fs"], int) or meta["fs"] <= 0:
        raise RecordFormatError(f"{path}:1: malformed header: fs must be a positive integer")
    return meta


def _read_signal(path: Path, names: Sequence[str], n_samples: int) -> dict[str, np.ndarray]:
    if not path.exists():
        raise RecordFormatError(f"missing file {path}")
    with path.open(encoding="utf-8", newline="") as fh:
        header = fh.readline().rstrip("\n").split(",")
        if header != list(names):
            raise RecordFormatError(f"{path}:1: malformed header: channels {header} != meta {list(names)}")
        rows = []
        for lineno, line in enumerate(fh, start=2):
            parts = line.rstrip("\n").split(",")
            if len(parts) != len(names):
                raise RecordFormatError(f"{path}:{lineno}: channel length mismatch: {len(parts)} values, expected {len(names)}")
            try:
                rows.append([float(p) for p in parts])
            except ValueError:
                raise RecordFormatError(f"{path}:{lineno}: malformed sample {line.strip()!r}") from None
    if len(rows) != n_samples:
        raise RecordFormatError(f"{path}:{len(rows) + 1}: channel length mismatch: {len(rows)} rows, meta says {n_samples}")
    data = np.asarray(rows, dtype=np.float32).reshape(n_samples, len(names))
    return {name: np.ascontiguousarray(data[:, j]) for j, name in enumerate(names)}


def _read_annotations(path: Path, n_samples: int) -> list[tuple[int, str]]:
    if not path.exists():
        raise RecordFormatError(f"missing file {path}")
    out: list[tuple[int, str]] = []
    with path.open(encoding="utf-8", newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != ["sample_index", "symbol"]:
            raise RecordFormatError(f"{path}:1: malformed header {header}")
        prev = -1
        for lineno, row in enumerate(reader, start=2):
            if len(row) != 2 or len(row[1]) != 1 or not row[0].isdigit():
                raise RecordFormatError(f"{path}:{lineno}: malformed annotation {row}")
            idx = int(row[0])
            if idx <= prev:
                raise RecordFormatError(f"{path}:{lineno}: non-monotone annotation index {idx} after {prev}")
            if idx >= n_samples:
                raise RecordFormatError(f"{path}:{lineno}: annotation index {idx} beyond length {n_samples}")
            prev = idx
            out.append((idx, row[1]))
    return out


def load_record(path) -> EcgRecord:
    path = Path(path)
    meta = _read_meta(path / "meta.json")
    channels = _read_signal(path / "signal.csv", meta["channel_names"], int(meta["n_samples"]))
    annotations = _read_annotations(path / "annotations.csv", int(meta["n_samples"]))
    return EcgRecord(str(meta["record_id"]), channels, int(meta["fs"]), annotations)


def write_record(rec: EcgRecord, root) -> Path:
    """Write ``rec`` under ``root/<record_id>``; floats use shortest round-trip repr."""
    validate_record(rec)
    out = Path(root) / rec.record_id
    out.mkdir(parents=True, exist_ok=True)
    names = list(rec.channels)
    meta = {"record_id": rec.record_id, "fs": int(rec.fs), "channel_names": names, "n_samples": rec.n_samples}
    (out / "meta.json").write_text(json.dumps(meta, indent=1, sort_keys=True) + "\n", encoding="utf-8")
    cols = [np.asarray(rec.channels[k], dtype=np.float32) for k in names]
    lines = [",".join(names)]
    # repr of a float32 promoted to Python float parses back to the same float32
    strs = [[repr(v) for v in c.tolist()] for c in cols]
    lines += [",".join(row) for row in zip(*strs)]
    (out / "signal.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    ann = ["sample_index,symbol"] + [f"{i},{s}" for i, s in rec.annotations]
    (out / "annotations.csv").write_text("\n".join(ann) + "\n", encoding="utf-8")
    return out


def list_records(root) -> list[Path]:
    """Record directories below ``root`` (or ``root`` itself if it is one), sorted by name."""
    root = Path(root)
    if not root.exists():
        raise FileNotFoundError(f"dataset path {root} does not exist")
    if (root / "meta.json").exists():
        return [root]
    return sorted(p for p in root.iterdir() if (p / "meta.json").exists())


def load_records(root, workers: int = 1) -> list[EcgRecord]:
    paths = list_records(root)
    if workers <= 1:
        return [load_record(p) for p in paths]
    with ThreadPoolExecutor(workers) as pool:
        return list(pool.map(load_record, paths))


# ------------------------------------------------------------------- datasets


@dataclass(frozen=True)
class BeatSegment:
    waveform: np.ndarray
    rr_curr: float
    rr_pre: float
    rr_pre8: float
    label: BeatClass | None
    source_record: str
    r_index: int
    duplicate: bool = False

    @property
    def time_features(self) -> tuple[float, float, float]:
        return (self.rr_curr, self.rr_pre, self.rr_pre8)


@dataclass
class LabeledDataset:
    """Segments of one domain stored column-wise for fast batching.

    ``labels`` uses -1 for unlabeled beats. ``duplicate`` marks augmentation copies.
    """

    waveforms: np.ndarray  # (N, L) float32
    time_feats: np.ndarray  # (N, 3) float32, seconds
    labels: np.ndarray  # (N,) int64
    records: np.ndarray  # (N,) str
    r_index: np.ndarray  # (N,) int64
    domain_tag: str = "source"
    duplicate: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.waveforms)
        if self.duplicate is None:
            self.duplicate = np.zeros(n, dtype=bool)
        for name in ("time_feats", "labels", "records", "r_index", "duplicate"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"dataset column {name} has length {len(getattr(self, name))}, expected {n}")
        if self.domain_tag not in ("source", "target"):
            raise ValueError(f"domain_tag must be source or target, got {self.domain_tag!r}")
        if self.domain_tag == "source" and n and (self.labels < 0).any():
            raise ValueError("source segments must all be labeled")

    def __len__(self) -> int:
        return len(self.waveforms)

    @property
    def length(self) -> int:
        return self.waveforms.shape[1]

    @property
    def labeled(self) -> bool:
        return bool(len(self)) and bool((self.labels >= 0).all())

    @property
    def class_counts(self) -> dict[BeatClass, int]:
        counts = np.bincount(self.labels[self.labels >= 0], minlength=NUM_CLASSES)
        return {c: int(counts[c]) for c in BeatClass}

    def segment(self, i: int) -> BeatSegment:
        lab = int(self.labels[i])
        return BeatSegment(
            self.waveforms[i], *map(float, self.time_feats[i]),
            label=BeatClass(lab) if lab >= 0 else None,
            source_record=str(self.records[i]), r_index=int(self.r_index[i]), duplicate=bool(self.duplicate[i]),
        )

    def subset(self, idx) -> "LabeledDataset":
        idx = np.asarray(idx)
        return LabeledDataset(
            self.waveforms[idx], self.time_feats[idx], self.labels[idx], self.records[idx], self.r_index[idx],
            self.domain_tag, self.duplicate[idx],
        )

    def originals(self) -> "LabeledDataset":
        return self.subset(np.flatnonzero(~self.duplicate))

    def as_target(self, keep_labels: bool = True) -> "LabeledDataset":
        labels = self.labels if keep_labels else np.full(len(self), -1, dtype=np.int64)
        return LabeledDataset(self.waveforms, self.time_feats, labels, self.records, self.r_index, "target", self.duplicate)

    @classmethod
    def from_segments(cls, segments: Iterable[BeatSegment], domain_tag: str = "source") -> "LabeledDataset":
        segs = list(segments)
        if not segs:
            raise ValueError("no segments")
        return cls(
            np.stack([s.waveform for s in segs]).astype(np.float32),
            np.array([s.time_features for s in segs], dtype=np.float32),
            np.array([-1 if s.label is None else int(s.label) for s in segs], dtype=np.int64),
            np.array([s.source_record for s in segs]),
            np.array([s.r_index for s in segs], dtype=np.int64),
            domain_tag,
            np.array([s.duplicate for s in segs], dtype=bool),
        )

    @classmethod
    def concat(cls, parts: Sequence["LabeledDataset"]) -> "LabeledDataset":
        tags = {p.domain_tag for p in parts}
        if len(tags) != 1:
            raise ValueError(f"cannot concatenate domains {tags}")
        return cls(
            np.concatenate([p.waveforms for p in parts]),
            np.concatenate([p.time_feats for p in parts]),
            np.concatenate([p.labels for p in parts]),
            np.concatenate([p.records for p in parts]),
            np.concatenate([p.r_index for p in parts]),
            tags.pop(),
            np.concatenate([p.duplicate for p in parts]),
        )


DEFAULT_FACTORS = {BeatClass.N: 0, BeatClass.V: 2, BeatClass.S: 5, BeatClass.F: 10}


def augment_counts(counts: Mapping, factors: Mapping = DEFAULT_FACTORS) -> dict:
    """Class counts after duplication: each class grows to ``count * (factor + 1)``."""
    fac = {BeatClass[k] if isinstance(k, str) else BeatClass(k): int(v) for k, v in factors.items()}
    out = {}
    for k, n in counts.items():
        cls = BeatClass[k] if isinstance(k, str) else BeatClass(k)
        out[k] = int(n) * (fac.get(cls, 0) + 1)
    return out


def augment(ds: LabeledDataset, factors: Mapping = DEFAULT_FACTORS) -> LabeledDataset:
    """Append ``factors[k]`` exact copies of every class-k segment.

    Originals keep their order; copies follow grouped by class (N, V, S, F), copy
    round by copy round. Copies carry ``duplicate=True``.
    """
    fac = {BeatClass[k] if isinstance(k, str) else BeatClass(k): int(v) for k, v in factors.items()}
    if any(v < 0 for v in fac.values()):
        raise ValueError(f"augmentation factors must be non-negative: {factors}")
    if not ds.labeled:
        raise ValueError("augment needs a fully labeled dataset")
    extra = []
    for cls in BeatClass:
        members = np.flatnonzero(ds.labels == cls)
        extra.extend([members] * fac.get(cls, 0))
    if not extra:
        return ds
    copy_idx = np.concatenate(extra)
    out = ds.subset(np.concatenate([np.arange(len(ds)), copy_idx]))
    out.duplicate[len(ds):] = True
    return out
