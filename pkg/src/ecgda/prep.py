"""Beat preprocessing: band-pass, resampling to 256 Hz, R-peak segmentation, RR features."""
from __future__ import annotations

import json
import logging
from dataclasses import dataclass
from math import gcd
from pathlib import Path
from typing import Sequence

import numpy as np
from scipy import signal as sps

from .records import NUM_CLASSES, EcgRecord, LabeledDataset, map_symbol

log = logging.getLogger(__name__)

TARGET_FS = 256

# standard beat annotation codes; anything else (rhythm changes, noise marks) is not an R-peak
BEAT_SYMBOLS = frozenset("NLRejVEAaJSFQ/f")


@dataclass(frozen=True)
class PrepConfig:
    band_lo: float = 3.0
    band_hi: float = 20.0
    target_fs: int = TARGET_FS
    filter_order: int = 256  # at 256 Hz; scaled with the input rate
    rr_mean_samples: int | None = None
    channel: str | None = None

    def __post_init__(self):
        if not 0 < self.band_lo < self.band_hi < self.target_fs / 2:
            raise ValueError(f"need 0 < band_lo < band_hi < target_fs/2, got {self.band_lo}, {self.band_hi}, {self.target_fs}")
        if self.filter_order <= 0:
            raise ValueError("filter_order must be positive")


def bandpass_taps(fs: float, cfg: PrepConfig = PrepConfig()) -> np.ndarray:
    """Linear-phase windowed-sinc (Hamming) band-pass, odd length."""
    half = max(1, int(round(cfg.filter_order * fs / TARGET_FS / 2)))
    return sps.firwin(2 * half + 1, [cfg.band_lo, cfg.band_hi], pass_zero=False, fs=fs)


def bandpass(x: np.ndarray, fs: float, cfg: PrepConfig = PrepConfig()) -> np.ndarray:
    """Zero-phase (forward-backward) FIR band-pass; output has the input's length."""
    if fs <= 2 * cfg.band_hi:
        raise ValueError(f"sampling rate {fs} Hz too low for a {cfg.band_hi} Hz band edge")
    taps = bandpass_taps(fs, cfg)
    x = np.asarray(x, dtype=np.float64)
    if len(x) <= len(taps):
        raise ValueError(f"signal of {len(x)} samples is shorter than the {len(taps)}-tap filter")
    y = sps.filtfilt(taps, [1.0], x, padlen=min(3 * len(taps), len(x) - 1))
    return y.astype(np.float32)


def resample(x: np.ndarray, fs_in: int, fs_out: int) -> np.ndarray:
    """Polyphase FIR resampling; output length ``round(n * fs_out / fs_in)``."""
    if fs_in <= 0 or fs_out <= 0:
        raise ValueError("sampling rates must be positive")
    x = np.asarray(x, dtype=np.float32)
    if fs_in == fs_out:
        return x.copy()
    g = gcd(int(fs_in), int(fs_out))
    y = sps.resample_poly(x.astype(np.float64), fs_out // g, fs_in // g)
    n_out = int(round(len(x) * fs_out / fs_in))
    return y[:n_out].astype(np.float32)


def resample_peaks(peaks: np.ndarray, fs_in: int, fs_out: int, n_out: int) -> np.ndarray:
    idx = np.minimum(np.round(np.asarray(peaks) * (fs_out / fs_in)).astype(np.int64), n_out - 1)
    return idx


def compute_rr_mean(r_peaks) -> int:
    """Mean RR interval in samples, rounded down."""
    peaks = np.asarray(r_peaks, dtype=np.int64)
    if len(peaks) < 2:
        raise ValueError("need at least two R-peaks for an RR interval")
    return int(np.diff(peaks).sum() // (len(peaks) - 1))


def pooled_rr_mean(peak_lists: Sequence[np.ndarray]) -> int:
    """RR mean over the intervals of several records pooled together."""
    total, count = 0, 0
    for p in peak_lists:
        p = np.asarray(p, dtype=np.int64)
        if len(p) >= 2:
            total += int(np.diff(p).sum())
            count += len(p) - 1
    if count == 0:
        raise ValueError("need at least two R-peaks for an RR interval")
    return total // count


def segment(x: np.ndarray, r_peaks, rr_mean: int) -> tuple[list[tuple[np.ndarray, int]], int]:
    """Windows ``[R - rr_mean//2, R + rr_mean//2]`` (inclusive) around each peak.

    Beats whose window leaves the record are dropped. Returns (windows, dropped count).
    """
    half = int(rr_mean) // 2
    out, dropped = [], 0
    for r in np.asarray(r_peaks, dtype=np.int64):
        lo, hi = r - half, r + half
        if lo < 0 or hi >= len(x):
            dropped += 1
            continue
        out.append((x[lo:hi + 1], int(r)))
    return out, dropped


def time_features(r_peaks, i: int, fs: float) -> tuple[float, float, float]:
    """(RR_curr, RR_pre, RR_pre8) in seconds for beat ``i`` (i >= 1)."""
    if i < 1:
        raise ValueError("beat 0 has no preceding RR interval")
    d = np.diff(np.asarray(r_peaks[: i + 1], dtype=np.int64)).astype(np.float64)
    m = min(8, i)
    return float(d[-1] / fs), float(d.mean() / fs), float(d[-m:].mean() / fs)


def _all_time_features(peaks: np.ndarray, fs: float) -> np.ndarray:
    """Vectorised ``time_features`` for beats 1..n-1 -> (n-1, 3)."""
    d = np.diff(peaks).astype(np.float64)
    k = np.arange(1, len(d) + 1)
    csum = np.concatenate([[0.0], np.cumsum(d)])
    m = np.minimum(8, k)
    pre = csum[k] / k
    pre8 = (csum[k] - csum[k - m]) / m
    return np.stack([d, pre, pre8], axis=1) / fs


def record_beats(rec: EcgRecord, cfg: PrepConfig = PrepConfig()) -> tuple[np.ndarray, np.ndarray, list[str]]:
    """Filter + resample one channel; return (signal at target_fs, peak indices, symbols)."""
    x = bandpass(rec.channel(cfg.channel), rec.fs, cfg)
    y = resample(x, rec.fs, cfg.target_fs)
    beats = [(i, s) for i, s in rec.annotations if s in BEAT_SYMBOLS]
    peaks = resample_peaks(np.array([i for i, _ in beats], dtype=np.int64), rec.fs, cfg.target_fs, len(y))
    symbols = [s for _, s in beats]
    keep = np.concatenate([[True], np.diff(peaks) > 0]) if len(peaks) else np.zeros(0, bool)
    return y, peaks[keep], [s for s, k in zip(symbols, keep) if k]


def segment_record(y: np.ndarray, peaks: np.ndarray, symbols: Sequence[str], rr_mean: int, record_id: str,
                   fs: int = TARGET_FS) -> tuple[dict, int]:
    """Segments plus features for one preprocessed record. Rejected classes and beat 0 are skipped."""
    half = rr_mean // 2
    tf = _all_time_features(peaks, fs) if len(peaks) > 1 else np.zeros((0, 3))
    waves, feats, labels, ridx = [], [], [], []
    dropped = 0
    for i in range(1, len(peaks)):
        cls = map_symbol(symbols[i])
        if cls is None:
            continue
        r = int(peaks[i])
        if r - half < 0 or r + half >= len(y):
            dropped += 1
            continue
        waves.append(y[r - half:r + half + 1])
        feats.append(tf[i - 1])
        labels.append(int(cls))
        ridx.append(r)
    cols = {
        "waveforms": np.array(waves, dtype=np.float32).reshape(len(waves), 2 * half + 1),
        "time_feats": np.array(feats, dtype=np.float32).reshape(len(feats), 3),
        "labels": np.array(labels, dtype=np.int64),
        "records": np.array([record_id] * len(waves)),
        "r_index": np.array(ridx, dtype=np.int64),
    }
    return cols, dropped


def build_dataset(records: Sequence[EcgRecord], domain_tag: str, cfg: PrepConfig = PrepConfig(),
                  rr_mean: int | None = None, keep_labels: bool = True) -> tuple[LabeledDataset, int]:
    """Preprocess records into one dataset. ``rr_mean`` defaults to the pooled mean of these records.

    Returns the dataset and the RR mean used.
    """
    pre = [(rec.record_id, *record_beats(rec, cfg)) for rec in records]
    if rr_mean is None:
        rr_mean = cfg.rr_mean_samples or pooled_rr_mean([p for _, _, p, _ in pre])
    parts, dropped = [], 0
    for rid, y, peaks, symbols in pre:
        cols, d = segment_record(y, peaks, symbols, rr_mean, rid, cfg.target_fs)
        dropped += d
        parts.append(cols)
    if dropped:
        log.info("%s: dropped %d boundary beats", domain_tag, dropped)
    merged = {k: np.concatenate([p[k] for p in parts]) for k in parts[0]}
    if not keep_labels:
        merged["labels"] = np.full(len(merged["labels"]), -1, dtype=np.int64)
    return LabeledDataset(**merged, domain_tag=domain_tag), rr_mean


# -------------------------------------------------------------- segment cache

_CACHE_MAGIC = b"ECGSEG1\n"


def write_cache(path, ds: LabeledDataset, rr_mean: int, fs: int = TARGET_FS) -> None:
    """Header line {L, fs, rr_mean, count}; per segment L+3 little-endian float32 then a label byte."""
    header = {"L": ds.length, "fs": fs, "rr_mean": int(rr_mean), "count": len(ds), "domain": ds.domain_tag}
    rec = np.dtype([("w", "<f4", (ds.length,)), ("t", "<f4", (3,)), ("y", "u1")])
    arr = np.zeros(len(ds), dtype=rec)
    arr["w"] = ds.waveforms
    arr["t"] = ds.time_feats
    arr["y"] = np.where(ds.labels < 0, 255, ds.labels).astype(np.uint8)
    with open(path, "wb") as fh:
        fh.write(_CACHE_MAGIC)
        fh.write(json.dumps(header, sort_keys=True).encode() + b"\n")
        fh.write(arr.tobytes())


def read_cache(path) -> tuple[LabeledDataset, dict]:
    raw = Path(path).read_bytes()
    if not raw.startswith(_CACHE_MAGIC):
        raise ValueError(f"{path}: not a segment cache")
    end = raw.index(b"\n", len(_CACHE_MAGIC))
    header = json.loads(raw[len(_CACHE_MAGIC):end])
    L, n = header["L"], header["count"]
    rec = np.dtype([("w", "<f4", (L,)), ("t", "<f4", (3,)), ("y", "u1")])
    body = raw[end + 1:]
    if len(body) != n * rec.itemsize:
        raise ValueError(f"{path}: expected {n} segments of {rec.itemsize} bytes, got {len(body)} bytes")
    arr = np.frombuffer(body, dtype=rec, count=n)
    labels = arr["y"].astype(np.int64)
    labels[labels == 255] = -1
    if (labels >= NUM_CLASSES).any():
        raise ValueError(f"{path}: label byte out of range")
    ds = LabeledDataset(
        arr["w"].astype(np.float32), arr["t"].astype(np.float32), labels,
        np.array([Path(path).stem] * n), np.full(n, -1, dtype=np.int64), header.get("domain", "source"),
    )
    return ds, header


__all__ = [
    "BEAT_SYMBOLS", "PrepConfig", "TARGET_FS", "bandpass", "bandpass_taps", "build_dataset", "compute_rr_mean",
    "pooled_rr_mean", "read_cache", "record_beats", "resample", "resample_peaks", "segment", "segment_record",
    "time_features", "write_cache",
]
