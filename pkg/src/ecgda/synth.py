"""Synthetic quasi-ECG records with a controllable source -> target domain shift.

Beats are sums of Gaussian bumps (P, QRS, T) with class-specific morphology and
timing: V beats are wide, tall and premature with a compensatory pause, S beats
are premature with a small inverted P, F beats sit between N and V. The target
domain differs in amplitude scale, baseline offset and noise level, all driven by
one ``shift`` knob.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .records import BeatClass, EcgRecord, write_record

# (P amp, QRS amp, QRS width s, T amp, T width s, secondary bump amp)
MORPHOLOGY = {
    BeatClass.N: (0.15, 1.00, 0.010, 0.30, 0.040, 0.00),
    BeatClass.V: (0.00, 1.35, 0.028, -0.35, 0.060, 0.00),
    BeatClass.S: (-0.08, 0.95, 0.010, 0.25, 0.040, 0.00),
    BeatClass.F: (0.08, 1.15, 0.018, 0.05, 0.050, 0.35),
}
# RR of this beat relative to the record's base RR; factor applied to the following RR
PREMATURITY = {BeatClass.N: (1.0, 1.0), BeatClass.V: (0.70, 1.30), BeatClass.S: (0.72, 1.05), BeatClass.F: (0.92, 1.05)}
SYMBOL = {BeatClass.N: "N", BeatClass.V: "V", BeatClass.S: "A", BeatClass.F: "F"}

SOURCE_PRIORS = (0.74, 0.13, 0.08, 0.05)
TARGET_PRIORS = (0.78, 0.11, 0.07, 0.04)


@dataclass(frozen=True)
class DomainSpec:
    fs: int
    priors: tuple[float, ...]
    amplitude: float = 1.0
    offset: float = 0.0
    noise: float = 0.02
    base_rr: float = 0.8


def source_domain() -> DomainSpec:
    return DomainSpec(fs=360, priors=SOURCE_PRIORS)


def target_domain(shift: float) -> DomainSpec:
    """Target statistics for a given shift (0 = same as source apart from the sampling rate)."""
    return DomainSpec(
        fs=257, priors=TARGET_PRIORS,
        amplitude=1.0 - 0.4 * shift, offset=2.0 * shift, noise=0.02 + 0.06 * shift,
    )


def _beat(t: np.ndarray, cls: BeatClass, rng: np.random.Generator) -> np.ndarray:
    p, q, qw, ta, tw, sec = MORPHOLOGY[cls]
    jitter = rng.normal(1.0, 0.06, size=4)
    w = qw * jitter[0]
    y = q * jitter[1] * np.exp(-0.5 * (t / w) ** 2)
    y -= 0.15 * q * np.exp(-0.5 * ((t - 2.2 * w) / w) ** 2)
    y += p * jitter[2] * np.exp(-0.5 * ((t + 0.18) / 0.022) ** 2)
    y += ta * jitter[3] * np.exp(-0.5 * ((t - 0.26) / tw) ** 2)
    if sec:
        y += sec * np.exp(-0.5 * ((t - 0.05) / 0.015) ** 2)
    return y


def synth_record(record_id: str, n_beats: int, spec: DomainSpec, rng: np.random.Generator) -> EcgRecord:
    labels = rng.choice(len(spec.priors), size=n_beats, p=np.asarray(spec.priors) / np.sum(spec.priors))
    labels[0] = BeatClass.N
    base = spec.base_rr * rng.uniform(0.9, 1.1)
    times, t, carry = [], 0.6, 1.0
    for k in labels:
        pre, post = PREMATURITY[BeatClass(k)]
        t += base * pre * carry * rng.normal(1.0, 0.03)
        times.append(t)
        carry = post
    duration = times[-1] + 0.8
    n = int(duration * spec.fs)
    ts = np.arange(n) / spec.fs
    x = np.zeros(n)
    half = int(0.45 * spec.fs)
    for tb, k in zip(times, labels):
        c = int(round(tb * spec.fs))
        lo, hi = max(0, c - half), min(n, c + half)
        x[lo:hi] += _beat(ts[lo:hi] - ts[c], BeatClass(k), rng)
    x *= spec.amplitude
    x += spec.offset + 0.1 * np.sin(2 * np.pi * 0.25 * ts + rng.uniform(0, 2 * np.pi))
    x += rng.normal(0, spec.noise, size=n)
    v5 = 0.7 * x + rng.normal(0, spec.noise, size=n)
    ann = [(int(round(tb * spec.fs)), SYMBOL[BeatClass(k)]) for tb, k in zip(times, labels)]
    return EcgRecord(record_id, {"II": x.astype(np.float32), "V5": v5.astype(np.float32)}, spec.fs, ann)


def generate_fixtures(out_dir, shift: float = 0.5, seed: int = 0, n_source: int = 2000, n_target: int = 2000,
                      records_per_domain: int = 4) -> tuple[Path, Path]:
    """Write ``out_dir/source`` and ``out_dir/target`` record trees; deterministic in ``seed``."""
    out = Path(out_dir)
    rng_s, rng_t = (np.random.default_rng(s) for s in np.random.SeedSequence(seed).spawn(2))
    paths = []
    for name, spec, rng, total in (("source", source_domain(), rng_s, n_source),
                                   ("target", target_domain(shift), rng_t, n_target)):
        root = out / name
        root.mkdir(parents=True, exist_ok=True)
        per = np.full(records_per_domain, total // records_per_domain)
        per[: total % records_per_domain] += 1
        for r, nb in enumerate(per):
            # +1: beat 0 has no RR interval and is never segmented
            write_record(synth_record(f"{name[0]}{r:03d}", int(nb) + 1, spec, rng), root)
        paths.append(root)
    return paths[0], paths[1]
