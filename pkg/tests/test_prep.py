import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import signal as sps

from ecgda.prep import (PrepConfig, bandpass, bandpass_taps, build_dataset, compute_rr_mean, pooled_rr_mean,
                        read_cache, resample, segment, segment_record, time_features, write_cache)
from ecgda.records import EcgRecord
from ecgda.synth import generate_fixtures
from ecgda.records import load_records


def rms(x):
    return float(np.sqrt(np.mean(np.square(x, dtype=np.float64))))


def tone(freq, fs, seconds=20.0):
    t = np.arange(int(seconds * fs)) / fs
    return np.sin(2 * np.pi * freq * t)


def dominant_frequency(x, fs):
    spec = np.abs(np.fft.rfft(x * np.hanning(len(x)), n=16 * len(x)))
    return np.fft.rfftfreq(16 * len(x), 1 / fs)[np.argmax(spec)]


# ---------------------------------------------------------------- bandpass


@pytest.mark.parametrize("fs", [256, 257, 360])
def test_zero_phase_magnitude_response(fs):
    taps = bandpass_taps(fs)
    freqs, h = sps.freqz(taps, worN=2 ** 16, fs=fs)
    # forward-backward filtering squares the magnitude
    db = 20 * np.log10(np.maximum(np.abs(h) ** 2, 1e-300))
    band = (freqs >= 4) & (freqs <= 19)
    assert db[band].min() >= -3.0
    assert db[0] <= -20.0
    assert db[freqs >= 40].max() <= -20.0


def test_dc_is_removed():
    y = bandpass(np.full(4000, 3.0), 256)
    assert np.abs(y).max() < 0.01 * 3.0


def test_passband_tone_kept_and_mains_removed():
    x10, x60 = tone(10, 256), tone(60, 256)
    edge = 512
    r10 = rms(bandpass(x10, 256)[edge:-edge]) / rms(x10[edge:-edge])
    r60 = rms(bandpass(x60, 256)[edge:-edge]) / rms(x60[edge:-edge])
    assert 0.9 <= r10 <= 1.0
    assert r60 < 0.1


def test_bandpass_preconditions():
    with pytest.raises(ValueError, match="shorter"):
        bandpass(np.zeros(100), 256)
    with pytest.raises(ValueError, match="too low"):
        bandpass(np.zeros(5000), 30)
    with pytest.raises(ValueError):
        PrepConfig(band_lo=20, band_hi=3)


def test_bandpass_same_length_and_float32():
    y = bandpass(np.random.default_rng(0).normal(size=3001), 360)
    assert y.shape == (3001,) and y.dtype == np.float32


# ---------------------------------------------------------------- resample


def test_resample_identity():
    x = np.random.default_rng(1).normal(size=1000).astype(np.float32)
    np.testing.assert_array_equal(resample(x, 256, 256), x)


@pytest.mark.parametrize("n,fs_in,fs_out", [(462600, 257, 256), (1000, 360, 256), (999, 257, 256), (17, 128, 256)])
def test_resample_length_formula(n, fs_in, fs_out):
    assert len(resample(np.zeros(n), fs_in, fs_out)) == round(n * fs_out / fs_in)


def test_resample_published_length():
    assert len(resample(np.zeros(462600, np.float32), 257, 256)) == 460800


@pytest.mark.parametrize("fs_in", [360, 257, 500])
def test_resampled_tone_keeps_frequency_and_amplitude(fs_in):
    y = resample(tone(5, fs_in), fs_in, 256)
    assert abs(dominant_frequency(y, 256) - 5.0) <= 0.1
    mid = y[512:-512]
    assert abs(rms(mid) * np.sqrt(2) - 1.0) <= 0.05


def test_resample_there_and_back_keeps_tone():
    x = tone(7.5, 360, 10)
    back = resample(resample(x, 360, 256), 256, 360)
    assert abs(dominant_frequency(back, 360) - 7.5) <= 0.1


# ------------------------------------------------------------ segmentation


@pytest.mark.parametrize("peaks,expected", [([0, 200, 400], 200), ([0, 100, 300], 150), ([0, 213, 427, 640], 213)])
def test_rr_mean_examples(peaks, expected):
    assert compute_rr_mean(peaks) == expected


def test_rr_mean_needs_two_peaks():
    with pytest.raises(ValueError):
        compute_rr_mean([5])
    with pytest.raises(ValueError):
        pooled_rr_mean([[1], [7]])


def test_pooled_rr_mean_pools_intervals():
    # intervals 100, 100 and 400 -> 600 / 3
    assert pooled_rr_mean([[0, 100, 200], [0, 400]]) == 200


def test_segment_window_example():
    x = np.arange(10000, dtype=np.float32)
    out, dropped = segment(x, [1000, 50], 213)
    assert dropped == 1 and len(out) == 1
    win, r = out[0]
    assert r == 1000 and len(win) == 213 and win[0] == 894 and win[-1] == 1106


def test_segment_small_case():
    out, _ = segment(np.arange(20, dtype=np.float32), [10], 4)
    np.testing.assert_array_equal(out[0][0], [8, 9, 10, 11, 12])


@settings(max_examples=50, deadline=None)
@given(st.integers(2, 600))
def test_segment_length_formula(rr_mean):
    x = np.zeros(4000, np.float32)
    out, _ = segment(x, [2000], rr_mean)
    assert len(out[0][0]) == 2 * (rr_mean // 2) + 1


def test_time_feature_examples():
    assert time_features([0, 100, 200, 300], 3, 256) == (0.390625, 0.390625, 0.390625)
    cur, pre, _ = time_features([0, 100, 300], 2, 256)
    assert cur == 0.78125 and pre == 0.5859375
    with pytest.raises(ValueError):
        time_features([0, 100], 0, 256)


def test_rr_pre8_uses_last_eight_intervals():
    intervals = [100] * 9 + [180]
    peaks = np.concatenate([[0], np.cumsum(intervals)])
    _, _, pre8 = time_features(peaks, 10, 256)
    assert pre8 == pytest.approx(np.mean(intervals[2:10]) / 256)


@settings(max_examples=40, deadline=None)
@given(st.lists(st.integers(20, 400), min_size=2, max_size=20), st.integers(0, 10 ** 6))
def test_time_features_translation_invariant(intervals, shift):
    peaks = np.concatenate([[0], np.cumsum(intervals)])
    for i in range(1, len(peaks)):
        assert time_features(peaks, i, 256) == time_features(peaks + shift, i, 256)


def test_vectorised_features_match_scalar():
    rng = np.random.default_rng(3)
    peaks = np.concatenate([[30], 30 + np.cumsum(rng.integers(150, 260, size=25))])
    y = np.zeros(int(peaks[-1]) + 500, np.float32)
    cols, _ = segment_record(y, peaks, ["N"] * len(peaks), 200, "r")
    for row, i in zip(cols["time_feats"], range(1, len(peaks))):
        np.testing.assert_allclose(row, time_features(peaks, i, 256), rtol=1e-6)


def test_segment_record_skips_first_beat_and_rejected():
    peaks = np.array([300, 500, 700, 900, 1100])
    cols, dropped = segment_record(np.zeros(1400, np.float32), peaks, ["N", "V", "Q", "A", "F"], 200, "r")
    assert cols["labels"].tolist() == [1, 2, 3] and cols["r_index"].tolist() == [500, 900, 1100]
    assert dropped == 0


# ---------------------------------------------------------------- datasets


@pytest.fixture(scope="module")
def fixture_records(tmp_path_factory):
    root = tmp_path_factory.mktemp("fx")
    src, tgt = generate_fixtures(root, shift=0.5, seed=5, n_source=120, n_target=80, records_per_domain=2)
    return load_records(src), load_records(tgt)


def test_build_dataset_shared_length(fixture_records):
    src_recs, tgt_recs = fixture_records
    src, rr = build_dataset(src_recs, "source")
    tgt, rr_t = build_dataset(tgt_recs, "target", rr_mean=rr, keep_labels=False)
    assert rr_t == rr and src.length == tgt.length == 2 * (rr // 2) + 1
    assert src.labeled and not tgt.labeled
    assert (src.time_feats > 0).all()


def test_build_dataset_is_deterministic(fixture_records):
    a, _ = build_dataset(fixture_records[0], "source")
    b, _ = build_dataset(fixture_records[0], "source")
    assert a.waveforms.tobytes() == b.waveforms.tobytes()


def test_channel_selection(fixture_records):
    rec = fixture_records[0][0]
    a, _ = build_dataset([rec], "source", PrepConfig(channel="II"))
    b, _ = build_dataset([rec], "source", PrepConfig(channel="V5"))
    assert not np.array_equal(a.waveforms, b.waveforms)
    with pytest.raises(KeyError, match="no channel"):
        build_dataset([rec], "source", PrepConfig(channel="MLII"))


def test_cache_roundtrip(tmp_path, fixture_records):
    ds, rr = build_dataset(fixture_records[1], "target", keep_labels=False)
    write_cache(tmp_path / "t.seg", ds, rr)
    back, header = read_cache(tmp_path / "t.seg")
    assert header["rr_mean"] == rr and header["L"] == ds.length and header["count"] == len(ds)
    np.testing.assert_array_equal(back.waveforms, ds.waveforms)
    np.testing.assert_array_equal(back.labels, ds.labels)
    raw = (tmp_path / "t.seg").read_bytes()
    (tmp_path / "bad.seg").write_bytes(raw[:-3])
    with pytest.raises(ValueError, match="expected"):
        read_cache(tmp_path / "bad.seg")


def test_annotation_without_beat_symbol_is_ignored():
    x = np.sin(np.arange(3000) / 20).astype(np.float32)
    rec = EcgRecord("r", {"II": x}, 256, [(500, "N"), (600, "+"), (700, "N"), (900, "V")])
    ds, rr = build_dataset([rec], "source")
    assert rr == 200 and ds.labels.tolist() == [0, 1]
