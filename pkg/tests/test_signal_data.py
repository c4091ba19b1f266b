import struct

import numpy as np
import pytest
from hypothesis import given, strategies as st
from hypothesis.extra.numpy import arrays

from seizurenet.signal_data import (
    DimensionMismatchError, EegSegment, Label, MalformedHeaderError, SegmentFormatError, SyntheticGenConfig,
    TruncatedPayloadError, WindowSpec, downsample, generate_synthetic_dataset, load_segment, read_dataset,
    save_segment, segment_from_bytes, segment_to_bytes, windowize, write_dataset,
)

from oracles import dft_power

ids = st.text(st.characters(codec="utf-8", exclude_categories=("Cs",)), max_size=20).filter(
    lambda s: len(s.encode("utf-8")) <= 255)


@st.composite
def segments(draw):
    c = draw(st.integers(1, 5))
    t = draw(st.integers(1, 40))
    data = draw(arrays(np.float32, (c, t), elements=st.floats(width=32, allow_nan=False)))
    rate = draw(st.floats(0.5, 1e5))
    return EegSegment(draw(ids), draw(ids), rate, data, draw(st.sampled_from(list(Label))))


def make(c=3, t=64, label=Label.PREICTAL, seed=0):
    rng = np.random.default_rng(seed)
    return EegSegment("p1", "s1", 256.0, rng.standard_normal((c, t)), label)


@given(segments())
def test_bytes_round_trip(seg):
    assert segment_from_bytes(segment_to_bytes(seg)) == seg


def test_header_layout_little_endian():
    seg = EegSegment("ab", "x", 128.0, np.array([[1.0, 2.0]], dtype=np.float32), Label.INTERICTAL)
    raw = segment_to_bytes(seg)
    expected = (b"EEGS" + struct.pack("<HB", 1, 1) + b"\x02ab" + b"\x01x" + struct.pack("<HQd", 1, 2, 128.0)
                + struct.pack("<2f", 1.0, 2.0))
    assert raw == expected


def test_file_round_trip(tmp_path):
    seg = make()
    save_segment(seg, tmp_path / "a.eegs")
    assert load_segment(tmp_path / "a.eegs") == seg


def test_missing_file(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_segment(tmp_path / "nope.eegs")


def test_empty_path():
    with pytest.raises(ValueError):
        save_segment(make(), "")


def test_bad_magic():
    raw = bytearray(segment_to_bytes(make()))
    raw[:4] = b"XXXX"
    with pytest.raises(MalformedHeaderError):
        segment_from_bytes(bytes(raw))


def test_bad_version_and_label():
    raw = bytearray(segment_to_bytes(make()))
    raw[4:6] = struct.pack("<H", 2)
    with pytest.raises(MalformedHeaderError):
        segment_from_bytes(bytes(raw))
    raw = bytearray(segment_to_bytes(make()))
    raw[6] = 9
    with pytest.raises(MalformedHeaderError):
        segment_from_bytes(bytes(raw))


def test_truncated_and_excess_payload_are_distinct():
    raw = segment_to_bytes(make())
    with pytest.raises(TruncatedPayloadError):
        segment_from_bytes(raw[:-1])
    with pytest.raises(DimensionMismatchError):
        segment_from_bytes(raw + b"\0\0\0\0")
    with pytest.raises(MalformedHeaderError):
        segment_from_bytes(raw[:10])
    assert issubclass(TruncatedPayloadError, SegmentFormatError)


def test_data_is_read_only():
    seg = make()
    with pytest.raises(ValueError):
        seg.data[0, 0] = 1.0


def test_generator_counts_and_determinism():
    cfg = SyntheticGenConfig(seed=3, n_interictal=2, n_preictal=3, duration_s=1.0)
    a = generate_synthetic_dataset(cfg)
    b = generate_synthetic_dataset(cfg)
    assert [s.label for s in a] == [Label.INTERICTAL] * 2 + [Label.PREICTAL] * 3
    assert all(s.data.shape == (15, 256) for s in a)
    assert [segment_to_bytes(s) for s in a] == [segment_to_bytes(s) for s in b]
    other = generate_synthetic_dataset(SyntheticGenConfig(seed=4, n_interictal=2, n_preictal=3, duration_s=1.0))
    assert segment_to_bytes(a[0]) != segment_to_bytes(other[0])


def test_generator_empty():
    assert generate_synthetic_dataset(SyntheticGenConfig(n_interictal=0, n_preictal=0)) == []


def test_generator_rejects_bad_config():
    with pytest.raises(ValueError):
        generate_synthetic_dataset(SyntheticGenConfig(preictal_band_hz=(18.0, 200.0)))
    with pytest.raises(ValueError):
        generate_synthetic_dataset(SyntheticGenConfig(n_preictal=-1))


def test_preictal_power_excess_matches_gain():
    # Per-channel power in the preictal band, averaged: interictal carries only
    # noise there, preictal adds the burst on top with average power = gain.
    cfg = SyntheticGenConfig(seed=1, n_interictal=6, n_preictal=6, duration_s=4.0)
    segs = generate_synthetic_dataset(cfg)
    lo, hi = cfg.preictal_band_hz

    def band_power(seg):
        x = seg.data.astype(np.float64)
        spec = np.abs(np.fft.rfft(x, axis=1)) ** 2
        f = np.fft.rfftfreq(x.shape[1], 1 / seg.sampling_rate_hz)
        # Parseval: mean-square power contributed by the band
        return np.mean(2 * spec[:, (f >= lo) & (f <= hi)].sum(axis=1) / x.shape[1] ** 2)

    inter = np.mean([band_power(s) for s in segs if s.label is Label.INTERICTAL])
    pre = np.mean([band_power(s) for s in segs if s.label is Label.PREICTAL])
    assert pre - inter == pytest.approx(cfg.preictal_power_gain, rel=0.05)


def test_band_limited_component_uses_fft_oracle():
    # rfft-based band power of a short window agrees with an explicit DFT sum
    rng = np.random.default_rng(0)
    x = rng.standard_normal(32)
    spec = np.abs(np.fft.rfft(x)) ** 2 / 32
    f = np.fft.rfftfreq(32, 1 / 64)
    assert spec[(f >= 4) & (f < 12)].sum() == pytest.approx(dft_power(x, 64, 4, 12), rel=1e-12)


def test_downsample_identity_and_errors():
    seg = make()
    assert downsample(seg, 1) is seg
    with pytest.raises(ValueError):
        downsample(seg, 0)
    with pytest.raises(ValueError):
        downsample(make(t=1), 2)


def test_downsample_preserves_low_frequency_sine():
    rate, n = 256.0, 512
    t = np.arange(n) / rate
    x = np.sin(2 * np.pi * 5.0 * t)
    seg = EegSegment("p", "s", rate, x[None, :], Label.UNLABELED)
    out = downsample(seg, 2)
    assert out.sampling_rate_hz == 128.0
    assert out.samples_per_channel == 256
    expected = np.sin(2 * np.pi * 5.0 * np.arange(256) / 128.0)
    assert np.max(np.abs(out.data[0, 20:-20] - expected[20:-20])) < 5e-3  # FIR passband ripple


def test_downsample_attenuates_above_new_nyquist():
    rate, n = 256.0, 1024
    x = np.sin(2 * np.pi * 100.0 * np.arange(n) / rate)
    out = downsample(EegSegment("p", "s", rate, x[None, :]), 2)
    assert np.sqrt(np.mean(out.data[0, 40:-40].astype(np.float64) ** 2)) < 0.02


@given(st.integers(1, 4), st.integers(1, 60), st.integers(1, 12), st.integers(1, 12))
def test_windowize_matches_slicing(m, t, length, hop):
    if hop > length or length > t:
        with pytest.raises(ValueError):
            windowize(np.zeros((m, t)), WindowSpec(length, hop))
        return
    x = np.arange(m * t, dtype=np.float64).reshape(m, t)
    out = windowize(x, WindowSpec(length, hop))
    starts = range(0, t - length + 1, hop)
    assert out.shape == (len(starts), m * length)
    for row, s in zip(out, starts):
        assert np.array_equal(row, x[:, s:s + length].reshape(-1))


def test_dataset_round_trip(tmp_path):
    segs = generate_synthetic_dataset(SyntheticGenConfig(n_interictal=1, n_preictal=2, duration_s=0.5))
    manifest = write_dataset(segs, tmp_path / "d")
    assert manifest.name == "manifest.tsv"
    assert len(manifest.read_text().splitlines()) == 4
    assert read_dataset(tmp_path / "d") == segs


def test_dataset_rejects_duplicate_ids(tmp_path):
    with pytest.raises(ValueError):
        write_dataset([make(), make()], tmp_path)


def test_dataset_missing_manifest(tmp_path):
    with pytest.raises(FileNotFoundError):
        read_dataset(tmp_path)


def test_ten_minute_clip_header(tmp_path):
    seg = EegSegment("p", "clip", 5000.0, np.zeros((15, 3_000_000), dtype=np.float32))
    save_segment(seg, tmp_path / "clip.eegs")
    back = load_segment(tmp_path / "clip.eegs")
    assert back.channels == 15 and back.duration_s == 600.0


def test_downsample_removes_aliased_tone():
    rate, n = 5000.0, 20_000
    x = np.sin(2 * np.pi * 400.0 * np.arange(n) / rate)
    out = downsample(EegSegment("p", "s", rate, x[None, :]), 10).data[0].astype(np.float64)
    # a surviving 400 Hz tone would fold to 100 Hz at the new 500 Hz rate
    core = out[100:-100]
    assert np.mean(core ** 2) < 0.01 * np.mean(x ** 2)
    spec_in = np.abs(np.fft.rfft(x)) ** 2
    spec_out = np.abs(np.fft.rfft(core)) ** 2
    assert spec_out.sum() / core.size ** 2 < 0.01 * spec_in.sum() / n ** 2


def test_generator_full_size_labels():
    segs = generate_synthetic_dataset(SyntheticGenConfig(n_interictal=60, n_preictal=60, duration_s=0.1))
    assert len(segs) == 120
    assert sum(s.label is Label.PREICTAL for s in segs) == 60
    assert len({s.segment_id for s in segs}) == 120
