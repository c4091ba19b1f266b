"""EEG segment model, on-disk format, synthetic generator and preprocessing.

A segment file is little-endian binary::

    b"EEGS" | version u16 | label u8 | pid_len u8 | pid utf-8
            | sid_len u8 | sid utf-8 | channels u16 | samples u64
            | rate f64 | channels*samples float32, channel-major
"""

from __future__ import annotations

import enum
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy import signal as sps

MAGIC = b"EEGS"
VERSION = 1


class Label(enum.IntEnum):
    """Class coding shared by the file format and the classifier output."""

    PREICTAL = 0
    INTERICTAL = 1
    UNLABELED = 2


class SegmentFormatError(ValueError):
    """Base class for unreadable segment files."""


class MalformedHeaderError(SegmentFormatError):
    pass


class TruncatedPayloadError(SegmentFormatError):
    pass


class DimensionMismatchError(SegmentFormatError):
    pass


@dataclass(frozen=True, eq=False)
class EegSegment:
    patient_id: str
    segment_id: str
    sampling_rate_hz: float
    data: np.ndarray
    label: Label = Label.UNLABELED

    def __post_init__(self):
        data = np.array(self.data, dtype=np.float32, order="C")
        if data.ndim != 2 or data.shape[0] < 1 or data.shape[1] < 1:
            raise ValueError(f"segment data must be a non-empty C x T matrix, got shape {data.shape}")
        if not self.sampling_rate_hz > 0:
            raise ValueError(f"sampling rate must be positive, got {self.sampling_rate_hz}")
        data.setflags(write=False)
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "label", Label(self.label))
        object.__setattr__(self, "sampling_rate_hz", float(self.sampling_rate_hz))

    @property
    def channels(self) -> int:
        return self.data.shape[0]

    @property
    def samples_per_channel(self) -> int:
        return self.data.shape[1]

    @property
    def duration_s(self) -> float:
        return self.samples_per_channel / self.sampling_rate_hz

    def __eq__(self, other):
        if not isinstance(other, EegSegment):
            return NotImplemented
        return (
            self.patient_id == other.patient_id
            and self.segment_id == other.segment_id
            and self.sampling_rate_hz == other.sampling_rate_hz
            and self.label == other.label
            and self.data.shape == other.data.shape
            and self.data.tobytes() == other.data.tobytes()
        )

    def __repr__(self):
        return (
            f"EegSegment({self.patient_id!r}, {self.segment_id!r}, {self.label.name}, "
            f"C={self.channels}, T={self.samples_per_channel}, rate={self.sampling_rate_hz:g} Hz)"
        )


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------

def _short_str(value: str, what: str) -> bytes:
    raw = value.encode("utf-8")
    if len(raw) > 255:
        raise ValueError(f"{what} longer than 255 bytes")
    return struct.pack("<B", len(raw)) + raw


def segment_to_bytes(segment: EegSegment) -> bytes:
    c, t = segment.data.shape
    if c > 0xFFFF:
        raise ValueError("too many channels for the segment format")
    parts = [
        MAGIC,
        struct.pack("<HB", VERSION, int(segment.label)),
        _short_str(segment.patient_id, "patient_id"),
        _short_str(segment.segment_id, "segment_id"),
        struct.pack("<HQd", c, t, segment.sampling_rate_hz),
        segment.data.astype("<f4", copy=False).tobytes(order="C"),
    ]
    return b"".join(parts)


def segment_from_bytes(buf: bytes) -> EegSegment:
    view = memoryview(buf)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(view):
            raise MalformedHeaderError(f"header ends after {len(view)} bytes")
        chunk = view[pos:pos + n]
        pos += n
        return chunk

    if bytes(take(4)) != MAGIC:
        raise MalformedHeaderError("bad magic, expected b'EEGS'")
    version, label = struct.unpack("<HB", take(3))
    if version != VERSION:
        raise MalformedHeaderError(f"unsupported segment format version {version}")
    try:
        label = Label(label)
    except ValueError:
        raise MalformedHeaderError(f"unknown label code {label}") from None
    try:
        pid = bytes(take(take(1)[0])).decode("utf-8")
        sid = bytes(take(take(1)[0])).decode("utf-8")
    except UnicodeDecodeError as exc:
        raise MalformedHeaderError(f"identifier is not valid UTF-8: {exc}") from None
    channels, samples, rate = struct.unpack("<HQd", take(18))
    if channels < 1 or samples < 1:
        raise MalformedHeaderError(f"declared dimensions {channels}x{samples} are empty")
    if not rate > 0:
        raise MalformedHeaderError(f"declared sampling rate {rate} is not positive")

    expected = channels * samples * 4
    payload = view[pos:]
    if len(payload) < expected:
        raise TruncatedPayloadError(
            f"payload holds {len(payload)} bytes, header declares {channels}x{samples} samples ({expected} bytes)"
        )
    if len(payload) > expected:
        raise DimensionMismatchError(
            f"payload holds {len(payload)} bytes, more than the declared {channels}x{samples} samples"
        )
    data = np.frombuffer(payload, dtype="<f4").reshape(channels, samples)
    return EegSegment(pid, sid, rate, data.astype(np.float32), label)


def save_segment(segment: EegSegment, path) -> None:
    if not str(path):
        raise ValueError("empty destination path")
    Path(path).write_bytes(segment_to_bytes(segment))


def load_segment(path) -> EegSegment:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"segment file not found: {path}")
    return segment_from_bytes(path.read_bytes())


# --------------------------------------------------------------------------
# Synthetic data
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class SyntheticGenConfig:
    """Recipe for a two-class synthetic dataset.

    Every channel carries its own unit-power oscillation in ``base_band_hz`` plus
    white noise. Preictal segments add one shared oscillation in
    ``preictal_band_hz`` projected onto the channels through a fixed spatial
    pattern, with average per-channel power ``preictal_power_gain``.
    """

    seed: int = 0
    n_interictal: int = 12
    n_preictal: int = 12
    channels: int = 15
    duration_s: float = 5.0
    sampling_rate_hz: float = 256.0
    base_band_hz: tuple[float, float] = (4.0, 12.0)
    preictal_band_hz: tuple[float, float] = (18.0, 30.0)
    preictal_power_gain: float = 3.0
    noise_std: float = 1.0
    patient_id: str = "synthetic"

    def validate(self) -> None:
        if not 0 <= self.seed < 2**64:
            raise ValueError("seed must fit in 64 unsigned bits")
        if self.n_interictal < 0 or self.n_preictal < 0:
            raise ValueError("segment counts must be >= 0")
        if self.channels < 1:
            raise ValueError("need at least one channel")
        if self.duration_s <= 0 or self.sampling_rate_hz <= 0:
            raise ValueError("duration and sampling rate must be positive")
        if round(self.duration_s * self.sampling_rate_hz) < 1:
            raise ValueError("segment would hold no samples")
        nyquist = self.sampling_rate_hz / 2
        for name in ("base_band_hz", "preictal_band_hz"):
            lo, hi = getattr(self, name)
            if not 0 <= lo < hi:
                raise ValueError(f"{name} must satisfy 0 <= low < high, got {(lo, hi)}")
            if hi >= nyquist:
                raise ValueError(f"{name} upper edge {hi} Hz is not below Nyquist ({nyquist} Hz)")
        if not self.preictal_power_gain > 1:
            raise ValueError("preictal_power_gain must exceed 1")
        if self.noise_std < 0:
            raise ValueError("noise_std must be nonnegative")


def band_limited_noise(rng: np.random.Generator, rows: int, n: int, band, rate: float) -> np.ndarray:
    """Gaussian noise restricted to ``band`` by FFT masking, unit RMS per row."""
    spectrum = np.fft.rfft(rng.standard_normal((rows, n)), axis=1)
    freqs = np.fft.rfftfreq(n, d=1.0 / rate)
    spectrum[:, (freqs < band[0]) | (freqs > band[1])] = 0
    out = np.fft.irfft(spectrum, n=n, axis=1)
    rms = np.sqrt(np.mean(out**2, axis=1, keepdims=True))
    return out / np.where(rms > 0, rms, 1.0)


def generate_synthetic_dataset(config: SyntheticGenConfig) -> list[EegSegment]:
    config.validate()
    rng = np.random.default_rng(config.seed)
    n = int(round(config.duration_s * config.sampling_rate_hz))
    c = config.channels
    pattern = rng.standard_normal(c)
    pattern /= np.sqrt(np.mean(pattern**2))

    plan = [(Label.INTERICTAL, i) for i in range(config.n_interictal)]
    plan += [(Label.PREICTAL, i) for i in range(config.n_preictal)]
    segments = []
    for label, idx in plan:
        x = band_limited_noise(rng, c, n, config.base_band_hz, config.sampling_rate_hz)
        if label is Label.PREICTAL:
            burst = band_limited_noise(rng, 1, n, config.preictal_band_hz, config.sampling_rate_hz)
            x = x + np.sqrt(config.preictal_power_gain) * pattern[:, None] * burst
        x = x + config.noise_std * rng.standard_normal((c, n))
        segments.append(
            EegSegment(
                config.patient_id,
                f"{label.name.lower()}_{idx:03d}",
                config.sampling_rate_hz,
                x.astype(np.float32),
                label,
            )
        )
    return segments


# --------------------------------------------------------------------------
# Preprocessing
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class WindowSpec:
    window_len_samples: int
    hop_samples: int

    def validate(self, n_samples: int | None = None) -> None:
        if not 0 < self.hop_samples <= self.window_len_samples:
            raise ValueError(f"need 0 < hop <= window, got hop={self.hop_samples} window={self.window_len_samples}")
        if n_samples is not None and self.window_len_samples > n_samples:
            raise ValueError(f"window of {self.window_len_samples} samples is longer than the signal ({n_samples})")

    def count(self, n_samples: int) -> int:
        return (n_samples - self.window_len_samples) // self.hop_samples + 1


def downsample(segment: EegSegment, factor: int) -> EegSegment:
    """Low-pass filter then decimate by an integer factor, dropping the tail."""
    if factor < 1:
        raise ValueError(f"downsample factor must be >= 1, got {factor}")
    if factor == 1:
        return segment
    t = (segment.samples_per_channel // factor) * factor
    if t == 0:
        raise ValueError(f"segment too short ({segment.samples_per_channel} samples) for factor {factor}")
    x = segment.data[:, :t].astype(np.float64)
    y = sps.decimate(x, factor, ftype="fir", axis=1, zero_phase=True)
    return EegSegment(
        segment.patient_id,
        segment.segment_id,
        segment.sampling_rate_hz / factor,
        y.astype(np.float32),
        segment.label,
    )


def windowize(channels, spec: WindowSpec) -> np.ndarray:
    """Cut an M x T matrix into flattened windows, one per row, channel-major."""
    channels = np.asarray(channels)
    if channels.ndim != 2:
        raise ValueError("expected an M x T matrix")
    spec.validate(channels.shape[1])
    views = sliding_window_view(channels, spec.window_len_samples, axis=1)[:, :: spec.hop_samples, :]
    # views: M x n_windows x L  ->  n_windows x (M*L)
    return np.ascontiguousarray(views.transpose(1, 0, 2).reshape(views.shape[1], -1))


# --------------------------------------------------------------------------
# Dataset directories
# --------------------------------------------------------------------------

MANIFEST = "manifest.tsv"
MANIFEST_COLUMNS = ("file", "segment_id", "patient_id", "label", "channels", "samples", "sampling_rate_hz")
SEGMENT_SUFFIX = ".eegs"


def write_dataset(segments, directory) -> Path:
    """Write each segment as ``<segment_id>.eegs`` plus a tab-separated manifest in ``directory``."""
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    rows = ["\t".join(MANIFEST_COLUMNS)]
    seen = set()
    for seg in segments:
        name = seg.segment_id + SEGMENT_SUFFIX
        if seg.segment_id in seen or "/" in seg.segment_id or not seg.segment_id:
            raise ValueError(f"segment id {seg.segment_id!r} is empty, repeated or not a plain file name")
        seen.add(seg.segment_id)
        save_segment(seg, directory / name)
        rows.append("\t".join([name, seg.segment_id, seg.patient_id, seg.label.name.lower(), str(seg.channels),
                               str(seg.samples_per_channel), repr(seg.sampling_rate_hz)]))
    manifest = directory / MANIFEST
    manifest.write_text("\n".join(rows) + "\n", encoding="utf-8")
    return manifest


def read_dataset(directory) -> list[EegSegment]:
    """Load the segments listed in a dataset manifest, in manifest order."""
    directory = Path(directory)
    manifest = directory / MANIFEST
    if not manifest.is_file():
        raise FileNotFoundError(f"no {MANIFEST} in {directory}")
    lines = manifest.read_text(encoding="utf-8").splitlines()
    if not lines or tuple(lines[0].split("\t")) != MANIFEST_COLUMNS:
        raise SegmentFormatError(f"{manifest}: unexpected header")
    out = []
    for lineno, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        cols = line.split("\t")
        if len(cols) != len(MANIFEST_COLUMNS):
            raise SegmentFormatError(f"{manifest}:{lineno}: expected {len(MANIFEST_COLUMNS)} columns")
        seg = load_segment(directory / cols[0])
        if seg.segment_id != cols[1] or seg.label.name.lower() != cols[3]:
            raise SegmentFormatError(f"{manifest}:{lineno}: entry disagrees with {cols[0]}")
        out.append(seg)
    return out
