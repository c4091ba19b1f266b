"""Leave-one-out evaluation, confusion matrices and the handcrafted-feature baseline."""

from __future__ import annotations

import logging
from dataclasses import dataclass, field, replace
from fractions import Fraction

import numpy as np

from . import deepnet
from .deepnet import TrainConfig
from .pipeline import PipelineConfig, fit_model, predict_segment, preprocess, vote
from .signal_data import EegSegment, Label, WindowSpec

log = logging.getLogger(__name__)

LOG_FLOOR = 1e-12
BAND_EDGES_HZ = (0.0, 4.0, 8.0, 12.0, 30.0)  # last band runs to Nyquist
BAND_NAMES = ("delta", "theta", "alpha", "beta", "gamma")
METRIC_NAMES = ("accuracy", "precision", "sensitivity", "specificity", "fpr", "fnr")
NA = "n/a"


# --------------------------------------------------------------------------
# Confusion matrix and metrics
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class ConfusionMatrix:
    """Two-class counts with preictal as the positive class."""

    tp: int = 0
    fp: int = 0
    fn: int = 0
    tn: int = 0

    def __post_init__(self):
        if min(self.tp, self.fp, self.fn, self.tn) < 0:
            raise ValueError("confusion counts must be nonnegative")

    @property
    def total(self) -> int:
        return self.tp + self.fp + self.fn + self.tn

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.tp + other.tp, self.fp + other.fp, self.fn + other.fn, self.tn + other.tn)

    def table(self) -> str:
        """Render with target rows and output columns, interictal first."""
        rows = [
            ("", "Output interictal", "Output preictal", "Total"),
            ("Target interictal", self.tn, self.fp, self.tn + self.fp),
            ("Target preictal", self.fn, self.tp, self.fn + self.tp),
            ("Total", self.tn + self.fn, self.fp + self.tp, self.total),
        ]
        return "\n".join(f"{r[0]:<18}| {r[1]!s:>17} | {r[2]!s:>15} | {r[3]!s:>5}" for r in rows)


def confusion(pred, truth) -> ConfusionMatrix:
    pred, truth = list(pred), list(truth)
    if len(pred) != len(truth):
        raise ValueError(f"{len(pred)} predictions for {len(truth)} targets")
    counts = {"tp": 0, "fp": 0, "fn": 0, "tn": 0}
    for p, t in zip(pred, truth):
        p_pos, t_pos = Label(p) is Label.PREICTAL, Label(t) is Label.PREICTAL
        key = ("t" if p_pos == t_pos else "f") + ("p" if p_pos else "n")
        counts[key] += 1
    return ConfusionMatrix(**counts)


def _ratios(cm: ConfusionMatrix) -> dict[str, Fraction | None]:
    def ratio(num, den):
        return Fraction(num, den) if den > 0 else None

    return {
        "accuracy": ratio(cm.tp + cm.tn, cm.total),
        "precision": ratio(cm.tp, cm.tp + cm.fp),
        "sensitivity": ratio(cm.tp, cm.tp + cm.fn),
        "specificity": ratio(cm.tn, cm.tn + cm.fp),
        "fpr": ratio(cm.fp, cm.fp + cm.tn),
        "fnr": ratio(cm.fn, cm.fn + cm.tp),
    }


@dataclass(frozen=True)
class MetricsReport:
    """Derived metrics; ``None`` marks a metric whose denominator is zero."""

    accuracy: float | None
    precision: float | None
    sensitivity: float | None
    specificity: float | None
    fpr: float | None
    fnr: float | None
    cm: ConfusionMatrix = field(default_factory=ConfusionMatrix)

    def as_dict(self) -> dict[str, float | None]:
        return {name: getattr(self, name) for name in METRIC_NAMES}

    def truncated(self, digits: int = 2) -> dict[str, float | None]:
        """Metrics cut (not rounded) to ``digits`` decimals, computed exactly from the counts."""
        scale = 10**digits
        out = {}
        for name, value in _ratios(self.cm).items():
            out[name] = None if value is None else (value.numerator * scale // value.denominator) / scale
        return out

    def lines(self, digits: int = 2) -> list[str]:
        shown = self.truncated(digits)
        return [f"{name:<12} {fmt(shown[name], digits)}" for name in METRIC_NAMES]


def fmt(value, digits: int = 4) -> str:
    return NA if value is None else f"{value:.{digits}f}"


def metrics(cm: ConfusionMatrix) -> MetricsReport:
    r = _ratios(cm)
    sens = None if r["sensitivity"] is None else float(r["sensitivity"])
    spec = None if r["specificity"] is None else float(r["specificity"])
    return MetricsReport(
        accuracy=None if r["accuracy"] is None else float(r["accuracy"]),
        precision=None if r["precision"] is None else float(r["precision"]),
        sensitivity=sens,
        specificity=spec,
        fpr=None if spec is None else 1.0 - spec,
        fnr=None if sens is None else 1.0 - sens,
        cm=cm,
    )


# --------------------------------------------------------------------------
# Leave-one-out
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class Fold:
    train: tuple[int, ...]
    test: int


def loocv_folds(n: int) -> list[Fold]:
    if n < 2:
        raise ValueError("leave-one-out needs at least two segments")
    return [Fold(tuple(j for j in range(n) if j != i), i) for i in range(n)]


@dataclass(frozen=True)
class FoldRecord:
    fold: int
    segment_id: str
    truth: Label
    predicted: Label
    probability: float
    preictal_votes: int
    n_windows: int


@dataclass
class LoocvResult:
    cm: ConfusionMatrix
    report: MetricsReport
    folds: list[FoldRecord]


def _require_two_classes(segments) -> None:
    labels = {s.label for s in segments}
    if not {Label.PREICTAL, Label.INTERICTAL} <= labels:
        raise ValueError("dataset must contain both preictal and interictal segments")


def _summarize(records: list[FoldRecord]) -> LoocvResult:
    cm = confusion([r.predicted for r in records], [r.truth for r in records])
    return LoocvResult(cm, metrics(cm), records)


def run_loocv(segments, cfg: PipelineConfig = PipelineConfig(), seed: int = 0) -> LoocvResult:
    """Hold out each segment in turn; fold i reseeds every stage with ``seed ^ i``."""
    segments = list(segments)
    _require_two_classes(segments)
    pre = preprocess(segments, cfg.downsample_factor)
    records = []
    for fold in loocv_folds(len(pre)):
        model = fit_model([pre[j] for j in fold.train], cfg.with_seed(seed ^ fold.test), preprocessed=True)
        held = pre[fold.test]
        pred = predict_segment(model, held, preprocessed=True)
        records.append(FoldRecord(fold.test, held.segment_id, held.label, pred.label, pred.probability,
                                  pred.preictal_votes, pred.n_windows))
        log.info("fold %d/%d %s truth=%s pred=%s (%d/%d preictal windows)", fold.test + 1, len(pre),
                 held.segment_id, held.label.name, pred.label.name, pred.preictal_votes, pred.n_windows)
    return _summarize(records)


# --------------------------------------------------------------------------
# Handcrafted-feature baseline
# --------------------------------------------------------------------------

def feature_names(channels: int) -> list[str]:
    names = []
    for c in range(channels):
        names += [f"ch{c}_power_{b}" for b in BAND_NAMES]
        names += [f"ch{c}_energy_mean", f"ch{c}_energy_std"]
        names += [f"ch{c}_log_power_{b}" for b in BAND_NAMES]
    names += [f"psd_corr_{i}_{j}" for i in range(channels) for j in range(i + 1, channels)]
    return names


def band_masks(n: int, rate: float) -> np.ndarray:
    freqs = np.fft.rfftfreq(n, d=1.0 / rate)
    edges = list(BAND_EDGES_HZ) + [np.inf]
    return np.stack([(freqs >= lo) & (freqs < hi) for lo, hi in zip(edges[:-1], edges[1:])])


def baseline_features(blocks, sampling_rate_hz: float) -> np.ndarray:
    """Handcrafted features for windows shaped (n_windows, C, L).

    Per channel, in order: periodogram power in the delta, theta, alpha, beta
    and gamma bands (0-4, 4-8, 8-12, 12-30 Hz and 30 Hz to Nyquist), mean and
    standard deviation of the instantaneous energy x^2, and the natural log of
    each band power floored at 1e-12. Then the Pearson correlation between the
    periodograms of every channel pair (i < j); a flat periodogram correlates 0.
    See ``feature_names``.
    """
    x = np.asarray(blocks, dtype=np.float64)
    if x.ndim == 2:
        x = x[None]
    if x.ndim != 3 or x.shape[0] < 1:
        raise ValueError("expected windows shaped (n_windows, C, L)")
    n_win, c, length = x.shape
    if length < 2:
        raise ValueError("windows must hold at least two samples")
    psd = np.abs(np.fft.rfft(x, axis=2)) ** 2 / length
    masks = band_masks(length, sampling_rate_hz).astype(np.float64)
    power = psd @ masks.T                                   # n_win x C x 5
    energy = x * x
    per_channel = np.concatenate(
        [power, energy.mean(axis=2, keepdims=True), energy.std(axis=2, keepdims=True),
         np.log(np.maximum(power, LOG_FLOOR))],
        axis=2,
    ).reshape(n_win, -1)

    centered = psd - psd.mean(axis=2, keepdims=True)
    norms = np.sqrt(np.sum(centered * centered, axis=2))
    safe = np.where(norms > 0, norms, 1.0)
    unit = centered / safe[:, :, None]
    corr = np.einsum("wcf,wdf->wcd", unit, unit)
    iu = np.triu_indices(c, k=1)
    return np.concatenate([per_channel, corr[:, iu[0], iu[1]]], axis=1)


def segment_blocks(segment: EegSegment, window: WindowSpec) -> np.ndarray:
    window.validate(segment.samples_per_channel)
    n = window.count(segment.samples_per_channel)
    starts = np.arange(n) * window.hop_samples
    idx = starts[:, None] + np.arange(window.window_len_samples)
    return np.asarray(segment.data, dtype=np.float64)[:, idx].transpose(1, 0, 2)


@dataclass(frozen=True)
class BaselineConfig:
    downsample_factor: int = 2
    window: WindowSpec = WindowSpec(64, 64)
    softmax: TrainConfig = TrainConfig(epochs=200, learning_rate=0.1)


def run_baseline(segments, cfg: BaselineConfig = BaselineConfig(), seed: int = 0) -> LoocvResult:
    """Same leave-one-out protocol with handcrafted features and the softmax head alone."""
    segments = list(segments)
    _require_two_classes(segments)
    pre = preprocess(segments, cfg.downsample_factor)
    feats = [baseline_features(segment_blocks(s, cfg.window), s.sampling_rate_hz) for s in pre]
    records = []
    for fold in loocv_folds(len(pre)):
        train_x = np.vstack([feats[j] for j in fold.train])
        train_y = np.concatenate([np.full(len(feats[j]), int(pre[j].label)) for j in fold.train])
        mu = train_x.mean(axis=0)
        sd = train_x.std(axis=0)
        sd = np.where(sd > 0, sd, 1.0)
        head = deepnet.train_softmax(((train_x - mu) / sd).T, train_y, replace(cfg.softmax, seed=seed ^ fold.test))
        probs = deepnet.softmax_predict(head, ((feats[fold.test] - mu) / sd).T)
        pred = vote(probs)
        held = pre[fold.test]
        records.append(FoldRecord(fold.test, held.segment_id, held.label, pred.label, pred.probability,
                                  pred.preictal_votes, pred.n_windows))
    return _summarize(records)


def report_text(title: str, result: LoocvResult) -> str:
    lines = [title, "", result.cm.table(), ""]
    lines += result.report.lines()
    return "\n".join(lines)


def report_kv(prefix: str, result: LoocvResult) -> list[str]:
    out = [f"{prefix}.{k}={getattr(result.cm, k)}" for k in ("tp", "fp", "fn", "tn")]
    out += [f"{prefix}.{name}={NA if value is None else repr(value)}" for name, value in result.report.as_dict().items()]
    return out
