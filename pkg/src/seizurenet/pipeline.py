"""Segment-level training and inference shared by evaluation, the server and the CLI."""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

from . import deepnet, dimred
from .deepnet import StackedNetwork, TrainConfig
from .dimred import DimredConfig, DimredPipeline
from .signal_data import EegSegment, Label, WindowSpec, downsample, windowize


@dataclass(frozen=True)
class PipelineConfig:
    downsample_factor: int = 2
    window: WindowSpec = WindowSpec(10, 10)
    dimred: DimredConfig = DimredConfig(p=5, m=5)
    hidden_sizes: tuple[int, ...] = (32, 16)
    pretrain: TrainConfig = TrainConfig(epochs=200, learning_rate=0.1)
    softmax: TrainConfig = TrainConfig(epochs=200, learning_rate=0.1)
    finetune: TrainConfig = TrainConfig(epochs=100, learning_rate=0.1)
    pretrain_windows: int = 2048

    def with_seed(self, seed: int) -> "PipelineConfig":
        """Copy with every stochastic stage reseeded from ``seed``."""
        return replace(
            self,
            dimred=replace(self.dimred, seed=seed),
            pretrain=replace(self.pretrain, seed=seed + 100),
            softmax=replace(self.softmax, seed=seed + 200),
            finetune=replace(self.finetune, seed=seed + 300),
        )


@dataclass(frozen=True, eq=False)
class TrainedModel:
    dimred: DimredPipeline
    net: StackedNetwork
    downsample_factor: int
    window: WindowSpec


@dataclass(frozen=True)
class SegmentPrediction:
    label: Label
    probability: float
    n_windows: int
    preictal_votes: int


def preprocess(segments, factor: int) -> list[EegSegment]:
    return [downsample(s, factor) for s in segments]


def segment_windows(pipe: DimredPipeline, segment: EegSegment, window: WindowSpec) -> np.ndarray:
    """Reduce the channels of one (already downsampled) segment and cut windows, one per row."""
    return windowize(dimred.transform(pipe, segment.data), window)


def fit_model(segments, cfg: PipelineConfig, preprocessed: bool = False) -> TrainedModel:
    """Fit dimred on all training samples, then the stacked network on their windows."""
    segments = list(segments) if preprocessed else preprocess(segments, cfg.downsample_factor)
    labels = {s.label for s in segments}
    if not {Label.PREICTAL, Label.INTERICTAL} <= labels:
        raise ValueError("training set must contain both preictal and interictal segments")
    pipe = dimred.fit_dimred(np.hstack([s.data for s in segments]), cfg.dimred)
    blocks, ys = [], []
    for seg in segments:
        w = segment_windows(pipe, seg, cfg.window)
        blocks.append(w)
        ys.append(np.full(len(w), int(seg.label)))
    x = np.vstack(blocks).T
    net = deepnet.train_network(x, np.concatenate(ys), cfg.hidden_sizes, cfg.pretrain, cfg.softmax, cfg.finetune,
                                  cfg.pretrain_windows)
    return TrainedModel(pipe, net, cfg.downsample_factor, cfg.window)


def echo_fields(text: str) -> dict[str, str]:
    """Parse ``key = value`` lines of a config echo; blank and ``#`` lines are skipped."""
    out = {}
    for line in text.splitlines():
        line = line.strip()
        if line and not line.startswith("#"):
            key, sep, value = line.partition("=")
            if sep:
                out[key.strip()] = value.strip()
    return out


def save_trained(model: TrainedModel, model_path, dimred_path, config_echo: str = "") -> None:
    """Persist both artifacts; the echo must carry the preprocessing keys read back by ``load_trained``."""
    required = {"downsample_factor": model.downsample_factor, "window_len": model.window.window_len_samples,
                "window_hop": model.window.hop_samples}
    present = echo_fields(config_echo)
    for key, value in required.items():
        if key in present and present[key] != str(value):
            raise ValueError(f"config echo says {key} = {present[key]}, model uses {value}")
    if config_echo and not config_echo.endswith("\n"):
        config_echo += "\n"
    config_echo += "".join(f"{k} = {v}\n" for k, v in required.items() if k not in present)
    dimred.save_pipeline(model.dimred, dimred_path)
    deepnet.save_network(replace(model.net, config_echo=config_echo), model_path)


def load_trained(model_path, dimred_path) -> TrainedModel:
    net = deepnet.load_network(model_path)
    pipe = dimred.load_pipeline(dimred_path)
    fields = echo_fields(net.config_echo)
    try:
        factor = int(fields["downsample_factor"])
        window = WindowSpec(int(fields["window_len"]), int(fields["window_hop"]))
    except (KeyError, ValueError) as exc:
        raise ValueError(f"model file lacks preprocessing settings in its config echo: {exc}") from None
    if pipe.m_out * window.window_len_samples != net.sizes[0]:
        raise ValueError(f"dimred emits {pipe.m_out} channels x {window.window_len_samples} samples, "
                         f"network expects {net.sizes[0]} inputs")
    return TrainedModel(pipe, net, factor, window)


def majority_vote(labels) -> Label:
    """Segment label from window labels; a tie goes to preictal."""
    labels = np.asarray([int(l) for l in labels])
    pre = int(np.sum(labels == Label.PREICTAL))
    return Label.PREICTAL if pre * 2 >= len(labels) else Label.INTERICTAL


def vote(probs: np.ndarray) -> SegmentPrediction:
    """Majority vote over a 2 x W matrix of window probabilities.

    The reported probability is the mean window probability of the winning class.
    """
    window_labels = np.argmax(probs, axis=0)
    label = majority_vote(window_labels)
    return SegmentPrediction(
        label=label,
        probability=float(probs[int(label)].mean()),
        n_windows=probs.shape[1],
        preictal_votes=int(np.sum(window_labels == Label.PREICTAL)),
    )


def predict_segment(model: TrainedModel, segment: EegSegment, preprocessed: bool = False) -> SegmentPrediction:
    if not preprocessed:
        segment = downsample(segment, model.downsample_factor)
    windows = segment_windows(model.dimred, segment, model.window)
    return vote(deepnet.predict_proba(model.net, windows.T))


def window_accuracy(model: TrainedModel, segments, preprocessed: bool = False) -> float:
    hits = total = 0
    for seg in segments:
        if not preprocessed:
            seg = downsample(seg, model.downsample_factor)
        w = segment_windows(model.dimred, seg, model.window)
        pred = np.argmax(deepnet.predict_proba(model.net, w.T), axis=0)
        hits += int(np.sum(pred == int(seg.label)))
        total += len(pred)
    return hits / total
