"""Run configuration: one flat ``key = value`` file covering every tunable.

Lines are ``key = value``; blank lines and lines starting with ``#`` are
ignored. Keys are the field names of ``RunConfig``; unknown keys and values
that do not parse as the field's type are rejected. Tuples are written
comma-separated (``hidden_sizes = 32,16``), booleans as ``true``/``false``.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, fields, replace
from pathlib import Path

from .deepnet import TrainConfig
from .dimred import DimredConfig
from .evaluation import BaselineConfig
from .pipeline import PipelineConfig, echo_fields
from .signal_data import SyntheticGenConfig, WindowSpec


class ConfigError(ValueError):
    pass


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0

    # synthetic generator
    n_interictal: int = 12
    n_preictal: int = 12
    channels: int = 15
    duration_s: float = 5.0
    sampling_rate_hz: float = 256.0
    base_band_hz: tuple[float, ...] = (4.0, 12.0)
    preictal_band_hz: tuple[float, ...] = (18.0, 30.0)
    preictal_power_gain: float = 3.0
    noise_std: float = 1.0
    patient_id: str = "synthetic"

    # preprocessing
    downsample_factor: int = 2
    window_len: int = 10
    window_hop: int = 10

    # dimension reduction
    dimred_p: int = 5
    dimred_k: int = 0  # 0 means K = P
    dimred_m: int = 5
    dimred_sweeps: int = 200
    dimred_burn_in: int = 50
    dimred_alpha: float = 1.0
    dimred_sigma_e2: float = 0.01
    dimred_fit_samples: int = 4000

    # network
    hidden_sizes: tuple[int, ...] = (32, 16)
    l2_coeff: float = 1e-4
    sparsity_coeff: float = 3.0
    sparsity_target: float = 0.05
    batch_size: int = 32
    pretrain_epochs: int = 200
    pretrain_learning_rate: float = 0.1
    pretrain_max_windows: int = 2048  # 0 means all windows
    softmax_epochs: int = 200
    softmax_learning_rate: float = 0.1
    finetune_epochs: int = 100
    finetune_learning_rate: float = 0.1

    # evaluation
    baseline: bool = True
    baseline_window_len: int = 64
    baseline_window_hop: int = 64

    # ---- conversions ----

    def gen_config(self) -> SyntheticGenConfig:
        cfg = SyntheticGenConfig(
            seed=self.seed, n_interictal=self.n_interictal, n_preictal=self.n_preictal, channels=self.channels,
            duration_s=self.duration_s, sampling_rate_hz=self.sampling_rate_hz,
            base_band_hz=_band(self.base_band_hz, "base_band_hz"),
            preictal_band_hz=_band(self.preictal_band_hz, "preictal_band_hz"),
            preictal_power_gain=self.preictal_power_gain, noise_std=self.noise_std, patient_id=self.patient_id,
        )
        cfg.validate()
        return cfg

    def _train(self, epochs: int, lr: float) -> TrainConfig:
        cfg = TrainConfig(epochs=epochs, learning_rate=lr, l2_coeff=self.l2_coeff, sparsity_coeff=self.sparsity_coeff,
                          sparsity_target=self.sparsity_target, seed=self.seed, batch_size=self.batch_size)
        cfg.validate()
        return cfg

    def pipeline_config(self) -> PipelineConfig:
        """Unseeded pipeline settings; callers apply ``with_seed``."""
        dim = DimredConfig(
            p=self.dimred_p, k=self.dimred_k or None, m=self.dimred_m, sweeps=self.dimred_sweeps,
            burn_in=self.dimred_burn_in, alpha=self.dimred_alpha, sigma_e2=self.dimred_sigma_e2,
            fit_samples=self.dimred_fit_samples,
        )
        dim.iica().validate()
        if not 1 <= dim.m <= dim.k_trunc <= dim.p:
            raise ConfigError(f"need 1 <= dimred_m <= K <= dimred_p, got {dim.m}, {dim.k_trunc}, {dim.p}")
        if self.downsample_factor < 1:
            raise ConfigError("downsample_factor must be >= 1")
        if self.window_len < 1 or self.window_hop < 1:
            raise ConfigError("window_len and window_hop must be >= 1")
        if self.pretrain_max_windows < 0:
            raise ConfigError("pretrain_max_windows must be >= 0")
        sizes = (dim.m * self.window_len,) + self.hidden_sizes
        if not self.hidden_sizes or any(b >= a or b < 1 for a, b in zip(sizes, sizes[1:])):
            raise ConfigError(f"hidden_sizes must be nonempty and strictly decrease from the input size {sizes[0]}")
        return PipelineConfig(
            downsample_factor=self.downsample_factor,
            window=WindowSpec(self.window_len, self.window_hop),
            dimred=dim,
            hidden_sizes=self.hidden_sizes,
            pretrain=self._train(self.pretrain_epochs, self.pretrain_learning_rate),
            softmax=self._train(self.softmax_epochs, self.softmax_learning_rate),
            finetune=self._train(self.finetune_epochs, self.finetune_learning_rate),
            pretrain_windows=self.pretrain_max_windows or None,
        )

    def baseline_config(self) -> BaselineConfig:
        if self.baseline_window_len < 2 or self.baseline_window_hop < 1:
            raise ConfigError("baseline windows need at least two samples and a positive hop")
        return BaselineConfig(
            downsample_factor=self.downsample_factor,
            window=WindowSpec(self.baseline_window_len, self.baseline_window_hop),
            softmax=self._train(self.softmax_epochs, self.softmax_learning_rate),
        )

    def validate(self) -> "RunConfig":
        self.gen_config()
        self.pipeline_config()
        self.baseline_config()
        return self

    # ---- text form ----

    def to_text(self) -> str:
        return "".join(f"{k} = {_format(v)}\n" for k, v in asdict(self).items())

    @classmethod
    def from_text(cls, text: str, base: "RunConfig | None" = None) -> "RunConfig":
        return (base or cls()).with_overrides(_parse_lines(text))

    @classmethod
    def load(cls, path, base: "RunConfig | None" = None) -> "RunConfig":
        return cls.from_text(Path(path).read_text(encoding="utf-8"), base)

    def save(self, path) -> None:
        Path(path).write_text(self.to_text(), encoding="utf-8")

    def with_overrides(self, values: dict[str, str]) -> "RunConfig":
        """Apply string-valued overrides, type-checked against the defaults."""
        defaults = {f.name: f.default for f in fields(self)}
        parsed = {}
        for key, raw in values.items():
            if key not in defaults:
                raise ConfigError(f"unknown config key {key!r}")
            parsed[key] = _parse_value(key, raw, defaults[key])
        return replace(self, **parsed)


def _band(value, name):
    if len(value) != 2:
        raise ConfigError(f"{name} needs exactly two values")
    return (float(value[0]), float(value[1]))


def _format(value) -> str:
    if isinstance(value, bool):
        return "true" if value else "false"
    if isinstance(value, tuple):
        return ",".join(_format(v) for v in value)
    if isinstance(value, float):
        return repr(value)
    return str(value)


def _parse_value(key: str, raw: str, default):
    raw = raw.strip()
    try:
        if isinstance(default, bool):
            lowered = raw.lower()
            if lowered not in ("true", "false"):
                raise ValueError(raw)
            return lowered == "true"
        if isinstance(default, tuple):
            kind = type(default[0])
            return tuple(kind(part) for part in raw.split(",")) if raw else ()
        if isinstance(default, int):
            return int(raw)
        if isinstance(default, float):
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"bad value for {key}: {raw!r}") from None


def _parse_lines(text: str) -> dict[str, str]:
    for lineno, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if stripped and not stripped.startswith("#") and "=" not in stripped:
            raise ConfigError(f"line {lineno}: expected key = value")
    return echo_fields(text)
