"""Run configuration: nested dataclasses loaded from JSON, with dotted ``key=value`` overrides.

Values marked ``# artifact`` are implementation choices; the rest follow
the reported training setup (lambda 1, lr 0.001, 50 epochs, p_mask 1/2,
binarisation threshold 0.5).
"""
from __future__ import annotations

import dataclasses
import json
import typing
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ConfigError
from .explain import ClassifierConfig
from .metrics import DEFAULT_THRESHOLDS
from .volume_data import SyntheticConfig


@dataclass
class DataSection:
    synthetic: SyntheticConfig = field(default_factory=SyntheticConfig)
    sparse_spacing: int = 4  # artifact
    gap_range: typing.Optional[list] = None  # artifact; [lo, hi] draws random gaps instead
    split_ratios: list = field(default_factory=lambda: [0.5, 0.2, 0.3])  # artifact
    balance_train: bool = True  # artifact


@dataclass
class DenoiserSection:
    base_channels: int = 16  # artifact
    channel_mult: list = field(default_factory=lambda: [1, 2, 2])  # artifact
    stem_stride: int = 2  # artifact
    groups: int = 8  # artifact


@dataclass
class DenoiserTrainSection:
    epochs: int = 12  # artifact
    batch_size: int = 32  # artifact
    lr: float = 1e-3
    ema_decay: float = 0.995  # artifact
    augment: bool = True  # artifact
    max_steps_per_epoch: typing.Optional[int] = 250  # artifact


@dataclass
class InterpSection:
    n_steps: int = 200  # artifact
    beta_min: float = 5e-4  # artifact
    beta_max: float = 0.1  # artifact
    schedule: str = "linear"  # artifact
    p_mask: float = 0.5
    pool_size: int = 64  # artifact; fully annotated masks used to train the interpolator
    min_gap: int = 2
    max_gap: int = 8  # artifact
    block_size: int = 2  # artifact
    model: DenoiserSection = field(default_factory=DenoiserSection)
    train: DenoiserTrainSection = field(default_factory=DenoiserTrainSection)


@dataclass
class UQModelSection:
    latent_dim: int = 32  # artifact
    hidden: int = 32  # artifact
    gap_scale: float = 8.0  # artifact
    variance_scale: float = 4.0  # artifact
    output_scale: float = 32.0  # artifact


@dataclass
class UQTrainSection:
    epochs: int = 60  # artifact
    batch_size: int = 8  # artifact
    lr: float = 1e-3
    kl_weight: float = 1e-2  # artifact
    augment: bool = True  # artifact


@dataclass
class UQSection:
    T_runs: int = 8  # artifact
    pool_size: int = 24  # artifact; sparsified masks whose MC variance trains the predictor
    gap_range: list = field(default_factory=lambda: [2, 8])  # artifact
    model: UQModelSection = field(default_factory=UQModelSection)
    train: UQTrainSection = field(default_factory=UQTrainSection)


@dataclass
class TargetSection:
    uncertainty: str = "predicted"  # "predicted" (fast surrogate) or "monte_carlo"


@dataclass
class TrainSection:
    modes: list = field(default_factory=lambda: ["baseline", "baseline_plus", "due"])
    n_seeds: int = 3  # artifact
    lam: float = 1.0
    lr: float = 1e-3
    epochs: int = 50
    batch_size: int = 4  # artifact
    loss: str = "l1"  # artifact
    weighting: str = "target"  # artifact
    arch: ClassifierConfig = field(default_factory=ClassifierConfig)


@dataclass
class EvalSection:
    split: str = "test"
    threshold: float = 0.5
    thresholds: list = field(default_factory=lambda: list(DEFAULT_THRESHOLDS))
    n_overlays: int = 4  # artifact


@dataclass
class SweepSection:
    lam: list = field(default_factory=lambda: [0.001, 0.01, 0.1, 1.0])
    train_size: list = field(default_factory=lambda: [20, 50, 100])


@dataclass
class RunConfig:
    seed: int = 0
    run_dir: typing.Optional[str] = None
    data: DataSection = field(default_factory=DataSection)
    interp: InterpSection = field(default_factory=InterpSection)
    uq: UQSection = field(default_factory=UQSection)
    targets: TargetSection = field(default_factory=TargetSection)
    train: TrainSection = field(default_factory=TrainSection)
    eval: EvalSection = field(default_factory=EvalSection)
    sweep: SweepSection = field(default_factory=SweepSection)

    def validate(self):
        from .explain import MODES, TrainConfig

        self.data.synthetic.validate()
        for m in self.train.modes:
            if m not in MODES:
                raise ConfigError(f"unknown training mode {m!r}")
        if self.train.n_seeds < 1:
            raise ConfigError("train.n_seeds must be >= 1")
        TrainConfig(lam=self.train.lam, epochs=self.train.epochs, loss=self.train.loss,
                    weighting=self.train.weighting)
        if self.targets.uncertainty not in ("predicted", "monte_carlo"):
            raise ConfigError("targets.uncertainty must be 'predicted' or 'monte_carlo'")
        if self.eval.split not in ("train", "val", "test"):
            raise ConfigError("eval.split must be train, val or test")
        if not 0 <= self.eval.threshold <= 1:
            raise ConfigError("eval.threshold must lie in [0, 1]")
        if self.uq.T_runs < 2:
            raise ConfigError("uq.T_runs must be >= 2")
        if self.interp.min_gap < 2 or self.interp.max_gap < self.interp.min_gap:
            raise ConfigError("need 2 <= interp.min_gap <= interp.max_gap")
        return self

    def to_dict(self):
        return asdict(self)

    def section_dict(self, *names):
        d = self.to_dict()
        return {n: d[n] for n in names}


def _hints(cls):
    return typing.get_type_hints(cls)


def from_dict(cls, data, where="config"):
    """Build dataclass ``cls`` from a mapping, rejecting unknown keys."""
    if not isinstance(data, dict):
        raise ConfigError(f"{where}: expected an object, got {type(data).__name__}")
    names = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(data) - set(names))
    if unknown:
        raise ConfigError(f"{where}: unknown key(s) {', '.join(unknown)}")
    hints = _hints(cls)
    kwargs = {}
    for key, value in data.items():
        tp = hints[key]
        if dataclasses.is_dataclass(tp):
            kwargs[key] = from_dict(tp, value, f"{where}.{key}")
        else:
            kwargs[key] = value
    try:
        return cls(**kwargs)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"{where}: {exc}") from exc


def parse_override(text):
    if "=" not in text:
        raise ConfigError(f"override {text!r} is not of the form key=value")
    key, raw = text.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip(), value


def apply_overrides(data, overrides):
    """Set dotted keys in a nested dict; unknown paths surface later as unknown keys."""
    for text in overrides:
        key, value = parse_override(text)
        parts = key.split(".")
        node = data
        for p in parts[:-1]:
            if not isinstance(node.get(p), dict):
                raise ConfigError(f"override {key!r}: {p!r} is not a section")
            node = node[p]
        node[parts[-1]] = value
    return data


def load_config(path=None, overrides=(), seed=None, run_dir=None):
    data = RunConfig().to_dict()
    if path is not None:
        try:
            with open(path, encoding="utf-8") as fh:
                user = json.load(fh)
        except FileNotFoundError as exc:
            raise ConfigError(f"config file {path} not found") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {path} is not valid JSON: {exc}") from exc
        from_dict(RunConfig, user)  # reject unknown keys before merging
        _merge(data, user)
    apply_overrides(data, overrides)
    if seed is not None:
        data["seed"] = int(seed)
    if run_dir is not None:
        data["run_dir"] = str(run_dir)
    return from_dict(RunConfig, data).validate()


def _merge(base, user):
    for k, v in user.items():
        if isinstance(v, dict) and isinstance(base.get(k), dict):
            _merge(base[k], v)
        else:
            base[k] = v


def save_config(path, config):
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(config.to_dict(), fh, indent=2, sort_keys=True)
