"""Dataclass configs and their ``key = value`` INI representation."""

from __future__ import annotations

import configparser
import dataclasses
import io
from dataclasses import dataclass, field
from typing import Optional

VARIANTS = ("cnn", "transformer")
CONDITIONINGS = ("concat", "cross-attn", "mul")
LOSS_KINDS = ("mse-full", "bce-rescaled", "bce-full")


@dataclass
class GenConfig:
    n_segments: int = 16
    tau: float = 1.0
    d_w: int = 16
    d_v: int = 16
    min_words: int = 3
    max_words: int = 8
    prototypes: int = 8
    sigma_in: float = 0.1
    sigma_q: float = 0.1
    # weight of a foreign prototype inside an out-of-moment segment
    distractor_mix: float = 0.5
    aligned: bool = True
    seed: int = 0
    prototype_seed: int = 1234
    n_train: int = 512
    n_val: int = 128
    n_test: int = 256

    def validate(self):
        if self.n_segments < 1 or self.tau <= 0:
            raise ValueError("need n_segments >= 1 and tau > 0")
        if self.prototypes < 2:
            raise ValueError("need at least two prototypes")
        if self.sigma_in < 0 or self.sigma_q < 0:
            raise ValueError("noise levels must be >= 0")
        if not 1 <= self.min_words <= self.max_words:
            raise ValueError("need 1 <= min_words <= max_words")
        if not 0 <= self.distractor_mix <= 1:
            raise ValueError("distractor_mix must lie in [0, 1]")


@dataclass
class ModelConfig:
    n_segments: int = 16
    scales: int = 2
    anchors: int = 8
    d_w: int = 16
    d_seg: int = 16
    d_v: int = 16
    d_s: int = 16
    d_f: int = 32
    feature_mode: str = "max-pool"
    lstm_layers: int = 3
    variant: str = "cnn"
    conditioning: str = "concat"
    blocks: int = 3
    kernel: int = 5
    channels: int = 32
    d_e: int = 64
    # hidden width of the stylization MLP; 0 means "same as the block width"
    mlp_hidden: int = 0
    heads: int = 1

    def validate(self):
        if self.variant not in VARIANTS:
            raise ValueError(f"unknown variant {self.variant!r}")
        if self.conditioning not in CONDITIONINGS:
            raise ValueError(f"unknown conditioning {self.conditioning!r}")
        if self.conditioning == "cross-attn" and self.variant != "transformer":
            raise ValueError("cross-attn conditioning requires the transformer variant")
        if self.blocks < 1:
            raise ValueError("need at least one block")
        if self.kernel % 2 != 1:
            raise ValueError("kernel size must be odd")
        if self.heads != 1:
            raise ValueError("only single-head attention is supported")


@dataclass
class DiffusionConfig:
    T: int = 100
    beta_start: float = 1e-4
    beta_end: float = 0.05
    eta: float = 0.0
    inference_steps: int = 25
    # map [0, 1] scores to [-1, 1] before diffusing
    rescale: bool = False


@dataclass
class TrainConfig:
    steps: int = 1000
    batch_size: int = 32
    lr: float = 1e-3
    optimizer: str = "adam"
    seed: int = 0
    loss: str = "mse-full"
    t_min: float = 0.5
    t_max: float = 1.0
    smoothing: int = 50

    def validate(self):
        if self.loss not in LOSS_KINDS:
            raise ValueError(f"unknown loss kind {self.loss!r}")
        if not 0 <= self.t_min < self.t_max <= 1:
            raise ValueError("need 0 <= t_min < t_max <= 1")
        if self.lr < 0:
            raise ValueError("learning rate must be >= 0")
        if self.optimizer not in ("adam", "sgd"):
            raise ValueError(f"unknown optimizer {self.optimizer!r}")


@dataclass
class EvalConfig:
    batch_size: int = 64
    seed: int = 0
    split: str = "test"


@dataclass
class ExperimentConfig:
    data: GenConfig = field(default_factory=GenConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    diffusion: DiffusionConfig = field(default_factory=DiffusionConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)

    def validate(self):
        self.data.validate()
        self.model.validate()
        self.train.validate()
        if self.diffusion.rescale and self.train.loss.startswith("bce"):
            raise ValueError("rescale to [-1, 1] is incompatible with BCE (sigmoid outputs live in [0, 1])")
        m, d = self.model, self.data
        if (m.n_segments, m.d_w, m.d_seg) != (d.n_segments, d.d_w, d.d_v):
            raise ValueError(
                f"model expects N={m.n_segments}, d_w={m.d_w}, d_seg={m.d_seg} but data has "
                f"N={d.n_segments}, d_w={d.d_w}, d_v={d.d_v}"
            )
        return self

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, obj: dict) -> "ExperimentConfig":
        cfg = cls()
        for section, values in obj.items():
            _apply(cfg, section, values)
        return cfg

    def to_ini(self) -> str:
        parser = _parser()
        for f in dataclasses.fields(self):
            sub = getattr(self, f.name)
            parser[f.name] = {k: _fmt(v) for k, v in dataclasses.asdict(sub).items()}
        buf = io.StringIO()
        parser.write(buf)
        return buf.getvalue()


def _parser() -> configparser.ConfigParser:
    parser = configparser.ConfigParser()
    parser.optionxform = str  # keep keys case-sensitive ("T" is a field name)
    return parser


def _fmt(v) -> str:
    if isinstance(v, bool):
        return "true" if v else "false"
    return str(v)


def _parse(raw: str, typ):
    if typ in (bool, "bool"):
        low = str(raw).strip().lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {raw!r}")
    if typ in (int, "int"):
        return int(raw)
    if typ in (float, "float"):
        return float(raw)
    return str(raw).strip()


def _apply(cfg: ExperimentConfig, section: str, values: dict) -> None:
    if not hasattr(cfg, section):
        raise ValueError(f"unknown config section [{section}]")
    sub = getattr(cfg, section)
    types = {f.name: f.type for f in dataclasses.fields(sub)}
    for key, raw in values.items():
        if key not in types:
            raise ValueError(f"unknown key {key!r} in section [{section}]")
        try:
            setattr(sub, key, _parse(raw, types[key]))
        except ValueError as err:
            raise ValueError(f"[{section}] {key}: {err}") from err


def load_config(path: Optional[str] = None, overrides: Optional[dict] = None) -> ExperimentConfig:
    cfg = ExperimentConfig()
    if path is not None:
        parser = _parser()
        with open(path) as fh:
            parser.read_file(fh)
        for section in parser.sections():
            _apply(cfg, section, dict(parser[section]))
    for section, values in (overrides or {}).items():
        _apply(cfg, section, values)
    return cfg.validate()


# variants compared at an identical training budget; overrides on top of the defaults
ABLATIONS = {
    "cnn+concat+mse": {},
    "cnn+mul+mse": {"model": {"conditioning": "mul"}},
    "transformer+cross-attn+mse": {"model": {"variant": "transformer", "conditioning": "cross-attn"}},
    "cnn+concat+bce-rescaled": {"train": {"loss": "bce-rescaled"}},
}
