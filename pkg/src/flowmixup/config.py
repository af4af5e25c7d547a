"""JSON run configuration. Unknown keys anywhere are rejected."""
import json
from dataclasses import asdict, dataclass, field, fields
from pathlib import Path

from .data import CorruptionSpec
from .errors import ConfigError
from .network import BlockSpec, NetworkPlan
from .training import TrainConfig


def _build(cls, d, section):
    if d is None:
        return cls()
    if not isinstance(d, dict):
        raise ConfigError(f"section {section!r} must be an object")
    names = {f.name for f in fields(cls)}
    unknown = set(d) - names
    if unknown:
        raise ConfigError(f"unknown keys in {section!r}: {sorted(unknown)}")
    try:
        return cls(**d)
    except TypeError as exc:
        raise ConfigError(f"section {section!r}: {exc}") from None


@dataclass
class GeneratorConfig:
    num_samples: int = 5000
    num_classes: int = 12
    length: int = 512
    channels: int = 2
    noise: float = 1.0
    crosstalk: float = 1.0
    signal: float = 1.0
    correlation_matrix: list = None
    marginals: list = None
    require_positive: bool = False


@dataclass
class DataConfig:
    path: str = None
    generator: dict = None
    split: list = field(default_factory=lambda: [0.7, 0.1, 0.2])

    def __post_init__(self):
        if self.generator is not None and not isinstance(self.generator, GeneratorConfig):
            self.generator = _build(GeneratorConfig, self.generator, "data.generator")

    def generator_config(self):
        return self.generator or GeneratorConfig()


@dataclass
class ModelConfig:
    architecture: str = "ecg_like"
    widths: list = field(default_factory=lambda: [8, 8, 16, 16, 16])
    strides: list = None
    blocks: list = None

    def __post_init__(self):
        if self.architecture not in ("ecg_like", "cxr_like", "custom"):
            raise ConfigError(f"unknown architecture {self.architecture!r}")
        if self.architecture == "custom" and not self.blocks:
            raise ConfigError("architecture 'custom' needs an explicit blocks list")


@dataclass
class RegularizerConfig:
    mode: str = "flow_mixup"
    alpha: float = 3.0
    op_forward: bool = True
    mix_points: list = None
    manifold_include_input: bool = False


@dataclass
class EvalConfig:
    checkpoint: str = None
    subset: str = "test"
    threshold: float = 0.5

    def __post_init__(self):
        if self.subset not in ("train", "valid", "test", "all"):
            raise ConfigError(f"eval.subset must be train/valid/test/all, got {self.subset!r}")


@dataclass
class DiagnoseConfig:
    checkpoints: list = None
    names: list = None
    k: int = 10
    max_samples: int = 1000
    subset: str = "train"


@dataclass
class CompareConfig:
    run_a: str = None
    run_b: str = None
    metric: str = "f1"
    exponent: float = 1.0

    def __post_init__(self):
        if self.metric not in ("f1", "auc"):
            raise ConfigError("compare.metric must be 'f1' or 'auc'")


@dataclass
class RunConfig:
    seed: int = 0
    out: str = "run"
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)
    train: TrainConfig = field(default_factory=TrainConfig)
    regularizer: RegularizerConfig = field(default_factory=RegularizerConfig)
    corruption: dict = field(default_factory=lambda: {"rate": 0.0, "scheme": "per_sample_resample"})
    eval: EvalConfig = field(default_factory=EvalConfig)
    diagnose: DiagnoseConfig = field(default_factory=DiagnoseConfig)
    compare: CompareConfig = field(default_factory=CompareConfig)

    SECTIONS = {
        "data": DataConfig, "model": ModelConfig, "train": TrainConfig, "regularizer": RegularizerConfig,
        "eval": EvalConfig, "diagnose": DiagnoseConfig, "compare": CompareConfig,
    }

    @classmethod
    def from_dict(cls, d):
        d = dict(d or {})
        allowed = {f.name for f in fields(cls)}
        unknown = set(d) - allowed
        if unknown:
            raise ConfigError(f"unknown top-level config keys: {sorted(unknown)}")
        kwargs = {}
        for name in allowed:
            if name not in d:
                continue
            if name in cls.SECTIONS:
                kwargs[name] = _build(cls.SECTIONS[name], d[name], name)
            else:
                kwargs[name] = d[name]
        cfg = cls(**kwargs)
        cfg.corruption_spec()
        if "seed" in (d.get("train") or {}):
            raise ConfigError("set the seed at top level; train.seed is derived from it")
        cfg.train.seed = int(cfg.seed)
        return cfg

    @classmethod
    def load(cls, path):
        try:
            raw = json.loads(Path(path).read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON: {exc}") from None
        return cls.from_dict(raw)

    def corruption_spec(self):
        c = dict(self.corruption or {})
        unknown = set(c) - {"rate", "scheme"}
        if unknown:
            raise ConfigError(f"unknown keys in 'corruption': {sorted(unknown)}")
        return CorruptionSpec(rate=c.get("rate", 0.0), scheme=c.get("scheme", "per_sample_resample"), seed=self.seed)

    def to_dict(self):
        d = asdict(self)
        d["train"].pop("seed", None)
        return d

    def network_plan(self, input_shape, num_classes):
        m, r = self.model, self.regularizer
        kw = dict(mode=r.mode, mix_points=r.mix_points, alpha=r.alpha, op_forward=r.op_forward,
                  manifold_include_input=r.manifold_include_input)
        if m.architecture == "custom":
            return NetworkPlan(tuple(input_shape), num_classes, [BlockSpec(**b) for b in m.blocks], **kw)
        if m.architecture == "cxr_like":
            return NetworkPlan.cxr_like(input_shape, num_classes, widths=tuple(m.widths), **kw)
        strides = tuple(m.strides) if m.strides else (2, 1, 2, 1, 1)[:len(m.widths)]
        return NetworkPlan.ecg_like(input_shape, num_classes, widths=tuple(m.widths), strides=strides, **kw)
