"""Experiment configuration: an INI file with [train], [data] and [model] sections.

Every key can be overridden from the command line as ``--section.key=value`` or,
when the bare key is unambiguous, ``--key=value``. ``--attention`` is an alias
for ``train.attention_enabled``. Example::

    [train]
    learning_rate = 1e-4
    max_epochs = 300
    early_stop_patience = 20
    batch_size = 4
    seed = 0
    attention_enabled = true

    [data]
    root = /data/kitti
    train_ids = 00,01,02,08,09
    test_ids = 03,04,05,06,07,10
    validation_fraction = 0.05
    window_min = 5
    window_max = 10
    windows_per_sequence = 200
    image_height = 218
    image_width = 720

    [model]
    preset = full
    pretrained =
"""

import configparser
from dataclasses import asdict, dataclass, field, fields

from .dataset import IMAGE_SIZE, TEST_IDS, TRAIN_IDS, SplitConfig
from .network import NetworkConfig
from .training import TrainConfig


class ConfigError(ValueError):
    def __init__(self, key, message):
        self.key = key
        super().__init__(f"config key {key!r}: {message}")


@dataclass
class DataConfig:
    root: str = ""
    train_ids: tuple = TRAIN_IDS
    test_ids: tuple = TEST_IDS
    validation_fraction: float = 0.05
    window_min: int = 5
    window_max: int = 10
    windows_per_sequence: int = 200
    image_height: int = IMAGE_SIZE[0]
    image_width: int = IMAGE_SIZE[1]

    @property
    def image_size(self):
        return (self.image_height, self.image_width)

    def split_config(self, seed):
        return SplitConfig(tuple(self.train_ids), tuple(self.test_ids), self.validation_fraction,
                           (self.window_min, self.window_max), seed)


@dataclass
class ModelConfig:
    # "full" uses the published sizes; "desk" shrinks widths for CPU runs
    preset: str = "full"
    width_divisor: int = 8
    hidden_size: int = 0  # 0 = preset default
    d_k: int = 0
    heads: int = 1
    head_layers: int = 2
    head_hidden: int = 128
    pretrained: str = ""

    def network_config(self, attention_enabled):
        if self.preset == "full":
            cfg = NetworkConfig(attention_enabled=attention_enabled)
        elif self.preset == "desk":
            cfg = NetworkConfig.desk(self.width_divisor, attention_enabled=attention_enabled)
        else:
            raise ConfigError("model.preset", f"unknown preset {self.preset!r}")
        if self.hidden_size:
            cfg.hidden_size = self.hidden_size
        if self.d_k:
            cfg.attention.d_k = cfg.attention.d_v = self.d_k
        cfg.attention.heads = self.heads
        cfg.head_layers = self.head_layers
        cfg.head_hidden = self.head_hidden
        return cfg


@dataclass
class ExperimentConfig:
    train: TrainConfig = field(default_factory=TrainConfig)
    data: DataConfig = field(default_factory=DataConfig)
    model: ModelConfig = field(default_factory=ModelConfig)

    SECTIONS = ("train", "data", "model")
    ALIASES = {"attention": "train.attention_enabled"}

    def to_dict(self):
        return {s: asdict(getattr(self, s)) for s in self.SECTIONS}

    def set(self, key, raw):
        key = self.ALIASES.get(key, key)
        if "." in key:
            section, name = key.split(".", 1)
        else:
            owners = [s for s in self.SECTIONS if name_in(getattr(self, s), key)]
            if len(owners) != 1:
                raise ConfigError(key, "unknown" if not owners else f"ambiguous between {owners}")
            section, name = owners[0], key
        if section not in self.SECTIONS:
            raise ConfigError(key, f"unknown section {section!r}")
        obj = getattr(self, section)
        if not name_in(obj, name):
            raise ConfigError(key, "unknown")
        current = getattr(obj, name)
        setattr(obj, name, coerce(f"{section}.{name}", raw, current))

    @classmethod
    def from_file(cls, path=None, overrides=()):
        cfg = cls()
        if path:
            parser = configparser.ConfigParser()
            with open(path) as fh:
                parser.read_file(fh)
            for section in parser.sections():
                for key, value in parser.items(section):
                    cfg.set(f"{section}.{key}", value)
        for key, value in overrides:
            cfg.set(key, value)
        return cfg


def name_in(obj, name):
    return name in {f.name for f in fields(obj)}


def coerce(key, raw, current):
    raw = raw.strip()
    try:
        if isinstance(current, bool):
            low = raw.lower()
            if low in ("1", "true", "yes", "on"):
                return True
            if low in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if isinstance(current, int):
            return int(raw)
        if isinstance(current, float):
            return float(raw)
        if isinstance(current, (tuple, list)):
            return tuple(x.strip() for x in raw.split(",") if x.strip())
    except ValueError:
        raise ConfigError(key, f"cannot parse {raw!r} as {type(current).__name__}") from None
    return raw


def parse_overrides(tokens):
    """``["--a.b=1", "--c", "2"]`` -> ``[("a.b", "1"), ("c", "2")]``."""
    out = []
    it = iter(tokens)
    for tok in it:
        if not tok.startswith("--"):
            raise ConfigError(tok, "overrides must look like --key=value")
        body = tok[2:]
        if "=" in body:
            key, value = body.split("=", 1)
        else:
            key = body
            value = next(it, None)
            if value is None:
                raise ConfigError(key, "missing value")
        out.append((key.replace("-", "_"), value))
    return out
