"""INI-style run configuration with ``--key value`` overrides."""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field

from . import decoder as D
from . import encoders as E
from . import losses as L
from .curation import CurationConfig
from .model import ModelConfig
from .trainer import BranchConfig, DataConfig, TrainPlan


class ConfigError(ValueError):
    pass


@dataclass
class ModelSection:
    patch_size: int = 4
    width: int = 64
    depth: int = 4
    heads: int = 4
    embed_dim: int = 64
    posemb_len: int = 64
    text_max_len: int = 64
    decoder_depth: int = 0            # 0: half the text depth, rounded up
    decoder_chunks: int = 4
    decoder_sample_tasks: bool = False
    proto_dim: int = 32
    student_temp: float = 0.1
    teacher_temp: float = 0.04
    center_momentum: float = 0.9

    def build(self) -> ModelConfig:
        vit = E.VitConfig(self.patch_size, self.width, self.depth, self.heads, self.posemb_len, self.embed_dim)
        text = E.TextConfig(max_len=self.text_max_len, width=self.width, depth=self.depth, heads=self.heads,
                            embed_dim=self.embed_dim)
        dec = D.DecoderConfig.for_text(text, n_chunks=self.decoder_chunks, sample_tasks=self.decoder_sample_tasks)
        if self.decoder_depth:
            dec.depth = self.decoder_depth
        dist = L.DistillConfig(self.proto_dim, student_temp=self.student_temp, teacher_temp=self.teacher_temp,
                               center_momentum=self.center_momentum)
        return ModelConfig(vit, text, dec, dist)


@dataclass
class AcidSection:
    enabled: bool = True
    filter_ratio: float = 0.5
    n_chunks: int = 4
    batch_size: int = 32
    steps: int = 100
    lr: float = 1e-5
    teacher_steps: int = 100
    teacher_lr: float = 3e-4
    seeds: tuple[int, ...] = (7, 8, 9)

    def curation(self) -> CurationConfig:
        return CurationConfig(self.filter_ratio, self.batch_size, self.n_chunks)


@dataclass
class EvalSection:
    seed: int = 1234
    n_retrieval: int = 256
    n_zero_shot: int = 320
    naflex_seq_len: int = 64


@dataclass
class RunSection:
    seed: int = 7
    out_dir: str = "runs/desk"
    log_every: int = 100
    plots: bool = True


@dataclass
class RunConfig:
    run: RunSection = field(default_factory=RunSection)
    model: ModelSection = field(default_factory=ModelSection)
    train: TrainPlan = field(default_factory=TrainPlan)
    data: DataConfig = field(default_factory=DataConfig)
    branches: BranchConfig = field(default_factory=BranchConfig)
    acid: AcidSection = field(default_factory=AcidSection)
    eval: EvalSection = field(default_factory=EvalSection)

    def model_config(self) -> ModelConfig:
        return self.model.build()

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


SECTIONS = {f.name: f.default_factory for f in dataclasses.fields(RunConfig)}


def _parse_value(text: str, default):
    text = text.strip()
    if isinstance(default, bool):
        low = text.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ValueError(f"not a boolean: {text!r}")
    if isinstance(default, int):
        return int(text)
    if isinstance(default, float):
        return float(text)
    if isinstance(default, tuple):
        items = [t.strip() for t in text.split(",") if t.strip()]
        if default and isinstance(default[0], tuple):
            return tuple(tuple(int(v) for v in it.split("x")) for it in items)
        return tuple(int(v) if v.lstrip("-").isdigit() else float(v) for v in items)
    return text


def _key_index() -> dict[str, list[str]]:
    index: dict[str, list[str]] = {}
    for sec, factory in SECTIONS.items():
        for f in dataclasses.fields(factory()):
            index.setdefault(f.name, []).append(sec)
    return index


# bare keys that fan out to several sections
ALIASES = {"seed": ("run.seed", "data.seed")}


def resolve_keys(key: str) -> list[tuple[str, str]]:
    key = key.replace("-", "_")
    if key in ALIASES:
        return [resolve_key(k) for k in ALIASES[key]]
    return [resolve_key(key)]


def resolve_key(key: str) -> tuple[str, str]:
    """'section.key' or a bare key that names exactly one field."""
    key = key.replace("-", "_")
    if "." in key:
        sec, name = key.split(".", 1)
        if sec not in SECTIONS or name not in {f.name for f in dataclasses.fields(SECTIONS[sec]())}:
            raise ConfigError(f"unknown config key {key!r}")
        return sec, name
    owners = _key_index().get(key, [])
    if not owners:
        raise ConfigError(f"unknown config key {key!r}")
    if len(owners) > 1:
        raise ConfigError(f"ambiguous key {key!r}; use one of " + ", ".join(f"{s}.{key}" for s in owners))
    return owners[0], key


def build_config(values: dict[tuple[str, str], str] | None = None) -> RunConfig:
    """Construct (and so validate) a RunConfig from raw string values."""
    raw: dict[str, dict] = {sec: {} for sec in SECTIONS}
    for (sec, name), text in (values or {}).items():
        default = getattr(SECTIONS[sec](), name)
        try:
            raw[sec][name] = _parse_value(text, default)
        except ValueError as exc:
            raise ConfigError(f"{sec}.{name}: {exc}") from None
    kwargs = {}
    for sec, factory in SECTIONS.items():
        try:
            kwargs[sec] = factory(**raw[sec]) if raw[sec] else factory()
        except (ValueError, TypeError) as exc:
            raise ConfigError(f"invalid [{sec}]: {exc}") from None
    cfg = RunConfig(**kwargs)
    try:
        cfg.model_config()
        cfg.acid.curation()
    except ValueError as exc:
        raise ConfigError(f"invalid configuration: {exc}") from None
    for side, patch in cfg.branches.fixedres_targets:
        if side % patch or (side // 2) % patch:
            raise ConfigError(f"fixed-res target {side}x{patch}: side and half side must be multiples of the patch")
    return cfg


def read_config(path=None, overrides: dict[str, str] | None = None) -> RunConfig:
    values: dict[tuple[str, str], str] = {}
    if path is not None:
        parser = configparser.ConfigParser()
        with open(path) as f:
            parser.read_file(f)
        for sec in parser.sections():
            for name, text in parser.items(sec):
                values[resolve_key(f"{sec}.{name}")] = text
    for key, text in (overrides or {}).items():
        for sk in resolve_keys(key):
            values[sk] = text
    return build_config(values)


def config_from_dict(d: dict) -> RunConfig:
    """Inverse of RunConfig.to_dict (as stored in checkpoint headers)."""
    values = {}
    for sec, vals in d.items():
        for name, v in vals.items():
            values[resolve_key(f"{sec}.{name}")] = _format(v)
    return build_config(values)


def write_config(cfg: RunConfig, path) -> None:
    parser = configparser.ConfigParser()
    for sec, vals in cfg.to_dict().items():
        parser[sec] = {k: _format(v) for k, v in vals.items()}
    with open(path, "w") as f:
        parser.write(f)


def _format(v) -> str:
    if isinstance(v, (tuple, list)):
        return ",".join("x".join(map(str, x)) if isinstance(x, (tuple, list)) else str(x) for x in v)
    return str(v)
