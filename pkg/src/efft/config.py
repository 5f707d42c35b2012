"""Experiment configuration files.

Plain ``key = value`` lines under ``[section]`` headers, ``#`` comments.
Unknown sections or keys are errors. Example::

    [model]
    d = 16
    L = 2
    heads = 2
    patch = 4
    classes = 4

    [method]
    kind = efft1        # efft1 | efft2 | lora | fact_tt | linear
    r1 = 4
    s = 10

    [train]
    lr = 1e-3
    batch_size = 64
    max_steps = 300

    [data]
    source = synthetic  # synthetic | idx
    samples_per_class = 50
    image_size = 16

    [mask]
    layers = all        # or 0,1
    blocks = mhsa,ffn
"""
from __future__ import annotations

import configparser
import dataclasses
from dataclasses import dataclass, field, fields

from .data import SyntheticSpec
from .errors import ConfigError, FormatError
from .train import TrainHyper
from .vit import BLOCKS, TuningMask, ViTConfig

METHOD_KINDS = ("efft1", "efft2", "lora", "fact_tt", "linear")


@dataclass(frozen=True)
class ModelSection:
    d: int = 16
    L: int = 2
    heads: int = 2
    patch: int = 4
    classes: int = 4
    channels: int = 1


@dataclass(frozen=True)
class MethodSection:
    kind: str = "efft1"
    r1: int = 8
    r2: int | None = None
    s: float = 10.0
    s2: float | None = None
    sigma_std: float = 0.02
    lora_roles: str = "q,v"


@dataclass(frozen=True)
class TrainSection:
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 100
    max_steps: int | None = None
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    seed: int = 0
    val_fraction: float = 0.2


@dataclass(frozen=True)
class DataSection:
    source: str = "synthetic"
    n_classes: int = 4
    samples_per_class: int = 50
    image_size: int = 16
    noise_std: float = 0.1
    seed: int = 0
    images: str = ""
    labels: str = ""
    max_samples: int | None = None


@dataclass(frozen=True)
class MaskSection:
    layers: str = "all"
    blocks: str = "mhsa,ffn"


@dataclass(frozen=True)
class ExperimentConfig:
    model: ModelSection = field(default_factory=ModelSection)
    method: MethodSection = field(default_factory=MethodSection)
    train: TrainSection = field(default_factory=TrainSection)
    data: DataSection = field(default_factory=DataSection)
    mask: MaskSection = field(default_factory=MaskSection)

    # -- derived views -----------------------------------------------------------
    @property
    def r2(self) -> int:
        return self.method.r1 if self.method.r2 is None else self.method.r2

    def vit_config(self) -> ViTConfig:
        m, img = self.model, self.data.image_size
        if img % m.patch:
            raise ConfigError(f"data.image_size={img} is not divisible by model.patch={m.patch}")
        return ViTConfig(d=m.d, L=m.L, heads=m.heads, n_patches=(img // m.patch) ** 2,
                         patch_size=m.patch, n_classes=m.classes, channels=m.channels)

    def hyper(self, seed: int | None = None) -> TrainHyper:
        t = self.train
        return TrainHyper(lr=t.lr, batch_size=t.batch_size, epochs=t.epochs, max_steps=t.max_steps,
                          betas=(t.beta1, t.beta2), eps=t.eps, weight_decay=t.weight_decay,
                          seed=t.seed if seed is None else seed)

    def synthetic_spec(self, seed: int | None = None) -> SyntheticSpec:
        d = self.data
        return SyntheticSpec(d.n_classes, d.samples_per_class, d.image_size, d.noise_std,
                             d.seed if seed is None else seed)

    def tuning_mask(self) -> TuningMask:
        L = self.model.L
        layers = parse_layers(self.mask.layers, L)
        blocks = parse_blocks(self.mask.blocks)
        return TuningMask(frozenset(layers), frozenset(blocks))


def parse_layers(text: str, L: int) -> list[int]:
    text = text.strip().lower()
    if text == "all":
        return list(range(L))
    if text in ("", "none"):
        return []
    out = []
    for part in text.replace(";", ",").split(","):
        part = part.strip()
        if "-" in part:
            lo, hi = part.split("-", 1)
            out.extend(range(int(lo), int(hi) + 1))
        elif part:
            out.append(int(part))
    bad = [x for x in out if not 0 <= x < L]
    if bad:
        raise ConfigError(f"mask.layers {bad} outside [0, {L})")
    return sorted(set(out))


def parse_blocks(text: str) -> list[str]:
    text = text.strip().lower()
    if text in ("both", "all"):
        return list(BLOCKS)
    if text in ("", "none"):
        return []
    out = [b.strip() for b in text.replace(";", ",").split(",") if b.strip()]
    bad = [b for b in out if b not in BLOCKS]
    if bad:
        raise ConfigError(f"mask.blocks: unknown block(s) {bad}; expected {BLOCKS}")
    return out


_SECTIONS = {f.name: f.type for f in fields(ExperimentConfig)}
_SECTION_TYPES = {
    "model": ModelSection, "method": MethodSection, "train": TrainSection,
    "data": DataSection, "mask": MaskSection,
}


def _convert(section: str, key: str, raw: str, typ):
    name = f"{section}.{key}"
    raw = raw.strip()
    optional = "None" in str(typ)
    if optional and raw.lower() in ("", "none"):
        return None
    base = str(typ).replace(" | None", "")
    try:
        if base == "int":
            return int(raw)
        if base == "float":
            return float(raw)
        return raw
    except ValueError:
        raise ConfigError(f"{name}: cannot parse {raw!r} as {base}") from None


def _validate(cfg: ExperimentConfig) -> None:
    m, me, t, d = cfg.model, cfg.method, cfg.train, cfg.data
    for name in ("d", "L", "heads", "patch", "classes", "channels"):
        if getattr(m, name) < 1:
            raise ConfigError(f"model.{name} must be >= 1")
    if m.d % m.heads:
        raise ConfigError(f"model.d={m.d} must be divisible by model.heads={m.heads}")
    if me.kind not in METHOD_KINDS:
        raise ConfigError(f"method.kind={me.kind!r} not in {METHOD_KINDS}")
    if me.r1 < 1:
        raise ConfigError("method.r1 must be >= 1")
    if me.r2 is not None and me.r2 < 1:
        raise ConfigError("method.r2 must be >= 1")
    if not me.s > 0 or (me.s2 is not None and not me.s2 > 0):
        raise ConfigError("method.s must be > 0")
    if me.sigma_std < 0:
        raise ConfigError("method.sigma_std must be >= 0")
    try:
        TrainHyper(lr=t.lr, batch_size=t.batch_size, epochs=t.epochs, max_steps=t.max_steps,
                   betas=(t.beta1, t.beta2), eps=t.eps, weight_decay=t.weight_decay)
    except ConfigError as exc:
        raise ConfigError(f"train: {exc}") from None
    if not 0.0 <= t.val_fraction < 1.0:
        raise ConfigError("train.val_fraction must lie in [0, 1)")
    if d.source not in ("synthetic", "idx"):
        raise ConfigError(f"data.source={d.source!r} must be 'synthetic' or 'idx'")
    if d.source == "idx" and (not d.images or not d.labels):
        raise ConfigError("data.images and data.labels are required for source=idx")
    if d.n_classes < 1 or d.samples_per_class < 1 or d.image_size < 1 or d.noise_std < 0:
        raise ConfigError("data sizes must be >= 1 and noise_std >= 0")
    if d.n_classes > m.classes:
        raise ConfigError(f"data.n_classes={d.n_classes} exceeds model.classes={m.classes}")
    if d.max_samples is not None and d.max_samples < 1:
        raise ConfigError("data.max_samples must be >= 1")
    cfg.vit_config()
    cfg.tuning_mask()
    if me.kind == "lora":
        from .factors import Role
        for r in me.lora_roles.split(","):
            try:
                Role(r.strip())
            except ValueError:
                raise ConfigError(f"method.lora_roles: unknown role {r.strip()!r}") from None


def parse_config(text: str, source: str = "<config>") -> ExperimentConfig:
    parser = configparser.ConfigParser(
        interpolation=None, inline_comment_prefixes=("#",), comment_prefixes=("#", ";"),
        default_section="__defaults__",
    )
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.MissingSectionHeaderError as exc:
        raise FormatError(f"{source}: line {exc.lineno}: expected a [section] header before "
                          f"{exc.line.strip()!r}") from None
    except configparser.ParsingError as exc:
        lineno, text = exc.errors[0]
        raise FormatError(f"{source}: line {lineno}: cannot parse {text.strip()!r}") from None
    except configparser.Error as exc:
        line = getattr(exc, "lineno", None)
        where = f": line {line}" if line else ""
        first = str(exc).splitlines()[0]
        raise FormatError(f"{source}{where}: {first}") from None
    sections = {}
    for sec in parser.sections():
        if sec not in _SECTION_TYPES:
            raise ConfigError(f"unknown section [{sec}]")
        typ = _SECTION_TYPES[sec]
        known = {f.name: f.type for f in fields(typ)}
        values = {}
        for key, raw in parser.items(sec):
            if key not in known:
                raise ConfigError(f"unknown key {sec}.{key}")
            values[key] = _convert(sec, key, raw, known[key])
        sections[sec] = typ(**values)
    cfg = ExperimentConfig(**sections)
    _validate(cfg)
    return cfg


def load_config(path) -> ExperimentConfig:
    try:
        with open(path, encoding="utf-8") as fh:
            text = fh.read()
    except FileNotFoundError:
        raise ConfigError(f"config file not found: {path}") from None
    return parse_config(text, str(path))


def dump_config(cfg: ExperimentConfig) -> str:
    lines = []
    for sec in _SECTIONS:
        lines.append(f"[{sec}]")
        for f in fields(_SECTION_TYPES[sec]):
            val = getattr(getattr(cfg, sec), f.name)
            lines.append(f"{f.name} = {'none' if val is None else (repr(val) if isinstance(val, float) else val)}")
        lines.append("")
    return "\n".join(lines)


def save_config(cfg: ExperimentConfig, path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(dump_config(cfg))


def with_overrides(cfg: ExperimentConfig, section: str, **values) -> ExperimentConfig:
    return dataclasses.replace(cfg, **{section: dataclasses.replace(getattr(cfg, section), **values)})
