"""Run configuration files: ``key = value`` lines grouped under ``[section]``.

Sections map onto dataclasses: ``[data]`` -> SyntheticSpec, ``[model]`` ->
ModelDims (plus ``variant``), ``[optim]`` -> OptimConfig, ``[htl]`` ->
HTLConfig, and ``[ablate]`` / ``[gradcheck]`` for those commands. Values are
parsed by the target field's annotation; anything unknown is rejected.
"""

from __future__ import annotations

import configparser
import dataclasses
import types
import typing
from dataclasses import dataclass, field, replace
from pathlib import Path

from .data import SyntheticSpec
from .harness import DEFAULT_DATA, DEFAULT_DIMS, DEFAULT_OPTIM, DEFAULT_SWEEP, VARIANTS, ModelDims
from .htl import HTLConfig
from .trainer import OptimConfig


class ConfigError(ValueError):
    """Malformed or unknown configuration entry."""


@dataclass(frozen=True)
class AblateOptions:
    variants: tuple[str, ...] = DEFAULT_SWEEP
    seeds: tuple[int, ...] = (0, 1, 2)


@dataclass(frozen=True)
class GradcheckOptions:
    variant: str = "mome_htl"
    max_coords: int = 8
    h: float = 1e-4
    tol: float = 1e-4
    batch: int = 3


@dataclass(frozen=True)
class RunConfig:
    data: SyntheticSpec = DEFAULT_DATA
    dims: ModelDims = DEFAULT_DIMS
    optim: OptimConfig = DEFAULT_OPTIM
    htl: HTLConfig | None = None  # None: the variant's own weights
    variant: str = "mome_htl"
    manifest: str | None = None
    ablate: AblateOptions = AblateOptions()
    gradcheck: GradcheckOptions = GradcheckOptions()
    text: str = field(default="", compare=False)

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, data=replace(self.data, seed=seed), optim=replace(self.optim, seed=seed))


def _parse_value(raw: str, hint, where: str):
    raw = raw.strip()
    origin = typing.get_origin(hint)
    args = typing.get_args(hint)
    if origin in (typing.Union, types.UnionType):
        inner = [a for a in args if a is not type(None)]
        if raw.lower() in ("none", ""):
            return None
        return _parse_value(raw, inner[0], where)
    if hint is bool:
        low = raw.lower()
        if low in ("1", "true", "yes", "on"):
            return True
        if low in ("0", "false", "no", "off"):
            return False
        raise ConfigError(f"{where}: expected a boolean, got {raw!r}")
    if hint in (int, float, str):
        try:
            return hint(raw)
        except ValueError:
            raise ConfigError(f"{where}: expected {hint.__name__}, got {raw!r}") from None
    if origin is tuple:
        inner = args[0]
        if typing.get_origin(inner) is tuple:
            # nested tuples: groups separated by ';', items by ',' or spaces
            groups = [g for g in raw.split(";") if g.strip()]
            return tuple(_parse_value(g, inner, where) for g in groups)
        items = [s for s in raw.replace(",", " ").split() if s]
        return tuple(_parse_value(s, inner, where) for s in items)
    raise ConfigError(f"{where}: unsupported field type {hint!r}")


def _apply(obj, section: configparser.SectionProxy, skip=()):
    hints = typing.get_type_hints(type(obj))
    names = {f.name for f in dataclasses.fields(obj)}
    updates = {}
    for key, raw in section.items():
        if key in skip:
            continue
        if key not in names:
            raise ConfigError(f"[{section.name}] unknown key {key!r}; expected one of {sorted(names)}")
        updates[key] = _parse_value(raw, hints[key], f"[{section.name}] {key}")
    try:
        return replace(obj, **updates)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"[{section.name}] {exc}") from None


_SECTIONS = ("data", "model", "optim", "htl", "ablate", "gradcheck")


def parse_config(text: str) -> RunConfig:
    parser = configparser.ConfigParser(interpolation=None, default_section="__defaults__")
    parser.optionxform = str  # keep keys case-sensitive
    try:
        parser.read_string(text)
    except configparser.Error as exc:
        raise ConfigError(str(exc)) from None
    unknown = set(parser.sections()) - set(_SECTIONS)
    if unknown:
        raise ConfigError(f"unknown section(s) {sorted(unknown)}; expected {list(_SECTIONS)}")
    cfg = RunConfig(text=text)
    if parser.has_section("data"):
        sec = parser["data"]
        cfg = replace(cfg, data=_apply(cfg.data, sec, skip=("manifest",)),
                      manifest=sec.get("manifest") or None)
    if parser.has_section("model"):
        sec = parser["model"]
        variant = sec.get("variant", cfg.variant).strip()
        if variant not in VARIANTS:
            raise ConfigError(f"[model] unknown variant {variant!r}; choose from {sorted(VARIANTS)}")
        cfg = replace(cfg, dims=_apply(cfg.dims, sec, skip=("variant",)), variant=variant)
    if parser.has_section("optim"):
        cfg = replace(cfg, optim=_apply(cfg.optim, parser["optim"]))
    if parser.has_section("htl"):
        cfg = replace(cfg, htl=_apply(HTLConfig(), parser["htl"]))
    if parser.has_section("ablate"):
        cfg = replace(cfg, ablate=_apply(cfg.ablate, parser["ablate"]))
        bad = [v for v in cfg.ablate.variants if v not in VARIANTS]
        if bad:
            raise ConfigError(f"[ablate] unknown variant(s) {bad}")
    if parser.has_section("gradcheck"):
        cfg = replace(cfg, gradcheck=_apply(cfg.gradcheck, parser["gradcheck"]))
    try:
        cfg.data.validate()
    except ValueError as exc:
        raise ConfigError(f"[data] {exc}") from None
    return cfg


def load_config(path) -> RunConfig:
    return parse_config(Path(path).read_text())
