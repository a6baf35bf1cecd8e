"""Run configuration: component configs, file loading and command-line overrides."""

import dataclasses
import json
import logging
import types
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Any, Union, get_args, get_origin

import aiofiles

from .errors import BadInputError
from .evalmetrics import EvalConfig
from .hgps import HgpsConfig
from .synth import PRNG_ALGORITHM, SynthConfig
from .trainer import PRESETS, TrainerConfig

logger = logging.getLogger(__name__)

SECTIONS: dict[str, type] = {
    "hgps": HgpsConfig,
    "synth": SynthConfig,
    "trainer": TrainerConfig,
    "eval": EvalConfig,
}
TOP_LEVEL = ("seed", "out_dir")


@dataclass(frozen=True)
class RunConfig:
    hgps: HgpsConfig = field(default_factory=HgpsConfig)
    synth: SynthConfig = field(default_factory=SynthConfig)
    trainer: TrainerConfig = field(default_factory=TrainerConfig)
    eval: EvalConfig = field(default_factory=EvalConfig)
    seed: int = 0
    out_dir: Path = Path("out")

    def to_dict(self) -> dict[str, Any]:
        return {
            "prng": PRNG_ALGORITHM,
            "seed": self.seed,
            **{name: asdict(getattr(self, name)) for name in SECTIONS},
        }


def _coerce(value: Any, typ: Any, key: str) -> Any:
    origin = get_origin(typ)
    if origin in (Union, types.UnionType):
        options = [t for t in get_args(typ) if t is not type(None)]
        if value is None or (
            isinstance(value, str) and value.strip().lower() in ("", "none", "null")
        ):
            return None
        typ = options[0]
    try:
        if typ is bool:
            if isinstance(value, str):
                lowered = value.strip().lower()
                if lowered not in ("1", "0", "true", "false", "yes", "no", "on", "off"):
                    raise ValueError(f"not a boolean: {value!r}")
                return lowered in ("1", "true", "yes", "on")
            return bool(value)
        if typ is int:
            if isinstance(value, float) and not value.is_integer():
                raise ValueError(f"not an integer: {value!r}")
            return int(value)
        if typ is float:
            return float(value)
        if typ is Path:
            return Path(value)
        return str(value) if typ is str else value
    except (TypeError, ValueError) as e:
        raise BadInputError(f"Bad value for {key}: {e}") from e


def _field_types(cls: type) -> dict[str, Any]:
    return {f.name: f.type for f in dataclasses.fields(cls)}


def _route(key: str) -> tuple[str | None, str]:
    """Section and field name of a (possibly dotted) key; section None for top-level keys."""
    if "." in key:
        section, name = key.split(".", 1)
        if section not in SECTIONS:
            raise BadInputError(f"Unknown config section: {section}")
        if name not in _field_types(SECTIONS[section]):
            raise BadInputError(f"Unknown key {name!r} in section {section}")
        return section, name
    if key in TOP_LEVEL:
        return None, key
    owners = [s for s, cls in SECTIONS.items() if key in _field_types(cls)]
    if not owners:
        raise BadInputError(f"Unknown config key: {key}")
    if len(owners) > 1:
        choices = [f"{o}.{key}" for o in owners]
        raise BadInputError(f"Ambiguous config key {key!r}; use one of {choices}")
    return owners[0], key


def parse_config_text(text: str, source: str = "<config>") -> dict[str, Any]:
    """Flatten a JSON or ``key=value`` config into ``{dotted_or_plain_key: value}``."""
    stripped = text.strip()
    if stripped.startswith("{"):
        try:
            data = json.loads(stripped)
        except json.JSONDecodeError as e:
            raise BadInputError(f"Malformed JSON config {source}: {e}") from e
        flat: dict[str, Any] = {}
        for key, value in data.items():
            if key == "prng":
                continue
            if isinstance(value, dict) and key in SECTIONS:
                flat.update({f"{key}.{k}": v for k, v in value.items()})
            else:
                flat[key] = value
        return flat

    flat = {}
    for lineno, line in enumerate(text.splitlines(), start=1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise BadInputError(f"{source}:{lineno}: expected key=value, got {line!r}")
        key, value = (part.strip() for part in line.split("=", 1))
        flat[key] = value
    return flat


def build_config(flat: dict[str, Any], base: RunConfig | None = None) -> RunConfig:
    """Apply flat settings on top of ``base`` (defaults when omitted)."""
    base = base or RunConfig()
    per_section: dict[str, dict[str, Any]] = {name: {} for name in SECTIONS}
    top: dict[str, Any] = {}
    for key, value in flat.items():
        section, name = _route(key)
        if section is None:
            top[name] = _coerce(value, _field_types(RunConfig)[name], key)
        else:
            per_section[section][name] = _coerce(value, _field_types(SECTIONS[section])[name], key)

    # A top-level seed also seeds the trainer unless the trainer section sets its own.
    if "seed" in top and "seed" not in per_section["trainer"]:
        per_section["trainer"]["seed"] = top["seed"]

    changes: dict[str, Any] = dict(top)
    for section, values in per_section.items():
        if values:
            changes[section] = replace(getattr(base, section), **values)
    return replace(base, **changes)


async def load_config(path: str | Path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise BadInputError(f"Config file does not exist: {path}")
    async with aiofiles.open(path, encoding="utf-8") as f:
        text = await f.read()
    cfg = build_config(parse_config_text(text, str(path)))
    logger.debug(f"Loaded config from {path}")
    return cfg


def apply_overrides(
    cfg: RunConfig,
    seed: int | None = None,
    out_dir: str | Path | None = None,
    no_cls_ign: bool = False,
    stages: int | None = None,
    thresholds: tuple[float, float] | None = None,
    scale: float | None = None,
    preset: str | None = None,
) -> RunConfig:
    """Command-line flags win over the config file."""
    hgps_changes: dict[str, Any] = {}
    if stages is not None:
        hgps_changes["stages"] = stages
    if thresholds is not None:
        hgps_changes["tau_low"], hgps_changes["tau_high"] = thresholds
    if scale is not None:
        hgps_changes["r"] = scale

    trainer_changes: dict[str, Any] = {}
    if seed is not None:
        trainer_changes["seed"] = seed
    if no_cls_ign:
        trainer_changes["use_cls_ign"] = False
    if preset is not None:
        if preset not in PRESETS:
            raise BadInputError(f"Unknown preset {preset!r}; choose from {sorted(PRESETS)}")
        trainer_changes["base_model"], trainer_changes["selector"] = PRESETS[preset]

    return replace(
        cfg,
        hgps=replace(cfg.hgps, **hgps_changes),
        trainer=replace(cfg.trainer, **trainer_changes),
        seed=cfg.seed if seed is None else seed,
        out_dir=cfg.out_dir if out_dir is None else Path(out_dir),
    )
