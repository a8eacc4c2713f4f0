"""Strict JSON run configuration for the command-line tools.

Unknown keys and mistyped values are rejected with the line they appear on,
so a typo in a loss weight cannot silently fall back to a default.
"""

import copy
import itertools
import json
import re
from dataclasses import dataclass, field, fields
from pathlib import Path

from .pipeline import TrainConfig
from .synthworld import WorldConfig

_STAGE_KEYS = [n for n in TrainConfig.field_names() if n not in ("stage", "seed")]
_EVAL_DEFAULTS = {
    "n_scenes": 40,
    "seed": 1,
    "perturb_targets": [0.7, 0.8, 0.9],
    "logit_scale": 100.0,
}
_TOP_KEYS = ["seed", "stages", "n_maps", "world", "warmup", "mixed", "eval", "sweep"]


class ConfigError(ValueError):
    def __init__(self, message, line=None, path=None):
        where = f"{path}:{line}: " if line is not None else (f"{path}: " if path else "")
        super().__init__(where + message)
        self.line = line


@dataclass
class RunConfig:
    seed: int = 0
    stages: str = "both"
    n_maps: int = 16
    world: WorldConfig = field(default_factory=WorldConfig)
    warmup: TrainConfig = field(default_factory=lambda: TrainConfig(stage="warmup"))
    mixed: TrainConfig = field(
        default_factory=lambda: TrainConfig(stage="mixed", epochs=10)
    )
    eval: dict = field(default_factory=lambda: dict(_EVAL_DEFAULTS))
    sweep: dict = field(default_factory=dict)

    def with_seed(self, seed):
        cfg = copy.deepcopy(self)
        cfg.seed = seed
        cfg.warmup.seed = seed
        cfg.mixed.seed = seed
        return cfg

    def to_dict(self):
        def stage(tc):
            return {k: getattr(tc, k) for k in _STAGE_KEYS}

        return {
            "seed": self.seed,
            "stages": self.stages,
            "n_maps": self.n_maps,
            "world": {f.name: getattr(self.world, f.name) for f in fields(WorldConfig)},
            "warmup": stage(self.warmup),
            "mixed": stage(self.mixed),
            "eval": dict(self.eval),
            "sweep": dict(self.sweep),
        }


def _line_of(text, key):
    m = re.search(r'"%s"\s*:' % re.escape(key), text)
    return text.count("\n", 0, m.start()) + 1 if m else None


def _check_type(value, default, key, text, path):
    ok = True
    if isinstance(default, bool):
        ok = isinstance(value, bool)
    elif isinstance(default, int):
        ok = isinstance(value, int) and not isinstance(value, bool)
    elif isinstance(default, float):
        ok = isinstance(value, (int, float)) and not isinstance(value, bool)
    elif isinstance(default, str):
        ok = isinstance(value, str)
    elif isinstance(default, list):
        ok = isinstance(value, list) and all(
            isinstance(v, (int, float)) and not isinstance(v, bool) for v in value
        )
    if not ok:
        raise ConfigError(
            f"{key!r} must be of type {type(default).__name__}, got {value!r}",
            _line_of(text, key),
            path,
        )
    return float(value) if isinstance(default, float) else value


def _section(raw, defaults, name, text, path):
    if not isinstance(raw, dict):
        raise ConfigError(f"section {name!r} must be an object", _line_of(text, name), path)
    out = dict(defaults)
    for key, value in raw.items():
        if key not in defaults:
            raise ConfigError(
                f"unknown key {key!r} in section {name!r}", _line_of(text, key), path
            )
        out[key] = _check_type(value, defaults[key], key, text, path)
    return out


def parse_config(text, path="<config>"):
    try:
        raw = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"invalid JSON: {exc.msg}", exc.lineno, path) from None
    if not isinstance(raw, dict):
        raise ConfigError("top level must be a JSON object", 1, path)
    for key in raw:
        if key not in _TOP_KEYS:
            raise ConfigError(f"unknown top-level key {key!r}", _line_of(text, key), path)

    base = RunConfig()
    seed = _check_type(raw.get("seed", 0), 0, "seed", text, path)
    stages = _check_type(raw.get("stages", "both"), "both", "stages", text, path)
    if stages not in ("warmup", "mixed", "both"):
        raise ConfigError("'stages' must be warmup, mixed or both", _line_of(text, "stages"), path)
    n_maps = _check_type(raw.get("n_maps", 16), 16, "n_maps", text, path)

    world_defaults = {f.name: getattr(base.world, f.name) for f in fields(WorldConfig)}
    world = _section(raw.get("world", {}), world_defaults, "world", text, path)

    def stage_cfg(name, template):
        defaults = {k: getattr(template, k) for k in _STAGE_KEYS}
        values = _section(raw.get(name, {}), defaults, name, text, path)
        try:
            return TrainConfig(stage=name, seed=seed, **values)
        except ValueError as exc:
            bad = next((k for k in raw.get(name, {}) if k in str(exc)), name)
            raise ConfigError(str(exc), _line_of(text, bad), path) from None

    warmup = stage_cfg("warmup", base.warmup)
    mixed = stage_cfg("mixed", base.mixed)
    ev = _section(raw.get("eval", {}), _EVAL_DEFAULTS, "eval", text, path)

    sweep = raw.get("sweep", {})
    if not isinstance(sweep, dict):
        raise ConfigError("'sweep' must map dotted keys to lists", _line_of(text, "sweep"), path)
    for key, values in sweep.items():
        parts = key.split(".")
        valid = (len(parts) == 1 and parts[0] in ("seed", "n_maps")) or (
            len(parts) == 2
            and parts[0] in ("warmup", "mixed", "world")
            and parts[1] in (world_defaults if parts[0] == "world" else _STAGE_KEYS)
        )
        if not valid:
            raise ConfigError(f"unknown sweep key {key!r}", _line_of(text, key), path)
        if not isinstance(values, list) or not values:
            raise ConfigError(f"sweep {key!r} must be a nonempty list", _line_of(text, key), path)

    try:
        world_cfg = WorldConfig(**world)
    except TypeError as exc:  # pragma: no cover - keys already checked
        raise ConfigError(str(exc), None, path) from None
    return RunConfig(
        seed=seed,
        stages=stages,
        n_maps=n_maps,
        world=world_cfg,
        warmup=warmup,
        mixed=mixed,
        eval=ev,
        sweep=sweep,
    )


def load_config(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read config: {exc.strerror}", None, path) from None
    return parse_config(text, path)


def expand_sweep(cfg):
    """Cartesian product of the sweep lists; returns ``[(label, RunConfig), ...]``."""
    if not cfg.sweep:
        return [("", cfg)]
    keys = sorted(cfg.sweep)
    runs = []
    for combo in itertools.product(*(cfg.sweep[k] for k in keys)):
        variant = copy.deepcopy(cfg)
        variant.sweep = {}
        parts = []
        for key, value in zip(keys, combo):
            parts.append(f"{key}={value}")
            if key == "seed":
                variant = variant.with_seed(value)
            elif key == "n_maps":
                variant.n_maps = value
            else:
                section, attr = key.split(".")
                setattr(getattr(variant, section), attr, value)
        variant.warmup.validate()
        variant.mixed.validate()
        runs.append((",".join(parts), variant))
    return runs
