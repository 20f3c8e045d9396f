"""
Experiment config files.

YAML documents with sections federation/model/task/train/attack/aggregator/
defend plus top-level seed and eval_pair. Errors carry the line number of
the offending key when it can be located. The config hash is computed over
the resolved config (defaults filled in), so it is stable under key
reordering and changes only when a semantic value changes.
"""

import logging
from dataclasses import replace
from pathlib import Path
from typing import Any, Dict, Mapping, Optional, Tuple, Union

import yaml

from fldefend.aggregation import AggregatorKind, AggregatorSpec
from fldefend.data import AttackSpec, FlipPair, TaskSpec
from fldefend.defend import DefendParams
from fldefend.errors import ConfigurationError
from fldefend.nn import TrainConfig
from fldefend.sim import SimConfig
from fldefend.utils import canonical_json, sha256_hex

logger = logging.getLogger(__name__)

SECTIONS: Dict[str, Dict[str, str]] = {
    "federation": {
        "num_clients": "int",
        "clients_per_round": "int",
        "rounds": "int",
        "malicious_rate": "float",
        "dirichlet_alpha": "float",
    },
    "model": {"hidden_units": "int_list"},
    "task": {
        "num_classes": "int",
        "num_features": "int",
        "samples_per_class": "int",
        "test_samples_per_class": "int",
        "spread": "float_or_list",
        "center_scale": "float",
        "centers": "matrix_or_none",
        "val_fraction": "float",
        "seed": "int",
        "center_gaps": "gaps",
    },
    "train": {"learning_rate": "float", "momentum": "float", "local_epochs": "int", "batch_size": "int"},
    "attack": {"mode": "str", "flip_fraction": "float", "pairs": "pairs"},
    "aggregator": {"kind": "str", "trim_count": "int_or_none", "byzantine_count": "int_or_none", "foolsgold_kappa": "float"},
    "defend": {
        "srec_threshold": "float",
        "asr_threshold": "float",
        "rating_min": "float",
        "rating_max": "float",
        "rating_init_fraction": "float",
        "reward": "float",
        "penalty": "float",
        "gmm_max_iter": "int",
        "gmm_tol": "float",
        "max_spread_ratio": "float",
        "detection_enabled": "bool",
        "validation_enabled": "bool",
    },
}
TOP_LEVEL = {"seed": "int", "eval_pair": "pair_or_none"}
PAIR_KEYS = {"source", "target", "start_round", "end_round"}


def _key_lines(text: str) -> Dict[str, int]:
    """Dotted key path -> 1-based line number, from the YAML node tree."""
    lines: Dict[str, int] = {}
    try:
        root = yaml.compose(text)
    except yaml.YAMLError:
        return lines

    def walk(node, prefix: str) -> None:
        if isinstance(node, yaml.MappingNode):
            for key, value in node.value:
                path = f"{prefix}.{key.value}" if prefix else str(key.value)
                lines[path] = key.start_mark.line + 1
                walk(value, path)
        elif isinstance(node, yaml.SequenceNode):
            for i, item in enumerate(node.value):
                walk(item, f"{prefix}[{i}]")

    if root is not None:
        walk(root, "")
    return lines


def _is_int(value: Any) -> bool:
    return isinstance(value, int) and not isinstance(value, bool)


def _is_number(value: Any) -> bool:
    return isinstance(value, (int, float)) and not isinstance(value, bool)


def _coerce(value: Any, kind: str, path: str, lines: Mapping[str, int]) -> Any:
    def fail(expected: str):
        raise ConfigurationError(f"{path}: expected {expected}, got {value!r}", line=lines.get(path))

    if kind == "int":
        if not _is_int(value):
            fail("an integer")
        return int(value)
    if kind == "float":
        if not _is_number(value):
            fail("a number")
        return float(value)
    if kind == "bool":
        if not isinstance(value, bool):
            fail("true or false")
        return value
    if kind == "str":
        if not isinstance(value, str):
            fail("a string")
        return value
    if kind == "int_or_none":
        if value is None:
            return None
        return _coerce(value, "int", path, lines)
    if kind == "int_list":
        if not isinstance(value, list) or not all(_is_int(v) for v in value):
            fail("a list of integers")
        return tuple(int(v) for v in value)
    if kind == "float_or_list":
        if _is_number(value):
            return float(value)
        if isinstance(value, list) and value and all(_is_number(v) for v in value):
            return tuple(float(v) for v in value)
        fail("a number or a list of numbers")
    if kind == "matrix_or_none":
        if value is None:
            return None
        if isinstance(value, list) and value and all(
            isinstance(row, list) and row and all(_is_number(v) for v in row) for row in value
        ):
            return tuple(tuple(float(v) for v in row) for row in value)
        fail("a list of numeric rows or null")
    if kind == "pair_or_none":
        if value is None:
            return None
        if isinstance(value, list) and len(value) == 2 and all(_is_int(v) for v in value):
            return (int(value[0]), int(value[1]))
        fail("a [source, target] pair or null")
    if kind == "gaps":
        if not isinstance(value, list) or not all(
            isinstance(item, list)
            and len(item) == 3
            and _is_int(item[0])
            and _is_int(item[1])
            and _is_number(item[2])
            for item in value
        ):
            fail("a list of [class_a, class_b, gap] entries")
        return tuple((int(a), int(b), float(gap)) for a, b, gap in value)
    if kind == "pairs":
        if not isinstance(value, list):
            fail("a list of flip pairs")
        pairs = []
        for i, item in enumerate(value):
            item_path = f"{path}[{i}]"
            if not isinstance(item, dict):
                raise ConfigurationError(f"{item_path}: expected a mapping", line=lines.get(path))
            unknown = set(item) - PAIR_KEYS
            if unknown:
                key = sorted(unknown)[0]
                raise ConfigurationError(f"{item_path}: unknown key {key!r}", line=lines.get(f"{item_path}.{key}"))
            for key in ("source", "target"):
                if key not in item:
                    raise ConfigurationError(f"{item_path}: missing {key!r}", line=lines.get(path))
            try:
                pairs.append(
                    FlipPair(
                        source=_coerce(item["source"], "int", f"{item_path}.source", lines),
                        target=_coerce(item["target"], "int", f"{item_path}.target", lines),
                        start_round=_coerce(item.get("start_round", 1), "int", f"{item_path}.start_round", lines),
                        end_round=_coerce(item.get("end_round"), "int_or_none", f"{item_path}.end_round", lines),
                    )
                )
            except ConfigurationError as e:
                if e.line is None:
                    raise ConfigurationError(f"{item_path}: {e}", line=lines.get(f"{item_path}.source")) from e
                raise
        return tuple(pairs)
    raise ValueError(f"unknown field kind {kind}")


def _section(raw: Mapping[str, Any], name: str, lines: Mapping[str, int]) -> Dict[str, Any]:
    body = raw.get(name) or {}
    if not isinstance(body, dict):
        raise ConfigurationError(f"section {name!r} must be a mapping", line=lines.get(name))
    schema = SECTIONS[name]
    out = {}
    for key, value in body.items():
        path = f"{name}.{key}"
        if key not in schema:
            raise ConfigurationError(f"unknown key {path!r}", line=lines.get(path))
        out[key] = _coerce(value, schema[key], path, lines)
    return out


def apply_overrides(raw: Dict[str, Any], overrides: Optional[Mapping[str, Any]]) -> Dict[str, Any]:
    """Set dotted keys ("federation.malicious_rate") on a copy of the raw mapping."""
    result = {k: (dict(v) if isinstance(v, dict) else v) for k, v in raw.items()}
    for dotted, value in (overrides or {}).items():
        if value is None:
            continue
        parts = dotted.split(".")
        target = result
        for part in parts[:-1]:
            target = target.setdefault(part, {})
        target[parts[-1]] = value
    return result


def build_config(raw: Mapping[str, Any], lines: Optional[Mapping[str, int]] = None) -> SimConfig:
    """SimConfig from a parsed mapping; raises ConfigurationError with line info."""
    lines = lines or {}
    if not isinstance(raw, dict):
        raise ConfigurationError("config must be a mapping at the top level", line=1)
    for key in raw:
        if key not in SECTIONS and key not in TOP_LEVEL:
            raise ConfigurationError(f"unknown top-level key {key!r}", line=lines.get(key))

    def built(name, factory):
        values = _section(raw, name, lines)
        try:
            return factory(**values)
        except ConfigurationError as e:
            if e.line is None:
                raise ConfigurationError(f"{name}: {e}", line=lines.get(name)) from e
            raise

    federation = _section(raw, "federation", lines)
    model = _section(raw, "model", lines)
    task = built("task", TaskSpec)
    train = built("train", TrainConfig)
    attack = built("attack", AttackSpec)
    aggregator_values = _section(raw, "aggregator", lines)
    kind = aggregator_values.pop("kind", AggregatorKind.FEDAVG.value)
    try:
        aggregator = AggregatorSpec(kind=AggregatorKind(kind), **aggregator_values)
    except ValueError as e:
        choices = ", ".join(k.value for k in AggregatorKind)
        raise ConfigurationError(f"aggregator.kind must be one of {choices}, got {kind!r}", line=lines.get("aggregator.kind")) from e
    defend = built("defend", DefendParams)

    config = SimConfig(
        task=task,
        train=train,
        attack=attack,
        aggregator=aggregator,
        defend=defend,
        hidden_units=model.get("hidden_units", SimConfig.hidden_units),
        seed=_coerce(raw.get("seed", 0), "int", "seed", lines),
        eval_pair=_coerce(raw.get("eval_pair"), "pair_or_none", "eval_pair", lines),
        **federation,
    )
    config.validate()
    return config


def load_config(
    path: Union[str, Path], overrides: Optional[Mapping[str, Any]] = None
) -> Tuple[SimConfig, Dict[str, Any]]:
    """Parse, override and validate a YAML config; returns (config, raw mapping)."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as e:
        raise ConfigurationError(f"cannot read config {path}: {e}") from e
    try:
        raw = yaml.safe_load(text) or {}
    except yaml.YAMLError as e:
        mark = getattr(e, "problem_mark", None)
        raise ConfigurationError(f"invalid YAML: {e}", line=mark.line + 1 if mark else None) from e

    raw = apply_overrides(raw, overrides)
    config = build_config(raw, _key_lines(text))
    return config, raw


def config_to_dict(config: SimConfig) -> Dict[str, Any]:
    """Resolved, JSON-friendly view of every semantic field."""
    task = config.task
    return {
        "seed": config.seed,
        "eval_pair": list(config.eval_pair) if config.eval_pair is not None else None,
        "federation": {
            "num_clients": config.num_clients,
            "clients_per_round": config.clients_per_round,
            "rounds": config.rounds,
            "malicious_rate": config.malicious_rate,
            "dirichlet_alpha": config.dirichlet_alpha,
        },
        "model": {"hidden_units": list(config.hidden_units)},
        "task": {
            "num_classes": task.num_classes,
            "num_features": task.num_features,
            "samples_per_class": task.samples_per_class,
            "test_samples_per_class": task.test_samples_per_class,
            "spread": list(task.spread) if isinstance(task.spread, tuple) else task.spread,
            "center_scale": task.center_scale,
            "centers": [list(row) for row in task.centers] if task.centers is not None else None,
            "val_fraction": task.val_fraction,
            "seed": task.seed,
            "center_gaps": [list(gap) for gap in task.center_gaps],
        },
        "train": {
            "learning_rate": config.train.learning_rate,
            "momentum": config.train.momentum,
            "local_epochs": config.train.local_epochs,
            "batch_size": config.train.batch_size,
        },
        "attack": {
            "mode": config.attack.mode,
            "flip_fraction": config.attack.flip_fraction,
            "pairs": [
                {"source": p.source, "target": p.target, "start_round": p.start_round, "end_round": p.end_round}
                for p in config.attack.pairs
            ],
        },
        "aggregator": {
            "kind": config.aggregator.kind.value,
            "trim_count": config.aggregator.trim_count,
            "byzantine_count": config.aggregator.byzantine_count,
            "foolsgold_kappa": config.aggregator.foolsgold_kappa,
        },
        "defend": {
            name: getattr(config.defend, name) for name in SECTIONS["defend"]
        },
    }


def config_hash(config: SimConfig) -> str:
    return sha256_hex(canonical_json(config_to_dict(config)))


def task_hash(config: SimConfig) -> str:
    """Hash of the task section only; runs are comparable when these match."""
    return sha256_hex(canonical_json(config_to_dict(config)["task"]))


def with_workers(config: SimConfig, workers: int) -> SimConfig:
    """Copy with a worker count; workers never enter the config hash."""
    return replace(config, workers=max(1, int(workers)))
