"""YAML experiment files.

Keys mirror the command-line flags, so a file and the equivalent command
line describe the same run::

    command: analyze        # analyze | simulate | compare | optimize | solve | meanfield
    scheme: fd              # implied for optimize (fd), solve (xd), meanfield
    K: 1
    c: 3
    w1: 0.4
    sweep:
      parameter: lambda
      values: [0.05, 0.1, 0.15]
    output: fd_sweep.csv    # omit for standard output
    format: csv             # csv | json
    slots: 1000000          # simulate / compare only
    warmup: 10000
    seed: 0
    workers: 2

Any model parameter flag (``M``, ``N``, ``lambda``, ``R``, ``Z1``, ...)
may appear at top level.  ``mode`` is the meanfield ``--mode`` flag.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import yaml

from .errors import ConfigError, InvalidParameterError
from .experiments import DEFAULTS, ExperimentSpec

COMMANDS = {
    "analyze": "analyze", "simulate": "simulate", "compare": "compare", "optimize": "optimize",
    "solve": "solve-mdp", "meanfield": "meanfield",
}
IMPLIED_SCHEME = {"optimize": "fd", "solve": "xd", "meanfield": "meanfield"}
RUN_KEYS = ("command", "scheme", "sweep", "output", "format", "slots", "warmup", "seed", "workers")
PARAM_KEYS = tuple(sorted({k for d in DEFAULTS.values() for k in d}))


@dataclass
class RunConfig:
    """An experiment plus the execution knobs that do not change its rows."""

    spec: ExperimentSpec
    workers: int | None = None


def _lines(node) -> dict[str, int]:
    if not isinstance(node, yaml.MappingNode):
        return {}
    return {k.value: k.start_mark.line + 1 for k, _ in node.value if isinstance(k, yaml.ScalarNode)}


def _int(doc, key, lines, default=None, minimum=0):
    v = doc.get(key, default)
    if v is None:
        return None
    if isinstance(v, bool) or not isinstance(v, int) or v < minimum:
        raise ConfigError(f"{key}: expected an integer >= {minimum}, got {v!r}", lines.get(key), key)
    return v


def parse_config(text: str, source: str = "<config>") -> RunConfig:
    try:
        node = yaml.compose(text, Loader=yaml.SafeLoader)
        doc = yaml.safe_load(text)
    except yaml.MarkedYAMLError as exc:
        mark = exc.problem_mark or exc.context_mark
        line = mark.line + 1 if mark is not None else None
        raise ConfigError(f"{source}:{line}: {exc.problem or exc}", line) from None
    except yaml.YAMLError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    if doc is None:
        raise ConfigError(f"{source}: empty configuration, expected a mapping with at least 'command'",
                          key_path="")
    if not isinstance(doc, dict):
        raise ConfigError(f"{source}: top level must be a mapping, got {type(doc).__name__}", key_path="")
    lines = _lines(node)
    doc = {str(k): v for k, v in doc.items()}

    unknown = sorted(set(doc) - set(RUN_KEYS) - set(PARAM_KEYS))
    if unknown:
        where = ", ".join(f"{k} (line {lines.get(k)})" for k in unknown)
        raise ConfigError(f"{source}: unknown keys: {where}", lines.get(unknown[0]), unknown[0])

    command = doc.get("command")
    if command not in COMMANDS:
        raise ConfigError(f"command: expected one of {', '.join(COMMANDS)}, got {command!r}",
                          lines.get("command"), "command")
    scheme = doc.get("scheme", IMPLIED_SCHEME.get(command))
    if command in IMPLIED_SCHEME and scheme != IMPLIED_SCHEME[command]:
        raise ConfigError(f"scheme: {command} runs scheme {IMPLIED_SCHEME[command]}, got {scheme!r}",
                          lines.get("scheme"), "scheme")
    if scheme is None:
        raise ConfigError("scheme: required for this command", None, "scheme")

    sweep = doc.get("sweep")
    if sweep is not None:
        if not isinstance(sweep, dict):
            raise ConfigError("sweep: expected a mapping with 'parameter' and 'values'", lines.get("sweep"),
                              "sweep")
        extra = sorted(set(sweep) - {"parameter", "values"})
        if extra:
            raise ConfigError(f"sweep: unknown keys: {', '.join(map(str, extra))}", lines.get("sweep"),
                              f"sweep.{extra[0]}")
        for k in ("parameter", "values"):
            if k not in sweep:
                raise ConfigError(f"sweep.{k}: missing", lines.get("sweep"), f"sweep.{k}")
        if not isinstance(sweep["values"], list):
            raise ConfigError("sweep.values: expected a list", lines.get("sweep"), "sweep.values")

    fmt = doc.get("format", "csv")
    output = doc.get("output")
    if output is not None and not isinstance(output, str):
        raise ConfigError("output: expected a path", lines.get("output"), "output")
    params = {k: doc[k] for k in PARAM_KEYS if k in doc}
    try:
        spec = ExperimentSpec(
            COMMANDS[command], scheme, params, sweep, {"path": output, "format": fmt},
            slots=_int(doc, "slots", lines, 1_000_000, 20), warmup=_int(doc, "warmup", lines, 10_000),
            seed=_int(doc, "seed", lines, 0))
    except ConfigError:
        raise
    except InvalidParameterError as exc:
        raise ConfigError(f"{source}: {exc}") from None
    return RunConfig(spec, _int(doc, "workers", lines, None, 1))


def load_config(path) -> RunConfig:
    """Read and validate an experiment file."""
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc.strerror}") from None
    return parse_config(text, str(path))


def dump_config(cfg: RunConfig) -> str:
    """YAML text that :func:`parse_config` maps back to ``cfg``."""
    spec = cfg.spec
    command = next(k for k, v in COMMANDS.items() if v == spec.mode)
    doc: dict = {"command": command, "scheme": spec.scheme, **spec.parameters}
    if spec.sweep is not None:
        doc["sweep"] = {"parameter": spec.sweep["parameter"], "values": list(spec.sweep["values"])}
    if spec.output.get("path") is not None:
        doc["output"] = spec.output["path"]
    doc["format"] = spec.output.get("format", "csv")
    doc.update(slots=spec.slots, warmup=spec.warmup, seed=spec.seed)
    if cfg.workers is not None:
        doc["workers"] = cfg.workers
    return yaml.safe_dump(doc, sort_keys=False)


__all__ = ["COMMANDS", "PARAM_KEYS", "RunConfig", "dump_config", "load_config", "parse_config"]
