"""Key-value configuration files and per-command run manifests.

Configuration is a flat `key = value` text format (``#`` comments).
Values parse as bool, int, float, or comma-separated tuples thereof,
falling back to strings. The same keys can be given inline on the
command line as ``key=value;key2=value2``. Keys are routed to the
scene / network / training / loss-weight configs by field name; loss
weights use a ``lambda_`` prefix (``lambda_sparse = 0``).
"""

from __future__ import annotations

import json
import subprocess
import time
from dataclasses import fields
from pathlib import Path

from .errors import UsageError
from .losses import LossWeights
from .network import NetworkConfig
from .synthetic import SceneConfig
from .training import TrainingConfig

_LAMBDA_PREFIX = "lambda_"


def _parse_scalar(token: str):
    token = token.strip()
    lowered = token.lower()
    if lowered in ("true", "false"):
        return lowered == "true"
    for cast in (int, float):
        try:
            return cast(token)
        except ValueError:
            continue
    return token


def parse_value(text: str):
    text = text.strip()
    if "," in text:
        return tuple(_parse_scalar(p) for p in text.split(",") if p.strip())
    return _parse_scalar(text)


def parse_config_text(text: str) -> dict:
    out = {}
    for lineno, line in enumerate(text.splitlines(), 1):
        line = line.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"config line {lineno}: expected key = value")
        key, value = line.split("=", 1)
        out[key.strip()] = parse_value(value)
    return out


def load_config_arg(arg: str | None) -> dict:
    """A path to a config file, or inline ``key=value;key2=value2``."""
    if arg is None:
        return {}
    path = Path(arg)
    if path.exists():
        return parse_config_text(path.read_text())
    if "=" in arg:
        return parse_config_text(arg.replace(";", "\n"))
    raise UsageError(f"config {arg!r}: no such file and not inline key=value")


def _field_names(cls) -> set:
    return {f.name for f in fields(cls)}


SECTIONS = {"scene": SceneConfig, "network": NetworkConfig,
            "training": TrainingConfig, "weights": LossWeights}


def route_config(overrides: dict, sections: tuple) -> dict:
    """Route flat keys into per-section constructor kwargs.

    ``sections`` lists the section names a command accepts, in priority
    order for ambiguous keys (e.g. k_bases exists in both the scene and
    network configs). Loss weights are addressed as ``lambda_<name>``.
    Unknown keys are usage errors.
    """
    buckets = {name: {} for name in sections}
    for key, value in overrides.items():
        if ("weights" in buckets and key.startswith(_LAMBDA_PREFIX)
                and key[len(_LAMBDA_PREFIX):] in _field_names(LossWeights)):
            buckets["weights"][key[len(_LAMBDA_PREFIX):]] = value
            continue
        for name in sections:
            if name != "weights" and key in _field_names(SECTIONS[name]):
                buckets[name][key] = value
                break
        else:
            raise UsageError(f"unknown configuration key {key!r}")
    return buckets


def _git_describe() -> str:
    try:
        out = subprocess.run(["git", "describe", "--always", "--dirty"],
                             capture_output=True, text=True, timeout=5,
                             cwd=Path(__file__).parent)
        if out.returncode == 0:
            return out.stdout.strip()
    except (OSError, subprocess.TimeoutExpired):
        pass
    return "unknown"


class ManifestTimer:
    """Collects everything a command run needs to be reproduced."""

    def __init__(self, command: str, args: dict):
        self.command = command
        self.args = {k: (str(v) if isinstance(v, Path) else v)
                     for k, v in args.items()
                     if not callable(v) and k != "func"}
        self.config_echo: dict = {}
        self.inputs: list[str] = []
        self.outputs: list[str] = []
        self._start = time.monotonic()

    def write(self, out_dir) -> Path:
        doc = {
            "command": self.command,
            "args": self.args,
            "config": self.config_echo,
            "seed": self.args.get("seed"),
            "inputs": sorted(self.inputs),
            "outputs": sorted(self.outputs),
            "build": _git_describe(),
            "elapsed_seconds": round(time.monotonic() - self._start, 3),
        }
        path = Path(out_dir) / "manifest.json"
        path.write_text(json.dumps(doc, indent=2, sort_keys=True))
        return path
