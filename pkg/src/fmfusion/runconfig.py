"""Run configuration: one JSON document with a section per command.

Relative paths inside a config resolve against the config file's directory.
Every command writes ``run_manifest.json`` into its output directory listing
the config hash and content hashes of all inputs and outputs.
"""

from __future__ import annotations

import copy
import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

from .errors import ConfigInvalid, DataError
from .report import dumps

MANIFEST_NAME = "run_manifest.json"


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def sha256_text(text: str) -> str:
    return hashlib.sha256(text.encode()).hexdigest()


def parse_override(item: str):
    """``a.b.c=value`` with value parsed as JSON when possible, else kept as a string."""
    if "=" not in item:
        raise ConfigInvalid(f"override {item!r} is not of the form key=value")
    key, raw = item.split("=", 1)
    try:
        value = json.loads(raw)
    except json.JSONDecodeError:
        value = raw
    return key.strip().split("."), value


def apply_override(doc: dict, keys, value) -> None:
    node = doc
    for k in keys[:-1]:
        nxt = node.setdefault(k, {})
        if not isinstance(nxt, dict):
            raise ConfigInvalid(f"cannot override inside non-object key {k!r}")
        node = nxt
    node[keys[-1]] = value


@dataclass
class RunConfig:
    doc: dict
    base_dir: Path

    @classmethod
    def load(cls, path=None, overrides=()):
        if path is None:
            doc, base = {}, Path.cwd()
        else:
            path = Path(path)
            if not path.exists():
                raise DataError(f"missing file: {path}")
            try:
                doc = json.loads(path.read_text())
            except json.JSONDecodeError as exc:
                raise ConfigInvalid(f"{path}: invalid JSON ({exc})") from None
            if not isinstance(doc, dict):
                raise ConfigInvalid(f"{path}: top level must be an object")
            base = path.resolve().parent
        doc = copy.deepcopy(doc)
        for item in overrides:
            apply_override(doc, *parse_override(item))
        return cls(doc, base)

    @property
    def seed(self) -> int:
        if "seed" not in self.doc:
            raise ConfigInvalid("config needs an explicit integer 'seed'")
        seed = self.doc["seed"]
        if isinstance(seed, bool) or not isinstance(seed, int) or seed < 0:
            raise ConfigInvalid("seed must be a non-negative integer")
        return seed

    def section(self, name: str) -> dict:
        sec = self.doc.get(name, {})
        if not isinstance(sec, dict):
            raise ConfigInvalid(f"section {name!r} must be an object")
        return sec

    def path(self, value) -> Path:
        p = Path(value)
        return p if p.is_absolute() else self.base_dir / p

    def output_dir(self, default="out") -> Path:
        return self.path(self.doc.get("output_dir", default))


@dataclass
class RunRecord:
    """Collects inputs and outputs of one command and writes the manifest."""

    command: str
    out_dir: Path
    config: dict
    inputs: dict = field(default_factory=dict)
    outputs: list = field(default_factory=list)

    def use(self, path) -> Path:
        path = Path(path)
        if not path.exists():
            raise DataError(f"missing file: {path}")
        self.inputs[str(path)] = path
        return path

    def made(self, *paths) -> None:
        for p in paths:
            if isinstance(p, (list, tuple)):
                self.made(*p)
            else:
                self.outputs.append(Path(p))

    def write(self) -> Path:
        outs = {}
        for p in sorted(set(self.outputs)):
            try:
                key = p.relative_to(self.out_dir).as_posix()
            except ValueError:
                key = p.as_posix()
            outs[key] = sha256_file(p)
        ins = {}
        for key, p in sorted(self.inputs.items()):
            try:
                key = p.resolve().relative_to(self.out_dir.resolve().parent).as_posix()
            except ValueError:
                pass
            ins[key] = sha256_file(p) if p.is_file() else None
        cfg_text = dumps(self.config)
        doc = {"command": self.command, "config": self.config, "config_sha256": sha256_text(cfg_text),
               "inputs": ins, "outputs": outs}
        path = self.out_dir / MANIFEST_NAME
        path.write_text(dumps(doc))
        return path
