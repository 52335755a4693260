"""Strict JSON configuration loading, hashing, and run manifests.

Configs are flat JSON objects whose keys mirror the dataclass fields of
SceneSpec and PipelineConfig. Unknown keys are rejected by name so a typo
cannot silently fall back to a default.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from pathlib import Path

from .errors import ConfigError
from .pipeline import PipelineConfig
from .sim import SceneSpec


def load_json(path):
    path = Path(path)
    try:
        text = path.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read {path}: {exc}") from exc
    try:
        doc = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigError(f"{path}: top level must be a JSON object")
    return doc


def _coerce(cls, doc, label):
    fields = {f.name: f for f in dataclasses.fields(cls)}
    unknown = sorted(set(doc) - set(fields))
    if unknown:
        raise ConfigError(f"unknown {label} key: {unknown[0]!r}")
    kwargs = {}
    for name, value in doc.items():
        f = fields[name]
        if value is None:
            kwargs[name] = None
            continue
        if isinstance(value, bool):
            kwargs[name] = value
        elif f.type in ("int", int):
            if isinstance(value, float) and not value.is_integer():
                raise ConfigError(f"{label} key {name!r} must be an integer")
            kwargs[name] = int(value)
        elif f.type in ("float", float):
            kwargs[name] = float(value)
        else:
            kwargs[name] = value
    try:
        return cls(**kwargs)
    except TypeError as exc:
        raise ConfigError(f"bad {label} config: {exc}") from exc


def scene_from_dict(doc):
    spec = _coerce(SceneSpec, doc, "scene")
    try:
        spec.validate()
    except Exception as exc:
        raise ConfigError(str(exc)) from exc
    return spec


def pipeline_from_dict(doc):
    cfg = _coerce(PipelineConfig, doc, "pipeline")
    cfg.validate()
    return cfg


def scene_to_dict(spec):
    return dataclasses.asdict(spec)


def canonical_json(obj):
    return json.dumps(obj, sort_keys=True, separators=(",", ":"),
                      allow_nan=False)


def config_hash(obj):
    """Stable digest of a canonicalized config mapping."""
    return hashlib.sha256(canonical_json(obj).encode("utf-8")).hexdigest()


@dataclasses.dataclass
class RunManifest:
    """Snapshot of everything needed to reproduce a simulate run."""

    scene: dict
    pipeline: dict
    seed: int
    artifacts: dict
    hash: str = ""

    def finalize(self):
        self.hash = config_hash(
            {"scene": self.scene, "pipeline": self.pipeline,
             "seed": self.seed}
        )
        return self

    def write(self, path):
        body = dataclasses.asdict(self.finalize())
        Path(path).write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")
        return Path(path)


def read_manifest(path):
    doc = load_json(path)
    for key in ("scene", "pipeline", "seed", "artifacts", "hash"):
        if key not in doc:
            raise ConfigError(f"{path}: manifest missing {key!r}")
    return RunManifest(scene=doc["scene"], pipeline=doc["pipeline"],
                       seed=int(doc["seed"]), artifacts=doc["artifacts"],
                       hash=doc["hash"])
