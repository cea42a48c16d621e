"""Run configuration: one JSON document driving data, training, and reports.

Unknown keys are rejected at every level so a typo cannot silently fall back
to a default, and the canonical SHA-256 of the parsed document is embedded in
every checkpoint and report it produces.
"""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass
from pathlib import Path

from .adapters import SCOPE_PER_DOMAIN, SCOPE_SHARED, FreezePolicy
from .nca import ArchConfig
from .training import TrainConfig

CONFIG_SCHEMA_VERSION = 1


class UsageError(Exception):
    """Bad command line or configuration input."""


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    arch: ArchConfig = ArchConfig()
    train: TrainConfig = TrainConfig()
    policy: FreezePolicy = FreezePolicy.NCADAPT
    perception_scope: str = SCOPE_SHARED
    nqm_rule: str = "min"
    n_samples: int = 10
    data_dir: str = "data"
    runs_dir: str = "runs"

    def to_dict(self) -> dict:
        arch = dataclasses.asdict(self.arch)
        arch["kernels"] = list(self.arch.kernels)
        arch["steps"] = list(self.arch.steps)
        return {
            "schema_version": CONFIG_SCHEMA_VERSION,
            "seed": self.seed,
            "paths": {"data": self.data_dir, "runs": self.runs_dir},
            "arch": arch,
            "train": dataclasses.asdict(self.train),
            "policy": self.policy.value,
            "perception_scope": self.perception_scope,
            "nqm_rule": self.nqm_rule,
            "n_samples": self.n_samples,
        }

    def canonical_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, separators=(",", ":"))

    def config_hash(self) -> str:
        return hashlib.sha256(self.canonical_json().encode()).hexdigest()


def _take(doc: dict, context: str, known):
    unknown = set(doc) - set(known)
    if unknown:
        raise UsageError(f"unknown {context} keys: {sorted(unknown)}")


def parse_config(doc: dict) -> RunConfig:
    """Strict parse of a config document; missing keys take defaults."""
    if not isinstance(doc, dict):
        raise UsageError("config must be a JSON object")
    _take(doc, "config", {"schema_version", "seed", "paths", "arch", "train",
                          "policy", "perception_scope", "nqm_rule", "n_samples"})
    version = doc.get("schema_version", CONFIG_SCHEMA_VERSION)
    if version != CONFIG_SCHEMA_VERSION:
        raise UsageError(f"unsupported config schema_version {version}")

    paths = doc.get("paths", {})
    _take(paths, "paths", {"data", "runs"})

    arch_doc = dict(doc.get("arch", {}))
    _take(arch_doc, "arch", {f.name for f in dataclasses.fields(ArchConfig)})
    if "kernels" in arch_doc:
        arch_doc["kernels"] = tuple(arch_doc["kernels"])
    if "steps" in arch_doc:
        arch_doc["steps"] = tuple(arch_doc["steps"])
    train_doc = dict(doc.get("train", {}))
    _take(train_doc, "train", {f.name for f in dataclasses.fields(TrainConfig)})

    try:
        arch = ArchConfig(**arch_doc)
        train = TrainConfig(**train_doc)
        policy = FreezePolicy.parse(doc.get("policy", "ncadapt"))
    except ValueError as exc:
        raise UsageError(str(exc)) from None

    scope = doc.get("perception_scope", SCOPE_SHARED)
    if scope not in (SCOPE_SHARED, SCOPE_PER_DOMAIN):
        raise UsageError(f"unknown perception_scope {scope!r}")
    rule = doc.get("nqm_rule", "min")
    if rule not in ("min", "max"):
        raise UsageError(f"nqm_rule must be 'min' or 'max', got {rule!r}")
    n_samples = int(doc.get("n_samples", 10))
    if n_samples < 2:
        raise UsageError("n_samples must be >= 2")

    return RunConfig(
        seed=int(doc.get("seed", 0)),
        arch=arch,
        train=train,
        policy=policy,
        perception_scope=scope,
        nqm_rule=rule,
        n_samples=n_samples,
        data_dir=str(paths.get("data", "data")),
        runs_dir=str(paths.get("runs", "runs")),
    )


def load_config(path) -> RunConfig:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"config is not valid JSON: {exc}") from None
    return parse_config(doc)
