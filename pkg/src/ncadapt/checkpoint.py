"""Immutable stage checkpoints: manifest.json + weights.bin + optimizer.bin.

The manifest lists every tensor (name, shape, byte offset/length, trainable
flag, owner) in a fixed order; weights.bin concatenates the little-endian
float32 payloads at those offsets, and optimizer.bin holds the Adam moments
the same way. Loading rebuilds the model structure from the embedded config
and domain list, then fills values byte-for-byte, so save -> load -> save is
a bitwise identity.
"""

from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .adapters import FreezePolicy, NcadaptModel
from .config import RunConfig, parse_config
from .data import DataError
from .tensor import Rng, Tensor
from .training import AdamState

CHECKPOINT_SCHEMA_VERSION = 1


def save_checkpoint(ckpt_dir, model: NcadaptModel, config: RunConfig, stage: int,
                    optimizer: AdamState | None = None, rng_state: dict | None = None) -> Path:
    ckpt_dir = Path(ckpt_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)

    tensors = []
    blobs = []
    offset = 0
    for p in model.named_params():
        payload = p.value.tobytes()
        tensors.append(
            {
                "name": p.name,
                "shape": [int(s) for s in p.value.shape],
                "offset": offset,
                "nbytes": len(payload),
                "trainable": bool(p.trainable),
                "owner": p.owner,
            }
        )
        blobs.append(payload)
        offset += len(payload)

    opt_entries = []
    opt_blobs = []
    opt_offset = 0
    optimizer = optimizer if optimizer is not None else AdamState()
    for kind, table in (("m", optimizer.m), ("v", optimizer.v)):
        for name in sorted(table):
            arr = np.ascontiguousarray(table[name], dtype="<f4")
            payload = arr.tobytes()
            opt_entries.append(
                {
                    "name": f"{kind}/{name}",
                    "shape": [int(s) for s in arr.shape],
                    "offset": opt_offset,
                    "nbytes": len(payload),
                }
            )
            opt_blobs.append(payload)
            opt_offset += len(payload)

    manifest = {
        "schema_version": CHECKPOINT_SCHEMA_VERSION,
        "stage": int(stage),
        "config_hash": config.config_hash(),
        "config": config.to_dict(),
        "policy": model.policy.value,
        "perception_scope": model.scope,
        "frozen": bool(model.frozen),
        "domains": list(model.domain_labels),
        "rng": rng_state or {"seed": config.seed, "stream": 0, "calls": 0},
        "tensors": tensors,
        "optimizer": {"step": optimizer.t, "tensors": opt_entries},
    }
    with open(ckpt_dir / "manifest.json", "w") as fh:
        json.dump(manifest, fh, indent=2, sort_keys=True)
        fh.write("\n")
    (ckpt_dir / "weights.bin").write_bytes(b"".join(blobs))
    (ckpt_dir / "optimizer.bin").write_bytes(b"".join(opt_blobs))
    return ckpt_dir


def _check_table(entries, blob, what):
    expected = 0
    for entry in entries:
        if entry["offset"] != expected:
            raise DataError(f"{what}: offset gap or overlap at {entry['name']}")
        expected += entry["nbytes"]
    if expected != len(blob):
        raise DataError(f"{what}: payload holds {len(blob)} bytes, manifest wants {expected}")


def load_checkpoint(ckpt_dir):
    """Restore (model, optimizer, config, manifest) from a checkpoint directory."""
    ckpt_dir = Path(ckpt_dir)
    manifest_path = ckpt_dir / "manifest.json"
    if not manifest_path.exists():
        raise DataError(f"no checkpoint manifest at {manifest_path}")
    manifest = json.loads(manifest_path.read_text())
    if manifest.get("schema_version") != CHECKPOINT_SCHEMA_VERSION:
        raise DataError(f"unsupported checkpoint schema {manifest.get('schema_version')}")

    try:
        config = parse_config(manifest["config"])
    except Exception as exc:
        raise DataError(f"checkpoint config invalid: {exc}") from None
    if config.config_hash() != manifest["config_hash"]:
        raise DataError("checkpoint config hash mismatch")

    weights = (ckpt_dir / "weights.bin").read_bytes()
    _check_table(manifest["tensors"], weights, "weights.bin")

    model = NcadaptModel(config.arch, policy=FreezePolicy.parse(manifest["policy"]),
                         scope=manifest["perception_scope"], rng=Rng(0))
    for label in manifest["domains"]:
        model.add_domain(label)
    model.frozen = bool(manifest["frozen"])
    copy_ids = set()
    for entry in manifest["tensors"]:
        name = entry["name"]
        if name.startswith("domain-") and (name.endswith(".kernel") or name.endswith(".bias")):
            copy_ids.add(int(name.split(".")[0].split("-")[1]))
    for did in sorted(copy_ids):
        if did not in model.head_perception:
            model._clone_perception(did, trainable=False)

    by_name = {p.name: p for p in model.named_params()}
    if set(by_name) != {e["name"] for e in manifest["tensors"]}:
        raise DataError("checkpoint tensor table does not match the model structure")
    for entry in manifest["tensors"]:
        p = by_name[entry["name"]]
        arr = np.frombuffer(weights[entry["offset"]:entry["offset"] + entry["nbytes"]],
                            dtype="<f4").reshape(entry["shape"])
        if tuple(entry["shape"]) != tuple(p.value.shape):
            raise DataError(f"checkpoint tensor {entry['name']} has shape {entry['shape']}")
        p.value = Tensor(arr)
        p.trainable = bool(entry["trainable"])

    optimizer = AdamState()
    opt_path = ckpt_dir / "optimizer.bin"
    opt_blob = opt_path.read_bytes() if opt_path.exists() else b""
    _check_table(manifest["optimizer"]["tensors"], opt_blob, "optimizer.bin")
    optimizer.t = int(manifest["optimizer"]["step"])
    for entry in manifest["optimizer"]["tensors"]:
        kind, name = entry["name"].split("/", 1)
        arr = np.frombuffer(opt_blob[entry["offset"]:entry["offset"] + entry["nbytes"]],
                            dtype="<f4").reshape(entry["shape"]).copy()
        (optimizer.m if kind == "m" else optimizer.v)[name] = arr

    return model, optimizer, config, manifest
