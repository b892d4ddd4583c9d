"""Checkpoint files: a JSON manifest plus a raw little-endian tensor blob."""

from __future__ import annotations

import hashlib
import json
import subprocess
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import __version__


class IncompatibleCheckpointError(ValueError):
    pass


def build_id() -> str:
    """``git describe`` of the source tree when available, else the package version."""
    try:
        out = subprocess.run(
            ["git", "describe", "--always", "--dirty", "--tags"],
            cwd=Path(__file__).resolve().parent, capture_output=True, text=True, timeout=5,
        )
        if out.returncode == 0 and out.stdout.strip():
            return f"{__version__}+{out.stdout.strip()}"
    except (OSError, subprocess.SubprocessError):
        pass
    return __version__


def relation_digest(relations) -> str:
    return hashlib.sha256("\n".join(relations).encode()).hexdigest()


def params_digest(params: dict[str, np.ndarray]) -> str:
    h = hashlib.sha256()
    for name in sorted(params):
        h.update(name.encode())
        h.update(np.ascontiguousarray(params[name], dtype="<f8").tobytes())
    return h.hexdigest()


@dataclass
class Checkpoint:
    params: dict[str, np.ndarray]
    config: dict  # TrainConfig fields
    vocab_hash: str
    relation_hash: str
    num_relations: int  # base relation count of the KG
    vocab_size: int
    best_metric: float = 0.0
    epoch: int = 0
    run_config: dict = field(default_factory=dict)
    build: str = field(default_factory=build_id)

    def save(self, path: str | Path) -> Path:
        """Write ``path`` (manifest) and ``path`` with suffix ``.bin`` (tensor data)."""
        path = Path(path)
        blob_path = path.with_suffix(".bin")
        tensors, offset = [], 0
        with open(blob_path, "wb") as fh:
            for name in sorted(self.params):
                arr = np.ascontiguousarray(self.params[name], dtype="<f8")
                fh.write(arr.tobytes())
                tensors.append({"name": name, "shape": list(arr.shape), "dtype": "float64",
                                "offset": offset, "nbytes": arr.nbytes})
                offset += arr.nbytes
        manifest = {
            "format": "rearev-checkpoint/1",
            "blob": blob_path.name,
            "tensors": tensors,
            "config": self.config,
            "vocab_hash": self.vocab_hash,
            "relation_hash": self.relation_hash,
            "num_relations": self.num_relations,
            "vocab_size": self.vocab_size,
            "best_metric": self.best_metric,
            "epoch": self.epoch,
            "run_config": self.run_config,
            "build": self.build,
        }
        path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        manifest = json.loads(path.read_text())
        raw = (path.parent / manifest["blob"]).read_bytes()
        params = {}
        for t in manifest["tensors"]:
            chunk = raw[t["offset"]:t["offset"] + t["nbytes"]]
            params[t["name"]] = np.frombuffer(chunk, dtype="<f8").reshape(t["shape"]).astype(np.float64)
        return cls(
            params=params, config=manifest["config"], vocab_hash=manifest["vocab_hash"],
            relation_hash=manifest["relation_hash"], num_relations=manifest["num_relations"],
            vocab_size=manifest["vocab_size"], best_metric=manifest["best_metric"],
            epoch=manifest["epoch"], run_config=manifest.get("run_config", {}),
            build=manifest.get("build", ""),
        )

    def check_compatible(self, vocab_hash: str, relation_hash: str) -> None:
        if vocab_hash != self.vocab_hash:
            raise IncompatibleCheckpointError("token vocabulary differs from the checkpoint's")
        if relation_hash != self.relation_hash:
            raise IncompatibleCheckpointError("relation vocabulary differs from the checkpoint's")
