"""Checkpoint directories: ``metadata.json`` plus one safetensors blob per group.

Models expose ``group_of(state_key) -> str``; every state-dict entry belongs to
exactly one named group, and groups are what freezing and hashing act on.
"""
from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import torch
from safetensors.torch import load as st_load
from safetensors.torch import save as st_save

from .exceptions import InvalidInputError

METADATA_FILE = "metadata.json"


def split_state(model: torch.nn.Module) -> dict[str, dict[str, torch.Tensor]]:
    groups: dict[str, dict[str, torch.Tensor]] = {}
    for key, value in model.state_dict().items():
        groups.setdefault(model.group_of(key), {})[key] = value.detach().clone().contiguous()
    return groups


def group_parameters(model: torch.nn.Module) -> dict[str, list[torch.nn.Parameter]]:
    out: dict[str, list[torch.nn.Parameter]] = {}
    for name, p in model.named_parameters():
        out.setdefault(model.group_of(name), []).append(p)
    return out


def tensor_blob(tensors: dict[str, torch.Tensor]) -> bytes:
    return st_save({k: v.contiguous() for k, v in tensors.items()})


def group_hashes(model: torch.nn.Module) -> dict[str, str]:
    return {name: hashlib.sha256(tensor_blob(t)).hexdigest() for name, t in split_state(model).items()}


def canonical_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2, ensure_ascii=False) + "\n"


@dataclass
class Checkpoint:
    metadata: dict
    groups: dict[str, dict[str, torch.Tensor]] = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: torch.nn.Module, **metadata) -> "Checkpoint":
        return cls(metadata=dict(metadata), groups=split_state(model))

    def state_dict(self) -> dict[str, torch.Tensor]:
        state = {}
        for tensors in self.groups.values():
            state.update(tensors)
        return state

    def load_into(self, model: torch.nn.Module, strict: bool = True) -> torch.nn.Module:
        model.load_state_dict(self.state_dict(), strict=strict)
        return model

    def group_hash(self, name: str) -> str:
        return hashlib.sha256(tensor_blob(self.groups[name])).hexdigest()

    def save(self, path: str | Path) -> Path:
        path = Path(path)
        path.mkdir(parents=True, exist_ok=True)
        meta = dict(self.metadata, groups=sorted(self.groups))
        (path / METADATA_FILE).write_text(canonical_json(meta), encoding="utf-8")
        for name, tensors in self.groups.items():
            (path / f"{name}.safetensors").write_bytes(tensor_blob(tensors))
        return path

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        path = Path(path)
        meta_file = path / METADATA_FILE
        if not meta_file.exists():
            raise InvalidInputError(f"{path} is not a checkpoint directory (no {METADATA_FILE})")
        meta = json.loads(meta_file.read_text(encoding="utf-8"))
        names = meta.pop("groups")
        groups = {n: st_load((path / f"{n}.safetensors").read_bytes()) for n in names}
        return cls(metadata=meta, groups=groups)
