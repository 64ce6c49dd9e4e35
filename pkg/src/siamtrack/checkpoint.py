"""Checkpoint container: named parameter arrays plus the model configuration.

Format: a numpy ``.npz`` archive holding

* ``__header__``: a UTF-8 JSON blob (stored as a uint8 array, no pickling)
  with the format tag, the full ModelConfig dict, per-array dtypes, and any
  caller-supplied metadata;
* ``param:<name>`` / ``buffer:<name>``: one array per model parameter and
  buffer (buffers carry the normalization running statistics).

Reload rebuilds the model from the stored config and copies every array
back bit-exactly.
"""

from __future__ import annotations

import json

import numpy as np
import torch

from .errors import ConfigError
from .model import ModelConfig, SiamModel, build_model

FORMAT_TAG = "siamtrack-checkpoint-v1"


def save_checkpoint(path, model: SiamModel, meta: dict | None = None) -> None:
    arrays: dict[str, np.ndarray] = {}
    dtypes: dict[str, str] = {}
    for name, p in model.named_parameters():
        arrays[f"param:{name}"] = p.detach().cpu().numpy()
        dtypes[f"param:{name}"] = str(p.dtype)
    for name, b in model.named_buffers():
        arrays[f"buffer:{name}"] = b.detach().cpu().numpy()
        dtypes[f"buffer:{name}"] = str(b.dtype)
    header = {
        "format": FORMAT_TAG,
        "model": model.cfg.to_dict(),
        "dtypes": dtypes,
        "meta": meta or {},
    }
    blob = np.frombuffer(json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8)
    np.savez(path, __header__=blob, **arrays)


def load_checkpoint(path) -> tuple[SiamModel, dict]:
    """Rebuild the model from a checkpoint; returns (model, meta)."""
    with np.load(path, allow_pickle=False) as data:
        if "__header__" not in data:
            raise ConfigError(f"{path} is not a siamtrack checkpoint (missing header)")
        header = json.loads(bytes(data["__header__"]).decode("utf-8"))
        if header.get("format") != FORMAT_TAG:
            raise ConfigError(f"unsupported checkpoint format: {header.get('format')!r}")
        cfg = ModelConfig.from_dict(header["model"])
        model = build_model(cfg, seed=0)
        seen = set()
        with torch.no_grad():
            for name, p in model.named_parameters():
                key = f"param:{name}"
                if key not in data:
                    raise ConfigError(f"checkpoint missing parameter {name}")
                p.copy_(torch.from_numpy(np.asarray(data[key])))
                seen.add(key)
            for name, b in model.named_buffers():
                key = f"buffer:{name}"
                if key not in data:
                    raise ConfigError(f"checkpoint missing buffer {name}")
                b.copy_(torch.from_numpy(np.asarray(data[key])))
                seen.add(key)
        extra = set(data.files) - seen - {"__header__"}
        if extra:
            raise ConfigError(f"checkpoint has arrays not present in the model: {sorted(extra)}")
    model.eval()
    return model, header["meta"]
