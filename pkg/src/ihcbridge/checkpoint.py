"""Self-describing checkpoint container.

A checkpoint is a ``torch.save`` archive of a plain dict::

    {
      "format": "ihcbridge-checkpoint",
      "version": 1,
      "kind": "stage1" | "stage2" | "surrogate",
      "step": int,
      "networks": {name: {"type": "generator"|"discriminator"|"posterior",
                          "spec": {...}, "state": state_dict}},
      "optimizers": {name: optimizer state_dict},
      "config": {...},          # snapshot of the run configuration
      "rng": {"numpy": ..., "torch": ...},
      "extra": {...},
    }

Loading checks ``format`` and ``version`` before anything else.
"""
from __future__ import annotations

import hashlib
import io
import pickle
import zipfile
from pathlib import Path
from typing import Any, Dict

import torch

FORMAT = "ihcbridge-checkpoint"
VERSION = 1
FILENAME = "checkpoint.pt"


class CheckpointError(RuntimeError):
    pass


def save_checkpoint(state: Dict[str, Any], path) -> Path:
    """Write ``state`` (without format/version keys) to ``path``.

    ``path`` may be a directory, in which case ``checkpoint.pt`` is used.
    """
    path = Path(path)
    if path.suffix != ".pt":
        path = path / FILENAME
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {"format": FORMAT, "version": VERSION, **state}
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = path.with_suffix(".tmp")
    tmp.write_bytes(buf.getvalue())
    tmp.replace(path)
    return path


def load_checkpoint(path) -> Dict[str, Any]:
    path = Path(path)
    if path.is_dir():
        path = path / FILENAME
    if not path.exists():
        raise CheckpointError(f"no checkpoint at {path}")
    try:
        payload = torch.load(path, map_location="cpu", weights_only=False)
    except (RuntimeError, EOFError, pickle.UnpicklingError, zipfile.BadZipFile, ValueError) as exc:
        raise CheckpointError(f"corrupt checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != FORMAT:
        raise CheckpointError(f"{path} is not an {FORMAT} file")
    if payload.get("version") != VERSION:
        raise CheckpointError(f"{path} has version {payload.get('version')!r}, expected {VERSION}")
    return payload


def state_checksum(module: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for name, tensor in sorted(module.state_dict().items()):
        h.update(name.encode())
        h.update(tensor.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
