"""Checkpoint archive format shared by the backbone, pretraining, and fusion stages.

A checkpoint is a single ``.npz`` file holding named float arrays (one per
parameter, keys like ``backbone/stages.0.0.ffn.fc1.weight``) plus a JSON
header under the reserved key ``__header__``. The header carries the config
the arrays were trained with and, for stage-2 checkpoints, the content hash
of the stage-1 archive they depend on.
"""

from __future__ import annotations

import hashlib
import json
from pathlib import Path
from typing import Any

import numpy as np

from .errors import ValidationError

HEADER_KEY = "__header__"


def save_archive(path: str | Path, arrays: dict[str, np.ndarray], header: dict[str, Any]) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    if HEADER_KEY in arrays:
        raise ValidationError(f"array name {HEADER_KEY!r} is reserved")
    payload = {k: np.asarray(v) for k, v in arrays.items()}
    payload[HEADER_KEY] = np.frombuffer(
        json.dumps(header, sort_keys=True).encode("utf-8"), dtype=np.uint8
    )
    with open(path, "wb") as fh:
        np.savez(fh, **payload)
    return path


def load_archive(path: str | Path) -> tuple[dict[str, np.ndarray], dict[str, Any]]:
    path = Path(path)
    if not path.exists():
        raise ValidationError(f"checkpoint not found: {path}")
    with np.load(path) as npz:
        if HEADER_KEY not in npz:
            raise ValidationError(f"not a checkpoint archive (missing header): {path}")
        header = json.loads(bytes(npz[HEADER_KEY].tobytes()).decode("utf-8"))
        arrays = {k: npz[k] for k in npz.files if k != HEADER_KEY}
    return arrays, header


def content_hash(path: str | Path) -> str:
    """SHA-256 of the archive file; used to pin cross-stage references."""
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for block in iter(lambda: fh.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def state_dict_arrays(module, prefix: str = "") -> dict[str, np.ndarray]:
    """Torch state dict as plain numpy arrays, keys optionally dot-prefixed."""
    lead = f"{prefix}." if prefix else ""
    out = {}
    for k, v in module.state_dict().items():
        out[lead + k] = v.detach().cpu().numpy()
    return out


def load_state_arrays(module, arrays: dict[str, np.ndarray], prefix: str = "") -> None:
    import torch

    lead = f"{prefix}." if prefix else ""
    state = {}
    for k, v in module.state_dict().items():
        full = lead + k
        if full not in arrays:
            raise ValidationError(f"checkpoint missing parameter {full!r}")
        state[k] = torch.from_numpy(np.asarray(arrays[full])).to(v.dtype)
    try:
        module.load_state_dict(state)
    except RuntimeError as exc:
        raise ValidationError(f"checkpoint does not fit module: {exc}") from exc
