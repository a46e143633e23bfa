"""Checkpoint archives.

A checkpoint is a zip file holding::

    config.json   canonical model configuration
    meta.json     format version, epoch, seed, library versions
    params.npz    model parameters as named float arrays
    optim.npz     optimizer tensors (only when saved with an optimizer)
    digest.txt    sha256 over the members above, in that order

Files are written to a temp file and renamed into place, so a crash never
leaves a half-written checkpoint behind. Loading verifies the digest and the
model configuration before any parameters are touched; a round trip restores
parameters bit-exactly.
"""

from __future__ import annotations

import hashlib
import io
import json
import os
import tempfile
import zipfile
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable

import numpy as np
import torch

from .errors import CheckpointIntegrityError, IncompatibleCheckpointError
from .network import CropScorer, ModelConfig, build_model

FORMAT_VERSION = 1
_MEMBER_ORDER = ("config.json", "meta.json", "params.npz", "optim.npz")


def _digest(members: dict[str, bytes]) -> str:
    sha = hashlib.sha256()
    for name in _MEMBER_ORDER:
        if name in members:
            sha.update(name.encode())
            sha.update(members[name])
    return f"sha256:{sha.hexdigest()}"


def _npz_bytes(arrays: dict[str, np.ndarray]) -> bytes:
    buf = io.BytesIO()
    np.savez(buf, **arrays)
    return buf.getvalue()


def _npz_load(data: bytes) -> dict[str, np.ndarray]:
    with np.load(io.BytesIO(data), allow_pickle=False) as npz:
        return {k: npz[k] for k in npz.files}


def _pack_optimizer(state_dict: dict) -> tuple[dict[str, np.ndarray], dict]:
    arrays: dict[str, np.ndarray] = {}
    skeleton: dict = {"param_groups": state_dict["param_groups"], "state": {}}
    for pid, slots in state_dict["state"].items():
        out = {}
        for name, value in slots.items():
            if isinstance(value, torch.Tensor):
                key = f"{pid}.{name}"
                arrays[key] = value.detach().cpu().numpy()
                out[name] = {"__tensor__": key}
            else:
                out[name] = value
        skeleton["state"][str(pid)] = out
    return arrays, skeleton


def _unpack_optimizer(skeleton: dict, arrays: dict[str, np.ndarray]) -> dict:
    state = {}
    for pid, slots in skeleton["state"].items():
        out = {}
        for name, value in slots.items():
            if isinstance(value, dict) and "__tensor__" in value:
                out[name] = torch.from_numpy(arrays[value["__tensor__"]].copy())
            else:
                out[name] = value
        state[int(pid)] = out
    return {"state": state, "param_groups": skeleton["param_groups"]}


@dataclass
class LoadedCheckpoint:
    model: CropScorer
    config: ModelConfig
    meta: dict
    optimizer_state: dict | None


def save_checkpoint(path: str | Path, model: CropScorer, *, epoch: int, seed: int,
                    optimizer: torch.optim.Optimizer | None = None,
                    extra: dict | None = None) -> None:
    path = Path(path)
    meta = {
        "format_version": FORMAT_VERSION,
        "epoch": int(epoch),
        "seed": int(seed),
        "torch": torch.__version__,
        "numpy": np.__version__,
    }
    if extra:
        meta.update(extra)
    params = {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}
    members: dict[str, bytes] = {
        "config.json": json.dumps(model.config.to_dict(), sort_keys=True, indent=1).encode(),
        "meta.json": json.dumps(meta, sort_keys=True, indent=1).encode(),
        "params.npz": _npz_bytes(params),
    }
    if optimizer is not None:
        arrays, skeleton = _pack_optimizer(optimizer.state_dict())
        arrays["__skeleton__"] = np.frombuffer(json.dumps(skeleton).encode(), dtype=np.uint8)
        members["optim.npz"] = _npz_bytes(arrays)

    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as fh:
            with zipfile.ZipFile(fh, "w", zipfile.ZIP_STORED) as zf:
                for name in _MEMBER_ORDER:
                    if name in members:
                        zf.writestr(name, members[name])
                zf.writestr("digest.txt", _digest(members))
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _read_members(path: Path) -> dict[str, bytes]:
    try:
        with zipfile.ZipFile(path) as zf:
            return {name: zf.read(name) for name in zf.namelist()}
    except (FileNotFoundError, zipfile.BadZipFile) as exc:
        raise CheckpointIntegrityError(f"cannot read checkpoint {path}: {exc}") from exc


def load_checkpoint(path: str | Path, *,
                    expected_config: ModelConfig | None = None) -> LoadedCheckpoint:
    """Load a checkpoint, verifying its digest and configuration.

    ``expected_config``, when given, must match the stored configuration
    exactly; a mismatch raises :class:`IncompatibleCheckpointError` before any
    parameters are restored.
    """
    path = Path(path)
    members = _read_members(path)
    for required in ("config.json", "meta.json", "params.npz", "digest.txt"):
        if required not in members:
            raise CheckpointIntegrityError(f"{path}: missing member {required!r}")
    stored = members["digest.txt"].decode()
    actual = _digest({k: v for k, v in members.items() if k != "digest.txt"})
    if stored != actual:
        raise CheckpointIntegrityError(f"{path}: digest mismatch (stored {stored}, computed {actual})")

    meta = json.loads(members["meta.json"])
    if meta.get("format_version") != FORMAT_VERSION:
        raise IncompatibleCheckpointError(
            f"{path}: format version {meta.get('format_version')} != {FORMAT_VERSION}")
    config = ModelConfig.from_dict(json.loads(members["config.json"]))
    if expected_config is not None and config != expected_config:
        raise IncompatibleCheckpointError(
            f"{path}: stored config {config} does not match expected {expected_config}")

    model = build_model(config, seed=int(meta.get("seed", 0)))
    params = _npz_load(members["params.npz"])
    state = model.state_dict()
    missing = sorted(set(state) - set(params))
    unexpected = sorted(set(params) - set(state))
    if missing or unexpected:
        raise IncompatibleCheckpointError(
            f"{path}: parameter names differ (missing {missing}, unexpected {unexpected})")
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in params.items()})

    optim_state = None
    if "optim.npz" in members:
        arrays = _npz_load(members["optim.npz"])
        skeleton = json.loads(arrays.pop("__skeleton__").tobytes().decode())
        optim_state = _unpack_optimizer(skeleton, arrays)
    return LoadedCheckpoint(model=model, config=config, meta=meta, optimizer_state=optim_state)


def checkpoint_members(path: str | Path) -> Iterable[str]:
    """Member names of a checkpoint archive (diagnostics helper)."""
    return list(_read_members(Path(path)))
