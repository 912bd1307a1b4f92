"""Parameter checkpoints: a JSON manifest plus one little-endian blob."""
import shutil
from pathlib import Path
from typing import Dict, List, Optional, Union

import numpy as np
from loguru import logger
from pydantic import BaseModel

from app.exceptions import LabError
from app.services.mimo_model import SegNetBase

MANIFEST = "manifest.json"
BLOB = "params.bin"


class ArrayEntry(BaseModel):
    name: str
    shape: List[int]
    dtype: str
    offset: int
    count: int


class CheckpointManifest(BaseModel):
    iteration: int
    params: List[ArrayEntry]
    momentum: List[ArrayEntry] = []


def checkpoint_dir(root: Union[str, Path], iteration: int) -> Path:
    return Path(root) / "checkpoints" / f"iter_{iteration:06d}"


def _pack(arrays: Dict[str, np.ndarray], offset: int, chunks: List[bytes]) -> List[ArrayEntry]:
    entries = []
    for name in sorted(arrays):
        array = arrays[name]
        le = array.astype(array.dtype.newbyteorder("<"), copy=False)
        entries.append(
            ArrayEntry(name=name, shape=list(array.shape), dtype=array.dtype.str.lstrip("<>=|"), offset=offset, count=array.size)
        )
        raw = np.ascontiguousarray(le).tobytes()
        chunks.append(raw)
        offset += len(raw)
    return entries


def save_checkpoint(
    root: Union[str, Path],
    iteration: int,
    model: SegNetBase,
    momentum: Optional[Dict[str, np.ndarray]] = None,
    keep: int = 0,
) -> Path:
    """Write checkpoints/iter_<n>/ under ``root``; keep > 0 prunes older ones"""
    target = checkpoint_dir(root, iteration)
    target.mkdir(parents=True, exist_ok=True)
    chunks: List[bytes] = []
    params = _pack({name: p.data for name, p in model.named_parameters().items()}, 0, chunks)
    offset = sum(len(c) for c in chunks)
    buffers = _pack(momentum or {}, offset, chunks)
    (target / BLOB).write_bytes(b"".join(chunks))
    manifest = CheckpointManifest(iteration=iteration, params=params, momentum=buffers)
    (target / MANIFEST).write_text(manifest.model_dump_json(indent=2))
    logger.info(f"Saved checkpoint {target}")
    if keep > 0:
        prune_checkpoints(root, keep)
    return target


def list_checkpoints(root: Union[str, Path]) -> List[Path]:
    base = Path(root) / "checkpoints"
    if not base.is_dir():
        return []
    return sorted(p for p in base.iterdir() if (p / MANIFEST).is_file())


def prune_checkpoints(root: Union[str, Path], keep: int) -> None:
    for stale in list_checkpoints(root)[:-keep]:
        shutil.rmtree(stale)
        logger.debug(f"Pruned checkpoint {stale}")


def _unpack(blob: bytes, entries: List[ArrayEntry]) -> Dict[str, np.ndarray]:
    out = {}
    for entry in entries:
        dtype = np.dtype(entry.dtype).newbyteorder("<")
        array = np.frombuffer(blob, dtype=dtype, count=entry.count, offset=entry.offset)
        out[entry.name] = array.astype(dtype.newbyteorder("="), copy=True).reshape(entry.shape)
    return out


def load_checkpoint(path: Union[str, Path], model: SegNetBase) -> Dict[str, object]:
    """Copy saved parameters into ``model``; returns iteration and momentum buffers"""
    path = Path(path)
    if not (path / MANIFEST).is_file():
        raise LabError(f"no checkpoint at {path}")
    manifest = CheckpointManifest.model_validate_json((path / MANIFEST).read_text())
    blob = (path / BLOB).read_bytes()
    saved = _unpack(blob, manifest.params)
    named = model.named_parameters()
    missing = sorted(set(named) ^ set(saved))
    if missing:
        raise LabError(f"checkpoint and model disagree on parameters: {', '.join(missing)}")
    for name, tensor in named.items():
        if saved[name].shape != tensor.shape:
            raise LabError(f"parameter {name}: checkpoint shape {saved[name].shape} != model {tensor.shape}")
        tensor.data[...] = saved[name].astype(tensor.dtype)
    return {"iteration": manifest.iteration, "momentum": _unpack(blob, manifest.momentum)}


def latest_checkpoint(root: Union[str, Path]) -> Optional[Path]:
    found = list_checkpoints(root)
    return found[-1] if found else None
