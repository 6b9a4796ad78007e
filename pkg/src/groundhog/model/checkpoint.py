"""GHT1 tensor container and the checkpoint directory layout.

A GHT1 file is ``b"GHT1"``, a little-endian u32 tensor count, and then per
tensor: u32 name length, UTF-8 name, u32 ndim, u64 dims, float32 LE data.

A checkpoint directory holds ``params.ght1``, ``optim.ght1`` (Adam moments
named ``m.<param>`` and ``v.<param>``) and ``manifest.json``. Nothing in it
depends on wall-clock time, so identical runs give identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .optim import AdamState
from .params import TrainConfig, param_shapes
from .vocab import Vocabulary

MAGIC = b"GHT1"
FORMAT = "groundhog-ckpt/1"


class CheckpointError(ValueError):
    pass


def encode_ght1(tensors: Mapping[str, np.ndarray]) -> bytes:
    out = [MAGIC, struct.pack("<I", len(tensors))]
    for name, arr in tensors.items():
        raw = name.encode("utf-8")
        a = np.ascontiguousarray(arr, dtype="<f4")
        out.append(struct.pack("<I", len(raw)) + raw)
        out.append(struct.pack("<I", a.ndim) + struct.pack(f"<{a.ndim}Q", *a.shape))
        out.append(a.tobytes())
    return b"".join(out)


def decode_ght1(buf: bytes) -> dict[str, np.ndarray]:
    if buf[:4] != MAGIC:
        raise CheckpointError("not a GHT1 container (bad magic)")
    pos = 4

    def take(n):
        nonlocal pos
        if pos + n > len(buf):
            raise CheckpointError("truncated GHT1 container")
        chunk = buf[pos : pos + n]
        pos += n
        return chunk

    (count,) = struct.unpack("<I", take(4))
    tensors: dict[str, np.ndarray] = {}
    for _ in range(count):
        (nlen,) = struct.unpack("<I", take(4))
        name = take(nlen).decode("utf-8")
        if name in tensors:
            raise CheckpointError(f"duplicate tensor name {name!r}")
        (ndim,) = struct.unpack("<I", take(4))
        dims = struct.unpack(f"<{ndim}Q", take(8 * ndim))
        size = int(np.prod(dims, dtype=np.int64))
        data = np.frombuffer(take(4 * size), dtype="<f4").astype(np.float32)
        tensors[name] = data.reshape(dims)
    if pos != len(buf):
        raise CheckpointError(f"{len(buf) - pos} trailing bytes after the last tensor")
    return tensors


def write_ght1(path, tensors: Mapping[str, np.ndarray]) -> None:
    Path(path).write_bytes(encode_ght1(tensors))


def read_ght1(path) -> dict[str, np.ndarray]:
    return decode_ght1(Path(path).read_bytes())


def save_checkpoint(path, params: dict, state: AdamState, cfg: TrainConfig,
                    vocab: Vocabulary) -> None:
    """Write params, optimizer moments and manifest into directory ``path``."""
    d = Path(path)
    d.mkdir(parents=True, exist_ok=True)
    order = [name for name, _ in param_shapes(cfg, len(vocab))]
    write_ght1(d / "params.ght1", {k: params[k] for k in order})
    moments = {}
    for k in order:
        moments["m." + k] = state.m[k]
        moments["v." + k] = state.v[k]
    write_ght1(d / "optim.ght1", moments)
    manifest = {
        "format": FORMAT,
        "config": cfg.to_dict(),
        "vocabulary": list(vocab.tokens),
        "param_order": order,
        "seed": cfg.seed,
        "step": state.step,
    }
    (d / "manifest.json").write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")


def load_checkpoint(path):
    """Return ``(params, AdamState, TrainConfig, Vocabulary)`` from directory ``path``."""
    d = Path(path)
    try:
        manifest = json.loads((d / "manifest.json").read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"cannot read checkpoint manifest in {d}: {exc}") from exc
    if manifest.get("format") != FORMAT:
        raise CheckpointError(f"unsupported checkpoint format {manifest.get('format')!r}")
    cfg = TrainConfig.from_dict(manifest["config"])
    vocab = Vocabulary(manifest["vocabulary"])
    shapes = dict(param_shapes(cfg, len(vocab)))
    order = manifest["param_order"]
    if order != list(shapes):
        raise CheckpointError("parameter order does not match the configuration")
    params = read_ght1(d / "params.ght1")
    if list(params) != order:
        raise CheckpointError("params.ght1 tensors do not follow the manifest order")
    for k in order:
        if params[k].shape != shapes[k]:
            raise CheckpointError(f"{k}: shape {params[k].shape} != expected {shapes[k]}")
    state = AdamState.zeros_like(params)
    state.step = int(manifest["step"])
    opt_path = d / "optim.ght1"
    if opt_path.exists():
        moments = read_ght1(opt_path)
        for k in order:
            state.m[k] = moments["m." + k]
            state.v[k] = moments["v." + k]
    return params, state, cfg, vocab
