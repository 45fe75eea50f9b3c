"""OVFL1 checkpoint format and model-config JSON files.

Layout: magic "OVFL1", a little-endian u32 header length, the UTF-8 JSON
header mapping tensor name -> {dtype, shape, byte_offset}, zero padding,
then raw little-endian float32 blobs. Every blob starts at a file offset
that is a multiple of 64; byte_offset values are absolute file offsets.
Identical weights always serialize to identical bytes.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Union

import numpy as np

from .errors import ConfigError, DataError
from .model import LayerWeights, ModelConfig, Weights
from .tensor import Tensor

MAGIC = b"OVFL1"
ALIGN = 64

PathLike = Union[str, Path]


def _align(offset: int) -> int:
    return (offset + ALIGN - 1) // ALIGN * ALIGN


def save_checkpoint(path: PathLike, weights: Weights) -> None:
    blobs = []
    for name, t in weights.named_tensors():
        if t.dtype != np.float32:
            raise DataError(f"checkpoint tensors must be f32, {name} is {t.dtype}")
        blobs.append((name, np.ascontiguousarray(t.data, dtype="<f4")))

    # Two passes: header size depends on offsets, offsets depend on header
    # size. Offset digit widths can only grow, so iterate to a fixed point.
    def build_header(offsets):
        header = {name: {"dtype": "f32", "shape": list(arr.shape),
                         "byte_offset": offsets[name]}
                  for name, arr in blobs}
        return json.dumps(header, sort_keys=True, separators=(",", ":")).encode()

    offsets = {name: 0 for name, _ in blobs}
    for _ in range(4):
        header_bytes = build_header(offsets)
        pos = _align(len(MAGIC) + 4 + len(header_bytes))
        new_offsets = {}
        for name, arr in blobs:
            new_offsets[name] = pos
            pos = _align(pos + arr.nbytes)
        if new_offsets == offsets:
            break
        offsets = new_offsets
    header_bytes = build_header(offsets)

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as f:
        f.write(MAGIC)
        f.write(struct.pack("<I", len(header_bytes)))
        f.write(header_bytes)
        for name, arr in blobs:
            f.write(b"\0" * (offsets[name] - f.tell()))
            f.write(arr.tobytes())


def read_checkpoint_tensors(path: PathLike) -> dict[str, np.ndarray]:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    raw = path.read_bytes()
    if raw[: len(MAGIC)] != MAGIC:
        raise DataError(f"bad magic in {path}: expected {MAGIC!r}")
    (header_len,) = struct.unpack_from("<I", raw, len(MAGIC))
    header_start = len(MAGIC) + 4
    try:
        header = json.loads(raw[header_start: header_start + header_len])
    except json.JSONDecodeError as exc:
        raise DataError(f"corrupt checkpoint header in {path}: {exc}") from exc
    tensors = {}
    for name, meta in header.items():
        if meta.get("dtype") != "f32":
            raise DataError(f"unsupported dtype {meta.get('dtype')!r} for {name}")
        shape = tuple(meta["shape"])
        off = meta["byte_offset"]
        if off % ALIGN != 0:
            raise DataError(f"tensor {name} not {ALIGN}-byte aligned (offset {off})")
        count = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(raw, dtype="<f4", count=count, offset=off)
        tensors[name] = arr.reshape(shape).astype(np.float32)
    return tensors


def load_checkpoint(path: PathLike, config: ModelConfig) -> Weights:
    """Assemble Weights for a config from an OVFL1 file, validating shapes."""
    tensors = read_checkpoint_tensors(path)

    def take(name, shape):
        if name not in tensors:
            raise DataError(f"checkpoint {path} missing tensor {name}")
        arr = tensors.pop(name)
        if arr.shape != shape:
            raise DataError(f"{name}: shape {arr.shape} != expected {shape}")
        return Tensor(arr)

    d, da, dkv, i = (config.hidden_dim, config.attn_dim, config.kv_dim,
                     config.intermediate_dim)
    emb = take("token_embedding", (config.vocab_size, d))
    layers = []
    for li in range(config.n_layers):
        p = f"layers.{li}."
        layers.append(LayerWeights(
            attn_norm_gamma=take(p + "attn_norm_gamma", (d,)),
            w_q=take(p + "w_q", (d, da)),
            w_k=take(p + "w_k", (d, dkv)),
            w_v=take(p + "w_v", (d, dkv)),
            w_o=take(p + "w_o", (da, d)),
            ffn_norm_gamma=take(p + "ffn_norm_gamma", (d,)),
            w_gate=take(p + "w_gate", (d, i)),
            w_up=take(p + "w_up", (d, i)),
            w_down=take(p + "w_down", (i, d)),
        ))
    final = take("final_norm_gamma", (d,))
    lm_head = None
    if not config.tied_embeddings:
        lm_head = take("lm_head", (d, config.vocab_size))
    if tensors:
        raise DataError(f"checkpoint {path} has unexpected tensors: {sorted(tensors)}")
    return Weights(config=config, token_embedding=emb, layers=layers,
                   final_norm_gamma=final, lm_head=lm_head)


def save_config(path: PathLike, config: ModelConfig) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")


def load_config(path: PathLike) -> ModelConfig:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"config not found: {path}")
    try:
        d = json.loads(path.read_text())
    except json.JSONDecodeError as exc:
        raise DataError(f"{path}: not valid JSON: {exc}") from exc
    try:
        return ModelConfig.from_dict(d)
    except ConfigError as exc:
        raise DataError(f"{path}: {exc}") from exc
