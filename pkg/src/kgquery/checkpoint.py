"""Versioned binary checkpoints.

Layout (all integers little-endian)::

    offset 0   8 bytes   magic  b"KGQCKPT\\0"
    offset 8   uint32    format version (currently 1)
    offset 12  uint32    header length H
    offset 16  H bytes   UTF-8 JSON header
    offset 16+H          tensor payload

The header holds ``model`` (ModelConfig fields), ``mode``, ``vocab`` (token
list), ``vocab_hash`` (sha256 of the newline-joined tokens), free-form
``extra`` metadata, and ``tensors``: a list of ``{name, dtype, shape,
offset, nbytes}`` where ``dtype`` is ``"<f4"`` or ``"<f8"``, data is C-order,
and ``offset`` is relative to the start of the payload.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path

import numpy as np
import torch

from kgquery.errors import CheckpointError
from kgquery.model import ModelConfig, QueryAnswerModel
from kgquery.text import Vocabulary

MAGIC = b"KGQCKPT\0"
VERSION = 1
_DTYPES = {torch.float32: "<f4", torch.float64: "<f8"}


def save_checkpoint(path, model: QueryAnswerModel, vocab: Vocabulary, mode: str, extra=None) -> None:
    tensors = []
    blobs = []
    offset = 0
    for name, tensor in model.state_dict().items():
        arr = tensor.detach().cpu().numpy()
        dtype = _DTYPES.get(tensor.dtype)
        if dtype is None:
            raise CheckpointError(f"unsupported dtype {tensor.dtype} for {name}")
        data = np.ascontiguousarray(arr, dtype=np.dtype(dtype)).tobytes()
        tensors.append({"name": name, "dtype": dtype, "shape": list(arr.shape), "offset": offset, "nbytes": len(data)})
        blobs.append(data)
        offset += len(data)
    if model.config.vocab_size != len(vocab):
        raise CheckpointError("vocabulary size does not match the model's token table")
    header = {
        "model": model.config.to_dict(),
        "mode": mode,
        "vocab": list(vocab.tokens),
        "vocab_hash": vocab.hash(),
        "extra": extra or {},
        "tensors": tensors,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(raw)))
        fh.write(raw)
        for blob in blobs:
            fh.write(blob)


def load_checkpoint(path, expected_vocab_hash=None):
    """Return ``(model, vocab, header)``.

    Raises :class:`CheckpointError` on a bad magic/version, a corrupted
    vocabulary, or a vocabulary hash different from ``expected_vocab_hash``.
    """
    data = Path(path).read_bytes()
    if data[:8] != MAGIC:
        raise CheckpointError(f"{path}: not a checkpoint file")
    try:
        version, hlen = struct.unpack_from("<II", data, 8)
    except struct.error:
        raise CheckpointError(f"{path}: truncated checkpoint header") from None
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    try:
        header = json.loads(data[16 : 16 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError):
        raise CheckpointError(f"{path}: corrupted checkpoint header") from None
    payload = memoryview(data)[16 + hlen :]

    vocab = Vocabulary(header["vocab"])
    if vocab.hash() != header["vocab_hash"]:
        raise CheckpointError(f"{path}: vocabulary does not match its stored hash")
    if expected_vocab_hash is not None and expected_vocab_hash != header["vocab_hash"]:
        raise CheckpointError(
            f"{path}: vocabulary hash {header['vocab_hash'][:12]} does not match the expected {expected_vocab_hash[:12]}"
        )
    config = ModelConfig(**header["model"])
    model = QueryAnswerModel(config)
    state = {}
    for t in header["tensors"]:
        buf = payload[t["offset"] : t["offset"] + t["nbytes"]]
        try:
            arr = np.frombuffer(buf, dtype=np.dtype(t["dtype"])).reshape(t["shape"])
        except ValueError:
            raise CheckpointError(f"{path}: tensor {t['name']} is truncated") from None
        state[t["name"]] = torch.from_numpy(arr.copy())
    dtype = state["token_embedding.weight"].dtype
    model.to(dtype)
    try:
        model.load_state_dict(state)
    except RuntimeError as exc:
        raise CheckpointError(f"{path}: {exc}") from None
    return model, vocab, header
