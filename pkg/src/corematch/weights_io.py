"""Binary weight file (``.cmw``).

Layout, all little-endian::

    magic      4s   b"CMW1"
    version    u32
    n_layers, d_model, d_ffn, n_heads, vocab_size, max_seq_len   6 x u32
    activation u8   (0 relu, 1 silu)
    elem_bytes u8   (4 float32, 8 float64)
    reserved   2x
    seed       i64
    ortho_mix, scale, theta   3 x f64
    checksum   u64  blake2b-64 over header (checksum zeroed) + payload

followed by row-major tensors in ``Weights.named_tensors()`` order.
"""

from __future__ import annotations

import hashlib
import os
import struct
from pathlib import Path

import numpy as np

from .errors import ChecksumError, TruncatedFile, VersionError, WeightFileError
from .model import ACTIVATIONS, LayerWeights, ModelConfig, Weights

MAGIC = b"CMW1"
FORMAT_VERSION = 1
_HEADER = struct.Struct("<4sI6IBB2xq3dQ")
_CHECKSUM_OFFSET = _HEADER.size - 8
_ELEM = {4: "<f4", 8: "<f8"}


def _checksum(header_wo_sum: bytes, payload: bytes) -> int:
    h = hashlib.blake2b(digest_size=8)
    h.update(header_wo_sum)
    h.update(b"\0" * 8)
    h.update(payload)
    return int.from_bytes(h.digest(), "little")


def to_bytes(weights: Weights) -> bytes:
    cfg = weights.config
    elem = cfg.np_dtype.itemsize
    payload = b"".join(
        np.ascontiguousarray(arr, dtype=_ELEM[elem]).tobytes() for _, arr in weights.named_tensors()
    )
    header = _HEADER.pack(
        MAGIC, FORMAT_VERSION,
        cfg.n_layers, cfg.d_model, cfg.d_ffn, cfg.n_heads, cfg.vocab_size, cfg.max_seq_len,
        ACTIVATIONS.index(cfg.activation), elem,
        weights.seed, weights.orthogonality_mix, weights.scale, weights.theta,
        0,
    )
    head = header[:_CHECKSUM_OFFSET]
    return head + struct.pack("<Q", _checksum(head, payload)) + payload


def from_bytes(blob: bytes) -> Weights:
    if len(blob) < _HEADER.size:
        raise TruncatedFile(f"file is {len(blob)} bytes, header needs {_HEADER.size}")
    (magic, version, n_layers, d_model, d_ffn, n_heads, vocab, max_len,
     act_code, elem, seed, mix, scale, theta, stored) = _HEADER.unpack_from(blob)
    if magic != MAGIC:
        raise WeightFileError(f"bad magic {magic!r}")
    if version != FORMAT_VERSION:
        raise VersionError(f"weight file version {version}, this reader supports {FORMAT_VERSION}")
    if elem not in _ELEM or act_code >= len(ACTIVATIONS):
        raise WeightFileError("corrupt header fields")
    cfg = ModelConfig(
        n_layers=n_layers, d_model=d_model, d_ffn=d_ffn, n_heads=n_heads,
        vocab_size=vocab, max_seq_len=max_len, activation=ACTIVATIONS[act_code],
        dtype="float32" if elem == 4 else "float64",
    )
    payload = blob[_HEADER.size:]
    shapes = _shapes(cfg)
    need = sum(int(np.prod(s)) for _, s in shapes) * elem
    if len(payload) < need:
        raise TruncatedFile(f"payload is {len(payload)} bytes, expected {need}")
    if len(payload) > need:
        raise WeightFileError(f"{len(payload) - need} trailing bytes after tensors")
    if _checksum(blob[:_CHECKSUM_OFFSET], payload) != stored:
        raise ChecksumError("checksum mismatch")

    tensors: dict[str, np.ndarray] = {}
    offset = 0
    for name, shape in shapes:
        count = int(np.prod(shape))
        arr = np.frombuffer(payload, dtype=_ELEM[elem], count=count, offset=offset)
        tensors[name] = arr.reshape(shape).astype(cfg.np_dtype)
        offset += count * elem
    layers = [
        LayerWeights(**{n: tensors[f"layers.{i}.{n}"] for n in LayerWeights.NAMES})
        for i in range(n_layers)
    ]
    return Weights(
        config=cfg, embed=tensors["embed"], layers=layers,
        lnf_gain=tensors["lnf_gain"], lnf_bias=tensors["lnf_bias"], lm_head=tensors["lm_head"],
        seed=seed, orthogonality_mix=mix, scale=scale, theta=theta,
    )


def _shapes(cfg: ModelConfig) -> list[tuple[str, tuple[int, ...]]]:
    d, v = cfg.d_model, cfg.vocab_size
    out: list[tuple[str, tuple[int, ...]]] = [("embed", (v, d))]
    probe = LayerWeights.shapes(cfg)
    for i in range(cfg.n_layers):
        out += [(f"layers.{i}.{n}", probe[n]) for n in LayerWeights.NAMES]
    out += [("lnf_gain", (d,)), ("lnf_bias", (d,)), ("lm_head", (d, v))]
    return out


def save_weights(weights: Weights, path: str | os.PathLike) -> int:
    """Write ``weights`` to ``path``; returns the stored checksum."""
    blob = to_bytes(weights)
    Path(path).write_bytes(blob)
    return struct.unpack_from("<Q", blob, _CHECKSUM_OFFSET)[0]


def load_weights(path: str | os.PathLike) -> Weights:
    return from_bytes(Path(path).read_bytes())


def file_checksum(path: str | os.PathLike) -> int:
    blob = Path(path).read_bytes()
    if len(blob) < _HEADER.size:
        raise TruncatedFile("file too short for a header")
    return struct.unpack_from("<Q", blob, _CHECKSUM_OFFSET)[0]
