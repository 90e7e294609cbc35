"""Versioned, byte-deterministic checkpoint files.

Layout: a magic line, an 8-byte little-endian header length, a JSON header
(sorted keys) describing kind, metadata and array layout, then every array's
raw little-endian float64 bytes in header order. Identical parameters and
metadata always produce identical bytes.
"""
from __future__ import annotations

import dataclasses
import hashlib
import json
import os
import struct
import tempfile
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .core.params import load_arrays, to_arrays
from .corpus.vocab import Vocab
from .generator import GeneratorConfig, GeneratorParams
from .teacher import TeacherConfig, TeacherParams

MAGIC = b"NTCKPT\x001\n"
FORMAT_VERSION = 1
KINDS = ("teacher", "generator")


class CheckpointError(ValueError):
    """Unreadable file, or a checkpoint that does not fit what the caller needs."""


@dataclass
class Checkpoint:
    kind: str
    meta: dict
    arrays: dict[str, np.ndarray]

    @property
    def vocab(self) -> Vocab:
        return Vocab.from_json(self.meta["vocab"])


def file_sha256(path: str | Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for block in iter(lambda: f.read(1 << 20), b""):
            h.update(block)
    return h.hexdigest()


def atomic_write_bytes(path: str | Path, data: bytes) -> None:
    """Write to a sibling temp file then rename, so readers never see a partial file."""
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.", suffix=".tmp")
    try:
        with os.fdopen(fd, "wb") as f:
            f.write(data)
            f.flush()
            os.fsync(f.fileno())
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def encode_checkpoint(kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> bytes:
    if kind not in KINDS:
        raise ValueError(f"checkpoint kind must be one of {KINDS}, got {kind!r}")
    names = sorted(arrays)
    blobs = [np.ascontiguousarray(arrays[k], dtype="<f8") for k in names]
    header = {
        "version": FORMAT_VERSION,
        "kind": kind,
        "meta": meta,
        "arrays": [[k, list(b.shape)] for k, b in zip(names, blobs)],
    }
    head = json.dumps(header, sort_keys=True, separators=(",", ":"), allow_nan=False).encode()
    return b"".join([MAGIC, struct.pack("<Q", len(head)), head] + [b.tobytes() for b in blobs])


def decode_checkpoint(data: bytes, source: str = "<bytes>") -> Checkpoint:
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{source}: not a checkpoint file")
    pos = len(MAGIC)
    try:
        (n,) = struct.unpack_from("<Q", data, pos)
        header = json.loads(data[pos + 8:pos + 8 + n])
    except (struct.error, ValueError) as exc:
        raise CheckpointError(f"{source}: corrupt header ({exc})") from exc
    if header.get("version") != FORMAT_VERSION:
        raise CheckpointError(f"{source}: unsupported format version {header.get('version')}")
    pos += 8 + n
    arrays = {}
    for name, shape in header["arrays"]:
        count = int(np.prod(shape, dtype=np.int64))
        end = pos + 8 * count
        if end > len(data):
            raise CheckpointError(f"{source}: truncated at array {name!r}")
        arrays[name] = np.frombuffer(data[pos:end], dtype="<f8").reshape(shape).astype(np.float64)
        pos = end
    if pos != len(data):
        raise CheckpointError(f"{source}: {len(data) - pos} trailing bytes")
    return Checkpoint(header["kind"], header["meta"], arrays)


def save_checkpoint(path: str | Path, kind: str, meta: dict, arrays: dict[str, np.ndarray]) -> str:
    """Atomically write the checkpoint; returns the file's SHA-256."""
    data = encode_checkpoint(kind, meta, arrays)
    atomic_write_bytes(path, data)
    return hashlib.sha256(data).hexdigest()


def load_checkpoint(path: str | Path, kind: str | None = None) -> Checkpoint:
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from exc
    ck = decode_checkpoint(data, str(path))
    if kind is not None and ck.kind != kind:
        raise CheckpointError(f"{path}: expected a {kind} checkpoint, found {ck.kind}")
    return ck


def _meta(vocab: Vocab, config, seed: int, extra: dict | None) -> dict:
    meta = {
        "vocab": vocab.to_json(),
        "vocab_checksum": vocab.checksum,
        "config": dataclasses.asdict(config),
        "seed": int(seed),
    }
    meta.update(extra or {})
    return meta


def save_teacher(path, params: TeacherParams, vocab: Vocab, config: TeacherConfig, seed: int,
                 extra: dict | None = None) -> str:
    if params.embedding.shape[0] != len(vocab):
        raise CheckpointError(f"teacher has {params.embedding.shape[0]} embeddings, vocabulary has {len(vocab)}")
    meta = _meta(vocab, config, seed, extra)
    meta["teacher_kind"] = params.kind
    meta["dims"] = {"vocab": len(vocab), "embed": params.embedding.shape[1], "hidden": params.hidden}
    return save_checkpoint(path, "teacher", meta, to_arrays(params))


def load_teacher(path) -> tuple[TeacherParams, Checkpoint]:
    ck = load_checkpoint(path, "teacher")
    config = TeacherConfig(**ck.meta["config"])
    params = TeacherParams.init(ck.meta["dims"]["vocab"], config, np.random.default_rng(0))
    _fill(params, ck, path)
    return params, ck


def save_generator(path, params: GeneratorParams, vocab: Vocab, config: GeneratorConfig, seed: int,
                   extra: dict | None = None) -> str:
    if params.vocab_size != len(vocab):
        raise CheckpointError(f"generator has {params.vocab_size} outputs, vocabulary has {len(vocab)}")
    meta = _meta(vocab, config, seed, extra)
    meta["dims"] = {"vocab": len(vocab), "embed": config.embed_dim,
                    "enc_hidden": config.enc_hidden, "dec_hidden": config.dec_hidden}
    return save_checkpoint(path, "generator", meta, to_arrays(params))


def load_generator(path) -> tuple[GeneratorParams, Checkpoint]:
    ck = load_checkpoint(path, "generator")
    config = GeneratorConfig(**ck.meta["config"])
    params = GeneratorParams.init(ck.meta["dims"]["vocab"], config, np.random.default_rng(0))
    _fill(params, ck, path)
    return params, ck


def _fill(params, ck: Checkpoint, path) -> None:
    try:
        load_arrays(params, ck.arrays)
    except (KeyError, ValueError) as exc:
        raise CheckpointError(f"{path}: {exc}") from exc
