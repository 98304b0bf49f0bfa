"""Binary checkpoint files.

Layout (all integers little-endian)::

    b"RSNT" | u16 version | 32-byte config digest | u32 record count
    record*: u16 name length | name (UTF-8) | u8 dtype tag | u8 rank | u32 dims[rank] | raw values
    32-byte SHA-256 of every preceding byte

Records hold parameters, batch-norm running statistics, the config text
(``__config__``) and, when given, optimizer state (``optim.*``). Corruption anywhere is
reported as a content digest mismatch before any record is parsed.
"""
from __future__ import annotations

import hashlib
import logging
import os
import struct
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from rsnet.arch import ArchConfig
from rsnet.errors import CheckpointError, ConfigError
from rsnet.model import RSNet, build_model
from rsnet.optim import OptimizerState

logger = logging.getLogger("rsnet.checkpoint")

MAGIC = b"RSNT"
VERSION = 1
CONFIG_RECORD = "__config__"
_DIGEST_SIZE = 32
_TAGS = {1: np.dtype("<f4"), 2: np.dtype("<f8"), 3: np.dtype("<i8")}
_UTF8_TAG = 4


def _tag_for(array: np.ndarray) -> int:
    for tag, dtype in _TAGS.items():
        if array.dtype == dtype.newbyteorder("="):
            return tag
    raise CheckpointError(f"cannot store dtype {array.dtype}")


def _encode_record(name: str, value) -> bytes:
    raw_name = name.encode("utf-8")
    if isinstance(value, str):
        payload = value.encode("utf-8")
        head = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<BB", _UTF8_TAG, 1)
        return head + struct.pack("<I", len(payload)) + payload
    array = np.asarray(value)
    tag = _tag_for(array)
    head = struct.pack("<H", len(raw_name)) + raw_name + struct.pack("<BB", tag, array.ndim)
    dims = struct.pack(f"<{array.ndim}I", *array.shape)
    return head + dims + np.ascontiguousarray(array, dtype=_TAGS[tag]).tobytes()


class _Reader:
    def __init__(self, data: bytes, path: Path):
        self.data = data
        self.offset = 0
        self.path = path

    def take(self, size: int, what: str) -> bytes:
        end = self.offset + size
        if end > len(self.data):
            raise CheckpointError(f"{self.path}: truncated checkpoint while reading {what}")
        chunk = self.data[self.offset:end]
        self.offset = end
        return chunk

    def unpack(self, fmt: str, what: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt), what))


def _decode_records(reader: _Reader, count: int) -> dict[str, object]:
    records: dict[str, object] = {}
    for index in range(count):
        (name_len,) = reader.unpack("<H", f"record {index} name length")
        name = reader.take(name_len, f"record {index} name").decode("utf-8")
        if name in records:
            raise CheckpointError(f"{reader.path}: duplicate record '{name}'")
        tag, rank = reader.unpack("<BB", f"record '{name}' header")
        dims = reader.unpack(f"<{rank}I", f"record '{name}' dims")
        if tag == _UTF8_TAG:
            records[name] = reader.take(dims[0], f"record '{name}' text").decode("utf-8")
            continue
        if tag not in _TAGS:
            raise CheckpointError(f"{reader.path}: record '{name}' has unknown dtype tag {tag}")
        dtype = _TAGS[tag]
        size = int(np.prod(dims, dtype=np.int64)) * dtype.itemsize
        raw = reader.take(size, f"record '{name}' values")
        records[name] = np.frombuffer(raw, dtype=dtype).reshape(dims).astype(dtype.newbyteorder("="))
    if reader.offset != len(reader.data):
        raise CheckpointError(f"{reader.path}: {len(reader.data) - reader.offset} trailing bytes after the last record")
    return records


def _buffer_slots(model: RSNet) -> dict[str, tuple[object, str]]:
    slots = {}
    for path, module in model.named_modules():
        for name, stats in module._buffers.items():
            base = f"{path}.{name}" if path else name
            slots[f"{base}.mean"] = (stats, "mean")
            slots[f"{base}.var"] = (stats, "var")
    return slots


def save_checkpoint(model: RSNet, path: str | Path, optimizer: OptimizerState | None = None) -> Path:
    if not str(path):
        raise CheckpointError("checkpoint path is empty")
    path = Path(path)
    records: list[bytes] = []
    for name, param in model.named_parameters():
        records.append(_encode_record(name, param.data))
    for name, array in model.named_buffers():
        records.append(_encode_record(name, array))
    records.append(_encode_record(CONFIG_RECORD, model.cfg.to_text()))
    if optimizer is not None:
        hparams = [optimizer.lr, optimizer.beta1, optimizer.beta2, optimizer.eps, optimizer.weight_decay]
        records.append(_encode_record("optim.hparams", np.array(hparams, dtype=np.float64)))
        records.append(_encode_record("optim.step", np.array(optimizer.step, dtype=np.int64)))
        for name, _ in model.named_parameters():
            if name in optimizer.m:
                records.append(_encode_record(f"optim.m.{name}", optimizer.m[name]))
                records.append(_encode_record(f"optim.v.{name}", optimizer.v[name]))
    body = MAGIC + struct.pack("<H", VERSION) + model.cfg.digest() + struct.pack("<I", len(records)) + b"".join(records)
    blob = body + hashlib.sha256(body).digest()
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(blob)
        os.replace(tmp, path)
    except OSError as err:
        raise CheckpointError(f"cannot write checkpoint '{path}': {err.strerror or err}") from err
    logger.info("saved checkpoint %s (%d records)", path, len(records))
    return path


@dataclass
class Checkpoint:
    model: RSNet
    config: ArchConfig
    optimizer: OptimizerState | None


def _mismatched_layers(model: RSNet, records: dict[str, object]) -> list[str]:
    names = []
    expected = dict(model.named_parameters())
    buffers = _buffer_slots(model)
    for name, param in expected.items():
        value = records.get(name)
        if not isinstance(value, np.ndarray) or value.shape != param.shape:
            names.append(name)
    for name in records:
        if not name.startswith("optim.") and name != CONFIG_RECORD and name not in expected and name not in buffers:
            names.append(name)
    return sorted(set(name.rsplit(".", 1)[0] for name in names))


def load_checkpoint(path: str | Path, expected: ArchConfig | None = None) -> Checkpoint:
    """Read a checkpoint and rebuild its model.

    With ``expected`` the stored config digest must match it; otherwise the error lists
    the layers whose parameters differ.
    """
    if not str(path):
        raise CheckpointError("checkpoint path is empty")
    path = Path(path)
    try:
        data = path.read_bytes()
    except OSError as err:
        raise CheckpointError(f"cannot read checkpoint '{path}': {err.strerror or err}") from err
    if data[:4] != MAGIC:
        raise CheckpointError(f"{path}: not an rsnet checkpoint (bad magic)")
    if len(data) < 4 + 2 + _DIGEST_SIZE + 4 + _DIGEST_SIZE:
        raise CheckpointError(f"{path}: truncated checkpoint header")
    body, trailer = data[:-_DIGEST_SIZE], data[-_DIGEST_SIZE:]
    if hashlib.sha256(body).digest() != trailer:
        raise CheckpointError(f"{path}: content digest mismatch (file corrupted or truncated)")

    reader = _Reader(body, path)
    reader.take(4, "magic")
    (version,) = reader.unpack("<H", "version")
    if version != VERSION:
        raise CheckpointError(f"{path}: unsupported checkpoint version {version}")
    digest = reader.take(_DIGEST_SIZE, "config digest")
    (count,) = reader.unpack("<I", "record count")
    records = _decode_records(reader, count)

    text = records.get(CONFIG_RECORD)
    if not isinstance(text, str):
        raise CheckpointError(f"{path}: missing config record")
    try:
        config = ArchConfig.parse(text, source=f"{path}:{CONFIG_RECORD}")
    except ConfigError as err:
        raise CheckpointError(f"{path}: stored config is invalid: {err}") from err
    if config.digest() != digest:
        raise CheckpointError(f"{path}: stored config does not match the header digest")

    if expected is not None and expected.digest() != digest:
        layers = _mismatched_layers(build_model(expected), records)
        raise CheckpointError(
            f"{path}: config digest mismatch with '{expected.name}'; differing layers: {', '.join(layers) or '(hyperparameters only)'}"
        )

    model = build_model(config)
    first = next(iter(model.named_parameters()))[0]
    if isinstance(records.get(first), np.ndarray) and records[first].dtype == np.float64:
        model.astype(np.float64)
    missing = _mismatched_layers(model, records)
    if missing:
        raise CheckpointError(f"{path}: records do not fit the stored config; layers: {', '.join(missing)}")
    for name, param in model.named_parameters():
        param.assign(records[name])
    for name, (stats, attr) in _buffer_slots(model).items():
        if name not in records:
            raise CheckpointError(f"{path}: missing running statistics '{name}'")
        setattr(stats, attr, np.array(records[name]))

    optimizer = None
    if "optim.step" in records:
        lr, beta1, beta2, eps, weight_decay = (float(v) for v in records["optim.hparams"])
        optimizer = OptimizerState(lr, beta1, beta2, eps, weight_decay, step=int(records["optim.step"]))
        for name, _ in model.named_parameters():
            if f"optim.m.{name}" in records:
                optimizer.m[name] = np.array(records[f"optim.m.{name}"])
                optimizer.v[name] = np.array(records[f"optim.v.{name}"])
    logger.info("loaded checkpoint %s (config %s, %d records)", path, config.name, count)
    return Checkpoint(model, config, optimizer)
