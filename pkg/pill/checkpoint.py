"""
Versioned binary container for named parameter blocks.

Layout (all integers little-endian)::

    magic       8 bytes   b"PILLCKPT"
    version     u32       FORMAT_VERSION
    header_len  u32
    header      JSON      {"config": {...}, "format_version": 1, "stage": "..."}, sorted keys, compact
    n_blocks    u32
    n_blocks x:
        name_len u16, name utf-8
        flag     u8       0 frozen, 1 trainable (injection)
        ndim     u8, dims u32 x ndim
        data     float64 little-endian, row-major

Encoding is canonical, so identical parameters always give identical bytes.
"""

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from typing import ClassVar, Dict, Iterable, Optional, Union

import numpy as np
from pydantic import ValidationError

from pill.model import ModelConfig, ParamGroup, PillModelParams, init_params, load_parameter_values
from pill.tensor_core import PillError

logger = logging.getLogger(__name__)

MAGIC = b"PILLCKPT"
FORMAT_VERSION = 1
FLAG_FROZEN = 0
FLAG_TRAINABLE = 1


class CheckpointError(PillError, ValueError):
    """The checkpoint bytes are malformed, of another version, or do not fit the model."""


@dataclass
class Checkpoint:
    config: ModelConfig
    stage: str
    blocks: Dict[str, np.ndarray] = field(default_factory=dict)
    flags: Dict[str, int] = field(default_factory=dict)
    format_version: int = FORMAT_VERSION

    def header(self) -> dict:
        return {
            "config": self.config.model_dump(mode="json"),
            "format_version": self.format_version,
            "stage": self.stage,
        }

    def trainable_blocks(self) -> Dict[str, np.ndarray]:
        return {name: arr for name, arr in self.blocks.items() if self.flags[name] == FLAG_TRAINABLE}

    def frozen_blocks(self) -> Dict[str, np.ndarray]:
        return {name: arr for name, arr in self.blocks.items() if self.flags[name] == FLAG_FROZEN}


class _Reader:
    """Cursor over the checkpoint bytes that fails loudly on truncation."""

    u8: ClassVar[struct.Struct] = struct.Struct("<B")
    u16: ClassVar[struct.Struct] = struct.Struct("<H")
    u32: ClassVar[struct.Struct] = struct.Struct("<I")

    def __init__(self, data: bytes):
        self.data = data
        self.offset = 0

    def take(self, n: int) -> bytes:
        if self.offset + n > len(self.data):
            raise CheckpointError(f"checkpoint truncated at byte {self.offset} (wanted {n} more)")
        chunk = self.data[self.offset:self.offset + n]
        self.offset += n
        return chunk

    def unpack(self, fmt: struct.Struct) -> int:
        return fmt.unpack(self.take(fmt.size))[0]


def checkpoint_from_params(params: PillModelParams, stage: str,
                           groups: Optional[Iterable[ParamGroup]] = None) -> Checkpoint:
    """Snapshot parameter values; ``groups`` limits which blocks are stored."""
    wanted = set(groups) if groups is not None else None
    ckpt = Checkpoint(config=params.config, stage=stage)
    for name, group, tensor in params.named_parameters():
        if wanted is not None and group not in wanted:
            continue
        ckpt.blocks[name] = tensor.data.copy()
        ckpt.flags[name] = FLAG_FROZEN if group is ParamGroup.BASE else FLAG_TRAINABLE
    return ckpt


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    header = json.dumps(ckpt.header(), sort_keys=True, separators=(",", ":")).encode("utf-8")
    parts = [MAGIC, _Reader.u32.pack(ckpt.format_version), _Reader.u32.pack(len(header)), header,
             _Reader.u32.pack(len(ckpt.blocks))]
    for name, arr in ckpt.blocks.items():
        encoded_name = name.encode("utf-8")
        parts.append(_Reader.u16.pack(len(encoded_name)))
        parts.append(encoded_name)
        parts.append(_Reader.u8.pack(ckpt.flags[name]))
        parts.append(_Reader.u8.pack(arr.ndim))
        parts.extend(_Reader.u32.pack(dim) for dim in arr.shape)
        parts.append(np.ascontiguousarray(arr, dtype="<f8").tobytes())
    return b"".join(parts)


def decode_checkpoint(data: bytes) -> Checkpoint:
    """
    Parse checkpoint bytes.

    Raises:
        CheckpointError: On bad magic, an unsupported version, an invalid header or config,
            truncation, or trailing bytes.
    """
    reader = _Reader(data)
    if reader.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint file (bad magic)")
    version = reader.unpack(_Reader.u32)
    if version != FORMAT_VERSION:
        raise CheckpointError(f"checkpoint format version {version} is not supported (expected {FORMAT_VERSION})")
    try:
        header = json.loads(reader.take(reader.unpack(_Reader.u32)).decode("utf-8"))
        config = ModelConfig(**header["config"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError, ValidationError) as e:
        raise CheckpointError(f"invalid checkpoint header: {e}") from e
    if header.get("format_version") != version:
        raise CheckpointError("header format_version disagrees with the container version")

    ckpt = Checkpoint(config=config, stage=str(header.get("stage", "")), format_version=version)
    for _ in range(reader.unpack(_Reader.u32)):
        name = reader.take(reader.unpack(_Reader.u16)).decode("utf-8")
        flag = reader.unpack(_Reader.u8)
        if flag not in (FLAG_FROZEN, FLAG_TRAINABLE):
            raise CheckpointError(f"block '{name}' has unknown flag {flag}")
        shape = tuple(reader.unpack(_Reader.u32) for _ in range(reader.unpack(_Reader.u8)))
        count = int(np.prod(shape)) if shape else 1
        values = np.frombuffer(reader.take(8 * count), dtype="<f8").astype(np.float64).reshape(shape)
        ckpt.blocks[name] = values
        ckpt.flags[name] = flag
    if reader.offset != len(data):
        raise CheckpointError(f"{len(data) - reader.offset} trailing bytes after the last block")
    return ckpt


def save_checkpoint(params: PillModelParams, path: str, stage: str,
                    groups: Optional[Iterable[ParamGroup]] = None) -> str:
    """Write a checkpoint file and return its git blob hash."""
    data = encode_checkpoint(checkpoint_from_params(params, stage, groups))
    with open(path, "wb") as f:
        f.write(data)
    digest = git_blob_hash(data)
    logger.info("Wrote %s checkpoint to %s (%s)", stage, path, digest[:12])
    return digest


def load_checkpoint(path: str) -> Checkpoint:
    with open(path, "rb") as f:
        return decode_checkpoint(f.read())


def restore_params(ckpt: Checkpoint, seed: int, expected_config: Optional[ModelConfig] = None) -> PillModelParams:
    """
    Build parameters from a checkpoint.

    Blocks absent from the checkpoint (injections, for a base checkpoint) keep
    their seeded initial values.

    Raises:
        CheckpointError: If ``expected_config`` differs from the stored one, or a block does not fit.
    """
    if expected_config is not None and expected_config != ckpt.config:
        raise CheckpointError("checkpoint config does not match the requested model config")
    params = init_params(ckpt.config, seed)
    try:
        load_parameter_values(params, ckpt.blocks)
    except ValueError as e:
        raise CheckpointError(str(e)) from e
    return params


def git_blob_hash(data: bytes) -> str:
    """SHA-1 of ``b"blob <len>\\0" + data``, as git computes object ids."""
    return hashlib.sha1(b"blob %d\0" % len(data) + data).hexdigest()


def block_digests(source: Union[Checkpoint, PillModelParams, Dict[str, np.ndarray]]) -> Dict[str, str]:
    """SHA-1 of every block's little-endian float64 bytes."""
    if isinstance(source, Checkpoint):
        blocks = source.blocks
    elif isinstance(source, PillModelParams):
        blocks = {name: t.data for name, t in source.parameter_dict().items()}
    else:
        blocks = source
    return {name: hashlib.sha1(np.ascontiguousarray(arr, dtype="<f8").tobytes()).hexdigest()
            for name, arr in blocks.items()}
