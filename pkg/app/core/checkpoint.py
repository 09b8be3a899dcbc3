"""
Named-tensor container: the single on-disk format for vision sources, AST
checkpoints and cached spectrograms.

Layout (little-endian):

    b"ASTC" | u32 format_version | u64 header_length | header JSON | payload

The header lists every tensor (name, shape, dtype, byte offset into the
payload) plus free-form metadata. The payload is raw float32. The header is
serialised with sorted keys and fixed separators, so write -> read -> write
reproduces the original bytes.
"""

import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from pydantic import BaseModel, Field, ValidationError

from app.core.errors import ContainerError
from app.core.model import ASTParams
from app.core.schemas import ASTConfig

logger = logging.getLogger(__name__)

MAGIC = b"ASTC"
FORMAT_VERSION = 1
PREAMBLE = struct.Struct("<4sIQ")
DTYPE = "float32"
ITEMSIZE = 4


class TensorEntry(BaseModel):
    name: str
    shape: List[int]
    dtype: str = DTYPE
    offset: int = Field(ge=0)

    @property
    def nbytes(self) -> int:
        return int(np.prod(self.shape, dtype=np.int64)) * ITEMSIZE


class ContainerHeader(BaseModel):
    format_version: int = FORMAT_VERSION
    tensors: List[TensorEntry] = Field(default_factory=list)
    metadata: Dict[str, Any] = Field(default_factory=dict)


@dataclass
class Container:
    tensors: Dict[str, np.ndarray]
    metadata: Dict[str, Any] = field(default_factory=dict)


def encode(container: Container) -> bytes:
    entries, chunks, offset = [], [], 0
    for name, arr in container.tensors.items():
        data = np.ascontiguousarray(arr, dtype="<f4")
        if not np.all(np.isfinite(data)):
            raise ContainerError(f"tensor {name!r} holds non-finite values")
        entries.append(TensorEntry(name=name, shape=list(data.shape), offset=offset))
        chunks.append(data.tobytes())
        offset += data.nbytes
    header = ContainerHeader(tensors=entries, metadata=container.metadata)
    header_bytes = json.dumps(header.model_dump(mode="json"), sort_keys=True, separators=(",", ":")).encode("utf-8")
    return PREAMBLE.pack(MAGIC, FORMAT_VERSION, len(header_bytes)) + header_bytes + b"".join(chunks)


def decode(blob: bytes) -> Container:
    if len(blob) < PREAMBLE.size:
        raise ContainerError(f"truncated preamble: need {PREAMBLE.size} bytes, file has {len(blob)}")
    magic, version, header_len = PREAMBLE.unpack_from(blob, 0)
    if magic != MAGIC:
        raise ContainerError(f"bad magic {magic!r} at offset 0 (expected {MAGIC!r})")
    if version != FORMAT_VERSION:
        raise ContainerError(f"unsupported format version {version} (this build reads {FORMAT_VERSION})")
    start = PREAMBLE.size
    if len(blob) < start + header_len:
        raise ContainerError(
            f"truncated header: expected {header_len} bytes at offset {start}, found {len(blob) - start}"
        )
    try:
        header = ContainerHeader.model_validate_json(blob[start:start + header_len])
    except ValidationError as e:
        raise ContainerError(f"malformed header at offset {start}: {e.errors()[0]['msg']}") from e

    names = [t.name for t in header.tensors]
    if len(set(names)) != len(names):
        raise ContainerError("duplicate tensor names in header")
    payload_start = start + header_len
    payload = memoryview(blob)[payload_start:]
    expected = sum(t.nbytes for t in header.tensors)
    if len(payload) != expected:
        raise ContainerError(
            f"payload length mismatch at offset {payload_start}: expected {expected} bytes, found {len(payload)}"
        )
    tensors: Dict[str, np.ndarray] = {}
    cursor = 0
    for t in header.tensors:
        if t.dtype != DTYPE:
            raise ContainerError(f"tensor {t.name!r}: unsupported dtype {t.dtype}")
        if t.offset != cursor:
            raise ContainerError(f"tensor {t.name!r}: offset {t.offset} does not follow previous tensor end {cursor}")
        arr = np.frombuffer(payload[cursor:cursor + t.nbytes], dtype="<f4").reshape(t.shape)
        tensors[t.name] = arr.astype(np.float32)
        cursor += t.nbytes
    return Container(tensors=tensors, metadata=header.metadata)


def write_container(path: Union[str, Path], container: Container) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    blob = encode(container)
    path.write_bytes(blob)
    logger.debug(f"wrote {path} ({len(container.tensors)} tensors, {len(blob)} bytes)")
    return path


def read_container(path: Union[str, Path]) -> Container:
    path = Path(path)
    if not path.exists():
        raise ContainerError(f"{path}: no such checkpoint")
    try:
        return decode(path.read_bytes())
    except ContainerError as e:
        raise ContainerError(f"{path}: {e}") from e


# ---------------------------------------------------------------------------
# AST checkpoints
# ---------------------------------------------------------------------------

def model_metadata(
    config: ASTConfig,
    labels: Optional[List[str]] = None,
    label_names: Optional[List[str]] = None,
    normalization: Optional[Dict[str, float]] = None,
    **extra: Any,
) -> Dict[str, Any]:
    meta: Dict[str, Any] = {
        "kind": "ast",
        "config": config.model_dump(mode="json"),
        "activation": "gelu-erf",
        "block_layout": "pre-norm",
    }
    if labels is not None:
        meta["labels"] = list(labels)
    if label_names is not None:
        meta["label_names"] = list(label_names)
    if normalization is not None:
        meta["normalization"] = dict(normalization)
    meta.update(extra)
    return meta


def save_params(path: Union[str, Path], params: ASTParams, config: ASTConfig, **metadata: Any) -> Path:
    return write_container(path, Container(params.arrays(), model_metadata(config, **metadata)))


def load_params(path: Union[str, Path]) -> Tuple[ASTParams, ASTConfig, Dict[str, Any]]:
    c = read_container(path)
    if c.metadata.get("kind") != "ast" or "config" not in c.metadata:
        raise ContainerError(f"{path}: not an AST checkpoint (kind={c.metadata.get('kind')!r})")
    try:
        config = ASTConfig.model_validate(c.metadata["config"])
    except ValidationError as e:
        raise ContainerError(f"{path}: stored config is invalid: {e.errors()[0]['msg']}") from e
    params = ASTParams.from_arrays(c.tensors)
    params.validate(config)
    return params, config, c.metadata
