"""Binary checkpoint format.

Layout (little-endian)::

    b"ATMS" | u32 version | u32 header_len | header JSON (utf-8)
    repeated: u32 name_len | name | u8 dtype | u32 rank | rank * u32 extent | float32 payload

The header carries the ModelSpec, batch-norm update counters and training
metadata. Tensors are stored as 32-bit floats; ``save_checkpoint`` first
rounds the live network to float32 so the in-memory model and the file agree
bit for bit.
"""

from __future__ import annotations

import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import CheckpointError, CheckpointShapeError, CheckpointTruncatedError, CheckpointVersionError
from .models import ModelSpec, Network, restore, round_to_float32, state_arrays

MAGIC = b"ATMS"
FORMAT_VERSION = 1
DTYPE_F32 = 1


@dataclass
class Checkpoint:
    spec: ModelSpec
    tensors: dict[str, np.ndarray]
    tracked: dict[str, int]
    metadata: dict = field(default_factory=dict)
    version: int = FORMAT_VERSION


def save_checkpoint(net: Network, path: str | Path, metadata: dict | None = None) -> Path:
    round_to_float32(net)
    header = {
        "model_spec": net.spec.to_dict(),
        "tracked": {name: st.tracked for name, st in net.named_states()},
        "metadata": metadata or {},
    }
    arrays = state_arrays(net)
    header["tensor_count"] = len(arrays)
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    chunks = [MAGIC, struct.pack("<II", FORMAT_VERSION, len(hbytes)), hbytes]
    for name, arr in arrays.items():
        nb = name.encode("utf-8")
        chunks.append(struct.pack("<I", len(nb)))
        chunks.append(nb)
        chunks.append(struct.pack("<BI", DTYPE_F32, arr.ndim))
        chunks.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
        chunks.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_bytes(b"".join(chunks))
    return path


class _Reader:
    def __init__(self, buf: bytes, path):
        self.buf, self.pos, self.path = buf, 0, path

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.buf):
            raise CheckpointTruncatedError(f"{self.path}: file ends after {len(self.buf)} bytes, needed {self.pos + n}")
        out = self.buf[self.pos : self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def read_checkpoint(path: str | Path) -> Checkpoint:
    path = Path(path)
    r = _Reader(path.read_bytes(), path)
    if r.take(4) != MAGIC:
        raise CheckpointError(f"{path}: not an ATMS checkpoint (bad magic)")
    version, hlen = r.unpack("<II")
    if version != FORMAT_VERSION:
        raise CheckpointVersionError(f"{path}: format version {version}, this build reads {FORMAT_VERSION}")
    try:
        header = json.loads(r.take(hlen).decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt header: {exc}") from exc
    tensors = {}
    for _ in range(header["tensor_count"]):
        (nlen,) = r.unpack("<I")
        name = r.take(nlen).decode("utf-8")
        dtype, rank = r.unpack("<BI")
        if dtype != DTYPE_F32:
            raise CheckpointError(f"{path}: tensor {name} has unknown dtype tag {dtype}")
        shape = r.unpack(f"<{rank}I") if rank else ()
        count = int(np.prod(shape)) if rank else 1
        payload = r.take(4 * count)
        tensors[name] = np.frombuffer(payload, dtype="<f4").astype(np.float64).reshape(shape)
    return Checkpoint(ModelSpec.from_dict(header["model_spec"]), tensors, header["tracked"], header["metadata"], version)


def network_from_checkpoint(ckpt: Checkpoint) -> Network:
    net = Network(ckpt.spec)
    expected = state_arrays(net)
    missing = set(expected) - set(ckpt.tensors)
    if missing:
        raise CheckpointShapeError(f"checkpoint lacks tensors: {sorted(missing)[:5]}")
    for name, arr in expected.items():
        if ckpt.tensors[name].shape != arr.shape:
            raise CheckpointShapeError(f"tensor {name}: checkpoint {ckpt.tensors[name].shape} vs model {arr.shape}")
    restore(net, {"arrays": ckpt.tensors, "tracked": ckpt.tracked})
    net.metadata = dict(ckpt.metadata)
    net.eval()
    return net


def load_checkpoint(path: str | Path) -> Network:
    """Rebuild the network stored at ``path`` (in eval mode); metadata on ``.metadata``."""
    return network_from_checkpoint(read_checkpoint(path))
