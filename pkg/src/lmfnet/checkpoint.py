"""Checkpoint files: a JSON manifest followed by LMFT tensor records.

Layout, little-endian::

    b"LMFK"  u16 version  u32 manifest length  manifest (UTF-8 JSON)
    one LMFT record per tensor, in manifest order

The manifest carries the network config, the dtype, the tensor list
(``name``, ``group``, ``shape``), optimizer hyperparameters and any extra
metadata.  Groups are ``param``, ``buffer`` (batch-norm running statistics)
and ``optim:<buffer>:<index>`` for optimizer moments.  The whole file is
parsed and validated before any network is touched.
"""

from __future__ import annotations

import io
import json
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import BadMagicError, CheckpointMismatchError, HeaderError, TruncatedError, VersionError
from .lmft import read_tensor, write_tensor
from .network import NetworkConfig, build_classifier, build_sod_network
from .training import OptimizerState

MAGIC = b"LMFK"
VERSION = 1


@dataclass
class Checkpoint:
    config: NetworkConfig
    dtype: str
    tensors: dict[str, np.ndarray]
    groups: dict[str, str]
    optimizer: OptimizerState | None = None
    num_classes: int | None = None
    extra: dict = field(default_factory=dict)

    def build(self):
        """A fresh network carrying the stored parameters and buffers."""
        if self.config.head.kind == "classifier":
            net = build_classifier(self.config, num_classes=self.num_classes, dtype=self.dtype)
        else:
            net = build_sod_network(self.config, dtype=self.dtype)
        load_state(net, self)
        return net


def _state(network):
    params = [(n, p.value, "param") for n, p in network.named_parameters()]
    buffers = [(n, b, "buffer") for n, b in network.named_buffers()]
    return params + buffers


def checkpoint_bytes(network, optimizer: OptimizerState | None = None, extra: dict | None = None) -> bytes:
    records = _state(network)
    optim = None
    if optimizer is not None:
        optim = optimizer.hyper()
        names = [n for n, _ in network.named_parameters()]
        for key, bufs in sorted(optimizer.buffers.items()):
            if len(bufs) != len(names):
                raise CheckpointMismatchError(f"optimizer buffer {key!r} has {len(bufs)} entries for {len(names)} parameters")
            records += [(f"{name}#{key}", b, f"optim:{key}") for name, b in zip(names, bufs)]
    manifest = {
        "config": network.config.to_dict(),
        "dtype": network.dtype.name,
        "num_classes": getattr(network, "num_classes", None),
        "tensors": [{"name": n, "group": g, "shape": list(a.shape)} for n, a, g in records],
        "optimizer": optim,
        "extra": extra or {},
    }
    header = json.dumps(manifest, sort_keys=True).encode("utf-8")
    buf = io.BytesIO()
    buf.write(MAGIC + struct.pack("<HI", VERSION, len(header)) + header)
    for _, arr, _ in records:
        write_tensor(buf, arr)
    return buf.getvalue()


def save_checkpoint(path, network, optimizer: OptimizerState | None = None, extra: dict | None = None) -> None:
    """Write atomically: a crash mid-write never leaves a half checkpoint at ``path``."""
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(checkpoint_bytes(network, optimizer, extra))
    tmp.replace(path)


def parse_checkpoint(data: bytes, where: str = "checkpoint") -> Checkpoint:
    if len(data) < 10:
        raise TruncatedError(f"{where}: {len(data)} bytes is shorter than the checkpoint header")
    if data[:4] != MAGIC:
        raise BadMagicError(f"{where}: bad magic {data[:4]!r}")
    version, length = struct.unpack("<HI", data[4:10])
    if version != VERSION:
        raise VersionError(f"{where}: unsupported checkpoint version {version}")
    if len(data) < 10 + length:
        raise TruncatedError(f"{where}: manifest needs {length} bytes, file has {len(data) - 10}")
    try:
        manifest = json.loads(data[10:10 + length].decode("utf-8"))
        entries = manifest["tensors"]
        config = NetworkConfig.from_dict(manifest["config"])
    except (UnicodeDecodeError, json.JSONDecodeError, KeyError, TypeError) as exc:
        raise HeaderError(f"{where}: malformed manifest: {exc}") from None
    f = io.BytesIO(data[10 + length:])
    tensors, groups = {}, {}
    for entry in entries:
        name = entry["name"]
        arr = read_tensor(f)
        if list(arr.shape) != list(entry["shape"]):
            raise HeaderError(f"{where}: tensor {name} has shape {arr.shape}, manifest says {entry['shape']}")
        tensors[name] = arr
        groups[name] = entry["group"]
    if f.read(1):
        raise HeaderError(f"{where}: trailing bytes after the last tensor")
    optimizer = None
    if manifest.get("optimizer"):
        optimizer = OptimizerState(**manifest["optimizer"])
        param_names = [n for n, g in groups.items() if g == "param"]
        keys = sorted({g.split(":", 1)[1] for g in groups.values() if g.startswith("optim:")})
        optimizer.buffers = {k: [tensors[f"{n}#{k}"] for n in param_names] for k in keys}
    return Checkpoint(config, manifest["dtype"], tensors, groups, optimizer,
                      manifest.get("num_classes"), manifest.get("extra", {}))


def read_checkpoint(path) -> Checkpoint:
    return parse_checkpoint(Path(path).read_bytes(), str(path))


def load_state(network, ckpt: Checkpoint) -> None:
    """Copy stored parameters and buffers into ``network`` in place.

    Every tensor is checked before anything is written, so a mismatch leaves
    the network untouched.
    """
    stored = [(n, a) for n, a in ckpt.tensors.items() if ckpt.groups[n] in ("param", "buffer")]
    target = [(n, a) for n, a, _ in _state(network)]
    for i in range(max(len(stored), len(target))):
        if i >= len(stored):
            raise CheckpointMismatchError(f"tensor {target[i][0]} is missing from the checkpoint")
        if i >= len(target):
            raise CheckpointMismatchError(f"checkpoint tensor {stored[i][0]} has no counterpart in the network")
        (sn, sa), (tn, ta) = stored[i], target[i]
        if sn != tn:
            raise CheckpointMismatchError(f"tensor {i} is {sn} in the checkpoint but {tn} in the network")
        if sa.shape != ta.shape:
            raise CheckpointMismatchError(f"tensor {sn}: checkpoint shape {sa.shape}, network shape {ta.shape}")
    for (_, sa), (_, ta) in zip(stored, target):
        np.copyto(ta, sa.astype(ta.dtype, copy=False))


def load_checkpoint(path):
    """Rebuild the network stored at ``path``; returns ``(network, checkpoint)``."""
    ckpt = read_checkpoint(path)
    return ckpt.build(), ckpt


def load_into(network, path) -> Checkpoint:
    ckpt = read_checkpoint(path)
    load_state(network, ckpt)
    return ckpt
