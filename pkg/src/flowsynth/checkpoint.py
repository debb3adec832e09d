"""Self-describing network checkpoints.

File layout: 8-byte magic, little-endian uint64 header length, UTF-8 JSON
header, then the raw little-endian tensor bytes in header order. The header
carries the NetConfig, epoch, seed, model kind, format version, a tensor
index and the SHA-256 of the payload. Nothing in the file depends on wall
time, so identical models give identical files.
"""
from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .errors import CheckpointError, DataError
from .io_utils import atomic_path, sha256_bytes
from .nets import NetConfig, init_network

MAGIC = b"FSYNCKPT"
FORMAT_VERSION = 1


@dataclass
class Checkpoint:
    state: dict[str, np.ndarray]
    net_config: NetConfig
    epoch: int
    seed: int
    model_kind: str = "flow_matching"
    format_version: int = FORMAT_VERSION
    digest: str = ""
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: torch.nn.Module, net_config: NetConfig, epoch: int, seed: int,
                   model_kind: str = "flow_matching", **extra) -> "Checkpoint":
        state = {k: v.detach().cpu().numpy().copy() for k, v in model.state_dict().items()}
        return cls(state, net_config, int(epoch), int(seed), model_kind, extra=extra)


def _payload(state: dict[str, np.ndarray]) -> tuple[list[dict], bytes]:
    index, chunks, offset = [], [], 0
    for name in sorted(state):
        arr = np.ascontiguousarray(state[name])
        arr = arr.astype(arr.dtype.newbyteorder("<"), copy=False)
        raw = arr.tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    return index, b"".join(chunks)


def checkpoint_bytes(ckpt: Checkpoint) -> bytes:
    index, payload = _payload(ckpt.state)
    digest = sha256_bytes(payload)
    header = {
        "format_version": ckpt.format_version,
        "net_config": ckpt.net_config.to_dict(),
        "epoch": ckpt.epoch,
        "seed": ckpt.seed,
        "model_kind": ckpt.model_kind,
        "extra": ckpt.extra,
        "tensors": index,
        "payload_sha256": digest,
    }
    head = json.dumps(header, sort_keys=True).encode()
    ckpt.digest = digest
    return MAGIC + struct.pack("<Q", len(head)) + head + payload


def save_checkpoint(ckpt: Checkpoint, path: str | os.PathLike) -> str:
    """Write ``ckpt`` atomically; return the payload digest."""
    data = checkpoint_bytes(ckpt)
    with atomic_path(path) as tmp:
        tmp.write_bytes(data)
    return ckpt.digest


def load_checkpoint(path: str | os.PathLike) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise DataError(f"missing file: checkpoint {path}")
    data = path.read_bytes()
    if len(data) < 16 or data[:8] != MAGIC:
        raise CheckpointError(f"{path} is not a flowsynth checkpoint")
    (hlen,) = struct.unpack("<Q", data[8:16])
    try:
        header = json.loads(data[16:16 + hlen].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"corrupted checkpoint header in {path}") from exc
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError(
            f"checkpoint format version {header.get('format_version')} unsupported (expected {FORMAT_VERSION})")
    payload = data[16 + hlen:]
    if sha256_bytes(payload) != header["payload_sha256"]:
        raise CheckpointError(f"checkpoint digest mismatch in {path}: payload corrupted")
    state = {}
    for entry in header["tensors"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        state[entry["name"]] = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
    cfg = header["net_config"]
    net_config = NetConfig(**{**cfg, "channel_widths": tuple(cfg["channel_widths"]),
                              "attention_levels": tuple(cfg["attention_levels"])})
    return Checkpoint(state, net_config, header["epoch"], header["seed"], header["model_kind"],
                      header["format_version"], header["payload_sha256"], header.get("extra", {}))


def build_model(ckpt: Checkpoint, net_config: NetConfig | None = None) -> torch.nn.Module:
    """Instantiate the network and load parameters bit-exactly.

    Passing a ``net_config`` that disagrees with the checkpoint raises
    CheckpointError naming the first layer whose shape differs.
    """
    config = net_config or ckpt.net_config
    model = init_network(config, seed=0)
    expected = model.state_dict()
    for name in sorted(set(expected) | set(ckpt.state)):
        if name not in ckpt.state:
            raise CheckpointError(f"layer {name!r} missing from checkpoint")
        if name not in expected:
            raise CheckpointError(f"layer {name!r} in checkpoint has no counterpart in the network")
        if tuple(expected[name].shape) != ckpt.state[name].shape:
            raise CheckpointError(
                f"shape mismatch at layer {name!r}: checkpoint {ckpt.state[name].shape} "
                f"vs network {tuple(expected[name].shape)}")
    if config != ckpt.net_config:
        diff = [k for k, v in config.to_dict().items() if ckpt.net_config.to_dict()[k] != v]
        raise CheckpointError(f"NetConfig mismatch in field(s) {diff}")
    model.load_state_dict({k: torch.from_numpy(v.copy()) for k, v in ckpt.state.items()})
    model.eval()
    return model
