"""The ``.vrg`` checkpoint container.

Layout::

    b"VRGCKPT\\0" | u32 format version | u64 header length | JSON header | raw arrays

The header (sorted-key JSON) records the architecture and its digest, the
training-config digest, counters and an index of every array (name, dtype,
shape, offset). Arrays are stored little-endian and C-contiguous, one after
another, so writing the same state twice produces the same bytes.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

log = logging.getLogger(__name__)

MAGIC = b"VRGCKPT\0"
FORMAT_VERSION = 1
PART_KEYS = ("W_R", "W_B", "theta", "W_D")


class CheckpointError(ValueError):
    """Raised for unreadable, tampered or incompatible checkpoints."""


@dataclass
class Checkpoint:
    arch: dict
    params: dict[str, dict[str, torch.Tensor]]
    optim: dict[str, dict] = field(default_factory=dict)
    train_config: dict | None = None
    epoch: int = 0
    step: int = 0
    variant: str = "full"
    extra: dict = field(default_factory=dict)


def _digest(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True).encode()).hexdigest()


def arch_digest(arch: dict) -> str:
    return _digest(arch)


def _flatten(ckpt: Checkpoint):
    arrays: list[tuple[str, np.ndarray]] = []
    for key in sorted(ckpt.params):
        for name, t in ckpt.params[key].items():
            arrays.append((f"params/{key}/{name}", t.detach().cpu().numpy()))
    optim_meta = {}
    for key in sorted(ckpt.optim):
        sd = ckpt.optim[key]
        state_keys = {}
        for idx in sorted(sd["state"]):
            slots = sd["state"][idx]
            state_keys[str(idx)] = sorted(slots)
            for slot in sorted(slots):
                val = slots[slot]
                arr = val.detach().cpu().numpy() if torch.is_tensor(val) else np.asarray(val)
                arrays.append((f"optim/{key}/{idx}/{slot}", arr))
        optim_meta[key] = {"param_groups": sd["param_groups"], "state_keys": state_keys}
    return arrays, optim_meta


def to_bytes(ckpt: Checkpoint) -> bytes:
    arrays, optim_meta = _flatten(ckpt)
    index, chunks, offset = [], [], 0
    for name, arr in arrays:
        arr = np.asarray(arr, order="C")  # ascontiguousarray would promote 0-d to 1-d
        if arr.dtype.byteorder == ">":
            arr = arr.astype(arr.dtype.newbyteorder("<"))
        raw = arr.tobytes()
        index.append({"name": name, "dtype": arr.dtype.str, "shape": list(arr.shape),
                      "offset": offset, "nbytes": len(raw)})
        chunks.append(raw)
        offset += len(raw)
    payload = b"".join(chunks)
    header = {
        "format_version": FORMAT_VERSION,
        "arch": ckpt.arch,
        "arch_digest": arch_digest(ckpt.arch),
        "train_config": ckpt.train_config,
        "train_digest": _digest(ckpt.train_config) if ckpt.train_config is not None else None,
        "epoch": ckpt.epoch,
        "step": ckpt.step,
        "variant": ckpt.variant,
        "extra": ckpt.extra,
        "optim": optim_meta,
        "arrays": index,
        "payload_sha256": hashlib.sha256(payload).hexdigest(),
    }
    hbytes = json.dumps(header, sort_keys=True).encode()
    return MAGIC + struct.pack("<IQ", FORMAT_VERSION, len(hbytes)) + hbytes + payload


def save_checkpoint(path, ckpt: Checkpoint) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_suffix(path.suffix + ".tmp")
    tmp.write_bytes(to_bytes(ckpt))
    tmp.replace(path)
    return path


def from_bytes(blob: bytes) -> Checkpoint:
    if blob[:len(MAGIC)] != MAGIC:
        raise CheckpointError("not a .vrg checkpoint (bad magic)")
    version, hlen = struct.unpack_from("<IQ", blob, len(MAGIC))
    if version != FORMAT_VERSION:
        raise CheckpointError(f"incompatible checkpoint format version {version} (expected {FORMAT_VERSION})")
    start = len(MAGIC) + struct.calcsize("<IQ")
    header = json.loads(blob[start:start + hlen])
    payload = blob[start + hlen:]
    if header.get("format_version") != FORMAT_VERSION:
        raise CheckpointError("header format version disagrees with container version")
    if arch_digest(header["arch"]) != header["arch_digest"]:
        raise CheckpointError("architecture digest mismatch: header was modified")
    if header["train_config"] is not None and _digest(header["train_config"]) != header["train_digest"]:
        raise CheckpointError("training-config digest mismatch: header was modified")
    if hashlib.sha256(payload).hexdigest() != header["payload_sha256"]:
        raise CheckpointError("payload digest mismatch: arrays were modified")

    arrays = {}
    for entry in header["arrays"]:
        raw = payload[entry["offset"]:entry["offset"] + entry["nbytes"]]
        arr = np.frombuffer(raw, dtype=np.dtype(entry["dtype"])).reshape(entry["shape"]).copy()
        arrays[entry["name"]] = arr

    params: dict[str, dict[str, torch.Tensor]] = {}
    for name, arr in arrays.items():
        if name.startswith("params/"):
            _, key, pname = name.split("/", 2)
            params.setdefault(key, {})[pname] = torch.from_numpy(arr)
    optim = {}
    for key, meta in header["optim"].items():
        state = {}
        for idx, slots in meta["state_keys"].items():
            state[int(idx)] = {s: torch.from_numpy(arrays[f"optim/{key}/{idx}/{s}"]) for s in slots}
        groups = []
        for g in meta["param_groups"]:
            g = dict(g)
            if isinstance(g.get("betas"), list):
                g["betas"] = tuple(g["betas"])
            groups.append(g)
        optim[key] = {"state": state, "param_groups": groups}
    return Checkpoint(arch=header["arch"], params=params, optim=optim,
                      train_config=header["train_config"], epoch=header["epoch"],
                      step=header["step"], variant=header["variant"], extra=header["extra"])


def load_checkpoint(path, expected_arch: dict | None = None) -> Checkpoint:
    """Read a checkpoint, optionally insisting on a specific architecture."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint {path} not found")
    ckpt = from_bytes(path.read_bytes())
    if expected_arch is not None and arch_digest(expected_arch) != arch_digest(ckpt.arch):
        raise CheckpointError(
            f"checkpoint {path} was written for a different architecture "
            f"({arch_digest(ckpt.arch)[:12]} vs expected {arch_digest(expected_arch)[:12]})"
        )
    return ckpt


def params_digest(state_dict: dict[str, torch.Tensor]) -> str:
    """Hash of a parameter collection; used to verify update isolation."""
    h = hashlib.sha256()
    for name in sorted(state_dict):
        h.update(name.encode())
        h.update(state_dict[name].detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()
