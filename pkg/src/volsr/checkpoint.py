"""Self-describing binary checkpoint container.

Layout: magic "VSCK", format version byte, three reserved zero bytes, a
little-endian uint64 header length, a canonical-JSON header, then the raw
array payloads concatenated in header order. Entries are sorted by name
and the header is serialized canonically, so save -> load -> save
reproduces the file byte for byte. Loading checks the stored kind and
config hash and refuses mismatches, printing both hashes.
"""

import json
import struct
from dataclasses import dataclass, field

import numpy as np
import torch

from .errors import CheckpointMismatchError, ParseError, ValidationError
from .ioutil import atomic_write_bytes, canonical_json

CKPT_MAGIC = b"VSCK"
CKPT_VERSION = 1
_PREFIX = struct.Struct("<4sB3xQ")


@dataclass
class Checkpoint:
    """Named float/int arrays plus JSON-serializable metadata."""

    kind: str
    config_hash: str
    spec: dict
    epoch: int
    arrays: dict
    extra: dict = field(default_factory=dict)

    def __post_init__(self):
        if not self.kind:
            raise ValidationError("checkpoint kind must be non-empty")
        for name, arr in self.arrays.items():
            if not isinstance(arr, np.ndarray):
                raise ValidationError(f"checkpoint entry {name!r} is not an ndarray")


def save_checkpoint(path, ckpt: Checkpoint) -> None:
    entries = []
    payload = bytearray()
    for name in sorted(ckpt.arrays):
        arr = ckpt.arrays[name]
        # note: ascontiguousarray promotes 0-d to 1-d, so record arr.shape
        raw = np.ascontiguousarray(arr).tobytes()
        entries.append({
            "name": name,
            "dtype": arr.dtype.str,
            "shape": list(arr.shape),
            "nbytes": len(raw),
        })
        payload.extend(raw)
    header = canonical_json({
        "kind": ckpt.kind,
        "format_version": CKPT_VERSION,
        "config_hash": ckpt.config_hash,
        "spec": ckpt.spec,
        "epoch": ckpt.epoch,
        "entries": entries,
        "extra": ckpt.extra,
    }).encode("utf-8")
    blob = _PREFIX.pack(CKPT_MAGIC, CKPT_VERSION, len(header)) + header + bytes(payload)
    atomic_write_bytes(path, blob)


def load_checkpoint(path, expect_kind=None, expect_config_hash=None) -> Checkpoint:
    try:
        with open(path, "rb") as fh:
            raw = fh.read()
    except OSError as exc:
        raise ParseError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(raw) < _PREFIX.size:
        raise ParseError(f"{path}: too short for a checkpoint header")
    magic, version, header_len = _PREFIX.unpack_from(raw)
    if magic != CKPT_MAGIC:
        raise ParseError(f"{path}: bad checkpoint magic {magic!r}")
    if version != CKPT_VERSION:
        raise ParseError(f"{path}: unsupported checkpoint version {version}")
    header_end = _PREFIX.size + header_len
    if len(raw) < header_end:
        raise ParseError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(raw[_PREFIX.size:header_end].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise ParseError(f"{path}: corrupt checkpoint header: {exc}") from exc

    arrays = {}
    offset = header_end
    for entry in header["entries"]:
        nbytes = entry["nbytes"]
        chunk = raw[offset:offset + nbytes]
        if len(chunk) != nbytes:
            raise ParseError(
                f"{path}: truncated payload for entry {entry['name']!r}, "
                f"expected {nbytes} bytes, got {len(chunk)}"
            )
        arr = np.frombuffer(chunk, dtype=np.dtype(entry["dtype"]))
        arrays[entry["name"]] = arr.reshape(entry["shape"]).copy()
        offset += nbytes
    if offset != len(raw):
        raise ParseError(f"{path}: {len(raw) - offset} trailing bytes after payload")

    ckpt = Checkpoint(
        kind=header["kind"],
        config_hash=header["config_hash"],
        spec=header["spec"],
        epoch=header["epoch"],
        arrays=arrays,
        extra=header.get("extra", {}),
    )
    if expect_kind is not None and ckpt.kind != expect_kind:
        raise CheckpointMismatchError(
            f"{path}: checkpoint kind is {ckpt.kind!r}, expected {expect_kind!r}"
        )
    if expect_config_hash is not None and ckpt.config_hash != expect_config_hash:
        raise CheckpointMismatchError(
            f"{path}: checkpoint config hash {ckpt.config_hash} does not match "
            f"expected {expect_config_hash}"
        )
    return ckpt


def module_arrays(prefix: str, module: torch.nn.Module) -> dict:
    """Flatten a module state dict (parameters and buffers) to named arrays."""
    out = {}
    for name, tensor in module.state_dict().items():
        out[f"{prefix}/{name}"] = tensor.detach().cpu().numpy().copy()
    return out


def load_module_arrays(prefix: str, arrays: dict, module: torch.nn.Module) -> None:
    """Restore a module state dict from named arrays; strict key match."""
    state = {}
    head = f"{prefix}/"
    for name, arr in arrays.items():
        if name.startswith(head):
            state[name[len(head):]] = torch.from_numpy(arr.copy())
    missing = set(module.state_dict()) - set(state)
    if missing:
        raise CheckpointMismatchError(
            f"checkpoint lacks entries for {prefix}: {sorted(missing)[:4]}"
        )
    module.load_state_dict(state)


def optimizer_arrays(prefix: str, optimizer: torch.optim.Optimizer):
    """Flatten optimizer state to (arrays, param_groups json)."""
    sd = optimizer.state_dict()
    arrays = {}
    scalars = {}
    for idx, entry in sd["state"].items():
        for key, value in entry.items():
            if isinstance(value, torch.Tensor):
                arrays[f"{prefix}/{idx}/{key}"] = value.detach().cpu().numpy().copy()
            else:
                scalars[f"{idx}/{key}"] = value
    groups = []
    for group in sd["param_groups"]:
        clean = dict(group)
        clean["betas"] = list(group["betas"]) if "betas" in group else None
        groups.append(clean)
    return arrays, {"param_groups": groups, "scalars": scalars}


def load_optimizer_arrays(prefix, arrays, meta, optimizer) -> None:
    state = {}
    head = f"{prefix}/"
    for name, arr in arrays.items():
        if not name.startswith(head):
            continue
        idx_str, key = name[len(head):].split("/", 1)
        state.setdefault(int(idx_str), {})[key] = torch.from_numpy(arr.copy())
    for flat_key, value in meta.get("scalars", {}).items():
        idx_str, key = flat_key.split("/", 1)
        state.setdefault(int(idx_str), {})[key] = value
    groups = []
    for group in meta["param_groups"]:
        clean = dict(group)
        if clean.get("betas") is not None:
            clean["betas"] = tuple(clean["betas"])
        groups.append(clean)
    optimizer.load_state_dict({"state": state, "param_groups": groups})


def torch_rng_array() -> np.ndarray:
    return torch.get_rng_state().numpy().copy()


def restore_torch_rng(arr: np.ndarray) -> None:
    torch.set_rng_state(torch.from_numpy(arr.copy()).to(torch.uint8))
