"""Binary checkpoint container.

Layout::

    b"ADAFUSE-CKPT\\n"                 magic
    uint64 little-endian              header length in bytes
    UTF-8 JSON header                 schema_version, kind, combos, meta,
                                      arrays: [{name, shape}, ...]
    float64 little-endian blocks      one per array, row-major, in header order

Values are written as raw IEEE-754 doubles, so a save/load round trip is
bit-exact.
"""

from __future__ import annotations

import json
import struct
from pathlib import Path
from typing import Mapping

import numpy as np

from .models import COMBOS, ClassifierBank, DynMMGate, MoEGate
from .numerics import Module
from .policy import AdaFuseNetwork, PolicyNetwork

MAGIC = b"ADAFUSE-CKPT\n"
SCHEMA_VERSION = 1


class CheckpointError(ValueError):
    pass


def save_arrays(path: str | Path, kind: str, arrays: Mapping[str, np.ndarray],
                meta: Mapping | None = None) -> None:
    entries = []
    blocks = []
    for name, arr in arrays.items():
        a = np.ascontiguousarray(arr, dtype="<f8")
        entries.append({"name": name, "shape": list(a.shape)})
        blocks.append(a.tobytes(order="C"))
    header = {
        "schema_version": SCHEMA_VERSION,
        "kind": kind,
        "combos": [c.name for c in COMBOS],
        "meta": dict(meta or {}),
        "arrays": entries,
    }
    raw = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<Q", len(raw)))
        fh.write(raw)
        for b in blocks:
            fh.write(b)


def load_arrays(path: str | Path, kind: str | None = None) -> tuple[dict, dict[str, np.ndarray]]:
    """Return ``(header, {name: array})``; validates magic, schema, kind and sizes."""
    path = Path(path)
    if not path.exists():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    data = path.read_bytes()
    if not data.startswith(MAGIC):
        raise CheckpointError(f"{path}: not an adafuse checkpoint (bad magic)")
    off = len(MAGIC)
    if len(data) < off + 8:
        raise CheckpointError(f"{path}: truncated header")
    (hlen,) = struct.unpack_from("<Q", data, off)
    off += 8
    try:
        header = json.loads(data[off:off + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: unreadable header ({exc})") from None
    off += hlen
    if header.get("schema_version") != SCHEMA_VERSION:
        raise CheckpointError(f"{path}: unsupported schema version {header.get('schema_version')}")
    if kind is not None and header.get("kind") != kind:
        raise CheckpointError(f"{path}: expected a {kind!r} checkpoint, found {header.get('kind')!r}")
    if header.get("combos") != [c.name for c in COMBOS]:
        raise CheckpointError(f"{path}: combo table does not match this version")
    arrays = {}
    for entry in header["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = 8 * int(np.prod(shape, dtype=np.int64))
        if off + nbytes > len(data):
            raise CheckpointError(f"{path}: truncated data for {entry['name']}")
        arrays[entry["name"]] = np.frombuffer(data, dtype="<f8", count=nbytes // 8,
                                              offset=off).reshape(shape).astype(np.float64)
        off += nbytes
    if off != len(data):
        raise CheckpointError(f"{path}: {len(data) - off} trailing bytes")
    return header, arrays


def module_arrays(module: Module) -> dict[str, np.ndarray]:
    out = {p.name: p.value for p in module.parameters()}
    buffers = getattr(module, "buffers", None)
    if buffers is not None:
        out.update(buffers())
    return out


def load_module(module: Module, arrays: Mapping[str, np.ndarray], path: str | Path = "") -> None:
    for p in module.parameters():
        if p.name not in arrays:
            raise CheckpointError(f"{path}: missing array {p.name}")
        if arrays[p.name].shape != p.value.shape:
            raise CheckpointError(f"{path}: shape mismatch for {p.name}: "
                                  f"{arrays[p.name].shape} vs {p.value.shape}")
        p.value[...] = arrays[p.name]
    if isinstance(module, ClassifierBank):
        for enc in module.encoders:
            for attr, key in (("shift", f"{enc.name}.shift"), ("scale", f"{enc.name}.scale")):
                if key not in arrays:
                    raise CheckpointError(f"{path}: missing array {key}")
                setattr(enc, attr, arrays[key].copy())


def save_bank(bank: ClassifierBank, path: str | Path, meta: Mapping | None = None) -> None:
    save_arrays(path, "bank", module_arrays(bank), meta)


def load_bank(path: str | Path) -> tuple[ClassifierBank, dict]:
    header, arrays = load_arrays(path, "bank")
    bank = ClassifierBank()
    load_module(bank, arrays, path)
    return bank, header["meta"]


def save_adafuse(net: AdaFuseNetwork, path: str | Path, meta: Mapping | None = None) -> None:
    arrays = module_arrays(net.bank)
    arrays.update(module_arrays(net.policy))
    save_arrays(path, "adafuse", arrays, meta)


def load_adafuse(path: str | Path) -> tuple[AdaFuseNetwork, dict]:
    header, arrays = load_arrays(path, "adafuse")
    net = AdaFuseNetwork(ClassifierBank(), PolicyNetwork())
    load_module(net.bank, arrays, path)
    load_module(net.policy, arrays, path)
    return net, header["meta"]


def save_gate(gate: MoEGate | DynMMGate, path: str | Path, meta: Mapping | None = None) -> None:
    kind = "moe" if isinstance(gate, MoEGate) else "dynmm"
    save_arrays(path, kind, module_arrays(gate), meta)


def load_gate(path: str | Path, kind: str) -> tuple[MoEGate | DynMMGate, dict]:
    header, arrays = load_arrays(path, kind)
    gate = MoEGate() if kind == "moe" else DynMMGate()
    load_module(gate, arrays, path)
    return gate, header["meta"]
