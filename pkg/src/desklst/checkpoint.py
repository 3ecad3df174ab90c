"""Binary checkpoint container.

Layout: b"PCST" | u32 version | u32 header length | UTF-8 JSON header | payload.
The header maps tensor name -> {dtype, shape, offset, group}; payloads are raw
little-endian f32 in sorted name order.  Optimizer moments are stored as tensors of
group ``optimizer`` named ``adamw.m/<param>`` and ``adamw.v/<param>``.
"""

from __future__ import annotations

import json
import os
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from .errors import IntegrityError, VersionError
from .model import ParamStore

MAGIC = b"PCST"
VERSION = 1
_F32 = np.dtype("<f4")


@dataclass
class Checkpoint:
    tensors: dict[str, np.ndarray]
    groups: dict[str, str]
    moments: dict[str, tuple[np.ndarray, np.ndarray]] = field(default_factory=dict)
    rng_state: dict | None = None
    step: int = 0
    meta: dict = field(default_factory=dict)

    @classmethod
    def from_store(cls, store: ParamStore, groups: Sequence[str] | None = None, **kw) -> "Checkpoint":
        names = [n for n in store.names() if groups is None or store.groups[n] in groups]
        return cls({n: store[n].data.astype(_F32) for n in names},
                   {n: store.groups[n] for n in names}, **kw)

    def group_names(self) -> set[str]:
        return set(self.groups.values())


def save_checkpoint(ckpt: Checkpoint, path) -> Path:
    """Atomic write (temp file + rename)."""
    path = Path(path)
    entries = {}
    blobs = []
    offset = 0

    def put(name, arr, group):
        nonlocal offset
        a = np.ascontiguousarray(arr, dtype=_F32)
        entries[name] = {"dtype": "f32", "shape": list(a.shape), "offset": offset, "group": group}
        blobs.append(a.tobytes())
        offset += a.nbytes

    for name in sorted(ckpt.tensors):
        put(name, ckpt.tensors[name], ckpt.groups[name])
    for name in sorted(ckpt.moments):
        m, v = ckpt.moments[name]
        put(f"adamw.m/{name}", m, "optimizer")
        put(f"adamw.v/{name}", v, "optimizer")
    header = {"tensors": entries, "payload_bytes": offset, "rng_state": ckpt.rng_state,
              "step": int(ckpt.step), "meta": ckpt.meta}
    hbytes = json.dumps(header, sort_keys=True, separators=(",", ":")).encode("utf-8")
    tmp = path.with_name(path.name + ".tmp")
    with open(tmp, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<II", VERSION, len(hbytes)))
        fh.write(hbytes)
        for b in blobs:
            fh.write(b)
    os.replace(tmp, path)
    return path


def load_checkpoint(path) -> Checkpoint:
    raw = Path(path).read_bytes()
    if len(raw) < 12 or raw[:4] != MAGIC:
        raise VersionError(f"{path}: not a checkpoint (bad magic)")
    version, hlen = struct.unpack("<II", raw[4:12])
    if version != VERSION:
        raise VersionError(f"{path}: unsupported checkpoint version {version}")
    if 12 + hlen > len(raw):
        raise IntegrityError(f"{path}: truncated header")
    try:
        header = json.loads(raw[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as e:
        raise IntegrityError(f"{path}: unreadable header ({e})") from None
    payload = raw[12 + hlen:]
    if len(payload) != header["payload_bytes"]:
        raise IntegrityError(f"{path}: payload is {len(payload)} bytes, header declares "
                             f"{header['payload_bytes']}")
    tensors, groups, m, v = {}, {}, {}, {}
    for name, e in header["tensors"].items():
        n = int(np.prod(e["shape"], dtype=np.int64))
        end = e["offset"] + 4 * n
        if e["dtype"] != "f32" or end > len(payload):
            raise IntegrityError(f"{path}: bad entry for {name}")
        arr = np.frombuffer(payload, dtype=_F32, count=n, offset=e["offset"]).reshape(e["shape"])
        arr = arr.astype(np.float32)
        if e["group"] == "optimizer":
            kind, pname = name.split("/", 1)
            (m if kind == "adamw.m" else v)[pname] = arr
        else:
            tensors[name] = arr
            groups[name] = e["group"]
    moments = {k: (m[k], v[k]) for k in m}
    return Checkpoint(tensors, groups, moments, header.get("rng_state"), header.get("step", 0),
                      header.get("meta", {}))


def load_into(store: ParamStore, ckpt: Checkpoint, groups: Sequence[str] | None = None) -> list[str]:
    """Copy checkpoint tensors into ``store`` for the given (or all present) groups.

    Every model tensor of a loaded group must be present with the same shape.
    """
    groups = sorted(ckpt.group_names()) if groups is None else list(groups)
    loaded = []
    for g in groups:
        want = [n for n in store.names() if store.groups[n] == g]
        have = [n for n, gg in ckpt.groups.items() if gg == g]
        if set(want) != set(have):
            raise IntegrityError(f"group {g!r}: checkpoint has {len(have)} tensors, model has {len(want)}")
        for n in want:
            if ckpt.tensors[n].shape != store[n].shape:
                raise IntegrityError(f"{n}: shape {ckpt.tensors[n].shape} vs model {store[n].shape}")
            store[n].data = ckpt.tensors[n].astype(store[n].dtype, copy=True)
            loaded.append(n)
    return loaded


def average_checkpoints(paths: Sequence) -> Checkpoint:
    """Elementwise mean of tensors; moments and RNG state are dropped."""
    if len(paths) < 2:
        raise IntegrityError("averaging needs at least two checkpoints")
    ckpts = [load_checkpoint(p) if not isinstance(p, Checkpoint) else p for p in paths]
    first = ckpts[0]
    for c in ckpts[1:]:
        if set(c.tensors) != set(first.tensors):
            raise IntegrityError("checkpoints hold different tensor names")
        for n, a in c.tensors.items():
            if a.shape != first.tensors[n].shape:
                raise IntegrityError(f"{n}: shape mismatch {a.shape} vs {first.tensors[n].shape}")
    avg = {}
    for n in first.tensors:
        acc = np.zeros(first.tensors[n].shape, dtype=np.float64)
        for c in ckpts:
            acc += c.tensors[n]
        avg[n] = (acc / len(ckpts)).astype(np.float32)
    meta = dict(first.meta)
    meta["averaged_from"] = len(ckpts)
    return Checkpoint(avg, dict(first.groups), {}, None, max(c.step for c in ckpts), meta)
