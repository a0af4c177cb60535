"""Binary checkpoint format.

Layout (all integers little-endian)::

    b"UNEQ1"                       magic, 5 bytes
    u32                            format version
    32 bytes                       sha256 of the training-dynamics config
    u32                            entry count
    entry*                         u32 name length, utf-8 name, u32 rank,
                                   u32 dims[rank], f32 payload (row-major)
    trailer                        u64 step, u32 stage, f64 alpha,
                                   PCG64 state (u128 state, u128 inc,
                                   u8 has_uint32, u32 uinteger)

Entry names are ``{params|adam_m|adam_v}/{g1|g2|d}/{param name}``.
"""
from __future__ import annotations

import io
import os
import struct
from pathlib import Path

import numpy as np

from .networks import GrowthState
from .training import NETWORKS, TrainConfig, TrainState, init_state

MAGIC = b"UNEQ1"
VERSION = 1
_GROUPS = ("params", "adam_m", "adam_v")


class CheckpointError(Exception):
    pass


class CheckpointVersionError(CheckpointError):
    pass


class CheckpointShapeError(CheckpointError):
    pass


def _u128(x: int) -> bytes:
    return int(x).to_bytes(16, "little")


def encode(state: TrainState, config_hash: bytes = b"\0" * 32) -> bytes:
    if len(config_hash) != 32:
        raise ValueError("config hash must be 32 bytes")
    buf = io.BytesIO()
    buf.write(MAGIC)
    buf.write(struct.pack("<I", VERSION))
    buf.write(config_hash)
    entries = [
        (f"{group}/{net}/{name}", arr)
        for group in _GROUPS
        for net in NETWORKS
        for name, arr in getattr(state, group)[net].items()
    ]
    buf.write(struct.pack("<I", len(entries)))
    for name, arr in entries:
        raw = name.encode("utf-8")
        buf.write(struct.pack("<I", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<I", arr.ndim))
        buf.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
        buf.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())

    rng = state.rng_state
    if rng.get("bit_generator") != "PCG64":
        raise ValueError(f"unsupported bit generator {rng.get('bit_generator')!r}")
    buf.write(struct.pack("<QId", state.step, state.growth.stage, state.growth.alpha))
    buf.write(_u128(rng["state"]["state"]))
    buf.write(_u128(rng["state"]["inc"]))
    buf.write(struct.pack("<BI", int(rng["has_uint32"]), int(rng["uinteger"])))
    return buf.getvalue()


class _Reader:
    def __init__(self, data: bytes):
        self.data = data
        self.pos = 0

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.data):
            raise CheckpointError(f"truncated checkpoint: wanted {n} bytes at offset {self.pos}")
        out = self.data[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode(data: bytes) -> tuple[TrainState, bytes]:
    """Parse checkpoint bytes into (state, config hash). Nothing partial escapes."""
    r = _Reader(data)
    if r.take(len(MAGIC)) != MAGIC:
        raise CheckpointError("not a checkpoint (bad magic bytes)")
    (version,) = r.unpack("<I")
    if version != VERSION:
        raise CheckpointVersionError(f"checkpoint format version {version}, this build reads {VERSION}")
    config_hash = r.take(32)
    (count,) = r.unpack("<I")
    groups = {g: {n: {} for n in NETWORKS} for g in _GROUPS}
    for _ in range(count):
        (nlen,) = r.unpack("<I")
        try:
            name = r.take(nlen).decode("utf-8")
        except UnicodeDecodeError as exc:
            raise CheckpointError(f"corrupt entry name: {exc}") from None
        (rank,) = r.unpack("<I")
        dims = r.unpack(f"<{rank}I")
        n = int(np.prod(dims, dtype=np.int64))
        arr = np.frombuffer(r.take(4 * n), dtype="<f4").astype(np.float32).reshape(dims)
        group, _, rest = name.partition("/")
        net, _, pname = rest.partition("/")
        if group not in groups or net not in NETWORKS or not pname:
            raise CheckpointError(f"unexpected entry {name!r}")
        groups[group][net][pname] = arr
    step, stage, alpha = r.unpack("<QId")
    rng_state = int.from_bytes(r.take(16), "little")
    inc = int.from_bytes(r.take(16), "little")
    has_uint32, uinteger = r.unpack("<BI")
    if r.pos != len(data):
        raise CheckpointError(f"{len(data) - r.pos} trailing bytes after checkpoint trailer")

    for net in NETWORKS:
        p = groups["params"][net]
        for g in ("adam_m", "adam_v"):
            mom = groups[g][net]
            if mom.keys() != p.keys() or any(mom[k].shape != p[k].shape for k in p):
                raise CheckpointShapeError(f"{g}/{net} does not mirror params/{net}")
    try:
        growth = GrowthState(stage, alpha)
    except ValueError as exc:
        raise CheckpointError(f"invalid growth state: {exc}") from None
    state = TrainState(
        params=groups["params"], adam_m=groups["adam_m"], adam_v=groups["adam_v"], step=step,
        rng_state={
            "bit_generator": "PCG64",
            "state": {"state": rng_state, "inc": inc},
            "has_uint32": has_uint32,
            "uinteger": uinteger,
        },
        growth=growth,
    )
    return state, config_hash


def checkpoint_save(state: TrainState, path, config: TrainConfig | None = None) -> None:
    blob = encode(state, config.dynamics_hash() if config is not None else b"\0" * 32)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    tmp.write_bytes(blob)
    os.replace(tmp, path)


def checkpoint_load(path, config: TrainConfig | None = None) -> TrainState:
    """Load a checkpoint; with ``config``, also verify its hash and shapes."""
    try:
        data = Path(path).read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc.strerror}") from None
    state, config_hash = decode(data)
    if config is not None:
        if config_hash != config.dynamics_hash():
            raise CheckpointError(f"checkpoint {path} was written under a different config")
        ref = init_state(config)
        for net in NETWORKS:
            want = {k: v.shape for k, v in ref.params[net].items()}
            got = {k: v.shape for k, v in state.params[net].items()}
            if want != got:
                raise CheckpointShapeError(f"{net} parameter shapes differ from config")
    return state
