"""Binary volume (FSVL) and checkpoint (FSCK) containers.

Both are little-endian.  FSVL::

    b"FSVL" | version u16 | dims 3 x u32 | dtype u8 | payload | crc32(payload) u32

FSCK::

    b"FSCK" | version u16 | meta_len u32 | meta (UTF-8 JSON)
    | n_entries u32 | n x (name_len u16, name, dtype u8, ndim u8, ndim x u32)
    | payloads in table order | crc32(everything after the version) u32
"""

from __future__ import annotations

import json
import struct
import zlib
from pathlib import Path

import numpy as np

from ..fewshot.checkpoint import FORMAT_VERSION, Checkpoint
from ..fewshot.config import TrainConfig
from ..numerics import AdamState

VOLUME_MAGIC = b"FSVL"
VOLUME_VERSION = 1
CHECKPOINT_MAGIC = b"FSCK"

_VOLUME_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1")}
_CKPT_DTYPES = {0: np.dtype("<f4"), 1: np.dtype("u1"), 2: np.dtype("<f8")}


class FormatError(ValueError):
    """File is not a well-formed container."""


class VersionError(FormatError):
    def __init__(self, kind: str, found: int, supported: int):
        super().__init__(f"{kind} format version {found} is not supported (this build reads "
                         f"version {supported})")
        self.found = found
        self.supported = supported


class ChecksumError(FormatError):
    pass


def _code_for(dtype, table) -> int:
    dt = np.dtype(dtype).newbyteorder("<") if np.dtype(dtype).kind == "f" else np.dtype(dtype)
    for code, ref in table.items():
        if ref == dt:
            return code
    raise FormatError(f"unsupported dtype {dtype}")


# -- volumes -------------------------------------------------------------------

def encode_volume(array: np.ndarray) -> bytes:
    if array.ndim != 3:
        raise ValueError(f"volume must be 3D, got shape {array.shape}")
    if array.dtype.kind == "f":
        array = array.astype("<f4")
    code = _code_for(array.dtype, _VOLUME_DTYPES)
    payload = np.ascontiguousarray(array).tobytes()
    header = VOLUME_MAGIC + struct.pack("<H3IB", VOLUME_VERSION, *array.shape, code)
    return header + payload + struct.pack("<I", zlib.crc32(payload))


def decode_volume(blob: bytes) -> np.ndarray:
    head = 4 + struct.calcsize("<H3IB")
    if len(blob) < head + 4 or blob[:4] != VOLUME_MAGIC:
        raise FormatError("not an FSVL volume file")
    version, t, h, w, code = struct.unpack_from("<H3IB", blob, 4)
    if version != VOLUME_VERSION:
        raise VersionError("volume", version, VOLUME_VERSION)
    if code not in _VOLUME_DTYPES:
        raise FormatError(f"unknown dtype code {code}")
    dtype = _VOLUME_DTYPES[code]
    size = t * h * w * dtype.itemsize
    if len(blob) != head + size + 4:
        raise FormatError(f"payload length {len(blob) - head - 4} != expected {size} (truncated?)")
    payload = blob[head:head + size]
    (crc,) = struct.unpack_from("<I", blob, head + size)
    if zlib.crc32(payload) != crc:
        raise ChecksumError("volume payload checksum mismatch")
    return np.frombuffer(payload, dtype=dtype).reshape(t, h, w).copy()


def write_volume(path, array: np.ndarray) -> None:
    Path(path).write_bytes(encode_volume(array))


def read_volume(path) -> np.ndarray:
    return decode_volume(Path(path).read_bytes())


# -- checkpoints -----------------------------------------------------------------

def _arrays(ckpt: Checkpoint) -> list[tuple[str, np.ndarray]]:
    out = [(f"param/{k}", v) for k, v in ckpt.params.items()]
    out += [(f"adam.m/{k}", v) for k, v in ckpt.optimizer.first_moment.items()]
    out += [(f"adam.v/{k}", v) for k, v in ckpt.optimizer.second_moment.items()]
    return out


def encode_checkpoint(ckpt: Checkpoint) -> bytes:
    opt = ckpt.optimizer
    meta = {
        "config": ckpt.config.to_dict(),
        "iteration": ckpt.iteration,
        "history": [float(x) for x in ckpt.history],
        "meta": ckpt.meta,
        "adam": {"step_count": opt.step_count, "beta1": opt.beta1, "beta2": opt.beta2,
                 "epsilon": opt.epsilon},
    }
    meta_bytes = json.dumps(meta, sort_keys=True, separators=(",", ":")).encode()
    arrays = _arrays(ckpt)
    body = [struct.pack("<I", len(meta_bytes)), meta_bytes, struct.pack("<I", len(arrays))]
    for name, arr in arrays:
        raw = name.encode()
        code = _code_for(arr.dtype, _CKPT_DTYPES)
        body.append(struct.pack("<H", len(raw)) + raw + struct.pack("<BB", code, arr.ndim))
        body.append(struct.pack(f"<{arr.ndim}I", *arr.shape))
    for _, arr in arrays:
        body.append(np.ascontiguousarray(arr, dtype=arr.dtype.newbyteorder("<")).tobytes())
    blob = b"".join(body)
    return (CHECKPOINT_MAGIC + struct.pack("<H", ckpt.version) + blob
            + struct.pack("<I", zlib.crc32(blob)))


class _Reader:
    def __init__(self, blob: bytes, pos: int):
        self.blob, self.pos = blob, pos

    def take(self, n: int) -> bytes:
        if self.pos + n > len(self.blob):
            raise FormatError("checkpoint truncated")
        out = self.blob[self.pos:self.pos + n]
        self.pos += n
        return out

    def unpack(self, fmt: str):
        return struct.unpack(fmt, self.take(struct.calcsize(fmt)))


def decode_checkpoint(blob: bytes) -> Checkpoint:
    if len(blob) < 10 or blob[:4] != CHECKPOINT_MAGIC:
        raise FormatError("not an FSCK checkpoint file")
    (version,) = struct.unpack_from("<H", blob, 4)
    if version != FORMAT_VERSION:
        raise VersionError("checkpoint", version, FORMAT_VERSION)
    body = blob[6:-4]
    (crc,) = struct.unpack_from("<I", blob, len(blob) - 4)
    if zlib.crc32(body) != crc:
        raise ChecksumError("checkpoint checksum mismatch (corrupt or truncated file)")

    r = _Reader(body, 0)
    (meta_len,) = r.unpack("<I")
    try:
        meta = json.loads(r.take(meta_len).decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"bad checkpoint metadata: {exc}") from None
    (count,) = r.unpack("<I")
    table = []
    for _ in range(count):
        (name_len,) = r.unpack("<H")
        name = r.take(name_len).decode()
        code, ndim = r.unpack("<BB")
        if code not in _CKPT_DTYPES:
            raise FormatError(f"unknown dtype code {code} for {name!r}")
        shape = r.unpack(f"<{ndim}I") if ndim else ()
        table.append((name, _CKPT_DTYPES[code], shape))
    names = [t[0] for t in table]
    if len(set(names)) != len(names):
        raise FormatError("duplicate entry names in checkpoint table")
    groups: dict[str, dict[str, np.ndarray]] = {"param": {}, "adam.m": {}, "adam.v": {}}
    for name, dtype, shape in table:
        n = int(np.prod(shape)) if shape else 1
        arr = np.frombuffer(r.take(n * dtype.itemsize), dtype=dtype).reshape(shape)
        arr = arr.astype(dtype.newbyteorder("="))
        group, _, key = name.partition("/")
        if group not in groups:
            raise FormatError(f"unexpected checkpoint entry {name!r}")
        groups[group][key] = arr
    if r.pos != len(body):
        raise FormatError("trailing bytes after checkpoint payload")
    adam = meta["adam"]
    optimizer = AdamState(groups["adam.m"], groups["adam.v"], adam["step_count"],
                          adam["beta1"], adam["beta2"], adam["epsilon"])
    return Checkpoint(groups["param"], optimizer, TrainConfig.from_dict(meta["config"]),
                      meta["iteration"], meta["history"], meta["meta"], version)


def save_checkpoint(checkpoint: Checkpoint, path) -> None:
    Path(path).write_bytes(encode_checkpoint(checkpoint))


def load_checkpoint(path) -> Checkpoint:
    return decode_checkpoint(Path(path).read_bytes())
