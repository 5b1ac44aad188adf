"""MPK1 tensor packs, parameter maps and probe sets.

MPK1 layout::

    bytes 0..3    magic b"MPK1"
    bytes 4..11   header length H, unsigned little-endian 64-bit
    bytes 12..    H bytes of UTF-8 JSON: {name: {"offset": int, "shape": [...]}}
    payload       raw little-endian float32, tensors in name order, contiguous

The header is written with sorted keys and no whitespace, so a pack produced by
:func:`save_pack` is canonical and ``save_pack(load_pack(f))`` reproduces ``f``
byte for byte.
"""
from __future__ import annotations

import hashlib
import json
import math
import os
import struct
from collections.abc import Iterator, Mapping
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .errors import (
    HeaderCorrupt,
    IoFailure,
    MagicMismatch,
    NameSetMismatch,
    NonFiniteValue,
    ShapeMismatch,
    ShapeSizeMismatch,
)

MAGIC = b"MPK1"
_LEN = struct.Struct("<Q")
_F32 = np.dtype("<f4")


def _frozen(arr: np.ndarray) -> np.ndarray:
    arr = np.array(arr, copy=True)
    if arr.dtype not in (np.float32, np.float64):
        arr = arr.astype(np.float64)
    arr.setflags(write=False)
    return arr


class ParamMap(Mapping):
    """Immutable name -> array mapping iterated in lexicographic name order.

    Arrays are float32 when loaded from disk; arithmetic helpers produce
    float64 so that differences of float32 inputs stay exact.
    """

    __slots__ = ("_data",)

    def __init__(self, entries=None, *, check_finite=True):
        entries = dict(entries or {})
        data = {}
        for name in sorted(entries):
            if not isinstance(name, str):
                raise TypeError(f"parameter names must be str, got {type(name).__name__}")
            arr = _frozen(entries[name])
            if check_finite and arr.size and not np.isfinite(arr).all():
                raise NonFiniteValue(f"tensor {name!r} contains NaN or Inf")
            data[name] = arr
        self._data = data

    def __getitem__(self, name: str) -> np.ndarray:
        return self._data[name]

    def __iter__(self) -> Iterator[str]:
        return iter(self._data)

    def __len__(self) -> int:
        return len(self._data)

    def __repr__(self) -> str:
        inner = ", ".join(f"{k}: {tuple(v.shape)}" for k, v in self._data.items())
        return f"ParamMap({{{inner}}})"

    @property
    def size(self) -> int:
        return sum(int(v.size) for v in self._data.values())

    def shapes(self) -> dict[str, tuple[int, ...]]:
        return {k: tuple(v.shape) for k, v in self._data.items()}

    def matrices(self) -> dict[str, np.ndarray]:
        return {k: v for k, v in self._data.items() if v.ndim == 2}

    def digest(self) -> str:
        """Content hash over names, shapes and float64 values."""
        h = hashlib.blake2b(digest_size=16)
        for name, arr in self._data.items():
            h.update(name.encode("utf-8"))
            h.update(repr(tuple(arr.shape)).encode())
            h.update(np.ascontiguousarray(arr, dtype=np.float64).tobytes())
        return h.hexdigest()

    def astype(self, dtype) -> "ParamMap":
        return ParamMap({k: v.astype(dtype) for k, v in self._data.items()}, check_finite=False)


@dataclass(frozen=True)
class ProbeSet:
    """Calibration tensors for one (model, task): activations (S, dim) and two gradient vectors."""

    activations: np.ndarray
    encoder_grad: np.ndarray
    input_grad: np.ndarray

    def __post_init__(self):
        act = _frozen(self.activations)
        if act.ndim != 2 or act.shape[0] < 1:
            raise ShapeMismatch(f"activations must be (num_samples >= 1, dim), got {act.shape}")
        enc = _frozen(np.asarray(self.encoder_grad).reshape(-1))
        inp = _frozen(np.asarray(self.input_grad).reshape(-1))
        for name, arr in (("activations", act), ("encoder_grad", enc), ("input_grad", inp)):
            if arr.size and not np.isfinite(arr).all():
                raise NonFiniteValue(f"probe tensor {name!r} contains NaN or Inf")
        object.__setattr__(self, "activations", act)
        object.__setattr__(self, "encoder_grad", enc)
        object.__setattr__(self, "input_grad", inp)

    def to_parammap(self) -> ParamMap:
        return ParamMap(
            {"activations": self.activations, "encoder_grad": self.encoder_grad, "input_grad": self.input_grad}
        )

    @classmethod
    def from_parammap(cls, pm: Mapping) -> "ProbeSet":
        missing = {"activations", "encoder_grad", "input_grad"} - set(pm)
        if missing:
            raise NameSetMismatch(f"probe pack is missing {sorted(missing)}")
        return cls(pm["activations"], pm["encoder_grad"], pm["input_grad"])


# ---------------------------------------------------------------------------
# serialization
# ---------------------------------------------------------------------------

def encode_pack(pm: Mapping) -> bytes:
    if not isinstance(pm, ParamMap):
        pm = ParamMap(pm)
    header = {}
    chunks = []
    offset = 0
    for name in pm:
        arr = np.ascontiguousarray(pm[name], dtype=_F32)
        if arr.size and not np.isfinite(arr).all():
            raise NonFiniteValue(f"tensor {name!r} overflows float32")
        header[name] = {"offset": offset, "shape": list(arr.shape)}
        raw = arr.tobytes()
        chunks.append(raw)
        offset += len(raw)
    blob = json.dumps(header, sort_keys=True, separators=(",", ":"), ensure_ascii=False).encode("utf-8")
    return MAGIC + _LEN.pack(len(blob)) + blob + b"".join(chunks)


def decode_pack(buf: bytes) -> ParamMap:
    if len(buf) < 4 or buf[:4] != MAGIC:
        raise MagicMismatch("not an MPK1 pack (bad magic bytes)")
    if len(buf) < 12:
        raise HeaderCorrupt("truncated header length")
    (hlen,) = _LEN.unpack_from(buf, 4)
    if 12 + hlen > len(buf):
        raise HeaderCorrupt(f"header length {hlen} exceeds file size {len(buf)}")
    try:
        header = json.loads(buf[12:12 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise HeaderCorrupt(f"header is not valid UTF-8 JSON: {exc}") from exc
    if not isinstance(header, dict):
        raise HeaderCorrupt("header must be a JSON object")
    payload = memoryview(buf)[12 + hlen:]

    entries = {}
    expected = 0
    for name in sorted(header):
        meta = header[name]
        try:
            shape = [int(d) for d in meta["shape"]]
            offset = int(meta["offset"])
        except (TypeError, KeyError, ValueError) as exc:
            raise HeaderCorrupt(f"bad header entry for {name!r}: {meta!r}") from exc
        if any(d < 0 for d in shape) or not isinstance(meta["shape"], list):
            raise HeaderCorrupt(f"bad shape for {name!r}: {meta['shape']!r}")
        if offset != expected:
            raise HeaderCorrupt(f"tensor {name!r} at offset {offset}, expected contiguous offset {expected}")
        nbytes = math.prod(shape) * 4
        if offset + nbytes > len(payload):
            have = max(len(payload) - offset, 0) // 4
            raise ShapeSizeMismatch(
                f"tensor {name!r} declares shape {tuple(shape)} ({math.prod(shape)} floats) but only {have} present"
            )
        arr = np.frombuffer(payload[offset:offset + nbytes], dtype=_F32).reshape(shape)
        if arr.size and not np.isfinite(arr).all():
            raise NonFiniteValue(f"tensor {name!r} contains NaN or Inf")
        entries[name] = arr.astype(np.float32)
        expected = offset + nbytes
    if expected != len(payload):
        raise ShapeSizeMismatch(f"payload has {len(payload)} bytes, header accounts for {expected}")
    return ParamMap(entries, check_finite=False)


def load_pack(path) -> ParamMap:
    try:
        buf = Path(path).read_bytes()
    except OSError as exc:
        raise IoFailure(f"cannot read {path}: {exc}") from exc
    return decode_pack(buf)


def save_pack(pm: Mapping, path) -> None:
    data = encode_pack(pm)
    path = Path(path)
    tmp = path.with_name(path.name + ".tmp")
    try:
        tmp.write_bytes(data)
        os.replace(tmp, path)
    except OSError as exc:
        raise IoFailure(f"cannot write {path}: {exc}") from exc


def load_probe(path) -> ProbeSet:
    return ProbeSet.from_parammap(load_pack(path))


def save_probe(probe: ProbeSet, path) -> None:
    save_pack(probe.to_parammap(), path)


# ---------------------------------------------------------------------------
# task vectors
# ---------------------------------------------------------------------------

def check_compatible(a: Mapping, b: Mapping) -> None:
    if set(a) != set(b):
        only_a = sorted(set(a) - set(b))
        only_b = sorted(set(b) - set(a))
        raise NameSetMismatch(f"parameter names differ: only left {only_a}, only right {only_b}")
    for name in a:
        if np.shape(a[name]) != np.shape(b[name]):
            raise ShapeMismatch(f"{name!r}: shape {np.shape(a[name])} vs {np.shape(b[name])}")


def task_vector(finetuned: Mapping, pretrained: Mapping) -> ParamMap:
    """Per-parameter ``finetuned - pretrained`` in float64 (exact for float32 inputs)."""
    check_compatible(finetuned, pretrained)
    return ParamMap(
        {n: np.asarray(finetuned[n], dtype=np.float64) - np.asarray(pretrained[n], dtype=np.float64)
         for n in finetuned},
        check_finite=False,
    )


def flatten(pm: Mapping) -> np.ndarray:
    names = sorted(pm)
    if not names:
        return np.zeros(0, dtype=np.float32)
    parts = [np.asarray(pm[n]).reshape(-1) for n in names]
    return np.concatenate(parts)
