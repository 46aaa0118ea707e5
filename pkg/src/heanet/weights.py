"""Named parameter store, initializers and the HEAW0001 weight file format.

HEAW0001 layout (little-endian)::

    b"HEAW0001"
    u32  record count
    per record:
        u16  name length L
        L    bytes utf-8 name
        u8   ndim
        ndim x u32 extents
        prod(extents) x f32 data (row-major)

Batchnorm running statistics are stored as ordinary records; their names end
in ``running_mean`` / ``running_var``.
"""

from __future__ import annotations

import struct
from pathlib import Path
from typing import Dict, Iterator, Optional

import numpy as np

from .exceptions import FormatError
from .ndtensor import Tensor

MAGIC = b"HEAW0001"


class Weights:
    """Flat mapping of parameter names to tensors plus non-trainable buffers."""

    def __init__(self, params: Optional[Dict[str, Tensor]] = None, buffers: Optional[Dict[str, np.ndarray]] = None):
        self.params: Dict[str, Tensor] = dict(params or {})
        self.buffers: Dict[str, np.ndarray] = dict(buffers or {})

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params or name in self.buffers

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(value, requires_grad=True, name=name)
        self.params[name] = t
        return t

    def add_buffer(self, name: str, value: np.ndarray) -> np.ndarray:
        if name in self:
            raise KeyError(f"duplicate buffer name {name!r}")
        self.buffers[name] = np.asarray(value)
        return self.buffers[name]

    def buffer(self, name: str) -> np.ndarray:
        return self.buffers[name]

    def trainable(self) -> list:
        return [self.params[k] for k in sorted(self.params)]

    def named_arrays(self) -> Dict[str, np.ndarray]:
        out = {k: v.data for k, v in self.params.items()}
        out.update(self.buffers)
        return dict(sorted(out.items()))

    def num_parameters(self) -> int:
        return sum(p.size for p in self.params.values())

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.grad = None

    def astype(self, dtype) -> "Weights":
        """Deep copy at another precision."""
        params = {k: Tensor(v.data.astype(dtype), requires_grad=True, name=k) for k, v in self.params.items()}
        buffers = {k: v.astype(dtype) for k, v in self.buffers.items()}
        return Weights(params, buffers)

    def copy(self) -> "Weights":
        return self.astype(next(iter(self.params.values())).dtype) if self.params else Weights()

    def load_arrays(self, arrays: Dict[str, np.ndarray]) -> None:
        """Overwrite values in place, validating names and shapes."""
        unknown = sorted(set(arrays) - set(self.params) - set(self.buffers))
        if unknown:
            raise FormatError(f"unknown parameter name(s): {', '.join(unknown)}")
        missing = sorted((set(self.params) | set(self.buffers)) - set(arrays))
        if missing:
            raise FormatError(f"missing parameter(s): {', '.join(missing)}")
        for name, arr in arrays.items():
            target = self.params[name].data if name in self.params else self.buffers[name]
            if target.shape != arr.shape:
                raise FormatError(f"shape mismatch for {name}: file {arr.shape}, expected {target.shape}")
            target[...] = arr


# -------------------------------------------------------------- initializers
def kaiming_uniform(rng: np.random.Generator, fan_in: int, fan_out: int, gain: float = np.sqrt(2.0), dtype=np.float32):
    bound = gain * np.sqrt(3.0 / fan_in)
    return rng.uniform(-bound, bound, size=(fan_in, fan_out)).astype(dtype)


def add_linear(w: Weights, rng, name: str, fan_in: int, fan_out: int, bias: bool = True, relu: bool = True, dtype=np.float32):
    w.add(f"{name}.weight", kaiming_uniform(rng, fan_in, fan_out, np.sqrt(2.0) if relu else 1.0, dtype))
    if bias:
        w.add(f"{name}.bias", np.zeros(fan_out, dtype=dtype))


def add_batchnorm(w: Weights, name: str, channels: int, dtype=np.float32):
    w.add(f"{name}.gamma", np.ones(channels, dtype=dtype))
    w.add(f"{name}.beta", np.zeros(channels, dtype=dtype))
    w.add_buffer(f"{name}.running_mean", np.zeros(channels, dtype=dtype))
    w.add_buffer(f"{name}.running_var", np.ones(channels, dtype=dtype))


# ------------------------------------------------------------------ file I/O
def save_weights(weights: Weights, path) -> None:
    arrays = weights.named_arrays()
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<I", len(arrays)))
        for name, arr in arrays.items():
            raw = name.encode("utf-8")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<B", arr.ndim))
            fh.write(struct.pack(f"<{arr.ndim}I", *arr.shape))
            fh.write(np.ascontiguousarray(arr, dtype="<f4").tobytes())


def read_weight_records(path) -> Dict[str, np.ndarray]:
    raw = Path(path).read_bytes()
    if raw[:8] != MAGIC:
        raise FormatError(f"{path}: bad magic {raw[:8]!r}")
    pos = 8

    def take(fmt):
        nonlocal pos
        size = struct.calcsize(fmt)
        if pos + size > len(raw):
            raise FormatError(f"{path}: truncated at byte {pos}")
        vals = struct.unpack_from(fmt, raw, pos)
        pos += size
        return vals

    (count,) = take("<I")
    out = {}
    for _ in range(count):
        (length,) = take("<H")
        if pos + length > len(raw):
            raise FormatError(f"{path}: truncated name at byte {pos}")
        name = raw[pos : pos + length].decode("utf-8")
        pos += length
        (ndim,) = take("<B")
        shape = take(f"<{ndim}I") if ndim else ()
        n = int(np.prod(shape)) if shape else 1
        if pos + 4 * n > len(raw):
            raise FormatError(f"{path}: truncated data for {name}")
        out[name] = np.frombuffer(raw, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
        pos += 4 * n
    if pos != len(raw):
        raise FormatError(f"{path}: {len(raw) - pos} trailing bytes")
    return out


def load_weights(path, template: Optional[Weights] = None) -> Weights:
    """Read a HEAW0001 file.

    With a ``template`` (for instance freshly initialized weights for a model
    spec) every name and shape is validated and the values are copied into
    a copy of the template; otherwise a plain store is returned.
    """
    arrays = read_weight_records(path)
    if template is None:
        params = {k: v for k, v in arrays.items() if not k.endswith(("running_mean", "running_var"))}
        buffers = {k: v for k, v in arrays.items() if k not in params}
        return Weights({k: Tensor(v, requires_grad=True, name=k) for k, v in params.items()}, buffers)
    out = template.astype(np.float32)
    out.load_arrays(arrays)
    return out
