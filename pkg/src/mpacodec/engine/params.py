"""Named parameters, freezing, Adam, and the ``MPAW`` checkpoint container."""

from __future__ import annotations

import hashlib
import struct
from collections import OrderedDict

import numpy as np

from .tensor import Tensor, default_dtype

CHECKPOINT_MAGIC = b"MPAW"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    pass


class ParameterStore:
    """Ordered mapping of unique names to parameter tensors.

    A parameter is trainable iff its tensor has ``requires_grad`` set; frozen
    parameters never receive gradients and are skipped by the optimizer.
    """

    def __init__(self):
        self._params = OrderedDict()

    def add(self, name, value, trainable=True):
        if name in self._params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=default_dtype()), requires_grad=trainable, name=name)
        self._params[name] = t
        return t

    def __getitem__(self, name):
        return self._params[name]

    def __contains__(self, name):
        return name in self._params

    def __iter__(self):
        return iter(self._params)

    def __len__(self):
        return len(self._params)

    def items(self):
        return self._params.items()

    def names(self, prefix=""):
        return [n for n in self._params if n.startswith(prefix)]

    def trainable(self):
        return [t for t in self._params.values() if t.requires_grad]

    def set_trainable(self, predicate):
        """Mark exactly the parameters whose name satisfies ``predicate`` as trainable."""
        for name, t in self._params.items():
            t.requires_grad = bool(predicate(name))
            t.grad = None

    def count(self, prefix="", trainable_only=False):
        return int(sum(t.size for n, t in self._params.items()
                       if n.startswith(prefix) and (t.requires_grad or not trainable_only)))

    def zero_grad(self):
        for t in self._params.values():
            t.grad = None

    def astype(self, dtype):
        for t in self._params.values():
            t.data = t.data.astype(dtype)
            t.grad = None

    def state(self):
        return OrderedDict((n, t.data.copy()) for n, t in self._params.items())

    def load_state(self, state, strict=True):
        missing = [n for n in self._params if n not in state]
        if strict and missing:
            raise CheckpointError(f"checkpoint lacks parameters: {missing[:5]}")
        for n, t in self._params.items():
            if n in state:
                arr = np.asarray(state[n])
                if arr.shape != t.shape:
                    raise CheckpointError(f"shape mismatch for {n}: {arr.shape} vs {t.shape}")
                t.data = arr.astype(t.dtype)

    def digest(self, predicate=lambda name: True):
        """SHA-256 over names and raw bytes of the selected parameters."""
        h = hashlib.sha256()
        for n, t in self._params.items():
            if predicate(n):
                h.update(n.encode())
                h.update(np.ascontiguousarray(t.data).tobytes())
        return h.hexdigest()


class Adam:
    """Adam over the parameters that were trainable at construction time."""

    def __init__(self, params, lr=1e-4, betas=(0.9, 0.999), eps=1e-8):
        self.params = list(params)
        self.lr = lr
        self.b1, self.b2 = betas
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p.data) for p in self.params]
        self.v = [np.zeros_like(p.data) for p in self.params]

    def zero_grad(self):
        for p in self.params:
            p.grad = None

    def step(self):
        self.t += 1
        c1 = 1 - self.b1 ** self.t
        c2 = 1 - self.b2 ** self.t
        for p, m, v in zip(self.params, self.m, self.v):
            if p.grad is None or not p.requires_grad:
                continue
            g = p.grad.astype(p.dtype, copy=False)
            m *= self.b1
            m += (1 - self.b1) * g
            v *= self.b2
            v += (1 - self.b2) * g * g
            step = (self.lr / c1) * m / (np.sqrt(v / c2) + self.eps)
            p.data = (p.data - step).astype(p.dtype, copy=False)


def write_checkpoint(path, state):
    """Serialize ``{name: array}`` little-endian, values stored as float32."""
    parts = [CHECKPOINT_MAGIC, struct.pack("<BI", CHECKPOINT_VERSION, len(state))]
    for name, arr in state.items():
        raw = name.encode("utf-8")
        arr = np.asarray(arr)
        parts.append(struct.pack("<H", len(raw)) + raw)
        parts.append(struct.pack("<B", arr.ndim) + struct.pack(f"<{arr.ndim}I", *arr.shape))
        parts.append(np.ascontiguousarray(arr, dtype="<f4").tobytes())
    data = b"".join(parts)
    if path is None:
        return data
    with open(path, "wb") as fh:
        fh.write(data)
    return data


def read_checkpoint(path_or_bytes):
    if isinstance(path_or_bytes, (bytes, bytearray)):
        data = bytes(path_or_bytes)
    else:
        with open(path_or_bytes, "rb") as fh:
            data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError("not a parameter checkpoint (bad magic)")
    try:
        version, count = struct.unpack_from("<BI", data, 4)
        if version != CHECKPOINT_VERSION:
            raise CheckpointError(f"unsupported checkpoint version {version}")
        pos = 9
        state = OrderedDict()
        for _ in range(count):
            (nlen,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos : pos + nlen].decode("utf-8")
            pos += nlen
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            n = int(np.prod(shape)) if rank else 1
            if pos + 4 * n > len(data):
                raise CheckpointError(f"truncated checkpoint in parameter {name!r}")
            state[name] = np.frombuffer(data, dtype="<f4", count=n, offset=pos).reshape(shape).astype(np.float32)
            pos += 4 * n
    except struct.error as exc:
        raise CheckpointError(f"truncated checkpoint: {exc}") from None
    if pos != len(data):
        raise CheckpointError(f"{len(data) - pos} trailing bytes after last parameter")
    return state
