"""Named parameters, Adam with linear warmup/decay, and the binary checkpoint."""

from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator

import numpy as np

from .tensor import Tensor

CHECKPOINT_MAGIC = b"PRCKPT\x00\x01"
CHECKPOINT_VERSION = 1


class CheckpointError(ValueError):
    """Checkpoint file is corrupt, truncated or of another format version."""


def scheduled_lr(lr: float, step: int, warmup_steps: int, total_steps: int) -> float:
    """Linear warmup from 0 to ``lr`` over ``warmup_steps``, then linear decay to 0 at ``total_steps``."""
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    if warmup_steps > 0 and step < warmup_steps:
        return lr * step / warmup_steps
    if total_steps <= warmup_steps:
        return lr
    remaining = (total_steps - step) / (total_steps - warmup_steps)
    return lr * max(0.0, min(1.0, remaining))


@dataclass
class ParameterStore:
    """Ordered name -> Tensor map plus Adam moments."""

    params: dict[str, Tensor] = field(default_factory=dict)
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    def add(self, name: str, value: np.ndarray) -> Tensor:
        if name in self.params:
            raise KeyError(f"duplicate parameter name {name!r}")
        t = Tensor(np.array(value, dtype=np.float64), requires_grad=True, name=name)
        self.params[name] = t
        return t

    def __getitem__(self, name: str) -> Tensor:
        return self.params[name]

    def __contains__(self, name: str) -> bool:
        return name in self.params

    def __iter__(self) -> Iterator[str]:
        return iter(self.params)

    def __len__(self) -> int:
        return len(self.params)

    def names(self, prefix: str = "") -> list[str]:
        return [n for n in self.params if n.startswith(prefix)]

    def tensors(self, prefix: str = "") -> list[Tensor]:
        return [t for n, t in self.params.items() if n.startswith(prefix)]

    def set_trainable(self, prefixes: Iterable[str]) -> None:
        """Only parameters under one of ``prefixes`` participate in the tape."""
        prefixes = tuple(prefixes)
        for name, t in self.params.items():
            t.requires_grad = name.startswith(prefixes) if prefixes else False

    def zero_grad(self) -> None:
        for t in self.params.values():
            t.grad = None

    def grad_norms(self, prefix: str = "") -> dict[str, float]:
        return {
            n: (0.0 if t.grad is None else float(np.linalg.norm(t.grad)))
            for n, t in self.params.items()
            if n.startswith(prefix)
        }

    def checksum(self, prefix: str = "") -> str:
        import hashlib

        h = hashlib.sha256()
        for n in sorted(self.names(prefix)):
            h.update(n.encode())
            h.update(self.params[n].data.tobytes())
        return h.hexdigest()

    def subset(self, prefixes: Iterable[str]) -> ParameterStore:
        """A view sharing the Tensor objects under ``prefixes`` with fresh optimizer state."""
        prefixes = tuple(prefixes)
        out = ParameterStore(beta1=self.beta1, beta2=self.beta2, eps=self.eps)
        out.params = {n: t for n, t in self.params.items() if prefixes and n.startswith(prefixes)}
        return out

    def copy(self) -> ParameterStore:
        out = ParameterStore(step=self.step, beta1=self.beta1, beta2=self.beta2, eps=self.eps)
        for n, t in self.params.items():
            out.add(n, t.data.copy())
            out.params[n].requires_grad = t.requires_grad
        out.m = {n: a.copy() for n, a in self.m.items()}
        out.v = {n: a.copy() for n, a in self.v.items()}
        return out

    def merge(self, other: ParameterStore) -> None:
        """Adopt parameters (not optimizer state) from ``other``, overwriting same names."""
        for n, t in other.params.items():
            if n in self.params:
                if self.params[n].shape != t.shape:
                    raise CheckpointError(f"shape mismatch for {n}: {self.params[n].shape} vs {t.shape}")
                self.params[n].data = t.data.copy()
            else:
                self.add(n, t.data.copy())

    def snapshot(self, prefix: str = "") -> dict[str, np.ndarray]:
        return {n: self.params[n].data.copy() for n in self.names(prefix)}

    def restore(self, values: dict[str, np.ndarray]) -> None:
        for n, a in values.items():
            self.params[n].data = a.copy()


def adam_step(
    store: ParameterStore,
    lr: float,
    warmup_steps: int = 0,
    total_steps: int = 0,
    grads: dict[str, np.ndarray] | None = None,
) -> float:
    """One Adam update over every parameter that has a gradient.

    ``grads`` overrides ``Tensor.grad`` when given.  Returns the effective
    learning rate used for this step.  Parameters without a gradient are left
    untouched, moments included.
    """
    if lr <= 0:
        raise ValueError(f"learning rate must be positive, got {lr}")
    eff = scheduled_lr(lr, store.step, warmup_steps, total_steps)
    store.step += 1
    t = store.step
    b1, b2 = store.beta1, store.beta2
    c1 = 1.0 - b1**t
    c2 = 1.0 - b2**t
    for name, p in store.params.items():
        g = grads.get(name) if grads is not None else p.grad
        if g is None:
            continue
        m = store.m.get(name)
        if m is None:
            m = store.m[name] = np.zeros_like(p.data)
            store.v[name] = np.zeros_like(p.data)
        v = store.v[name]
        m *= b1
        m += (1.0 - b1) * g
        v *= b2
        v += (1.0 - b2) * g * g
        if eff > 0:
            p.data = p.data - eff * (m / c1) / (np.sqrt(v / c2) + store.eps)
    return eff


# --------------------------------------------------------------------------
# checkpoint container
#   magic(8) | version u8 | step u64 | beta1 f64 | beta2 f64 | eps f64 | count u32
#   per record: name_len u16 | name utf-8 | ndim u8 | dims u32* | has_moments u8
#               | data f64* | [m f64* | v f64*]
# little endian throughout
# --------------------------------------------------------------------------


def save_checkpoint(store: ParameterStore, path: str | Path, prefix: str = "") -> None:
    buf = io.BytesIO()
    names = store.names(prefix)
    buf.write(CHECKPOINT_MAGIC)
    buf.write(struct.pack("<BQdddI", CHECKPOINT_VERSION, store.step, store.beta1, store.beta2, store.eps, len(names)))
    for n in names:
        t = store.params[n]
        raw = n.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)))
        buf.write(raw)
        buf.write(struct.pack("<B", t.data.ndim))
        buf.write(struct.pack(f"<{t.data.ndim}I", *t.data.shape))
        has = n in store.m
        buf.write(struct.pack("<B", int(has)))
        buf.write(t.data.astype("<f8").tobytes())
        if has:
            buf.write(store.m[n].astype("<f8").tobytes())
            buf.write(store.v[n].astype("<f8").tobytes())
    Path(path).write_bytes(buf.getvalue())


def load_checkpoint(path: str | Path) -> ParameterStore:
    blob = Path(path).read_bytes()
    view = memoryview(blob)
    pos = 0

    def take(n: int) -> memoryview:
        nonlocal pos
        if pos + n > len(blob):
            raise CheckpointError(f"{path}: truncated at byte {pos} (need {n} more)")
        out = view[pos:pos + n]
        pos += n
        return out

    if bytes(take(len(CHECKPOINT_MAGIC))) != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path}: not a parameter checkpoint (bad magic)")
    version, step, b1, b2, eps, count = struct.unpack("<BQdddI", take(struct.calcsize("<BQdddI")))
    if version != CHECKPOINT_VERSION:
        raise CheckpointError(f"{path}: format version {version}, expected {CHECKPOINT_VERSION}")
    store = ParameterStore(step=step, beta1=b1, beta2=b2, eps=eps)
    for _ in range(count):
        (nlen,) = struct.unpack("<H", take(2))
        name = bytes(take(nlen)).decode("utf-8")
        (ndim,) = struct.unpack("<B", take(1))
        shape = struct.unpack(f"<{ndim}I", take(4 * ndim))
        (has,) = struct.unpack("<B", take(1))
        size = int(np.prod(shape)) if ndim else 1
        data = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
        store.add(name, data)
        if has:
            store.m[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
            store.v[name] = np.frombuffer(take(8 * size), dtype="<f8").reshape(shape).astype(np.float64)
    if pos != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - pos} trailing bytes")
    return store
