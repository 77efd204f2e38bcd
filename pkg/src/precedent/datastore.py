"""Exact Euclidean precedent store with immutable, versioned snapshots."""

from __future__ import annotations

import io
import struct
import threading
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

from . import _kernels
from .corpus import Corpus, task_key

STORE_MAGIC = b"PRSTORE\x01"
STORE_VERSION = 1


class DatastoreError(ValueError):
    """Corrupt file, wrong format version, or a query the store cannot serve."""


class DimensionError(DatastoreError):
    pass


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True)
class Neighbor:
    index: int
    case_id: str
    distance: float
    value: np.ndarray
    key: np.ndarray


@dataclass(frozen=True)
class KnnResult:
    """Ranked neighbors for one query; ``shortfall`` when fewer than k were available."""

    neighbors: tuple[Neighbor, ...]
    shortfall: bool
    version: int

    @property
    def ids(self) -> list[str]:
        return [n.case_id for n in self.neighbors]

    @property
    def distances(self) -> np.ndarray:
        return np.array([n.distance for n in self.neighbors])


class DatastoreSnapshot:
    """Keys (n, d), multi-hot values (n, A), case ids and a version stamp.

    Arrays are read-only; a refresh creates a new snapshot.
    """

    __slots__ = ("keys", "values", "case_ids", "version", "built_from", "task", "_rank", "_pos")

    def __init__(self, keys: np.ndarray, values: np.ndarray, case_ids: Sequence[str], version: int,
                 built_from: str = "", task: str = "B"):
        keys = np.asarray(keys, dtype=np.float64)
        values = np.asarray(values, dtype=bool)
        if keys.ndim != 2 or values.ndim != 2 or keys.shape[0] != values.shape[0] or keys.shape[0] != len(case_ids):
            raise DatastoreError(f"inconsistent store arrays: keys {keys.shape}, values {values.shape}, ids {len(case_ids)}")
        if len(set(case_ids)) != len(case_ids):
            raise DatastoreError("case ids must be unique")
        if not np.all(np.isfinite(keys)):
            raise DatastoreError("non-finite key")
        object.__setattr__(self, "keys", _frozen(keys))
        object.__setattr__(self, "values", _frozen(values))
        object.__setattr__(self, "case_ids", tuple(case_ids))
        object.__setattr__(self, "version", int(version))
        object.__setattr__(self, "built_from", str(built_from))
        object.__setattr__(self, "task", task_key(task))
        order = sorted(range(len(case_ids)), key=lambda i: case_ids[i])
        rank = np.empty(len(case_ids), dtype=np.int64)
        rank[order] = np.arange(len(case_ids))
        object.__setattr__(self, "_rank", _frozen(rank))
        object.__setattr__(self, "_pos", {cid: i for i, cid in enumerate(case_ids)})

    def __setattr__(self, name, value):
        raise AttributeError("DatastoreSnapshot is immutable")

    def __len__(self) -> int:
        return self.keys.shape[0]

    @property
    def dim(self) -> int:
        return self.keys.shape[1]

    def position(self, case_id: str) -> int:
        return self._pos[case_id]

    def positions(self, case_ids: Iterable[str]) -> np.ndarray:
        return np.array([self._pos[c] for c in case_ids if c in self._pos], dtype=np.int64)

    # search -------------------------------------------------------------------

    def search(self, queries: np.ndarray, k: int, exclude: Sequence[Iterable[str]] | None = None
               ) -> tuple[np.ndarray, np.ndarray]:
        """Batched exact kNN: (indices, distances), each (n_queries, k).

        Ranking is ascending distance, ties by ascending case id; slots past
        the available entries hold index -1 and distance inf.
        """
        q = np.ascontiguousarray(np.atleast_2d(np.asarray(queries, dtype=np.float64)))
        if q.shape[1] != self.dim:
            raise DimensionError(f"query dimension {q.shape[1]} != store dimension {self.dim}")
        if k < 1:
            raise DatastoreError(f"k must be >= 1, got {k}")
        ptr = np.zeros(q.shape[0] + 1, dtype=np.int64)
        chunks = []
        if exclude is not None:
            if len(exclude) != q.shape[0]:
                raise DatastoreError("one exclusion set per query required")
            for i, ex in enumerate(exclude):
                pos = self.positions(ex)
                chunks.append(pos)
                ptr[i + 1] = ptr[i] + pos.size
        idx = np.concatenate(chunks) if chunks else np.zeros(0, dtype=np.int64)
        return _kernels.knn_scan(self.keys, q, int(k), self._rank, ptr, idx)

    def query_knn(self, q: np.ndarray, k: int, exclude: Iterable[str] = ()) -> KnnResult:
        exclude = set(exclude)
        available = len(self) - len(self.positions(exclude))
        if available <= 0:
            raise DatastoreError("store is empty after exclusion")
        idx, dist = self.search(np.asarray(q)[None, :], k, [exclude])
        neighbors = tuple(
            Neighbor(int(i), self.case_ids[i], float(d), self.values[i], self.keys[i])
            for i, d in zip(idx[0], dist[0]) if i >= 0
        )
        return KnnResult(neighbors, len(neighbors) < k, self.version)


def build(corpus: Corpus, train_ids: Sequence[str], retriever, task: str, version: int = 0) -> DatastoreSnapshot:
    """One entry per training case; values are violated labels (Task A) or alleged labels (Task B)."""
    if not train_ids:
        raise DatastoreError("cannot build a store from an empty training split")
    cases = corpus.subset(train_ids)
    keys = retriever.embed_cases(cases)
    values = corpus.label_matrix(train_ids, task)
    return DatastoreSnapshot(keys, values, list(train_ids), version, retriever.checkpoint_id(), task)


def refresh(snapshot: DatastoreSnapshot, corpus: Corpus, retriever) -> DatastoreSnapshot:
    """Re-encode every key with the current retriever; values and ids are kept."""
    keys = retriever.embed_cases(corpus.subset(snapshot.case_ids))
    return DatastoreSnapshot(keys, snapshot.values, snapshot.case_ids, snapshot.version + 1,
                             retriever.checkpoint_id(), snapshot.task)


class Datastore:
    """Holder publishing the current snapshot.

    Readers call :attr:`current` and keep using that object; :meth:`publish`
    swaps the reference under a lock so a reader sees exactly one version.
    """

    def __init__(self, snapshot: DatastoreSnapshot):
        self._lock = threading.Lock()
        self._snapshot = snapshot

    @property
    def current(self) -> DatastoreSnapshot:
        with self._lock:
            return self._snapshot

    def publish(self, snapshot: DatastoreSnapshot) -> None:
        with self._lock:
            if snapshot.version <= self._snapshot.version:
                raise DatastoreError(f"snapshot version must increase ({snapshot.version} <= {self._snapshot.version})")
            self._snapshot = snapshot

    def refresh(self, corpus: Corpus, retriever) -> DatastoreSnapshot:
        new = refresh(self.current, corpus, retriever)
        self.publish(new)
        return new


# --------------------------------------------------------------------------
# file format (little endian)
#   magic(8) | version u8 | task u8 ('A'/'B') | dim u32 | count u32 | n_labels u16
#   | snapshot_version u64 | built_from (u16 len + utf-8)
#   | per entry: case_id (u16 len + utf-8) | key f64 * dim | value bitset u64
# --------------------------------------------------------------------------


def save(snapshot: DatastoreSnapshot, path: str | Path) -> None:
    n_labels = snapshot.values.shape[1]
    if n_labels > 64:
        raise DatastoreError("store file supports at most 64 labels")
    buf = io.BytesIO()
    buf.write(STORE_MAGIC)
    buf.write(struct.pack("<BcIIHQ", STORE_VERSION, snapshot.task.encode(), snapshot.dim, len(snapshot),
                          n_labels, snapshot.version))
    raw = snapshot.built_from.encode("utf-8")
    buf.write(struct.pack("<H", len(raw)) + raw)
    bits = _kernels.pack_bits(snapshot.values)
    for cid, key, b in zip(snapshot.case_ids, snapshot.keys, bits):
        raw = cid.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(key.astype("<f8").tobytes())
        buf.write(struct.pack("<Q", int(b)))
    Path(path).write_bytes(buf.getvalue())


def load(path: str | Path, expected_dim: int | None = None) -> DatastoreSnapshot:
    blob = Path(path).read_bytes()
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise DatastoreError(f"{path}: corrupt store file, truncated at byte {pos}")
        out = blob[pos:pos + n]
        pos += n
        return out

    if take(len(STORE_MAGIC)) != STORE_MAGIC:
        raise DatastoreError(f"{path}: not a datastore file (bad magic)")
    head = struct.calcsize("<BcIIHQ")
    fmt_version, task, dim, count, n_labels, version = struct.unpack("<BcIIHQ", take(head))
    if fmt_version != STORE_VERSION:
        raise DatastoreError(f"{path}: store format version {fmt_version}, expected {STORE_VERSION}")
    if expected_dim is not None and dim != expected_dim:
        raise DimensionError(f"{path}: store dimension {dim} but run is configured for {expected_dim}")
    (ln,) = struct.unpack("<H", take(2))
    built_from = take(ln).decode("utf-8")
    ids, keys, bits = [], np.zeros((count, dim)), np.zeros(count, dtype=np.uint64)
    for i in range(count):
        (ln,) = struct.unpack("<H", take(2))
        ids.append(take(ln).decode("utf-8"))
        keys[i] = np.frombuffer(take(8 * dim), dtype="<f8")
        (bits[i],) = struct.unpack("<Q", take(8))
    if pos != len(blob):
        raise DatastoreError(f"{path}: corrupt store file, {len(blob) - pos} trailing bytes")
    values = ((bits[:, None] >> np.arange(n_labels, dtype=np.uint64)) & np.uint64(1)).astype(bool)
    return DatastoreSnapshot(keys, values, ids, version, built_from, task.decode())
