"""Case records, LexGLUE-style JSONL ingestion, chronological splits and a
synthetic corpus with planted precedent structure."""

from __future__ import annotations

import datetime as _dt
import io
import json
import logging
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_LABELS = 10
UNK = "<unk>"
CORPUS_MAGIC = b"PRCORP\x00\x01"
CORPUS_VERSION = 1


class CorpusError(ValueError):
    """Invalid corpus input; ``line`` is the 1-based JSONL line when known."""

    def __init__(self, message: str, line: int | None = None):
        self.line = line
        super().__init__(f"line {line}: {message}" if line is not None else message)


@dataclass(frozen=True)
class CaseRecord:
    id: str
    date: _dt.date
    paragraphs: tuple[np.ndarray, ...]
    alleged: np.ndarray
    violated: np.ndarray

    def __post_init__(self):
        if not self.paragraphs:
            raise CorpusError(f"case {self.id}: no paragraphs")
        for p in self.paragraphs:
            if p.size == 0:
                raise CorpusError(f"case {self.id}: empty paragraph")
            p.setflags(write=False)
        if self.alleged.shape != self.violated.shape:
            raise CorpusError(f"case {self.id}: alleged/violated dimension mismatch")
        self.alleged.setflags(write=False)
        self.violated.setflags(write=False)

    @property
    def n_tokens(self) -> int:
        return sum(int(p.size) for p in self.paragraphs)

    def labels(self, task: str) -> np.ndarray:
        """Outcome vector: violated articles for Task A, alleged for Task B."""
        return self.violated if task_key(task) == "A" else self.alleged

    def same_as(self, other: CaseRecord) -> bool:
        return (
            self.id == other.id
            and self.date == other.date
            and len(self.paragraphs) == len(other.paragraphs)
            and all(np.array_equal(a, b) for a, b in zip(self.paragraphs, other.paragraphs))
            and np.array_equal(self.alleged, other.alleged)
            and np.array_equal(self.violated, other.violated)
        )


def task_key(task: str) -> str:
    t = str(task).upper()
    if t not in ("A", "B"):
        raise ValueError(f"task must be 'A' or 'B', got {task!r}")
    return t


@dataclass(frozen=True)
class CorpusSplit:
    train: tuple[str, ...]
    validation: tuple[str, ...]
    test: tuple[str, ...]

    def sizes(self) -> dict[str, int]:
        return {"train": len(self.train), "validation": len(self.validation), "test": len(self.test)}

    def to_manifest(self, corpus: Corpus) -> dict:
        def bounds(ids):
            if not ids:
                return None
            dates = [corpus[i].date for i in ids]
            return [min(dates).isoformat(), max(dates).isoformat()]

        return {
            "sizes": self.sizes(),
            "date_ranges": {name: bounds(getattr(self, name)) for name in ("train", "validation", "test")},
            "train": list(self.train),
            "validation": list(self.validation),
            "test": list(self.test),
        }

    @classmethod
    def from_manifest(cls, manifest: dict) -> CorpusSplit:
        return cls(tuple(manifest["train"]), tuple(manifest["validation"]), tuple(manifest["test"]))


@dataclass
class Corpus:
    """Immutable-by-convention sequence of cases ordered by (date, id)."""

    cases: tuple[CaseRecord, ...]
    n_labels: int
    vocab: tuple[str, ...]
    warnings: Counter = field(default_factory=Counter)

    def __post_init__(self):
        self.cases = tuple(sorted(self.cases, key=lambda c: (c.date, c.id)))
        self._index = {c.id: i for i, c in enumerate(self.cases)}
        if len(self._index) != len(self.cases):
            raise CorpusError("duplicate case ids")
        for c in self.cases:
            if c.alleged.shape != (self.n_labels,):
                raise CorpusError(f"case {c.id}: label dimension {c.alleged.shape[0]} != {self.n_labels}")

    def __len__(self) -> int:
        return len(self.cases)

    def __iter__(self):
        return iter(self.cases)

    def __getitem__(self, case_id: str) -> CaseRecord:
        return self.cases[self._index[case_id]]

    @property
    def vocab_size(self) -> int:
        return len(self.vocab)

    def subset(self, ids: Iterable[str]) -> list[CaseRecord]:
        return [self[i] for i in ids]

    def label_matrix(self, ids: Sequence[str], task: str) -> np.ndarray:
        return np.stack([self[i].labels(task) for i in ids]).astype(bool) if ids else np.zeros((0, self.n_labels), bool)

    def alleged_matrix(self, ids: Sequence[str]) -> np.ndarray:
        return self.label_matrix(ids, "B")


# --------------------------------------------------------------------------
# tokenization
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class VocabPolicy:
    """Whitespace tokens, lowercased, capped by frequency; id 0 is the OOV token."""

    max_size: int = 20000
    min_freq: int = 1
    lowercase: bool = True
    fixed: tuple[str, ...] | None = None

    def split(self, text: str) -> list[str]:
        return (text.lower() if self.lowercase else text).split()

    def build(self, texts: Iterable[str]) -> tuple[str, ...]:
        if self.fixed is not None:
            words = [w for w in self.fixed if w != UNK]
            return (UNK, *words)
        counts = Counter()
        for t in texts:
            counts.update(self.split(t))
        ranked = sorted((w for w, c in counts.items() if c >= self.min_freq and w != UNK), key=lambda w: (-counts[w], w))
        return (UNK, *ranked[: max(self.max_size - 1, 0)])


def tokenize(text: str, lookup: dict[str, int], policy: VocabPolicy, max_tokens: int) -> np.ndarray:
    ids = [lookup.get(w, 0) for w in policy.split(text)]
    return np.asarray(ids[:max_tokens], dtype=np.int64)


# --------------------------------------------------------------------------
# JSONL ingestion
# --------------------------------------------------------------------------


def _parse_date(raw, line: int) -> _dt.date:
    try:
        return _dt.date.fromisoformat(str(raw)[:10])
    except ValueError:
        raise CorpusError(f"invalid ISO-8601 date {raw!r}", line) from None


def _label_vector(raw, n_labels: int, field_name: str, line: int) -> np.ndarray:
    if not isinstance(raw, list) or not all(isinstance(x, int) and not isinstance(x, bool) for x in raw):
        raise CorpusError(f"{field_name} must be a list of integers", line)
    vec = np.zeros(n_labels, dtype=bool)
    for j in raw:
        if j < 0 or j >= n_labels:
            raise CorpusError(f"{field_name} label index {j} outside [0, {n_labels})", line)
        vec[j] = True
    return vec


def ingest_jsonl(
    path: str | Path,
    policy: VocabPolicy = VocabPolicy(),
    n_labels: int = DEFAULT_LABELS,
    max_tokens: int = 128,
    max_paragraphs: int = 64,
    fractions: tuple[float, float, float] = (0.8, 0.1, 0.1),
) -> tuple[Corpus, CorpusSplit]:
    """Read newline-delimited case objects (id, date, facts, alleged, violated).

    The vocabulary is built from the training split only, so validation and
    test text never shapes it.  ``violated`` outside ``alleged`` is accepted
    and counted in ``corpus.warnings["violated_not_alleged"]``.
    """
    raw_cases = []
    warnings: Counter = Counter()
    with open(path, encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            if not line.strip():
                continue
            try:
                obj = json.loads(line)
            except json.JSONDecodeError as exc:
                raise CorpusError(f"malformed JSON ({exc.msg})", lineno) from None
            if not isinstance(obj, dict):
                raise CorpusError("expected a JSON object", lineno)
            missing = [k for k in ("id", "date", "facts", "alleged", "violated") if k not in obj]
            if missing:
                raise CorpusError(f"missing fields {missing}", lineno)
            facts = obj["facts"]
            if not isinstance(facts, list) or not all(isinstance(f, str) for f in facts):
                raise CorpusError("facts must be a list of strings", lineno)
            alleged = _label_vector(obj["alleged"], n_labels, "alleged", lineno)
            violated = _label_vector(obj["violated"], n_labels, "violated", lineno)
            if np.any(violated & ~alleged):
                warnings["violated_not_alleged"] += 1
            raw_cases.append((lineno, str(obj["id"]), _parse_date(obj["date"], lineno), facts, alleged, violated))
    if not raw_cases:
        raise CorpusError(f"{path}: no cases")

    stubs = sorted(raw_cases, key=lambda r: (r[2], r[1]))
    split = _split_by_order([(r[2], r[1]) for r in stubs], fractions)
    train_ids = set(split.train)
    vocab = policy.build(text for r in stubs if r[1] in train_ids for text in r[3])
    lookup = {w: i for i, w in enumerate(vocab)}

    cases = []
    for lineno, cid, date, facts, alleged, violated in stubs:
        paragraphs = []
        for text in facts:
            toks = tokenize(text, lookup, policy, max_tokens)
            if toks.size:
                paragraphs.append(toks)
            if len(paragraphs) == max_paragraphs:
                break
        if not paragraphs:
            raise CorpusError(f"case {cid} has no non-empty paragraph", lineno)
        cases.append(CaseRecord(cid, date, tuple(paragraphs), alleged, violated))
    corpus = Corpus(tuple(cases), n_labels, vocab, warnings)
    if warnings:
        log.warning("ingest %s: %d cases have violated labels outside alleged", path, warnings["violated_not_alleged"])
    return corpus, split


def write_jsonl(corpus: Corpus, path: str | Path) -> None:
    """Serialize back to the ingestion format (token ids rendered through the vocabulary)."""
    with open(path, "w", encoding="utf-8") as fh:
        for c in corpus:
            obj = {
                "id": c.id,
                "date": c.date.isoformat(),
                "facts": [" ".join(corpus.vocab[t] for t in p) for p in c.paragraphs],
                "alleged": np.flatnonzero(c.alleged).tolist(),
                "violated": np.flatnonzero(c.violated).tolist(),
            }
            fh.write(json.dumps(obj) + "\n")


# --------------------------------------------------------------------------
# splitting
# --------------------------------------------------------------------------


def _split_by_order(keys: Sequence[tuple], fractions: Sequence[float]) -> CorpusSplit:
    if len(fractions) != 3 or any(f < 0 for f in fractions) or abs(sum(fractions) - 1.0) > 1e-9:
        raise ValueError(f"fractions must be three non-negative numbers summing to 1, got {fractions}")
    if not keys:
        raise CorpusError("cannot split an empty corpus")
    ordered = [k[1] for k in sorted(keys)]
    n = len(ordered)
    n_train = int(round(fractions[0] * n))
    n_val = int(round((fractions[0] + fractions[1]) * n)) - n_train
    return CorpusSplit(
        tuple(ordered[:n_train]),
        tuple(ordered[n_train:n_train + n_val]),
        tuple(ordered[n_train + n_val:]),
    )


def chronological_split(corpus: Corpus, fractions: Sequence[float] = (0.8, 0.1, 0.1)) -> CorpusSplit:
    """Split by sorted date, ties broken by case id."""
    return _split_by_order([(c.date, c.id) for c in corpus], fractions)


# --------------------------------------------------------------------------
# binary cache
#   magic(8) | version u8 | n_labels u16 | vocab_count u32 | vocab entries (u16 len + utf-8)
#   | case_count u32 | per case: id (u16 len + utf-8) | date ordinal u32
#   | alleged u64 | violated u64 | n_par u16 | per paragraph: n_tok u16 + u32 ids
# --------------------------------------------------------------------------


def _bits(vec: np.ndarray) -> int:
    return int(sum(1 << int(j) for j in np.flatnonzero(vec)))


def _unbits(x: int, n: int) -> np.ndarray:
    return np.array([(x >> j) & 1 for j in range(n)], dtype=bool)


def corpus_to_bytes(corpus: Corpus) -> bytes:
    if corpus.n_labels > 64:
        raise CorpusError("binary cache supports at most 64 labels")
    buf = io.BytesIO()
    buf.write(CORPUS_MAGIC)
    buf.write(struct.pack("<BHI", CORPUS_VERSION, corpus.n_labels, len(corpus.vocab)))
    for w in corpus.vocab:
        raw = w.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)) + raw)
    buf.write(struct.pack("<I", len(corpus)))
    for c in corpus:
        raw = c.id.encode("utf-8")
        buf.write(struct.pack("<H", len(raw)) + raw)
        buf.write(struct.pack("<IQQH", c.date.toordinal(), _bits(c.alleged), _bits(c.violated), len(c.paragraphs)))
        for p in c.paragraphs:
            buf.write(struct.pack("<H", p.size))
            buf.write(p.astype("<u4").tobytes())
    return buf.getvalue()


def corpus_from_bytes(blob: bytes, source: str = "<bytes>") -> Corpus:
    pos = 0

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise CorpusError(f"{source}: truncated corpus cache at byte {pos}")
        out = blob[pos:pos + n]
        pos += n
        return out

    if take(len(CORPUS_MAGIC)) != CORPUS_MAGIC:
        raise CorpusError(f"{source}: not a corpus cache (bad magic)")
    version, n_labels, n_vocab = struct.unpack("<BHI", take(7))
    if version != CORPUS_VERSION:
        raise CorpusError(f"{source}: corpus cache version {version}, expected {CORPUS_VERSION}")
    vocab = []
    for _ in range(n_vocab):
        (ln,) = struct.unpack("<H", take(2))
        vocab.append(take(ln).decode("utf-8"))
    (n_cases,) = struct.unpack("<I", take(4))
    cases = []
    for _ in range(n_cases):
        (ln,) = struct.unpack("<H", take(2))
        cid = take(ln).decode("utf-8")
        ordinal, alleged, violated, n_par = struct.unpack("<IQQH", take(22))
        paragraphs = []
        for _ in range(n_par):
            (nt,) = struct.unpack("<H", take(2))
            paragraphs.append(np.frombuffer(take(4 * nt), dtype="<u4").astype(np.int64))
        cases.append(CaseRecord(cid, _dt.date.fromordinal(ordinal), tuple(paragraphs),
                                _unbits(alleged, n_labels), _unbits(violated, n_labels)))
    if pos != len(blob):
        raise CorpusError(f"{source}: trailing bytes in corpus cache")
    return Corpus(tuple(cases), n_labels, tuple(vocab))


def save_corpus(corpus: Corpus, path: str | Path) -> None:
    Path(path).write_bytes(corpus_to_bytes(corpus))


def load_corpus(path: str | Path) -> Corpus:
    return corpus_from_bytes(Path(path).read_bytes(), str(path))


# --------------------------------------------------------------------------
# synthetic corpus
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SyntheticConfig:
    """Knobs of the planted-structure generator.

    Cases are drawn from latent archetypes (recurring fact patterns).  An
    archetype fixes a set of alleged labels, a small set of fact tokens and a
    per-label violation tendency; each case is a noisy realisation of one
    archetype.  Labels leave signature tokens in the text, but signature
    visibility varies per label, so some allegations are only recoverable
    from archetype context, i.e. from similar earlier cases.
    """

    seed: int = 0
    n_cases: int = 2000
    n_labels: int = DEFAULT_LABELS
    vocab_size: int = 500
    signature_size: int = 8
    archetype_tokens: int = 6
    cases_per_archetype: float = 12.0
    label_skew: float = 1.0
    perturb_prob: float = 0.3
    violation_flip: float = 0.1
    signature_rate: float = 0.12
    archetype_rate: float = 0.25
    min_paragraphs: int = 3
    max_paragraphs: int = 8
    min_par_tokens: int = 8
    max_par_tokens: int = 24
    start_date: str = "2001-01-01"
    span_days: int = 18 * 365

    def to_dict(self) -> dict:
        from dataclasses import asdict

        return asdict(self)


MIN_BACKGROUND = 40


def generate_synthetic(cfg: SyntheticConfig | None = None, **overrides) -> tuple[Corpus, CorpusSplit]:
    """Deterministic synthetic corpus; see :class:`SyntheticConfig`.

    Token layout: id 0 is the OOV token, label ``j`` owns the disjoint block
    ``[1 + j*s, 1 + (j+1)*s)`` and the rest is background vocabulary that
    archetype fact tokens are drawn from.
    """
    from dataclasses import replace

    cfg = replace(cfg or SyntheticConfig(), **overrides)
    if cfg.n_cases < 50:
        raise CorpusError(f"n_cases must be >= 50, got {cfg.n_cases}")
    if cfg.n_labels < 1 or cfg.n_labels > 64:
        raise CorpusError(f"n_labels must be in [1, 64], got {cfg.n_labels}")
    sig_end = 1 + cfg.n_labels * cfg.signature_size
    if cfg.vocab_size < sig_end + MIN_BACKGROUND:
        raise CorpusError(
            f"vocab_size {cfg.vocab_size} too small for {cfg.n_labels} signature blocks of {cfg.signature_size} "
            f"plus {MIN_BACKGROUND} background tokens"
        )
    rng = np.random.default_rng(cfg.seed)
    A = cfg.n_labels
    background = np.arange(sig_end, cfg.vocab_size)

    label_weight = 1.0 / np.arange(1, A + 1) ** cfg.label_skew
    label_weight /= label_weight.sum()
    violation_rate = rng.uniform(0.25, 0.75, size=A)
    visibility = rng.uniform(0.3, 1.0, size=A)

    n_arch = max(4, int(round(cfg.n_cases / cfg.cases_per_archetype)))
    size_probs = np.array([0.3, 0.35, 0.2, 0.15])
    arch_labels, arch_violated, arch_tokens = [], [], []
    for _ in range(n_arch):
        size = min(A, 1 + rng.choice(4, p=size_probs))
        labels = np.sort(rng.choice(A, size=size, replace=False, p=label_weight))
        vec = np.zeros(A, dtype=bool)
        vec[labels] = True
        arch_labels.append(vec)
        arch_violated.append(rng.random(A) < violation_rate)
        arch_tokens.append(rng.choice(background, size=cfg.archetype_tokens, replace=False))
    arch_pop = 1.0 / np.arange(1, n_arch + 1) ** 0.5
    arch_pop /= arch_pop.sum()

    start = _dt.date.fromisoformat(cfg.start_date)
    width = len(str(cfg.n_cases - 1))
    cases = []
    for i in range(cfg.n_cases):
        a = rng.choice(n_arch, p=arch_pop)
        alleged = arch_labels[a].copy()
        if rng.random() < cfg.perturb_prob:
            present = np.flatnonzero(alleged)
            if present.size > 1 and rng.random() < 0.5:
                alleged[rng.choice(present)] = False
            else:
                absent = np.flatnonzero(~alleged)
                if absent.size:
                    w = label_weight[absent] / label_weight[absent].sum()
                    alleged[rng.choice(absent, p=w)] = True
        tendency = arch_violated[a]
        flips = rng.random(A) < cfg.violation_flip
        violated = alleged & (tendency ^ flips)

        present = np.flatnonzero(alleged)
        # per-token chance of emitting label j's signature is signature_rate * visibility_j
        sig_w = visibility[present] / visibility[present].sum()
        sig_rate = min(0.9, cfg.signature_rate * visibility[present].sum())
        n_par = int(rng.integers(cfg.min_paragraphs, cfg.max_paragraphs + 1))
        paragraphs = []
        for _ in range(n_par):
            length = int(rng.integers(cfg.min_par_tokens, cfg.max_par_tokens + 1))
            u = rng.random(length)
            toks = rng.choice(background, size=length)
            is_sig = u < sig_rate
            is_arch = (~is_sig) & (u < sig_rate + cfg.archetype_rate)
            n_sig = int(is_sig.sum())
            if n_sig:
                who = present[rng.choice(present.size, size=n_sig, p=sig_w)]
                toks[is_sig] = 1 + who * cfg.signature_size + rng.integers(0, cfg.signature_size, size=n_sig)
            n_arch_tok = int(is_arch.sum())
            if n_arch_tok:
                toks[is_arch] = rng.choice(arch_tokens[a], size=n_arch_tok)
            paragraphs.append(toks.astype(np.int64))
        date = start + _dt.timedelta(days=int(i * cfg.span_days / cfg.n_cases))
        cases.append(CaseRecord(f"syn-{i:0{width}d}", date, tuple(paragraphs), alleged, violated))

    vocab = (UNK, *[f"sig{j}_{t}" for j in range(A) for t in range(cfg.signature_size)],
             *[f"w{t}" for t in background])
    corpus = Corpus(tuple(cases), A, vocab)
    return corpus, chronological_split(corpus)
