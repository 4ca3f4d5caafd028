"""Corpus pipeline: quality classifier, Pareto filter, source mixing, packing.

A hashed-feature logistic regression scores documents against a curated
reference; a Pareto-tailed coin decides who survives (P(keep | s) =
(2 - s)^-alpha, so even low-quality pages keep a thin tail); surviving
sources are mixed by fixed weights, byte-tokenized, and packed into fixed
length rows with EOS separators.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Iterator, Mapping, Sequence

import numpy as np

from .moe import ConfigError
from .util import read_jsonl, substream, write_jsonl

__all__ = [
    "PAD",
    "BOS",
    "EOS",
    "VOCAB_SIZE",
    "SOURCES",
    "DEFAULT_MIXTURE",
    "Document",
    "MixtureSpec",
    "QualityClassifier",
    "ByteTokenizer",
    "hashed_features",
    "train_quality_classifier",
    "score",
    "pareto_keep",
    "keep_mask",
    "filter_corpus",
    "mixture_sampler",
    "tokenize",
    "detokenize",
    "pack_examples",
    "batches_from_documents",
    "load_documents",
    "save_documents",
]

PAD = 256
BOS = 257
EOS = 258
VOCAB_SIZE = 259

SOURCES = ("filtered_web", "wikipedia", "conversations", "forums", "books", "news", "other")

DEFAULT_MIXTURE = {
    "filtered_web": 0.42,
    "wikipedia": 0.06,
    "conversations": 0.28,
    "forums": 0.02,
    "books": 0.20,
    "news": 0.02,
}


@dataclass
class Document:
    """One corpus record; ``quality_score`` appears once the doc is scored."""

    id: str
    source: str
    text: str
    quality_score: float | None = None

    def __post_init__(self) -> None:
        if not self.text:
            raise ConfigError(f"document {self.id!r} has empty text")
        if self.source not in SOURCES:
            raise ConfigError(f"unknown source {self.source!r}; expected one of {SOURCES}")
        if self.quality_score is not None and not 0.0 <= self.quality_score <= 1.0:
            raise ConfigError(f"quality_score {self.quality_score} outside [0, 1]")


def load_documents(path: str | Path) -> list[Document]:
    return [Document(**record) for record in read_jsonl(path)]


def save_documents(docs: Iterable[Document], path: str | Path) -> None:
    write_jsonl(path, ({k: v for k, v in d.__dict__.items() if v is not None} for d in docs))


@dataclass
class MixtureSpec:
    weights: dict[str, float] = field(default_factory=lambda: dict(DEFAULT_MIXTURE))

    def __post_init__(self) -> None:
        for name, w in self.weights.items():
            if name not in SOURCES:
                raise ConfigError(f"unknown source {name!r} in mixture")
            if w < 0:
                raise ConfigError(f"negative mixture weight {w} for {name!r}")
        total = sum(self.weights.values())
        if abs(total - 1.0) > 1e-9:
            raise ConfigError(f"mixture weights sum to {total}, expected 1")


# ------------------------------------------------------------ hashed features

_MASK64 = (1 << 64) - 1
_hash_cache: dict[str, tuple[int, int]] = {}


def _word_hashes(word: str) -> tuple[int, int]:
    cached = _hash_cache.get(word)
    if cached is None:
        bucket = sign = 0
        for ch in word:
            code = ord(ch)
            bucket = (bucket * 31 + code) & _MASK64
            sign = (sign * 131 + code) & _MASK64
        cached = (bucket, sign)
        if len(_hash_cache) < 1_000_000:
            _hash_cache[word] = cached
    return cached


def hashed_features(text: str, hash_dim: int) -> dict[int, float]:
    """Signed hashed bag of lowercased word unigrams, term-frequency scaled.

    One pass over the words, so cost is linear in document length; the
    frequency scaling makes scores invariant to repeating a document.
    """
    words = text.lower().split()
    if not words:
        return {}
    inv = 1.0 / len(words)
    feats: dict[int, float] = {}
    for w in words:
        bucket, sign = _word_hashes(w)
        delta = inv if sign & 1 == 0 else -inv
        key = bucket & (hash_dim - 1)
        feats[key] = feats.get(key, 0.0) + delta
    return feats


@dataclass
class QualityClassifier:
    """Logistic regression over hashed features; higher scores mean curated-like."""

    hash_dim: int
    weights: np.ndarray
    bias: float = 0.0

    def __post_init__(self) -> None:
        if self.hash_dim < 2**10 or self.hash_dim & (self.hash_dim - 1):
            raise ConfigError(f"hash_dim must be a power of two >= 1024, got {self.hash_dim}")
        if self.weights.shape != (self.hash_dim,):
            raise ConfigError(f"weight shape {self.weights.shape} != ({self.hash_dim},)")


def _sigmoid(z: float) -> float:
    if z >= 0:
        return 1.0 / (1.0 + math.exp(-z))
    e = math.exp(z)
    return e / (1.0 + e)


def score(classifier: QualityClassifier, doc: "Document | str") -> float:
    """Quality score in [0, 1]: sigmoid of the hashed-feature linear score."""
    text = doc.text if isinstance(doc, Document) else doc
    z = classifier.bias
    for key, value in hashed_features(text, classifier.hash_dim).items():
        z += classifier.weights[key] * value
    return _sigmoid(z)


def train_quality_classifier(
    curated: Sequence[Document],
    web: Sequence[Document],
    hash_dim: int = 2**20,
    epochs: int = 5,
    lr: float = 2.0,
    seed: int = 0,
) -> QualityClassifier:
    """SGD logistic regression labeling curated docs 1 and web docs 0.

    Deterministic for a given seed and input order: each epoch visits the
    pooled examples in one seeded shuffle.
    """
    curated = list(curated)
    web = list(web)
    if not curated or not web:
        raise ConfigError("both curated and web streams must be non-empty")
    clf = QualityClassifier(hash_dim, np.zeros(hash_dim))
    examples = [(doc, 1.0) for doc in curated] + [(doc, 0.0) for doc in web]
    rng = substream(seed, "quality-classifier")
    for _ in range(epochs):
        for i in rng.permutation(len(examples)):
            doc, label = examples[i]
            feats = hashed_features(doc.text, hash_dim)
            z = clf.bias + sum(clf.weights[k] * v for k, v in feats.items())
            err = _sigmoid(z) - label
            for k, v in feats.items():
                clf.weights[k] -= lr * err * v
            clf.bias -= lr * err
    return clf


# ------------------------------------------------------------- Pareto filter


def pareto_keep(score_value: float, alpha: float = 9.0, rng: np.random.Generator | None = None) -> bool:
    """Keep iff a Lomax(alpha) draw reaches 1 - score: P(keep | s) = (2 - s)^-alpha."""
    if not 0.0 <= score_value <= 1.0:
        raise ConfigError(f"score {score_value} outside [0, 1]")
    if alpha <= 0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    rng = rng or np.random.default_rng()
    draw = (1.0 - rng.random()) ** (-1.0 / alpha) - 1.0
    return draw >= 1.0 - score_value


def keep_mask(scores: np.ndarray, alpha: float = 9.0, rng: np.random.Generator | None = None) -> np.ndarray:
    """Vectorized pareto_keep over an array of scores."""
    scores = np.asarray(scores, dtype=np.float64)
    if scores.size and (scores.min() < 0 or scores.max() > 1):
        raise ConfigError("scores must lie in [0, 1]")
    if alpha <= 0:
        raise ConfigError(f"alpha must be positive, got {alpha}")
    rng = rng or np.random.default_rng()
    draws = (1.0 - rng.random(scores.shape)) ** (-1.0 / alpha) - 1.0
    return draws >= 1.0 - scores


def filter_corpus(
    docs: Iterable[Document],
    classifier: QualityClassifier,
    alpha: float = 9.0,
    seed: int = 0,
) -> tuple[list[Document], dict]:
    """Score and Pareto-filter a corpus; returns survivors plus a count report."""
    rng = substream(seed, "pareto-filter")
    kept: list[Document] = []
    report = {"kept": {}, "dropped": {}, "alpha": alpha}
    for doc in docs:
        s = score(classifier, doc)
        bucket = "kept" if pareto_keep(s, alpha, rng) else "dropped"
        report[bucket][doc.source] = report[bucket].get(doc.source, 0) + 1
        if bucket == "kept":
            kept.append(Document(doc.id, doc.source, doc.text, quality_score=s))
    return kept, report


# ------------------------------------------------------------ source mixing


def mixture_sampler(
    sources: Mapping[str, Sequence[Document]],
    spec: MixtureSpec | None = None,
    rng: np.random.Generator | None = None,
) -> Iterator[Document]:
    """Yield documents whose source is drawn i.i.d. from the mixture weights.

    Exhausted sources cycle from their beginning, so the stream is infinite.
    """
    spec = spec or MixtureSpec()
    rng = rng or np.random.default_rng()
    names = [name for name, w in spec.weights.items() if w > 0]
    for name in names:
        if name not in sources or not sources[name]:
            raise ConfigError(f"mixture weight for {name!r} but no documents supplied")
    probs = np.array([spec.weights[n] for n in names])
    probs = probs / probs.sum()
    cycles = {name: itertools.cycle(sources[name]) for name in names}
    while True:
        # block draws amortize generator overhead across many emissions
        for idx in rng.choice(len(names), size=8192, p=probs):
            yield next(cycles[names[idx]])


# -------------------------------------------------------------- tokenization


class ByteTokenizer:
    """UTF-8 byte tokenizer: ids 0..255 are bytes, then PAD, BOS, EOS."""

    vocab_size = VOCAB_SIZE
    pad_id = PAD
    bos_id = BOS
    eos_id = EOS

    def encode(self, text: str) -> list[int]:
        return list(text.encode("utf-8"))

    def decode(self, ids: Iterable[int]) -> str:
        return bytes(i for i in ids if i < 256).decode("utf-8", errors="replace")


_DEFAULT_TOKENIZER = ByteTokenizer()


def tokenize(text: str) -> list[int]:
    return _DEFAULT_TOKENIZER.encode(text)


def detokenize(ids: Iterable[int]) -> str:
    return _DEFAULT_TOKENIZER.decode(ids)


# ------------------------------------------------------------------ packing


def pack_examples(
    token_streams: Iterable[Sequence[int]],
    seq_len: int,
    batch_size: int,
) -> list[np.ndarray]:
    """Pack token sequences into [batch_size, seq_len] id arrays.

    Documents are laid end to end with an EOS after each one, the stream is
    chunked into rows, and the final short row (and final short batch) is
    PAD-filled.  A trailing row that would hold only the last separator and
    padding is dropped.  Every content token appears exactly once.
    """
    if seq_len < 2:
        raise ConfigError(f"seq_len must be >= 2, got {seq_len}")
    if batch_size < 1:
        raise ConfigError(f"batch_size must be >= 1, got {batch_size}")
    flat: list[int] = []
    for stream in token_streams:
        flat.extend(int(t) for t in stream)
        flat.append(EOS)
    rows: list[list[int]] = []
    for start in range(0, len(flat), seq_len):
        chunk = flat[start : start + seq_len]
        chunk.extend([PAD] * (seq_len - len(chunk)))
        rows.append(chunk)
    while rows and all(t >= 256 for t in rows[-1]):
        rows.pop()  # only the final separator and padding remained
    batches: list[np.ndarray] = []
    for start in range(0, len(rows), batch_size):
        group = rows[start : start + batch_size]
        while len(group) < batch_size:
            group.append([PAD] * seq_len)
        batches.append(np.array(group, dtype=np.int64))
    return batches


def batches_from_documents(
    docs: Sequence[Document],
    seq_len: int,
    batch_size: int,
    tokenizer: ByteTokenizer | None = None,
):
    """Infinite seeded batch source over a fixed document set.

    Returns a callable suitable for the training loop: given a seed it yields
    packed batches forever, reshuffling document order each pass with a seed
    derived from the pass number.
    """
    tokenizer = tokenizer or _DEFAULT_TOKENIZER
    if not docs:
        raise ConfigError("no documents to batch")
    encoded = [tokenizer.encode(d.text) for d in docs]

    def source(seed: int) -> Iterator[np.ndarray]:
        epoch = 0
        while True:
            rng = np.random.default_rng((seed, epoch))
            order = rng.permutation(len(encoded))
            yield from pack_examples([encoded[i] for i in order], seq_len, batch_size)
            epoch += 1

    return source
