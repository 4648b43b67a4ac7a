"""Domain types and file formats: phrases, annotation records, vocabulary,
and the binary image-feature store.

An annotation record pairs two images with up to five ordered attribute
phrase pairs ("P1 vs P2"); "vs" is a reserved token that separates the two
halves and may never occur inside a single phrase.
"""

from __future__ import annotations

import json
import struct
from collections import Counter
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .errors import DuplicatePairId, EmptyCorpus, EmptyPhrase, ParseError, ShapeMismatch

MAX_PHRASE_LEN = 14
VS_TOKEN = "vs"

START_TOKEN = "<s>"
END_TOKEN = "</s>"
UNK_TOKEN = "<unk>"

START_ID = 0
END_ID = 1
UNK_ID = 2
VS_ID = 3

_STRIP_CHARS = ".,!?"

FEATURE_MAGIC = b"APFV"


@dataclass(frozen=True)
class AttributePhrase:
    """A short lowercased phrase describing one visual property."""

    tokens: tuple[str, ...]
    raw_text: str

    def __post_init__(self):
        if not self.tokens:
            raise EmptyPhrase(f"no tokens survive normalization of {self.raw_text!r}")
        if VS_TOKEN in self.tokens:
            raise ParseError(f"reserved token {VS_TOKEN!r} inside phrase {self.raw_text!r}")
        if len(self.tokens) > MAX_PHRASE_LEN:
            raise ParseError(f"phrase longer than {MAX_PHRASE_LEN} tokens: {self.raw_text!r}")

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass(frozen=True)
class PhrasePair:
    """One "P1 vs P2" comparison at a saliency position 1..5."""

    left: AttributePhrase
    right: AttributePhrase
    position: int

    def __post_init__(self):
        if not 1 <= self.position <= 5:
            raise ParseError(f"position {self.position} outside 1..5")

    def serialized_tokens(self) -> tuple[str, ...]:
        return self.left.tokens + (VS_TOKEN,) + self.right.tokens


@dataclass(frozen=True)
class AnnotationRecord:
    """An image pair plus its ordered attribute phrase pairs."""

    pair_id: str
    image_a: str
    image_b: str
    phrase_pairs: tuple[PhrasePair, ...]

    def __post_init__(self):
        if self.image_a == self.image_b:
            raise ParseError(f"record {self.pair_id}: image_a == image_b")
        if not 1 <= len(self.phrase_pairs) <= 5:
            raise ParseError(f"record {self.pair_id}: {len(self.phrase_pairs)} phrase pairs")
        positions = [p.position for p in self.phrase_pairs]
        if len(set(positions)) != len(positions):
            raise ParseError(f"record {self.pair_id}: duplicate positions {positions}")


def tokenize_phrase(raw: str, max_len: int = MAX_PHRASE_LEN) -> AttributePhrase:
    """Normalize a raw phrase: lowercase, whitespace split, strip trailing
    punctuation, truncate to max_len tokens."""
    tokens = []
    for word in raw.lower().split():
        word = word.rstrip(_STRIP_CHARS)
        if word:
            tokens.append(word)
    if not tokens:
        raise EmptyPhrase(f"empty phrase after normalization: {raw!r}")
    return AttributePhrase(tokens=tuple(tokens[:max_len]), raw_text=raw)


class Vocabulary:
    """Token <-> id bijection with four fixed specials.

    Ids 0..3 are start/end/unk/"vs"; regular tokens follow ordered by
    descending training frequency then lexicographic, so identical corpora
    always produce identical id maps.
    """

    def __init__(self, regular_tokens: list[str]):
        self.tokens: list[str] = [START_TOKEN, END_TOKEN, UNK_TOKEN, VS_TOKEN]
        for tok in regular_tokens:
            if tok in (START_TOKEN, END_TOKEN, UNK_TOKEN, VS_TOKEN):
                raise ParseError(f"special token {tok!r} cannot be a regular token")
            self.tokens.append(tok)
        if len(set(self.tokens)) != len(self.tokens):
            raise ParseError("duplicate tokens in vocabulary")
        self.id_of: dict[str, int] = {tok: i for i, tok in enumerate(self.tokens)}

    def __len__(self) -> int:
        return len(self.tokens)

    def __contains__(self, token: str) -> bool:
        return token in self.id_of

    def encode_tokens(self, tokens: tuple[str, ...] | list[str]) -> list[int]:
        """Frame a token sequence with start/end ids; OOV tokens map to unk."""
        return [START_ID] + [self.id_of.get(t, UNK_ID) for t in tokens] + [END_ID]

    def decode_ids(self, ids: list[int]) -> list[str]:
        """Inverse of encode_tokens on the content portion; strips framing."""
        out = []
        for i in ids:
            if i in (START_ID, END_ID):
                continue
            out.append(self.tokens[i])
        return out

    def content_hash(self) -> str:
        import hashlib

        return hashlib.sha256("\n".join(self.tokens).encode("utf-8")).hexdigest()[:16]

    def to_json(self) -> dict:
        return {"tokens": self.tokens[4:]}

    @classmethod
    def from_json(cls, obj: dict) -> "Vocabulary":
        return cls(list(obj["tokens"]))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_json()) + "\n", encoding="utf-8")

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        return cls.from_json(json.loads(Path(path).read_text(encoding="utf-8")))


def encode_phrase(phrase: AttributePhrase, vocab: Vocabulary) -> list[int]:
    return vocab.encode_tokens(phrase.tokens)


def iter_phrases(records) -> "list[AttributePhrase]":
    phrases = []
    for rec in records:
        for pp in rec.phrase_pairs:
            phrases.append(pp.left)
            phrases.append(pp.right)
    return phrases


def build_vocabulary(records, min_freq: int = 6) -> Vocabulary:
    """Build the vocabulary from training records: tokens occurring at least
    min_freq times, ordered by frequency desc then lexicographic."""
    if min_freq < 1:
        raise ParseError(f"min_freq must be >= 1, got {min_freq}")
    records = list(records)
    if not records:
        raise EmptyCorpus("no records to build a vocabulary from")
    counts: Counter[str] = Counter()
    for phrase in iter_phrases(records):
        counts.update(phrase.tokens)
    kept = [t for t, c in counts.items() if c >= min_freq]
    kept.sort(key=lambda t: (-counts[t], t))
    return Vocabulary(kept)


# -- annotation files ---------------------------------------------------------

def record_to_json(rec: AnnotationRecord) -> dict:
    return {
        "pair_id": rec.pair_id,
        "image_a": rec.image_a,
        "image_b": rec.image_b,
        "phrases": [
            {"left": pp.left.text, "right": pp.right.text, "position": pp.position}
            for pp in rec.phrase_pairs
        ],
    }


def record_from_json(obj: dict) -> AnnotationRecord:
    pairs = tuple(
        PhrasePair(
            left=tokenize_phrase(p["left"]),
            right=tokenize_phrase(p["right"]),
            position=int(p["position"]),
        )
        for p in obj["phrases"]
    )
    return AnnotationRecord(
        pair_id=str(obj["pair_id"]),
        image_a=str(obj["image_a"]),
        image_b=str(obj["image_b"]),
        phrase_pairs=pairs,
    )


def save_annotations(records, path: str | Path) -> None:
    """Write one canonical JSON record per line (stable key order)."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(json.dumps(record_to_json(rec), separators=(",", ":")) + "\n")


def load_annotations(path: str | Path) -> list[AnnotationRecord]:
    """Load and validate line-delimited annotation records.

    Raises ParseError with the 1-based line number for any malformed line and
    DuplicatePairId when two lines share a pair_id.
    """
    records: list[AnnotationRecord] = []
    seen: set[str] = set()
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            try:
                obj = json.loads(line)
                rec = record_from_json(obj)
            except DuplicatePairId:
                raise
            except Exception as exc:  # noqa: BLE001 - rewrap with line number
                raise ParseError(str(exc), line=lineno) from exc
            if rec.pair_id in seen:
                raise DuplicatePairId(f"line {lineno}: pair_id {rec.pair_id!r} repeated")
            seen.add(rec.pair_id)
            records.append(rec)
    return records


# -- feature store --------------------------------------------------------------

@dataclass
class FeatureStore:
    """Row-per-image float32 feature matrix with an ordered id list."""

    ids: list[str]
    matrix: np.ndarray
    _row_of: dict[str, int] = field(init=False, repr=False)

    def __post_init__(self):
        self.matrix = np.asarray(self.matrix, dtype=np.float32)
        if self.matrix.ndim != 2:
            raise ShapeMismatch(f"feature matrix must be 2-d, got {self.matrix.shape}")
        if len(self.ids) != self.matrix.shape[0]:
            raise ShapeMismatch(
                f"{len(self.ids)} ids vs {self.matrix.shape[0]} feature rows"
            )
        if len(set(self.ids)) != len(self.ids):
            raise ParseError("duplicate image ids in feature store")
        self._row_of = {img: i for i, img in enumerate(self.ids)}

    @property
    def dim(self) -> int:
        return int(self.matrix.shape[1])

    def __len__(self) -> int:
        return len(self.ids)

    def __contains__(self, image_id: str) -> bool:
        return image_id in self._row_of

    def get(self, image_id: str) -> np.ndarray:
        return self.matrix[self._row_of[image_id]]


def save_features(store: FeatureStore, path: str | Path) -> None:
    """Write the binary feature file plus its sidecar id map (<path>.ids)."""
    path = Path(path)
    count, dim = store.matrix.shape
    with open(path, "wb") as fh:
        fh.write(FEATURE_MAGIC)
        fh.write(struct.pack("<II", count, dim))
        fh.write(store.matrix.astype("<f4").tobytes(order="C"))
    with open(path.with_suffix(path.suffix + ".ids"), "w", encoding="utf-8") as fh:
        for row, image_id in enumerate(store.ids):
            fh.write(json.dumps({"row": row, "image_id": image_id}, separators=(",", ":")) + "\n")


def load_features(path: str | Path) -> FeatureStore:
    path = Path(path)
    raw = path.read_bytes()
    if raw[:4] != FEATURE_MAGIC:
        raise ParseError(f"bad feature-file magic in {path}")
    count, dim = struct.unpack("<II", raw[4:12])
    expected = 12 + count * dim * 4
    if len(raw) != expected:
        raise ParseError(f"feature file {path}: expected {expected} bytes, got {len(raw)}")
    matrix = np.frombuffer(raw[12:], dtype="<f4").reshape(count, dim).copy()
    ids: list[str] = [""] * count
    with open(path.with_suffix(path.suffix + ".ids"), "r", encoding="utf-8") as fh:
        n = 0
        for lineno, line in enumerate(fh, start=1):
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            row = int(obj["row"])
            if not 0 <= row < count:
                raise ParseError(f"row {row} out of range", line=lineno)
            ids[row] = str(obj["image_id"])
            n += 1
    if n != count:
        raise ParseError(f"id map covers {n} rows, feature file has {count}")
    return FeatureStore(ids=ids, matrix=matrix)
