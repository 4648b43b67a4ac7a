"""Applications of trained models: phrase-lexicon image embeddings (plain
and opponent space), linear-probe classification, phrase-query retrieval,
category-difference explanations, and raw embedding export.
"""

from __future__ import annotations

import json
from collections import Counter
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .data import FeatureStore, VS_TOKEN
from .errors import (
    ConfigError,
    DegenerateLabels,
    EmptyCategory,
    EmptyQuery,
    KTooLarge,
)
from .listener import DISCERNING, ListenerModel
from .speaker import SpeakerModel, beam_decode, split_phrase_pair


@dataclass(frozen=True)
class PhraseLexicon:
    """Top-K phrases (or directed phrase pairs) by training frequency.

    Opponent entries store the full "P1 vs P2" token sequence; axes of the
    embedding space are then axes of comparison rather than single phrases.
    """

    entries: tuple[tuple[str, ...], ...]
    opponent: bool = False

    def __len__(self) -> int:
        return len(self.entries)

    def texts(self) -> list[str]:
        return [" ".join(tokens) for tokens in self.entries]


@dataclass(frozen=True)
class SemanticEmbedding:
    image_id: str
    vector: np.ndarray


def build_lexicon(records, k: int, opponent: bool = False) -> PhraseLexicon:
    """Count phrase occurrences over both sides (or directed pairs) and keep
    the K most frequent; ties break lexicographically."""
    if k < 1:
        raise KTooLarge(f"K must be >= 1, got {k}")
    counts: Counter[tuple[str, ...]] = Counter()
    for rec in records:
        for pp in rec.phrase_pairs:
            if opponent:
                counts[pp.left.tokens + (VS_TOKEN,) + pp.right.tokens] += 1
            else:
                counts[pp.left.tokens] += 1
                counts[pp.right.tokens] += 1
    if len(counts) < k:
        raise KTooLarge(f"asked for K={k} but corpus has {len(counts)} distinct entries")
    ordered = sorted(counts, key=lambda toks: (-counts[toks], toks))
    return PhraseLexicon(entries=tuple(ordered[:k]), opponent=opponent)


def _lexicon_theta(listener: ListenerModel, lexicon: PhraseLexicon) -> np.ndarray:
    if lexicon.opponent and listener.config.kind != DISCERNING:
        raise ConfigError("opponent lexicons require a discerning listener")
    return listener.theta_batch(list(lexicon.entries))


def embed_image(
    listener: ListenerModel, lexicon: PhraseLexicon, feature: np.ndarray, image_id: str = ""
) -> SemanticEmbedding:
    """Raw bilinear scores phi(I) . theta(P_i) per lexicon entry; no softmax
    since there is no pair to normalize over."""
    theta = _lexicon_theta(listener, lexicon)
    phi = listener.phi_vec(feature)
    return SemanticEmbedding(image_id=image_id, vector=theta @ phi)


def embed_images(
    listener: ListenerModel, lexicon: PhraseLexicon, features: FeatureStore,
    image_ids: list[str] | None = None,
) -> tuple[list[str], np.ndarray]:
    """Batch variant: rows follow image_ids (default: store order)."""
    image_ids = list(image_ids) if image_ids is not None else list(features.ids)
    theta = _lexicon_theta(listener, lexicon)
    feats = np.stack([features.get(i) for i in image_ids])
    phi = listener.phi_batch(feats)
    return image_ids, phi @ theta.T


def classify(
    train_x: np.ndarray,
    train_y: np.ndarray,
    test_x: np.ndarray,
    test_y: np.ndarray,
    l2: float = 1e-4,
    max_iter: int = 2000,
):
    """Multinomial logistic regression with L2 on semantic embeddings;
    returns the fitted classifier and held-out accuracy."""
    from sklearn.linear_model import LogisticRegression

    train_y = np.asarray(train_y)
    classes, class_counts = np.unique(train_y, return_counts=True)
    if len(classes) < 2:
        raise DegenerateLabels(f"need >= 2 classes, got {len(classes)}")
    if class_counts.min() < 2:
        raise DegenerateLabels("every class needs >= 2 training examples")
    clf = LogisticRegression(C=1.0 / l2, max_iter=max_iter)
    clf.fit(train_x, train_y)
    accuracy = float(clf.score(test_x, np.asarray(test_y)))
    return clf, accuracy


def retrieve(
    listener: ListenerModel,
    query_phrases: list,
    features: FeatureStore,
    image_ids: list[str] | None = None,
    top_n: int | None = None,
    strategy: str = "concat",
) -> list[tuple[str, float]]:
    """Rank images by the listener score of the query.

    "concat" joins all query phrases into one token sequence (the default);
    "mean" averages per-phrase scores instead, which tends to help longer
    conjunctions but is off by default.
    """
    queries = [tuple(q) for q in query_phrases if tuple(q)]
    if not queries:
        raise EmptyQuery("need at least one non-empty query phrase")
    image_ids = list(image_ids) if image_ids is not None else list(features.ids)
    feats = np.stack([features.get(i) for i in image_ids])
    phi = listener.phi_batch(feats)
    if strategy == "concat":
        joined = tuple(tok for q in queries for tok in q)
        scores = phi @ listener.theta_vec(joined)
    elif strategy == "mean":
        theta = listener.theta_batch(queries)
        scores = (phi @ theta.T).mean(axis=1)
    else:
        raise ConfigError(f"unknown retrieval strategy {strategy!r}")
    order = sorted(range(len(image_ids)), key=lambda i: (-scores[i], i))
    if top_n is not None:
        order = order[:top_n]
    return [(image_ids[i], float(scores[i])) for i in order]


@dataclass(frozen=True)
class ExplanationEntry:
    tokens: tuple[str, ...]
    image_frequency: int
    phrase_frequency: int

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


@dataclass
class ExplanationReport:
    side_a: list[ExplanationEntry]
    side_b: list[ExplanationEntry]

    def to_json(self) -> dict:
        def dump(side):
            return [
                {"phrase": e.text, "image_frequency": e.image_frequency,
                 "phrase_frequency": e.phrase_frequency}
                for e in side
            ]

        return {"side_a": dump(self.side_a), "side_b": dump(self.side_b)}


def explain_categories(
    speaker: SpeakerModel,
    features: FeatureStore,
    category_a: list[str],
    category_b: list[str],
    beam_width: int = 10,
    max_len: int = 14,
    top_n: int = 10,
) -> ExplanationReport:
    """Contrastive category explanations from the discerning speaker.

    Every cross pair is decoded in both input orders; each decoded pair is
    split at "vs" and the halves credited to their images, deduplicated per
    (cross pair, image). Phrases are then ranked per category by image
    frequency (images described, target minus opposite), phrase frequency
    as tie-break, then lexicographic.
    """
    if not category_a or not category_b:
        raise EmptyCategory("both categories need at least one image")
    if speaker.config.kind != "discerning":
        raise ConfigError("explanations require the discerning speaker")

    credited: dict[tuple[str, str, str], set[tuple[str, ...]]] = {}

    def credit(pair_key, image, tokens):
        if tokens:
            credited.setdefault(pair_key + (image,), set()).add(tuple(tokens))

    for a in category_a:
        for b in category_b:
            pair_key = (a, b)
            fa, fb = features.get(a), features.get(b)
            for sp in beam_decode(speaker, (fa, fb), beam_width, max_len):
                first, second = split_phrase_pair(sp.tokens)
                credit(pair_key, a, first)
                credit(pair_key, b, second)
            for sp in beam_decode(speaker, (fb, fa), beam_width, max_len):
                first, second = split_phrase_pair(sp.tokens)
                credit(pair_key, b, first)
                credit(pair_key, a, second)

    def counts_for(image_set: set[str]):
        image_count: dict[tuple[str, ...], set[str]] = {}
        occurrence: Counter[tuple[str, ...]] = Counter()
        for (a, b, image), phrases in credited.items():
            if image in image_set:
                for p in phrases:
                    image_count.setdefault(p, set()).add(image)
                    occurrence[p] += 1
        return {p: len(s) for p, s in image_count.items()}, occurrence

    a_set, b_set = set(category_a), set(category_b)
    img_a, occ_a = counts_for(a_set)
    img_b, occ_b = counts_for(b_set)

    def ranked(img_own, occ_own, img_opp, occ_opp):
        entries = [
            ExplanationEntry(
                tokens=p,
                image_frequency=img_own.get(p, 0) - img_opp.get(p, 0),
                phrase_frequency=occ_own.get(p, 0) - occ_opp.get(p, 0),
            )
            for p in img_own
        ]
        entries.sort(key=lambda e: (-e.image_frequency, -e.phrase_frequency, e.tokens))
        return entries[:top_n]

    return ExplanationReport(
        side_a=ranked(img_a, occ_a, img_b, occ_b),
        side_b=ranked(img_b, occ_b, img_a, occ_a),
    )


def export_embeddings(
    listener: ListenerModel,
    phrases: list | None = None,
    features: FeatureStore | None = None,
    image_ids: list[str] | None = None,
) -> FeatureStore:
    """Raw theta vectors for phrases or phi vectors for images, packaged in
    the feature-store format for external projection tools."""
    if (phrases is None) == (features is None):
        raise ConfigError("pass exactly one of phrases / features")
    if phrases is not None:
        ids = [" ".join(p) for p in phrases]
        matrix = listener.theta_batch([tuple(p) for p in phrases])
    else:
        ids = list(image_ids) if image_ids is not None else list(features.ids)
        matrix = listener.phi_batch(np.stack([features.get(i) for i in ids]))
    return FeatureStore(ids=ids, matrix=matrix.astype(np.float32))


def save_ranking(ranking: list[tuple[str, float]], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rank, (image_id, score) in enumerate(ranking, start=1):
            fh.write(json.dumps({"rank": rank, "image_id": image_id, "score": score},
                                separators=(",", ":")) + "\n")
