"""Pragmatic speaker: rerank a base speaker's beam by a listener's opinion
of the target image, combining the two as p = p_s^lambda * p_l^(1-lambda).

Lambda 1 keeps the beam order, lambda 0 orders purely by the listener; the
speaker side uses the beam's raw probabilities with no renormalization.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass
from pathlib import Path

from .errors import EmptyBeam, EmptyGrid
from .listener import ListenerModel, listener_score
from .speaker import ScoredPhrase, split_phrase_pair


@dataclass(frozen=True)
class RerankConfig:
    lam: float
    listener: ListenerModel

    def __post_init__(self):
        if not 0.0 <= self.lam <= 1.0:
            raise EmptyGrid(f"lambda {self.lam} outside [0, 1]")


@dataclass(frozen=True)
class RerankedPhrase:
    phrase: ScoredPhrase
    p_s: float
    p_l: float
    p_combined: float
    rank: int


def combine(p_s: float, p_l: float, lam: float) -> float:
    return p_s ** lam * p_l ** (1.0 - lam)


def listener_probability(
    listener: ListenerModel,
    phrase_tokens,
    target_feature,
    other_feature,
) -> float:
    """Probability the listener assigns to the target; phrase pairs are cut
    at the first "vs" and judged by their first half, which credits the
    image the speaker was describing."""
    first, _ = split_phrase_pair(phrase_tokens)
    if not first:
        return 0.5
    return listener_score(listener, target_feature, other_feature, first).p_left


def rerank(
    beam: list[ScoredPhrase],
    target_feature,
    other_feature,
    config: RerankConfig,
) -> list[RerankedPhrase]:
    """Stable descending sort of the beam by the combined score; ties keep
    the original beam order."""
    if not beam:
        raise EmptyBeam("cannot rerank an empty beam")
    scored = []
    for sp in beam:
        p_s = math.exp(sp.log_prob)
        p_l = listener_probability(config.listener, sp.tokens, target_feature, other_feature)
        scored.append((sp, p_s, p_l, combine(p_s, p_l, config.lam)))
    order = sorted(range(len(scored)), key=lambda i: (-scored[i][3], i))
    return [
        RerankedPhrase(phrase=scored[i][0], p_s=scored[i][1], p_l=scored[i][2],
                       p_combined=scored[i][3], rank=rank)
        for rank, i in enumerate(order, start=1)
    ]


def select_lambda(
    validation_games: list,
    grid: list[float],
    listener: ListenerModel,
    judge,
    top_k: int = 5,
) -> tuple[float, dict[float, float]]:
    """Pick the grid point maximizing top-k reference-game accuracy of the
    reranked outputs under the judge; ties go to the smaller lambda.

    validation_games: (beam, target_feature, other_feature, target_id,
    other_id) tuples; judge exposes p_left(tokens, image_left, image_right).
    """
    if not grid:
        raise EmptyGrid("empty lambda grid")
    accuracies: dict[float, float] = {}
    for lam in grid:
        config = RerankConfig(lam=lam, listener=listener)
        correct = 0
        total = 0
        for beam, target_feature, other_feature, target_id, other_id in validation_games:
            for rp in rerank(beam, target_feature, other_feature, config)[:top_k]:
                first, _ = split_phrase_pair(rp.phrase.tokens)
                p = judge.p_left(first, target_id, other_id)
                correct += int(p > 0.5)
                total += 1
        accuracies[lam] = correct / total if total else 0.0
    best = min(grid, key=lambda lam: (-accuracies[lam], lam))
    return best, accuracies


def save_reranked(entries: list[RerankedPhrase], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for rp in entries:
            fh.write(
                json.dumps(
                    {
                        "rank": rp.rank,
                        "phrase": rp.phrase.text,
                        "p_s": rp.p_s,
                        "p_l": rp.p_l,
                        "p_combined": rp.p_combined,
                    },
                    separators=(",", ":"),
                )
                + "\n"
            )
