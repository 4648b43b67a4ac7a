"""Listener models: score a phrase (or phrase pair) against an image pair
with a pairwise softmax over bilinear image-phrase scores.

p(I1 | P) = exp(s1) / (exp(s1) + exp(s2)) with s_i = phi(I_i) . theta(P),
where phi is one ReLU projection of the image feature and theta is the
final hidden state of an LSTM over the phrase tokens. The discerning kind
reads the whole "P1 vs P2" sequence with the same encoder; the 2xSL
composition instead averages two directed simple-listener calls.
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .data import FeatureStore, Vocabulary, VS_TOKEN
from .errors import EmptyCorpus, ShapeMismatch, VocabMismatch
from .nn import autograd as ag
from .profiles import DESK, Profile

SIMPLE = "simple"
DISCERNING = "discerning"

CONTRASTIVE = "contrastive"
RANDOM_NEGATIVE = "random_negative"


@dataclass(frozen=True)
class ListenerConfig:
    kind: str
    vocab_size: int
    feature_dim: int
    embed_dim: int
    hidden_dim: int
    training_regime: str = CONTRASTIVE


@dataclass(frozen=True)
class ListenerScore:
    p_left: float
    p_right: float

    def __post_init__(self):
        if abs(self.p_left + self.p_right - 1.0) > 1e-6:
            raise ShapeMismatch(f"probabilities sum to {self.p_left + self.p_right}")


def pair_softmax(s_left: float, s_right: float) -> ListenerScore:
    """Two-way softmax stabilized by max-logit subtraction.

    Computed through the ordered logit gap so that swapping the images swaps
    the probabilities bit-exactly and they always sum to one.
    """
    gap = min(s_left, s_right) - max(s_left, s_right)
    q = float(1.0 / (1.0 + np.exp(gap)))  # probability of the higher logit
    p_left = q if s_left >= s_right else 1.0 - q
    return ListenerScore(p_left=p_left, p_right=1.0 - p_left)


class ListenerModel:
    def __init__(self, config: ListenerConfig, vocab: Vocabulary, rng: np.random.Generator,
                 dtype=np.float32):
        if config.kind not in (SIMPLE, DISCERNING):
            raise VocabMismatch(f"unknown listener kind {config.kind!r}")
        if config.vocab_size != len(vocab):
            raise VocabMismatch(f"config vocab_size {config.vocab_size} != |vocab| {len(vocab)}")
        self.config = config
        self.vocab = vocab
        self.embedding = nn.Embedding(rng, config.vocab_size, config.embed_dim, dtype)
        self.encoder = nn.LSTMCell(rng, config.embed_dim, config.hidden_dim, dtype)
        self.phi = nn.Linear(rng, config.feature_dim, config.hidden_dim, dtype)
        self._inference = None

    def params(self) -> dict[str, nn.Tensor]:
        named = {}
        named.update(self.embedding.params("embedding"))
        named.update(self.encoder.params("encoder"))
        named.update(self.phi.params("phi"))
        return named

    def manifest(self) -> dict:
        return {
            "model": "listener",
            "kind": self.config.kind,
            "training_regime": self.config.training_regime,
            "vocab_size": self.config.vocab_size,
            "vocab_hash": self.vocab.content_hash(),
            "feature_dim": self.config.feature_dim,
            "embed_dim": self.config.embed_dim,
            "hidden_dim": self.config.hidden_dim,
        }

    def invalidate_inference(self):
        self._inference = None

    # -- training graph ---------------------------------------------------------

    def phi_graph(self, feats: np.ndarray) -> ag.Tensor:
        x = ag.Tensor(feats.astype(self.phi.w.data.dtype))
        return ag.relu(self.phi(x))

    def theta_graph(self, ids: np.ndarray, lengths: np.ndarray) -> ag.Tensor:
        return nn.encode_sequence(self.encoder, self.embedding, ids, lengths)

    # -- numpy inference ----------------------------------------------------------

    def _infer(self) -> "_ListenerInference":
        if self._inference is None:
            self._inference = _ListenerInference(self)
        return self._inference

    def phi_vec(self, feature: np.ndarray) -> np.ndarray:
        return self._infer().phi(np.atleast_2d(np.asarray(feature, np.float64)))[0]

    def theta_vec(self, tokens: list[str] | tuple[str, ...]) -> np.ndarray:
        """Phrase embedding: final encoder state over the framed token ids."""
        ids = np.array([self.vocab.encode_tokens(tokens)], dtype=np.int64)
        return self._infer().theta(ids, np.array([ids.shape[1]]))[0]

    def phi_batch(self, feats: np.ndarray) -> np.ndarray:
        return self._infer().phi(np.asarray(feats, np.float64))

    def theta_batch(self, token_lists: list) -> np.ndarray:
        seqs = [self.vocab.encode_tokens(toks) for toks in token_lists]
        width = max(len(s) for s in seqs)
        ids = np.full((len(seqs), width), 1, dtype=np.int64)  # pad with end id
        lengths = np.zeros(len(seqs), dtype=np.int64)
        for i, s in enumerate(seqs):
            ids[i, : len(s)] = s
            lengths[i] = len(s)
        return self._infer().theta(ids, lengths)


class _ListenerInference:
    def __init__(self, model: ListenerModel):
        self.m = model
        self.p = {k: v.data.astype(np.float64) for k, v in model.params().items()}

    def phi(self, feats: np.ndarray) -> np.ndarray:
        if feats.shape[1] != self.m.config.feature_dim:
            raise ShapeMismatch(
                f"feature dim {feats.shape[1]} != model {self.m.config.feature_dim}"
            )
        return np.maximum(feats @ self.p["phi.w"] + self.p["phi.b"], 0.0)

    def theta(self, ids: np.ndarray, lengths: np.ndarray) -> np.ndarray:
        batch, width = ids.shape
        hd = self.m.config.hidden_dim
        h = np.zeros((batch, hd))
        c = np.zeros((batch, hd))
        final = np.zeros((batch, hd))
        for t in range(width):
            x = self.p["embedding.table"][ids[:, t]]
            z = x @ self.p["encoder.wx"] + h @ self.p["encoder.wh"] + self.p["encoder.b"]
            i = _sigmoid(z[:, :hd])
            f = _sigmoid(z[:, hd:2 * hd])
            g = np.tanh(z[:, 2 * hd:3 * hd])
            o = _sigmoid(z[:, 3 * hd:])
            c = f * c + i * g
            h = o * np.tanh(c)
            final[lengths == t + 1] = h[lengths == t + 1]
        return final


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


# -- scoring --------------------------------------------------------------------

def listener_score(
    model: ListenerModel,
    feature_left: np.ndarray,
    feature_right: np.ndarray,
    tokens: list[str] | tuple[str, ...],
) -> ListenerScore:
    theta = model.theta_vec(tokens)
    s_left = float(model.phi_vec(feature_left) @ theta)
    s_right = float(model.phi_vec(feature_right) @ theta)
    return pair_softmax(s_left, s_right)


def two_sl_average(p_first: float, p_second_flipped: float) -> float:
    """The 2xSL combination: mean of the two directed simple-listener
    probabilities that favor the same image."""
    return (p_first + p_second_flipped) / 2.0


def discerning_score(
    model: ListenerModel,
    feature_left: np.ndarray,
    feature_right: np.ndarray,
    left_tokens: list[str] | tuple[str, ...],
    right_tokens: list[str] | tuple[str, ...],
) -> ListenerScore:
    """Score a full phrase pair for the left image.

    A discerning model reads "P1 vs P2" in one pass; a simple model becomes
    the 2xSL composition, averaging the P1 score with the target-flipped P2
    score. An empty right half degrades to a single simple-listener call.
    """
    if model.config.kind == DISCERNING:
        seq = tuple(left_tokens) + (VS_TOKEN,) + tuple(right_tokens)
        return listener_score(model, feature_left, feature_right, seq)
    p1 = listener_score(model, feature_left, feature_right, left_tokens).p_left
    if not tuple(right_tokens):
        return ListenerScore(p_left=p1, p_right=1.0 - p1)
    p2_for_right = listener_score(model, feature_left, feature_right, right_tokens).p_right
    p = two_sl_average(p1, p2_for_right)
    return ListenerScore(p_left=p, p_right=1.0 - p)


class TrainedListenerJudge:
    """Judge adapter: p_left(tokens, image_left, image_right) over a feature
    store, so evaluation code can swap a trained model for the oracle. Pair
    sequences are cut at the first "vs" and judged by their first half."""

    def __init__(self, model: ListenerModel, features: FeatureStore):
        self.model = model
        self.features = features

    def p_left(self, phrase_tokens, image_left: str, image_right: str) -> float:
        tokens = list(phrase_tokens)
        if VS_TOKEN in tokens:
            tokens = tokens[: tokens.index(VS_TOKEN)]
        if not tokens:
            return 0.5
        return listener_score(
            self.model,
            self.features.get(image_left),
            self.features.get(image_right),
            tokens,
        ).p_left


class DiscerningJudge:
    """Judge adapter for pair tasks: splits "P1 vs P2" and scores the whole
    comparison, either with a discerning model or the 2xSL composition."""

    def __init__(self, model: ListenerModel, features: FeatureStore):
        self.model = model
        self.features = features

    def p_left(self, phrase_tokens, image_left: str, image_right: str) -> float:
        tokens = list(phrase_tokens)
        if VS_TOKEN in tokens:
            cut = tokens.index(VS_TOKEN)
            left, right = tokens[:cut], tokens[cut + 1:]
        else:
            left, right = tokens, []
        if not left:
            return 0.5
        return discerning_score(
            self.model,
            self.features.get(image_left),
            self.features.get(image_right),
            left,
            right,
        ).p_left


# -- training -----------------------------------------------------------------------

@dataclass(frozen=True)
class ListenerExample:
    tokens: tuple[str, ...]
    target: str
    distractor: str


def listener_examples(records, kind: str) -> list[ListenerExample]:
    """Ten directed examples per annotation: five positions times two sides.

    Simple kind: each side's phrase targets its own image against the pair's
    other image. Discerning kind: the full pair sequence in both orders.
    """
    examples = []
    for rec in records:
        for pp in rec.phrase_pairs:
            if kind == SIMPLE:
                examples.append(ListenerExample(pp.left.tokens, rec.image_a, rec.image_b))
                examples.append(ListenerExample(pp.right.tokens, rec.image_b, rec.image_a))
            else:
                fwd = pp.left.tokens + (VS_TOKEN,) + pp.right.tokens
                rev = pp.right.tokens + (VS_TOKEN,) + pp.left.tokens
                examples.append(ListenerExample(fwd, rec.image_a, rec.image_b))
                examples.append(ListenerExample(rev, rec.image_b, rec.image_a))
    return examples


def listener_batch_loss(model: ListenerModel, batch: list[ListenerExample],
                        features: FeatureStore) -> ag.Tensor:
    """Binary cross entropy on the correct side of the pairwise softmax,
    i.e. softplus(s_distractor - s_target) averaged over the batch."""
    seqs = [model.vocab.encode_tokens(ex.tokens) for ex in batch]
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), 1, dtype=np.int64)
    lengths = np.zeros(len(seqs), dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        lengths[i] = len(s)
    theta = model.theta_graph(ids, lengths)
    feats_t = np.stack([features.get(ex.target) for ex in batch])
    feats_d = np.stack([features.get(ex.distractor) for ex in batch])
    s_t = ag.tsum(ag.mul(model.phi_graph(feats_t), theta), axis=1)
    s_d = ag.tsum(ag.mul(model.phi_graph(feats_d), theta), axis=1)
    return ag.tmean(ag.softplus(ag.sub(s_d, s_t)))


def train_listener(
    records,
    features: FeatureStore,
    vocab: Vocabulary,
    regime: str = CONTRASTIVE,
    kind: str = SIMPLE,
    profile: Profile = DESK,
    epochs: int = 5,
    seed: int = 0,
) -> tuple[ListenerModel, list[float]]:
    """Train a listener; the random-negative regime redraws each example's
    distractor uniformly from the other training images every epoch."""
    records = list(records)
    if not records:
        raise EmptyCorpus("no training records")
    if regime not in (CONTRASTIVE, RANDOM_NEGATIVE):
        raise VocabMismatch(f"unknown regime {regime!r}")
    config = ListenerConfig(
        kind=kind,
        vocab_size=len(vocab),
        feature_dim=features.dim,
        embed_dim=profile.embed_dim,
        hidden_dim=profile.listener_hidden,
        training_regime=regime,
    )
    rng = np.random.Generator(np.random.PCG64([seed, 13]))
    model = ListenerModel(config, vocab, rng)
    base = listener_examples(records, kind)
    for ex in base:
        if ex.target not in features or ex.distractor not in features:
            raise VocabMismatch(f"images of example {ex.target}/{ex.distractor} missing features")
    image_pool = sorted({img for rec in records for img in (rec.image_a, rec.image_b)})
    params = model.params()
    opt = nn.Adam(lr=profile.learning_rate)
    history = []
    for _ in range(epochs):
        examples = base
        if regime == RANDOM_NEGATIVE:
            examples = [_redraw_negative(ex, image_pool, rng) for ex in base]
        order = rng.permutation(len(examples))
        losses = []
        for start in range(0, len(examples), profile.batch_size):
            batch = [examples[i] for i in order[start:start + profile.batch_size]]
            opt.zero_grad(params)
            loss = listener_batch_loss(model, batch, features)
            loss.backward()
            opt.step(params)
            losses.append(float(loss.data))
        history.append(float(np.mean(losses)))
    model.invalidate_inference()
    return model, history


def _redraw_negative(ex: ListenerExample, pool: list[str], rng: np.random.Generator):
    while True:
        distractor = pool[int(rng.integers(len(pool)))]
        if distractor != ex.target:
            return ListenerExample(ex.tokens, ex.target, distractor)


# -- checkpoints -----------------------------------------------------------------------

def save_listener(model: ListenerModel, directory: str | Path) -> None:
    nn.save_checkpoint(directory, model.manifest(), model.params())
    model.vocab.save(Path(directory) / "vocab.json")


def load_listener(directory: str | Path) -> ListenerModel:
    manifest = nn.checkpoint.load_manifest(directory)
    if manifest.get("model") != "listener":
        from .errors import ConfigError

        raise ConfigError(f"{directory} is not a listener checkpoint")
    vocab = Vocabulary.load(Path(directory) / "vocab.json")
    config = ListenerConfig(
        kind=manifest["kind"],
        vocab_size=manifest["vocab_size"],
        feature_dim=manifest["feature_dim"],
        embed_dim=manifest["embed_dim"],
        hidden_dim=manifest["hidden_dim"],
        training_regime=manifest["training_regime"],
    )
    rng = np.random.Generator(np.random.PCG64(0))
    model = ListenerModel(config, vocab, rng)
    _, tensors = nn.load_checkpoint(directory, expected=model.manifest())
    nn.restore_params(model.params(), tensors)
    model.invalidate_inference()
    return model
