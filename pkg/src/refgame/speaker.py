"""Speaker models: the simple speaker captions one image, the discerning
speaker sees the pair and emits a contrastive "P1 vs P2" sequence.

Both share one architecture: a two-layer ReLU image head produces a context
vector that is concatenated to the word embedding at every LSTM step; the
discerning context is the concatenation of the two per-image projections.
Decoding is plain beam search over raw log-probability sums (no length
normalization, which biases toward short phrases).
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import nn
from .data import (
    END_ID,
    START_ID,
    VS_TOKEN,
    AnnotationRecord,
    FeatureStore,
    Vocabulary,
)
from .errors import EmptyCorpus, ShapeMismatch, VocabMismatch
from .nn import autograd as ag
from .profiles import DESK, Profile

SIMPLE = "simple"
DISCERNING = "discerning"


@dataclass(frozen=True)
class SpeakerConfig:
    kind: str
    vocab_size: int
    feature_dim: int
    embed_dim: int
    hidden_dim: int
    image_head_hidden: int = 256
    dropout: float = 0.0
    batch_norm: bool = False

    @property
    def context_dim(self) -> int:
        # discerning context doubles: one projection per image
        return self.embed_dim * (2 if self.kind == DISCERNING else 1)


@dataclass(frozen=True)
class ScoredPhrase:
    """A decoded sequence with its speaker log-probability."""

    tokens: tuple[str, ...]
    token_ids: tuple[int, ...]
    log_prob: float
    rank: int
    truncated: bool = False

    @property
    def text(self) -> str:
        return " ".join(self.tokens)


def split_phrase_pair(tokens: list[str] | tuple[str, ...]) -> tuple[list[str], list[str]]:
    """Split a decoded sequence at the first "vs"; without one the whole
    sequence is the first half."""
    tokens = list(tokens)
    if VS_TOKEN in tokens:
        cut = tokens.index(VS_TOKEN)
        return tokens[:cut], tokens[cut + 1:]
    return tokens, []


class SpeakerModel:
    def __init__(self, config: SpeakerConfig, vocab: Vocabulary, rng: np.random.Generator,
                 dtype=np.float32):
        if config.kind not in (SIMPLE, DISCERNING):
            raise VocabMismatch(f"unknown speaker kind {config.kind!r}")
        if config.vocab_size != len(vocab):
            raise VocabMismatch(f"config vocab_size {config.vocab_size} != |vocab| {len(vocab)}")
        self.config = config
        self.vocab = vocab
        self.embedding = nn.Embedding(rng, config.vocab_size, config.embed_dim, dtype)
        self.img1 = nn.Linear(rng, config.feature_dim, config.image_head_hidden, dtype)
        self.img2 = nn.Linear(rng, config.image_head_hidden, config.embed_dim, dtype)
        self.bn1 = nn.BatchNorm1d(config.image_head_hidden, dtype=dtype) if config.batch_norm else None
        self.bn2 = nn.BatchNorm1d(config.embed_dim, dtype=dtype) if config.batch_norm else None
        self.cell = nn.LSTMCell(rng, config.embed_dim + config.context_dim, config.hidden_dim, dtype)
        self.out = nn.Linear(rng, config.hidden_dim, config.vocab_size, dtype)
        self._inference = None

    def params(self) -> dict[str, nn.Tensor]:
        named = {}
        named.update(self.embedding.params("embedding"))
        named.update(self.img1.params("img1"))
        named.update(self.img2.params("img2"))
        if self.bn1 is not None:
            named.update(self.bn1.params("bn1"))
            named.update(self.bn2.params("bn2"))
        named.update(self.cell.params("cell"))
        named.update(self.out.params("out"))
        return named

    def manifest(self) -> dict:
        return {
            "model": "speaker",
            "kind": self.config.kind,
            "vocab_size": self.config.vocab_size,
            "vocab_hash": self.vocab.content_hash(),
            "feature_dim": self.config.feature_dim,
            "embed_dim": self.config.embed_dim,
            "hidden_dim": self.config.hidden_dim,
            "image_head_hidden": self.config.image_head_hidden,
            "batch_norm": self.config.batch_norm,
        }

    # -- training-path graph pieces ------------------------------------------

    def project_images(self, feats: np.ndarray, training: bool) -> ag.Tensor:
        x = ag.Tensor(feats.astype(self.img1.w.data.dtype))
        h = self.img1(x)
        if self.bn1 is not None:
            h = self.bn1(h, training)
        h = ag.relu(h)
        h = self.img2(h)
        if self.bn2 is not None:
            h = self.bn2(h, training)
        return ag.relu(h)

    def invalidate_inference(self):
        self._inference = None

    # -- numpy inference path ---------------------------------------------------

    def _infer(self) -> "_SpeakerInference":
        if self._inference is None:
            self._inference = _SpeakerInference(self)
        return self._inference

    def context_vector(self, features) -> np.ndarray:
        """Context for decoding: one feature vector (simple) or an (a, b)
        tuple with the described image first (discerning)."""
        inf = self._infer()
        if self.config.kind == SIMPLE:
            feat = np.asarray(features, dtype=np.float64)
            if feat.ndim != 1 or feat.shape[0] != self.config.feature_dim:
                raise ShapeMismatch(f"expected ({self.config.feature_dim},) feature, got {feat.shape}")
            return inf.project(feat[None, :])[0]
        f1, f2 = features
        pair = np.stack([np.asarray(f1, np.float64), np.asarray(f2, np.float64)])
        proj = inf.project(pair)
        return np.concatenate([proj[0], proj[1]])

    def decode_step(
        self, prev_token_id: int, state: tuple[np.ndarray, np.ndarray] | None,
        context_vector: np.ndarray,
    ) -> tuple[np.ndarray, tuple[np.ndarray, np.ndarray]]:
        """One decoder step: returns the next-token distribution (sums to 1)
        and the new recurrent state."""
        inf = self._infer()
        if state is None:
            state = (
                np.zeros((1, self.config.hidden_dim)),
                np.zeros((1, self.config.hidden_dim)),
            )
        h, c = state
        probs, h2, c2 = inf.step(
            np.array([prev_token_id]), h, c, context_vector[None, :]
        )
        return probs[0], (h2, c2)


class _SpeakerInference:
    """Float64 snapshot of the parameters for fast decode-time math."""

    def __init__(self, model: SpeakerModel):
        self.m = model
        p = {k: v.data.astype(np.float64) for k, v in model.params().items()}
        self.p = p

    def project(self, feats: np.ndarray) -> np.ndarray:
        h = feats @ self.p["img1.w"] + self.p["img1.b"]
        if self.m.bn1 is not None:
            h = self._bn(h, self.m.bn1, "bn1")
        h = np.maximum(h, 0.0)
        h = h @ self.p["img2.w"] + self.p["img2.b"]
        if self.m.bn2 is not None:
            h = self._bn(h, self.m.bn2, "bn2")
        return np.maximum(h, 0.0)

    def _bn(self, x: np.ndarray, layer: nn.BatchNorm1d, name: str) -> np.ndarray:
        inv = 1.0 / np.sqrt(layer.running_var + layer.eps)
        return (x - layer.running_mean) * inv * self.p[f"{name}.gamma"] + self.p[f"{name}.beta"]

    def step(self, last_ids: np.ndarray, h: np.ndarray, c: np.ndarray, ctx: np.ndarray):
        emb = self.p["embedding.table"][last_ids]
        if ctx.shape[0] == 1 and emb.shape[0] > 1:
            ctx = np.broadcast_to(ctx, (emb.shape[0], ctx.shape[1]))
        x = np.concatenate([emb, ctx], axis=1)
        hd = self.m.config.hidden_dim
        z = x @ self.p["cell.wx"] + h @ self.p["cell.wh"] + self.p["cell.b"]
        i = _sigmoid(z[:, :hd])
        f = _sigmoid(z[:, hd:2 * hd])
        g = np.tanh(z[:, 2 * hd:3 * hd])
        o = _sigmoid(z[:, 3 * hd:])
        c2 = f * c + i * g
        h2 = o * np.tanh(c2)
        logits = h2 @ self.p["out.w"] + self.p["out.b"]
        shifted = logits - logits.max(axis=1, keepdims=True)
        expd = np.exp(shifted)
        probs = expd / expd.sum(axis=1, keepdims=True)
        return probs, h2, c2


def _sigmoid(x: np.ndarray) -> np.ndarray:
    return np.where(x >= 0, 1.0 / (1.0 + np.exp(-x)), np.exp(x) / (1.0 + np.exp(x)))


# -- beam search ---------------------------------------------------------------

def beam_decode(
    model: SpeakerModel,
    features,
    beam_width: int = 10,
    max_len: int = 14,
) -> list[ScoredPhrase]:
    """Beam search returning up to beam_width sequences sorted by descending
    log-probability, ties broken by token-id order.

    End-terminated hypotheses carry the end token's log-probability; beams
    still alive at max_len are kept as truncated results without it.
    """
    if beam_width < 1 or max_len < 1:
        raise ShapeMismatch("beam_width and max_len must be >= 1")
    inf = model._infer()
    ctx = model.context_vector(features)[None, :]
    hidden = model.config.hidden_dim
    vocab_size = model.config.vocab_size

    # live beams: token id tuples + log prob + recurrent state rows
    tokens: list[tuple[int, ...]] = [()]
    logps = np.zeros(1)
    h = np.zeros((1, hidden))
    c = np.zeros((1, hidden))
    last = np.array([START_ID])
    finals: list[tuple[float, tuple[int, ...], bool]] = []

    for _ in range(max_len):
        probs, h2, c2 = inf.step(last, h, c, ctx)
        logprobs = np.log(probs)
        # end-extension finalizes each live beam
        for row, toks in enumerate(tokens):
            finals.append((logps[row] + logprobs[row, END_ID], toks, False))
        candidates = []
        for row, toks in enumerate(tokens):
            for tok in range(vocab_size):
                if tok in (START_ID, END_ID):
                    continue
                candidates.append((logps[row] + logprobs[row, tok], toks + (tok,), row))
        candidates.sort(key=lambda item: (-item[0], item[1]))
        kept = candidates[:beam_width]
        if not kept:
            break
        tokens = [toks for _, toks, _ in kept]
        logps = np.array([lp for lp, _, _ in kept])
        rows = [row for _, _, row in kept]
        h, c = h2[rows], c2[rows]
        last = np.array([toks[-1] for toks in tokens])

    for row, toks in enumerate(tokens):
        finals.append((logps[row], toks, True))

    finals.sort(key=lambda item: (-item[0], item[1]))
    results = []
    for rank, (logp, toks, truncated) in enumerate(finals[:beam_width], start=1):
        results.append(
            ScoredPhrase(
                tokens=tuple(model.vocab.tokens[t] for t in toks),
                token_ids=toks,
                log_prob=float(logp),
                rank=rank,
                truncated=truncated,
            )
        )
    return results


# -- training ---------------------------------------------------------------------

def speaker_examples(records: list[AnnotationRecord], kind: str, vocab: Vocabulary):
    """(image ids, framed token ids) training examples.

    The simple speaker trains once per phrase (both sides); the discerning
    speaker trains on both image orders of every phrase pair.
    """
    examples = []
    for rec in records:
        for pp in rec.phrase_pairs:
            if kind == SIMPLE:
                examples.append(((rec.image_a,), vocab.encode_tokens(pp.left.tokens)))
                examples.append(((rec.image_b,), vocab.encode_tokens(pp.right.tokens)))
            else:
                fwd = pp.left.tokens + (VS_TOKEN,) + pp.right.tokens
                rev = pp.right.tokens + (VS_TOKEN,) + pp.left.tokens
                examples.append(((rec.image_a, rec.image_b), vocab.encode_tokens(fwd)))
                examples.append(((rec.image_b, rec.image_a), vocab.encode_tokens(rev)))
    return examples


def _pad_batch(seqs: list[list[int]]) -> tuple[np.ndarray, np.ndarray]:
    width = max(len(s) for s in seqs)
    ids = np.full((len(seqs), width), END_ID, dtype=np.int64)
    lengths = np.zeros(len(seqs), dtype=np.int64)
    for i, s in enumerate(seqs):
        ids[i, : len(s)] = s
        lengths[i] = len(s)
    return ids, lengths


def speaker_batch_loss(
    model: SpeakerModel,
    feats,
    ids: np.ndarray,
    lengths: np.ndarray,
    training: bool = True,
    dropout_rng: np.random.Generator | None = None,
) -> ag.Tensor:
    """Teacher-forced mean cross entropy per target token."""
    cfg = model.config
    if cfg.kind == SIMPLE:
        ctx = model.project_images(feats[0], training)
    else:
        ctx = ag.concat(
            [model.project_images(feats[0], training), model.project_images(feats[1], training)]
        )
    batch, width = ids.shape
    h, c = model.cell.zero_state(batch, model.out.w.data.dtype)
    total = None
    mask_all = (np.arange(1, width)[None, :] < lengths[:, None]).astype(model.out.w.data.dtype)
    for t in range(width - 1):
        x = ag.concat([model.embedding(ids[:, t]), ctx])
        h, c = model.cell.step(x, h, c)
        h_used = h
        if training and cfg.dropout > 0.0 and dropout_rng is not None:
            mask = nn.dropout_mask(dropout_rng, h.data.shape, cfg.dropout, h.data.dtype)
            h_used = ag.mul(h, mask)
        ce = ag.softmax_cross_entropy(model.out(h_used), ids[:, t + 1])
        masked = ag.mul(ce, mask_all[:, t])
        total = masked if total is None else ag.add(total, masked)
    n_tokens = float(mask_all.sum())
    return ag.mul(ag.tsum(total), 1.0 / n_tokens)


def train_speaker(
    records: list[AnnotationRecord],
    features: FeatureStore,
    vocab: Vocabulary,
    kind: str = SIMPLE,
    profile: Profile = DESK,
    epochs: int = 10,
    seed: int = 0,
    stage2_epochs: int = 0,
) -> tuple[SpeakerModel, list[float]]:
    """Train a speaker with teacher forcing; returns the model and the mean
    loss per epoch (index 0 is the pre-training loss on the first batches)."""
    records = list(records)
    if not records:
        raise EmptyCorpus("no training records")
    config = SpeakerConfig(
        kind=kind,
        vocab_size=len(vocab),
        feature_dim=features.dim,
        embed_dim=profile.embed_dim,
        hidden_dim=profile.speaker_hidden,
        image_head_hidden=profile.image_head_hidden,
        dropout=profile.dropout,
        batch_norm=profile.batch_norm,
    )
    rng = np.random.Generator(np.random.PCG64([seed, 11]))
    model = SpeakerModel(config, vocab, rng)
    examples = speaker_examples(records, kind, vocab)
    for imgs, _ in examples:
        for img in imgs:
            if img not in features:
                raise VocabMismatch(f"image {img!r} missing from feature store")
    params = model.params()
    opt = nn.Adam(lr=profile.learning_rate)
    history = [_epoch_loss(model, examples, features, profile.batch_size)]
    schedule = [(epochs, opt)]
    if stage2_epochs > 0:
        schedule.append((stage2_epochs, nn.Adam(lr=profile.stage2_learning_rate)))
    for n_epochs, optimizer in schedule:
        for _ in range(n_epochs):
            order = rng.permutation(len(examples))
            losses = []
            for start in range(0, len(examples), profile.batch_size):
                batch = [examples[i] for i in order[start:start + profile.batch_size]]
                loss = _run_batch(model, batch, features, optimizer, params, rng)
                losses.append(loss)
            history.append(float(np.mean(losses)))
    model.invalidate_inference()
    return model, history


def _gather_feats(model: SpeakerModel, batch, features: FeatureStore):
    n_imgs = 2 if model.config.kind == DISCERNING else 1
    feats = []
    for slot in range(n_imgs):
        feats.append(np.stack([features.get(imgs[slot]) for imgs, _ in batch]))
    return feats


def _run_batch(model, batch, features, optimizer, params, rng) -> float:
    feats = _gather_feats(model, batch, features)
    ids, lengths = _pad_batch([seq for _, seq in batch])
    optimizer.zero_grad(params)
    loss = speaker_batch_loss(model, feats, ids, lengths, training=True, dropout_rng=rng)
    loss.backward()
    optimizer.step(params)
    return float(loss.data)


def _epoch_loss(model, examples, features, batch_size) -> float:
    losses = []
    with nn.no_grad():
        for start in range(0, len(examples), batch_size):
            batch = examples[start:start + batch_size]
            feats = _gather_feats(model, batch, features)
            ids, lengths = _pad_batch([seq for _, seq in batch])
            loss = speaker_batch_loss(model, feats, ids, lengths, training=False)
            losses.append(float(loss.data))
    return float(np.mean(losses))


# -- checkpoints and run files ------------------------------------------------------

def save_speaker(model: SpeakerModel, directory: str | Path) -> None:
    nn.save_checkpoint(directory, model.manifest(), model.params())
    model.vocab.save(Path(directory) / "vocab.json")


def load_speaker(directory: str | Path) -> SpeakerModel:
    manifest = nn.checkpoint.load_manifest(directory)
    if manifest.get("model") != "speaker":
        from .errors import ConfigError

        raise ConfigError(f"{directory} is not a speaker checkpoint")
    vocab = Vocabulary.load(Path(directory) / "vocab.json")
    config = SpeakerConfig(
        kind=manifest["kind"],
        vocab_size=manifest["vocab_size"],
        feature_dim=manifest["feature_dim"],
        embed_dim=manifest["embed_dim"],
        hidden_dim=manifest["hidden_dim"],
        image_head_hidden=manifest["image_head_hidden"],
        batch_norm=manifest["batch_norm"],
    )
    rng = np.random.Generator(np.random.PCG64(0))
    model = SpeakerModel(config, vocab, rng)
    _, tensors = nn.load_checkpoint(directory, expected=model.manifest())
    nn.restore_params(model.params(), tensors)
    model.invalidate_inference()
    return model


@dataclass(frozen=True)
class DecodedEntry:
    pair_id: str
    target: str  # "a" | "b"
    rank: int
    phrase: str
    log_prob: float


def decode_records(
    model: SpeakerModel,
    records: list[AnnotationRecord],
    features: FeatureStore,
    beam_width: int = 10,
    max_len: int = 14,
    targets: tuple[str, ...] = ("a",),
) -> list[DecodedEntry]:
    """Decode every record with the described image as target; the discerning
    speaker sees (target, distractor) in that order."""
    entries = []
    for rec in records:
        for side in targets:
            target_img = rec.image_a if side == "a" else rec.image_b
            other_img = rec.image_b if side == "a" else rec.image_a
            if model.config.kind == SIMPLE:
                feats = features.get(target_img)
            else:
                feats = (features.get(target_img), features.get(other_img))
            for sp in beam_decode(model, feats, beam_width, max_len):
                entries.append(
                    DecodedEntry(rec.pair_id, side, sp.rank, sp.text, sp.log_prob)
                )
    return entries


def save_run(entries: list[DecodedEntry], path: str | Path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        for e in entries:
            fh.write(
                json.dumps(
                    {
                        "pair_id": e.pair_id,
                        "target": e.target,
                        "rank": e.rank,
                        "phrase": e.phrase,
                        "log_prob": e.log_prob,
                    },
                    separators=(",", ":"),
                )
                + "\n"
            )


def load_run(path: str | Path) -> list[DecodedEntry]:
    entries = []
    with open(path, "r", encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if not line:
                continue
            obj = json.loads(line)
            entries.append(
                DecodedEntry(
                    pair_id=str(obj["pair_id"]),
                    target=str(obj["target"]),
                    rank=int(obj["rank"]),
                    phrase=str(obj["phrase"]),
                    log_prob=float(obj["log_prob"]),
                )
            )
    return entries
