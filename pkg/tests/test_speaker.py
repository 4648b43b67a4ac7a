import math

import numpy as np
import pytest

from refgame import data, speaker
from refgame.data import END_ID, START_ID, Vocabulary, build_vocabulary
from refgame.errors import EmptyCorpus, ShapeMismatch, VocabMismatch
from refgame.profiles import DESK, PAPER
from refgame.synthworld import default_world_spec, generate_dataset


def tiny_vocab(n_regular=2) -> Vocabulary:
    return Vocabulary([f"w{i}" for i in range(n_regular)])


def tiny_model(seed, kind="simple", n_regular=2, feature_dim=3, embed=4, hidden=5):
    vocab = tiny_vocab(n_regular)
    config = speaker.SpeakerConfig(
        kind=kind, vocab_size=len(vocab), feature_dim=feature_dim,
        embed_dim=embed, hidden_dim=hidden, image_head_hidden=6,
    )
    rng = np.random.Generator(np.random.PCG64(seed))
    return speaker.SpeakerModel(config, vocab, rng)


def exhaustive_top(model, feature, max_len, top):
    """Independent search oracle: enumerate every content-token sequence up
    to max_len; shorter ones terminate with the end token's log-probability,
    length-max_len ones are truncated without it."""
    ctx = model.context_vector(feature)
    content = [i for i in range(model.config.vocab_size) if i not in (START_ID, END_ID)]
    results = []

    def walk(prefix, logp, state, last):
        dist, new_state = model.decode_step(last, state, ctx)
        logdist = np.log(dist)
        if len(prefix) < max_len:
            results.append((logp + logdist[END_ID], prefix, False))
            for tok in content:
                walk(prefix + (tok,), logp + logdist[tok], new_state, tok)
        else:
            results.append((logp, prefix, True))

    walk((), 0.0, None, START_ID)
    results.sort(key=lambda item: (-item[0], item[1]))
    return results[:top]


class TestBeamOracle:
    def test_beam_equals_exhaustive_on_tiny_models(self):
        # beam 20 with |V|=6, max_len=3 never prunes a live hypothesis, so
        # it must reproduce the exhaustive top-20 exactly
        for trial in range(10):
            model = tiny_model(seed=trial)
            feature = np.random.Generator(np.random.PCG64(100 + trial)).normal(size=3)
            beam = speaker.beam_decode(model, feature, beam_width=20, max_len=3)
            oracle = exhaustive_top(model, feature, max_len=3, top=20)
            assert len(beam) == len(oracle)
            for got, (score, tokens, truncated) in zip(beam, oracle):
                assert got.token_ids == tokens
                assert got.truncated == truncated
                assert abs(got.log_prob - score) < 1e-9

    def test_width_one_is_greedy(self):
        # a width-1 beam walks the greedy content path and returns its best
        # termination: some prefix plus end, or the truncated full path
        model = tiny_model(seed=3)
        feature = np.zeros(3)
        ctx = model.context_vector(feature)
        max_len = 4
        state = None
        last = START_ID
        path = []
        logp = 0.0
        candidates = []
        for step in range(max_len):
            dist, state = model.decode_step(last, state, ctx)
            candidates.append((logp + math.log(dist[END_ID]), tuple(path), False))
            content = [t for t in range(6) if t not in (START_ID, END_ID)]
            nxt = max(content, key=lambda t: (dist[t], -t))
            logp += math.log(dist[nxt])
            path.append(nxt)
            last = nxt
        candidates.append((logp, tuple(path), True))
        best_score, best_tokens, best_trunc = max(candidates, key=lambda c: c[0])

        got = speaker.beam_decode(model, feature, beam_width=1, max_len=max_len)[0]
        assert got.token_ids == best_tokens
        assert got.truncated == best_trunc
        assert abs(got.log_prob - best_score) < 1e-9
        # and the returned tokens are a prefix of the greedy content path
        assert tuple(path[: len(got.token_ids)]) == got.token_ids

    def test_rescoring_reproduces_beam_scores(self):
        # property: every returned score is the exact sum of step log probs
        model = tiny_model(seed=9, n_regular=3)
        feature = np.random.Generator(np.random.PCG64(5)).normal(size=3)
        ctx = model.context_vector(feature)
        for sp in speaker.beam_decode(model, feature, beam_width=10, max_len=4):
            state = None
            last = START_ID
            total = 0.0
            for tok in sp.token_ids:
                dist, state = model.decode_step(last, state, ctx)
                total += math.log(dist[tok])
                last = tok
            if not sp.truncated:
                dist, _ = model.decode_step(last, state, ctx)
                total += math.log(dist[END_ID])
            assert abs(total - sp.log_prob) < 1e-9

    def test_scores_sorted_and_nonpositive(self):
        model = tiny_model(seed=2)
        beam = speaker.beam_decode(model, np.zeros(3), beam_width=10, max_len=3)
        scores = [sp.log_prob for sp in beam]
        assert scores == sorted(scores, reverse=True)
        assert all(s <= 0 for s in scores)
        assert [sp.rank for sp in beam] == list(range(1, len(beam) + 1))


class TestDecodeStep:
    def test_distribution_sums_to_one(self):
        model = tiny_model(seed=1)
        dist, _ = model.decode_step(START_ID, None, model.context_vector(np.ones(3)))
        assert dist.shape == (6,)
        assert np.all(dist >= 0)
        assert abs(dist.sum() - 1.0) < 1e-6

    def test_context_is_wired_in(self):
        model = tiny_model(seed=4)
        d0, _ = model.decode_step(START_ID, None, np.zeros(model.config.embed_dim))
        d1, _ = model.decode_step(START_ID, None, np.ones(model.config.embed_dim))
        assert not np.allclose(d0, d1)

    def test_uniform_logits_give_uniform_distribution(self):
        model = tiny_model(seed=5)
        model.out.w.data[:] = 0
        model.out.b.data[:] = 0
        model.invalidate_inference()
        dist, _ = model.decode_step(START_ID, None, model.context_vector(np.zeros(3)))
        np.testing.assert_allclose(dist, np.full(6, 1 / 6), rtol=1e-12)

    def test_feature_dim_checked(self):
        model = tiny_model(seed=6)
        with pytest.raises(ShapeMismatch):
            model.context_vector(np.zeros(7))


class TestSplitPhrasePair:
    def test_basic_split(self):
        assert speaker.split_phrase_pair(["red", "vs", "blue"]) == (["red"], ["blue"])

    def test_missing_vs_keeps_whole_as_first(self):
        assert speaker.split_phrase_pair(["red", "body"]) == (["red", "body"], [])

    def test_leading_vs(self):
        assert speaker.split_phrase_pair(["vs", "blue"]) == ([], ["blue"])

    def test_splits_at_first_vs_only(self):
        assert speaker.split_phrase_pair(["a", "vs", "b", "vs", "c"]) == (["a"], ["b", "vs", "c"])


@pytest.fixture(scope="module")
def training_world():
    spec = default_world_spec(seed=21)
    dataset = generate_dataset(spec, {"train": 120})
    vocab = build_vocabulary(dataset.records["train"], min_freq=6)
    return dataset, vocab


class TestTraining:
    def test_loss_decreases(self, training_world):
        dataset, vocab = training_world
        _, history = speaker.train_speaker(
            dataset.records["train"], dataset.features, vocab, kind="simple",
            epochs=2, seed=0,
        )
        assert history[-1] < history[0]

    def test_discerning_examples_use_both_orders(self, training_world):
        dataset, vocab = training_world
        records = dataset.records["train"][:2]
        examples = speaker.speaker_examples(records, "discerning", vocab)
        assert len(examples) == 2 * 5 * 2
        imgs0, seq0 = examples[0]
        imgs1, seq1 = examples[1]
        assert imgs0 == (records[0].image_a, records[0].image_b)
        assert imgs1 == (records[0].image_b, records[0].image_a)
        # swapped halves around the "vs" id
        vs_at0 = seq0.index(data.VS_ID)
        vs_at1 = seq1.index(data.VS_ID)
        assert seq0[1:vs_at0] == seq1[vs_at1 + 1:-1]

    def test_simple_examples_once_per_phrase(self, training_world):
        dataset, vocab = training_world
        examples = speaker.speaker_examples(dataset.records["train"][:3], "simple", vocab)
        assert len(examples) == 3 * 5 * 2

    def test_empty_corpus(self, training_world):
        dataset, vocab = training_world
        with pytest.raises(EmptyCorpus):
            speaker.train_speaker([], dataset.features, vocab)

    def test_missing_feature_rejected(self, training_world):
        dataset, vocab = training_world
        from refgame.data import FeatureStore

        tiny_store = FeatureStore(ids=["nobody"], matrix=np.zeros((1, 64), np.float32))
        with pytest.raises(VocabMismatch):
            speaker.train_speaker(dataset.records["train"][:2], tiny_store, vocab)

    def test_paper_profile_dims(self):
        assert PAPER.speaker_hidden == 2048
        assert PAPER.listener_hidden == 1024
        assert PAPER.dropout == 0.7
        assert PAPER.batch_size == 64
        assert DESK.speaker_hidden == 128

    def test_batch_norm_profile_trains(self, training_world):
        # parity-mode image head with batch normalization stays trainable
        dataset, vocab = training_world
        from dataclasses import replace

        profile = replace(DESK, batch_norm=True)
        _, history = speaker.train_speaker(
            dataset.records["train"][:40], dataset.features, vocab,
            profile=profile, epochs=2, seed=1,
        )
        assert np.isfinite(history).all()
        assert history[-1] < history[0]


class TestCheckpointAndRuns:
    def test_speaker_checkpoint_round_trip(self, training_world, tmp_path):
        dataset, vocab = training_world
        model, _ = speaker.train_speaker(
            dataset.records["train"][:30], dataset.features, vocab, epochs=1, seed=2,
        )
        speaker.save_speaker(model, tmp_path)
        loaded = speaker.load_speaker(tmp_path)
        feature = dataset.features.matrix[0]
        b1 = speaker.beam_decode(model, feature, 5, 6)
        b2 = speaker.beam_decode(loaded, feature, 5, 6)
        assert [(x.tokens, x.log_prob) for x in b1] == [(x.tokens, x.log_prob) for x in b2]

    def test_run_file_round_trip(self, tmp_path):
        entries = [
            speaker.DecodedEntry("p1", "a", 1, "red body", -1.5),
            speaker.DecodedEntry("p1", "a", 2, "", -2.5),
        ]
        path = tmp_path / "run.jsonl"
        speaker.save_run(entries, path)
        assert speaker.load_run(path) == entries
