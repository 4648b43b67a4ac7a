import numpy as np
import pytest

from refgame import downstream, listener, speaker
from refgame.data import build_vocabulary, load_features, save_features
from refgame.errors import (
    ConfigError,
    DegenerateLabels,
    EmptyCategory,
    EmptyQuery,
    KTooLarge,
)
from refgame.synthworld import default_world_spec, generate_categories, generate_dataset


@pytest.fixture(scope="module")
def world():
    spec = default_world_spec(seed=41)
    dataset = generate_dataset(spec, {"train": 250})
    vocab = build_vocabulary(dataset.records["train"], min_freq=6)
    sl, _ = listener.train_listener(dataset.records["train"], dataset.features, vocab,
                                    epochs=3, seed=0)
    dl, _ = listener.train_listener(dataset.records["train"][:100], dataset.features, vocab,
                                    kind="discerning", epochs=2, seed=1)
    ds_speaker, _ = speaker.train_speaker(dataset.records["train"], dataset.features, vocab,
                                          kind="discerning", epochs=4, seed=2)
    return dataset, vocab, sl, dl, ds_speaker


class TestLexicon:
    def test_frequency_order_with_ties_lexicographic(self, world):
        dataset, *_ = world
        lex = downstream.build_lexicon(dataset.records["train"], k=10)
        counts = {}
        for rec in dataset.records["train"]:
            for pp in rec.phrase_pairs:
                counts[pp.left.tokens] = counts.get(pp.left.tokens, 0) + 1
                counts[pp.right.tokens] = counts.get(pp.right.tokens, 0) + 1
        expected = sorted(counts, key=lambda t: (-counts[t], t))[:10]
        assert list(lex.entries) == expected

    def test_too_large_k(self, world):
        dataset, *_ = world
        with pytest.raises(KTooLarge):
            downstream.build_lexicon(dataset.records["train"][:1], k=500)

    def test_full_lexicon_covers_all_corpus_phrases(self, world):
        dataset, *_ = world
        distinct = set()
        for rec in dataset.records["train"]:
            for pp in rec.phrase_pairs:
                distinct.add(pp.left.tokens)
                distinct.add(pp.right.tokens)
        lex = downstream.build_lexicon(dataset.records["train"], k=len(distinct))
        assert set(lex.entries) == distinct

    def test_opponent_entries_are_pair_sequences(self, world):
        dataset, *_ = world
        lex = downstream.build_lexicon(dataset.records["train"], k=5, opponent=True)
        assert all("vs" in entry for entry in lex.entries)


class TestEmbedding:
    def test_identical_features_identical_embeddings(self, world):
        dataset, _, sl, *_ = world
        lex = downstream.build_lexicon(dataset.records["train"], k=8)
        feat = dataset.features.matrix[0]
        e1 = downstream.embed_image(sl, lex, feat)
        e2 = downstream.embed_image(sl, lex, feat)
        np.testing.assert_array_equal(e1.vector, e2.vector)
        assert len(e1.vector) == 8

    def test_entries_match_single_dot_products(self, world):
        dataset, _, sl, *_ = world
        lex = downstream.build_lexicon(dataset.records["train"], k=6)
        feat = dataset.features.matrix[3]
        emb = downstream.embed_image(sl, lex, feat)
        phi = sl.phi_vec(feat)
        for i, tokens in enumerate(lex.entries):
            single = float(phi @ sl.theta_vec(tokens))
            assert abs(single - emb.vector[i]) < 1e-6

    def test_batch_path_matches_single(self, world):
        dataset, _, sl, *_ = world
        lex = downstream.build_lexicon(dataset.records["train"], k=6)
        ids, matrix = downstream.embed_images(sl, lex, dataset.features,
                                              dataset.features.ids[:5])
        for row, oid in enumerate(ids):
            single = downstream.embed_image(sl, lex, dataset.features.get(oid))
            np.testing.assert_allclose(matrix[row], single.vector, atol=1e-6)

    def test_bilinearity_in_phi(self, world):
        dataset, _, sl, *_ = world
        lex = downstream.build_lexicon(dataset.records["train"], k=4)
        feat = dataset.features.matrix[1]
        base = downstream.embed_image(sl, lex, feat).vector
        sl.phi.w.data *= 2.0
        sl.phi.b.data *= 2.0
        sl.invalidate_inference()
        try:
            doubled = downstream.embed_image(sl, lex, feat).vector
            np.testing.assert_allclose(doubled, 2.0 * base, rtol=1e-6)
        finally:
            sl.phi.w.data /= 2.0
            sl.phi.b.data /= 2.0
            sl.invalidate_inference()

    def test_opponent_requires_discerning(self, world):
        dataset, _, sl, dl, _ = world
        lex = downstream.build_lexicon(dataset.records["train"], k=4, opponent=True)
        with pytest.raises(ConfigError):
            downstream.embed_image(sl, lex, dataset.features.matrix[0])
        emb = downstream.embed_image(dl, lex, dataset.features.matrix[0])
        assert len(emb.vector) == 4


class TestClassify:
    def test_separable_categories(self, world):
        dataset, _, sl, *_ = world
        cats = generate_categories(dataset.spec, n_categories=5, n_train=15, n_test=8,
                                   seed=3)
        lex = downstream.build_lexicon(dataset.records["train"], k=30)
        ids_tr, x_tr = downstream.embed_images(sl, lex, cats.features, cats.train_ids)
        ids_te, x_te = downstream.embed_images(sl, lex, cats.features, cats.test_ids)
        _, acc = downstream.classify(x_tr, [cats.labels[i] for i in ids_tr],
                                     x_te, [cats.labels[i] for i in ids_te])
        assert acc >= 0.9

    def test_single_class_rejected(self):
        x = np.zeros((4, 3))
        with pytest.raises(DegenerateLabels):
            downstream.classify(x, [0, 0, 0, 0], x, [0, 0, 0, 0])

    def test_thin_class_rejected(self):
        x = np.zeros((3, 2))
        with pytest.raises(DegenerateLabels):
            downstream.classify(x, [0, 0, 1], x, [0, 0, 1])


class TestRetrieve:
    def test_scores_sorted_descending(self, world):
        dataset, _, sl, *_ = world
        ranked = downstream.retrieve(sl, [("red", "body")], dataset.features, top_n=10)
        scores = [s for _, s in ranked]
        assert scores == sorted(scores, reverse=True)

    def test_empty_query_rejected(self, world):
        dataset, _, sl, *_ = world
        with pytest.raises(EmptyQuery):
            downstream.retrieve(sl, [], dataset.features)
        with pytest.raises(EmptyQuery):
            downstream.retrieve(sl, [()], dataset.features)

    def test_compositional_query_executes(self, world):
        # two phrases never co-annotated still form one concatenated query
        dataset, _, sl, *_ = world
        ranked = downstream.retrieve(sl, [("red", "body"), ("flying", "in", "air")],
                                     dataset.features, top_n=5)
        assert len(ranked) == 5

    def test_single_slot_query_finds_matching_objects(self, world):
        dataset, _, sl, *_ = world
        ranked = downstream.retrieve(sl, [("red", "body")], dataset.features, top_n=20)
        hits = sum(dataset.objects[i].assignment["body_color"] == "red" for i, _ in ranked)
        assert hits >= 15

    def test_mean_strategy_runs(self, world):
        dataset, _, sl, *_ = world
        ranked = downstream.retrieve(sl, [("red", "body"), ("tall", "tail")],
                                     dataset.features, top_n=5, strategy="mean")
        assert len(ranked) == 5


class TestExplanations:
    def test_same_sets_give_zero_deltas_lexicographic(self, world):
        dataset, _, _, _, ds_speaker = world
        ids = dataset.features.ids[:3]
        report = downstream.explain_categories(ds_speaker, dataset.features, ids, ids,
                                               beam_width=4, top_n=6)
        for side in (report.side_a, report.side_b):
            assert all(e.image_frequency == 0 and e.phrase_frequency == 0 for e in side)
            tokens = [e.tokens for e in side]
            assert tokens == sorted(tokens)

    def test_argument_order_only_relabels_sides(self, world):
        dataset, _, _, _, ds_speaker = world
        a_ids = dataset.features.ids[:3]
        b_ids = dataset.features.ids[3:6]
        fwd = downstream.explain_categories(ds_speaker, dataset.features, a_ids, b_ids,
                                            beam_width=4, top_n=8)
        rev = downstream.explain_categories(ds_speaker, dataset.features, b_ids, a_ids,
                                            beam_width=4, top_n=8)
        assert fwd.side_a == rev.side_b
        assert fwd.side_b == rev.side_a

    def test_empty_category_rejected(self, world):
        dataset, _, _, _, ds_speaker = world
        with pytest.raises(EmptyCategory):
            downstream.explain_categories(ds_speaker, dataset.features, [], ["x"])

    def test_simple_speaker_rejected(self, world):
        dataset, vocab, *_ = world
        ss, _ = speaker.train_speaker(dataset.records["train"][:20], dataset.features,
                                      vocab, kind="simple", epochs=1, seed=5)
        with pytest.raises(ConfigError):
            downstream.explain_categories(ss, dataset.features,
                                          [dataset.features.ids[0]],
                                          [dataset.features.ids[1]])


class TestExport:
    def test_phrase_export_round_trip(self, world, tmp_path):
        dataset, _, sl, *_ = world
        lex = downstream.build_lexicon(dataset.records["train"], k=12)
        store = downstream.export_embeddings(sl, phrases=list(lex.entries))
        assert len(store) == 12
        assert store.dim == sl.config.hidden_dim
        save_features(store, tmp_path / "emb.bin")
        loaded = load_features(tmp_path / "emb.bin")
        np.testing.assert_array_equal(loaded.matrix, store.matrix)
        assert loaded.ids == store.ids

    def test_image_export(self, world):
        dataset, _, sl, *_ = world
        store = downstream.export_embeddings(sl, features=dataset.features,
                                             image_ids=dataset.features.ids[:7])
        assert len(store) == 7

    def test_exactly_one_source(self, world):
        dataset, _, sl, *_ = world
        with pytest.raises(ConfigError):
            downstream.export_embeddings(sl)

    def test_paraphrases_cluster_after_training(self, world):
        # templates of one slot value embed closer than cross-slot phrases
        dataset, _, sl, *_ = world
        grammar = dataset.grammar
        same = []
        for (slot, value), surfaces in grammar.templates.items():
            vecs = [sl.theta_vec(tuple(s.split())) for s in surfaces]
            for i in range(len(vecs)):
                for j in range(i + 1, len(vecs)):
                    same.append(_cosine(vecs[i], vecs[j]))
        keys = list(grammar.templates)
        cross = []
        for i in range(0, len(keys) - 1, 2):
            (slot_a, _), (slot_b, _) = keys[i], keys[i + 1]
            if slot_a == slot_b:
                continue
            va = sl.theta_vec(tuple(grammar.templates[keys[i]][0].split()))
            vb = sl.theta_vec(tuple(grammar.templates[keys[i + 1]][0].split()))
            cross.append(_cosine(va, vb))
        assert np.mean(same) > np.mean(cross)


def _cosine(a, b):
    return float(a @ b / (np.linalg.norm(a) * np.linalg.norm(b) + 1e-12))
