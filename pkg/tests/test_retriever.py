import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from precedent.diffcore import ParameterStore, Tensor
from precedent.encoder import HierarchicalEncoder
from precedent.retriever import (
    N_BINS,
    RelevanceTarget,
    Retriever,
    RetrieverTrainConfig,
    desk_scale_pairs,
    lor,
    lor_bin,
    lor_matrix,
    mean_pair_mse,
    pairwise_loss,
    sample_pairs,
    train_retriever,
)

labels = st.lists(st.booleans(), min_size=6, max_size=6).map(np.array)


class TestLor:
    def test_examples(self):
        assert lor([1, 1, 0], [1, 1, 0]) == 1.0
        assert lor([1, 0, 0], [0, 1, 0]) == 0.0
        assert lor([1, 1, 0], [1, 0, 1]) == pytest.approx(1 / 3)
        assert lor([0, 0], [0, 0]) == 0.0

    def test_dimension_mismatch(self):
        with pytest.raises(ValueError):
            lor([1, 0], [1, 0, 0])

    @settings(max_examples=60, deadline=None)
    @given(labels, labels)
    def test_symmetric_bounded(self, a, b):
        assert lor(a, b) == lor(b, a)
        assert 0.0 <= lor(a, b) <= 1.0
        assert lor_matrix(a[None], b[None])[0, 0] == pytest.approx(lor(a, b))

    def test_binary_target(self):
        assert RelevanceTarget.from_labels("binary", [1, 0], [1, 1]).value == 1.0
        assert RelevanceTarget.from_labels("binary", [1, 0], [0, 1]).value == 0.0
        with pytest.raises(ValueError):
            RelevanceTarget.from_labels("self", [1], [1])


class TestPairs:
    def test_desk_scale(self):
        assert desk_scale_pairs(9000) == 50_000
        assert desk_scale_pairs(1600) == 8889

    def test_bins(self):
        assert lor_bin(np.array([0.0, 0.05, 0.1, 0.99, 1.0])).tolist() == [0, 0, 1, 9, 9]

    def test_bin_uniform_sampling(self, small_corpus):
        corpus, split = small_corpus
        pairs = sample_pairs(corpus, split.train, 4000, seed=0)
        assert len(pairs) == 4000
        assert all(p.i != p.j for p in pairs)
        counts = np.bincount(lor_bin(np.array([p.lor for p in pairs])), minlength=N_BINS)
        occupied = counts[counts > 0]
        # equal expected mass per non-empty bin
        assert occupied.max() / occupied.min() < 1.5

    def test_deterministic(self, small_corpus):
        corpus, split = small_corpus
        assert sample_pairs(corpus, split.train, 50, 3) == sample_pairs(corpus, split.train, 50, 3)

    def test_needs_two_cases(self, small_corpus):
        with pytest.raises(ValueError):
            sample_pairs(small_corpus[0], small_corpus[1].train[:1], 5, 0)


class TestLoss:
    def test_value(self):
        h = Tensor(np.array([[1.0, 2.0], [0.5, 0.0]]))
        loss = pairwise_loss(h, h, np.array([1.0, 0.0]))
        assert loss.item() == pytest.approx(((5 - 1) ** 2 + 0.25 ** 2) / 2)


class TestRetriever:
    def test_self_reuses_encoder(self, small_enc):
        store = ParameterStore()
        enc = HierarchicalEncoder(store, "enc.", small_enc, 30, np.random.default_rng(0))
        r = Retriever.create("self", store, small_enc, 30, np.random.default_rng(1), ljp_encoder=enc)
        assert r.encoder is enc and r.prefix == "enc." and not r.trainable
        with pytest.raises(ValueError):
            Retriever.create("self", store, small_enc, 30, np.random.default_rng(1))
        with pytest.raises(ValueError):
            Retriever("fancy", enc)

    def test_training_reduces_heldout_mse(self, small_corpus, small_enc):
        corpus, split = small_corpus
        store = ParameterStore()
        r = Retriever.create("lor", store, small_enc, corpus.vocab_size, np.random.default_rng(0))
        held = sample_pairs(corpus, split.validation + split.test, 200, 1)
        frozen = store.checksum("enc.")
        hist = train_retriever(r, corpus, split.train, RetrieverTrainConfig(epochs=3, n_pairs=600, warmup_steps=5), 0, held)
        assert hist["heldout_mse"][-1] < hist["heldout_mse_init"]
        assert hist["heldout_mse"][-1] == pytest.approx(mean_pair_mse(r, corpus, held))
        assert store.checksum("enc.") == frozen

    def test_self_cannot_train(self, small_corpus, small_enc):
        store = ParameterStore()
        enc = HierarchicalEncoder(store, "enc.", small_enc, 30, np.random.default_rng(0))
        with pytest.raises(ValueError):
            train_retriever(Retriever("self", enc), small_corpus[0], small_corpus[1].train, RetrieverTrainConfig(), 0)
