"""Embedding extraction, aggregation, and cross-modality fusion."""

import numpy as np
import pytest

from painvit.errors import DataError, DimensionError, StateError
from painvit.fusion import (
    ADDITION,
    CONCATENATION,
    EmbeddingSet,
    adapt_channels,
    aggregate,
    assess,
    extract_fnirs_embeddings,
    extract_video_embeddings,
    fuse_modalities_addition,
    fuse_modalities_single_diagram,
    read_embeddings,
    write_embeddings,
)
from painvit.model import PROFILES, PainViT
from painvit.numerics import Tensor
from painvit.waveform import RESOLUTION, Series


@pytest.fixture(scope="module")
def tiny_model():
    model = PainViT(PROFILES["tiny"], seed=0)
    rng = np.random.default_rng(1)
    model.forward(Tensor(rng.normal(size=(4, 3, 96, 96))), training=True)
    return model


@pytest.fixture(scope="module")
def smoke_model():
    model = PainViT(PROFILES["smoke"], seed=2)
    rng = np.random.default_rng(3)
    model.forward(Tensor(rng.normal(size=(2, 3, 224, 224))), training=True)
    return model


def video_frames(rng, count, size=96):
    return [rng.normal(size=(3, size, size)) for _ in range(count)]


class TestAggregate:
    def test_addition_is_elementwise_sum(self):
        items = [np.arange(4.0), np.full(4, 2.0)]
        assert np.array_equal(aggregate(items, ADDITION), np.arange(4.0) + 2.0)

    def test_concatenation_preserves_order(self):
        items = [np.array([1.0, 2.0]), np.array([3.0, 4.0])]
        assert np.array_equal(aggregate(items, CONCATENATION), [1.0, 2.0, 3.0, 4.0])

    def test_empty_rejected(self):
        with pytest.raises(DataError):
            aggregate([], ADDITION)


class TestVideoExtraction:
    def test_identical_frames_addition_scales_single_embedding(self, tiny_model):
        frame = np.random.default_rng(4).normal(size=(3, 96, 96))
        single = extract_video_embeddings([frame], tiny_model, ADDITION)
        repeated = extract_video_embeddings([frame] * 5, tiny_model, ADDITION)
        assert np.max(np.abs(repeated.fused - 5.0 * single.fused)) < 1e-9

    def test_concatenation_length(self, tiny_model):
        frames = video_frames(np.random.default_rng(5), 7)
        out = extract_video_embeddings(frames, tiny_model, CONCATENATION)
        assert out.fused.shape == (7 * tiny_model.config.embedding_dim(),)

    def test_addition_is_permutation_invariant(self, tiny_model):
        rng = np.random.default_rng(6)
        frames = video_frames(rng, 6)
        base = extract_video_embeddings(frames, tiny_model, ADDITION)
        perm = [frames[i] for i in rng.permutation(6)]
        shuffled = extract_video_embeddings(perm, tiny_model, ADDITION)
        assert np.max(np.abs(base.fused - shuffled.fused)) < 1e-10

    def test_concatenation_is_permutation_equivariant(self, tiny_model):
        rng = np.random.default_rng(7)
        frames = video_frames(rng, 4)
        d = tiny_model.config.embedding_dim()
        base = extract_video_embeddings(frames, tiny_model, CONCATENATION)
        order = [2, 0, 3, 1]
        shuffled = extract_video_embeddings([frames[i] for i in order], tiny_model, CONCATENATION)
        blocks = base.fused.reshape(4, d)
        assert np.array_equal(shuffled.fused.reshape(4, d), blocks[order])

    def test_empty_frames_rejected(self, tiny_model):
        with pytest.raises(DataError):
            extract_video_embeddings([], tiny_model)

    def test_uncalibrated_model_rejected(self):
        fresh = PainViT(PROFILES["tiny"], seed=9)
        frame = np.zeros((3, 96, 96))
        with pytest.raises(StateError):
            extract_video_embeddings([frame], fresh)


class TestFnirsExtraction:
    def channels(self, rng, count):
        return [
            Series(np.sin(np.linspace(0, 8, 120) * rng.uniform(0.5, 2.0)), "fnirs-hbo")
            for _ in range(count)
        ]

    def test_channel_count_flows_through(self, smoke_model):
        rng = np.random.default_rng(10)
        out = extract_fnirs_embeddings(self.channels(rng, 22), smoke_model, ADDITION)
        assert out.count == 22
        assert out.modality == "fnirs"

    def test_single_channel_addition_is_that_embedding(self, smoke_model):
        rng = np.random.default_rng(11)
        out = extract_fnirs_embeddings(self.channels(rng, 1), smoke_model, ADDITION)
        assert np.array_equal(out.fused, out.items[0])

    def test_addition_matches_left_fold(self, smoke_model):
        rng = np.random.default_rng(12)
        out = extract_fnirs_embeddings(self.channels(rng, 5), smoke_model, ADDITION)
        fold = np.zeros_like(out.items[0])
        for item in out.items:
            fold = fold + item
        assert np.max(np.abs(out.fused - fold)) < 1e-12

    def test_all_channels_excluded_rejected(self, smoke_model):
        with pytest.raises(DataError):
            extract_fnirs_embeddings([], smoke_model)


class TestModalityFusion:
    def sets(self, dim=8, seed=13):
        rng = np.random.default_rng(seed)
        ev = EmbeddingSet([rng.normal(size=dim)], rng.normal(size=dim), "video", ADDITION)
        ec = EmbeddingSet([rng.normal(size=dim)], rng.normal(size=dim), "fnirs", ADDITION)
        return ev, ec

    def test_addition_identity(self):
        ev, ec = self.sets()
        ec.fused = np.zeros_like(ec.fused)
        assert np.array_equal(fuse_modalities_addition(ev, ec), ev.fused)

    def test_addition_commutes(self):
        ev, ec = self.sets()
        assert np.array_equal(
            fuse_modalities_addition(ev, ec), fuse_modalities_addition(ec, ev)
        )

    def test_addition_difference_recovers_operand(self):
        ev, ec = self.sets()
        fused = fuse_modalities_addition(ev, ec)
        assert np.max(np.abs((fused - ev.fused) - ec.fused)) < 1e-12

    def test_dim_mismatch_rejected(self):
        ev, ec = self.sets()
        ec.fused = np.zeros(5)
        with pytest.raises(DimensionError):
            fuse_modalities_addition(ev, ec)

    def test_single_diagram_resolution(self):
        ev, ec = self.sets(dim=500)
        img = fuse_modalities_single_diagram(ev, ec)
        assert img.pixels.shape == (3, RESOLUTION, RESOLUTION)

    def test_single_diagram_identical_vectors_coincide(self):
        ev, ec = self.sets(dim=64)
        ec.fused = ev.fused.copy()
        img = fuse_modalities_single_diagram(ev, ec)
        assert np.array_equal(img.pixels[0] == 0.0, img.pixels[2] == 0.0)

    def test_single_diagram_deterministic(self):
        ev, ec = self.sets(dim=100, seed=14)
        a = fuse_modalities_single_diagram(ev, ec).to_uint8().tobytes()
        b = fuse_modalities_single_diagram(ev, ec).to_uint8().tobytes()
        assert a == b

    def test_long_vectors_resampled_into_canvas(self):
        rng = np.random.default_rng(15)
        ev = EmbeddingSet([], rng.normal(size=15000), "video", CONCATENATION)
        ec = EmbeddingSet([], rng.normal(size=15000), "fnirs", CONCATENATION)
        img = fuse_modalities_single_diagram(ev, ec)
        assert img.pixels.shape == (3, RESOLUTION, RESOLUTION)


class TestAssess:
    def test_probabilities_sum_to_one(self, smoke_model):
        rng = np.random.default_rng(16)
        ev = EmbeddingSet([], rng.normal(size=50), "video", ADDITION)
        ec = EmbeddingSet([], rng.normal(size=50), "fnirs", ADDITION)
        probs = assess(fuse_modalities_single_diagram(ev, ec), smoke_model)
        assert probs.shape == (3,)
        assert abs(probs.sum() - 1.0) < 1e-12
        assert np.all(probs >= 0.0)

    def test_identical_inputs_identical_probabilities(self, smoke_model):
        rng = np.random.default_rng(17)
        image = np.clip(rng.normal(0.5, 0.2, size=(3, 224, 224)), 0, 1)
        a = assess(image, smoke_model)
        b = assess(image, smoke_model)
        assert np.array_equal(a, b)

    def test_head_only_mode_on_embedding_vector(self, smoke_model):
        vec = np.random.default_rng(18).normal(size=smoke_model.config.embedding_dim())
        probs = assess(vec, smoke_model)
        assert abs(probs.sum() - 1.0) < 1e-12

    def test_head_only_wrong_width_rejected(self, smoke_model):
        with pytest.raises(DimensionError):
            assess(np.zeros(7), smoke_model)

    def test_tie_breaks_toward_lowest_class(self, smoke_model):
        vec = np.zeros(smoke_model.config.embedding_dim())
        saved_w, saved_b = smoke_model.head_w.data.copy(), smoke_model.head_b.data.copy()
        try:
            smoke_model.head_w.data = np.zeros_like(saved_w)
            smoke_model.head_b.data = np.zeros_like(saved_b)
            probs = assess(vec, smoke_model)
            assert np.allclose(probs, 1.0 / 3.0, atol=1e-15)
            assert int(np.argmax(probs)) == 0
        finally:
            smoke_model.head_w.data = saved_w
            smoke_model.head_b.data = saved_b

    def test_uncalibrated_model_rejected(self):
        fresh = PainViT(PROFILES["smoke"], seed=19)
        with pytest.raises(StateError):
            assess(np.ones((3, 224, 224)), fresh)


class TestAssessTrainedModel:
    def test_trained_model_recognizes_its_class(self):
        # overfit a fresh model on a few class-coded images, then check that
        # a held-out first-class sample lands on class 0 with real margin
        from painvit.training import TrainConfig, train

        rng = np.random.default_rng(30)
        size = 224
        coords = np.linspace(0.0, 2.0 * np.pi, size)
        yy, xx = np.meshgrid(coords, coords, indexing="ij")

        def sample(label):
            fy, fx = [(4, 0), (0, 4), (3, 3)][label]
            pattern = 0.5 + 0.4 * np.sin(fy * yy + fx * xx + rng.uniform(0, 2 * np.pi))
            return np.stack([pattern] * 3) + rng.normal(scale=0.02, size=(3, size, size))

        images = np.stack([sample(c) for c in range(3) for _ in range(8)])
        labels = np.array([c for c in range(3) for _ in range(8)])
        model = PainViT(PROFILES["smoke"], seed=31)
        config = TrainConfig(
            lr=2e-3, epochs=10, warmup_epochs=1, cooldown_epochs=0, batch_size=8
        )
        train(model, images, labels, config, np.random.default_rng(32))

        probs = assess(sample(0), model)
        assert abs(probs.sum() - 1.0) < 1e-12
        assert int(np.argmax(probs)) == 0
        assert probs[0] > 1.0 / 3.0


class TestChannelAdaptation:
    def test_grayscale_replicates(self):
        img = np.random.default_rng(20).normal(size=(1, 224, 224))
        out = adapt_channels(img, 3)
        assert out.shape == (3, 224, 224)
        assert np.array_equal(out[0], out[2])

    def test_matching_passthrough(self):
        img = np.zeros((3, 8, 8))
        assert adapt_channels(img, 3) is img or np.array_equal(adapt_channels(img, 3), img)

    def test_impossible_adaptation_rejected(self):
        with pytest.raises(DimensionError):
            adapt_channels(np.zeros((3, 8, 8)), 1)


class TestEmbeddingDump:
    def test_roundtrip_exact(self, tmp_path):
        rng = np.random.default_rng(21)
        items = [rng.normal(size=6) for _ in range(3)]
        eset = EmbeddingSet(items, aggregate(items, ADDITION), "video", ADDITION)
        path = tmp_path / "embeddings.csv"
        write_embeddings(path, [("sample_0001", eset)])
        rows = read_embeddings(path)
        assert len(rows) == 4
        assert rows[0][:3] == ("sample_0001", "video", 0)
        assert np.array_equal(rows[0][3], items[0])
        fused_rows = [r for r in rows if r[2] == -1]
        assert len(fused_rows) == 1
        assert np.array_equal(fused_rows[0][3], eset.fused)
