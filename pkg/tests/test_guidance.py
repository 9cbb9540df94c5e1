"""Guidance extraction, scoring, and the cumulative (long-tail) profile."""

import numpy as np
import pytest

from vidspec.errors import DegenerateScoresError, GuidanceError
from vidspec.guidance import (
    CumulativeProfile,
    GuidanceMatrix,
    GuidanceScores,
    cumulative_profile,
    descending_order,
    extract_guidance,
    read_scores_csv,
    score_tokens,
    write_profile_csv,
    write_scores_csv,
)
from vidspec.model import AttentionCapture, ModelConfig, init_model
from vidspec.sequence import MultimodalSequence, VideoLayout


def capture_from_blocks(blocks, n_video, n_total):
    """Build a synthetic capture whose language-row/video-column block is given
    per (layer, head); remaining mass goes on the diagonal."""
    n_layers, n_heads = len(blocks), len(blocks[0])
    probs = np.zeros((n_layers, n_heads, n_total, n_total), dtype=np.float32)
    for l in range(n_layers):
        for h in range(n_heads):
            block = np.asarray(blocks[l][h], dtype=np.float64)
            probs[l, h, n_video:, :n_video] = block
            for i in range(n_total):
                probs[l, h, i, i] = 1.0 - probs[l, h, i, :].sum()
    return AttentionCapture(probs)


def video_seq(layout, n_language, d=8, seed=0):
    rng = np.random.default_rng(seed)
    return MultimodalSequence.full(
        layout, rng.normal(size=(layout.total, d)), rng.integers(0, 50, n_language)
    )


class TestExtractGuidance:
    def test_single_layer_head_is_raw_submatrix(self):
        layout = VideoLayout(1, 1, 2)
        seq = video_seq(layout, 1)
        block = [[0.25, 0.5]]
        cap = capture_from_blocks([[block]], n_video=2, n_total=3)
        g = extract_guidance(cap, seq)
        np.testing.assert_allclose(g.values, block, atol=1e-7)

    def test_two_layer_mean(self):
        layout = VideoLayout(1, 1, 2)
        seq = video_seq(layout, 1)
        cap = capture_from_blocks(
            [[[[0.2, 0.8]]], [[[0.4, 0.6]]]], n_video=2, n_total=3
        )
        g = extract_guidance(cap, seq)
        np.testing.assert_allclose(g.values, [[0.3, 0.7]], atol=1e-7)

    def test_no_language_rows_rejected(self):
        layout = VideoLayout(1, 1, 2)
        seq = MultimodalSequence.full(layout, np.zeros((2, 4)), np.zeros(0, dtype=int))
        cap = AttentionCapture(np.zeros((1, 1, 2, 2), dtype=np.float32))
        with pytest.raises(GuidanceError):
            extract_guidance(cap, seq)

    def test_length_mismatch_rejected(self):
        layout = VideoLayout(1, 1, 2)
        seq = video_seq(layout, 2)
        cap = AttentionCapture(np.zeros((1, 1, 3, 3), dtype=np.float32))
        with pytest.raises(GuidanceError):
            extract_guidance(cap, seq)

    def test_real_prefill_rows_bounded(self):
        config = ModelConfig(n_layers=2, n_heads=2, d_model=32, vocab_size=64, seed=3)
        model = init_model(config)
        layout = VideoLayout(2, 2, 2)
        seq = video_seq(layout, 5, d=32)
        cap = model.prefill(seq, capture=True).capture
        g = extract_guidance(cap, seq)
        assert g.values.shape == (5, 8)
        assert np.all(g.values >= 0) and np.all(g.values <= 1)
        assert np.all(g.values.sum(axis=1) <= 1.0 + 1e-6)


class TestScoreTokens:
    def test_column_means_hand_case(self):
        g = GuidanceMatrix(np.array([[0.1, 0.9], [0.3, 0.7]]))
        np.testing.assert_allclose(score_tokens(g).values, [0.2, 0.8], atol=1e-12)

    def test_single_row_passthrough(self):
        g = GuidanceMatrix(np.array([[0.4, 0.1, 0.2]]))
        np.testing.assert_allclose(score_tokens(g).values, [0.4, 0.1, 0.2])

    def test_symmetric_rows(self):
        g = GuidanceMatrix(np.full((3, 4), 0.2))
        np.testing.assert_allclose(score_tokens(g).values, [0.2] * 4)

    def test_matches_double_loop_oracle(self):
        rng = np.random.default_rng(8)
        vals = rng.uniform(size=(7, 13))
        fast = score_tokens(GuidanceMatrix(vals)).values
        slow = np.array(
            [sum(vals[i][j] for i in range(7)) / 7 for j in range(13)]
        )
        np.testing.assert_allclose(fast, slow, atol=1e-12)

    def test_permutation_equivariance(self):
        rng = np.random.default_rng(9)
        vals = rng.uniform(size=(5, 11))
        perm = rng.permutation(11)
        a = score_tokens(GuidanceMatrix(vals)).values
        b = score_tokens(GuidanceMatrix(vals[:, perm])).values
        np.testing.assert_array_equal(a[perm], b)

    def test_scale_covariance_preserves_order(self):
        rng = np.random.default_rng(10)
        vals = rng.uniform(size=(4, 9))
        a = score_tokens(GuidanceMatrix(vals)).values
        b = score_tokens(GuidanceMatrix(3.5 * vals)).values
        np.testing.assert_allclose(b, 3.5 * a, rtol=1e-12)
        np.testing.assert_array_equal(descending_order(a), descending_order(b))


class TestCumulativeProfile:
    def test_hand_case(self):
        profile = cumulative_profile(GuidanceScores(np.array([0.5, 0.3, 0.2])))
        np.testing.assert_allclose(profile.token_fraction, [0, 1 / 3, 2 / 3, 1.0])
        np.testing.assert_allclose(profile.attention_fraction, [0, 0.5, 0.8, 1.0])

    def test_uniform_scores_diagonal(self):
        profile = cumulative_profile(GuidanceScores(np.full(8, 0.1)))
        np.testing.assert_allclose(
            profile.attention_fraction, profile.token_fraction, atol=1e-12
        )

    def test_one_hot_jumps_to_one(self):
        scores = np.zeros(6)
        scores[2] = 0.7
        profile = cumulative_profile(GuidanceScores(scores))
        assert profile.attention_fraction[1] == 1.0

    def test_all_zero_rejected(self):
        with pytest.raises(DegenerateScoresError):
            cumulative_profile(GuidanceScores(np.zeros(4)))

    def test_structure_on_random_vectors(self):
        rng = np.random.default_rng(4)
        for _ in range(50):
            n = int(rng.integers(1, 200))
            profile = cumulative_profile(GuidanceScores(rng.uniform(size=n)))
            assert profile.attention_fraction[0] == 0.0
            assert profile.attention_fraction[-1] == 1.0
            assert profile.token_fraction[0] == 0.0 and profile.token_fraction[-1] == 1.0
            assert np.all(np.diff(profile.attention_fraction) >= -1e-15)
            if n > 1:
                assert np.all(np.diff(profile.attention_fraction, 2) <= 1e-12)


class TestCsv:
    def test_scores_roundtrip(self, tmp_path):
        layout = VideoLayout(2, 2, 3)
        rng = np.random.default_rng(5)
        scores = GuidanceScores(rng.uniform(size=layout.total))
        path = tmp_path / "scores.csv"
        write_scores_csv(scores, layout, path)
        back, back_layout = read_scores_csv(path)
        assert back_layout == layout
        np.testing.assert_array_equal(back.values, scores.values)

    def test_profile_csv_columns(self, tmp_path):
        profile = cumulative_profile(GuidanceScores(np.array([0.6, 0.4])))
        path = tmp_path / "profile.csv"
        write_profile_csv(profile, path)
        lines = path.read_text().strip().splitlines()
        assert lines[0] == "fraction_tokens,fraction_attention"
        assert len(lines) == 4
