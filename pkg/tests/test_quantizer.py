"""Nearest-neighbour selection and residual-cascade tests."""

import numpy as np
import pytest

from rrvq import (
    BigCodebook,
    Codebook,
    InvalidArgumentError,
    ParseError,
    QuantizerStack,
    QuantizerStage,
    build_stack,
    dequantize,
    make_projection,
    nearest_neighbour,
    quantize_frame,
    quantize_sequence,
    read_tokens,
    write_tokens,
)
from rrvq.quantizer import _nn_batch

from oracles import exhaustive_nearest, naive_quantize_sequence, random_stack


def exact_cover_stack():
    """Two singleton trainable stages whose codewords sum to (1, 1)."""
    stages = [
        QuantizerStage(kind="trainable", codebook=Codebook(np.array([[1.0, 0.0]]))),
        QuantizerStage(kind="trainable", codebook=Codebook(np.array([[0.0, 1.0]]))),
    ]
    return QuantizerStack(dim=2, stages=stages)


class TestNearestNeighbour:
    def test_basic_selection(self):
        cb = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        idx, code, dist = nearest_neighbour(np.array([0.9, 0.1]), cb)
        assert idx == 1
        np.testing.assert_allclose(code, [1.0, 0.0])
        assert abs(dist - 0.02) < 1e-12

    def test_exact_match_has_zero_distance(self):
        cb = np.array([[2.0, -1.0], [0.5, 0.5]])
        idx, code, dist = nearest_neighbour(np.array([0.5, 0.5]), cb)
        assert idx == 1
        assert dist == 0.0

    def test_ties_break_to_lowest_index(self):
        cb = np.array([[0.0, 0.0], [1.0, 0.0], [0.0, 1.0]])
        idx, _, dist = nearest_neighbour(np.array([0.5, 0.5]), cb)
        assert idx == 0
        assert abs(dist - 0.5) < 1e-12

    def test_normalize_selects_by_direction_but_returns_original(self):
        cb = np.array([[10.0, 0.0], [0.1, 0.1]])
        x = np.array([1.0, 0.0])
        raw_idx, _, _ = nearest_neighbour(x, cb, normalize=False)
        assert raw_idx == 1
        idx, code, dist = nearest_neighbour(x, cb, normalize=True)
        assert idx == 0
        np.testing.assert_allclose(code, [10.0, 0.0])
        assert dist < 1e-12  # distance is measured between unit vectors

    def test_empty_codebook_rejected(self):
        with pytest.raises(InvalidArgumentError):
            nearest_neighbour(np.array([1.0]), np.empty((0, 1)))

    def test_dimension_mismatch_rejected(self):
        with pytest.raises(InvalidArgumentError):
            nearest_neighbour(np.array([1.0, 2.0]), np.array([[1.0]]))

    def test_matches_exhaustive_scan(self):
        """Property check against a literal scan over random codebooks."""
        rng = np.random.default_rng(7)
        for _ in range(200):
            n = int(rng.integers(1, 513))
            d = int(rng.integers(1, 65))
            cb = rng.standard_normal((n, d))
            x = rng.standard_normal(d)
            idx, _, dist = nearest_neighbour(x, cb)
            ref_idx, ref_dist = exhaustive_nearest(x, cb)
            assert idx == ref_idx
            assert abs(dist - ref_dist) < 1e-9

    def test_batched_kernel_matches_row_calls_bitwise(self):
        rng = np.random.default_rng(3)
        for _ in range(100):
            t = int(rng.integers(1, 40))
            n = int(rng.integers(1, 80))
            d = int(rng.integers(1, 20))
            pts = rng.standard_normal((t, d))
            cws = rng.standard_normal((n, d))
            bi, bd = _nn_batch(pts, cws)
            for i in range(t):
                si, sd = _nn_batch(pts[i : i + 1], cws)
                assert si[0] == bi[i]
                assert sd[0] == bd[i]


class TestQuantizeFrame:
    def test_exact_cover(self):
        fq = quantize_frame(np.array([1.0, 1.0]), exact_cover_stack())
        assert [t.index for t in fq.tokens] == [0, 0]
        np.testing.assert_allclose(fq.codewords, [[1.0, 0.0], [0.0, 1.0]])
        np.testing.assert_allclose(fq.reconstruction, [1.0, 1.0])
        np.testing.assert_allclose(fq.residuals[-1], [0.0, 0.0])

    def test_full_sample_degenerates_to_plain_vq(self):
        """With s equal to the big size, a random stage is exhaustive search."""
        big = BigCodebook.gaussian(4, 3, seed=5)
        stack = QuantizerStack(
            dim=3,
            stages=[QuantizerStage(kind="random", sample_size=4)],
            big=big,
            master_seed=8,
        )
        rng = np.random.default_rng(2)
        for _ in range(20):
            x = rng.standard_normal(3)
            fq = quantize_frame(x, stack, rng=stack.frame_rng(0))
            ref_idx, _ = exhaustive_nearest(x, big.codewords)
            assert fq.tokens[0].big_index == ref_idx

    def test_residuals_match_step_by_step_oracle(self):
        """Per-stage residual chain against an independent naive replay."""
        stack = build_stack(8, 1, 64, 1, 512, 64, master_seed=31)
        frames = np.random.default_rng(0).standard_normal((40, 8))
        tokens, big_tokens, recon, final_res = naive_quantize_sequence(frames, stack)
        for i in range(frames.shape[0]):
            fq = quantize_frame(frames[i], stack, rng=stack.frame_rng(i))
            assert [t.index for t in fq.tokens] == tokens[i].tolist()
            np.testing.assert_array_equal(fq.residuals[-1], final_res[i])
        # residual energy never grows when stage codebooks track the data
        result = quantize_sequence(frames, stack)
        assert np.all(np.diff(result.stage_energies) <= 1e-12)

    def test_rejects_bad_frames(self):
        stack = exact_cover_stack()
        with pytest.raises(InvalidArgumentError):
            quantize_frame(np.array([1.0]), stack)
        with pytest.raises(InvalidArgumentError):
            quantize_frame(np.array([np.nan, 0.0]), stack)


class TestQuantizeSequence:
    def test_fixed_per_run_draw_is_cached(self):
        stack = build_stack(4, 0, None, 2, 32, 8, master_seed=5, resample_mode="fixed-per-run")
        frames = np.random.default_rng(1).standard_normal((30, 4))
        a = quantize_sequence(frames, stack)
        b = quantize_sequence(frames, stack)
        assert np.array_equal(a.tokens, b.tokens)
        assert np.array_equal(a.big_tokens, b.big_tokens)

    def test_per_frame_runs_reproduce(self):
        frames = np.random.default_rng(2).standard_normal((25, 4))
        results = []
        for _ in range(2):
            stack = build_stack(4, 1, 8, 2, 32, 8, master_seed=77)
            results.append(quantize_sequence(frames, stack))
        assert np.array_equal(results[0].tokens, results[1].tokens)
        assert np.array_equal(results[0].big_tokens, results[1].big_tokens)

    def test_per_batch_advances_between_calls(self):
        stack = build_stack(4, 0, None, 1, 64, 8, master_seed=3, resample_mode="per-batch")
        frames = np.random.default_rng(3).standard_normal((40, 4))
        a = quantize_sequence(frames, stack)
        b = quantize_sequence(frames, stack)
        assert not np.array_equal(a.big_tokens, b.big_tokens)

    def test_per_frame_explores_more_than_per_batch(self):
        """Per-frame redraws spread usage over far more of the big codebook."""
        from rrvq import usage_histogram

        frames = np.random.default_rng(4).standard_normal((4000, 4))
        per_frame = build_stack(4, 0, None, 1, 256, 32, master_seed=11, resample_mode="per-frame")
        per_batch = build_stack(4, 0, None, 1, 256, 32, master_seed=11, resample_mode="per-batch")
        pp_frame = usage_histogram(quantize_sequence(frames, per_frame), 0, 256).perplexity
        pp_batch = usage_histogram(quantize_sequence(frames, per_batch), 0, 256).perplexity
        assert pp_batch <= 32.0
        assert pp_frame > pp_batch

    def test_quantize_frame_matches_first_sequence_row(self):
        stack = build_stack(4, 1, 8, 1, 32, 8, master_seed=13)
        frames = np.random.default_rng(5).standard_normal((6, 4))
        result = quantize_sequence(frames, stack)
        fq = quantize_frame(frames[0], stack, rng=stack.frame_rng(0))
        assert [t.index for t in fq.tokens] == result.tokens[0].tolist()

    def test_dimension_mismatch_rejected(self):
        stack = exact_cover_stack()
        with pytest.raises(InvalidArgumentError):
            quantize_sequence(np.zeros((3, 5)), stack)

    def test_empty_stack_passes_input_through(self):
        stack = QuantizerStack(dim=3, stages=[])
        frames = np.random.default_rng(6).standard_normal((4, 3))
        result = quantize_sequence(frames, stack)
        assert result.tokens.shape == (4, 0)
        np.testing.assert_allclose(result.reconstructions, 0.0)
        np.testing.assert_allclose(
            result.stage_energies[0], np.mean(np.sum(frames**2, axis=1))
        )


class TestAlgorithmParity:
    """The batched implementation must equal the naive cascade exactly."""

    @pytest.mark.parametrize("mode", ["per-frame", "per-batch", "fixed-per-run"])
    def test_tokens_match_naive_loop(self, mode):
        rng = np.random.default_rng(hash(mode) % (2**32))
        for _ in range(12):
            stack = random_stack(rng, mode)
            frames = rng.standard_normal((int(rng.integers(1, 12)), stack.dim))
            expected_tokens, expected_big, expected_recon, _ = naive_quantize_sequence(
                frames, stack
            )
            result = quantize_sequence(frames, stack)
            assert np.array_equal(result.tokens, expected_tokens)
            assert np.array_equal(result.big_tokens, expected_big)
            np.testing.assert_allclose(result.reconstructions, expected_recon, atol=1e-12)

    def test_prefix_stability(self):
        """Extending a stack with more random stages never changes earlier tokens."""
        rng = np.random.default_rng(42)
        frames = rng.standard_normal((15, 5))
        short = build_stack(5, 1, 8, 1, 64, 8, master_seed=21)
        long = build_stack(5, 1, 8, 3, 64, 8, master_seed=21)
        a = quantize_sequence(frames, short)
        b = quantize_sequence(frames, long)
        assert np.array_equal(a.tokens, b.tokens[:, :2])
        assert np.array_equal(a.big_tokens, b.big_tokens[:, :1])

    def test_truncated_stack_shares_prefix_tokens(self):
        stack = build_stack(4, 2, 8, 2, 32, 8, master_seed=9)
        frames = np.random.default_rng(8).standard_normal((10, 4))
        full = quantize_sequence(frames, stack)
        part = quantize_sequence(frames, stack.truncated(3))
        assert np.array_equal(full.tokens[:, :3], part.tokens)


class TestTelescoping:
    def test_reconstruction_plus_final_residual_recovers_input(self):
        rng = np.random.default_rng(10)
        for _ in range(20):
            stack = random_stack(rng, "per-frame")
            x = rng.standard_normal(stack.dim) * float(rng.uniform(0.1, 10))
            fq = quantize_frame(x, stack, rng=stack.frame_rng(0))
            recovered = fq.reconstruction + fq.residuals[-1]
            np.testing.assert_allclose(recovered, x, rtol=1e-6, atol=1e-9)
            np.testing.assert_allclose(dequantize(fq), fq.reconstruction)

    def test_dequantize_exact_cover(self):
        fq = quantize_frame(np.array([1.0, 1.0]), exact_cover_stack())
        np.testing.assert_allclose(dequantize(fq), [1.0, 1.0])

    def test_dequantize_empty_stack_gives_zero(self):
        fq = quantize_frame(np.array([2.0, 3.0, 4.0]), QuantizerStack(dim=3, stages=[]))
        np.testing.assert_allclose(dequantize(fq), [0.0, 0.0, 0.0])


class TestMonotoneDistortion:
    def test_random_tail_reduces_expected_distortion(self):
        """Four random stages beat no stages at high confidence."""
        frames = np.random.default_rng(12).standard_normal((10_000, 8))
        with_tail = build_stack(8, 0, None, 4, 512, 64, master_seed=1, d_proj=2)
        result = quantize_sequence(frames, with_tail)
        errors = np.sum((frames - result.reconstructions) ** 2, axis=1)
        baseline = np.sum(frames**2, axis=1)
        diff = baseline - errors
        t_stat = diff.mean() / (diff.std(ddof=1) / np.sqrt(diff.size))
        assert t_stat > 2.33  # one-sided 99%


class TestStackValidation:
    def test_random_before_trainable_rejected(self):
        cb = Codebook(np.array([[0.0, 0.0]]))
        big = BigCodebook.gaussian(8, 2, seed=0)
        stages = [
            QuantizerStage(kind="random", sample_size=2),
            QuantizerStage(kind="trainable", codebook=cb),
        ]
        with pytest.raises(InvalidArgumentError):
            QuantizerStack(dim=2, stages=stages, big=big)

    def test_disjoint_capacity_enforced(self):
        big = BigCodebook.gaussian(8, 2, seed=0)
        stages = [QuantizerStage(kind="random", sample_size=5) for _ in range(2)]
        with pytest.raises(InvalidArgumentError):
            QuantizerStack(dim=2, stages=stages, big=big, disjoint=True)
        QuantizerStack(dim=2, stages=stages, big=big, disjoint=False)

    def test_codebook_dimension_checked(self):
        cb = Codebook(np.array([[0.0, 0.0, 0.0]]))
        with pytest.raises(InvalidArgumentError):
            QuantizerStack(dim=2, stages=[QuantizerStage(kind="trainable", codebook=cb)])

    def test_projected_stage_checks_projected_dim(self):
        pair = make_projection(4, 2, seed=0)
        cb = Codebook(np.array([[0.0, 0.0]]))
        QuantizerStack(
            dim=4,
            stages=[QuantizerStage(kind="trainable", codebook=cb, projection=pair)],
        )
        bad = Codebook(np.array([[0.0, 0.0, 0.0, 0.0]]))
        with pytest.raises(InvalidArgumentError):
            QuantizerStack(
                dim=4,
                stages=[QuantizerStage(kind="trainable", codebook=bad, projection=pair)],
            )

    def test_random_stage_needs_big(self):
        with pytest.raises(InvalidArgumentError):
            QuantizerStack(dim=2, stages=[QuantizerStage(kind="random", sample_size=2)])


class TestTokenFiles:
    def test_round_trip(self, tmp_path):
        stack = build_stack(4, 1, 8, 2, 32, 8, master_seed=19)
        frames = np.random.default_rng(14).standard_normal((12, 4))
        result = quantize_sequence(frames, stack)
        path = tmp_path / "tokens.bin"
        write_tokens(path, result)
        loaded = read_tokens(path)
        assert np.array_equal(loaded["tokens"], result.tokens)
        assert loaded["sample_sizes"] == (0, 8, 8)
        assert loaded["master_seed"] == 19
        assert loaded["resample_mode"] == "per-frame"

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bin"
        path.write_bytes(b"WRONG!!\x00" + b"\x00" * 40)
        with pytest.raises(ParseError):
            read_tokens(path)

    def test_truncated(self, tmp_path):
        stack = build_stack(4, 1, 8, 0, None, None, master_seed=19)
        frames = np.random.default_rng(15).standard_normal((5, 4))
        path = tmp_path / "tokens.bin"
        write_tokens(path, quantize_sequence(frames, stack))
        path.write_bytes(path.read_bytes()[:-3])
        with pytest.raises(ParseError):
            read_tokens(path)
