import itertools
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra import numpy as hnp

from marq.features import FeatureMatrix
from marq.quantizers import (Codebook, FsqConfig, QuantizerBank, QuantizerError, QuantizerHead, TargetTensor,
                             build_bank, build_codebook, codebook_stats, fsq_codes, fsq_decode, fsq_index,
                             fsq_quantize, fsq_tokenize, project, tokenize, tokenize_multi)


def brute_force_labels(x, cb, normalize_input=True):
    """Nearest codeword by an explicit per-frame scan; ``None`` where the
    two best distances are within 1e-6 of each other."""
    out = []
    for row in x:
        if normalize_input:
            n = math.sqrt(sum(v * v for v in row))
            row = row / n if n > 1e-12 else row
        z = row @ cb.projection
        z = z / np.linalg.norm(z)
        d = np.array([np.sqrt(np.sum((z - c) ** 2)) for c in cb.codewords])
        order = np.argsort(d, kind="stable")
        if len(order) > 1 and d[order[1]] - d[order[0]] < 1e-6:
            out.append(None)
        else:
            out.append(int(order[0]))
    return out


# -- codebooks ---------------------------------------------------------------


def test_codebook_same_seed_bit_identical():
    a, b = build_codebook(11, 64, 16, 512), build_codebook(11, 64, 16, 512)
    assert a.projection.tobytes() == b.projection.tobytes()
    assert a.codewords.tobytes() == b.codewords.tobytes()


def test_codebook_different_seeds_differ_everywhere():
    a, b = build_codebook(1, 64, 16, 256), build_codebook(2, 64, 16, 256)
    # continuous draws from independent streams collide with probability zero
    assert np.mean(a.projection != b.projection) >= 0.99


def test_codeword_norms_and_frozen():
    cb = build_codebook(3, 10, 16, 8192)
    np.testing.assert_allclose(np.linalg.norm(cb.codewords, axis=1), 1.0, atol=1e-6)
    assert np.all(np.abs(cb.codewords) <= 1.0)
    with pytest.raises(ValueError):
        cb.projection[0, 0] = 1.0
    with pytest.raises(ValueError):
        cb.codewords[0, 0] = 1.0


def test_codebook_bytes_regenerate():
    cb = build_codebook(2**63 + 5, 12, 16, 100)
    raw = cb.to_bytes()
    assert len(raw) == 40
    back = Codebook.from_bytes(raw)
    assert back.projection.tobytes() == cb.projection.tobytes()
    assert back.codewords.tobytes() == cb.codewords.tobytes()


def test_codebook_errors():
    with pytest.raises(QuantizerError):
        build_codebook(0, 0, 16, 8)
    with pytest.raises(QuantizerError):
        build_codebook(0, 4, 16, 0)
    build_codebook(0, 4, 16, 8)  # proj_dims > num_codewords is fine


# -- tokenize ----------------------------------------------------------------


def test_tokenize_matches_brute_force():
    rng = np.random.default_rng(0)
    cb = build_codebook(7, 20, 16, 300)
    x = rng.normal(size=(200, 20))
    fast = tokenize(x, cb)
    slow = brute_force_labels(x, cb)
    kept = [i for i, s in enumerate(slow) if s is not None]
    assert len(kept) > 190
    assert [int(fast[i]) for i in kept] == [slow[i] for i in kept]


def test_tokenize_frame_on_codeword():
    cb = build_codebook(5, 16, 16, 64)
    # square projection is invertible, so pick inputs that project onto codewords
    x = np.linalg.solve(cb.projection.T, cb.codewords[[3, 17, 40]].T).T
    np.testing.assert_array_equal(tokenize(x, cb, normalize_input=False), [3, 17, 40])


def test_tokenize_tie_breaks_to_lowest_index():
    cb = build_codebook(1, 4, 4, 8)
    duplicated = np.vstack([cb.codewords[5], cb.codewords[5], cb.codewords[2:]])[:8]
    dup = Codebook(cb.seed, 4, 4, 8, cb.projection, duplicated)
    x = np.linalg.solve(cb.projection.T, duplicated[1])[None, :]
    assert tokenize(x, dup, normalize_input=False)[0] == 0


def test_tokenize_dimension_mismatch():
    with pytest.raises(QuantizerError):
        tokenize(np.zeros((3, 5)), build_codebook(0, 4, 16, 8))


@settings(max_examples=40, deadline=None)
@given(hnp.arrays(np.float64, (6, 12), elements=st.floats(-10, 10)),
       hnp.arrays(np.float64, (6,), elements=st.floats(0.01, 100)))
def test_tokenize_scale_invariant(x, scales):
    x = x + 0.5  # keep rows away from the zero vector
    cb = build_codebook(9, 12, 16, 128)
    a = tokenize(x, cb)
    b = tokenize(x * scales[:, None], cb)
    # distance margin filter: skip rows where rounding could flip a near-tie
    z = project(x, cb)
    z /= np.linalg.norm(z, axis=1, keepdims=True)
    d = np.sort(np.linalg.norm(z[:, None, :] - cb.codewords[None], axis=2), axis=1)
    clear = d[:, 1] - d[:, 0] > 1e-6
    np.testing.assert_array_equal(a[clear], b[clear])


def test_tokenize_scale_by_five_exact():
    rng = np.random.default_rng(2)
    x = rng.normal(size=(50, 30))
    cb = build_codebook(4, 30, 16, 512)
    np.testing.assert_array_equal(tokenize(x, cb), tokenize(5.0 * x, cb))


# -- FSQ ---------------------------------------------------------------------


def test_fsq_zero_vector():
    code, index = fsq_quantize(np.zeros(5), FsqConfig())
    np.testing.assert_array_equal(code, 0)
    assert index == 3 * sum(7**i for i in range(5)) == 8403


def test_fsq_saturation_and_half_point():
    cfg = FsqConfig()
    code, _ = fsq_quantize(np.array([1e6, -1e6, 0.5, 0.0, 0.0]), cfg)
    assert code[0] == 3 and code[1] == -3
    assert 3 * math.tanh(0.5) == pytest.approx(1.386, abs=1e-3)
    assert code[2] == 1


def test_fsq_rounds_half_away_from_zero():
    cfg = FsqConfig()
    z = np.arctanh(np.array([0.5, -0.5, 1.5, -1.5, 2.5]) / 3)
    # arctanh may land a hair under the half point; nudge outward
    z = z + np.sign(z) * 1e-12
    code, _ = fsq_quantize(z, cfg)
    np.testing.assert_array_equal(code, [1, -1, 2, -2, 3])


def test_fsq_vocab_size():
    assert FsqConfig(5, 6).vocab_size == 7**5 == 16807
    assert FsqConfig(5, 7).vocab_size == 7**5
    assert FsqConfig(3, 8).vocab_size == 9**3


def test_fsq_lattice_bijection_exhaustive():
    cfg = FsqConfig()
    lattice = np.array(list(itertools.product(range(-3, 4), repeat=5)))[:, ::-1]
    idx = fsq_index(lattice, cfg)
    assert sorted(idx.tolist()) == list(range(16807))
    np.testing.assert_array_equal(fsq_decode(idx, cfg), lattice)


def test_fsq_decode_out_of_range():
    with pytest.raises(QuantizerError):
        fsq_decode([16807], FsqConfig())


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, (5,), elements=st.floats(-50, 50)))
def test_fsq_odd_symmetry(z):
    cfg = FsqConfig()
    np.testing.assert_array_equal(fsq_quantize(-z, cfg)[0], -fsq_quantize(z, cfg)[0])


@settings(max_examples=100, deadline=None)
@given(hnp.arrays(np.float64, (5,), elements=st.floats(-50, 50)), st.integers(2, 9))
def test_fsq_codes_bounded(z, levels):
    cfg = FsqConfig(5, levels)
    code, index = fsq_quantize(z, cfg)
    assert np.all(np.abs(code) <= levels // 2)
    assert 0 <= index < cfg.vocab_size
    np.testing.assert_array_equal(fsq_decode(index, cfg), code)


def test_fsq_tokenize_constant_and_scale():
    cfg = FsqConfig()
    cb = build_codebook(3, 8, 5, 1)
    row = np.random.default_rng(0).normal(size=8)
    labels = fsq_tokenize(np.tile(row, (10, 1)), cb, cfg)
    assert len(set(labels.tolist())) == 1
    x = np.random.default_rng(1).normal(size=(40, 8))
    np.testing.assert_array_equal(fsq_tokenize(x, cb, cfg), fsq_tokenize(x * 3.0, cb, cfg))
    with pytest.raises(QuantizerError):
        fsq_tokenize(x, build_codebook(3, 8, 16, 1), cfg)


def test_fsq_precondition():
    with pytest.raises(QuantizerError):
        fsq_quantize(np.array([np.nan, 0, 0, 0, 0]), FsqConfig())
    with pytest.raises(QuantizerError):
        fsq_codes(np.zeros(4), FsqConfig())


# -- banks and multi-feature targets -------------------------------------------


def feat(name, rate, data):
    return FeatureMatrix(name, rate, data)


def test_single_head_bank_equals_tokenize():
    rng = np.random.default_rng(0)
    mel = feat("mel", 15.625, rng.normal(size=(40, 64)))
    bank = build_bank(["mel"], {"mel": 64}, [1], 15.625, num_codewords=256)
    out = tokenize_multi({"mel": mel}, bank)
    np.testing.assert_array_equal(out.labels[:, 0], tokenize(mel, bank.heads[0].codebook))


def test_four_heads_on_one_feature_differ():
    rng = np.random.default_rng(1)
    mel = feat("mel", 15.625, rng.normal(size=(200, 64)))
    bank = build_bank(["mel"] * 4, {"mel": 64}, [10, 11, 12, 13], 15.625, num_codewords=1024)
    out = tokenize_multi({"mel": mel}, bank)
    assert out.labels.shape == (200, 4)
    for a, b in itertools.combinations(range(4), 2):
        # independent codebooks of 1024 agree on a frame with probability ~1/1024
        assert np.mean(out.labels[:, a] == out.labels[:, b]) < 0.1


def test_multi_feature_bank_alignment():
    rng = np.random.default_rng(2)
    feats = {
        "mel": feat("mel", 15.625, rng.normal(size=(63, 64))),
        "cqt": feat("cqt", 31.25, rng.normal(size=(125, 84))),
        "audio": feat("audio", 25, rng.normal(size=(100, 640))),
    }
    bank = build_bank(["mel", "cqt", "audio"], {"mel": 64, "cqt": 84, "audio": 640}, [1, 2, 3], 18.75,
                      num_codewords=8192)
    out = tokenize_multi(feats, bank)
    assert out.head_vocab_sizes == [8192] * 3
    assert out.head_names == ["mel", "cqt", "audio"]
    assert out.frames == 75
    from marq.features import resample_frames
    np.testing.assert_array_equal(out.labels[:, 1], tokenize(resample_frames(feats["cqt"], 18.75).data[:75],
                                                             bank.heads[1].codebook))


def test_multi_feature_errors():
    bank = build_bank(["mel", "cqt"], {"mel": 4, "cqt": 4}, [1, 2], 10, num_codewords=8)
    with pytest.raises(QuantizerError, match="missing"):
        tokenize_multi({"mel": feat("mel", 10, np.ones((5, 4)))}, bank)
    with pytest.raises(QuantizerError, match="diverge"):
        tokenize_multi({"mel": feat("mel", 10, np.ones((5, 4))), "cqt": feat("cqt", 10, np.ones((9, 4)))}, bank)
    with pytest.raises(QuantizerError):
        QuantizerBank([QuantizerHead("mel", build_codebook(1, 4, 16, 8))] * 2, 10)


def test_fsq_bank_vocab():
    bank = build_bank(["mel"] * 4, {"mel": 64}, [1, 2, 3, 4], 25, fsq=FsqConfig())
    assert bank.vocab_sizes == [16807] * 4


def test_target_tensor_range_checked():
    with pytest.raises(QuantizerError):
        TargetTensor(np.array([[4]]), [4])
    with pytest.raises(QuantizerError):
        TargetTensor(np.array([[-1]]), [4])


# -- usage statistics --------------------------------------------------------


def test_stats_constant_labels():
    (s,) = codebook_stats(TargetTensor(np.zeros((50, 1), dtype=int), [64]))
    assert s.usage_fraction == 1 / 64
    assert s.perplexity == pytest.approx(1.0)


def test_stats_uniform_cover():
    (s,) = codebook_stats(TargetTensor(np.repeat(np.arange(32), 3)[:, None], [32]))
    assert s.usage_fraction == 1.0
    assert s.perplexity == pytest.approx(32.0)


@settings(max_examples=60, deadline=None)
@given(st.integers(1, 200), st.integers(1, 300), st.integers(0, 2**32 - 1))
def test_usage_bounded_by_frames(frames, vocab, seed):
    labels = np.random.default_rng(seed).integers(0, vocab, size=(frames, 1))
    (s,) = codebook_stats(TargetTensor(labels, [vocab]))
    assert s.usage_fraction <= min(1.0, frames / vocab)
    assert 1.0 - 1e-9 <= s.perplexity <= min(frames, vocab) + 1e-9
    assert s.histogram.sum() == frames
