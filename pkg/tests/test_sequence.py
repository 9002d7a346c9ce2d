"""Token composition, interleaving, dense AR targets and the aggregator."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evseq import autodiff as ad
from evseq.errors import ValidationError
from evseq.sequence import (
    MODALITY_EVENT,
    MODALITY_IMAGE,
    EncodingTables,
    TokenSequence,
    aggregate_tokens,
    compose_graph,
    compose_tokens,
    deinterleave,
    dense_targets,
    interleave,
    read_token_sequence,
    write_token_sequence,
)


def _seq(seed, k=6, d=4):
    rng = np.random.default_rng(seed)
    return TokenSequence(
        tokens=rng.normal(size=(k, d)),
        modalities=rng.integers(0, 2, size=k),
    )


def test_compose_zero_tables_is_identity():
    seq = _seq(0)
    enc = EncodingTables(positional=np.zeros((8, 4)), modality=np.zeros((2, 4)))
    np.testing.assert_array_equal(compose_tokens(seq, enc), seq.tokens)


def test_compose_zero_tokens_gives_table_rows():
    seq = TokenSequence(tokens=np.zeros((3, 4)), modalities=[0, 1, 0])
    enc = EncodingTables.init(8, 4, seed=1)
    out = compose_tokens(seq, enc)
    expected = enc.positional[:3] + enc.modality[[0, 1, 0]]
    np.testing.assert_array_equal(out, expected)


def test_compose_matches_elementwise_oracle():
    seq = _seq(2, k=5, d=3)
    enc = EncodingTables.init(9, 3, seed=3)
    out = compose_tokens(seq, enc)
    for k in range(5):
        for j in range(3):
            expected = (
                seq.tokens[k, j]
                + enc.positional[seq.positions[k], j]
                + enc.modality[seq.modalities[k], j]
            )
            assert out[k, j] == expected


def test_compose_capacity_error():
    seq = _seq(4, k=10, d=4)
    enc = EncodingTables.init(8, 4, seed=0)
    with pytest.raises(ValidationError, match="capacity"):
        compose_tokens(seq, enc)


def test_compose_graph_agrees_with_compose_tokens():
    seq = _seq(5, k=7, d=4)
    enc = EncodingTables.init(12, 4, seed=6)
    out = compose_graph(
        seq.tokens, seq.positions, seq.modalities, enc.positional, enc.modality
    )
    np.testing.assert_array_equal(out.data, compose_tokens(seq, enc))


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000), st.floats(-3, 3))
def test_compose_is_linear_in_tokens(seed, a):
    seq = _seq(seed)
    enc = EncodingTables.init(8, 4, seed=seed + 1)
    scaled = TokenSequence(tokens=a * seq.tokens, modalities=seq.modalities)
    zero = TokenSequence(tokens=0.0 * seq.tokens, modalities=seq.modalities)
    lhs = compose_tokens(scaled, enc) - compose_tokens(zero, enc)
    np.testing.assert_allclose(lhs, a * seq.tokens, atol=1e-12)


def test_interleave_single_step():
    ev = np.array([[1.0, 2.0]])
    im = np.array([[3.0, 4.0]])
    seq = interleave(ev, im)
    np.testing.assert_array_equal(seq.tokens, [[1.0, 2.0], [3.0, 4.0]])
    assert list(seq.modalities) == [MODALITY_EVENT, MODALITY_IMAGE]


def test_interleave_pattern_t3():
    rng = np.random.default_rng(0)
    seq = interleave(rng.normal(size=(3, 4)), rng.normal(size=(3, 4)))
    assert list(seq.modalities) == [0, 1, 0, 1, 0, 1]


def test_interleave_round_trip():
    rng = np.random.default_rng(1)
    ev, im = rng.normal(size=(5, 3)), rng.normal(size=(5, 3))
    seq = interleave(ev, im)
    ev2, im2 = deinterleave(seq)
    np.testing.assert_array_equal(ev, ev2)
    np.testing.assert_array_equal(im, im2)


def test_interleave_preserves_multiset():
    rng = np.random.default_rng(2)
    ev, im = rng.normal(size=(4, 3)), rng.normal(size=(4, 3))
    seq = interleave(ev, im, event_first=False)
    combined = np.vstack([ev, im])
    got = np.array(sorted(map(tuple, seq.tokens)))
    want = np.array(sorted(map(tuple, combined)))
    np.testing.assert_array_equal(got, want)


def test_interleave_length_mismatch():
    with pytest.raises(ValidationError, match="paired"):
        interleave(np.zeros((3, 2)), np.zeros((4, 2)))


def test_dense_targets_basic():
    seq = _seq(3, k=3)
    win = dense_targets(seq, 0, 2)
    np.testing.assert_array_equal(win.inputs, seq.tokens[0:2])
    np.testing.assert_array_equal(win.targets, seq.tokens[1:3])
    win1 = dense_targets(seq, 1, 1)
    np.testing.assert_array_equal(win1.inputs, seq.tokens[1:2])
    np.testing.assert_array_equal(win1.targets, seq.tokens[2:3])


def test_dense_targets_random_starts_in_range():
    seq = _seq(6, k=20)
    rng = np.random.default_rng(0)
    w = 5
    for _ in range(100):
        s = int(rng.integers(0, len(seq) - w))
        win = dense_targets(seq, s, w)
        assert win.inputs.shape == (w, seq.dim)
        np.testing.assert_array_equal(win.targets[:-1], win.inputs[1:])


def test_dense_targets_range_errors():
    seq = _seq(7, k=5)
    with pytest.raises(ValidationError):
        dense_targets(seq, 0, 5)  # needs s + w + 1 <= K
    with pytest.raises(ValidationError):
        dense_targets(seq, -1, 2)
    with pytest.raises(ValidationError):
        dense_targets(seq, 3, 0)


def test_dense_targets_interior_pair_coverage():
    # Every adjacent pair in the interior appears in exactly w windows.
    k, w = 9, 3
    seq = _seq(8, k=k)
    counts = np.zeros(k - 1, dtype=int)
    for s in range(0, k - w):
        win = dense_targets(seq, s, w)
        for j in range(w):
            counts[s + j] += 1
    interior = counts[w - 1 : k - w]
    assert (interior == w).all()


def test_aggregate_degenerate_keeps_both_copies():
    grid = np.random.default_rng(0).normal(size=(3, 4, 5))
    seq = aggregate_tokens(grid, 1, 1)
    assert len(seq) == 2 * 3 * 4


def test_aggregate_4x4_means_match_loop_oracle():
    grid = np.random.default_rng(1).normal(size=(4, 4, 2))
    seq = aggregate_tokens(grid, 4, 4)
    assert len(seq) == 8
    for qi in range(4):
        np.testing.assert_allclose(
            seq.tokens[qi], grid[:, qi].mean(axis=0), atol=1e-12
        )
    for ti in range(4):
        np.testing.assert_allclose(
            seq.tokens[4 + ti], grid[ti].mean(axis=0), atol=1e-12
        )


def test_aggregate_reduces_token_count():
    grid = np.random.default_rng(2).normal(size=(4, 6, 3))
    baseline = len(aggregate_tokens(grid, 1, 1))
    for ft, fs in [(2, 1), (1, 2), (4, 3), (2, 6)]:
        assert len(aggregate_tokens(grid, ft, fs)) < baseline


def test_aggregate_shape_errors():
    grid = np.zeros((4, 6, 3))
    with pytest.raises(ValidationError, match="divide"):
        aggregate_tokens(grid, 3, 1)
    with pytest.raises(ValidationError, match="divide"):
        aggregate_tokens(grid, 1, 4)


def test_token_sequence_validation():
    with pytest.raises(ValidationError, match="modalities"):
        TokenSequence(tokens=np.zeros((2, 3)), modalities=[0, 2])
    with pytest.raises(ValidationError, match="positions"):
        TokenSequence(
            tokens=np.zeros((2, 3)), modalities=[0, 1], positions=[1, 2]
        )
    with pytest.raises(ValidationError, match="length"):
        TokenSequence(tokens=np.zeros((2, 3)), modalities=[0, 1, 0])


def test_sequence_serialization_round_trip(tmp_path):
    seq = _seq(9, k=11, d=6)
    path = tmp_path / "seq.bin"
    write_token_sequence(path, seq, max_len=32)
    back, max_len = read_token_sequence(path)
    assert max_len == 32
    np.testing.assert_array_equal(back.tokens, seq.tokens)
    np.testing.assert_array_equal(back.modalities, seq.modalities)
    assert path.stat().st_size == 12 + 11 * 6 * 8 + 11


def test_sequence_serialization_validation(tmp_path):
    path = tmp_path / "seq.bin"
    seq = _seq(10, k=4, d=2)
    write_token_sequence(path, seq)
    raw = path.read_bytes()
    path.write_bytes(raw[:-1])
    with pytest.raises(ValidationError, match="bytes"):
        read_token_sequence(path)
    with pytest.raises(ValidationError, match="max_len"):
        write_token_sequence(path, seq, max_len=2)


def test_compose_graph_trains_tables():
    # Gradients flow into both tables through gather.
    seq = _seq(11, k=4, d=3)
    enc = EncodingTables.init(6, 3, seed=0)

    def f(pos, mod):
        composed = compose_graph(seq.tokens, seq.positions, seq.modalities, pos, mod)
        return ad.sum_(ad.mul(composed, composed))

    report = ad.grad_check(f, [enc.positional, enc.modality], rel_tol=1e-4)
    assert report.passed, report
