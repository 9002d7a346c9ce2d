"""Accumulation, normalization, augmentation and event-file round trips."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from evseq.errors import ValidationError
from evseq.events import (
    AugSpec,
    Event,
    accumulate,
    augment,
    nearest_rank_percentile,
    normalize,
    read_event_file,
    sample_aug_spec,
    write_event_file,
)


def _counts_oracle(events, window, resolution):
    """Independent per-event counting loop."""
    h, w = resolution
    m_r = np.zeros((h, w), dtype=np.int64)
    m_b = np.zeros((h, w), dtype=np.int64)
    for e in events:
        if window[0] <= e.t < window[1]:
            if e.p == 1:
                m_r[e.y, e.x] += 1
            else:
                m_b[e.y, e.x] += 1
    return m_r, m_b


def test_accumulate_hand_case():
    events = [Event(0, 0, 10, 1), Event(0, 0, 20, 1), Event(1, 0, 30, -1)]
    rc = accumulate(events, (0, 100), (2, 2))
    assert rc.m_r[0, 0] == 2
    assert rc.m_b[0, 1] == 1
    assert rc.mask[0, 0] == 1 and rc.mask[0, 1] == 1
    assert rc.mask[1, 0] == 0 and rc.mask[1, 1] == 0
    assert rc.m_r.sum() == 2 and rc.m_b.sum() == 1


def test_accumulate_empty():
    rc = accumulate([], (0, 10), (4, 4))
    assert rc.m_r.sum() == 0 and rc.m_b.sum() == 0 and rc.mask.sum() == 0


def test_accumulate_matches_histogram_oracle():
    rng = np.random.default_rng(0)
    h, w = 6, 9
    events = [
        Event(
            int(rng.integers(0, w)),
            int(rng.integers(0, h)),
            int(rng.integers(0, 1000)),
            int(rng.choice([-1, 1])),
        )
        for _ in range(1000)
    ]
    window = (100, 900)
    rc = accumulate(events, window, (h, w))
    m_r, m_b = _counts_oracle(events, window, (h, w))
    np.testing.assert_array_equal(rc.m_r, m_r)
    np.testing.assert_array_equal(rc.m_b, m_b)
    np.testing.assert_array_equal(rc.mask, ((m_r + m_b) > 0).astype(np.uint8))


def test_accumulate_rejects_out_of_range_coordinates():
    with pytest.raises(ValidationError, match="coordinate"):
        accumulate([Event(5, 0, 1, 1)], (0, 10), (4, 4))
    with pytest.raises(ValidationError, match="coordinate"):
        accumulate([Event(0, 9, 1, 1)], (0, 10), (4, 4))


def test_accumulate_rejects_empty_window_and_bad_polarity():
    with pytest.raises(ValidationError, match="empty"):
        accumulate([], (5, 5), (2, 2))
    with pytest.raises(ValidationError, match="polarity"):
        accumulate([Event(0, 0, 1, 0)], (0, 10), (2, 2))


def test_window_end_is_exclusive():
    rc = accumulate([Event(0, 0, 10, 1)], (0, 10), (2, 2))
    assert rc.m_r.sum() == 0
    rc = accumulate([Event(0, 0, 10, 1)], (10, 20), (2, 2))
    assert rc.m_r.sum() == 1


def _raw(m_r, m_b):
    m_r = np.asarray(m_r, dtype=np.int64)
    m_b = np.asarray(m_b, dtype=np.int64)
    from evseq.events import RawCounts

    return RawCounts(
        m_r, m_b, ((m_r + m_b) > 0).astype(np.uint8), (0, 1)
    )


def test_normalize_hand_case_n100():
    rc = _raw([[0, 1], [2, 100]], [[0, 0], [0, 0]])
    pf = normalize(rc, n=100)
    np.testing.assert_allclose(pf.data[:, :, 0], [[0.0, 0.01], [0.02, 1.0]])
    np.testing.assert_array_equal(pf.data[:, :, 2], np.zeros((2, 2)))


def test_normalize_all_zero_guard():
    rc = _raw(np.zeros((3, 3)), np.zeros((3, 3)))
    pf = normalize(rc, n=99)
    assert np.isfinite(pf.data).all()
    np.testing.assert_array_equal(pf.data, np.zeros((3, 3, 3)))


def test_normalize_matches_sort_oracle_and_saturates():
    rng = np.random.default_rng(7)
    for _ in range(20):
        m_r = rng.integers(0, 50, size=(8, 8))
        m_b = rng.integers(0, 50, size=(8, 8))
        rc = _raw(m_r, m_b)
        pf = normalize(rc, n=99)
        pooled = np.sort(np.concatenate([m_r.ravel(), m_b.ravel()]))
        rank = int(np.ceil(99 * pooled.size / 100))
        alpha = float(pooled[rank - 1])
        assert nearest_rank_percentile(np.concatenate([m_r.ravel(), m_b.ravel()]), 99) == alpha
        assert (pf.data <= 1.0).all() and (pf.data >= 0.0).all()
        if alpha > 0:
            np.testing.assert_array_equal(
                pf.data[:, :, 0], np.minimum(m_r, alpha) / alpha
            )
            # Pixels above the percentile clip exactly to 1.
            assert (pf.data[:, :, 0][m_r > alpha] == 1.0).all()


def test_normalize_mask_channel_verbatim():
    rng = np.random.default_rng(3)
    m_r = rng.integers(0, 4, size=(5, 5))
    m_b = rng.integers(0, 4, size=(5, 5))
    rc = _raw(m_r, m_b)
    pf = normalize(rc, n=95)
    np.testing.assert_array_equal(pf.data[:, :, 1], rc.mask.astype(np.float64))


def test_normalize_rejects_bad_percentile():
    rc = _raw(np.ones((2, 2)), np.ones((2, 2)))
    for n in (0, -5, 101):
        with pytest.raises(ValidationError):
            normalize(rc, n=n)


events_strategy = st.lists(
    st.tuples(
        st.integers(0, 5),
        st.integers(0, 5),
        st.integers(0, 99),
        st.sampled_from([-1, 1]),
    ),
    min_size=0,
    max_size=60,
)


@settings(max_examples=40, deadline=None)
@given(events_strategy, st.randoms(use_true_random=False))
def test_accumulation_order_independent(raw, pyrandom):
    events = [Event(*e) for e in raw]
    shuffled = list(events)
    pyrandom.shuffle(shuffled)
    a = accumulate(events, (0, 100), (6, 6))
    b = accumulate(shuffled, (0, 100), (6, 6))
    np.testing.assert_array_equal(a.m_r, b.m_r)
    np.testing.assert_array_equal(a.m_b, b.m_b)
    np.testing.assert_array_equal(a.mask, b.mask)


@settings(max_examples=40, deadline=None)
@given(events_strategy, st.integers(1, 99))
def test_window_split_is_additive(raw, split):
    events = [Event(*e) for e in raw]
    full = accumulate(events, (0, 100), (6, 6))
    left = accumulate(events, (0, split), (6, 6))
    right = accumulate(events, (split, 100), (6, 6))
    merged = left + right
    np.testing.assert_array_equal(full.m_r, merged.m_r)
    np.testing.assert_array_equal(full.m_b, merged.m_b)
    np.testing.assert_array_equal(full.mask, merged.mask)


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 7))
def test_normalize_scale_invariant_at_n100(k):
    rng = np.random.default_rng(k)
    m_r = rng.integers(0, 9, size=(4, 4))
    m_b = rng.integers(0, 9, size=(4, 4))
    a = normalize(_raw(m_r, m_b), n=100)
    b = normalize(_raw(m_r * k, m_b * k), n=100)
    np.testing.assert_allclose(a.data, b.data, atol=1e-15)


def _random_frame(seed, h=8, w=8):
    rng = np.random.default_rng(seed)
    data = rng.uniform(0, 1, size=(h, w, 3))
    data[:, :, 1] = (data[:, :, 1] > 0.5).astype(np.float64)
    from evseq.events import PseudoFrame

    return PseudoFrame(data=data, percentile=99)


def test_polarity_swap_involution():
    pf = _random_frame(0)
    spec = AugSpec(polarity_swap=True)
    out = augment(augment(pf, spec), spec)
    np.testing.assert_array_equal(out.data, pf.data)


def test_hflip_involution():
    pf = _random_frame(1)
    spec = AugSpec(hflip=True)
    out = augment(augment(pf, spec), spec)
    np.testing.assert_array_equal(out.data, pf.data)


def test_identity_crop():
    pf = _random_frame(2)
    spec = AugSpec(crop=(0, 0, 8, 8, (8, 8)))
    out = augment(pf, spec)
    np.testing.assert_array_equal(out.data, pf.data)


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 1000))
def test_swap_commutes_with_hflip(seed):
    pf = _random_frame(seed)
    a = augment(augment(pf, AugSpec(polarity_swap=True)), AugSpec(hflip=True))
    b = augment(augment(pf, AugSpec(hflip=True)), AugSpec(polarity_swap=True))
    np.testing.assert_array_equal(a.data, b.data)


def test_crop_resize_range_and_mask_binary():
    pf = _random_frame(4, 12, 10)
    spec = AugSpec(crop=(2, 1, 7, 8, (12, 10)), upscale=2.0)
    out = augment(pf, spec, rng_seed=9)
    assert (out.data >= 0.0).all() and (out.data <= 1.0).all()
    assert np.isin(out.data[:, :, 1], (0.0, 1.0)).all()
    assert out.data.shape == pf.data.shape


def test_augspec_validation():
    pf = _random_frame(5)
    with pytest.raises(ValidationError, match="crop"):
        augment(pf, AugSpec(crop=(4, 4, 8, 8, (8, 8))))
    with pytest.raises(ValidationError, match="upscale"):
        augment(pf, AugSpec(upscale=0.5))


def test_sample_aug_spec_valid_and_deterministic():
    r1 = np.random.default_rng(42)
    r2 = np.random.default_rng(42)
    for _ in range(50):
        s1 = sample_aug_spec(r1, 16, 16)
        s2 = sample_aug_spec(r2, 16, 16)
        assert s1 == s2
        s1.validate(16, 16)


def test_event_file_round_trip(tmp_path):
    rng = np.random.default_rng(1)
    events = [
        Event(
            int(rng.integers(0, 10)),
            int(rng.integers(0, 8)),
            int(rng.integers(-100, 10**15)),
            int(rng.choice([-1, 1])),
        )
        for _ in range(257)
    ]
    path = tmp_path / "stream.evt"
    write_event_file(path, events, width=10, height=8)
    back, w, h = read_event_file(path)
    assert (w, h) == (10, 8)
    assert back == events
    assert path.stat().st_size == 16 + 16 * len(events)


def test_event_file_validation(tmp_path):
    path = tmp_path / "bad.evt"
    path.write_bytes(b"NOPE" + b"\x00" * 12)
    with pytest.raises(ValidationError, match="magic"):
        read_event_file(path)
    path.write_bytes(b"EVT1")
    with pytest.raises(ValidationError, match="truncated"):
        read_event_file(path)
    with pytest.raises(ValidationError, match="coordinate"):
        write_event_file(path, [Event(12, 0, 0, 1)], width=10, height=8)
    # Count/payload mismatch.
    write_event_file(path, [Event(1, 1, 5, 1)], width=4, height=4)
    data = path.read_bytes()
    path.write_bytes(data + b"\x00" * 8)
    with pytest.raises(ValidationError, match="length"):
        read_event_file(path)
