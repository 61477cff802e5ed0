import math

import numpy as np
import pytest
from hypothesis import given, strategies as st

from ietagc.agc import (NEVER_SKIP, MemoryBank, SkipRecord, apply_mask, ratio, read_skip_csv,
                        skip_mask, update_bank, write_skip_csv)
from ietagc.errors import ConfigError, ShapeError

losses_st = st.floats(0, 50, allow_nan=False)


def bank_with(values, gamma=0.8):
    return MemoryBank(np.asarray(values, dtype=float), gamma)


def test_ratio_identity():
    assert ratio(0.5, bank_with([0.5, 1.0]), 1) == 1.0


def test_ratio_fresh_bank_is_sentinel():
    b = MemoryBank.zeros(4)
    assert ratio(0.3, b, 2) == NEVER_SKIP
    assert not skip_mask([0.0, 1e-300], [1, 4], b, 1e9).any()


def test_ratio_hand_value():
    assert ratio(0.2, bank_with([0.5]), 1) == pytest.approx(0.4, abs=1e-16)


def test_ratio_vectorized():
    b = bank_with([1.0, 2.0, 0.0])
    np.testing.assert_array_equal(ratio([0.5, 1.0, 3.0], b, [1, 2, 3]), [0.5, 0.5, math.inf])


def test_mask_lambda_zero_never_skips():
    masked, recs = apply_mask([(0, 1, 0.0), (1, 2, 0.7)], bank_with([1.0, 1.0]), 0.0)
    assert recs == []
    np.testing.assert_array_equal(masked, [0.0, 0.7])


def test_mask_strict_inequality():
    b = bank_with([1.0])
    entries = [(10, 1, 0.4), (11, 1, 0.5), (12, 1, 0.6)]
    masked, recs = apply_mask(entries, b, 0.5, epoch=7)
    np.testing.assert_array_equal(masked, [0.0, 0.5, 0.6])
    assert recs == [SkipRecord(10, 1, 0.4, 0.4, 7)]


def test_mask_losses_at_bank_level_kept():
    b = bank_with([0.3, 0.9])
    entries = [(i, 1 + i % 2, b.l[i % 2]) for i in range(6)]
    for lam in (0.1, 0.5, 1.0):
        _, recs = apply_mask(entries, b, lam)
        assert recs == []


def test_mask_leaves_bank_untouched():
    b = bank_with([0.5, 0.5])
    before = b.copy()
    apply_mask([(0, 1, 0.1), (1, 2, 0.9)], b, 0.5)
    assert b == before


def test_mask_negative_lambda_rejected():
    with pytest.raises(ConfigError):
        apply_mask([(0, 1, 0.1)], bank_with([1.0]), -0.1)


def test_update_from_zero():
    b = MemoryBank.zeros(3)
    update_bank(b, 2, 1.0)
    assert b.l[1] == pytest.approx(0.2, abs=1e-16)
    assert b.update_count.tolist() == [0, 1, 0]


def test_update_fixed_point():
    b = bank_with([0.37])
    update_bank(b, 1, 0.37)
    assert b.l[0] == 0.37


def test_update_geometric_convergence():
    c, g = 1.7, 0.8
    b = MemoryBank.zeros(1, g)
    for k in range(1, 60):
        update_bank(b, 1, c)
        assert abs(abs(b.l[0] - c) - c * g**k) < 1e-12


def test_bank_validation():
    with pytest.raises(ConfigError):
        MemoryBank(np.zeros(2), gamma=1.0)
    with pytest.raises(ShapeError):
        MemoryBank(np.zeros(2), 0.8, np.zeros(3))


@given(st.lists(st.tuples(st.integers(1, 5), losses_st), max_size=40),
       st.floats(0.01, 0.99))
def test_bank_matches_unrolled_recursion(updates, gamma):
    b = MemoryBank.zeros(5, gamma)
    for t, loss in updates:
        update_bank(b, t, loss)
    for t in range(1, 6):
        seq = [loss for tt, loss in updates if tt == t]
        k = len(seq)
        # closed form: sum_j (1 - gamma) gamma^(k - 1 - j) loss_j
        expected = sum((1 - gamma) * gamma ** (k - 1 - j) * v for j, v in enumerate(seq))
        assert abs(b.l[t - 1] - expected) <= 1e-12 * max(1.0, expected)
        assert b.update_count[t - 1] == k
    assert np.all(b.l >= 0) and np.all(np.isfinite(b.l))


def test_bank_many_random_sequences():
    rng = np.random.default_rng(0)
    for _ in range(10_000):
        k = int(rng.integers(1, 8))
        gamma = float(rng.uniform(0.05, 0.95))
        seq = rng.exponential(size=k)
        b = MemoryBank.zeros(1, gamma)
        update_bank(b, np.ones(k, dtype=int), seq)
        expected = 0.0
        for v in seq:
            expected = gamma * expected + (1 - gamma) * v
        assert abs(b.l[0] - expected) < 1e-12


@given(st.lists(st.tuples(st.integers(1, 4), losses_st), min_size=1, max_size=20),
       st.lists(st.floats(0, 3), min_size=4, max_size=4), st.floats(0, 2))
def test_mask_idempotent(raw, bank_l, lam):
    b = bank_with(bank_l)
    entries = [(i, t, loss) for i, (t, loss) in enumerate(raw)]
    m1, r1 = apply_mask(entries, b, lam)
    m2, r2 = apply_mask(entries, b, lam)
    np.testing.assert_array_equal(m1, m2)
    assert r1 == r2
    # re-masking already-masked losses skips nothing new that was kept
    m3, _ = apply_mask([(i, t, v) for (i, t, _), v in zip(entries, m1)], b, lam)
    np.testing.assert_array_equal(m3, m1)


@given(st.lists(st.tuples(st.integers(1, 4), losses_st), min_size=2, max_size=20),
       st.lists(st.floats(0, 3), min_size=4, max_size=4), st.floats(0, 2), st.randoms())
def test_ratios_independent_of_batch_order(raw, bank_l, lam, rnd):
    b = bank_with(bank_l)
    entries = [(i, t, loss) for i, (t, loss) in enumerate(raw)]
    perm = list(range(len(entries)))
    rnd.shuffle(perm)
    m1, r1 = apply_mask(entries, b, lam)
    m2, r2 = apply_mask([entries[i] for i in perm], b, lam)
    np.testing.assert_array_equal(m1[perm], m2)
    assert sorted(r1, key=lambda r: r.sample_id) == sorted(r2, key=lambda r: r.sample_id)


@given(st.lists(st.tuples(st.integers(1, 3), losses_st), max_size=30))
def test_zero_bank_entries_never_skip(raw):
    b = MemoryBank.zeros(3)
    for t, loss in raw:
        assert not skip_mask([loss], [t], b, 1e6).any() or b.l[t - 1] > 0
        update_bank(b, t, loss)


def test_skip_csv_roundtrip(tmp_path):
    recs = [SkipRecord(3, 17, 0.1234567890123, 0.25, 2), SkipRecord(9, 1, 1e-9, 0.0, 5)]
    path = tmp_path / "skips.csv"
    write_skip_csv(path, recs[:1])
    write_skip_csv(path, recs[1:], append=True)
    assert read_skip_csv(path) == recs
    assert path.read_text().splitlines()[0] == "sample_id,epoch,t,loss,ratio"
