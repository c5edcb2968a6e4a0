import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from slash import rng as crng

# Published Philox4x32-10 known-answer vectors (Random123 distribution).
KNOWN_ANSWERS = [
    ((0, 0, 0, 0), (0, 0), (0x6627E8D5, 0xE169C58D, 0xBC57AC4C, 0x9B00DBD8)),
    ((0xFFFFFFFF,) * 4, (0xFFFFFFFF, 0xFFFFFFFF), (0x408F276D, 0x41C83B0E, 0xA20BC7C6, 0x6D5451FD)),
    ((0x243F6A88, 0x85A308D3, 0x13198A2E, 0x03707344), (0xA4093822, 0x299F31D0),
     (0xD16CFE09, 0x94FDCCEB, 0x5001E420, 0x24126EA1)),
    # Cross-checked against an independent Philox implementation (randomgen, width 32).
    ((5, 7, 9, 11), (0x1234, 0x5678), (0x0A8F1866, 0xE6CBB8E3, 0x1F1A2B61, 0xF781B767)),
]


@pytest.mark.parametrize("counter,key,expected", KNOWN_ANSWERS)
def test_known_answers(counter, key, expected):
    out = crng.philox4x32(np.array(counter, dtype=np.uint64), key)
    assert tuple(int(x) for x in out) == expected


def test_vectorised_matches_scalar_calls():
    counters = np.array([c for c, _, _ in KNOWN_ANSWERS[:1]] * 3 + [(1, 2, 3, 4)], dtype=np.uint64)
    batch = crng.philox4x32(counters, (0, 0))
    for row, ctr in zip(batch, counters):
        np.testing.assert_array_equal(row, crng.philox4x32(ctr, (0, 0)))


def test_counter_shape_checked():
    with pytest.raises(ValueError):
        crng.philox4x32(np.zeros(3), (0, 0))


def test_seed_key_split_and_range():
    assert crng.seed_key(0x0123456789ABCDEF) == (0x89ABCDEF, 0x01234567)
    with pytest.raises(ValueError):
        crng.seed_key(-1)
    with pytest.raises(ValueError):
        crng.seed_key(2**64)


def _scalar_uniforms(seed, stream, layer, row, pair):
    words = [int(w) for w in crng.philox4x32(np.array([pair, row, layer, stream], dtype=np.uint64),
                                               crng.seed_key(seed))]
    u_a = ((words[0] >> 5) * 2**26 + (words[1] >> 6)) / 2**53
    u_b = ((words[2] >> 5) * 2**26 + (words[3] >> 6)) / 2**53
    return u_a, u_b


def test_uniform_folding_matches_scalar_oracle():
    block = crng.uniform_block(99, 2, 3, [4, 10], 5)
    for i, row in enumerate([4, 10]):
        for col in range(5):
            u_a, u_b = _scalar_uniforms(99, 2, 3, row, col // 2)
            assert block[i, col] == (u_a if col % 2 == 0 else u_b)


def test_normal_box_muller_matches_scalar_oracle():
    block = crng.normal_block(7, 0, 1, [0, 3], 4)
    for i, row in enumerate([0, 3]):
        for pair in range(2):
            u_a, u_b = _scalar_uniforms(7, 0, 1, row, pair)
            r = math.sqrt(-2.0 * math.log1p(-u_a))
            assert block[i, 2 * pair] == pytest.approx(r * math.cos(2 * math.pi * u_b), rel=1e-14, abs=1e-15)
            assert block[i, 2 * pair + 1] == pytest.approx(r * math.sin(2 * math.pi * u_b), rel=1e-14, abs=1e-15)


@settings(max_examples=40, deadline=None)
@given(seed=st.integers(0, 2**64 - 1), layer=st.integers(0, 50), start=st.integers(0, 60), n=st.integers(1, 20),
       cols=st.integers(1, 33))
def test_any_row_block_equals_slice_of_full_block(seed, layer, start, n, cols):
    full = crng.normal_block(seed, 0, layer, np.arange(start + n), cols)
    part = crng.normal_block(seed, 0, layer, np.arange(start, start + n), cols)
    np.testing.assert_array_equal(part, full[start:])


def test_odd_column_count_is_prefix_of_even():
    np.testing.assert_array_equal(crng.uniform_block(1, 0, 0, [2], 7), crng.uniform_block(1, 0, 0, [2], 8)[:, :7])


def test_streams_layers_and_seeds_are_distinct():
    base = crng.uniform_block(5, 0, 0, [0], 16)
    for args in [(6, 0, 0), (5, 1, 0), (5, 0, 1)]:
        assert not np.array_equal(base, crng.uniform_block(*args, [0], 16))


def test_uniform_range_and_moments():
    u = crng.uniform_block(3, 0, 0, np.arange(500), 1000).ravel()
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 3 * math.sqrt(1 / 12 / u.size)
    assert abs(u.var() - 1 / 12) < 0.002


def test_normal_moments():
    x = crng.normal_block(4, 0, 0, np.arange(500), 1000).ravel()
    assert abs(x.mean()) < 3 / math.sqrt(x.size)
    assert abs(x.var() - 1.0) < 0.01
    assert np.isfinite(x).all()


def test_permutation_is_a_permutation_and_seeded():
    p = crng.permutation(11, crng.STREAM_PERMUTATION, 0, 257)
    assert sorted(p.tolist()) == list(range(257))
    np.testing.assert_array_equal(p, crng.permutation(11, crng.STREAM_PERMUTATION, 0, 257))
    assert not np.array_equal(p, crng.permutation(12, crng.STREAM_PERMUTATION, 0, 257))


def test_row_and_layer_ranges_checked():
    with pytest.raises(ValueError):
        crng.uniform_block(0, 0, 0, [-1], 2)
    with pytest.raises(ValueError):
        crng.uniform_block(0, 0, 2**32, [0], 2)
