import numpy as np
import pytest

from dni.prng import Rng, splitmix64

MASK = (1 << 64) - 1


def _rotl(x, k):
    return ((x << k) | (x >> (64 - k))) & MASK


def reference_stream(seed, n):
    """Pure-Python xoshiro256** straight from the published recurrence."""
    s = seed & MASK
    state = []
    for _ in range(4):
        s = (s + 0x9E3779B97F4A7C15) & MASK
        z = s
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & MASK
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & MASK
        state.append(z ^ (z >> 31))
    out = []
    for _ in range(n):
        out.append((_rotl((state[1] * 5) & MASK, 7) * 9) & MASK)
        t = (state[1] << 17) & MASK
        state[2] ^= state[0]
        state[3] ^= state[1]
        state[1] ^= state[2]
        state[0] ^= state[3]
        state[2] ^= t
        state[3] = _rotl(state[3], 45)
    return out


def test_splitmix64_reference_value():
    # first output of splitmix64 seeded with 0
    assert splitmix64(0)[1] == 0xE220A8397B1DCDAF


@pytest.mark.parametrize("seed", [0, 1, 42, 2**63 + 5, -1])
def test_stream_matches_reference(seed):
    got = [int(v) for v in Rng(seed).next_u64(64)]
    assert got == reference_stream(seed, 64)


def test_frozen_values():
    assert [int(v) for v in Rng(0).next_u64(2)] == [0x99EC5F36CB75F2B4, 0xBF6E1F784956452A]


def test_chunking_does_not_change_stream():
    a = Rng(9)
    parts = np.concatenate([a.next_u64(3), a.next_u64(5), a.next_u64(1)])
    np.testing.assert_array_equal(parts, Rng(9).next_u64(9))


def test_uniform_range_and_randint():
    r = Rng(3)
    u = r.uniform(10000)
    assert u.min() >= 0.0 and u.max() < 1.0
    draws = [r.randint(7) for _ in range(2000)]
    assert set(draws) == set(range(7))


def test_normal_moments_and_determinism():
    z = Rng(11).normal(200001)
    assert z.shape == (200001,)
    assert abs(z.mean()) < 0.01
    assert abs(z.std() - 1.0) < 0.01
    np.testing.assert_array_equal(z[:1000], Rng(11).normal(1000))


def test_box_muller_recipe():
    u = Rng(5).uniform(2)
    z = Rng(5).normal(2)
    r = np.sqrt(-2.0 * np.log1p(-u[0]))
    np.testing.assert_allclose(z, [r * np.cos(2 * np.pi * u[1]), r * np.sin(2 * np.pi * u[1])], rtol=0, atol=0)
