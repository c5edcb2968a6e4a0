"""Counter-based random numbers (Philox4x32-10).

Every value is a pure function of ``(seed, stream, layer, row, column)``,
so any block of a random matrix can be regenerated independently of the
order in which blocks are requested. This is what lets projection matrices
be streamed in row chunks during the forward pass and regenerated for the
backward pass without ever being stored.

Layout of one Philox call:

* key     = (seed & 0xffffffff, seed >> 32)
* counter = (column_pair, row, layer, stream)
* output  = four 32-bit words, folded into two 53-bit uniforms in [0, 1)

Column ``2*j`` and ``2*j + 1`` of a row come from the counter with
``column_pair = j``. Gaussian draws use Box-Muller on that same pair.
"""

from __future__ import annotations

import numpy as np

PHILOX_M0 = np.uint64(0xD2511F53)
PHILOX_M1 = np.uint64(0xCD9E8D57)
PHILOX_W0 = 0x9E3779B9
PHILOX_W1 = 0xBB67AE85
_MASK32 = np.uint64(0xFFFFFFFF)
_ROUNDS = 10

# Stream tags keep unrelated consumers of one seed apart.
STREAM_PROJECTION = 0
STREAM_INIT = 1
STREAM_NOISE = 2
STREAM_PERMUTATION = 3
STREAM_HEAD = 4


def philox4x32(counter: np.ndarray, key: tuple[int, int]) -> np.ndarray:
    """Philox4x32 with 10 rounds.

    Args:
      counter: uint32-compatible array of shape (..., 4).
      key: two 32-bit key words.

    Returns:
      uint32 array with the same shape as ``counter``.
    """
    ctr = np.asarray(counter, dtype=np.uint64)
    if ctr.shape[-1] != 4:
        raise ValueError(f"counter must have trailing dimension 4, got {ctr.shape}")
    c0, c1, c2, c3 = (ctr[..., i] & _MASK32 for i in range(4))
    k0, k1 = int(key[0]) & 0xFFFFFFFF, int(key[1]) & 0xFFFFFFFF
    for _ in range(_ROUNDS):
        p0 = PHILOX_M0 * c0
        p1 = PHILOX_M1 * c2
        hi0, lo0 = p0 >> np.uint64(32), p0 & _MASK32
        hi1, lo1 = p1 >> np.uint64(32), p1 & _MASK32
        c0 = hi1 ^ c1 ^ np.uint64(k0)
        c1 = lo1
        c2 = hi0 ^ c3 ^ np.uint64(k1)
        c3 = lo0
        k0 = (k0 + PHILOX_W0) & 0xFFFFFFFF
        k1 = (k1 + PHILOX_W1) & 0xFFFFFFFF
    return np.stack([c0, c1, c2, c3], axis=-1).astype(np.uint32)


def seed_key(seed: int) -> tuple[int, int]:
    seed = int(seed)
    if not 0 <= seed < 2**64:
        raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
    return seed & 0xFFFFFFFF, seed >> 32


def _counters(rows: np.ndarray, n_pairs: int, layer: int, stream: int) -> np.ndarray:
    ctr = np.empty((rows.size, n_pairs, 4), dtype=np.uint64)
    ctr[..., 0] = np.arange(n_pairs, dtype=np.uint64)[None, :]
    ctr[..., 1] = rows.astype(np.uint64)[:, None]
    ctr[..., 2] = np.uint64(layer)
    ctr[..., 3] = np.uint64(stream)
    return ctr


def _uniform_pairs(seed: int, stream: int, layer: int, rows, n_cols: int) -> tuple[np.ndarray, np.ndarray]:
    rows = np.atleast_1d(np.asarray(rows, dtype=np.int64))
    if rows.size and (rows.min() < 0 or rows.max() >= 2**32):
        raise ValueError("row indices must lie in [0, 2**32)")
    if not 0 <= layer < 2**32 or not 0 <= stream < 2**32:
        raise ValueError("layer and stream must lie in [0, 2**32)")
    n_pairs = (n_cols + 1) // 2
    words = philox4x32(_counters(rows, n_pairs, layer, stream), seed_key(seed)).astype(np.uint64)
    scale = 1.0 / 9007199254740992.0  # 2**-53
    u_a = ((words[..., 0] >> np.uint64(5)) * np.uint64(67108864) + (words[..., 1] >> np.uint64(6))) * scale
    u_b = ((words[..., 2] >> np.uint64(5)) * np.uint64(67108864) + (words[..., 3] >> np.uint64(6))) * scale
    return u_a, u_b


def uniform_block(seed: int, stream: int, layer: int, rows, n_cols: int) -> np.ndarray:
    """Uniform [0, 1) values for the given rows and the first ``n_cols`` columns."""
    u_a, u_b = _uniform_pairs(seed, stream, layer, rows, n_cols)
    out = np.empty((u_a.shape[0], 2 * u_a.shape[1]), dtype=np.float64)
    out[:, 0::2] = u_a
    out[:, 1::2] = u_b
    return out[:, :n_cols]


def normal_block(seed: int, stream: int, layer: int, rows, n_cols: int) -> np.ndarray:
    """Standard normal values (Box-Muller over each column pair)."""
    u_a, u_b = _uniform_pairs(seed, stream, layer, rows, n_cols)
    radius = np.sqrt(-2.0 * np.log1p(-u_a))
    angle = 2.0 * np.pi * u_b
    out = np.empty((u_a.shape[0], 2 * u_a.shape[1]), dtype=np.float64)
    out[:, 0::2] = radius * np.cos(angle)
    out[:, 1::2] = radius * np.sin(angle)
    return out[:, :n_cols]


def permutation(seed: int, stream: int, layer: int, n: int) -> np.ndarray:
    """A seeded permutation of ``range(n)`` (argsort of counter-keyed uniforms)."""
    keys = uniform_block(seed, stream, layer, [0], n)[0]
    return np.argsort(keys, kind="stable")
