"""Vectorised Philox4x32-10 counter-based generator.

numpy's bit generators are stream objects; drawing one independent value
per (seed, channel, x, y) element needs a stateless keyed function instead,
so that output never depends on evaluation order or thread count.
"""

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK = np.uint64(0xFFFFFFFF)
_SHIFT = np.uint64(32)


def philox4x32(counter, key, rounds=10):
    """Philox4x32 block function.

    counter : (..., 4) array of uint32 words
    key     : (..., 2) array of uint32 words, broadcast against counter
    Returns (..., 4) uint32.
    """
    ctr = np.asarray(counter, dtype=np.uint64) & _MASK
    k = np.asarray(key, dtype=np.uint64) & _MASK
    c0, c1, c2, c3 = (ctr[..., i] for i in range(4))
    k0, k1 = np.broadcast_arrays(k[..., 0], k[..., 1])
    for _ in range(rounds):
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = ((p1 >> _SHIFT) ^ c1 ^ k0, p1 & _MASK,
                          (p0 >> _SHIFT) ^ c3 ^ k1, p0 & _MASK)
        k0 = (k0 + _W0) & _MASK
        k1 = (k1 + _W1) & _MASK
    return np.stack([c0, c1, c2, c3], axis=-1).astype(np.uint32)


def seed_key(seed: int):
    seed = int(seed) & 0xFFFFFFFFFFFFFFFF
    return np.array([seed & 0xFFFFFFFF, seed >> 32], dtype=np.uint64)


def uniform_grid(seed: int, shape, stream: int = 0):
    """One uniform [0, 1) double per element of an (n_ch, n_x, n_y) grid.

    Element (ch, x, y) uses counter (x, y, ch, stream) under the seed key, so
    any element can be regenerated in isolation.
    """
    ch, x, y = np.indices(shape, dtype=np.uint64)
    ctr = np.stack([x, y, ch, np.full(shape, stream, dtype=np.uint64)], axis=-1)
    out = philox4x32(ctr, seed_key(seed)).astype(np.uint64)
    bits = ((out[..., 0] << _SHIFT) | out[..., 1]) >> np.uint64(11)
    return bits.astype(np.float64) * (1.0 / (1 << 53))
