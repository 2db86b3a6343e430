"""256-bit binary descriptor helpers (rows of 32 uint8)."""

import numpy as np

NBITS = 256


def as_words(D):
    """View ``(N, 32)`` uint8 descriptors as ``(N, 4)`` uint64."""
    D = np.ascontiguousarray(D, dtype=np.uint8).reshape(-1, 32)
    return D.view(np.uint64)


def hamming(a, b) -> int:
    return int(np.bitwise_count(as_words(a) ^ as_words(b)).sum())


def hamming_matrix(A, B):
    """All-pairs Hamming distances, shape ``(len(A), len(B))``."""
    wa, wb = as_words(A), as_words(B)
    out = np.zeros((len(wa), len(wb)), dtype=np.int32)
    for k in range(4):
        out += np.bitwise_count(wa[:, k, None] ^ wb[None, :, k]).astype(np.int32)
    return out


def hamming_rows(A, B):
    """Row-wise distances between equally shaped descriptor arrays."""
    return np.bitwise_count(as_words(A) ^ as_words(B)).sum(axis=1).astype(np.int32)


def flip_bits(D, counts, rng):
    """Flip ``counts[i]`` distinct random bits in row ``i`` (copy)."""
    D = np.array(D, dtype=np.uint8).reshape(-1, 32)
    bits = np.unpackbits(D, axis=1)
    counts = np.broadcast_to(np.asarray(counts, dtype=int), (len(D),))
    for i, c in enumerate(counts):
        if c > 0:
            idx = rng.choice(NBITS, size=min(int(c), NBITS), replace=False)
            bits[i, idx] ^= 1
    return np.packbits(bits, axis=1)


def flip_bits_fast(D, counts, rng):
    """Like :func:`flip_bits` but vectorised; rows with repeated picks are redrawn."""
    D = np.array(D, dtype=np.uint8).reshape(-1, 32)
    counts = np.broadcast_to(np.asarray(counts, dtype=int), (len(D),))
    rows = np.nonzero(counts > 0)[0]
    if len(rows) == 0:
        return D
    cmax = int(counts[rows].max())
    pos = rng.integers(0, NBITS, size=(len(rows), cmax))
    live = np.arange(cmax)[None, :] < counts[rows, None]
    srt = np.sort(np.where(live, pos, -1 - np.arange(cmax)[None, :]), axis=1)
    dup_rows = np.nonzero((np.diff(srt, axis=1) == 0).any(axis=1))[0]
    for r in dup_rows:
        p = pos[r, live[r]]
        while len(np.unique(p)) != len(p):
            p = rng.choice(NBITS, size=len(p), replace=False)
        pos[r, : len(p)] = p
    bits = np.zeros((len(D), NBITS), dtype=np.uint8)
    rr = np.repeat(rows, cmax).reshape(len(rows), cmax)
    bits[rr[live], pos[live]] = 1
    return D ^ np.packbits(bits, axis=1)


def bitwise_median(D):
    """Majority vote per bit; ties resolve to 0."""
    bits = np.unpackbits(np.asarray(D, dtype=np.uint8).reshape(-1, 32), axis=1)
    return np.packbits((bits.sum(axis=0) * 2 > len(bits)).astype(np.uint8)).reshape(32)


def random_descriptors(n, rng):
    return rng.integers(0, 256, size=(n, 32), dtype=np.uint8)
