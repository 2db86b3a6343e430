"""Bag-of-words place recognition over 256-bit binary descriptors."""

from __future__ import annotations

import enum
import struct
import threading
from collections import deque
from dataclasses import dataclass, field

import numpy as np

from . import descriptors as bd

VOCAB_MAGIC = b"CSVB"
VOCAB_VERSION = 1
_VOCAB_HDR = struct.Struct("<4sHHHI")


class VocabularyError(ValueError):
    pass


# ---------------------------------------------------------------------------
# vocabulary
# ---------------------------------------------------------------------------


def _balanced_assign(dist, rng_order):
    """Assign rows to columns, closest pairs first, with near-equal column sizes."""
    n, k = dist.shape
    cap = np.full(k, n // k)
    cap[: n % k] += 1
    order = np.lexsort((rng_order[np.arange(n * k) // k], dist.ravel()))
    label = np.full(n, -1)
    left = n
    for flat in order:
        i, j = divmod(int(flat), k)
        if label[i] < 0 and cap[j] > 0:
            label[i] = j
            cap[j] -= 1
            left -= 1
            if left == 0:
                break
    return label


def _kmedians(D, k, rng, iters):
    n = len(D)
    # k-means++ style seeding on Hamming distance
    centers = [D[rng.integers(n)]]
    dmin = bd.hamming_matrix(D, centers[0][None]).ravel().astype(float)
    for _ in range(1, k):
        p = dmin ** 2
        idx = rng.choice(n, p=p / p.sum()) if p.sum() > 0 else rng.integers(n)
        centers.append(D[idx])
        dmin = np.minimum(dmin, bd.hamming_matrix(D, D[idx][None]).ravel())
    C = np.array(centers)
    tie = rng.permutation(n)
    label = None
    for _ in range(iters):
        new = _balanced_assign(bd.hamming_matrix(D, C), tie)
        if label is not None and np.array_equal(new, label):
            break
        label = new
        C = np.array([bd.bitwise_median(D[label == j]) for j in range(k)])
    return C, label


@dataclass
class Vocabulary:
    """Complete k-ary tree of depth L; ``levels[l]`` holds the ``k**(l+1)`` centroids of level l+1."""

    k: int
    L: int
    levels: list
    idf: np.ndarray

    @property
    def leaves(self) -> np.ndarray:
        return self.levels[-1]

    @property
    def n_words(self) -> int:
        return self.k ** self.L

    def quantize(self, D) -> np.ndarray:
        """Leaf index of each descriptor: the nearest leaf centroid, ties to the lower index."""
        D = np.asarray(D, dtype=np.uint8).reshape(-1, 32)
        if len(D) == 0:
            return np.zeros(0, dtype=np.int64)
        return np.argmin(bd.hamming_matrix(D, self.leaves), axis=1)

    def descend(self, D) -> np.ndarray:
        """Greedy root-to-leaf descent (cheaper, approximate)."""
        D = np.asarray(D, dtype=np.uint8).reshape(-1, 32)
        node = np.zeros(len(D), dtype=np.int64)
        for lvl in self.levels:
            cand = node[:, None] * self.k + np.arange(self.k)[None, :]
            d = np.stack([bd.hamming_rows(D, lvl[cand[:, j]]) for j in range(self.k)], axis=1)
            node = cand[np.arange(len(D)), np.argmin(d, axis=1)]
        return node

    def transform(self, D) -> "BowVector":
        words = self.quantize(D)
        if len(words) == 0:
            return BowVector({})
        counts = np.bincount(words, minlength=self.n_words).astype(float)
        w = counts / len(words) * self.idf
        total = w.sum()
        if total <= 0:
            return BowVector({})
        nz = np.nonzero(w)[0]
        return BowVector({int(i): float(w[i] / total) for i in nz})

    def save(self, path):
        with open(path, "wb") as fh:
            fh.write(_VOCAB_HDR.pack(VOCAB_MAGIC, VOCAB_VERSION, self.k, self.L, self.n_words))
            for lvl in self.levels:
                fh.write(np.ascontiguousarray(lvl, dtype=np.uint8).tobytes())
            fh.write(np.ascontiguousarray(self.idf, dtype="<f8").tobytes())

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "rb") as fh:
            data = fh.read()
        if len(data) < _VOCAB_HDR.size:
            raise VocabularyError("vocabulary file truncated")
        magic, version, k, L, n = _VOCAB_HDR.unpack_from(data)
        if magic != VOCAB_MAGIC:
            raise VocabularyError("not a vocabulary file")
        if version != VOCAB_VERSION:
            raise VocabularyError(f"unsupported vocabulary version {version}")
        if n != k ** L:
            raise VocabularyError("inconsistent vocabulary header")
        off = _VOCAB_HDR.size
        if len(data) != off + 32 * sum(k ** l for l in range(1, L + 1)) + 8 * n:
            raise VocabularyError("vocabulary file size mismatch")
        levels = []
        for lvl in range(1, L + 1):
            m = k ** lvl
            levels.append(np.frombuffer(data, np.uint8, m * 32, off).reshape(m, 32).copy())
            off += m * 32
        idf = np.frombuffer(data, "<f8", n, off).copy()
        return cls(k, L, levels, idf)


def train_vocabulary(corpus, k: int = 10, L: int = 3, seed: int = 0, iters: int = 10) -> Vocabulary:
    """Hierarchical balanced k-medians under Hamming distance.

    Every node splits its members into ``k`` near-equal clusters, so with
    ``len(corpus) >= k**L`` every leaf receives at least one descriptor.
    idf of leaf ``i`` is ``log(N / n_i)`` over training descriptors.
    """
    D = np.asarray(corpus, dtype=np.uint8).reshape(-1, 32)
    need = k ** L
    if len(D) < need:
        raise VocabularyError(f"corpus has {len(D)} descriptors, need at least k**L = {need}")
    rng = np.random.default_rng(seed)
    levels = [np.zeros((k ** (l + 1), 32), dtype=np.uint8) for l in range(L)]
    leaf_of = np.zeros(len(D), dtype=np.int64)
    stack = [(0, 0, np.arange(len(D)))]  # (depth, node index within depth, members)
    while stack:
        depth, node, idx = stack.pop()
        C, label = _kmedians(D[idx], k, rng, iters)
        for j in range(k):
            child = node * k + j
            levels[depth][child] = C[j]
            members = idx[label == j]
            if depth + 1 < L:
                stack.append((depth + 1, child, members))
            else:
                leaf_of[members] = child
    counts = np.bincount(leaf_of, minlength=need)
    idf = np.log(len(D) / np.maximum(counts, 1))
    return Vocabulary(k, L, levels, idf)


@dataclass
class BowVector:
    weights: dict

    def __len__(self):
        return len(self.weights)

    def dense(self, n: int) -> np.ndarray:
        v = np.zeros(n)
        for i, w in self.weights.items():
            v[i] = w
        return v

    def total(self) -> float:
        return float(sum(self.weights.values()))


def l1_score(a: BowVector, b: BowVector) -> float:
    """``1 - |a - b|_1 / 2`` for L1-normalised vectors, which equals ``sum(min(a, b))``."""
    common = a.weights.keys() & b.weights.keys()
    return float(sum(min(a.weights[i], b.weights[i]) for i in common))


# ---------------------------------------------------------------------------
# database and query
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class MatchCandidate:
    query_kf: tuple  # (submap_id, seq)
    matched_kf: tuple
    score: float
    same_submap: bool


class Route(enum.Enum):
    TriggerInterMapBA = "inter_map_ba"
    TriggerMultiMapFusion = "multi_map_fusion"


@dataclass
class PlaceRecognizer:
    """Inverted index over keyframe BoW vectors of every submap.

    Rows of a dense keyframe-by-word matrix act as the index; a query
    scores every stored keyframe in one vectorised pass.
    """

    vocab: Vocabulary
    min_gap: int = 30
    top_k: int = 3
    min_score: float = 0.3
    consistency: int = 2
    _rows: list = field(default_factory=list)
    _keys: list = field(default_factory=list)
    _mat: np.ndarray = None
    _history: dict = field(default_factory=dict)
    _lock: threading.Lock = field(default_factory=threading.Lock, repr=False)

    def __post_init__(self):
        self._mat = np.zeros((0, self.vocab.n_words), dtype=np.float32)

    def __len__(self):
        return len(self._keys)

    def add(self, key: tuple, bow: BowVector):
        with self._lock:
            row = bow.dense(self.vocab.n_words).astype(np.float32)
            if len(self._keys) == len(self._mat):
                grow = np.zeros((max(64, len(self._mat)), self.vocab.n_words), dtype=np.float32)
                self._mat = np.vstack([self._mat, grow])
            self._mat[len(self._keys)] = row
            self._keys.append(key)

    def scores(self, bow: BowVector) -> np.ndarray:
        with self._lock:
            n = len(self._keys)
            if n == 0 or not bow.weights:
                return np.zeros(n)
            idx = np.fromiter(bow.weights.keys(), dtype=np.int64)
            w = np.fromiter(bow.weights.values(), dtype=np.float64)
            return np.minimum(self._mat[:n, idx], w[None, :]).sum(axis=1).astype(float)

    def query(self, key: tuple, bow: BowVector, agent_id=None) -> list:
        """Score ``key``'s BoW vector against every stored keyframe.

        Excludes the query's own submap within ``min_gap`` sequence numbers,
        then requires each surviving candidate's submap to have been in
        the top set of the previous ``consistency`` queries of the agent.
        """
        submap, seq = key
        s = self.scores(bow)
        keys = self._keys[: len(s)]
        order = np.argsort(-s, kind="stable")
        ranked = []
        for i in order:
            if s[i] < self.min_score:
                break
            m_sub, m_seq = keys[i]
            if (m_sub, m_seq) == key or (m_sub == submap and abs(m_seq - seq) <= self.min_gap):
                continue
            ranked.append((keys[i], float(min(1.0, s[i]))))
            if len(ranked) >= self.top_k:
                break
        agent = submap if agent_id is None else agent_id
        hist = self._history.setdefault(agent, deque(maxlen=self.consistency))
        top_subs = {k[0] for k, _ in ranked}
        out = []
        if len(hist) == self.consistency:
            for mk, sc in ranked:
                if all(mk[0] in prev for prev in hist):
                    out.append(MatchCandidate(key, mk, sc, mk[0] == submap))
        hist.append(top_subs)
        return out


def dispatch(candidate: MatchCandidate, container) -> Route:
    sub = candidate.query_kf[0]
    if candidate.same_submap and container.is_singleton(sub):
        return Route.TriggerInterMapBA
    return Route.TriggerMultiMapFusion
