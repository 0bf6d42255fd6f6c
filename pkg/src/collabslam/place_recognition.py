"""Bag-of-words place recognition over binary descriptors.

A vocabulary is a hierarchical k-majority tree (k-means with Hamming distance
and bitwise-majority centroids). Keyframes are scored as L1-normalized tf-idf
vectors and compared with ``1 - 0.5 * |v1 - v2|_1``.
"""
from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass

import numpy as np

from .errors import DuplicateKeyframe, InsufficientCorpus, VocabularyFormatError
from .matching import hamming_matrix

VOCAB_MAGIC = b"CGVC"
VOCAB_VERSION = 1


def _majority(descs: np.ndarray) -> np.ndarray:
    bits = np.unpackbits(descs, axis=1)
    return np.packbits(bits.sum(axis=0) * 2 > len(descs))


def _kmajority(descs: np.ndarray, k: int, rng: np.random.Generator, iters: int = 10):
    """Cluster rows of ``descs`` into at most k groups. Returns (centroids, labels)."""
    uniq = np.unique(descs, axis=0)
    if len(uniq) <= k:
        labels = np.argmin(hamming_matrix(descs, uniq), axis=1)
        return uniq, labels
    # k-means++ seeding on Hamming distance
    centers = [descs[rng.integers(len(descs))]]
    dmin = hamming_matrix(descs, centers[0][None])[:, 0].astype(float)
    while len(centers) < k:
        w = dmin ** 2
        if w.sum() == 0:
            break
        idx = rng.choice(len(descs), p=w / w.sum())
        centers.append(descs[idx])
        dmin = np.minimum(dmin, hamming_matrix(descs, descs[idx][None])[:, 0])
    centers = np.array(centers)
    labels = np.argmin(hamming_matrix(descs, centers), axis=1)
    for _ in range(iters):
        new = centers.copy()
        for c in range(len(centers)):
            members = descs[labels == c]
            if len(members):
                new[c] = _majority(members)
        new_labels = np.argmin(hamming_matrix(descs, new), axis=1)
        centers = new
        if np.array_equal(new_labels, labels):
            break
        labels = new_labels
    keep = np.unique(labels)
    remap = -np.ones(len(centers), dtype=int)
    remap[keep] = np.arange(len(keep))
    return centers[keep], remap[labels]


class Vocabulary:
    """Hierarchical vocabulary stored in breadth-first order.

    Node 0 is the root. ``children[i]`` lists child node indices; leaves are the
    words, numbered in breadth-first order.
    """

    def __init__(self, k, depth, centroids, children, idf):
        self.k = int(k)
        self.depth = int(depth)
        self.centroids = np.asarray(centroids, dtype=np.uint8)
        self.children = [list(c) for c in children]
        self.idf = np.asarray(idf, dtype=np.float32)
        self.leaf_nodes = [i for i, c in enumerate(self.children) if not c]
        self.word_of_node = {n: w for w, n in enumerate(self.leaf_nodes)}
        kmax = max((len(c) for c in self.children), default=0)
        self._child_table = np.full((len(self.children), max(kmax, 1)), -1, dtype=np.int64)
        for i, c in enumerate(self.children):
            self._child_table[i, :len(c)] = c
        self._word_of_node = np.full(len(self.children), -1, dtype=np.int64)
        self._word_of_node[self.leaf_nodes] = np.arange(len(self.leaf_nodes))

    @property
    def descriptor_len(self) -> int:
        return self.centroids.shape[1]

    @property
    def n_words(self) -> int:
        return len(self.leaf_nodes)

    def transform(self, descriptors) -> np.ndarray:
        """Word id of every descriptor."""
        descs = np.ascontiguousarray(descriptors, dtype=np.uint8)
        if len(descs) == 0:
            return np.zeros(0, dtype=np.int64)
        if descs.shape[1] != self.descriptor_len:
            raise ValueError("descriptor length does not match vocabulary")
        node = np.zeros(len(descs), dtype=np.int64)
        rows = np.arange(len(descs))
        words = descs.view(np.uint64) if descs.shape[1] % 8 == 0 else None
        cents = self.centroids.view(np.uint64) if words is not None else None
        for _ in range(self.depth):
            ch = self._child_table[node]                 # (n, kmax), -1 padded
            valid = ch >= 0
            if not valid.any():
                break
            safe = np.where(valid, ch, 0)
            if words is not None:
                d = np.bitwise_count(cents[safe] ^ words[:, None, :]).sum(-1, dtype=np.int64)
            else:
                d = np.unpackbits(self.centroids[safe] ^ descs[:, None, :], axis=-1).sum(-1, dtype=np.int64)
            d = np.where(valid, d, np.iinfo(np.int64).max)
            step = valid.any(axis=1)
            node = np.where(step, safe[rows, np.argmin(d, axis=1)], node)
        return self._word_of_node[node]

    # -- serialization -------------------------------------------------------
    def to_bytes(self) -> bytes:
        out = bytearray(VOCAB_MAGIC)
        out += struct.pack("<BHBB", VOCAB_VERSION, self.k, self.depth, self.descriptor_len)
        for i, ch in enumerate(self.children):
            out += self.centroids[i].tobytes()
            out += struct.pack("<H", len(ch))
        out += self.idf.astype("<f4").tobytes()
        return bytes(out)

    @classmethod
    def from_bytes(cls, data: bytes) -> "Vocabulary":
        if data[:4] != VOCAB_MAGIC:
            raise VocabularyFormatError("bad magic")
        try:
            version, k, depth, dlen = struct.unpack_from("<BHBB", data, 4)
        except struct.error as e:
            raise VocabularyFormatError("truncated header") from e
        if version != VOCAB_VERSION:
            raise VocabularyFormatError(f"unsupported version {version}")
        off = 9
        centroids, counts = [], []
        pending = 1
        while pending:
            if off + dlen + 2 > len(data):
                raise VocabularyFormatError("truncated node records")
            centroids.append(np.frombuffer(data, np.uint8, dlen, off))
            (n,) = struct.unpack_from("<H", data, off + dlen)
            counts.append(n)
            off += dlen + 2
            pending += n - 1
        # breadth-first: children of node i are the next counts[i] unassigned ids
        children, nxt = [], 1
        for n in counts:
            children.append(list(range(nxt, nxt + n)))
            nxt += n
        n_leaves = sum(1 for n in counts if n == 0)
        if len(data) - off != 4 * n_leaves:
            raise VocabularyFormatError("idf block size mismatch")
        idf = np.frombuffer(data, "<f4", n_leaves, off)
        return cls(k, depth, np.array(centroids), children, idf)

    def save(self, path):
        with open(path, "wb") as f:
            f.write(self.to_bytes())

    @classmethod
    def load(cls, path) -> "Vocabulary":
        with open(path, "rb") as f:
            return cls.from_bytes(f.read())


def train_vocabulary(corpus, k: int = 10, L: int = 3, seed: int = 0) -> Vocabulary:
    """Build a vocabulary tree.

    ``corpus`` is either an (N, B) uint8 array, where every descriptor counts as
    its own document for idf, or a list of such arrays, one per image.
    """
    if isinstance(corpus, (list, tuple)):
        docs = [np.asarray(d, dtype=np.uint8) for d in corpus]
        descs = np.concatenate(docs) if docs else np.zeros((0, 32), np.uint8)
    else:
        descs = np.asarray(corpus, dtype=np.uint8)
        docs = None
    if len(descs) < k:
        raise InsufficientCorpus(f"corpus has {len(descs)} descriptors, need at least k={k}")
    rng = np.random.default_rng(seed)
    dlen = descs.shape[1]

    centroids = [np.zeros(dlen, np.uint8)]
    children: list[list[int]] = [[]]
    queue = deque([(0, np.arange(len(descs)), 0)])
    while queue:
        node, idx, level = queue.popleft()
        if level >= L or len(idx) <= 1:
            continue
        cents, labels = _kmajority(descs[idx], k, rng)
        if len(cents) <= 1 and level > 0:
            continue
        for c in range(len(cents)):
            child = len(centroids)
            centroids.append(cents[c])
            children.append([])
            children[node].append(child)
            queue.append((child, idx[labels == c], level + 1))

    vocab = Vocabulary(k, L, np.array(centroids), children, np.zeros(0))
    words = vocab.transform(descs)
    if docs is None:
        df = np.bincount(words, minlength=vocab.n_words)
        n_docs = len(descs)
    else:
        df = np.zeros(vocab.n_words)
        off = 0
        for d in docs:
            df[np.unique(words[off:off + len(d)])] += 1
            off += len(d)
        n_docs = len(docs)
    idf = np.log(n_docs / np.maximum(df, 1))
    vocab.idf = idf.astype(np.float32)
    return vocab


@dataclass(frozen=True)
class BowVector:
    words: np.ndarray     # sorted word ids
    weights: np.ndarray   # L1-normalized weights

    def as_dict(self) -> dict:
        return dict(zip(self.words.tolist(), self.weights.tolist()))

    def __len__(self):
        return len(self.words)


EMPTY_BOW = BowVector(np.zeros(0, np.int64), np.zeros(0))


def bow_vector(vocab: Vocabulary, descriptors) -> BowVector:
    words = vocab.transform(descriptors)
    if len(words) == 0:
        return EMPTY_BOW
    ids, counts = np.unique(words, return_counts=True)
    w = counts / len(words) * vocab.idf[ids].astype(float)
    keep = w > 0
    ids, w = ids[keep], w[keep]
    if w.sum() == 0:
        return EMPTY_BOW
    return BowVector(ids, w / w.sum())


def bow_score(a: BowVector, b: BowVector) -> float:
    """``1 - 0.5 * |a - b|_1`` on L1-normalized vectors, in [0, 1]."""
    if len(a) == 0 or len(b) == 0:
        return 0.0
    da, db = a.as_dict(), b.as_dict()
    l1 = sum(abs(da.get(w, 0.0) - db.get(w, 0.0)) for w in set(da) | set(db))
    return 1.0 - 0.5 * l1


class KeyframeDatabase:
    """Inverted-index keyframe store.

    Not internally locked: the map manager serializes ``add_keyframe`` against
    queries.
    """

    def __init__(self, vocab: Vocabulary):
        self.vocab = vocab
        self.index: dict[int, list] = {}      # word -> [keyframe slots, weights]
        self.vectors: dict = {}
        self._order: dict = {}
        self._ids: list = []
        self._frozen: dict = {}

    def __len__(self):
        return len(self.vectors)

    def __contains__(self, kf_id):
        return kf_id in self.vectors

    def add_keyframe(self, kf_id, descriptors) -> BowVector:
        if kf_id in self.vectors:
            raise DuplicateKeyframe(f"keyframe {kf_id} already in database")
        v = bow_vector(self.vocab, descriptors)
        self.vectors[kf_id] = v
        slot = len(self._ids)
        self._order[kf_id] = slot
        self._ids.append(kf_id)
        for w, x in zip(v.words.tolist(), v.weights.tolist()):
            post = self.index.setdefault(w, [[], []])
            post[0].append(slot)
            post[1].append(x)
            self._frozen.pop(w, None)
        return v

    def _postings(self, w):
        arr = self._frozen.get(w)
        if arr is None:
            post = self.index[w]
            arr = self._frozen[w] = (np.array(post[0], dtype=np.int64), np.array(post[1]))
        return arr

    def _rank(self, scores: dict, top_k, exclusion, min_score_ratio):
        # scores equal up to summation round-off rank by insertion order, whichever way they were summed
        ranked = sorted(((s, kf) for kf, s in scores.items() if s > 1e-12 and kf not in exclusion),
                        key=lambda t: (-round(t[0], 12), self._order[t[1]]))
        if not ranked:
            return []
        floor = ranked[0][0] * min_score_ratio
        return [(kf, s) for s, kf in ranked[:top_k] if s >= floor]

    def query(self, vector: BowVector, top_k: int = 3, exclusion=(), min_score_ratio: float = 0.5):
        """Best-scoring stored keyframes as a list of (kf_id, score), descending.

        Scores accumulate ``min(a_w, b_w)`` over shared words, which equals the
        L1 score for normalized vectors.
        """
        exclusion = set(exclusion)
        acc = np.zeros(len(self._ids))
        hit = np.zeros(len(self._ids), dtype=bool)
        for w, a in zip(vector.words.tolist(), vector.weights.tolist()):
            if w not in self.index:
                continue
            slots, weights = self._postings(w)
            acc[slots] += np.minimum(a, weights)
            hit[slots] = True
        scores = {self._ids[i]: float(acc[i]) for i in np.flatnonzero(hit)}
        return self._rank(scores, top_k, exclusion, min_score_ratio)

    def query_brute_force(self, vector: BowVector, top_k: int = 3, exclusion=(),
                          min_score_ratio: float = 0.5):
        exclusion = set(exclusion)
        scores = {kf: bow_score(vector, v) for kf, v in self.vectors.items()}
        return self._rank(scores, top_k, exclusion, min_score_ratio)
