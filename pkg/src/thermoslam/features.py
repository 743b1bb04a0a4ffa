"""ORB features on rescaled thermal images and a binary bag-of-words vocabulary.

Vocabulary file layout (little-endian)::

    magic    8 bytes  b"TSVOCAB\\0"
    version  u16      (1)
    k        u16      branching factor
    depth    u16      tree depth
    nodes    u32      number of tree nodes, root included
    words    u32      number of leaf words
    then one record per node in breadth-first order (root first):
      parent  i32     (-1 for the root)
      word    i32     leaf word id, -1 for internal nodes
      desc    32 bytes cluster center (zeros for the root)
    then ``words`` f64 idf weights, indexed by word id.

Children of a node are the records whose ``parent`` points at it, in file
order; breadth-first order guarantees parents precede children.
"""

from __future__ import annotations

import logging
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import cv2
import numpy as np

log = logging.getLogger(__name__)

DESC_BYTES = 32
MAX_FEATURES = 500
MIN_FEATURES = 20
MAGIC = b"TSVOCAB\0"
VERSION = 1


# -- extraction ---------------------------------------------------------------


@dataclass
class ORBParams:
    max_features: int = MAX_FEATURES
    fast_threshold: int = 5
    levels: int = 3
    scale_factor: float = 1.2
    patch_size: int = 31
    cell: int = 40


def extract_orb(img8: np.ndarray, params: ORBParams = ORBParams()) -> tuple[np.ndarray, np.ndarray]:
    """Detect FAST corners, bucket them on a grid and compute oriented BRIEF descriptors.

    Returns (N, 2) keypoint pixels and (N, 32) uint8 descriptors.
    """
    img8 = np.ascontiguousarray(img8, dtype=np.uint8)
    orb = cv2.ORB_create(
        nfeatures=params.max_features * 8,
        scaleFactor=params.scale_factor,
        nlevels=params.levels,
        edgeThreshold=params.patch_size,
        patchSize=params.patch_size,
        fastThreshold=params.fast_threshold,
    )
    kps = orb.detect(img8, None)
    kps = _bucket(kps, img8.shape, params.max_features, params.cell)
    if not kps:
        return np.zeros((0, 2)), np.zeros((0, DESC_BYTES), np.uint8)
    kps, desc = orb.compute(img8, kps)
    if desc is None or not kps:
        return np.zeros((0, 2)), np.zeros((0, DESC_BYTES), np.uint8)
    return np.array([k.pt for k in kps], dtype=float), desc


def _bucket(kps, shape, max_features: int, cell: int) -> list:
    """Keep the strongest responses per grid cell, round robin across cells."""
    if len(kps) <= max_features:
        return list(kps)
    h, w = shape
    ncols = (w + cell - 1) // cell
    resp = np.array([k.response for k in kps])
    cells = np.array([int(k.pt[1] // cell) * ncols + int(k.pt[0] // cell) for k in kps])
    order = np.lexsort((-resp, cells))
    sorted_cells = cells[order]
    starts = np.r_[0, np.nonzero(np.diff(sorted_cells))[0] + 1]
    rank = np.arange(len(order)) - np.repeat(starts, np.diff(np.r_[starts, len(order)]))
    pick = order[np.lexsort((-resp[order], rank))][:max_features]
    return [kps[i] for i in sorted(pick)]


# -- hamming helpers ----------------------------------------------------------


def _bits(desc: np.ndarray) -> np.ndarray:
    return np.unpackbits(np.asarray(desc, dtype=np.uint8), axis=-1).astype(np.float32)


def hamming_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Pairwise Hamming distances between two descriptor sets."""
    A, B = _bits(a), _bits(b)
    d = A.sum(1)[:, None] + B.sum(1)[None, :] - 2.0 * (A @ B.T)
    return np.rint(d).astype(np.int32)


def _median_center(desc: np.ndarray) -> np.ndarray:
    """Bitwise majority vote (the binary k-medians center)."""
    bits = np.unpackbits(desc, axis=1)
    return np.packbits(bits.sum(0) * 2 > len(desc))


def _kmedians(desc: np.ndarray, k: int, rng: np.random.Generator, iterations: int = 10) -> np.ndarray:
    """Binary k-medians with k-means++ seeding. Returns cluster labels."""
    n = len(desc)
    centers = [desc[rng.integers(n)]]
    d2 = hamming_matrix(desc, centers[0][None]).ravel().astype(float) ** 2
    for _ in range(1, k):
        if d2.sum() <= 0:
            break
        centers.append(desc[rng.choice(n, p=d2 / d2.sum())])
        d2 = np.minimum(d2, hamming_matrix(desc, centers[-1][None]).ravel().astype(float) ** 2)
    C = np.array(centers)
    labels = np.full(n, -1)
    for _ in range(iterations):
        new = np.argmin(hamming_matrix(desc, C), axis=1)
        if np.array_equal(new, labels):
            break
        labels = new
        C = np.array([_median_center(desc[labels == j]) if np.any(labels == j) else C[j] for j in range(len(C))])
    return labels


# -- vocabulary ---------------------------------------------------------------


@dataclass
class Vocabulary:
    k: int
    depth: int
    parent: np.ndarray  # (n_nodes,) int32
    word: np.ndarray  # (n_nodes,) int32, -1 for internal nodes
    centers: np.ndarray  # (n_nodes, 32) uint8
    idf: np.ndarray  # (n_words,) float64
    _children: np.ndarray | None = field(default=None, repr=False)

    @property
    def num_words(self) -> int:
        return len(self.idf)

    def children(self) -> np.ndarray:
        """(n_nodes, k) child table padded with -1."""
        if self._children is None:
            table = np.full((len(self.parent), self.k), -1, dtype=np.int64)
            fill = np.zeros(len(self.parent), dtype=np.int64)
            for i, p in enumerate(self.parent):
                if p >= 0:
                    table[p, fill[p]] = i
                    fill[p] += 1
            self._children = table
        return self._children

    @classmethod
    def train(
        cls,
        descriptor_sets: Sequence[np.ndarray],
        k: int = 10,
        depth: int = 4,
        seed: int = 0,
    ) -> "Vocabulary":
        """Hierarchical binary k-medians over the descriptors of a set of images."""
        rng = np.random.default_rng(seed)
        sets = [np.asarray(d, dtype=np.uint8).reshape(-1, DESC_BYTES) for d in descriptor_sets]
        if not any(len(d) for d in sets):
            raise ValueError("no descriptors to train on")
        desc = np.concatenate(sets)
        parent, centers, members, level = [-1], [np.zeros(DESC_BYTES, np.uint8)], [np.arange(len(desc))], [0]
        queue = [0]
        while queue:
            node = queue.pop(0)
            idx = members[node]
            if level[node] >= depth or len(idx) <= 1:
                continue
            uniq = np.unique(desc[idx], axis=0)
            if len(uniq) <= k:
                groups = [idx[np.all(desc[idx] == u, axis=1)] for u in uniq]
                cents = list(uniq)
            else:
                labels = _kmedians(desc[idx], k, rng)
                groups = [idx[labels == j] for j in range(labels.max() + 1) if np.any(labels == j)]
                cents = [_median_center(desc[g]) for g in groups]
            if len(groups) == 1:
                continue
            for g, c in zip(groups, cents):
                parent.append(node)
                centers.append(c)
                members.append(g)
                level.append(level[node] + 1)
                queue.append(len(parent) - 1)
        parent = np.array(parent, dtype=np.int32)
        has_child = np.zeros(len(parent), dtype=bool)
        has_child[parent[parent >= 0]] = True
        word = np.full(len(parent), -1, dtype=np.int32)
        leaves = np.nonzero(~has_child)[0]
        word[leaves] = np.arange(len(leaves))
        voc = cls(k, depth, parent, word, np.array(centers, dtype=np.uint8), np.zeros(len(leaves)))
        # idf over the training images.
        n_img = len(sets)
        df = np.zeros(len(leaves))
        for d in sets:
            if len(d):
                df[np.unique(voc.quantize(d))] += 1
        voc.idf = np.log(n_img / np.maximum(df, 1))
        return voc

    def quantize(self, desc: np.ndarray) -> np.ndarray:
        """Leaf word id for every descriptor (greedy descent)."""
        desc = np.asarray(desc, dtype=np.uint8).reshape(-1, DESC_BYTES)
        table = self.children()
        cur = np.zeros(len(desc), dtype=np.int64)
        bits = np.unpackbits(desc, axis=1)
        center_bits = np.unpackbits(self.centers, axis=1)
        while True:
            cand = table[cur]
            active = cand[:, 0] >= 0
            if not active.any():
                break
            c = cand[active]
            cb = center_bits[np.maximum(c, 0)]
            d = np.sum(cb != bits[active][:, None, :], axis=2)
            d[c < 0] = np.iinfo(np.int64).max
            cur[active] = c[np.arange(len(c)), np.argmin(d, axis=1)]
        return self.word[cur].astype(np.int64)

    def transform(self, desc: np.ndarray) -> tuple[dict[int, float], np.ndarray]:
        """L1-normalized tf-idf vector and per-descriptor word ids."""
        words = self.quantize(desc)
        if len(words) == 0:
            return {}, words
        ids, counts = np.unique(words, return_counts=True)
        weights = counts / len(words) * self.idf[ids]
        total = weights.sum()
        if total <= 0:
            return {}, words
        return {int(i): float(w / total) for i, w in zip(ids, weights) if w > 0}, words

    # -- serialization -----------------------------------------------------

    def save(self, path: str | Path) -> None:
        n = len(self.parent)
        head = MAGIC + struct.pack("<HHHII", VERSION, self.k, self.depth, n, self.num_words)
        rec = np.zeros(n, dtype=[("parent", "<i4"), ("word", "<i4"), ("desc", "u1", (DESC_BYTES,))])
        rec["parent"], rec["word"], rec["desc"] = self.parent, self.word, self.centers
        Path(path).write_bytes(head + rec.tobytes() + self.idf.astype("<f8").tobytes())

    @classmethod
    def load(cls, path: str | Path) -> "Vocabulary":
        buf = Path(path).read_bytes()
        if buf[:8] != MAGIC:
            raise ValueError(f"{path}: not a vocabulary file (byte 0)")
        version, k, depth, n, n_words = struct.unpack_from("<HHHII", buf, 8)
        if version != VERSION:
            raise ValueError(f"{path}: unsupported vocabulary version {version}")
        off = 8 + struct.calcsize("<HHHII")
        dt = np.dtype([("parent", "<i4"), ("word", "<i4"), ("desc", "u1", (DESC_BYTES,))])
        need = off + n * dt.itemsize + 8 * n_words
        if len(buf) < need:
            raise ValueError(f"{path}: truncated at byte {len(buf)}, need {need}")
        rec = np.frombuffer(buf, dtype=dt, count=n, offset=off)
        idf = np.frombuffer(buf, dtype="<f8", count=n_words, offset=off + n * dt.itemsize)
        parent = rec["parent"].astype(np.int32)
        if parent[0] != -1 or np.any(parent[1:] >= np.arange(1, n)) or np.any(parent[1:] < 0):
            raise ValueError(f"{path}: node table is not breadth-first")
        return cls(k, depth, parent, rec["word"].astype(np.int32), rec["desc"].copy(), idf.astype(float))


# -- bags ---------------------------------------------------------------------


@dataclass
class DescriptorBag:
    keypoints: np.ndarray  # (N, 2) pixels
    descriptors: np.ndarray  # (N, 32) uint8
    words: np.ndarray  # (N,) word ids
    vector: dict[int, float]  # word id -> weight, L1-normalized

    @property
    def usable(self) -> bool:
        return len(self.descriptors) >= MIN_FEATURES and bool(self.vector)


def extract_features(img8: np.ndarray, vocabulary: Vocabulary, params: ORBParams = ORBParams()) -> DescriptorBag:
    kps, desc = extract_orb(img8, params)
    if len(desc) < MIN_FEATURES:
        log.info("only %d features; keyframe excluded from loop database", len(desc))
    vec, words = vocabulary.transform(desc) if len(desc) else ({}, np.zeros(0, np.int64))
    return DescriptorBag(kps, desc, words, vec)


def similarity(v1: dict[int, float], v2: dict[int, float]) -> float:
    """1 - L1/2 between L1-normalized sparse vectors; 0 if either is empty."""
    if not v1 or not v2:
        return 0.0
    n1, n2 = sum(v1.values()), sum(v2.values())
    l1 = 0.0
    for w in v1.keys() | v2.keys():
        l1 += abs(v1.get(w, 0.0) / n1 - v2.get(w, 0.0) / n2)
    return max(0.0, 1.0 - 0.5 * l1)


def common_word_ratio(query: DescriptorBag, candidate: DescriptorBag) -> float:
    """Fraction of the query's distinct words that also occur in the candidate."""
    q = set(query.vector)
    if not q:
        return 0.0
    return len(q & set(candidate.vector)) / len(q)


def match_descriptors(a: np.ndarray, b: np.ndarray, max_distance: int = 64, ratio: float = 0.8) -> np.ndarray:
    """Mutual nearest neighbors passing a ratio test. Returns (M, 2) index pairs."""
    if len(a) == 0 or len(b) < 2:
        return np.zeros((0, 2), dtype=int)
    d = hamming_matrix(a, b)
    best = np.argmin(d, axis=1)
    part = np.partition(d, 1, axis=1)
    back = np.argmin(d, axis=0)
    ia = np.arange(len(a))
    ok = (back[best] == ia) & (part[:, 0] <= max_distance) & (part[:, 0] < ratio * np.maximum(part[:, 1], 1))
    return np.stack([ia[ok], best[ok]], axis=1)
