"""Hierarchical binary vocabulary, BoW scoring and the keyframe / pair selector."""

from __future__ import annotations

import struct
from collections import deque
from dataclasses import dataclass, field

import numpy as np

BowVector = dict  # word_id -> weight, L1-normalised

VOCAB_MAGIC = b"EGSV"


def _unpack(desc) -> np.ndarray:
    return np.unpackbits(np.asarray(desc, dtype=np.uint8).reshape(-1, np.shape(desc)[-1]), axis=1)


def _bit_distances(X, C) -> np.ndarray:
    """Hamming distances between unpacked bit rows (n, N) and (m, N)."""
    Xf = X.astype(np.float64)
    Cf = C.astype(np.float64)
    return np.rint(Xf @ (1.0 - Cf).T + (1.0 - Xf) @ Cf.T).astype(np.int64)


@dataclass
class Vocabulary:
    """Tree nodes in BFS order; node 0 is the root (its descriptor is unused)."""
    k: int
    L: int
    n_bits: int
    pattern_seed: int
    node_bits: np.ndarray                   # (n_nodes, N) uint8 0/1
    children: list                          # per node, list of child node indices
    idf: np.ndarray = field(default=None)   # per word
    node_word: np.ndarray = field(default=None)  # node -> word id, -1 for internal

    def __post_init__(self):
        if self.node_word is None:
            self.node_word = np.full(len(self.children), -1, dtype=np.int64)
            w = 0
            for i, ch in enumerate(self.children):
                if not ch:
                    self.node_word[i] = w
                    w += 1
        if self.idf is None:
            self.idf = np.zeros(self.word_count)

    @property
    def word_count(self) -> int:
        return int(np.count_nonzero(self.node_word >= 0))

    @property
    def leaf_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.node_word >= 0)

    def descend(self, desc) -> np.ndarray:
        """Word id for each packed descriptor by greedy min-Hamming descent (ties to the lowest child)."""
        X = _unpack(desc)
        node = np.zeros(len(X), dtype=np.int64)
        while True:
            internal = np.flatnonzero(self.node_word[node] < 0)
            if len(internal) == 0:
                return self.node_word[node]
            for n in np.unique(node[internal]):
                rows = internal[node[internal] == n]
                ch = np.asarray(self.children[n])
                d = _bit_distances(X[rows], self.node_bits[ch])
                node[rows] = ch[np.argmin(d, axis=1)]


def _seed_centers(X, k, rng):
    """k-means++ style seeding over the distinct rows of X."""
    distinct = np.unique(X, axis=0)
    if len(distinct) <= k:
        return distinct
    idx = [int(rng.integers(len(distinct)))]
    d = _bit_distances(distinct, distinct[idx]).min(axis=1).astype(float)
    while len(idx) < k:
        p = d ** 2
        j = int(rng.choice(len(distinct), p=p / p.sum()))
        idx.append(j)
        d = np.minimum(d, _bit_distances(distinct, distinct[[j]])[:, 0])
    return distinct[idx]


def _kmedians(X, k, rng, max_iter=50):
    C = _seed_centers(X, k, rng)
    assign = None
    for _ in range(max_iter):
        new = np.argmin(_bit_distances(X, C), axis=1)
        if assign is not None and np.array_equal(new, assign):
            break
        assign = new
        for j in range(len(C)):
            members = X[assign == j]
            if len(members):
                C[j] = (2 * members.sum(axis=0, dtype=np.int64) > len(members)).astype(np.uint8)
    # members follow the final centres so every leaf is reachable by descent
    assign = np.argmin(_bit_distances(X, C), axis=1)
    used = [j for j in range(len(C)) if np.any(assign == j)]
    return C[used], [np.flatnonzero(assign == j) for j in used]


def train_vocabulary(images, k: int = 10, L: int = 3, seed: int = 0, pattern_seed: int = 0) -> Vocabulary:
    """Binary hierarchical k-medians over per-image packed descriptor arrays.

    ``images`` is a list of (M_i, N/8) uint8 arrays, one per training frame.
    Word idf is ``ln(n_images / n_images_containing_word)``.
    """
    if k < 2 or L < 1:
        raise ValueError("need k >= 2 and L >= 1")
    images = [np.asarray(d, dtype=np.uint8).reshape(-1, np.shape(d)[-1]) for d in images]
    nonempty = [d for d in images if len(d)]
    if sum(len(d) for d in nonempty) < k:
        raise ValueError(f"need at least k={k} descriptors to train a vocabulary")
    X = _unpack(np.concatenate(nonempty))
    n_bits = X.shape[1]
    rng = np.random.Generator(np.random.PCG64(seed))

    node_bits = [np.zeros(n_bits, dtype=np.uint8)]
    children = [[]]
    queue = deque([(0, np.arange(len(X)), 0)])
    while queue:
        node, members, level = queue.popleft()
        if level >= L or len(members) < k:
            continue
        C, groups = _kmedians(X[members], k, rng)
        if len(groups) < 2:
            continue
        for c, g in zip(C, groups):
            children[node].append(len(node_bits))
            node_bits.append(c)
            children.append([])
            queue.append((len(node_bits) - 1, members[g], level + 1))
    vocab = Vocabulary(k, L, n_bits, pattern_seed, np.array(node_bits), children)
    df = np.zeros(vocab.word_count)
    for d in images:
        if len(d):
            df[np.unique(vocab.descend(d))] += 1
    with np.errstate(divide="ignore"):
        vocab.idf = np.where(df > 0, np.log(len(images) / np.maximum(df, 1)), 0.0)
    return vocab


def quantize(vocab: Vocabulary, desc) -> BowVector:
    """tf-idf BoW vector, L1-normalised; words with zero weight are omitted."""
    desc = np.asarray(desc, dtype=np.uint8)
    if desc.size == 0:
        return {}
    words, counts = np.unique(vocab.descend(desc), return_counts=True)
    w = counts * vocab.idf[words]
    keep = w > 0
    total = w[keep].sum()
    if total <= 0:
        return {}
    return {int(a): float(b / total) for a, b in zip(words[keep], w[keep])}


def similarity(a: BowVector, b: BowVector) -> float:
    """``1 - 0.5 * |a/|a| - b/|b||_1``; 0 when either vector is empty."""
    if not a or not b:
        return 0.0
    na = sum(abs(x) for x in a.values())
    nb = sum(abs(x) for x in b.values())
    diff = 0.0
    for w in a.keys() | b.keys():
        diff += abs(a.get(w, 0.0) / na - b.get(w, 0.0) / nb)
    return min(1.0, max(0.0, 1.0 - 0.5 * diff))


def normalized_score(s_ik: float, s_ref: float, tau: float) -> float:
    """``s(v_i, v_k) / s(v_ref, v_k)`` clamped to ``[0, 1/tau]``."""
    if s_ref <= 0:
        raise ValueError("reference similarity must be positive")
    return min(max(s_ik / s_ref, 0.0), 1.0 / tau)


@dataclass(frozen=True)
class ImagePair:
    i: int
    k: int
    eta: float


@dataclass
class SelectorParams:
    tau: float = 0.03
    thr_in: float = 0.04
    t_max: float = 2.0
    max_pairs_per_frame: int = 3
    compare_to: str = "last_selected"   # or "previous"

    def __post_init__(self):
        if not 0 < self.tau < 1:
            raise ValueError("tau must be in (0, 1)")
        if self.thr_in <= 0 or self.t_max <= 0 or self.max_pairs_per_frame < 1:
            raise ValueError("thr_in, t_max and max_pairs_per_frame must be positive")
        if self.compare_to not in ("last_selected", "previous"):
            raise ValueError("compare_to must be 'last_selected' or 'previous'")


@dataclass
class Entry:
    frame_id: int
    vector: BowVector
    time: float
    keyframe: bool


class MatchDatabase:
    """Append-only frame database; single writer, frames inserted in frame_id order."""

    def __init__(self, params: SelectorParams | None = None):
        self.params = params or SelectorParams()
        self.entries: list[Entry] = []
        self.last_selected: int | None = None
        self._by_id: dict[int, Entry] = {}

    @property
    def keyframes(self) -> list[int]:
        return [e.frame_id for e in self.entries if e.keyframe]

    def select_reference(self, v_k: BowVector, time: float):
        """Most similar recent entry with ``s > tau``, or ``None`` if nothing qualifies."""
        p = self.params
        best, best_s = None, -1.0
        for e in self.entries:
            if not (time - p.t_max < e.time < time):
                continue
            s = similarity(e.vector, v_k)
            # later entries win ties
            if s > p.tau and s >= best_s:
                best, best_s = e, s
        return best

    def _eta(self, v_i, v_k, s_ref) -> float:
        return normalized_score(similarity(v_i, v_k), s_ref, self.params.tau)

    def _reference_similarity(self, v_k, time) -> float | None:
        ref = self.select_reference(v_k, time)
        return None if ref is None else similarity(ref.vector, v_k)

    def admit(self, frame_id: int, v_k: BowVector, time: float) -> bool:
        """Insert the frame; return True if it is selected as a keyframe."""
        if self.entries and frame_id <= self.entries[-1].frame_id:
            raise ValueError("frames must arrive in increasing frame_id order")
        if not self.entries:
            selected = True
        else:
            s_ref = self._reference_similarity(v_k, time)
            if s_ref is None:
                selected = True
            else:
                other = (self.entries[-1] if self.params.compare_to == "previous"
                         else self._by_id[self.last_selected])
                selected = self._eta(other.vector, v_k, s_ref) < self.params.thr_in
        e = Entry(frame_id, v_k, float(time), selected)
        self.entries.append(e)
        self._by_id[frame_id] = e
        if selected:
            self.last_selected = frame_id
        return selected

    def query_pairs(self, frame_id: int, v_k: BowVector, time: float) -> list[ImagePair]:
        """Pairs ``(i, k)`` with earlier keyframes whose eta exceeds tau, best first, capped.

        Without a temporal reference the raw similarity is used (denominator 1).
        """
        p = self.params
        s_ref = self._reference_similarity(v_k, time) or 1.0
        cands = []
        for e in self.entries:
            if e.frame_id >= frame_id or not e.keyframe:
                continue
            eta = self._eta(e.vector, v_k, s_ref)
            if eta > p.tau:
                cands.append(ImagePair(e.frame_id, frame_id, eta))
        cands.sort(key=lambda q: (-q.eta, -q.i))
        return cands[:p.max_pairs_per_frame]

    def process(self, frame_id: int, v_k: BowVector, time: float):
        """Admission and pair emission for one frame, as a single step: ``(selected, pairs)``."""
        # the reference and pairs only see frames before k
        pairs = self.query_pairs(frame_id, v_k, time)
        selected = self.admit(frame_id, v_k, time)
        return selected, (pairs if selected else [])


def select_pairs(vectors, times, params: SelectorParams | None = None, frame_ids=None):
    """Batch replay over a recorded sequence: ``(keyframe_ids, pairs)``."""
    db = MatchDatabase(params)
    frame_ids = range(len(vectors)) if frame_ids is None else frame_ids
    pairs = []
    for fid, v, t in zip(frame_ids, vectors, times):
        _, ps = db.process(fid, v, t)
        pairs.extend(ps)
    return db.keyframes, pairs


def complete_pair_count(n: int) -> int:
    return n * (n - 1)


def window_pairs(n: int, window: int = 5) -> list[tuple[int, int]]:
    """Ordered sliding-window baseline: each frame paired with its next ``window`` frames, cyclically."""
    if n <= window:
        return [(a, b) for a in range(n) for b in range(n) if a != b]
    return [(a, (a + j) % n) for a in range(n) for j in range(1, window + 1)]


def write_pairs(path, pairs):
    pairs = sorted(pairs, key=lambda q: (q.k, -q.eta, q.i))
    with open(path, "w") as f:
        for q in pairs:
            f.write(f"{q.i} {q.k} {float(q.eta)!r}\n")


def read_pairs(path) -> list[ImagePair]:
    out = []
    with open(path) as f:
        for line in f:
            if line.strip():
                i, k, eta = line.split()
                out.append(ImagePair(int(i), int(k), float(eta)))
    return out


def write_vocabulary(path, vocab: Vocabulary):
    with open(path, "wb") as f:
        f.write(VOCAB_MAGIC)
        f.write(struct.pack("<5I", vocab.k, vocab.L, vocab.n_bits, vocab.pattern_seed, vocab.word_count))
        packed = np.packbits(vocab.node_bits, axis=1)
        for i, ch in enumerate(vocab.children):
            f.write(packed[i].tobytes())
            f.write(struct.pack("<I", len(ch)))
        f.write(np.asarray(vocab.idf, dtype="<f8").tobytes())


def read_vocabulary(path) -> Vocabulary:
    with open(path, "rb") as f:
        data = f.read()
    if data[:4] != VOCAB_MAGIC:
        raise ValueError(f"{path}: not a vocabulary file")
    k, L, n_bits, pattern_seed, n_words = struct.unpack_from("<5I", data, 4)
    off = 24
    nbytes = n_bits // 8
    node_bytes, children = [], []
    pending = 1
    while pending:
        node_bytes.append(np.frombuffer(data, np.uint8, nbytes, off))
        (n_ch,) = struct.unpack_from("<I", data, off + nbytes)
        off += nbytes + 4
        children.append(n_ch)
        pending += n_ch - 1
    # child lists follow BFS order
    lists, nxt = [], 1
    for n_ch in children:
        lists.append(list(range(nxt, nxt + n_ch)))
        nxt += n_ch
    idf = np.frombuffer(data, "<f8", n_words, off).astype(float)
    bits = np.unpackbits(np.array(node_bytes), axis=1)
    vocab = Vocabulary(k, L, n_bits, pattern_seed, bits, lists, idf)
    if vocab.word_count != n_words:
        raise ValueError(f"{path}: word count mismatch")
    return vocab


def reduction_percent(pairs: int, n_frames: int) -> float:
    complete = complete_pair_count(n_frames)
    return 100.0 * (1.0 - pairs / complete) if complete else 0.0

