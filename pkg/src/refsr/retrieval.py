"""Bag-of-visual-words retrieval over a high-resolution reference corpus.

Local descriptors are quantized against a k-means vocabulary; images are
ranked by cosine similarity of tf-idf word histograms served from an
inverted index. Vocabulary centroids, term frequencies and idf weights are
held in float32, the same precision as the on-disk index, so a saved and
reloaded index ranks identically to the in-memory one.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .features import detect_and_describe
from .image import ImagePlane
from .io import FormatError

INDEX_MAGIC = b"BVW1"
INDEX_VERSION = 1
DEFAULT_VOCAB_SIZE = 256
DESC_DIM = 144


@dataclass
class Vocabulary:
    centroids: np.ndarray  # (k, 144) float32

    def __post_init__(self):
        c = np.ascontiguousarray(self.centroids, dtype=np.float32)
        if c.ndim != 2 or c.shape[1] != DESC_DIM:
            raise ValueError(f"centroids must be (k, {DESC_DIM}), got {c.shape}")
        if c.shape[0] < 2:
            raise ValueError("vocabulary needs at least 2 words")
        self.centroids = c

    @property
    def k(self) -> int:
        return self.centroids.shape[0]


def build_vocabulary(
    descs: np.ndarray, k: int, iters: int = 50, seed: int = 0
) -> Vocabulary:
    """k-means vocabulary with k-means++ seeding; deterministic per seed.

    Lloyd iterations stop after `iters` rounds or once the largest centroid
    move drops below 1e-6.
    """
    descs = np.asarray(descs, dtype=np.float64)
    n = descs.shape[0]
    if n < k:
        raise ValueError(f"need at least {k} descriptors, got {n}")
    rng = np.random.default_rng(seed)

    centroids = np.empty((k, descs.shape[1]))
    first = int(rng.integers(n))
    centroids[0] = descs[first]
    d2 = np.sum((descs - centroids[0]) ** 2, axis=1)
    for j in range(1, k):
        total = d2.sum()
        if total <= 0:
            # all remaining points coincide with a chosen centroid
            centroids[j] = descs[int(rng.integers(n))]
            continue
        r = rng.random() * total
        idx = int(np.searchsorted(np.cumsum(d2), r))
        idx = min(idx, n - 1)
        centroids[j] = descs[idx]
        d2 = np.minimum(d2, np.sum((descs - centroids[j]) ** 2, axis=1))

    assign = _nearest(descs, centroids)
    for _ in range(iters):
        new_centroids = centroids.copy()
        for j in range(k):
            members = descs[assign == j]
            if len(members):
                new_centroids[j] = members.mean(axis=0)
            else:
                # adopt the point farthest from its centroid
                far = int(np.argmax(np.sum((descs - centroids[assign]) ** 2, axis=1)))
                new_centroids[j] = descs[far]
        move = float(np.sqrt(np.sum((new_centroids - centroids) ** 2, axis=1)).max())
        centroids = new_centroids
        assign = _nearest(descs, centroids)
        if move < 1e-6:
            break
    return Vocabulary(centroids.astype(np.float32))


def _nearest(pts: np.ndarray, centroids: np.ndarray) -> np.ndarray:
    d2 = (
        np.sum(pts**2, axis=1)[:, None]
        - 2.0 * pts @ centroids.T
        + np.sum(centroids**2, axis=1)[None, :]
    )
    return np.argmin(d2, axis=1)


def kmeans_sse(descs: np.ndarray, centroids: np.ndarray) -> float:
    assign = _nearest(np.asarray(descs, float), np.asarray(centroids, float))
    return float(np.sum((descs - centroids[assign]) ** 2))


def quantize(vec: np.ndarray, vocab: Vocabulary) -> int:
    """Nearest centroid by L2; ties go to the lowest word id."""
    c = vocab.centroids.astype(np.float64)
    d2 = np.sum((c - np.asarray(vec, dtype=np.float64)) ** 2, axis=1)
    return int(np.argmin(d2))


def quantize_many(vecs: np.ndarray, vocab: Vocabulary) -> np.ndarray:
    if len(vecs) == 0:
        return np.zeros(0, dtype=np.int64)
    return _nearest(np.asarray(vecs, np.float64), vocab.centroids.astype(np.float64))


@dataclass
class InvertedIndex:
    vocab: Vocabulary
    postings: dict[int, list[tuple[int, float]]] = field(default_factory=dict)
    image_paths: dict[int, str] = field(default_factory=dict)
    idf: np.ndarray | None = None
    doc_norms: dict[int, float] = field(default_factory=dict)
    _dirty: bool = True

    def image_tf(self, image_id: int) -> dict[int, float]:
        out = {}
        for word, plist in self.postings.items():
            for img, tf in plist:
                if img == image_id:
                    out[word] = tf
        return out


def index_image(
    idx: InvertedIndex,
    img: ImagePlane,
    image_id: int,
    path: str | None = None,
    max_keypoints: int = 500,
) -> int:
    """Detect, describe and quantize an image into the index.

    Returns the number of quantized descriptors; zero-keypoint images are
    recorded with an empty signature.
    """
    if image_id in idx.image_paths:
        raise ValueError(f"image id {image_id} already indexed")
    descs, _ = detect_and_describe(img, max_keypoints)
    words = quantize_many(descs, idx.vocab)
    idx.image_paths[image_id] = path if path is not None else str(image_id)
    counts: dict[int, int] = {}
    for w in words.tolist():
        counts[w] = counts.get(w, 0) + 1
    for w, c in counts.items():
        idx.postings.setdefault(w, []).append((image_id, np.float32(c)))
    idx._dirty = True
    return len(words)


def commit(idx: InvertedIndex) -> None:
    """Recompute idf weights and document norms after indexing."""
    n_images = len(idx.image_paths)
    k = idx.vocab.k
    idf = np.zeros(k, dtype=np.float64)
    if n_images:
        for w, plist in idx.postings.items():
            df = len({img for img, _ in plist})
            if df:
                idf[w] = np.log(n_images / df)
    # idf is rounded to storage precision so rankings survive save/load
    idx.idf = idf.astype(np.float32)
    _recompute_norms(idx)
    idx._dirty = False


def _recompute_norms(idx: InvertedIndex) -> None:
    norms: dict[int, float] = {img: 0.0 for img in idx.image_paths}
    for w in sorted(idx.postings):
        widf = float(idx.idf[w])
        for img, tf in idx.postings[w]:
            norms[img] += (float(tf) * widf) ** 2
    idx.doc_norms = {img: float(np.sqrt(v)) for img, v in norms.items()}


def query_topk(
    idx: InvertedIndex, img: ImagePlane, k: int = 4, max_keypoints: int = 500
) -> list[tuple[int, float]]:
    """Top-k (image id, cosine score) pairs, best first, ties by ascending id."""
    if idx._dirty:
        commit(idx)
    if not idx.image_paths or k <= 0:
        return []
    descs, _ = detect_and_describe(img, max_keypoints)
    words = quantize_many(descs, idx.vocab)
    q_counts: dict[int, int] = {}
    for w in words.tolist():
        q_counts[w] = q_counts.get(w, 0) + 1
    scores: dict[int, float] = {}
    q_norm_sq = 0.0
    for w in sorted(q_counts):
        widf = float(idx.idf[w])
        qw = q_counts[w] * widf
        q_norm_sq += qw * qw
        if qw == 0.0:
            continue
        for img_id, tf in idx.postings.get(w, []):
            scores[img_id] = scores.get(img_id, 0.0) + qw * float(tf) * widf
    q_norm = float(np.sqrt(q_norm_sq))
    ranked = []
    for img_id in idx.image_paths:
        raw = scores.get(img_id, 0.0)
        denom = idx.doc_norms.get(img_id, 0.0) * q_norm
        ranked.append((img_id, raw / denom if denom > 0 else 0.0))
    ranked.sort(key=lambda t: (-t[1], t[0]))
    return ranked[:k]


# ----------------------------------------------------------------------
# Serialization
# ----------------------------------------------------------------------


def save_index(idx: InvertedIndex, path) -> None:
    if idx._dirty:
        commit(idx)
    k = idx.vocab.k
    parts = [INDEX_MAGIC, struct.pack("<II", INDEX_VERSION, k)]
    parts.append(idx.vocab.centroids.astype("<f4").tobytes())
    image_ids = sorted(idx.image_paths)
    parts.append(struct.pack("<I", len(image_ids)))
    per_image: dict[int, list[tuple[int, float]]] = {i: [] for i in image_ids}
    for w in sorted(idx.postings):
        for img, tf in idx.postings[w]:
            per_image[img].append((w, float(tf)))
    for img in image_ids:
        encoded = idx.image_paths[img].encode("utf-8")
        entries = per_image[img]
        parts.append(struct.pack("<IH", img, len(encoded)))
        parts.append(encoded)
        parts.append(struct.pack("<I", len(entries)))
        for w, tf in entries:
            parts.append(struct.pack("<If", w, tf))
    parts.append(np.asarray(idx.idf, dtype="<f4").tobytes())
    Path(path).write_bytes(b"".join(parts))


def load_index(path) -> InvertedIndex:
    raw = Path(path).read_bytes()
    view = memoryview(raw)
    if len(raw) < 12 or raw[:4] != INDEX_MAGIC:
        raise FormatError(f"{path}: bad index magic")
    version, k = struct.unpack("<II", view[4:12])
    if version != INDEX_VERSION:
        raise FormatError(f"{path}: unsupported index version {version}")
    pos = 12
    need = k * DESC_DIM * 4
    if len(raw) < pos + need + 4:
        raise FormatError(f"{path}: truncated centroid block")
    cents = np.frombuffer(view[pos : pos + need], dtype="<f4").reshape(k, DESC_DIM)
    pos += need
    (n_images,) = struct.unpack("<I", view[pos : pos + 4])
    pos += 4
    idx = InvertedIndex(Vocabulary(cents.copy()))
    try:
        for _ in range(n_images):
            img_id, plen = struct.unpack("<IH", view[pos : pos + 6])
            pos += 6
            pth = bytes(view[pos : pos + plen]).decode("utf-8")
            pos += plen
            (nnz,) = struct.unpack("<I", view[pos : pos + 4])
            pos += 4
            idx.image_paths[img_id] = pth
            for _ in range(nnz):
                w, tf = struct.unpack("<If", view[pos : pos + 8])
                pos += 8
                idx.postings.setdefault(w, []).append((img_id, np.float32(tf)))
    except struct.error as exc:
        raise FormatError(f"{path}: truncated index") from exc
    if len(raw) < pos + 4 * k:
        raise FormatError(f"{path}: truncated idf block")
    idx.idf = np.frombuffer(view[pos : pos + 4 * k], dtype="<f4").copy()
    _recompute_norms(idx)
    idx._dirty = False
    return idx
