import numpy as np
import pytest

from refsr.image import ImagePlane, gaussian_blur
from refsr.io import FormatError
from refsr.retrieval import (
    InvertedIndex,
    Vocabulary,
    build_vocabulary,
    commit,
    index_image,
    kmeans_sse,
    load_index,
    quantize,
    quantize_many,
    query_topk,
    save_index,
)

from conftest import smooth_plane


def gaussian_clusters(k, per_cluster, seed, spread=0.01):
    rng = np.random.default_rng(seed)
    centers = rng.uniform(0, 1, size=(k, 144))
    pts = np.concatenate(
        [c + rng.normal(0, spread, size=(per_cluster, 144)) for c in centers]
    )
    return centers, pts


class TestVocabulary:
    def test_recovers_separated_clusters(self):
        centers, pts = gaussian_clusters(5, 40, seed=1)
        vocab = build_vocabulary(pts, k=5, iters=50, seed=2)
        # each true center should have a learned centroid nearby
        for c in centers:
            d = np.linalg.norm(vocab.centroids.astype(float) - c, axis=1)
            assert d.min() < 0.2

    def test_k_equals_n_gives_singletons(self, rng):
        pts = rng.uniform(0, 1, size=(8, 144))
        vocab = build_vocabulary(pts, k=8, iters=20, seed=3)
        assigned = quantize_many(pts, vocab)
        assert len(set(assigned.tolist())) == 8
        for i, c in enumerate(vocab.centroids.astype(float)):
            d = np.linalg.norm(pts - c, axis=1)
            assert d.min() < 1e-6

    def test_sse_non_increasing(self, rng):
        pts = rng.uniform(0, 1, size=(60, 144))
        sses = []
        for iters in (0, 1, 2, 4, 8, 16):
            vocab = build_vocabulary(pts, k=6, iters=iters, seed=11)
            sses.append(kmeans_sse(pts, vocab.centroids.astype(float)))
        for a, b in zip(sses, sses[1:]):
            assert b <= a + 1e-9

    def test_deterministic(self, rng):
        pts = rng.uniform(0, 1, size=(50, 144))
        v1 = build_vocabulary(pts, k=5, seed=7)
        v2 = build_vocabulary(pts, k=5, seed=7)
        assert np.array_equal(v1.centroids, v2.centroids)

    def test_too_few_descriptors(self, rng):
        with pytest.raises(ValueError):
            build_vocabulary(rng.uniform(size=(3, 144)), k=4)


class TestQuantize:
    def test_exact_centroid(self, rng):
        cents = rng.uniform(0, 1, size=(6, 144)).astype(np.float32)
        vocab = Vocabulary(cents)
        assert quantize(cents[4].astype(float), vocab) == 4

    def test_tie_breaks_to_lowest_id(self):
        cents = np.zeros((6, 144), dtype=np.float32)
        cents[2, 0] = 1.0
        cents[5, 0] = -1.0
        for j in (0, 1, 3, 4):
            cents[j, 1] = 10.0 + j  # keep others far away
        vocab = Vocabulary(cents)
        v = np.zeros(144)  # equidistant to words 2 and 5
        assert quantize(v, vocab) == 2

    def test_matches_linear_scan_oracle(self, rng):
        cents = rng.uniform(0, 1, size=(20, 144)).astype(np.float32)
        vocab = Vocabulary(cents)
        for _ in range(25):
            v = rng.uniform(0, 1, size=144)
            best, best_d = None, np.inf
            for j in range(20):
                d = float(np.sum((cents[j].astype(float) - v) ** 2))
                if d < best_d - 0.0:
                    best, best_d = j, d
            assert quantize(v, vocab) == best


def corpus_plane(i):
    """Distinct textured fixtures: mixed blobs, bars and checkers."""
    rng = np.random.default_rng(1000 + i)
    size = 80
    yy, xx = np.mgrid[0:size, 0:size].astype(float)
    img = np.zeros((size, size))
    kind = i % 3
    if kind == 0:
        for _ in range(12 + i):
            px, py, s = rng.uniform(10, 70), rng.uniform(10, 70), rng.uniform(4, 30)
            img += rng.uniform(0.3, 1.0) * np.exp(
                -((xx - px) ** 2 + (yy - py) ** 2) / s
            )
    elif kind == 1:
        freq = 0.25 + 0.05 * i
        ang = rng.uniform(0.2, 1.2)
        u = np.cos(ang) * xx + np.sin(ang) * yy
        v = -np.sin(ang) * xx + np.cos(ang) * yy
        img = 0.5 + 0.45 * np.sin(freq * u) * np.sin((freq + 0.07) * v)
        img += rng.normal(0, 0.04, size=img.shape)
        img = gaussian_blur(ImagePlane(img - img.min()), 0.6).data
    else:
        cell = 4 + (i % 5)
        img = ((xx // cell + yy // cell) % 2).astype(float)
        img = gaussian_blur(ImagePlane(img), 0.7).data
        img += rng.normal(0, 0.05, size=img.shape)
    img = (img - img.min()) / max(img.max() - img.min(), 1e-9)
    return ImagePlane(img)


def build_corpus_index(n=8, k=32, seed=5):
    from refsr.features import detect_and_describe

    images = [corpus_plane(i) for i in range(n)]
    all_descs = []
    for img in images:
        d, _ = detect_and_describe(img, 150)
        all_descs.append(d)
    vocab = build_vocabulary(np.vstack(all_descs), k=k, iters=25, seed=seed)
    idx = InvertedIndex(vocab)
    for i, img in enumerate(images):
        index_image(idx, img, i, path=f"img_{i}.png", max_keypoints=150)
    commit(idx)
    return idx, images


@pytest.fixture(scope="module")
def corpus():
    return build_corpus_index()


class TestIndex:
    def test_self_retrieval_ranks_first(self, corpus):
        idx, images = corpus
        for i, img in enumerate(images):
            ranked = query_topk(idx, img, k=3, max_keypoints=150)
            assert ranked[0][0] == i
            assert ranked[0][1] == pytest.approx(1.0, abs=1e-9)

    def test_duplicate_id_rejected(self, corpus):
        idx, images = corpus
        with pytest.raises(ValueError):
            index_image(idx, images[0], 0)

    def test_indexing_order_irrelevant(self):
        idx_a, images = build_corpus_index(n=5)
        vocab = idx_a.vocab
        idx_b = InvertedIndex(vocab)
        for i in reversed(range(5)):
            index_image(idx_b, images[i], i, path=f"img_{i}.png", max_keypoints=150)
        commit(idx_b)
        probe = smooth_plane((64, 64), seed=77, sigma=1.0)
        ra = [i for i, _ in query_topk(idx_a, probe, k=5, max_keypoints=150)]
        rb = [i for i, _ in query_topk(idx_b, probe, k=5, max_keypoints=150)]
        assert ra == rb

    def test_blurred_copy_retrieves_source(self, corpus):
        idx, images = corpus
        query = gaussian_blur(images[3], 1.0)
        ranked = [i for i, _ in query_topk(idx, query, k=4, max_keypoints=150)]
        assert 3 in ranked

    def test_k_larger_than_corpus(self, corpus):
        idx, images = corpus
        ranked = query_topk(idx, images[0], k=100, max_keypoints=150)
        assert len(ranked) == len(images)

    def test_empty_index_gives_empty(self, rng):
        vocab = Vocabulary(rng.uniform(size=(4, 144)).astype(np.float32))
        idx = InvertedIndex(vocab)
        commit(idx)
        assert query_topk(idx, smooth_plane((48, 48), 1), k=3) == []


def dense_ranking_oracle(idx, query_img, max_keypoints=150):
    """Brute-force tf-idf cosine ranking from dense vectors."""
    from refsr.features import detect_and_describe

    k = idx.vocab.k
    n = len(idx.image_paths)
    ids = sorted(idx.image_paths)
    tf = np.zeros((n, k))
    for w, plist in idx.postings.items():
        for img, cnt in plist:
            tf[ids.index(img), w] = float(cnt)
    df = (tf > 0).sum(axis=0)
    idf = np.zeros(k)
    nz = df > 0
    idf[nz] = np.log(n / df[nz])
    idf = idf.astype(np.float32).astype(np.float64)  # match stored precision
    docs = tf * idf

    descs, _ = detect_and_describe(query_img, max_keypoints)
    words = quantize_many(descs, idx.vocab)
    q = np.zeros(k)
    for w in words.tolist():
        q[w] += 1.0
    qv = q * idf
    scores = []
    for row, img_id in zip(docs, ids):
        denom = np.linalg.norm(row) * np.linalg.norm(qv)
        scores.append((img_id, float(row @ qv / denom) if denom > 0 else 0.0))
    scores.sort(key=lambda t: (-t[1], t[0]))
    return scores


class TestRankingOracle:
    def test_matches_dense_cosine(self, corpus):
        idx, images = corpus
        for qi in (0, 2, 5):
            query = gaussian_blur(images[qi], 0.8)
            got = query_topk(idx, query, k=len(images), max_keypoints=150)
            want = dense_ranking_oracle(idx, query)
            assert [g[0] for g in got] == [w[0] for w in want]
            for (gi, gs), (wi, ws) in zip(got, want):
                assert gs == pytest.approx(ws, abs=1e-9)


class TestSerialization:
    def test_round_trip_rankings(self, corpus, tmp_path):
        idx, images = corpus
        path = tmp_path / "corpus.bvw"
        save_index(idx, path)
        loaded = load_index(path)
        for qi in (1, 4):
            query = gaussian_blur(images[qi], 0.9)
            a = query_topk(idx, query, k=8, max_keypoints=150)
            b = query_topk(loaded, query, k=8, max_keypoints=150)
            assert a == b
        assert loaded.image_paths == idx.image_paths

    def test_empty_index_round_trips(self, tmp_path, rng):
        vocab = Vocabulary(rng.uniform(size=(4, 144)).astype(np.float32))
        idx = InvertedIndex(vocab)
        commit(idx)
        path = tmp_path / "empty.bvw"
        save_index(idx, path)
        loaded = load_index(path)
        assert loaded.image_paths == {}
        assert np.array_equal(loaded.vocab.centroids, vocab.centroids)

    def test_bad_magic(self, tmp_path):
        path = tmp_path / "bad.bvw"
        path.write_bytes(b"NOPE" + b"\x00" * 64)
        with pytest.raises(FormatError):
            load_index(path)

    def test_truncation(self, corpus, tmp_path):
        idx, _ = corpus
        path = tmp_path / "trunc.bvw"
        save_index(idx, path)
        raw = path.read_bytes()
        path.write_bytes(raw[: len(raw) // 2])
        with pytest.raises(FormatError):
            load_index(path)
