"""Adaptive patch matching and multi-reference detail fusion.

The intermediate SR image is split into overlapping query patches on a
stride-4 grid. Each query searches a windowed neighborhood of every
photometrically transferred reference for its best match under a
DC-removed pixel + gradient distance, computed on the 8-bit value range.
Patch sizes shrink when the best distance per pixel (GMSE) is poor, and
matched detail values are blended per pixel with exp(-gmse/100) weights.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from .image import ImagePlane, add_maps

MATCH_VALUE_SCALE = 255.0


class TransferError(ValueError):
    """Photometric transfer cannot normalize a (near-)constant reference."""


@dataclass
class MatchParams:
    rho: float = 10.0
    size_ladder: tuple[int, ...] = (21, 17, 13, 9)
    size_thresholds: tuple[float, ...] = (200.0, 500.0, 800.0)
    query_stride: int = 4
    window_factor: int = 3  # search window edge, in units of patch size
    weight_scale: float = 100.0
    reject_gmse: float = 1500.0

    def __post_init__(self):
        if len(self.size_ladder) != len(self.size_thresholds) + 1:
            raise ValueError("need one more ladder size than thresholds")
        if any(a <= b for a, b in zip(self.size_ladder, self.size_ladder[1:])):
            raise ValueError("ladder sizes must strictly decrease")
        if any(a >= b for a, b in zip(self.size_thresholds, self.size_thresholds[1:])):
            raise ValueError("thresholds must strictly increase")
        if min(self.size_ladder) < 3 or self.query_stride < 1:
            raise ValueError("sizes and stride must be positive")
        if any(s % 2 == 0 for s in self.size_ladder):
            raise ValueError("ladder sizes must be odd")
        if self.rho < 0 or self.weight_scale <= 0 or self.reject_gmse <= 0:
            raise ValueError("rho, weight_scale and reject_gmse must be positive")


@dataclass
class PatchMatch:
    query_center: tuple[int, int]  # (x, y) in the target
    ref_id: int
    match_center: tuple[int, int]  # (x, y) in the reference
    size: int
    gmse: float


@dataclass
class MatchSet:
    """Accepted matches per reference, query centers on the stride grid."""

    entries: list[tuple[int, list[PatchMatch]]] = field(default_factory=list)

    def total_matches(self) -> int:
        return sum(len(m) for _, m in self.entries)


# ----------------------------------------------------------------------
# Photometric transfer
# ----------------------------------------------------------------------


def photometric_transfer(ref_int: ImagePlane, target: ImagePlane) -> ImagePlane:
    """Rescale a reference plane to the target's global mean and std.

    Output values may leave [0,1]; they are kept as-is. A reference with
    (near-)zero spread cannot be normalized and raises TransferError.
    """
    sigma_ref = float(ref_int.data.std())
    if sigma_ref <= 1e-8:
        raise TransferError("reference plane is constant")
    mean_ref = float(ref_int.data.mean())
    out = (ref_int.data - mean_ref) * (float(target.data.std()) / sigma_ref) + float(
        target.data.mean()
    )
    return ImagePlane(out)


# ----------------------------------------------------------------------
# Patch distance
# ----------------------------------------------------------------------


def _patch_gradients(p: np.ndarray):
    pad = np.pad(p, 1, mode="edge")
    gx = (pad[1:-1, 2:] - pad[1:-1, :-2]) / 2.0
    gy = (pad[2:, 1:-1] - pad[:-2, 1:-1]) / 2.0
    return gx, gy


def patch_distance(p: np.ndarray, q: np.ndarray, rho: float = 10.0) -> float:
    """DC-removed squared pixel distance plus rho-weighted gradient distance.

    Inputs are [0,1] patches; the computation runs on the 8-bit value range.
    """
    if p.shape != q.shape:
        raise ValueError(f"patch size mismatch {p.shape} vs {q.shape}")
    ps = p * MATCH_VALUE_SCALE
    qs = q * MATCH_VALUE_SCALE
    phat = ps - ps.mean()
    qhat = qs - qs.mean()
    pixel_term = float(np.sum((phat - qhat) ** 2))
    pgx, pgy = _patch_gradients(ps)
    qgx, qgy = _patch_gradients(qs)
    grad_term = float(np.sum((pgx - qgx) ** 2) + np.sum((pgy - qgy) ** 2))
    return pixel_term + rho * grad_term


def _batch_gradients(stack: np.ndarray):
    pad = np.pad(stack, ((0, 0), (1, 1), (1, 1)), mode="edge")
    gx = (pad[:, 1:-1, 2:] - pad[:, 1:-1, :-2]) / 2.0
    gy = (pad[:, 2:, 1:-1] - pad[:, :-2, 1:-1]) / 2.0
    return gx, gy


def _batch_distances(query255: np.ndarray, cands255: np.ndarray, rho: float):
    """Distances between one query patch and a stack of candidates."""
    qhat = query255 - query255.mean()
    chat = cands255 - cands255.mean(axis=(1, 2), keepdims=True)
    pixel = np.sum((chat - qhat) ** 2, axis=(1, 2))
    qgx, qgy = _patch_gradients(query255)
    cgx, cgy = _batch_gradients(cands255)
    grad = np.sum((cgx - qgx) ** 2, axis=(1, 2)) + np.sum((cgy - qgy) ** 2, axis=(1, 2))
    return pixel + rho * grad


# ----------------------------------------------------------------------
# Search
# ----------------------------------------------------------------------


class _RefWindows:
    """Per-size sliding windows over a scaled reference plane."""

    def __init__(self, ref255: np.ndarray, valid: np.ndarray | None):
        self.ref255 = ref255
        self.valid = valid
        self._cache: dict[int, tuple[np.ndarray, np.ndarray | None]] = {}

    def for_size(self, size: int):
        if size not in self._cache:
            h, w = self.ref255.shape
            if h < size or w < size:
                self._cache[size] = (None, None)
            else:
                win = sliding_window_view(self.ref255, (size, size))
                ok = None
                if self.valid is not None:
                    ok = sliding_window_view(self.valid, (size, size)).all(axis=(2, 3))
                self._cache[size] = (win, ok)
        return self._cache[size]


def _candidate_offsets(size: int, coarse: bool):
    if coarse:
        step = size // 3
        reach = (size // step) * step
        offs = range(-reach, reach + 1, step)
    else:
        step = size // 3
        offs = range(-(step - 1), step)
    return [(dy, dx) for dy in offs for dx in offs]  # (y, x) sorted


def _best_candidate(query255, center, size, windows: _RefWindows, rho, offsets):
    """Smallest-distance candidate among in-bounds offsets of `center`.

    Candidates are evaluated in ascending (y, x) order, so exact ties keep
    the lexicographically smallest center.
    """
    win, ok = windows.for_size(size)
    if win is None:
        return None
    half = size // 2
    cx, cy = center
    max_y = windows.ref255.shape[0] - size
    max_x = windows.ref255.shape[1] - size
    tls = []
    for dy, dx in offsets:
        ty, tx = cy + dy - half, cx + dx - half
        if 0 <= ty <= max_y and 0 <= tx <= max_x and (ok is None or ok[ty, tx]):
            tls.append((ty, tx))
    if not tls:
        return None
    tl = np.array(tls)
    cands = win[tl[:, 0], tl[:, 1]]
    dists = _batch_distances(query255, cands, rho)
    best = int(np.argmin(dists))  # first minimum = smallest (y, x)
    ty, tx = tls[best]
    return (tx + half, ty + half), float(dists[best])


def _search_one(query255, center, size, windows, rho):
    coarse = _best_candidate(
        query255, center, size, windows, rho, _candidate_offsets(size, True)
    )
    if coarse is None:
        return None
    j0, d0 = coarse
    fine_offsets = _candidate_offsets(size, False)
    fine = _best_candidate(query255, j0, size, windows, rho, fine_offsets)
    if fine is None or fine[1] > d0:
        return j0, d0
    return fine


def match_one(
    query_center: tuple[int, int],
    size: int,
    target: ImagePlane,
    ref: ImagePlane,
    params: MatchParams | None = None,
    ref_valid: np.ndarray | None = None,
) -> PatchMatch | None:
    """Best reference match for one query patch, or None when nothing fits.

    A coarse scan at stride size//3 over a window three patch sizes wide
    picks a candidate; a stride-1 scan of its surrounding cell refines it.
    """
    params = params or MatchParams()
    cx, cy = query_center
    half = size // 2
    if not (
        half <= cx < target.width - half and half <= cy < target.height - half
    ):
        raise ValueError(f"query patch at {query_center} size {size} exits the target")
    q255 = (
        target.data[cy - half : cy + half + 1, cx - half : cx + half + 1]
        * MATCH_VALUE_SCALE
    )
    windows = _RefWindows(ref.data * MATCH_VALUE_SCALE, ref_valid)
    found = _search_one(q255, query_center, size, windows, params.rho)
    if found is None:
        return None
    j, d = found
    return PatchMatch(query_center, 0, j, size, d / float(size * size))


# ----------------------------------------------------------------------
# Adaptive sizing and whole-image matching
# ----------------------------------------------------------------------


def adapt_size(g_min: float, params: MatchParams | None = None) -> int:
    """Patch size as a step function of the best GMSE seen at full size."""
    if g_min < 0:
        raise ValueError("GMSE must be non-negative")
    params = params or MatchParams()
    for size, threshold in zip(params.size_ladder, params.size_thresholds):
        if g_min <= threshold:
            return size
    return params.size_ladder[-1]


def _grid_positions(extent: int, size: int, stride: int) -> list[int]:
    last = extent - size
    positions = list(range(0, last + 1, stride))
    if positions and positions[-1] != last:
        positions.append(last)
    return positions


def query_grid(width: int, height: int, size: int, stride: int):
    """Centers of the stride grid of size x size query patches."""
    half = size // 2
    xs = [o + half for o in _grid_positions(width, size, stride)]
    ys = [o + half for o in _grid_positions(height, size, stride)]
    return [(x, y) for y in ys for x in xs]


def match_image(
    target: ImagePlane,
    refs: list[ImagePlane],
    params: MatchParams | None = None,
    ref_ids: list[int] | None = None,
    ref_valid: list[np.ndarray | None] | None = None,
) -> MatchSet:
    """Match every query-grid patch against every reference.

    Matching runs at the largest ladder size that fits; each query's size is
    then adapted from its best full-size GMSE and re-matched once if smaller.
    Matches worse than reject_gmse are discarded.
    """
    params = params or MatchParams()
    if ref_ids is None:
        ref_ids = list(range(len(refs)))
    if ref_valid is None:
        ref_valid = [None] * len(refs)
    if len(ref_ids) != len(refs) or len(ref_valid) != len(refs):
        raise ValueError("refs, ref_ids and ref_valid lengths differ")

    init_size = None
    for size in params.size_ladder:
        if size <= min(target.width, target.height):
            init_size = size
            break
    result = MatchSet()
    if init_size is None:
        result.entries = [(rid, []) for rid in ref_ids]
        return result

    centers = query_grid(target.width, target.height, init_size, params.query_stride)
    target255 = target.data * MATCH_VALUE_SCALE
    smaller = [s for s in params.size_ladder if s < init_size]

    for ref, rid, valid in zip(refs, ref_ids, ref_valid):
        if ref.shape != target.shape:
            raise ValueError("references must share the target pixel grid")
        windows = _RefWindows(ref.data * MATCH_VALUE_SCALE, valid)
        matches = []
        for cx, cy in centers:
            half = init_size // 2
            q255 = target255[cy - half : cy + half + 1, cx - half : cx + half + 1]
            found = _search_one(q255, (cx, cy), init_size, windows, params.rho)
            if found is None:
                continue
            j, d = found
            size = init_size
            gmse = d / float(init_size * init_size)
            new_size = adapt_size(gmse, params)
            if new_size < init_size and new_size in smaller:
                half2 = new_size // 2
                q2 = target255[
                    cy - half2 : cy + half2 + 1, cx - half2 : cx + half2 + 1
                ]
                refined = _search_one(q2, (cx, cy), new_size, windows, params.rho)
                if refined is not None:
                    j, d = refined
                    size = new_size
                    gmse = d / float(new_size * new_size)
            if gmse <= params.reject_gmse:
                matches.append(PatchMatch((cx, cy), rid, j, size, gmse))
        result.entries.append((rid, matches))
    return result


# ----------------------------------------------------------------------
# Fusion
# ----------------------------------------------------------------------


def fuse(
    match_set: MatchSet,
    ehf_maps: list[ImagePlane],
    out_w: int,
    out_h: int,
    weight_scale: float = 100.0,
) -> ImagePlane:
    """Per-pixel weighted blend of matched detail values.

    Every accepted patch contributes its reference's detail values to the
    pixels it covers, weighted by exp(-gmse/weight_scale); pixels covered by
    no match stay zero. Accumulation runs in ascending reference id, then
    query grid order, so the result is independent of input ordering.
    """
    if len(ehf_maps) != len(match_set.entries):
        raise ValueError("one detail map per reference entry required")
    num = np.zeros((out_h, out_w))
    den = np.zeros((out_h, out_w))
    order = sorted(range(len(match_set.entries)), key=lambda i: match_set.entries[i][0])
    for idx in order:
        _, matches = match_set.entries[idx]
        ehf = ehf_maps[idx].data
        for m in matches:
            half = m.size // 2
            qx, qy = m.query_center
            jx, jy = m.match_center
            w = math.exp(-m.gmse / weight_scale)
            num[qy - half : qy + half + 1, qx - half : qx + half + 1] += (
                w * ehf[jy - half : jy + half + 1, jx - half : jx + half + 1]
            )
            den[qy - half : qy + half + 1, qx - half : qx + half + 1] += w
    covered = den > 0
    out = np.zeros((out_h, out_w))
    out[covered] = num[covered] / den[covered]
    return ImagePlane(out)


def coverage_fraction_zero(match_set: MatchSet, out_w: int, out_h: int) -> float:
    """Fraction of pixels no accepted match covers."""
    covered = np.zeros((out_h, out_w), dtype=bool)
    for _, matches in match_set.entries:
        for m in matches:
            half = m.size // 2
            qx, qy = m.query_center
            covered[qy - half : qy + half + 1, qx - half : qx + half + 1] = True
    return float(1.0 - covered.mean())


def compensate(intermediate: ImagePlane, fused: ImagePlane) -> ImagePlane:
    """Final composition: add the fused detail and clamp to [0,1]."""
    summed = add_maps(intermediate, fused)
    return ImagePlane(np.clip(summed.data, 0.0, 1.0))


def dump_matches(match_set: MatchSet) -> str:
    """Diagnostic text: one line per match (ref, query, match, size, gmse)."""
    lines = []
    for rid, matches in match_set.entries:
        for m in matches:
            qx, qy = m.query_center
            jx, jy = m.match_center
            lines.append(f"{rid} {qx} {qy} {jx} {jy} {m.size} {m.gmse:.6f}")
    return "\n".join(lines) + ("\n" if lines else "")
