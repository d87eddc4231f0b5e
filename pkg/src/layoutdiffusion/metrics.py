"""Layout quality metrics in both published conventions, plus Fréchet distance.

All geometric metrics work in a unit-square frame: normalized [-1, 1]
components map through v -> (v + 1) / 2, recovering canvas-fraction
coordinates.  Degenerate sizes are clamped to 1e-6 so area ratios stay
finite.  Two conventions are implemented for alignment and overlap; every
reported number is tagged with the convention that produced it.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .data import Layout, to_corner_form
from .exceptions import DataError

SIZE_CLAMP = 1e-6
_LOG_CLAMP = 1.0 - 1e-9


@dataclass(frozen=True)
class MetricFrame:
    """Per-element corner/center coordinates of one layout in [0, 1]^2."""

    left: np.ndarray
    top: np.ndarray
    cx: np.ndarray
    cy: np.ndarray
    right: np.ndarray
    bottom: np.ndarray
    width: np.ndarray
    height: np.ndarray

    @classmethod
    def from_layout(cls, layout: Layout) -> "MetricFrame":
        geom = (layout.geometry + 1.0) / 2.0
        geom[:, 2] = np.maximum(geom[:, 2], SIZE_CLAMP)
        geom[:, 3] = np.maximum(geom[:, 3], SIZE_CLAMP)
        corners = to_corner_form(geom)
        return cls(left=corners[:, 0], top=corners[:, 1], cx=corners[:, 2],
                   cy=corners[:, 3], right=corners[:, 4], bottom=corners[:, 5],
                   width=geom[:, 2], height=geom[:, 3])

    def __len__(self):
        return self.left.shape[0]

    @property
    def area(self) -> np.ndarray:
        return self.width * self.height


def _nearest_gap(coords: np.ndarray) -> np.ndarray:
    """Per element, the distance to the closest other element's coordinate."""
    diff = np.abs(coords[:, None] - coords[None, :])
    np.fill_diagonal(diff, np.inf)
    return diff.min(axis=1)


def alignment_kikuchi(layout: Layout) -> float:
    """Per-element min over six -log(1-gap) terms, averaged, times 100.

    Single-element layouts score 0 by convention.
    """
    frame = MetricFrame.from_layout(layout)
    n = len(frame)
    if n == 1:
        return 0.0
    gaps = np.stack([
        _nearest_gap(frame.left), _nearest_gap(frame.cx), _nearest_gap(frame.right),
        _nearest_gap(frame.top), _nearest_gap(frame.cy), _nearest_gap(frame.bottom),
    ])
    gaps = np.clip(gaps, 0.0, _LOG_CLAMP)
    per_element = (-np.log1p(-gaps)).min(axis=0)
    return float(per_element.mean() * 100.0)


def alignment_blt(layouts: Sequence[Layout], include_y: bool = False) -> float:
    """Sum of per-element nearest L1 gaps on x alignment lines, meaned over layouts.

    No log transform, no x100, no division by element count.  ``include_y``
    extends the published x-only definition with the analogous y lines.
    """
    layouts = list(layouts)
    if not layouts:
        raise DataError("alignment_blt needs at least one layout")
    total = 0.0
    for layout in layouts:
        frame = MetricFrame.from_layout(layout)
        if len(frame) < 2:
            continue
        axes = [(frame.left, frame.cx, frame.right)]
        if include_y:
            axes.append((frame.top, frame.cy, frame.bottom))
        layout_sum = np.zeros(len(frame))
        per_axis = []
        for coords in axes:
            stacked = np.stack([np.abs(c[:, None] - c[None, :]) for c in coords])
            pair_min = stacked.min(axis=0)
            np.fill_diagonal(pair_min, np.inf)
            per_axis.append(pair_min.min(axis=1))
        layout_sum = np.minimum.reduce(per_axis)
        total += float(layout_sum.sum())
    return total / len(layouts)


def _pairwise_intersection(frame: MetricFrame) -> np.ndarray:
    ix = np.clip(np.minimum(frame.right[:, None], frame.right[None, :])
                 - np.maximum(frame.left[:, None], frame.left[None, :]), 0.0, None)
    iy = np.clip(np.minimum(frame.bottom[:, None], frame.bottom[None, :])
                 - np.maximum(frame.top[:, None], frame.top[None, :]), 0.0, None)
    return ix * iy


def overlap_kikuchi(layout: Layout) -> float:
    """Sum over pairs of intersection-over-own-area, divided by N, times 100."""
    return overlap_blt(layout) / len(layout) * 100.0


def overlap_blt(layout: Layout) -> float:
    """Same double sum as the Kikuchi convention, unnormalized and unscaled."""
    frame = MetricFrame.from_layout(layout)
    inter = _pairwise_intersection(frame)
    np.fill_diagonal(inter, 0.0)
    ratios = inter / frame.area[:, None]
    return float(ratios.sum())


def perceptual_iou(layout: Layout) -> float:
    """Area covered by two or more boxes over area covered by at least one.

    Exact, via coordinate-compressed cell coverage counting.
    """
    frame = MetricFrame.from_layout(layout)
    return _coverage_iou(frame.left, frame.top, frame.right, frame.bottom)


def _coverage_iou(left, top, right, bottom) -> float:
    xs = np.unique(np.concatenate([left, right]))
    ys = np.unique(np.concatenate([top, bottom]))
    counts = np.zeros((xs.size - 1, ys.size - 1), dtype=np.int64)
    x_lo = np.searchsorted(xs, left)
    x_hi = np.searchsorted(xs, right)
    y_lo = np.searchsorted(ys, top)
    y_hi = np.searchsorted(ys, bottom)
    for a, b, c, d in zip(x_lo, x_hi, y_lo, y_hi):
        counts[a:b, c:d] += 1
    cell_area = np.diff(xs)[:, None] * np.diff(ys)[None, :]
    union = float(cell_area[counts >= 1].sum())
    if union == 0.0:
        return 0.0
    return float(cell_area[counts >= 2].sum()) / union


# ---------------------------------------------------------------------------
# assignment machinery for Max IoU

GREEDY_MATCH_THRESHOLD = 2000


def _hungarian_min_cost(cost: np.ndarray) -> list:
    """O(n^2 m) potentials-based assignment; needs rows <= cols.

    Returns for each row the matched column index.
    """
    n, m = cost.shape
    INF = float("inf")
    u = [0.0] * (n + 1)
    v = [0.0] * (m + 1)
    match = [0] * (m + 1)  # column -> row, 1-based; 0 = free
    for i in range(1, n + 1):
        match[0] = i
        j0 = 0
        minv = [INF] * (m + 1)
        used = [False] * (m + 1)
        way = [0] * (m + 1)
        while True:
            used[j0] = True
            i0 = match[j0]
            delta = INF
            j1 = 0
            row = cost[i0 - 1]
            for j in range(1, m + 1):
                if used[j]:
                    continue
                cur = row[j - 1] - u[i0] - v[j]
                if cur < minv[j]:
                    minv[j] = cur
                    way[j] = j0
                if minv[j] < delta:
                    delta = minv[j]
                    j1 = j
            for j in range(m + 1):
                if used[j]:
                    u[match[j]] += delta
                    v[j] -= delta
                else:
                    minv[j] -= delta
            j0 = j1
            if match[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            match[j0] = match[j1]
            j0 = j1
    row_to_col = [-1] * n
    for j in range(1, m + 1):
        if match[j]:
            row_to_col[match[j] - 1] = j - 1
    return row_to_col


def _greedy_assignment(weights: np.ndarray):
    order = np.argsort(weights, axis=None)[::-1]
    rows_used = np.zeros(weights.shape[0], dtype=bool)
    cols_used = np.zeros(weights.shape[1], dtype=bool)
    assignment = [-1] * weights.shape[0]
    for flat in order:
        r, c = divmod(int(flat), weights.shape[1])
        if not rows_used[r] and not cols_used[c]:
            assignment[r] = c
            rows_used[r] = True
            cols_used[c] = True
    return assignment


def max_weight_assignment(weights: np.ndarray):
    """Maximum-weight one-to-one assignment of rows to columns.

    Exact (Hungarian) up to GREEDY_MATCH_THRESHOLD per side; a greedy
    fallback is used beyond that.  Weights must be non-negative, so a
    forced perfect matching of the smaller side is also a maximum-weight
    matching.  Returns (row_to_col list, total weight).
    """
    weights = np.asarray(weights, dtype=np.float64)
    if weights.ndim != 2:
        raise ValueError("weights must be a matrix")
    if weights.size and weights.min() < 0:
        raise ValueError("weights must be non-negative")
    if min(weights.shape) == 0:
        return [-1] * weights.shape[0], 0.0

    if max(weights.shape) > GREEDY_MATCH_THRESHOLD:
        assignment = _greedy_assignment(weights)
    elif weights.shape[0] <= weights.shape[1]:
        assignment = _hungarian_min_cost(-weights)
    else:
        col_to_row = _hungarian_min_cost(-weights.T)
        assignment = [-1] * weights.shape[0]
        for col, row in enumerate(col_to_row):
            assignment[row] = col
    total = sum(weights[r, c] for r, c in enumerate(assignment) if c >= 0)
    return assignment, float(total)


def box_iou_matrix(frame_a: MetricFrame, frame_b: MetricFrame,
                   idx_a, idx_b) -> np.ndarray:
    ix = np.clip(np.minimum(frame_a.right[idx_a][:, None], frame_b.right[idx_b][None, :])
                 - np.maximum(frame_a.left[idx_a][:, None], frame_b.left[idx_b][None, :]),
                 0.0, None)
    iy = np.clip(np.minimum(frame_a.bottom[idx_a][:, None], frame_b.bottom[idx_b][None, :])
                 - np.maximum(frame_a.top[idx_a][:, None], frame_b.top[idx_b][None, :]),
                 0.0, None)
    inter = ix * iy
    # Areas from the same corner differences as the intersection, so a box
    # matched with itself scores exactly 1.
    area_a = ((frame_a.right - frame_a.left) * (frame_a.bottom - frame_a.top))[idx_a]
    area_b = ((frame_b.right - frame_b.left) * (frame_b.bottom - frame_b.top))[idx_b]
    union = area_a[:, None] + area_b[None, :] - inter
    return inter / np.maximum(union, 1e-12)


def _label_multiset(layout: Layout) -> tuple:
    labels = layout.labels
    if labels is None:
        raise DataError("max IoU requires categorical layouts")
    return tuple(sorted(labels.tolist()))


def pair_max_iou(layout_a: Layout, layout_b: Layout) -> float:
    """Best-assignment mean box IoU between two layouts with equal label multisets."""
    if _label_multiset(layout_a) != _label_multiset(layout_b):
        raise DataError("pair_max_iou requires identical label multisets")
    frame_a = MetricFrame.from_layout(layout_a)
    frame_b = MetricFrame.from_layout(layout_b)
    labels_a = layout_a.labels
    labels_b = layout_b.labels
    total = 0.0
    for label in np.unique(labels_a):
        idx_a = np.where(labels_a == label)[0]
        idx_b = np.where(labels_b == label)[0]
        weights = box_iou_matrix(frame_a, frame_b, idx_a, idx_b)
        _, value = max_weight_assignment(weights)
        total += value
    return total / len(layout_a)


def max_iou(generated: Sequence[Layout], reference: Sequence[Layout]) -> float:
    """Collection similarity: optimally match layouts with equal label multisets.

    Score is the summed matched pair_max_iou divided by the reference size;
    unmatched layouts contribute zero.
    """
    generated, reference = list(generated), list(reference)
    if not generated or not reference:
        raise DataError("max_iou needs non-empty collections")
    gen_groups: dict = {}
    for i, layout in enumerate(generated):
        gen_groups.setdefault(_label_multiset(layout), []).append(i)
    ref_groups: dict = {}
    for j, layout in enumerate(reference):
        ref_groups.setdefault(_label_multiset(layout), []).append(j)

    total = 0.0
    for key, gen_idx in gen_groups.items():
        ref_idx = ref_groups.get(key)
        if not ref_idx:
            continue
        weights = np.array([[pair_max_iou(generated[i], reference[j]) for j in ref_idx]
                            for i in gen_idx])
        _, value = max_weight_assignment(weights)
        total += value
    return total / len(reference)


# ---------------------------------------------------------------------------
# Fréchet distance


@dataclass(frozen=True)
class FeatureSet:
    """Per-layout feature matrix with a provenance tag for the extractor."""

    features: np.ndarray
    provenance: str = "unknown"

    def __post_init__(self):
        feats = np.asarray(self.features, dtype=np.float64)
        if feats.ndim != 2:
            raise DataError("features must be [num_layouts, feat_dim]")
        if not np.all(np.isfinite(feats)):
            raise DataError("features must be finite")
        if feats.shape[0] < feats.shape[1] + 1:
            raise DataError(
                f"need at least feat_dim+1 = {feats.shape[1] + 1} layouts for a "
                f"well-posed covariance, got {feats.shape[0]}"
            )
        object.__setattr__(self, "features", feats)


def _psd_sqrt(matrix: np.ndarray) -> np.ndarray:
    vals, vecs = np.linalg.eigh((matrix + matrix.T) / 2.0)
    vals = np.clip(vals, 0.0, None)
    return (vecs * np.sqrt(vals)) @ vecs.T


def frechet_gaussian(mu_a, cov_a, mu_b, cov_b) -> float:
    """Fréchet distance between two Gaussians, PSD-safe via eigendecompositions."""
    mu_a, mu_b = np.asarray(mu_a, dtype=np.float64), np.asarray(mu_b, dtype=np.float64)
    cov_a = np.atleast_2d(np.asarray(cov_a, dtype=np.float64))
    cov_b = np.atleast_2d(np.asarray(cov_b, dtype=np.float64))
    diff = mu_a - mu_b
    sqrt_a = _psd_sqrt(cov_a)
    product = sqrt_a @ cov_b @ sqrt_a
    vals = np.linalg.eigvalsh((product + product.T) / 2.0)
    # Rank-deficient products put eigen-noise of order eps*|M| at the true
    # zeros; sqrt would amplify it to ~1e-8 per mode, so truncate it (this
    # also zeroes every negative eigenvalue).
    cutoff = max(1e-12 * float(vals.max(initial=0.0)), 0.0)
    vals = np.where(vals < cutoff, 0.0, vals)
    trace_sqrt = float(np.sqrt(vals).sum())
    return float(diff @ diff + np.trace(cov_a) + np.trace(cov_b) - 2.0 * trace_sqrt)


def frechet_distance(set_a: FeatureSet, set_b: FeatureSet) -> float:
    if set_a.features.shape[1] != set_b.features.shape[1]:
        raise DataError("feature sets must share feat_dim")
    mu_a = set_a.features.mean(axis=0)
    mu_b = set_b.features.mean(axis=0)
    cov_a = np.cov(set_a.features, rowvar=False)
    cov_b = np.cov(set_b.features, rowvar=False)
    return frechet_gaussian(mu_a, cov_a, mu_b, cov_b)


def trivial_features(layouts: Sequence[Layout], n_max: int, num_classes: int) -> FeatureSet:
    """Smoke-test extractor: flattened padded geometry plus label histogram.

    Useful only for exercising the Fréchet kernel; not comparable to any
    published feature space.
    """
    rows = []
    for layout in layouts:
        if len(layout) > n_max:
            raise DataError(f"layout {layout.id!r} exceeds n_max {n_max}")
        geom = np.zeros((n_max, 4))
        geom[: len(layout)] = layout.geometry
        labels = layout.labels
        if labels is None:
            raise DataError("trivial features require categorical layouts")
        hist = np.bincount(labels, minlength=num_classes).astype(np.float64)
        rows.append(np.concatenate([geom.reshape(-1), hist]))
    return FeatureSet(features=np.stack(rows), provenance="trivial-geometry-histogram")


# ---------------------------------------------------------------------------
# report assembly


def _tagged(value, convention, per_layout=None):
    entry = {"convention": convention, "value": value}
    if per_layout is not None:
        entry["per_layout"] = per_layout
    return entry


def evaluate_collections(generated: Sequence[Layout], reference: Sequence[Layout],
                         features: Optional[tuple] = None,
                         include_y_alignment: bool = False) -> dict:
    """Full metric report over two collections; every number carries its convention.

    ``features`` is an optional (FeatureSet, FeatureSet) pair for the
    Fréchet distance.  Max IoU is included only when both sides are
    categorical.
    """
    generated, reference = list(generated), list(reference)
    if not generated or not reference:
        raise DataError("evaluation needs non-empty collections")

    def per_layout(fn, layouts):
        return [float(fn(l)) for l in layouts]

    gen_align = per_layout(alignment_kikuchi, generated)
    ref_align = per_layout(alignment_kikuchi, reference)
    gen_over_k = per_layout(overlap_kikuchi, generated)
    ref_over_k = per_layout(overlap_kikuchi, reference)
    gen_over_b = per_layout(overlap_blt, generated)
    ref_over_b = per_layout(overlap_blt, reference)
    gen_iou = per_layout(perceptual_iou, generated)
    ref_iou = per_layout(perceptual_iou, reference)

    report = {
        "counts": {"generated": len(generated), "reference": len(reference)},
        "alignment": {
            "kikuchi": {
                "generated": _tagged(float(np.mean(gen_align)), "kikuchi", gen_align),
                "reference": _tagged(float(np.mean(ref_align)), "kikuchi", ref_align),
            },
            "blt": {
                "generated": _tagged(alignment_blt(generated, include_y_alignment), "blt"),
                "reference": _tagged(alignment_blt(reference, include_y_alignment), "blt"),
            },
        },
        "overlap": {
            "kikuchi": {
                "generated": _tagged(float(np.mean(gen_over_k)), "kikuchi", gen_over_k),
                "reference": _tagged(float(np.mean(ref_over_k)), "kikuchi", ref_over_k),
            },
            "blt": {
                "generated": _tagged(float(np.mean(gen_over_b)), "blt", gen_over_b),
                "reference": _tagged(float(np.mean(ref_over_b)), "blt", ref_over_b),
            },
        },
        "perceptual_iou": {
            "generated": _tagged(float(np.mean(gen_iou)), "blt", gen_iou),
            "reference": _tagged(float(np.mean(ref_iou)), "blt", ref_iou),
        },
    }

    categorical = all(l.attribute_mode == "categorical" for l in generated + reference)
    if categorical:
        report["max_iou"] = _tagged(max_iou(generated, reference), "kikuchi")

    if features is not None:
        set_a, set_b = features
        report["frechet"] = {
            "convention": "kikuchi",
            "value": frechet_distance(set_a, set_b),
            "feature_provenance": [set_a.provenance, set_b.provenance],
        }
    return report
