"""Decision stumps, boosted strong classifiers, cascade training and detection.

A detection window is described by a fixed-length feature vector: the window
is split into a grid of cells, and for every (cell, block geometry) pair a
64-bin rank histogram of MB-LBP codes is appended, each bin normalized by
the cell's footprint-site count so every component lies in [0, 1]. Stumps
threshold single components; stages are AdaBoost-weighted stump sums with a
calibrated pass threshold; the cascade rejects a window at the first failing
stage.
"""

from __future__ import annotations

import math
import os
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np

from .features import (
    RANK_HISTOGRAM_BINS,
    BlockGeometry,
    RankTable,
    build_rank_table,
    mb_lbp_code_map,
    mb_lbp_histogram,
)
from .imaging import Frame, IntegralImage, Rect, integral, round_half_up

MODEL_MAGIC = "mblbp-cascade"
MODEL_VERSION = "v1"

DEFAULT_GRID = 3
DEFAULT_GEOMETRIES = (1, 2, 3)

# weighted error clamp keeps alpha finite on perfectly separated rounds
_EPS_CLAMP = 1e-10


@dataclass(frozen=True)
class Stump:
    """Single-feature threshold test: -1 if x_i < threshold else +1, times polarity."""

    feature_index: int
    threshold: float
    polarity: int

    def __post_init__(self):
        if self.feature_index < 0:
            raise ValueError(f"feature_index must be >= 0, got {self.feature_index}")
        if self.polarity not in (-1, 1):
            raise ValueError(f"polarity must be +1 or -1, got {self.polarity}")


@dataclass(frozen=True)
class StrongClassifier:
    """Weighted stump ensemble; label is +1 iff the score reaches stage_threshold."""

    stumps: tuple[tuple[Stump, float], ...]
    stage_threshold: float = 0.0


@dataclass(frozen=True)
class Detection:
    """Cluster of accepted windows merged into one axis-aligned box."""

    rect: Rect
    score: float
    cluster_count: int

    def __post_init__(self):
        if self.cluster_count < 1:
            raise ValueError(f"cluster_count must be >= 1, got {self.cluster_count}")


@dataclass(frozen=True)
class CascadeModel:
    """Ordered rejection stages plus the feature layout they were trained on."""

    stages: tuple[StrongClassifier, ...]
    window_w: int
    window_h: int
    rank_table: RankTable
    grid: int = DEFAULT_GRID
    geometries: tuple[int, ...] = DEFAULT_GEOMETRIES

    def __post_init__(self):
        if self.grid < 1:
            raise ValueError(f"grid must be >= 1, got {self.grid}")
        if not self.geometries:
            raise ValueError("geometry set must not be empty")
        if self.window_w // self.grid < 3 or self.window_h // self.grid < 3:
            raise ValueError(
                f"window {self.window_w}x{self.window_h} too small for a "
                f"{self.grid}x{self.grid} cell grid with 3x3 footprints"
            )
        counts = [len(s.stumps) for s in self.stages]
        if any(a > b for a, b in zip(counts, counts[1:])):
            raise ValueError(f"per-stage stump counts must be nondecreasing, got {counts}")

    @property
    def feature_count(self) -> int:
        return self.grid * self.grid * len(self.geometries) * RANK_HISTOGRAM_BINS


def weak_classify(s: Stump, x: np.ndarray) -> int:
    """Stump output on one feature vector."""
    if s.feature_index >= len(x):
        raise IndexError(f"feature_index {s.feature_index} out of range for D={len(x)}")
    base = -1 if x[s.feature_index] < s.threshold else 1
    return s.polarity * base


def strong_classify(h: StrongClassifier, x: np.ndarray) -> tuple[float, int]:
    """(score, label) with label +1 iff score >= stage_threshold (ties pass)."""
    score = 0.0
    for stump, alpha in h.stumps:
        score += alpha * weak_classify(stump, x)
    label = 1 if score >= h.stage_threshold else -1
    return score, label


def _presort(xs: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Per-column sample order, candidate thresholds and validity mask.

    Candidate k splits the sorted column after its first k samples; its
    threshold is the midpoint of the straddled values (sentinels one unit
    past the extremes at k=0 and k=n). Midpoints between equal values are
    masked out.
    """
    n, d = xs.shape
    order = np.argsort(xs, axis=0, kind="stable")
    svals = np.take_along_axis(xs, order, axis=0)
    thresholds = np.empty((n + 1, d))
    thresholds[0] = svals[0] - 1.0
    thresholds[n] = svals[n - 1] + 1.0
    valid = np.ones((n + 1, d), dtype=bool)
    if n > 1:
        thresholds[1:n] = (svals[: n - 1] + svals[1:]) / 2.0
        valid[1:n] = svals[: n - 1] != svals[1:]
    return order, thresholds, valid


def _best_stump(
    order: np.ndarray,
    thresholds: np.ndarray,
    valid: np.ndarray,
    labels: np.ndarray,
    weights: np.ndarray,
) -> tuple[Stump, float]:
    """Minimum-weighted-error stump over all (feature, threshold, polarity).

    Ties break by (error, feature_index, threshold, polarity +1 first).
    """
    n, d = order.shape
    sorted_labels = labels[order]
    sorted_weights = weights[order]
    pos_w = np.where(sorted_labels > 0, sorted_weights, 0.0)
    neg_w = sorted_weights - pos_w
    cum_pos = np.zeros((n + 1, d))
    cum_neg = np.zeros((n + 1, d))
    np.cumsum(pos_w, axis=0, out=cum_pos[1:])
    np.cumsum(neg_w, axis=0, out=cum_neg[1:])
    total = cum_pos[n] + cum_neg[n]
    # split k, polarity +1: first k samples labeled -1, the rest +1
    err_plus = np.where(valid, cum_pos + (cum_neg[n] - cum_neg), np.inf)
    err_minus = np.where(valid, total - (cum_pos + (cum_neg[n] - cum_neg)), np.inf)
    errs = np.stack((err_plus, err_minus))
    col_err = errs.min(axis=(0, 1))
    at_err = errs == col_err
    thr_b = np.broadcast_to(thresholds, errs.shape)
    col_thr = np.where(at_err, thr_b, np.inf).min(axis=(0, 1))
    plus_wins = (at_err[0] & (thresholds == col_thr)).any(axis=0)
    col = int(np.argmin(col_err))
    polarity = 1 if plus_wins[col] else -1
    stump = Stump(feature_index=col, threshold=float(col_thr[col]), polarity=polarity)
    return stump, float(col_err[col])


def _stump_predict(stump: Stump, xs: np.ndarray) -> np.ndarray:
    base = np.where(xs[:, stump.feature_index] < stump.threshold, -1, 1)
    return stump.polarity * base


def train_stump(xs: np.ndarray, labels: np.ndarray, weights: np.ndarray) -> Stump:
    """Best single stump under weighted 0/1 error.

    Single-class input returns a sentinel stump classifying everything as
    that class.
    """
    xs = np.asarray(xs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    weights = np.asarray(weights, dtype=np.float64)
    if weights.sum() <= 0.0:
        raise ValueError("weights must have positive sum")
    if np.all(labels > 0):
        return Stump(0, float(xs[:, 0].min()) - 1.0, 1)
    if np.all(labels < 0):
        return Stump(0, float(xs[:, 0].max()) + 1.0, 1)
    order, thresholds, valid = _presort(xs)
    stump, _ = _best_stump(order, thresholds, valid, labels, weights)
    return stump


def train_strong(xs: np.ndarray, labels: np.ndarray, rounds: int) -> StrongClassifier:
    """AdaBoost over decision stumps; stage_threshold starts at 0."""
    xs = np.asarray(xs, dtype=np.float64)
    labels = np.asarray(labels, dtype=np.int64)
    if rounds < 1:
        raise ValueError(f"rounds must be >= 1, got {rounds}")
    if np.all(labels > 0) or np.all(labels < 0):
        raise ValueError("training set must contain both classes")
    n = len(xs)
    weights = np.full(n, 1.0 / n)
    order, thresholds, valid = _presort(xs)
    stumps = []
    for _ in range(rounds):
        stump, err = _best_stump(order, thresholds, valid, labels, weights)
        err = min(max(err, _EPS_CLAMP), 1.0 - _EPS_CLAMP)
        alpha = 0.5 * math.log((1.0 - err) / err)
        stumps.append((stump, alpha))
        predictions = _stump_predict(stump, xs)
        weights = weights * np.exp(-alpha * labels * predictions)
        weights /= weights.sum()
    return StrongClassifier(stumps=tuple(stumps), stage_threshold=0.0)


def calibrate_stage(
    h: StrongClassifier, positive_scores: Sequence[float], mhr: float
) -> StrongClassifier:
    """Raise stage_threshold as far as possible while passing >= MHR of positives."""
    scores = sorted(float(s) for s in positive_scores)
    n = len(scores)
    if n == 0:
        raise ValueError("calibration needs at least one positive score")
    if not 0.0 < mhr <= 1.0:
        raise ValueError(f"MHR must lie in (0, 1], got {mhr}")
    k = n - math.ceil(mhr * n)
    while k + 1 < n and (n - (k + 1)) / n >= mhr:
        k += 1
    while k > 0 and (n - k) / n < mhr:
        k -= 1
    return replace(h, stage_threshold=scores[max(k, 0)])


def _cell_rects(window: Rect, grid: int) -> list[Rect]:
    """Row-major grid cells partitioning the window (sizes differ by <= 1 px)."""
    xs = [window.x + (i * window.w) // grid for i in range(grid + 1)]
    ys = [window.y + (j * window.h) // grid for j in range(grid + 1)]
    return [
        Rect(xs[i], ys[j], xs[i + 1] - xs[i], ys[j + 1] - ys[j])
        for j in range(grid)
        for i in range(grid)
    ]


def _scaled_geometries(model: CascadeModel, win_w: int, win_h: int) -> list[BlockGeometry]:
    """Block geometries for a window of the given size.

    Cell sizes scale with the window and are clamped so a 3x3 footprint fits
    in the smallest grid cell.
    """
    min_cell_w = win_w // model.grid
    min_cell_h = win_h // model.grid
    if min_cell_w < 3 or min_cell_h < 3:
        raise ValueError(f"window {win_w}x{win_h} too small for grid {model.grid}")
    sx = win_w / model.window_w
    sy = win_h / model.window_h
    out = []
    for g in model.geometries:
        bw = min(max(1, round_half_up(g * sx)), min_cell_w // 3)
        bh = min(max(1, round_half_up(g * sy)), min_cell_h // 3)
        out.append(BlockGeometry(bw, bh))
    return out


def window_features(model: CascadeModel, ii: IntegralImage, window: Rect) -> np.ndarray:
    """Feature vector of one window: per (cell, geometry) normalized rank histograms."""
    if window.right > ii.width or window.bottom > ii.height:
        raise ValueError(f"window {window} exceeds {ii.width}x{ii.height} image")
    cells = _cell_rects(window, model.grid)
    geoms = _scaled_geometries(model, window.w, window.h)
    vec = np.empty(model.feature_count)
    pos = 0
    for cell in cells:
        for g in geoms:
            hist = mb_lbp_histogram(ii, cell, g, model.rank_table)
            sites = (cell.w - g.footprint_w + 1) * (cell.h - g.footprint_h + 1)
            vec[pos : pos + RANK_HISTOGRAM_BINS] = hist / sites
            pos += RANK_HISTOGRAM_BINS
    return vec


def classify_window(model: CascadeModel, ii: IntegralImage, window: Rect) -> tuple[bool, float]:
    """Run the cascade on one window; rejects at the first failing stage."""
    accepted, score, _ = classify_window_detailed(model, ii, window)
    return accepted, score


def classify_window_detailed(
    model: CascadeModel, ii: IntegralImage, window: Rect
) -> tuple[bool, float, int]:
    """Like classify_window, also reporting how many stages were evaluated."""
    x = window_features(model, ii, window)
    score = 0.0
    evaluated = 0
    for stage in model.stages:
        score, label = strong_classify(stage, x)
        evaluated += 1
        if label < 0:
            return False, score, evaluated
    return True, score, evaluated


def train_cascade(
    positives: Sequence[Frame],
    negatives: Sequence[Frame],
    stages: int,
    mhr: float,
    rounds: Sequence[int] | None = None,
    grid: int = DEFAULT_GRID,
    geometries: tuple[int, ...] = DEFAULT_GEOMETRIES,
) -> CascadeModel:
    """Train an S-stage cascade on canonical-size crops.

    Stage s uses rounds[s-1] stumps (default 2*s); after calibration to MHR
    the negatives rejected by the stage are dropped, and training stops
    early once no negatives survive. The rank table is built from the codes
    of the whole crop set, pooled across geometries.
    """
    if not positives or not negatives:
        raise ValueError("need at least one positive and one negative crop")
    if stages < 1:
        raise ValueError(f"stages must be >= 1, got {stages}")
    w, h = positives[0].width, positives[0].height
    for crop in list(positives) + list(negatives):
        if crop.width != w or crop.height != h:
            raise ValueError(
                f"all crops must share one size, got {crop.width}x{crop.height} vs {w}x{h}"
            )
    if rounds is None:
        rounds = [2 * s for s in range(1, stages + 1)]
    elif len(rounds) < stages:
        raise ValueError(f"rounds schedule has {len(rounds)} entries for {stages} stages")

    probe = CascadeModel(
        stages=(), window_w=w, window_h=h, rank_table=RankTable(np.zeros(256)),
        grid=grid, geometries=geometries,
    )
    geoms = _scaled_geometries(probe, w, h)
    pos_ii = [integral(c) for c in positives]
    neg_ii = [integral(c) for c in negatives]
    code_sets = [mb_lbp_code_map(ii, g) for ii in pos_ii + neg_ii for g in geoms]
    rank_table = build_rank_table(code_sets)
    model = replace(probe, rank_table=rank_table)

    window = Rect(0, 0, w, h)
    x_pos = np.array([window_features(model, ii, window) for ii in pos_ii])
    x_neg = np.array([window_features(model, ii, window) for ii in neg_ii])

    trained = []
    for s in range(stages):
        if len(x_neg) == 0:
            break
        xs = np.concatenate([x_pos, x_neg])
        labels = np.concatenate([np.ones(len(x_pos), dtype=np.int64),
                                 -np.ones(len(x_neg), dtype=np.int64)])
        stage = train_strong(xs, labels, rounds[s])
        pos_scores = [strong_classify(stage, x)[0] for x in x_pos]
        stage = calibrate_stage(stage, pos_scores, mhr)
        trained.append(stage)
        neg_scores = np.array([strong_classify(stage, x)[0] for x in x_neg])
        x_neg = x_neg[neg_scores >= stage.stage_threshold]
    return replace(model, stages=tuple(trained))


def _feature_site(model: CascadeModel, feature_index: int) -> tuple[int, int, int]:
    """Decompose a feature index into (cell, geometry, bin)."""
    bin_idx = feature_index % RANK_HISTOGRAM_BINS
    rest = feature_index // RANK_HISTOGRAM_BINS
    n_geoms = len(model.geometries)
    return rest // n_geoms, rest % n_geoms, bin_idx


class _PlaneCache:
    """Lazy per-(geometry, bin) integral planes of rank-membership masks."""

    def __init__(self, ii: IntegralImage, rank_table: RankTable):
        self.ii = ii
        self.rank_table = rank_table
        self.rank_maps: dict[tuple[int, int], np.ndarray] = {}
        self.planes: dict[tuple[int, int, int], np.ndarray] = {}

    def plane(self, g: BlockGeometry, bin_idx: int) -> np.ndarray:
        key = (g.cell_w, g.cell_h, bin_idx)
        cached = self.planes.get(key)
        if cached is not None:
            return cached
        gkey = (g.cell_w, g.cell_h)
        rank_map = self.rank_maps.get(gkey)
        if rank_map is None:
            rank_map = self.rank_table.bins[mb_lbp_code_map(self.ii, g)]
            self.rank_maps[gkey] = rank_map
        mask = rank_map == bin_idx
        plane = np.zeros((mask.shape[0] + 1, mask.shape[1] + 1), dtype=np.int64)
        np.cumsum(np.cumsum(mask, axis=0), axis=1, out=plane[1:, 1:])
        self.planes[key] = plane
        return plane


def _evaluate_grid(
    model: CascadeModel,
    cache: _PlaneCache,
    win_w: int,
    win_h: int,
    xs: np.ndarray,
    ys: np.ndarray,
) -> tuple[np.ndarray, np.ndarray]:
    """Cascade decisions and final-stage scores for a grid of window origins.

    Computes the same integer bin counts and float arithmetic as
    classify_window, so decisions agree bit for bit.
    """
    cells = _cell_rects(Rect(0, 0, win_w, win_h), model.grid)
    geoms = _scaled_geometries(model, win_w, win_h)
    alive = np.ones((len(ys), len(xs)), dtype=bool)
    scores = np.zeros((len(ys), len(xs)))
    for stage in model.stages:
        scores = np.zeros((len(ys), len(xs)))
        for stump, alpha in stage.stumps:
            cell_idx, geom_idx, bin_idx = _feature_site(model, stump.feature_index)
            cell = cells[cell_idx]
            g = geoms[geom_idx]
            plane = cache.plane(g, bin_idx)
            span_w = cell.w - g.footprint_w + 1
            span_h = cell.h - g.footprint_h + 1
            x0 = xs + cell.x
            y0 = ys + cell.y
            counts = (
                plane[np.ix_(y0 + span_h, x0 + span_w)]
                - plane[np.ix_(y0, x0 + span_w)]
                - plane[np.ix_(y0 + span_h, x0)]
                + plane[np.ix_(y0, x0)]
            )
            values = counts / (span_w * span_h)
            base = np.where(values < stump.threshold, -1, 1)
            scores += alpha * (stump.polarity * base)
        alive &= scores >= stage.stage_threshold
        if not alive.any():
            break
    return alive, scores


def _iou_float(a: tuple[float, float, float, float], b: tuple[float, float, float, float]) -> float:
    ix = max(a[0], b[0])
    iy = max(a[1], b[1])
    iw = min(a[0] + a[2], b[0] + b[2]) - ix
    ih = min(a[1] + a[3], b[1] + b[3]) - iy
    if iw <= 0.0 or ih <= 0.0:
        return 0.0
    inter = iw * ih
    return inter / (a[2] * a[3] + b[2] * b[3] - inter)


class _Cluster:
    def __init__(self, rect: Rect, score: float):
        self.sums = np.array([rect.x, rect.y, rect.w, rect.h], dtype=np.float64)
        self.count = 1
        self.score = score

    def mean(self) -> tuple[float, float, float, float]:
        m = self.sums / self.count
        return m[0], m[1], m[2], m[3]

    def add(self, rect: Rect, score: float) -> None:
        self.sums += (rect.x, rect.y, rect.w, rect.h)
        self.count += 1
        self.score = max(self.score, score)


def _cluster_hits(hits: Sequence[tuple[Rect, float]], mcc: int) -> list[Detection]:
    """Greedy clustering: a hit joins the first cluster whose running mean
    rect overlaps it with IoU >= 0.5, else starts a new cluster."""
    clusters: list[_Cluster] = []
    for rect, score in hits:
        box = (float(rect.x), float(rect.y), float(rect.w), float(rect.h))
        for cluster in clusters:
            if _iou_float(box, cluster.mean()) >= 0.5:
                cluster.add(rect, score)
                break
        else:
            clusters.append(_Cluster(rect, score))
    detections = []
    for cluster in clusters:
        if cluster.count < mcc:
            continue
        mx, my, mw, mh = cluster.mean()
        rect = Rect(round_half_up(mx), round_half_up(my), round_half_up(mw), round_half_up(mh))
        detections.append(Detection(rect=rect, score=cluster.score, cluster_count=cluster.count))
    return detections


def detect(
    model: CascadeModel,
    frame: Frame,
    scales: Sequence[float] = (1.0,),
    stride: int = 4,
    mcc: int = 1,
) -> list[Detection]:
    """Multi-scale sliding-window detection with MCC cluster filtering.

    Raw hits are enumerated scale-ascending then row-major and greedily
    clustered; clusters with fewer than MCC members are discarded. Each
    Detection carries the rounded member-mean rect and the max member score.
    """
    if stride < 1:
        raise ValueError(f"stride must be >= 1, got {stride}")
    if not scales:
        raise ValueError("scale list must not be empty")
    if any(s < 1.0 for s in scales) or list(scales) != sorted(scales):
        raise ValueError(f"scales must be >= 1.0 and ascending, got {list(scales)}")
    if mcc < 1:
        raise ValueError(f"MCC must be >= 1, got {mcc}")
    ii = integral(frame)
    cache = _PlaneCache(ii, model.rank_table)
    hits: list[tuple[Rect, float]] = []
    for scale in scales:
        win_w = round_half_up(model.window_w * scale)
        win_h = round_half_up(model.window_h * scale)
        if win_w > frame.width or win_h > frame.height:
            continue
        xs = np.arange(0, frame.width - win_w + 1, stride)
        ys = np.arange(0, frame.height - win_h + 1, stride)
        alive, scores = _evaluate_grid(model, cache, win_w, win_h, xs, ys)
        for j, i in np.argwhere(alive):
            hits.append((Rect(int(xs[i]), int(ys[j]), win_w, win_h), float(scores[j, i])))
    return _cluster_hits(hits, mcc)


def save_model(model: CascadeModel, path: str | os.PathLike) -> None:
    """Plain-text model file; loading reproduces decisions bit-identically."""
    lines = [
        f"{MODEL_MAGIC} {MODEL_VERSION} {model.window_w} {model.window_h} "
        f"{model.grid} {','.join(str(g) for g in model.geometries)} "
        f"{model.feature_count} {len(model.stages)}"
    ]
    lines.append(model.rank_table.to_text().rstrip("\n"))
    for stage in model.stages:
        lines.append(f"stage {len(stage.stumps)} {stage.stage_threshold:.17g}")
        for stump, alpha in stage.stumps:
            lines.append(
                f"{stump.feature_index} {stump.threshold:.17g} {stump.polarity} {alpha:.17g}"
            )
    with open(path, "w", encoding="ascii") as fh:
        fh.write("\n".join(lines) + "\n")


def load_model(path: str | os.PathLike) -> CascadeModel:
    with open(path, "r", encoding="ascii") as fh:
        lines = [line.rstrip("\n") for line in fh if line.strip()]
    header = lines[0].split()
    if len(header) != 8 or header[0] != MODEL_MAGIC or header[1] != MODEL_VERSION:
        raise ValueError(f"unrecognized model header: {lines[0]!r}")
    window_w, window_h, grid = int(header[2]), int(header[3]), int(header[4])
    geometries = tuple(int(g) for g in header[5].split(","))
    feature_count, n_stages = int(header[6]), int(header[7])
    rank_table = RankTable.from_text("\n".join(lines[1:257]))
    stages = []
    pos = 257
    for _ in range(n_stages):
        tag, count_s, threshold_s = lines[pos].split()
        if tag != "stage":
            raise ValueError(f"expected stage header at line {pos + 1}, got {lines[pos]!r}")
        count = int(count_s)
        stumps = []
        for line in lines[pos + 1 : pos + 1 + count]:
            fi, thr, pol, alpha = line.split()
            stumps.append((Stump(int(fi), float(thr), int(pol)), float(alpha)))
        stages.append(StrongClassifier(stumps=tuple(stumps), stage_threshold=float(threshold_s)))
        pos += 1 + count
    model = CascadeModel(
        stages=tuple(stages),
        window_w=window_w,
        window_h=window_h,
        rank_table=rank_table,
        grid=grid,
        geometries=geometries,
    )
    if model.feature_count != feature_count:
        raise ValueError(
            f"header feature count {feature_count} does not match layout "
            f"{model.feature_count}"
        )
    return model
