"""COCO-style detection metrics.

Matching follows the COCO convention: per image and class, detections in
descending score order each take the unmatched ground truth with the highest
IoU at or above the threshold. Precision is interpolated at 101 recall points.
Crowd annotations are not modelled.
"""

from __future__ import annotations

import itertools
import json
import math
from dataclasses import asdict, dataclass, fields
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from .codec import AnnotatedObject, BBox
from .infer import Detection

IOU_THRESHOLDS = np.linspace(0.5, 0.95, 10)
RECALL_POINTS = np.linspace(0.0, 1.0, 101)
AREA_RANGES = {
    "all": (0.0, 1e10),
    "small": (0.0, 32.0**2),
    "medium": (32.0**2, 96.0**2),
    "large": (96.0**2, 1e10),
}


def iou(a: BBox, b: BBox) -> float:
    ih = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    iw = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    inter = max(ih, 0.0) * max(iw, 0.0)
    union = a.area + b.area - inter
    if union <= 0.0:
        return 0.0
    return inter / union


class GroundTruth(NamedTuple):
    objects: list[AnnotatedObject]
    width: int
    height: int


class MatchResult(NamedTuple):
    flags: list[bool]  # aligned with the input detections; True = true positive
    unmatched_gt: int


def _score_order(scores: Sequence[float]) -> np.ndarray:
    return np.argsort(-np.asarray(scores, dtype=np.float64), kind="stable")


def _greedy(ious: np.ndarray, gt_ignore: np.ndarray, threshold: float):
    """Match rows (detections, already score-ordered) to columns (gts, with
    ignored gts sorted last). Returns matched gt index per detection or -1."""
    n_det, n_gt = ious.shape
    taken = np.zeros(n_gt, dtype=bool)
    match = np.full(n_det, -1, dtype=np.int64)
    for d in range(n_det):
        best = min(threshold, 1 - 1e-10)
        m = -1
        for g in range(n_gt):
            if taken[g]:
                continue
            # once a real gt is matched, never fall back to an ignored one
            if m > -1 and not gt_ignore[m] and gt_ignore[g]:
                break
            if ious[d, g] < best or (m > -1 and ious[d, g] == best and gt_ignore[m] == gt_ignore[g]):
                continue
            best = ious[d, g]
            m = g
        if m > -1:
            taken[m] = True
            match[d] = m
    return match


def _iou_matrix(dets: Sequence[BBox], gts: Sequence[BBox]) -> np.ndarray:
    out = np.zeros((len(dets), len(gts)))
    for i, d in enumerate(dets):
        for j, g in enumerate(gts):
            out[i, j] = iou(d, g)
    return out


def match_detections(
    dets: Sequence[Detection], gts: Sequence[AnnotatedObject], iou_threshold: float
) -> MatchResult:
    """Greedy score-ordered matching within one image, class by class."""
    flags = [False] * len(dets)
    matched = 0
    for c in {d.class_id for d in dets}:
        d_idx = [i for i, d in enumerate(dets) if d.class_id == c]
        g_idx = [j for j, g in enumerate(gts) if g.class_id == c]
        order = [d_idx[k] for k in _score_order([dets[i].score for i in d_idx])]
        ious = _iou_matrix([dets[i].box for i in order], [gts[j].box for j in g_idx])
        match = _greedy(ious, np.zeros(len(g_idx), dtype=bool), iou_threshold)
        for i, m in zip(order, match):
            if m > -1:
                flags[i] = True
                matched += 1
    return MatchResult(flags, len(gts) - matched)


@dataclass
class EvalResult:
    """Aggregate metrics; ``None`` marks a metric with no ground truth to score."""

    AP: float | None
    AP50: float | None
    AP75: float | None
    AP_small: float | None
    AP_medium: float | None
    AP_large: float | None
    AR_at_100: float | None

    @classmethod
    def field_names(cls) -> list[str]:
        return [f.name for f in fields(cls)]

    def to_text(self) -> str:
        return "".join(
            f"{k}={'absent' if v is None else format(v, '.6f')}\n" for k, v in asdict(self).items()
        )

    def to_json(self) -> str:
        return json.dumps(asdict(self), indent=2, sort_keys=False) + "\n"

    @classmethod
    def from_text(cls, text: str) -> "EvalResult":
        vals = {}
        for line in text.splitlines():
            if line.strip():
                k, v = line.split("=", 1)
                vals[k.strip()] = None if v.strip() == "absent" else float(v)
        return cls(**vals)


def _evaluate_image(dets, gts, width, height, area_range, thresholds, max_dets):
    """Per-threshold (scores, tp flags, ignore flags) and non-ignored gt count
    for one image and one class."""
    lo, hi = area_range
    pix = width * height
    g_ignore = np.array([not lo <= g.box.area * pix <= hi for g in gts], dtype=bool)
    g_order = np.argsort(g_ignore, kind="stable")
    gts = [gts[i] for i in g_order]
    g_ignore = g_ignore[g_order]
    d_order = _score_order([d.score for d in dets])[:max_dets]
    dets = [dets[i] for i in d_order]
    ious = _iou_matrix([d.box for d in dets], [g.box for g in gts])
    d_area_out = np.array([not lo <= d.box.area * pix <= hi for d in dets], dtype=bool)
    scores = np.array([d.score for d in dets], dtype=np.float64)

    tp = np.zeros((len(thresholds), len(dets)), dtype=bool)
    ignore = np.zeros((len(thresholds), len(dets)), dtype=bool)
    for t, thr in enumerate(thresholds):
        match = _greedy(ious, g_ignore, thr)
        for d, m in enumerate(match):
            if m > -1:
                tp[t, d] = not g_ignore[m]
                ignore[t, d] = g_ignore[m]
            else:
                ignore[t, d] = d_area_out[d]
    return scores, tp, ignore, int((~g_ignore).sum())


def _interpolated_ap(tp_sorted: np.ndarray, n_pos: int) -> tuple[float, float]:
    """101-point interpolated AP and final recall from score-sorted TP flags."""
    if len(tp_sorted) == 0:
        return 0.0, 0.0
    tps = np.cumsum(tp_sorted)
    fps = np.cumsum(~tp_sorted)
    recall = tps / n_pos
    precision = tps / (tps + fps)
    precision = np.maximum.accumulate(precision[::-1])[::-1]
    idx = np.searchsorted(recall, RECALL_POINTS, side="left")
    q = np.where(idx < len(precision), precision[np.minimum(idx, len(precision) - 1)], 0.0)
    return float(np.mean(q)), float(recall[-1])


def _mean_or_none(values) -> float | None:
    values = [v for v in values if v is not None]
    if not values:
        return None
    return float(np.mean(values))


def average_precision(
    dets_by_image: Mapping[int, Sequence[Detection]],
    gts_by_image: Mapping[int, GroundTruth],
    thresholds: Sequence[float] = IOU_THRESHOLDS,
    max_dets: int = 100,
) -> EvalResult:
    """COCO-convention AP/AR over all images in ``gts_by_image``.

    Detections for images without ground-truth entries are ignored. Classes
    with no ground truth (in an area range) are excluded from that range's
    mean.
    """
    thresholds = np.asarray(thresholds, dtype=np.float64)
    classes = sorted(
        {o.class_id for g in gts_by_image.values() for o in g.objects}
        | {d.class_id for iid in gts_by_image for d in dets_by_image.get(iid, ())}
    )
    image_ids = sorted(gts_by_image)

    # ap[area][class] -> array over thresholds, None when class has no gts
    ap: dict[str, dict[int, np.ndarray | None]] = {a: {} for a in AREA_RANGES}
    ar: dict[int, np.ndarray | None] = {}
    for area_name, area_range in AREA_RANGES.items():
        for c in classes:
            per_image = []
            n_pos = 0
            for iid in image_ids:
                gt = gts_by_image[iid]
                g = [o for o in gt.objects if o.class_id == c]
                d = [x for x in dets_by_image.get(iid, ()) if x.class_id == c]
                if not g and not d:
                    continue
                res = _evaluate_image(d, g, gt.width, gt.height, area_range, thresholds, max_dets)
                per_image.append(res)
                n_pos += res[3]
            if n_pos == 0:
                ap[area_name][c] = None
                if area_name == "all":
                    ar[c] = None
                continue
            scores = np.concatenate([r[0] for r in per_image])
            order = np.argsort(-scores, kind="stable")
            vals, recs = [], []
            for t in range(len(thresholds)):
                tp = np.concatenate([r[1][t] for r in per_image])[order]
                ign = np.concatenate([r[2][t] for r in per_image])[order]
                a, r = _interpolated_ap(tp[~ign], n_pos)
                vals.append(a)
                recs.append(r)
            ap[area_name][c] = np.array(vals)
            if area_name == "all":
                ar[c] = np.array(recs)

    def summarize(area: str, t_index: int | None = None):
        vals = [v for v in ap[area].values() if v is not None]
        if not vals:
            return None
        per_threshold = np.mean(np.stack(vals), axis=0)  # mean over classes
        return float(np.mean(per_threshold) if t_index is None else per_threshold[t_index])

    def t_index(value):
        hits = np.flatnonzero(np.isclose(thresholds, value))
        return int(hits[0]) if len(hits) else None

    i50, i75 = t_index(0.5), t_index(0.75)
    recalls = [v for v in ar.values() if v is not None]
    return EvalResult(
        AP=summarize("all"),
        AP50=summarize("all", i50) if i50 is not None else None,
        AP75=summarize("all", i75) if i75 is not None else None,
        AP_small=summarize("small"),
        AP_medium=summarize("medium"),
        AP_large=summarize("large"),
        AR_at_100=float(np.mean(np.stack(recalls))) if recalls else None,
    )


# Brute-force references for small instances. They share only ``iou`` with
# the production path above.


def brute_force_match(
    dets: Sequence[Detection], gts: Sequence[AnnotatedObject], iou_threshold: float
) -> list[bool]:
    """Exhaustive search over all one-to-one assignments.

    Picks the assignment maximizing the key (iou_1, -gt_1, iou_2, -gt_2, ...)
    lexicographically, detections listed in score order, with iou -1 and gt
    index len(gts) for an unmatched detection. Each detection thus takes the
    best overlap still available, lowest gt index on ties.
    """
    order = sorted(range(len(dets)), key=lambda i: -dets[i].score)
    options = []
    for i in order:
        opts = [None]
        for j, g in enumerate(gts):
            if g.class_id == dets[i].class_id and iou(dets[i].box, g.box) >= iou_threshold:
                opts.append(j)
        options.append(opts)

    best_key = None
    best = None
    for combo in itertools.product(*options):
        used = [j for j in combo if j is not None]
        if len(used) != len(set(used)):
            continue
        key = tuple(
            term
            for i, j in zip(order, combo)
            for term in ((-1.0, -len(gts)) if j is None else (iou(dets[i].box, gts[j].box), -j))
        )
        if best_key is None or key > best_key:
            best_key, best = key, combo
    flags = [False] * len(dets)
    for i, j in zip(order, best or ()):
        flags[i] = j is not None
    return flags


def brute_force_ap(
    dets: Sequence[Detection],
    gts: Sequence[AnnotatedObject],
    thresholds: Sequence[float] = IOU_THRESHOLDS,
) -> dict[float, float]:
    """Single-image AP per threshold (mean over classes with ground truth).

    The precision-recall curve is rebuilt by counting true positives in each
    score-ordered prefix, and interpolated precision at recall r is the best
    precision of any prefix reaching r.
    """
    out = {}
    classes = sorted({g.class_id for g in gts})
    for thr in thresholds:
        per_class = []
        for c in classes:
            cd = [d for d in dets if d.class_id == c]
            cg = [g for g in gts if g.class_id == c]
            flags = brute_force_match(cd, cg, thr)
            ranked = [f for _, f in sorted(zip([-d.score for d in cd], flags), key=lambda x: x[0])]
            points = []
            for k in range(1, len(ranked) + 1):
                tp = sum(ranked[:k])
                points.append((tp / len(cg), tp / k))
            interp = []
            for r in RECALL_POINTS:
                reach = [p for rc, p in points if rc >= r]
                interp.append(max(reach) if reach else 0.0)
            per_class.append(float(np.mean(interp)))
        out[float(thr)] = float(np.mean(per_class)) if per_class else math.nan
    return out
