"""Retrieval evaluation: IoU matching, Recall@1, mAP, per-scale reports.

Two scoring levels share one ranking: object level gates hits at IoU 0.3,
image level first collapses the ranking to images (best hit each) and
gates at IoU 1e-10, i.e. any positive overlap.  Average precision divides
by the query's relevant-item count, so a perfect ranking scores 1.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

from .retrieval import RankedResult, rank_images

log = logging.getLogger(__name__)

DEFAULT_BINS = (
    (0.0, 400.0),
    (400.0, 900.0),
    (900.0, 3600.0),
    (3600.0, 10000.0),
    (10000.0, math.inf),
)

REPORT_COLUMNS = ("bin", "n", "O-R@1", "O-mAP", "I-R@1", "I-mAP")


@dataclass(frozen=True)
class EvalConfig:
    iou_object: float = 0.3
    iou_image: float = 1e-10
    topk: int | None = None
    scale_bins: tuple[tuple[float, float], ...] = DEFAULT_BINS

    def __post_init__(self):
        for name in ("iou_object", "iou_image"):
            t = getattr(self, name)
            if not 0.0 <= t <= 1.0:
                raise ValueError(f"{name} must lie in [0, 1]")
        if self.topk is not None and self.topk < 1:
            raise ValueError("topk must be positive")
        bins = self.scale_bins
        if not bins or bins[0][0] != 0.0 or not math.isinf(bins[-1][1]):
            raise ValueError("scale bins must cover [0, inf)")
        for (lo, hi), (lo2, _) in zip(bins, bins[1:]):
            if not lo < hi or lo2 != hi:
                raise ValueError("scale bins must be contiguous and increasing")


@dataclass(frozen=True)
class GalleryObject:
    object_id: int
    image_id: int
    bbox: tuple[float, float, float, float]


@dataclass(frozen=True)
class GroundTruth:
    boxes_by_image: dict[int, list[tuple[int, tuple[float, float, float, float]]]]
    query_class: dict[int, int]
    query_area: dict[int, float] = field(default_factory=dict)
    gallery: tuple[GalleryObject, ...] = ()

    @classmethod
    def from_table(cls, table) -> "GroundTruth":
        """Build from an ObjectTable whose records carry class ids.

        Unlabeled objects are left out of both the box index and the
        gallery; they can be neither queries nor relevant items.
        """
        boxes: dict[int, list] = {}
        qclass: dict[int, int] = {}
        qarea: dict[int, float] = {}
        gallery = []
        for rec in table:
            if rec.class_id is None:
                continue
            boxes.setdefault(rec.image_id, []).append((rec.class_id, rec.bbox))
            qclass[rec.object_id] = rec.class_id
            qarea[rec.object_id] = rec.area
            gallery.append(GalleryObject(rec.object_id, rec.image_id, rec.bbox))
        return cls(
            boxes_by_image=boxes,
            query_class=qclass,
            query_area=qarea,
            gallery=tuple(gallery),
        )


def iou(box_a, box_b) -> float:
    """Intersection over union of two (x, y, w, h) boxes."""
    ax, ay, aw, ah = box_a
    bx, by, bw, bh = box_b
    if aw <= 0 or ah <= 0 or bw <= 0 or bh <= 0:
        raise ValueError("boxes must have positive width and height")
    ix = max(0.0, min(ax + aw, bx + bw) - max(ax, bx))
    iy = max(0.0, min(ay + ah, by + bh) - max(ay, by))
    inter = ix * iy
    union = aw * ah + bw * bh - inter
    return inter / union


def hit_test(hit, query_class: int, gt: GroundTruth, threshold: float) -> bool:
    """True iff some ground-truth box in the hit's image shares the query
    class and overlaps the hit's box with IoU at or above the threshold."""
    if hit.image_id not in gt.boxes_by_image:
        raise ValueError(f"image {hit.image_id} missing from ground truth")
    for class_id, box in gt.boxes_by_image[hit.image_id]:
        if class_id == query_class and iou(hit.bbox, box) >= threshold:
            return True
    return False


def _threshold(cfg: EvalConfig, level: str) -> float:
    if level == "object":
        return cfg.iou_object
    if level == "image":
        return cfg.iou_image
    raise ValueError(f"unknown level {level!r}; expected 'object' or 'image'")


def _relevant(query_id, query_class: int, gt: GroundTruth, threshold: float):
    """Gallery objects that would pass hit_test, the query itself excluded."""
    out = []
    for obj in gt.gallery:
        if obj.object_id == query_id:
            continue
        if hit_test(obj, query_class, gt, threshold):
            out.append(obj)
    return out


def _effective_hits(res: RankedResult, cfg: EvalConfig) -> list:
    """The query's own object is dropped from its ranking, then topk applies."""
    hits = [h for h in res.hits if h.object_id != res.query_id]
    if cfg.topk is not None:
        hits = hits[: cfg.topk]
    return hits


def recall_at_1(results, gt: GroundTruth, cfg: EvalConfig, level: str) -> float:
    """Fraction of queries whose best hit passes the level's IoU gate.

    At image level the best hit of the top-ranked image is scored, which
    is the overall best hit; a query with no hits scores 0.
    """
    if not results:
        raise ValueError("need at least one query result")
    threshold = _threshold(cfg, level)
    total = 0.0
    for res in results:
        hits = _effective_hits(res, cfg)
        if hits and hit_test(hits[0], gt.query_class[res.query_id], gt, threshold):
            total += 1.0
    return total / len(results)


def _average_precision(res: RankedResult, gt: GroundTruth, cfg: EvalConfig, level: str):
    """AP for one query, or None when the query has no relevant items."""
    threshold = _threshold(cfg, level)
    query_class = gt.query_class[res.query_id]
    relevant = _relevant(res.query_id, query_class, gt, threshold)
    if level == "image":
        n_relevant = len({obj.image_id for obj in relevant})
    else:
        n_relevant = len(relevant)
    if n_relevant == 0:
        return None
    hits = _effective_hits(res, cfg)
    if level == "image":
        best_by_image = {}
        for hit in hits:
            best_by_image.setdefault(hit.image_id, hit)
        ranked = [best_by_image[i] for i in rank_images(RankedResult(res.query_id, tuple(hits)))]
    else:
        ranked = hits
    found = 0
    acc = 0.0
    for pos, hit in enumerate(ranked, start=1):
        if hit_test(hit, query_class, gt, threshold):
            found += 1
            acc += found / pos
    return acc / n_relevant


def mean_ap(results, gt: GroundTruth, cfg: EvalConfig, level: str) -> float:
    """Mean average precision over queries with at least one relevant item.

    Queries with none are excluded with a warning; if every query is
    excluded the result is NaN.
    """
    if not results:
        raise ValueError("need at least one query result")
    values = []
    for res in results:
        ap = _average_precision(res, gt, cfg, level)
        if ap is None:
            log.warning("query %s has no relevant gallery items; excluded", res.query_id)
            continue
        values.append(ap)
    if not values:
        return math.nan
    return sum(values) / len(values)


def _fmt_pct(value: float) -> str:
    return "" if math.isnan(value) else f"{100.0 * value:.2f}"


def _bin_label(lo: float, hi: float) -> str:
    hi_s = "inf" if math.isinf(hi) else f"{hi:g}"
    return f"[{lo:g},{hi_s})"


def scale_report(results, gt: GroundTruth, cfg: EvalConfig) -> str:
    """Per-area-bin score table, tab separated, percentages to 2 decimals."""
    rows = ["\t".join(REPORT_COLUMNS)]
    for lo, hi in cfg.scale_bins:
        subset = [
            r for r in results if lo <= gt.query_area[r.query_id] < hi
        ]
        if not subset:
            rows.append("\t".join([_bin_label(lo, hi), "0", "", "", "", ""]))
            continue
        cells = [_bin_label(lo, hi), str(len(subset))]
        for level in ("object", "image"):
            cells.append(_fmt_pct(recall_at_1(subset, gt, cfg, level)))
            cells.append(_fmt_pct(mean_ap(subset, gt, cfg, level)))
        rows.append("\t".join(cells))
    return "\n".join(rows) + "\n"
