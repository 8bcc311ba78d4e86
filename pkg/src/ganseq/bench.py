"""Detection benchmark: IoU matching, precision/recall/F-score and a near/far range split.

Ground truth CSV columns: ``image_id,class_id,x,y,w,h,range`` with range in {near, far}.
Detection CSV columns: ``image_id,class_id,x,y,w,h,confidence``.
"""

from __future__ import annotations

import csv
import json
import logging
from dataclasses import asdict, dataclass, field
from pathlib import Path

from .errors import ParseError
from .semmap import BoundingBox, parse_box_fields

log = logging.getLogger(__name__)

RANGES = ("near", "far")
GT_HEADER = ["image_id", "class_id", "x", "y", "w", "h", "range"]
DET_HEADER = ["image_id", "class_id", "x", "y", "w", "h", "confidence"]


@dataclass(frozen=True)
class DetectionRecord:
    image_id: str
    class_id: int
    box: BoundingBox
    confidence: float = 1.0


@dataclass(frozen=True)
class GroundTruthRecord:
    image_id: str
    class_id: int
    box: BoundingBox
    range_tag: str = "near"


@dataclass
class RangeResult:
    tp: int = 0
    fp: int = 0
    fn: int = 0
    precision: float = 0.0
    recall: float = 0.0
    f_score: float = 0.0

    def finalize(self) -> "RangeResult":
        self.precision, self.recall, self.f_score = compute_metrics(self.tp, self.fp, self.fn)
        return self


@dataclass
class EvalReport:
    threshold: float
    ranges: dict[str, RangeResult] = field(default_factory=dict)
    # detections on images absent from the ground truth; counted as FP in "all" only
    unknown_image_fp: int = 0

    def to_dict(self) -> dict:
        return {
            "threshold": self.threshold,
            "ranges": {k: asdict(v) for k, v in self.ranges.items()},
            "unknown_image_fp": self.unknown_image_fp,
        }

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    def render(self) -> str:
        """Plain-text table with near/far column groups of F-score, precision and recall."""
        groups = [r for r in ("near", "far") if r in self.ranges]
        head1 = "".join(f" | {('%s range' % g).center(29)}" for g in groups)
        head2 = "".join(" | F-Score  Precision  Recall" for _ in groups)
        row = "".join(
            f" | {self.ranges[g].f_score:7.1f}  {self.ranges[g].precision:9.1f}  {self.ranges[g].recall:6.1f}"
            for g in groups
        )
        counts = "".join(
            f" | tp={self.ranges[g].tp:<5d} fp={self.ranges[g].fp:<5d} fn={self.ranges[g].fn:<5d}".ljust(32)
            for g in groups
        )
        label = f"IoU>={self.threshold:g}"
        w = max(len(label), 10)
        lines = [
            " " * w + head1,
            " " * w + head2,
            label.ljust(w) + row,
            "counts".ljust(w) + counts,
        ]
        return "\n".join(line.rstrip() for line in lines)


def iou(a: BoundingBox, b: BoundingBox) -> float:
    iw = min(a.x2, b.x2) - max(a.x, b.x)
    ih = min(a.y2, b.y2) - max(a.y, b.y)
    if iw <= 0 or ih <= 0:
        return 0.0
    inter = iw * ih
    return inter / (a.area() + b.area() - inter)


def match_detections(dets, gts, threshold: float = 0.5):
    """Greedy matching in descending confidence order.

    Each detection takes the still-unmatched ground truth of the same image and
    class with the highest IoU, provided it reaches ``threshold``. Equal
    confidences keep input order; equal IoUs go to the earlier ground truth.
    Returns ``(tp, fp, fn, matches)`` where ``matches`` holds ``(det_index, gt_index)``.
    """
    by_key: dict[tuple[str, int], list[int]] = {}
    for j, g in enumerate(gts):
        by_key.setdefault((g.image_id, g.class_id), []).append(j)
    order = sorted(range(len(dets)), key=lambda i: -dets[i].confidence)
    taken = [False] * len(gts)
    matches = []
    for i in order:
        d = dets[i]
        best, best_iou = None, -1.0
        for j in by_key.get((d.image_id, d.class_id), ()):
            if taken[j]:
                continue
            v = iou(d.box, gts[j].box)
            if v >= threshold and v > best_iou:
                best, best_iou = j, v
        if best is not None:
            taken[best] = True
            matches.append((i, best))
    tp = len(matches)
    return tp, len(dets) - tp, len(gts) - tp, matches


def compute_metrics(tp: int, fp: int, fn: int) -> tuple[float, float, float]:
    """Precision, recall and F-score in percent, rounded to one decimal.

    A zero denominator yields 0 for that metric.
    """
    if min(tp, fp, fn) < 0:
        raise ValueError("counts must be non-negative")
    p = tp / (tp + fp) if tp + fp else 0.0
    r = tp / (tp + fn) if tp + fn else 0.0
    f = 2 * p * r / (p + r) if p + r else 0.0
    return round(100 * p, 1), round(100 * r, 1), round(100 * f, 1)


def f_score(precision: float, recall: float) -> float:
    """Harmonic mean of two percentages, unrounded."""
    return 2 * precision * recall / (precision + recall) if precision + recall else 0.0


def _rows(path):
    with open(path, newline="", encoding="utf-8") as fh:
        for n, row in enumerate(csv.reader(fh), start=1):
            if not row or not "".join(row).strip() or row[0].lstrip().startswith("#"):
                continue
            yield n, [c.strip() for c in row]


def read_ground_truth(path, default_range: str | None = None) -> list[GroundTruthRecord]:
    """Parse a ground-truth CSV.

    Exported annotation files lack the range column; pass ``default_range`` to
    read them.
    """
    out = []
    for n, row in _rows(path):
        if row[0] == "image_id":
            continue
        if len(row) == 6 and default_range is not None:
            row = row + [default_range]
        if len(row) != 7:
            raise ParseError(f"expected 7 fields ({','.join(GT_HEADER)}), got {len(row)}", n)
        image_id, class_id, box = parse_box_fields(row, n)
        tag = row[6].lower()
        if tag not in RANGES:
            raise ParseError(f"range must be one of {RANGES}, got {row[6]!r}", n)
        out.append(GroundTruthRecord(image_id, class_id, box, tag))
    return out


def read_detections(path) -> list[DetectionRecord]:
    out = []
    for n, row in _rows(path):
        if row[0] == "image_id":
            continue
        if len(row) != 7:
            raise ParseError(f"expected 7 fields ({','.join(DET_HEADER)}), got {len(row)}", n)
        image_id, class_id, box = parse_box_fields(row, n)
        try:
            conf = float(row[6])
        except ValueError:
            raise ParseError(f"confidence {row[6]!r} is not a number", n) from None
        if not 0.0 <= conf <= 1.0:
            raise ParseError(f"confidence {conf} outside [0, 1]", n)
        out.append(DetectionRecord(image_id, class_id, box, conf))
    return out


def write_ground_truth(path, records) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(GT_HEADER)
        for r in records:
            w.writerow([r.image_id, r.class_id, *r.box.as_tuple(), r.range_tag])


def write_detections(path, records) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(DET_HEADER)
        for r in records:
            w.writerow([r.image_id, r.class_id, *r.box.as_tuple(), repr(float(r.confidence))])


def evaluate_records(dets, gts, threshold: float = 0.5) -> EvalReport:
    image_range: dict[str, str] = {}
    for g in gts:
        prev = image_range.setdefault(g.image_id, g.range_tag)
        if prev != g.range_tag:
            raise ParseError(f"image {g.image_id!r} carries both {prev!r} and {g.range_tag!r} records")
    report = EvalReport(threshold=threshold)
    total = RangeResult()
    for tag in RANGES:
        part_gts = [g for g in gts if g.range_tag == tag]
        part_dets = [d for d in dets if image_range.get(d.image_id) == tag]
        tp, fp, fn, _ = match_detections(part_dets, part_gts, threshold)
        report.ranges[tag] = RangeResult(tp, fp, fn).finalize()
        total.tp += tp
        total.fp += fp
        total.fn += fn
    unknown = [d for d in dets if d.image_id not in image_range]
    for image_id in sorted({d.image_id for d in unknown}):
        log.warning("detections reference unknown image %r; counted as false positives", image_id)
    report.unknown_image_fp = len(unknown)
    total.fp += len(unknown)
    report.ranges["all"] = total.finalize()
    return report


def evaluate(det_file, gt_file, threshold: float = 0.5) -> EvalReport:
    return evaluate_records(read_detections(det_file), read_ground_truth(gt_file), threshold)


def write_report(report: EvalReport, out_dir) -> tuple[Path, Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    txt, js = out / "report.txt", out / "report.json"
    txt.write_text(report.render() + "\n", encoding="utf-8")
    js.write_text(report.to_json() + "\n", encoding="utf-8")
    return txt, js
