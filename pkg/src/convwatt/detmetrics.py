"""Object-detection evaluation: IoU, average precision, mAP, smoothing.

Detections and ground truths are plain records tied together by image id and
class id. Matching is greedy in descending confidence order; each ground
truth can satisfy at most one detection. Average precision integrates the
interpolated precision-recall curve, either over all points (default) or at
the classic eleven recall levels.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

ALL_POINTS = "all_points"
ELEVEN_POINTS = "eleven_points"
INTERPOLATIONS = (ALL_POINTS, ELEVEN_POINTS)

DEFAULT_IOU_THRESHOLD = 0.5
DEFAULT_CONFIDENCE_THRESHOLD = 0.5


@dataclass(frozen=True)
class BBox:
    """Axis-aligned box as corner coordinates."""

    x_min: float
    y_min: float
    x_max: float
    y_max: float

    def __post_init__(self):
        if self.x_max < self.x_min or self.y_max < self.y_min:
            raise ValueError(
                f"degenerate box: ({self.x_min}, {self.y_min}) .. "
                f"({self.x_max}, {self.y_max})"
            )

    @property
    def area(self) -> float:
        return (self.x_max - self.x_min) * (self.y_max - self.y_min)


@dataclass(frozen=True)
class Detection:
    image_id: str
    class_id: int
    bbox: BBox
    confidence: float = 1.0

    def __post_init__(self):
        if not 0.0 <= self.confidence <= 1.0:
            raise ValueError(f"confidence {self.confidence} outside [0, 1]")


@dataclass(frozen=True)
class GroundTruth:
    image_id: str
    class_id: int
    bbox: BBox


def iou(a: BBox, b: BBox) -> float:
    """Intersection over union; 0 when the union has no area."""
    ix = min(a.x_max, b.x_max) - max(a.x_min, b.x_min)
    iy = min(a.y_max, b.y_max) - max(a.y_min, b.y_min)
    if ix <= 0.0 or iy <= 0.0:
        intersection = 0.0
    else:
        intersection = ix * iy
    union = a.area + b.area - intersection
    if union <= 0.0:
        return 0.0
    return intersection / union


def filter_by_confidence(detections, threshold: float = DEFAULT_CONFIDENCE_THRESHOLD):
    """Drop detections below the confidence threshold."""
    return [d for d in detections if d.confidence >= threshold]


def _interpolated_area(recalls, precisions) -> float:
    # monotone precision envelope from the right, then area under the steps
    mrec = np.concatenate(([0.0], recalls, [1.0]))
    mpre = np.concatenate(([0.0], precisions, [0.0]))
    for i in range(mpre.size - 2, -1, -1):
        mpre[i] = max(mpre[i], mpre[i + 1])
    changed = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))


def _eleven_point_area(recalls, precisions) -> float:
    total = 0.0
    for level in np.linspace(0.0, 1.0, 11):
        above = precisions[recalls >= level]
        total += float(above.max()) if above.size else 0.0
    return total / 11.0


def average_precision(
    detections,
    ground_truths,
    class_id: int,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    interpolation: str = ALL_POINTS,
) -> float:
    """AP of one class.

    Detections are ranked by descending confidence (stable for ties) and
    greedily matched: each takes the highest-IoU still-unmatched ground
    truth of its image with IoU at or above the threshold; the rest are
    false positives. Returns 0.0 when the class has no ground truths (AP is
    undefined there; mean_ap skips such classes unless asked explicitly).
    """
    if interpolation not in INTERPOLATIONS:
        raise ValueError(f"interpolation must be one of {INTERPOLATIONS}")
    gts = [g for g in ground_truths if g.class_id == class_id]
    dets = [d for d in detections if d.class_id == class_id]
    if not gts or not dets:
        return 0.0
    by_image: dict[str, list[int]] = {}
    for i, g in enumerate(gts):
        by_image.setdefault(g.image_id, []).append(i)
    ranked = sorted(dets, key=lambda d: -d.confidence)
    matched = [False] * len(gts)
    tp = np.zeros(len(ranked))
    for rank, det in enumerate(ranked):
        best_iou = 0.0
        best_gt = None
        for gi in by_image.get(det.image_id, ()):
            if matched[gi]:
                continue
            overlap = iou(det.bbox, gts[gi].bbox)
            if overlap > best_iou:
                best_iou = overlap
                best_gt = gi
        if best_gt is not None and best_iou >= iou_threshold:
            matched[best_gt] = True
            tp[rank] = 1.0
    tp_cum = np.cumsum(tp)
    precisions = tp_cum / np.arange(1, len(ranked) + 1)
    recalls = tp_cum / len(gts)
    if interpolation == ALL_POINTS:
        return _interpolated_area(recalls, precisions)
    return _eleven_point_area(recalls, precisions)


def mean_ap(
    detections,
    ground_truths,
    classes=None,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    interpolation: str = ALL_POINTS,
) -> float:
    """Unweighted mean AP over classes present in the ground truths.

    classes restricts evaluation to a subset (e.g. persons plus vehicles);
    by default every class with at least one ground truth counts.
    """
    present = sorted({g.class_id for g in ground_truths})
    if classes is None:
        chosen = present
    else:
        chosen = sorted(set(classes))
    if not chosen:
        raise ValueError("no classes to evaluate")
    aps = [
        average_precision(
            detections, ground_truths, c, iou_threshold, interpolation
        )
        for c in chosen
    ]
    return float(sum(aps) / len(aps))


def evaluate(
    detections,
    ground_truths,
    classes=None,
    iou_threshold: float = DEFAULT_IOU_THRESHOLD,
    interpolation: str = ALL_POINTS,
) -> dict:
    """Per-class AP plus mAP as a JSON-ready dictionary."""
    present = sorted({g.class_id for g in ground_truths})
    chosen = present if classes is None else sorted(set(classes))
    per_class = {
        c: average_precision(detections, ground_truths, c, iou_threshold, interpolation)
        for c in chosen
    }
    result = {
        "classes": chosen,
        "per_class_ap": {str(c): per_class[c] for c in chosen},
        "mean_ap": mean_ap(
            detections, ground_truths, chosen, iou_threshold, interpolation
        )
        if chosen
        else 0.0,
        "iou_threshold": iou_threshold,
        "interpolation": interpolation,
    }
    return result


def smooth_confidences(frames, window: int = 3):
    """Average each frame's values with up to window-1 preceding frames.

    Frames must share one shape; shorter prefixes average what exists. The
    mean is taken in float64, so e.g. 80, 90, 40 smooths to exactly 70.
    """
    if window < 1:
        raise ValueError("window must be >= 1")
    arrays = [np.asarray(f, dtype=np.float64) for f in frames]
    if not arrays:
        return []
    shape = arrays[0].shape
    for i, arr in enumerate(arrays[1:], start=1):
        if arr.shape != shape:
            raise ValueError(
                f"frame {i} has shape {arr.shape}, expected {shape}"
            )
    out = []
    for i in range(len(arrays)):
        lo = max(0, i - window + 1)
        chunk = arrays[lo : i + 1]
        out.append(sum(chunk[1:], start=chunk[0].copy()) / len(chunk))
    return out


def _parse_box(parts, path_hint, line_no):
    try:
        coords = [float(p) for p in parts]
    except ValueError as exc:
        raise ValueError(f"{path_hint}line {line_no}: bad coordinate: {exc}") from exc
    try:
        return BBox(*coords)
    except ValueError as exc:
        raise ValueError(f"{path_hint}line {line_no}: {exc}") from exc


def _records(text: str, kind: str, path_hint: str = ""):
    for line_no, raw in enumerate(text.splitlines(), start=1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        parts = line.split()
        if kind == "detection":
            if len(parts) not in (6, 7):
                raise ValueError(
                    f"{path_hint}line {line_no}: expected "
                    f"'image_id class_id x_min y_min x_max y_max [confidence]', "
                    f"got {len(parts)} fields"
                )
        elif len(parts) != 6:
            raise ValueError(
                f"{path_hint}line {line_no}: expected "
                f"'image_id class_id x_min y_min x_max y_max', got {len(parts)} fields"
            )
        image_id = parts[0]
        try:
            class_id = int(parts[1])
        except ValueError as exc:
            raise ValueError(
                f"{path_hint}line {line_no}: class id must be an integer"
            ) from exc
        bbox = _parse_box(parts[2:6], path_hint, line_no)
        if kind == "detection":
            confidence = 1.0
            if len(parts) == 7:
                try:
                    confidence = float(parts[6])
                except ValueError as exc:
                    raise ValueError(
                        f"{path_hint}line {line_no}: bad confidence"
                    ) from exc
            try:
                yield Detection(image_id, class_id, bbox, confidence)
            except ValueError as exc:
                raise ValueError(f"{path_hint}line {line_no}: {exc}") from exc
        else:
            yield GroundTruth(image_id, class_id, bbox)


def parse_detections(text: str, path_hint: str = "") -> list[Detection]:
    """Parse 'image_id class_id x_min y_min x_max y_max [confidence]' lines."""
    return list(_records(text, "detection", path_hint))


def parse_ground_truths(text: str, path_hint: str = "") -> list[GroundTruth]:
    """Parse 'image_id class_id x_min y_min x_max y_max' lines."""
    return list(_records(text, "ground_truth", path_hint))
