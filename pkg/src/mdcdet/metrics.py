"""Detection metrics: IoU, per-class AP at IoU 0.5, and continual splits."""

from __future__ import annotations

import csv
import io
import json
from dataclasses import asdict, dataclass, field
from typing import Hashable, Iterable, Mapping, Sequence

import numpy as np

from .errors import InvalidBoxError
from .matching import box_to_corners


def iou(box_a, box_b) -> float:
    """Intersection over union of two (cx, cy, w, h) boxes."""
    a, b = np.asarray(box_a, dtype=np.float64), np.asarray(box_b, dtype=np.float64)
    if a[2] <= 0 or a[3] <= 0 or b[2] <= 0 or b[3] <= 0:
        raise InvalidBoxError("boxes need positive width and height")
    return float(iou_matrix(a[None], b[None])[0, 0])


def iou_matrix(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64).reshape(-1, 4)
    b = np.asarray(b, dtype=np.float64).reshape(-1, 4)
    ca, cb = box_to_corners(a)[:, None], box_to_corners(b)[None]
    wh = np.clip(np.minimum(ca[..., 2:], cb[..., 2:]) - np.maximum(ca[..., :2], cb[..., :2]), 0, None)
    inter = wh.prod(-1)
    # areas from the same corners as the intersection, so identical boxes give exactly 1
    area_a = (ca[..., 2:] - ca[..., :2]).prod(-1)
    area_b = (cb[..., 2:] - cb[..., :2]).prod(-1)
    union = area_a + area_b - inter
    return inter / union


@dataclass(frozen=True)
class Detection:
    image: Hashable
    score: float
    box: tuple[float, float, float, float]


def average_precision(
    detections: Sequence[Detection],
    ground_truths: Mapping[Hashable, Sequence],
    iou_thresh: float = 0.5,
) -> float | None:
    """All-point interpolated AP for one class; None if the class has no GT.

    Detections are visited by descending score (ties by list order). Each
    one takes the best-overlapping still-unmatched ground truth in its image
    when that IoU reaches ``iou_thresh``; otherwise it is a false positive.
    """
    n_gt = sum(len(v) for v in ground_truths.values())
    if n_gt == 0:
        return None
    if not detections:
        return 0.0
    gt = {k: np.asarray(v, dtype=np.float64).reshape(-1, 4) for k, v in ground_truths.items()}
    taken = {k: np.zeros(len(v), dtype=bool) for k, v in gt.items()}
    order = sorted(range(len(detections)), key=lambda i: -detections[i].score)
    tp = np.zeros(len(order))
    for rank, i in enumerate(order):
        d = detections[i]
        boxes = gt.get(d.image)
        if boxes is None or not len(boxes):
            continue
        ov = iou_matrix(np.asarray(d.box)[None], boxes)[0]
        ov[taken[d.image]] = -1.0
        j = int(np.argmax(ov))
        if ov[j] >= iou_thresh:
            taken[d.image][j] = True
            tp[rank] = 1.0
    ctp = np.cumsum(tp)
    recall = ctp / n_gt
    precision = ctp / np.arange(1, len(order) + 1)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    step = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[step + 1] - mrec[step]) * mpre[step + 1]))


def _mean(values: list[float]) -> float | None:
    return float(np.mean(values)) if values else None


def continual_map(
    ap_table: Mapping[int, float | None], t: int, class_splits: Sequence[Iterable[int]]
) -> tuple[float | None, float | None, float | None]:
    """(mAP over past classes, over current classes, over all seen classes).

    ``t`` is 1-based; ``class_splits[s]`` lists task s+1's classes. Classes
    whose AP is None (absent from the evaluation data) are left out.
    """
    past = [c for cs in class_splits[: t - 1] for c in cs]
    current = list(class_splits[t - 1])

    def defined(cs):
        return [ap_table[c] for c in cs if ap_table.get(c) is not None]

    map_p = _mean(defined(past)) if t > 1 else None
    return map_p, _mean(defined(current)), _mean(defined(past + current))


@dataclass
class EvalReport:
    task: int
    map_p: float | None
    map_c: float | None
    map_a: float | None
    per_class_ap: dict[str, float | None]
    tasks_evaluated: list[int]
    config_hash: str = ""
    seed: int = 0
    extra: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True, indent=2)

    def rows(self, label: str | None = None) -> list[list]:
        rows = []
        for metric in ("map_p", "map_c", "map_a"):
            value = getattr(self, metric)
            row = [self.task, metric, "" if value is None else repr(value)]
            rows.append([label] + row if label is not None else row)
        return rows

    @classmethod
    def from_dict(cls, d: dict) -> "EvalReport":
        return cls(**d)


def reports_to_csv(reports: Sequence[EvalReport]) -> str:
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["task", "metric", "value"])
    for r in reports:
        writer.writerows(r.rows())
    return buf.getvalue()
