from __future__ import annotations

from ..geometry import rotated_iou


def nms(detections: list, iou_threshold: float) -> list:
    """Greedy suppression by rotated 3D IoU.

    Order: higher score first, then confident boxes before low-confidence
    ones, then input order.
    """
    order = sorted(range(len(detections)),
                   key=lambda i: (-detections[i].score, detections[i].low_confidence, i))
    kept = []
    for i in order:
        box = detections[i]
        if all(rotated_iou(box, k) <= iou_threshold for k in kept):
            kept.append(box)
    return kept
