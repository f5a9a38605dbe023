"""Normalized box formats, overlap measures and interaction-vector construction."""
from __future__ import annotations

from typing import NamedTuple


class BoxCxCyWH(NamedTuple):
    cx: float
    cy: float
    w: float
    h: float


class BoxXYXY(NamedTuple):
    x0: float
    y0: float
    x1: float
    y1: float


class CenterPair(NamedTuple):
    """Endpoints of an interaction vector: human center then object center."""

    xh: float
    yh: float
    xo: float
    yo: float


def to_xyxy(b) -> BoxXYXY:
    cx, cy, w, h = b
    return BoxXYXY(cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2)


def to_cxcywh(b) -> BoxCxCyWH:
    x0, y0, x1, y1 = b
    return BoxCxCyWH((x0 + x1) / 2, (y0 + y1) / 2, x1 - x0, y1 - y0)


def area(b) -> float:
    x0, y0, x1, y1 = b
    return max(0.0, x1 - x0) * max(0.0, y1 - y0)


def _inter_union(a, b):
    iw = min(a[2], b[2]) - max(a[0], b[0])
    ih = min(a[3], b[3]) - max(a[1], b[1])
    inter = max(0.0, iw) * max(0.0, ih)
    return inter, area(a) + area(b) - inter


def iou(a, b) -> float:
    # zero-area boxes score 0 against everything, including themselves
    if area(a) <= 0.0 or area(b) <= 0.0:
        return 0.0
    inter, union = _inter_union(a, b)
    return inter / union if union > 0 else 0.0


def hull(a, b) -> BoxXYXY:
    return BoxXYXY(min(a[0], b[0]), min(a[1], b[1]), max(a[2], b[2]), max(a[3], b[3]))


def giou(a, b) -> float:
    inter, union = _inter_union(a, b)
    c = area(hull(a, b))
    if c <= 0.0:
        # both boxes collapse onto the same point or line
        return 0.0
    i = iou(a, b)
    return i - (c - union) / c


def interaction_vector(human, obj) -> CenterPair:
    return CenterPair(human[0], human[1], obj[0], obj[1])


def union_box(a, b) -> BoxXYXY:
    """Smallest box covering both (xyxy inputs); used for overlap scenarios."""
    return hull(a, b)
