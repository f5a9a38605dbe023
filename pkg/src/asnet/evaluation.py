"""HOI triplet mAP with Full / Rare / Non-Rare splits under Default and Known-Object settings."""
from __future__ import annotations

import math
from collections import defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass

import numpy as np

from .geometry import iou, to_xyxy

SETTINGS = ("default", "known-object")
RARE_THRESHOLD = 10
IOU_THRESHOLD = 0.5


def category_key(verb: int, obj: int) -> str:
    return f"{verb}:{obj}"


def parse_category_key(key: str) -> tuple[int, int]:
    verb, obj = key.split(":")
    return int(verb), int(obj)


@dataclass(frozen=True)
class GtTriplet:
    hbox: tuple
    obox: tuple
    oclass: int
    verb: int


def gt_triplets(scene) -> list[GtTriplet]:
    out = []
    for hoi in scene.hois:
        h_box, _ = scene.instances[hoi.h]
        o_box, o_cls = scene.instances[hoi.o]
        out.append(GtTriplet(tuple(h_box), tuple(o_box), o_cls, hoi.verb))
    return out


def _overlaps(pred, gt):
    return (iou(to_xyxy(pred.hbox), to_xyxy(gt.hbox)), iou(to_xyxy(pred.obox), to_xyxy(gt.obox)))


def triplet_correct(pred, gt) -> bool:
    if pred.verb != gt.verb or pred.oclass != gt.oclass:
        return False
    ih, io = _overlaps(pred, gt)
    return ih > IOU_THRESHOLD and io > IOU_THRESHOLD


def average_precision(hits, n_gt: int) -> float:
    """All-point AP (area under the precision envelope) for rank-ordered hit flags."""
    hits = np.asarray(hits, dtype=bool)
    if n_gt <= 0 or hits.size == 0:
        return 0.0
    tp = np.cumsum(hits)
    fp = np.cumsum(~hits)
    recall = tp / n_gt
    precision = tp / (tp + fp)
    mrec = np.concatenate([[0.0], recall, [1.0]])
    mpre = np.concatenate([[0.0], precision, [0.0]])
    mpre = np.maximum.accumulate(mpre[::-1])[::-1]
    steps = np.nonzero(mrec[1:] != mrec[:-1])[0]
    return float(np.sum((mrec[steps + 1] - mrec[steps]) * mpre[steps + 1]))


def greedy_hits(ranked_preds, gts) -> list[bool]:
    """Highest score first; each prediction claims the unmatched correct GT with the largest
    min(human IoU, object IoU), ties to the lowest GT index."""
    taken = [False] * len(gts)
    hits = []
    for pred in ranked_preds:
        best, best_overlap = -1, -1.0
        for g, gt in enumerate(gts):
            if taken[g] or not triplet_correct(pred, gt):
                continue
            overlap = min(_overlaps(pred, gt))
            if overlap > best_overlap:
                best, best_overlap = g, overlap
        if best >= 0:
            taken[best] = True
        hits.append(best >= 0)
    return hits


@dataclass(frozen=True)
class EvalReport:
    setting: str
    per_category: dict  # (verb, object) -> AP
    map_full: float
    map_rare: float
    map_nonrare: float
    rare_categories: frozenset = frozenset()

    def to_json(self) -> dict:
        def num(x):
            return None if math.isnan(x) else x

        return {
            "setting": self.setting,
            "per_category": {category_key(*k): v for k, v in sorted(self.per_category.items())},
            "map_full": num(self.map_full),
            "map_rare": num(self.map_rare),
            "map_nonrare": num(self.map_nonrare),
        }

    def table(self) -> str:
        rows = [("category", "split", "AP")]
        for key, ap in sorted(self.per_category.items()):
            rows.append((category_key(*key), "rare" if key in self.rare_categories else "non-rare", f"{ap:.4f}"))
        width = [max(len(r[i]) for r in rows) for i in range(3)]
        lines = [f"{r[0]:<{width[0]}}  {r[1]:<{width[1]}}  {r[2]:>{width[2]}}" for r in rows]
        lines.append("")
        for name, val in (("mAP full", self.map_full), ("mAP rare", self.map_rare), ("mAP non-rare", self.map_nonrare)):
            lines.append(f"{name:<14}{'n/a' if math.isnan(val) else f'{val:.4f}'}")
        return f"setting: {self.setting}\n" + "\n".join(lines) + "\n"


def _mean(values) -> float:
    values = list(values)
    return float(np.mean(values)) if values else float("nan")


def evaluate(predictions, scenes, setting: str = "default", rare_counts=None, workers: int = 1) -> EvalReport:
    """``predictions``: PredictionRecords; ``scenes``: SceneAnnotations; ``rare_counts`` maps
    (verb, object) to its training-set count (absent categories count as 0)."""
    if setting not in SETTINGS:
        raise ValueError(f"unknown setting {setting!r}; expected one of {SETTINGS}")
    rare_counts = rare_counts or {}
    order = {s.image_id: i for i, s in enumerate(scenes)}
    gt_by_cat = defaultdict(lambda: defaultdict(list))
    classes_in_image = []
    for s in scenes:
        classes_in_image.append({cls for _, cls in s.instances})
        for t in gt_triplets(s):
            gt_by_cat[(t.verb, t.oclass)][order[s.image_id]].append(t)

    # pooled predictions keep (score, image position, triplet position) for the rank tie-break
    pred_by_cat = defaultdict(list)
    for p_idx, record in enumerate(predictions):
        if record.image_id not in order:
            raise KeyError(f"prediction references unknown image {record.image_id!r}")
        img = order[record.image_id]
        for t_idx, t in enumerate(record.triplets):
            pred_by_cat[(t.verb, t.oclass)].append((t.score, p_idx, t_idx, img, t))

    def score_category(cat):
        verb, obj = cat
        admissible = None
        if setting == "known-object":
            admissible = {i for i, cls in enumerate(classes_in_image) if obj in cls}
        preds = [p for p in pred_by_cat.get(cat, []) if admissible is None or p[3] in admissible]
        gts = gt_by_cat.get(cat, {})
        n_gt = sum(len(v) for i, v in gts.items() if admissible is None or i in admissible)
        if n_gt == 0 and not preds:
            return cat, None
        preds.sort(key=lambda p: (-p[0], p[1], p[2]))
        by_image = defaultdict(list)
        for p in preds:
            by_image[p[3]].append(p)
        hits_by_pred = {}
        for img, img_preds in by_image.items():
            flags = greedy_hits([p[4] for p in img_preds], gts.get(img, []))
            for p, f in zip(img_preds, flags):
                hits_by_pred[(p[1], p[2])] = f
        hits = [hits_by_pred[(p[1], p[2])] for p in preds]
        return cat, average_precision(hits, n_gt)

    categories = sorted(set(gt_by_cat) | set(pred_by_cat))
    if workers > 1:
        with ThreadPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(score_category, categories))
    else:
        results = [score_category(c) for c in categories]
    per_category = {cat: ap for cat, ap in results if ap is not None}
    rare = frozenset(c for c in per_category if rare_counts.get(c, 0) < RARE_THRESHOLD)
    return EvalReport(
        setting=setting,
        per_category=per_category,
        map_full=_mean(per_category.values()),
        map_rare=_mean(ap for c, ap in per_category.items() if c in rare),
        map_nonrare=_mean(ap for c, ap in per_category.items() if c not in rare),
        rare_categories=rare,
    )
