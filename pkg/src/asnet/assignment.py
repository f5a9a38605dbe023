"""Minimum-cost bipartite assignment and the two matching-cost constructions.

Cost matrices have one row per real ground-truth item and one column per
prediction (rows <= cols).  Predictions left without a row are implicitly
matched to the no-object slot.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .losses import LossConfig, box_loss
from .tensor_core import sigmoid


@dataclass(frozen=True)
class Assignment:
    columns: tuple[int, ...]
    total_cost: float

    @property
    def rows(self) -> tuple[int, ...]:
        return tuple(range(len(self.columns)))


def _shortest_augmenting_path(cost: np.ndarray):
    """Jonker-Volgenant style solver for n <= m. Returns (row->col, row duals, col duals)."""
    n, m = cost.shape
    inf = float("inf")
    u = np.zeros(n + 1)
    v = np.zeros(m + 1)
    owner = np.zeros(m + 1, dtype=np.int64)  # owner[j]: 1-based row matched to column j (0 = free)
    way = np.zeros(m + 1, dtype=np.int64)
    for i in range(1, n + 1):
        owner[0] = i
        j0 = 0
        minv = np.full(m + 1, inf)
        used = np.zeros(m + 1, dtype=bool)
        while True:
            used[j0] = True
            i0 = owner[j0]
            free = ~used[1:]
            reduced = cost[i0 - 1] - u[i0] - v[1:]
            better = free & (reduced < minv[1:])
            minv[1:][better] = reduced[better]
            way[1:][better] = j0
            cand = np.where(free, minv[1:], inf)
            j1 = int(np.argmin(cand)) + 1
            delta = cand[j1 - 1]
            used_idx = np.nonzero(used)[0]
            u[owner[used_idx]] += delta
            v[used_idx] -= delta
            minv[1:][free] -= delta
            j0 = j1
            if owner[j0] == 0:
                break
        while j0:
            j1 = way[j0]
            owner[j0] = owner[j1]
            j0 = j1
    row_to_col = np.empty(n, dtype=np.int64)
    for j in range(1, m + 1):
        if owner[j]:
            row_to_col[owner[j] - 1] = j - 1
    return row_to_col, u[1:], v[1:]


def _optimal_cost(cost: np.ndarray) -> float:
    if cost.shape[0] == 0:
        return 0.0
    cols, _, _ = _shortest_augmenting_path(cost)
    return float(cost[np.arange(len(cols)), cols].sum())


def hungarian_solve(cost) -> Assignment:
    """Optimal injective row->column map; among optima the lexicographically smallest column tuple."""
    c = np.asarray(cost, dtype=np.float64)
    if c.size == 0:
        return Assignment((), 0.0)
    if c.ndim != 2:
        raise ValueError(f"cost matrix must be 2-D, got shape {c.shape}")
    n, m = c.shape
    if n > m:
        raise ValueError(f"more ground-truth rows ({n}) than prediction columns ({m})")
    if not np.all(np.isfinite(c)):
        raise ValueError("cost matrix contains non-finite entries")

    cols, u, v = _shortest_augmenting_path(c)
    best = float(c[np.arange(n), cols].sum())
    tol = 1e-9 * max(1.0, float(np.abs(c).max()) * n)
    # Only edges tight under the optimal duals can appear in any optimum.
    tight = (c - u[:, None] - v[None, :]) <= tol

    chosen = list(cols)
    fixed_cost = 0.0
    free = np.ones(m, dtype=bool)
    for i in range(n):
        for j in np.nonzero(tight[i] & free)[0]:
            if j >= chosen[i]:
                break
            rest_free = free.copy()
            rest_free[j] = False
            rest_cols = np.nonzero(rest_free)[0]
            sub = c[i + 1 :][:, rest_cols]
            if sub.shape[0]:
                sub_assign, _, _ = _shortest_augmenting_path(sub)
                sub_cost = float(sub[np.arange(len(sub_assign)), sub_assign].sum())
            else:
                sub_assign, sub_cost = np.empty(0, dtype=np.int64), 0.0
            if fixed_cost + c[i, j] + sub_cost <= best + tol:
                chosen[i] = int(j)
                chosen[i + 1 :] = [int(rest_cols[k]) for k in sub_assign]
                break
        free[chosen[i]] = False
        fixed_cost += c[i, chosen[i]]

    chosen = tuple(int(j) for j in chosen)
    total = float(sum(c[i, j] for i, j in enumerate(chosen)))
    return Assignment(chosen, total)


def instance_cost_matrix(gt_classes, gt_boxes, pred_probs, pred_boxes, cfg: LossConfig = LossConfig()) -> np.ndarray:
    """entry(i, j) = box_loss(gt_i, pred_j) - p_j(class_i)."""
    probs = np.asarray(pred_probs, dtype=np.float64)
    if len(probs) == 0:
        raise ValueError("no predictions to match against")
    out = np.empty((len(gt_classes), len(probs)))
    for i, (cls, box) in enumerate(zip(gt_classes, gt_boxes)):
        if not 0 <= cls < probs.shape[1]:
            raise IndexError(f"ground-truth class {cls} outside {probs.shape[1]} predicted classes")
        for j in range(len(probs)):
            out[i, j] = box_loss(box, pred_boxes[j], cfg) - probs[j, cls]
    return out


def interaction_cost_matrix(gt_vectors, gt_verbs, pred_vectors, pred_logits) -> np.ndarray:
    """entry(i, j) = |v_i - v_j|_1 - sum over gt verbs l of sigmoid(logit_j[l])."""
    vec = np.asarray(pred_vectors, dtype=np.float64).reshape(-1, 4)
    scores = sigmoid(np.asarray(pred_logits, dtype=np.float64))
    out = np.empty((len(gt_vectors), len(vec)))
    for i, (v, verbs) in enumerate(zip(gt_vectors, gt_verbs)):
        verbs = list(verbs)
        if not verbs:
            raise ValueError(f"ground-truth interaction {i} has no verb labels")
        if any(not 0 <= l < scores.shape[1] for l in verbs):
            raise IndexError(f"verb labels {verbs} outside {scores.shape[1]} predicted verbs")
        out[i] = np.abs(vec - np.asarray(v, float)).sum(axis=1) - scores[:, verbs].sum(axis=1)
    return out
