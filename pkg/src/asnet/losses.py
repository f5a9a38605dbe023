"""Set-prediction training losses and their analytic gradients.

Boxes are (cx, cy, w, h) in normalized coordinates.  The no-object class is the
last column of an instance class-probability row.
"""
from __future__ import annotations

from dataclasses import dataclass, fields

import numpy as np

from .geometry import area, giou, to_xyxy
from .tensor_core import log_sigmoid, sigmoid

LOG_FLOOR = 1e-12


@dataclass(frozen=True)
class LossConfig:
    lambda_cls: float = 1.0
    lambda_reg: float = 2.0
    lambda_emb: float = 0.1
    lambda_l1_box: float = 5.0
    lambda_giou_box: float = 2.0
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0
    push_margin_t: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            if getattr(self, f.name) < 0:
                raise ValueError(f"{f.name} must be non-negative")
        if self.push_margin_t <= 0:
            raise ValueError("push_margin_t must be positive")


def box_loss(b, b_hat, cfg: LossConfig = LossConfig()) -> float:
    l1 = float(np.abs(np.asarray(b, float) - np.asarray(b_hat, float)).sum())
    return cfg.lambda_l1_box * l1 + cfg.lambda_giou_box * (1.0 - giou(to_xyxy(b), to_xyxy(b_hat)))


def instance_nll(p_hat, c: int) -> float:
    p_hat = np.asarray(p_hat, dtype=np.float64)
    if not 0 <= c < len(p_hat):
        raise IndexError(f"class {c} outside score vector of length {len(p_hat)}")
    return float(-np.log(max(p_hat[c], LOG_FLOOR)))


def focal_loss(logits, targets, cfg: LossConfig = LossConfig()) -> float:
    x = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    if x.shape != t.shape:
        raise ValueError(f"logits {x.shape} and targets {t.shape} differ in length")
    a, g = cfg.focal_alpha, cfg.focal_gamma
    p = sigmoid(x)
    pos = -a * (1.0 - p) ** g * log_sigmoid(x)
    neg = -(1.0 - a) * p**g * log_sigmoid(-x)
    return float(np.sum(np.where(t > 0.5, pos, neg)))


def push_loss(embeddings, cfg: LossConfig = LossConfig()) -> float:
    if len(embeddings) < 2:
        return 0.0
    e = np.asarray(embeddings, dtype=np.float64).reshape(len(embeddings), -1)
    total = 0.0
    for i in range(len(e) - 1):
        dist = np.linalg.norm(e[i + 1 :] - e[i], axis=1)
        total += float(np.sum(np.maximum(0.0, cfg.push_margin_t - dist) ** 2))
    return total


def pull_loss(pairs) -> float:
    """Sum of squared distances over (interaction-side, instance) embedding pairs."""
    return float(sum(np.sum((np.asarray(a, float) - np.asarray(b, float)) ** 2) for a, b in pairs))


def _check_assignment(assignment, n_pred: int):
    cols = list(assignment)
    if len(set(cols)) != len(cols):
        raise ValueError(f"duplicate prediction in assignment {cols}")
    if any(not 0 <= c < n_pred for c in cols):
        raise IndexError(f"assignment {cols} references predictions outside [0, {n_pred})")
    return cols


def instance_loss(class_probs, boxes, gt_classes, gt_boxes, assignment, cfg: LossConfig = LossConfig()) -> float:
    """Set loss over all predictions; predictions left unassigned are supervised as no-object."""
    probs = np.asarray(class_probs, dtype=np.float64)
    cols = _check_assignment(assignment, len(probs))
    no_object = probs.shape[1] - 1
    matched = dict(zip(cols, range(len(cols))))
    total = 0.0
    for j in range(len(probs)):
        if j in matched:
            i = matched[j]
            total += instance_nll(probs[j], gt_classes[i]) + box_loss(gt_boxes[i], boxes[j], cfg)
        else:
            total += instance_nll(probs[j], no_object)
    return total


def interaction_loss(verb_logits, vectors, gt_vectors, gt_verbs, assignment, cfg: LossConfig = LossConfig()) -> float:
    """``gt_verbs[i]`` is the set of verb indices of ground-truth interaction ``i``."""
    logits = np.asarray(verb_logits, dtype=np.float64)
    cols = _check_assignment(assignment, len(logits))
    matched = dict(zip(cols, range(len(cols))))
    total = 0.0
    for j in range(len(logits)):
        target = np.zeros(logits.shape[1])
        if j in matched:
            i = matched[j]
            target[list(gt_verbs[i])] = 1.0
            reg = float(np.abs(np.asarray(gt_vectors[i], float) - np.asarray(vectors[j], float)).sum())
            total += cfg.lambda_reg * reg
        total += cfg.lambda_cls * focal_loss(logits[j], target, cfg)
    return total


def total_loss(ins: float, inter: float, push: float, pull: float, cfg: LossConfig = LossConfig()) -> float:
    return ins + inter + cfg.lambda_emb * (pull + push)


# ---------------------------------------------------------------------------
# analytic gradients


def _giou_grad_xyxy(a, p):
    """d giou / d (a, p) for xyxy boxes; min/max ties take the first argument's branch."""
    ga = np.zeros(4)
    gp = np.zeros(4)
    aw, ah = a[2] - a[0], a[3] - a[1]
    pw, ph = p[2] - p[0], p[3] - p[1]
    iw = min(a[2], p[2]) - max(a[0], p[0])
    ih = min(a[3], p[3]) - max(a[1], p[1])
    inter = max(iw, 0.0) * max(ih, 0.0)
    union = aw * ah + pw * ph - inter
    cw = max(a[2], p[2]) - min(a[0], p[0])
    ch = max(a[3], p[3]) - min(a[1], p[1])
    c = cw * ch
    if c <= 0:
        return ga, gp
    iou_active = area(a) > 0 and area(p) > 0 and union > 0
    if iou_active:
        d_inter = 1.0 / union + inter / union**2 - 1.0 / c
        d_area = -inter / union**2 + 1.0 / c
    else:
        d_inter = -1.0 / c
        d_area = 1.0 / c
    d_c = -union / c**2

    # area terms
    for g, w_, h_ in ((ga, aw, ah), (gp, pw, ph)):
        g += d_area * np.array([-h_, -w_, h_, w_])
    # intersection terms
    if iw > 0 and ih > 0:
        gi = np.zeros(8)  # a0 a1 a2 a3 p0 p1 p2 p3
        gi[2 if a[2] <= p[2] else 6] += ih
        gi[0 if a[0] >= p[0] else 4] -= ih
        gi[3 if a[3] <= p[3] else 7] += iw
        gi[1 if a[1] >= p[1] else 5] -= iw
        ga += d_inter * gi[:4]
        gp += d_inter * gi[4:]
    # hull terms
    gc = np.zeros(8)
    gc[2 if a[2] >= p[2] else 6] += ch
    gc[0 if a[0] <= p[0] else 4] -= ch
    gc[3 if a[3] >= p[3] else 7] += cw
    gc[1 if a[1] <= p[1] else 5] -= cw
    ga += d_c * gc[:4]
    gp += d_c * gc[4:]
    return ga, gp


def _xyxy_grad_to_cxcywh(g):
    return np.array([g[0] + g[2], g[1] + g[3], (g[2] - g[0]) / 2, (g[3] - g[1]) / 2])


def box_loss_grad(b, b_hat, cfg: LossConfig = LossConfig()):
    b = np.asarray(b, dtype=np.float64)
    b_hat = np.asarray(b_hat, dtype=np.float64)
    s = np.sign(b - b_hat)
    ga, gp = _giou_grad_xyxy(to_xyxy(b), to_xyxy(b_hat))
    grad_b = cfg.lambda_l1_box * s - cfg.lambda_giou_box * _xyxy_grad_to_cxcywh(ga)
    grad_bh = -cfg.lambda_l1_box * s - cfg.lambda_giou_box * _xyxy_grad_to_cxcywh(gp)
    return grad_b, grad_bh


def instance_nll_grad(p_hat, c: int):
    p_hat = np.asarray(p_hat, dtype=np.float64)
    g = np.zeros_like(p_hat)
    if p_hat[c] > LOG_FLOOR:
        g[c] = -1.0 / p_hat[c]
    return g


def focal_loss_grad(logits, targets, cfg: LossConfig = LossConfig()):
    x = np.asarray(logits, dtype=np.float64)
    t = np.asarray(targets, dtype=np.float64)
    a, g = cfg.focal_alpha, cfg.focal_gamma
    p = sigmoid(x)
    q = sigmoid(-x)
    pos = a * q**g * (g * p * log_sigmoid(x) - q)
    neg = (1.0 - a) * p**g * (p - g * q * log_sigmoid(-x))
    return np.where(t > 0.5, pos, neg)


def push_loss_grad(embeddings, cfg: LossConfig = LossConfig()):
    if len(embeddings) == 0:
        return np.zeros((0, 0))
    e = np.asarray(embeddings, dtype=np.float64).reshape(len(embeddings), -1)
    g = np.zeros_like(e)
    for i in range(len(e)):
        for j in range(i + 1, len(e)):
            diff = e[i] - e[j]
            dist = float(np.linalg.norm(diff))
            if 0.0 < dist < cfg.push_margin_t:
                step = -2.0 * (cfg.push_margin_t - dist) * diff / dist
                g[i] += step
                g[j] -= step
    return g


def pull_loss_grad(pairs):
    """Returns one (grad_side, grad_instance) tuple per pair."""
    out = []
    for a, b in pairs:
        diff = np.asarray(a, float) - np.asarray(b, float)
        out.append((2.0 * diff, -2.0 * diff))
    return out


_GRADIENTS = {
    "box": box_loss_grad,
    "nll": instance_nll_grad,
    "focal": focal_loss_grad,
    "push": push_loss_grad,
    "pull": pull_loss_grad,
}


def loss_gradients(loss_id: str, *args, **kwargs):
    try:
        fn = _GRADIENTS[loss_id]
    except KeyError:
        raise ValueError(f"unknown loss id {loss_id!r}; expected one of {sorted(_GRADIENTS)}") from None
    return fn(*args, **kwargs)
