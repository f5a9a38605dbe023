"""Turn raw instance and interaction predictions into scored HOI triplets."""
from __future__ import annotations

import logging
from dataclasses import dataclass
from enum import Enum

import numpy as np

log = logging.getLogger(__name__)

DEFAULT_TOP_N = 100


class MatchStrategy(str, Enum):
    VECTOR = "vector"
    EMBEDDING = "embedding"
    COMBINED = "combined"


@dataclass(frozen=True)
class TripletPrediction:
    hbox: tuple[float, float, float, float]
    hscore: float
    obox: tuple[float, float, float, float]
    oclass: int
    oscore: float
    verb: int
    score: float
    interaction: int = -1
    human: int = -1
    object: int = -1

    def to_json(self) -> dict:
        return {
            "hbox": list(self.hbox), "hscore": self.hscore,
            "obox": list(self.obox), "oclass": self.oclass, "oscore": self.oscore,
            "verb": self.verb, "score": self.score,
        }

    @classmethod
    def from_json(cls, d: dict) -> "TripletPrediction":
        return cls(
            tuple(float(x) for x in d["hbox"]), float(d["hscore"]),
            tuple(float(x) for x in d["obox"]), int(d["oclass"]), float(d["oscore"]),
            int(d["verb"]), float(d["score"]),
        )


def vector_distance_D(v_hat, human_center, object_center):
    """Product of (|offset| + 1) over the four endpoint coordinates. Broadcasts over arrays."""
    return (
        (np.abs(human_center[0] - v_hat[0]) + 1)
        * (np.abs(human_center[1] - v_hat[1]) + 1)
        * (np.abs(object_center[0] - v_hat[2]) + 1)
        * (np.abs(object_center[1] - v_hat[3]) + 1)
    )


def _l2(a, b):
    diff = np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)
    return np.sqrt(np.sum(diff * diff, axis=-1))


def embedding_distance_R(eps_h, eps_o, eps_h_hat, eps_o_hat):
    return (_l2(eps_h, eps_h_hat) + 1) * (_l2(eps_o, eps_o_hat) + 1)


def candidate_sets(probs, human_class: int):
    """Returns (kept indices, human indices, argmax class, argmax score) after dropping no-object argmaxes."""
    probs = np.asarray(probs, dtype=np.float64)
    no_object = probs.shape[1] - 1
    labels = probs.argmax(axis=1)
    kept = np.nonzero(labels != no_object)[0]
    humans = kept[labels[kept] == human_class]
    return kept, humans, labels, probs[np.arange(len(probs)), labels]


def pair_costs(v_hat, emb_h_hat, emb_o_hat, boxes, embeddings, humans, objects, scores, strategy):
    """Cost grid (len(humans) x len(objects)); a detection cannot pair with itself (cost inf)."""
    strategy = MatchStrategy(strategy)
    hb = boxes[humans]
    ob = boxes[objects]
    if strategy is MatchStrategy.EMBEDDING:
        dist = np.ones((len(humans), len(objects)))
    else:
        dist = vector_distance_D(v_hat, (hb[:, 0:1], hb[:, 1:2]), (ob[None, :, 0], ob[None, :, 1]))
    if strategy is MatchStrategy.VECTOR:
        emb = np.ones((len(humans), len(objects)))
    else:
        emb = (_l2(embeddings[humans], emb_h_hat)[:, None] + 1) * (_l2(embeddings[objects], emb_o_hat)[None, :] + 1)
    cost = dist * emb / (scores[humans][:, None] * scores[objects][None, :])
    cost[humans[:, None] == objects[None, :]] = np.inf
    return cost


def assemble_triplets(
    instances,
    interactions,
    strategy: MatchStrategy | str = MatchStrategy.COMBINED,
    human_class: int = 0,
    top_n: int = DEFAULT_TOP_N,
    score_floor: float = 0.0,
) -> list[TripletPrediction]:
    """``instances``/``interactions`` are the head outputs of one image (see ``model``).

    Each interaction is paired with the (human, object) detections of minimum
    D*R/(s_h*s_o); ties go to the lowest human index, then the lowest object index.
    """
    if top_n < 1:
        raise ValueError("top_n must be at least 1")
    boxes = np.asarray(instances.boxes, dtype=np.float64)
    embeddings = np.asarray(instances.embeddings, dtype=np.float64)
    kept, humans, labels, scores = candidate_sets(instances.probs, human_class)
    if len(humans) == 0:
        log.warning("no human candidates among %d detections; emitting no triplets", len(boxes))
        return []
    if len(kept) == 0 or (len(kept) == 1 and len(humans) == 1):
        log.warning("no object candidates distinct from the detected humans; emitting no triplets")
        return []

    vectors = np.asarray(interactions.vectors, dtype=np.float64)
    verb_scores = np.asarray(interactions.verb_scores, dtype=np.float64)
    triplets = []
    for r in range(len(vectors)):
        cost = pair_costs(vectors[r], interactions.emb_h[r], interactions.emb_o[r],
                          boxes, embeddings, humans, kept, scores, strategy)
        hi, oi = np.unravel_index(int(np.argmin(cost)), cost.shape)
        h, o = int(humans[hi]), int(kept[oi])
        sh, so = float(scores[h]), float(scores[o])
        for verb in np.nonzero(verb_scores[r] >= score_floor)[0]:
            triplets.append(TripletPrediction(
                tuple(float(x) for x in boxes[h]), sh,
                tuple(float(x) for x in boxes[o]), int(labels[o]), so,
                int(verb), float(verb_scores[r, verb]) * sh * so, r, h, o,
            ))
    triplets.sort(key=lambda t: (-t.score, t.interaction, t.verb))
    return triplets[:top_n]
