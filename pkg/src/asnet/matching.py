"""Per-image set matching against ground truth and the resulting loss breakdown."""
from __future__ import annotations

from dataclasses import dataclass

from .assignment import Assignment, hungarian_solve, instance_cost_matrix, interaction_cost_matrix
from .losses import LossConfig, instance_loss, interaction_loss, pull_loss, push_loss, total_loss


@dataclass(frozen=True)
class MatchResult:
    image_id: int
    instance_assignment: Assignment
    interaction_assignment: Assignment
    instance_loss: float
    interaction_loss: float
    push_loss: float
    pull_loss: float
    total_loss: float

    def to_json(self) -> dict:
        return {
            "image_id": self.image_id,
            "instance_assignment": list(self.instance_assignment.columns),
            "instance_match_cost": self.instance_assignment.total_cost,
            "interaction_assignment": list(self.interaction_assignment.columns),
            "interaction_match_cost": self.interaction_assignment.total_cost,
            "instance_loss": self.instance_loss,
            "interaction_loss": self.interaction_loss,
            "push_loss": self.push_loss,
            "pull_loss": self.pull_loss,
            "total_loss": self.total_loss,
        }


def match_scene(scene, instances, interactions, cfg: LossConfig = LossConfig()) -> MatchResult:
    """Hungarian-match one image's predictions to its annotation and evaluate every loss term."""
    gt_classes = [cls for _, cls in scene.instances]
    gt_boxes = [box for box, _ in scene.instances]
    if len(gt_classes) > len(instances.probs):
        raise ValueError(f"image {scene.image_id}: {len(gt_classes)} instances exceed {len(instances.probs)} queries")
    ins_assign = hungarian_solve(instance_cost_matrix(gt_classes, gt_boxes, instances.probs, instances.boxes, cfg))

    gt_inter = scene.interactions()
    if len(gt_inter) > len(interactions.vectors):
        raise ValueError(f"image {scene.image_id}: {len(gt_inter)} interactions exceed {len(interactions.vectors)} queries")
    gt_vectors = [v for _, _, v, _ in gt_inter]
    gt_verbs = [vs for _, _, _, vs in gt_inter]
    if gt_inter:
        int_assign = hungarian_solve(interaction_cost_matrix(gt_vectors, gt_verbs, interactions.vectors, interactions.verb_logits))
    else:
        int_assign = Assignment((), 0.0)

    l_ins = instance_loss(instances.probs, instances.boxes, gt_classes, gt_boxes, ins_assign.columns, cfg)
    l_int = interaction_loss(interactions.verb_logits, interactions.vectors, gt_vectors, gt_verbs, int_assign.columns, cfg)
    emb = instances.embeddings
    l_push = push_loss([emb[j] for j in ins_assign.columns], cfg)
    pairs = []
    for (h, o, _, _), j in zip(gt_inter, int_assign.columns):
        pairs.append((interactions.emb_h[j], emb[ins_assign.columns[h]]))
        pairs.append((interactions.emb_o[j], emb[ins_assign.columns[o]]))
    l_pull = pull_loss(pairs)
    return MatchResult(scene.image_id, ins_assign, int_assign, l_ins, l_int, l_push, l_pull,
                       total_loss(l_ins, l_int, l_push, l_pull, cfg))
