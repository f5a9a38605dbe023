"""Annotation / prediction schemas, JSON round-tripping, and deterministic synthetic data.

File layouts (coordinates normalized, indices zero-based)::

    annotations.json  {"manifest": {classes, verbs, human_class, hoi_counts{"verb:object": n}, seed},
                       "scenes": [{image_id, instances: [{box: [cx,cy,w,h], class}], hois: [{h, o, verb}]}]}
    predictions.json  [{image_id, triplets: [{hbox, hscore, obox, oclass, oscore, verb, score}]}]

RngStream consumption in ``generate_synthetic_dataset`` (per image, in order):
human count, object count, then per human 4 box draws, per object 1 class draw and
4 box draws, then the HOI count and 3 draws (human, object, verb) per HOI attempt.
"""
from __future__ import annotations

import json
import os
from collections import Counter, defaultdict
from dataclasses import dataclass, field
from pathlib import Path
from typing import NamedTuple

import numpy as np

from .evaluation import category_key, parse_category_key
from .geometry import iou, to_xyxy, union_box
from .model import FeatureGrid
from .postprocess import TripletPrediction
from .tensor_core import RngStream


class SchemaError(ValueError):
    pass


class Hoi(NamedTuple):
    h: int
    o: int
    verb: int


@dataclass(frozen=True)
class SceneAnnotation:
    image_id: int
    instances: tuple  # ((cx, cy, w, h), class) pairs
    hois: tuple  # Hoi triples

    def validate(self, human_class: int, n_classes: int | None = None, n_verbs: int | None = None):
        for k, (box, cls) in enumerate(self.instances):
            cx, cy, w, h = box
            if not (0 <= cx <= 1 and 0 <= cy <= 1 and w >= 0 and h >= 0):
                raise SchemaError(f"image {self.image_id}: instance {k} has invalid box {box}")
            if cls < 0 or n_classes is not None and cls >= n_classes:
                raise SchemaError(f"image {self.image_id}: instance {k} has invalid class {cls}")
        for k, hoi in enumerate(self.hois):
            if not (0 <= hoi.h < len(self.instances) and 0 <= hoi.o < len(self.instances)):
                raise SchemaError(f"image {self.image_id}: hoi {k} references a missing instance")
            if self.instances[hoi.h][1] != human_class:
                raise SchemaError(f"image {self.image_id}: hoi {k} subject is not a human instance")
            if hoi.verb < 0 or n_verbs is not None and hoi.verb >= n_verbs:
                raise SchemaError(f"image {self.image_id}: hoi {k} has invalid verb {hoi.verb}")

    def interactions(self):
        """Ground-truth interactions grouped per (human, object) pair:
        list of (human index, object index, (xh, yh, xo, yo), sorted verb tuple)."""
        verbs = defaultdict(set)
        for hoi in self.hois:
            verbs[(hoi.h, hoi.o)].add(hoi.verb)
        out = []
        for (h, o), vs in verbs.items():
            hb, ob = self.instances[h][0], self.instances[o][0]
            out.append((h, o, (hb[0], hb[1], ob[0], ob[1]), tuple(sorted(vs))))
        return out


@dataclass(frozen=True)
class DatasetManifest:
    classes: tuple
    verbs: tuple
    human_class: int
    hoi_counts: dict = field(default_factory=dict)  # (verb, object) -> count
    seed: int = 0

    def __post_init__(self):
        if len(set(self.classes)) != len(self.classes) or len(set(self.verbs)) != len(self.verbs):
            raise SchemaError("class and verb names must be unique")
        if not 0 <= self.human_class < len(self.classes):
            raise SchemaError(f"human_class {self.human_class} outside {len(self.classes)} classes")
        if any(n < 0 for n in self.hoi_counts.values()):
            raise SchemaError("hoi counts must be non-negative")


@dataclass(frozen=True)
class PredictionRecord:
    image_id: int
    triplets: tuple

    def validate(self):
        for t in self.triplets:
            if not 0 < t.score <= 1:
                raise SchemaError(f"image {self.image_id}: triplet score {t.score} outside (0, 1]")


def count_categories(scenes) -> dict:
    counts = Counter()
    for s in scenes:
        for hoi in s.hois:
            counts[(hoi.verb, s.instances[hoi.o][1])] += 1
    return dict(sorted(counts.items()))


def make_manifest(scenes, n_classes: int, n_verbs: int, human_class: int = 0, seed: int = 0) -> DatasetManifest:
    classes = tuple("person" if c == human_class else f"object_{c}" for c in range(n_classes))
    verbs = tuple(f"verb_{v}" for v in range(n_verbs))
    return DatasetManifest(classes, verbs, human_class, count_categories(scenes), seed)


# ---------------------------------------------------------------------------
# JSON


def atomic_write_text(path, text: str) -> None:
    path = Path(path)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    tmp.write_text(text)
    os.replace(tmp, path)


def dump_json(obj) -> str:
    # float repr is the shortest string that round-trips exactly (at most 17 significant digits)
    return json.dumps(obj, indent=1, allow_nan=False) + "\n"


def _field(d, key, ctx):
    try:
        return d[key]
    except (KeyError, TypeError):
        raise SchemaError(f"{ctx}: missing field {key!r}") from None


def _box(value, ctx):
    if not isinstance(value, (list, tuple)) or len(value) != 4:
        raise SchemaError(f"{ctx}: box must be a list of 4 numbers, got {value!r}")
    try:
        return tuple(float(x) for x in value)
    except (TypeError, ValueError):
        raise SchemaError(f"{ctx}: box must be a list of 4 numbers, got {value!r}") from None


def manifest_to_json(m: DatasetManifest) -> dict:
    return {
        "classes": list(m.classes),
        "verbs": list(m.verbs),
        "human_class": m.human_class,
        "hoi_counts": {category_key(*k): n for k, n in sorted(m.hoi_counts.items())},
        "seed": m.seed,
    }


def manifest_from_json(d: dict, ctx: str = "manifest") -> DatasetManifest:
    counts = {parse_category_key(k): int(n) for k, n in _field(d, "hoi_counts", ctx).items()}
    return DatasetManifest(
        tuple(_field(d, "classes", ctx)), tuple(_field(d, "verbs", ctx)),
        int(_field(d, "human_class", ctx)), counts, int(d.get("seed", 0)),
    )


def scene_to_json(s: SceneAnnotation) -> dict:
    return {
        "image_id": s.image_id,
        "instances": [{"box": list(box), "class": cls} for box, cls in s.instances],
        "hois": [{"h": x.h, "o": x.o, "verb": x.verb} for x in s.hois],
    }


def scene_from_json(d: dict, ctx: str = "scene") -> SceneAnnotation:
    image_id = _field(d, "image_id", ctx)
    ctx = f"{ctx} {image_id}"
    instances = tuple(
        (_box(_field(inst, "box", f"{ctx} instance {k}"), f"{ctx} instance {k}"), int(_field(inst, "class", f"{ctx} instance {k}")))
        for k, inst in enumerate(_field(d, "instances", ctx))
    )
    hois = tuple(
        Hoi(int(_field(x, "h", f"{ctx} hoi {k}")), int(_field(x, "o", f"{ctx} hoi {k}")), int(_field(x, "verb", f"{ctx} hoi {k}")))
        for k, x in enumerate(_field(d, "hois", ctx))
    )
    return SceneAnnotation(int(image_id), instances, hois)


def annotations_to_json(manifest: DatasetManifest, scenes) -> dict:
    return {"manifest": manifest_to_json(manifest), "scenes": [scene_to_json(s) for s in scenes]}


def annotations_from_json(doc: dict, ctx: str = "annotations"):
    manifest = manifest_from_json(_field(doc, "manifest", ctx), f"{ctx}: manifest")
    scenes = [scene_from_json(s, f"{ctx}: scene") for s in _field(doc, "scenes", ctx)]
    ids = [s.image_id for s in scenes]
    if len(set(ids)) != len(ids):
        raise SchemaError(f"{ctx}: duplicate image ids")
    for s in scenes:
        s.validate(manifest.human_class, len(manifest.classes), len(manifest.verbs))
    return manifest, scenes


def predictions_to_json(records) -> list:
    return [{"image_id": r.image_id, "triplets": [t.to_json() for t in r.triplets]} for r in records]


def predictions_from_json(doc, ctx: str = "predictions") -> list:
    if not isinstance(doc, list):
        raise SchemaError(f"{ctx}: top level must be a list of image records")
    out = []
    for k, r in enumerate(doc):
        rctx = f"{ctx}[{k}]"
        try:
            triplets = tuple(TripletPrediction.from_json(t) for t in _field(r, "triplets", rctx))
        except (KeyError, TypeError, ValueError) as exc:
            raise SchemaError(f"{rctx}: malformed triplet ({exc})") from None
        rec = PredictionRecord(int(_field(r, "image_id", rctx)), triplets)
        rec.validate()
        out.append(rec)
    return out


def read_json(path):
    path = Path(path)
    try:
        return json.loads(path.read_text())
    except FileNotFoundError:
        raise SchemaError(f"{path}: file not found") from None
    except json.JSONDecodeError as exc:
        raise SchemaError(f"{path}: invalid JSON ({exc})") from None


def load_annotations(path):
    return annotations_from_json(read_json(path), str(path))


def save_annotations(path, manifest, scenes) -> None:
    atomic_write_text(path, dump_json(annotations_to_json(manifest, scenes)))


def load_predictions(path):
    return predictions_from_json(read_json(path), str(path))


def save_predictions(path, records) -> None:
    atomic_write_text(path, dump_json(predictions_to_json(records)))


# ---------------------------------------------------------------------------
# synthetic data


def _zipf(n: int) -> np.ndarray:
    return 1.0 / np.arange(1, n + 1)


def _random_box(rng: RngStream, wmin, wmax, hmin, hmax):
    w, h, u, v = rng.uniform(4)
    w = wmin + (wmax - wmin) * w
    h = hmin + (hmax - hmin) * h
    return (float(w / 2 + (1 - w) * u), float(h / 2 + (1 - h) * v), float(w), float(h))


def generate_synthetic_dataset(n_images: int, seed: int, n_classes: int = 12, n_verbs: int = 8, human_class: int = 0):
    """Random valid scenes with 1-4 humans, 1-6 objects and 1-6 HOIs each.

    Object classes and verbs follow a 1/rank profile so that some verb-object
    categories are rare.
    """
    if n_images < 1:
        raise ValueError("n_images must be at least 1")
    if n_verbs < 1 or n_classes < 2 or not 0 <= human_class < n_classes:
        raise ValueError("need at least one verb, a human class and one object class")
    rng = RngStream(seed)
    object_classes = [c for c in range(n_classes) if c != human_class]
    class_w = _zipf(len(object_classes))
    verb_w = _zipf(n_verbs)
    scenes = []
    for image_id in range(n_images):
        n_h = rng.integers(1, 5)
        n_o = rng.integers(1, 7)
        instances = [(_random_box(rng, 0.1, 0.4, 0.2, 0.6), human_class) for _ in range(n_h)]
        for _ in range(n_o):
            cls = object_classes[rng.choice_weighted(class_w)]
            instances.append((_random_box(rng, 0.05, 0.35, 0.05, 0.35), cls))
        n_hoi = min(rng.integers(1, 7), n_h * n_o * n_verbs)
        hois = []
        attempts = 0
        while len(hois) < n_hoi and attempts < 50 * n_hoi:
            attempts += 1
            hoi = Hoi(rng.integers(0, n_h), n_h + rng.integers(0, n_o), rng.choice_weighted(verb_w))
            if hoi not in hois:
                hois.append(hoi)
        scenes.append(SceneAnnotation(image_id, tuple(instances), tuple(hois)))
    return make_manifest(scenes, n_classes, n_verbs, human_class, seed), scenes


def pair_midpoint(scene: SceneAnnotation, hoi: Hoi):
    hb, ob = scene.instances[hoi.h][0], scene.instances[hoi.o][0]
    return ((hb[0] + ob[0]) / 2, (hb[1] + ob[1]) / 2)


def pair_union(scene: SceneAnnotation, hoi: Hoi):
    return union_box(to_xyxy(scene.instances[hoi.h][0]), to_xyxy(scene.instances[hoi.o][0]))


def generate_overlap_scenario(seed: int, n_scenes: int = 8, n_classes: int = 12, n_verbs: int = 8, human_class: int = 0):
    """Scenes with two HOIs of different verbs whose human-object pairs share a midpoint
    (within 0.01) and whose union boxes overlap with IoU > 0.7."""
    rng = RngStream(seed)
    object_classes = [c for c in range(n_classes) if c != human_class]
    if n_verbs < 2:
        raise ValueError("the overlap scenario needs two distinct verbs")
    scenes = []
    while len(scenes) < n_scenes:
        mx, my, ax, ay, jx, jy, bj, cj = rng.uniform(8)
        mid = (0.4 + 0.2 * mx, 0.4 + 0.2 * my)
        half = (0.08 + 0.1 * ax, 0.1 * (ay - 0.5))
        # second pair: same midpoint, endpoints nudged by at most 0.01 per axis
        half2 = (half[0] + 0.02 * (jx - 0.5), half[1] + 0.02 * (jy - 0.5))
        hw, hh = 0.12 + 0.04 * bj, 0.3 + 0.1 * cj
        ow = oh = 0.1 + 0.05 * bj
        h1 = (mid[0] - half[0], mid[1] - half[1], hw, hh)
        o1 = (mid[0] + half[0], mid[1] + half[1], ow, oh)
        h2 = (mid[0] - half2[0], mid[1] - half2[1], hw * 1.05, hh * 0.97)
        o2 = (mid[0] + half2[0], mid[1] + half2[1], ow * 0.95, oh * 1.05)
        cls = object_classes[rng.integers(0, len(object_classes))]
        v1 = rng.integers(0, n_verbs)
        v2 = (v1 + 1 + rng.integers(0, n_verbs - 1)) % n_verbs
        instances = ((h1, human_class), (o1, cls), (h2, human_class), (o2, cls))
        scene = SceneAnnotation(len(scenes), instances, (Hoi(0, 1, v1), Hoi(2, 3, v2)))
        if overlap_ok(scene):
            scenes.append(scene)
    return scenes


def overlap_ok(scene: SceneAnnotation) -> bool:
    a, b = scene.hois[:2]
    (ax, ay), (bx, by) = pair_midpoint(scene, a), pair_midpoint(scene, b)
    return (
        np.hypot(ax - bx, ay - by) <= 0.01
        and iou(pair_union(scene, a), pair_union(scene, b)) > 0.7
        and a.verb != b.verb
        and all(0 <= v <= 1 for box, _ in scene.instances for v in box)
    )


def _jitter(box, noise: float, u):
    cx, cy, w, h = (b + noise * (2 * x - 1) for b, x in zip(box, u))
    return (min(max(cx, 0.0), 1.0), min(max(cy, 0.0), 1.0), max(w, 0.0), max(h, 0.0))


def perturb_to_predictions(scenes, box_noise: float, score_quality: float, fp_rate: float, seed: int,
                           n_classes: int | None = None, n_verbs: int | None = None, human_class: int = 0):
    """Ground-truth triplets with box jitter <= box_noise per coordinate plus injected false positives.

    True positives score in [q, 1] and false positives in (0, 1 - q] for q =
    score_quality; each image receives floor(fp_rate) false positives plus one
    more with probability frac(fp_rate).
    """
    if box_noise < 0 or not 0 <= score_quality <= 1 or fp_rate < 0:
        raise ValueError("box_noise >= 0, score_quality in [0, 1] and fp_rate >= 0 are required")
    if n_classes is None:
        n_classes = 1 + max(cls for s in scenes for _, cls in s.instances)
    if n_verbs is None:
        n_verbs = 1 + max((h.verb for s in scenes for h in s.hois), default=0)
    q = score_quality
    rng = RngStream(seed)
    records = []
    for s in scenes:
        triplets = []
        for hoi in s.hois:
            hbox, _ = s.instances[hoi.h]
            obox, ocls = s.instances[hoi.o]
            u = rng.uniform(9)
            score = q + (1 - q) * u[8]
            triplets.append(TripletPrediction(
                _jitter(hbox, box_noise, u[:4]), 1.0, _jitter(obox, box_noise, u[4:8]), ocls, 1.0,
                hoi.verb, float(max(score, 1e-6))))
        n_fp = int(fp_rate) + int(rng.random() < fp_rate - int(fp_rate))
        for _ in range(n_fp):
            hb = _random_box(rng, 0.05, 0.4, 0.05, 0.4)
            ob = _random_box(rng, 0.05, 0.4, 0.05, 0.4)
            ocls = rng.integers(0, n_classes)
            verb = rng.integers(0, n_verbs)
            score = (1 - q) * rng.random()
            triplets.append(TripletPrediction(hb, 1.0, ob, ocls, 1.0, verb, float(max(score, 1e-6))))
        records.append(PredictionRecord(s.image_id, tuple(triplets)))
    return records


def render_feature_grid(scene: SceneAnnotation, width: int, height: int, channels: int, seed: int, noise: float = 0.1) -> FeatureGrid:
    """Stand-in for backbone features: one Gaussian blob per instance on a class-keyed
    channel group, plus seeded uniform noise."""
    rng = RngStream(seed, counter=(scene.image_id + 1) << 32)
    data = noise * (2 * rng.uniform(height * width * channels) - 1).reshape(height, width, channels)
    ys = (np.arange(height) + 0.5) / height
    xs = (np.arange(width) + 0.5) / width
    group = max(1, channels // 16)
    for (cx, cy, w, h), cls in scene.instances:
        blob = np.exp(-0.5 * (((xs[None, :] - cx) / max(w / 2, 1e-3)) ** 2 + ((ys[:, None] - cy) / max(h / 2, 1e-3)) ** 2))
        start = (cls * group) % channels
        data[:, :, start:start + group] += blob[:, :, None]
    return FeatureGrid(width, height, channels, data)


# ---------------------------------------------------------------------------
# raw model outputs (infer -> post / match)


def raw_outputs_to_json(image_id: int, out) -> dict:
    ins, inter = out.instances, out.interactions
    return {
        "image_id": image_id,
        "instances": {"boxes": ins.boxes.tolist(), "logits": ins.logits.tolist(), "embeddings": ins.embeddings.tolist()},
        "interactions": {
            "vectors": inter.vectors.tolist(), "verb_logits": inter.verb_logits.tolist(),
            "emb_h": inter.emb_h.tolist(), "emb_o": inter.emb_o.tolist(),
        },
    }


def raw_outputs_from_json(d: dict, ctx: str = "raw"):
    """Rebuilds (image_id, InstancePredictions, InteractionPredictions) from an infer record."""
    from .model import InstancePredictions, InteractionPredictions
    from .tensor_core import sigmoid, softmax_rows

    image_id = int(_field(d, "image_id", ctx))
    ctx = f"{ctx} image {image_id}"
    ins = _field(d, "instances", ctx)
    inter = _field(d, "interactions", ctx)

    def mat(src, key, cols=None):
        arr = np.asarray(_field(src, key, ctx), dtype=np.float64)
        if arr.ndim != 2 or cols is not None and arr.shape[1] != cols:
            raise SchemaError(f"{ctx}: field {key!r} has shape {arr.shape}")
        return arr

    logits = mat(ins, "logits")
    verb_logits = mat(inter, "verb_logits")
    instances = InstancePredictions(mat(ins, "boxes", 4), logits, softmax_rows(logits), mat(ins, "embeddings"))
    interactions = InteractionPredictions(mat(inter, "vectors", 4), verb_logits, np.asarray(sigmoid(verb_logits)),
                                          mat(inter, "emb_h"), mat(inter, "emb_o"))
    return image_id, instances, interactions
