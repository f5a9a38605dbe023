"""Oracle and invariant checks runnable without pytest (``asnet selfcheck``)."""
from __future__ import annotations

import itertools
import tempfile
import time
from pathlib import Path

import numpy as np

from . import dataio
from .assignment import hungarian_solve, interaction_cost_matrix
from .evaluation import average_precision, evaluate
from .losses import (
    LossConfig, box_loss, box_loss_grad, focal_loss, focal_loss_grad, instance_nll, instance_nll_grad,
    pull_loss, pull_loss_grad, push_loss, push_loss_grad,
)
from .model import FeatureGrid, ModelConfig, forward_full, init_weights
from .postprocess import MatchStrategy, assemble_triplets, candidate_sets, embedding_distance_R, vector_distance_D

FD_STEP = 1e-4
FD_RTOL = 1e-4
KINK_MARGIN = 1e-3


def brute_force_assignment(cost: np.ndarray) -> float:
    n, m = cost.shape
    perms = np.array(list(itertools.permutations(range(m), n)), dtype=np.int64).reshape(-1, n)
    return float(cost[np.arange(n), perms].sum(axis=1).min()) if n else 0.0


def central_difference(f, x: np.ndarray, h: float = FD_STEP) -> np.ndarray:
    x = np.array(x, dtype=np.float64)
    g = np.zeros_like(x)
    for idx in np.ndindex(x.shape):
        up, dn = x.copy(), x.copy()
        up[idx] += h
        dn[idx] -= h
        g[idx] = (f(up) - f(dn)) / (2 * h)
    return g


def relative_error(a, b) -> float:
    a, b = np.ravel(a), np.ravel(b)
    scale = max(np.linalg.norm(a), np.linalg.norm(b))
    return 0.0 if scale == 0 else float(np.linalg.norm(a - b) / scale)


def check_hungarian(seed: int):
    rng = np.random.default_rng(seed)
    worst = 0.0
    start = time.perf_counter()
    for _ in range(1000):
        n = int(rng.integers(1, 8))
        m = int(rng.integers(n, 8))
        cost = rng.uniform(-5, 5, size=(n, m))
        worst = max(worst, abs(hungarian_solve(cost).total_cost - brute_force_assignment(cost)))
    elapsed = time.perf_counter() - start
    return worst <= 1e-9 and elapsed < 10, f"max |delta| {worst:.2e}, {elapsed:.2f}s"


def _box_kinky(b, bh):
    """True when two box edges, an l1 component or the overlap edge sit within the kink margin."""
    b = np.asarray(b)
    bh = np.asarray(bh)
    if np.any(np.abs(b - bh) < KINK_MARGIN):
        return True
    a = np.array([b[0] - b[2] / 2, b[1] - b[3] / 2, b[0] + b[2] / 2, b[1] + b[3] / 2])
    p = np.array([bh[0] - bh[2] / 2, bh[1] - bh[3] / 2, bh[0] + bh[2] / 2, bh[1] + bh[3] / 2])
    edges = np.concatenate([a[[0, 2]], p[[0, 2]]]), np.concatenate([a[[1, 3]], p[[1, 3]]])
    for e in edges:
        d = np.abs(e[:, None] - e[None, :])
        if np.any(d[np.triu_indices(4, 1)] < KINK_MARGIN):
            return True
    return False


def gradient_points(seed: int, n: int = 100):
    """Yields (name, analytic gradient, finite-difference gradient) at ``n`` non-kink points per loss."""
    rng = np.random.default_rng(seed)
    cfg = LossConfig()

    def rand_box():
        w, h = rng.uniform(0.05, 0.5, size=2)
        return np.array([rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h])

    count = 0
    while count < n:
        b = rand_box()
        bh = b + rng.normal(scale=0.1, size=4) if rng.random() < 0.7 else rand_box()
        bh[2:] = np.abs(bh[2:])
        if _box_kinky(b, bh) or np.any(bh[2:] < KINK_MARGIN):
            continue
        gb, gbh = box_loss_grad(b, bh, cfg)
        yield "box", np.concatenate([gb, gbh]), np.concatenate([
            central_difference(lambda x: box_loss(x, bh, cfg), b),
            central_difference(lambda x: box_loss(b, x, cfg), bh),
        ])
        count += 1

    for _ in range(n):
        # keep p(c) >= 1/60 so the O(h^2 / p^2) truncation error of the stencil stays below tolerance
        p = rng.dirichlet(np.ones(6)) * 0.9 + 0.1 / 6
        c = int(rng.integers(0, 6))
        yield "nll", instance_nll_grad(p, c), central_difference(lambda x: instance_nll(x, c), p)

    for _ in range(n):
        logits = rng.uniform(-6, 6, size=5)
        targets = (rng.random(5) < 0.4).astype(float)
        yield "focal", focal_loss_grad(logits, targets, cfg), central_difference(lambda x: focal_loss(x, targets, cfg), logits)

    count = 0
    while count < n:
        e = rng.normal(scale=0.6, size=(int(rng.integers(2, 6)), 8))
        d = np.linalg.norm(e[:, None] - e[None, :], axis=-1)[np.triu_indices(len(e), 1)]
        if np.any(np.abs(d - cfg.push_margin_t) < KINK_MARGIN) or np.any(d < KINK_MARGIN):
            continue
        yield "push", push_loss_grad(e, cfg), central_difference(lambda x: push_loss(x, cfg), e)
        count += 1

    for _ in range(n):
        a = rng.normal(size=(3, 8))
        b = rng.normal(size=(3, 8))
        grads = pull_loss_grad(list(zip(a, b)))
        analytic = np.concatenate([np.stack([g[0] for g in grads]), np.stack([g[1] for g in grads])])
        fd_a = central_difference(lambda x: pull_loss(list(zip(x, b))), a)
        fd_b = central_difference(lambda x: pull_loss(list(zip(a, x))), b)
        yield "pull", analytic, np.concatenate([fd_a, fd_b])


def check_gradients(seed: int):
    worst = {}
    for name, analytic, fd in gradient_points(seed):
        worst[name] = max(worst.get(name, 0.0), relative_error(analytic, fd))
    ok = all(v <= FD_RTOL for v in worst.values()) and len(worst) == 5
    return ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items())


def check_evaluator(seed: int):
    manifest, scenes = dataio.generate_synthetic_dataset(200, seed)
    exact = dataio.perturb_to_predictions(scenes, 0.0, 1.0, 0.0, seed)
    maps = [evaluate(exact, scenes, s, manifest.hoi_counts).map_full for s in ("default", "known-object")]
    ap_a = average_precision([False, True], 1)
    ap_b = average_precision([True, False, True], 2)
    hand = abs(ap_a - 0.5) <= 1e-12 and abs(ap_b - (0.5 + 0.5 * 2 / 3)) <= 1e-12
    monotone = True
    _, small = dataio.generate_synthetic_dataset(40, seed + 1)
    rng = np.random.default_rng(seed)
    for k in range(50):
        recs = dataio.perturb_to_predictions(small, rng.uniform(0, 0.1), rng.uniform(0, 1), rng.uniform(0, 3), seed + k, 12, 8)
        d = evaluate(recs, small, "default").per_category
        ko = evaluate(recs, small, "known-object").per_category
        monotone &= all(ko[c] >= d[c] - 1e-12 for c in d if c in ko)
    ok = maps == [1.0, 1.0] and hand and monotone
    return ok, f"oracle mAP {maps}, hand APs {ap_a:.4f}/{ap_b:.4f}, known-object >= default: {monotone}"


def random_heads(rng, n_det=12, n_int=6, n_cls=5, n_verb=4, k=8):
    """Synthetic head outputs with a guaranteed human (class 0) detection."""
    from .model import InstancePredictions, InteractionPredictions
    from .tensor_core import sigmoid, softmax_rows

    logits = rng.normal(scale=2.0, size=(n_det, n_cls + 1))
    logits[0, 0] += 10
    ins = InstancePredictions(rng.uniform(0.05, 0.95, size=(n_det, 4)), logits, softmax_rows(logits), rng.normal(size=(n_det, k)))
    vl = rng.normal(size=(n_int, n_verb))
    inter = InteractionPredictions(rng.uniform(0, 1, size=(n_int, 4)), vl, np.asarray(sigmoid(vl)),
                                   rng.normal(size=(n_int, k)), rng.normal(size=(n_int, k)))
    return ins, inter


def exhaustive_pair(ins, inter, r, strategy, human_class=0):
    kept, humans, _, scores = candidate_sets(ins.probs, human_class)
    best = None
    for h in humans:
        for o in kept:
            if h == o:
                continue
            d = 1.0 if strategy == "embedding" else vector_distance_D(
                inter.vectors[r], ins.boxes[h][:2], ins.boxes[o][:2])
            e = 1.0 if strategy == "vector" else embedding_distance_R(
                ins.embeddings[h], ins.embeddings[o], inter.emb_h[r], inter.emb_o[r])
            cost = d * e / (scores[h] * scores[o])
            if best is None or cost < best[0]:
                best = (cost, int(h), int(o))
    return best


def check_postprocess(seed: int):
    rng = np.random.default_rng(seed)
    bad = 0
    for _ in range(100):
        ins, inter = random_heads(rng, n_det=int(rng.integers(3, 15)), n_int=int(rng.integers(1, 8)))
        for strategy in MatchStrategy:
            for t in assemble_triplets(ins, inter, strategy, 0, top_n=10**6):
                _, h, o = exhaustive_pair(ins, inter, t.interaction, strategy.value)
                bad += (t.human, t.object) != (h, o)
    return bad == 0, f"{bad} suboptimal pair choices"


def check_adaptivity(seed: int):
    scenes = dataio.generate_overlap_scenario(seed)
    rng = np.random.default_rng(seed)
    ok = True
    for s in scenes:
        gt = s.interactions()
        vectors = [v for *_, v, _ in gt]
        verbs = [vs for *_, vs in gt]
        centre = np.mean(vectors, axis=0)
        preds = np.clip(centre + rng.normal(scale=0.02, size=(16, 4)), 0, 1)
        logits = rng.normal(size=(16, 8))
        cost = interaction_cost_matrix(vectors, verbs, preds, logits)
        a = hungarian_solve(cost)
        ok &= len(set(a.columns)) == 2 and abs(a.total_cost - brute_force_assignment(cost)) <= 1e-9
        ok &= dataio.overlap_ok(s)
    return ok, f"{len(scenes)} scenes"


def _grid(cfg, seed):
    rng = np.random.default_rng(seed)
    return FeatureGrid(7, 7, cfg.in_channels, rng.normal(size=(7, 7, cfg.in_channels)))


def check_forward(seed: int):
    start = time.perf_counter()
    cfg = ModelConfig(L_d=12, L=8)
    w = init_weights(cfg, 0)
    grid = _grid(cfg, seed)
    a = forward_full(grid, w)
    b = forward_full(grid, init_weights(cfg, 0))
    elapsed = time.perf_counter() - start
    same = all(np.array_equal(x, y) for x, y in [
        (a.instances.boxes, b.instances.boxes), (a.instances.probs, b.instances.probs),
        (a.instances.embeddings, b.instances.embeddings), (a.interactions.vectors, b.interactions.vectors),
        (a.interactions.verb_logits, b.interactions.verb_logits), (a.interactions.emb_h, b.interactions.emb_h),
        (a.interactions.emb_o, b.interactions.emb_o)])
    ranges = (
        a.instances.boxes.shape == (100, 4) and a.interactions.vectors.shape == (16, 4)
        and np.all((a.instances.boxes >= 0) & (a.instances.boxes <= 1))
        and np.all((a.interactions.vectors >= 0) & (a.interactions.vectors <= 1))
        and np.allclose(a.instances.probs.sum(axis=1), 1, atol=1e-6, rtol=0)
        and np.all((a.interactions.verb_scores > 0) & (a.interactions.verb_scores < 1))
    )
    return same and ranges and elapsed < 30, f"{elapsed:.2f}s, deterministic {same}, ranges {ranges}"


def check_ia_identity(seed: int):
    cfg = ModelConfig(d=32, n_enc_layers=2, n_dec_layers=3, heads=4, d_ff=64, N_d=10, N_r=4, L_d=5, L=4, in_channels=16)
    w = init_weights(cfg, seed).with_zero_ia_projection()
    grid = _grid(cfg, seed)
    full = forward_full(grid, w, cfg.with_ia_mode("all"))
    basic = forward_full(grid, w, cfg.with_ia_mode("none"))
    same = all(np.array_equal(getattr(full.interactions, f), getattr(basic.interactions, f))
               for f in ("vectors", "verb_logits", "emb_h", "emb_o"))
    return same, "bitwise equal" if same else "interaction outputs differ"


def check_pipeline(seed: int):
    from .cli import main

    with tempfile.TemporaryDirectory() as tmp:
        tmp = Path(tmp)
        cfg = tmp / "cfg.json"
        cfg.write_text('{"d": 32, "n_enc_layers": 2, "n_dec_layers": 2, "heads": 4, "d_ff": 64, '
                       '"N_d": 20, "N_r": 8, "in_channels": 32}')
        steps = [
            ["gen", "--seed", str(seed), "--images", "5", "--out", str(tmp / "ds.json")],
            ["infer", "--seed", str(seed), "--gt", str(tmp / "ds.json"), "--config", str(cfg), "--out", str(tmp / "raw.json")],
            ["post", "--pred", str(tmp / "raw.json"), "--out", str(tmp / "pred.json")],
            ["eval", "--gt", str(tmp / "ds.json"), "--pred", str(tmp / "pred.json"), "--out", str(tmp / "report.json")],
        ]
        import contextlib
        import io

        with contextlib.redirect_stdout(io.StringIO()):
            codes = [main(s) for s in steps]
        ok = codes == [0, 0, 0, 0]
        if ok:
            dataio.load_annotations(tmp / "ds.json")
            dataio.load_predictions(tmp / "pred.json")
            report = dataio.read_json(tmp / "report.json")
            ok = {"setting", "per_category", "map_full", "map_rare", "map_nonrare"} <= set(report)
    return ok, f"exit codes {codes}"


CHECKS = [
    ("hungarian optimality", check_hungarian),
    ("gradient checks", check_gradients),
    ("evaluator oracle", check_evaluator),
    ("post-processing optimality", check_postprocess),
    ("adaptivity scenario", check_adaptivity),
    ("forward-pass contract", check_forward),
    ("instance-aware attention identity", check_ia_identity),
    ("end-to-end pipeline", check_pipeline),
]


def run_all(seed: int = 0, out=print) -> bool:
    start = time.perf_counter()
    all_ok = True
    for name, fn in CHECKS:
        try:
            ok, detail = fn(seed)
        except Exception as exc:  # a crashing check is a failing check
            ok, detail = False, f"{type(exc).__name__}: {exc}"
        all_ok &= bool(ok)
        out(f"{'PASS' if ok else 'FAIL'}  {name}: {detail}")
    out(f"selfcheck {'passed' if all_ok else 'FAILED'} in {time.perf_counter() - start:.1f}s")
    return all_ok
