"""Acceptance criteria, one test each. Every test prints a single PASS/FAIL line."""
import contextlib
import io
import itertools
import json
import time

import numpy as np
import pytest

from asnet import dataio
from asnet.assignment import hungarian_solve, interaction_cost_matrix
from asnet.cli import main
from asnet.evaluation import average_precision, evaluate
from asnet.losses import (
    box_loss, box_loss_grad, focal_loss, focal_loss_grad, instance_nll, instance_nll_grad, pull_loss,
    pull_loss_grad, push_loss, push_loss_grad,
)
from asnet.model import FeatureGrid, ModelConfig, forward_full, init_weights
from asnet.postprocess import MatchStrategy, assemble_triplets
from oracles import brute_force_ap, finite_difference, rel_err

H_FD = 1e-4
MARGIN = 1e-3


@pytest.fixture
def report(capsys):
    def emit(name, ok, detail):
        with capsys.disabled():
            print(f"\n{'PASS' if ok else 'FAIL'}  {name}: {detail}")
        assert ok, detail
    return emit


def exhaustive_min(cost):
    n, m = cost.shape
    perms = np.array(list(itertools.permutations(range(m), n)), dtype=np.int64).reshape(-1, n)
    return float(cost[np.arange(n), perms].sum(axis=1).min())


def test_hungarian_optimality(report):
    rng = np.random.default_rng(2024)
    worst, solve_time = 0.0, 0.0
    for _ in range(1000):
        n = int(rng.integers(1, 8))
        m = int(rng.integers(n, 8))
        cost = rng.uniform(-10, 10, size=(n, m))
        t0 = time.perf_counter()
        a = hungarian_solve(cost)
        solve_time += time.perf_counter() - t0
        worst = max(worst, abs(a.total_cost - exhaustive_min(cost)))
    report("hungarian optimality", worst <= 1e-9 and solve_time < 10,
           f"1000 matrices, max |delta| {worst:.1e}, solver time {solve_time:.2f}s")


def _edges(b):
    return np.array([b[0] - b[2] / 2, b[0] + b[2] / 2]), np.array([b[1] - b[3] / 2, b[1] + b[3] / 2])


def _box_near_kink(b, bh):
    if np.min(np.abs(b - bh)) < MARGIN:
        return True
    for e, f in zip(_edges(b), _edges(bh)):
        allv = np.concatenate([e, f])
        gaps = np.abs(allv[:, None] - allv[None, :])[np.triu_indices(4, 1)]
        if gaps.min() < MARGIN:
            return True
    return False


def test_gradient_checks(report):
    rng = np.random.default_rng(7)
    worst = {}

    def record(name, analytic, numeric):
        worst[name] = max(worst.get(name, 0.0), rel_err(analytic, numeric))

    n = 0
    while n < 100:
        w, h = rng.uniform(0.05, 0.5, 2)
        b = np.array([rng.uniform(w / 2, 1 - w / 2), rng.uniform(h / 2, 1 - h / 2), w, h])
        bh = b + rng.normal(scale=0.1, size=4)
        if np.any(bh[2:] < MARGIN) or _box_near_kink(b, bh):
            continue
        gb, gbh = box_loss_grad(b, bh)
        record("box", np.concatenate([gb, gbh]), np.concatenate([
            finite_difference(lambda x: box_loss(x, bh), b, H_FD),
            finite_difference(lambda x: box_loss(b, x), bh, H_FD)]))
        n += 1
    for _ in range(100):
        # away from p(c) -> 0 where the stencil's own truncation error exceeds the tolerance
        p = rng.dirichlet(np.ones(6)) * 0.9 + 0.1 / 6
        c = int(rng.integers(0, 6))
        record("nll", instance_nll_grad(p, c), finite_difference(lambda x: instance_nll(x, c), p, H_FD))
    for _ in range(100):
        x = rng.uniform(-6, 6, 5)
        t = (rng.random(5) < 0.4).astype(float)
        record("focal", focal_loss_grad(x, t), finite_difference(lambda z: focal_loss(z, t), x, H_FD))
    n = 0
    while n < 100:
        e = rng.normal(scale=0.6, size=(int(rng.integers(2, 6)), 8))
        d = np.linalg.norm(e[:, None] - e[None, :], axis=-1)[np.triu_indices(len(e), 1)]
        if np.min(np.abs(d - 1.0)) < MARGIN:
            continue
        record("push", push_loss_grad(e), finite_difference(push_loss, e, H_FD))
        n += 1
    for _ in range(100):
        a, b = rng.normal(size=(3, 8)), rng.normal(size=(3, 8))
        grads = pull_loss_grad(list(zip(a, b)))
        record("pull", np.concatenate([[g[0] for g in grads], [g[1] for g in grads]]), np.concatenate([
            finite_difference(lambda x: pull_loss(list(zip(x, b))), a, H_FD),
            finite_difference(lambda x: pull_loss(list(zip(a, x))), b, H_FD)]))
    ok = len(worst) == 5 and max(worst.values()) <= 1e-4
    report("gradient checks", ok, ", ".join(f"{k} {v:.1e}" for k, v in worst.items()))


def test_evaluator_oracle(report):
    manifest, scenes = dataio.generate_synthetic_dataset(200, 11)
    exact = dataio.perturb_to_predictions(scenes, 0.0, 1.0, 0.0, 0)
    maps = [evaluate(exact, scenes, s, manifest.hoi_counts).map_full for s in ("default", "known-object")]
    hand = [
        abs(average_precision([False, True], 1) - 0.5),
        abs(average_precision([False, True], 1) - brute_force_ap([False, True], 1)),
        abs(average_precision([True, False, True], 2) - 0.8333333333333334),
        abs(average_precision([True, False, True], 2) - brute_force_ap([True, False, True], 2)),
    ]
    rng = np.random.default_rng(3)
    violations = 0
    for k in range(50):
        recs = dataio.perturb_to_predictions(scenes[:60], rng.uniform(0, 0.1), rng.uniform(0, 1), rng.uniform(0, 3),
                                             k, len(manifest.classes), len(manifest.verbs))
        d = evaluate(recs, scenes[:60], "default").per_category
        ko = evaluate(recs, scenes[:60], "known-object").per_category
        violations += sum(ko[c] < d[c] for c in d if c in ko)
    ok = maps == [1.0, 1.0] and max(hand) <= 1e-12 and violations == 0
    report("evaluator oracle", ok, f"mAP {maps}, hand AP max err {max(hand):.1e}, known-object < default in {violations} categories")


def _exhaustive_pair(ins, inter, r, strategy):
    labels = ins.probs.argmax(axis=1)
    none = ins.probs.shape[1] - 1
    score = ins.probs.max(axis=1)
    best = None
    for h, o in itertools.product(range(len(labels)), repeat=2):
        if h == o or labels[h] != 0 or labels[o] == none:
            continue
        v = inter.vectors[r]
        d = 1.0
        if strategy != "embedding":
            hb, ob = ins.boxes[h], ins.boxes[o]
            d = (abs(hb[0] - v[0]) + 1) * (abs(hb[1] - v[1]) + 1) * (abs(ob[0] - v[2]) + 1) * (abs(ob[1] - v[3]) + 1)
        e = 1.0
        if strategy != "vector":
            e = (np.linalg.norm(ins.embeddings[h] - inter.emb_h[r]) + 1) * (np.linalg.norm(ins.embeddings[o] - inter.emb_o[r]) + 1)
        cost = d * e / (score[h] * score[o])
        # strict < keeps the lowest human index, then the lowest object index, on ties
        if best is None or cost < best[0]:
            best = (cost, h, o)
    return best


def test_postprocess_optimality(report):
    cfg = ModelConfig(d=32, n_enc_layers=1, n_dec_layers=2, heads=4, d_ff=64, N_d=20, N_r=8, L_d=12, L=8, in_channels=32)
    weights = init_weights(cfg, 0)
    # tilt the class head so that some slots predict the human class
    cls_b = np.array(weights["ins_head.cls.b"])
    cls_b[0] += 3.0
    weights = weights.replace_tensors(ins_head__cls__b=cls_b)
    _, scenes = dataio.generate_synthetic_dataset(30, 5)
    checked = bad = 0
    for s in scenes:
        out = forward_full(dataio.render_feature_grid(s, 7, 7, cfg.in_channels, 0), weights)
        for strategy in MatchStrategy:
            for t in assemble_triplets(out.instances, out.interactions, strategy, 0, top_n=10**6):
                _, h, o = _exhaustive_pair(out.instances, out.interactions, t.interaction, strategy.value)
                checked += 1
                bad += (t.human, t.object) != (h, o)
    report("post-processing optimality", checked > 0 and bad == 0, f"{checked} triplets checked, {bad} suboptimal")


def test_adaptivity_scenario(report):
    scenes = dataio.generate_overlap_scenario(0, 20)
    rng = np.random.default_rng(1)
    failures = 0
    for s in scenes:
        gt = s.interactions()
        vectors = [v for _, _, v, _ in gt]
        verbs = [vs for *_, vs in gt]
        preds = np.clip(np.mean(vectors, axis=0) + rng.normal(scale=0.02, size=(16, 4)), 0, 1)
        cost = interaction_cost_matrix(vectors, verbs, preds, rng.normal(size=(16, 8)))
        a = hungarian_solve(cost)
        failures += not (len(gt) == 2 and len(set(a.columns)) == 2
                         and abs(a.total_cost - exhaustive_min(cost)) <= 1e-9 and dataio.overlap_ok(s))
    report("adaptivity scenario", failures == 0, f"{len(scenes)} scenes, {failures} failures")


def test_forward_contract(report):
    cfg = ModelConfig()
    assert (cfg.d, cfg.n_enc_layers, cfg.n_dec_layers, cfg.N_d, cfg.N_r, cfg.K) == (256, 6, 6, 100, 16, 8)
    grid = FeatureGrid(7, 7, cfg.in_channels, np.random.default_rng(0).normal(size=(7, 7, cfg.in_channels)))
    t0 = time.perf_counter()
    a = forward_full(grid, init_weights(cfg, 0))
    elapsed = time.perf_counter() - t0
    b = forward_full(grid, init_weights(cfg, 0))
    ins, inter = a.instances, a.interactions
    ranges = (
        ins.boxes.shape == (100, 4) and inter.vectors.shape == (16, 4)
        and ins.probs.shape == (100, cfg.L_d + 1) and inter.verb_scores.shape == (16, cfg.L)
        and ins.embeddings.shape == (100, 8) and inter.emb_h.shape == inter.emb_o.shape == (16, 8)
        and bool(np.all((ins.boxes >= 0) & (ins.boxes <= 1)))
        and bool(np.all((inter.vectors >= 0) & (inter.vectors <= 1)))
        and bool(np.all(ins.probs >= 0)) and bool(np.allclose(ins.probs.sum(axis=1), 1, rtol=0, atol=1e-9))
        and bool(np.all((inter.verb_scores >= 0) & (inter.verb_scores <= 1)))
    )
    same = all(np.array_equal(getattr(a.instances, f), getattr(b.instances, f)) for f in ("boxes", "logits", "probs", "embeddings")) \
        and all(np.array_equal(getattr(a.interactions, f), getattr(b.interactions, f))
                for f in ("vectors", "verb_logits", "verb_scores", "emb_h", "emb_o"))
    report("forward-pass contract", ranges and same and elapsed < 30,
           f"ranges {ranges}, bitwise deterministic {same}, {elapsed:.2f}s")


def test_instance_aware_identity(report):
    cfg = ModelConfig(d=64, n_enc_layers=2, n_dec_layers=3, heads=4, d_ff=128, N_d=20, N_r=6, L_d=10, L=6, in_channels=48)
    weights = init_weights(cfg, 3).with_zero_ia_projection()
    grid = FeatureGrid(5, 4, cfg.in_channels, np.random.default_rng(3).normal(size=(4, 5, cfg.in_channels)))
    with_ia = forward_full(grid, weights, cfg.with_ia_mode("all"))
    basic = forward_full(grid, weights, cfg.with_ia_mode("none"))
    same = all(np.array_equal(getattr(with_ia.interactions, f), getattr(basic.interactions, f))
               for f in ("vectors", "verb_logits", "verb_scores", "emb_h", "emb_o"))
    live = forward_full(grid, init_weights(cfg, 3), cfg.with_ia_mode("all"))
    differs = not np.array_equal(live.interactions.vectors, basic.interactions.vectors)
    report("instance-aware attention identity", same and differs,
           f"zeroed projection bitwise equal {same}, live projection differs {differs}")


def test_end_to_end_pipeline(report, tmp_path):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"d": 32, "n_enc_layers": 2, "n_dec_layers": 2, "heads": 4, "d_ff": 64,
                               "N_d": 20, "N_r": 8, "in_channels": 32}))
    ds, raw, pred, rep = (tmp_path / n for n in ("ds.json", "raw.json", "pred.json", "report.json"))
    steps = [
        ["gen", "--seed", "1", "--images", "6", "--out", str(ds)],
        ["infer", "--seed", "1", "--gt", str(ds), "--config", str(cfg), "--out", str(raw)],
        ["post", "--pred", str(raw), "--out", str(pred)],
        ["eval", "--gt", str(ds), "--pred", str(pred), "--out", str(rep)],
    ]
    with contextlib.redirect_stdout(io.StringIO()):
        codes = [main(s) for s in steps]
    dataio.load_annotations(ds)
    for r in dataio.load_predictions(pred):
        r.validate()
    doc = json.loads(rep.read_text())
    schema = {"setting", "per_category", "map_full", "map_rare", "map_nonrare"} <= set(doc)
    buf = io.StringIO()
    t0 = time.perf_counter()
    with contextlib.redirect_stdout(buf):
        code = main(["selfcheck"])
    elapsed = time.perf_counter() - t0
    ok = codes == [0, 0, 0, 0] and schema and code == 0 and elapsed < 120
    report("end-to-end pipeline", ok, f"exit codes {codes}, schema {schema}, selfcheck exit {code} in {elapsed:.1f}s")
