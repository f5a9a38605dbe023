import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from asnet.dataio import Hoi, PredictionRecord, SceneAnnotation, generate_synthetic_dataset, perturb_to_predictions
from asnet.evaluation import EvalReport, GtTriplet, average_precision, evaluate, greedy_hits, triplet_correct
from asnet.postprocess import TripletPrediction
from oracles import brute_force_ap

H = (0.3, 0.5, 0.2, 0.4)
O = (0.7, 0.5, 0.2, 0.2)


def trip(hbox=H, obox=O, oclass=1, verb=0, score=0.9):
    return TripletPrediction(tuple(hbox), 1.0, tuple(obox), oclass, 1.0, verb, score)


def scene(image_id=0, verb=0, oclass=1):
    return SceneAnnotation(image_id, ((H, 0), (O, oclass)), (Hoi(0, 1, verb),))


class TestTripletCorrect:
    gt = GtTriplet(H, O, 1, 0)

    def test_exact(self):
        assert triplet_correct(trip(), self.gt)

    def test_wrong_verb_or_class(self):
        assert not triplet_correct(trip(verb=1), self.gt)
        assert not triplet_correct(trip(oclass=2), self.gt)

    def test_iou_exactly_half_fails(self):
        # same height, width shifted so that intersection/union = 0.5 exactly
        gt = GtTriplet((0.5, 0.5, 0.4, 0.25), O, 1, 0)
        shifted = (0.5 + 0.4 / 3, 0.5, 0.4, 0.25)
        from asnet.geometry import iou, to_xyxy

        assert iou(to_xyxy(shifted), to_xyxy(gt.hbox)) == pytest.approx(0.5, abs=1e-15)
        exact_half = GtTriplet((0.25, 0.5, 0.5, 0.5), O, 1, 0)
        assert iou(to_xyxy((0.25, 0.5, 0.25, 0.5)), to_xyxy(exact_half.hbox)) == 0.5
        assert not triplet_correct(trip(hbox=(0.25, 0.5, 0.25, 0.5)), exact_half)
        assert triplet_correct(trip(hbox=(0.25, 0.5, 0.26, 0.5)), exact_half)


class TestAveragePrecision:
    def test_examples(self):
        assert average_precision([True], 1) == 1.0
        assert average_precision([False, True], 1) == pytest.approx(0.5, abs=1e-12)
        assert average_precision([True, False, True], 2) == pytest.approx(0.8333333333333334, abs=1e-12)

    def test_matches_oracle_on_hand_cases(self):
        assert abs(average_precision([False, True], 1) - brute_force_ap([False, True], 1)) <= 1e-12
        assert abs(average_precision([True, False, True], 2) - brute_force_ap([True, False, True], 2)) <= 1e-12

    @given(st.lists(st.booleans(), max_size=30), st.integers(0, 10))
    def test_matches_oracle(self, hits, extra):
        n_gt = sum(hits) + extra
        assert average_precision(hits, n_gt) == pytest.approx(brute_force_ap(hits, n_gt), abs=1e-12)

    def test_no_gt(self):
        assert average_precision([False, False], 0) == 0.0


def test_greedy_credits_each_gt_once():
    gts = [GtTriplet(H, O, 1, 0)]
    assert greedy_hits([trip(score=0.9), trip(score=0.8)], gts) == [True, False]


class TestEvaluate:
    def setup_method(self):
        self.manifest, self.scenes = generate_synthetic_dataset(30, 4)

    def test_identity(self):
        preds = perturb_to_predictions(self.scenes, 0, 1, 0, 0)
        for setting in ("default", "known-object"):
            r = evaluate(preds, self.scenes, setting, self.manifest.hoi_counts)
            assert r.map_full == 1.0
            assert all(ap == 1.0 for ap in r.per_category.values())

    def test_empty_predictions(self):
        preds = [PredictionRecord(s.image_id, ()) for s in self.scenes]
        assert evaluate(preds, self.scenes).map_full == 0.0

    def test_unknown_image(self):
        with pytest.raises(KeyError):
            evaluate([PredictionRecord(999, ())], self.scenes)

    def test_rare_split(self):
        preds = perturb_to_predictions(self.scenes, 0, 1, 0, 0)
        counts = {c: (3 if i % 2 else 20) for i, c in enumerate(sorted(self.manifest.hoi_counts))}
        r = evaluate(preds, self.scenes, "default", counts)
        assert r.rare_categories == {c for c in r.per_category if counts.get(c, 0) < 10}
        assert r.map_rare == 1.0 and r.map_nonrare == 1.0

    def test_excludes_categories_without_gt_or_predictions(self):
        r = evaluate([PredictionRecord(0, (trip(),))], [scene()])
        assert set(r.per_category) == {(0, 1)}

    def test_false_positive_only_category_scores_zero(self):
        r = evaluate([PredictionRecord(0, (trip(), trip(verb=3, score=0.1)))], [scene()])
        assert r.per_category == {(0, 1): 1.0, (3, 1): 0.0}
        assert r.map_full == 0.5

    def test_known_object_drops_images_without_object(self):
        scenes = [scene(0), scene(1, oclass=2)]
        fp = trip(score=0.95, hbox=(0.1, 0.1, 0.1, 0.1))
        preds = [PredictionRecord(0, (trip(score=0.5),)), PredictionRecord(1, (fp,))]
        d = evaluate(preds, scenes, "default").per_category[(0, 1)]
        k = evaluate(preds, scenes, "known-object").per_category[(0, 1)]
        assert d == pytest.approx(0.5) and k == 1.0

    def test_fp_above_tp_lowers_ap(self):
        preds = perturb_to_predictions(self.scenes, 0, 1, 0, 0)
        base = evaluate(preds, self.scenes).per_category
        sc = self.scenes[0]
        hoi = sc.hois[0]
        cat = (hoi.verb, sc.instances[hoi.o][1])
        fp = TripletPrediction((0.05, 0.05, 0.02, 0.02), 1.0, (0.95, 0.95, 0.02, 0.02), cat[1], 1.0, cat[0], 1.0)
        worse = [PredictionRecord(r.image_id, r.triplets + ((fp,) if r.image_id == sc.image_id else ()))
                 for r in preds]
        assert evaluate(worse, self.scenes).per_category[cat] < base[cat]

    def test_rank_only_dependence(self):
        preds = perturb_to_predictions(self.scenes, 0.05, 0.5, 1.5, 1)
        scaled = [PredictionRecord(r.image_id, tuple(TripletPrediction(t.hbox, t.hscore, t.obox, t.oclass, t.oscore, t.verb, t.score * 0.5)
                                                     for t in r.triplets)) for r in preds]
        assert evaluate(preds, self.scenes).per_category == evaluate(scaled, self.scenes).per_category

    @settings(max_examples=15, deadline=None)
    @given(st.integers(0, 1000), st.floats(0, 0.1), st.floats(0, 1), st.floats(0, 3))
    def test_known_object_dominates(self, seed, noise, quality, fp):
        preds = perturb_to_predictions(self.scenes, noise, quality, fp, seed)
        d = evaluate(preds, self.scenes, "default").per_category
        k = evaluate(preds, self.scenes, "known-object").per_category
        for cat, ap in d.items():
            if cat in k:
                assert k[cat] >= ap - 1e-12

    def test_report_json_and_table(self):
        r = evaluate(perturb_to_predictions(self.scenes, 0, 1, 0, 0), self.scenes, "default", {})
        doc = r.to_json()
        assert set(doc) == {"setting", "per_category", "map_full", "map_rare", "map_nonrare"}
        assert doc["map_nonrare"] is None
        assert "mAP full" in r.table() and "n/a" in r.table()

    def test_parallel_matches_serial(self):
        preds = perturb_to_predictions(self.scenes, 0.05, 0.3, 1.0, 2)
        assert evaluate(preds, self.scenes, workers=4).to_json() == evaluate(preds, self.scenes).to_json()
