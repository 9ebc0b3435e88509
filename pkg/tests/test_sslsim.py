from __future__ import annotations

import json
import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from defectkit.core import BBox, ValidationError
from defectkit.sslsim import (
    EmaConfig,
    SimulationConfig,
    StreamSpec,
    SyntheticScene,
    ToyModel,
    TrainingItem,
    _teacher_labels,
    ema_update,
    gen_synthetic_stream,
    load_scenario,
    predict_proba,
    run_labeled_baseline,
    run_ssl_simulation,
    student_step,
    toy_predict,
)

from helpers import cat

CATS = (cat("apple__normal"), cat("apple__rot"), cat("pear__rot"))


def random_model(rng, dim=4, temperature=1.0) -> ToyModel:
    return ToyModel(CATS, rng.normal(size=(3, dim)), rng.normal(size=dim), rng.uniform(0.5, 2.0, dim), temperature)


def scene(features, truth=None, image_id=1) -> SyntheticScene:
    feats = np.atleast_2d(np.asarray(features, dtype=float))
    boxes = tuple(BBox(20 * j, 0, 10, 10) for j in range(len(feats)))
    return SyntheticScene(image_id, boxes, feats, tuple(truth or [CATS[0]] * len(feats)))


class TestToyModel:
    def test_variance_must_be_positive(self):
        with pytest.raises(ValidationError):
            ToyModel(CATS, np.zeros((3, 2)), np.zeros(2), np.array([1.0, 0.0]))

    def test_one_centroid_per_category(self):
        with pytest.raises(ValidationError):
            ToyModel(CATS, np.zeros((2, 2)), np.zeros(2), np.ones(2))

    def test_arrays_are_frozen(self):
        m = ToyModel.initial(CATS, 2)
        with pytest.raises(ValueError):
            m.centroids[0, 0] = 1.0


class TestEma:
    def test_scalar_example(self):
        t = ToyModel(CATS[:1], np.array([[1.0]]), np.zeros(1), np.ones(1))
        s = ToyModel(CATS[:1], np.array([[0.0]]), np.zeros(1), np.ones(1))
        assert ema_update(t, s, EmaConfig(0.9)).centroids[0, 0] == 0.9

    def test_endpoints_exact(self):
        rng = np.random.default_rng(0)
        t, s = random_model(rng), random_model(rng, temperature=2.5)
        one = ema_update(t, s, EmaConfig(1.0))
        assert np.array_equal(one.centroids, t.centroids) and np.array_equal(one.running_var, t.running_var)
        zero = ema_update(t, s, EmaConfig(0.0))
        assert zero.allclose(s)

    def test_buffers_frozen_without_update(self):
        rng = np.random.default_rng(1)
        t, s = random_model(rng), random_model(rng, temperature=3.0)
        out = ema_update(t, s, EmaConfig(0.5, update_buffers=False))
        assert np.array_equal(out.running_mean, t.running_mean) and np.array_equal(out.running_var, t.running_var)
        assert out.temperature == 3.0
        assert np.allclose(out.centroids, 0.5 * t.centroids + 0.5 * s.centroids, atol=1e-15)

    @given(st.floats(0, 1), st.integers(0, 1000))
    def test_matches_elementwise_arithmetic(self, m, seed):
        rng = np.random.default_rng(seed)
        t, s = random_model(rng), random_model(rng)
        out = ema_update(t, s, EmaConfig(m))
        for got, a, b in [
            (out.centroids, t.centroids, s.centroids),
            (out.running_mean, t.running_mean, s.running_mean),
            (out.running_var, t.running_var, s.running_var),
        ]:
            assert np.max(np.abs(got - (m * a + (1 - m) * b))) <= 1e-12

    @given(st.floats(0, 1), st.integers(0, 1000))
    def test_fixed_point(self, m, seed):
        t = random_model(np.random.default_rng(seed))
        assert ema_update(t, t, EmaConfig(m)).allclose(t, atol=1e-12)

    def test_two_steps_compose(self):
        rng = np.random.default_rng(2)
        t, s = random_model(rng), random_model(rng)
        a, b = 0.9, 0.7
        twice = ema_update(ema_update(t, s, EmaConfig(a)), s, EmaConfig(b))
        # t -> a*b*t + (1 - a*b)*s, which no single step with m=a or m=b reproduces
        assert np.allclose(twice.centroids, a * b * t.centroids + (1 - a * b) * s.centroids, atol=1e-12)
        assert not np.allclose(twice.centroids, ema_update(t, s, EmaConfig(a)).centroids)

    def test_shape_mismatch(self):
        rng = np.random.default_rng(3)
        with pytest.raises(ValidationError):
            ema_update(random_model(rng, dim=4), random_model(rng, dim=5), EmaConfig())

    def test_momentum_range(self):
        with pytest.raises(ValidationError):
            EmaConfig(1.5)


class TestPredict:
    def test_equidistant_is_uniform(self):
        # three centroids on the unit circle, region at the origin
        m = ToyModel(CATS, np.array([[1.0, 0.0], [-1.0, 0.0], [0.0, 1.0]]), np.zeros(2), np.ones(2))
        probs = predict_proba(m, np.array([[0.0, 0.0]]))
        assert (probs == 1 / 3).all()

    def test_two_centroid_closed_form(self):
        m = ToyModel(CATS[:2], np.array([[0.0, 0.0], [3.0, 4.0]]), np.array([1.0, 1.0]), np.array([4.0, 4.0]), 0.5)
        # feature (3, 1) normalises to (1, 0): distances 1 and sqrt(4 + 16)
        d0, d1 = 1.0, math.sqrt(20.0)
        expect = 1.0 / (1.0 + math.exp(-(d1 - d0) / 0.5))
        (lab,) = toy_predict(m, scene([[3.0, 1.0]]))
        assert lab.category == CATS[0]
        assert lab.confidence == pytest.approx(expect, abs=1e-12)

    def test_zero_temperature_limit(self):
        cents = np.array([[0.0, 0.0], [5.0, 0.0], [0.0, 5.0]])
        confs = [
            toy_predict(ToyModel(CATS, cents, np.zeros(2), np.ones(2), t), scene([[0.0, 0.0]]))[0].confidence
            for t in (1.0, 0.1, 0.01)
        ]
        assert confs == sorted(confs) and confs[-1] > 1 - 1e-12

    def test_one_label_per_region(self):
        m = random_model(np.random.default_rng(4), dim=2)
        labs = toy_predict(m, scene(np.random.default_rng(5).normal(size=(6, 2))))
        assert len(labs) == 6 and all(0 <= x.confidence <= 1 for x in labs)


class TestStudentStep:
    def test_lr_zero_refreshes_buffers_only(self):
        m = ToyModel.initial(CATS, 2)
        out = student_step(m, [TrainingItem(scene([[2.0, 4.0], [4.0, 8.0]]), (CATS[0], CATS[1]))], 0.0)
        assert np.array_equal(out.centroids, m.centroids)
        assert np.allclose(out.running_mean, 0.1 * np.array([3.0, 6.0]))
        assert np.allclose(out.running_var, 0.9 + 0.1 * np.array([1.0, 4.0]))

    def test_single_region_lr_one(self):
        m = ToyModel.initial(CATS, 2)
        x = np.array([2.0, -1.0])
        out = student_step(m, [TrainingItem(scene([x]), (CATS[2],))], 1.0)
        # the centroid sits exactly on the region, in the refreshed normalised coordinates
        z = (x - out.running_mean) / np.sqrt(out.running_var)
        assert np.allclose(out.centroids[2], z, atol=1e-15)
        assert predict_proba(out, x[None])[0].argmax() == 2
        assert np.array_equal(out.centroids[:2], m.centroids[:2])

    def test_empty_batch_is_identity(self):
        m = random_model(np.random.default_rng(6))
        assert student_step(m, [], 0.5) is m
        assert student_step(m, [TrainingItem(scene(np.zeros((0, 4))), ())], 0.5) is m

    def test_unsupervised_regions_only_touch_buffers(self):
        m = ToyModel.initial(CATS, 2)
        out = student_step(m, [TrainingItem(scene([[1.0, 1.0]]), (None,))], 1.0)
        assert np.array_equal(out.centroids, m.centroids)
        assert not np.array_equal(out.running_mean, m.running_mean)

    def test_weights(self):
        m = ToyModel.initial(CATS[:1], 1)
        items = [TrainingItem(scene([[1.0]]), (CATS[0],), 1.0), TrainingItem(scene([[4.0]], image_id=2), (CATS[0],), 2.0)]
        out = student_step(m, items, 1.0)
        z = (np.array([1.0, 4.0]) - out.running_mean[0]) / np.sqrt(out.running_var[0])
        assert out.centroids[0, 0] == pytest.approx((z[0] + 2 * z[1]) / 3, abs=1e-12)

    def test_negative_lr(self):
        with pytest.raises(ValidationError):
            student_step(ToyModel.initial(CATS, 2), [], -0.1)


SMALL = StreamSpec(labeled_scenes=100, unlabeled_scenes=100, heldout_scenes=10)


class TestStream:
    def test_zero_shift_is_indistinguishable(self):
        s = gen_synthetic_stream(SMALL, 0.0, seed=4)
        a = np.concatenate([x.features for x in s.labeled])
        b = np.concatenate([x.features for x in s.unlabeled])
        assert len(a) == len(b) == 1000
        z = (a.mean(0) - b.mean(0)) / np.sqrt(a.var(0, ddof=1) / len(a) + b.var(0, ddof=1) / len(b))
        p = np.array([math.erfc(abs(v) / math.sqrt(2)) for v in z])
        # Bonferroni over dimensions keeps the family-wise level at 0.01
        assert p.min() > 0.01 / len(p)

    @pytest.mark.parametrize("shift", [0.5, 2.0])
    def test_shift_offsets_the_mean(self, shift):
        s = gen_synthetic_stream(SMALL, shift, seed=1)
        a = np.concatenate([x.features for x in s.labeled])
        b = np.concatenate([x.features for x in s.unlabeled])
        expect = SMALL.shift_offset(shift)
        se = np.sqrt(a.var(0, ddof=1) / len(a) + b.var(0, ddof=1) / len(b))
        assert (np.abs(b.mean(0) - a.mean(0) - expect) < 4 * se).all()
        assert np.allclose(expect[len(SMALL.categories):], shift)

    def test_deterministic(self):
        a, b = gen_synthetic_stream(SMALL, 1.0, 3), gen_synthetic_stream(SMALL, 1.0, 3)
        for x, y in zip(a.labeled + a.unlabeled + a.heldout, b.labeled + b.unlabeled + b.heldout):
            assert np.array_equal(x.features, y.features) and x.truth == y.truth

    def test_one_food_per_scene_and_unique_ids(self):
        s = gen_synthetic_stream(SMALL, 1.0, 0)
        scenes = s.labeled + s.unlabeled + s.heldout
        assert all(len({c.food for c in x.truth}) == 1 for x in scenes)
        assert len({x.image_id for x in scenes}) == len(scenes)

    def test_balanced(self):
        s = gen_synthetic_stream(StreamSpec(labeled_scenes=600), 0.0, 0)
        counts = {}
        for x in s.labeled:
            for c in x.truth:
                counts[c] = counts.get(c, 0) + 1
        assert len(counts) == 6
        assert max(counts.values()) / min(counts.values()) < 1.15

    def test_negative_counts(self):
        with pytest.raises(ValidationError):
            StreamSpec(labeled_scenes=-1)


QUICK = dict(stream=dict(labeled_scenes=10, unlabeled_scenes=30, heldout_scenes=10), iterations=6, burn_in=5)


class TestSimulation:
    def test_zero_iterations(self):
        rep = run_ssl_simulation(load_scenario(QUICK, iterations=0))
        assert rep.records == [] and not rep.collapsed
        assert rep.summary()["iterations"] == 0

    def test_deterministic(self):
        cfg = load_scenario(QUICK, seed=5)
        assert run_ssl_simulation(cfg).to_jsonl() == run_ssl_simulation(cfg).to_jsonl()

    def test_report_invariants(self):
        rep = run_ssl_simulation(load_scenario(QUICK, seed=2))
        for r in rep.records:
            assert r.pseudo_yield >= 0 and 0.0 <= r.precision <= 1.0 and 0.0 <= r.accuracy <= 1.0
        lines = rep.to_jsonl().splitlines()
        assert len(lines) == 6 and set(json.loads(lines[0])) == {"iteration", "yield", "precision", "accuracy", "collapsed"}

    def test_collapse_flag_needs_k_zero_iterations(self):
        # tau above any reachable confidence: yield is 0 from the start
        rep = run_ssl_simulation(load_scenario(QUICK, confidence_threshold=1.0, collapse_window=3))
        assert [r.collapsed for r in rep.records] == [False, False, True, True, True, True]
        assert rep.first_collapse == 2
        assert all(r.precision == 0.0 for r in rep.records)

    def test_calibrated_run(self):
        rep = run_ssl_simulation(load_scenario(QUICK, calibrate=True, confidence_threshold=0.2))
        assert len(rep.records) == 6 and rep.records[0].pseudo_yield > 0

    def test_baseline_length(self):
        assert len(run_labeled_baseline(load_scenario(QUICK))) == 6

    @settings(max_examples=20, deadline=None)
    @given(st.floats(0, 1), st.floats(0, 1), st.integers(0, 50))
    def test_yield_non_increasing_in_tau(self, t1, t2, seed):
        lo, hi = sorted((t1, t2))
        cfg = load_scenario(QUICK, seed=seed)
        stream = gen_synthetic_stream(cfg.stream, cfg.shift, cfg.seed)
        rng = np.random.default_rng(seed)
        dim = cfg.stream.dim
        teacher = ToyModel(cfg.stream.categories, rng.normal(size=(6, dim)), rng.normal(size=dim), np.ones(dim), 0.5)

        def count(tau):
            labels = _teacher_labels(load_scenario(QUICK, confidence_threshold=tau), teacher, stream.unlabeled,
                                     cfg.stream.registry())
            return sum(t is not None for tg in labels for t in tg)

        assert count(hi) <= count(lo)


class TestScenario:
    def test_defaults_round_trip(self):
        cfg = SimulationConfig()
        assert SimulationConfig.from_dict(json.loads(json.dumps(cfg.to_dict()))) == cfg

    def test_nested_override(self):
        cfg = load_scenario({"stream": {"nuisance_dims": 4}}, ema={"update_buffers": False})
        assert cfg.stream.nuisance_dims == 4 and cfg.stream.labeled_scenes == 30
        assert cfg.ema == EmaConfig(0.9, False)

    @pytest.mark.parametrize("doc", [{"bogus": 1}, {"stream": {"bogus": 1}}, {"iterations": -1}, {"ema": {"momentum": 2}}])
    def test_rejects_bad_scenarios(self, doc):
        with pytest.raises(ValidationError):
            load_scenario(doc)
