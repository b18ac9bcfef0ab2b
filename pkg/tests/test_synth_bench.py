import json

import numpy as np
import pytest

from alquery.core_model import load_manifest, read_embedding_matrix, read_prediction_stack
from alquery.errors import InvalidSpec
from alquery.scoring import ScoringConfig, score_image
from alquery.synth_bench import (
    SynthPoolSpec,
    ToyTrainer,
    average_precision,
    fit_logistic,
    generate_pool,
    read_pool_meta,
    toy_trainer,
    write_pool_dir,
)


def _pairwise(x):
    x = np.asarray(x, dtype=np.float64)
    return np.sqrt(((x[:, None] - x[None]) ** 2).sum(-1))


class TestSpec:
    @pytest.mark.parametrize("kw", [
        dict(pool_size=0), dict(pool_size=10, prevalence=(0.5, 0.0, 0.1)), dict(pool_size=10, prevalence=(0.5,)),
        dict(pool_size=10, redundancy=0), dict(pool_size=10, noise=-1.0), dict(pool_size=10, height=0),
        dict(pool_size=10, prevalence=(0.5, 0.3, 1.5)),
    ])
    def test_invalid(self, kw):
        with pytest.raises(InvalidSpec):
            SynthPoolSpec(**kw)

    def test_json_round_trip(self):
        spec = SynthPoolSpec(pool_size=50, classes=2, prevalence=(0.2, 0.1), redundancy=3, seed=4)
        assert SynthPoolSpec.from_json(json.loads(json.dumps(spec.to_json()))) == spec


class TestGeneratePool:
    def test_deterministic(self):
        spec = SynthPoolSpec(pool_size=300, redundancy=3, seed=12)
        a, b = generate_pool(spec), generate_pool(spec)
        assert a.ids == b.ids
        np.testing.assert_array_equal(a.embeddings, b.embeddings)
        np.testing.assert_array_equal(a.labels, b.labels)
        np.testing.assert_array_equal(a.test_latents, b.test_latents)

    def test_distinct_scenes(self):
        pool = generate_pool(SynthPoolSpec(pool_size=10, redundancy=1))
        assert len(set(pool.scene.tolist())) == 10

    @pytest.mark.parametrize("seed", range(50))
    def test_two_separated_clusters(self, seed):
        pool = generate_pool(SynthPoolSpec(pool_size=10, redundancy=5, seed=seed))
        assert pool.scene.tolist() == [0] * 5 + [1] * 5
        d = _pairwise(pool.embeddings)
        same = pool.scene[:, None] == pool.scene[None]
        off = ~np.eye(10, dtype=bool)
        assert d[~same].min() >= 5.0 * d[same & off].max()

    def test_rare_class_prevalence(self):
        # binomial(10000, 0.05): [400, 600] holds with probability far above 0.99
        for seed in range(10):
            count = int(generate_pool(SynthPoolSpec(pool_size=10_000, seed=seed)).labels[:, 2].sum())
            assert 400 <= count <= 600

    def test_test_split_prevalence(self):
        pool = generate_pool(SynthPoolSpec(pool_size=10, test_size=40_000, seed=3))
        np.testing.assert_allclose(pool.test_labels.mean(axis=0), [0.5, 0.3, 0.05], atol=0.01)

    def test_embeddings_float32_and_close_to_latents(self):
        pool = generate_pool(SynthPoolSpec(pool_size=200, noise=0.0))
        assert pool.embeddings.dtype == np.float32
        np.testing.assert_allclose(pool.embeddings[:, :8], pool.latents, atol=1e-6)


class TestLogistic:
    def test_recovers_separable_direction(self, rng):
        x = rng.normal(size=(2000, 3))
        y = (x @ np.array([1.0, -2.0, 0.5]) > 0.3).astype(float)
        w = fit_logistic(x, y, l2=1e-3)
        assert average_precision(x @ w[:3], y) > 0.999

    def test_average_precision_hand_values(self):
        assert average_precision(np.array([0.9, 0.8, 0.7]), np.array([1, 0, 1])) == pytest.approx((1 + 2 / 3) / 2)
        assert average_precision(np.array([0.1, 0.2]), np.array([1, 1])) == 1.0
        assert np.isnan(average_precision(np.array([0.1]), np.array([0])))


class TestToyTrainer:
    def test_separable_classes_high_ap(self):
        pool = generate_pool(SynthPoolSpec(pool_size=5000, prevalence=(0.5, 0.3, 0.2), seed=2))
        trainer = ToyTrainer(pool, bootstrap=False)
        metrics = trainer.evaluate(trainer.train(pool.ids))
        assert min(metrics["ap"]) >= 0.99

    def test_no_bootstrap_means_no_disagreement(self):
        pool = generate_pool(SynthPoolSpec(pool_size=500, seed=1))
        trainer = ToyTrainer(pool, bootstrap=False)
        model = trainer.train(pool.ids[:200])
        config = ScoringConfig("mi", "max")
        scores = [score_image(s, config).score for s in trainer.predict(model, pool.ids[200:])]
        assert max(scores) < 1e-6

    def test_empty_labels_predict_prior(self):
        pool = generate_pool(SynthPoolSpec(pool_size=100, seed=1))
        trainer = ToyTrainer(pool)
        model = trainer.train([])
        stacks = list(trainer.predict(model, pool.ids[:5]))
        for s in stacks:
            np.testing.assert_allclose(s.probs[:, :, 0, 0], np.tile([0.5, 0.3, 0.05], (6, 1)), atol=1e-6)

    def test_single_class_labels_fall_back(self):
        pool = generate_pool(SynthPoolSpec(pool_size=400, seed=6))
        negatives = [i for i, row in zip(pool.ids, pool.labels) if not row[2]][:30]
        model = ToyTrainer(pool).train(negatives)
        assert {c for _, c in model.prior_classes} == {2}

    def test_predictions_are_valid_stacks(self):
        pool = generate_pool(SynthPoolSpec(pool_size=60, height=8, width=6, classes=2, prevalence=(0.3, 0.1)))
        trainer = toy_trainer(pool.spec, pool)
        model = trainer.train(pool.ids[:40])
        stacks = list(trainer.predict(model, pool.ids))
        assert [s.image_id for s in stacks] == pool.ids
        assert all(s.probs.shape == (6, 2, 8, 6) for s in stacks)

    def test_spatial_max_differs_from_avg(self):
        pool = generate_pool(SynthPoolSpec(pool_size=40, height=16, width=16))
        trainer = ToyTrainer(pool)
        (stack,) = trainer.predict(trainer.train(pool.ids[:30]), pool.ids[35:36])
        hi = score_image(stack, ScoringConfig("entropy", "max")).score
        lo = score_image(stack, ScoringConfig("entropy", "avg")).score
        assert hi > lo

    def test_training_duplicates_are_rows(self):
        pool = generate_pool(SynthPoolSpec(pool_size=50))
        model = ToyTrainer(pool).train(pool.ids[:10] + pool.ids[:5])
        assert model.trained_on == 15

    def test_mi_top_n_finds_more_rare_positives(self):
        fractions = []
        for seed in range(10):
            pool = generate_pool(SynthPoolSpec(pool_size=4000, redundancy=5, seed=seed))
            rng = np.random.default_rng(seed)
            initial = [pool.ids[k] for k in rng.choice(4000, 100, replace=False)]
            trainer = ToyTrainer(pool)
            model = trainer.train(initial)
            rest = sorted(set(pool.ids) - set(initial))
            config = ScoringConfig("mi", "max")
            scores = {s.image_id: score_image(s, config).score for s in trainer.predict(model, rest)}
            top = sorted(rest, key=lambda i: (-scores[i], i))[:200]
            rand = [rest[k] for k in rng.choice(len(rest), 200, replace=False)]
            fractions.append((pool.labels[pool.rows(top), 2].mean(), pool.labels[pool.rows(rand), 2].mean()))
        top_frac, rand_frac = np.mean(fractions, axis=0)
        assert top_frac > rand_frac


class TestPoolDir:
    def test_layout(self, tmp_path):
        pool = generate_pool(SynthPoolSpec(pool_size=40, redundancy=4, height=2, width=2, seed=3))
        meta = write_pool_dir(tmp_path, pool, initial_labeled=10)
        records = load_manifest(tmp_path / "manifest.jsonl")
        assert [r.id for r in records] == pool.ids
        assert sum(r.labeled for r in records) == 10
        assert all(r.class_tags is not None for r in records if r.labeled)
        assert records[0].sequence_id == records[3].sequence_id != records[4].sequence_id
        ids, matrix = read_embedding_matrix(tmp_path / "embeddings.alem")
        assert ids == pool.ids
        np.testing.assert_array_equal(matrix, pool.embeddings)
        stack = read_prediction_stack(tmp_path / records[0].predictions_ref, records[0].id)
        assert stack.probs.shape == (6, 3, 2, 2)
        assert read_pool_meta(tmp_path) == meta
        assert SynthPoolSpec.from_json(meta["spec"]) == pool.spec

    def test_byte_identical_rewrite(self, tmp_path):
        pool = generate_pool(SynthPoolSpec(pool_size=30, seed=8))
        write_pool_dir(tmp_path / "a", pool)
        write_pool_dir(tmp_path / "b", generate_pool(SynthPoolSpec(pool_size=30, seed=8)))
        files = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file())
        for rel in files:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes()
