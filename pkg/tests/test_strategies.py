import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from fsel.data import (
    BudgetError,
    DatasetItem,
    Embedding,
    SelectionBudget,
    validate_selection,
)
from fsel.encoder import ReferenceEncoder, write_cache
from fsel.perturb import NoiseConfig
from fsel.strategies import (
    HIGHER_IS_BETTER,
    LOWER_IS_BETTER,
    ClassCentroid,
    ClassPrototypes,
    ProbabilityDistribution,
    StrategyScore,
    class_centroids,
    cosine_distance,
    cosine_similarity,
    prototypes_from_validation,
    run_selection,
    score_entropy,
    score_margin,
    score_montecarlo,
    score_pool,
    score_repre,
    select_random,
    select_top_k,
    zero_shot_probs,
)


def dist(*probs: float) -> ProbabilityDistribution:
    return ProbabilityDistribution(np.array(probs))


def probability_vectors(max_classes: int = 8):
    return (
        st.lists(st.floats(1e-6, 1.0), min_size=2, max_size=max_classes)
        .map(lambda ws: np.array(ws) / np.sum(ws))
        .map(ProbabilityDistribution)
    )


class TestProbabilityDistribution:
    def test_rejects_negative(self):
        with pytest.raises(ValueError):
            ProbabilityDistribution(np.array([1.2, -0.2]))

    def test_rejects_bad_sum(self):
        with pytest.raises(ValueError, match="sum"):
            ProbabilityDistribution(np.array([0.5, 0.4]))


class TestCosine:
    def test_known_value(self):
        assert cosine_similarity(np.array([1.0, 0.0]), np.array([0.8, 0.6])) == pytest.approx(0.8)

    def test_zero_vector_rejected(self):
        with pytest.raises(ValueError, match="zero-norm"):
            cosine_similarity(np.zeros(2), np.ones(2))

    def test_scale_invariance(self):
        rng = np.random.default_rng(0)
        for _ in range(50):
            a, b = rng.standard_normal(6), rng.standard_normal(6)
            assert abs(
                cosine_distance(a, b) - cosine_distance(3.7 * a, 0.002 * b)
            ) < 1e-9

    def test_dim_mismatch(self):
        with pytest.raises(ValueError, match="dim mismatch"):
            cosine_similarity(np.ones(2), np.ones(3))


class TestZeroShotProbs:
    def test_aligned_prototype_dominates(self):
        protos = ClassPrototypes(np.eye(3), source="text-embeddings-file")
        probs = zero_shot_probs(Embedding(np.array([0.0, 0.0, 1.0])), protos, temperature=100.0)
        assert int(np.argmax(probs.probs)) == 2
        assert probs.probs[2] > 0.99
        # softmax([0, 0, 100]) computed independently
        expected = math.exp(100.0) / (math.exp(100.0) + 2.0)
        assert probs.probs[2] == pytest.approx(expected, rel=1e-12)

    def test_tiny_temperature_approaches_uniform(self):
        rng = np.random.default_rng(1)
        protos = ClassPrototypes.from_rows(rng.standard_normal((4, 8)), source="text-embeddings-file")
        emb = rng.standard_normal(8)
        probs = zero_shot_probs(emb, protos, temperature=1e-6)
        np.testing.assert_allclose(probs.probs, 0.25, atol=1e-3)

    def test_probs_sum_to_one(self):
        rng = np.random.default_rng(2)
        protos = ClassPrototypes.from_rows(rng.standard_normal((5, 8)), source="text-embeddings-file")
        for _ in range(20):
            probs = zero_shot_probs(rng.standard_normal(8), protos)
            assert abs(probs.probs.sum() - 1.0) < 1e-6

    def test_requires_positive_temperature(self):
        protos = ClassPrototypes(np.eye(2), source="text-embeddings-file")
        with pytest.raises(ValueError, match="temperature"):
            zero_shot_probs(np.ones(2), protos, temperature=0.0)

    def test_dim_mismatch(self):
        protos = ClassPrototypes(np.eye(3), source="text-embeddings-file")
        with pytest.raises(ValueError, match="dim mismatch"):
            zero_shot_probs(np.ones(2), protos)


class TestEntropy:
    def test_uniform_three_classes(self):
        score = score_entropy(dist(1 / 3, 1 / 3, 1 / 3))
        assert score.score == pytest.approx(math.log(3), abs=1e-12)
        assert score.direction == HIGHER_IS_BETTER

    def test_one_hot_is_exactly_zero(self):
        assert score_entropy(dist(0.0, 1.0, 0.0)).score == 0.0

    def test_half_quarter_quarter(self):
        # independent evaluation: -(0.5 ln 0.5 + 0.25 ln 0.25 + 0.25 ln 0.25)
        expected = -math.fsum(p * math.log(p) for p in (0.5, 0.25, 0.25))
        score = score_entropy(dist(0.5, 0.25, 0.25))
        assert score.score == pytest.approx(expected, abs=1e-12)
        assert score.score == pytest.approx(1.5 * math.log(2), abs=1e-12)

    @given(probability_vectors())
    @settings(max_examples=200, deadline=None)
    def test_bounds(self, probs):
        score = score_entropy(probs).score
        assert -1e-12 <= score <= math.log(probs.num_classes) + 1e-12

    @given(probability_vectors(), st.randoms(use_true_random=False))
    @settings(max_examples=100, deadline=None)
    def test_permutation_invariance(self, probs, rand):
        order = list(range(probs.num_classes))
        rand.shuffle(order)
        shuffled = ProbabilityDistribution(probs.probs[order])
        assert score_entropy(shuffled).score == pytest.approx(
            score_entropy(probs).score, abs=1e-12
        )


class TestMargin:
    def test_one_hot_two_classes(self):
        score = score_margin(dist(1.0, 0.0))
        assert score.score == 1.0
        assert score.direction == LOWER_IS_BETTER

    def test_uniform_is_zero(self):
        assert score_margin(dist(0.25, 0.25, 0.25, 0.25)).score == 0.0

    def test_direct_subtraction(self):
        assert score_margin(dist(0.6, 0.3, 0.1)).score == pytest.approx(0.3, abs=1e-12)

    def test_requires_two_classes(self):
        with pytest.raises(ValueError, match="at least 2"):
            score_margin(ProbabilityDistribution(np.array([1.0])))

    @given(probability_vectors())
    @settings(max_examples=200, deadline=None)
    def test_bounds(self, probs):
        assert 0.0 <= score_margin(probs).score <= 1.0

    @given(probability_vectors(), st.randoms(use_true_random=False))
    @settings(max_examples=100, deadline=None)
    def test_permutation_invariance(self, probs, rand):
        order = list(range(probs.num_classes))
        rand.shuffle(order)
        shuffled = ProbabilityDistribution(probs.probs[order])
        assert score_margin(shuffled).score == score_margin(probs).score


class TestClassCentroids:
    def test_single_item_centroid_is_that_vector_normalized(self):
        vec = np.array([3.0, 4.0])
        [centroid] = class_centroids({0: [vec]})
        np.testing.assert_allclose(centroid.centroid.values, [0.6, 0.8])

    def test_antipodal_vectors_are_degenerate(self):
        with pytest.raises(ValueError, match="degenerate centroid"):
            class_centroids({0: [np.array([1.0, 0.0]), np.array([-1.0, 0.0])]})

    def test_empty_class_named(self):
        with pytest.raises(ValueError, match="class 1"):
            class_centroids({0: [np.ones(2)]}, num_classes=2)

    def test_known_mean(self):
        vecs = [np.array([1.0, 0.0]), np.array([0.0, 1.0]), np.array([1.0, 1.0])]
        [centroid] = class_centroids({0: vecs})
        mean = np.array(
            [math.fsum(v[0] for v in vecs) / 3, math.fsum(v[1] for v in vecs) / 3]
        )
        expected = mean / math.sqrt(math.fsum(mean * mean))
        np.testing.assert_allclose(centroid.centroid.values, expected, atol=1e-12)


class TestRepre:
    def _centroid(self, values) -> ClassCentroid:
        arr = np.asarray(values, dtype=np.float64)
        return ClassCentroid(0, Embedding(arr / np.linalg.norm(arr), normalized=True))

    def test_item_equal_to_centroid(self):
        centroid = self._centroid([1.0, 2.0, 2.0])
        score = score_repre(centroid.centroid, centroid, item_label=0)
        assert abs(score.score) < 1e-12
        assert score.direction == LOWER_IS_BETTER

    def test_orthogonal_item(self):
        centroid = self._centroid([1.0, 0.0])
        assert score_repre(np.array([0.0, 5.0]), centroid, 0).score == pytest.approx(1.0)

    def test_known_cosine(self):
        centroid = self._centroid([1.0, 0.0])
        score = score_repre(np.array([0.8, 0.6]), centroid, 0)
        assert score.score == pytest.approx(0.2, abs=1e-12)

    def test_label_mismatch(self):
        centroid = self._centroid([1.0, 0.0])
        with pytest.raises(ValueError, match="does not match centroid class"):
            score_repre(np.array([1.0, 0.0]), centroid, item_label=1)

    def test_scale_invariance(self):
        rng = np.random.default_rng(3)
        centroid = self._centroid(rng.standard_normal(8))
        vec = rng.standard_normal(8)
        a = score_repre(vec, centroid, 0).score
        b = score_repre(17.5 * vec, centroid, 0).score
        assert abs(a - b) < 1e-9


class TestSelectTopK:
    def test_single_best_higher(self):
        scores = {
            0: [
                StrategyScore("a", 0.9, HIGHER_IS_BETTER),
                StrategyScore("b", 0.5, HIGHER_IS_BETTER),
            ]
        }
        result = select_top_k(scores, SelectionBudget(1, 1), "montecarlo")
        assert result.chosen_ids(0) == ["a"]

    def test_tie_breaks_to_smaller_id(self):
        scores = {
            0: [
                StrategyScore("c", 0.5, LOWER_IS_BETTER),
                StrategyScore("b", 0.5, LOWER_IS_BETTER),
                StrategyScore("a", 0.9, LOWER_IS_BETTER),
            ]
        }
        result = select_top_k(scores, SelectionBudget(1, 1), "repre")
        assert result.chosen_ids(0) == ["b"]

    def test_full_budget_returns_all_sorted(self):
        scores = {
            0: [
                StrategyScore("a", 0.1, HIGHER_IS_BETTER),
                StrategyScore("b", 0.7, HIGHER_IS_BETTER),
                StrategyScore("c", 0.4, HIGHER_IS_BETTER),
            ]
        }
        result = select_top_k(scores, SelectionBudget(3, 1), "entropy")
        assert result.chosen_ids(0) == ["b", "c", "a"]

    def test_deficient_class(self):
        scores = {0: [StrategyScore("a", 0.1, HIGHER_IS_BETTER)]}
        with pytest.raises(BudgetError) as excinfo:
            select_top_k(scores, SelectionBudget(2, 1), "entropy")
        assert excinfo.value.class_id == 0

    def test_mixed_directions_rejected(self):
        scores = {
            0: [
                StrategyScore("a", 0.1, HIGHER_IS_BETTER),
                StrategyScore("b", 0.2, LOWER_IS_BETTER),
            ]
        }
        with pytest.raises(ValueError, match="mix"):
            select_top_k(scores, SelectionBudget(1, 1), "x")


class TestSelectRandom:
    def test_same_seed_is_deterministic(self):
        ids = {0: [f"i{i}" for i in range(30)]}
        a = select_random(ids, SelectionBudget(3, 1), seed=5)
        b = select_random(ids, SelectionBudget(3, 1), seed=5)
        assert a.classes == b.classes

    def test_seeds_vary_the_sample(self):
        ids = {0: [f"i{i:02d}" for i in range(50)]}
        picks = {
            tuple(select_random(ids, SelectionBudget(2, 1), seed=s).chosen_ids(0))
            for s in range(10)
        }
        assert len(picks) >= 2

    def test_full_budget_is_whole_class_for_any_seed(self):
        ids = {0: [f"i{i}" for i in range(6)]}
        results = [
            select_random(ids, SelectionBudget(6, 1), seed=s).chosen_ids(0)
            for s in range(5)
        ]
        assert all(r == sorted(ids[0]) for r in results)

    def test_deficient_class(self):
        with pytest.raises(BudgetError):
            select_random({0: ["a"]}, SelectionBudget(2, 1), seed=0)

    def test_classes_draw_independent_streams(self):
        ids = {0: [f"i{i:02d}" for i in range(20)], 1: [f"i{i:02d}" for i in range(20)]}
        result = select_random(ids, SelectionBudget(3, 2), seed=0)
        assert result.chosen_ids(0) != result.chosen_ids(1)


class TestMontecarlo:
    def test_vanishing_noise_gives_near_zero_score(self, reference_provider):
        item = DatasetItem(
            id="a", label=0, split="pool", features=np.arange(64, dtype=np.float64)
        )
        noise = NoiseConfig(sigma=1e-9, variants=5)
        score = score_montecarlo(item, reference_provider, noise)
        assert score.score < 1e-4
        assert score.direction == HIGHER_IS_BETTER

    def test_bitwise_determinism(self, reference_provider):
        rng = np.random.default_rng(8)
        item = DatasetItem(id="a", label=0, split="pool", features=rng.standard_normal(64))
        noise = NoiseConfig(sigma=0.1, variants=8, base_seed=3)
        a = score_montecarlo(item, reference_provider, noise).score
        b = score_montecarlo(item, reference_provider, noise).score
        assert a == b

    def test_provider_scale_does_not_change_score(self):
        class ScaledEncoder(ReferenceEncoder):
            normalizes = False

            def encode_image(self, image):
                inner = super().encode_image(image)
                return Embedding(5.0 * inner.values)

        rng = np.random.default_rng(9)
        item = DatasetItem(id="a", label=0, split="pool", features=rng.standard_normal(64))
        noise = NoiseConfig(sigma=0.1, variants=6, base_seed=1)
        plain = score_montecarlo(item, ReferenceEncoder(0, 64), noise).score
        scaled = score_montecarlo(item, ScaledEncoder(0, 64), noise).score
        assert abs(plain - scaled) < 1e-9


class TestScorePool:
    def test_prototypes_required_for_entropy(self, std_bench_manifest, reference_provider):
        with pytest.raises(ValueError, match="prototypes required"):
            score_pool("entropy", std_bench_manifest, reference_provider)

    def test_random_is_not_scorable(self, std_bench_manifest, reference_provider):
        with pytest.raises(ValueError, match="not a scoring strategy"):
            score_pool("random", std_bench_manifest, reference_provider)

    def test_montecarlo_jobs_do_not_change_scores(self, std_bench_manifest, reference_provider):
        noise = NoiseConfig(variants=3, base_seed=0)
        serial = score_pool(
            "montecarlo", std_bench_manifest, reference_provider, noise=noise
        )
        parallel = score_pool(
            "montecarlo", std_bench_manifest, reference_provider, noise=noise, jobs=4
        )
        for class_id in serial:
            assert [(s.item_id, s.score) for s in serial[class_id]] == [
                (s.item_id, s.score) for s in parallel[class_id]
            ]


class TestRunSelection:
    @pytest.mark.parametrize("strategy", ["entropy", "margin", "montecarlo", "repre"])
    def test_results_satisfy_invariants(self, std_bench_manifest, reference_provider, strategy):
        budget = SelectionBudget(2, std_bench_manifest.num_classes)
        prototypes = prototypes_from_validation(std_bench_manifest, reference_provider)
        result = run_selection(
            strategy,
            std_bench_manifest,
            budget,
            reference_provider,
            prototypes=prototypes,
            noise=NoiseConfig(variants=3, base_seed=0),
        )
        validate_selection(result, std_bench_manifest, budget)

    def test_deterministic_strategies_ignore_selection_seed(
        self, std_bench_manifest, reference_provider
    ):
        budget = SelectionBudget(2, std_bench_manifest.num_classes)
        a = run_selection("repre", std_bench_manifest, budget, reference_provider, seed=0)
        b = run_selection("repre", std_bench_manifest, budget, reference_provider, seed=99)
        assert a.classes == b.classes

    def test_random_selection_varies_with_seed(self, std_bench_manifest, reference_provider):
        budget = SelectionBudget(2, std_bench_manifest.num_classes)
        picks = {
            tuple(
                run_selection(
                    "random", std_bench_manifest, budget, reference_provider, seed=s
                ).all_chosen_ids()
            )
            for s in range(6)
        }
        assert len(picks) > 1

    def test_repre_argmin_matches_brute_force(self, std_bench_manifest, reference_provider):
        budget = SelectionBudget(1, std_bench_manifest.num_classes)
        scores = score_pool("repre", std_bench_manifest, reference_provider)
        result = select_top_k(scores, budget, "repre")
        for class_id, class_scores in scores.items():
            best = min(class_scores, key=lambda s: (s.score, s.item_id))
            assert result.chosen_ids(class_id) == [best.item_id]

    def test_uniform_embedding_scale_does_not_change_selection(self):
        # a provider that emits alpha * embedding for a fixed alpha > 0
        # must produce the same repre selection: the centroid direction
        # and every cosine distance are unchanged
        rng = np.random.default_rng(12)
        validation = {c: [rng.standard_normal(8) for _ in range(4)] for c in range(3)}
        pool = {c: [(f"c{c}_i{i}", rng.standard_normal(8)) for i in range(10)] for c in range(3)}
        alpha = 37.0

        def scores_at_scale(scale):
            centroids = class_centroids(
                {c: [scale * v for v in vecs] for c, vecs in validation.items()}
            )
            by_id = {cent.class_id: cent for cent in centroids}
            return {
                c: [
                    score_repre(scale * vec, by_id[c], c, item_id)
                    for item_id, vec in items
                ]
                for c, items in pool.items()
            }

        plain = scores_at_scale(1.0)
        scaled = scores_at_scale(alpha)
        for c in plain:
            for a, b in zip(plain[c], scaled[c]):
                assert abs(a.score - b.score) < 1e-9
        budget = SelectionBudget(2, 3)
        assert (
            select_top_k(plain, budget, "repre").classes.keys()
            == select_top_k(scaled, budget, "repre").classes.keys()
        )
        for c in range(3):
            assert select_top_k(plain, budget, "repre").chosen_ids(c) == select_top_k(
                scaled, budget, "repre"
            ).chosen_ids(c)


class TestClassPrototypes:
    def test_from_cache_file(self, tmp_path):
        rng = np.random.default_rng(0)
        rows = {str(c): rng.standard_normal(8) for c in range(3)}
        path = tmp_path / "protos.fsec"
        write_cache(path, 8, rows)
        protos = ClassPrototypes.from_cache_file(path)
        assert protos.num_classes == 3
        assert protos.source == "text-embeddings-file"
        np.testing.assert_allclose(np.linalg.norm(protos.vectors, axis=1), 1.0, atol=1e-6)

    def test_from_cache_file_rejects_non_decimal_ids(self, tmp_path):
        path = tmp_path / "protos.fsec"
        write_cache(path, 4, {"cat": np.ones(4)})
        with pytest.raises(ValueError, match="decimal class ids"):
            ClassPrototypes.from_cache_file(path)

    def test_from_cache_file_rejects_gaps(self, tmp_path):
        path = tmp_path / "protos.fsec"
        write_cache(path, 4, {"0": np.ones(4), "2": np.ones(4)})
        with pytest.raises(ValueError, match="cover"):
            ClassPrototypes.from_cache_file(path)

    def test_validation_prototypes_source(self, std_bench_manifest, reference_provider):
        protos = prototypes_from_validation(std_bench_manifest, reference_provider)
        assert protos.source == "validation-centroids"
        assert protos.num_classes == std_bench_manifest.num_classes
