import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from ihcbridge.data_io import load_eval_split, load_segmentation_split
from ihcbridge.evalkit import (
    MetricsReport,
    SurrogateConfig,
    auc_from_scores,
    cumulative_histogram,
    evaluate_methods,
    harmonic_mean,
    load_surrogate,
    pixel_accuracy,
    plot_report,
    predict_posterior,
    save_surrogate,
    score_posteriors,
    train_surrogate_sb,
)
from ihcbridge.phantom import CorpusCounts, PhantomConfig, export_corpus


def brute_force_auc(pos, neg):
    wins = sum((p > n) + 0.5 * (p == n) for p in pos for n in neg)
    return wins / (len(pos) * len(neg))


@pytest.fixture(scope="module")
def corpus(tmp_path_factory):
    root = tmp_path_factory.mktemp("evalcorpus")
    export_corpus(PhantomConfig(), root, CorpusCounts(eval=8, sb=60))
    return root


@pytest.fixture(scope="module")
def surrogate(corpus):
    images, masks = load_segmentation_split(corpus)
    return train_surrogate_sb(images, masks, SurrogateConfig(steps=300))


class TestAuc:
    def test_perfect(self):
        assert auc_from_scores([0.9, 0.8], [0.1, 0.2]) == 1.0

    def test_all_ties(self):
        assert auc_from_scores([0.5], [0.5]) == 0.5

    def test_mixed(self):
        assert auc_from_scores([0.8, 0.3], [0.5, 0.1]) == 0.75

    def test_empty(self):
        with pytest.raises(ValueError):
            auc_from_scores([], [0.1])
        with pytest.raises(ValueError):
            auc_from_scores([0.1], [])

    def test_matches_brute_force_on_200_instances(self):
        rng = np.random.default_rng(2024)
        for _ in range(200):
            n_pos, n_neg = rng.integers(1, 51, size=2)
            levels = rng.integers(2, 12)
            # Coarse grids inject ties within and across the two lists.
            pos = rng.integers(0, levels, n_pos) / levels
            neg = rng.integers(0, levels, n_neg) / levels
            assert auc_from_scores(pos, neg) == brute_force_auc(pos, neg)

    @given(st.lists(st.integers(0, 6), min_size=1, max_size=50), st.lists(st.integers(0, 6), min_size=1, max_size=50))
    def test_brute_force_property(self, pos, neg):
        assert auc_from_scores(pos, neg) == pytest.approx(brute_force_auc(pos, neg), abs=1e-12)

    # Scores on a 1/1000 grid so the transform stays strictly monotone in floating point.
    @given(st.lists(st.integers(0, 1000), min_size=1, max_size=30), st.lists(st.integers(0, 1000), min_size=1, max_size=30))
    def test_invariant_under_monotone_transform(self, pos, neg):
        pos, neg = np.asarray(pos) / 1000, np.asarray(neg) / 1000
        f = lambda s: np.exp(3 * s) - 7.0  # noqa: E731
        assert auc_from_scores(f(pos), f(neg)) == auc_from_scores(pos, neg)


class TestCumulativeHistogram:
    def test_all_ones(self):
        edges, curve = cumulative_histogram([1.0] * 5, 10)
        assert np.all(curve[:-1] == 0.0) and curve[-1] == 1.0
        assert edges[-1] == 1.0

    def test_uniform_grid(self):
        _, curve = cumulative_histogram(np.arange(10) / 10 + 0.05, 10)
        assert np.allclose(np.diff(np.concatenate([[0.0], curve])), 0.1)

    def test_single_score(self):
        edges, curve = cumulative_histogram([0.5], 2)
        assert edges.tolist() == [0.5, 1.0] and curve.tolist() == [1.0, 1.0]

    def test_errors(self):
        with pytest.raises(ValueError):
            cumulative_histogram([], 10)
        with pytest.raises(ValueError):
            cumulative_histogram([0.5], 1)
        with pytest.raises(ValueError):
            cumulative_histogram([1.5], 10)

    @given(st.lists(st.floats(0, 1), min_size=1, max_size=100), st.integers(2, 60))
    def test_monotone_and_ends_at_one(self, scores, n_bins):
        edges, curve = cumulative_histogram(scores, n_bins)
        assert len(edges) == len(curve) == n_bins
        assert np.all(np.diff(curve) >= 0) and curve[-1] == 1.0


class TestHarmonicMean:
    def test_examples(self):
        assert harmonic_mean(0.2, 0.2) == pytest.approx(0.2, abs=1e-15)
        assert harmonic_mean(0.1, 0.3) == pytest.approx(0.15, abs=1e-15)

    @given(st.floats(1e-6, 1), st.floats(1e-6, 1))
    def test_symmetric(self, a, b):
        assert harmonic_mean(a, b) == harmonic_mean(b, a)

    @pytest.mark.parametrize("a,b", [(0.0, 0.5), (-0.1, 0.5), (0.5, 0.0)])
    def test_non_positive(self, a, b):
        with pytest.raises(ValueError):
            harmonic_mean(a, b)


class TestSurrogate:
    def test_all_background_labels(self):
        images = np.random.default_rng(0).uniform(size=(8, 32, 32, 3)).astype(np.float32)
        model = train_surrogate_sb(images, np.zeros((8, 32, 32), bool), SurrogateConfig(steps=200))
        assert predict_posterior(model, images).mean() < 0.05

    def test_training_accuracy(self, corpus, surrogate):
        images, masks = load_segmentation_split(corpus)
        assert pixel_accuracy(surrogate, images, masks) > 0.9

    def test_deterministic(self, corpus):
        images, masks = load_segmentation_split(corpus)
        cfg = SurrogateConfig(steps=20, seed=4)
        a, b = train_surrogate_sb(images, masks, cfg), train_surrogate_sb(images, masks, cfg)
        assert np.array_equal(predict_posterior(a, images[:2]), predict_posterior(b, images[:2]))

    def test_save_load(self, corpus, surrogate, tmp_path):
        images, _ = load_segmentation_split(corpus)
        save_surrogate(surrogate, tmp_path, SurrogateConfig(steps=300))
        assert np.array_equal(predict_posterior(load_surrogate(tmp_path), images[:3]),
                              predict_posterior(surrogate, images[:3]))

    def test_empty(self):
        with pytest.raises(ValueError):
            train_surrogate_sb(np.zeros((0, 8, 8, 3)), np.zeros((0, 8, 8), bool))

    def test_posterior_range(self, corpus, surrogate):
        images, _ = load_segmentation_split(corpus)
        p = predict_posterior(surrogate, images)
        assert p.shape == images.shape[:3] and p.min() >= 0 and p.max() <= 1


class TestEvaluateMethods:
    def test_oracle_is_surrogate_on_ground_truth(self, corpus, surrogate):
        items = load_eval_split(corpus)
        report = evaluate_methods(items, {"oracle": None, "gt": lambda x: np.stack([i.monoplex for i in items])},
                                  surrogate)
        o, g = report.methods["oracle"], report.methods["gt"]
        assert o.oracle and not g.oracle
        assert (o.nucleus_inv_auc, o.background_inv_auc, o.harmonic_mean) == \
               (g.nucleus_inv_auc, g.background_inv_auc, g.harmonic_mean)

    def test_constant_posterior(self, corpus):
        items = load_eval_split(corpus)
        flat = lambda patches: np.full(patches.shape[:3], 0.5)  # noqa: E731
        m = evaluate_methods(items, {"identity": lambda x: x}, flat).methods["identity"]
        assert m.nucleus_inv_auc == 0.5 and m.background_inv_auc == 0.5 and m.harmonic_mean == 0.5

    def test_oracle_beats_identity(self, corpus, surrogate):
        report = evaluate_methods(load_eval_split(corpus), {"identity": lambda x: x, "oracle": None}, surrogate)
        assert report.methods["oracle"].harmonic_mean < report.methods["identity"].harmonic_mean

    def test_pure_and_order_independent(self, corpus, surrogate):
        items = load_eval_split(corpus)
        methods = {"identity": lambda x: x, "oracle": None}
        a = evaluate_methods(items, methods, surrogate)
        b = evaluate_methods(items, methods, surrogate)
        shuffled = [items[i] for i in np.random.default_rng(0).permutation(len(items))]
        c = evaluate_methods(shuffled, methods, surrogate)
        assert a.to_json() == b.to_json() == c.to_json()

    def test_report_invariants_and_round_trip(self, corpus, surrogate, tmp_path):
        report = evaluate_methods(load_eval_split(corpus), {"identity": lambda x: x, "oracle": None}, surrogate)
        for m in report.methods.values():
            assert 0 <= m.nucleus_inv_auc <= 1 and 0 <= m.background_inv_auc <= 1
            for _, curve in (m.nucleus_curve, m.background_curve):
                assert np.all(np.diff(curve) >= 0) and curve[-1] == 1.0
            assert 0 <= m.nucleus_curve_score <= 1 and 0 <= m.background_curve_score <= 1
        report.save(tmp_path / "m.json")
        assert MetricsReport.load(tmp_path / "m.json").to_json() == report.to_json()
        assert plot_report(report, tmp_path / "fig.png").stat().st_size > 0

    def test_misaligned_masks(self, corpus, surrogate):
        items = load_eval_split(corpus)
        items[0].nucleus_mask = items[0].nucleus_mask[:10]
        with pytest.raises(ValueError):
            evaluate_methods(items, {"identity": lambda x: x}, surrogate)

    def test_wrong_output_shape(self, corpus, surrogate):
        with pytest.raises(ValueError):
            evaluate_methods(load_eval_split(corpus), {"bad": lambda x: x[:, :32]}, surrogate)

    def test_empty_split(self, surrogate):
        with pytest.raises(ValueError):
            evaluate_methods([], {"identity": lambda x: x}, surrogate)


def test_score_posteriors_perfect_separation_limit():
    post = np.array([[0.9, 0.1]])
    m = score_posteriors(post, np.array([[True, False]]), np.array([[False, True]]), 10)
    assert m.nucleus_inv_auc == 0.0 and m.harmonic_mean == 0.0
    assert m.nucleus_curve_score == pytest.approx(0.9) and m.background_curve_score == pytest.approx(0.9)


def test_torch_rng_untouched_by_surrogate_init():
    torch.manual_seed(1)
    ref = torch.rand(2)
    torch.manual_seed(1)
    train_surrogate_sb(np.zeros((1, 8, 8, 3), np.float32), np.zeros((1, 8, 8), bool), SurrogateConfig(steps=1))
    assert torch.equal(torch.rand(2), ref)
