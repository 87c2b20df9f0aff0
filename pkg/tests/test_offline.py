import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from aoalb.artifact import ModelArtifact
from aoalb.dataset import Dataset
from aoalb.errors import (
    ArtifactKindMismatch,
    DegenerateDataset,
    DimensionMismatch,
    FoldTooSmall,
    InvalidSpec,
    MissingRegion,
    TooFewSamples,
    UnknownClass,
)
from aoalb.offline import (
    DEFAULT_SPACES,
    KINDS,
    Choice,
    IntRange,
    LogisticRegression,
    RandomForest,
    confusion_matrix,
    cross_val_scores,
    encode_labels,
    evaluate,
    fit_model,
    macro_f1,
    predict_proba,
    random_search,
    retraining_experiment,
    sample_config,
    stacking_train,
    stratified_folds,
    stratified_split,
    train_classifier,
    train_hierarchical,
)
from aoalb.trees import Tree, grow_tree

FAST = {"RF": {"n_estimators": 15}, "GBM": {"n_estimators": 15}}


def blobs(centers, per_class=20, spread=0.3, seed=0, region="LoS", labels=None):
    rng = np.random.default_rng(seed)
    centers = np.asarray(centers, dtype=float)
    labels = labels or [str(i) for i in range(len(centers))]
    x = np.concatenate([c + spread * rng.standard_normal((per_class, centers.shape[1])) for c in centers])
    y = np.repeat(labels, per_class)
    n = len(x)
    return Dataset(x, [region] * n, y, np.arange(n), ["MUSIC"] * n, [True] * n)


def gini(labels):
    if len(labels) == 0:
        return 0.0
    _, counts = np.unique(labels, return_counts=True)
    p = counts / len(labels)
    return 1.0 - float(np.sum(p * p))


def route_rows(tree, x, node=0, rows=None, out=None):
    """Plain recursive traversal: node -> rows of x reaching it."""
    rows = np.arange(len(x)) if rows is None else rows
    out = {} if out is None else out
    out[node] = rows
    if tree.feature[node] >= 0:
        go = x[rows, tree.feature[node]] <= tree.threshold[node]
        route_rows(tree, x, tree.left[node], rows[go], out)
        route_rows(tree, x, tree.right[node], rows[~go], out)
    return out


class TestLearners:
    @pytest.mark.parametrize("kind", KINDS)
    def test_separable_blobs(self, kind):
        data = blobs([[0, 0, 0], [5, 5, 5]])
        art = train_classifier(kind, data, FAST.get(kind), seed=1)
        assert evaluate(art, data)["accuracy"] == 1.0

    def test_knn_memorizes(self):
        rng = np.random.default_rng(3)
        x = rng.standard_normal((60, 4))
        y = rng.integers(0, 3, 60)
        model = fit_model("KNN", x, y, ["a", "b", "c"], {"k": 1})
        assert np.array_equal(model.predict_index(x), y)

    def test_lr_zero_weights_uniform(self):
        model = LogisticRegression(["a", "b", "c", "d"], 5)
        p = model.predict_proba(np.random.default_rng(0).standard_normal((7, 5)))
        np.testing.assert_array_equal(p, np.full((7, 4), 0.25))

    def test_rf_pure_leaf_vote_fraction(self):
        rng = np.random.default_rng(5)
        cuts = rng.uniform(-1, 1, 10)
        trees = [
            Tree(np.array([0, -1, -1]), np.array([c, 0.0, 0.0]), np.array([1, -1, -1]),
                 np.array([2, -1, -1]), np.array([[0.5, 0.5], [1.0, 0.0], [0.0, 1.0]]))
            for c in cuts
        ]
        forest = RandomForest(["0", "1"], 1, trees)
        x = rng.uniform(-1.2, 1.2, (50, 1))
        votes = np.array([sum(1 for c in cuts if v > c) for v in x[:, 0]])
        np.testing.assert_allclose(forest.predict_proba(x)[:, 1], votes / 10, atol=1e-15)

    def test_knn_distance_weights_exact_match(self):
        x = np.array([[0.0], [1.0], [1.1]])
        model = fit_model("KNN", x, np.array([0, 1, 1]), ["a", "b"], {"k": 3, "weights": "distance"})
        np.testing.assert_array_equal(model.predict_proba([[0.0]]), [[1.0, 0.0]])

    @pytest.mark.parametrize("kind", KINDS)
    def test_deterministic_bytes(self, kind):
        data = blobs([[0, 0], [1, 1], [0, 1]], spread=0.6, seed=2)
        a = train_classifier(kind, data, FAST.get(kind), seed=9).to_bytes()
        b = train_classifier(kind, data, FAST.get(kind), seed=9).to_bytes()
        assert a == b

    @pytest.mark.parametrize("kind", KINDS)
    def test_artifact_round_trip(self, kind, tmp_path):
        data = blobs([[0, 0], [1, 1], [0, 1]], spread=0.6, seed=2)
        art = train_classifier(kind, data, FAST.get(kind), seed=4)
        path = tmp_path / "m.bin"
        art.save(path)
        back = ModelArtifact.load(path, kind)
        np.testing.assert_array_equal(back.predict_proba(data.features), art.predict_proba(data.features))
        assert back.to_bytes() == art.to_bytes()
        with pytest.raises(ArtifactKindMismatch):
            ModelArtifact.load(path, "HIER" if kind != "HIER" else "LR")

    def test_rf_best_found_config_trains(self, features_w2000):
        los = features_w2000["MUSIC"].in_region("LoS")
        y = encode_labels(los.track_id, sorted(set(los.track_id)))
        tr, te = stratified_split(y, 0.8, seed=0)
        config = {"n_estimators": 297, "max_depth": 27, "max_features": "log2", "min_samples_split": 3,
                  "min_samples_leaf": 2}
        rf = train_classifier("RF", los.subset(tr), config, seed=0)
        lr = train_classifier("LR", los.subset(tr), seed=0)
        assert evaluate(rf, los.subset(te))["accuracy"] >= evaluate(lr, los.subset(te))["accuracy"]


class TestProbabilities:
    @settings(max_examples=15, deadline=None)
    @given(seed=st.integers(0, 10_000), kind=st.sampled_from(KINDS), classes=st.integers(2, 4))
    def test_simplex(self, seed, kind, classes):
        rng = np.random.default_rng(seed)
        x = rng.standard_normal((12 * classes, 3))
        y = np.arange(len(x)) % classes
        model = fit_model(kind, x, y, [str(c) for c in range(classes)], {**FAST.get(kind, {})}, seed)
        p = model.predict_proba(rng.standard_normal((20, 3)) * 3)
        assert np.all(p >= 0)
        np.testing.assert_allclose(p.sum(axis=1), 1.0, atol=1e-9)

    def test_sample_and_matrix(self):
        data = blobs([[0, 0], [3, 3]])
        art = train_classifier("LR", data)
        one = predict_proba(art, data.samples()[0])
        assert one.shape == (2,)
        np.testing.assert_allclose(one, predict_proba(art, data.features)[0])

    def test_dimension_mismatch(self):
        art = train_classifier("KNN", blobs([[0, 0], [3, 3]]))
        with pytest.raises(DimensionMismatch):
            predict_proba(art, np.zeros(3))


class TestTrees:
    def test_every_split_lowers_gini(self):
        rng = np.random.default_rng(8)
        x = rng.standard_normal((150, 4))
        y = (x[:, 0] + 0.8 * rng.standard_normal(150) > 0).astype(int) + (x[:, 1] > 0.5)
        tree = grow_tree(x, y, n_outputs=3, rng=np.random.default_rng(0))
        reach = route_rows(tree, x)
        internal = np.flatnonzero(tree.feature >= 0)
        assert len(internal) > 3
        for node in internal:
            rows = reach[node]
            left, right = reach[tree.left[node]], reach[tree.right[node]]
            child = (len(left) * gini(y[left]) + len(right) * gini(y[right])) / len(rows)
            assert child < gini(y[rows])

    def test_regression_split_lowers_squared_error(self):
        rng = np.random.default_rng(2)
        x = rng.standard_normal((120, 3))
        target = np.sin(2 * x[:, 1]) + 0.1 * rng.standard_normal(120)
        tree = grow_tree(x, target, regression=True, max_depth=4, rng=np.random.default_rng(0))
        reach = route_rows(tree, x)
        sse = lambda r: float(np.sum((target[r] - target[r].mean()) ** 2)) if len(r) else 0.0
        for node in np.flatnonzero(tree.feature >= 0):
            assert sse(reach[tree.left[node]]) + sse(reach[tree.right[node]]) < sse(reach[node])

    def test_leaves_hold_class_distribution(self):
        rng = np.random.default_rng(1)
        x = rng.standard_normal((40, 2))
        y = rng.integers(0, 2, 40)
        tree = grow_tree(x, y, n_outputs=2, max_depth=2, rng=np.random.default_rng(0))
        reach = route_rows(tree, x)
        for node in np.flatnonzero(tree.feature < 0):
            rows = reach[node]
            np.testing.assert_allclose(tree.value[node], np.bincount(y[rows], minlength=2) / len(rows))


class TestSplits:
    @settings(max_examples=40, deadline=None)
    @given(counts=st.lists(st.integers(5, 40), min_size=2, max_size=6), folds=st.integers(2, 5),
           seed=st.integers(0, 1000))
    def test_folds_balanced(self, counts, folds, seed):
        y = np.repeat(np.arange(len(counts)), counts)
        fold = stratified_folds(y, folds, seed)
        for c in range(len(counts)):
            sizes = np.bincount(fold[y == c], minlength=folds)
            assert sizes.max() - sizes.min() <= 1
        sizes = np.bincount(fold, minlength=folds)
        assert sizes.max() - sizes.min() <= 1

    def test_fold_too_small(self):
        with pytest.raises(FoldTooSmall):
            stratified_folds(np.array([0, 0, 0, 1, 1]), 3, 0)

    def test_split_partitions(self):
        y = np.repeat([0, 1, 2], [10, 7, 3])
        tr, te = stratified_split(y, 0.8, seed=1)
        assert sorted(np.concatenate([tr, te]).tolist()) == list(range(20))
        assert [int(np.sum(y[tr] == c)) for c in range(3)] == [8, 6, 2]


class TestHierarchical:
    def data(self):
        los = blobs([[0, 0, 0], [0, 4, 0]], region="LoS", labels=["6", "9"])
        nlos = blobs([[8, 0, 8], [8, 4, 8]], region="NLoS", labels=["1", "2"], seed=1)
        return los, nlos

    def test_routing_trace(self):
        los, nlos = self.data()
        model = train_hierarchical(los, nlos, "LR", "KNN").model
        x = np.vstack([los.features[:3], nlos.features[:2]])
        trace = []
        out = model.predict(x, trace=trace)
        assert trace[0] == ("stage1", ["LoS"] * 3 + ["NLoS"] * 2)
        assert trace[1] == ("stage2", "LoS", [0, 1, 2]) and trace[2] == ("stage2", "NLoS", [3, 4])
        assert out.tolist() == ["6", "6", "6", "1", "1"]

    def test_forced_route_uses_wrong_class_space(self):
        los, nlos = self.data()
        model = train_hierarchical(los, nlos, "LR", "LR").model
        out = model.predict(los.features, route="NLoS")
        assert set(out) <= {"1", "2"}

    def test_composition(self):
        los, nlos = self.data()
        model = train_hierarchical(los, nlos, "RF", "RF", configs={"stage1": FAST["RF"]}).model
        x = np.random.default_rng(0).uniform(-2, 10, (40, 3))
        regions = model.predict_region(x)
        out = model.predict(x)
        for r, label in zip(regions, out):
            assert label in model.stage2[r].classes

    def test_missing_region(self):
        los, _ = self.data()
        with pytest.raises(MissingRegion):
            train_hierarchical(los, Dataset.empty(3))

    def test_artifact_round_trip(self):
        los, nlos = self.data()
        art = train_hierarchical(los, nlos, "LR", {"LoS": "KNN", "NLoS": "DT"})
        back = ModelArtifact.from_bytes(art.to_bytes(), "HIER")
        x = np.vstack([los.features, nlos.features])
        assert back.model.predict(x).tolist() == art.model.predict(x).tolist()


class TestStacking:
    def data(self, seed=0):
        return blobs([[0, 0], [1.2, 0], [0, 1.2]], per_class=40, spread=0.7, seed=seed)

    def test_single_base_near_identity(self):
        data = self.data()
        y = encode_labels(data.track_id, ["0", "1", "2"])
        tr, te = stratified_split(y, 0.8, seed=0)
        base = evaluate(train_classifier("LR", data.subset(tr)), data.subset(te))["accuracy"]
        stack = evaluate(stacking_train(["LR"], data.subset(tr)), data.subset(te))["accuracy"]
        assert abs(stack - base) <= 0.02 + 1e-12

    def test_duplicate_bases(self):
        art = stacking_train(["KNN", "KNN"], self.data())
        meta = art.model.meta_features(self.data().features)
        np.testing.assert_array_equal(meta[:, :3], meta[:, 3:])
        assert np.all(np.isfinite(art.predict_proba(self.data().features)))

    def test_four_bases_soft_bound(self, features_w2000):
        nlos = features_w2000["MUSIC"].in_region("NLoS")
        y = encode_labels(nlos.track_id, sorted(set(nlos.track_id)))
        tr, te = stratified_split(y, 0.8, seed=0)
        train, test = nlos.subset(tr), nlos.subset(te)
        kinds = ["LR", "KNN", "RF", "GBM"]
        configs = [None, None, None, {"n_estimators": 30}]
        singles = [evaluate(train_classifier(k, train, c), test)["accuracy"] for k, c in zip(kinds, configs)]
        stack = evaluate(stacking_train(kinds, train, configs=configs), test)["accuracy"]
        assert stack >= max(singles) - 0.01 - 1e-12

    def test_round_trip(self):
        art = stacking_train(["LR", "DT"], self.data())
        back = ModelArtifact.from_bytes(art.to_bytes(), "STACK")
        x = self.data(seed=3).features
        np.testing.assert_array_equal(back.predict_proba(x), art.predict_proba(x))


class TestSearch:
    def test_single_trial_returns_its_config(self):
        data = blobs([[0, 0], [1, 1]], spread=0.8)
        res = random_search("KNN", None, data, trials=1, seed=11)
        assert res.best_config == sample_config(DEFAULT_SPACES["KNN"], np.random.default_rng(11))
        assert len(res.trials) == 1

    def test_point_space_matches_direct_cv(self):
        data = blobs([[0, 0], [1, 1], [1, 0]], spread=0.8)
        space = {"k": IntRange(7, 7), "weights": Choice(("distance",))}
        res = random_search("KNN", space, data, trials=3, seed=2)
        y = encode_labels(data.track_id, ["0", "1", "2"])
        direct = np.mean(cross_val_scores("KNN", {"k": 7, "weights": "distance"}, data.features, y,
                                          ["0", "1", "2"], 5, 2))
        assert res.best_score == direct

    @settings(max_examples=30, deadline=None)
    @given(seed=st.integers(0, 2**32 - 1), kind=st.sampled_from(sorted(DEFAULT_SPACES)))
    def test_sampled_configs_in_range(self, seed, kind):
        space = DEFAULT_SPACES[kind]
        config = sample_config(space, np.random.default_rng(seed))
        assert all(space[k].contains(v) for k, v in config.items())
        fit_model(kind, np.eye(4)[[0, 1, 2, 3, 0, 1, 2, 3]], np.array([0, 1] * 4), ["a", "b"],
                  {**config, **({"n_estimators": 2} if "n_estimators" in config else {})})

    def test_knn_search_beats_default(self, features_w2000):
        los = features_w2000["MUSIC"].in_region("LoS")
        classes = sorted(set(los.track_id))
        y = encode_labels(los.track_id, classes)
        res = random_search("KNN", None, los, trials=50, seed=0)
        default = np.mean(cross_val_scores("KNN", {"k": 5, "weights": "uniform"}, los.features, y,
                                           classes, 5, 0))
        assert res.best_score >= default


class TestRetraining:
    def data(self):
        return blobs([[0, 0], [1, 1], [1, 0]], per_class=30, spread=0.6)

    def test_single_batch_strategies_agree(self):
        a = retraining_experiment(self.data(), "LR", "buffer", batches=1, trials=3)
        b = retraining_experiment(self.data(), "LR", "cumulative", batches=1, trials=3)
        assert a.mean == b.mean and a.std == b.std

    def test_cumulative_sizes(self):
        curve = retraining_experiment(self.data(), "KNN", "cumulative", batches=10, trials=2)
        n = 72  # 80% of 90 samples
        assert curve.train_sizes == [b * (n // 10) for b in range(1, 11)]
        assert retraining_experiment(self.data(), "KNN", "buffer", batches=10, trials=2).train_sizes == [7] * 10

    def test_shapes(self):
        curve = retraining_experiment(self.data(), "DT", "buffer", batches=4, trials=3)
        assert curve.accuracies.shape == (3, 4)
        np.testing.assert_allclose(curve.mean, curve.accuracies.mean(axis=0))

    def test_too_few(self):
        with pytest.raises(TooFewSamples):
            retraining_experiment(blobs([[0], [1]], per_class=3), "LR", batches=10)


class TestMetrics:
    def test_confusion_and_f1(self):
        y = np.array([0, 0, 1, 1, 2])
        p = np.array([0, 1, 1, 1, 0])
        cm = confusion_matrix(y, p, 3)
        assert cm.tolist() == [[1, 1, 0], [0, 2, 0], [1, 0, 0]]
        # per-class F1: 2*1/(2+2)=0.5, 2*2/(2+3)=0.8, 0
        assert macro_f1(cm) == pytest.approx((0.5 + 0.8 + 0.0) / 3)

    def test_report_fields(self):
        data = blobs([[0, 0], [4, 4]])
        report = evaluate(train_classifier("LR", data), data, train_seconds=1.5)
        assert set(report) == {"accuracy", "macro_f1", "confusion_matrix", "classes", "train_seconds",
                               "infer_ms_mean"}
        assert report["train_seconds"] == 1.5


class TestErrors:
    def test_single_class(self):
        with pytest.raises(DegenerateDataset):
            train_classifier("LR", blobs([[0, 0]]))

    def test_empty_class_in_space(self):
        with pytest.raises(DegenerateDataset):
            train_classifier("LR", blobs([[0, 0], [1, 1]]), classes=["0", "1", "2"])

    def test_unknown_label(self):
        with pytest.raises(UnknownClass):
            train_classifier("LR", blobs([[0, 0], [1, 1]]), classes=["0", "5"])

    def test_unknown_option(self):
        with pytest.raises(InvalidSpec):
            train_classifier("LR", blobs([[0, 0], [1, 1]]), {"gamma": 1})
        with pytest.raises(InvalidSpec):
            train_classifier("SVM", blobs([[0, 0], [1, 1]]))
