import numpy as np
import pytest

from fedsplitsim import data
from fedsplitsim.data import (
    LABEL_NAMES,
    TARGET_LABELS,
    Dataset,
    LabelPolicy,
    LabelValue,
    apply_label_policy,
    binary_truths,
    gen_synthetic,
    load_dataset,
    partition_skewed,
    partition_uniform,
    resolve_plan,
    save_dataset,
    smooth_labels,
    split_train_val,
)
from fedsplitsim.errors import ConfigError


@pytest.fixture(scope="module")
def dataset():
    return gen_synthetic(n_samples=2000, d=32, label_correlation_seed=1, noise_scale=1.0)


class TestGenSynthetic:
    def test_same_seed_identical(self):
        a = gen_synthetic(500, 16, label_correlation_seed=3)
        b = gen_synthetic(500, 16, label_correlation_seed=3)
        assert np.array_equal(a.features, b.features)
        assert np.array_equal(a.labels, b.labels)
        assert np.array_equal(a.ids, b.ids)

    def test_target_prevalence_in_range(self, dataset):
        for name in dataset.target_labels:
            assert 0.1 <= dataset.prevalence(name) <= 0.5

    def test_zero_noise_features_are_function_of_latents(self):
        ds = gen_synthetic(500, 16, label_correlation_seed=5, noise_scale=0.0)
        # same latent pattern (Positive/Uncertain both come from latent 1) -> same features
        latent = (ds.labels != LabelValue.NEGATIVE).astype(int)
        seen = {}
        for row in range(len(ds)):
            key = tuple(latent[row])
            if key in seen:
                assert np.array_equal(ds.features[row], ds.features[seen[key]])
            else:
                seen[key] = row

    def test_uncertain_fraction_of_positives(self, dataset):
        # roughly 10% of raw positives per label were flipped to Uncertain
        n_unc = np.sum(dataset.labels == LabelValue.UNCERTAIN)
        n_pos = np.sum(dataset.labels == LabelValue.POSITIVE)
        ratio = n_unc / (n_unc + n_pos)
        assert 0.07 <= ratio <= 0.13

    def test_child_labels_correlate_with_parent(self, dataset):
        for child, parent in data.CHILD_OF.items():
            c = dataset.label_names.index(child)
            p = dataset.label_names.index(parent)
            child_pos = dataset.labels[:, c] != LabelValue.NEGATIVE
            parent_pos = dataset.labels[:, p] != LabelValue.NEGATIVE
            rate_given_parent = child_pos[parent_pos].mean()
            rate_without = child_pos[~parent_pos].mean()
            assert rate_given_parent > rate_without + 0.2

    @pytest.mark.parametrize("n,d", [(99, 32), (500, 7)])
    def test_minimums_enforced(self, n, d):
        with pytest.raises(ConfigError):
            gen_synthetic(n, d, label_correlation_seed=1)


class TestLabelPolicy:
    def test_all_negative(self):
        rng = np.random.default_rng(0)
        out = apply_label_policy([LabelValue.NEGATIVE] * 14, LabelPolicy(), rng)
        assert np.all(out == 0.0)

    def test_all_positive(self):
        rng = np.random.default_rng(0)
        out = apply_label_policy([LabelValue.POSITIVE] * 14, LabelPolicy(), rng)
        assert np.all(out == 1.0)

    def test_uncertain_within_smoothing_band(self):
        for seed in range(20):
            rng = np.random.default_rng(seed)
            out = apply_label_policy([LabelValue.UNCERTAIN] * 14, LabelPolicy(), rng)
            assert np.all((out >= 0.55) & (out <= 0.85))

    def test_smoothing_mean_near_center(self):
        rng = np.random.default_rng(99)
        codes = np.full((10_000, 1), LabelValue.UNCERTAIN, dtype=np.int8)
        out = smooth_labels(codes, LabelPolicy(), rng)
        assert 0.69 <= out.mean() <= 0.71

    def test_invalid_band_rejected(self):
        with pytest.raises(ConfigError):
            LabelPolicy(smoothing_low=0.9, smoothing_high=0.8)


class TestSplitTrainVal:
    def test_sizes(self, dataset):
        train, val = split_train_val(dataset, 0.8, seed=1)
        assert len(train) == 1600
        assert len(val) == 400

    def test_same_seed_identical(self, dataset):
        a_train, a_val = split_train_val(dataset, 0.8, seed=2)
        b_train, b_val = split_train_val(dataset, 0.8, seed=2)
        assert np.array_equal(a_train.ids, b_train.ids)
        assert np.array_equal(a_val.ids, b_val.ids)

    def test_disjoint_and_covering(self, dataset):
        train, val = split_train_val(dataset, 0.8, seed=3)
        union = np.concatenate([train.ids, val.ids])
        assert set(union.tolist()) == set(dataset.ids.tolist())
        assert len(set(train.ids.tolist()) & set(val.ids.tolist())) == 0

    def test_validation_labels_binarized(self, dataset):
        _, val = split_train_val(dataset, 0.8, seed=4)
        assert not np.any(val.labels == LabelValue.UNCERTAIN)
        truths = binary_truths(val)
        assert set(np.unique(truths).tolist()) <= {0.0, 1.0}

    def test_bad_fraction_rejected(self, dataset):
        with pytest.raises(ConfigError):
            split_train_val(dataset, 1.0, seed=1)


class TestPartitionUniform:
    def test_single_client_degenerate(self, dataset):
        train, _ = split_train_val(dataset, 0.8, seed=1)
        plan = partition_uniform(train, k=1, seed=0)
        assert plan.sizes() == [len(train)]
        assert set(plan.assignments[0].tolist()) == set(train.ids.tolist())

    def test_equal_sizes_when_divisible(self, dataset):
        train, _ = split_train_val(dataset, 0.8, seed=1)  # 1600 samples
        plan = partition_uniform(train, k=5, seed=0)
        assert plan.sizes() == [320] * 5

    def test_prevalence_within_two_points(self, dataset):
        train, _ = split_train_val(dataset, 0.8, seed=1)
        plan = partition_uniform(train, k=5, seed=0)
        global_prev = np.array([train.prevalence(n) for n in train.target_labels])
        assert np.max(np.abs(plan.achieved_prevalence - global_prev)) <= 0.02

    def test_disjoint_and_covering(self, dataset):
        train, _ = split_train_val(dataset, 0.8, seed=1)
        plan = partition_uniform(train, k=5, seed=0)
        all_ids = np.concatenate(plan.assignments)
        assert len(all_ids) == len(train)
        assert set(all_ids.tolist()) == set(train.ids.tolist())

    def test_deterministic(self, dataset):
        train, _ = split_train_val(dataset, 0.8, seed=1)
        a = partition_uniform(train, k=5, seed=7)
        b = partition_uniform(train, k=5, seed=7)
        for ia, ib in zip(a.assignments, b.assignments):
            assert np.array_equal(ia, ib)

    def test_too_few_samples_rejected(self, dataset):
        tiny = dataset.subset(np.arange(30))
        with pytest.raises(ConfigError):
            partition_uniform(tiny, k=5, seed=0)


class TestPartitionSkewed:
    def test_majority_prevalence_where_feasible(self, dataset):
        train, _ = split_train_val(dataset, 0.8, seed=1)
        plan = partition_skewed(train, k=5, majority_target=0.45, seed=0)
        n, k = len(train), 5
        for c, name in enumerate(train.target_labels):
            globally_feasible = (
                np.sum(train.labels[:, train.target_columns[c]] == LabelValue.POSITIVE)
                >= 0.45 * (n // k)
            )
            if globally_feasible:
                assert plan.majority_met[c], f"{name} met={plan.majority_met} prev={plan.achieved_prevalence[c, c]}"

    def test_majority_label_dominates_other_clients(self, dataset):
        train, _ = split_train_val(dataset, 0.8, seed=1)
        plan = partition_skewed(train, k=5, seed=0)
        for c in range(5):
            across = plan.achieved_prevalence[:, c]
            assert plan.achieved_prevalence[c, c] == max(across)

    def test_infeasible_label_reports_shortfall(self):
        # One target label made very rare: its 45% majority is unreachable.
        ds = gen_synthetic(1000, 16, label_correlation_seed=2)
        rare_col = ds.target_columns[0]
        labels = ds.labels.copy()
        rows = np.flatnonzero(labels[:, rare_col] != LabelValue.NEGATIVE)
        keep = rows[:30]  # 3% prevalence, < 45% of a 200-sample client
        drop = np.setdiff1d(rows, keep)
        labels[drop, rare_col] = LabelValue.NEGATIVE
        rare_ds = Dataset(ds.features, labels, ds.ids, ds.label_names, ds.target_labels, ds.generation_seed)
        plan = partition_skewed(rare_ds, k=5, seed=0)
        c = 0  # rare label is target index 0
        assert not plan.majority_met[c]
        assert plan.achieved_prevalence[c, c] < 0.45
        # plan is still a valid partition
        all_ids = np.concatenate(plan.assignments)
        assert set(all_ids.tolist()) == set(rare_ds.ids.tolist())

    def test_sizes_within_ten_percent(self, dataset):
        train, _ = split_train_val(dataset, 0.8, seed=1)
        plan = partition_skewed(train, k=5, seed=0)
        expected = len(train) / 5
        assert all(abs(s - expected) <= 0.1 * expected for s in plan.sizes())

    def test_clients_named_by_majority_label(self, dataset):
        train, _ = split_train_val(dataset, 0.8, seed=1)
        plan = partition_skewed(train, k=5, seed=0)
        assert plan.client_names == ["atelectasis", "cardiomegaly", "consolidation", "edema", "pleural_effusion"]

    def test_wrong_k_rejected(self, dataset):
        with pytest.raises(ConfigError):
            partition_skewed(dataset, k=4, seed=0)

    def test_deterministic(self, dataset):
        train, _ = split_train_val(dataset, 0.8, seed=1)
        a = partition_skewed(train, k=5, seed=3)
        b = partition_skewed(train, k=5, seed=3)
        for ia, ib in zip(a.assignments, b.assignments):
            assert np.array_equal(ia, ib)


class TestResolvePlan:
    def test_rows_resolve_to_assigned_ids(self, dataset):
        train, _ = split_train_val(dataset, 0.8, seed=1)
        plan = partition_uniform(train, k=5, seed=0)
        clients = resolve_plan(train, plan)
        for client, ids in zip(clients, plan.assignments):
            assert np.array_equal(train.ids[client.rows], ids)
            assert client.size == len(ids)


class TestDatasetIo:
    def test_round_trip_bit_exact(self, tmp_path, dataset):
        small = dataset.subset(np.arange(50))
        path = tmp_path / "ds.txt"
        save_dataset(small, path)
        loaded = load_dataset(path)
        assert np.array_equal(loaded.features, small.features)
        assert np.array_equal(loaded.labels, small.labels)
        assert np.array_equal(loaded.ids, small.ids)
        assert loaded.label_names == small.label_names
        assert loaded.target_labels == small.target_labels
        assert loaded.generation_seed == small.generation_seed

    def test_save_twice_byte_identical(self, tmp_path, dataset):
        small = dataset.subset(np.arange(20))
        p1, p2 = tmp_path / "a.txt", tmp_path / "b.txt"
        save_dataset(small, p1)
        save_dataset(small, p2)
        assert p1.read_bytes() == p2.read_bytes()

    def test_label_names_with_spaces_survive(self, tmp_path, dataset):
        small = dataset.subset(np.arange(10))
        path = tmp_path / "ds.txt"
        save_dataset(small, path)
        loaded = load_dataset(path)
        assert "Pleural Effusion" in loaded.label_names
        assert "No Finding" in loaded.label_names
