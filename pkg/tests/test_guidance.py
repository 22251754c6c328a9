import json

import numpy as np
import pytest

from i2x import guidance, refnet
from i2x.datasets import LabeledDataset
from i2x.errors import BadPairError, EmptyCurationError, UnknownScheduleError
from i2x.refnet import ModelSpec


def dataset_with_ids(ids, labels, classes=2, seed=0):
    rng = np.random.Generator(np.random.PCG64(seed))
    n = len(ids)
    return LabeledDataset(
        images=rng.random((n, 8, 8, 1)),
        labels=np.asarray(labels),
        sample_ids=np.asarray(ids),
        class_count=classes,
    )


class TestCurate:
    def test_absent_prototype_keeps_everything(self):
        d = dataset_with_ids(range(10), [0, 1] * 5)
        presence = {i: frozenset({1, 2}) for i in range(10)}
        plan = guidance.curate(d, presence, k=9)
        assert plan.excluded_ids == []
        assert plan.retained_count == 10

    def test_prototype_everywhere_no_pair_empties(self):
        d = dataset_with_ids(range(6), [0, 1] * 3)
        presence = {i: frozenset({3}) for i in range(6)}
        with pytest.raises(EmptyCurationError):
            guidance.curate(d, presence, k=3)

    def test_fixture_exclusions(self):
        d = dataset_with_ids(range(10), [0, 1] * 5)
        presence = {i: frozenset({4} if i in (2, 5) else {1}) for i in range(10)}
        plan = guidance.curate(d, presence, k=4, pair=(0, 1))
        assert plan.excluded_ids == [2, 5]
        assert plan.retained_count == 8

    def test_pair_restriction_spares_other_classes(self):
        d = dataset_with_ids(range(6), [0, 1, 2, 0, 1, 2], classes=3)
        presence = {i: frozenset({7}) for i in range(6)}
        plan = guidance.curate(d, presence, k=7, pair=(0, 1))
        assert plan.excluded_ids == [0, 1, 3, 4]
        assert sorted(plan.retained_ids) == [2, 5]

    def test_partition_exact(self):
        rng = np.random.Generator(np.random.PCG64(1))
        d = dataset_with_ids(range(30), rng.integers(0, 2, size=30))
        presence = {i: frozenset({1}) if rng.random() < 0.4 else frozenset({2})
                    for i in range(30)}
        plan = guidance.curate(d, presence, k=1)
        assert sorted(plan.excluded_ids + plan.retained_ids) == list(range(30))
        for sid in plan.excluded_ids:
            assert 1 in presence[sid]
        for sid in plan.retained_ids:
            assert 1 not in presence[sid]

    def test_plan_json_round_trip(self):
        d = dataset_with_ids(range(4), [0, 1, 0, 1])
        presence = {0: frozenset({1}), 1: frozenset(), 2: frozenset({1}), 3: frozenset()}
        plan = guidance.curate(d, presence, k=1, pair=(0, 1), dataset_id="x")
        clone = guidance.CurationPlan.from_json(plan.to_json())
        assert clone == plan

    def test_apply_plan(self):
        d = dataset_with_ids(range(5), [0, 1, 0, 1, 0])
        presence = {i: frozenset({1} if i % 2 == 0 else set()) for i in range(5)}
        plan = guidance.curate(d, presence, k=1)
        curated = guidance.apply_plan(d, plan)
        assert curated.sample_ids.tolist() == [1, 3]


class TestConfusionPairStats:
    def test_diagonal(self):
        cm = np.diag([5, 6, 7])
        assert guidance.confusion_pair_stats(cm, 0, 2) == (0, 0, 0)

    def test_lookup_2_7(self):
        cm = np.zeros((10, 10), dtype=int)
        cm[7, 2] = 11
        cm[2, 7] = 3
        assert guidance.confusion_pair_stats(cm, 2, 7) == (3, 11, 14)

    def test_random_vs_lookup_oracle(self):
        rng = np.random.Generator(np.random.PCG64(2))
        cm = rng.integers(0, 50, size=(6, 6))
        for a in range(6):
            for b in range(6):
                if a == b:
                    continue
                ab, ba, both = guidance.confusion_pair_stats(cm, a, b)
                assert ab == cm[a, b] and ba == cm[b, a] and both == ab + ba

    def test_bad_pair(self):
        cm = np.zeros((3, 3), dtype=int)
        with pytest.raises(BadPairError):
            guidance.confusion_pair_stats(cm, 1, 1)
        with pytest.raises(BadPairError):
            guidance.confusion_pair_stats(cm, 0, 5)


def tiny_experiment(repeats=2, seed0=100):
    spec = ModelSpec(input_hw=(8, 8), in_channels=1, conv_channels=(2,), class_count=2)
    base = refnet.init_model(spec, seed=0)
    rng = np.random.Generator(np.random.PCG64(3))
    full = dataset_with_ids(range(20), rng.integers(0, 2, size=20), seed=4)
    curated = full.subset(np.arange(12))
    test_set = dataset_with_ids(range(100, 116), rng.integers(0, 2, size=16), seed=5)
    schedules = [("full", [full]), ("curated", [curated]),
                 ("curated,full", [curated, full])]
    stats = guidance.run_experiment(base, schedules, repeats=repeats, seed0=seed0,
                                    test_set=test_set, pair=(0, 1), lr=1e-3,
                                    epochs_per_stage=1, batch_size=8)
    return stats


class TestRunExperiment:
    def test_single_repeat_zero_std(self):
        stats = tiny_experiment(repeats=1)
        for entry in stats.schedules.values():
            assert entry.accuracy[1] == 0.0
            assert entry.both[1] == 0.0

    def test_protocol_schedule_names(self):
        stats = tiny_experiment()
        assert list(stats.schedules) == ["full", "curated", "curated,full"]

    def test_pair_identity_per_repeat(self):
        stats = tiny_experiment(repeats=3)
        for entry in stats.schedules.values():
            for ab, ba, both in zip(entry.pair_ab, entry.pair_ba, entry.pair_both):
                assert both == ab + ba

    def test_deterministic(self):
        a = tiny_experiment(repeats=2)
        b = tiny_experiment(repeats=2)
        assert a.to_json() == b.to_json()

    def test_seeds_recorded(self):
        stats = tiny_experiment(repeats=3, seed0=40)
        for entry in stats.schedules.values():
            assert entry.seeds == [40, 41, 42]


class TestCompareRuns:
    def test_identical_schedules_no_change(self):
        stats = tiny_experiment(repeats=2)
        report = guidance.compare_runs(stats, "full", "full", pair=(0, 1))
        assert report.delta_mean_both == 0.0
        assert report.delta_accuracy == 0.0
        assert report.verdict == "no change"

    def test_hand_computed_deltas(self):
        stats = guidance.ExperimentStats(pair=(0, 1), repeats=2)
        stats.schedules["base"] = guidance.ScheduleStats(
            name="base", seeds=[0, 1], accuracies=[90.0, 92.0],
            pair_ab=[4, 6], pair_ba=[1, 1], pair_both=[5, 7])
        stats.schedules["tuned"] = guidance.ScheduleStats(
            name="tuned", seeds=[0, 1], accuracies=[93.0, 95.0],
            pair_ab=[2, 2], pair_ba=[1, 1], pair_both=[3, 3])
        report = guidance.compare_runs(stats, "base", "tuned", pair=(0, 1))
        assert report.delta_mean_both == 3.0 - 6.0
        assert report.delta_accuracy == 94.0 - 91.0
        assert report.verdict == "improved"

    def test_unknown_schedule(self):
        stats = tiny_experiment(repeats=1)
        with pytest.raises(UnknownScheduleError):
            guidance.compare_runs(stats, "full", "nope", pair=(0, 1))


class TestRenders:
    def test_markdown_layout(self):
        stats = tiny_experiment(repeats=2)
        text = guidance.render_stats_markdown(stats)
        assert "| Dataset | Acc. (%) | 0->1 | 1->0 | 0<->1 |" in text
        assert text.count("| full |") == 1
        assert "population std" in text

    def test_csv_deterministic_and_parsable(self):
        stats = tiny_experiment(repeats=2)
        text = guidance.render_stats_csv(stats)
        assert text == guidance.render_stats_csv(stats)
        lines = text.strip().split("\n")
        assert len(lines) == 4
        assert lines[0].startswith("dataset,acc_mean,acc_std")

    def test_json_has_raw_values(self):
        stats = tiny_experiment(repeats=2)
        doc = json.loads(stats.to_json())
        assert doc["std"] == "population"
        assert len(doc["schedules"]["full"]["pair_both"]) == 2
