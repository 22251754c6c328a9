"""Curated-dataset construction and the fine-tuning comparison harness.

A CurationPlan drops every explanation sample that carries a chosen
uncertain prototype (optionally restricted to a class pair); the experiment
harness fine-tunes a fresh copy of a base model under several named
schedules, repeats with consecutive seeds, and aggregates accuracy plus
pair-confusion statistics (population std, stated in the rendered header).
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from . import refnet
from .datasets import LabeledDataset
from .errors import BadPairError, EmptyCurationError, UnknownScheduleError


@dataclass
class CurationPlan:
    """Exclusion list derived from one uncertain prototype."""

    source_dataset_id: str
    excluded_ids: list
    retained_ids: list
    prototype: int
    pair: tuple | None

    @property
    def retained_count(self) -> int:
        return len(self.retained_ids)

    def to_json(self) -> str:
        return json.dumps({
            "source_dataset_id": self.source_dataset_id,
            "prototype": self.prototype,
            "pair": list(self.pair) if self.pair else None,
            "excluded_ids": self.excluded_ids,
            "retained_ids": self.retained_ids,
        }, indent=2, sort_keys=True) + "\n"

    @staticmethod
    def from_json(text: str) -> "CurationPlan":
        doc = json.loads(text)
        return CurationPlan(
            source_dataset_id=doc["source_dataset_id"],
            excluded_ids=[int(i) for i in doc["excluded_ids"]],
            retained_ids=[int(i) for i in doc["retained_ids"]],
            prototype=int(doc["prototype"]),
            pair=tuple(doc["pair"]) if doc["pair"] else None,
        )


def curate(dataset: LabeledDataset, presence_by_id: dict, k: int,
           pair: tuple | None = None, dataset_id: str = "") -> CurationPlan:
    """Exclude samples where prototype k is present (and, when a pair is
    given, only those labeled with one of the pair's classes)."""
    if k < 1:
        raise BadPairError(f"prototype id {k} must be >= 1")
    if pair is not None:
        a, b = pair
        if a == b or not (0 <= a < dataset.class_count and 0 <= b < dataset.class_count):
            raise BadPairError(f"bad class pair {pair}")
    excluded, retained = [], []
    for sid, label in zip(dataset.sample_ids, dataset.labels):
        sid = int(sid)
        has_proto = k in presence_by_id.get(sid, ())
        in_pair = pair is None or int(label) in pair
        if has_proto and in_pair:
            excluded.append(sid)
        else:
            retained.append(sid)
    if not retained:
        raise EmptyCurationError(f"prototype {k} present in every sample; nothing retained")
    return CurationPlan(
        source_dataset_id=dataset_id,
        excluded_ids=excluded,
        retained_ids=retained,
        prototype=k,
        pair=tuple(pair) if pair else None,
    )


def apply_plan(dataset: LabeledDataset, plan: CurationPlan) -> LabeledDataset:
    return dataset.subset_by_ids(plan.retained_ids)


def confusion_pair_stats(cm: np.ndarray, a: int, b: int) -> tuple:
    """(a->b, b->a, a<->b) counts from a confusion matrix (rows = truth)."""
    cm = np.asarray(cm)
    m = cm.shape[0]
    if a == b or not (0 <= a < m and 0 <= b < m):
        raise BadPairError(f"bad class pair ({a}, {b}) for {m} classes")
    ab = int(cm[a, b])
    ba = int(cm[b, a])
    return ab, ba, ab + ba


@dataclass
class ScheduleStats:
    """Per-schedule repeat-level raw values plus mean/std accessors."""

    name: str
    seeds: list
    accuracies: list  # percent
    pair_ab: list
    pair_ba: list
    pair_both: list

    def _ms(self, values) -> tuple:
        arr = np.asarray(values, dtype=np.float64)
        return float(arr.mean()), float(arr.std())  # population std

    @property
    def accuracy(self) -> tuple:
        return self._ms(self.accuracies)

    @property
    def ab(self) -> tuple:
        return self._ms(self.pair_ab)

    @property
    def ba(self) -> tuple:
        return self._ms(self.pair_ba)

    @property
    def both(self) -> tuple:
        return self._ms(self.pair_both)


@dataclass
class ExperimentStats:
    pair: tuple
    repeats: int
    schedules: dict = field(default_factory=dict)  # name -> ScheduleStats

    def to_json(self) -> str:
        doc = {
            "pair": list(self.pair),
            "repeats": self.repeats,
            "std": "population",
            "schedules": {
                name: {
                    "seeds": s.seeds,
                    "accuracy_pct": s.accuracies,
                    "pair_ab": s.pair_ab,
                    "pair_ba": s.pair_ba,
                    "pair_both": s.pair_both,
                }
                for name, s in self.schedules.items()
            },
        }
        return json.dumps(doc, indent=2, sort_keys=True) + "\n"


def run_experiment(base: refnet.ModelState, schedules, repeats: int, seed0: int,
                   test_set: LabeledDataset, pair: tuple, lr: float = 1e-4,
                   epochs_per_stage: int = 1, batch_size: int = 128) -> ExperimentStats:
    """Fine-tune a fresh copy of ``base`` per (schedule, repeat) and evaluate.

    ``schedules`` is a list of (name, [stage datasets]). Repeat r uses seed
    seed0 + r for shuffling; aggregation runs in seed order, so identical
    inputs give identical stats to the last bit.
    """
    if repeats < 1:
        raise BadPairError("repeats must be >= 1")
    a, b = pair
    stats = ExperimentStats(pair=(a, b), repeats=repeats)
    for name, stages in schedules:
        entry = ScheduleStats(name=name, seeds=[], accuracies=[], pair_ab=[],
                              pair_ba=[], pair_both=[])
        for r in range(repeats):
            seed = seed0 + r
            tuned = refnet.finetune(base.snapshot(), stages, lr=lr,
                                    epochs_per_stage=epochs_per_stage,
                                    seed=seed, batch_size=batch_size)
            cm = refnet.evaluate(tuned, test_set)
            correct = int(np.trace(cm))
            ab, ba, both = confusion_pair_stats(cm, a, b)
            entry.seeds.append(seed)
            entry.accuracies.append(100.0 * correct / test_set.size)
            entry.pair_ab.append(ab)
            entry.pair_ba.append(ba)
            entry.pair_both.append(both)
        stats.schedules[name] = entry
    return stats


@dataclass
class DeltaReport:
    baseline: str
    target: str
    pair: tuple
    delta_mean_both: float
    delta_std_both: float
    delta_accuracy: float
    verdict: str  # improved | regressed | no change


def compare_runs(stats: ExperimentStats, baseline: str, target: str,
                 pair: tuple) -> DeltaReport:
    """Delta of pair confusion and accuracy; improved iff mean(a<->b) drops."""
    for name in (baseline, target):
        if name not in stats.schedules:
            raise UnknownScheduleError(f"schedule {name!r} not in stats "
                                       f"({sorted(stats.schedules)})")
    if tuple(pair) != tuple(stats.pair):
        raise BadPairError(f"stats cover pair {stats.pair}, not {pair}")
    base = stats.schedules[baseline]
    tgt = stats.schedules[target]
    d_mean = tgt.both[0] - base.both[0]
    d_std = tgt.both[1] - base.both[1]
    d_acc = tgt.accuracy[0] - base.accuracy[0]
    if d_mean < 0:
        verdict = "improved"
    elif d_mean > 0:
        verdict = "regressed"
    else:
        verdict = "no change"
    return DeltaReport(baseline=baseline, target=target, pair=tuple(stats.pair),
                       delta_mean_both=d_mean, delta_std_both=d_std,
                       delta_accuracy=d_acc, verdict=verdict)


def render_stats_markdown(stats: ExperimentStats) -> str:
    a, b = stats.pair
    lines = [
        f"Fine-tuning comparison over {stats.repeats} repeats "
        f"(mean +/- population std)",
        "",
        f"| Dataset | Acc. (%) | {a}->{b} | {b}->{a} | {a}<->{b} |",
        "|---|---|---|---|---|",
    ]
    for name, s in stats.schedules.items():
        acc = s.accuracy
        ab = s.ab
        ba = s.ba
        both = s.both
        lines.append(
            f"| {name} | {acc[0]:.2f} +/- {acc[1]:.2f} | {ab[0]:.2f} +/- {ab[1]:.2f} "
            f"| {ba[0]:.2f} +/- {ba[1]:.2f} | {both[0]:.2f} +/- {both[1]:.2f} |"
        )
    return "\n".join(lines) + "\n"


def render_stats_csv(stats: ExperimentStats) -> str:
    a, b = stats.pair
    lines = [f"dataset,acc_mean,acc_std,{a}to{b}_mean,{a}to{b}_std,"
             f"{b}to{a}_mean,{b}to{a}_std,both_mean,both_std"]
    for name, s in stats.schedules.items():
        acc = s.accuracy
        ab = s.ab
        ba = s.ba
        both = s.both
        lines.append(
            f"{name},{acc[0]:.4f},{acc[1]:.4f},{ab[0]:.4f},{ab[1]:.4f},"
            f"{ba[0]:.4f},{ba[1]:.4f},{both[0]:.4f},{both[1]:.4f}"
        )
    return "\n".join(lines) + "\n"
