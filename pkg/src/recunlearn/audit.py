"""Membership-inference auditing and vulnerability metrics.

The attacker sees one feature per coordinate, the model's predicted score,
and must separate remaining training samples (members) from removed ones.
Per audited model we report the eval-partition attack AUC of a threshold
attacker, oriented so that no-signal floors at 0.5.

Vulnerability compares untraining against the retraining privacy baseline:

    iv       = mi(untrain) - mi(retrain)
    iv_prime = mi(untrain) - mi(retrain) - mi(undeleted)

iv_prime subtracts the base model's attack accuracy measured on the
identical data split, cancelling split-level vulnerability the untrained
model inherits through its warm start.
"""

from __future__ import annotations

import dataclasses
from typing import Callable, Sequence

import numpy as np

from .als import FactorModel, Hyperparams, score_coords, train_als
from .data import Coord, DataSplit, RemovalSet, sample_removal
from .evaluation import auc_score
from .unlearn import UnlearnRequest, retrain_from_scratch, untrain_als


@dataclasses.dataclass(frozen=True)
class MiDataset:
    """Balanced attack dataset with a 50-50 per-class train/eval partition."""

    member_scores: np.ndarray
    removed_scores: np.ndarray
    member_train: np.ndarray
    member_eval: np.ndarray
    removed_train: np.ndarray
    removed_eval: np.ndarray
    split_seed: int


@dataclasses.dataclass(frozen=True)
class VulnerabilityRecord:
    removal_fraction: float
    train_passes: int
    untrain_passes: int
    seed: int
    mi_untrain: float
    mi_retrain: float
    mi_undeleted: float
    iv: float
    iv_prime: float


def build_mi_dataset(
    model: FactorModel,
    removal: RemovalSet,
    remain_pool: Sequence[Coord],
    split_seed: int,
) -> MiDataset:
    """Score removed coordinates against an equal-size member sample.

    Members are drawn uniformly from the remaining observed coordinates;
    each class is then split 50-50 into attack-train and attack-eval.
    """
    if not removal.coords:
        raise ValueError("no audit target: removal set is empty")
    pool = sorted(remain_pool)
    n = len(removal.coords)
    if len(pool) < n:
        raise ValueError("remain pool smaller than the removal set")

    rng = np.random.default_rng(split_seed)
    pick = rng.choice(len(pool), size=n, replace=False)
    member_coords = [pool[j] for j in pick]

    member = score_coords(model, member_coords)
    removed = score_coords(model, removal.coords)

    n_train = n // 2
    perm_m = rng.permutation(n)
    perm_r = rng.permutation(n)
    return MiDataset(
        member_scores=member,
        removed_scores=removed,
        member_train=member[perm_m[:n_train]],
        member_eval=member[perm_m[n_train:]],
        removed_train=removed[perm_r[:n_train]],
        removed_eval=removed[perm_r[n_train:]],
        split_seed=split_seed,
    )


def mi_accuracy(ds: MiDataset) -> float:
    """Oriented attack AUC on the eval partition, members as positives.

    A single-feature threshold attacker is monotone in the score, so its
    best eval AUC is the raw score AUC up to direction; reporting
    max(a, 1 - a) keeps the no-signal case at 0.5.
    """
    a = auc_score(ds.member_eval, ds.removed_eval)
    return max(a, 1.0 - a)


def vulnerability_naive(mi_untrain: float, mi_retrain: float) -> float:
    """Additional attack accuracy from choosing untraining over retraining."""
    for v in (mi_untrain, mi_retrain):
        if not (0.0 <= v <= 1.0):
            raise ValueError("MI accuracies must lie in [0, 1]")
    return mi_untrain - mi_retrain


def vulnerability_denoised(
    mi_untrain: float, mi_retrain: float, mi_undeleted: float
) -> float:
    """Split-denoised vulnerability; all three inputs must share one data split."""
    for v in (mi_untrain, mi_retrain, mi_undeleted):
        if not (0.0 <= v <= 1.0):
            raise ValueError("MI accuracies must lie in [0, 1]")
    return mi_untrain - mi_retrain - mi_undeleted


def audit_cell(
    split: DataSplit,
    fraction: float,
    train_passes: int,
    untrain_passes: int,
    seed: int,
    hp: Hyperparams,
    mi_split_seed: int = 0,
    retrain_passes: int | None = None,
    n_jobs: int = 1,
) -> VulnerabilityRecord:
    """One audit cell: three models, three MI accuracies on the identical split.

    The base model trains for exactly train_passes; untraining runs exactly
    untrain_passes from it; the retrain baseline runs retrain_passes
    (hp.max_passes when unset).  All three share the removal set, the member
    sample, and the MI partition, so iv_prime's identical-split precondition
    holds mechanically.
    """
    base_hp = dataclasses.replace(hp, max_passes=train_passes, tolerance=0.0)
    undeleted = train_als(split.train, base_hp, seed, n_jobs=n_jobs)

    removal = sample_removal(split.train, fraction, seed)
    retrain_hp = dataclasses.replace(
        hp, max_passes=retrain_passes or hp.max_passes, tolerance=0.0
    )
    retrained = retrain_from_scratch(split.train, removal, retrain_hp, seed, n_jobs=n_jobs)
    untrained = untrain_als(
        UnlearnRequest(
            undeleted,
            split.train,
            removal,
            untrain_passes=untrain_passes,
            tolerance=0.0,
            confidence_scheme=hp.confidence_scheme,
            low_value=hp.low_value,
            n_jobs=n_jobs,
        )
    )

    remain_pool = sorted(split.train.observed - removal.as_set())
    cell_seed = mi_split_seed + seed
    mi_unt = mi_accuracy(build_mi_dataset(untrained, removal, remain_pool, cell_seed))
    mi_ret = mi_accuracy(build_mi_dataset(retrained, removal, remain_pool, cell_seed))
    mi_und = mi_accuracy(build_mi_dataset(undeleted, removal, remain_pool, cell_seed))

    return VulnerabilityRecord(
        removal_fraction=float(fraction),
        train_passes=int(train_passes),
        untrain_passes=int(untrain_passes),
        seed=int(seed),
        mi_untrain=mi_unt,
        mi_retrain=mi_ret,
        mi_undeleted=mi_und,
        iv=vulnerability_naive(mi_unt, mi_ret),
        iv_prime=vulnerability_denoised(mi_unt, mi_ret, mi_und),
    )


def audit_sweep(
    split: DataSplit,
    fractions: Sequence[float],
    train_pass_grid: Sequence[int],
    untrain_pass_grid: Sequence[int],
    hp: Hyperparams,
    seeds: Sequence[int],
    mi_split_seed: int = 0,
    retrain_passes: int | None = None,
    n_jobs: int = 1,
    on_record: Callable[[VulnerabilityRecord], None] | None = None,
) -> list[VulnerabilityRecord]:
    """Full vulnerability grid over (fraction, train passes, untrain passes, seed).

    ``on_record`` fires after each completed cell so callers can flush
    partial results.
    """
    if not fractions or not train_pass_grid or not untrain_pass_grid:
        raise ValueError("audit grids must be non-empty")
    records = []
    for fraction in fractions:
        for tp in train_pass_grid:
            for up in untrain_pass_grid:
                for seed in seeds:
                    rec = audit_cell(
                        split,
                        fraction,
                        tp,
                        up,
                        seed,
                        hp,
                        mi_split_seed=mi_split_seed,
                        retrain_passes=retrain_passes,
                        n_jobs=n_jobs,
                    )
                    records.append(rec)
                    if on_record is not None:
                        on_record(rec)
    return records


AUDIT_CSV_HEADER = "fraction,train_passes,untrain_passes,seed,mi_untrain,mi_retrain,mi_undeleted,iv,iv_prime"


def format_audit_row(rec: VulnerabilityRecord) -> str:
    return (
        f"{rec.removal_fraction:.10g},{rec.train_passes},{rec.untrain_passes},"
        f"{rec.seed},{rec.mi_untrain:.10g},{rec.mi_retrain:.10g},"
        f"{rec.mi_undeleted:.10g},{rec.iv:.10g},{rec.iv_prime:.10g}"
    )


def write_audit_csv(records: Sequence[VulnerabilityRecord], path) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        fh.write(AUDIT_CSV_HEADER + "\n")
        for rec in records:
            fh.write(format_audit_row(rec) + "\n")
