"""Rank-quality evaluation: negative sampling, AUC, and convergence curves."""

from __future__ import annotations

import dataclasses
import time
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import rankdata

from .als import AlsTrainer, FactorModel, Hyperparams, init_factors, score_coords, train_als
from .data import Coord, InteractionMatrix, sample_removal
from .unlearn import UnlearnRequest, untrain_trainer

_ENUMERATE_LIMIT = 4_000_000


@dataclasses.dataclass(frozen=True)
class EvalSet:
    positives: tuple[Coord, ...]
    negatives: tuple[Coord, ...]
    seed: int


@dataclasses.dataclass(frozen=True)
class CurvePoint:
    mode: str
    removal_fraction: float
    passes: int
    seed: int
    auc: float
    loss: float
    wall_time_s: float


def sample_negatives(
    matrix: InteractionMatrix, count: int, exclude: Iterable[Coord], seed: int
) -> list[Coord]:
    """Uniform sample of unobserved coordinates, without replacement.

    Excludes matrix.observed plus the given coordinates (typically held-out
    positives).  Deterministic per seed; small universes are enumerated,
    large ones rejection-sampled.
    """
    total = matrix.num_users * matrix.num_items
    n = np.int64(matrix.num_items)
    u_obs, i_obs = matrix.coord_arrays()
    excl = {int(a) * int(n) + int(b) for a, b in exclude}
    excl.update((u_obs * n + i_obs).tolist())
    excl_keys = np.array(sorted(excl), dtype=np.int64)
    available = total - excl_keys.size
    if count > available:
        raise ValueError(f"cannot sample {count} negatives; only {available} cells free")
    if count == 0:
        return []

    rng = np.random.default_rng(seed)
    if total <= _ENUMERATE_LIMIT or count * 2 > available:
        pool = np.setdiff1d(np.arange(total, dtype=np.int64), excl_keys)
        keys = rng.choice(pool, size=count, replace=False)
    else:
        chosen: dict[int, None] = {}
        while len(chosen) < count:
            draw = rng.integers(0, total, size=max(count, 1024), dtype=np.int64)
            pos = np.searchsorted(excl_keys, draw)
            pos = np.minimum(pos, excl_keys.size - 1)
            fresh = draw[excl_keys[pos] != draw]
            for key in fresh.tolist():
                if key not in chosen:
                    chosen[key] = None
                    if len(chosen) == count:
                        break
        keys = np.fromiter(chosen.keys(), dtype=np.int64, count=count)
    return [(int(k // n), int(k % n)) for k in keys]


def auc_score(pos_scores, neg_scores) -> float:
    """Probability a random positive outscores a random negative, ties 1/2.

    Computed from the Mann-Whitney rank sum with average ranks, which equals
    pairwise counting with half-credit for ties.
    """
    pos = np.asarray(pos_scores, dtype=float)
    neg = np.asarray(neg_scores, dtype=float)
    if pos.size == 0 or neg.size == 0:
        raise ValueError("auc_score needs non-empty score lists")
    ranks = rankdata(np.concatenate([pos, neg]), method="average")
    rank_sum = float(ranks[: pos.size].sum())
    return (rank_sum - pos.size * (pos.size + 1) / 2.0) / (pos.size * neg.size)


def build_eval_set(
    train: InteractionMatrix,
    test_positives: Sequence[Coord],
    seed: int,
    num_negatives: int | None = None,
) -> EvalSet:
    """Pair held-out positives with sampled negatives (balanced by default)."""
    count = len(test_positives) if num_negatives is None else num_negatives
    negatives = sample_negatives(train, count, test_positives, seed)
    return EvalSet(
        positives=tuple(test_positives), negatives=tuple(negatives), seed=seed
    )


def evaluate_model(model: FactorModel, eval_set: EvalSet) -> float:
    """Test AUC of the model's scores on the evaluation pairs."""
    pos = score_coords(model, eval_set.positives)
    neg = score_coords(model, eval_set.negatives)
    return auc_score(pos, neg)


def convergence_sweep(
    train: InteractionMatrix,
    test_positives: Sequence[Coord],
    removal_fractions: Sequence[float],
    pass_grid: Sequence[int],
    mode: str,
    hp: Hyperparams,
    seeds: Sequence[int],
    eval_seed: int = 0,
    n_jobs: int = 1,
) -> list[CurvePoint]:
    """AUC/loss curves over (removal fraction, passes, seed) cells.

    Every cell is evaluated on the same held-out positives and the same
    sampled negatives.  retrain cells train fresh models on the remaining
    data; untrain cells warm-start from a base model trained once per seed
    with hp.max_passes.  Grid passes are exact (no early stopping).
    """
    if mode not in ("retrain", "untrain"):
        raise ValueError(f"unknown sweep mode {mode!r}")
    grid = sorted(set(int(p) for p in pass_grid))
    if not grid or grid[0] < 1:
        raise ValueError("pass grid must hold positive pass counts")
    if any(not (0.0 <= f <= 1.0) for f in removal_fractions):
        raise ValueError("removal fractions must lie in [0, 1]")

    eval_set = build_eval_set(train, test_positives, eval_seed)
    points: list[CurvePoint] = []
    for seed in seeds:
        base_model = None
        if mode == "untrain":
            base_model = train_als(train, hp, seed, n_jobs=n_jobs)
        for frac in removal_fractions:
            removal = sample_removal(train, frac, seed)
            if mode == "retrain":
                remaining = train.without(removal.coords)
                X, Y = init_factors(train.num_users, train.num_items, hp.k, seed)
                trainer = AlsTrainer(
                    remaining,
                    X,
                    Y,
                    hp.policy(),
                    hp.lam,
                    solver=hp.solver,
                    cg_iters=hp.cg_iters,
                    n_jobs=n_jobs,
                )
            else:
                req = UnlearnRequest(
                    base_model,
                    train,
                    removal,
                    untrain_passes=grid[-1],
                    confidence_scheme=hp.confidence_scheme,
                    low_value=hp.low_value,
                    n_jobs=n_jobs,
                )
                trainer = untrain_trainer(req)
            t0 = time.perf_counter()
            for p in range(1, grid[-1] + 1):
                loss = trainer.run_pass()
                if p in grid:
                    points.append(
                        CurvePoint(
                            mode=mode,
                            removal_fraction=float(frac),
                            passes=p,
                            seed=int(seed),
                            auc=evaluate_model(trainer.snapshot(copy=False), eval_set),
                            loss=loss,
                            wall_time_s=time.perf_counter() - t0,
                        )
                    )
    return points


def write_curve_csv(points: Sequence[CurvePoint], path) -> None:
    """CSV emission with the stable header used by all sweep reports."""
    with open(path, "w", encoding="utf-8") as fh:
        fh.write("mode,fraction,passes,seed,auc,loss,wall_time_s\n")
        for pt in points:
            fh.write(
                f"{pt.mode},{pt.removal_fraction:.10g},{pt.passes},{pt.seed},"
                f"{pt.auc:.10g},{pt.loss:.10g},{pt.wall_time_s:.6f}\n"
            )
