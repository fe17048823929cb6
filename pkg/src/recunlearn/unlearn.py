"""Exact unlearning of observed interactions from a trained factor model.

Untraining warm-starts from the trained factors, moves the removed
coordinates out of the observed set (preference 0), pins their confidence to
0 for every subsequent sweep, and re-runs alternating passes.  The blocked
objective restricted to observed coordinates is identical, as a function of
the factors, to the plain objective on the remaining data, so untraining
minimizes the same functional as retraining without the removed entries.

A rank-one inverse downdate gives a fast first user half-sweep when the
per-user system inverses were cached after pretraining: zeroing one
confidence subtracts c * y y^T from that user's normal matrix, and the
adjusted inverse is

    (A - c y y^T)^{-1} = A^{-1} + c / (1 - q) * (A^{-1} y)(A^{-1} y)^T,
    q = c * y^T A^{-1} y.

Later half-sweeps see wholesale factor updates, not rank-one changes, so they
fall back to fresh solves.
"""

from __future__ import annotations

import dataclasses
import json
import math
import time

import numpy as np

from .als import (
    AlsTrainer,
    ConfidencePolicy,
    FactorModel,
    Hyperparams,
    row_rhs,
    row_system,
    train_als,
)
from .data import InteractionMatrix, RemovalSet


@dataclasses.dataclass
class UnlearnRequest:
    """Inputs for one untraining run.

    ``user_inverses`` is the optional (m, k, k) cache of per-user system
    inverses computed against the base model's item factors; the downdate
    solver builds it on demand when absent.
    """

    base_model: FactorModel
    train: InteractionMatrix
    removal: RemovalSet
    untrain_passes: int = 10
    solver: str = "direct"
    cg_iters: int = 3
    tolerance: float = 1e-4
    confidence_scheme: str = "linear"
    low_value: float = 0.0
    user_inverses: np.ndarray | None = None
    n_jobs: int = 1

    def __post_init__(self):
        if self.untrain_passes < 0:
            raise ValueError("untrain_passes must be >= 0")
        if self.solver not in ("direct", "cg", "downdate"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if (
            self.base_model.num_users != self.train.num_users
            or self.base_model.num_items != self.train.num_items
        ):
            raise ValueError("base model shapes inconsistent with the training matrix")

    def policy(self) -> ConfidencePolicy:
        return ConfidencePolicy(
            scheme=self.confidence_scheme,
            alpha=self.base_model.alpha,
            low_value=self.low_value,
        )


@dataclasses.dataclass
class DowndateWorkspace:
    """Per-row downdate state: the row's cached inverse and its removed columns."""

    base_inverse: np.ndarray
    touched_rows: list[int]

    def __post_init__(self):
        if not np.all(np.isfinite(self.base_inverse)):
            raise ValueError("non-finite base inverse")
        if not np.allclose(self.base_inverse, self.base_inverse.T, atol=1e-10):
            raise ValueError("base inverse not symmetric")


@dataclasses.dataclass
class PassDiagnostics:
    pass_index: int
    loss: float
    wall_time_s: float
    downdate_fallbacks: int = 0

    def to_json(self) -> str:
        return json.dumps(
            {
                "pass": self.pass_index,
                "loss": self.loss,
                "wall_time_s": self.wall_time_s,
                "downdate_fallbacks": self.downdate_fallbacks,
            },
            sort_keys=True,
        )


def write_diagnostics(records, path) -> None:
    """Emit per-pass diagnostics as line-delimited JSON."""
    with open(path, "w", encoding="utf-8") as fh:
        for rec in records:
            fh.write(rec.to_json())
            fh.write("\n")


def apply_deletion(
    train: InteractionMatrix, policy: ConfidencePolicy, removal: RemovalSet
) -> tuple[InteractionMatrix, ConfidencePolicy]:
    """Zero preferences and block confidences on the removed coordinates.

    The returned matrix drops the coordinates from the observed-positive set;
    the returned policy carries a 0-confidence override for each of them,
    which persists across every subsequent pass.
    """
    if not removal.coords:
        return train, policy
    missing = ~train.contains(removal.coords)
    if missing.any():
        bad = removal.coords[int(np.argmax(missing))]
        raise ValueError(f"meaningless deletion: {bad} is not an observed positive")
    return train.without(removal.coords), policy.with_blocked(removal.coords)


def untrain_loss(
    model: FactorModel,
    train: InteractionMatrix,
    removal: RemovalSet,
    policy: ConfidencePolicy,
) -> float:
    """Blocked-confidence loss over the original observed set.

    Removed coordinates enter with confidence 0, so the value equals
    als_loss on train minus the removal, exactly and for any factors.
    """
    if removal.coords and not train.contains(removal.coords).all():
        raise ValueError("removal set not contained in the observed set")
    u, i = train.coord_arrays()
    if u.size == 0:
        data = 0.0
    else:
        scores = np.einsum("ij,ij->i", model.X[u], model.Y[i])
        conf = np.full(u.size, policy.positive_value)
        keys = u * np.int64(train.num_items) + i
        for (ou, oi), val in policy.override.items():
            key = ou * train.num_items + oi
            pos = np.searchsorted(keys, key)
            if pos < keys.size and keys[pos] == key:
                conf[pos] = val
        for (ru, ri) in removal.coords:
            key = ru * train.num_items + ri
            pos = np.searchsorted(keys, key)
            if pos < keys.size and keys[pos] == key:
                conf[pos] = 0.0
        data = float(conf @ (1.0 - scores) ** 2)
    reg = model.lam * (float(np.sum(model.X**2)) + float(np.sum(model.Y**2)))
    return data + reg


def sherman_morrison_downdate(
    base_inverse: np.ndarray, y: np.ndarray, c: float
) -> np.ndarray:
    """Inverse of A - c * y y^T given A^{-1}, the rank-one subtraction case.

    Raises a singular-downdate error when 1 - q vanishes (q = c y^T A^{-1} y),
    in which case the caller must fall back to a direct solve.
    """
    if c < 0:
        raise ValueError("downdate weight must be >= 0")
    w = base_inverse @ y
    q = float(c * (y @ w))
    if abs(1.0 - q) <= 1e-10:
        raise np.linalg.LinAlgError("singular downdate")
    return base_inverse + (c / (1.0 - q)) * np.outer(w, w)


def compute_user_inverses(
    train: InteractionMatrix,
    Y: np.ndarray,
    policy: ConfidencePolicy,
    lam: float,
) -> np.ndarray:
    """Per-user inverses of the row systems against item factors Y.

    This is the cache the pretraining step hands to the downdate fast path;
    it is only valid while Y and the confidences are unchanged.
    """
    m = train.num_users
    k = Y.shape[1]
    cpos, bg = policy.positive_value, policy.background
    base = bg * (Y.T @ Y) + lam * np.eye(k)
    overrides = _group_user_overrides(policy)
    out = np.empty((m, k, k))
    for u in range(m):
        A, _ = row_system(base, Y, train.user_items(u), overrides.get(u), cpos, bg)
        inv = np.linalg.inv(A)
        out[u] = 0.5 * (inv + inv.T)
    return out


def _group_user_overrides(policy: ConfidencePolicy):
    grouped: dict[int, list[tuple[int, float]]] = {}
    for (u, i), v in sorted(policy.override.items()):
        grouped.setdefault(u, []).append((i, float(v)))
    return grouped


def _removal_by_user(removal: RemovalSet) -> dict[int, list[int]]:
    grouped: dict[int, list[int]] = {}
    for u, i in sorted(removal.coords):
        grouped.setdefault(u, []).append(i)
    return grouped


def _downdate_user_half(
    trainer: AlsTrainer,
    base_policy: ConfidencePolicy,
    removal: RemovalSet,
    user_inverses: np.ndarray,
) -> int:
    """First-pass user half-sweep from cached inverses; returns fallback count.

    Rows with more than ceil(k/2) removals are solved directly (the downdate
    chain would cost more than a fresh factorization), as are rows where a
    downdate turns singular.
    """
    Y = trainer.Y
    k = Y.shape[1]
    policy = trainer.policy
    cpos, bg = policy.positive_value, policy.background
    base = bg * (Y.T @ Y) + trainer.lam * np.eye(k)
    by_user = _removal_by_user(removal)
    overrides = trainer._user_overrides
    fallbacks = 0

    for u in range(trainer.train.num_users):
        idx = trainer.train.user_items(u)
        ov = overrides.get(u)
        removed = by_user.get(u)
        if removed and len(removed) > math.ceil(k / 2):
            A, b = row_system(base, Y, idx, ov, cpos, bg)
            trainer.X[u] = np.linalg.solve(A, b)
            fallbacks += 1
            continue
        ws = DowndateWorkspace(
            base_inverse=user_inverses[u], touched_rows=list(removed or ())
        )
        inv = ws.base_inverse
        failed = False
        for i in ws.touched_rows:
            c_old = base_policy.confidence(1, (u, i))
            try:
                inv = sherman_morrison_downdate(inv, Y[i], c_old)
            except np.linalg.LinAlgError:
                failed = True
                break
        if failed:
            A, b = row_system(base, Y, idx, ov, cpos, bg)
            trainer.X[u] = np.linalg.solve(A, b)
            fallbacks += 1
        else:
            trainer.X[u] = inv @ row_rhs(Y, idx, ov, cpos)
    return fallbacks


def untrain_trainer(req: UnlearnRequest) -> AlsTrainer:
    """Warm-started trainer over the post-deletion matrix with blocked policy.

    Sweeps and benchmarks step this directly; untrain_als wraps it with
    convergence checks and diagnostics.
    """
    base = req.base_model
    train2, policy2 = apply_deletion(req.train, req.policy(), req.removal)
    return AlsTrainer(
        train2,
        base.X,
        base.Y,
        policy2,
        lam=base.lam,
        solver="cg" if req.solver == "cg" else "direct",
        cg_iters=req.cg_iters,
        n_jobs=req.n_jobs,
    )


def untrain_pass_downdate(req: UnlearnRequest, diagnostics: list | None = None) -> FactorModel:
    """One untraining pass with the downdate fast path on the user half-sweep.

    Matches the direct-solver pass entrywise up to rounding; singular
    downdates fall back to direct solves and are counted in diagnostics.
    """
    model, diags = _run_untrain(dataclasses.replace(req, untrain_passes=1, solver="downdate"))
    if diagnostics is not None:
        diagnostics.extend(diags)
    return model


def untrain_als(req: UnlearnRequest, diagnostics: list | None = None) -> FactorModel:
    """Untrain by warm-started alternating sweeps with blocked confidences.

    Runs up to req.untrain_passes passes, stopping early once the relative
    loss change falls below req.tolerance.  Appends a PassDiagnostics record
    per pass to ``diagnostics`` when a list is supplied.
    """
    model, diags = _run_untrain(req)
    if diagnostics is not None:
        diagnostics.extend(diags)
    return model


def _run_untrain(req: UnlearnRequest) -> tuple[FactorModel, list[PassDiagnostics]]:
    base = req.base_model
    policy0 = req.policy()

    if req.untrain_passes == 0:
        if req.removal.coords and not req.train.contains(req.removal.coords).all():
            raise ValueError("meaningless deletion: coordinate not observed")
        out = base.copy()
        out.passes_run = 0
        return out, []

    trainer = untrain_trainer(req)

    inverses = req.user_inverses
    if req.solver == "downdate" and inverses is None:
        inverses = compute_user_inverses(req.train, base.Y, policy0, base.lam)

    diags: list[PassDiagnostics] = []
    prev = None
    for p in range(1, req.untrain_passes + 1):
        t0 = time.perf_counter()
        fallbacks = 0
        if p == 1 and req.solver == "downdate":
            fallbacks = _downdate_user_half(trainer, policy0, req.removal, inverses)
            trainer._half_sweep(1)
            trainer.passes_run += 1
            loss = trainer.loss()
        else:
            loss = trainer.run_pass()
        diags.append(
            PassDiagnostics(
                pass_index=p,
                loss=loss,
                wall_time_s=time.perf_counter() - t0,
                downdate_fallbacks=fallbacks,
            )
        )
        if prev is not None and abs(prev - loss) <= req.tolerance * max(prev, 1e-300):
            break
        prev = loss

    model = trainer.snapshot()
    model.init_seed = base.init_seed
    return model, diags


def retrain_from_scratch(
    train: InteractionMatrix,
    removal: RemovalSet,
    hp: Hyperparams,
    seed: int,
    n_jobs: int = 1,
    on_pass=None,
) -> FactorModel:
    """Privacy baseline: fresh training on the matrix with removals treated as missing."""
    if removal.coords and not train.contains(removal.coords).all():
        raise ValueError("removal set not contained in the observed set")
    remaining = train.without(removal.coords)
    return train_als(remaining, hp, seed, n_jobs=n_jobs, on_pass=on_pass)
