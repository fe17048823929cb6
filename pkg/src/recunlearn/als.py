"""Alternating least squares for implicit feedback with confidence weighting.

Training alternates exact ridge solves for user rows and item rows.  Each row
subproblem covers *all* columns: observed positives carry high confidence,
missing cells carry the scheme's background confidence, and per-coordinate
overrides (used to block deleted interactions) win over both.

The reported loss restricts the data term to explicitly observed coordinates:

    sum_{(u,i) observed} c_ui (p_ui - x_u . y_i)^2
        + lam * (||X||_F^2 + ||Y||_F^2)
"""

from __future__ import annotations

import dataclasses
import json
from concurrent.futures import ThreadPoolExecutor
from typing import Mapping

import numpy as np

from .data import Coord, InteractionMatrix

MODEL_FORMAT = "recunlearn-factor-model"
MODEL_VERSION = 1


@dataclasses.dataclass(frozen=True)
class ConfidencePolicy:
    """Rule mapping preferences to confidences, plus per-coordinate overrides.

    linear scheme: c = 1 + alpha * p
    binary scheme: c = 1 when p = 1, low_value otherwise

    Overrides force the confidence of specific coordinates regardless of the
    scheme; blocking a deleted interaction is the override value 0.
    """

    scheme: str = "linear"
    alpha: float = 40.0
    low_value: float = 0.0
    override: Mapping[Coord, float] = dataclasses.field(default_factory=dict)

    def __post_init__(self):
        if self.scheme == "linear":
            if self.alpha <= 0:
                raise ValueError("linear scheme requires alpha > 0")
        elif self.scheme == "binary":
            if not (0.0 <= self.low_value < 1.0):
                raise ValueError("binary scheme requires low_value in [0, 1)")
        else:
            raise ValueError(f"unknown confidence scheme {self.scheme!r}")
        if any(v < 0 for v in self.override.values()):
            raise ValueError("override confidences must be >= 0")

    @property
    def positive_value(self) -> float:
        """Confidence of an observed positive absent any override."""
        return 1.0 + self.alpha if self.scheme == "linear" else 1.0

    @property
    def background(self) -> float:
        """Confidence of an unobserved cell absent any override."""
        return 1.0 if self.scheme == "linear" else self.low_value

    def confidence(self, p: int, coord: Coord) -> float:
        if coord in self.override:
            return float(self.override[coord])
        return self.positive_value if p else self.background

    def with_blocked(self, coords) -> "ConfidencePolicy":
        """Copy of this policy with the given coordinates blocked (confidence 0)."""
        merged = dict(self.override)
        for c in coords:
            merged[(int(c[0]), int(c[1]))] = 0.0
        return dataclasses.replace(self, override=merged)


def confidence_of(p: int, coord: Coord, policy: ConfidencePolicy) -> float:
    """Confidence of a single cell; the override wins if one is present."""
    return policy.confidence(p, coord)


@dataclasses.dataclass(frozen=True)
class Hyperparams:
    k: int = 32
    lam: float = 0.1
    alpha: float = 40.0
    max_passes: int = 25
    tolerance: float = 1e-4
    solver: str = "direct"
    cg_iters: int = 3
    confidence_scheme: str = "linear"
    low_value: float = 0.0

    def __post_init__(self):
        if self.k < 1:
            raise ValueError("k must be >= 1")
        if self.max_passes < 1:
            raise ValueError("max_passes must be >= 1")
        if self.tolerance < 0:
            raise ValueError("tolerance must be >= 0")
        if self.solver not in ("direct", "cg"):
            raise ValueError(f"unknown solver {self.solver!r}")
        if self.cg_iters < 1:
            raise ValueError("cg_iters must be >= 1")

    def policy(self) -> ConfidencePolicy:
        return ConfidencePolicy(
            scheme=self.confidence_scheme, alpha=self.alpha, low_value=self.low_value
        )


@dataclasses.dataclass
class FactorModel:
    """User factors X (m x k) and item factors Y (n x k) with hyperparameters."""

    X: np.ndarray
    Y: np.ndarray
    lam: float
    alpha: float
    passes_run: int = 0
    init_seed: int = 0

    @property
    def k(self) -> int:
        return self.X.shape[1]

    @property
    def num_users(self) -> int:
        return self.X.shape[0]

    @property
    def num_items(self) -> int:
        return self.Y.shape[0]

    def copy(self) -> "FactorModel":
        return FactorModel(
            X=self.X.copy(),
            Y=self.Y.copy(),
            lam=self.lam,
            alpha=self.alpha,
            passes_run=self.passes_run,
            init_seed=self.init_seed,
        )


def predict(model: FactorModel, u: int, i: int) -> float:
    """Score a single cell as x_u . y_i."""
    if not (0 <= u < model.num_users):
        raise IndexError(f"user index {u} out of range")
    if not (0 <= i < model.num_items):
        raise IndexError(f"item index {i} out of range")
    return float(model.X[u] @ model.Y[i])


def score_coords(model: FactorModel, coords) -> np.ndarray:
    """Vectorized predict() over a coordinate list."""
    pairs = np.asarray(list(coords), dtype=np.int64).reshape(-1, 2)
    if pairs.shape[0] == 0:
        return np.zeros(0)
    u, i = pairs[:, 0], pairs[:, 1]
    if u.size and (u.min() < 0 or u.max() >= model.num_users):
        raise IndexError("user index out of range")
    if i.size and (i.min() < 0 or i.max() >= model.num_items):
        raise IndexError("item index out of range")
    return np.einsum("ij,ij->i", model.X[u], model.Y[i])


def solve_row_direct(
    other_factors: np.ndarray,
    conf_row: np.ndarray,
    pref_row: np.ndarray,
    lam: float,
) -> np.ndarray:
    """Exact minimizer of sum_j c_j (p_j - x . y_j)^2 + lam * ||x||^2.

    Parameters
    ----------
    other_factors : (n, k) frozen opposite factor matrix
    conf_row : (n,) per-column confidences, >= 0
    pref_row : (n,) per-column preferences
    lam : ridge regularizer, > 0 unless the weighted normal matrix is nonsingular
    """
    Y = np.asarray(other_factors, dtype=float)
    c = np.asarray(conf_row, dtype=float)
    p = np.asarray(pref_row, dtype=float)
    k = Y.shape[1]
    A = (Y * c[:, None]).T @ Y + lam * np.eye(k)
    b = Y.T @ (c * p)
    try:
        return np.linalg.solve(A, b)
    except np.linalg.LinAlgError as exc:
        raise np.linalg.LinAlgError("singular subproblem") from exc


def _cg(A: np.ndarray, b: np.ndarray, x0: np.ndarray, iters: int) -> np.ndarray:
    """Plain conjugate gradient on an SPD system, fixed iteration budget."""
    x = np.array(x0, dtype=float, copy=True)
    r = b - A @ x
    p = r.copy()
    rs = float(r @ r)
    for _ in range(iters):
        if rs == 0.0:
            break
        Ap = A @ p
        denom = float(p @ Ap)
        if not np.isfinite(denom):
            raise FloatingPointError("non-finite CG intermediate")
        if denom <= 0.0:
            # Rounding near convergence; the current iterate is already good.
            break
        step = rs / denom
        x += step * p
        r -= step * Ap
        rs_new = float(r @ r)
        if not np.isfinite(rs_new):
            raise FloatingPointError("non-finite CG intermediate")
        p = r + (rs_new / rs) * p
        rs = rs_new
    return x


def solve_row_cg(
    other_factors: np.ndarray,
    conf_row: np.ndarray,
    pref_row: np.ndarray,
    lam: float,
    cg_iters: int,
) -> np.ndarray:
    """Conjugate-gradient approximation of solve_row_direct, started from zero.

    With cg_iters >= k the result matches the direct solve up to rounding.
    """
    Y = np.asarray(other_factors, dtype=float)
    c = np.asarray(conf_row, dtype=float)
    p = np.asarray(pref_row, dtype=float)
    k = Y.shape[1]
    A = (Y * c[:, None]).T @ Y + lam * np.eye(k)
    b = Y.T @ (c * p)
    return _cg(A, b, np.zeros(k), cg_iters)


def _overrides_by_row(override: Mapping[Coord, float], axis: int):
    """Group overrides by user (axis 0) or item (axis 1), deterministic order."""
    grouped: dict[int, list[tuple[int, float]]] = {}
    for (u, i), v in sorted(override.items()):
        row, col = (u, i) if axis == 0 else (i, u)
        grouped.setdefault(row, []).append((col, float(v)))
    return grouped


def row_system(
    base: np.ndarray,
    other: np.ndarray,
    idx: np.ndarray,
    ov_list,
    cpos: float,
    bg: float,
) -> tuple[np.ndarray, np.ndarray]:
    """Assemble one row's normal system (A, b) on top of the shared base.

    ``base`` must be bg * other^T other + lam * I.  ``idx`` holds the row's
    observed columns (ascending); ``ov_list`` its (column, value) confidence
    overrides.
    """
    Yo = other[idx]
    A = base + (cpos - bg) * (Yo.T @ Yo)
    b = cpos * Yo.sum(axis=0)
    if ov_list:
        for col, val in ov_list:
            y = other[col]
            pos = np.searchsorted(idx, col)
            if pos < idx.size and idx[pos] == col:
                A += (val - cpos) * np.outer(y, y)
                b += (val - cpos) * y
            else:
                A += (val - bg) * np.outer(y, y)
    return A, b


def row_rhs(
    other: np.ndarray, idx: np.ndarray, ov_list, cpos: float
) -> np.ndarray:
    """Right-hand side of one row's system (preferences are 1 on ``idx``)."""
    b = cpos * other[idx].sum(axis=0)
    if ov_list:
        for col, val in ov_list:
            pos = np.searchsorted(idx, col)
            if pos < idx.size and idx[pos] == col:
                b += (val - cpos) * other[col]
    return b


class AlsTrainer:
    """Stepping engine for alternating sweeps over a fixed interaction matrix.

    Each pass runs all user rows, then all item rows, against the frozen
    opposite factor matrix.  Row solves within a half-sweep are independent;
    n_jobs > 1 splits them over threads and still produces identical results
    because every row is a pure function of the frozen inputs.
    """

    def __init__(
        self,
        train: InteractionMatrix,
        X: np.ndarray,
        Y: np.ndarray,
        policy: ConfidencePolicy,
        lam: float,
        solver: str = "direct",
        cg_iters: int = 3,
        n_jobs: int = 1,
    ):
        if X.shape[0] != train.num_users or Y.shape[0] != train.num_items:
            raise ValueError("factor shapes inconsistent with the training matrix")
        if X.shape[1] != Y.shape[1]:
            raise ValueError("user and item factor ranks differ")
        self.train = train
        self.X = np.array(X, dtype=float)
        self.Y = np.array(Y, dtype=float)
        self.policy = policy
        self.lam = float(lam)
        self.solver = solver
        self.cg_iters = int(cg_iters)
        self.n_jobs = max(1, int(n_jobs))
        self.passes_run = 0
        self._user_overrides = _overrides_by_row(policy.override, axis=0)
        self._item_overrides = _overrides_by_row(policy.override, axis=1)

    # -- row subproblem assembly -------------------------------------------

    def _solve_block(self, rows, target, other, base, items_of, overrides):
        cpos = self.policy.positive_value
        bg = self.policy.background
        for row in rows:
            A, b = row_system(base, other, items_of(row), overrides.get(row), cpos, bg)
            if self.solver == "cg":
                target[row] = _cg(A, b, target[row], self.cg_iters)
            else:
                target[row] = np.linalg.solve(A, b)

    def _half_sweep(self, axis: int):
        if axis == 0:
            target, other = self.X, self.Y
            items_of, overrides = self.train.user_items, self._user_overrides
        else:
            target, other = self.Y, self.X
            items_of, overrides = self.train.item_users, self._item_overrides
        k = other.shape[1]
        base = self.policy.background * (other.T @ other) + self.lam * np.eye(k)
        nrows = target.shape[0]
        if self.n_jobs == 1:
            self._solve_block(range(nrows), target, other, base, items_of, overrides)
        else:
            chunks = np.array_split(np.arange(nrows), self.n_jobs)
            with ThreadPoolExecutor(max_workers=self.n_jobs) as pool:
                futures = [
                    pool.submit(
                        self._solve_block, chunk, target, other, base, items_of, overrides
                    )
                    for chunk in chunks
                    if chunk.size
                ]
                for f in futures:
                    f.result()

    # -- public stepping API -----------------------------------------------

    def run_pass(self) -> float:
        """One full alternating pass (users then items); returns the loss after it."""
        self._half_sweep(0)
        self._half_sweep(1)
        self.passes_run += 1
        loss = self.loss()
        if not np.isfinite(loss):
            raise FloatingPointError(
                f"non-finite training loss after pass {self.passes_run}"
            )
        return loss

    def loss(self) -> float:
        return als_loss(self.snapshot(copy=False), self.train, self.policy)

    def snapshot(self, copy: bool = True) -> FactorModel:
        X = self.X.copy() if copy else self.X
        Y = self.Y.copy() if copy else self.Y
        return FactorModel(
            X=X,
            Y=Y,
            lam=self.lam,
            alpha=self.policy.alpha,
            passes_run=self.passes_run,
        )


def init_factors(m: int, n: int, k: int, seed: int) -> tuple[np.ndarray, np.ndarray]:
    """Seeded factor initialization: i.i.d. normal entries with std 0.1, X then Y."""
    rng = np.random.default_rng(seed)
    X = rng.normal(scale=0.1, size=(m, k))
    Y = rng.normal(scale=0.1, size=(n, k))
    return X, Y


def train_als(
    train: InteractionMatrix,
    hp: Hyperparams,
    seed: int,
    n_jobs: int = 1,
    on_pass=None,
) -> FactorModel:
    """Train factors by alternating least squares.

    Runs full alternating passes until the relative change of the observed
    loss drops below hp.tolerance or hp.max_passes is reached.  ``on_pass``
    (if given) is called as ``on_pass(pass_index, loss, trainer)`` after each
    pass, which is how sweeps checkpoint intermediate models.
    """
    if train.n_observed == 0:
        raise ValueError("cannot train on an empty interaction matrix")
    X, Y = init_factors(train.num_users, train.num_items, hp.k, seed)
    trainer = AlsTrainer(
        train,
        X,
        Y,
        hp.policy(),
        hp.lam,
        solver=hp.solver,
        cg_iters=hp.cg_iters,
        n_jobs=n_jobs,
    )
    prev = None
    for p in range(1, hp.max_passes + 1):
        loss = trainer.run_pass()
        if on_pass is not None:
            on_pass(p, loss, trainer)
        if prev is not None and abs(prev - loss) <= hp.tolerance * max(prev, 1e-300):
            break
        prev = loss
    model = trainer.snapshot()
    model.init_seed = seed
    return model


def als_loss(
    model: FactorModel, matrix: InteractionMatrix, policy: ConfidencePolicy
) -> float:
    """Observed-coordinate weighted loss plus the ridge term.

    The data term runs over the matrix's observed positives only; unobserved
    cells never enter even though row solves weight them by the background
    confidence.
    """
    u, i = matrix.coord_arrays()
    if u.size:
        scores = np.einsum("ij,ij->i", model.X[u], model.Y[i])
        conf = np.full(u.size, policy.positive_value)
        if policy.override:
            keys = u * np.int64(matrix.num_items) + i
            for (ou, oi), val in policy.override.items():
                key = ou * matrix.num_items + oi
                pos = np.searchsorted(keys, key)
                if pos < keys.size and keys[pos] == key:
                    conf[pos] = val
        data = float(conf @ (1.0 - scores) ** 2)
    else:
        data = 0.0
    reg = model.lam * (float(np.sum(model.X**2)) + float(np.sum(model.Y**2)))
    return data + reg


def full_objective(
    model: FactorModel, matrix: InteractionMatrix, policy: ConfidencePolicy
) -> float:
    """The complete weighted objective the row solves minimize.

    Extends the observed-coordinate loss with the background-weighted zeros
    on every unobserved cell; this is the quantity that decreases monotonically
    across half-sweeps with the direct solver.
    """
    bg = policy.background
    S = model.X @ model.Y.T
    total = bg * float(np.sum(S**2))
    u, i = matrix.coord_arrays()
    scores = S[u, i]
    conf = np.full(u.size, policy.positive_value)
    over = dict(policy.override)
    if over:
        for pos, (uu, ii) in enumerate(zip(u.tolist(), i.tolist())):
            if (uu, ii) in over:
                conf[pos] = over.pop((uu, ii))
    total -= bg * float(np.sum(scores**2))
    total += float(conf @ (1.0 - scores) ** 2)
    # Remaining overrides sit on unobserved cells (preference 0).
    for (uu, ii), val in sorted(over.items()):
        s = float(model.X[uu] @ model.Y[ii])
        total += (val - bg) * s * s
    total += model.lam * (float(np.sum(model.X**2)) + float(np.sum(model.Y**2)))
    return total


# -- model container ---------------------------------------------------------


def save_model(model: FactorModel, path) -> None:
    """Write the versioned model container.

    Layout: one JSON header line (sorted keys) holding shapes and
    hyperparameters, then row-major little-endian float64 bytes of X
    followed by Y.  Byte-for-byte deterministic for identical models.
    """
    header = {
        "format": MODEL_FORMAT,
        "version": MODEL_VERSION,
        "m": model.num_users,
        "n": model.num_items,
        "k": model.k,
        "lam": model.lam,
        "alpha": model.alpha,
        "passes_run": model.passes_run,
        "init_seed": model.init_seed,
        "dtype": "<f8",
    }
    with open(path, "wb") as fh:
        fh.write(json.dumps(header, sort_keys=True, separators=(",", ":")).encode())
        fh.write(b"\n")
        fh.write(np.ascontiguousarray(model.X, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(model.Y, dtype="<f8").tobytes())


def load_model(path) -> FactorModel:
    with open(path, "rb") as fh:
        header = json.loads(fh.readline().decode())
        if header.get("format") != MODEL_FORMAT:
            raise ValueError("not a factor model container")
        if header.get("version") != MODEL_VERSION:
            raise ValueError(f"unsupported container version {header.get('version')}")
        m, n, k = header["m"], header["n"], header["k"]
        X = np.frombuffer(fh.read(m * k * 8), dtype="<f8").reshape(m, k).copy()
        Y = np.frombuffer(fh.read(n * k * 8), dtype="<f8").reshape(n, k).copy()
    return FactorModel(
        X=X,
        Y=Y,
        lam=header["lam"],
        alpha=header["alpha"],
        passes_run=header["passes_run"],
        init_seed=header["init_seed"],
    )
