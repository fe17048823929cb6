"""Dataset ingestion: rating file parsing, binarization, splits, and synthetic instances.

Rating files are parsed into dense 0-based user/item indices; the original id
vocabularies are returned so callers can persist them as sidecar mappings.
All sampling here is a pure function of (input, seed).
"""

from __future__ import annotations

import dataclasses
from typing import Iterable, Sequence

import numpy as np

Coord = tuple[int, int]

_FORMATS = {
    "tab100k": "\t",
    "colon1m": "::",
}


class ParseError(ValueError):
    """Raised when a rating file does not match the declared format."""


@dataclasses.dataclass(frozen=True)
class RatingRecord:
    user_id: int
    item_id: int
    rating: float
    timestamp: int = 0


class InteractionMatrix:
    """Sparse binary preference matrix over dense user/item indices.

    Stored coordinates are the explicitly observed positives (preference 1);
    every other cell implicitly reads preference 0.  Coordinates are kept in
    lexicographic order so that all downstream iteration is deterministic.
    """

    def __init__(self, num_users: int, num_items: int, coords: Iterable[Coord]):
        if num_users < 1 or num_items < 1:
            raise ValueError("matrix dimensions must be positive")
        self.num_users = int(num_users)
        self.num_items = int(num_items)

        pairs = np.asarray(list(coords), dtype=np.int64)
        if pairs.size == 0:
            pairs = pairs.reshape(0, 2)
        if pairs.ndim != 2 or pairs.shape[1] != 2:
            raise ValueError("coords must be (u, i) pairs")
        u, i = pairs[:, 0], pairs[:, 1]
        if pairs.shape[0]:
            if u.min() < 0 or u.max() >= num_users or i.min() < 0 or i.max() >= num_items:
                raise ValueError("coordinate outside [0,m)x[0,n)")

        keys = u * np.int64(self.num_items) + i
        order = np.argsort(keys, kind="stable")
        keys = keys[order]
        if keys.size and np.any(np.diff(keys) == 0):
            raise ValueError("duplicate coordinates")
        self._keys = keys
        self._u = u[order]
        self._i = i[order]

        # CSR-style index over users (coords already sorted by user).
        counts = np.bincount(self._u, minlength=self.num_users)
        self._user_ptr = np.concatenate(([0], np.cumsum(counts)))
        # CSC-style index over items.
        by_item = np.argsort(self._i * np.int64(self.num_users) + self._u, kind="stable")
        self._iu = self._u[by_item]
        self._ii = self._i[by_item]
        icounts = np.bincount(self._ii, minlength=self.num_items)
        self._item_ptr = np.concatenate(([0], np.cumsum(icounts)))

        self._observed_cache: frozenset[Coord] | None = None

    @property
    def n_observed(self) -> int:
        return int(self._keys.size)

    @property
    def observed(self) -> frozenset[Coord]:
        """Observed coordinate set as python tuples (materialized lazily)."""
        if self._observed_cache is None:
            self._observed_cache = frozenset(
                (int(a), int(b)) for a, b in zip(self._u, self._i)
            )
        return self._observed_cache

    def coord_arrays(self) -> tuple[np.ndarray, np.ndarray]:
        """Observed coordinates as parallel (users, items) arrays, lexicographic order."""
        return self._u, self._i

    def user_items(self, u: int) -> np.ndarray:
        """Item indices observed for user u, ascending."""
        lo, hi = self._user_ptr[u], self._user_ptr[u + 1]
        return self._i[lo:hi]

    def item_users(self, i: int) -> np.ndarray:
        """User indices observed for item i, ascending."""
        lo, hi = self._item_ptr[i], self._item_ptr[i + 1]
        return self._iu[lo:hi]

    def contains(self, coords: Sequence[Coord]) -> np.ndarray:
        """Vectorized membership test for (u, i) pairs."""
        pairs = np.asarray(coords, dtype=np.int64).reshape(-1, 2)
        keys = pairs[:, 0] * np.int64(self.num_items) + pairs[:, 1]
        pos = np.searchsorted(self._keys, keys)
        pos = np.minimum(pos, max(self._keys.size - 1, 0))
        if self._keys.size == 0:
            return np.zeros(len(keys), dtype=bool)
        return self._keys[pos] == keys

    def without(self, coords: Sequence[Coord]) -> "InteractionMatrix":
        """Copy with the given observed coordinates dropped."""
        pairs = np.asarray(list(coords), dtype=np.int64).reshape(-1, 2)
        if pairs.shape[0] == 0:
            return InteractionMatrix(self.num_users, self.num_items, zip(self._u, self._i))
        if not self.contains(pairs).all():
            raise ValueError("coordinate not observed")
        drop = set(map(tuple, pairs.tolist()))
        kept = [(int(a), int(b)) for a, b in zip(self._u, self._i) if (a, b) not in drop]
        return InteractionMatrix(self.num_users, self.num_items, kept)

    def __eq__(self, other) -> bool:
        if not isinstance(other, InteractionMatrix):
            return NotImplemented
        return (
            self.num_users == other.num_users
            and self.num_items == other.num_items
            and np.array_equal(self._keys, other._keys)
        )

    def __repr__(self) -> str:
        return (
            f"InteractionMatrix({self.num_users}x{self.num_items}, "
            f"{self.n_observed} observed)"
        )


@dataclasses.dataclass(frozen=True)
class DataSplit:
    train: InteractionMatrix
    test_positives: tuple[Coord, ...]
    seed: int
    test_fraction: float


@dataclasses.dataclass(frozen=True)
class RemovalSet:
    coords: tuple[Coord, ...]
    fraction: float
    seed: int

    def __len__(self) -> int:
        return len(self.coords)

    def as_set(self) -> frozenset[Coord]:
        return frozenset(self.coords)


@dataclasses.dataclass(frozen=True)
class SyntheticInstance:
    ground_truth: np.ndarray
    positives: tuple[Coord, ...]
    observed: InteractionMatrix
    rank: int
    density: float
    seed: int


def parse_movielens(path, fmt: str):
    """Parse a MovieLens-style rating file.

    ``tab100k`` lines are ``user\\titem\\trating\\ttimestamp``; ``colon1m``
    lines are ``user::item::rating::timestamp``.  User and item ids are
    remapped to dense 0-based indices (ascending original id).

    Returns ``(records, user_ids, item_ids)`` where ``user_ids[k]`` is the
    original id mapped to dense index ``k``; persist those as the sidecar
    id maps.
    """
    if fmt not in _FORMATS:
        raise ValueError(f"unknown format {fmt!r} (expected one of {sorted(_FORMATS)})")
    sep = _FORMATS[fmt]

    raw = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.rstrip("\n").rstrip("\r")
            if not line:
                continue
            parts = line.split(sep)
            if len(parts) != 4:
                raise ParseError(f"line {lineno}: expected 4 {fmt} fields, got {len(parts)}")
            try:
                raw.append((int(parts[0]), int(parts[1]), float(parts[2]), int(parts[3])))
            except ValueError as exc:
                raise ParseError(f"line {lineno}: {exc}") from exc
    if not raw:
        raise ParseError("empty rating file")

    user_ids = sorted({r[0] for r in raw})
    item_ids = sorted({r[1] for r in raw})
    umap = {orig: k for k, orig in enumerate(user_ids)}
    imap = {orig: k for k, orig in enumerate(item_ids)}
    records = [
        RatingRecord(umap[u], imap[i], rating, ts) for u, i, rating, ts in raw
    ]
    return records, user_ids, item_ids


def write_id_map(path, ids: Sequence[int]) -> None:
    """Write a two-column sidecar (original id, dense index)."""
    with open(path, "w", encoding="utf-8") as fh:
        for dense, orig in enumerate(ids):
            fh.write(f"{orig}\t{dense}\n")


def binarize(records: Sequence[RatingRecord], threshold: float) -> InteractionMatrix:
    """Binarize ratings into observed positives.

    Duplicate (u, i) pairs collapse to their maximum rating before the
    threshold is applied; ratings below the threshold are dropped entirely
    (treated as unobserved, not as explicit zeros).
    """
    if not records:
        raise ValueError("no records to binarize")
    num_users = max(r.user_id for r in records) + 1
    num_items = max(r.item_id for r in records) + 1

    best: dict[Coord, float] = {}
    for r in records:
        c = (r.user_id, r.item_id)
        if c not in best or r.rating > best[c]:
            best[c] = r.rating
    coords = [c for c, rating in best.items() if rating >= threshold]
    if not coords:
        raise ValueError("empty interaction matrix: all ratings below threshold")
    return InteractionMatrix(num_users, num_items, coords)


def split_holdout(matrix: InteractionMatrix, test_fraction: float, seed: int) -> DataSplit:
    """Uniform holdout split of the observed positives.

    Test size is floor(test_fraction * n_observed), clamped to at least 1.
    """
    if not (0.0 < test_fraction < 1.0):
        raise ValueError("test_fraction must be in (0, 1)")
    if matrix.n_observed < 2:
        raise ValueError("need at least 2 observations to split")

    n_test = max(1, int(test_fraction * matrix.n_observed))
    rng = np.random.default_rng(seed)
    idx = rng.choice(matrix.n_observed, size=n_test, replace=False)
    mask = np.zeros(matrix.n_observed, dtype=bool)
    mask[idx] = True
    u, i = matrix.coord_arrays()
    test = tuple(sorted((int(a), int(b)) for a, b in zip(u[mask], i[mask])))
    train = InteractionMatrix(
        matrix.num_users, matrix.num_items, zip(u[~mask], i[~mask])
    )
    return DataSplit(train=train, test_positives=test, seed=seed, test_fraction=test_fraction)


def sample_removal(train: InteractionMatrix, fraction: float, seed: int) -> RemovalSet:
    """Sample floor(fraction * n_observed) coordinates uniformly without replacement."""
    if not (0.0 <= fraction <= 1.0):
        raise ValueError("removal fraction must be in [0, 1]")
    size = int(fraction * train.n_observed)
    rng = np.random.default_rng(seed)
    idx = rng.choice(train.n_observed, size=size, replace=False)
    u, i = train.coord_arrays()
    coords = tuple(sorted((int(u[j]), int(i[j])) for j in idx))
    return RemovalSet(coords=coords, fraction=fraction, seed=seed)


def generate_synthetic(
    m: int,
    n: int,
    r: int,
    density: float,
    seed: int,
    observed_fraction: float = 1.0,
) -> SyntheticInstance:
    """Build a noiseless low-rank ground truth with binary positives.

    The ground truth is a product of random m x r and n x r factors (rank r
    almost surely); the top floor(density * m * n) cells by score are the
    positives, and the observed sample is drawn uniformly from them.
    """
    if not (1 <= r <= min(m, n)):
        raise ValueError("rank must satisfy 1 <= r <= min(m, n)")
    if not (0.0 < density <= 1.0):
        raise ValueError("density must be in (0, 1]")
    if not (0.0 < observed_fraction <= 1.0):
        raise ValueError("observed_fraction must be in (0, 1]")

    rng = np.random.default_rng(seed)
    left = rng.normal(size=(m, r))
    right = rng.normal(size=(n, r))
    truth = left @ right.T

    n_pos = int(density * m * n)
    if n_pos < 1:
        raise ValueError("density produces zero positives")
    flat = truth.ravel()
    top = np.argpartition(flat, flat.size - n_pos)[flat.size - n_pos:]
    top.sort()
    positives = tuple((int(j // n), int(j % n)) for j in top)

    n_obs = max(1, int(observed_fraction * n_pos))
    obs_idx = rng.choice(n_pos, size=n_obs, replace=False)
    observed = InteractionMatrix(m, n, (positives[j] for j in sorted(obs_idx)))
    return SyntheticInstance(
        ground_truth=truth,
        positives=positives,
        observed=observed,
        rank=r,
        density=density,
        seed=seed,
    )
