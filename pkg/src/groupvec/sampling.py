"""Centroid maintenance, within-group nearest neighbors, and batch assembly.

The sampler owns the slow-moving state of a training run: a bank of
cluster centroids over teacher embeddings and a per-object neighbor
table.  Both are rebuilt on a fixed period; batch assembly only reads
them.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .backends import assign_nearest, cross_sqdist
from .data import ScaleGroups
from .encoder import TeacherNet


@dataclass(frozen=True)
class CentroidBank:
    centroids: np.ndarray  # (L, width)
    last_refresh_step: int

    def __post_init__(self):
        c = self.centroids
        if c.ndim != 2 or c.shape[0] < 1:
            raise ValueError("centroid bank needs at least one centroid row")
        if not np.all(np.isfinite(c)):
            raise ValueError("centroids must be finite")


@dataclass(frozen=True)
class NeighborTable:
    neighbors: dict[int, np.ndarray]  # object_id -> neighbor ids, nearest first
    last_refresh_step: int

    def of(self, object_id: int) -> np.ndarray:
        return self.neighbors[object_id]


@dataclass(frozen=True)
class Batch:
    """Per-group object draws plus one shared block appended to every group."""

    group_ids: tuple[np.ndarray, ...]
    shared_ids: np.ndarray

    def block_ids(self, m: int) -> np.ndarray:
        return np.concatenate([self.group_ids[m], self.shared_ids])

    def total_rows(self) -> int:
        return sum(len(g) + len(self.shared_ids) for g in self.group_ids)


def _farthest_point_init(f: np.ndarray, n_clusters: int, rng: np.random.Generator) -> np.ndarray:
    n = f.shape[0]
    chosen = [int(rng.integers(n))]
    mind = cross_sqdist(f, f[chosen[-1]][None, :]).ravel()
    while len(chosen) < n_clusters:
        # ties go to the lowest index via argmax on the raw array
        nxt = int(np.argmax(mind))
        chosen.append(nxt)
        mind = np.minimum(mind, cross_sqdist(f, f[nxt][None, :]).ravel())
    return f[np.array(chosen)].copy()


def _lloyd(f: np.ndarray, n_clusters: int, iters: int, rng: np.random.Generator):
    """Lloyd iterations with farthest-point seeding.

    Returns (centroids, inertia_trace); the trace is evaluated against the
    centroids at the top of each iteration and is non-increasing.
    """
    cents = _farthest_point_init(f, n_clusters, rng)
    trace: list[float] = []
    prev_assign = None
    n = f.shape[0]
    for _ in range(iters):
        assign, own = assign_nearest(f, cents)
        own = own.copy()
        trace.append(float(own.sum()))
        counts = np.bincount(assign, minlength=n_clusters)
        pending = list(np.flatnonzero(counts == 0))
        steals = 0
        while pending and steals < n:
            empty = pending.pop(0)
            j = int(np.argmax(own))
            old = int(assign[j])
            assign[j] = empty
            own[j] = 0.0
            counts[empty] += 1
            counts[old] -= 1
            steals += 1
            if counts[old] == 0:  # stealing may cascade
                pending.append(old)
        if prev_assign is not None and np.array_equal(assign, prev_assign):
            break
        sums = np.zeros_like(cents)
        np.add.at(sums, assign, f)
        filled = np.maximum(np.bincount(assign, minlength=n_clusters), 1)
        cents = sums / filled[:, None]
        prev_assign = assign
    return cents, trace


def kmeans(f: np.ndarray, n_clusters: int, iters: int = 20, seed: int = 0, step: int = 0) -> CentroidBank:
    """Cluster rows of ``f`` into ``n_clusters`` centroids, deterministically."""
    if n_clusters < 1:
        raise ValueError("cluster count must be positive")
    f = np.asarray(f, dtype=np.float64)
    if f.ndim != 2 or f.shape[0] < n_clusters:
        raise ValueError("need at least as many rows as clusters")
    cents, _ = _lloyd(f, n_clusters, iters, np.random.default_rng(seed))
    return CentroidBank(centroids=cents, last_refresh_step=step)


def knn_table(
    f: np.ndarray,
    object_ids: np.ndarray,
    group_of: np.ndarray,
    k_neighbors: int = 5,
    step: int = 0,
) -> NeighborTable:
    """Within-group nearest neighbors by Euclidean distance.

    Self is excluded; exact distance ties break toward the smaller object
    id.  Each object gets min(k_neighbors, group size - 1) neighbors.
    """
    f = np.asarray(f, dtype=np.float64)
    object_ids = np.asarray(object_ids, dtype=np.int64)
    group_of = np.asarray(group_of)
    if not (f.shape[0] == object_ids.size == group_of.size):
        raise ValueError("rows, object ids and group assignment must align")
    neighbors: dict[int, np.ndarray] = {}
    for g in np.unique(group_of):
        rows = np.flatnonzero(group_of == g)
        if rows.size < 2:
            raise ValueError(f"group {g} has fewer than two members")
        sub = f[rows]
        ids = object_ids[rows]
        take = min(k_neighbors, rows.size - 1)
        for local, oid in enumerate(ids):
            d2 = ((sub - sub[local]) ** 2).sum(axis=1)
            order = np.lexsort((ids, d2))
            picked = [int(ids[j]) for j in order if j != local][:take]
            neighbors[int(oid)] = np.array(picked, dtype=np.int64)
    return NeighborTable(neighbors=neighbors, last_refresh_step=step)


def assemble_batch(
    groups: ScaleGroups,
    table: NeighborTable,
    rng: np.random.Generator,
    budget: int = 120,
    n_shared: int = 6,
) -> Batch:
    """Draw one multi-group batch of object ids.

    Per group: anchors are drawn uniformly without replacement and each
    anchor brings its stored neighbors; the deduplicated stream is cut at
    the per-group quota (budget - k*n_shared) // k.  The shared block is
    drawn from the whole table afterwards and appended to every group.
    """
    k = groups.k
    if n_shared < 0:
        raise ValueError("n_shared must be non-negative")
    quota = (budget - k * n_shared) // k
    if quota < 1:
        raise ValueError(
            f"per-group quota {quota} unattainable: budget {budget}, "
            f"{k} groups, {n_shared} shared"
        )
    blocks: list[np.ndarray] = []
    for m in range(k):
        ids = groups.group_object_ids(m)
        target = min(quota, ids.size)
        picked: list[int] = []
        seen: set[int] = set()
        for anchor in rng.permutation(ids):
            if len(picked) >= target:
                break
            for oid in (int(anchor), *map(int, table.of(int(anchor)))):
                if oid not in seen:
                    seen.add(oid)
                    picked.append(oid)
                    if len(picked) == target:
                        break
        blocks.append(np.array(picked, dtype=np.int64))
    all_ids = groups.table.ids
    if n_shared > all_ids.size:
        raise ValueError("n_shared exceeds the table size")
    shared = rng.choice(all_ids, size=n_shared, replace=False).astype(np.int64)
    return Batch(group_ids=tuple(blocks), shared_ids=shared)


def refresh(
    step: int,
    period: int,
    teacher: TeacherNet,
    groups: ScaleGroups,
    provider,
    bank: CentroidBank | None,
    table: NeighborTable | None,
    n_clusters: int = 100,
    k_neighbors: int = 5,
    kmeans_iters: int = 20,
    seed: int = 0,
):
    """Rebuild the centroid bank and neighbor table when the period elapses.

    Fires when ``step`` is a multiple of ``period`` (including step 0, the
    initial build); otherwise returns the inputs untouched.  Neighbors come
    from the teacher's wide embedding; centroids cluster the teacher's
    per-group head embeddings of every object, so they live in the same
    space as the similarity rows computed during training.
    """
    if step % period != 0:
        return bank, table
    tbl = groups.table
    feats = provider.base_features(tbl.ids)
    wide = teacher.embed(feats)
    table = knn_table(wide, tbl.ids, groups.assignment, k_neighbors, step)
    head = np.empty((len(tbl.ids), teacher.cfg.student_dim), dtype=np.float64)
    for m in range(groups.k):
        rows = groups.group_rows(m)
        if rows.size:
            head[rows] = teacher.head_embed(feats[rows], m)
    bank = kmeans(head, n_clusters, kmeans_iters, seed=seed + step, step=step)
    return bank, table
