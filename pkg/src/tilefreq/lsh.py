"""Bucketed random-projection LSH over projected 2D site coordinates.

Each table projects points onto one random unit direction and buckets the
projection by ``floor(dot / bucket_length)``. Queries probe the query's
bucket and one adjacent bucket on each side in every table, then filter the
candidates by exact Euclidean distance, so results never contain false
positives; only recall is approximate.

Self-join cost per table is proportional to the sum over buckets of
``size(b) * (size(b) + size(b + 1))``.
"""

import csv
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np


class LshBuildError(ValueError):
    pass


class SamplingError(RuntimeError):
    pass


@dataclass(frozen=True)
class LshParams:
    bucket_length: float = 20.0
    num_tables: int = 5
    seed: int = 0

    def __post_init__(self):
        if not self.bucket_length > 0:
            raise ValueError("bucket_length must be positive")
        if self.num_tables < 1:
            raise ValueError("num_tables must be at least 1")


@dataclass
class NeighborSet:
    query: object
    neighbors: list = field(default_factory=list)
    short: bool = False

    @property
    def ids(self):
        return [s for s, _ in self.neighbors]


class LshIndex:
    def __init__(self, ids, coords, params):
        self.params = params
        self.ids = ids
        self.coords = coords
        self._pos = {int(s): i for i, s in enumerate(ids)}
        rng = np.random.default_rng(params.seed)
        angles = rng.uniform(0.0, 2.0 * np.pi, params.num_tables)
        self.projections = np.column_stack([np.cos(angles), np.sin(angles)])
        self.keys = self.bucket_keys(coords)
        self._order = np.argsort(self.keys, axis=1, kind="stable")
        self._sorted = np.take_along_axis(self.keys, self._order, axis=1)

    def bucket_keys(self, xy):
        """Bucket of each point in every table, shape ``(num_tables, n)``."""
        xy = np.atleast_2d(np.asarray(xy, dtype=np.float64))
        return np.floor(self.projections @ xy.T / self.params.bucket_length).astype(np.int64)

    @property
    def tables(self):
        """Per table, ``{bucket: [siteId, ...]}`` with ids ascending."""
        out = []
        for t in range(self.params.num_tables):
            table = {}
            for sid, key in zip(self.ids, self.keys[t]):
                table.setdefault(int(key), []).append(int(sid))
            out.append(table)
        return out

    @property
    def points(self):
        return {int(s): tuple(c) for s, c in zip(self.ids, self.coords)}

    def __contains__(self, site_id):
        return int(site_id) in self._pos

    def __len__(self):
        return len(self.ids)

    def coord(self, site_id):
        try:
            return self.coords[self._pos[int(site_id)]]
        except KeyError:
            raise KeyError(f"surveyId {site_id} not indexed") from None

    def _probe(self, xy, span):
        """Point positions in buckets ``key - span .. key + span`` of every table."""
        keys = self.bucket_keys(xy)[:, 0]
        found = []
        exhausted = True
        for t in range(self.params.num_tables):
            lo = np.searchsorted(self._sorted[t], keys[t] - span, side="left")
            hi = np.searchsorted(self._sorted[t], keys[t] + span, side="right")
            exhausted &= lo == 0 and hi == len(self.ids)
            found.append(self._order[t, lo:hi])
        return np.unique(np.concatenate(found)), exhausted

    def _resolve(self, query):
        if np.ndim(query) == 0:
            return self.coord(query), self._pos[int(query)], int(query)
        xy = np.asarray(query, dtype=np.float64)
        return xy, None, tuple(xy)

    def _neighbor_set(self, label, cand, xy, skip, radius=None, k=None):
        if skip is not None:
            cand = cand[cand != skip]
        d = np.hypot(*(self.coords[cand] - xy).T)
        if radius is not None:
            keep = d <= radius
            cand, d = cand[keep], d[keep]
        order = np.lexsort((self.ids[cand], d))
        if k is not None:
            order = order[:k]
        return NeighborSet(label, [(int(self.ids[c]), float(d[o])) for o, c in zip(order, cand[order])])

    def query_radius(self, query, radius):
        """Sites within ``radius`` of a siteId (itself excluded) or of a coordinate pair."""
        if not radius > 0:
            raise ValueError("radius must be positive")
        xy, skip, label = self._resolve(query)
        cand, _ = self._probe(xy, 1)
        return self._neighbor_set(label, cand, xy, skip, radius=radius)

    def query_topk(self, query, k):
        """The ``k`` nearest candidates, widening the probe until ``k`` are found."""
        if k < 1:
            raise ValueError("k must be at least 1")
        xy, skip, label = self._resolve(query)
        available = len(self.ids) - (skip is not None)
        span = 1
        while True:
            cand, exhausted = self._probe(xy, span)
            if len(cand) - (skip is not None and skip in cand) >= k or exhausted:
                break
            span *= 2
        result = self._neighbor_set(label, cand, xy, skip, k=k)
        result.short = available < k
        return result

    def self_join(self, max_dist, chunk_pairs=4_000_000):
        """All site pairs ``(a, b, distance)`` with ``a < b`` and distance <= ``max_dist``."""
        if not max_dist > 0:
            raise ValueError("max_dist must be positive")
        n = len(self.ids)
        found = []
        for t in range(self.params.num_tables):
            keys = self._sorted[t]
            order = self._order[t]
            # partners of sorted position p: positions p+1 .. end of bucket key[p]+1
            stop = np.searchsorted(keys, keys + 1, side="right")
            counts = stop - np.arange(n) - 1
            start = 0
            while start < n:
                csum = np.cumsum(counts[start:])
                end = start + max(1, int(np.searchsorted(csum, chunk_pairs, side="right")))
                c = counts[start:end]
                left = np.repeat(np.arange(start, end), c)
                offset = np.arange(c.sum()) - np.repeat(np.cumsum(c) - c, c)
                right = left + 1 + offset
                a, b = order[left], order[right]
                d = np.hypot(*(self.coords[a] - self.coords[b]).T)
                keep = d <= max_dist
                a, b = a[keep], b[keep]
                found.append(np.minimum(a, b) * n + np.maximum(a, b))
                start = end
        codes = np.unique(np.concatenate(found)) if found else np.zeros(0, dtype=np.int64)
        ia, ib = codes // n, codes % n
        dist = np.hypot(*(self.coords[ia] - self.coords[ib]).T)
        return [(int(self.ids[a]), int(self.ids[b]), float(d)) for a, b, d in zip(ia, ib, dist)]


def build(points, params=None):
    """Index ``{siteId: (easting, northing)}`` (or an iterable of such pairs)."""
    params = params or LshParams()
    items = list(points.items()) if isinstance(points, Mapping) else list(points)
    if not items:
        raise LshBuildError("cannot index an empty point set")
    ids = np.array([int(s) for s, _ in items], dtype=np.int64)
    if len(np.unique(ids)) != len(ids):
        seen, dup = set(), None
        for s in ids:
            if s in seen:
                dup = s
                break
            seen.add(s)
        raise LshBuildError(f"duplicate surveyId {dup}")
    coords = np.array([c for _, c in items], dtype=np.float64).reshape(len(ids), 2)
    if not np.all(np.isfinite(coords)):
        raise LshBuildError("coordinates must be finite")
    order = np.argsort(ids, kind="stable")
    return LshIndex(ids[order], coords[order], params)


def write_self_join(pairs, path):
    with Path(path).open("w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(["siteA", "siteB", "distanceMeters"])
        for a, b, d in sorted(pairs):
            writer.writerow([a, b, repr(d)])


def read_self_join(path):
    with Path(path).open(newline="") as fh:
        reader = csv.DictReader(fh)
        return [(int(r["siteA"]), int(r["siteB"]), float(r["distanceMeters"])) for r in reader]


def rank_species(labels, neighbor_ids):
    """Species ids ordered by descending count over neighbor label rows, ties by id."""
    rows = [labels.row_index(s) for s in neighbor_ids if s in labels._site_pos]
    if not rows:
        return []
    counts = np.asarray(labels.entries[rows].sum(axis=0)).ravel()
    present = np.flatnonzero(counts > 0)
    species = labels.species_ids[present]
    order = np.lexsort((species, -counts[present]))
    return [int(s) for s in species[order]]


def knn_predict(index, labels, site, radius=None, k=None):
    """Rank species at ``site`` by frequency among its radius or top-k neighbors."""
    if (radius is None) == (k is None):
        raise ValueError("give exactly one of radius or k")
    if radius is not None:
        neighbors = index.query_radius(site, radius)
    else:
        neighbors = index.query_topk(site, k)
    return rank_species(labels, neighbors.ids)


def sample_triplets(index, tiles, count, max_dist=100_000.0, batch_size=32, seed=0):
    """Sample ``(anchor, neighbor, distant)`` site triplets for tile2vec training.

    Anchor/neighbor pairs come uniformly from the self-join within
    ``max_dist`` (orientation chosen at random). The distant site is drawn
    from the other anchors of the same batch.
    """
    have = set(tiles)
    pairs = np.array(
        [(a, b) for a, b, _ in index.self_join(max_dist) if a in have and b in have],
        dtype=np.int64,
    ).reshape(-1, 2)
    if len(pairs) == 0:
        raise SamplingError(f"no site pairs within {max_dist} m")
    population = np.array(sorted(int(s) for s in index.ids if int(s) in have))
    if len(population) < 3:
        raise SamplingError("need at least three sites with tiles")
    rng = np.random.default_rng(seed)
    picks = pairs[rng.integers(0, len(pairs), count)]
    swap = rng.uniform(0, 1, count) < 0.5
    picks[swap] = picks[swap][:, ::-1]
    triplets = []
    for start in range(0, count, batch_size):
        batch = picks[start : start + batch_size]
        for anchor, neighbor in batch:
            pool = batch[:, 0][(batch[:, 0] != anchor) & (batch[:, 0] != neighbor)]
            if len(pool) == 0:
                pool = population[(population != anchor) & (population != neighbor)]
            triplets.append((int(anchor), int(neighbor), int(pool[rng.integers(0, len(pool))])))
    return triplets

