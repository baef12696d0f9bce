"""Survey metadata, label matrices, raster grid files and synthetic datasets."""

import csv
import math
import struct
from collections.abc import Mapping
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional

import numpy as np
import scipy.sparse as sp

from .projection import project_to_laea, unproject_from_laea

METADATA_COLUMNS = (
    "dataset",
    "surveyId",
    "lat_proj",
    "lon_proj",
    "lat",
    "lon",
    "year",
    "geoUncertaintyInM",
    "speciesId",
)
DATASET_TAGS = ("presence-only", "presence-absent-train", "presence-absent-test")
_INT_FIELDS = {"surveyId", "year"}
_FLOAT_FIELDS = {"lat_proj", "lon_proj", "lat", "lon", "geoUncertaintyInM"}

GRID_MAGIC = b"TFG1"


class SchemaError(ValueError):
    pass


class RowError(ValueError):
    def __init__(self, line, message):
        super().__init__(f"line {line}: {message}")
        self.line = line


@dataclass
class SurveyRecord:
    dataset: str
    surveyId: int
    lat: Optional[float]
    lon: Optional[float]
    lat_proj: Optional[float] = None
    lon_proj: Optional[float] = None
    year: Optional[int] = None
    geoUncertaintyInM: Optional[float] = None
    speciesId: Optional[int] = None

    @property
    def easting(self):
        return self.lon_proj

    @property
    def northing(self):
        return self.lat_proj


def _parse_cell(name, raw, line):
    raw = raw.strip()
    if raw == "":
        return None
    try:
        if name in _INT_FIELDS:
            return int(raw)
        if name == "speciesId":
            # the upstream schema stores species as double
            value = float(raw)
            if not value.is_integer():
                raise ValueError(raw)
            return int(value)
        return float(raw)
    except ValueError:
        raise RowError(line, f"cannot parse {name}={raw!r}") from None


def parse_metadata(csv_path, check_projection=True):
    """Read a metadata CSV into SurveyRecords, preserving row order.

    Empty numeric cells become None. When both raw and projected coordinates
    are present they must agree with :func:`project_to_laea` within 1 m.
    """
    path = Path(csv_path)
    records = []
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise SchemaError(f"{path}: missing header") from None
        for col in METADATA_COLUMNS:
            if col not in header:
                raise SchemaError(f"{path}: missing column {col!r}")
        extra = [h for h in header if h not in METADATA_COLUMNS]
        if extra:
            raise SchemaError(f"{path}: unexpected column {extra[0]!r}")
        pos = {name: header.index(name) for name in METADATA_COLUMNS}
        for line, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise RowError(line, f"expected {len(header)} fields, got {len(row)}")
            dataset = row[pos["dataset"]].strip()
            if dataset not in DATASET_TAGS:
                raise RowError(line, f"unknown dataset tag {dataset!r}")
            values = {n: _parse_cell(n, row[pos[n]], line) for n in METADATA_COLUMNS[1:]}
            if values["surveyId"] is None:
                raise RowError(line, "surveyId is required")
            rec = SurveyRecord(dataset=dataset, **values)
            _validate_record(rec, line, check_projection)
            records.append(rec)
    return records


def _validate_record(rec, line, check_projection):
    if rec.lat is not None and not -90.0 <= rec.lat <= 90.0:
        raise RowError(line, f"lat {rec.lat} out of range")
    if rec.lon is not None and not -180.0 <= rec.lon <= 180.0:
        raise RowError(line, f"lon {rec.lon} out of range")
    if rec.geoUncertaintyInM is not None and rec.geoUncertaintyInM < 0:
        raise RowError(line, "geoUncertaintyInM must be non-negative")
    if rec.dataset == "presence-absent-test" and rec.speciesId is not None:
        raise RowError(line, "test rows must not carry speciesId")
    if (
        check_projection
        and None not in (rec.lat, rec.lon, rec.lat_proj, rec.lon_proj)
    ):
        easting, northing = project_to_laea(rec.lat, rec.lon)
        if abs(easting - rec.lon_proj) > 1.0 or abs(northing - rec.lat_proj) > 1.0:
            raise RowError(line, "projected coordinates disagree with EPSG:3035 by > 1 m")


def _fmt(value):
    if value is None:
        return ""
    if isinstance(value, float):
        return repr(value)
    return str(value)


def write_metadata(records, csv_path):
    with Path(csv_path).open("w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(METADATA_COLUMNS)
        for rec in records:
            writer.writerow([_fmt(getattr(rec, c)) for c in METADATA_COLUMNS])


def fill_projection(records):
    """Return copies of ``records`` with lat_proj/lon_proj computed from lat/lon."""
    out = []
    for rec in records:
        if rec.lat is None or rec.lon is None:
            out.append(rec)
            continue
        easting, northing = project_to_laea(rec.lat, rec.lon)
        out.append(
            SurveyRecord(**{**rec.__dict__, "lon_proj": easting, "lat_proj": northing})
        )
    return out


def site_coordinates(records):
    """Map surveyId to projected ``(easting, northing)`` from the first row of each site."""
    coords = {}
    for rec in records:
        if rec.surveyId in coords or rec.lon_proj is None or rec.lat_proj is None:
            continue
        coords[rec.surveyId] = (rec.lon_proj, rec.lat_proj)
    return coords


@dataclass
class LabelMatrix:
    """Binary site x species incidence with sorted id axes."""

    site_ids: np.ndarray
    species_ids: np.ndarray
    entries: sp.csr_matrix

    def __post_init__(self):
        self.site_ids = np.asarray(self.site_ids, dtype=np.int64)
        self.species_ids = np.asarray(self.species_ids, dtype=np.int64)
        self._site_pos = {int(s): i for i, s in enumerate(self.site_ids)}

    @property
    def nnz(self):
        return int(self.entries.nnz)

    def row_index(self, site_id):
        try:
            return self._site_pos[int(site_id)]
        except KeyError:
            raise KeyError(f"unknown surveyId {site_id}") from None

    def labels(self, site_id):
        """Sorted species ids present at ``site_id``."""
        i = self.row_index(site_id)
        cols = self.entries.indices[self.entries.indptr[i] : self.entries.indptr[i + 1]]
        return self.species_ids[np.sort(cols)]

    def dense(self, site_ids=None):
        mat = self.entries
        if site_ids is not None:
            mat = mat[[self.row_index(s) for s in site_ids]]
        return np.asarray(mat.todense(), dtype=np.float64)

    def to_sets(self):
        return {int(s): set(int(x) for x in self.labels(s)) for s in self.site_ids}

    def to_records(self):
        """Serialize as metadata rows; unlabeled sites become test rows."""
        rows = []
        for s in self.site_ids:
            labels = self.labels(s)
            if len(labels) == 0:
                rows.append(SurveyRecord("presence-absent-test", int(s), None, None))
            for sid in labels:
                rows.append(
                    SurveyRecord("presence-absent-train", int(s), None, None, speciesId=int(sid))
                )
        return rows

    def __eq__(self, other):
        if not isinstance(other, LabelMatrix):
            return NotImplemented
        return (
            np.array_equal(self.site_ids, other.site_ids)
            and np.array_equal(self.species_ids, other.species_ids)
            and (self.entries != other.entries).nnz == 0
        )


def build_label_matrix(records, species_ids=None):
    """Deduplicated union of occurrence rows, one row per site."""
    if not records:
        raise ValueError("records must be non-empty")
    site_ids = np.array(sorted({r.surveyId for r in records}), dtype=np.int64)
    pairs = {(r.surveyId, r.speciesId) for r in records if r.speciesId is not None}
    if species_ids is None:
        species_ids = sorted({s for _, s in pairs})
    species_ids = np.asarray(species_ids, dtype=np.int64)
    site_pos = {int(s): i for i, s in enumerate(site_ids)}
    sp_pos = {int(s): j for j, s in enumerate(species_ids)}
    pairs = sorted(p for p in pairs if p[1] in sp_pos)
    rows = np.array([site_pos[a] for a, _ in pairs], dtype=np.int64)
    cols = np.array([sp_pos[b] for _, b in pairs], dtype=np.int64)
    entries = sp.csr_matrix(
        (np.ones(len(pairs), dtype=np.int8), (rows, cols)),
        shape=(len(site_ids), len(species_ids)),
    )
    entries.sort_indices()
    return LabelMatrix(site_ids, species_ids, entries)


def aggregate_species_in_radius(matrix, index, site_id, radius):
    """Binary label vector: union of label rows of every site within ``radius``."""
    own = np.asarray(matrix.entries[matrix.row_index(site_id)].todense()).ravel() > 0
    if site_id not in index:
        raise KeyError(f"surveyId {site_id} not indexed")
    if radius <= 0:
        return own.astype(np.int8)
    for neighbor, _ in index.query_radius(site_id, radius).neighbors:
        if neighbor in matrix._site_pos:
            own |= np.asarray(matrix.entries[matrix.row_index(neighbor)].todense()).ravel() > 0
    return own.astype(np.int8)


# ---------------------------------------------------------------- raster grids


def write_grid(path, values):
    """Write a channels x height x width float64 grid in the TFG1 format."""
    values = np.asarray(values, dtype="<f8")
    if values.ndim != 3:
        raise ValueError("grid must be channels x height x width")
    with Path(path).open("wb") as fh:
        fh.write(GRID_MAGIC)
        fh.write(struct.pack("<3I", *values.shape))
        fh.write(np.ascontiguousarray(values).tobytes())


def read_grid(path):
    data = Path(path).read_bytes()
    if data[:4] != GRID_MAGIC:
        raise ValueError(f"{path}: bad magic {data[:4]!r}")
    c, h, w = struct.unpack_from("<3I", data, 4)
    expected = 16 + 8 * c * h * w
    if len(data) != expected:
        raise ValueError(f"{path}: expected {expected} bytes, found {len(data)}")
    return np.frombuffer(data, dtype="<f8", offset=16).reshape(c, h, w).astype(np.float64)


# ---------------------------------------------------------------- synthetic data


@dataclass(frozen=True)
class SynthConfig:
    numSites: int = 2000
    numSpecies: int = 50
    numClusters: int = 10
    clusterRadius: float = 10_000.0
    tileSize: int = 64
    channels: int = 4
    seed: int = 0
    # extent of the square region holding cluster centroids
    regionSize: float = 250_000.0
    # number of species each cluster draws its labels from
    poolSize: int = 10
    testFraction: float = 0.1

    def __post_init__(self):
        for name in ("numSites", "numSpecies", "numClusters", "tileSize", "channels", "poolSize"):
            if getattr(self, name) <= 0:
                raise ValueError(f"{name} must be positive")
        if self.tileSize & (self.tileSize - 1):
            raise ValueError("tileSize must be a power of two")
        if self.clusterRadius <= 0 or self.regionSize <= 0:
            raise ValueError("clusterRadius and regionSize must be positive")
        if self.poolSize > self.numSpecies:
            raise ValueError("poolSize cannot exceed numSpecies")
        if not 0.0 <= self.testFraction < 1.0:
            raise ValueError("testFraction must lie in [0, 1)")


# region center for synthetic sites (southern France, inside the GeoJSON box)
_SYNTH_CENTER = project_to_laea(45.0, 3.0)
_TILE_COMPONENTS = 3


def _rng(seed, *stream):
    # counter-based stream per (seed, purpose, index) so generation can run in any order
    return np.random.Generator(np.random.Philox(np.random.SeedSequence([seed, *stream])))


@dataclass
class SynthDataset:
    config: SynthConfig
    records: list
    labels: LabelMatrix
    tiles: "SyntheticTiles"
    cluster_of: dict = field(default_factory=dict)
    truth: Optional[LabelMatrix] = None
    centroids: Optional[np.ndarray] = None


class SyntheticTiles(Mapping):
    """Lazily generated tiles keyed by surveyId; deterministic per site."""

    def __init__(self, config, site_ids, site_cluster, site_labels, cluster_params, species_sig):
        self.config = config
        self._ids = list(site_ids)
        self._pos = {s: i for i, s in enumerate(self._ids)}
        self._cluster = site_cluster
        self._labels = site_labels
        self._cluster_params = cluster_params
        self._species_sig = species_sig

    def __getitem__(self, site_id):
        i = self._pos[site_id]
        cfg = self.config
        freqs, phases = self._cluster_params[self._cluster[i]]
        labels = self._labels[i]
        rng = _rng(cfg.seed, 3, i)
        if len(labels):
            amps = self._species_sig[labels].mean(axis=0)
        else:
            amps = np.zeros((cfg.channels, _TILE_COMPONENTS))
        amps = amps + 0.1 * rng.standard_normal(amps.shape)
        jitter = 0.2 * rng.standard_normal(phases.shape)
        t = (np.arange(cfg.tileSize) + 0.5) / cfg.tileSize
        yy, xx = np.meshgrid(t, t, indexing="ij")
        tile = np.zeros((cfg.channels, cfg.tileSize, cfg.tileSize))
        for c in range(cfg.channels):
            for j in range(_TILE_COMPONENTS):
                fy, fx = freqs[c, j]
                tile[c] += amps[c, j] * np.cos(2 * np.pi * (fy * yy + fx * xx) + phases[c, j] + jitter[c, j])
        return tile

    def __iter__(self):
        return iter(self._ids)

    def __len__(self):
        return len(self._ids)


def synth_generate(config):
    """Clustered synthetic sites with spatially autocorrelated labels and smooth tiles.

    Sites are scattered uniformly in discs around cluster centroids. Each
    cluster owns a pool of species, each placed at a random spot in the disc;
    a site carries a pool species with probability decaying with distance to
    that spot. A fraction of sites become test rows (labels kept in ``truth``).
    Tiles are low-frequency cosine mixtures: frequencies and phases come from
    the cluster, amplitudes from the mean signature of the site's species.
    """
    cfg = config
    rng = _rng(cfg.seed, 0)
    cx, cy = _SYNTH_CENTER
    half = cfg.regionSize / 2
    centroids = np.column_stack(
        [cx + rng.uniform(-half, half, cfg.numClusters), cy + rng.uniform(-half, half, cfg.numClusters)]
    )
    pools = [rng.choice(cfg.numSpecies, size=cfg.poolSize, replace=False) for _ in range(cfg.numClusters)]
    spot_r = cfg.clusterRadius * np.sqrt(rng.uniform(0, 1, (cfg.numClusters, cfg.poolSize)))
    spot_t = rng.uniform(0, 2 * np.pi, (cfg.numClusters, cfg.poolSize))
    spots = centroids[:, None, :] + np.stack([spot_r * np.cos(spot_t), spot_r * np.sin(spot_t)], -1)
    cluster_params = []
    for _ in range(cfg.numClusters):
        freqs = rng.uniform(0.0, 2.0, (cfg.channels, _TILE_COMPONENTS, 2))
        phases = rng.uniform(0, 2 * np.pi, (cfg.channels, _TILE_COMPONENTS))
        cluster_params.append((freqs, phases))
    species_sig = rng.uniform(0.2, 2.0, (cfg.numSpecies, cfg.channels, _TILE_COMPONENTS))

    site_rng = _rng(cfg.seed, 1)
    cluster = site_rng.integers(0, cfg.numClusters, cfg.numSites)
    r = cfg.clusterRadius * np.sqrt(site_rng.uniform(0, 1, cfg.numSites))
    theta = site_rng.uniform(0, 2 * np.pi, cfg.numSites)
    xy = centroids[cluster] + np.column_stack([r * np.cos(theta), r * np.sin(theta)])
    years = site_rng.integers(2017, 2022, cfg.numSites)
    uncertainty = np.round(site_rng.exponential(50.0, cfg.numSites), 1)
    is_test = site_rng.uniform(0, 1, cfg.numSites) < cfg.testFraction

    scale = 0.6 * cfg.clusterRadius
    site_ids = np.arange(1, cfg.numSites + 1) * 10 + 3
    site_labels = []
    for i in range(cfg.numSites):
        k = cluster[i]
        d2 = np.sum((spots[k] - xy[i]) ** 2, axis=1)
        prob = 0.9 * np.exp(-d2 / (2 * scale**2))
        present = site_rng.uniform(0, 1, cfg.poolSize) < prob
        chosen = pools[k][present]
        if len(chosen) == 0:
            chosen = pools[k][[int(np.argmin(d2))]]
        noise = np.flatnonzero(site_rng.uniform(0, 1, cfg.numSpecies) < 0.01)
        site_labels.append(np.unique(np.concatenate([chosen, noise])).astype(np.int64))

    lat, lon = unproject_from_laea(xy[:, 0], xy[:, 1])
    records, truth_records = [], []
    for i, sid in enumerate(site_ids):
        common = dict(
            surveyId=int(sid),
            lat=float(lat[i]),
            lon=float(lon[i]),
            year=int(years[i]),
            geoUncertaintyInM=float(uncertainty[i]) if i % 17 else None,
        )
        if is_test[i]:
            records.append(SurveyRecord("presence-absent-test", **common))
        for s in site_labels[i]:
            row = SurveyRecord("presence-absent-train", speciesId=int(s) + 1, **common)
            (truth_records if is_test[i] else records).append(row)
    records = fill_projection(records)
    species_ids = np.arange(1, cfg.numSpecies + 1)
    labels = build_label_matrix(records, species_ids=species_ids)
    truth = build_label_matrix(truth_records, species_ids=species_ids) if truth_records else None
    tiles = SyntheticTiles(cfg, site_ids.tolist(), cluster, site_labels, cluster_params, species_sig)
    cluster_of = {int(s): int(c) for s, c in zip(site_ids, cluster)}
    return SynthDataset(cfg, records, labels, tiles, cluster_of, truth, centroids)


def jaccard(a, b):
    a, b = set(a), set(b)
    if not a and not b:
        return 1.0
    return len(a & b) / len(a | b)


def mean_pairwise_jaccard(labels, coords, lo, hi):
    """Mean label Jaccard over site pairs whose distance lies in ``[lo, hi)``."""
    ids = list(coords)
    xy = np.array([coords[s] for s in ids])
    sets = {s: set(labels.labels(s)) for s in ids}
    total, count = 0.0, 0
    for i in range(len(ids)):
        d = np.hypot(*(xy[i + 1 :] - xy[i]).T)
        for j in np.flatnonzero((d >= lo) & (d < hi)):
            total += jaccard(sets[ids[i]], sets[ids[i + 1 + j]])
            count += 1
    return total / count if count else math.nan
