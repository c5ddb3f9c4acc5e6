"""Feature/label schema, synthetic spatio-temporal load data, splits and file I/O.

Feature layout per point (``D_x = 520`` at default dimensions)::

    x_t  (4)    month, day, hour, quarter-hour, min-max scaled to [0, 1]
    x_s  (300)  3 colour channels x 100-bin pixel histograms of the building image
    x_st (216)  9 meteorological channels x trailing 24 hourly values, channel-major

Labels are the next 24 h of consumption at 15 min resolution (``D_y = 96``).
"""

from __future__ import annotations

import csv
import datetime as dt
import logging
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.signal import lfilter
from scipy.special import ndtr

from .errors import FormatError, InvalidInputError

log = logging.getLogger(__name__)

D_T, D_S, D_ST, D_Y = 4, 300, 216, 96
ST_CHANNELS, ST_HOURS = 9, 24
HIST_BINS = 100
PIXELS_PER_CHANNEL = 10_000
METEO_CHANNELS = (
    "air_density", "cloud_cover", "precipitation", "ground_irradiance", "toa_irradiance",
    "temperature", "snowfall", "snow_mass", "wind_speed",
)
PARTITIONS = ("avail", "val", "spatial", "temporal", "spatio_temporal")
PREDICTION_TYPES = ("spatial", "temporal", "spatio_temporal")

YEAR = 2014
QUARTERS_PER_DAY = 96
QUARTERS_PER_YEAR = 365 * QUARTERS_PER_DAY
_EPOCH = dt.datetime(YEAR, 1, 1)

# residential, commercial, industrial
ARCHETYPE_WEIGHTS = np.array([0.6, 0.3, 0.1])
ARCHETYPE_LEVEL = np.array([1.0, 2.5, 6.0])
ARCHETYPE_SEASON = np.array([0.35, 0.2, 0.05])
ARCHETYPE_HEATING = np.array([0.6, 0.3, 0.1])
ARCHETYPE_ROOF_RGB = np.array([[170.0, 80.0, 60.0], [120.0, 120.0, 125.0], [200.0, 200.0, 195.0]])
BACKGROUND_RGB = np.array([90.0, 120.0, 70.0])


@dataclass
class Dataset:
    """Immutable-by-convention table of labelled (building, timestamp) points."""

    building_id: np.ndarray
    time_id: np.ndarray
    timestamps: np.ndarray  # (n, 4) month, day, hour, quarter
    x: np.ndarray
    y: np.ndarray
    building_lat: np.ndarray
    building_lon: np.ndarray
    building_region: np.ndarray
    building_archetype: np.ndarray
    d_t: int = D_T
    d_s: int = D_S
    d_st: int = D_ST
    st_channels: int = ST_CHANNELS

    def __len__(self):
        return len(self.y)

    @property
    def d_x(self):
        return self.d_t + self.d_s + self.d_st

    @property
    def d_y(self):
        return self.y.shape[1]

    @property
    def n_buildings(self):
        return len(self.building_lat)

    @property
    def x_t(self):
        return self.x[:, :self.d_t]

    @property
    def x_s(self):
        return self.x[:, self.d_t:self.d_t + self.d_s]

    @property
    def x_st(self):
        return self.x[:, self.d_t + self.d_s:]

    def equals(self, other):
        return all(
            np.array_equal(getattr(self, name), getattr(other, name))
            for name in (
                "building_id", "time_id", "timestamps", "x", "y", "building_lat",
                "building_lon", "building_region", "building_archetype",
            )
        ) and (self.d_t, self.d_s, self.d_st, self.st_channels) == (
            other.d_t, other.d_s, other.d_st, other.st_channels
        )


@dataclass(frozen=True)
class SyntheticConfig:
    n_buildings: int = 40
    n_timestamps: int = 200
    noise_scale: float = 0.05
    shift_strength: float = 1.0
    seed: int = 0
    buildings_per_region: int = 8

    def __post_init__(self):
        if self.n_buildings < 2:
            raise InvalidInputError("n_buildings must be >= 2")
        if self.n_timestamps < 2:
            raise InvalidInputError("n_timestamps must be >= 2")
        if self.n_timestamps > QUARTERS_PER_YEAR - 2 * QUARTERS_PER_DAY:
            raise InvalidInputError("n_timestamps exceeds the quarter-hours available in one year")
        if self.noise_scale < 0 or self.shift_strength < 0:
            raise InvalidInputError("noise_scale and shift_strength must be non-negative")
        if self.buildings_per_region < 1:
            raise InvalidInputError("buildings_per_region must be >= 1")


def ordinals(quarter_index):
    """(month, day, hour, quarter) of a quarter-hour index into the year."""
    t = _EPOCH + dt.timedelta(minutes=15 * int(quarter_index))
    return t.month, t.day, t.hour, t.minute // 15


def scale_ordinals(ts):
    ts = np.asarray(ts, dtype=np.float64)
    return (ts - np.array([1.0, 1.0, 0.0, 0.0])) / np.array([11.0, 30.0, 23.0, 3.0])


def _ar1(rng, n, phi, scale):
    return lfilter([1.0], [1.0, -phi], rng.normal(0.0, scale, n))


def _meteorology(rng, n_hours, region_offset):
    """Hourly series (9, n_hours) for one region."""
    h = np.arange(n_hours)
    doy = h / 24.0
    hod = h % 24
    season = np.cos(2 * np.pi * (doy - 15) / 365)
    temperature = 9.0 - 10.0 * season - 4.0 * np.cos(2 * np.pi * (hod - 3) / 24) + region_offset \
        + _ar1(rng, n_hours, 0.97, 0.6)
    elevation = np.cos(2 * np.pi * (hod - 12) / 24) * (0.55 + 0.3 * np.cos(2 * np.pi * (doy - 172) / 365))
    toa = 1361.0 * np.maximum(elevation, 0.0)
    cloud = 1.0 / (1.0 + np.exp(-(_ar1(rng, n_hours, 0.95, 0.4) + 0.3 * season)))
    ground = toa * (1.0 - 0.75 * cloud)
    precipitation = 4.0 * np.maximum(cloud - 0.65, 0.0) * np.abs(1.0 + _ar1(rng, n_hours, 0.5, 0.3))
    snowfall = np.where(temperature < 1.0, precipitation, 0.0)
    melt = 0.2 * np.maximum(temperature, 0.0)
    snow_mass = np.zeros(n_hours)
    acc = 0.0
    for i in range(n_hours):
        acc = max(0.0, acc + snowfall[i] - melt[i])
        snow_mass[i] = acc
    air_density = 1.29 - 0.0045 * temperature + _ar1(rng, n_hours, 0.9, 0.002)
    wind = 2.0 + np.abs(_ar1(rng, n_hours, 0.9, 0.5))
    return np.vstack([air_density, cloud, precipitation, ground, toa, temperature, snowfall, snow_mass, wind])


def _histograms(rng, archetype, roof_fraction):
    edges = np.linspace(0.0, 256.0, HIST_BINS + 1)
    rows = []
    for c in range(3):
        roof_mean = ARCHETYPE_ROOF_RGB[archetype, c] + rng.normal(0.0, 6.0)

        def mass(mu, sd):
            return np.diff(ndtr((edges - mu) / sd))

        p = roof_fraction * mass(roof_mean, 14.0) + (0.97 - roof_fraction) * mass(BACKGROUND_RGB[c], 35.0) \
            + 0.03 / HIST_BINS
        rows.append(rng.multinomial(PIXELS_PER_CHANNEL, p / p.sum()))
    return np.concatenate(rows).astype(np.float64)


def _shapes(hod, weekend):
    """Daily load shapes (common, residential, commercial, industrial), roughly mean 1."""
    def bump(c, w):
        return np.exp(-0.5 * ((hod - c) / w) ** 2)

    common = 0.7 + 0.5 * bump(13.0, 4.0) + 0.3 * bump(19.0, 2.5)
    residential = 0.55 + 0.6 * bump(7.5, 1.5) + 1.1 * bump(19.5, 2.5) + 0.3 * weekend * bump(12.0, 3.0)
    commercial = np.where(weekend, 0.45, 0.35 + 1.6 * ((hod >= 8) & (hod < 18)) * (1.0 - 0.2 * bump(12.5, 1.0)))
    industrial = np.where(weekend, 0.5, 0.6 + 0.9 * ((hod >= 6) & (hod < 22)))
    return common, residential, commercial, industrial


def generate_synthetic(cfg):
    """Labelled points for every (building, timestamp) pair, ordered building-major."""
    rng = np.random.default_rng(cfg.seed)
    s = cfg.shift_strength
    nb, nt = cfg.n_buildings, cfg.n_timestamps

    archetype = rng.choice(3, size=nb, p=ARCHETYPE_WEIGHTS)
    if nb >= 3:  # every archetype present
        archetype[rng.permutation(nb)[:3]] = np.arange(3)
    n_regions = max(1, -(-nb // cfg.buildings_per_region))
    region = rng.permutation(np.arange(nb) % n_regions)
    region_lat = rng.uniform(45.9, 47.7, n_regions)
    region_lon = rng.uniform(6.1, 10.4, n_regions)
    lat = region_lat[region] + rng.normal(0.0, 0.002, nb)
    lon = region_lon[region] + rng.normal(0.0, 0.003, nb)
    size = rng.lognormal(0.0, 0.35, nb)
    roof_fraction = np.clip(0.15 + 0.15 * np.log(size) + 0.1 * archetype, 0.05, 0.8)
    x_s = np.vstack([_histograms(rng, archetype[b], roof_fraction[b]) for b in range(nb)])

    n_hours = 365 * 24
    region_offset = rng.normal(0.0, 2.0, n_regions)
    meteo = np.stack([_meteorology(rng, n_hours, region_offset[r]) for r in range(n_regions)])

    q0 = np.sort(rng.choice(np.arange(QUARTERS_PER_DAY, QUARTERS_PER_YEAR - QUARTERS_PER_DAY), nt, replace=False))
    ts = np.array([ordinals(q) for q in q0], dtype=np.int64)
    hour0 = q0 // 4
    window = hour0[:, None] + np.arange(-ST_HOURS + 1, 1)[None, :]  # (nt, 24) trailing hours
    x_st_region = meteo[:, :, window].transpose(0, 2, 1, 3).reshape(n_regions, nt, ST_CHANNELS * ST_HOURS)

    q = q0[:, None] + np.arange(D_Y)[None, :]
    hod = (q % QUARTERS_PER_DAY) / 4.0
    doy = q // QUARTERS_PER_DAY
    weekend = ((doy + _EPOCH.weekday()) % 7) >= 5
    common, *arch_shapes = _shapes(hod, weekend)
    arch_shapes = np.stack(arch_shapes)  # (3, nt, 96)
    season = np.cos(2 * np.pi * (doy - 15) / 365)  # (nt, 96)
    temp = meteo[:, METEO_CHANNELS.index("temperature"), :][:, window].mean(axis=2)  # (regions, nt)
    cold = np.maximum(0.0, 15.0 - temp) / 10.0

    profile = (1 - s) * common[None] + s * arch_shapes  # (3, nt, 96)
    level = 1.0 + s * (ARCHETYPE_LEVEL[archetype] * size - 1.0)  # (nb,)
    y = level[:, None, None] * (
        profile[archetype] * (1.0 + s * ARCHETYPE_SEASON[archetype][:, None, None] * season[None])
        + s * ARCHETYPE_HEATING[archetype][:, None, None] * cold[region][:, :, None]
    )
    if cfg.noise_scale > 0:
        y = y * (1.0 + cfg.noise_scale * rng.normal(size=y.shape))
    y = np.maximum(y, 0.0)

    b_idx = np.repeat(np.arange(nb), nt)
    t_idx = np.tile(np.arange(nt), nb)
    x = np.hstack([scale_ordinals(ts)[t_idx], x_s[b_idx], x_st_region[region[b_idx], t_idx]])
    return Dataset(
        building_id=b_idx.astype(np.int64),
        time_id=t_idx.astype(np.int64),
        timestamps=ts[t_idx],
        x=x,
        y=y.reshape(nb * nt, D_Y),
        building_lat=lat,
        building_lon=lon,
        building_region=region.astype(np.int64),
        building_archetype=archetype.astype(np.int64),
    )


# ---------------------------------------------------------------- splits

AVAIL_FRACTION = 0.03
VAL_FRACTION = 0.06
SEEN_FRACTION = 0.3  # of buildings and of timestamps; 0.3**2 = 0.09 = avail + val


@dataclass
class DatasetSplits:
    dataset: Dataset
    indices: dict

    def __getitem__(self, name):
        return self.indices[name]

    def sizes(self):
        return {k: len(v) for k, v in self.indices.items()}


def classify_prediction_type(building, time, avail_buildings, avail_times):
    seen_b = building in avail_buildings
    seen_t = time in avail_times
    if seen_b and seen_t:
        return "in_sample"
    if seen_b:
        return "temporal"
    if seen_t:
        return "spatial"
    return "spatio_temporal"


def split(dataset, seed=0):
    """Initial-training / validation / spatial / temporal / spatio-temporal partitions.

    A random 30% of buildings and 30% of timestamps are "seen". Their product
    block (9% of the data) holds the initially available points (3%) and the
    validation points (6%); the available points cover every seen building and
    timestamp. The remaining points fall into the three candidate partitions by
    whether their building and/or timestamp occur in the available set.
    """
    rng = np.random.default_rng(seed)
    buildings = np.unique(dataset.building_id)
    times = np.unique(dataset.time_id)
    nb, nt = len(buildings), len(times)
    if len(dataset) != nb * nt:
        raise InvalidInputError("dataset must contain every (building, timestamp) pair")
    if nb < 2:
        raise InvalidInputError(f"need >= 2 buildings for spatial partitions, got {nb}")
    if nt < 2:
        raise InvalidInputError(f"need >= 2 timestamps for temporal partitions, got {nt}")
    b_seen_n = int(np.clip(round(SEEN_FRACTION * nb), 1, nb - 1))
    t_seen_n = int(np.clip(round(SEEN_FRACTION * nt), 1, nt - 1))
    n_avail = int(round(AVAIL_FRACTION * len(dataset)))
    if n_avail < max(b_seen_n, t_seen_n):
        raise InvalidInputError(
            f"initial set of {n_avail} points cannot cover {b_seen_n} seen buildings "
            f"and {t_seen_n} seen timestamps; add data"
        )
    if n_avail >= b_seen_n * t_seen_n:
        raise InvalidInputError(
            f"seen block of {b_seen_n * t_seen_n} points leaves no validation data; add data"
        )

    arche = dataset.building_archetype[buildings]
    present = np.unique(arche)
    first = []
    if b_seen_n >= len(present):
        first = [int(rng.choice(buildings[arche == a])) for a in present]
    rest = rng.permutation(np.setdiff1d(buildings, first))
    seen_b = rng.permutation(np.concatenate([first, rest[:b_seen_n - len(first)]]).astype(np.int64))
    seen_t = rng.permutation(times)[:t_seen_n]

    row = {int(b): i for i, b in enumerate(seen_b)}
    col = {int(t): j for j, t in enumerate(seen_t)}
    cover = max(b_seen_n, t_seen_n)
    cells = {(i % b_seen_n, i % t_seen_n) for i in range(cover)}
    others = [(i, j) for i in range(b_seen_n) for j in range(t_seen_n) if (i, j) not in cells]
    extra = rng.choice(len(others), n_avail - cover, replace=False)
    cells |= {others[e] for e in extra}

    in_b = np.isin(dataset.building_id, seen_b)
    in_t = np.isin(dataset.time_id, seen_t)
    block = np.flatnonzero(in_b & in_t)
    is_avail = np.array(
        [(row[int(dataset.building_id[p])], col[int(dataset.time_id[p])]) in cells for p in block], dtype=bool
    )
    indices = {
        "avail": block[is_avail],
        "val": block[~is_avail],
        "spatial": np.flatnonzero(~in_b & in_t),
        "temporal": np.flatnonzero(in_b & ~in_t),
        "spatio_temporal": np.flatnonzero(~in_b & ~in_t),
    }
    return DatasetSplits(dataset, indices)


# ---------------------------------------------------------- normalization

@dataclass
class Standardizer:
    mean: np.ndarray
    std: np.ndarray

    @classmethod
    def fit(cls, a, what="values"):
        mean = a.mean(axis=0)
        std = a.std(axis=0)
        flat = std == 0
        if flat.any():
            log.info("%d zero-variance %s dimensions passed through at unit scale", int(flat.sum()), what)
            std = np.where(flat, 1.0, std)
        return cls(mean, std)

    def transform(self, a):
        return (a - self.mean) / self.std

    def inverse(self, a):
        return a * self.std + self.mean


@dataclass
class NormalizedSplits:
    """Standardized copies of all features and labels plus the split indices."""

    splits: DatasetSplits
    x_scaler: Standardizer
    y_scaler: Standardizer
    x: np.ndarray = field(repr=False)
    y: np.ndarray = field(repr=False)

    @property
    def dataset(self):
        return self.splits.dataset

    def __getitem__(self, name):
        idx = self.splits[name]
        return self.x[idx], self.y[idx]


def normalize(splits):
    """Standardize with statistics from the initially available points only."""
    d = splits.dataset
    avail = splits["avail"]
    xs = Standardizer.fit(d.x[avail], "feature")
    ys = Standardizer.fit(d.y[avail], "label")
    return NormalizedSplits(splits, xs, ys, xs.transform(d.x), ys.transform(d.y))


# -------------------------------------------------------------------- I/O

_DATA_MAGIC = b"ADLDATA\x00"
_SPLIT_MAGIC = b"ADLSPLT\x00"
_VERSION = 1
_DATA_HEADER = struct.Struct("<8sI7q")
_SPLIT_HEADER = struct.Struct("<8sIq5q")
_META_COLS = 6  # building_id, time_id, month, day, hour, quarter


def _read(path):
    with open(path, "rb") as fh:
        return fh.read()


def _check_header(raw, header, magic, path, kind):
    if len(raw) < header.size:
        raise FormatError(f"{path}: truncated {kind} header")
    fields_ = header.unpack_from(raw)
    if fields_[0] != magic:
        raise FormatError(f"{path}: bad magic, not a {kind} file (format version {_VERSION})")
    if fields_[1] != _VERSION:
        raise FormatError(f"{path}: unsupported {kind} version {fields_[1]} (expected {_VERSION})")
    return fields_[2:]


def save_dataset(dataset, path):
    """Versioned binary: header, building table, then one float64 record per point."""
    n, nb = len(dataset), dataset.n_buildings
    header = _DATA_HEADER.pack(
        _DATA_MAGIC, _VERSION, n, nb, dataset.d_t, dataset.d_s, dataset.d_st, dataset.d_y, dataset.st_channels
    )
    table = np.column_stack([
        np.arange(nb), dataset.building_lat, dataset.building_lon,
        dataset.building_region, dataset.building_archetype,
    ])
    records = np.column_stack([dataset.building_id, dataset.time_id, dataset.timestamps, dataset.x, dataset.y])
    with open(path, "wb") as fh:
        fh.write(header)
        fh.write(table.astype("<f8").tobytes())
        fh.write(records.astype("<f8").tobytes())


def load_dataset(path):
    raw = _read(path)
    n, nb, d_t, d_s, d_st, d_y, st_channels = _check_header(raw, _DATA_HEADER, _DATA_MAGIC, path, "dataset")
    width = _META_COLS + d_t + d_s + d_st + d_y
    expected = _DATA_HEADER.size + 8 * (5 * nb + width * n)
    if len(raw) != expected:
        raise FormatError(f"{path}: expected {expected} bytes, found {len(raw)} (truncated or corrupt)")
    body = np.frombuffer(raw, dtype="<f8", offset=_DATA_HEADER.size).astype(np.float64)
    table = body[:5 * nb].reshape(nb, 5)
    rec = body[5 * nb:].reshape(n, width)
    d_x = d_t + d_s + d_st
    return Dataset(
        building_id=rec[:, 0].astype(np.int64),
        time_id=rec[:, 1].astype(np.int64),
        timestamps=rec[:, 2:6].astype(np.int64),
        x=rec[:, _META_COLS:_META_COLS + d_x].copy(),
        y=rec[:, _META_COLS + d_x:].copy(),
        building_lat=table[:, 1].copy(),
        building_lon=table[:, 2].copy(),
        building_region=table[:, 3].astype(np.int64),
        building_archetype=table[:, 4].astype(np.int64),
        d_t=d_t, d_s=d_s, d_st=d_st, st_channels=st_channels,
    )


def save_splits(splits, path):
    """Partition indices only; pair with the dataset file they refer to."""
    sizes = [len(splits[name]) for name in PARTITIONS]
    with open(path, "wb") as fh:
        fh.write(_SPLIT_HEADER.pack(_SPLIT_MAGIC, _VERSION, len(splits.dataset), *sizes))
        for name in PARTITIONS:
            fh.write(np.asarray(splits[name], dtype="<i8").tobytes())


def load_splits(path, dataset):
    raw = _read(path)
    n, *sizes = _check_header(raw, _SPLIT_HEADER, _SPLIT_MAGIC, path, "splits")
    if n != len(dataset):
        raise FormatError(f"{path}: splits refer to {n} points, dataset has {len(dataset)}")
    if len(raw) != _SPLIT_HEADER.size + 8 * sum(sizes):
        raise FormatError(f"{path}: truncated or corrupt index data")
    body = np.frombuffer(raw, dtype="<i8", offset=_SPLIT_HEADER.size).astype(np.int64)
    out, pos = {}, 0
    for name, size in zip(PARTITIONS, sizes):
        out[name] = body[pos:pos + size].copy()
        pos += size
    return DatasetSplits(dataset, out)


def export_csv(dataset, path):
    """One row per point with named columns; floats written at full precision."""
    header = ["building_id", "time_id", "month", "day", "hour", "quarter"]
    header += [f"x_t_{i}" for i in range(dataset.d_t)]
    header += [f"x_s_{i}" for i in range(dataset.d_s)]
    header += [f"x_st_{i}" for i in range(dataset.d_st)]
    header += [f"y_{i}" for i in range(dataset.d_y)]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(header)
        for i in range(len(dataset)):
            w.writerow(
                [int(dataset.building_id[i]), int(dataset.time_id[i]), *map(int, dataset.timestamps[i])]
                + [repr(float(v)) for v in dataset.x[i]]
                + [repr(float(v)) for v in dataset.y[i]]
            )
