"""Synthetic utility-fleet load data, CSV ingestion, clustering, and splits.

Stands in for a proprietary building-load feed: a seeded generator produces
hourly series for a fleet of clients from a few diurnal archetypes, and the
CSV reader ingests the same schema (`client_id,timestamp,load_kw`) from disk.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace

import numpy as np

from . import seeding

HOURS_PER_DAY = 24
HOURS_PER_WEEK = 168

# fixed-date public holidays applied every year of a generated span
DEFAULT_HOLIDAYS_MMDD = ("01-01", "05-01", "07-04", "12-24", "12-25", "12-26")

# (daily amplitude scale, peak hour, weekly phase in days) per archetype:
# evening-peaked residential, midday commercial, flat early industrial
ARCHETYPES = ((1.0, 19.0, 5.5), (1.1, 13.0, 2.0), (0.45, 8.0, 2.5))


class DataError(ValueError):
    """Raised for malformed or gapped load data."""


@dataclass(frozen=True)
class LoadDataset:
    """One client's hourly load series with its holiday calendar."""

    client_id: str
    timestamps: np.ndarray  # datetime64[h], strictly increasing, gap-free
    loads: np.ndarray       # kW, strictly positive
    holidays: frozenset = frozenset()  # ISO dates

    def __post_init__(self):
        ts = np.asarray(self.timestamps, dtype="datetime64[h]")
        loads = np.asarray(self.loads, dtype=np.float64)
        object.__setattr__(self, "timestamps", ts)
        object.__setattr__(self, "loads", loads)
        if ts.shape != loads.shape or ts.ndim != 1:
            raise DataError(f"{self.client_id}: timestamps/loads must be equal-length 1-d")
        if ts.size == 0:
            raise DataError(f"{self.client_id}: empty series")
        steps = np.diff(ts.astype(np.int64))
        if np.any(steps != 1):
            missing = _missing_stamps(ts)
            raise DataError(
                f"{self.client_id}: series is not gap-free hourly; missing {missing}"
            )
        if np.any(loads <= 0):
            bad = int(np.argmax(loads <= 0))
            raise DataError(f"{self.client_id}: non-positive load at {ts[bad]}")

    def __len__(self):
        return self.timestamps.size

    @property
    def hour_index(self) -> np.ndarray:
        """Hours since the epoch, one per row."""
        return self.timestamps.astype(np.int64)

    @property
    def weekday(self) -> np.ndarray:
        """Day of week per row, Monday = 0."""
        days = self.timestamps.astype("datetime64[D]").astype(np.int64)
        return (days + 3) % 7

    @property
    def holiday_mark(self) -> np.ndarray:
        if not self.holidays:
            return np.zeros(len(self), dtype=np.float64)
        dates = np.datetime_as_string(self.timestamps.astype("datetime64[D]"))
        return np.isin(dates, sorted(self.holidays)).astype(np.float64)

    def slice(self, start: int, stop: int, suffix: str = "") -> "LoadDataset":
        return LoadDataset(
            self.client_id + suffix,
            self.timestamps[start:stop],
            self.loads[start:stop],
            self.holidays,
        )


def _missing_stamps(ts: np.ndarray, limit: int = 5) -> list:
    missing = []
    steps = np.diff(ts.astype(np.int64))
    for i in np.flatnonzero(steps != 1):
        gap = ts[i] + np.arange(1, int(steps[i]))
        missing.extend(np.datetime_as_string(gap.astype("datetime64[h]")))
        if len(missing) >= limit:
            break
    return missing[:limit]


@dataclass(frozen=True)
class FleetSpec:
    """Knobs of the synthetic fleet generator."""

    n_clients: int = 20
    span_days: int = 90
    base_kw: float = 100.0
    daily_amp: float = 0.30
    weekly_amp: float = 0.08
    noise_frac: float = 0.02
    holiday_dip: float = 0.15
    archetype_count: int = 3
    seed: int = 0
    start: str = "2023-03-01T00"

    def __post_init__(self):
        if self.n_clients < 1:
            raise ValueError("n_clients must be >= 1")
        if not 1 <= self.archetype_count <= len(ARCHETYPES):
            raise ValueError(f"archetype_count must be in [1, {len(ARCHETYPES)}]")
        max_scale = max(a[0] for a in ARCHETYPES[: self.archetype_count])
        if self.daily_amp * max_scale + self.weekly_amp + self.holiday_dip >= 1.0:
            raise ValueError("amplitudes too large: loads would not stay positive")


def default_holidays(timestamps: np.ndarray) -> frozenset:
    """Fixed-date holidays falling inside the timestamp span."""
    years = np.unique(timestamps.astype("datetime64[Y]"))
    days = set(np.datetime_as_string(timestamps.astype("datetime64[D]")))
    out = set()
    for y in np.datetime_as_string(years):
        for mmdd in DEFAULT_HOLIDAYS_MMDD:
            d = f"{y}-{mmdd}"
            if d in days:
                out.add(d)
    return frozenset(out)


def generate_fleet(spec: FleetSpec) -> list:
    """Seeded synthetic fleet: one LoadDataset per client.

    Each client draws a base level around the spec's base load and follows
    one of a few diurnal archetypes (daily and weekly sinusoids), dips on
    holidays, and carries Gaussian noise. Loads are clamped above 1 kW.
    """
    rng = seeding.stream(spec.seed, seeding.FLEET)
    n_hours = spec.span_days * HOURS_PER_DAY
    start = np.datetime64(spec.start, "h")
    timestamps = start + np.arange(n_hours)
    holidays = default_holidays(timestamps)

    hour_of_day = timestamps.astype(np.int64) % HOURS_PER_DAY
    hour_of_week = timestamps.astype(np.int64) % HOURS_PER_WEEK
    is_holiday = None
    if holidays:
        dates = np.datetime_as_string(timestamps.astype("datetime64[D]"))
        is_holiday = np.isin(dates, sorted(holidays))

    fleet = []
    for i in range(spec.n_clients):
        amp_scale, peak_hour, peak_day = ARCHETYPES[i % spec.archetype_count]
        base = spec.base_kw * rng.uniform(0.7, 1.3)
        phase = rng.uniform(-0.5, 0.5)
        daily = spec.daily_amp * amp_scale * np.cos(
            2.0 * np.pi * (hour_of_day - peak_hour - phase) / HOURS_PER_DAY
        )
        weekly = spec.weekly_amp * np.cos(
            2.0 * np.pi * (hour_of_week - peak_day * HOURS_PER_DAY) / HOURS_PER_WEEK
        )
        load = base * (1.0 + daily + weekly)
        if is_holiday is not None:
            load = np.where(is_holiday, load * (1.0 - spec.holiday_dip), load)
        load = load + rng.normal(0.0, spec.noise_frac * base, size=n_hours)
        load = np.maximum(load, 1.0)
        fleet.append(LoadDataset(f"uc_{i:03d}", timestamps, load, holidays))
    return fleet


def generate_fleet_with_audit(spec: FleetSpec) -> tuple:
    """Fleet plus one extra 'audit' client reserved for server-side validation."""
    extended = replace(spec, n_clients=spec.n_clients + 1)
    fleet = generate_fleet(extended)
    audit = fleet[-1]
    audit = LoadDataset("audit", audit.timestamps, audit.loads, audit.holidays)
    return fleet[: spec.n_clients], audit


# -- CSV schema: header `client_id,timestamp,load_kw`, ISO-8601 UTC hours ----


def write_csv(path, datasets, holidays_path=None) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["client_id", "timestamp", "load_kw"])
        for ds in datasets:
            stamps = np.datetime_as_string(ds.timestamps)
            for ts, load in zip(stamps, ds.loads):
                writer.writerow([ds.client_id, ts, repr(float(load))])
    if holidays_path is not None:
        holidays = sorted(set().union(*(ds.holidays for ds in datasets)))
        with open(holidays_path, "w") as fh:
            json.dump(holidays, fh, indent=0)
            fh.write("\n")


def load_holidays(path) -> frozenset:
    with open(path) as fh:
        dates = json.load(fh)
    return frozenset(str(d) for d in dates)


def load_csv(path, holidays=frozenset()) -> list:
    """Parse and validate the fleet CSV; returns one LoadDataset per client."""
    per_client = {}
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header is None:
            raise DataError("no data rows: file is empty")
        expected = ["client_id", "timestamp", "load_kw"]
        if [h.strip() for h in header] != expected:
            missing = [c for c in expected if c not in header]
            raise DataError(f"bad header {header!r}: missing column(s) {missing}")
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != 3:
                raise DataError(f"row {lineno}: expected 3 fields, got {len(row)}")
            cid, ts, load = row
            try:
                stamp = np.datetime64(ts.strip(), "h")
            except ValueError:
                raise DataError(f"row {lineno}: bad timestamp {ts!r}") from None
            try:
                kw = float(load)
            except ValueError:
                raise DataError(f"row {lineno}: bad load {load!r}") from None
            if kw <= 0:
                raise DataError(f"row {lineno}: non-positive load {kw}")
            per_client.setdefault(cid.strip(), []).append((stamp, kw, lineno))
    if not per_client:
        raise DataError("no data rows")

    datasets = []
    for cid, rows in per_client.items():
        rows.sort(key=lambda r: r[0])
        ts = np.array([r[0] for r in rows], dtype="datetime64[h]")
        steps = np.diff(ts.astype(np.int64))
        dup = np.flatnonzero(steps == 0)
        if dup.size:
            raise DataError(
                f"client {cid}: duplicate timestamp {ts[dup[0]]} (row {rows[dup[0] + 1][2]})"
            )
        gap = np.flatnonzero(steps > 1)
        if gap.size:
            i = int(gap[0])
            missing = np.datetime_as_string((ts[i] + 1).astype("datetime64[h]"))
            raise DataError(
                f"client {cid}: non-hourly gap after row {rows[i][2]}; missing {missing}"
            )
        loads = np.array([r[1] for r in rows])
        datasets.append(LoadDataset(cid, ts, loads, holidays))
    return datasets


# -- K-means over mean daily profiles ----------------------------------------


@dataclass
class ClusterResult:
    labels: np.ndarray
    centroids: np.ndarray
    inertia_history: list = field(default_factory=list)


def daily_profile(ds: LoadDataset) -> np.ndarray:
    """Mean load per hour of day, z-scored per client."""
    hours = ds.timestamps.astype(np.int64) % HOURS_PER_DAY
    profile = np.array(
        [ds.loads[hours == h].mean() if np.any(hours == h) else 0.0 for h in range(24)]
    )
    std = profile.std()
    # relative guard: float residue on a constant profile must not z-score to O(1)
    if std <= 1e-12 * max(1.0, abs(profile.mean())):
        return np.zeros(24)
    return (profile - profile.mean()) / std


def kmeans_cluster(datasets, k: int, max_iters: int = 100, seed: int = 0) -> ClusterResult:
    """Lloyd's algorithm with k-means++ seeding on z-scored daily profiles."""
    if k < 1:
        raise ValueError("k must be >= 1")
    if k > len(datasets):
        raise ValueError(f"k={k} exceeds number of clients {len(datasets)}")
    x = np.stack([daily_profile(ds) for ds in datasets])
    rng = seeding.stream(seed, seeding.KMEANS)

    # k-means++ seeding
    centroids = [x[rng.integers(len(x))]]
    for _ in range(1, k):
        d2 = np.min(((x[:, None, :] - np.array(centroids)[None]) ** 2).sum(-1), axis=1)
        total = d2.sum()
        if total == 0.0:
            centroids.append(x[rng.integers(len(x))].copy())
            continue
        centroids.append(x[rng.choice(len(x), p=d2 / total)])
    centroids = np.array(centroids)

    labels = np.zeros(len(x), dtype=np.int64)
    history = []
    for _ in range(max_iters):
        d2 = ((x[:, None, :] - centroids[None]) ** 2).sum(-1)
        labels = d2.argmin(axis=1)
        history.append(float(d2[np.arange(len(x)), labels].sum()))
        new_centroids = centroids.copy()
        for j in range(k):
            members = x[labels == j]
            if len(members):
                new_centroids[j] = members.mean(axis=0)
        if np.array_equal(new_centroids, centroids):
            break
        centroids = new_centroids
    return ClusterResult(labels, centroids, history)


# -- seasonal train/test splitting -------------------------------------------

_SEASON_OF_MONTH = {12: "winter", 1: "winter", 2: "winter",
                    3: "spring", 4: "spring", 5: "spring",
                    6: "summer", 7: "summer", 8: "summer",
                    9: "autumn", 10: "autumn", 11: "autumn"}

TEST_HOURS = 7 * HOURS_PER_DAY


def seasonal_split(ds: LoadDataset) -> list:
    """Per season block, hold out the final week: [(season, train, test), ...].

    Seasons follow meteorological month boundaries; each contiguous block
    of the series inside one season must span at least 8 days.
    """
    months = (ds.timestamps.astype("datetime64[M]").astype(np.int64) % 12) + 1
    seasons = np.array([_SEASON_OF_MONTH[m] for m in months])
    boundaries = np.flatnonzero(seasons[1:] != seasons[:-1]) + 1
    edges = [0, *boundaries.tolist(), len(ds)]

    splits = []
    for lo, hi in zip(edges[:-1], edges[1:]):
        length = hi - lo
        if length < 8 * HOURS_PER_DAY:
            raise DataError(
                f"{ds.client_id}: {seasons[lo]} block has {length} hours, "
                "shorter than the 8-day minimum"
            )
        cut = hi - TEST_HOURS
        splits.append((str(seasons[lo]), ds.slice(lo, cut), ds.slice(cut, hi)))
    return splits
