"""Sensor records to normalized grid frames and training windows.

The flow is: parse the sensor CSV, rasterize each hour into a multi-channel
frame (pollutant, met numerics, wind one-hot, traffic, speed, external
broadcast), nearest-neighbor fill the met channels, min-max normalize with
statistics from the training period only, then cut sliding windows that never
straddle an hourly gap or the train/test boundary.

Cell values are station means. A zero in the pollutant channel is both "no
station here" and a legitimate normalized minimum; the station mask, never
the value, carries the distinction.
"""

from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from . import gtsr
from .errors import ConfigError, ContractError, GapError

WIND_KEY = "wind_dir"
COMPASS_8 = ("N", "NE", "E", "SE", "S", "SW", "W", "NW")
COMPASS_16 = ("N", "NNE", "NE", "ENE", "E", "ESE", "SE", "SSE",
              "S", "SSW", "SW", "WSW", "W", "WNW", "NW", "NNW")
RECORD_KINDS = ("pollution", "met", "traffic", "speed", "external")
CSV_HEADER = ["station_id", "kind", "lat", "lon", "timestamp", "key", "value"]

FACTOR_NAMES = ("met", "traffic", "speed", "external")
HOUR = timedelta(hours=1)


def parse_hour(text: str) -> datetime:
    """Strict RFC 3339 timestamp, UTC, aligned to a whole hour."""
    ts = datetime.fromisoformat(text.replace("Z", "+00:00"))
    if ts.tzinfo is None:
        raise ContractError(f"timestamp {text!r} lacks a timezone")
    ts = ts.astimezone(timezone.utc)
    if ts.minute or ts.second or ts.microsecond:
        raise ContractError(f"timestamp {text!r} is not aligned to a whole hour")
    return ts


def format_hour(ts: datetime) -> str:
    return ts.astimezone(timezone.utc).strftime("%Y-%m-%dT%H:%M:%SZ")


@dataclass(frozen=True)
class SensorRecord:
    station_id: str
    kind: str
    lat: float
    lon: float
    timestamp: datetime
    key: str
    value: float | str


@dataclass(frozen=True)
class GridSpec:
    """City bounding box divided into m (latitude) x n (longitude) cells."""

    lat_min: float
    lat_max: float
    lon_min: float
    lon_max: float
    m: int
    n: int
    wind_categories: tuple[str, ...] = COMPASS_8

    def __post_init__(self):
        if self.m < 1 or self.n < 1:
            raise ConfigError("grid must have at least one cell per axis")
        if self.lat_max <= self.lat_min or self.lon_max <= self.lon_min:
            raise ConfigError("bounding box has empty extent")
        if len(self.wind_categories) not in (8, 16):
            raise ConfigError("wind rose must have 8 or 16 categories")

    def cell_of(self, lat: float, lon: float) -> Optional[tuple[int, int]]:
        """Row/column of the containing cell, or None outside the box."""
        if not (self.lat_min <= lat <= self.lat_max and self.lon_min <= lon <= self.lon_max):
            return None
        row = int((lat - self.lat_min) / (self.lat_max - self.lat_min) * self.m)
        col = int((lon - self.lon_min) / (self.lon_max - self.lon_min) * self.n)
        return (min(row, self.m - 1), min(col, self.n - 1))

    def to_dict(self) -> dict:
        return {"lat_min": self.lat_min, "lat_max": self.lat_max,
                "lon_min": self.lon_min, "lon_max": self.lon_max,
                "m": self.m, "n": self.n,
                "wind_categories": list(self.wind_categories)}

    @classmethod
    def from_dict(cls, d: dict) -> "GridSpec":
        d = dict(d)
        d["wind_categories"] = tuple(d.get("wind_categories", COMPASS_8))
        return cls(**d)


@dataclass
class ChannelLayout:
    """Names and grouping of the stacked channels, in their fixed order:
    pollutant, met numerics, wind one-hot, traffic, speed, external areas."""

    pollutant: str
    met_numeric: tuple[str, ...]
    wind_categories: tuple[str, ...]
    traffic_keys: tuple[str, ...]
    speed_keys: tuple[str, ...]
    external_areas: tuple[str, ...]

    def names(self) -> list[str]:
        return ([self.pollutant]
                + [f"met_{k}" for k in self.met_numeric]
                + [f"wind_{c}" for c in self.wind_categories]
                + [f"traffic_{k}" for k in self.traffic_keys]
                + [f"speed_{k}" for k in self.speed_keys]
                + [f"ext_{a}" for a in self.external_areas])

    def groups(self) -> list[str]:
        return (["pollution"]
                + ["met"] * len(self.met_numeric)
                + ["wind"] * len(self.wind_categories)
                + ["traffic"] * len(self.traffic_keys)
                + ["speed"] * len(self.speed_keys)
                + ["external"] * len(self.external_areas))

    @property
    def count(self) -> int:
        return len(self.names())

    def met_slice(self) -> slice:
        start = 1
        stop = start + len(self.met_numeric) + len(self.wind_categories)
        return slice(start, stop)

    def indices_for_factors(self, factors: Sequence[str]) -> list[int]:
        """Pollutant channel plus the channels of each named factor."""
        groups = self.groups()
        wanted = {"pollution"}
        for f in factors:
            if f == "all":
                wanted.update(("met", "wind", "traffic", "speed", "external"))
            elif f == "met":
                wanted.update(("met", "wind"))
            elif f in ("traffic", "speed", "external"):
                wanted.add(f)
            else:
                raise ConfigError(f"unknown factor {f!r}; expected subset of {FACTOR_NAMES}")
        return [i for i, g in enumerate(groups) if g in wanted]

    def to_dict(self) -> dict:
        return {"pollutant": self.pollutant,
                "met_numeric": list(self.met_numeric),
                "wind_categories": list(self.wind_categories),
                "traffic_keys": list(self.traffic_keys),
                "speed_keys": list(self.speed_keys),
                "external_areas": list(self.external_areas)}

    @classmethod
    def from_dict(cls, d: dict) -> "ChannelLayout":
        return cls(pollutant=d["pollutant"],
                   met_numeric=tuple(d["met_numeric"]),
                   wind_categories=tuple(d["wind_categories"]),
                   traffic_keys=tuple(d["traffic_keys"]),
                   speed_keys=tuple(d["speed_keys"]),
                   external_areas=tuple(d["external_areas"]))


@dataclass
class GridFrame:
    """One hour of the city: stacked channels plus the station mask."""

    timestamp: datetime
    channels: np.ndarray          # (C, M, N) float32
    station_mask: np.ndarray      # (M, N) float32, 1 where a pollution station sits
    met_mask: np.ndarray          # (M, N) bool, 1 where a met station reported
    rejected: int = 0


def infer_layout(records: Iterable[SensorRecord],
                 wind_categories: tuple[str, ...] = COMPASS_8) -> ChannelLayout:
    pollutants, met_keys, traffic_keys, speed_keys, areas = set(), set(), set(), set(), set()
    for r in records:
        if r.kind == "pollution":
            pollutants.add(r.key)
        elif r.kind == "met":
            if r.key != WIND_KEY:
                met_keys.add(r.key)
        elif r.kind == "traffic":
            traffic_keys.add(r.key)
        elif r.kind == "speed":
            speed_keys.add(r.key)
        elif r.kind == "external":
            areas.add(r.station_id)
        else:
            raise ContractError(f"unknown record kind {r.kind!r}")
    if len(pollutants) != 1:
        raise ConfigError(f"need exactly one pollutant key per run, found {sorted(pollutants)}")
    return ChannelLayout(pollutant=pollutants.pop(),
                         met_numeric=tuple(sorted(met_keys)),
                         wind_categories=wind_categories,
                         traffic_keys=tuple(sorted(traffic_keys)),
                         speed_keys=tuple(sorted(speed_keys)),
                         external_areas=tuple(sorted(areas)))


def rasterize(records: Sequence[SensorRecord], spec: GridSpec,
              layout: ChannelLayout) -> GridFrame:
    """One hour of records into a frame; numeric cells hold station means.

    Wind direction is categorical, so a cell takes the value of its
    lexicographically smallest station id instead of an average. Records
    outside the box (except external ones) are counted and dropped.
    External records are left for the broadcast pass.
    """
    if not records:
        raise ContractError("rasterize needs at least one record")
    stamp = records[0].timestamp
    names = layout.names()
    index = {name: i for i, name in enumerate(names)}
    m, n = spec.m, spec.n
    sums = np.zeros((layout.count, m, n), dtype=np.float64)
    counts = np.zeros((layout.count, m, n), dtype=np.int64)
    station_mask = np.zeros((m, n), dtype=np.float32)
    met_mask = np.zeros((m, n), dtype=bool)
    wind_pick: dict[tuple[int, int], tuple[str, str]] = {}
    rejected = 0

    for r in records:
        if r.timestamp != stamp:
            raise ContractError(f"mixed timestamps in one rasterize call: "
                                f"{format_hour(stamp)} vs {format_hour(r.timestamp)}")
        if r.kind == "external":
            continue
        cell = spec.cell_of(r.lat, r.lon)
        if cell is None:
            rejected += 1
            continue
        row, col = cell
        if r.kind == "met":
            met_mask[row, col] = True
            if r.key == WIND_KEY:
                prev = wind_pick.get(cell)
                if prev is None or r.station_id < prev[0]:
                    wind_pick[cell] = (r.station_id, str(r.value))
                continue
            ch = index.get(f"met_{r.key}")
        elif r.kind == "pollution":
            station_mask[row, col] = 1.0
            ch = 0 if r.key == layout.pollutant else None
        elif r.kind == "traffic":
            ch = index.get(f"traffic_{r.key}")
        elif r.kind == "speed":
            ch = index.get(f"speed_{r.key}")
        else:
            raise ContractError(f"unknown record kind {r.kind!r}")
        if ch is None:
            raise ContractError(f"record key {r.key!r} absent from the channel layout")
        sums[ch, row, col] += float(r.value)
        counts[ch, row, col] += 1

    channels = np.zeros((layout.count, m, n), dtype=np.float32)
    seen = counts > 0
    channels[seen] = (sums[seen] / counts[seen]).astype(np.float32)
    for (row, col), (_, category) in wind_pick.items():
        if category not in layout.wind_categories:
            raise ContractError(f"wind category {category!r} not in the configured rose")
        channels[index[f"wind_{category}"], row, col] = 1.0
    return GridFrame(timestamp=stamp, channels=channels, station_mask=station_mask,
                     met_mask=met_mask, rejected=rejected)


def embed_external(hourly_values: Sequence[dict], areas: Sequence[str],
                   spec: GridSpec) -> np.ndarray:
    """Broadcast each area's scalar series to a constant spatial channel.

    Missing area-hours carry the previous hour forward; a leading gap is 0.
    Returns (T, E, M, N).
    """
    out = np.zeros((len(hourly_values), len(areas), spec.m, spec.n), dtype=np.float32)
    last = {a: 0.0 for a in areas}
    for t, values in enumerate(hourly_values):
        for e, area in enumerate(areas):
            if area in values:
                last[area] = float(values[area])
            out[t, e] = last[area]
    return out


def fill_met_gaps(frames: Sequence[GridFrame], layout: ChannelLayout) -> list[GridFrame]:
    """Give every cell the met channels of its nearest met-carrying cell.

    Distance is Euclidean in cell coordinates; exact ties go to the smaller
    row, then the smaller column. A frame with no met station at all is a
    hard gap.
    """
    if not layout.met_numeric and not layout.wind_categories:
        return list(frames)
    sl = layout.met_slice()
    out = []
    for frame in frames:
        carriers = np.argwhere(frame.met_mask)
        if carriers.size == 0:
            raise GapError(f"frame {format_hour(frame.timestamp)} has no met station")
        # already dense: nothing to do
        if len(carriers) == frame.met_mask.size:
            out.append(frame)
            continue
        order = np.lexsort((carriers[:, 1], carriers[:, 0]))
        carriers = carriers[order]
        m, n = frame.met_mask.shape
        rows, cols = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
        cells = np.stack([rows.reshape(-1), cols.reshape(-1)], axis=1)
        d2 = ((cells[:, None, :] - carriers[None, :, :]) ** 2).sum(axis=2)
        nearest = carriers[np.argmin(d2, axis=1)]  # first min = smallest row, col
        channels = frame.channels.copy()
        channels[sl] = channels[sl][:, nearest[:, 0], nearest[:, 1]].reshape(-1, m, n)
        out.append(GridFrame(frame.timestamp, channels, frame.station_mask,
                             np.ones_like(frame.met_mask), frame.rejected))
    return out


@dataclass
class NormStats:
    """Per-channel training-period (min, max); persisted with the dataset so
    test-time scaling reuses the training statistics."""

    names: list[str]
    mins: np.ndarray
    maxs: np.ndarray
    one_hot: np.ndarray     # bool per channel; skipped by scaling
    degenerate: np.ndarray  # bool per channel; max == min, mapped to 0

    def to_dict(self) -> dict:
        return {"channels": [
            {"name": n, "min": float(lo), "max": float(hi),
             "one_hot": bool(oh), "degenerate": bool(dg)}
            for n, lo, hi, oh, dg in zip(self.names, self.mins, self.maxs,
                                         self.one_hot, self.degenerate)]}

    @classmethod
    def from_dict(cls, d: dict) -> "NormStats":
        rows = d["channels"]
        return cls(names=[r["name"] for r in rows],
                   mins=np.array([r["min"] for r in rows], dtype=np.float64),
                   maxs=np.array([r["max"] for r in rows], dtype=np.float64),
                   one_hot=np.array([r["one_hot"] for r in rows], dtype=bool),
                   degenerate=np.array([r["degenerate"] for r in rows], dtype=bool))


def compute_stats(frames: Sequence[GridFrame], layout: ChannelLayout) -> NormStats:
    if not frames:
        raise ContractError("cannot compute statistics over zero frames")
    block = np.stack([f.channels for f in frames])  # (T, C, M, N)
    mins = block.min(axis=(0, 2, 3)).astype(np.float64)
    maxs = block.max(axis=(0, 2, 3)).astype(np.float64)
    one_hot = np.array([g == "wind" for g in layout.groups()])
    degenerate = (maxs <= mins) & ~one_hot
    return NormStats(names=layout.names(), mins=mins, maxs=maxs,
                     one_hot=one_hot, degenerate=degenerate)


def normalize_block(block: np.ndarray, stats: NormStats) -> np.ndarray:
    """Min-max scale (T, C, M, N) into [0, 1], clamping out-of-range test
    values; one-hot channels pass through, degenerate channels map to 0."""
    out = block.astype(np.float32).copy()
    for c in range(block.shape[1]):
        if stats.one_hot[c]:
            continue
        if stats.degenerate[c]:
            out[:, c] = 0.0
            continue
        span = stats.maxs[c] - stats.mins[c]
        out[:, c] = np.clip((block[:, c] - stats.mins[c]) / span, 0.0, 1.0)
    return out


def denormalize_channel(values: np.ndarray, stats: NormStats, channel: int = 0) -> np.ndarray:
    if stats.one_hot[channel] or stats.degenerate[channel]:
        return np.asarray(values, dtype=np.float64)
    span = stats.maxs[channel] - stats.mins[channel]
    return np.asarray(values, dtype=np.float64) * span + stats.mins[channel]


def split_train_test(frames: Sequence[GridFrame],
                     boundary: datetime) -> tuple[list[GridFrame], list[GridFrame]]:
    """Strictly temporal split: the boundary hour starts the test side."""
    train = [f for f in frames if f.timestamp < boundary]
    test = [f for f in frames if f.timestamp >= boundary]
    if not train or not test:
        raise ConfigError(f"boundary {format_hour(boundary)} leaves an empty split "
                          f"({len(train)} train / {len(test)} test)")
    return train, test


@dataclass
class SampleWindow:
    """J input frames and the K-step pollutant target with its masks."""

    inputs: np.ndarray        # (J, C_sel, M, N) float32, normalized
    target: np.ndarray        # (K, M, N) float32, normalized pollutant
    target_mask: np.ndarray   # (K, M, N) float32
    start: int                # index of the first input frame in the split


def contiguous_segments(timestamps: Sequence[datetime]) -> list[tuple[int, int]]:
    """Half-open [start, stop) runs of hourly-contiguous timestamps."""
    if not timestamps:
        return []
    segments = []
    start = 0
    for i in range(1, len(timestamps)):
        if timestamps[i] - timestamps[i - 1] != HOUR:
            segments.append((start, i))
            start = i
    segments.append((start, len(timestamps)))
    return segments


def cut_windows(frames_block: np.ndarray, masks_block: np.ndarray,
                timestamps: Sequence[datetime], channel_indices: Sequence[int],
                input_steps: int, output_steps: int, stride: int = 1,
                ) -> tuple[list[SampleWindow], int]:
    """Sliding windows within hourly-contiguous segments.

    Returns the windows and the number of segments skipped for being shorter
    than input_steps + output_steps.
    """
    if input_steps < 1 or output_steps < 1 or stride < 1:
        raise ContractError("window sizes and stride must be positive")
    windows: list[SampleWindow] = []
    skipped = 0
    need = input_steps + output_steps
    sel = list(channel_indices)
    for lo, hi in contiguous_segments(timestamps):
        if hi - lo < need:
            skipped += 1
            continue
        for start in range(lo, hi - need + 1, stride):
            t_in = slice(start, start + input_steps)
            t_out = slice(start + input_steps, start + need)
            windows.append(SampleWindow(
                inputs=frames_block[t_in][:, sel],
                target=frames_block[t_out][:, 0],
                target_mask=masks_block[t_out],
                start=start))
    return windows, skipped


# ---------------------------------------------------------------------------
# sensor CSV


def read_sensor_csv(path) -> list[SensorRecord]:
    records: list[SensorRecord] = []
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != CSV_HEADER:
            raise ContractError(f"{path}: expected header {','.join(CSV_HEADER)}")
        for line_no, row in enumerate(reader, start=2):
            if len(row) != len(CSV_HEADER):
                raise ContractError(f"{path}:{line_no}: expected {len(CSV_HEADER)} fields")
            station_id, kind, lat, lon, stamp, key, value = row
            if kind not in RECORD_KINDS:
                raise ContractError(f"{path}:{line_no}: unknown kind {kind!r}")
            records.append(SensorRecord(
                station_id=station_id, kind=kind, lat=float(lat), lon=float(lon),
                timestamp=parse_hour(stamp), key=key,
                value=value if key == WIND_KEY else float(value)))
    if not records:
        raise ContractError(f"{path}: no records")
    return records


def write_sensor_csv(path, records: Iterable[SensorRecord]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(CSV_HEADER)
        for r in records:
            value = r.value if isinstance(r.value, str) else f"{r.value:.6f}"
            writer.writerow([r.station_id, r.kind, f"{r.lat:.6f}", f"{r.lon:.6f}",
                             format_hour(r.timestamp), r.key, value])


# ---------------------------------------------------------------------------
# dataset bundle


@dataclass
class GridDataset:
    """The rasterized, normalized city: everything training and evaluation need."""

    spec: GridSpec
    layout: ChannelLayout
    frames: np.ndarray           # (T, C, M, N) normalized float32
    masks: np.ndarray            # (T, M, N) float32
    timestamps: list[datetime]
    stats: NormStats
    boundary: datetime
    rejected: int = 0
    skipped_segments: int = field(default=0, compare=False)

    @property
    def split_index(self) -> int:
        return int(np.searchsorted(
            np.array([ts.timestamp() for ts in self.timestamps]),
            self.boundary.timestamp()))

    def windows(self, split: str, input_steps: int, output_steps: int,
                factors: Sequence[str] = (), stride: int = 1) -> list[SampleWindow]:
        if split not in ("train", "test"):
            raise ContractError(f"split must be train or test, got {split!r}")
        cut = self.split_index
        rng = slice(0, cut) if split == "train" else slice(cut, len(self.timestamps))
        sel = self.layout.indices_for_factors(factors)
        windows, skipped = cut_windows(self.frames[rng], self.masks[rng],
                                       self.timestamps[rng], sel,
                                       input_steps, output_steps, stride)
        self.skipped_segments = skipped
        return windows

    def denormalize_pollutant(self, values: np.ndarray) -> np.ndarray:
        return denormalize_channel(values, self.stats, 0)

    def save(self, directory) -> None:
        directory = Path(directory)
        directory.mkdir(parents=True, exist_ok=True)
        gtsr.save(directory / "frames.gtsr", self.frames)
        gtsr.save(directory / "mask.gtsr", self.masks)
        (directory / "stats.json").write_text(json.dumps(self.stats.to_dict(), indent=2))
        meta = {
            "grid": self.spec.to_dict(),
            "channels": self.layout.names(),
            "layout": self.layout.to_dict(),
            "timestamps": [format_hour(t) for t in self.timestamps],
            "train_boundary": format_hour(self.boundary),
            "rejected_records": self.rejected,
        }
        (directory / "spec.json").write_text(json.dumps(meta, indent=2))

    @classmethod
    def load(cls, directory) -> "GridDataset":
        directory = Path(directory)
        meta = json.loads((directory / "spec.json").read_text())
        stats = NormStats.from_dict(json.loads((directory / "stats.json").read_text()))
        return cls(spec=GridSpec.from_dict(meta["grid"]),
                   layout=ChannelLayout.from_dict(meta["layout"]),
                   frames=gtsr.load(directory / "frames.gtsr"),
                   masks=gtsr.load(directory / "mask.gtsr"),
                   timestamps=[parse_hour(t) for t in meta["timestamps"]],
                   stats=stats,
                   boundary=parse_hour(meta["train_boundary"]),
                   rejected=int(meta.get("rejected_records", 0)))


def build_dataset(records: Sequence[SensorRecord], spec: GridSpec,
                  boundary: datetime,
                  wind_categories: tuple[str, ...] = COMPASS_8) -> GridDataset:
    """Full pipeline: group by hour, rasterize, broadcast external series,
    fill met gaps, split, normalize with training statistics."""
    layout = infer_layout(records, wind_categories)
    by_hour: dict[datetime, list[SensorRecord]] = {}
    for r in records:
        by_hour.setdefault(r.timestamp, []).append(r)
    hours = sorted(by_hour)

    frames = [rasterize(by_hour[h], spec, layout) for h in hours]
    if layout.external_areas:
        hourly = [{r.station_id: float(r.value) for r in by_hour[h] if r.kind == "external"}
                  for h in hours]
        ext = embed_external(hourly, layout.external_areas, spec)
        offset = layout.count - len(layout.external_areas)
        for t, frame in enumerate(frames):
            frame.channels[offset:] = ext[t]
    frames = fill_met_gaps(frames, layout)

    train_frames, _ = split_train_test(frames, boundary)
    stats = compute_stats(train_frames, layout)
    block = np.stack([f.channels for f in frames])
    return GridDataset(spec=spec, layout=layout,
                       frames=normalize_block(block, stats),
                       masks=np.stack([f.station_mask for f in frames]),
                       timestamps=hours, stats=stats, boundary=boundary,
                       rejected=sum(f.rejected for f in frames))
