"""Synthetic city generator.

A pollution field evolves by explicit upwind advection under a slowly
rotating wind, flux-form diffusion, traffic-shaped emission sources with two
rush-hour bumps, boundary inflow driven by external-area series, and uniform
decay. Virtual stations sample the field (plus covariates) with measurement
noise and emit the sensor CSV the grid pipeline consumes, alongside the
dense ground-truth field so interpolation error is measurable at unobserved
cells too.

The stepper is first-order and deliberately simple: the field only needs
genuine spatiotemporal structure, not atmospheric fidelity.
"""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from datetime import datetime, timedelta, timezone
from pathlib import Path

import numpy as np

from . import gtsr
from .errors import ConfigError
from .pipeline import COMPASS_8, SensorRecord, format_hour, write_sensor_csv
from .seeding import sub_rng

START = datetime(2015, 1, 1, tzinfo=timezone.utc)

MET_KEYS = ("temperature", "humidity", "wind_speed")


@dataclass
class WorldConfig:
    grid: tuple[int, int] = (32, 32)
    hours: int = 720
    seed: int = 0
    diffusion: float = 0.15          # cells^2/hr; explicit stepper needs <= 0.25
    decay: float = 0.05              # 1/hr uniform loss
    wind_mean: float = 0.55          # cells/hr
    wind_max: float = 0.95           # cells/hr; upwind scheme needs <= 1.0
    wind_turn: float = 0.2           # direction random-walk scale, radians/hr
    source_count: int = 12
    source_strength: float = 6.0     # peak emission, concentration/hr
    background_emission: float = 0.25  # citywide distributed source, concentration/hr
    inflow_rate: float = 0.6
    pollution_stations: int = 39
    met_stations: int = 28
    traffic_stations: int = 145
    speed_stations: int = 400        # stands in for the ~4000 real survey points
    external_areas: tuple[str, ...] = ("east_basin", "north_plains", "west_channel")
    noise_sigma: float = 1.0         # measurement noise, concentration units
    bbox: tuple[float, float, float, float] = (37.42, 37.70, 126.78, 127.18)

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        self.external_areas = tuple(self.external_areas)
        self.bbox = tuple(float(b) for b in self.bbox)
        if self.hours < 1:
            raise ConfigError(f"hours must be >= 1, got {self.hours}")
        if min(self.grid) < 2:
            raise ConfigError("grid must be at least 2x2")
        if self.diffusion < 0 or self.diffusion > 0.25:
            raise ConfigError(
                f"stability bound violated: diffusion*dt = {self.diffusion} must be in [0, 0.25]")
        if self.wind_max < 0 or self.wind_max > 1.0:
            raise ConfigError(
                f"stability bound violated: |wind|*dt = {self.wind_max} must be in [0, 1.0]")
        if not 0.0 <= self.decay < 1.0:
            raise ConfigError("decay must lie in [0, 1)")
        if self.noise_sigma < 0:
            raise ConfigError("noise sigma must be nonnegative")
        if len(self.external_areas) > 3:
            raise ConfigError("at most three external areas are supported")

    def to_dict(self) -> dict:
        return {"grid": list(self.grid), "hours": self.hours, "seed": self.seed,
                "diffusion": self.diffusion, "decay": self.decay,
                "wind_mean": self.wind_mean, "wind_max": self.wind_max,
                "wind_turn": self.wind_turn, "source_count": self.source_count,
                "source_strength": self.source_strength,
                "background_emission": self.background_emission,
                "inflow_rate": self.inflow_rate,
                "pollution_stations": self.pollution_stations,
                "met_stations": self.met_stations,
                "traffic_stations": self.traffic_stations,
                "speed_stations": self.speed_stations,
                "external_areas": list(self.external_areas),
                "noise_sigma": self.noise_sigma, "bbox": list(self.bbox)}

    @classmethod
    def from_dict(cls, d: dict) -> "WorldConfig":
        d = dict(d)
        if "grid" in d:
            d["grid"] = tuple(d["grid"])
        if "external_areas" in d:
            d["external_areas"] = tuple(d["external_areas"])
        if "bbox" in d:
            d["bbox"] = tuple(d["bbox"])
        return cls(**d)


def advect(F: np.ndarray, u: float, v: float) -> np.ndarray:
    """Directionally split first-order upwind transport, reflecting walls.

    u moves mass along columns (east when positive), v along rows (north
    when positive). Zero boundary flux, so interior mass shifts exactly one
    cell at unit CFL and total mass is conserved.
    """
    out = F.copy()
    if u > 0:
        fx = u * out[:, :-1]
        out[:, :-1] -= fx
        out[:, 1:] += fx
    elif u < 0:
        fx = -u * out[:, 1:]
        out[:, 1:] -= fx
        out[:, :-1] += fx
    if v > 0:
        fy = v * out[:-1, :]
        out[:-1, :] -= fy
        out[1:, :] += fy
    elif v < 0:
        fy = -v * out[1:, :]
        out[1:, :] -= fy
        out[:-1, :] += fy
    return out


def diffuse(F: np.ndarray, kappa: float) -> np.ndarray:
    """Flux-form five-point diffusion with zero-flux boundaries."""
    if kappa == 0.0:
        return F
    out = F.copy()
    fx = kappa * (F[:, 1:] - F[:, :-1])
    out[:, :-1] += fx
    out[:, 1:] -= fx
    fy = kappa * (F[1:, :] - F[:-1, :])
    out[:-1, :] += fy
    out[1:, :] -= fy
    return out


def rush_hour_profile(hour_of_day: float) -> float:
    """Two gaussian commute bumps over a small nighttime base, in [0, 1]."""
    morning = math.exp(-0.5 * ((hour_of_day - 8.0) / 2.0) ** 2)
    evening = math.exp(-0.5 * ((hour_of_day - 18.0) / 2.5) ** 2)
    return 0.15 + 0.85 * min(1.0, morning + evening)


def wind_category(u: float, v: float, rose: tuple[str, ...] = COMPASS_8) -> str:
    """Compass sector of the (east, north) drift vector."""
    angle = math.degrees(math.atan2(u, v)) % 360.0
    sector = int(round(angle / (360.0 / len(rose)))) % len(rose)
    return rose[sector]


@dataclass
class SimResult:
    config: WorldConfig
    truth: np.ndarray                    # (T, M, N) float32
    records: list[SensorRecord]
    timestamps: list[datetime]
    wind: np.ndarray                     # (T, 2) u, v per hour
    stations: dict = field(default_factory=dict)


def _place_stations(rng: np.random.Generator, count: int, m: int, n: int,
                    near: np.ndarray | None = None) -> np.ndarray:
    """Random station cells; with ``near`` given, cells cluster around those
    anchor cells (used to park traffic counters on the road sources)."""
    if near is not None and len(near):
        picks = near[rng.integers(0, len(near), size=count)]
        jitter = rng.integers(-1, 2, size=(count, 2))
        cells = np.clip(picks + jitter, [0, 0], [m - 1, n - 1])
        return cells
    flat = rng.choice(m * n, size=min(count, m * n), replace=False)
    cells = np.stack([flat // n, flat % n], axis=1)
    if count > len(cells):  # tiny grids: allow shared cells for the overflow
        extra = rng.integers(0, [m, n], size=(count - len(cells), 2))
        cells = np.concatenate([cells, extra])
    return cells


def _station_coords(rng: np.random.Generator, cells: np.ndarray,
                    cfg: WorldConfig) -> np.ndarray:
    lat_min, lat_max, lon_min, lon_max = cfg.bbox
    m, n = cfg.grid
    dlat, dlon = (lat_max - lat_min) / m, (lon_max - lon_min) / n
    lat = lat_min + (cells[:, 0] + 0.5 + rng.uniform(-0.3, 0.3, len(cells))) * dlat
    lon = lon_min + (cells[:, 1] + 0.5 + rng.uniform(-0.3, 0.3, len(cells))) * dlon
    return np.stack([lat, lon], axis=1)


def simulate(cfg: WorldConfig) -> SimResult:
    """Run the city forward ``cfg.hours`` hours and sample every station."""
    m, n = cfg.grid
    seed = cfg.seed

    layout_rng = sub_rng(seed, "world.layout")
    wind_rng = sub_rng(seed, "world.wind")
    met_rng = sub_rng(seed, "world.met")
    ext_rng = sub_rng(seed, "world.external")
    sample_rng = sub_rng(seed, "world.sampling")

    # emission sources cluster around a few arterial anchors
    margin = 1 if min(m, n) > 4 else 0
    anchors = layout_rng.integers([margin, margin], [m - margin, n - margin],
                                  size=(max(2, cfg.source_count // 4), 2))
    source_cells = _place_stations(layout_rng, cfg.source_count, m, n, near=anchors)
    source_strength = cfg.source_strength * layout_rng.lognormal(0.0, 0.25, cfg.source_count)

    stations = {
        "pollution": _place_stations(layout_rng, cfg.pollution_stations, m, n),
        "met": _place_stations(layout_rng, cfg.met_stations, m, n),
        "traffic": _place_stations(layout_rng, cfg.traffic_stations, m, n, near=source_cells),
        "speed": _place_stations(layout_rng, cfg.speed_stations, m, n, near=source_cells),
    }
    coords = {kind: _station_coords(layout_rng, cells, cfg)
              for kind, cells in stations.items()}
    traffic_site = layout_rng.lognormal(0.0, 0.3, cfg.traffic_stations)
    speed_site = layout_rng.uniform(0.8, 1.2, cfg.speed_stations)

    # external-area series: positive, slowly varying, with a diurnal swing
    ext_level = ext_rng.uniform(8.0, 20.0, len(cfg.external_areas))
    ext_state = ext_level.copy()
    sides = ("west", "north", "east")[:len(cfg.external_areas)]

    theta = wind_rng.uniform(0, 2 * math.pi)
    speed_state = cfg.wind_mean

    # walls deposit harder than the interior so advected mass cannot pile up
    # against the reflecting boundary; decay=0 still conserves mass exactly
    retain = np.full((m, n), 1.0 - cfg.decay)
    edge = np.zeros((m, n), dtype=bool)
    edge[0, :] = edge[-1, :] = True
    edge[:, 0] = edge[:, -1] = True
    retain[edge] = 1.0 - min(1.0, 4.0 * cfg.decay)

    truth = np.zeros((cfg.hours, m, n), dtype=np.float32)
    wind_series = np.zeros((cfg.hours, 2))
    records: list[SensorRecord] = []
    timestamps: list[datetime] = []

    F = np.full((m, n), 2.0)
    temp_state, humid_state = 0.0, 0.0

    for t in range(cfg.hours):
        stamp = START + timedelta(hours=t)
        hod = stamp.hour

        # wind: persistent direction random walk, AR(1) speed
        theta += cfg.wind_turn * wind_rng.normal()
        speed_state += 0.15 * (cfg.wind_mean - speed_state) + 0.08 * wind_rng.normal()
        speed_state = float(np.clip(speed_state, 0.05, cfg.wind_max))
        u, v = speed_state * math.cos(theta), speed_state * math.sin(theta)
        wind_series[t] = (u, v)

        # met fields shared across the city
        temp_state += 0.2 * (0.0 - temp_state) + 0.6 * met_rng.normal()
        humid_state += 0.2 * (0.0 - humid_state) + 1.5 * met_rng.normal()
        temperature = 10.0 + 8.0 * math.sin(2 * math.pi * (hod - 9) / 24.0) + temp_state
        humidity = 60.0 - 1.5 * (temperature - 10.0) + humid_state
        profile = rush_hour_profile(hod)

        # external series drift around their level with their own commute swing
        ext_state += 0.1 * (ext_level - ext_state) + 0.8 * ext_rng.normal(size=ext_state.shape)
        ext_state = np.clip(ext_state, 0.0, None)
        ext_values = ext_state * (0.7 + 0.3 * profile)

        truth[t] = F
        timestamps.append(stamp)
        records.extend(_sample_hour(cfg, stamp, F, stations, coords, traffic_site,
                                    speed_site, temperature, humidity, u, v,
                                    profile, ext_values, sample_rng))

        # evolve to the next hour
        F = advect(F, u, v)
        F = diffuse(F, cfg.diffusion)
        F += cfg.background_emission * profile
        for (r, c), s in zip(source_cells, source_strength):
            F[r, c] += s * profile
        for side, e in zip(sides, ext_values):
            if side == "west" and u > 0:
                F[:, 0] += cfg.inflow_rate * u * e / m
            elif side == "east" and u < 0:
                F[:, -1] += cfg.inflow_rate * (-u) * e / m
            elif side == "north" and v < 0:
                F[-1, :] += cfg.inflow_rate * (-v) * e / n
        F *= retain

    return SimResult(config=cfg, truth=truth, records=records,
                     timestamps=timestamps, wind=wind_series,
                     stations={k: v.tolist() for k, v in stations.items()})


def _sample_hour(cfg, stamp, F, stations, coords, traffic_site, speed_site,
                 temperature, humidity, u, v, profile, ext_values, rng):
    sigma = cfg.noise_sigma
    out = []
    for i, (cell, (lat, lon)) in enumerate(zip(stations["pollution"], coords["pollution"])):
        value = max(0.0, F[cell[0], cell[1]] + sigma * rng.normal())
        out.append(SensorRecord(f"aq{i:03d}", "pollution", lat, lon, stamp, "pm25", value))
    speed_kmh = math.hypot(u, v) * 12.0
    category = wind_category(u, v)
    for i, (cell, (lat, lon)) in enumerate(zip(stations["met"], coords["met"])):
        out.append(SensorRecord(f"met{i:03d}", "met", lat, lon, stamp, "temperature",
                                temperature + 0.3 * rng.normal()))
        out.append(SensorRecord(f"met{i:03d}", "met", lat, lon, stamp, "humidity",
                                float(np.clip(humidity + 1.0 * rng.normal(), 0, 100))))
        out.append(SensorRecord(f"met{i:03d}", "met", lat, lon, stamp, "wind_speed",
                                max(0.0, speed_kmh + 0.4 * rng.normal())))
        out.append(SensorRecord(f"met{i:03d}", "met", lat, lon, stamp, "wind_dir", category))
    for i, (lat, lon) in enumerate(coords["traffic"]):
        volume = 1500.0 * traffic_site[i] * (0.15 + profile) + 40.0 * rng.normal()
        out.append(SensorRecord(f"tv{i:03d}", "traffic", lat, lon, stamp, "volume",
                                max(0.0, volume)))
    for i, (lat, lon) in enumerate(coords["speed"]):
        speed = 46.0 * speed_site[i] - 26.0 * profile + 1.5 * rng.normal()
        out.append(SensorRecord(f"sp{i:03d}", "speed", lat, lon, stamp, "speed",
                                max(1.0, speed)))
    lat_out = cfg.bbox[1] + 1.0
    for area, value in zip(cfg.external_areas, ext_values):
        out.append(SensorRecord(area, "external", lat_out, cfg.bbox[3] + 1.0, stamp,
                                "pm25", float(value)))
    return out


# ---------------------------------------------------------------------------
# export


def export_world(result: SimResult, out_dir) -> dict:
    """Write the sensor CSV and the ground-truth bundle; returns the paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / "sensors.csv"
    write_sensor_csv(csv_path, result.records)
    truth_path = out_dir / "truth.gtsr"
    gtsr.save(truth_path, result.truth)
    meta = {
        "config": result.config.to_dict(),
        "hours": [format_hour(t) for t in result.timestamps],
        "stations": result.stations,
        "record_count": len(result.records),
    }
    meta_path = out_dir / "world.json"
    meta_path.write_text(json.dumps(meta, indent=2))
    return {"csv": csv_path, "truth": truth_path, "meta": meta_path}
