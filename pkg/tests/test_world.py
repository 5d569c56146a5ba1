import numpy as np
import pytest

from gridcast import pipeline as P, world as W
from gridcast.errors import ConfigError


def small_cfg(**kw):
    base = dict(grid=(8, 8), hours=48, seed=7, pollution_stations=6, met_stations=4,
                traffic_stations=8, speed_stations=8, source_count=4)
    base.update(kw)
    return W.WorldConfig(**base)


# ---------------------------------------------------------------------------
# stepper


def test_static_world_is_constant():
    cfg = small_cfg(diffusion=0.0, wind_mean=0.0, wind_max=0.0, source_count=0,
                    source_strength=0.0, background_emission=0.0, inflow_rate=0.0,
                    decay=0.0, hours=20)
    result = W.simulate(cfg)
    for t in range(1, cfg.hours):
        assert np.array_equal(result.truth[t], result.truth[0])


def test_impulse_diffusion_conserves_mass_and_flattens():
    F = np.zeros((9, 9))
    F[4, 4] = 100.0
    mass0 = F.sum()
    peak_prev = F.max()
    for step in range(100):
        F = W.diffuse(F, 0.2)
        assert F.sum() == pytest.approx(mass0, rel=1e-6)
        assert F.max() <= peak_prev + 1e-12
        peak_prev = F.max()
    assert F.max() < 100.0
    assert F.min() > 0.0


def test_advection_mass_conserved_reflecting():
    rng = np.random.default_rng(3)
    F = rng.uniform(0, 10, (7, 7))
    mass0 = F.sum()
    for _ in range(100):
        F = W.advect(F, 0.6, -0.35)
    assert F.sum() == pytest.approx(mass0, rel=1e-6)


def test_unit_cfl_advection_is_exact_shift():
    rng = np.random.default_rng(4)
    F = rng.uniform(0, 5, (6, 6))
    moved = W.advect(F, 1.0, 0.0)  # due east at unit CFL
    assert np.allclose(moved[:, 1:-1], F[:, :-2])


def test_combined_step_mass_conservation_no_sources():
    cfg = small_cfg(source_count=0, source_strength=0.0, background_emission=0.0,
                    inflow_rate=0.0, decay=0.0, hours=100)
    result = W.simulate(cfg)
    masses = result.truth.reshape(cfg.hours, -1).sum(axis=1)
    assert masses[-1] == pytest.approx(masses[0], rel=1e-6)


def test_unstable_configs_rejected_with_bound():
    with pytest.raises(ConfigError, match="0.25"):
        small_cfg(diffusion=0.4)
    with pytest.raises(ConfigError, match="1.0"):
        small_cfg(wind_max=1.5)
    with pytest.raises(ConfigError, match="hours"):
        small_cfg(hours=0)


# ---------------------------------------------------------------------------
# sampling and export


def test_record_count_is_stations_times_hours_times_keys():
    cfg = small_cfg(hours=5)
    result = W.simulate(cfg)
    expected_per_hour = (cfg.pollution_stations * 1 + cfg.met_stations * 4
                         + cfg.traffic_stations * 1 + cfg.speed_stations * 1
                         + len(cfg.external_areas) * 1)
    assert len(result.records) == expected_per_hour * cfg.hours


def test_station_samples_within_noise_bound():
    cfg = small_cfg(hours=30, noise_sigma=0.5)
    result = W.simulate(cfg)
    cells = np.array(result.stations["pollution"])
    by_hour = {}
    for r in result.records:
        if r.kind == "pollution":
            by_hour.setdefault(r.timestamp, []).append(r)
    for t, stamp in enumerate(result.timestamps):
        for i, r in enumerate(sorted(by_hour[stamp], key=lambda x: x.station_id)):
            truth_val = result.truth[t, cells[i, 0], cells[i, 1]]
            # sample = truth + noise, floored at zero
            assert r.value >= 0.0
            assert abs(r.value - truth_val) <= 6 * cfg.noise_sigma + max(0.0, -truth_val)


def test_fixed_seed_reproducible_csv(tmp_path):
    cfg = small_cfg(hours=6)
    a = W.export_world(W.simulate(cfg), tmp_path / "a")
    b = W.export_world(W.simulate(cfg), tmp_path / "b")
    assert (tmp_path / "a" / "sensors.csv").read_bytes() == \
        (tmp_path / "b" / "sensors.csv").read_bytes()
    assert (tmp_path / "a" / "truth.gtsr").read_bytes() == \
        (tmp_path / "b" / "truth.gtsr").read_bytes()
    assert a["csv"].name == "sensors.csv"


def test_different_seed_changes_world():
    a = W.simulate(small_cfg(hours=6, seed=1))
    b = W.simulate(small_cfg(hours=6, seed=2))
    assert not np.array_equal(a.truth, b.truth)


def test_export_round_trip_through_pipeline(tmp_path):
    cfg = small_cfg(hours=40, noise_sigma=0.3)
    result = W.simulate(cfg)
    paths = W.export_world(result, tmp_path)
    records = P.read_sensor_csv(paths["csv"])
    assert len(records) == len(result.records)

    lat_min, lat_max, lon_min, lon_max = cfg.bbox
    spec = P.GridSpec(lat_min, lat_max, lon_min, lon_max, *cfg.grid)
    ds = P.build_dataset(records, spec, result.timestamps[30])
    assert ds.frames.shape == (40, ds.layout.count, 8, 8)
    assert ds.rejected == 0

    # station cells carry the sampled (noisy) truth after denormalization
    cells = np.array(result.stations["pollution"])
    mask_cells = {(int(r), int(c)) for r, c in cells}
    for r, c in mask_cells:
        assert ds.masks[0, r, c] == 1.0
    t_check = 5
    denorm = ds.denormalize_pollutant(ds.frames[t_check, 0])
    for r, c in mask_cells:
        truth_val = result.truth[t_check, r, c]
        assert abs(denorm[r, c] - truth_val) <= 6 * cfg.noise_sigma + 1e-3


def test_wind_category_sectors():
    assert W.wind_category(0.0, 1.0) == "N"
    assert W.wind_category(1.0, 0.0) == "E"
    assert W.wind_category(0.0, -1.0) == "S"
    assert W.wind_category(-1.0, 0.0) == "W"
    assert W.wind_category(1.0, 1.0) == "NE"


def test_rush_hour_profile_shape():
    values = [W.rush_hour_profile(h) for h in range(24)]
    assert values[8] > values[3]
    assert values[18] > values[13]
    assert all(0 < v <= 1.0 for v in values)
