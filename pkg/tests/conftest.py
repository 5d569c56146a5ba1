import numpy as np
import pytest

from gridcast import pipeline as P, world as W


@pytest.fixture(scope="session")
def tiny_dataset():
    """A small simulated city shared by training/evaluation tests."""
    cfg = W.WorldConfig(grid=(6, 6), hours=160, seed=5, pollution_stations=8,
                        met_stations=4, traffic_stations=6, speed_stations=6,
                        source_count=4, noise_sigma=0.4)
    result = W.simulate(cfg)
    spec = P.GridSpec(*cfg.bbox, *cfg.grid)
    return P.build_dataset(result.records, spec, result.timestamps[120])


class IdentityStats:
    """Stands in for a dataset when values should pass through unscaled."""

    @staticmethod
    def denormalize_pollutant(values):
        return np.asarray(values, dtype=np.float64)


@pytest.fixture
def identity_dataset():
    return IdentityStats()
