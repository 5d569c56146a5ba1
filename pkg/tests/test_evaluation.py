import math

import numpy as np
import pytest

from gridcast import evaluation as E, tensor as T
from gridcast.errors import ContractError, DimensionError
from gridcast.pipeline import SampleWindow


def window_from(inputs, target, mask=None):
    k = target.shape[0]
    if mask is None:
        mask = np.ones_like(target)
    return SampleWindow(inputs=inputs.astype(np.float32), target=target.astype(np.float32),
                        target_mask=mask.astype(np.float32), start=0)


class LastFrameStub:
    """Copies the last input pollutant frame forward; reads the zeroed pixel."""

    def forward(self, inputs, train=False, rng=None):
        k = 1
        return T.tensor(np.repeat(inputs[-1, 0][None], k, axis=0))


class NeighborFillStub:
    """Fills every cell with the largest 4-neighbor value of the last frame."""

    def forward(self, inputs, train=False, rng=None):
        frame = inputs[-1, 0]
        m, n = frame.shape
        out = np.zeros_like(frame)
        for i in range(m):
            for j in range(n):
                vals = [frame[x, y] for x, y in ((i - 1, j), (i + 1, j), (i, j - 1), (i, j + 1))
                        if 0 <= x < m and 0 <= y < n]
                out[i, j] = max(vals)
        return T.tensor(out[None])


# ---------------------------------------------------------------------------
# masked RMSE


def test_masked_rmse_zero_for_perfect_prediction():
    x = np.random.default_rng(0).uniform(0, 1, (2, 3, 3))
    assert E.masked_rmse(x, x, np.ones((3, 3))) == 0.0


def test_masked_rmse_single_cell():
    pred = np.zeros((1, 2, 2))
    target = np.zeros((1, 2, 2))
    target[0, 0, 0] = 3.0
    mask = np.zeros((2, 2))
    mask[0, 0] = 1
    assert E.masked_rmse(pred, target, mask) == pytest.approx(3.0)


def test_masked_rmse_two_cells_hand_value():
    pred = np.zeros((1, 1, 2))
    target = np.array([[[3.0, 4.0]]])
    mask = np.ones((1, 2))
    assert E.masked_rmse(pred, target, mask) == pytest.approx(math.sqrt(12.5))


def test_masked_rmse_symmetry_and_permutation():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(0, 1, (2, 4, 4)), rng.uniform(0, 1, (2, 4, 4))
    mask = (rng.uniform(0, 1, (4, 4)) > 0.5).astype(float)
    mask[0, 0] = 1
    assert E.masked_rmse(a, b, mask) == pytest.approx(E.masked_rmse(b, a, mask))
    # permuting the masked cells (here: transposing everything) keeps the value
    assert E.masked_rmse(a.transpose(0, 2, 1), b.transpose(0, 2, 1), mask.T) == \
        pytest.approx(E.masked_rmse(a, b, mask))


def test_masked_rmse_contract_errors():
    with pytest.raises(ContractError):
        E.masked_rmse(np.zeros((1, 2, 2)), np.zeros((1, 2, 2)), np.zeros((2, 2)))
    with pytest.raises(DimensionError):
        E.masked_rmse(np.zeros((1, 2, 2)), np.zeros((1, 3, 3)), np.ones((2, 2)))


# ---------------------------------------------------------------------------
# variance diagnostic


def test_variance_constant_field_is_zero():
    frames = [np.full((3, 3), 0.4)] * 10
    series, truncated = E.variance_diagnostic(frames, frames, np.ones((3, 3)))
    assert not truncated
    assert len(series) == 10
    assert all(row["var_pred"] == 0.0 for row in series)


def test_variance_hand_values():
    pred = [np.array([[0.0, 2.0]])]
    actual = [np.array([[1.0, 2.0], [3.0, 0.0]])]
    mask = np.array([[1, 1], [1, 0]])
    series, truncated = E.variance_diagnostic(pred, actual, mask, steps=1)
    assert series[0]["var_pred"] == pytest.approx(1.0)       # var of [0, 2]
    assert series[0]["var_actual"] == pytest.approx(2 / 3)   # var of [1, 2, 3]
    assert not truncated


def test_variance_population_three_values():
    pred = [np.array([[1.0, 2.0, 3.0]])]
    series, _ = E.variance_diagnostic(pred, pred, np.ones((1, 3)), steps=1)
    assert series[0]["var_pred"] == pytest.approx(2 / 3)


def test_variance_truncation_flagged():
    frames = [np.zeros((2, 2))] * 4
    series, truncated = E.variance_diagnostic(frames, frames, np.ones((2, 2)), steps=10)
    assert truncated and len(series) == 4


# ---------------------------------------------------------------------------
# leave-one-station error


def test_sp_rmse_last_frame_stub_reads_zeroed_pixel(identity_dataset):
    rng = np.random.default_rng(2)
    windows = []
    for _ in range(5):
        inputs = rng.uniform(0.2, 1.0, (3, 1, 3, 3))
        target = inputs[-1, 0][None].copy()
        mask = np.zeros((1, 3, 3))
        mask[:, 0, 0] = 1
        mask[:, 2, 2] = 1
        windows.append(window_from(inputs, target, mask))
    got = E.sp_rmse(LastFrameStub(), windows, identity_dataset)
    # the stub returns 0 at the zeroed station, so the per-station error is
    # the RMS of that station's actual values
    expected = np.mean([
        math.sqrt(np.mean([w.target[0, 0, 0] ** 2 for w in windows])),
        math.sqrt(np.mean([w.target[0, 2, 2] ** 2 for w in windows])),
    ])
    assert got == pytest.approx(expected, rel=1e-6)


def test_sp_rmse_neighbor_fill_recovers_constant_field(identity_dataset):
    windows = []
    for value in (0.3, 0.7):
        inputs = np.full((2, 1, 3, 3), value)
        target = np.full((1, 3, 3), value)
        mask = np.zeros((1, 3, 3))
        mask[:, 1, 1] = 1
        windows.append(window_from(inputs, target, mask))
    assert E.sp_rmse(NeighborFillStub(), windows, identity_dataset) == pytest.approx(0.0)


def test_sp_rmse_matches_naive_loop(identity_dataset):
    rng = np.random.default_rng(3)
    windows = []
    for _ in range(4):
        inputs = rng.uniform(0, 1, (2, 1, 4, 4))
        target = rng.uniform(0, 1, (1, 4, 4))
        mask = np.zeros((1, 4, 4))
        for r, c in ((0, 1), (2, 2), (3, 0)):
            mask[:, r, c] = 1
        windows.append(window_from(inputs, target, mask))
    stub = LastFrameStub()
    fast = E.sp_rmse(stub, windows, identity_dataset)
    slow = E.sp_rmse_naive(stub, windows, identity_dataset)
    assert fast == pytest.approx(slow, abs=1e-6)


def test_sp_rmse_threaded_matches_serial(identity_dataset, monkeypatch):
    rng = np.random.default_rng(4)
    windows = []
    for _ in range(3):
        inputs = rng.uniform(0, 1, (2, 1, 3, 3))
        target = rng.uniform(0, 1, (1, 3, 3))
        mask = np.ones((1, 3, 3))
        windows.append(window_from(inputs, target, mask))
    stub = LastFrameStub()
    serial = E.sp_rmse(stub, windows, identity_dataset)
    monkeypatch.setenv("GRIDCAST_THREADS", "4")
    threaded = E.sp_rmse(stub, windows, identity_dataset)
    assert serial == pytest.approx(threaded, abs=1e-12)


# ---------------------------------------------------------------------------
# persistence and evaluate


def test_persistence_prediction_copies_last_frame():
    inputs = np.zeros((2, 3, 2, 2), dtype=np.float32)
    inputs[-1, 0] = [[1, 2], [3, 4]]
    w = window_from(inputs, np.zeros((3, 2, 2)))
    pred = E.persistence_prediction(w)
    assert pred.shape == (3, 2, 2)
    for k in range(3):
        assert np.array_equal(pred[k], inputs[-1, 0])


def test_evaluate_rmse_fields(identity_dataset):
    rng = np.random.default_rng(5)
    windows = []
    for _ in range(4):
        inputs = rng.uniform(0, 1, (2, 1, 3, 3))
        target = rng.uniform(0, 1, (2, 3, 3))
        windows.append(window_from(inputs, target))
    out = E.evaluate_rmse(LastFrameStub2(), windows, identity_dataset, max_windows=3)
    assert out["eval_windows"] == 3
    assert len(out["per_step_rmse"]) == 2
    assert out["rmse"] >= 0 and out["rmse_persistence"] >= 0
    assert len(out["predictions"]) == 3


class LastFrameStub2:
    def forward(self, inputs, train=False, rng=None):
        return T.tensor(np.repeat(inputs[-1, 0][None], 2, axis=0))


# ---------------------------------------------------------------------------
# reports and heatmaps


def test_report_round_trip(tmp_path):
    report = E.EvalReport(rmse=1.25, config={"arch": "convlstm"}, name="demo",
                          sp_rmse=2.0, rmse_persistence=1.5,
                          per_step_rmse=[1.0, 1.5],
                          variance_series=[{"step": 0, "var_pred": 0.5, "var_actual": 0.75}],
                          train_windows=10, eval_windows=5, seed=3, wall_clock_sec=1.0)
    path = tmp_path / "report.json"
    report.save(path)
    back = E.EvalReport.load(path)
    assert back.to_dict() == report.to_dict()


def test_report_schema_rejects_nonsense():
    import jsonschema

    bad = E.EvalReport(rmse=-1.0, config={})
    with pytest.raises(jsonschema.ValidationError):
        bad.validate()


def test_pgm_heatmap_layout(tmp_path):
    grid = np.array([[0.0, 0.5], [1.0, 2.0]])
    path = tmp_path / "map.pgm"
    E.write_pgm(path, grid)
    raw = path.read_bytes()
    assert raw.startswith(b"P5\n2 2\n255\n")
    pixels = raw.split(b"255\n", 1)[1]
    assert list(pixels) == [0, 127, 255, 255]  # clamp at 255


def test_export_heatmaps(tmp_path):
    frames = [np.random.default_rng(6).uniform(0, 2, (3, 3)) for _ in range(3)]
    written = E.export_heatmaps(tmp_path, "demo", frames, limit=2)
    assert len(written) == 4
    for path in written:
        assert path.exists()


def test_worker_count_env(monkeypatch):
    monkeypatch.delenv("GRIDCAST_THREADS", raising=False)
    assert E.worker_count() == 1
    monkeypatch.setenv("GRIDCAST_THREADS", "3")
    assert E.worker_count() == 3
    monkeypatch.setenv("GRIDCAST_THREADS", "junk")
    assert E.worker_count() == 1
