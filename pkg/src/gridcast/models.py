"""Model architectures over the recurrent cells.

Four forecasters share one contract: ``forward`` maps a (J, C, M, N) input
window to a (K, M, N) prediction tensor.

* ``ConvLstmForecaster`` — stacked convolutional-LSTM encoder whose final
  states seed an identically shaped forecasting stack; the forecaster gets
  zero input at every step (state carries all information) and each step's
  layer hiddens are concatenated channel-wise into a 1x1 convolution head.
* ``FcLstmModel`` — flattened frames through stacked plain LSTM cells, then
  a fully connected readout.
* ``CnnEncoderDecoder`` — frames stacked as channels through a convolution
  encoder and a transposed-convolution decoder, stride 1 throughout.
* ``DalModel`` — per-cell feature vectors through a pretrained autoencoder
  trunk and a regression head, trained with the neighbor-smoothing loss.
"""

from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np

from . import gtsr, tensor as T
from .cells import CellState, ConvLstmParams, LstmParams, convlstm_step, lstm_step
from .errors import ConfigError, DimensionError, IntegrityError, StateError
from .tensor import Tensor

ARCHES = ("convlstm", "fc_lstm", "cnn_ed", "dal")


@dataclass
class ModelConfig:
    """Architecture plus hyperparameters; ``output_steps=1`` is interpolation,
    larger values are prediction."""

    arch: str
    grid: tuple[int, int]
    in_channels: int
    input_steps: int
    output_steps: int
    encoder_layers: int = 1
    forecaster_layers: int = 1
    channels: list[int] = field(default_factory=lambda: [64])
    kernel: int = 3
    hidden_size: int = 2000
    stacked_cells: int = 3
    ae_layers: int = 4
    ae_width: int = 2000
    ae_epochs: int = 20
    use_st_loss: bool = False
    st_loss_weight: float = 0.1
    dropout: float = 0.5
    l2_beta: float = 0.01
    peephole: bool = True

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        self.channels = [int(c) for c in self.channels]
        if self.arch not in ARCHES:
            raise ConfigError(f"unknown arch {self.arch!r}, expected one of {ARCHES}")
        if self.input_steps < 1 or self.output_steps < 1:
            raise ConfigError("input_steps and output_steps must be >= 1")
        if self.arch in ("convlstm", "cnn_ed"):
            if len(self.channels) != self.encoder_layers:
                raise ConfigError(
                    f"channels list has {len(self.channels)} entries for "
                    f"{self.encoder_layers} encoder layers")
            if self.encoder_layers != self.forecaster_layers:
                raise ConfigError("encoder and forecaster stacks must be the same depth")
        if not 0.0 <= self.dropout < 1.0:
            raise ConfigError("dropout must lie in [0, 1)")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{k: v for k, v in d.items()})


def _maybe_dropout(x: Tensor, rate: float, rng) -> Tensor:
    """Inverted dropout on a non-recurrent connection; identity at eval."""
    if rng is None or rate <= 0.0:
        return x
    keep = (rng.random(x.shape) >= rate).astype(x.data.dtype) / (1.0 - rate)
    return x * T.tensor(keep)


class ConvLstmForecaster:
    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        m, n = cfg.grid
        self.encoder: list[ConvLstmParams] = []
        self.forecaster: list[ConvLstmParams] = []
        for stack, store in (("enc", self.encoder), ("fct", self.forecaster)):
            in_ch = cfg.in_channels
            for i, hidden in enumerate(cfg.channels):
                store.append(ConvLstmParams(in_ch, hidden, cfg.kernel, (m, n), rng,
                                            peephole=cfg.peephole, dtype=dtype,
                                            prefix=f"{stack}{i}"))
                in_ch = hidden
        total_hidden = sum(cfg.channels)
        self.head_w = T.uniform(rng, -1 / np.sqrt(total_hidden), 1 / np.sqrt(total_hidden),
                                (1, total_hidden, 1, 1), dtype=dtype, name="head.w")
        self.head_b = T.zeros((1,), dtype=dtype, requires_grad=True, name="head.b")

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for stack, layers in (("enc", self.encoder), ("fct", self.forecaster)):
            for i, layer in enumerate(layers):
                out += [(f"{stack}{i}.{n}", t) for n, t in layer.named()]
        out += [("head.w", self.head_w), ("head.b", self.head_b)]
        return out

    def _run_stack(self, layers, x: Tensor, states: list[CellState],
                   train: bool, rng) -> Tensor:
        h = x
        for i, layer in enumerate(layers):
            if i > 0 and train:
                h = _maybe_dropout(h, self.cfg.dropout, rng)
            states[i] = convlstm_step(layer, h, states[i])
            h = states[i].h
        return h

    def encode(self, inputs: np.ndarray, train: bool = False, rng=None) -> list[CellState]:
        """Consume the J input frames; returns each layer's final state."""
        if inputs.shape != (self.cfg.input_steps, self.cfg.in_channels, *self.cfg.grid):
            raise DimensionError(
                f"expected inputs {(self.cfg.input_steps, self.cfg.in_channels, *self.cfg.grid)},"
                f" got {inputs.shape}")
        dtype = self.head_w.dtype
        states = [layer.initial_state(dtype) for layer in self.encoder]
        for t in range(inputs.shape[0]):
            self._run_stack(self.encoder, T.tensor(inputs[t].astype(dtype)), states, train, rng)
        return states

    def forecast(self, init_states: list[CellState], train: bool = False, rng=None) -> Tensor:
        """Roll the forecasting stack K steps from the handed-over states.

        Every step gets a zero input frame; per step, the layer hiddens are
        concatenated across channels and pooled by the 1x1 head.
        """
        dtype = self.head_w.dtype
        states = list(init_states)
        zero_in = T.zeros((self.cfg.in_channels, *self.cfg.grid), dtype=dtype)
        frames = []
        for _ in range(self.cfg.output_steps):
            self._run_stack(self.forecaster, zero_in, states, train, rng)
            stacked = states[0].h if len(states) == 1 else T.concat([s.h for s in states], axis=0)
            frames.append(T.bias_add(T.conv1x1(stacked, self.head_w), self.head_b))
        return frames[0] if len(frames) == 1 else T.concat(frames, axis=0)

    def forward(self, inputs: np.ndarray, train: bool = False, rng=None) -> Tensor:
        return self.forecast(self.encode(inputs, train, rng), train, rng)


class FcLstmModel:
    """Stacked plain-LSTM over flattened frames with a fully connected readout."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        m, n = cfg.grid
        flat = cfg.in_channels * m * n
        self.cells: list[LstmParams] = []
        in_size = flat
        for i in range(cfg.stacked_cells):
            self.cells.append(LstmParams(in_size, cfg.hidden_size, rng, dtype=dtype,
                                         prefix=f"cell{i}"))
            in_size = cfg.hidden_size
        out_size = cfg.output_steps * m * n
        bound = 1.0 / np.sqrt(cfg.hidden_size)
        self.head_w = T.uniform(rng, -bound, bound, (out_size, cfg.hidden_size),
                                dtype=dtype, name="head.w")
        self.head_b = T.zeros((out_size, 1), dtype=dtype, requires_grad=True, name="head.b")

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, cell in enumerate(self.cells):
            out += [(f"cell{i}.{n}", t) for n, t in cell.named()]
        out += [("head.w", self.head_w), ("head.b", self.head_b)]
        return out

    def forward(self, inputs: np.ndarray, train: bool = False, rng=None) -> Tensor:
        cfg = self.cfg
        m, n = cfg.grid
        expected = (cfg.input_steps, cfg.in_channels, m, n)
        if inputs.shape != expected:
            raise DimensionError(f"expected inputs {expected}, got {inputs.shape}")
        dtype = self.head_w.dtype
        states = [cell.initial_state(dtype) for cell in self.cells]
        for t in range(cfg.input_steps):
            h = T.tensor(inputs[t].reshape(-1, 1).astype(dtype))
            for i, cell in enumerate(self.cells):
                if i > 0 and train:
                    h = _maybe_dropout(h, cfg.dropout, rng)
                states[i] = lstm_step(cell, h, states[i])
                h = states[i].h
        out = T.matmul(self.head_w, states[-1].h) + self.head_b
        return T.reshape(out, (cfg.output_steps, m, n))


class CnnEncoderDecoder:
    """Convolution encoder plus transposed-convolution decoder, stride 1
    same-padding everywhere so no spatial information is destroyed."""

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        k = cfg.kernel
        self.enc_w, self.enc_b, self.dec_w, self.dec_b = [], [], [], []
        in_ch = cfg.in_channels * cfg.input_steps
        for i, out_ch in enumerate(cfg.channels):
            fan = in_ch * k * k
            self.enc_w.append(T.uniform(rng, -1 / np.sqrt(fan), 1 / np.sqrt(fan),
                                        (out_ch, in_ch, k, k), dtype=dtype, name=f"enc{i}.w"))
            self.enc_b.append(T.zeros((out_ch,), dtype=dtype, requires_grad=True,
                                      name=f"enc{i}.b"))
            in_ch = out_ch
        dec_out = list(reversed(cfg.channels[:-1])) + [cfg.output_steps]
        for i, out_ch in enumerate(dec_out):
            fan = in_ch * k * k
            self.dec_w.append(T.uniform(rng, -1 / np.sqrt(fan), 1 / np.sqrt(fan),
                                        (in_ch, out_ch, k, k), dtype=dtype, name=f"dec{i}.w"))
            self.dec_b.append(T.zeros((out_ch,), dtype=dtype, requires_grad=True,
                                      name=f"dec{i}.b"))
            in_ch = out_ch

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(zip(self.enc_w, self.enc_b)):
            out += [(f"enc{i}.w", w), (f"enc{i}.b", b)]
        for i, (w, b) in enumerate(zip(self.dec_w, self.dec_b)):
            out += [(f"dec{i}.w", w), (f"dec{i}.b", b)]
        return out

    def forward(self, inputs: np.ndarray, train: bool = False, rng=None) -> Tensor:
        cfg = self.cfg
        m, n = cfg.grid
        expected = (cfg.input_steps, cfg.in_channels, m, n)
        if inputs.shape != expected:
            raise DimensionError(f"expected inputs {expected}, got {inputs.shape}")
        dtype = self.enc_w[0].dtype
        h = T.tensor(inputs.reshape(-1, m, n).astype(dtype))
        for i, (w, b) in enumerate(zip(self.enc_w, self.enc_b)):
            if i > 0 and train:
                h = _maybe_dropout(h, cfg.dropout, rng)
            h = T.relu(T.bias_add(T.conv2d(h, w), b))
        last = len(self.dec_w) - 1
        for i, (w, b) in enumerate(zip(self.dec_w, self.dec_b)):
            h = T.bias_add(T.conv_transpose2d(h, w), b)
            if i != last:
                h = T.relu(h)
                if train:
                    h = _maybe_dropout(h, cfg.dropout, rng)
        return h


class DalModel:
    """Per-cell regression over an autoencoder trunk.

    The trunk must be pretrained (reconstruction) before fine-tuning; the
    fine-tune phase restores nothing by itself, it just refuses to start on
    an untrained trunk.
    """

    def __init__(self, cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
        self.cfg = cfg
        self.feature_dim = cfg.input_steps * cfg.in_channels + 2
        self.pretrained = False
        widths = [cfg.ae_width] * cfg.ae_layers
        self.enc_w, self.enc_b, self.dec_w, self.dec_b = [], [], [], []
        in_dim = self.feature_dim
        for i, width in enumerate(widths):
            bound = 1.0 / np.sqrt(in_dim)
            self.enc_w.append(T.uniform(rng, -bound, bound, (in_dim, width), dtype=dtype,
                                        name=f"ae_enc{i}.w"))
            self.enc_b.append(T.zeros((width,), dtype=dtype, requires_grad=True,
                                      name=f"ae_enc{i}.b"))
            in_dim = width
        for i, width in enumerate(reversed([self.feature_dim] + widths[:-1])):
            bound = 1.0 / np.sqrt(in_dim)
            self.dec_w.append(T.uniform(rng, -bound, bound, (in_dim, width), dtype=dtype,
                                        name=f"ae_dec{i}.w"))
            self.dec_b.append(T.zeros((width,), dtype=dtype, requires_grad=True,
                                      name=f"ae_dec{i}.b"))
            in_dim = width
        bound = 1.0 / np.sqrt(cfg.ae_width)
        self.head_w = T.uniform(rng, -bound, bound, (cfg.ae_width, cfg.output_steps),
                                dtype=dtype, name="head.w")
        self.head_b = T.zeros((cfg.output_steps,), dtype=dtype, requires_grad=True,
                              name="head.b")

    def named_parameters(self) -> list[tuple[str, Tensor]]:
        out = []
        for i, (w, b) in enumerate(zip(self.enc_w, self.enc_b)):
            out += [(f"ae_enc{i}.w", w), (f"ae_enc{i}.b", b)]
        for i, (w, b) in enumerate(zip(self.dec_w, self.dec_b)):
            out += [(f"ae_dec{i}.w", w), (f"ae_dec{i}.b", b)]
        out += [("head.w", self.head_w), ("head.b", self.head_b)]
        return out

    def features_from_window(self, inputs: np.ndarray) -> np.ndarray:
        """One feature row per grid cell: its channel history plus its
        normalized coordinates."""
        steps, chans, m, n = inputs.shape
        per_cell = inputs.transpose(2, 3, 0, 1).reshape(m * n, steps * chans)
        rows, cols = np.meshgrid(np.arange(m), np.arange(n), indexing="ij")
        coords = np.stack([rows.reshape(-1) / max(m - 1, 1),
                           cols.reshape(-1) / max(n - 1, 1)], axis=1)
        return np.concatenate([per_cell, coords], axis=1).astype(np.float32)

    def _encode(self, x: Tensor, train: bool, rng) -> Tensor:
        h = x
        for i, (w, b) in enumerate(zip(self.enc_w, self.enc_b)):
            h = T.relu(T.bias_add(T.matmul(h, w), b))
            if train and i + 1 < len(self.enc_w):
                h = _maybe_dropout(h, self.cfg.dropout, rng)
        return h

    def reconstruction(self, features: np.ndarray, train: bool = False, rng=None) -> Tensor:
        h = self._encode(T.tensor(features.astype(np.float32)), train, rng)
        last = len(self.dec_w) - 1
        for i, (w, b) in enumerate(zip(self.dec_w, self.dec_b)):
            h = T.bias_add(T.matmul(h, w), b)
            if i != last:
                h = T.relu(h)
        return h

    def reconstruction_loss(self, features: np.ndarray, train: bool = False, rng=None) -> Tensor:
        recon = self.reconstruction(features, train, rng)
        diff = recon - T.tensor(features.astype(np.float32))
        return T.mean_all(T.hadamard(diff, diff))

    def mark_pretrained(self) -> None:
        self.pretrained = True

    def require_pretrained(self) -> None:
        if not self.pretrained:
            raise StateError("fine-tuning requested but the autoencoder trunk "
                             "has not been pretrained")

    def forward(self, inputs: np.ndarray, train: bool = False, rng=None) -> Tensor:
        cfg = self.cfg
        m, n = cfg.grid
        expected = (cfg.input_steps, cfg.in_channels, m, n)
        if inputs.shape != expected:
            raise DimensionError(f"expected inputs {expected}, got {inputs.shape}")
        feats = self.features_from_window(inputs)
        h = self._encode(T.tensor(feats), train, rng)
        est = T.bias_add(T.matmul(h, self.head_w), self.head_b)  # (cells, K)
        return T.reshape(T.transpose2d(est), (cfg.output_steps, m, n))


def build_model(cfg: ModelConfig, rng: np.random.Generator, dtype=np.float32):
    builders = {"convlstm": ConvLstmForecaster, "fc_lstm": FcLstmModel,
                "cnn_ed": CnnEncoderDecoder, "dal": DalModel}
    return builders[cfg.arch](cfg, rng, dtype=dtype)


def zero_parameters(model) -> None:
    for _, t in model.named_parameters():
        t.data[...] = 0.0


# ---------------------------------------------------------------------------
# neighbor-smoothing loss


def spatiotemporal_loss(pred: Tensor, spatial_radius: int = 2,
                        temporal_radius: int = 2) -> Tensor:
    """Sum of squared differences between neighboring predictions.

    Spatial neighbors: same frame, Chebyshev distance <= spatial_radius.
    Temporal neighbors: same cell, frame offset <= temporal_radius. Each
    unordered pair is counted once. Implemented with whole-tensor shifted
    differences, so the cost is one subtraction per offset rather than one
    per pair.
    """
    if pred.data.ndim != 3:
        raise DimensionError(f"expected (K, M, N) predictions, got {pred.shape}")
    steps, m, n = pred.shape
    if spatial_radius < 0 or temporal_radius < 0:
        raise ConfigError("neighbor radii must be nonnegative")
    if spatial_radius >= m or spatial_radius >= n:
        raise ConfigError(f"spatial radius {spatial_radius} exceeds grid {m}x{n}")

    total = T.zeros((), dtype=pred.dtype)
    for di in range(0, spatial_radius + 1):
        for dj in range(-spatial_radius, spatial_radius + 1):
            if di == 0 and dj <= 0:
                continue
            lo_j, hi_j = max(dj, 0), n + min(dj, 0)
            a = T.crop(pred, [(0, steps), (di, m), (lo_j, hi_j)])
            b = T.crop(pred, [(0, steps), (0, m - di), (lo_j - dj, hi_j - dj)])
            diff = a - b
            total = total + T.sum_all(T.hadamard(diff, diff))
    for dt in range(1, temporal_radius + 1):
        if dt >= steps:
            break
        a = T.crop(pred, [(dt, steps), (0, m), (0, n)])
        b = T.crop(pred, [(0, steps - dt), (0, m), (0, n)])
        diff = a - b
        total = total + T.sum_all(T.hadamard(diff, diff))
    return total


# ---------------------------------------------------------------------------
# checkpoints

CHECKPOINT_MANIFEST = "manifest.json"
CHECKPOINT_PARAMS = "params.gtsr"


def save_checkpoint(directory, model, training_step: int = 0) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    named = model.named_parameters()
    manifest = {
        "format_version": 1,
        "arch": model.cfg.arch,
        "config": model.cfg.to_dict(),
        "tensors": [name for name, _ in named],
        "training_step": int(training_step),
        "pretrained": bool(getattr(model, "pretrained", False)),
    }
    (directory / CHECKPOINT_MANIFEST).write_text(json.dumps(manifest, indent=2))
    gtsr.save_container(directory / CHECKPOINT_PARAMS, [t.data for _, t in named])


def load_checkpoint(directory):
    """Rebuild a model from its manifest and parameter container."""
    directory = Path(directory)
    manifest_path = directory / CHECKPOINT_MANIFEST
    if not manifest_path.exists():
        raise IntegrityError(f"{directory}: missing {CHECKPOINT_MANIFEST}")
    manifest = json.loads(manifest_path.read_text())
    cfg = ModelConfig.from_dict(manifest["config"])
    model = build_model(cfg, np.random.default_rng(0))
    named = model.named_parameters()
    expected = [name for name, _ in named]
    if manifest["tensors"] != expected:
        raise IntegrityError(f"{directory}: tensor list does not match architecture "
                             f"{cfg.arch!r}")
    arrays = gtsr.load_container(directory / CHECKPOINT_PARAMS, len(expected))
    for (name, t), arr in zip(named, arrays):
        if tuple(arr.shape) != t.shape:
            raise IntegrityError(f"{directory}: tensor {name} has shape {arr.shape}, "
                                 f"expected {t.shape}")
        t.data[...] = arr.astype(t.dtype)
    if manifest.get("pretrained") and hasattr(model, "mark_pretrained"):
        model.mark_pretrained()
    return model, int(manifest["training_step"])
