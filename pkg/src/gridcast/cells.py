"""Recurrent cell transitions: plain LSTM and its convolutional variant.

Both cells compute one time-step transition. The plain cell works on column
vectors through matrix products over the concatenated [previous hidden,
input]; the convolutional cell keeps the spatial layout, replacing the fully
connected transforms with same-padded convolutions in both the
input-to-state and state-to-state paths, and lets the gates read the cell
state directly through per-pixel peephole weights.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Sequence

import numpy as np

from . import tensor as T
from .errors import ConfigError, ContractError, DimensionError
from .tensor import Tensor


@dataclass
class CellState:
    """Hidden and cell tensors; identical shapes within one cell."""

    h: Tensor
    c: Tensor


def _init_weight(rng: np.random.Generator, shape, fan_in: int, dtype, name: str) -> Tensor:
    bound = 1.0 / np.sqrt(fan_in)
    return T.uniform(rng, -bound, bound, shape, dtype=dtype, name=name)


class LstmParams:
    """Gate weights over the concatenated [h_prev, x] column, plus biases.

    Forget-gate bias starts at 1.0 so early training does not wash the cell
    memory out; everything else follows uniform(-1/sqrt(fan_in), +).
    """

    GATE_NAMES = ("w_f", "w_i", "w_c", "w_o", "b_f", "b_i", "b_c", "b_o")

    def __init__(self, input_size: int, hidden_size: int, rng: np.random.Generator,
                 dtype=np.float32, prefix: str = "lstm"):
        if input_size < 1 or hidden_size < 1:
            raise ConfigError("input_size and hidden_size must be positive")
        self.input_size = input_size
        self.hidden_size = hidden_size
        joint = hidden_size + input_size
        for gate in ("f", "i", "c", "o"):
            w = _init_weight(rng, (hidden_size, joint), joint, dtype, f"{prefix}.w_{gate}")
            setattr(self, f"w_{gate}", w)
            b0 = np.ones if gate == "f" else np.zeros
            setattr(self, f"b_{gate}",
                    Tensor(b0((hidden_size, 1), dtype=dtype), requires_grad=True,
                           name=f"{prefix}.b_{gate}"))

    def named(self) -> list[tuple[str, Tensor]]:
        return [(name, getattr(self, name)) for name in self.GATE_NAMES]

    def initial_state(self, dtype=None) -> CellState:
        dtype = dtype or self.w_f.dtype
        shape = (self.hidden_size, 1)
        return CellState(T.zeros(shape, dtype=dtype), T.zeros(shape, dtype=dtype))


def lstm_step(params: LstmParams, x: Tensor, prev: CellState) -> CellState:
    """One plain-LSTM transition on column vectors.

    forget/input/output gates and the candidate all read [h_prev, x];
    the new cell mixes the old one under the forget gate with the gated
    candidate, and the hidden output is the output-gated tanh of it.
    """
    if x.shape != (params.input_size, 1):
        raise DimensionError(f"lstm_step: expected input ({params.input_size}, 1), got {x.shape}")
    if prev.h.shape != (params.hidden_size, 1):
        raise DimensionError(
            f"lstm_step: expected state ({params.hidden_size}, 1), got {prev.h.shape}")
    joint = T.concat([prev.h, x], axis=0)
    f = T.sigmoid(T.matmul(params.w_f, joint) + params.b_f)
    i = T.sigmoid(T.matmul(params.w_i, joint) + params.b_i)
    cand = T.tanh(T.matmul(params.w_c, joint) + params.b_c)
    c = f * prev.c + i * cand
    o = T.sigmoid(T.matmul(params.w_o, joint) + params.b_o)
    return CellState(h=o * T.tanh(c), c=c)


class ConvLstmParams:
    """Convolution kernels, peephole maps and per-channel biases for one cell.

    Input kernels map in_channels -> hidden channels, state kernels map
    hidden -> hidden; peepholes are full (hidden, H, W) element-wise weights,
    which pins the parameter set to one grid size. ``peephole=False`` drops
    the cell-state taps for ablation runs.
    """

    def __init__(self, in_channels: int, hidden_channels: int, kernel: int,
                 grid: tuple[int, int], rng: np.random.Generator,
                 peephole: bool = True, dtype=np.float32, prefix: str = "convlstm"):
        if kernel % 2 == 0:
            raise ConfigError(f"kernel size must be odd, got {kernel}")
        if in_channels < 1 or hidden_channels < 1:
            raise ConfigError("channel counts must be positive")
        self.in_channels = in_channels
        self.hidden_channels = hidden_channels
        self.kernel = kernel
        self.grid = (int(grid[0]), int(grid[1]))
        self.peephole = peephole

        fan_x = in_channels * kernel * kernel
        fan_h = hidden_channels * kernel * kernel
        for gate in ("f", "i", "c", "o"):
            setattr(self, f"w_x{gate}",
                    _init_weight(rng, (hidden_channels, in_channels, kernel, kernel),
                                 fan_x, dtype, f"{prefix}.w_x{gate}"))
            setattr(self, f"w_h{gate}",
                    _init_weight(rng, (hidden_channels, hidden_channels, kernel, kernel),
                                 fan_h, dtype, f"{prefix}.w_h{gate}"))
            b0 = np.ones if gate == "f" else np.zeros
            setattr(self, f"b_{gate}",
                    Tensor(b0(hidden_channels, dtype=dtype), requires_grad=True,
                           name=f"{prefix}.b_{gate}"))
        if peephole:
            shape = (hidden_channels, *self.grid)
            for gate in ("f", "i", "o"):
                setattr(self, f"peep_{gate}",
                        _init_weight(rng, shape, 1, dtype, f"{prefix}.peep_{gate}"))

    def named(self) -> list[tuple[str, Tensor]]:
        names = [f"w_x{g}" for g in "fico"] + [f"w_h{g}" for g in "fico"]
        if self.peephole:
            names += ["peep_f", "peep_i", "peep_o"]
        names += [f"b_{g}" for g in "fico"]
        return [(n, getattr(self, n)) for n in names]

    def initial_state(self, dtype=None) -> CellState:
        dtype = dtype or self.w_xf.dtype
        shape = (self.hidden_channels, *self.grid)
        return CellState(T.zeros(shape, dtype=dtype), T.zeros(shape, dtype=dtype))


def convlstm_step(params: ConvLstmParams, x: Tensor, prev: CellState) -> CellState:
    """One convolutional-LSTM transition on (channels, H, W) tensors."""
    expected_x = (params.in_channels, *params.grid)
    if x.shape != expected_x:
        raise DimensionError(f"convlstm_step: expected input {expected_x}, got {x.shape}")
    expected_h = (params.hidden_channels, *params.grid)
    if prev.h.shape != expected_h or prev.c.shape != expected_h:
        raise DimensionError(
            f"convlstm_step: expected state {expected_h}, got {prev.h.shape}/{prev.c.shape}")

    def gate_pre(gate: str) -> Tensor:
        s = T.conv2d(x, getattr(params, f"w_x{gate}")) + \
            T.conv2d(prev.h, getattr(params, f"w_h{gate}"))
        return T.bias_add(s, getattr(params, f"b_{gate}"))

    if params.peephole:
        f = T.sigmoid(gate_pre("f") + params.peep_f * prev.c)
        i = T.sigmoid(gate_pre("i") + params.peep_i * prev.c)
    else:
        f = T.sigmoid(gate_pre("f"))
        i = T.sigmoid(gate_pre("i"))
    cand = T.tanh(gate_pre("c"))
    c = f * prev.c + i * cand
    if params.peephole:
        o = T.sigmoid(gate_pre("o") + params.peep_o * c)
    else:
        o = T.sigmoid(gate_pre("o"))
    return CellState(h=o * T.tanh(c), c=c)


def unroll(step: Callable[[Tensor, CellState], CellState],
           inputs: Sequence[Tensor], init: CellState) -> list[CellState]:
    """Thread a cell state left-to-right through a sequence; returns every state."""
    if len(inputs) == 0:
        raise ContractError("unroll needs at least one input")
    states: list[CellState] = []
    prev = init
    for x in inputs:
        prev = step(x, prev)
        states.append(prev)
    return states
