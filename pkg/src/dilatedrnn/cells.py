"""Single-step recurrent cells with analytic backward passes.

A cell maps ``(x_t, recurrent state)`` to a new state. In a dilated layer
the recurrent state is the layer's own state ``s`` steps back; in a
regular-skip layer the cell sees both ``t-1`` and ``t-s`` states, each with
its own recurrent weight matrix, summed into the pre-activation.

Gate conventions: logistic sigmoid gates, tanh candidates. LSTM blocks are
ordered ``[input, candidate, forget, output]`` and the forget gate adds a
constant ``forget_bias`` (default 1.0) to its pre-activation. GRU blocks are
``[reset, update, candidate]`` with ``h' = z*h + (1-z)*n``.
"""
from __future__ import annotations

from dataclasses import dataclass
from enum import Enum
from typing import Optional

import numpy as np

from .errors import ConfigurationError, ConsistencyError, DimensionError
from .numeric import DTYPE, Parameter, Rng, init_weights, sigmoid


class CellKind(str, Enum):
    VANILLA = "vanilla"
    LSTM = "lstm"
    GRU = "gru"


GATE_BLOCKS = {CellKind.VANILLA: 1, CellKind.LSTM: 4, CellKind.GRU: 3}


@dataclass
class CellState:
    hidden: np.ndarray
    memory: Optional[np.ndarray] = None


@dataclass
class StepCache:
    cell: "Cell"
    x: np.ndarray
    prev: CellState
    skipped: Optional[CellState]
    out: CellState
    gates: tuple


@dataclass
class StepGrads:
    dx: np.ndarray
    dprev: CellState
    dskipped: Optional[CellState] = None


class Cell:
    """Weights of one recurrent layer.

    ``skip=True`` adds ``extra_recurrent_weights`` for the second recurrent
    input of a regular-skip layer. Only vanilla cells support it: for gated
    cells the carried state (``c`` or ``z*h``) would have to pick one of the
    two recurrent inputs, and the skip baseline is only ever built from vanilla cells.
    """

    def __init__(
        self,
        kind: CellKind | str,
        input_dim: int,
        hidden_dim: int,
        rng: Rng | None = None,
        *,
        skip: bool = False,
        forget_bias: float = 1.0,
        name: str = "cell",
        init: str = "standard_normal",
    ):
        self.kind = CellKind(kind)
        if input_dim < 1 or hidden_dim < 1:
            raise ConfigurationError("cell dimensions must be positive")
        if skip and self.kind is not CellKind.VANILLA:
            raise ConfigurationError("regular-skip cells are only defined for vanilla units")
        self.input_dim = int(input_dim)
        self.hidden_dim = int(hidden_dim)
        self.forget_bias = float(forget_bias) if self.kind is CellKind.LSTM else 0.0
        self.name = name
        width = GATE_BLOCKS[self.kind] * self.hidden_dim

        def weights(suffix, rows):
            if rng is None:
                value = np.zeros((rows, width), dtype=DTYPE)
            else:
                value = init_weights((rows, width), rng, init)
            return Parameter(f"{name}.{suffix}", value)

        self.input_weights = weights("input_weights", self.input_dim)
        self.recurrent_weights = weights("recurrent_weights", self.hidden_dim)
        self.extra_recurrent_weights = (
            weights("extra_recurrent_weights", self.hidden_dim) if skip else None
        )
        self.bias = Parameter(f"{name}.bias", np.zeros((1, width), dtype=DTYPE))

    @property
    def is_skip(self) -> bool:
        return self.extra_recurrent_weights is not None

    def parameters(self) -> list[Parameter]:
        params = [self.input_weights, self.recurrent_weights]
        if self.extra_recurrent_weights is not None:
            params.append(self.extra_recurrent_weights)
        params.append(self.bias)
        return params

    def param_count(self) -> int:
        return sum(p.size for p in self.parameters())

    def zero_state(self, batch: int) -> CellState:
        h = np.zeros((batch, self.hidden_dim), dtype=DTYPE)
        c = np.zeros_like(h) if self.kind is CellKind.LSTM else None
        return CellState(h, c)

    def _check(self, x, state):
        if x.ndim != 2 or x.shape[1] != self.input_dim:
            raise DimensionError(f"{self.name}: input {x.shape}, expected (batch, {self.input_dim})")
        if state.hidden.shape != (x.shape[0], self.hidden_dim):
            raise DimensionError(
                f"{self.name}: state {state.hidden.shape}, expected ({x.shape[0]}, {self.hidden_dim})"
            )

    def forward(
        self, x: np.ndarray, prev: CellState, skipped: CellState | None = None
    ) -> tuple[CellState, StepCache]:
        self._check(x, prev)
        pre = x @ self.input_weights.value + self.bias.value
        if skipped is not None:
            if not self.is_skip:
                raise ConfigurationError(f"{self.name}: no extra recurrent weights for a skip input")
            self._check(x, skipped)
            pre = pre + skipped.hidden @ self.extra_recurrent_weights.value
        elif self.is_skip:
            raise ConfigurationError(f"{self.name}: regular-skip cell needs the skipped state")
        h = prev.hidden
        H = self.hidden_dim

        if self.kind is CellKind.VANILLA:
            out_h = np.tanh(pre + h @ self.recurrent_weights.value)
            out = CellState(out_h)
            gates = ()
        elif self.kind is CellKind.LSTM:
            pre = pre + h @ self.recurrent_weights.value
            i = sigmoid(pre[:, :H])
            g = np.tanh(pre[:, H : 2 * H])
            f = sigmoid(pre[:, 2 * H : 3 * H] + self.forget_bias)
            o = sigmoid(pre[:, 3 * H :])
            c = f * prev.memory + i * g
            tc = np.tanh(c)
            out = CellState(o * tc, c)
            gates = (i, g, f, o, tc)
        else:
            wr = self.recurrent_weights.value
            rz = sigmoid(pre[:, : 2 * H] + h @ wr[:, : 2 * H])
            r, z = rz[:, :H], rz[:, H:]
            rh = r * h
            n = np.tanh(pre[:, 2 * H :] + rh @ wr[:, 2 * H :])
            out = CellState(z * h + (1.0 - z) * n)
            gates = (r, z, n, rh)
        return out, StepCache(self, x, prev, skipped, out, gates)

    def backward(
        self, cache: StepCache, dh: np.ndarray, dmemory: np.ndarray | None = None
    ) -> StepGrads:
        """Backpropagate one step; parameter gradients are added to ``grad``."""
        if cache.cell is not self:
            raise ConsistencyError(f"{self.name}: cache was produced by a different cell")
        if dh.shape != cache.out.hidden.shape:
            raise ConsistencyError(f"{self.name}: upstream {dh.shape} vs cached {cache.out.hidden.shape}")
        x, prev, H = cache.x, cache.prev, self.hidden_dim
        h = prev.hidden
        wx = self.input_weights.value
        wr = self.recurrent_weights.value
        dmem_prev = None

        if self.kind is CellKind.VANILLA:
            out_h = cache.out.hidden
            dpre = dh * (1.0 - out_h * out_h)
            self.recurrent_weights.grad += h.T @ dpre
            dh_prev = dpre @ wr.T
        elif self.kind is CellKind.LSTM:
            i, g, f, o, tc = cache.gates
            dc = dh * o * (1.0 - tc * tc)
            if dmemory is not None:
                dc = dc + dmemory
            dpre = np.empty((x.shape[0], 4 * H), dtype=DTYPE)
            dpre[:, :H] = dc * g * i * (1.0 - i)
            dpre[:, H : 2 * H] = dc * i * (1.0 - g * g)
            dpre[:, 2 * H : 3 * H] = dc * prev.memory * f * (1.0 - f)
            dpre[:, 3 * H :] = dh * tc * o * (1.0 - o)
            self.recurrent_weights.grad += h.T @ dpre
            dh_prev = dpre @ wr.T
            dmem_prev = dc * f
        else:
            r, z, n, rh = cache.gates
            dpre = np.empty((x.shape[0], 3 * H), dtype=DTYPE)
            dn = dh * (1.0 - z) * (1.0 - n * n)
            dpre[:, 2 * H :] = dn
            drh = dn @ wr[:, 2 * H :].T
            dpre[:, :H] = drh * h * r * (1.0 - r)
            dpre[:, H : 2 * H] = dh * (h - n) * z * (1.0 - z)
            self.recurrent_weights.grad[:, : 2 * H] += h.T @ dpre[:, : 2 * H]
            self.recurrent_weights.grad[:, 2 * H :] += rh.T @ dn
            dh_prev = dh * z + drh * r + dpre[:, : 2 * H] @ wr[:, : 2 * H].T

        self.input_weights.grad += x.T @ dpre
        self.bias.grad += dpre.sum(axis=0, keepdims=True)
        dx = dpre @ wx.T
        dskipped = None
        if cache.skipped is not None:
            self.extra_recurrent_weights.grad += cache.skipped.hidden.T @ dpre
            dskipped = CellState(dpre @ self.extra_recurrent_weights.value.T)
        return StepGrads(dx, CellState(dh_prev, dmem_prev), dskipped)


def cell_step(cell: Cell, x: np.ndarray, recurrent_in: CellState) -> CellState:
    """One dilated-form step: the only recurrent input is ``recurrent_in``."""
    if cell.is_skip:
        raise ConfigurationError(f"{cell.name}: regular-skip cells need skip_cell_step")
    return cell.forward(x, recurrent_in)[0]


def skip_cell_step(cell: Cell, x: np.ndarray, prev: CellState, skipped: CellState) -> CellState:
    """One regular-skip step fed by the ``t-1`` state and the ``t-s`` state."""
    if not cell.is_skip:
        raise ConfigurationError(f"{cell.name}: missing extra recurrent weights")
    return cell.forward(x, prev, skipped)[0]


def cell_backward(
    cell: Cell, cache: StepCache, dh: np.ndarray, dmemory: np.ndarray | None = None
) -> StepGrads:
    return cell.backward(cache, dh, dmemory)


def param_count(cell: Cell) -> int:
    return cell.param_count()
