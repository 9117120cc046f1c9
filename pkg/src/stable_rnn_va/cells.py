"""Control-conditioned GRU and LSTM cells with an affine audio readout.

Gate parameters are stored stacked along a leading gate axis. For the GRU the
order is (reset, update, candidate); for the LSTM it is (input, forget, cell,
output). Every step function accepts arbitrary leading batch dimensions on the
state, the audio sample and the control vector.

The GRU candidate uses ``tanh(U_n (r * h) + ...)``, i.e. the reset gate is
applied before the recurrent product.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import NamedTuple, Union

import numpy as np

from . import _kernels
from .numerics import as_finite, gate_sigmoid  # noqa: F401  (re-export)

GRU_GATES = ("reset", "update", "candidate")
LSTM_GATES = ("input", "forget", "cell", "output")
GRU_CANDIDATE = 2
LSTM_CELL = 2

class ConfigurationError(ValueError):
    """Dimension or configuration mismatch between parameters and inputs."""


@dataclass(frozen=True)
class GateMode:
    """Standard LSTM input gate, or the coupled form ``(1-eps)(1-f)*sigmoid(a_i)``."""

    coupled: bool = False
    eps: float = 0.0

    def __post_init__(self) -> None:
        if self.coupled and not 0.0 < self.eps < 1.0:
            raise ConfigurationError("coupled gate mode needs eps in (0, 1)")

    @property
    def forget_cap(self) -> float:
        """Upper clamp on the forget gate; keeps the rounded ``f + i`` below 1."""
        return float(_kernels.forget_cap(self.eps)) if self.coupled else 1.0

    @classmethod
    def standard(cls) -> GateMode:
        return cls(False, 0.0)

    @classmethod
    def coupled_stable(cls, eps: float = 1e-3) -> GateMode:
        return cls(True, float(eps))

    def to_dict(self) -> dict:
        return {"variant": "coupled_stable" if self.coupled else "standard", "eps": self.eps}

    @classmethod
    def from_dict(cls, d: dict) -> GateMode:
        if d["variant"] == "coupled_stable":
            return cls.coupled_stable(d["eps"])
        if d["variant"] == "standard":
            return cls.standard()
        raise ConfigurationError(f"unknown gate mode {d['variant']!r}")


@dataclass(frozen=True, eq=False)
class CellParams:
    """Stacked gate blocks: recurrent (G,H,H), input (G,H), control (G,H,P), bias (G,H)."""

    recurrent: np.ndarray
    input: np.ndarray
    control: np.ndarray
    bias: np.ndarray

    n_gates = 0

    def __post_init__(self) -> None:
        for name in ("recurrent", "input", "control", "bias"):
            object.__setattr__(self, name, as_finite(getattr(self, name), name))
        g, h = self.n_gates, self.hidden
        if self.recurrent.shape != (g, h, h):
            raise ConfigurationError(f"recurrent block must be {(g, h, h)}, got {self.recurrent.shape}")
        if self.input.shape != (g, h):
            raise ConfigurationError(f"input block must be {(g, h)}, got {self.input.shape}")
        if self.control.ndim != 3 or self.control.shape[:2] != (g, h):
            raise ConfigurationError(f"control block must be {(g, h)} + (p,), got {self.control.shape}")
        if self.bias.shape != (g, h):
            raise ConfigurationError(f"bias block must be {(g, h)}, got {self.bias.shape}")

    @property
    def hidden(self) -> int:
        return self.recurrent.shape[-1]

    @property
    def n_controls(self) -> int:
        return self.control.shape[-1]

    @classmethod
    def zeros(cls, hidden: int, n_controls: int):
        g = cls.n_gates
        return cls(
            np.zeros((g, hidden, hidden)),
            np.zeros((g, hidden)),
            np.zeros((g, hidden, n_controls)),
            np.zeros((g, hidden)),
        )

    def arrays(self) -> dict[str, np.ndarray]:
        return {
            "recurrent": self.recurrent,
            "input": self.input,
            "control": self.control,
            "bias": self.bias,
        }


class GruParams(CellParams):
    n_gates = 3


class LstmParams(CellParams):
    n_gates = 4


class GruState(NamedTuple):
    h: np.ndarray


class LstmState(NamedTuple):
    h: np.ndarray
    c: np.ndarray


State = Union[GruState, LstmState]


@dataclass(frozen=True, eq=False)
class OutputLayer:
    w_out: np.ndarray
    b_out: float = 0.0
    skip_gain: float = 1.0

    def __post_init__(self) -> None:
        object.__setattr__(self, "w_out", as_finite(self.w_out, "w_out"))
        object.__setattr__(self, "b_out", float(as_finite(self.b_out, "b_out")))
        object.__setattr__(self, "skip_gain", float(as_finite(self.skip_gain, "skip_gain")))


@dataclass(frozen=True)
class ModelConfig:
    cell: str = "gru"
    hidden: int = 16
    n_controls: int = 2
    stable: bool = False
    gate_mode: GateMode = field(default_factory=GateMode.standard)
    sample_rate: int = 48000
    skip_gain: float = 1.0

    def __post_init__(self) -> None:
        if self.cell not in ("gru", "lstm"):
            raise ConfigurationError(f"cell must be 'gru' or 'lstm', got {self.cell!r}")
        if self.hidden < 1:
            raise ConfigurationError("hidden size must be >= 1")
        if self.n_controls < 0:
            raise ConfigurationError("control count must be >= 0")
        if self.sample_rate <= 0:
            raise ConfigurationError("sample rate must be positive")
        if self.cell == "gru" and self.gate_mode.coupled:
            raise ConfigurationError("coupled gate mode only applies to LSTM cells")

    def to_dict(self) -> dict:
        return {
            "cell": self.cell,
            "hidden": self.hidden,
            "n_controls": self.n_controls,
            "stable": self.stable,
            "gate_mode": self.gate_mode.to_dict(),
            "sample_rate": self.sample_rate,
            "skip_gain": self.skip_gain,
        }

    @classmethod
    def from_dict(cls, d: dict) -> ModelConfig:
        d = dict(d)
        if "gate_mode" in d:
            d["gate_mode"] = GateMode.from_dict(d["gate_mode"])
        return cls(**d)


@dataclass(frozen=True, eq=False)
class Model:
    """A cell, its readout and the LSTM gate mode, ready for inference."""

    params: CellParams
    output: OutputLayer
    mode: GateMode = field(default_factory=GateMode.standard)

    def __post_init__(self) -> None:
        if self.output.w_out.shape != (self.params.hidden,):
            raise ConfigurationError("readout size does not match hidden size")
        if isinstance(self.params, GruParams) and self.mode.coupled:
            raise ConfigurationError("coupled gate mode only applies to LSTM cells")

    @property
    def is_lstm(self) -> bool:
        return isinstance(self.params, LstmParams)

    def zero_state(self, batch_shape: tuple[int, ...] = ()) -> State:
        h = np.zeros(batch_shape + (self.params.hidden,))
        if self.is_lstm:
            return LstmState(h, h.copy())
        return GruState(h)


def drive(params: CellParams, x, p) -> np.ndarray:
    """Non-recurrent pre-activation ``b + W x + C p`` with shape (..., G, H)."""
    x = np.asarray(x, dtype=np.float64)
    p = np.asarray(p, dtype=np.float64)
    if p.shape[-1:] != (params.n_controls,):
        raise ConfigurationError(
            f"expected {params.n_controls} controls, got trailing shape {p.shape[-1:]}"
        )
    out = params.bias + x[..., None, None] * params.input
    for k in range(params.n_controls):
        out = out + p[..., k, None, None] * params.control[:, :, k]
    return out


def _check_state(params: CellParams, h: np.ndarray) -> None:
    if h.shape[-1:] != (params.hidden,):
        raise ConfigurationError(f"state size {h.shape[-1:]} does not match hidden size {params.hidden}")


def _prepare(params: CellParams, state: State, x, controls, time_axis: bool):
    """Validate and flatten leading batch dims to the kernels' (B, T[, P]) layout."""
    x = as_finite(x, "audio input")
    controls = as_finite(controls, "controls")
    if not time_axis:
        x = x[..., None]
        controls = controls[..., None, :]
    elif controls.ndim == x.ndim:
        # one control vector held for the whole sequence
        controls = np.broadcast_to(controls[..., None, :], x.shape + controls.shape[-1:])
    n_ctl = params.n_controls
    if controls.shape != x.shape + (n_ctl,):
        raise ConfigurationError(
            f"control trajectory shape {controls.shape} does not match input {x.shape} x {n_ctl} controls"
        )
    batch = x.shape[:-1]
    h = as_finite(state.h, "state")
    if h.shape != batch + (params.hidden,):
        raise ConfigurationError(
            f"state shape {h.shape} does not match batch {batch} and hidden size {params.hidden}"
        )
    c = None
    if isinstance(state, LstmState):
        c = as_finite(state.c, "cell state")
        if c.shape != h.shape:
            raise ConfigurationError("cell state shape differs from hidden state shape")
    n_b = int(np.prod(batch))
    if c is not None:
        c = c.reshape(n_b, params.hidden)
    n_t = x.shape[-1]
    return (
        batch,
        np.ascontiguousarray(x.reshape(n_b, n_t)),
        controls.reshape(n_b, n_t, n_ctl),
        np.ascontiguousarray(h.reshape(n_b, params.hidden)),
        c,
    )


def _execute(model: Model, state: State, x, controls, time_axis: bool = True, track: bool = False):
    if model.is_lstm != isinstance(state, LstmState):
        raise ConfigurationError("state type does not match cell type")
    params, out = model.params, model.output
    batch, x2, p2, h2, c2 = _prepare(params, state, x, controls, time_axis)
    y = np.empty_like(x2)
    shape = x2.shape if track else (0, 0)
    hnorm = np.empty(shape)
    if model.is_lstm:
        cnorm = np.empty(shape)
        h, c = _kernels.lstm_seq(
            params.recurrent, params.input, params.control, params.bias, h2, c2, x2, p2,
            model.mode.coupled, model.mode.eps, out.w_out, out.b_out, out.skip_gain,
            y, hnorm, cnorm, track,
        )
        new_state: State = LstmState(h.reshape(batch + (params.hidden,)), c.reshape(batch + (params.hidden,)))
    else:
        cnorm = None
        h = _kernels.gru_seq(
            params.recurrent, params.input, params.control, params.bias, h2, x2, p2,
            out.w_out, out.b_out, out.skip_gain, y, hnorm, track,
        )
        new_state = GruState(h.reshape(batch + (params.hidden,)))
    n_t = x2.shape[1]
    y = y.reshape(batch + (n_t,))
    if not time_axis:
        y = y[..., 0]
    if track:
        hnorm = hnorm.reshape(batch + (n_t,))
        cnorm = None if cnorm is None else cnorm.reshape(batch + (n_t,))
    return y, new_state, hnorm, cnorm


def _bare(params: CellParams, mode: GateMode) -> Model:
    return Model(params, OutputLayer(np.zeros(params.hidden), 0.0, 0.0), mode)


def gru_step(params: GruParams, state: GruState, x, p) -> tuple[GruState, np.ndarray]:
    """One GRU update for audio sample(s) ``x`` and control vector(s) ``p``."""
    _, new_state, _, _ = _execute(_bare(params, GateMode.standard()), GruState(np.asarray(state.h)), x, p, False)
    return new_state, new_state.h


def lstm_step(
    params: LstmParams, state: LstmState, x, p, mode: GateMode = GateMode()
) -> tuple[LstmState, np.ndarray]:
    """One LSTM update; in coupled mode the input gate is ``(1-eps)(1-f)*sigmoid(a_i)``."""
    st = LstmState(np.asarray(state.h), np.asarray(state.c))
    _, new_state, _, _ = _execute(_bare(params, mode), st, x, p, False)
    return new_state, new_state.h


def model_step(model: Model, state: State, x, p) -> tuple[State, np.ndarray]:
    """Advance the cell one sample and emit ``w_out.h + b_out + skip_gain*x``."""
    y, new_state, _, _ = _execute(model, state, x, p, False)
    return new_state, y


def run_sequence(model: Model, state: State, x, controls) -> tuple[np.ndarray, State]:
    """Process an audio buffer (..., T) with controls (..., T, p).

    Returns the output buffer and the final state, which can seed the next
    segment. A control array without the time axis is held constant.
    """
    y, new_state, _, _ = _execute(model, state, x, controls, True)
    return y, new_state


class AutonomousTrace(NamedTuple):
    hidden_norm: np.ndarray
    cell_norm: np.ndarray | None
    output: np.ndarray
    final_state: State


def autonomous_run(model: Model, state: State, controls) -> AutonomousTrace:
    """Run with zero audio input, recording the L2 norm of the state per step.

    ``controls`` is a (T, p) trajectory, or (..., T, p) with a matching batch of
    states.
    """
    controls = as_finite(controls, "controls")
    if controls.ndim < 2 or controls.shape[-1] != model.params.n_controls:
        raise ConfigurationError("autonomous run needs a (T, p) control trajectory")
    x = np.zeros(controls.shape[:-1])
    y, new_state, hnorm, cnorm = _execute(model, state, x, controls, True, track=True)
    return AutonomousTrace(hnorm, cnorm, y, new_state)
