"""Stability-enforcing parametrizations and independent constraint checks.

A parametrization owns a dict of free (trainable) arrays and maps it to cell
parameters that sit in the stable set:

* the candidate gate (GRU) / cell gate (LSTM) has no control or bias block;
  the materialized blocks are freshly allocated zeros, never trained values;
* its recurrent matrix is rescaled so the spectral norm is at most
  ``1 - margin.spectral``;
* stable LSTMs use the coupled input gate ``(1-eps)(1-f)*sigmoid(a_i)``, which
  keeps ``f + i < 1`` for every state and control.

Free-parameter layout: ``recurrent`` (G,H,H), ``input`` (G,H), ``control``
(Gc,H,P), ``bias`` (Gc,H), ``w_out`` (H,), ``b_out`` (). For stable cells
``Gc = G - 1`` and the constrained gate is dropped from ``control``/``bias``.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .cells import (
    GRU_CANDIDATE,
    LSTM_CELL,
    CellParams,
    GateMode,
    GruParams,
    LstmParams,
    Model,
    ModelConfig,
    OutputLayer,
)
from .numerics import SeededRng, gate_sigmoid, power_iteration

FREE_KEYS = ("recurrent", "input", "control", "bias", "w_out", "b_out")


@dataclass(frozen=True)
class StabilityMargin:
    spectral: float = 1e-3
    gate: float = 1e-3

    def __post_init__(self) -> None:
        if not (0.0 < self.spectral < 1.0 and 0.0 < self.gate < 1.0):
            raise ValueError("stability margins must lie in (0, 1)")

    def to_dict(self) -> dict:
        return {"spectral": self.spectral, "gate": self.gate}


class Parametrization:
    """Free parameters plus the deterministic map to a runnable :class:`Model`.

    With ``config.stable`` false the map is the identity (all blocks trained).
    ``pi_iters``/``pi_tol`` control the power iteration used for the spectral
    rescale; the right singular vector is kept between calls as a warm start.
    """

    def __init__(
        self,
        config: ModelConfig,
        free: dict[str, np.ndarray],
        margin: StabilityMargin = StabilityMargin(),
        pi_iters: int = 100,
        pi_tol: float = 1e-12,
        pi_vector: np.ndarray | None = None,
    ) -> None:
        self.config = config
        self.margin = margin
        self.pi_iters = pi_iters
        self.pi_tol = pi_tol
        self.pi_vector = None if pi_vector is None else np.asarray(pi_vector, dtype=np.float64)
        self.free = {k: np.asarray(free[k], dtype=np.float64) for k in FREE_KEYS}
        self._check_shapes()
        self._scale_cache: tuple | None = None
        if config.stable and config.cell == "lstm":
            if not (config.gate_mode.coupled and config.gate_mode.eps == margin.gate):
                raise ValueError("stable LSTM requires the coupled gate mode with eps = margin.gate")

    @property
    def n_gates(self) -> int:
        return 3 if self.config.cell == "gru" else 4

    @property
    def constrained_gate(self) -> int:
        return GRU_CANDIDATE if self.config.cell == "gru" else LSTM_CELL

    def free_shapes(self) -> dict[str, tuple[int, ...]]:
        return free_shapes(self.config)

    def _check_shapes(self) -> None:
        for k, shape in self.free_shapes().items():
            if self.free[k].shape != shape:
                raise ValueError(f"free parameter {k!r} must have shape {shape}, got {self.free[k].shape}")

    def _spectral_scale(self, u_tilde: np.ndarray):
        if not np.any(u_tilde):
            return 1.0, 0.0, None, None
        res = power_iteration(u_tilde, self.pi_iters, self.pi_tol, self.pi_vector)
        if res.converged:
            sigma, u, v = res.sigma, res.u, res.v
        else:
            # rare near-degenerate top pair: fall back to a dense SVD
            left, s, right = np.linalg.svd(u_tilde)
            sigma, u, v = float(s[0]), left[:, 0], right[0]
        self.pi_vector = v
        bound = 1.0 - self.margin.spectral
        scale = min(1.0, bound / sigma)
        return scale, sigma, u, v

    def materialize(self) -> Model:
        cfg = self.config
        f = self.free
        cls = GruParams if cfg.cell == "gru" else LstmParams
        if not cfg.stable:
            params = cls(f["recurrent"].copy(), f["input"].copy(), f["control"].copy(), f["bias"].copy())
            self._scale_cache = None
        else:
            k = self.constrained_gate
            recurrent = f["recurrent"].copy()
            scale, sigma, u, v = self._spectral_scale(recurrent[k])
            if scale < 1.0:
                recurrent[k] = recurrent[k] * scale
            self._scale_cache = (scale, sigma, u, v)
            control = np.insert(f["control"], k, 0.0, axis=0)
            bias = np.insert(f["bias"], k, 0.0, axis=0)
            params = cls(recurrent, f["input"].copy(), control, bias)
        output = OutputLayer(f["w_out"].copy(), float(f["b_out"]), cfg.skip_gain)
        return Model(params, output, cfg.gate_mode)

    def pullback(self, grads: dict[str, np.ndarray]) -> dict[str, np.ndarray]:
        """Map gradients w.r.t. materialized blocks to gradients w.r.t. free params.

        Must follow a call to :meth:`materialize` on the current free values.
        The singular vectors are held fixed, so the spectral norm's gradient is
        ``u v^T``.
        """
        out = {k: np.asarray(grads[k], dtype=np.float64).copy() for k in FREE_KEYS}
        if not self.config.stable:
            return out
        k = self.constrained_gate
        out["control"] = np.delete(out["control"], k, axis=0)
        out["bias"] = np.delete(out["bias"], k, axis=0)
        if self._scale_cache is None:
            raise RuntimeError("pullback called before materialize")
        scale, sigma, u, v = self._scale_cache
        if scale < 1.0:
            g = out["recurrent"][k]
            u_tilde = self.free["recurrent"][k]
            out["recurrent"][k] = scale * g - (scale / sigma) * np.sum(g * u_tilde) * np.outer(u, v)
        return out


def free_shapes(config: ModelConfig) -> dict[str, tuple[int, ...]]:
    g = 3 if config.cell == "gru" else 4
    gc = g - 1 if config.stable else g
    h, p = config.hidden, config.n_controls
    return {
        "recurrent": (g, h, h),
        "input": (g, h),
        "control": (gc, h, p),
        "bias": (gc, h),
        "w_out": (h,),
        "b_out": (),
    }


def free_from_params(config: ModelConfig, params: CellParams, output: OutputLayer) -> dict[str, np.ndarray]:
    """View materialized (or arbitrary) cell parameters as free parameters."""
    control, bias = params.control, params.bias
    if config.stable:
        k = GRU_CANDIDATE if config.cell == "gru" else LSTM_CELL
        control = np.delete(control, k, axis=0)
        bias = np.delete(bias, k, axis=0)
    return {
        "recurrent": params.recurrent.copy(),
        "input": params.input.copy(),
        "control": np.array(control),
        "bias": np.array(bias),
        "w_out": output.w_out.copy(),
        "b_out": np.array(output.b_out),
    }


def materialize_gru(sp: Parametrization) -> GruParams:
    if sp.config.cell != "gru":
        raise ValueError("not a GRU parametrization")
    return sp.materialize().params


def materialize_lstm(sp: Parametrization) -> tuple[LstmParams, GateMode]:
    if sp.config.cell != "lstm":
        raise ValueError("not an LSTM parametrization")
    model = sp.materialize()
    return model.params, model.mode


# ---------------------------------------------------------------- verification


@dataclass(frozen=True)
class ConstraintCheck:
    name: str
    measured: float
    limit: float
    passed: bool

    def to_dict(self) -> dict:
        return {"name": self.name, "measured": self.measured, "limit": self.limit, "passed": self.passed}


@dataclass
class ConstraintReport:
    cell: str
    checks: list[ConstraintCheck] = field(default_factory=list)

    @property
    def passed(self) -> bool:
        return all(c.passed for c in self.checks)

    def __getitem__(self, name: str) -> ConstraintCheck:
        for c in self.checks:
            if c.name == name:
                return c
        raise KeyError(name)

    def to_dict(self) -> dict:
        return {"cell": self.cell, "passed": self.passed, "checks": [c.to_dict() for c in self.checks]}

    def format(self) -> str:
        lines = [f"{self.cell} constraints: {'PASS' if self.passed else 'FAIL'}"]
        for c in self.checks:
            lines.append(f"  [{'pass' if c.passed else 'FAIL'}] {c.name}: measured {c.measured:.12g} (limit {c.limit:g})")
        return "\n".join(lines)


def _zero_block_checks(params: CellParams, gate: int, gate_name: str) -> list[ConstraintCheck]:
    ctl = params.control[gate]
    c_max = float(np.max(np.abs(ctl))) if ctl.size else 0.0
    b_max = float(np.max(np.abs(params.bias[gate])))
    return [
        ConstraintCheck(f"{gate_name}_control_zero", c_max, 0.0, c_max == 0.0),
        ConstraintCheck(f"{gate_name}_bias_zero", b_max, 0.0, b_max == 0.0),
    ]


def _spectral_check(params: CellParams, gate: int, gate_name: str, margin: StabilityMargin) -> ConstraintCheck:
    # Dense SVD: deliberately independent of the power iteration used to build the weights.
    sn = float(np.linalg.norm(params.recurrent[gate], 2))
    limit = 1.0 - margin.spectral + 1e-9
    return ConstraintCheck(f"{gate_name}_recurrent_spectral_norm", sn, limit, sn <= limit)


def verify_gru(params: GruParams, margin: StabilityMargin = StabilityMargin()) -> ConstraintReport:
    checks = _zero_block_checks(params, GRU_CANDIDATE, "candidate")
    checks.append(_spectral_check(params, GRU_CANDIDATE, "candidate", margin))
    return ConstraintReport("gru", checks)


def lstm_gate_sum(params: LstmParams, mode: GateMode, h: np.ndarray, x: np.ndarray, p: np.ndarray) -> np.ndarray:
    """``f + i`` for batches of (h, x, p); the cell state does not enter either gate."""
    rec = params.recurrent
    a_i = h @ rec[0].T + params.bias[0] + x[:, None] * params.input[0] + p @ params.control[0].T
    a_f = h @ rec[1].T + params.bias[1] + x[:, None] * params.input[1] + p @ params.control[1].T
    f = gate_sigmoid(a_f)
    s_i = gate_sigmoid(a_i)
    if not mode.coupled:
        return f + s_i
    f = np.minimum(f, mode.forget_cap)
    i = (1.0 - mode.eps) * (1.0 - f) * s_i
    return f + i


def verify_lstm_gate_bound(
    params: LstmParams,
    mode: GateMode,
    n_samples: int,
    rng: SeededRng,
    chunk: int = 8192,
) -> float:
    """Max of ``||f + i||_inf`` over random h in (-1,1)^H, x in [-1,1], p in [-1,1]^P."""
    if n_samples < 1:
        raise ValueError("n_samples must be >= 1")
    worst = -np.inf
    done = 0
    while done < n_samples:
        n = min(chunk, n_samples - done)
        h = rng.uniform(-1.0, 1.0, (n, params.hidden))
        x = rng.uniform(-1.0, 1.0, n)
        p = rng.uniform(-1.0, 1.0, (n, params.n_controls))
        worst = max(worst, float(np.max(lstm_gate_sum(params, mode, h, x, p))))
        done += n
    return worst


def verify_lstm(
    params: LstmParams,
    mode: GateMode,
    margin: StabilityMargin = StabilityMargin(),
    n_samples: int = 100_000,
    seed: int = 0,
) -> ConstraintReport:
    checks = _zero_block_checks(params, LSTM_CELL, "cell")
    checks.append(_spectral_check(params, LSTM_CELL, "cell", margin))
    worst = verify_lstm_gate_bound(params, mode, n_samples, SeededRng(seed))
    checks.append(ConstraintCheck("gate_sum_inf_norm", worst, 1.0, worst < 1.0))
    return ConstraintReport("lstm", checks)


def verify_model(model: Model, margin: StabilityMargin = StabilityMargin(), seed: int = 0) -> ConstraintReport:
    if model.is_lstm:
        return verify_lstm(model.params, model.mode, margin, seed=seed)
    return verify_gru(model.params, margin)
