"""Reverse-mode gradients through unrolled cells, ADAM, and the TBPTT loop.

Gradients are computed by hand: the forward pass records every gate
activation, then a reverse sweep accumulates the state adjoint and the
per-step pre-activation adjoints. Weight gradients are reduced after the sweep
with fixed-order tensor contractions, so results do not depend on threading.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field, asdict
from typing import Callable, Sequence

import numpy as np

from .cells import (
    GruState,
    LstmState,
    Model,
    ModelConfig,
    State,
    run_sequence,
)
from . import _kernels
from .constraints import (
    FREE_KEYS,
    Parametrization,
    StabilityMargin,
    free_shapes,
    verify_model,
)
from .numerics import SeededRng

log = logging.getLogger(__name__)


class DivergedError(RuntimeError):
    """Training produced a non-finite loss or gradient."""

    def __init__(self, message: str, history: list | None = None):
        super().__init__(message)
        self.history = history or []


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 3e-4
    weight_decay: float = 0.0
    batch_size: int = 32
    tbptt: int = 1024
    epochs: int = 10
    max_steps: int | None = None
    seed: int = 0
    loss: str = "mae"

    def __post_init__(self) -> None:
        if not self.learning_rate > 0:
            raise ValueError("learning rate must be positive")
        if self.weight_decay < 0:
            raise ValueError("weight decay must be >= 0")
        if self.batch_size < 1 or self.tbptt < 1 or self.epochs < 1:
            raise ValueError("batch size, tbptt length and epochs must be >= 1")
        if self.max_steps is not None and self.max_steps < 1:
            raise ValueError("max_steps must be >= 1")
        if self.loss != "mae":
            raise ValueError("only the 'mae' loss is supported")

    def to_dict(self) -> dict:
        return asdict(self)


def mae(pred, target) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    if pred.shape != target.shape:
        raise ValueError(f"length mismatch: {pred.shape} vs {target.shape}")
    if pred.size == 0:
        raise ValueError("mae needs at least one sample")
    return float(np.mean(np.abs(pred - target)))


# ----------------------------------------------------------------- forward/backward


@dataclass
class SegmentResult:
    loss: float
    grads: dict[str, np.ndarray]  # w.r.t. free parameters
    final_state: State
    output: np.ndarray


def _as_batch(x, controls, target, mask, n_ctl):
    x = np.atleast_2d(np.asarray(x, dtype=np.float64))
    target = np.atleast_2d(np.asarray(target, dtype=np.float64))
    controls = np.asarray(controls, dtype=np.float64)
    if controls.ndim == 1:
        controls = controls[None]
    if controls.ndim == 2:
        controls = np.broadcast_to(controls[:, None, :], x.shape + (n_ctl,))
    if x.shape != target.shape or controls.shape != x.shape + (n_ctl,):
        raise ValueError("segment input, target and controls must share (batch, time) shape")
    if mask is None:
        mask = np.ones_like(x)
    else:
        mask = np.atleast_2d(np.asarray(mask, dtype=np.float64))
    return x, controls, target, mask


def backward_segment(
    parametrization: Parametrization,
    state: State | None,
    x,
    controls,
    target,
    mask=None,
    model: Model | None = None,
) -> SegmentResult:
    """MAE over one TBPTT segment and its exact gradient w.r.t. free parameters.

    Arrays are (B, T) for audio and (B, T, p) or (B, p) for controls; 1-D
    inputs are treated as a batch of one. ``mask`` weights each sample (0 for
    padding). The initial state is a constant: no gradient flows into it, and
    the returned final state is a detached copy.
    """
    if model is None:
        model = parametrization.materialize()
    params = model.params
    x, controls, target, mask = _as_batch(x, controls, target, mask, params.n_controls)
    bsz, n_t = x.shape
    count = float(np.sum(mask))
    if n_t == 0 or count == 0:
        raise ValueError("segment must contain at least one weighted sample")
    if state is None:
        state = model.zero_state((bsz,))

    out = model.output
    mode = model.mode
    x = np.ascontiguousarray(x)
    blocks = (params.recurrent, params.input, params.control, params.bias)
    h0 = np.ascontiguousarray(state.h, dtype=np.float64)
    if model.is_lstm:
        c0 = np.ascontiguousarray(state.c, dtype=np.float64)
        hs, cs, gates = _kernels.lstm_forward_cache(*blocks, h0, c0, x, controls, mode.coupled, mode.eps)
        final = LstmState(hs[-1].copy(), cs[-1].copy())
    else:
        hs, r, z, n, rh = _kernels.gru_forward_cache(*blocks, h0, x, controls)
        final = GruState(hs[-1].copy())
    h_seq = hs[1:]  # (T, B, H)
    y = (h_seq @ out.w_out).T + out.b_out + out.skip_gain * x
    err = y - target
    loss = float(np.sum(mask * np.abs(err)) / count)
    if not math.isfinite(loss):
        raise DivergedError(f"non-finite segment loss ({loss})")

    dy = mask * np.sign(err) / count  # (B, T)
    dy_t = dy.T
    dh_out = np.ascontiguousarray(dy_t[:, :, None] * out.w_out)  # (T, B, H)
    grads: dict[str, np.ndarray] = {
        "w_out": np.einsum("tb,tbh->h", dy_t, h_seq),
        "b_out": np.array(np.sum(dy)),
    }
    n_flat = n_t * bsz
    hid = params.hidden
    if model.is_lstm:
        da = _kernels.lstm_backward(params.recurrent, cs, gates, dh_out, mode.coupled, mode.eps)
        d_rec = np.einsum("ngi,nj->gij", da.reshape(n_flat, 4, hid), hs[:-1].reshape(n_flat, hid), optimize=True)
    else:
        da = _kernels.gru_backward(params.recurrent, hs, r, z, n, dh_out)
        flat = da.reshape(n_flat, 3, hid)
        d_rec = np.empty_like(params.recurrent)
        d_rec[:2] = np.einsum("ngi,nj->gij", flat[:, :2], hs[:-1].reshape(n_flat, hid), optimize=True)
        d_rec[2] = flat[:, 2].T @ rh.reshape(n_flat, hid)
    da_bt = da.transpose(1, 0, 2, 3)  # (B, T, G, H)
    grads["recurrent"] = d_rec
    grads["input"] = np.einsum("btgh,bt->gh", da_bt, x)
    grads["control"] = np.einsum("btgh,btk->ghk", da_bt, controls)
    grads["bias"] = da_bt.sum(axis=(0, 1))
    free_grads = parametrization.pullback(grads)
    for k, g in free_grads.items():
        if not np.all(np.isfinite(g)):
            raise DivergedError(f"non-finite gradient in block {k!r}")
    return SegmentResult(loss, free_grads, final, y)


def segment_loss(parametrization: Parametrization, state, x, controls, target, mask=None) -> float:
    """Forward-only loss through the same materialization; the finite-difference oracle."""
    model = parametrization.materialize()
    x, controls, target, mask = _as_batch(x, controls, target, mask, model.params.n_controls)
    if state is None:
        state = model.zero_state((x.shape[0],))
    y, _ = run_sequence(model, state, x, controls)
    return float(np.sum(mask * np.abs(y - target)) / np.sum(mask))


# ----------------------------------------------------------------- gradient check


@dataclass
class GradCheckReport:
    max_rel_error: dict[str, float]
    analytic: dict[str, np.ndarray] = field(repr=False)
    numeric: dict[str, np.ndarray] = field(repr=False)

    @property
    def worst(self) -> float:
        return max(self.max_rel_error.values())


GRAD_ABS_FLOOR = 1e-8


def block_relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| over a block, relative to the block's largest gradient magnitude.

    Blocks whose gradients are all below 1e-8 are compared in absolute terms:
    central differences at step 1e-6 carry roundoff near 1e-10, so a block whose
    true gradient is exactly zero would otherwise score a relative error of 1.
    """
    scale = max(float(np.max(np.abs(analytic), initial=0.0)), float(np.max(np.abs(numeric), initial=0.0)))
    diff = float(np.max(np.abs(analytic - numeric), initial=0.0))
    if scale < GRAD_ABS_FLOOR:
        return diff
    return diff / scale


def gradient_check(
    parametrization: Parametrization,
    state,
    x,
    controls,
    target,
    step: float = 1e-6,
) -> GradCheckReport:
    """Compare analytic gradients with central differences, block by block."""
    analytic = backward_segment(parametrization, state, x, controls, target).grads
    numeric: dict[str, np.ndarray] = {}
    for k in FREE_KEYS:
        arr = parametrization.free[k]
        g = np.zeros_like(arr)
        flat = arr.reshape(-1)  # view: edits change the parametrization in place
        gflat = g.reshape(-1)
        for j in range(flat.size):
            orig = flat[j]
            flat[j] = orig + step
            lp = segment_loss(parametrization, state, x, controls, target)
            flat[j] = orig - step
            lm = segment_loss(parametrization, state, x, controls, target)
            flat[j] = orig
            gflat[j] = (lp - lm) / (2.0 * step)
        numeric[k] = g
    errs = {k: block_relative_error(analytic[k], numeric[k]) for k in FREE_KEYS}
    return GradCheckReport(errs, analytic, numeric)


# ----------------------------------------------------------------- optimizer


@dataclass
class AdamState:
    m: dict[str, np.ndarray]
    v: dict[str, np.ndarray]
    step: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8

    @classmethod
    def zeros_like(cls, params: dict[str, np.ndarray]) -> AdamState:
        return cls({k: np.zeros_like(a) for k, a in params.items()}, {k: np.zeros_like(a) for k, a in params.items()})

    def to_dict(self) -> dict:
        return {
            "step": self.step,
            "beta1": self.beta1,
            "beta2": self.beta2,
            "eps": self.eps,
            "m": {k: a.tolist() for k, a in self.m.items()},
            "v": {k: a.tolist() for k, a in self.v.items()},
        }

    @classmethod
    def from_dict(cls, d: dict) -> AdamState:
        return cls(
            {k: np.asarray(a, dtype=np.float64) for k, a in d["m"].items()},
            {k: np.asarray(a, dtype=np.float64) for k, a in d["v"].items()},
            int(d["step"]),
            d["beta1"],
            d["beta2"],
            d["eps"],
        )


def adam_step(
    params: dict[str, np.ndarray],
    grads: dict[str, np.ndarray],
    opt: AdamState,
    lr: float,
    weight_decay: float = 0.0,
) -> None:
    """In-place ADAM update with bias correction (L2 weight decay added to the gradient)."""
    if set(params) != set(grads) or set(params) != set(opt.m):
        raise ValueError("parameter, gradient and optimizer keys differ")
    for k in params:
        if params[k].shape != grads[k].shape or opt.m[k].shape != params[k].shape:
            raise ValueError(f"shape mismatch for {k!r}")
    opt.step += 1
    t = opt.step
    c1 = 1.0 - opt.beta1**t
    c2 = 1.0 - opt.beta2**t
    for k in sorted(params):
        g = grads[k]
        if weight_decay:
            g = g + weight_decay * params[k]
        opt.m[k] = opt.beta1 * opt.m[k] + (1.0 - opt.beta1) * g
        opt.v[k] = opt.beta2 * opt.v[k] + (1.0 - opt.beta2) * g * g
        m_hat = opt.m[k] / c1
        v_hat = opt.v[k] / c2
        params[k] -= lr * m_hat / (np.sqrt(v_hat) + opt.eps)


# ----------------------------------------------------------------- init & loop


def _orthogonal(rng: SeededRng, n: int) -> np.ndarray:
    q, r = np.linalg.qr(rng.normal(size=(n, n)))
    return q * np.where(np.diag(r) < 0, -1.0, 1.0)


def init_params(config: ModelConfig, rng: SeededRng) -> dict[str, np.ndarray]:
    """Start inside the stable set: recurrent blocks orthogonal with norm 0.5,
    input/control blocks uniform in +-1/sqrt(1 + p), zero biases."""
    shapes = free_shapes(config)
    g, h = shapes["recurrent"][:2]
    recurrent = np.stack([0.5 * _orthogonal(rng, h) for _ in range(g)])
    bound = 1.0 / math.sqrt(1 + config.n_controls)
    return {
        "recurrent": recurrent,
        "input": rng.uniform(-bound, bound, shapes["input"]),
        "control": rng.uniform(-bound, bound, shapes["control"]),
        "bias": np.zeros(shapes["bias"]),
        "w_out": rng.uniform(-1.0 / math.sqrt(h), 1.0 / math.sqrt(h), (h,)),
        "b_out": np.array(0.0),
    }


@dataclass
class TrainSample:
    """Normalized (input, target, controls) triple, as produced by ``datasets``."""

    input: np.ndarray
    target: np.ndarray
    controls: np.ndarray


@dataclass
class EpochRecord:
    epoch: int
    steps: int
    train_mae: float
    eval_mae: float
    constraints: str  # "pass", "fail" or "unconstrained"

    @property
    def eval_mae_db(self) -> float:
        return 20.0 * math.log10(self.eval_mae) if self.eval_mae > 0 else -math.inf


@dataclass
class TrainResult:
    parametrization: Parametrization
    optimizer: AdamState
    history: list[EpochRecord]
    best_free: dict[str, np.ndarray]
    best_pi_vector: np.ndarray | None
    best_eval_mae: float
    best_epoch: int
    rng: SeededRng

    @property
    def model(self) -> Model:
        return self.parametrization.materialize()

    def best_parametrization(self) -> Parametrization:
        p = self.parametrization
        return Parametrization(p.config, self.best_free, p.margin, p.pi_iters, p.pi_tol, self.best_pi_vector)


def _pad(samples: Sequence[TrainSample]) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    n = max(len(s.input) for s in samples)
    bsz = len(samples)
    x = np.zeros((bsz, n))
    y = np.zeros((bsz, n))
    mask = np.zeros((bsz, n))
    for b, s in enumerate(samples):
        x[b, : len(s.input)] = s.input
        y[b, : len(s.target)] = s.target
        mask[b, : len(s.input)] = 1.0
    controls = np.stack([np.asarray(s.controls, dtype=np.float64) for s in samples])
    return x, controls, y, mask


def predict(model: Model, samples: Sequence[TrainSample], batch_size: int = 32) -> list[np.ndarray]:
    """Model output per sample, each run from a zero state."""
    outs: list[np.ndarray] = []
    for lo in range(0, len(samples), batch_size):
        chunk = samples[lo : lo + batch_size]
        x, controls, _, _ = _pad(chunk)
        y, _ = run_sequence(model, model.zero_state((len(chunk),)), x, controls)
        outs.extend(y[b, : len(s.input)] for b, s in enumerate(chunk))
    return outs


def evaluate_mae(model: Model, samples: Sequence[TrainSample], batch_size: int = 32) -> float:
    """MAE over the concatenation of every sample's error."""
    if not samples:
        raise ValueError("empty dataset")
    preds = predict(model, samples, batch_size)
    total = sum(float(np.sum(np.abs(p - s.target))) for p, s in zip(preds, samples))
    return total / sum(len(s.target) for s in samples)


def train(
    config: ModelConfig,
    train_set: Sequence[TrainSample],
    eval_set: Sequence[TrainSample],
    tcfg: TrainConfig,
    margin: StabilityMargin = StabilityMargin(),
    on_epoch: Callable[[EpochRecord, TrainResult], None] | None = None,
) -> TrainResult:
    """TBPTT training; the best checkpoint is chosen by evaluation MAE.

    Each batch starts from a zero state; the final state of one segment
    initializes the next segment of the same samples. Raises
    :class:`DivergedError` (with the partial history) on a non-finite loss.
    """
    if not train_set or not eval_set:
        raise ValueError("training and evaluation sets must be nonempty")
    rng = SeededRng(tcfg.seed)
    init_rng = rng.spawn(0)
    shuffle_rng = rng.spawn(1)
    param = Parametrization(config, init_params(config, init_rng), margin)
    opt = AdamState.zeros_like(param.free)
    history: list[EpochRecord] = []
    result = TrainResult(param, opt, history, {}, None, math.inf, -1, shuffle_rng)
    steps = 0
    for epoch in range(1, tcfg.epochs + 1):
        order = shuffle_rng.permutation(len(train_set))
        loss_sum = 0.0
        weight_sum = 0.0
        for lo in range(0, len(order), tcfg.batch_size):
            batch = [train_set[i] for i in order[lo : lo + tcfg.batch_size]]
            x, controls, y, mask = _pad(batch)
            state = None
            for s0 in range(0, x.shape[1], tcfg.tbptt):
                seg = slice(s0, s0 + tcfg.tbptt)
                w = float(np.sum(mask[:, seg]))
                try:
                    res = backward_segment(param, state, x[:, seg], controls, y[:, seg], mask[:, seg])
                except DivergedError as exc:
                    exc.history = history
                    raise
                adam_step(param.free, res.grads, opt, tcfg.learning_rate, tcfg.weight_decay)
                if not all(np.all(np.isfinite(a)) for a in param.free.values()):
                    raise DivergedError(f"non-finite parameters after step {steps + 1}", history)
                state = res.final_state
                loss_sum += res.loss * w
                weight_sum += w
                steps += 1
                if tcfg.max_steps is not None and steps >= tcfg.max_steps:
                    break
            if tcfg.max_steps is not None and steps >= tcfg.max_steps:
                break
        model = param.materialize()
        eval_mae = evaluate_mae(model, eval_set, tcfg.batch_size)
        if not math.isfinite(eval_mae):
            raise DivergedError(f"non-finite evaluation loss at epoch {epoch}", history)
        status = verify_model(model, margin).passed if config.stable else None
        rec = EpochRecord(
            epoch,
            steps,
            loss_sum / weight_sum,
            eval_mae,
            "unconstrained" if status is None else ("pass" if status else "fail"),
        )
        history.append(rec)
        log.info("epoch %d steps %d train %.6g eval %.6g (%.2f dB) %s",
                 epoch, steps, rec.train_mae, eval_mae, rec.eval_mae_db, rec.constraints)
        if eval_mae < result.best_eval_mae:
            result.best_eval_mae = eval_mae
            result.best_epoch = epoch
            result.best_free = {k: a.copy() for k, a in param.free.items()}
            result.best_pi_vector = None if param.pi_vector is None else param.pi_vector.copy()
        if on_epoch is not None:
            on_epoch(rec, result)
        if tcfg.max_steps is not None and steps >= tcfg.max_steps:
            break
    return result
