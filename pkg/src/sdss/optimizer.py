"""Minibatch ADAM with plateau LR reduction, restarts, and best tracking.

The training objective's plateaus and vanishing gradients motivate three
safeguards layered on plain ADAM: gradient clipping to unit norm, a
patience-driven learning-rate reduction tracked on an exponential moving
average (EMA) of the validation loss, and full random re-initialization when
reductions stop helping.  The best parameters seen (by EMA) are kept across
restarts and returned.

All randomness (split, minibatch order, initializations, dropout) derives
from a single seeded generator, so a fit is bit-reproducible.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass
from typing import NamedTuple

import numpy as np

from .datasets import Dataset
from .objective import LossContext, minibatch_value_grad, surrogate_value_hat
from .policies import PolicyArch, PolicyParams, init_params, standardize_params

Array = np.ndarray

__all__ = [
    "OptimConfig",
    "AdamState",
    "TraceRecord",
    "FitResult",
    "adam_update",
    "sdss_fit",
    "trace_to_csv",
]


@dataclass(frozen=True)
class OptimConfig:
    """Hyperparameters of the fitting loop.

    ``N_epoch`` counts minibatch steps (one step consumes one minibatch from
    an epoch-cycled, reshuffled, without-replacement schedule).  ``kappa``
    weights the newest validation loss in the EMA.  ``delta_imp`` is the
    improvement margin a new EMA must beat the incumbent by.  ``decay`` is a
    coupled weight-decay coefficient added to the raw gradient before
    clipping.  ``init`` picks the (re)initialization scheme.
    """

    lr0: float = 0.05
    R_F: float = 0.7
    r_eval: int = 3
    N_patience: int = 10
    N_restart: int = 4
    D1: float = 0.9
    D2: float = 0.999
    n_mini: int = 32
    kappa: float = 0.8
    eps_num: float = 1e-8
    delta_imp: float = 0.0
    N_epoch: int = 1500
    max_restarts: int = 5
    split: float = 0.8
    decay: float = 1e-3
    seed: int = 0
    init: str = "he"

    def __post_init__(self) -> None:
        checks = [
            (1e-3 <= self.lr0 <= 0.2, "lr0 must lie in [1e-3, 0.2]"),
            (0.5 < self.R_F < 0.8, "R_F must lie in (0.5, 0.8)"),
            (self.r_eval in (2, 3, 4), "r_eval must be 2, 3, or 4"),
            (self.N_patience >= 1, "N_patience must be >= 1"),
            (3 <= self.N_restart <= 10, "N_restart must lie in 3..10"),
            (0.0 <= self.D1 < 1.0, "D1 must lie in [0, 1)"),
            (0.0 <= self.D2 < 1.0, "D2 must lie in [0, 1)"),
            (self.n_mini >= 1, "n_mini must be >= 1"),
            (0.1 < self.kappa <= 0.8, "kappa must lie in (0.1, 0.8]"),
            (self.eps_num > 0.0, "eps_num must be positive"),
            (0.0 <= self.delta_imp <= 0.001, "delta_imp must lie in [0, 0.001]"),
            (self.N_epoch >= 0, "N_epoch must be >= 0"),
            (self.max_restarts >= 0, "max_restarts must be >= 0"),
            (0.0 < self.split < 1.0, "split must lie in (0, 1)"),
            (self.decay >= 0.0, "decay must be >= 0"),
            (self.init in ("he", "xavier"), "init must be 'he' or 'xavier'"),
        ]
        for ok, msg in checks:
            if not ok:
                raise ValueError(msg)


@dataclass
class AdamState:
    """Serial state of the update rule plus the scheduler counters.

    ``R_1`` counts learning-rate reductions since the last improvement,
    ``R_2`` counts evaluations since the last improvement.  ``lr`` always
    equals ``lr0 * R_F**reductions`` for the current restart leg, computed
    from the exponent rather than by cumulative multiplication so the value
    is exact.  ``ema_val`` is None until the first finite validation loss.
    """

    mom1: Array
    mom2: Array
    r: int = 0
    lr: float = 0.0
    reductions: int = 0
    R_1: int = 0
    R_2: int = 0
    best_val: float = math.inf
    ema_val: float | None = None
    theta_best: Array | None = None

    @classmethod
    def fresh(cls, dim: int, lr0: float) -> "AdamState":
        return cls(mom1=np.zeros(dim), mom2=np.zeros(dim), lr=lr0)


class TraceRecord(NamedTuple):
    r: int
    loss_train: float
    loss_val: float
    ema: float
    lr: float
    restarts: int


@dataclass(frozen=True)
class FitResult:
    """Outcome of a fit: best parameters, per-evaluation trace, bookkeeping."""

    params_best: PolicyParams
    trace: tuple[TraceRecord, ...]
    restarts: int
    wall_clock: float

    @property
    def theta_best(self) -> Array:
        return self.params_best.theta


def adam_update(state: AdamState, grad: Array, theta: Array, cfg: OptimConfig) -> tuple[AdamState, Array]:
    """One ADAM step with coupled weight decay and unit-norm gradient clipping.

    Updates ``state`` in place and returns it with the new parameter vector;
    ``theta`` itself is not modified.  Raises on non-finite gradients (the
    caller gets step diagnostics rather than silently poisoned moments).
    """
    grad = np.asarray(grad, dtype=float)
    if grad.shape != theta.shape or grad.shape != state.mom1.shape:
        raise ValueError("grad, theta, and moments must share one flat shape")
    if not np.isfinite(grad).all():
        bad = int((~np.isfinite(grad)).sum())
        raise RuntimeError(
            f"non-finite gradient at step {state.r + 1}: {bad}/{grad.size} entries; "
            f"|theta|_max={np.abs(theta).max():.3e}, lr={state.lr:.3e}"
        )
    g = grad + cfg.decay * theta
    norm = float(np.linalg.norm(g))
    if norm > 1.0:
        g = g / norm
    state.r += 1
    state.mom1 = cfg.D1 * state.mom1 + (1.0 - cfg.D1) * g
    state.mom2 = cfg.D2 * state.mom2 + (1.0 - cfg.D2) * g * g
    m_hat = state.mom1 / (1.0 - cfg.D1**state.r)
    v_hat = state.mom2 / (1.0 - cfg.D2**state.r)
    new_theta = theta - state.lr * m_hat / (np.sqrt(v_hat) + cfg.eps_num)
    return state, new_theta


class _MinibatchSchedule:
    """Epoch-cycled sampling without replacement, reshuffled per cycle."""

    def __init__(self, n: int, batch: int, rng: np.random.Generator) -> None:
        self.n = n
        self.batch = min(batch, n)
        self.rng = rng
        self.order = rng.permutation(n)
        self.pos = 0

    def next_batch(self) -> Array:
        if self.pos + self.batch > self.n:
            self.order = self.rng.permutation(self.n)
            self.pos = 0
        out = self.order[self.pos : self.pos + self.batch]
        self.pos += self.batch
        return out


def _reinit_theta(params: PolicyParams, arch: PolicyArch, cfg: OptimConfig,
                  rng: np.random.Generator) -> None:
    """Draw fresh parameters in place, keeping the standardization stats."""
    seed = int(rng.integers(0, 2**63 - 1))
    fresh = init_params(arch, scheme=cfg.init, seed=seed)
    params.theta[:] = fresh.theta


def sdss_fit(dataset: Dataset, arch: PolicyArch, surrogate, cfg: OptimConfig,
             floor: float = 1e-4, apply_floor: bool = False) -> FitResult:
    """Fit policy parameters by minimizing the negated surrogate value.

    Splits ``dataset`` into train/validation per ``cfg.split``, runs
    ``cfg.N_epoch`` minibatch ADAM steps, evaluates the full-batch validation
    loss every ``cfg.r_eval`` steps, tracks its EMA, reduces the learning
    rate after ``cfg.N_patience`` stale evaluations, and re-initializes after
    ``cfg.N_restart`` fruitless reductions (at most ``cfg.max_restarts``
    times, preserving the incumbent best).  Returns the best parameters by
    validation EMA together with the evaluation trace.
    """
    t0 = time.perf_counter()
    if dataset.n < 2:
        raise ValueError("fitting requires at least 2 rows (train and validation)")
    for t in range(1, dataset.T + 1):
        if dataset.shifted_rewards(t).min() <= 0.0:
            raise ValueError(
                f"stage {t}: shifted rewards must be strictly positive for training; "
                "apply a reward shift first"
            )
    rng = np.random.default_rng(cfg.seed)
    # Deterministic, seed-independent split: validation = leading rows, train
    # = the rest.  Rows are exchangeable for the data this package generates,
    # and a fixed holdout means different seeds vary only the optimization
    # randomness (initialization, minibatch order), not the split.
    n_train = min(max(int(round(cfg.split * dataset.n)), 1), dataset.n - 1)
    n_val = dataset.n - n_train
    ds_train = dataset.take(np.arange(n_val, dataset.n))
    ds_val = dataset.take(np.arange(n_val))
    ctx_train = LossContext(dataset=ds_train, surrogates=surrogate, arch=arch,
                            floor=floor, apply_floor=apply_floor)
    ctx_val = LossContext(dataset=ds_val, surrogates=surrogate, arch=arch,
                          floor=floor, apply_floor=apply_floor)

    params = init_params(arch, scheme=cfg.init, seed=int(rng.integers(0, 2**63 - 1)))
    params = standardize_params(params, [ctx_train.features[t] for t in range(dataset.T)])
    state = AdamState.fresh(params.theta.size, cfg.lr0)
    state.theta_best = params.theta.copy()
    use_dropout = any(st.dropout > 0.0 for st in arch.stages)

    schedule = _MinibatchSchedule(n_train, cfg.n_mini, rng)
    trace: list[TraceRecord] = []
    restarts = 0
    finite_val_seen = False

    for step in range(1, cfg.N_epoch + 1):
        idx = schedule.next_batch()
        value, vgrad = minibatch_value_grad(params, ctx_train, idx,
                                            train_mode=use_dropout, rng=rng if use_dropout else None)
        state, new_theta = adam_update(state, -vgrad, params.theta, cfg)
        params.theta[:] = new_theta
        if step % cfg.r_eval != 0:
            continue
        loss_train = -value
        loss_val = -surrogate_value_hat(ds_val, params, ctx_val)
        if math.isfinite(loss_val):
            finite_val_seen = True
            if state.ema_val is None:
                state.ema_val = loss_val
            else:
                state.ema_val = cfg.kappa * loss_val + (1.0 - cfg.kappa) * state.ema_val
            improved = state.ema_val < state.best_val - cfg.delta_imp
        else:
            improved = False
        if improved:
            state.best_val = state.ema_val
            state.theta_best = params.theta.copy()
            state.R_1 = 0
            state.R_2 = 0
        else:
            state.R_2 += 1
            if state.R_2 >= cfg.N_patience:
                state.reductions += 1
                state.lr = cfg.lr0 * cfg.R_F**state.reductions
                state.R_2 = 0
                state.R_1 += 1
                if state.R_1 >= cfg.N_restart and restarts < cfg.max_restarts:
                    _reinit_theta(params, arch, cfg, rng)
                    state.mom1[:] = 0.0
                    state.mom2[:] = 0.0
                    state.r = 0
                    state.reductions = 0
                    state.lr = cfg.lr0
                    state.R_1 = 0
                    state.R_2 = 0
                    state.ema_val = None
                    restarts += 1
        ema_rec = state.ema_val if state.ema_val is not None else math.nan
        trace.append(TraceRecord(step, loss_train, loss_val, ema_rec, state.lr, restarts))

    if cfg.N_epoch >= cfg.r_eval and not finite_val_seen:
        raise RuntimeError("every validation loss was non-finite; aborting fit")

    best = params.copy()
    best.theta[:] = state.theta_best
    return FitResult(
        params_best=best,
        trace=tuple(trace),
        restarts=restarts,
        wall_clock=time.perf_counter() - t0,
    )


def trace_to_csv(trace, path: str) -> None:
    """Write an evaluation trace as delimited text."""
    with open(path, "w", newline="") as fh:
        fh.write("r,loss_train,loss_val,ema,lr,restarts\n")
        for rec in trace:
            fh.write(
                f"{rec.r},{repr(float(rec.loss_train))},{repr(float(rec.loss_val))},"
                f"{repr(float(rec.ema))},{repr(float(rec.lr))},{rec.restarts}\n"
            )
