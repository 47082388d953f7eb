"""Training loss and empirical value functionals.

Assembles the quantities the optimizer and the evaluators consume:

- the per-trajectory training term ``(sum_t y_t^shifted) * prod_t
  Gamma_t(g_t(h_t); a_t) / prod_t pi_t`` and its exact parameter gradient,
  chained through the template-surrogate gradient and the hand-written
  policy backward pass;
- the surrogate value estimate (sample mean of the terms above);
- the plug-in inverse-probability-weighted value of an arbitrary decision
  rule on the observed (unshifted) reward scale.

The optimizer minimizes the negated surrogate value; everything reported
here is on the positive scale.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .datasets import Dataset, Trajectory, ValueEstimate, stage_feature_dim, stage_features
from .policies import PolicyArch, PolicyParams, policy_grad_accumulate, policy_scores
from .surrogates import SurrogateSpec, gamma_eval_grad

Array = np.ndarray

__all__ = [
    "WeightOverflowError",
    "LossContext",
    "traj_loss_grad",
    "minibatch_value_grad",
    "surrogate_value_hat",
    "ipw_value_hat",
    "ipw_value_estimate",
]


class WeightOverflowError(RuntimeError):
    """A propensity fell below the configured floor while flooring was disabled."""


def _effective_inv_props(props: Sequence[Array], floor: float, apply_floor: bool) -> tuple[Array, float]:
    """Stack per-stage propensities into inverse weights ``(n,)`` with floor handling.

    Returns the row products ``prod_t 1/pi_t`` and the fraction of floored
    entries.  With flooring disabled, any propensity below the floor raises
    :class:`WeightOverflowError` instead of silently producing an explosive
    weight.
    """
    pi = np.column_stack(props)
    below = pi < floor
    if apply_floor:
        frac = float(below.mean()) if floor > 0.0 else 0.0
        pi = np.maximum(pi, floor)
    else:
        frac = 0.0
        if floor > 0.0 and below.any():
            raise WeightOverflowError(
                f"{int(below.sum())} propensities fall below the floor {floor}; "
                "enable flooring or raise the data quality"
            )
    inv = 1.0 / np.prod(pi, axis=1)
    if not np.isfinite(inv).all():
        raise WeightOverflowError("propensity product underflowed to a non-finite weight")
    return inv, frac


@dataclass(frozen=True)
class LossContext:
    """Precomputed training-loss ingredients for one dataset.

    Bundles the dataset with the per-stage surrogate specification, the
    policy architecture, the reward shift in effect, and the propensity
    floor policy.  History features and the trajectory weights
    ``(sum_t y_t^shifted) / prod_t pi_t`` are computed once at construction;
    minibatch evaluations slice them by row index.

    ``surrogates`` accepts a single :class:`SurrogateSpec` (applied to every
    stage) or one per stage.  ``apply_floor=False`` (the default) makes a
    sub-floor propensity a hard :class:`WeightOverflowError`.
    """

    dataset: Dataset
    surrogates: tuple[SurrogateSpec, ...]
    arch: PolicyArch
    reward_shift: Array = None  # type: ignore[assignment]
    floor: float = 1e-4
    apply_floor: bool = False
    features: tuple[Array, ...] = field(init=False, repr=False)
    weights: Array = field(init=False, repr=False)
    floored_fraction: float = field(init=False)

    def __post_init__(self) -> None:
        ds = self.dataset
        surr = self.surrogates
        if isinstance(surr, SurrogateSpec):
            surr = (surr,) * ds.T
        surr = tuple(surr)
        if len(surr) != ds.T:
            raise ValueError(f"need one surrogate spec per stage ({ds.T}), got {len(surr)}")
        for t, (sp, st) in enumerate(zip(surr, ds.spec), start=1):
            if sp.k != st.k:
                raise ValueError(f"stage {t}: surrogate built for k={sp.k}, data has k={st.k}")
        arch = self.arch
        if len(arch.stages) != ds.T:
            raise ValueError(f"architecture has {len(arch.stages)} stages, data has {ds.T}")
        for t, (sa, st) in enumerate(zip(arch.stages, ds.spec), start=1):
            if sa.k != st.k:
                raise ValueError(f"stage {t}: architecture head count is for k={sa.k}, data has k={st.k}")
            want = stage_feature_dim(ds.spec, t)
            if sa.in_dim != want:
                raise ValueError(f"stage {t}: architecture expects in_dim={sa.in_dim}, features have {want}")
        shift = self.reward_shift
        shift = ds.reward_shift if shift is None else np.asarray(shift, dtype=float)
        if shift.shape != (ds.T,):
            raise ValueError(f"reward_shift must have shape {(ds.T,)}")
        if np.any(shift != 0.0):
            for t in range(ds.T):
                if (ds.rewards[t] + shift[t]).min() <= 0.0:
                    raise ValueError(f"stage {t + 1}: shifted rewards must be strictly positive")
        inv, frac = _effective_inv_props(ds.props, self.floor, self.apply_floor)
        total = sum(ds.rewards[t] + shift[t] for t in range(ds.T))
        feats = tuple(stage_features(ds, t) for t in range(1, ds.T + 1))
        object.__setattr__(self, "surrogates", surr)
        object.__setattr__(self, "reward_shift", shift)
        object.__setattr__(self, "features", feats)
        object.__setattr__(self, "weights", total * inv)
        object.__setattr__(self, "floored_fraction", frac)


def _paired_stage_rngs(arch: PolicyArch, train_mode: bool, rng, T: int):
    """Per-stage generator twins so the backward pass replays dropout masks.

    The backward pass recomputes the forward internally; giving it a fresh
    generator seeded identically to the one used for the visible forward is
    what keeps the masks aligned.  Without active dropout no randomness is
    consumed and both slots stay None.
    """
    if not (train_mode and any(st.dropout > 0.0 for st in arch.stages)):
        return [None] * T, [None] * T
    if rng is None:
        raise ValueError("training-mode evaluation with dropout requires an rng")
    seeds = [int(s) for s in rng.integers(0, 2**63 - 1, size=T)]
    fwd = [np.random.default_rng(s) for s in seeds]
    bwd = [np.random.default_rng(s) for s in seeds]
    return fwd, bwd


def _rows_value_grad(ctx: LossContext, idx: Array, params: PolicyParams,
                     train_mode: bool, rng) -> tuple[Array, Array]:
    """Per-row loss values and the summed parameter gradient for those rows.

    The T-stage product is differentiated with prefix/suffix partial
    products, which stay finite (and correct) when single factors vanish.
    """
    ds = ctx.dataset
    T = ds.T
    fwd_rngs, bwd_rngs = _paired_stage_rngs(ctx.arch, train_mode, rng, T)
    w = ctx.weights[idx]
    m = idx.shape[0]
    gammas = np.empty((m, T))
    dgammas: list[Array] = []
    feats: list[Array] = []
    for t in range(T):
        f_t = ctx.features[t][idx]
        g_t = policy_scores(params, ctx.arch, f_t, t + 1, train_mode=train_mode, rng=fwd_rngs[t])
        val, dg = gamma_eval_grad(ctx.surrogates[t], g_t, ds.actions[t][idx])
        gammas[:, t] = val
        dgammas.append(dg)
        feats.append(f_t)
    prefix = np.ones((m, T))
    suffix = np.ones((m, T))
    if T > 1:
        prefix[:, 1:] = np.cumprod(gammas[:, :-1], axis=1)
        suffix[:, :-1] = np.cumprod(gammas[:, :0:-1], axis=1)[:, ::-1]
    grad = np.zeros_like(params.theta)
    for t in range(T):
        coeff = w * prefix[:, t] * suffix[:, t]
        policy_grad_accumulate(params, ctx.arch, feats[t], t + 1,
                               coeff[:, None] * dgammas[t], grad,
                               train_mode=train_mode, rng=bwd_rngs[t])
    values = w * np.prod(gammas, axis=1)
    return values, grad


def traj_loss_grad(traj: Trajectory, params: PolicyParams, ctx: LossContext) -> tuple[float, Array]:
    """Training-loss term of a single trajectory and its exact parameter gradient.

    ``value = (sum_t y_t^shifted) * prod_t Gamma_t(g_t(h_t); a_t) / prod_t pi_t``.
    """
    obs = [np.asarray(s.o, dtype=float)[None, :] for s in traj.stages]
    acts = [np.array([s.a], dtype=np.int64) for s in traj.stages]
    rews = [np.array([s.y]) for s in traj.stages]
    props = [np.array([s.pi]) for s in traj.stages]
    single = Dataset(spec=ctx.dataset.spec, obs=obs, actions=acts, rewards=rews,
                     props=props, reward_shift=ctx.reward_shift)
    one = LossContext(dataset=single, surrogates=ctx.surrogates, arch=ctx.arch,
                      floor=ctx.floor, apply_floor=ctx.apply_floor)
    values, grad = _rows_value_grad(one, np.array([0]), params, False, None)
    return float(values[0]), grad


def minibatch_value_grad(params: PolicyParams, ctx: LossContext, indices=None,
                         train_mode: bool = False, rng=None) -> tuple[float, Array]:
    """Mean trajectory-loss value over ``indices`` (default: all rows) and its gradient."""
    idx = np.arange(ctx.dataset.n) if indices is None else np.asarray(indices, dtype=np.int64)
    if idx.size == 0:
        raise ValueError("minibatch must contain at least one row")
    values, grad = _rows_value_grad(ctx, idx, params, train_mode, rng)
    return float(values.mean()), grad / idx.shape[0]


def surrogate_value_hat(dataset: Dataset, params: PolicyParams, ctx: LossContext) -> float:
    """Sample mean of the surrogate trajectory values over ``dataset``."""
    if dataset is not ctx.dataset:
        ctx = LossContext(dataset=dataset, surrogates=ctx.surrogates, arch=ctx.arch,
                          floor=ctx.floor, apply_floor=ctx.apply_floor)
    values, _ = _rows_value_grad(ctx, np.arange(ctx.dataset.n), params, False, None)
    return float(values.mean())


def ipw_value_estimate(dataset: Dataset, policy: Callable, floor: float = 1e-4,
                       apply_floor: bool = True) -> ValueEstimate:
    """Inverse-probability-weighted value of a decision rule, with its SE.

    ``P_n[ prod_t 1[a_t = d_t(h_t)] / pi_t * sum_j y_j ]`` on unshifted
    rewards.  ``policy`` follows the standard policy-callable protocol
    (``policy(stage, features, rng) -> actions``) and is evaluated
    deterministically.  The floor is applied to the propensities before
    inversion (the one place flooring is on by default); the estimate
    records the floored fraction.
    """
    inv, frac = _effective_inv_props(dataset.props, floor, apply_floor)
    match = np.ones(dataset.n, dtype=bool)
    for t in range(1, dataset.T + 1):
        decided = np.asarray(policy(t, stage_features(dataset, t), None))
        match &= decided == dataset.actions[t - 1]
    total = sum(dataset.rewards)
    contrib = np.where(match, inv, 0.0) * total
    est = float(contrib.mean())
    se = float("nan") if dataset.n == 1 else float(contrib.std(ddof=1) / np.sqrt(dataset.n))
    return ValueEstimate(estimate=est, se=se, n=dataset.n, method="ipw", floored_fraction=frac)


def ipw_value_hat(dataset: Dataset, policy: Callable, floor: float = 1e-4,
                  apply_floor: bool = True) -> float:
    """Point value of :func:`ipw_value_estimate` (kept for the common case)."""
    return ipw_value_estimate(dataset, policy, floor=floor, apply_floor=apply_floor).estimate
