"""Trajectory data model and synthetic decision-process environments.

This module defines the columnar trajectory container used throughout the
package, two synthetic multi-stage environments (``scheme1`` with a quadratic
second-stage signal, ``scheme2`` with high-dimensional covariates and
history-dependent treatment assignment), the fixed seven-row single-stage
example set, closed-form oracle assignment rules, and Monte-Carlo policy
evaluation against the true environment.

Conventions
-----------
- Treatments are 1-based integers ``1..k_t``.
- A *policy callable* has signature ``policy(stage, features, rng) -> actions``
  where ``features`` is the ``(n, d_t)`` history-feature matrix produced by
  :func:`stage_features` (stage-1 features are the baseline covariates;
  later stages concatenate, per earlier stage, the covariate block, a one-hot
  encoding of the action, and the observed reward, followed by the current
  covariate block).  Deterministic policies ignore ``rng``.
- Rewards stored on a :class:`Dataset` are always on the observed scale; the
  per-stage ``reward_shift`` vector is a training-time location shift applied
  by the loss, never by the generators or the evaluators.
"""

from __future__ import annotations

import csv
import json
import math
import os
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np
from scipy.special import logsumexp

from .policies import pred_rows

Array = np.ndarray

__all__ = [
    "StageSpec",
    "StageObs",
    "Trajectory",
    "Dataset",
    "EnvSpec",
    "ValueEstimate",
    "env_stage_specs",
    "one_hot",
    "stage_features",
    "stage_feature_dim",
    "compute_reward_shift",
    "with_reward_shift",
    "gen_scheme1",
    "gen_scheme2",
    "toy_dataset",
    "generate",
    "scheme2_propensity_rows",
    "oracle_assign",
    "oracle_policy",
    "uniform_random_policy",
    "mc_policy_value",
    "dataset_meta_path",
    "save_dataset_csv",
    "load_dataset_csv",
]


# ---------------------------------------------------------------------------
# domain types
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class StageSpec:
    """Shape of one decision stage: index ``t``, arm count ``k``, covariate width."""

    t: int
    k: int
    cov_dim: int

    def __post_init__(self) -> None:
        if self.t < 1:
            raise ValueError(f"stage index must be >= 1, got {self.t}")
        if self.k < 2:
            raise ValueError(f"stage {self.t}: treatment count must be >= 2, got {self.k}")
        if self.cov_dim < 0:
            raise ValueError(f"stage {self.t}: covariate dimension must be >= 0")


@dataclass(frozen=True)
class StageObs:
    """One stage of a single trajectory: covariates, action, reward, propensity."""

    o: Array
    a: int
    y: float
    pi: float


@dataclass(frozen=True)
class Trajectory:
    """A single observation across all stages, in stage order."""

    stages: tuple[StageObs, ...]

    def history(self, stage: int) -> tuple:
        """Return the raw history ``(o_1, a_1, y_1, ..., o_t)`` up to ``stage``."""
        parts: list = []
        for s in self.stages[: stage - 1]:
            parts.extend([s.o, s.a, s.y])
        parts.append(self.stages[stage - 1].o)
        return tuple(parts)


@dataclass(frozen=True)
class Dataset:
    """Columnar store of ``n`` trajectories over ``T`` stages.

    Parameters
    ----------
    spec : tuple of StageSpec
        Per-stage shape metadata; stage indices must be contiguous ``1..T``.
    obs, actions, rewards, props : tuples of arrays
        One entry per stage: ``obs[t]`` is ``(n, cov_dim_t)`` float, ``actions[t]``
        is ``(n,)`` int in ``1..k_t``, ``rewards[t]`` is ``(n,)`` float, and
        ``props[t]`` is ``(n,)`` float in ``(0, 1]`` holding the behavior
        probability of the recorded action.
    reward_shift : array, shape (T,)
        Training-time location shift per stage (default all zero).  When any
        entry is nonzero, every shifted reward must be strictly positive.

    Arrays are copied on construction and marked read-only; a ``Dataset`` is
    safe to share across threads.
    """

    spec: tuple[StageSpec, ...]
    obs: tuple[Array, ...]
    actions: tuple[Array, ...]
    rewards: tuple[Array, ...]
    props: tuple[Array, ...]
    reward_shift: Array = field(default=None)  # type: ignore[assignment]

    def __post_init__(self) -> None:
        spec = tuple(self.spec)
        if not spec:
            raise ValueError("Dataset requires at least one stage")
        for i, st in enumerate(spec):
            if st.t != i + 1:
                raise ValueError(f"stage indices must be contiguous 1..T, got {st.t} at position {i}")
        T = len(spec)

        def freeze(a: Array, dtype) -> Array:
            raw = np.asarray(a)
            if dtype is np.int64 and not np.issubdtype(raw.dtype, np.integer):
                if raw.size and np.any(raw != np.round(raw)):
                    raise ValueError("actions must be integers")
            out = np.array(raw, dtype=dtype, copy=True)
            out.setflags(write=False)
            return out

        obs = tuple(freeze(o, float) for o in self.obs)
        actions = tuple(freeze(a, np.int64) for a in self.actions)
        rewards = tuple(freeze(y, float) for y in self.rewards)
        props = tuple(freeze(p, float) for p in self.props)
        if not (len(obs) == len(actions) == len(rewards) == len(props) == T):
            raise ValueError("per-stage column tuples must all have length T")
        n = actions[0].shape[0]
        if n < 1:
            raise ValueError("Dataset requires at least one trajectory")
        for st, o, a, y, p in zip(spec, obs, actions, rewards, props):
            if o.shape != (n, st.cov_dim):
                raise ValueError(f"stage {st.t}: covariate block must have shape {(n, st.cov_dim)}, got {o.shape}")
            for name, col in (("actions", a), ("rewards", y), ("propensities", p)):
                if col.shape != (n,):
                    raise ValueError(f"stage {st.t}: {name} must have shape {(n,)}, got {col.shape}")
            if a.min() < 1 or a.max() > st.k:
                raise ValueError(f"stage {st.t}: actions must lie in 1..{st.k}")
            if not np.isfinite(y).all():
                raise ValueError(f"stage {st.t}: rewards must be finite")
            if not np.isfinite(p).all() or p.min() <= 0.0 or p.max() > 1.0:
                raise ValueError(f"stage {st.t}: propensities must lie in (0, 1]")
        shift = self.reward_shift
        shift = np.zeros(T) if shift is None else np.array(shift, dtype=float, copy=True)
        if shift.shape != (T,):
            raise ValueError(f"reward_shift must have shape {(T,)}, got {shift.shape}")
        if np.any(shift != 0.0):
            for st, y in zip(spec, rewards):
                if (y + shift[st.t - 1]).min() <= 0.0:
                    raise ValueError(f"stage {st.t}: shifted rewards must be strictly positive")
        shift.setflags(write=False)
        object.__setattr__(self, "spec", spec)
        object.__setattr__(self, "obs", obs)
        object.__setattr__(self, "actions", actions)
        object.__setattr__(self, "rewards", rewards)
        object.__setattr__(self, "props", props)
        object.__setattr__(self, "reward_shift", shift)

    @property
    def n(self) -> int:
        return self.actions[0].shape[0]

    @property
    def T(self) -> int:
        return len(self.spec)

    def shifted_rewards(self, stage: int) -> Array:
        """Rewards at ``stage`` (1-based) with the training shift applied."""
        return self.rewards[stage - 1] + self.reward_shift[stage - 1]

    def row(self, i: int) -> Trajectory:
        """Materialise trajectory ``i`` as a :class:`Trajectory`."""
        stages = tuple(
            StageObs(
                o=self.obs[t][i].copy(),
                a=int(self.actions[t][i]),
                y=float(self.rewards[t][i]),
                pi=float(self.props[t][i]),
            )
            for t in range(self.T)
        )
        return Trajectory(stages=stages)

    def take(self, indices) -> "Dataset":
        """Return a new Dataset holding the rows selected by ``indices``."""
        idx = np.asarray(indices, dtype=np.int64)
        return Dataset(
            spec=self.spec,
            obs=tuple(o[idx] for o in self.obs),
            actions=tuple(a[idx] for a in self.actions),
            rewards=tuple(y[idx] for y in self.rewards),
            props=tuple(p[idx] for p in self.props),
            reward_shift=self.reward_shift,
        )


@dataclass(frozen=True)
class EnvSpec:
    """Tag for a generative environment.

    ``kind`` is one of ``"scheme1"`` (uses ``omega``), ``"scheme2"`` (uses
    ``p``), ``"toy7"`` (fixed seven-row set), or ``"custom"`` (user-supplied
    ``sampler(n, seed) -> Dataset``; no oracle or forced-action simulator).
    """

    kind: str
    omega: float = 10.0
    p: int = 50
    sampler: Callable | None = None

    def __post_init__(self) -> None:
        if self.kind not in ("scheme1", "scheme2", "toy7", "custom"):
            raise ValueError(f"unknown environment kind {self.kind!r}")
        if self.kind == "scheme1" and not self.omega > 0.0:
            raise ValueError("scheme1 requires omega > 0")
        if self.kind == "scheme2" and self.p < 1:
            raise ValueError("scheme2 requires p >= 1")

    @classmethod
    def scheme1(cls, omega: float = 10.0) -> "EnvSpec":
        return cls(kind="scheme1", omega=omega)

    @classmethod
    def scheme2(cls, p: int = 50) -> "EnvSpec":
        return cls(kind="scheme2", p=p)

    @classmethod
    def toy7(cls) -> "EnvSpec":
        return cls(kind="toy7")


@dataclass(frozen=True)
class ValueEstimate:
    """Point estimate of a policy value with its standard error.

    ``method`` tags the estimator (``"mc"``, ``"ipw"``, or ``"aipw"``);
    ``floored_fraction`` is the share of weights whose propensity was clipped
    from below (always 0 for pure Monte-Carlo evaluation).
    """

    estimate: float
    se: float
    n: int
    method: str
    floored_fraction: float = 0.0

    def as_dict(self) -> dict:
        return {
            "method": self.method,
            "estimate": self.estimate,
            "se": self.se,
            "n": self.n,
            "floored_fraction": self.floored_fraction,
        }


def env_stage_specs(env: EnvSpec) -> tuple[StageSpec, ...]:
    """Stage shapes of a generative environment."""
    if env.kind == "scheme1":
        return (StageSpec(t=1, k=3, cov_dim=3), StageSpec(t=2, k=3, cov_dim=1))
    if env.kind == "scheme2":
        return (StageSpec(t=1, k=3, cov_dim=env.p), StageSpec(t=2, k=3, cov_dim=0))
    if env.kind == "toy7":
        return (StageSpec(t=1, k=3, cov_dim=1),)
    raise NotImplementedError("custom environments carry no intrinsic stage shapes")


# ---------------------------------------------------------------------------
# history features and reward shifts
# ---------------------------------------------------------------------------


def one_hot(actions: Array, k: int) -> Array:
    """One-hot encode 1-based actions into ``(n, k)`` floats."""
    a = np.asarray(actions, dtype=np.int64)
    if a.min() < 1 or a.max() > k:
        raise ValueError(f"actions must lie in 1..{k}")
    return np.eye(k)[a - 1]


def _history_features(obs_list, act_list, rew_list, specs, stage: int) -> Array:
    blocks: list[Array] = []
    for s in range(stage - 1):
        blocks.append(np.asarray(obs_list[s], dtype=float))
        blocks.append(one_hot(act_list[s], specs[s].k))
        blocks.append(np.asarray(rew_list[s], dtype=float)[:, None])
    blocks.append(np.asarray(obs_list[stage - 1], dtype=float))
    return np.concatenate(blocks, axis=1)


def stage_features(dataset: Dataset, stage: int) -> Array:
    """History-feature matrix for ``stage`` (1-based).

    Stage 1 returns the baseline covariates.  Stage ``t > 1`` concatenates,
    for each earlier stage, the covariate block, a one-hot encoding of the
    recorded action, and the observed (unshifted) reward, followed by the
    stage-``t`` covariate block.  Always returns a fresh writable array.
    """
    if not 1 <= stage <= dataset.T:
        raise ValueError(f"stage must lie in 1..{dataset.T}, got {stage}")
    return _history_features(dataset.obs, dataset.actions, dataset.rewards, dataset.spec, stage)


def stage_feature_dim(specs: Sequence[StageSpec], stage: int) -> int:
    """Width of the :func:`stage_features` matrix for ``stage``."""
    if not 1 <= stage <= len(specs):
        raise ValueError(f"stage must lie in 1..{len(specs)}, got {stage}")
    d = specs[stage - 1].cov_dim
    for s in specs[: stage - 1]:
        d += s.cov_dim + s.k + 1
    return d


def compute_reward_shift(dataset: Dataset, floor: float = 0.1) -> Array:
    """Per-stage location shift making every shifted reward at least ``floor``.

    Returns ``max(0, floor - min_t y)`` per stage, so stages whose rewards
    already clear the floor are left untouched.
    """
    return np.array([max(0.0, floor - float(y.min())) for y in dataset.rewards])


def with_reward_shift(dataset: Dataset, shift: Array | None = None, floor: float = 0.1) -> Dataset:
    """Copy of ``dataset`` with ``reward_shift`` set (default: computed floor shift)."""
    if shift is None:
        shift = compute_reward_shift(dataset, floor=floor)
    return Dataset(
        spec=dataset.spec,
        obs=dataset.obs,
        actions=dataset.actions,
        rewards=dataset.rewards,
        props=dataset.props,
        reward_shift=shift,
    )


# ---------------------------------------------------------------------------
# scheme 1: low-dimensional covariates, uniform assignment
# ---------------------------------------------------------------------------

_SCHEME1_SD = math.sqrt(10.0)


def _scheme1_draw(n: int, omega: float, rng: np.random.Generator, pick1, pick2):
    """Shared draw core: covariates and noise in a fixed order, actions via callbacks.

    ``pick1(o1) -> (a1, pi1)`` and ``pick2(o1, a1, y1, o2) -> (a2, pi2)``
    choose actions (randomized or forced) without disturbing the draw order,
    so generation and forced-action simulation share one generative path.
    """
    o1 = rng.normal(0.0, _SCHEME1_SD, size=(n, 3))
    a1, pi1 = pick1(o1)
    eps1 = rng.standard_normal(n)
    y1 = a1 * o1.sum(axis=1) + 3.0 + eps1
    o2 = rng.standard_normal((n, 1))
    a2, pi2 = pick2(o1, a1, y1, o2)
    eps2 = rng.standard_normal(n)
    y2 = omega * o1[np.arange(n), a2 - 1] ** 2 + o2[:, 0] + 3.0 + eps2
    return o1, a1, y1, pi1, o2, a2, y2, pi2


def gen_scheme1(n: int, omega: float = 10.0, seed: int = 0) -> Dataset:
    """Generate ``n`` trajectories from the two-stage quadratic-signal environment.

    Baseline covariates are ``N(0, 10 I_3)``; both treatments are uniform on
    ``{1, 2, 3}`` with propensity exactly 1/3; ``Y_1 = A_1 (X_1 + X_2 + X_3)
    + 3 + e``, ``Y_2 = omega * X_{A_2}^2 + O_2 + 3 + e`` with standard normal
    noise.  Deterministic for fixed ``seed``.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if not omega > 0.0:
        raise ValueError(f"omega must be positive, got {omega}")
    rng = np.random.default_rng(seed)

    def pick(o1):
        a = rng.integers(1, 4, size=o1.shape[0])
        return a, np.full(o1.shape[0], 1.0 / 3.0)

    o1, a1, y1, pi1, o2, a2, y2, pi2 = _scheme1_draw(
        n, omega, rng, pick, lambda o1_, a1_, y1_, o2_: pick(o1_)
    )
    return Dataset(
        spec=env_stage_specs(EnvSpec.scheme1(omega)),
        obs=(o1, o2),
        actions=(a1, a2),
        rewards=(y1, y2),
        props=(pi1, pi2),
    )


# ---------------------------------------------------------------------------
# scheme 2: high-dimensional covariates, history-dependent assignment
# ---------------------------------------------------------------------------

_S2_AMP = {1: np.array([2.5, 2.7, 2.6]), 2: np.array([2.6, 2.5, 2.7])}
_S2_LIN = {1: np.array([2.1, 2.0, 2.2]), 2: np.array([2.2, 2.1, 2.3])}


def _scheme2_scores(s: Array, stage: int) -> Array:
    """Per-arm mean-outcome scores as a function of the covariate sum ``s``."""
    trig = np.sin(s) if stage == 1 else np.cos(s)
    other = np.cos(s) if stage == 1 else np.sin(s)
    amp, lin = _S2_AMP[stage], _S2_LIN[stage]
    return (amp[None, :] * trig[:, None]) ** 2 + lin[None, :] * other[:, None]


def _scheme2_logprob_rows(s: Array, stage: int, a1: Array | None = None, y1: Array | None = None) -> Array:
    """Log behavior probabilities ``(n, 3)``, computed fully in log-space.

    Arm logits are ``+s`` for the stage-optimal arm and ``-s`` otherwise; the
    stage-2 logits carry the history shift ``0.5 a_1 + 0.5 y_1``, which is
    constant across arms and cancels after normalization.
    """
    d_opt = pred_rows(_scheme2_scores(s, stage))
    logits = np.where(d_opt[:, None] == np.arange(1, 4)[None, :], s[:, None], -s[:, None])
    if stage == 2:
        if a1 is None or y1 is None:
            raise ValueError("stage-2 propensities require a1 and y1")
        logits = logits + (0.5 * np.asarray(a1, dtype=float) + 0.5 * np.asarray(y1, dtype=float))[:, None]
    return logits - logsumexp(logits, axis=1, keepdims=True)


def scheme2_propensity_rows(o1: Array, stage: int, a1: Array | None = None, y1: Array | None = None) -> Array:
    """Behavior-policy probabilities ``(n, 3)`` for the high-dimensional scheme.

    ``o1`` is ``(n, p)``; stage 2 additionally requires the stage-1 actions and
    rewards.  Rows sum to 1 up to floating-point rounding.
    """
    o1 = np.asarray(o1, dtype=float)
    if o1.ndim != 2:
        raise ValueError("o1 must be a 2-d array of baseline covariates")
    return np.exp(_scheme2_logprob_rows(o1.sum(axis=1), stage, a1=a1, y1=y1))


def _sample_rows(prob_rows: Array, rng: np.random.Generator) -> Array:
    """Draw one 1-based arm per row from categorical probabilities."""
    u = rng.random(prob_rows.shape[0])
    a = 1 + (np.cumsum(prob_rows, axis=1) < u[:, None]).sum(axis=1)
    return np.minimum(a, prob_rows.shape[1]).astype(np.int64)


def _scheme2_draw(n: int, p: int, rng: np.random.Generator, pick1, pick2):
    """Shared draw core for the high-dimensional scheme (see ``_scheme1_draw``)."""
    o1 = rng.standard_normal((n, p))
    s = o1.sum(axis=1)
    a1, pi1 = pick1(o1, s)
    eps1 = rng.standard_normal(n)
    y1 = (_S2_AMP[1][a1 - 1] * np.sin(s)) ** 2 + _S2_LIN[1][a1 - 1] * np.cos(s) + eps1
    a2, pi2 = pick2(o1, s, a1, y1)
    eps2 = rng.standard_normal(n)
    y2 = (_S2_AMP[2][a2 - 1] * np.cos(s)) ** 2 + _S2_LIN[2][a2 - 1] * np.sin(s) + eps2
    return o1, a1, y1, pi1, a2, y2, pi2


def gen_scheme2(n: int, p: int = 50, seed: int = 0) -> Dataset:
    """Generate ``n`` trajectories from the high-dimensional two-stage environment.

    ``O_1 ~ N(0, I_p)`` and both outcomes are periodic functions of the
    covariate sum with arm-specific coefficients plus standard normal noise.
    Behavior probabilities follow the history-dependent multinomial-logit
    model and are computed in log-space; the recorded propensity equals the
    probability of the drawn arm.  Deterministic for fixed ``seed``.
    """
    if n < 1:
        raise ValueError(f"n must be >= 1, got {n}")
    if p < 1:
        raise ValueError(f"p must be >= 1, got {p}")
    rng = np.random.default_rng(seed)

    def pick1(o1, s):
        rows = np.exp(_scheme2_logprob_rows(s, 1))
        a = _sample_rows(rows, rng)
        return a, rows[np.arange(o1.shape[0]), a - 1]

    def pick2(o1, s, a1, y1):
        rows = np.exp(_scheme2_logprob_rows(s, 2, a1=a1, y1=y1))
        a = _sample_rows(rows, rng)
        return a, rows[np.arange(o1.shape[0]), a - 1]

    o1, a1, y1, pi1, a2, y2, pi2 = _scheme2_draw(n, p, rng, pick1, pick2)
    return Dataset(
        spec=env_stage_specs(EnvSpec.scheme2(p)),
        obs=(o1, np.zeros((n, 0))),
        actions=(a1, a2),
        rewards=(y1, y2),
        props=(pi1, pi2),
    )


# ---------------------------------------------------------------------------
# fixed seven-row example set
# ---------------------------------------------------------------------------


def toy_dataset() -> Dataset:
    """The fixed seven-row, single-stage, three-arm example set.

    Scalar histories with uniform behavior propensity 1/3; used by the
    surface-verification tools and as a small smoke-test fixture.
    """
    h = np.array([2.0, 1.0, -1.0, 0.5, -0.5, -1.0, 0.5])[:, None]
    a = np.array([1, 2, 3, 1, 2, 2, 3])
    y = np.array([0.33, 0.67, 0.67, 0.33, 0.23, 1.00, 0.13])
    return Dataset(
        spec=(StageSpec(t=1, k=3, cov_dim=1),),
        obs=(h,),
        actions=(a,),
        rewards=(y,),
        props=(np.full(7, 1.0 / 3.0),),
    )


def generate(env: EnvSpec, n: int, seed: int = 0) -> Dataset:
    """Dispatch to the generator for ``env``.

    The seven-row set is fixed: ``n`` must be 7 (or None) for ``toy7``.
    Custom environments delegate to their ``sampler``.
    """
    if env.kind == "scheme1":
        return gen_scheme1(n, omega=env.omega, seed=seed)
    if env.kind == "scheme2":
        return gen_scheme2(n, p=env.p, seed=seed)
    if env.kind == "toy7":
        if n not in (None, 7):
            raise ValueError("the seven-row example set has exactly 7 rows; pass n=7")
        return toy_dataset()
    if env.sampler is not None:
        return env.sampler(n, seed)
    raise NotImplementedError("custom environment without a sampler cannot generate data")


# ---------------------------------------------------------------------------
# oracle rules and policy adapters
# ---------------------------------------------------------------------------


def oracle_assign(env: EnvSpec, stage: int, history) -> int | Array:
    """Closed-form optimal action(s) for a generative environment.

    ``history`` is the baseline covariate block — shape ``(cov_dim_1,)`` for a
    single decision or ``(n, cov_dim_1)`` for a batch — because the optimal
    rules of both schemes depend on the history only through it.  Ties are
    broken toward the largest maximizing index.
    """
    X = np.asarray(history, dtype=float)
    single = X.ndim == 1
    X = X[None, :] if single else X
    if X.ndim != 2:
        raise ValueError("history must be a vector or a matrix of baseline covariates")
    if env.kind == "scheme1":
        if X.shape[1] != 3:
            raise ValueError(f"scheme1 baseline covariates have width 3, got {X.shape[1]}")
        if stage == 1:
            out = np.where(X.sum(axis=1) >= 0.0, 3, 1).astype(np.int64)
        elif stage == 2:
            out = pred_rows(X**2)
        else:
            raise ValueError(f"scheme1 has stages 1..2, got {stage}")
    elif env.kind == "scheme2":
        if X.shape[1] != env.p:
            raise ValueError(f"scheme2 baseline covariates have width {env.p}, got {X.shape[1]}")
        if stage not in (1, 2):
            raise ValueError(f"scheme2 has stages 1..2, got {stage}")
        out = pred_rows(_scheme2_scores(X.sum(axis=1), stage))
    else:
        raise NotImplementedError(f"no closed-form oracle for environment kind {env.kind!r}")
    return int(out[0]) if single else out


def oracle_policy(env: EnvSpec) -> Callable:
    """Policy callable applying :func:`oracle_assign` to history features.

    Relies on the stage-feature layout placing the baseline covariate block
    first at every stage.
    """
    d1 = env_stage_specs(env)[0].cov_dim

    def decide(stage: int, features: Array, rng=None) -> Array:
        return oracle_assign(env, stage, np.asarray(features)[:, :d1])

    return decide


def uniform_random_policy(env: EnvSpec) -> Callable:
    """Policy callable drawing uniformly among each stage's arms."""
    specs = env_stage_specs(env)

    def decide(stage: int, features: Array, rng: np.random.Generator) -> Array:
        return rng.integers(1, specs[stage - 1].k + 1, size=np.asarray(features).shape[0])

    return decide


# ---------------------------------------------------------------------------
# Monte-Carlo policy evaluation
# ---------------------------------------------------------------------------


def _checked_actions(a: Array, n: int, stage: int, specs) -> Array:
    """Validate a policy callable's output before forcing it into the draw core."""
    a = np.asarray(a)
    if a.shape != (n,):
        raise ValueError(f"policy must return shape {(n,)} actions, got {a.shape}")
    if not np.issubdtype(a.dtype, np.integer):
        raise ValueError("policy must return integer actions")
    k = specs[stage - 1].k
    if a.min() < 1 or a.max() > k:
        raise ValueError(f"stage {stage}: policy actions must lie in 1..{k}")
    return a.astype(np.int64)


def mc_policy_value(env: EnvSpec, policy: Callable, n_eval: int, seed: int = 0) -> ValueEstimate:
    """Monte-Carlo value of a policy under the true environment.

    Simulates ``n_eval`` fresh trajectories with actions forced to the
    policy's choices (recorded propensity 1 for the deterministic forcing)
    and returns the mean of the total reward with its standard error (NaN
    when ``n_eval`` is 1).  Deterministic given ``seed``.
    """
    if n_eval < 1:
        raise ValueError(f"n_eval must be >= 1, got {n_eval}")
    specs = env_stage_specs(env)
    rng = np.random.default_rng(seed)
    ones = np.ones(n_eval)

    if env.kind == "scheme1":

        def pick1(o1):
            feats = _history_features([o1], [], [], specs, 1)
            return _checked_actions(policy(1, feats, rng), n_eval, 1, specs), ones

        def pick2(o1, a1, y1, o2):
            feats = _history_features([o1, o2], [a1], [y1], specs, 2)
            return _checked_actions(policy(2, feats, rng), n_eval, 2, specs), ones

        _, _, y1, _, _, _, y2, _ = _scheme1_draw(n_eval, env.omega, rng, pick1, pick2)
    elif env.kind == "scheme2":
        empty = np.zeros((n_eval, 0))

        def pick1(o1, s):
            feats = _history_features([o1], [], [], specs, 1)
            return _checked_actions(policy(1, feats, rng), n_eval, 1, specs), ones

        def pick2(o1, s, a1, y1):
            feats = _history_features([o1, empty], [a1], [y1], specs, 2)
            return _checked_actions(policy(2, feats, rng), n_eval, 2, specs), ones

        _, _, y1, _, _, y2, _ = _scheme2_draw(n_eval, env.p, rng, pick1, pick2)
    else:
        raise NotImplementedError(f"no forced-action simulator for environment kind {env.kind!r}")

    total = y1 + y2
    est = float(total.mean())
    se = float("nan") if n_eval == 1 else float(total.std(ddof=1) / math.sqrt(n_eval))
    return ValueEstimate(estimate=est, se=se, n=n_eval, method="mc")


# ---------------------------------------------------------------------------
# delimited persistence with a JSON sidecar
# ---------------------------------------------------------------------------

_DATASET_FORMAT = "sdss-dataset-v1"


def dataset_meta_path(csv_path: str) -> str:
    """Sidecar manifest path: ``<stem>.meta.json`` next to the CSV."""
    root, ext = os.path.splitext(csv_path)
    return (root if ext.lower() == ".csv" else csv_path) + ".meta.json"


def _csv_header(specs: Sequence[StageSpec]) -> list[str]:
    cols: list[str] = []
    for st in specs:
        cols.extend(f"o{st.t}_{j}" for j in range(1, st.cov_dim + 1))
        cols.extend((f"a{st.t}", f"y{st.t}", f"pi{st.t}"))
    return cols


def save_dataset_csv(dataset: Dataset, path: str) -> str:
    """Write a Dataset as delimited text plus a JSON sidecar manifest.

    One row per trajectory with columns ``o1_1..o1_d1, a1, y1, pi1, o2_1..``;
    floats use the shortest round-trip representation so that save/load/save
    is byte-identical.  Returns the sidecar path.
    """
    header = _csv_header(dataset.spec)
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(header)
        for i in range(dataset.n):
            row: list[str] = []
            for t, st in enumerate(dataset.spec):
                row.extend(repr(float(v)) for v in dataset.obs[t][i])
                row.append(str(int(dataset.actions[t][i])))
                row.append(repr(float(dataset.rewards[t][i])))
                row.append(repr(float(dataset.props[t][i])))
            writer.writerow(row)
    meta = {
        "format": _DATASET_FORMAT,
        "n": dataset.n,
        "stages": [{"t": st.t, "k": st.k, "cov_dim": st.cov_dim} for st in dataset.spec],
        "reward_shift": [float(v) for v in dataset.reward_shift],
    }
    meta_path = dataset_meta_path(path)
    with open(meta_path, "w") as fh:
        json.dump(meta, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return meta_path


def load_dataset_csv(path: str) -> Dataset:
    """Read a Dataset written by :func:`save_dataset_csv` (header mandatory)."""
    meta_path = dataset_meta_path(path)
    with open(meta_path) as fh:
        meta = json.load(fh)
    if meta.get("format") != _DATASET_FORMAT:
        raise ValueError(f"unrecognized dataset manifest format {meta.get('format')!r}")
    specs = tuple(StageSpec(t=s["t"], k=s["k"], cov_dim=s["cov_dim"]) for s in meta["stages"])
    expected = _csv_header(specs)
    with open(path, newline="") as fh:
        reader = csv.reader(fh)
        header = next(reader, None)
        if header != expected:
            raise ValueError(f"CSV header does not match the sidecar manifest: {header!r}")
        rows = [r for r in reader if r]
    if len(rows) != meta["n"]:
        raise ValueError(f"expected {meta['n']} rows, found {len(rows)}")
    obs, actions, rewards, props = [], [], [], []
    col = 0
    for st in specs:
        d = st.cov_dim
        obs.append(np.array([[float(r[col + j]) for j in range(d)] for r in rows]).reshape(len(rows), d))
        actions.append(np.array([int(r[col + d]) for r in rows], dtype=np.int64))
        rewards.append(np.array([float(r[col + d + 1]) for r in rows]))
        props.append(np.array([float(r[col + d + 2]) for r in rows]))
        col += d + 3
    return Dataset(
        spec=specs,
        obs=tuple(obs),
        actions=tuple(actions),
        rewards=tuple(rewards),
        props=tuple(props),
        reward_shift=np.asarray(meta["reward_shift"], dtype=float),
    )
