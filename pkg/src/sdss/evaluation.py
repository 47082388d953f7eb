"""Policy-value estimation from logged data: propensities, outcome models, AIPW.

Three pieces work together here:

* :func:`fit_propensity_multinomial` estimates the treatment-assignment
  probabilities of one stage with a multinomial logit (reference class
  ``k``), fitted by damped Newton ascent.
* :func:`fit_q_nuisance` fits ridge-linear outcome regressions backward
  through a two-stage dataset, producing the stage-2 model ``Q2(h2, a2)``
  and the policy-dependent stage-1 model ``Q1(h1, a1)`` whose target is
  ``y1 + Q2(h2, d2(h2))``.
* :func:`aipw_value` combines both into the augmented inverse-probability
  estimate of a decision rule's value, with the outcome models correcting
  the weighted residuals term by term.

The module works on two-stage datasets; single-stage value estimation is
already covered by the plain inverse-probability estimator.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass
from typing import Callable, Sequence, Union

import numpy as np
from scipy.special import logsumexp

from .baselines import QStage, q_design, q_design_dim
from .datasets import Dataset, ValueEstimate, stage_features
from .objective import WeightOverflowError

Array = np.ndarray

__all__ = [
    "PropensityModel",
    "fit_propensity_multinomial",
    "NuisanceQ",
    "fit_q_nuisance",
    "aipw_value",
]


@dataclass(frozen=True)
class PropensityModel:
    """Multinomial-logit treatment model for one stage.

    ``coef`` has shape ``(k - 1, d + 1)``: one row of coefficients per
    non-reference class over ``[1, features]``; class ``k`` is the reference
    with coefficients fixed at zero.  ``clip`` is the floor applied to the
    predicted probability of the observed action when the model is used
    inside a weighted estimator.  ``loglik_trace`` records the accepted
    log-likelihood after each Newton step (nondecreasing by construction).
    """

    stage: int
    coef: Array
    k: int
    clip: float = 0.15
    converged: bool = True
    n_iter: int = 0
    loglik_trace: tuple = ()

    def predict(self, features: Array) -> Array:
        """Class-probability matrix ``(n, k)``; rows sum to one."""
        feats = np.asarray(features, dtype=float)
        x = np.column_stack([np.ones(feats.shape[0]), feats])
        logits = np.column_stack([x @ self.coef.T, np.zeros(feats.shape[0])])
        return np.exp(logits - logsumexp(logits, axis=1, keepdims=True))


def _multinomial_loglik(x: Array, labels: Array, coef: Array, k: int) -> float:
    logits = np.column_stack([x @ coef.T, np.zeros(x.shape[0])])
    log_probs = logits - logsumexp(logits, axis=1, keepdims=True)
    return float(log_probs[np.arange(x.shape[0]), labels].sum())


def fit_propensity_multinomial(dataset: Dataset, stage: int, max_iter: int = 100,
                               tol: float = 1e-8, clip: float = 0.15) -> PropensityModel:
    """Fit a multinomial logit for the stage's action given its history features.

    Damped Newton ascent on the log-likelihood: the full Newton step is
    halved until the log-likelihood does not decrease, so the accepted
    trace is monotone.  Iteration stops when the mean-per-row gradient norm
    drops below ``tol``.  If a coefficient runs past 30 in absolute value
    the data are treated as (quasi-)separated: a warning is issued and the
    fit stops early with ``converged=False``.
    """
    feats = stage_features(dataset, stage)
    k = dataset.spec[stage - 1].k
    labels = dataset.actions[stage - 1] - 1
    n = dataset.n
    x = np.column_stack([np.ones(n), feats])
    d = x.shape[1]
    coef = np.zeros((k - 1, d))
    onehot = np.zeros((n, k - 1))
    rows = np.arange(n)
    mask = labels < k - 1
    onehot[rows[mask], labels[mask]] = 1.0

    loglik = _multinomial_loglik(x, labels, coef, k)
    trace = [loglik]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        logits = np.column_stack([x @ coef.T, np.zeros(n)])
        probs = np.exp(logits - logsumexp(logits, axis=1, keepdims=True))
        p = probs[:, : k - 1]
        grad = (onehot - p).T @ x
        if np.linalg.norm(grad) / n < tol:
            converged = True
            break
        # Fisher information of the flattened coefficients: for each row the
        # class block is diag(p) - p p^T, crossed with x x^T.
        block = p[:, :, None] * np.eye(k - 1)[None] - p[:, :, None] * p[:, None, :]
        info = np.einsum("icd,ij,il->cjdl", block, x, x).reshape((k - 1) * d, (k - 1) * d)
        try:
            step = np.linalg.solve(info, grad.reshape(-1)).reshape(k - 1, d)
        except np.linalg.LinAlgError:
            step = np.linalg.lstsq(info, grad.reshape(-1), rcond=None)[0].reshape(k - 1, d)
        alpha = 1.0
        while alpha > 1e-8:
            trial = coef + alpha * step
            trial_ll = _multinomial_loglik(x, labels, trial, k)
            if trial_ll >= loglik:
                break
            alpha /= 2.0
        coef = coef + alpha * step
        loglik = _multinomial_loglik(x, labels, coef, k)
        trace.append(loglik)
        if np.abs(coef).max() > 30.0:
            warnings.warn(
                f"stage-{stage} treatment model looks separated "
                f"(|coef| reached {np.abs(coef).max():.1f}); stopping early",
                RuntimeWarning,
            )
            break
    return PropensityModel(stage=stage, coef=coef, k=k, clip=clip,
                           converged=converged, n_iter=it, loglik_trace=tuple(trace))


def _expand(features: Array, quadratic: bool) -> Array:
    feats = np.asarray(features, dtype=float)
    if quadratic:
        return np.column_stack([feats, feats ** 2])
    return feats


@dataclass(frozen=True)
class NuisanceQ:
    """Outcome regressions of a two-stage dataset for a fixed decision rule.

    ``q1``/``q2`` are per-stage ridge-linear models in the (optionally
    squared-augmented) stage features.  ``q1`` predicts the policy-dependent
    total ``E[y1 + Q2(h2, d2) | h1, a1]``; ``q2`` predicts ``E[y2 | h2, a2]``.
    """

    q1: QStage
    q2: QStage
    lam: float
    interactions: bool
    quadratic: bool

    def q1_values(self, features: Array) -> Array:
        """Matrix ``(n, k1)`` of stage-1 predictions for every action."""
        return self.q1.values(_expand(features, self.quadratic))

    def q2_values(self, features: Array) -> Array:
        """Matrix ``(n, k2)`` of stage-2 predictions for every action."""
        return self.q2.values(_expand(features, self.quadratic))


def _ridge_keep_intercept(x: Array, y: Array, lam: float) -> Array:
    """Ridge solution that leaves the leading intercept column unpenalized.

    As ``lam`` grows the slope coefficients vanish while the intercept is
    free, so predictions approach the sample mean of ``y``.
    """
    if lam < 0:
        raise ValueError("ridge penalty must be nonnegative")
    gram = x.T @ x
    if lam == 0.0 and np.linalg.matrix_rank(gram) < gram.shape[0]:
        raise np.linalg.LinAlgError("singular design with a zero ridge penalty")
    penalty = lam * np.eye(x.shape[1])
    penalty[0, 0] = 0.0
    return np.linalg.solve(gram + penalty, x.T @ y)


def fit_q_nuisance(dataset: Dataset, policy: Callable, lam: float = 1e-6,
                   interactions: bool = True, quadratic: bool = False) -> NuisanceQ:
    """Backward-fitted outcome models of a two-stage dataset under ``policy``.

    Stage 2 regresses ``y2`` on the stage-2 design; stage 1 regresses
    ``y1 + Q2(h2, d2(h2))`` on the stage-1 design, where ``d2`` is the
    rule's stage-2 decision.  ``quadratic=True`` appends squared features
    to both designs, which lets the models pick up simple curvature.
    """
    if dataset.T != 2:
        raise ValueError("outcome-model fitting expects a two-stage dataset")
    k1, k2 = dataset.spec[0].k, dataset.spec[1].k
    feats1 = _expand(stage_features(dataset, 1), quadratic)
    feats2 = _expand(stage_features(dataset, 2), quadratic)

    x2 = q_design(feats2, dataset.actions[1], k2, interactions)
    coef2 = _ridge_keep_intercept(x2, dataset.rewards[1], lam)
    q2 = QStage(coef=coef2, feature_dim=feats2.shape[1], k=k2, interactions=interactions)

    d2 = np.asarray(policy(2, stage_features(dataset, 2), np.random.default_rng(0)))
    target = dataset.rewards[0] + q2.values(feats2)[np.arange(dataset.n), d2 - 1]
    x1 = q_design(feats1, dataset.actions[0], k1, interactions)
    coef1 = _ridge_keep_intercept(x1, target, lam)
    q1 = QStage(coef=coef1, feature_dim=feats1.shape[1], k=k1, interactions=interactions)
    return NuisanceQ(q1=q1, q2=q2, lam=lam, interactions=interactions, quadratic=quadratic)


def _observed_probs(dataset: Dataset, propensities, feats1: Array,
                    feats2: Array) -> tuple[Array, Array, float, float]:
    """Per-row probabilities of the logged actions at both stages, plus the clip."""
    if isinstance(propensities, str):
        if propensities != "true":
            raise ValueError("propensities must be 'true' or a pair of fitted models")
        return dataset.props[0], dataset.props[1], 0.0, 0.0
    models = tuple(propensities)
    if len(models) != 2:
        raise ValueError("expected one treatment model per stage")
    by_stage = {m.stage: m for m in models}
    if set(by_stage) != {1, 2}:
        raise ValueError("treatment models must cover stages 1 and 2")
    rows = np.arange(dataset.n)
    p1 = by_stage[1].predict(feats1)[rows, dataset.actions[0] - 1]
    p2 = by_stage[2].predict(feats2)[rows, dataset.actions[1] - 1]
    return p1, p2, by_stage[1].clip, by_stage[2].clip


def aipw_value(dataset: Dataset, policy: Callable, nuisances: NuisanceQ,
               propensities: Union[str, Sequence[PropensityModel]] = "true") -> ValueEstimate:
    """Augmented inverse-probability estimate of the rule's value on two stages.

    Per row the contribution is::

        Q1(h1, d1)
        + 1[a1 = d1] / p1 * (y1 - Q1(h1, a1) + Q2(h2, d2))
        + 1[a1 = d1] 1[a2 = d2] / (p1 p2) * (y2 - Q2(h2, a2))

    With ``propensities="true"`` the logged propensities are used as-is and
    any nonpositive value raises :class:`WeightOverflowError`.  With fitted
    models, each stage's predicted probability of the observed action is
    clipped from below at the model's ``clip``; the estimate records the
    fraction of rows touched by the clip at either stage.
    """
    if dataset.T != 2:
        raise ValueError("augmented weighting expects a two-stage dataset")
    feats1 = stage_features(dataset, 1)
    feats2 = stage_features(dataset, 2)
    rng = np.random.default_rng(0)
    d1 = np.asarray(policy(1, feats1, rng))
    d2 = np.asarray(policy(2, feats2, rng))
    rows = np.arange(dataset.n)

    p1, p2, clip1, clip2 = _observed_probs(dataset, propensities, feats1, feats2)
    clipped = np.zeros(dataset.n, dtype=bool)
    if clip1 > 0.0:
        clipped |= p1 < clip1
        p1 = np.maximum(p1, clip1)
    if clip2 > 0.0:
        clipped |= p2 < clip2
        p2 = np.maximum(p2, clip2)
    if np.any(p1 <= 0.0) or np.any(p2 <= 0.0):
        raise WeightOverflowError("a logged action has nonpositive probability")
    with np.errstate(over="ignore"):
        inv1 = 1.0 / p1
        inv12 = inv1 / p2
    if not (np.isfinite(inv1).all() and np.isfinite(inv12).all()):
        raise WeightOverflowError("propensity product underflowed to a non-finite weight")

    q1v = nuisances.q1_values(feats1)
    q2v = nuisances.q2_values(feats2)
    ind1 = (dataset.actions[0] == d1).astype(float)
    ind2 = (dataset.actions[1] == d2).astype(float)
    contrib = (
        q1v[rows, d1 - 1]
        + ind1 * inv1 * (dataset.rewards[0] - q1v[rows, dataset.actions[0] - 1]
                         + q2v[rows, d2 - 1])
        + ind1 * ind2 * inv12 * (dataset.rewards[1] - q2v[rows, dataset.actions[1] - 1])
    )
    est = float(contrib.mean())
    se = float("nan") if dataset.n == 1 else float(contrib.std(ddof=1) / np.sqrt(dataset.n))
    return ValueEstimate(estimate=est, se=se, n=dataset.n, method="aipw",
                         floored_fraction=float(clipped.mean()))
