"""Linear Q-learning comparator fitted by backward recursion.

Stage ``T`` regresses the final reward on history features and a treatment
encoding; each earlier stage regresses the pseudo-outcome ``y_t + max_a
Qhat_{t+1}(h_{t+1}, a)``.  The induced decision rule takes, per row, the
treatment whose fitted Q-value is largest (ties toward the larger index).
"""

from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .datasets import Dataset, one_hot, stage_features
from .policies import pred_rows

Array = np.ndarray


# --------------------------------------------------------------------------
# design matrices
# --------------------------------------------------------------------------

def q_design(features: Array, actions: Array, k: int, interactions: bool) -> Array:
    """Regression design for one stage.

    Columns: intercept, the ``d`` history features, ``k - 1`` treatment
    dummies for levels ``2..k`` (level 1 is the reference), and, when
    ``interactions`` is set, the ``(k - 1) * d`` products of each dummy with
    each feature.
    """
    features = np.asarray(features, dtype=float)
    if features.ndim != 2:
        raise ValueError("features must be a 2-D matrix")
    n, d = features.shape
    dummies = one_hot(actions, k)[:, 1:]
    cols = [np.ones((n, 1)), features, dummies]
    if interactions:
        # (n, k-1, d) outer products flattened action-major.
        inter = dummies[:, :, None] * features[:, None, :]
        cols.append(inter.reshape(n, (k - 1) * d))
    return np.concatenate(cols, axis=1)


def q_design_dim(d: int, k: int, interactions: bool) -> int:
    """Number of columns produced by :func:`q_design`."""
    return 1 + d + (k - 1) + (interactions * (k - 1) * d)


def ridge_fit(X: Array, y: Array, lam: float) -> Array:
    """Solve ``(X'X + lam I) beta = X'y``.

    With ``lam == 0`` a rank-deficient design raises
    ``numpy.linalg.LinAlgError`` instead of returning a garbage solve.
    """
    X = np.asarray(X, dtype=float)
    y = np.asarray(y, dtype=float).reshape(-1)
    if X.shape[0] != y.size:
        raise ValueError("X and y disagree on the number of rows")
    if lam < 0:
        raise ValueError("ridge penalty must be >= 0")
    p = X.shape[1]
    if lam == 0.0 and np.linalg.matrix_rank(X) < p:
        raise np.linalg.LinAlgError(
            "singular normal equations: design is rank-deficient and the "
            "ridge penalty is 0"
        )
    gram = X.T @ X + lam * np.eye(p)
    return np.linalg.solve(gram, X.T @ y)


# --------------------------------------------------------------------------
# fitted model
# --------------------------------------------------------------------------

@dataclass(frozen=True)
class QStage:
    """One stage's fitted linear Q-function."""

    coef: Array
    feature_dim: int
    k: int
    interactions: bool

    def __post_init__(self):
        coef = np.asarray(self.coef, dtype=float).reshape(-1)
        expect = q_design_dim(self.feature_dim, self.k, self.interactions)
        if coef.size != expect:
            raise ValueError(
                f"coefficient vector has {coef.size} entries, design has {expect}"
            )
        object.__setattr__(self, "coef", coef)

    def values(self, features: Array) -> Array:
        """Fitted Q-values for every treatment: ``(n, k)``."""
        features = np.atleast_2d(np.asarray(features, dtype=float))
        n = features.shape[0]
        out = np.empty((n, self.k))
        for a in range(1, self.k + 1):
            X = q_design(features, np.full(n, a), self.k, self.interactions)
            out[:, a - 1] = X @ self.coef
        return out

    def decide(self, features: Array) -> Array:
        """Per-row argmax treatment, ties toward the larger index."""
        return pred_rows(self.values(features))


@dataclass(frozen=True)
class QModel:
    """Backward-recursive linear Q-learning fit for all stages."""

    stages: tuple
    lam: float

    @property
    def T(self) -> int:
        return len(self.stages)

    def stage(self, t: int) -> QStage:
        if not 1 <= t <= self.T:
            raise ValueError(f"stage must lie in 1..{self.T}, got {t}")
        return self.stages[t - 1]

    def policy(self):
        """Decision rule with the ``policy(stage, features, rng)`` signature."""

        def rule(stage: int, features: Array, rng) -> Array:
            return self.stage(stage).decide(features)

        return rule

    # -- JSON checkpoints --------------------------------------------------

    def to_json(self) -> str:
        payload = {
            "format": "sdss-qmodel-v1",
            "lam": self.lam,
            "stages": [
                {
                    "coef": st.coef.tolist(),
                    "feature_dim": st.feature_dim,
                    "k": st.k,
                    "interactions": bool(st.interactions),
                }
                for st in self.stages
            ],
        }
        return json.dumps(payload, indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "QModel":
        payload = json.loads(text)
        if payload.get("format") != "sdss-qmodel-v1":
            raise ValueError("not a sdss-qmodel-v1 checkpoint")
        stages = tuple(
            QStage(
                coef=np.array(st["coef"], dtype=float),
                feature_dim=int(st["feature_dim"]),
                k=int(st["k"]),
                interactions=bool(st["interactions"]),
            )
            for st in payload["stages"]
        )
        return cls(stages=stages, lam=float(payload["lam"]))


def save_qmodel(model: QModel, path) -> None:
    with open(path, "w") as fh:
        fh.write(model.to_json())
        fh.write("\n")


def load_qmodel(path) -> QModel:
    with open(path) as fh:
        return QModel.from_json(fh.read())


# --------------------------------------------------------------------------
# fitting
# --------------------------------------------------------------------------

def qlearn_linear_fit(dataset: Dataset, interactions: bool = False,
                      lam: float = 1e-6) -> QModel:
    """Fit linear Q-functions by backward recursion.

    Parameters
    ----------
    dataset : Dataset
        Observational trajectories.
    interactions : bool
        Include first-order treatment-by-feature interaction columns.
    lam : float
        Ridge penalty on the normal equations (default ``1e-6``, purely for
        conditioning).  ``lam = 0`` with a rank-deficient design raises
        ``numpy.linalg.LinAlgError``.
    """
    if dataset.n == 0:
        raise ValueError("dataset is empty")
    T = dataset.T
    stages: list[QStage | None] = [None] * T
    pseudo = np.asarray(dataset.rewards[T - 1], dtype=float).copy()
    for t in range(T, 0, -1):
        feats = stage_features(dataset, t)
        k = dataset.spec[t - 1].k
        X = q_design(feats, dataset.actions[t - 1], k, interactions)
        coef = ridge_fit(X, pseudo, lam)
        st = QStage(coef=coef, feature_dim=feats.shape[1], k=k,
                    interactions=interactions)
        stages[t - 1] = st
        if t > 1:
            best_next = st.values(feats).max(axis=1)
            pseudo = np.asarray(dataset.rewards[t - 2], dtype=float) + best_next
    return QModel(stages=tuple(stages), lam=float(lam))


def training_r2(model: QModel, dataset: Dataset) -> float:
    """R-squared of the stage-``T`` regression on its own training rows."""
    T = dataset.T
    st = model.stage(T)
    feats = stage_features(dataset, T)
    X = q_design(feats, dataset.actions[T - 1], st.k, st.interactions)
    y = np.asarray(dataset.rewards[T - 1], dtype=float)
    resid = y - X @ st.coef
    tss = float(np.sum((y - y.mean()) ** 2))
    if tss == 0.0:
        return 1.0 if float(np.sum(resid**2)) == 0.0 else 0.0
    return 1.0 - float(np.sum(resid**2)) / tss
