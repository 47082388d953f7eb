"""Exactly solvable two-stage problems that expose surrogate (in)consistency.

Everything here runs on a tiny finite environment: three (or ``k1``)
first-stage arms, two (or ``k2``) second-stage arms, no covariates, zero
first-stage reward, and a positive matrix ``m[i, j]`` of expected final
outcomes.  In this setting the optimal regime is read directly off ``m``,
so a surrogate's population maximizer can be compared against the truth:

* :func:`hinge_solution` maximizes the sum-zero-constrained concave hinge
  surrogate by nested grid refinement and reports the first-stage score it
  lands on.
* :func:`exp_loss_demo` maximizes the concave exponential surrogate
  numerically and checks it against its closed-form first-stage rule
  ``argmax_i (sum_j sqrt(m[i, j]))^2``.
* :func:`toy_surface` tabulates the seven-row single-stage demo objective
  over a score grid, which is how the plateau geometry of the smooth
  surrogate is rendered.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .datasets import stage_features, toy_dataset
from .policies import pred, pred_rows
from .surrogates import SurrogateSpec, TauKind, gamma_eval_grad

Array = np.ndarray

__all__ = [
    "TwoStageFiniteEnv",
    "HingeSolution",
    "hinge_solution",
    "ExpLossReport",
    "exp_loss_demo",
    "SurfaceTable",
    "toy_surface",
    "toy_value_at",
]


@dataclass(frozen=True)
class TwoStageFiniteEnv:
    """Covariate-free two-stage environment with outcome matrix ``m``.

    ``m[i, j]`` is the expected final-stage outcome under first-stage arm
    ``i + 1`` and second-stage arm ``j + 1``; the first-stage reward is
    identically zero.  All entries must be strictly positive.
    """

    m: Array

    def __post_init__(self) -> None:
        m = np.array(self.m, dtype=float, copy=True)
        if m.ndim != 2 or m.shape[0] < 2 or m.shape[1] < 2:
            raise ValueError("outcome matrix must be 2-D with at least two arms per stage")
        if not np.isfinite(m).all() or m.min() <= 0.0:
            raise ValueError("outcome matrix entries must be positive and finite")
        m.setflags(write=False)
        object.__setattr__(self, "m", m)

    @property
    def k1(self) -> int:
        return self.m.shape[0]

    @property
    def k2(self) -> int:
        return self.m.shape[1]

    @property
    def d1_star(self) -> int:
        """Optimal first-stage arm: best row of per-row maxima (ties to the larger index)."""
        return pred(self.m.max(axis=1))

    @property
    def d2_star(self) -> tuple:
        """Optimal second-stage arm for each first-stage arm."""
        return tuple(int(v) for v in pred_rows(self.m))


# ---------------------------------------------------------------------------
# sum-zero hinge surrogate


def _hinge_objective(m: Array, f1: Array, b: Array) -> Array:
    """Population hinge-surrogate value for batches of candidate scores.

    ``f1`` is ``(..., 3)`` (sum-zero first-stage score) and ``b`` is
    ``(..., 3)``: the free coordinate of each arm's second-stage score
    ``(b_i, -b_i)``.  The surrogate of a pair ``(a1, a2)`` sums
    ``min(-f1_i - 1, -y_j' - 1, 0)`` over the non-chosen arms ``i != a1``
    and the non-chosen column ``j' != a2``.
    """
    total = np.zeros(np.broadcast_shapes(f1.shape[:-1], b.shape[:-1]))
    for i in range(3):
        others = [p for p in range(3) if p != i]
        for j in range(2):
            jp = 1 - j
            y_other = b[..., i] if jp == 0 else -b[..., i]
            term = np.zeros_like(total)
            for p in others:
                term += np.minimum(np.minimum(-f1[..., p] - 1.0, -y_other - 1.0), 0.0)
            total += m[i, j] * term
    return total


@dataclass(frozen=True)
class HingeSolution:
    """Grid-refinement maximizer of the sum-zero hinge surrogate.

    ``argmax_set`` lists every first-stage arm within ``1e-6`` of the top
    score; ``pred_choice`` is the arm the max-of-argmax link would pick
    (ties resolve to the largest index, so an all-zero score maps to 3).
    ``round_values`` is the incumbent objective after each refinement
    round (nondecreasing).
    """

    f1_tilde: Array
    f2_free: Array
    value: float
    argmax_set: tuple
    pred_choice: int
    d1_star: int
    round_values: tuple


def hinge_solution(env: TwoStageFiniteEnv, rounds: int = 4, points: int = 13,
                   span: float = 3.0) -> HingeSolution:
    """Maximize the sum-zero-constrained hinge surrogate on a 3x2 environment.

    The five free coordinates (two for the first-stage score, one per
    first-stage arm for the second stage) are searched on a full grid that
    is re-centered on the incumbent and shrunk every round, so the
    incumbent value never decreases.
    """
    if env.k1 != 3 or env.k2 != 2:
        raise ValueError("hinge search is specialized to 3 first-stage and 2 second-stage arms")
    if rounds < 1 or points < 3 or points % 2 == 0:
        raise ValueError("need at least one round and an odd number of grid points >= 3")
    center = np.zeros(5)
    width = float(span)
    best_val = -np.inf
    best = center.copy()
    round_values = []
    for _ in range(rounds):
        axes = [np.linspace(c - width, c + width, points) for c in center]
        mesh = np.meshgrid(*axes, indexing="ij")
        pts = np.stack([g.ravel() for g in mesh], axis=-1)
        f1 = np.stack([pts[:, 0], pts[:, 1], -(pts[:, 0] + pts[:, 1])], axis=-1)
        vals = _hinge_objective(env.m, f1, pts[:, 2:])
        top = int(np.argmax(vals))
        if vals[top] > best_val:
            best_val = float(vals[top])
            best = pts[top].copy()
        round_values.append(best_val)
        center = best
        width = 1.5 * (2.0 * width / (points - 1))
    f1_tilde = np.array([best[0], best[1], -(best[0] + best[1])])
    argmax_set = tuple(int(i + 1) for i in range(3)
                       if f1_tilde[i] >= f1_tilde.max() - 1e-6)
    return HingeSolution(f1_tilde=f1_tilde, f2_free=best[2:].copy(), value=best_val,
                         argmax_set=argmax_set, pred_choice=pred(f1_tilde),
                         d1_star=env.d1_star, round_values=tuple(round_values))


# ---------------------------------------------------------------------------
# concave exponential surrogate


def _exp_value_grad(m: Array, x: Array, y: Array) -> tuple:
    """Population exp-surrogate value and its gradient.

    ``x`` is the first-stage score ``(k1,)``; ``y[i]`` the second-stage
    score for first-stage arm ``i + 1``.  The surrogate of ``(a1, a2)`` is
    ``-sum_{p,q} exp(-(x_a1 - x_p + y_a1,a2 - y_a1,q))``.
    """
    k1, k2 = m.shape
    arg = (-(x[:, None, None, None] - x[None, None, :, None]
             + y[:, :, None, None] - y[:, None, None, :]))
    e = np.exp(np.minimum(arg, 700.0))  # (i, j, p, q)
    value = -float(np.einsum("ij,ijpq->", m, e))
    gx = np.einsum("ij,ijpq->i", m, e) - np.einsum("ij,ijpq->p", m, e)
    gy = np.einsum("ij,ijpq->ij", m, e) - np.einsum("ij,ijpq->iq", m, e)
    return value, np.concatenate([gx, gy.ravel()])


@dataclass(frozen=True)
class ExpLossReport:
    """Closed-form vs numeric maximizers of the concave exponential surrogate.

    ``stage1_scores`` holds the closed-form quantities
    ``(sum_j sqrt(m[i, j]))^2`` whose argmax is the surrogate's first-stage
    pick; ``agree`` flags whether that pick matches the truly optimal arm.
    """

    d1_star: int
    d1_closed: int
    d1_numeric: int
    d2_star: tuple
    d2_numeric: tuple
    stage1_scores: Array
    value: float
    agree_closed_numeric: bool
    agree: bool


def exp_loss_demo(env: TwoStageFiniteEnv, restarts: int = 10, seed: int = 0,
                  max_iter: int = 4000, tol: float = 1e-10) -> ExpLossReport:
    """Maximize the exponential surrogate numerically and compare routes.

    Backtracking gradient ascent from ``restarts`` random starts (the
    objective is concave, so every run lands on the same relative margins);
    the closed-form first-stage rule is ``argmax_i (sum_j sqrt(m[i,j]))^2``
    and the second stage follows the per-row argmax of ``m``.
    """
    m = env.m
    k1, k2 = m.shape
    rng = np.random.default_rng(seed)
    best_val = -np.inf
    best_theta = np.zeros(k1 + k1 * k2)
    for _ in range(restarts):
        theta = rng.normal(scale=1.0, size=k1 + k1 * k2)
        val, grad = _exp_value_grad(m, theta[:k1], theta[k1:].reshape(k1, k2))
        step = 0.25
        for _ in range(max_iter):
            gnorm = float(np.linalg.norm(grad))
            if gnorm < tol * (1.0 + abs(val)):
                break
            while step > 1e-12:
                trial = theta + step * grad
                tval, tgrad = _exp_value_grad(m, trial[:k1], trial[k1:].reshape(k1, k2))
                if tval >= val:
                    break
                step /= 2.0
            theta, val, grad = trial, tval, tgrad
            step = min(step * 1.5, 1.0)
        if val > best_val:
            best_val, best_theta = val, theta
    x = best_theta[:k1]
    y = best_theta[k1:].reshape(k1, k2)
    scores = np.sqrt(m).sum(axis=1) ** 2
    d1_closed = pred(scores)
    d1_numeric = pred(x)
    d2_numeric = tuple(int(v) for v in pred_rows(y))
    return ExpLossReport(
        d1_star=env.d1_star, d1_closed=d1_closed, d1_numeric=d1_numeric,
        d2_star=env.d2_star, d2_numeric=d2_numeric, stage1_scores=scores,
        value=best_val,
        agree_closed_numeric=(d1_closed == d1_numeric and d2_numeric == env.d2_star),
        agree=(d1_closed == env.d1_star),
    )


# ---------------------------------------------------------------------------
# seven-row demo surface


def _toy_spec(tau: TauKind | None) -> SurrogateSpec:
    if tau is None:
        tau = TauKind(kind="tanh", scale=1.0, normalized=False)
    return SurrogateSpec(template="product", k=3, tau=tau)


def toy_value_at(x: float, y: float, tau: TauKind | None = None) -> float:
    """Demo objective of the seven-row dataset at score weights ``(x, y)``.

    The decision rule scores row ``i`` as ``(x * h_i, y * h_i)``; the value
    is the weighted mean ``(3/n) * sum_i Y_i * Gamma((x h_i, y h_i); A_i)``.
    """
    toy = toy_dataset()
    h = stage_features(toy, 1)[:, 0]
    g = np.stack([x * h, y * h], axis=-1)
    vals, _ = gamma_eval_grad(_toy_spec(tau), g, toy.actions[0])
    return float(3.0 * np.mean(toy.rewards[0] * vals))


@dataclass(frozen=True)
class SurfaceTable:
    """Tabulated demo objective and the log10 norm of its score gradient.

    ``values[iy, ix]`` is the objective at ``(x[ix], y[iy])``;
    ``log10_grad_norm`` uses the same layout.  ``rows()`` flattens to the
    long form ``(x, y, value, log10_grad_norm)`` for delimited output.
    """

    x: Array
    y: Array
    values: Array
    log10_grad_norm: Array

    def rows(self) -> Array:
        xx, yy = np.meshgrid(self.x, self.y)
        return np.column_stack([xx.ravel(), yy.ravel(),
                                self.values.ravel(), self.log10_grad_norm.ravel()])


def toy_surface(x_range: tuple = (-15.0, 20.0), y_range: tuple = (-8.0, 8.0),
                steps: tuple = (141, 81), tau: TauKind | None = None) -> SurfaceTable:
    """Tabulate the seven-row demo objective over a rectangular score grid.

    ``steps`` may be a single integer or an ``(nx, ny)`` pair, each at
    least 2.  The result is a pure function of the grid (the seven-row
    dataset is fixed), so repeated calls are bitwise identical.
    """
    if np.isscalar(steps):
        steps = (int(steps), int(steps))
    nx, ny = int(steps[0]), int(steps[1])
    if nx < 2 or ny < 2:
        raise ValueError("need at least two grid steps per axis")
    spec = _toy_spec(tau)
    toy = toy_dataset()
    h = stage_features(toy, 1)[:, 0]
    yw = toy.rewards[0]
    acts = toy.actions[0]
    xs = np.linspace(x_range[0], x_range[1], nx)
    ys = np.linspace(y_range[0], y_range[1], ny)
    xx, yy = np.meshgrid(xs, ys)
    g = np.stack([(xx[..., None] * h).ravel(), (yy[..., None] * h).ravel()], axis=-1)
    a = np.tile(acts, xx.size)
    vals, grads = gamma_eval_grad(spec, g, a)
    vals = vals.reshape(ny, nx, 7)
    grads = grads.reshape(ny, nx, 7, 2)
    surface = 3.0 * np.mean(yw * vals, axis=-1)
    dx = 3.0 * np.mean(yw * h * grads[..., 0], axis=-1)
    dy = 3.0 * np.mean(yw * h * grads[..., 1], axis=-1)
    norm = np.hypot(dx, dy)
    log_norm = np.log10(np.maximum(norm, 1e-300))
    return SurfaceTable(x=xs, y=ys, values=surface, log10_grad_norm=log_norm)
