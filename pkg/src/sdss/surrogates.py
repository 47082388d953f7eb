"""Smooth multi-treatment surrogates: product and kernel templates.

A surrogate ``phi(x; j)`` scores how strongly a length-``k`` score vector
``x`` selects treatment ``j`` (treatments are 1-based).  Two families are
implemented:

* product template: ``phi(x; j) = prod_{i != j} tau(x_j - x_i)`` for an
  increasing sigmoid-like ``tau`` with ``tau(-inf) = 0``,
  ``tau(+inf) = C``, ``tau(0) = C/2``;
* kernel template: ``phi(x; j) = C * E_K[ prod_{i != j} (1 - F_K(Z + x_i
  - x_j)) ]`` for a continuous kernel distribution with cdf ``F_K``.

Both families are nonnegative, bounded, shift invariant, permutation
equivariant, and rank aligned (the largest ``phi(x; .)`` sits on the
largest coordinate of ``x``), which is what makes maximizing them a
faithful stand-in for maximizing the hard argmax value.

The reduced ("template") form ``Gamma(g; a)`` on a length-``k-1`` score
vector is the full surrogate evaluated on the embedding ``(0, -g)``; see
``gamma_eval_grad``.  Closed forms are used where available (all product
kinds; logistic and Gumbel kernels at k=3), with a deterministic
Gauss-Legendre quadrature as the general route.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from functools import lru_cache
from typing import Callable

import numpy as np
from scipy.special import expit, ndtr, ndtri

Array = np.ndarray

_SQRT_2PI = math.sqrt(2.0 * math.pi)
# Margins below this are treated as decided: the losing factor underflows
# far past double precision, so the surrogate value is exactly 0.0.
_DEAD_MARGIN = -300.0
# Half-width of the near-diagonal band where the logistic closed form
# switches to its even Taylor expansion in (a - b)/2.
_DIAG_BAND = 1e-3


# --------------------------------------------------------------------------
# tau families (product template)
# --------------------------------------------------------------------------

_TAU_KINDS = ("tanh", "algebraic_ratio", "abs_ratio", "arctan", "logistic_cdf", "custom")


@dataclass(frozen=True)
class TauKind:
    """A sigmoid-like link for the product template.

    Parameters
    ----------
    kind : str
        One of ``tanh``, ``algebraic_ratio``, ``abs_ratio``, ``arctan``,
        ``logistic_cdf``, ``custom``.
    scale : float
        Upper limit ``C`` of the link (``tau(+inf) = C`` when normalized).
    normalized : bool
        When False the link is left at twice the stated scale, e.g.
        ``1 + tanh(x)`` instead of ``(1 + tanh(x)) / 2`` — the effective
        upper limit doubles.
    fn, dfn : callable, optional
        Custom link and derivative (``kind="custom"``).  ``fn`` must be
        increasing with range ``(0, effective_scale)``; if ``dfn`` is
        omitted a central difference is used.
    """

    kind: str = "tanh"
    scale: float = 1.0
    normalized: bool = True
    fn: Callable[[Array], Array] | None = None
    dfn: Callable[[Array], Array] | None = None

    def __post_init__(self) -> None:
        if self.kind not in _TAU_KINDS:
            raise ValueError(f"unknown tau kind {self.kind!r}")
        if self.kind == "custom" and self.fn is None:
            raise ValueError("custom tau requires fn")
        if self.scale <= 0:
            raise ValueError("tau scale must be positive")

    @property
    def effective_scale(self) -> float:
        return self.scale if self.normalized else 2.0 * self.scale

    def value(self, x: Array | float) -> Array:
        x = np.asarray(x, dtype=float)
        c = self.effective_scale
        if self.kind == "tanh":
            return 0.5 * c * (1.0 + np.tanh(x))
        if self.kind == "algebraic_ratio":
            return 0.5 * c * (1.0 + x / np.sqrt(1.0 + x * x))
        if self.kind == "abs_ratio":
            return 0.5 * c * (1.0 + x / (1.0 + np.abs(x)))
        if self.kind == "arctan":
            return 0.5 * c * (1.0 + (2.0 / math.pi) * np.arctan(0.5 * math.pi * x))
        if self.kind == "logistic_cdf":
            return c * expit(x)
        return np.asarray(self.fn(x), dtype=float)

    def deriv(self, x: Array | float) -> Array:
        x = np.asarray(x, dtype=float)
        c = self.effective_scale
        if self.kind == "tanh":
            t = np.tanh(x)
            return 0.5 * c * (1.0 - t * t)
        if self.kind == "algebraic_ratio":
            return 0.5 * c * (1.0 + x * x) ** -1.5
        if self.kind == "abs_ratio":
            return 0.5 * c / (1.0 + np.abs(x)) ** 2
        if self.kind == "arctan":
            return 0.5 * c / (1.0 + (0.5 * math.pi * x) ** 2)
        if self.kind == "logistic_cdf":
            s = expit(x)
            return c * s * (1.0 - s)
        if self.dfn is not None:
            return np.asarray(self.dfn(x), dtype=float)
        h = 1e-6
        return (np.asarray(self.fn(x + h), float) - np.asarray(self.fn(x - h), float)) / (2 * h)


# --------------------------------------------------------------------------
# kernel families (kernel template)
# --------------------------------------------------------------------------

_KERNEL_KINDS = ("gaussian", "logistic", "gumbel", "custom")


@dataclass(frozen=True)
class KernelKind:
    """Continuous kernel distribution used by the kernel template.

    ``custom`` kernels supply ``pdf`` and ``cdf`` callables; the quantile
    function is then obtained by bisection.
    """

    kind: str = "logistic"
    pdf: Callable[[Array], Array] | None = None
    cdf: Callable[[Array], Array] | None = None

    def __post_init__(self) -> None:
        if self.kind not in _KERNEL_KINDS:
            raise ValueError(f"unknown kernel kind {self.kind!r}")
        if self.kind == "custom" and (self.pdf is None or self.cdf is None):
            raise ValueError("custom kernel requires pdf and cdf")

    def cdf_eval(self, z: Array) -> Array:
        z = np.asarray(z, dtype=float)
        if self.kind == "gaussian":
            return ndtr(z)
        if self.kind == "logistic":
            return expit(z)
        if self.kind == "gumbel":
            # exp(-z) overflows past z < -709 but the composition correctly
            # saturates to 0 there
            with np.errstate(over="ignore"):
                return np.exp(-np.exp(-z))
        return np.asarray(self.cdf(z), dtype=float)

    def pdf_eval(self, z: Array) -> Array:
        z = np.asarray(z, dtype=float)
        if self.kind == "gaussian":
            return np.exp(-0.5 * z * z) / _SQRT_2PI
        if self.kind == "logistic":
            s = expit(z)
            return s * (1.0 - s)
        if self.kind == "gumbel":
            with np.errstate(over="ignore"):
                return np.exp(-z - np.exp(-z))
        return np.asarray(self.pdf(z), dtype=float)

    def quantile(self, u: Array) -> Array:
        u = np.asarray(u, dtype=float)
        if self.kind == "gaussian":
            return ndtri(u)
        if self.kind == "logistic":
            return np.log(u) - np.log1p(-u)
        if self.kind == "gumbel":
            return -np.log(-np.log(u))
        return _invert_cdf(self.cdf_eval, u)


def _invert_cdf(cdf: Callable[[Array], Array], u: Array) -> Array:
    """Quantiles of a custom kernel by bracketed bisection."""
    u = np.asarray(u, dtype=float)
    lo = np.full(u.shape, -1.0)
    hi = np.full(u.shape, 1.0)
    for _ in range(200):
        mask = cdf(lo) > u
        if not mask.any():
            break
        lo = np.where(mask, 2.0 * lo, lo)
    for _ in range(200):
        mask = cdf(hi) < u
        if not mask.any():
            break
        hi = np.where(mask, 2.0 * hi, hi)
    for _ in range(90):
        mid = 0.5 * (lo + hi)
        below = cdf(mid) < u
        lo = np.where(below, mid, lo)
        hi = np.where(below, hi, mid)
    return 0.5 * (lo + hi)


# --------------------------------------------------------------------------
# surrogate specification
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class SurrogateSpec:
    """Full description of a surrogate: template, arity, link/kernel, scale.

    ``scale`` is the kernel-template amplitude ``C``; product templates
    carry their scale inside ``tau``.  ``nodes`` sets the quadrature order
    for kernel routes without a closed form.
    """

    template: str
    k: int
    tau: TauKind | None = None
    kernel: KernelKind | None = None
    scale: float = 1.0
    nodes: int = 128

    def __post_init__(self) -> None:
        if self.template not in ("product", "kernel"):
            raise ValueError(f"unknown template {self.template!r}")
        if self.k < 2:
            raise ValueError("need at least two treatments")
        if self.template == "product" and self.tau is None:
            raise ValueError("product template requires tau")
        if self.template == "kernel" and self.kernel is None:
            raise ValueError("kernel template requires kernel")
        if self.scale <= 0:
            raise ValueError("scale must be positive")

    @property
    def c_phi(self) -> float:
        """Supremum of ``phi`` over score vectors (the envelope constant)."""
        if self.template == "product":
            return self.tau.effective_scale ** (self.k - 1)
        return self.scale

    @property
    def origin_value(self) -> float:
        """Value of ``phi(0; j)`` (any ``j``)."""
        if self.template == "product":
            return (0.5 * self.tau.effective_scale) ** (self.k - 1)
        return self.scale / self.k


# --------------------------------------------------------------------------
# quadrature nodes
# --------------------------------------------------------------------------


@lru_cache(maxsize=8)
def _gl_nodes(n: int) -> tuple[Array, Array]:
    t, w = np.polynomial.legendre.leggauss(n)
    return 0.5 * (t + 1.0), 0.5 * w


# --------------------------------------------------------------------------
# closed-form eta for k = 3 kernels
#
# eta(a, b) = E_K[(1 - F(Z - a)) (1 - F(Z - b))] is the k = 3 kernel
# surrogate as a function of the two margins of the selected coordinate;
# after the probability transform u = F(z) it is
# int_0^1 (1 - F(Q(u) - a)) (1 - F(Q(u) - b)) du, symmetric in (a, b),
# with eta(0, 0) = 1/3 for every kernel.
# --------------------------------------------------------------------------


def _eta_gumbel(a: Array, b: Array) -> Array:
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    s = a + b
    # (e^{a+b} - 1) / ((1 + e^a)(1 + e^b)), split on the sign of a + b so
    # expm1 never overflows.
    term1 = np.where(
        s >= 0,
        -np.expm1(-np.clip(s, 0.0, None)) * expit(a) * expit(b),
        np.expm1(np.clip(s, None, 0.0)) * expit(-a) * expit(-b),
    )
    # 1 / (1 + e^a + e^b) with a max shift.
    m = np.maximum(0.0, np.maximum(a, b))
    term2 = np.exp(-m) / (np.exp(-m) + np.exp(a - m) + np.exp(b - m))
    return term1 + term2


def _eta_gumbel_partial(a: Array, b: Array) -> Array:
    """d eta / d a for the Gumbel kernel (use symmetry for d/db)."""
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    sa = expit(a)
    m = np.maximum(0.0, np.maximum(a, b))
    den = np.exp(-m) + np.exp(a - m) + np.exp(b - m)
    return sa * (1.0 - sa) - np.exp(a - 2.0 * m) / (den * den)


def _series_horner(coef_at: Callable[[int], float], x: Array, terms: int = 60) -> Array:
    acc = np.zeros_like(x)
    for i in range(terms - 1, -1, -1):
        acc = acc * x + coef_at(i)
    return acc


def _ij_integrals(c: Array, jmax: int) -> Array:
    """``I_j = int_0^1 u^j / (1 + B u) du`` with ``B = expm1(-c)``, j <= jmax.

    Series in ``-B`` when ``|B| < 1/2``; otherwise the forward recurrence
    ``I_j = (1/j - I_{j-1}) / B`` seeded with ``I_0 = -c / B`` (the exact
    value of ``log1p(B) / B`` here, immune to expm1 rounding at large c).
    """
    c = np.asarray(c, dtype=float)
    B = np.expm1(-c)
    out = np.zeros((jmax + 1,) + c.shape)
    small = np.abs(B) < 0.5
    if small.any():
        x = -B[small]
        for j in range(jmax + 1):
            out[j][small] = _series_horner(lambda i, j=j: 1.0 / (j + i + 1), x)
    big = ~small
    if big.any():
        Bb = B[big]
        cur = -c[big] / Bb
        out[0][big] = cur
        for j in range(1, jmax + 1):
            cur = (1.0 / j - cur) / Bb
            out[j][big] = cur
    return out


def _t_weight(c: Array) -> tuple[Array, Array]:
    """``T(c) = int_0^1 (1-u)^2 / (1 + B u) du`` and ``B = expm1(-c)``."""
    ij = _ij_integrals(c, 2)
    return ij[0] - 2.0 * ij[1] + ij[2], np.expm1(-c)


def _t2_diag(s: Array) -> Array:
    """``int_0^1 (1-u)^2 / (1 + B u)^2 du`` with ``B = expm1(-s)``."""
    s = np.asarray(s, dtype=float)
    out = np.empty_like(s)
    B = np.expm1(-s)
    small = np.abs(B) < 0.5
    if small.any():
        out[small] = _series_horner(lambda i: 2.0 / ((i + 2) * (i + 3)), -B[small])
    pos = (~small) & (s > 0)
    if pos.any():
        e = np.exp(-s[pos])
        out[pos] = (1.0 - 2.0 * s[pos] * e - e * e) / (1.0 - e) ** 3
    neg = (~small) & (s < 0)
    if neg.any():
        sn = s[neg]
        Bn = B[neg]
        i0 = -sn / Bn
        i02 = np.exp(sn)
        i12 = (i0 - i02) / Bn
        i22 = (1.0 - 2.0 * i0 + i02) / (Bn * Bn)
        out[neg] = i02 - 2.0 * i12 + i22
    return out


def _diag_curvature(s: Array, nodes: int = 128) -> Array:
    """Coefficient of ``((a-b)/2)^2`` in eta near the diagonal a = b = s."""
    u, w = _gl_nodes(nodes)
    s = np.asarray(s, dtype=float)
    B = np.expm1(-s)
    g = 1.0 / (1.0 + B[..., None] * u)
    e = np.exp(-s)[..., None]
    integrand = (1.0 - u) ** 2 * (e * e * u * u * g**4 - e * u * g**3)
    return integrand @ w


def _eta_logistic_pos(a: Array, b: Array) -> Array:
    """Complement route for two comfortably positive margins.

    In ``v = 1 - u`` the integrand is ``v^2 / ((1-e_a)(1-e_b)(v+p_a)(v+p_b))``
    with ``p = 1/expm1(margin)``; the partial-fraction residues carry the
    tiny ``p^2`` factors, so the near-equal-pole cancellation that ruins
    the direct form when both margins are large stays harmless here.
    """
    with np.errstate(over="ignore"):
        ea, eb = np.exp(-a), np.exp(-b)
        pa = 1.0 / np.expm1(a)
        pb = 1.0 / np.expm1(b)
    la = np.log1p(pa) + a + np.log1p(-ea)
    lb = np.log1p(pb) + b + np.log1p(-eb)
    # Both expm1 terms saturate past ~710, where the correction residues
    # p^2 log(...) have long vanished: the 0/0 there resolves to 0.
    den = pa - pb
    num = pa * pa * la - pb * pb * lb
    corr = np.where(den != 0.0, num / np.where(den != 0.0, den, 1.0), 0.0)
    return (1.0 - corr) / ((1.0 - ea) * (1.0 - eb))


def _eta_logistic(a: Array, b: Array) -> Array:
    a, b = np.broadcast_arrays(np.asarray(a, float), np.asarray(b, float))
    shape = a.shape
    a = a.ravel().astype(float)
    b = b.ravel().astype(float)
    out = np.zeros(a.shape)

    alive = (a > _DEAD_MARGIN) & (b > _DEAD_MARGIN)
    diag = alive & (np.abs(a - b) < _DIAG_BAND)
    if diag.any():
        s = 0.5 * (a[diag] + b[diag])
        d = 0.5 * (a[diag] - b[diag])
        out[diag] = _t2_diag(s) + d * d * _diag_curvature(s)
    pos = alive & ~diag & (np.minimum(a, b) >= 2.0)
    if pos.any():
        out[pos] = _eta_logistic_pos(a[pos], b[pos])
    gen = alive & ~diag & ~pos
    if gen.any():
        ag, bg = a[gen], b[gen]
        ta, Ba = _t_weight(ag)
        tb, Bb = _t_weight(bg)
        # A - B = e^{-b} expm1(b - a) for a >= b (swap otherwise): avoids
        # both cancellation and overflow given margins > -300.
        hi = np.maximum(ag, bg)
        lo = np.minimum(ag, bg)
        dab = np.exp(-lo) * np.expm1(lo - hi)
        dab = np.where(ag >= bg, dab, -dab)
        out[gen] = (Ba * ta - Bb * tb) / dab
    return out.reshape(shape)


def _eta_k3(spec: SurrogateSpec, a: Array, b: Array) -> Array:
    if spec.kernel.kind == "gumbel":
        return _eta_gumbel(a, b)
    return _eta_logistic(a, b)


_HAS_CLOSED_ETA = ("gumbel", "logistic")


# --------------------------------------------------------------------------
# product template value/gradient on full score vectors
# --------------------------------------------------------------------------


def _prod_except(S: Array) -> Array:
    """Along the last axis: products of all entries except each one."""
    ones = np.ones_like(S[..., :1])
    pref = np.concatenate([ones, np.cumprod(S, axis=-1)[..., :-1]], axis=-1)
    suf = np.concatenate(
        [np.cumprod(S[..., ::-1], axis=-1)[..., -2::-1], ones], axis=-1
    )
    return pref * suf


def _product_phi(spec: SurrogateSpec, x: Array, j: Array, want_grad: bool):
    n, k = x.shape
    rows = np.arange(n)
    xj = x[rows, j][:, None]
    margins = xj - x
    S = spec.tau.value(margins)
    S[rows, j] = 1.0
    val = S.prod(axis=1)
    if not want_grad:
        return val, None
    D = spec.tau.deriv(margins)
    D[rows, j] = 0.0
    E = D * _prod_except(S)
    gx = -E
    gx[rows, j] = 0.0
    gx[rows, j] = -gx.sum(axis=1)
    return val, gx


# --------------------------------------------------------------------------
# kernel template value/gradient (quadrature and closed routes)
# --------------------------------------------------------------------------

_CHUNK = 8192


def _kernel_phi_quad(spec: SurrogateSpec, x: Array, j: Array, want_grad: bool):
    n, k = x.shape
    u, w = _gl_nodes(spec.nodes)
    z = spec.kernel.quantile(u)
    val = np.empty(n)
    gx = np.empty((n, k)) if want_grad else None
    for lo in range(0, n, _CHUNK):
        hi = min(lo + _CHUNK, n)
        rows = np.arange(hi - lo)
        xc = x[lo:hi]
        jc = j[lo:hi]
        xj = xc[rows, jc][:, None]
        delta = z[None, :, None] + (xc[:, None, :] - xj[:, None, :])
        S = 1.0 - spec.kernel.cdf_eval(delta)
        S[rows, :, jc] = 1.0
        P = S.prod(axis=2)
        val[lo:hi] = spec.scale * (P @ w)
        if want_grad:
            dens = spec.kernel.pdf_eval(delta)
            E = dens * _prod_except(S) * w[None, :, None]
            E[rows, :, jc] = 0.0
            g = -spec.scale * E.sum(axis=1)
            g[rows, jc] = 0.0
            g[rows, jc] = -g.sum(axis=1)
            gx[lo:hi] = g
    return val, gx


def _kernel_phi_closed3(spec: SurrogateSpec, x: Array, j: Array, want_grad: bool):
    """k = 3 logistic/Gumbel kernels via the closed two-margin form."""
    n, _ = x.shape
    rows = np.arange(n)
    others = np.array([[1, 2], [0, 2], [0, 1]])[j]
    m1 = x[rows, j] - x[rows, others[:, 0]]
    m2 = x[rows, j] - x[rows, others[:, 1]]
    if spec.kernel.kind == "gumbel":
        val = spec.scale * _eta_gumbel(m1, m2)
        if not want_grad:
            return val, None
        d1 = spec.scale * _eta_gumbel_partial(m1, m2)
        d2 = spec.scale * _eta_gumbel_partial(m2, m1)
        gx = np.zeros((n, 3))
        gx[rows, others[:, 0]] = -d1
        gx[rows, others[:, 1]] = -d2
        gx[rows, j] = d1 + d2
        return val, gx
    val = spec.scale * _eta_logistic(m1, m2)
    if want_grad:
        raise NotImplementedError("logistic gradients use the quadrature route")
    return val, None


def _phi_dispatch(spec: SurrogateSpec, x: Array, j: Array, want_grad: bool):
    if spec.template == "product":
        return _product_phi(spec, x, j, want_grad)
    if spec.k == 3 and spec.kernel.kind in _HAS_CLOSED_ETA:
        if spec.kernel.kind == "gumbel" or not want_grad:
            return _kernel_phi_closed3(spec, x, j, want_grad)
    return _kernel_phi_quad(spec, x, j, want_grad)


def _as_batch(x: Array, j, k: int):
    x = np.asarray(x, dtype=float)
    single = x.ndim == 1
    x2 = x.reshape(-1, k)
    j = np.asarray(j, dtype=int)
    if j.ndim == 0:
        j = np.full(x2.shape[0], int(j))
    else:
        j = j.reshape(-1)
    if j.shape[0] != x2.shape[0]:
        raise ValueError("treatment index batch does not match score batch")
    if (j < 1).any() or (j > k).any():
        raise ValueError(f"treatment index out of range 1..{k}")
    return x2, j - 1, single, x.shape


def phi_eval(spec: SurrogateSpec, x: Array, j) -> float | Array:
    """Surrogate value ``phi(x; j)``.

    Parameters
    ----------
    spec : SurrogateSpec
    x : array, shape (k,) or (..., k)
        Score vectors.
    j : int or int array
        Treatment index (1-based), broadcast against the batch.

    Returns
    -------
    float or array matching the batch shape of ``x``.
    """
    x2, j0, single, shape = _as_batch(x, j, spec.k)
    val, _ = _phi_dispatch(spec, x2, j0, want_grad=False)
    if single:
        return float(val[0])
    return val.reshape(shape[:-1])


def trans_embed(g: Array) -> Array:
    """Embed template scores ``g`` into the full score space: ``(0, -g)``."""
    g = np.asarray(g, dtype=float)
    zeros = np.zeros(g.shape[:-1] + (1,))
    return np.concatenate([zeros, -g], axis=-1)


def gamma_eval_grad(spec: SurrogateSpec, g: Array, a) -> tuple:
    """Template surrogate ``Gamma(g; a)`` and its gradient in ``g``.

    ``Gamma(g; a) = phi((0, -g); a)``: coordinate differences of the
    embedding reproduce the template margins exactly, so the reduced and
    full forms agree by construction.

    Parameters
    ----------
    spec : SurrogateSpec
    g : array, shape (k-1,) or (n, k-1)
    a : int or int array
        Observed treatment (1-based).

    Returns
    -------
    (value, grad)
        ``value`` float or (n,), ``grad`` shaped like ``g``.
    """
    g = np.asarray(g, dtype=float)
    single = g.ndim == 1
    g2 = g.reshape(-1, spec.k - 1)
    x2 = trans_embed(g2)
    _, j0, _, _ = _as_batch(x2, a, spec.k)
    val, gx = _phi_dispatch(spec, x2, j0, want_grad=True)
    grad = -gx[:, 1:]
    if single:
        return float(val[0]), grad[0]
    return val, grad


# --------------------------------------------------------------------------
# decision link, envelope oracle, and condition audits
# --------------------------------------------------------------------------


def _pred_rows(X: Array) -> Array:
    """Row-wise max-of-argmax decision, 1-based: ties go to the larger index."""
    X = np.asarray(X, dtype=float)
    return X.shape[-1] - np.argmax(X[..., ::-1], axis=-1)


def phi_dis(x: Array, j) -> float | Array:
    """The hard zero-one loss ``1[pred(x) = j]`` (the limit object the
    smooth surrogates stand in for)."""
    X = np.asarray(x, dtype=float)
    single = X.ndim == 1
    X2 = X.reshape(-1, X.shape[-1])
    j = np.asarray(j, dtype=int).reshape(-1)
    if j.shape[0] == 1 and X2.shape[0] != 1:
        j = np.full(X2.shape[0], int(j[0]))
    out = (_pred_rows(X2) == j).astype(float)
    return float(out[0]) if single else out.reshape(X.shape[:-1])


def _loss_caller(loss, k: int):
    """Normalize a SurrogateSpec or raw callable to ``phi(x_batch, j) -> (n,)``."""
    if isinstance(loss, SurrogateSpec):
        if loss.k != k:
            raise ValueError(f"loss has k={loss.k} treatments but p has length {k}")
        return lambda X, j: np.asarray(phi_eval(loss, X, j), dtype=float).reshape(len(X))
    if callable(loss):
        return lambda X, j: np.asarray(loss(X, j), dtype=float).reshape(len(X))
    raise TypeError("expected a SurrogateSpec or a callable loss phi(x_batch, j)")


def _grid_points_default(dim: int) -> int:
    return {1: 241, 2: 61, 3: 31}.get(dim, 15)


def _grid_climb(
    phi,
    p: Array,
    centers: Array,
    half: float,
    points: int,
    sweeps: int,
    exclude_pred: int | None = None,
) -> tuple[float, Array]:
    """Coarse-to-fine maximization of ``sum_j p_j phi(x; j)`` over score
    vectors with the first coordinate pinned at zero.

    When ``exclude_pred`` is given the search is restricted to the open
    region ``pred(x) != exclude_pred`` (used by the N1 margin audit).
    Returns the best value found and its (pinned) grid point.
    """
    k = p.shape[0]
    best = -np.inf
    best_centers = centers
    for _ in range(sweeps):
        axes = [np.linspace(c - half, c + half, points) for c in centers]
        mesh = np.meshgrid(*axes, indexing="ij")
        grid = np.stack([m.ravel() for m in mesh], axis=-1)
        full = np.concatenate([np.zeros((grid.shape[0], 1)), grid], axis=1)
        total = np.zeros(grid.shape[0])
        for j in range(1, k + 1):
            if p[j - 1] != 0.0:
                total += p[j - 1] * phi(full, j)
        if exclude_pred is not None:
            total = np.where(_pred_rows(full) == exclude_pred, -np.inf, total)
        i = int(np.argmax(total))
        if total[i] > best:
            best = float(total[i])
            centers = grid[i]
            best_centers = centers
        half *= 2.0 / (points - 1)
    return best, best_centers


def psi_star_oracle(
    loss,
    p: Array,
    *,
    bounds: tuple[float, float] = (-30.0, 30.0),
    points: int | None = None,
    rounds: int = 3,
) -> float:
    """Grid estimate of ``Psi*(p) = sup_x sum_j p_j phi(x; j)``.

    ``loss`` is either a :class:`SurrogateSpec` or a raw callable
    ``phi(x_batch, j)`` taking an ``(n, k)`` score batch and a 1-based
    treatment index ``j``.  The first coordinate is pinned at zero
    (relative-margin losses are shift invariant) and the remaining
    ``k - 1`` coordinates sweep a coarse grid over ``bounds`` followed by
    ``rounds`` shrinking refinements around the incumbent.  The estimate
    is monotone in the budget and never exceeds the true supremum; for
    well-formed surrogates that supremum is ``c_phi * max_j p_j``.
    """
    p = np.asarray(p, dtype=float).reshape(-1)
    k = p.shape[0]
    if k < 2:
        raise ValueError("p must weight at least two treatments")
    if (p < 0).any():
        raise ValueError("p must be nonnegative")
    phi = _loss_caller(loss, k)
    if points is None:
        points = _grid_points_default(k - 1)
    lo, hi = bounds
    best, _ = _grid_climb(
        phi, p, np.full(k - 1, 0.5 * (lo + hi)), 0.5 * (hi - lo), points, 1 + rounds
    )
    return best


@dataclass(frozen=True)
class ConditionReport:
    """Numeric audit of the calibration conditions for one surrogate loss.

    Deviations are worst cases over the sampled draws and always
    nonnegative except for ``N1_margin``, which must stay strictly
    positive.  The ``*_pass`` flags grade the deviations at the audit
    tolerance; the N2/N3 flags additionally allow the computable deficit
    left by link tails that have not fully saturated at the finite grid
    horizon (the reported deviations themselves are raw).  The grid
    search makes this a falsification report, not a proof: N1's supremum
    over an open region is approximated, and the margin is evidence.
    """

    family: str
    k: int
    c_phi: float
    p_samples: int
    x_samples: int
    tol: float
    seed: int
    N1_margin: float
    N2_max_abs_dev: float
    N3_limit_dev: float
    J_empirical: float
    J_reference: float
    symmetry_dev: float
    N1_pass: bool
    N2_pass: bool
    N3_pass: bool
    J_pass: bool
    symmetry_pass: bool

    @property
    def all_pass(self) -> bool:
        return (
            self.N1_pass
            and self.N2_pass
            and self.N3_pass
            and self.J_pass
            and self.symmetry_pass
        )

    def to_json(self) -> dict:
        out = {}
        for name, value in self.__dict__.items():
            if isinstance(value, (bool, np.bool_)):
                out[name] = bool(value)
            elif isinstance(value, (int, np.integer)):
                out[name] = int(value)
            elif isinstance(value, (float, np.floating)):
                out[name] = float(value)
            else:
                out[name] = value
        return out

    def lines(self) -> list[str]:
        """Fixed-order table used by the verification report."""

        def row(name: str, value: float, passed: bool) -> str:
            state = "pass" if passed else "FAIL"
            return f"  [{state}] {name:<15} {value: .6e}"

        out = [
            f"audit {self.family} k={self.k} c_phi={self.c_phi:g} "
            f"(p_samples={self.p_samples}, x_samples={self.x_samples}, "
            f"tol={self.tol:g}, seed={self.seed})"
        ]
        out.append(row("N1_margin", self.N1_margin, self.N1_pass))
        out.append(row("N2_max_abs_dev", self.N2_max_abs_dev, self.N2_pass))
        out.append(row("N3_limit_dev", self.N3_limit_dev, self.N3_pass))
        out.append(row("J_empirical", self.J_empirical, self.J_pass))
        out.append(row("symmetry_dev", self.symmetry_dev, self.symmetry_pass))
        out.append(
            f"  => {'all conditions hold' if self.all_pass else 'CONDITION VIOLATION'}"
        )
        return out


_N3_SCALES = (10.0, 100.0, 1000.0)


def _heavy_tailed_scores(rng: np.random.Generator, n: int, k: int, min_gap: float) -> Array:
    """Cauchy score draws, redrawn until every row's top two coordinates are
    separated by ``min_gap`` (the N3 limit statement concerns unique-argmax
    scores; a finite-scale check needs a quantifiable winner)."""
    X = rng.standard_cauchy((n, k))
    for _ in range(100):
        srt = np.sort(X, axis=1)
        bad = srt[:, -1] - srt[:, -2] < min_gap
        if not bad.any():
            break
        X[bad] = rng.standard_cauchy((int(bad.sum()), k))
    return X


def audit_conditions(
    loss,
    *,
    p_samples: int = 200,
    x_samples: int = 200,
    tol: float = 1e-3,
    seed: int = 0,
    k: int | None = None,
    c_phi: float | None = None,
) -> ConditionReport:
    """Sample-based audit of the calibration conditions of a surrogate loss.

    ``loss`` is a :class:`SurrogateSpec`, or a raw callable
    ``phi(x_batch, j)`` together with explicit ``k`` and ``c_phi``.  Draws
    ``p_samples`` weight vectors (uniform on the simplex, scaled by random
    positive radii) and ``x_samples`` heavy-tailed score vectors, then
    reports:

    * ``N1_margin``: worst case over p of ``Psi*(p) - sup{Psi(x; p) :
      pred(x) not in argmax(p)}``; calibration needs it > 0;
    * ``N2_max_abs_dev``: ``sup_p |Psi*(p) - c_phi * max(p)|``;
    * ``N3_limit_dev``: worst ``|phi(b x; j) - c_phi 1[j = pred(x)]|`` at
      the largest scale of ``b in {10, 100, 1000}``;
    * ``J_empirical``: ``min_x phi(x, pred(x))`` (origin included), to be
      compared against the known lower bound ``J_reference`` (the origin
      value for the built-in families; raw callables are only required to
      stay positive);
    * ``symmetry_dev``: kernel family only, ``sup_x |sum_j phi(x; j) - C|``
      (0 reported otherwise).
    """
    if isinstance(loss, SurrogateSpec):
        spec = loss
        k = spec.k
        c_phi = spec.c_phi
        kind = spec.tau.kind if spec.template == "product" else spec.kernel.kind
        family = f"{spec.template}/{kind}"
        builtin = kind != "custom"
    else:
        spec = None
        if k is None or c_phi is None:
            raise ValueError("raw callable losses need explicit k and c_phi")
        family = "callable"
        builtin = False
    if p_samples < 1 or x_samples < 1:
        raise ValueError("sample counts must be >= 1")
    phi = _loss_caller(loss, k)
    rng = np.random.default_rng(seed)

    # --- shared base grid for the Psi* searches -------------------------
    lo, hi = -30.0, 30.0
    points = _grid_points_default(k - 1)
    axes = [np.linspace(lo, hi, points)] * (k - 1)
    mesh = np.meshgrid(*axes, indexing="ij")
    grid = np.stack([m.ravel() for m in mesh], axis=-1)
    base = np.concatenate([np.zeros((grid.shape[0], 1)), grid], axis=1)
    base_phi = np.stack([phi(base, j) for j in range(1, k + 1)], axis=1)
    base_pred = _pred_rows(base)
    spacing = (hi - lo) / (points - 1)

    # How far below c_phi the loss still sits when one coordinate leads by
    # the full grid horizon; the honest N2 allowance for slow link tails.
    lead = np.zeros((1, k))
    lead[0, 0] = hi
    horizon_deficit = max(0.0, c_phi - float(phi(lead, 1)[0]))

    # --- N1 / N2 over simplex draws with random radii -------------------
    P = rng.dirichlet(np.ones(k), size=p_samples) * rng.uniform(
        0.5, 3.0, size=(p_samples, 1)
    )
    n1_margin = np.inf
    n2_dev = 0.0
    n2_ok = True
    for p in P:
        m = int(np.argmax(p)) + 1
        scores = base_phi @ p
        i_free = int(np.argmax(scores))
        free, _ = _grid_climb(
            phi, p, base[i_free, 1:], spacing, 9, 3
        )
        free = max(free, float(scores[i_free]))
        allowed = np.where(base_pred != m, scores, -np.inf)
        i_con = int(np.argmax(allowed))
        con, _ = _grid_climb(
            phi, p, base[i_con, 1:], spacing, 9, 3, exclude_pred=m
        )
        con = max(con, float(allowed[i_con]))
        n1_margin = min(n1_margin, free - con)
        target = c_phi * float(p.max())
        n2_dev = max(n2_dev, abs(free - target))
        slack = float(p.max()) * horizon_deficit
        if free - target > tol or target - free > tol + slack:
            n2_ok = False

    # --- N3 / J / symmetry over heavy-tailed score draws ----------------
    X = _heavy_tailed_scores(rng, x_samples, k, min_gap=1e-3)
    pred_x = _pred_rows(X)
    gaps = np.sort(X, axis=1)
    gaps = gaps[:, -1] - gaps[:, -2]

    n3_dev = 0.0
    n3_ok = True
    for b in _N3_SCALES:
        vals = np.stack([phi(b * X, j) for j in range(1, k + 1)], axis=1)
        limit = c_phi * (pred_x[:, None] == np.arange(1, k + 1)[None, :])
        dev_rows = np.abs(vals - limit).max(axis=1)
        if b == _N3_SCALES[-1]:
            n3_dev = float(dev_rows.max())
            # Allowance: with the winner leading by b*gap, the loss can sit
            # no closer to its limits than its own tails permit there.
            w = b * gaps
            probes = np.zeros((x_samples, k))
            probes[:, 0] = w
            slack = np.maximum(0.0, c_phi - phi(probes, 1))
            if spec is not None and spec.template == "product":
                off = spec.tau.value(-w) * spec.tau.effective_scale ** (k - 2)
                slack = np.maximum(slack, off)
            elif spec is not None:
                off = spec.scale * (
                    1.0 - spec.kernel.cdf_eval(w / 2.0) + spec.kernel.cdf_eval(-w / 2.0)
                )
                slack = np.maximum(slack, off)
            n3_ok = bool((dev_rows <= tol + slack).all())

    Xj = np.concatenate([X, np.zeros((1, k))], axis=0)
    pj = _pred_rows(Xj)
    own = np.empty(Xj.shape[0])
    for j in range(1, k + 1):
        mask = pj == j
        if mask.any():
            own[mask] = phi(Xj[mask], j)
    j_emp = float(own.min())
    if builtin:
        j_ref = spec.origin_value
        j_ok = j_emp >= j_ref - 1e-9
    else:
        j_ref = 0.0
        j_ok = j_emp > 0.0

    if spec is not None and spec.template == "kernel":
        sym = np.zeros(Xj.shape[0])
        for j in range(1, k + 1):
            sym += phi(Xj, j)
        sym_dev = float(np.abs(sym - spec.scale).max())
        closed = spec.k == 3 and spec.kernel.kind in _HAS_CLOSED_ETA
        sym_ok = sym_dev <= (1e-8 if closed else 1e-4)
    else:
        sym_dev = 0.0
        sym_ok = True

    return ConditionReport(
        family=family,
        k=int(k),
        c_phi=float(c_phi),
        p_samples=int(p_samples),
        x_samples=int(x_samples),
        tol=float(tol),
        seed=int(seed),
        N1_margin=float(n1_margin),
        N2_max_abs_dev=float(n2_dev),
        N3_limit_dev=float(n3_dev),
        J_empirical=float(j_emp),
        J_reference=float(j_ref),
        symmetry_dev=float(sym_dev),
        N1_pass=bool(n1_margin > 0.0),
        N2_pass=bool(n2_ok),
        N3_pass=bool(n3_ok),
        J_pass=bool(j_ok),
        symmetry_pass=bool(sym_ok),
    )
