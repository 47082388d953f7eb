"""Parametric per-stage score functions and their exact gradients.

A policy assigns, at every stage ``t``, a relative score vector
``g_t(h_t)`` of length ``k_t - 1`` to the observed history.  The induced
decision is ``pred(trans(g_t(h_t)))`` where ``trans(g) = (0, -g)`` embeds
the relative scores into the full score space and ``pred`` picks the
maximizing treatment (ties to the larger index).

Two function classes are provided per stage:

* ``linear``: one weight row per head (plus optional bias);
* ``mlp``: a fully-connected network whose hidden trunk is either shared
  by all ``k_t - 1`` heads (they differ only at the output layer) or
  replicated per head.

All parameters live in one flat vector ``theta`` described by an explicit
layout table, so optimizers, checkpoints, and finite-difference oracles
all see the same coordinates.  Gradients are hand-written reverse mode:
``policy_grad_accumulate`` adds ``J^T upstream`` into a caller-supplied
buffer, recomputing the forward pass (including dropout masks, which are
a pure function of the caller's rng state) so no hidden caches exist.
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass, replace
from typing import NamedTuple

import numpy as np

Array = np.ndarray

_STAGE_KINDS = ("linear", "mlp")
_ACTIVATIONS = ("relu", "elu")
_INIT_SCHEMES = ("he", "xavier")


# --------------------------------------------------------------------------
# decision bridge
# --------------------------------------------------------------------------


def pred(x) -> int:
    """Decision induced by a full score vector: ``max(argmax(x))``.

    Ties break toward the larger treatment index, so ``pred((1, 3, 3)) = 3``
    and ``pred((0, 0)) = 2``.  Returns a 1-based treatment index.
    """
    x = np.asarray(x, dtype=float).reshape(-1)
    if x.size == 0:
        raise ValueError("pred needs a nonempty score vector")
    return int(x.size - np.argmax(x[::-1]))


def pred_rows(X: Array) -> Array:
    """Vectorized :func:`pred` along the last axis (1-based indices)."""
    X = np.asarray(X, dtype=float)
    if X.shape[-1] == 0:
        raise ValueError("pred needs nonempty score vectors")
    return X.shape[-1] - np.argmax(X[..., ::-1], axis=-1)


def trans(g) -> Array:
    """Embed relative scores into full score space: ``trans(g) = (0, -g)``.

    Requires at least one relative score (i.e. ``k >= 2`` treatments).
    """
    g = np.asarray(g, dtype=float)
    if g.shape[-1] == 0:
        raise ValueError("trans needs k >= 2: got an empty score vector")
    zeros = np.zeros(g.shape[:-1] + (1,))
    return np.concatenate([zeros, -g], axis=-1)


# --------------------------------------------------------------------------
# architecture and parameter layout
# --------------------------------------------------------------------------


@dataclass(frozen=True)
class StageArch:
    """Function class for one stage's score map ``h_t -> R^{k_t - 1}``."""

    kind: str
    in_dim: int
    k: int
    depth: int = 1
    width: int = 32
    activation: str = "relu"
    dropout: float = 0.0

    def __post_init__(self) -> None:
        if self.kind not in _STAGE_KINDS:
            raise ValueError(f"unknown stage kind {self.kind!r}")
        if self.in_dim < 1:
            raise ValueError("stage input dimension must be >= 1")
        if self.k < 2:
            raise ValueError("each stage needs k >= 2 treatments")
        if self.kind == "mlp":
            if self.depth < 1 or self.width < 1:
                raise ValueError("mlp needs depth >= 1 and width >= 1")
            if self.activation not in _ACTIVATIONS:
                raise ValueError(f"unknown activation {self.activation!r}")
            if not 0.0 <= self.dropout < 1.0:
                raise ValueError("dropout rate must lie in [0, 1)")

    @property
    def heads(self) -> int:
        return self.k - 1


@dataclass(frozen=True)
class PolicyArch:
    """Per-stage function classes plus global structural switches."""

    stages: tuple[StageArch, ...]
    include_bias: bool = True
    shared_trunk: bool = True

    def __post_init__(self) -> None:
        if not self.stages:
            raise ValueError("a policy needs at least one stage")
        object.__setattr__(self, "stages", tuple(self.stages))

    @property
    def n_stages(self) -> int:
        return len(self.stages)


class LayoutBlock(NamedTuple):
    """One contiguous parameter block.

    ``head`` is -1 for blocks shared by all heads (linear stages and
    shared trunks); otherwise the 0-based head the block belongs to.
    ``role`` is ``"W"`` or ``"b"``; ``layer`` counts hidden layers first,
    with the output (head) layer last.
    """

    stage: int
    layer: int
    head: int
    role: str
    offset: int
    shape: tuple

    @property
    def size(self) -> int:
        return int(np.prod(self.shape))


def _stage_layer_dims(st: StageArch) -> list[tuple[int, int]]:
    """(fan_in, fan_out) of every layer of one trunk-plus-output column."""
    if st.kind == "linear":
        return [(st.in_dim, st.heads)]
    dims = [(st.in_dim, st.width)]
    dims += [(st.width, st.width)] * (st.depth - 1)
    dims.append((st.width, st.heads))
    return dims


def build_layout(arch: PolicyArch) -> tuple[LayoutBlock, ...]:
    """Flat-vector layout: stage-major, then layer-major, weights before
    biases, with per-head columns laid out head-major when the trunk is
    not shared."""
    blocks: list[LayoutBlock] = []
    offset = 0

    def add(stage: int, layer: int, head: int, role: str, shape: tuple) -> None:
        nonlocal offset
        block = LayoutBlock(stage, layer, head, role, offset, shape)
        blocks.append(block)
        offset += block.size

    for s, st in enumerate(arch.stages):
        dims = _stage_layer_dims(st)
        if st.kind == "linear" or arch.shared_trunk:
            for layer, (fin, fout) in enumerate(dims):
                add(s, layer, -1, "W", (fout, fin))
                if arch.include_bias:
                    add(s, layer, -1, "b", (fout,))
        else:
            for head in range(st.heads):
                for layer, (fin, fout) in enumerate(dims):
                    fout_h = 1 if layer == len(dims) - 1 else fout
                    add(s, layer, head, "W", (fout_h, fin))
                    if arch.include_bias:
                        add(s, layer, head, "b", (fout_h,))
    return tuple(blocks)


@dataclass
class PolicyParams:
    """Flat parameter vector plus its layout and input standardization.

    ``feat_mean[s]`` / ``feat_sd[s]`` standardize stage ``s+1`` history
    features before the forward pass; fresh parameters carry the identity
    transform until :func:`standardize_params` installs training-set
    statistics.
    """

    theta: Array
    layout: tuple[LayoutBlock, ...]
    feat_mean: tuple[Array, ...]
    feat_sd: tuple[Array, ...]

    @property
    def k_dim(self) -> int:
        return self.theta.shape[0]

    def _find(self, stage: int, layer: int, head: int, role: str) -> LayoutBlock:
        for blk in self.layout:
            if (blk.stage, blk.layer, blk.head, blk.role) == (stage, layer, head, role):
                return blk
        raise KeyError(f"no parameter block (stage={stage}, layer={layer}, head={head}, {role})")

    def block(self, stage: int, layer: int, role: str, head: int = -1,
              theta: Array | None = None) -> Array:
        """Writable view of one block, reshaped to its natural shape.

        ``stage`` is 1-based like everywhere else in the public API.
        """
        blk = self._find(stage - 1, layer, head, role)
        vec = self.theta if theta is None else theta
        return vec[blk.offset:blk.offset + blk.size].reshape(blk.shape)

    def head_row(self, stage: int, head: int) -> Array:
        """The output-layer weight slice feeding relative score ``head``
        (0-based) of a stage: the per-head piece of the layout map."""
        st_blocks = [b for b in self.layout if b.stage == stage - 1 and b.role == "W"]
        out_layer = max(b.layer for b in st_blocks)
        for blk in st_blocks:
            if blk.layer == out_layer and blk.head in (-1, head):
                W = self.theta[blk.offset:blk.offset + blk.size].reshape(blk.shape)
                return W[head] if blk.head == -1 else W[0]
        raise KeyError(f"stage {stage} has no head {head}")

    def copy(self) -> "PolicyParams":
        return replace(self, theta=self.theta.copy())


def _identity_stats(arch: PolicyArch) -> tuple[tuple[Array, ...], tuple[Array, ...]]:
    means = tuple(np.zeros(st.in_dim) for st in arch.stages)
    sds = tuple(np.ones(st.in_dim) for st in arch.stages)
    return means, sds


def init_params(arch: PolicyArch, scheme: str = "he", seed: int = 0) -> PolicyParams:
    """Draw fresh parameters: weights from the chosen fan-in rule
    (``he``: N(0, 2/n_f); ``xavier``: Uniform(-1/sqrt(n_f), 1/sqrt(n_f))),
    biases exactly zero.  Deterministic per (arch, scheme, seed)."""
    if scheme not in _INIT_SCHEMES:
        raise ValueError(f"unknown init scheme {scheme!r}")
    layout = build_layout(arch)
    k_dim = sum(b.size for b in layout)
    rng = np.random.default_rng(seed)
    theta = np.zeros(k_dim)
    for blk in layout:
        if blk.role != "W":
            continue
        fan_in = blk.shape[1]
        if scheme == "he":
            draw = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=blk.shape)
        else:
            bound = 1.0 / np.sqrt(fan_in)
            draw = rng.uniform(-bound, bound, size=blk.shape)
        theta[blk.offset:blk.offset + blk.size] = draw.ravel()
    means, sds = _identity_stats(arch)
    return PolicyParams(theta, layout, means, sds)


def standardize_params(params: PolicyParams, features: list[Array]) -> PolicyParams:
    """Install per-stage feature mean/SD (taken from training data) into the
    policy.  Constant features keep SD 1 so they pass through centered."""
    means = []
    sds = []
    for s, F in enumerate(features):
        F = np.asarray(F, dtype=float)
        if F.ndim != 2 or F.shape[1] != params.feat_mean[s].shape[0]:
            raise ValueError(f"stage {s + 1} feature matrix has the wrong width")
        mu = F.mean(axis=0)
        sd = F.std(axis=0)
        sd = np.where(sd < 1e-12, 1.0, sd)
        means.append(mu)
        sds.append(sd)
    return replace(params, feat_mean=tuple(means), feat_sd=tuple(sds))


# --------------------------------------------------------------------------
# forward / backward
# --------------------------------------------------------------------------


def _act(z: Array, kind: str) -> Array:
    if kind == "relu":
        return np.maximum(z, 0.0)
    return np.where(z > 0, z, np.expm1(np.minimum(z, 0.0)))


def _act_deriv(z: Array, kind: str) -> Array:
    if kind == "relu":
        return (z > 0).astype(float)
    return np.where(z > 0, 1.0, np.exp(np.minimum(z, 0.0)))


def _as_rows(history, in_dim: int) -> tuple[Array, bool]:
    H = np.asarray(history, dtype=float)
    if H.ndim == 0:
        H = H.reshape(1)
    single = H.ndim == 1
    H2 = H.reshape(-1, H.shape[-1])
    if H2.shape[-1] != in_dim:
        raise ValueError(
            f"history has {H2.shape[-1]} features but the stage expects {in_dim}"
        )
    return H2, single


def _column_forward(theta, params, arch, st, stage0, head, X, train_mode, rng, cache):
    """Forward through one trunk-plus-output column; optionally records
    layer inputs, pre-activations, and dropout masks for the backward pass."""
    dims = _stage_layer_dims(st)
    keep = 1.0 - st.dropout
    H = X
    for layer in range(len(dims) - 1):
        blk_head = head if (not arch.shared_trunk and st.kind == "mlp") else -1
        W = params.block(stage0 + 1, layer, "W", blk_head, theta)
        Z = H @ W.T
        if arch.include_bias:
            Z = Z + params.block(stage0 + 1, layer, "b", blk_head, theta)
        A = _act(Z, st.activation)
        mask = None
        if train_mode and st.dropout > 0.0:
            if rng is None:
                raise ValueError("dropout in train mode needs an rng")
            mask = rng.random(A.shape) >= st.dropout
            A = A * mask / keep
        if cache is not None:
            cache.append((H, Z, mask))
        H = A
    out_layer = len(dims) - 1
    blk_head = head if (not arch.shared_trunk and st.kind == "mlp") else -1
    W = params.block(stage0 + 1, out_layer, "W", blk_head, theta)
    G = H @ W.T
    if arch.include_bias:
        G = G + params.block(stage0 + 1, out_layer, "b", blk_head, theta)
    if cache is not None:
        cache.append((H, None, None))
    return G


def _stage_forward(params, arch, stage: int, X: Array, train_mode: bool, rng,
                   caches: list | None):
    st = arch.stages[stage - 1]
    Xs = (X - params.feat_mean[stage - 1]) / params.feat_sd[stage - 1]
    if st.kind == "linear" or arch.shared_trunk:
        cache = [] if caches is not None else None
        G = _column_forward(params.theta, params, arch, st, stage - 1, -1, Xs,
                            train_mode, rng, cache)
        if caches is not None:
            caches.append((-1, cache))
        return G
    outs = []
    for head in range(st.heads):
        cache = [] if caches is not None else None
        g = _column_forward(params.theta, params, arch, st, stage - 1, head, Xs,
                            train_mode, rng, cache)
        outs.append(g)
        if caches is not None:
            caches.append((head, cache))
    return np.concatenate(outs, axis=1)


def policy_scores(params: PolicyParams, arch: PolicyArch, history, stage: int,
                  train_mode: bool = False, rng: np.random.Generator | None = None):
    """Relative scores ``g_t(h_t)`` for one stage (1-based ``stage``).

    ``history`` is a feature vector or an ``(n, in_dim)`` batch; the output
    has one column per head (``k_t - 1``).  Dropout masks are drawn from
    ``rng`` only when ``train_mode`` and the stage's rate is positive, so
    with dropout off the forward pass is a pure function of ``(theta,
    history)``; with it on, it is a pure function of the rng state.
    """
    st = arch.stages[stage - 1]
    X, single = _as_rows(history, st.in_dim)
    G = _stage_forward(params, arch, stage, X, train_mode, rng, None)
    return G[0] if single else G


def _column_backward(params, arch, st, stage0, head, upstream, cache, grad_out, theta):
    dims = _stage_layer_dims(st)
    keep = 1.0 - st.dropout
    blk_head = head if (not arch.shared_trunk and st.kind == "mlp") else -1

    def gblock(layer, role):
        blk = params._find(stage0, layer, blk_head, role)
        return grad_out[blk.offset:blk.offset + blk.size].reshape(blk.shape)

    out_layer = len(dims) - 1
    H_last, _, _ = cache[out_layer]
    gblock(out_layer, "W")[...] += upstream.T @ H_last
    if arch.include_bias:
        gblock(out_layer, "b")[...] += upstream.sum(axis=0)
    W = params.block(stage0 + 1, out_layer, "W", blk_head, theta)
    D = upstream @ W
    for layer in range(out_layer - 1, -1, -1):
        H_in, Z, mask = cache[layer]
        if mask is not None:
            D = D * mask / keep
        D = D * _act_deriv(Z, st.activation)
        gblock(layer, "W")[...] += D.T @ H_in
        if arch.include_bias:
            gblock(layer, "b")[...] += D.sum(axis=0)
        W = params.block(stage0 + 1, layer, "W", blk_head, theta)
        D = D @ W


def policy_grad_accumulate(params: PolicyParams, arch: PolicyArch, history,
                           stage: int, upstream, grad_out: Array,
                           train_mode: bool = False,
                           rng: np.random.Generator | None = None) -> None:
    """Accumulate ``J^T upstream`` into ``grad_out`` (flat, length k_dim),
    where ``J = d g_t / d theta`` at the given history batch.

    The forward pass is recomputed internally; to pair with a dropout
    forward, pass an ``rng`` in the same state as the one given to
    :func:`policy_scores` (the masks are a pure function of that state —
    a differently-seeded rng silently breaks the pairing contract).
    Batched rows accumulate their per-row contributions (sum).
    """
    st = arch.stages[stage - 1]
    X, single = _as_rows(history, st.in_dim)
    U = np.asarray(upstream, dtype=float)
    U = U.reshape(1, -1) if single else U.reshape(X.shape[0], -1)
    if U.shape != (X.shape[0], st.heads):
        raise ValueError(f"upstream must have {st.heads} head columns")
    if grad_out.shape != params.theta.shape:
        raise ValueError("grad_out must match theta's flat shape")
    caches: list = []
    _stage_forward(params, arch, stage, X, train_mode, rng, caches)
    for head, cache in caches:
        up = U if head == -1 else U[:, head:head + 1]
        _column_backward(params, arch, st, stage - 1, head, up, cache,
                         grad_out, params.theta)


def policy_decide(params: PolicyParams, arch: PolicyArch, history, stage: int):
    """Decision rule induced by the scores: ``pred(trans(g))`` (1-based)."""
    g = policy_scores(params, arch, history, stage)
    x = trans(np.atleast_2d(g))
    d = pred_rows(x)
    return int(d[0]) if np.asarray(history).ndim <= 1 else d


# --------------------------------------------------------------------------
# checkpoints
# --------------------------------------------------------------------------


def save_policy(path_prefix: str, arch: PolicyArch, params: PolicyParams) -> dict:
    """Write ``<prefix>.json`` (arch + layout + standardization stats) and
    ``<prefix>.theta.bin`` (theta as little-endian float64).  Returns the
    manifest dict."""
    theta_file = os.path.basename(path_prefix) + ".theta.bin"
    manifest = {
        "format": "sdss-policy-v1",
        "arch": {
            "include_bias": arch.include_bias,
            "shared_trunk": arch.shared_trunk,
            "stages": [
                {
                    "kind": st.kind,
                    "in_dim": st.in_dim,
                    "k": st.k,
                    "depth": st.depth,
                    "width": st.width,
                    "activation": st.activation,
                    "dropout": st.dropout,
                }
                for st in arch.stages
            ],
        },
        "layout": [
            {
                "stage": b.stage,
                "layer": b.layer,
                "head": b.head,
                "role": b.role,
                "offset": b.offset,
                "shape": list(b.shape),
            }
            for b in params.layout
        ],
        "feat_mean": [m.tolist() for m in params.feat_mean],
        "feat_sd": [s.tolist() for s in params.feat_sd],
        "k_dim": params.k_dim,
        "dtype": "<f8",
        "theta_file": theta_file,
    }
    with open(path_prefix + ".json", "w") as fh:
        json.dump(manifest, fh, indent=1)
    with open(os.path.join(os.path.dirname(path_prefix) or ".", theta_file), "wb") as fh:
        fh.write(params.theta.astype("<f8").tobytes())
    return manifest


def load_policy(path_prefix: str) -> tuple[PolicyArch, PolicyParams]:
    """Inverse of :func:`save_policy`."""
    with open(path_prefix + ".json") as fh:
        manifest = json.load(fh)
    if manifest.get("format") != "sdss-policy-v1":
        raise ValueError("not a policy checkpoint")
    a = manifest["arch"]
    arch = PolicyArch(
        stages=tuple(
            StageArch(
                kind=s["kind"], in_dim=s["in_dim"], k=s["k"], depth=s["depth"],
                width=s["width"], activation=s["activation"], dropout=s["dropout"],
            )
            for s in a["stages"]
        ),
        include_bias=a["include_bias"],
        shared_trunk=a["shared_trunk"],
    )
    layout = tuple(
        LayoutBlock(b["stage"], b["layer"], b["head"], b["role"], b["offset"],
                    tuple(b["shape"]))
        for b in manifest["layout"]
    )
    expected = build_layout(arch)
    if layout != expected:
        raise ValueError("checkpoint layout does not match its architecture")
    theta_path = os.path.join(os.path.dirname(path_prefix) or ".", manifest["theta_file"])
    theta = np.frombuffer(open(theta_path, "rb").read(), dtype="<f8").astype(float)
    if theta.shape[0] != manifest["k_dim"]:
        raise ValueError("theta file length does not match the manifest")
    params = PolicyParams(
        theta=theta.copy(),
        layout=layout,
        feat_mean=tuple(np.asarray(m, dtype=float) for m in manifest["feat_mean"]),
        feat_sd=tuple(np.asarray(s, dtype=float) for s in manifest["feat_sd"]),
    )
    return arch, params
