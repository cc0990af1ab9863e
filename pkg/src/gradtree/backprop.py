"""Dense backward pass for the layered tree.

The forward pass is fully quantized (hard routing), so the backward pass
substitutes smooth surrogates: the per-node sign gets a straight-through
gradient (pass-through inside ``|a| <= 1``, zero outside), and the winning
path is relaxed to a softmax over per-leaf path agreement scores.  The
result is a gradient that touches every layer matrix for every example,
not just the parameters along the routed path; only the leaf gradient stays
hard (the routed leaf's row and nothing else).
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import NumericError
from .trees import PathTables, TreeParams, augment, augment_batch, descend, descend_batch

ST_BAND = 1.0  # straight-through window: d sign(a)/da treated as 1 iff |a| <= 1


@dataclass(frozen=True)
class GradientSet:
    """Per-layer gradient matrices plus the leaf-gradient matrix; shapes
    mirror a `TreeParams` exactly."""

    layers: tuple[np.ndarray, ...]
    leaves: np.ndarray

    @classmethod
    def zeros_like(cls, params: TreeParams) -> "GradientSet":
        return cls(
            layers=tuple(np.zeros_like(w) for w in params.layers),
            leaves=np.zeros_like(params.leaves),
        )

    def add(self, other: "GradientSet") -> "GradientSet":
        return GradientSet(
            layers=tuple(a + b for a, b in zip(self.layers, other.layers)),
            leaves=self.leaves + other.leaves,
        )

    def scale(self, c: float) -> "GradientSet":
        return GradientSet(
            layers=tuple(c * w for w in self.layers), leaves=c * self.leaves
        )

    def global_norm(self) -> float:
        total = float(np.sum(self.leaves**2))
        for w in self.layers:
            total += float(np.sum(w**2))
        return float(np.sqrt(total))

    def all_finite(self) -> bool:
        return bool(
            np.all(np.isfinite(self.leaves))
            and all(np.all(np.isfinite(w)) for w in self.layers)
        )


@dataclass(frozen=True)
class SoftPathScores:
    """Backward-pass relaxation of the routing for one example.

    ``q_tilde[l]`` counts signed agreement between the node signs and leaf
    ``l``'s path directions (integer-valued in ``[-h, h]``; exactly ``h``
    for the hard-routed leaf).  ``probs`` is the softmax over ``q_tilde``
    (computed with max-subtraction), ``z`` the raw partition value, and
    ``mixture`` the probability-weighted mean of the scalarized leaf values.
    """

    q_tilde: np.ndarray
    probs: np.ndarray
    z: float
    mixture: float


def path_scores(a: np.ndarray, tables: PathTables) -> np.ndarray:
    """Signed path-agreement score per leaf: sum over depths of
    sign(activation at the leaf's ancestor) times the leaf's direction."""
    signs = np.where(a >= 0, 1.0, -1.0)
    return (signs[tables.node_index] * tables.sign).sum(axis=0)


def soft_path_scores(a: np.ndarray, theta_bar: np.ndarray, tables: PathTables) -> SoftPathScores:
    q = path_scores(a, tables)
    shifted = np.exp(q - q.max())
    probs = shifted / shifted.sum()
    return SoftPathScores(
        q_tilde=q,
        probs=probs,
        z=float(np.exp(q).sum()),
        mixture=float(probs @ theta_bar),
    )


def mixing_coefficients(scores: SoftPathScores, theta_bar: np.ndarray) -> np.ndarray:
    """Gradient of ``sum_l softmax(q)_l * theta_bar_l`` with respect to the
    scores ``q``: ``p_l * (theta_bar_l - mixture)``."""
    return scores.probs * (theta_bar - scores.mixture)


def path_grad_wrt_activations(a: np.ndarray, tables: PathTables, leaf: int) -> np.ndarray:
    """Gradient of one leaf's path score w.r.t. the activation vector, with
    the straight-through mask applied (zero outside ``|a| <= 1``)."""
    g = np.zeros_like(a)
    nodes = tables.node_index[:, leaf]
    g[nodes] = tables.sign[:, leaf] * (np.abs(a[nodes]) <= ST_BAND)
    return g


def activation_grad(a: np.ndarray, coeffs: np.ndarray, tables: PathTables) -> np.ndarray:
    """Combine per-leaf coefficients into a per-node activation gradient:
    ``sum_l coeffs[l] * d q_tilde[l] / d a``.

    At depth ``i`` the leaves under node ``j`` form a contiguous block of
    ``2^(h-i)``, so the scatter is a reshape-and-sum per depth.
    """
    h = tables.height
    g = np.empty_like(a)
    for i in range(h):
        contrib = (coeffs * tables.sign[i]).reshape(1 << i, 1 << (h - i)).sum(axis=1)
        g[(1 << i) - 1 : (2 << i) - 1] = contrib
    g *= np.abs(a) <= ST_BAND
    return g


def _activation_grad_batch(A, coeffs, tables):
    h = tables.height
    B = A.shape[0]
    g = np.empty_like(A)
    for i in range(h):
        contrib = (coeffs * tables.sign[i]).reshape(B, 1 << i, 1 << (h - i)).sum(axis=2)
        g[:, (1 << i) - 1 : (2 << i) - 1] = contrib
    g *= np.abs(A) <= ST_BAND
    return g


def layer_inputs(x, params: TreeParams) -> list[np.ndarray]:
    """Forward cache: the input of each layer, ending with the activations.
    ``layer_inputs(...)[m]`` feeds ``params.layers[m]``; the last entry is
    the activation vector itself."""
    zs = [augment(x)]
    for w in params.layers:
        zs.append(w @ zs[-1])
    return zs


def layer_grads_from_activation_grad(params: TreeParams, zs: list[np.ndarray], g_a: np.ndarray) -> tuple[np.ndarray, ...]:
    """Backpropagate an activation-space gradient through the linear chain,
    yielding one gradient matrix per layer (the exact Jacobian contraction;
    each activation is linear in each layer)."""
    grads = [None] * params.num_layers
    d = g_a
    for m in reversed(range(params.num_layers)):
        grads[m] = np.outer(d, zs[m])
        if m:
            d = params.layers[m].T @ d
    return tuple(grads)


def backprop(x, params: TreeParams, tables: PathTables, out_grad) -> GradientSet:
    """Gradient of ``<out_grad, prediction>`` w.r.t. all layers and leaves
    for a single example.

    The leaf gradient is exact for the quantized forward: row ``l*`` (the
    hard-routed leaf, ties to the lowest index) equals ``out_grad``, all
    other rows are zero.  The layer gradients flow through the softmax
    relaxation of the path scores and the straight-through sign mask.
    ``out_grad`` is the loss gradient at the prediction: exact in supervised
    mode, estimated in bandit mode.
    """
    out_grad = np.atleast_1d(np.asarray(out_grad, dtype=float))
    if out_grad.shape != (params.num_outputs,):
        raise ValueError(
            f"out_grad must have shape ({params.num_outputs},), got {out_grad.shape}"
        )
    zs = layer_inputs(x, params)
    a = zs.pop()
    if not np.all(np.isfinite(a)):
        raise NumericError("non-finite decision activation in backward pass")

    leaf = descend(a, params.height)
    d_leaves = np.zeros_like(params.leaves)
    d_leaves[leaf] = out_grad

    theta_bar = params.leaves @ out_grad
    scores = soft_path_scores(a, theta_bar, tables)
    g_a = activation_grad(a, mixing_coefficients(scores, theta_bar), tables)
    return GradientSet(
        layers=layer_grads_from_activation_grad(params, zs, g_a),
        leaves=d_leaves,
    )


def backprop_batch(X, params: TreeParams, tables: PathTables, out_grads, cache=None) -> GradientSet:
    """Average of the per-example gradients over a batch (vectorized; equals
    looping `backprop` and averaging to float precision).

    ``cache`` may carry precomputed layer inputs from the forward pass to
    avoid recomputing the chain.
    """
    X = np.asarray(X, dtype=float)
    out_grads = np.asarray(out_grads, dtype=float)
    if out_grads.ndim == 1:
        out_grads = out_grads[:, None]
    B = X.shape[0]

    if cache is None:
        zs = [augment_batch(X)]
        for w in params.layers:
            zs.append(zs[-1] @ w.T)
    else:
        zs = cache
    A = zs[-1]
    if not np.all(np.isfinite(A)):
        raise NumericError("non-finite decision activation in backward pass")

    leaves_idx = descend_batch(A, params.height)
    d_leaves = np.zeros_like(params.leaves)
    np.add.at(d_leaves, leaves_idx, out_grads)
    d_leaves /= B

    theta_bar = out_grads @ params.leaves.T  # (B, 2^h)
    signs = np.where(A >= 0, 1.0, -1.0)
    q = np.einsum("bhl,hl->bl", signs[:, tables.node_index], tables.sign.astype(float))
    shifted = np.exp(q - q.max(axis=1, keepdims=True))
    probs = shifted / shifted.sum(axis=1, keepdims=True)
    mixture = np.einsum("bl,bl->b", probs, theta_bar)
    coeffs = probs * (theta_bar - mixture[:, None])
    g_a = _activation_grad_batch(A, coeffs, tables)

    grads = [None] * params.num_layers
    d = g_a
    for m in reversed(range(params.num_layers)):
        grads[m] = d.T @ zs[m] / B
        if m:
            d = d @ params.layers[m]
    return GradientSet(layers=tuple(grads), leaves=d_leaves)


def forward_cache(X, params: TreeParams) -> list[np.ndarray]:
    """Batched layer-input cache for reuse between forward and backward."""
    zs = [augment_batch(X)]
    for w in params.layers:
        zs.append(zs[-1] @ w.T)
    return zs
