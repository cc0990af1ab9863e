"""Hard oblique decision trees backed by a stack of linear layers.

A tree of height ``h`` makes one linear decision per internal node.  Instead
of storing each node's weight vector directly, the model keeps a chain of
linear layers whose product maps the bias-augmented input to all ``2^h - 1``
node activations at once.  The chain can be a single matrix or several
(overparameterized training), and collapses back to one matrix per node for
deployment without leaving the oblique-tree model class.

Node ``(i, j)`` (the ``j``-th node at depth ``i``) lives at flat row
``2^i - 1 + j`` of the activation vector.  Leaves are numbered ``0 .. 2^h-1``
left to right.  An activation of exactly zero routes right.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ConfigError

MAX_HEIGHT = 16


@dataclass(frozen=True)
class PathTables:
    """Per-(depth, leaf) ancestor indices and direction signs.

    ``pred_index[i, l]`` is the index within depth ``i`` of leaf ``l``'s
    ancestor.  ``sign[i, l]`` is -1 when leaf ``l`` lies in the left subtree
    of that ancestor and +1 otherwise.  ``node_index`` is ``pred_index``
    flattened to breadth-first node ids (``2^i - 1 + j``), which is what the
    activation vector is indexed by.
    """

    height: int
    pred_index: np.ndarray
    sign: np.ndarray
    node_index: np.ndarray


def build_path_tables(height: int) -> PathTables:
    """Precompute ancestor/direction tables for a complete tree of `height`."""
    if not isinstance(height, (int, np.integer)) or not 1 <= height <= MAX_HEIGHT:
        raise ConfigError(f"height must be an integer in [1, {MAX_HEIGHT}], got {height!r}")
    height = int(height)
    leaves = np.arange(2**height)
    depths = np.arange(height)[:, None]
    pred = leaves[None, :] >> (height - depths)  # floor(l / 2^(h-i))
    bits = (leaves[None, :] >> (height - 1 - depths)) & 1
    sign = np.where(bits == 1, 1, -1)
    node_index = (1 << depths) - 1 + pred
    return PathTables(height, pred, sign, node_index)


@dataclass(frozen=True)
class TreeParams:
    """Learnable model: layer chain plus leaf-value matrix.

    ``layers[0]`` has ``input_dim + 1`` columns (constant-1 bias coordinate
    appended to the input); the last layer has ``2^height - 1`` rows, one per
    internal node.  ``leaves`` is ``(2^height, num_outputs)``.  Treat
    instances as immutable; training produces new instances.
    """

    height: int
    input_dim: int
    num_outputs: int
    layers: tuple[np.ndarray, ...]
    leaves: np.ndarray

    def __post_init__(self):
        if not 1 <= self.height <= MAX_HEIGHT:
            raise ConfigError(f"height must be in [1, {MAX_HEIGHT}], got {self.height}")
        if self.num_outputs < 1:
            raise ConfigError("num_outputs must be >= 1")
        if len(self.layers) < 1:
            raise ConfigError("need at least one layer")
        object.__setattr__(self, "layers", tuple(self.layers))
        cols = self.input_dim + 1
        for m, w in enumerate(self.layers):
            if w.ndim != 2 or w.shape[1] != cols:
                raise ConfigError(
                    f"layer {m} must have shape (*, {cols}), got {w.shape}"
                )
            cols = w.shape[0]
        if cols != 2**self.height - 1:
            raise ConfigError(
                f"last layer must have {2**self.height - 1} rows, got {cols}"
            )
        if self.leaves.shape != (2**self.height, self.num_outputs):
            raise ConfigError(
                f"leaves must have shape {(2**self.height, self.num_outputs)}, "
                f"got {self.leaves.shape}"
            )

    @property
    def num_layers(self) -> int:
        return len(self.layers)

    @property
    def num_nodes(self) -> int:
        return 2**self.height - 1

    @property
    def num_leaves(self) -> int:
        return 2**self.height


@dataclass(frozen=True)
class ObliqueTree:
    """Deployment form: one weight vector and bias per internal node.

    Routing at a node: right subtree iff ``weights @ x + bias >= 0`` (a tie
    at exactly zero routes right).  Inference costs ``height`` dot products.
    """

    height: int
    weights: np.ndarray  # (2^h - 1, d)
    biases: np.ndarray  # (2^h - 1,)
    leaves: np.ndarray  # (2^h, K)

    def __post_init__(self):
        n = 2**self.height - 1
        if self.weights.shape[0] != n or self.biases.shape != (n,):
            raise ConfigError("node weight/bias shapes inconsistent with height")
        if self.leaves.shape[0] != n + 1:
            raise ConfigError("leaf count inconsistent with height")

    @property
    def input_dim(self) -> int:
        return self.weights.shape[1]

    @property
    def num_outputs(self) -> int:
        return self.leaves.shape[1]

    def route(self, x) -> int:
        x = np.asarray(x, dtype=float)
        j = 0
        for i in range(self.height):
            flat = (1 << i) - 1 + j
            s = self.weights[flat] @ x + self.biases[flat]
            j = 2 * j + (1 if s >= 0 else 0)
        return j

    def predict(self, x) -> np.ndarray:
        return self.leaves[self.route(x)].copy()

    def route_batch(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        j = np.zeros(X.shape[0], dtype=np.int64)
        for i in range(self.height):
            flat = (1 << i) - 1 + j
            s = np.einsum("bd,bd->b", self.weights[flat], X) + self.biases[flat]
            j = 2 * j + (s >= 0)
        return j

    def predict_batch(self, X) -> np.ndarray:
        return self.leaves[self.route_batch(X)]


def augment(x) -> np.ndarray:
    """Append the constant-1 bias coordinate to a feature vector."""
    x = np.asarray(x, dtype=float).ravel()
    return np.append(x, 1.0)


def augment_batch(X) -> np.ndarray:
    X = np.asarray(X, dtype=float)
    return np.hstack([X, np.ones((X.shape[0], 1))])


def decision_activations(x, params: TreeParams) -> np.ndarray:
    """All internal-node activations for one input: the layer-chain product
    applied to ``[x; 1]``.  Entry ``2^i - 1 + j`` belongs to node ``(i, j)``."""
    x = np.asarray(x, dtype=float).ravel()
    if x.shape[0] != params.input_dim:
        raise ValueError(f"expected {params.input_dim} features, got {x.shape[0]}")
    a = augment(x)
    for w in params.layers:
        a = w @ a
    return a


def batch_activations(X, params: TreeParams) -> np.ndarray:
    """(B, 2^h - 1) activations for a batch of raw feature rows."""
    X = np.asarray(X, dtype=float)
    if X.ndim != 2 or X.shape[1] != params.input_dim:
        raise ValueError(f"expected (*, {params.input_dim}) features, got {X.shape}")
    z = augment_batch(X)
    for w in params.layers:
        z = z @ w.T
    return z


def descend(a: np.ndarray, height: int) -> int:
    """Leaf index reached by hard routing over an activation vector."""
    j = 0
    for i in range(height):
        j = 2 * j + (1 if a[(1 << i) - 1 + j] >= 0 else 0)
    return j


def descend_batch(A: np.ndarray, height: int) -> np.ndarray:
    rows = np.arange(A.shape[0])
    j = np.zeros(A.shape[0], dtype=np.int64)
    for i in range(height):
        j = 2 * j + (A[rows, (1 << i) - 1 + j] >= 0)
    return j


def forward_hard(x, params: TreeParams, tables: PathTables):
    """Hard forward pass: returns ``(leaf_index, leaf value vector)``."""
    if tables.height != params.height:
        raise ConfigError("path tables height does not match params height")
    a = decision_activations(x, params)
    leaf = descend(a, params.height)
    return leaf, params.leaves[leaf].copy()


def forward_hard_batch(X, params: TreeParams, tables: PathTables):
    if tables.height != params.height:
        raise ConfigError("path tables height does not match params height")
    A = batch_activations(X, params)
    leaf = descend_batch(A, params.height)
    return leaf, params.leaves[leaf]


def _step(t) -> np.ndarray:
    # hard threshold: 1 iff t >= 0 (note -0.0 >= 0 is true, so an exactly
    # zero activation fires the indicator on both subtrees; hard descent
    # resolves that tie to the right)
    return (np.asarray(t) >= 0).astype(np.int64)


def path_indicator_product(x, params: TreeParams, tables: PathTables, leaf: int) -> int:
    """{0,1} indicator that `x` reaches `leaf`, as a product of per-depth
    step terms.  Exists for testing/ablation; routing uses `forward_hard`."""
    a = decision_activations(x, params)
    terms = _step(a[tables.node_index[:, leaf]] * tables.sign[:, leaf])
    return int(terms.prod())


def path_indicator_sum(x, params: TreeParams, tables: PathTables, leaf: int) -> int:
    """Same indicator written as a thresholded sum of the per-depth terms:
    1 iff all ``height`` terms fire."""
    a = decision_activations(x, params)
    terms = _step(a[tables.node_index[:, leaf]] * tables.sign[:, leaf])
    return int(_step(terms.sum() - tables.height))


def path_indicator_matrix(X, params: TreeParams, tables: PathTables, form: str = "product") -> np.ndarray:
    """(B, 2^h) indicator matrix over all leaves, either form. Vectorized
    counterpart of the scalar indicator ops (same term construction)."""
    A = batch_activations(X, params)
    terms = _step(A[:, tables.node_index] * tables.sign[None, :, :])
    if form == "product":
        return terms.prod(axis=1)
    if form == "sum":
        return _step(terms.sum(axis=1) - tables.height)
    raise ConfigError(f"unknown indicator form {form!r}")


def collapse(params: TreeParams) -> ObliqueTree:
    """Multiply the layer chain into one matrix and re-lay it out as a plain
    oblique tree.  Predictions match the layered hard forward exactly up to
    float associativity (flips only possible at activations within ~1e-9 of
    zero)."""
    m = params.layers[0]
    for w in params.layers[1:]:
        m = w @ m
    return ObliqueTree(
        height=params.height,
        weights=m[:, :-1].copy(),
        biases=m[:, -1].copy(),
        leaves=params.leaves.copy(),
    )


@dataclass(frozen=True)
class PrunedLeaf:
    value: np.ndarray


@dataclass(frozen=True)
class PrunedNode:
    weight: np.ndarray
    bias: float
    left: "PrunedNode | PrunedLeaf"
    right: "PrunedNode | PrunedLeaf"


def _pruned_predict(node, x):
    while isinstance(node, PrunedNode):
        node = node.right if node.weight @ x + node.bias >= 0 else node.left
    return node.value


@dataclass(frozen=True)
class PruneReport:
    node_visits: np.ndarray  # (2^h - 1,) examples reaching each internal node
    leaf_visits: np.ndarray  # (2^h,)
    kept_nodes: int
    removed_nodes: int

    @property
    def unreached_nodes(self) -> np.ndarray:
        return np.flatnonzero(self.node_visits == 0)

    @property
    def unreached_leaves(self) -> np.ndarray:
        return np.flatnonzero(self.leaf_visits == 0)


class PrunedTree:
    """Result of reachability pruning; no longer a complete binary tree."""

    def __init__(self, root):
        self.root = root

    def predict(self, x) -> np.ndarray:
        return _pruned_predict(self.root, np.asarray(x, dtype=float))

    def predict_batch(self, X) -> np.ndarray:
        return np.stack([self.predict(x) for x in np.asarray(X, dtype=float)])

    def count_internal(self) -> int:
        stack, n = [self.root], 0
        while stack:
            node = stack.pop()
            if isinstance(node, PrunedNode):
                n += 1
                stack.extend((node.left, node.right))
        return n


def visit_counts(tree: ObliqueTree, X) -> tuple[np.ndarray, np.ndarray]:
    """Route every row once; count visits per internal node and per leaf."""
    X = np.asarray(X, dtype=float)
    node_visits = np.zeros(2**tree.height - 1, dtype=np.int64)
    j = np.zeros(X.shape[0], dtype=np.int64)
    for i in range(tree.height):
        flat = (1 << i) - 1 + j
        np.add.at(node_visits, flat, 1)
        s = np.einsum("bd,bd->b", tree.weights[flat], X) + tree.biases[flat]
        j = 2 * j + (s >= 0)
    leaf_visits = np.bincount(j, minlength=2**tree.height)
    return node_visits, leaf_visits


def prune_unreached(tree, data) -> tuple[PrunedTree, PruneReport]:
    """Single-pass reachability pruning.

    Routes every example once; any internal node with one child subtree
    receiving zero examples is replaced by the other child.  The pruned tree
    predicts identically to the input tree on the routing dataset.  Accepts
    either the collapsed or the layered form.
    """
    if isinstance(tree, TreeParams):
        tree = collapse(tree)
    X = np.asarray(data, dtype=float)
    if X.ndim != 2 or X.shape[0] == 0:
        raise ConfigError("pruning requires a non-empty 2-D dataset")
    node_visits, leaf_visits = visit_counts(tree, X)
    h = tree.height

    def count(i, j):
        return leaf_visits[j] if i == h else node_visits[(1 << i) - 1 + j]

    def build(i, j):
        if i == h:
            return PrunedLeaf(tree.leaves[j].copy())
        left_n, right_n = count(i + 1, 2 * j), count(i + 1, 2 * j + 1)
        if left_n == 0:
            return build(i + 1, 2 * j + 1)
        if right_n == 0:
            return build(i + 1, 2 * j)
        flat = (1 << i) - 1 + j
        return PrunedNode(
            weight=tree.weights[flat].copy(),
            bias=float(tree.biases[flat]),
            left=build(i + 1, 2 * j),
            right=build(i + 1, 2 * j + 1),
        )

    pruned = PrunedTree(build(0, 0))
    kept = pruned.count_internal()
    report = PruneReport(
        node_visits=node_visits,
        leaf_visits=leaf_visits,
        kept_nodes=kept,
        removed_nodes=int(2**h - 1 - kept),
    )
    return pruned, report
