"""Associative evaluation of many binary convolutions against one input window.

Every binary tensor ``B`` except the tree root is evaluated from its
parent's result ``s = X * P`` using only the positions where the two
tensors differ (when they mostly agree) or where they agree (when they
mostly disagree):

    r >= 0:  X * B = s + 2 * (X * tern(P, B))
    r <  0:  X * B = 2 * (X * tern(~P, B)) - s

with ``tern(x, y) = (y - x) / 2`` taking values in {-1, 0, +1}.

Counting conventions (also written into CLI reports):
  * a direct binary convolution costs ``t`` FADDs;
  * one associative step costs ``nnz + 1`` FADDs, i.e. ``(t - |r|)/2 + 1``,
    one doubling and ``t`` ternary selects;
  * combining ``m`` scaled results per output costs ``m`` FMULs and
    ``m - 1`` FADDs.
"""
from __future__ import annotations

import heapq
from dataclasses import dataclass, field, fields
from typing import Sequence

import numpy as np

from .tensor import BinaryTensor, RealTensor, Shape, Sketch, binary_inner_product, sign_matrix

EQ12 = "eq12"
EQ13 = "eq13"


@dataclass
class OpCounter:
    fadds: int = 0
    fmuls: int = 0
    ternary_selects: int = 0
    doublings: int = 0

    def merge(self, other: "OpCounter") -> "OpCounter":
        for f in fields(self):
            setattr(self, f.name, getattr(self, f.name) + getattr(other, f.name))
        return self

    def __add__(self, other: "OpCounter") -> "OpCounter":
        return OpCounter().merge(self).merge(other)

    def as_dict(self) -> dict[str, int]:
        return {f.name: getattr(self, f.name) for f in fields(self)}


@dataclass(frozen=True)
class TernaryTensor:
    """Sparse {-1, 0, +1} tensor: sorted flat indices of the nonzeros and their signs."""

    shape: Shape
    indices: np.ndarray
    signs: np.ndarray

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int64)
        sg = np.asarray(self.signs, dtype=np.int8)
        if idx.shape != sg.shape or idx.ndim != 1:
            raise ValueError("indices and signs must be 1-D and equal length")
        if idx.size and (idx[0] < 0 or idx[-1] >= self.shape.t or np.any(np.diff(idx) <= 0)):
            raise ValueError("indices must be strictly increasing within [0, t)")
        if not np.all((sg == 1) | (sg == -1)):
            raise ValueError("ternary nonzeros must be +1 or -1")
        idx.flags.writeable = False
        sg.flags.writeable = False
        object.__setattr__(self, "indices", idx)
        object.__setattr__(self, "signs", sg)

    @property
    def nnz(self) -> int:
        return int(self.indices.size)

    def entries(self) -> list[tuple[int, int]]:
        return list(zip(self.indices.tolist(), self.signs.tolist()))

    def dense(self) -> np.ndarray:
        out = np.zeros(self.shape.t, dtype=np.int8)
        out[self.indices] = self.signs
        return out


def tern_combine(B0: BinaryTensor, B1: BinaryTensor) -> TernaryTensor:
    """-1 where (B0, B1) = (+1, -1), +1 where (-1, +1), zero where they agree."""
    if B0.shape != B1.shape:
        raise ValueError(f"shape mismatch: {B0.shape} vs {B1.shape}")
    b0, b1 = B0.bits(), B1.bits()
    idx = np.flatnonzero(b0 != b1)
    signs = np.where(b1[idx], 1, -1)
    return TernaryTensor(B0.shape, idx, signs)


def ternary_conv(X: RealTensor, T: TernaryTensor, counter: OpCounter) -> float:
    if X.shape != T.shape:
        raise ValueError(f"shape mismatch: {X.shape} vs {T.shape}")
    counter.ternary_selects += T.shape.t
    counter.fadds += T.nnz
    return float(X.data[T.indices] @ T.signs)


def distance(B0: BinaryTensor, B1: BinaryTensor) -> int:
    t = B0.shape.t
    r = binary_inner_product(B0, B1)
    return min((t + r) // 2, (t - r) // 2)


@dataclass(frozen=True)
class TreeNode:
    key: int
    parent: int | None
    edge_ternary: TernaryTensor | None = None
    eq_choice: str | None = None
    edge_r: int | None = None

    @property
    def edge_cost(self) -> int:
        """FADDs spent deriving this node from its parent."""
        return self.edge_ternary.nnz + 1 if self.parent is not None else 0


@dataclass(frozen=True)
class DependencyTree:
    root: int
    nodes: tuple[TreeNode, ...]
    children: dict[int, tuple[int, ...]] = field(compare=False, repr=False)

    @property
    def size(self) -> int:
        return len(self.nodes)

    def node(self, key: int) -> TreeNode:
        return self.nodes[key]

    def edges(self) -> list[tuple[int, int]]:
        return [(n.parent, n.key) for n in self.nodes if n.parent is not None]

    def total_weight(self) -> int:
        """Sum of edge distances ``min((t+r)/2, (t-r)/2)``."""
        return sum(n.edge_ternary.nnz for n in self.nodes if n.parent is not None)

    def fadds_per_window(self, t: int) -> int:
        return t + sum(n.edge_cost for n in self.nodes)

    def traversal(self) -> list[int]:
        """Depth-first order from the root, children in ascending index."""
        order, stack = [], [self.root]
        while stack:
            k = stack.pop()
            order.append(k)
            stack.extend(reversed(self.children.get(k, ())))
        return order


def _make_edge(key: int, parent: int, tensors: Sequence[BinaryTensor], r: int) -> TreeNode:
    P, B = tensors[parent], tensors[key]
    if r >= 0:
        return TreeNode(key, parent, tern_combine(P, B), EQ12, r)
    return TreeNode(key, parent, tern_combine(~P, B), EQ13, r)


def tree_from_parents(tensors: Sequence[BinaryTensor], parents: Sequence[int | None],
                      r_matrix: np.ndarray | None = None) -> DependencyTree:
    """Assemble a tree from a parent array, precomputing every edge's ternary tensor."""
    k = len(tensors)
    if len(parents) != k:
        raise ValueError("one parent entry per tensor required")
    roots = [i for i, p in enumerate(parents) if p is None]
    if len(roots) != 1:
        raise ValueError(f"expected exactly one root, found {len(roots)}")
    if r_matrix is None:
        r_matrix = gram_matrix(tensors)
    nodes, children = [], {}
    for i, p in enumerate(parents):
        if p is None:
            nodes.append(TreeNode(i, None))
        else:
            nodes.append(_make_edge(i, p, tensors, int(r_matrix[p, i])))
            children.setdefault(p, []).append(i)
    tree = DependencyTree(roots[0], tuple(nodes), {p: tuple(sorted(c)) for p, c in children.items()})
    if len(tree.traversal()) != k:
        raise ValueError("parent array does not describe a tree")
    return tree


def gram_matrix(tensors: Sequence[BinaryTensor]) -> np.ndarray:
    """All pairwise integer inner products ``r``."""
    S = sign_matrix(tensors)
    return np.rint(S @ S.T).astype(np.int64)


def distance_matrix(tensors: Sequence[BinaryTensor]) -> np.ndarray:
    t = tensors[0].shape.t
    R = gram_matrix(tensors)
    return (t - np.abs(R)) // 2


def _check_uniform(tensors: Sequence[BinaryTensor]):
    if not tensors:
        raise ValueError("need at least one tensor")
    shape = tensors[0].shape
    if any(b.shape != shape for b in tensors):
        raise ValueError("all tensors must share one shape")


def build_mst(tensors: Sequence[BinaryTensor]) -> DependencyTree:
    """Prim's algorithm on the complete distance graph, rooted at tensor 0.

    Among equal-weight frontier edges the lowest (parent, child) pair wins.
    """
    _check_uniform(tensors)
    k = len(tensors)
    R = gram_matrix(tensors)
    t = tensors[0].shape.t
    D = (t - np.abs(R)) // 2
    big = np.iinfo(np.int64).max
    in_tree = np.zeros(k, dtype=bool)
    key = np.full(k, big, dtype=np.int64)
    parent = np.full(k, k, dtype=np.int64)
    in_tree[0] = True
    key[:] = D[0]
    parent[:] = 0
    parents: list[int | None] = [None] * k
    for _ in range(k - 1):
        cand = np.flatnonzero(~in_tree)
        # lexicographic (weight, parent, child) minimum
        order = np.lexsort((cand, parent[cand], key[cand]))
        v = int(cand[order[0]])
        in_tree[v] = True
        parents[v] = int(parent[v])
        d = D[v]
        better = (~in_tree) & ((d < key) | ((d == key) & (v < parent)))
        key[better] = d[better]
        parent[better] = v
    return tree_from_parents(tensors, parents, R)


def _prufer_to_edges(seq: Sequence[int], k: int) -> list[tuple[int, int]]:
    degree = [1] * k
    for x in seq:
        degree[x] += 1
    edges = []
    leaves = [i for i in range(k) if degree[i] == 1]
    heapq.heapify(leaves)
    for x in seq:
        leaf = heapq.heappop(leaves)
        edges.append((leaf, x))
        degree[x] -= 1
        if degree[x] == 1:
            heapq.heappush(leaves, x)
    u, v = heapq.heappop(leaves), heapq.heappop(leaves)
    edges.append((u, v))
    return edges


def build_random_tree(tensors: Sequence[BinaryTensor], seed: int | None = 0) -> DependencyTree:
    """Uniformly random labelled spanning tree (via a random Pruefer sequence), rooted at 0."""
    _check_uniform(tensors)
    k = len(tensors)
    parents: list[int | None] = [None] * k
    if k > 1:
        rng = np.random.default_rng(seed)
        seq = rng.integers(0, k, size=k - 2).tolist() if k > 2 else []
        adj: dict[int, list[int]] = {i: [] for i in range(k)}
        for u, v in _prufer_to_edges(seq, k):
            adj[u].append(v)
            adj[v].append(u)
        seen, stack = {0}, [0]
        while stack:
            u = stack.pop()
            for v in adj[u]:
                if v not in seen:
                    seen.add(v)
                    parents[v] = u
                    stack.append(v)
    return tree_from_parents(tensors, parents)


def direct_conv(X: RealTensor, B: BinaryTensor, counter: OpCounter) -> float:
    if X.shape != B.shape:
        raise ValueError(f"shape mismatch: {X.shape} vs {B.shape}")
    counter.fadds += X.shape.t
    return float(X.data @ B.signs())


def assoc_conv_step(s: float, X: RealTensor, node: TreeNode, counter: OpCounter) -> float:
    """Derive ``X * B_node`` from its parent's result ``s``."""
    part = ternary_conv(X, node.edge_ternary, counter)
    counter.fadds += 1
    counter.doublings += 1
    if node.eq_choice == EQ12:
        return s + 2.0 * part
    return 2.0 * part - s


def direct_convolve_all(X: RealTensor, tensors: Sequence[BinaryTensor], counter: OpCounter) -> list[float]:
    return [direct_conv(X, B, counter) for B in tensors]


def associative_convolve_all(X: RealTensor, tensors: Sequence[BinaryTensor], tree: DependencyTree,
                             counter: OpCounter) -> list[float]:
    if tree.size != len(tensors):
        raise ValueError("tree does not span the given tensors")
    out: list[float | None] = [None] * len(tensors)
    for k in tree.traversal():
        node = tree.node(k)
        if node.parent is None:
            out[k] = direct_conv(X, tensors[k], counter)
        else:
            out[k] = assoc_conv_step(out[node.parent], X, node, counter)
    return out


# Batched variants: the same computations over a (P, t) matrix of windows.
# Operation counts are per window, so they scale by P.

def direct_convolve_batch(windows: np.ndarray, tensors: Sequence[BinaryTensor],
                          counter: OpCounter) -> np.ndarray:
    P, t = windows.shape
    counter.fadds += P * t * len(tensors)
    return windows @ sign_matrix(tensors).T


def associative_convolve_batch(windows: np.ndarray, tensors: Sequence[BinaryTensor],
                               tree: DependencyTree, counter: OpCounter) -> np.ndarray:
    P, t = windows.shape
    out = np.empty((P, len(tensors)))
    for k in tree.traversal():
        node = tree.node(k)
        if node.parent is None:
            out[:, k] = windows @ tensors[k].signs()
            counter.fadds += P * t
            continue
        tern = node.edge_ternary
        part = windows[:, tern.indices] @ tern.signs.astype(np.float64)
        counter.ternary_selects += P * t
        counter.fadds += P * (tern.nnz + 1)
        counter.doublings += P
        s = out[:, node.parent]
        out[:, k] = s + 2.0 * part if node.eq_choice == EQ12 else 2.0 * part - s
    return out


@dataclass(frozen=True)
class FeatureMap:
    """Dense real volume of shape ``(c, W, H)``."""

    data: np.ndarray

    def __post_init__(self):
        arr = np.array(self.data, dtype=np.float64)
        if arr.ndim != 3:
            raise ValueError("feature map must be 3-D (c, W, H)")
        if not np.all(np.isfinite(arr)):
            raise ValueError("feature map contains non-finite values")
        arr.flags.writeable = False
        object.__setattr__(self, "data", arr)

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape


def extract_windows(fm: FeatureMap, kernel: Shape, stride: int = 1) -> tuple[np.ndarray, tuple[int, int]]:
    """All valid-convolution windows as rows of a ``(P, t)`` matrix, plus the output size."""
    c, W, H = fm.shape
    if stride < 1:
        raise ValueError("stride must be positive")
    if c != kernel.c or W < kernel.w or H < kernel.h:
        raise ValueError(f"kernel {kernel.dims} does not fit feature map {fm.shape}")
    view = np.lib.stride_tricks.sliding_window_view(fm.data, (kernel.w, kernel.h), axis=(1, 2))
    view = view[:, ::stride, ::stride]  # (c, Wo, Ho, w, h)
    Wo, Ho = view.shape[1], view.shape[2]
    windows = view.transpose(1, 2, 0, 3, 4).reshape(Wo * Ho, kernel.t)
    return np.ascontiguousarray(windows), (Wo, Ho)


def layer_tensors(layer_sketches: Sequence[Sketch]) -> tuple[list[BinaryTensor], list[tuple[int, int]]]:
    """Flatten all basis tensors of a layer, with their (filter, term) origin."""
    tensors, origin = [], []
    for i, sk in enumerate(layer_sketches):
        for j, b in enumerate(sk.basis):
            tensors.append(b)
            origin.append((i, j))
    return tensors, origin


def build_tree(tensors: Sequence[BinaryTensor], tree_mode: str, seed: int | None = 0) -> DependencyTree | None:
    if tree_mode == "mst":
        return build_mst(tensors)
    if tree_mode == "random":
        return build_random_tree(tensors, seed)
    if tree_mode == "none":
        return None
    raise ValueError(f"unknown tree mode {tree_mode!r}")


def sketch_layer_convolve(fm: FeatureMap, layer_sketches: Sequence[Sketch], tree_mode: str,
                          stride: int, counter: OpCounter, seed: int | None = 0,
                          combine_counter: OpCounter | None = None,
                          tree: DependencyTree | None = None) -> list[FeatureMap]:
    """Valid convolution of a feature map with every sketched filter of a layer.

    Binary convolutions are charged to ``counter``; the per-output scaled
    combination is charged to ``combine_counter`` (``counter`` if omitted).
    """
    if not layer_sketches:
        return []
    shape = layer_sketches[0].shape
    if any(s.shape != shape for s in layer_sketches):
        raise ValueError("all filters of a layer must share one shape")
    windows, (Wo, Ho) = extract_windows(fm, shape, stride)
    P = windows.shape[0]
    tensors, origin = layer_tensors(layer_sketches)
    outputs = [np.zeros(P) for _ in layer_sketches]
    if tensors:
        if tree is None:
            tree = build_tree(tensors, tree_mode, seed)
        if tree is None:
            y = direct_convolve_batch(windows, tensors, counter)
        else:
            y = associative_convolve_batch(windows, tensors, tree, counter)
        for col, (i, j) in enumerate(origin):
            outputs[i] = outputs[i] + layer_sketches[i].scales[j] * y[:, col]
    cc = counter if combine_counter is None else combine_counter
    for sk in layer_sketches:
        cc.fmuls += P * sk.m
        cc.fadds += P * max(sk.m - 1, 0)
    return [FeatureMap(o.reshape(1, Wo, Ho)) for o in outputs]


def dense_convolve(fm: FeatureMap, kernel: RealTensor, stride: int = 1) -> FeatureMap:
    """Reference full-precision valid convolution (cross-correlation)."""
    windows, (Wo, Ho) = extract_windows(fm, kernel.shape, stride)
    return FeatureMap((windows @ kernel.data).reshape(1, Wo, Ho))
