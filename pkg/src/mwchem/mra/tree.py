"""Adaptive multiwavelet representation of real functions on [-L, L]^d.

A function is stored as a map from tree nodes to blocks of k^d scaling
coefficients; the leaf nodes partition the domain.  Refinement is driven by
the norm of the wavelet coefficients of each candidate split, scaled per
level as eps * 2^(-n/2).  All coefficient blocks are expressed in the basis
that is orthonormal in L2(du) on the user domain, so inner products and
norms are plain dot products of coefficients.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass, field
from itertools import product as _iproduct
from typing import Callable, Iterable, NamedTuple, Sequence

import numpy as np

from .basis import MultiwaveletBasis

__all__ = [
    "NodeKey",
    "MRAConfig",
    "FunctionTree",
    "project",
    "add",
    "linear_combination",
    "multiply",
    "inner",
    "evaluate",
    "apply_laplacian_expectation",
]


class NodeKey(NamedTuple):
    """Tree node at refinement level n with translation l in [0, 2^n)^d."""

    n: int
    l: tuple[int, ...]

    def child(self, delta: tuple[int, ...]) -> "NodeKey":
        return NodeKey(self.n + 1, tuple(2 * li + di for li, di in zip(self.l, delta)))

    def children(self) -> list["NodeKey"]:
        return [self.child(d) for d in _iproduct((0, 1), repeat=len(self.l))]

    def parent(self) -> "NodeKey":
        if self.n == 0:
            raise ValueError("root has no parent")
        return NodeKey(self.n - 1, tuple(li // 2 for li in self.l))


@dataclass(frozen=True)
class MRAConfig:
    """Projection parameters: polynomial order, threshold, box size, depths."""

    k: int = 7
    eps: float = 1e-4
    L: float = 50.0
    max_depth: int = 20
    initial_depth: int = 2

    def __post_init__(self):
        if self.k < 2:
            raise ValueError(f"k must be >= 2, got {self.k}")
        if self.eps <= 0:
            raise ValueError("eps must be positive")
        if not 0 <= self.initial_depth <= self.max_depth:
            raise ValueError("need 0 <= initial_depth <= max_depth")
        if self.L <= 0:
            raise ValueError("box half-width must be positive")


def _apply_axis(mat: np.ndarray, block: np.ndarray, axis: int) -> np.ndarray:
    """Contract mat[i, j] with axis `axis` of block, keeping axis order."""
    out = np.tensordot(mat, block, axes=([1], [axis]))
    return np.moveaxis(out, 0, axis)


def _child_block(basis: MultiwaveletBasis, block: np.ndarray, delta: tuple[int, ...]) -> np.ndarray:
    """Exact scaling coefficients of child `delta` of a node holding `block`."""
    h = (basis.h0, basis.h1)
    out = block
    for ax, d in enumerate(delta):
        out = _apply_axis(h[d].T, out, ax)
    return out


def _stack_children(blocks: dict[tuple[int, ...], np.ndarray], k: int, d: int) -> np.ndarray:
    out = np.zeros((2 * k,) * d)
    for delta, blk in blocks.items():
        idx = tuple(slice(di * k, (di + 1) * k) for di in delta)
        out[idx] = blk
    return out


def _two_scale(basis: MultiwaveletBasis, stacked: np.ndarray) -> np.ndarray:
    out = stacked
    for ax in range(stacked.ndim):
        out = _apply_axis(basis.filter, out, ax)
    return out


def _two_scale_inv(basis: MultiwaveletBasis, ns: np.ndarray) -> np.ndarray:
    out = ns
    for ax in range(ns.ndim):
        out = _apply_axis(basis.filter.T, out, ax)
    return out


class FunctionTree:
    """Immutable adaptive representation of a real function on [-L, L]^d."""

    def __init__(self, d: int, L: float, basis: MultiwaveletBasis, eps: float,
                 leaves: dict[NodeKey, np.ndarray], max_depth_hit: Sequence[NodeKey] = ()):
        if d not in (1, 3):
            raise ValueError(f"only d in (1, 3) supported, got {d}")
        self.d = d
        self.L = float(L)
        self.basis = basis
        self.eps = float(eps)
        self.leaves = leaves
        self.max_depth_hit = list(max_depth_hit)
        self._internal: set[NodeKey] | None = None
        self._internal_s: dict[NodeKey, np.ndarray] = {}

    # -- structure ---------------------------------------------------------

    @property
    def k(self) -> int:
        return self.basis.k

    def node_scale(self, n: int) -> float:
        """L2 length scale of a level-n node: (node width)^(d/2)."""
        return (2.0 * self.L * 2.0 ** (-n)) ** (self.d / 2.0)

    def internal_keys(self) -> set[NodeKey]:
        if self._internal is None:
            internal: set[NodeKey] = set()
            for key in self.leaves:
                k = key
                while k.n > 0:
                    k = k.parent()
                    if k in internal:
                        break
                    internal.add(k)
            if NodeKey(0, (0,) * self.d) in self.leaves:
                pass
            self._internal = internal
        return self._internal

    def is_internal(self, key: NodeKey) -> bool:
        return key in self.internal_keys()

    def depth(self) -> int:
        return max(key.n for key in self.leaves)

    def scaling_block(self, key: NodeKey) -> np.ndarray | None:
        """Exact scaling block at any key inside the domain, else None.

        Leaf keys return the stored block, internal keys the filtered
        projection of their subtree, keys below a leaf the polynomial
        reconstruction from that leaf.
        """
        if any(li < 0 or li >= 2 ** key.n for li in key.l):
            return None
        blk = self.leaves.get(key)
        if blk is not None:
            return blk
        if self.is_internal(key):
            return self._internal_block(key)
        walk = key
        deltas: list[tuple[int, ...]] = []
        while walk.n > 0:
            deltas.append(tuple(li & 1 for li in walk.l))
            walk = walk.parent()
            blk = self.leaves.get(walk)
            if blk is not None:
                for delta in reversed(deltas):
                    blk = _child_block(self.basis, blk, delta)
                return blk
            if self.is_internal(walk):
                break
        return None

    def _internal_block(self, key: NodeKey) -> np.ndarray:
        cached = self._internal_s.get(key)
        if cached is not None:
            return cached
        h = (self.basis.h0, self.basis.h1)
        out = np.zeros((self.k,) * self.d)
        for delta in _iproduct((0, 1), repeat=self.d):
            child = key.child(delta)
            blk = self.leaves.get(child)
            if blk is None:
                blk = self._internal_block(child)
            part = blk
            for ax, di in enumerate(delta):
                part = _apply_axis(h[di], part, ax)
            out += part
        self._internal_s[key] = out
        return out

    # -- scalar reductions ---------------------------------------------------

    def integral(self) -> float:
        zero = (0,) * self.d
        return float(sum(self.leaves[key][zero] * self.node_scale(key.n)
                         for key in sorted(self.leaves)))

    def norm(self) -> float:
        return float(np.sqrt(sum(float(np.vdot(b, b)) for _, b in sorted(self.leaves.items()))))

    def squared_norm(self) -> float:
        return float(sum(float(np.vdot(b, b)) for _, b in sorted(self.leaves.items())))

    # -- evaluation ----------------------------------------------------------

    def __call__(self, r) -> float:
        return evaluate(self, r)

    # -- arithmetic ----------------------------------------------------------

    def __add__(self, other: "FunctionTree") -> "FunctionTree":
        return add(self, other, 1.0, 1.0)

    def __sub__(self, other: "FunctionTree") -> "FunctionTree":
        return add(self, other, 1.0, -1.0)

    def __mul__(self, other):
        if isinstance(other, FunctionTree):
            return multiply(self, other)
        return self.scaled(float(other))

    def __rmul__(self, scalar) -> "FunctionTree":
        return self.scaled(float(scalar))

    def scaled(self, c: float) -> "FunctionTree":
        return FunctionTree(self.d, self.L, self.basis, self.eps,
                            {k: c * b for k, b in self.leaves.items()},
                            self.max_depth_hit)

    def normalized(self) -> "FunctionTree":
        n = self.norm()
        if n == 0:
            raise ZeroDivisionError("cannot normalize the zero function")
        return self.scaled(1.0 / n)

    def truncated(self, eps: float | None = None) -> "FunctionTree":
        """Merge sibling leaves whose wavelet norm is below the threshold."""
        eps = self.eps if eps is None else eps
        leaves = dict(self.leaves)
        merged = True
        while merged:
            merged = False
            by_parent: dict[NodeKey, list[NodeKey]] = {}
            for key in leaves:
                if key.n == 0:
                    continue
                by_parent.setdefault(key.parent(), []).append(key)
            for parent in sorted(by_parent, key=lambda p: -p.n):
                kids = by_parent[parent]
                if len(kids) != 2 ** self.d or any(k not in leaves for k in kids):
                    continue
                stacked = _stack_children(
                    {tuple(ki - 2 * pi for ki, pi in zip(c.l, parent.l)): leaves[c] for c in kids},
                    self.k, self.d)
                ns = _two_scale(self.basis, stacked)
                corner = ns[(slice(0, self.k),) * self.d]
                wnorm = np.sqrt(max(float(np.vdot(ns, ns)) - float(np.vdot(corner, corner)), 0.0))
                if wnorm <= eps * 2.0 ** (-parent.n / 2.0):
                    for c in kids:
                        del leaves[c]
                    leaves[parent] = corner.copy()
                    merged = True
        return FunctionTree(self.d, self.L, self.basis, eps, leaves, self.max_depth_hit)

    # -- calculus -------------------------------------------------------------

    def derivative(self, axis: int) -> "FunctionTree":
        """Weak first derivative along `axis` with central face fluxes.

        Neighbor blocks are fetched at the leaf's own level (reconstructed or
        filtered as needed); a neighbor outside the box contributes zero.
        """
        if not 0 <= axis < self.d:
            raise ValueError(f"axis {axis} out of range for d={self.d}")
        b = self.basis
        out: dict[NodeKey, np.ndarray] = {}
        for key in sorted(self.leaves):
            blk = self.leaves[key]
            lm = list(key.l)
            lm[axis] -= 1
            lp = list(key.l)
            lp[axis] += 1
            left = self.scaling_block(NodeKey(key.n, tuple(lm)))
            right = self.scaling_block(NodeKey(key.n, tuple(lp)))
            acc = _apply_axis(b.deriv_center, blk, axis)
            if left is not None:
                acc = acc + _apply_axis(b.deriv_left, left, axis)
            if right is not None:
                acc = acc + _apply_axis(b.deriv_right, right, axis)
            out[key] = acc * (2.0 ** key.n / (2.0 * self.L))
        return FunctionTree(self.d, self.L, self.basis, self.eps, out, self.max_depth_hit)

    # -- serialization ---------------------------------------------------------

    def save(self, path: str) -> None:
        """Binary layout: header {d, k, L, eps}, then sorted (NodeKey, block) records."""
        with open(path, "wb") as fh:
            fh.write(b"MWTREE1\x00")
            fh.write(struct.pack("<qqddq", self.d, self.k, self.L, self.eps, len(self.leaves)))
            for key in sorted(self.leaves):
                fh.write(struct.pack(f"<q{self.d}q", key.n, *key.l))
                fh.write(self.leaves[key].astype("<f8").tobytes())

    @staticmethod
    def load(path: str) -> "FunctionTree":
        with open(path, "rb") as fh:
            if fh.read(8) != b"MWTREE1\x00":
                raise ValueError(f"{path}: not a function-tree file")
            d, k, L, eps, nleaves = struct.unpack("<qqddq", fh.read(40))
            basis = MultiwaveletBasis.get(k)
            leaves = {}
            for _ in range(nleaves):
                rec = struct.unpack(f"<q{d}q", fh.read(8 * (1 + d)))
                key = NodeKey(rec[0], tuple(rec[1:]))
                blk = np.frombuffer(fh.read(8 * k ** d), dtype="<f8").reshape((k,) * d)
                leaves[key] = blk.copy()
        return FunctionTree(d, L, basis, eps, leaves)


# -- projection ----------------------------------------------------------------


def _make_sampler(f: Callable, d: int, L: float) -> Callable[[np.ndarray], np.ndarray]:
    """Wrap a user functor (f(x) or f(x,y,z), scalar or vectorized)."""
    probe = np.zeros(2) if d == 1 else [np.zeros(2)] * 3

    def vectorized(points):
        vals = f(points) if d == 1 else f(points[:, 0], points[:, 1], points[:, 2])
        return np.asarray(vals, dtype=float)

    try:
        out = vectorized(np.zeros((2, d)) if d == 3 else np.zeros(2))
        if out.shape != (2,):
            raise TypeError
        return vectorized
    except Exception:
        def pointwise(points):
            if d == 1:
                return np.array([float(f(x)) for x in points])
            return np.array([float(f(*p)) for p in points])
        return pointwise


def _node_points(key: NodeKey, L: float, quad_x: np.ndarray, d: int) -> np.ndarray:
    """Quadrature points of a node in user coordinates, shape (npts^d, d)."""
    axes = [(2.0 * L) * ((li + quad_x) / 2.0 ** key.n) - L for li in key.l]
    grids = np.meshgrid(*axes, indexing="ij")
    return np.stack([g.ravel() for g in grids], axis=-1)


def project(f: Callable, cfg: MRAConfig, d: int = 3,
            refine_points: Iterable[Sequence[float]] = (),
            force_depth: int = 0) -> FunctionTree:
    """Project a pointwise-evaluable function onto an adaptive tree.

    Refinement of a node stops once the wavelet norm of its split falls
    below eps * 2^(-n/2); nodes containing one of `refine_points` (or lying
    within one node width of one) are refined to `force_depth` regardless,
    which protects sharp features from undersampling.
    """
    basis = MultiwaveletBasis.get(cfg.k)
    sampler = _make_sampler(f, d, cfg.L)
    quad = np.outer(basis.quad_w, np.ones(1)).ravel()
    qmat = basis.scaling_values(basis.quad_x) * basis.quad_w  # k x npts
    special = [np.asarray(p, dtype=float).reshape(d) for p in refine_points]

    leaves: dict[NodeKey, np.ndarray] = {}
    flagged: list[NodeKey] = []

    def sample_block(key: NodeKey) -> np.ndarray:
        pts = _node_points(key, cfg.L, basis.quad_x, d)
        vals = sampler(pts if d == 3 else pts[:, 0])
        if not np.all(np.isfinite(vals)):
            bad = pts[int(np.argmin(np.isfinite(vals)))]
            raise ValueError(f"function returned a non-finite value at {tuple(bad)}")
        block = vals.reshape((basis.quad_x.size,) * d)
        for ax in range(d):
            block = _apply_axis(qmat, block, ax)
        width = 2.0 * cfg.L * 2.0 ** (-key.n)
        return block * width ** (d / 2.0)

    def forces(key: NodeKey) -> bool:
        if key.n >= force_depth or not special:
            return False
        width = 2.0 * cfg.L * 2.0 ** (-key.n)
        lo = np.array([(2.0 * cfg.L) * (li / 2.0 ** key.n) - cfg.L for li in key.l])
        for p in special:
            if np.all(p >= lo - width) and np.all(p <= lo + 2 * width):
                return True
        return False

    def build(key: NodeKey) -> None:
        kids = {delta: sample_block(key.child(delta))
                for delta in _iproduct((0, 1), repeat=d)}
        ns = _two_scale(basis, _stack_children(kids, cfg.k, d))
        corner = ns[(slice(0, cfg.k),) * d]
        wnorm = np.sqrt(max(float(np.vdot(ns, ns)) - float(np.vdot(corner, corner)), 0.0))
        needs = wnorm > cfg.eps * 2.0 ** (-key.n / 2.0) or forces(key)
        if not needs:
            leaves[key] = corner.copy()
            return
        if key.n + 1 > cfg.max_depth:
            flagged.append(key)
            leaves[key] = corner.copy()
            return
        for delta in _iproduct((0, 1), repeat=d):
            build(key.child(delta))

    def descend(key: NodeKey) -> None:
        if key.n < cfg.initial_depth:
            for delta in _iproduct((0, 1), repeat=d):
                descend(key.child(delta))
        else:
            build(key)

    descend(NodeKey(0, (0,) * d))
    return FunctionTree(d, cfg.L, basis, cfg.eps, leaves, flagged)


# -- co-traversal of several trees ----------------------------------------------


def _check_compatible(trees: Sequence[FunctionTree]) -> None:
    t0 = trees[0]
    for t in trees[1:]:
        if t.d != t0.d or t.basis.k != t0.basis.k or abs(t.L - t0.L) > 1e-12:
            raise ValueError("trees live on different domains or bases")


def _union_leaves(trees: Sequence[FunctionTree]):
    """Yield (key, blocks) on the union refinement; every block is exact there."""
    d = trees[0].d
    basis = trees[0].basis
    root = NodeKey(0, (0,) * d)

    def state_of(tree: FunctionTree, key: NodeKey):
        blk = tree.leaves.get(key)
        if blk is not None:
            return blk
        if tree.is_internal(key):
            return None
        raise RuntimeError("tree does not cover the domain")

    def walk(key, states):
        if all(s is not None for s in states):
            yield key, states
            return
        for delta in _iproduct((0, 1), repeat=d):
            ck = key.child(delta)
            child_states = []
            for tree, st in zip(trees, states):
                if st is not None:
                    child_states.append(_child_block(basis, st, delta))
                else:
                    child_states.append(state_of(tree, ck))
            yield from walk(ck, child_states)

    yield from walk(root, [state_of(t, root) for t in trees])


def linear_combination(coeffs: Sequence[float], trees: Sequence[FunctionTree]) -> FunctionTree:
    """Sum of c_j * tree_j on the union refinement (no re-truncation)."""
    if len(coeffs) != len(trees) or not trees:
        raise ValueError("need one coefficient per tree")
    _check_compatible(trees)
    leaves = {}
    for key, blocks in _union_leaves(trees):
        acc = coeffs[0] * blocks[0]
        for c, b in zip(coeffs[1:], blocks[1:]):
            acc = acc + c * b
        leaves[key] = acc
    t0 = trees[0]
    return FunctionTree(t0.d, t0.L, t0.basis, min(t.eps for t in trees), leaves)


def add(a: FunctionTree, b: FunctionTree, alpha: float = 1.0, beta: float = 1.0) -> FunctionTree:
    """alpha*a + beta*b, exact on the union refinement."""
    return linear_combination([alpha, beta], [a, b])


def inner(a: FunctionTree, b: FunctionTree) -> float:
    """L2 inner product <a, b>."""
    _check_compatible([a, b])
    total = 0.0
    for _, (ba, bb) in _union_leaves([a, b]):
        total += float(np.vdot(ba, bb))
    return total


def multiply(a: FunctionTree, b: FunctionTree) -> FunctionTree:
    """Pointwise product via quadrature one level below the union leaves.

    The extra level absorbs the degree doubling of the local product; the
    result is re-truncated at the finer of the two thresholds.
    """
    _check_compatible([a, b])
    basis = a.basis
    d = a.d
    pmat = basis.scaling_values(basis.quad_x)          # values:  k funcs x npts
    qmat = pmat * basis.quad_w                         # quadrature transform
    leaves = {}
    for key, (ba, bb) in _union_leaves([a, b]):
        for delta in _iproduct((0, 1), repeat=d):
            ck = key.child(delta)
            ca = _child_block(basis, ba, delta)
            cb = _child_block(basis, bb, delta)
            va, vb = ca, cb
            for ax in range(d):
                va = _apply_axis(pmat.T, va, ax)
                vb = _apply_axis(pmat.T, vb, ax)
            prod = va * vb
            for ax in range(d):
                prod = _apply_axis(qmat, prod, ax)
            scale = (2.0 * a.L * 2.0 ** (-ck.n)) ** (d / 2.0)
            leaves[ck] = prod / scale
    eps = min(a.eps, b.eps)
    tree = FunctionTree(d, a.L, basis, eps, leaves)
    return tree.truncated(eps)


def evaluate(a: FunctionTree, r) -> float:
    """Value of the represented function at a point inside the box."""
    pt = np.atleast_1d(np.asarray(r, dtype=float))
    if pt.shape != (a.d,):
        raise ValueError(f"point has dimension {pt.shape}, tree is {a.d}-dimensional")
    if np.any(np.abs(pt) > a.L):
        raise ValueError(f"point {tuple(pt)} outside the box [-{a.L}, {a.L}]^{a.d}")
    x = np.clip((pt + a.L) / (2.0 * a.L), 0.0, np.nextafter(1.0, 0.0))
    key = NodeKey(0, (0,) * a.d)
    while key not in a.leaves:
        delta = tuple(int(xi >= 0.5) for xi in x)
        x = 2.0 * x - np.array(delta)
        x = np.clip(x, 0.0, np.nextafter(1.0, 0.0))
        key = key.child(delta)
    blk = a.leaves[key]
    for ax in range(a.d):
        v = a.basis.scaling_values(np.array([x[ax]]))[:, 0]
        blk = np.tensordot(v, blk, axes=([0], [0]))
    return float(blk) / a.node_scale(key.n)


def apply_laplacian_expectation(a: FunctionTree) -> float:
    """<a| -1/2 Laplacian |a> in first-derivative form, hence non-negative."""
    total = 0.0
    for ax in range(a.d):
        da = a.derivative(ax)
        total += 0.5 * da.squared_norm()
    return total
