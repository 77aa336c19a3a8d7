"""Greedy binary expansions of real filters.

Two algorithms are provided. ``direct_sketch`` picks each term as the
sign of the current residual with the closed-form optimal scale.
``refined_sketch`` picks the same sign tensor but then refits every scale
jointly by least squares over the basis collected so far.
"""
from __future__ import annotations

from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from .tensor import (
    BinaryTensor,
    RealTensor,
    Shape,
    Sketch,
    binary_inner_product,
    frobenius_norm_sq,
    inner_product,
)

# residuals below this fraction of ||W||^2 are rounding noise, not signal
ZERO_RESIDUAL_RTOL = 1e-28
# lambda this close to t means the candidate lies in the current span
DEGENERATE_LAMBDA_RTOL = 1e-9
BOUND_RTOL = 1e-9


def _is_zero_residual(norm_sq: float, total_sq: float) -> bool:
    return norm_sq == 0.0 or norm_sq <= ZERO_RESIDUAL_RTOL * total_sq


def direct_sketch(W: RealTensor, m: int, pad: bool = False) -> Sketch:
    """Greedy expansion without refitting earlier scales.

    Stops early once the residual is numerically zero unless ``pad`` is set,
    in which case the remaining terms are all-+1 tensors with scale 0.
    """
    if m < 1:
        raise ValueError("m must be >= 1")
    t = W.shape.t
    total = frobenius_norm_sq(W)
    res = W.data.copy()
    basis, scales, norms = [], [], [total]
    stop = None
    for _ in range(m):
        if _is_zero_residual(norms[-1], total):
            stop = "zero residual"
            break
        B = BinaryTensor.from_bits(W.shape, res >= 0)
        a = float(np.abs(res).sum()) / t
        res = res - a * B.signs()
        basis.append(B)
        scales.append(a)
        norms.append(float(np.dot(res, res)))
    sk = Sketch(W.shape, basis, scales, norms, "direct", stop)
    return _pad(sk, m) if pad and stop else sk


@dataclass
class RefinementState:
    """Normal-equation data for a growing basis: Gram matrix and ``B^T w``."""

    t: int
    gram: np.ndarray = field(default_factory=lambda: np.zeros((0, 0), dtype=np.int64))
    basis_projections: np.ndarray = field(default_factory=lambda: np.zeros(0))
    basis: list[BinaryTensor] = field(default_factory=list)

    @classmethod
    def from_basis(cls, basis: Sequence[BinaryTensor], W: RealTensor) -> "RefinementState":
        state = cls(W.shape.t)
        for b in basis:
            state.extend(b, W)
        return state

    def cross(self, b: BinaryTensor) -> np.ndarray:
        return np.array([binary_inner_product(p, b) for p in self.basis], dtype=np.int64)

    def _grow_gram(self, b: BinaryTensor) -> None:
        psi = self.cross(b)
        k = len(self.basis)
        gram = np.empty((k + 1, k + 1), dtype=np.int64)
        gram[:k, :k] = self.gram
        gram[:k, k] = psi
        gram[k, :k] = psi
        gram[k, k] = self.t
        self.gram = gram
        self.basis.append(b)

    def extend(self, b: BinaryTensor, W: RealTensor) -> None:
        self.basis_projections = np.append(self.basis_projections, inner_product(W, b))
        self._grow_gram(b)

    def solve(self) -> np.ndarray:
        # SVD-based lstsq returns the minimum-norm solution when the Gram is singular
        sol, *_ = np.linalg.lstsq(self.gram.astype(np.float64), self.basis_projections, rcond=None)
        return sol

    def projection_norm_sq(self, b: BinaryTensor) -> float:
        """Squared norm of the orthogonal projection of ``b`` onto the basis span."""
        if not self.basis:
            return 0.0
        psi = self.cross(b).astype(np.float64)
        coef, *_ = np.linalg.lstsq(self.gram.astype(np.float64), psi, rcond=None)
        return float(min(max(psi @ coef, 0.0), self.t))


def refine_scales(basis: Sequence[BinaryTensor], W: RealTensor) -> list[float]:
    """Least-squares optimal scales for a fixed binary basis (minimum-norm if singular)."""
    if not basis:
        raise ValueError("basis must be nonempty")
    return RefinementState.from_basis(basis, W).solve().tolist()


def compute_lambda(basis_prefix: Sequence[BinaryTensor], b_next: BinaryTensor) -> float:
    if not basis_prefix:
        raise ValueError("basis_prefix must be nonempty")
    state = RefinementState(b_next.shape.t)
    for p in basis_prefix:
        state._grow_gram(p)
    return state.projection_norm_sq(b_next)


def _combine(basis: Sequence[BinaryTensor], scales) -> np.ndarray:
    out = np.zeros(basis[0].shape.t)
    for a, b in zip(scales, basis):
        out += a * b.signs()
    return out


def refined_sketch(W: RealTensor, m: int, pad: bool = False) -> Sketch:
    """Greedy expansion with a joint least-squares refit of all scales each step."""
    if m < 1:
        raise ValueError("m must be >= 1")
    t = W.shape.t
    total = frobenius_norm_sq(W)
    state = RefinementState(t)
    res = W.data.copy()
    scales = np.zeros(0)
    norms = [total]
    stop = None
    for _ in range(m):
        if _is_zero_residual(norms[-1], total):
            stop = "zero residual"
            break
        B = BinaryTensor.from_bits(W.shape, res >= 0)
        if state.basis and state.projection_norm_sq(B) >= t * (1 - DEGENERATE_LAMBDA_RTOL):
            stop = "degenerate basis"
            break
        state.extend(B, W)
        scales = state.solve()
        res = W.data - _combine(state.basis, scales)
        norms.append(float(np.dot(res, res)))
    sk = Sketch(W.shape, list(state.basis), scales.tolist(), norms, "refined", stop)
    return _pad(sk, m) if pad and stop else sk


def _pad(sk: Sketch, m: int) -> Sketch:
    extra = m - sk.m
    ones = BinaryTensor.ones(sk.shape)
    return Sketch(
        sk.shape,
        sk.basis + (ones,) * extra,
        sk.scales + (0.0,) * extra,
        sk.residual_norms_sq + (sk.residual_norms_sq[-1],) * extra,
        sk.method,
        sk.stop_reason,
    )


def sketch_filter(W: RealTensor, m: int, method: str = "refined") -> Sketch:
    if method == "direct":
        return direct_sketch(W, m)
    if method == "refined":
        return refined_sketch(W, m)
    raise ValueError(f"unknown method {method!r}")


def sketch_layer(filters: Sequence[RealTensor], m: int, method: str = "refined",
                 workers: int = 1) -> list[Sketch]:
    """Sketch each filter independently; output order follows input order."""
    if workers <= 1 or len(filters) <= 1:
        return [sketch_filter(W, m, method) for W in filters]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(lambda W: sketch_filter(W, m, method), filters))


def direct_bound(norm_sq: float, t: int, m: int) -> float:
    """Upper bound on the residual after ``m`` direct steps."""
    if t < 1:
        raise ValueError("t must be >= 1")
    return norm_sq * (1.0 - 1.0 / t) ** m


def refined_bound(norm_sq: float, t: int, lambdas: Sequence[float]) -> float:
    """Upper bound on the refined residual given per-step projection norms."""
    out = norm_sq
    for lam in lambdas:
        if lam < 0:
            raise ValueError(f"lambda must be nonnegative, got {lam}")
        if lam >= t:
            raise ValueError("lambda >= t: candidate lies in the basis span, expansion must stop")
        out *= 1.0 - 1.0 / (t - lam)
    return out


@dataclass(frozen=True)
class BoundReport:
    per_step_bound: list[float]
    per_step_actual: list[float]
    lambdas: list[float]

    def violations(self, rtol: float = BOUND_RTOL) -> list[int]:
        return [j for j, (act, bnd) in enumerate(zip(self.per_step_actual, self.per_step_bound))
                if act > bnd * (1 + rtol)]


def step_lambdas(s: Sketch) -> list[float]:
    """Projection norm of each new basis tensor onto the span of its predecessors."""
    lams = [0.0]
    for j in range(1, s.m):
        lams.append(compute_lambda(s.basis[:j], s.basis[j]))
    return lams[: s.m]


def bound_report(W: RealTensor, s: Sketch) -> BoundReport:
    """Cumulative theoretical bounds next to the measured residual after each step."""
    t = W.shape.t
    total = frobenius_norm_sq(W)
    actual = list(s.residual_norms_sq[1:])
    if s.method == "direct":
        bounds = [direct_bound(total, t, j + 1) for j in range(s.m)]
        return BoundReport(bounds, actual, [])
    lams = step_lambdas(s)
    bounds = [refined_bound(total, t, lams[: j + 1]) for j in range(s.m)]
    return BoundReport(bounds, actual, lams)


def energy_curve(W: RealTensor, s: Sketch) -> list[float]:
    total = frobenius_norm_sq(W)
    if total == 0.0:
        return [1.0] * (s.m + 1)
    return [1.0 - e / total for e in s.residual_norms_sq]


def layer_energy(filters: Sequence[RealTensor], sketches: Sequence[Sketch]) -> list[float]:
    """Accumulated energy ``1 - sum(e^2) / sum(||W||^2)`` over a layer, per term count.

    Filters that stopped early keep contributing their final residual.
    """
    total = sum(frobenius_norm_sq(W) for W in filters)
    m = max((s.m for s in sketches), default=0)
    if total == 0.0:
        return [1.0] * (m + 1)
    curve = []
    for j in range(m + 1):
        err = sum(s.residual_norms_sq[min(j, s.m)] for s in sketches)
        curve.append(1.0 - err / total)
    return curve


@dataclass(frozen=True)
class AccountingReport:
    t: int
    n: int
    m: int
    spatial_s: int
    full_bits: int
    sketched_bits: int
    compression_factor: float
    full_fmuls: int
    sketched_fmuls: int
    fmul_factor: float


def storage_and_flops(shape: Shape, n: int, m: int, spatial_s: int) -> AccountingReport:
    """Idealized storage and FMUL counts with 32-bit scales and one bit per binary entry."""
    if min(n, m, spatial_s) < 1:
        raise ValueError("n, m and spatial_s must be positive")
    t = shape.t
    return AccountingReport(
        t=t, n=n, m=m, spatial_s=spatial_s,
        full_bits=32 * t * n,
        sketched_bits=(32 * m + t * m) * n,
        compression_factor=32 * t / (32 * m + t * m),
        full_fmuls=spatial_s * t * n,
        sketched_fmuls=spatial_s * m * n,
        fmul_factor=t / m,
    )
