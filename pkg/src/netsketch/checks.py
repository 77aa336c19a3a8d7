"""Executable invariant checks shared by ``netsketch verify`` and the test suite."""
from __future__ import annotations

import itertools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import assoc
from .sketch import (
    BOUND_RTOL,
    bound_report,
    direct_sketch,
    refined_sketch,
    step_lambdas,
)
from .tensor import BinaryTensor, RealTensor, Sketch, frobenius_norm_sq, inner_product, reconstruct

ORTHOGONALITY_TOL = 1e-6
EQUIVALENCE_RTOL = 1e-9
BRUTE_FORCE_MAX_T = 12


@dataclass
class CheckResult:
    name: str
    passed: bool = True
    failures: list[str] = field(default_factory=list)

    def fail(self, msg: str) -> None:
        self.passed = False
        if len(self.failures) < 5:
            self.failures.append(msg)


def direct_bound_violations(W: RealTensor, s: Sketch) -> list[int]:
    """Steps where the direct residual exceeds ``||W||^2 (1 - 1/t)^(j+1)``."""
    return bound_report(W, s).violations()


def contraction_violations(s: Sketch, lambdas: Sequence[float] | None = None,
                           rtol: float = BOUND_RTOL) -> list[int]:
    """Steps where the refined residual shrinks by less than ``1 - 1/(t - lambda)``."""
    t = s.shape.t
    lams = step_lambdas(s) if lambdas is None else lambdas
    bad = []
    for j, lam in enumerate(lams):
        prev, cur = s.residual_norms_sq[j], s.residual_norms_sq[j + 1]
        if cur > prev * (1.0 - 1.0 / (t - lam)) * (1 + rtol):
            bad.append(j)
    return bad


def orthogonality_residuals(W: RealTensor, s: Sketch) -> np.ndarray:
    res = RealTensor(W.shape, W.data - reconstruct(s).data)
    return np.array([inner_product(res, b) for b in s.basis])


def orthogonality_ok(W: RealTensor, s: Sketch, tol: float = ORTHOGONALITY_TOL) -> bool:
    limit = tol * np.sqrt(frobenius_norm_sq(W)) * np.sqrt(W.shape.t)
    return bool(np.all(np.abs(orthogonality_residuals(W, s)) <= limit))


def is_nonincreasing(values: Sequence[float], rtol: float = BOUND_RTOL) -> bool:
    return all(b <= a * (1 + rtol) + 1e-300 for a, b in zip(values, values[1:]))


def brute_force_one_term(W: RealTensor) -> tuple[BinaryTensor, float, float]:
    """Exhaustive minimum of ``||W - a B||^2`` over all sign patterns and real ``a``.

    Of each antipodal pair only the pattern with a nonnegative correlation
    is kept, so the winner is comparable to ``sign(W)``.
    """
    t = W.shape.t
    if t > BRUTE_FORCE_MAX_T:
        raise ValueError(f"brute force limited to t <= {BRUTE_FORCE_MAX_T}")
    patterns = np.array(list(itertools.product((1.0, -1.0), repeat=t)))
    corr = patterns @ W.data
    err = frobenius_norm_sq(W) - corr ** 2 / t
    cand = np.flatnonzero(corr >= 0)
    best = cand[np.argmin(err[cand])]
    B = BinaryTensor.from_signs(W.shape, patterns[best].astype(np.int8))
    return B, float(corr[best] / t), float(err[best])


def equivalence_error(direct: np.ndarray, other: np.ndarray, windows: np.ndarray) -> float:
    """Largest deviation relative to the magnitude of the summed terms."""
    scale = np.maximum(np.abs(windows).sum(axis=1, keepdims=True), np.abs(direct))
    scale = np.where(scale == 0, 1.0, scale)
    return float(np.max(np.abs(other - direct) / scale)) if direct.size else 0.0


def check_filters(name: str, filters: Sequence[RealTensor], m: int) -> list[CheckResult]:
    t1 = CheckResult(f"{name}: direct error bound")
    t2 = CheckResult(f"{name}: refined per-step contraction")
    ls = CheckResult(f"{name}: least-squares orthogonality")
    mono = CheckResult(f"{name}: monotone residual")
    results = [t1, t2, ls, mono]
    one = None
    if filters and filters[0].shape.t <= BRUTE_FORCE_MAX_T:
        one = CheckResult(f"{name}: one-term global optimality (brute force)")
        results.append(one)
    for i, W in enumerate(filters):
        d = direct_sketch(W, m)
        r = refined_sketch(W, m)
        for j in direct_bound_violations(W, d):
            t1.fail(f"filter {i} step {j}")
        for j in contraction_violations(r):
            t2.fail(f"filter {i} step {j}")
        if r.m and not orthogonality_ok(W, r):
            ls.fail(f"filter {i}")
        for tag, s in (("direct", d), ("refined", r)):
            if not is_nonincreasing(s.residual_norms_sq):
                mono.fail(f"filter {i} ({tag})")
        if one is not None and d.m:
            B, a, _ = brute_force_one_term(W)
            if B != d.basis[0] or not np.isclose(a, d.scales[0], rtol=1e-12, atol=0):
                one.fail(f"filter {i}")
    return results


def check_associative(name: str, sketches: Sequence[Sketch], seed: int, n_windows: int = 4) -> CheckResult:
    res = CheckResult(f"{name}: associative == direct")
    tensors, _ = assoc.layer_tensors(sketches)
    if not tensors:
        return res
    rng = np.random.default_rng(seed)
    windows = rng.standard_normal((n_windows, tensors[0].shape.t))
    direct = assoc.direct_convolve_batch(windows, tensors, assoc.OpCounter())
    for mode in ("mst", "random"):
        tree = assoc.build_tree(tensors, mode, seed)
        out = assoc.associative_convolve_batch(windows, tensors, tree, assoc.OpCounter())
        err = equivalence_error(direct, out, windows)
        if err > EQUIVALENCE_RTOL:
            res.fail(f"{mode} tree: relative error {err:.3e}")
    return res
