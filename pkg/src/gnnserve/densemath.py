"""Dense kernels shared by model layers and merge logic.

Matrices are row-major numpy float32 arrays; accumulation happens in
float64 so results are insensitive to partition-induced reorderings of
sums at the tolerances the rest of the package promises.
"""

from __future__ import annotations

import math

import numpy as np


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    """Matrix product with float64 accumulation, returned as float32."""
    if a.ndim != 2 or b.ndim != 2:
        raise ValueError("matmul expects 2-D operands")
    if a.shape[1] != b.shape[0]:
        raise ValueError(f"dimension mismatch: {a.shape} x {b.shape}")
    return (a.astype(np.float64) @ b.astype(np.float64)).astype(np.float32)


def relu(x: np.ndarray) -> np.ndarray:
    return np.maximum(x, 0.0)


def leaky_relu(x: np.ndarray, slope: float = 0.2) -> np.ndarray:
    return np.where(x >= 0.0, x, slope * x)


def softplus(x: np.ndarray) -> np.ndarray:
    # log(1 + e^x) without overflow for large |x|
    return np.logaddexp(0.0, x)


def signed_root(x: np.ndarray, n: int) -> np.ndarray:
    """n-th root; odd n keeps the sign, even n clamps small negative fp noise."""
    if n % 2 == 1:
        return np.sign(x) * np.abs(x) ** (1.0 / n)
    return np.maximum(x, 0.0) ** (1.0 / n)


def stable_logsumexp_merge(
    parts: list[tuple[float, float]],
) -> tuple[float, float]:
    """Combine (max_logit, exp_sum) pairs into one pair.

    Each pair summarizes some multiset of logits L as
    ``(max(L), sum(exp(l - max(L))))``.  The merge is associative and
    commutative up to float rounding, and a pair with exp_sum == 0 acts
    as the identity (its max_logit is ignored).
    """
    if not parts:
        raise ValueError("need at least one part")
    live = [(m, s) for m, s in parts if s > 0.0]
    if not live:
        return -math.inf, 0.0
    m_star = max(m for m, _ in live)
    total = sum(s * math.exp(m - m_star) for m, s in live)
    return m_star, total


def init_uniform(rng: np.random.Generator, rows: int, cols: int | None = None) -> np.ndarray:
    """Weight init: uniform(-1/sqrt(rows), +1/sqrt(rows)), float32."""
    bound = 1.0 / math.sqrt(rows)
    shape = (rows,) if cols is None else (rows, cols)
    return rng.uniform(-bound, bound, size=shape).astype(np.float32)
