"""Exact t-SNE for embedding visualisation.

The O(N^2) formulation is deliberate: point counts here stay in the low
thousands, and the dense gradient is deterministic for a fixed seed, which
the tree-approximated variants cannot guarantee.
"""

from __future__ import annotations

import numpy as np

from .errors import TooFewPoints

EARLY_EXAGGERATION = 12.0
EXAGGERATION_ITERS = 250
MOMENTUM_EARLY = 0.5
MOMENTUM_LATE = 0.8
MIN_PROB = 1e-12


def _pairwise_sq_dists(x: np.ndarray) -> np.ndarray:
    s = (x * x).sum(axis=1)
    d = s[:, None] + s[None, :] - 2.0 * (x @ x.T)
    np.fill_diagonal(d, 0.0)
    return np.maximum(d, 0.0)


def _calibrate_row(dists: np.ndarray, target_entropy: float, tol: float = 1e-5, max_iter: int = 64) -> np.ndarray:
    """Binary-search the Gaussian bandwidth so the row's conditional
    distribution hits the target entropy (log perplexity)."""
    beta, lo, hi = 1.0, 0.0, np.inf
    p = np.full_like(dists, 1.0 / len(dists))
    for _ in range(max_iter):
        w = np.exp(-dists * beta)
        z = w.sum()
        if not np.isfinite(z) or z <= 0.0:
            hi = beta
            beta = (lo + beta) / 2.0
            continue
        p = w / z
        entropy = float(np.log(z) + beta * (dists * p).sum())
        if abs(entropy - target_entropy) < tol:
            break
        if entropy > target_entropy:
            lo = beta
            beta = beta * 2.0 if not np.isfinite(hi) else (beta + hi) / 2.0
        else:
            hi = beta
            beta = (beta + lo) / 2.0
    return p


def joint_probabilities(x: np.ndarray, perplexity: float) -> np.ndarray:
    n = x.shape[0]
    dists = _pairwise_sq_dists(x)
    target = float(np.log(perplexity))
    p = np.zeros((n, n))
    idx = np.arange(n)
    for i in range(n):
        mask = idx != i
        p[i, mask] = _calibrate_row(dists[i, mask], target)
    p = (p + p.T) / (2.0 * n)
    return np.maximum(p, MIN_PROB)


def tsne_project(
    embeddings: np.ndarray,
    perplexity: float = 30.0,
    iterations: int = 1000,
    seed: int = 0,
    learning_rate: float | None = None,
) -> np.ndarray:
    """Project N x D embeddings to N x 2 with exact t-SNE.

    Deterministic for a fixed seed. Perplexity is reduced to
    floor((N - 1) / 3) whenever N <= 3 * perplexity.
    """
    x = np.asarray(embeddings, dtype=np.float64)
    if x.ndim != 2:
        raise ValueError(f"embeddings must be 2-D, got shape {x.shape}")
    n = x.shape[0]
    if n < 5:
        raise TooFewPoints(f"need at least 5 points, got {n}")
    if n <= 3 * perplexity:
        perplexity = max(1.0, float((n - 1) // 3))
    if learning_rate is None:
        learning_rate = max(n / EARLY_EXAGGERATION, 50.0)

    p = joint_probabilities(x, perplexity)
    rng = np.random.default_rng(seed)
    y = rng.standard_normal((n, 2)) * 1e-4
    velocity = np.zeros_like(y)
    gains = np.ones_like(y)
    exaggerate_until = min(EXAGGERATION_ITERS, iterations // 4)

    for it in range(iterations):
        p_eff = p * EARLY_EXAGGERATION if it < exaggerate_until else p
        momentum = MOMENTUM_EARLY if it < exaggerate_until else MOMENTUM_LATE

        num = 1.0 / (1.0 + _pairwise_sq_dists(y))
        np.fill_diagonal(num, 0.0)
        q = np.maximum(num / num.sum(), MIN_PROB)

        coeff = (p_eff - q) * num
        grad = 4.0 * ((np.diag(coeff.sum(axis=1)) - coeff) @ y)

        flipped = np.sign(grad) != np.sign(velocity)
        gains = np.where(flipped, gains + 0.2, gains * 0.8)
        gains = np.maximum(gains, 0.01)
        velocity = momentum * velocity - learning_rate * gains * grad
        y = y + velocity
        y = y - y.mean(axis=0)
    return y
