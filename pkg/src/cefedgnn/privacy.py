"""Release-time perturbation, the metric-DP accountant, and the
attribute-inference attack used to probe empirical leakage.

The accountant bounds the privacy loss of an R'-fold composition of the
Gaussian mechanism on released embeddings, quoted at an L2 radius rho:

    eps(rho) = min_{alpha > 1} [ R' alpha rho^2 / (2 sigma0^2)
                                 + log((alpha - 1) / alpha)
                                 - log(delta alpha) / (alpha - 1) ]

The guarantee depends on sigma0 only through rho / sigma0, so it equals
the standard no-subsampling Gaussian accountant at noise multiplier
sigma0 / rho.  Negative minima (possible for tiny rho) clamp to zero.

rho itself comes from a k-anonymity-style construction: the q-th
percentile (nearest-rank) of each released node's distance to its k-th
nearest neighbor among L2-normalized released embeddings.
"""

from __future__ import annotations

from dataclasses import dataclass, field
import warnings
from typing import Optional, Sequence

import numpy as np

DEFAULT_KNN = 50
DEFAULT_PERCENTILES = (50, 90, 95, 99, 100)
HEADLINE_PERCENTILE = 90

_ALPHA_GRID_POINTS = 2000
_ALPHA_LO_OFFSET = 1e-6
_ALPHA_HI = 1e6


@dataclass
class NoiseConfig:
    sigma0: float = 0.0
    sigma1: float = 0.0
    sigma2: float = 0.0
    clip_embed: float = 5.0
    clip_model: float = 15.0
    delta: float = 1e-4

    def validate(self) -> None:
        if min(self.sigma0, self.sigma1, self.sigma2) < 0:
            raise ValueError("noise levels must be >= 0")
        if self.clip_embed <= 0 or self.clip_model <= 0:
            raise ValueError("clipping thresholds must be > 0")
        if not (0.0 < self.delta < 1.0):
            raise ValueError("delta must lie in (0, 1)")


def clip_and_noise(x: np.ndarray, clip: float, sigma: float,
                   rng: np.random.Generator) -> np.ndarray:
    """L2-clip to `clip`, then add iid Gaussian(0, sigma^2) per coordinate."""
    if clip <= 0:
        raise ValueError("clip must be > 0")
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    x = np.asarray(x, dtype=np.float64)
    norm = float(np.linalg.norm(x))
    out = x * min(1.0, clip / norm) if norm > clip else x.copy()
    if sigma > 0:
        out = out + rng.normal(0.0, sigma, size=x.shape)
    return out


def _epsilon_objective(alpha: np.ndarray, rho: float, sigma0: float,
                       rounds_shared: int, delta: float) -> np.ndarray:
    return (rounds_shared * alpha * rho * rho / (2.0 * sigma0 * sigma0)
            + np.log((alpha - 1.0) / alpha) - np.log(delta * alpha) / (alpha - 1.0))


def mdp_epsilon(rho: float, sigma0: float, rounds_shared: int, delta: float) -> float:
    """Epsilon of the composed Gaussian release at L2 radius rho.

    Minimizes the Renyi-order objective on a 2000-point log grid over
    (1 + 1e-6, 1e6] followed by golden-section refinement in the best
    bracket; accurate to well under 0.1% of the dense-grid minimum.
    sigma0 = 0 yields inf.
    """
    if rho < 0:
        raise ValueError("rho must be >= 0")
    if rounds_shared < 1:
        raise ValueError("rounds_shared must be >= 1")
    if not (0.0 < delta < 1.0):
        raise ValueError("delta must lie in (0, 1)")
    if sigma0 == 0.0:
        return float("inf")

    grid = 1.0 + np.logspace(np.log10(_ALPHA_LO_OFFSET), np.log10(_ALPHA_HI - 1.0),
                             _ALPHA_GRID_POINTS)
    vals = _epsilon_objective(grid, rho, sigma0, rounds_shared, delta)
    i = int(np.argmin(vals))
    lo = grid[max(i - 1, 0)]
    hi = grid[min(i + 1, len(grid) - 1)]

    invphi = (np.sqrt(5.0) - 1.0) / 2.0
    a, b = lo, hi
    c = b - invphi * (b - a)
    d = a + invphi * (b - a)
    fc = _epsilon_objective(np.array([c]), rho, sigma0, rounds_shared, delta)[0]
    fd = _epsilon_objective(np.array([d]), rho, sigma0, rounds_shared, delta)[0]
    for _ in range(200):
        if b - a < 1e-12 * max(1.0, a):
            break
        if fc < fd:
            b, d, fd = d, c, fc
            c = b - invphi * (b - a)
            fc = _epsilon_objective(np.array([c]), rho, sigma0, rounds_shared, delta)[0]
        else:
            a, c, fc = c, d, fd
            d = a + invphi * (b - a)
            fd = _epsilon_objective(np.array([d]), rho, sigma0, rounds_shared, delta)[0]
    best = min(float(vals[i]), float(fc), float(fd))
    return max(best, 0.0)


def knn_distances(embeddings: np.ndarray, k: int) -> np.ndarray:
    """Exact distance of each L2-normalized embedding to its k-th nearest
    other point; zero vectors are dropped with a warning."""
    emb = np.asarray(embeddings, dtype=np.float64)
    if emb.ndim != 2:
        raise ValueError("embeddings must be a 2d array")
    norms = np.linalg.norm(emb, axis=1)
    zero = norms == 0
    if zero.any():
        warnings.warn(f"dropping {int(zero.sum())} zero embeddings before normalization")
        emb = emb[~zero]
        norms = norms[~zero]
    if k < 1:
        raise ValueError("k must be >= 1")
    n = len(emb)
    if n < k + 1:
        raise ValueError(f"need at least k+1={k + 1} nonzero embeddings, got {n}")
    unit = emb / norms[:, None]
    # direct differences, chunked by rows: exact zeros for identical points
    out = np.empty(n)
    chunk = max(1, int(2_000_000 / max(n, 1)))
    for start in range(0, n, chunk):
        stop = min(start + chunk, n)
        diff = unit[start:stop, None, :] - unit[None, :, :]
        d2 = np.sum(diff * diff, axis=2)
        for i in range(start, stop):
            d2[i - start, i] = np.inf
        out[start:stop] = np.sort(d2, axis=1)[:, k - 1]
    return np.sqrt(out)


def nearest_rank_percentile(values: np.ndarray, q: float) -> float:
    """ceil(q*n/100)-th order statistic; q=0 maps to the minimum."""
    values = np.sort(np.asarray(values, dtype=np.float64))
    n = len(values)
    if n == 0:
        raise ValueError("no values")
    rank = int(np.ceil(q * n / 100.0))
    rank = min(max(rank, 1), n)
    return float(values[rank - 1])


def rho_percentiles(embeddings: np.ndarray, k: int,
                    percentiles: Sequence[float]) -> list[float]:
    """Percentiles of the k-th nearest-neighbor distance after L2 normalization."""
    d = knn_distances(embeddings, k)
    return [nearest_rank_percentile(d, q) for q in percentiles]


@dataclass
class PrivacyReport:
    """Accountant output mirroring the released-embedding guarantee tables."""

    delta: float
    sigma0: float
    rounds_shared: int
    knn_k: int
    rows: list[dict] = field(default_factory=list)
    empty: bool = False

    def headline(self) -> Optional[dict]:
        for row in self.rows:
            if row["percentile"] == HEADLINE_PERCENTILE:
                return row
        return None


def privacy_report(
    released: dict[int, np.ndarray],
    release_counts: dict[int, int],
    noise: NoiseConfig,
    *,
    k: int = DEFAULT_KNN,
    percentiles: Sequence[float] = DEFAULT_PERCENTILES,
    per_node_counts: bool = False,
) -> PrivacyReport:
    """Compose rho percentiles with the accountant for one finished run.

    rounds_shared defaults to the conservative max of per-node release
    counts; per_node_counts=True instead adds per-node epsilon rows at
    the headline percentile.  k shrinks automatically when fewer than
    k+1 embeddings were released.
    """
    noise.validate()
    if not released:
        return PrivacyReport(delta=noise.delta, sigma0=noise.sigma0,
                             rounds_shared=0, knn_k=k, empty=True)
    rprime = max(release_counts.values(), default=0)
    ids = sorted(released)
    emb = np.vstack([released[i] for i in ids])
    k_eff = min(k, len(emb) - 1)
    if k_eff < 1:
        return PrivacyReport(delta=noise.delta, sigma0=noise.sigma0,
                             rounds_shared=rprime, knn_k=k, empty=False,
                             rows=[])
    if k_eff < k:
        warnings.warn(f"reducing k from {k} to {k_eff}: only {len(emb)} releases")
    rhos = rho_percentiles(emb, k_eff, percentiles)
    rows = []
    for q, rho in zip(percentiles, rhos):
        eps = (mdp_epsilon(rho, noise.sigma0, max(rprime, 1), noise.delta)
               if noise.sigma0 > 0 else float("inf"))
        rows.append({"percentile": q, "rho": rho, "epsilon": eps,
                     "rounds_shared": rprime})
    report = PrivacyReport(delta=noise.delta, sigma0=noise.sigma0,
                           rounds_shared=rprime, knn_k=k_eff, rows=rows)
    if per_node_counts and noise.sigma0 > 0:
        d = knn_distances(emb, k_eff)
        for nid, dist, count in zip(ids, d, (release_counts[i] for i in ids)):
            report.rows.append({"percentile": None, "node": nid, "rho": float(dist),
                                "epsilon": mdp_epsilon(float(dist), noise.sigma0,
                                                       max(count, 1), noise.delta),
                                "rounds_shared": count})
    return report


# -- attribute-inference attack ------------------------------------------------


@dataclass
class AttackResult:
    reconstructed: np.ndarray
    mse: float
    objective: float
    iterations: int
    converged: bool


def aia_attack(
    params,
    view,
    target_node: int,
    observed_embedding: np.ndarray,
    *,
    iterations: int = 500,
    step_size: float = 0.1,
    init: Optional[np.ndarray] = None,
    true_features: Optional[np.ndarray] = None,
    tol: float = 1e-12,
) -> AttackResult:
    """Reconstruct a node's hidden features from its released embedding.

    Gradient descent on || h_top(x') - h_obs ||^2 over the target's input
    features, holding the background nodes' features and the model fixed.
    mse is reported against true_features when given (evaluation only).
    """
    import dataclasses

    from .models import compute_stack, stack_backward, zeros_like_params

    row = view.row_of(target_node)
    feats = view.features.copy()
    work = dataclasses.replace(view, features=feats)
    x = np.zeros(feats.shape[1]) if init is None else np.asarray(init, dtype=np.float64).copy()

    obs = np.asarray(observed_embedding, dtype=np.float64)
    best_obj = np.inf
    best_x = x.copy()
    it = 0
    for it in range(1, iterations + 1):
        feats[row] = x
        stack = compute_stack(params, work)
        resid = stack.top()[row] - obs
        obj = float(np.sum(resid * resid))
        if obj < best_obj:
            best_obj = obj
            best_x = x.copy()
        if obj <= tol:
            break
        delta_top = np.zeros_like(stack.top())
        delta_top[row] = 2.0 * resid
        grads = zeros_like_params(params)
        feat_adj = stack_backward(params, stack, delta_top, grads, want_features=True)
        x = x - step_size * feat_adj[row]

    mse = float("nan")
    if true_features is not None:
        diff = best_x - np.asarray(true_features, dtype=np.float64)
        mse = float(np.mean(diff * diff))
    return AttackResult(reconstructed=best_x, mse=mse, objective=best_obj,
                        iterations=it, converged=best_obj <= tol)
