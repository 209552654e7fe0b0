"""PAS stain separation and structure-preserving color normalization.

Pixels are converted to optical density (OD), a two-column stain basis is
learned by sparse non-negative factorization ``OD ~ H @ W.T`` and each image
is re-rendered after matching per-stain concentration percentiles to a target.
"""

from __future__ import annotations

import json
import warnings
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

I0 = 255.0
EPS = 1.0

# OD colour vectors close to hematoxylin and Schiff magenta (rows are stains)
PAS_REFERENCE = np.array([[0.650, 0.704, 0.286], [0.175, 0.972, 0.154]])


class NoTissueError(ValueError):
    def __init__(self, msg: str = "no tissue found"):
        super().__init__(msg)


class StainConvergenceWarning(RuntimeWarning):
    pass


@dataclass
class StainConfig:
    od_threshold: float = 0.15
    sparsity: float = 0.1
    iterations: int = 200
    refine_iterations: int = 20
    tol: float = 1e-8
    max_pixels: int = 100_000
    percentile: float = 99.0
    init_noise: float = 0.05
    seed: int = 0

    def validate(self) -> "StainConfig":
        if self.od_threshold < 0 or self.sparsity < 0:
            raise ValueError("od_threshold and sparsity must be >= 0")
        if self.iterations < 1 or self.max_pixels < 100:
            raise ValueError("iterations must be >= 1 and max_pixels >= 100")
        if not 0 < self.percentile <= 100:
            raise ValueError("percentile must be in (0, 100]")
        return self


@dataclass
class StainMatrix:
    """3x2 basis of unit OD vectors; column 0 carries the larger red component."""

    matrix: np.ndarray
    converged: bool = True
    objective: float = float("nan")

    def __post_init__(self):
        m = np.asarray(self.matrix, dtype=np.float64)
        if m.shape != (3, 2):
            raise ValueError(f"stain matrix must be 3x2, got {m.shape}")
        if (m < 0).any():
            raise ValueError("stain matrix entries must be non-negative")
        if not np.allclose(np.linalg.norm(m, axis=0), 1.0, atol=1e-6):
            raise ValueError("stain matrix columns must have unit norm")
        self.matrix = m

    @classmethod
    def from_columns(cls, cols, **kw) -> "StainMatrix":
        """Normalize and canonically order arbitrary non-negative columns."""
        m = np.abs(np.asarray(cols, dtype=np.float64))
        m = m / np.linalg.norm(m, axis=0, keepdims=True)
        if m[0, 1] > m[0, 0]:
            m = m[:, ::-1].copy()
        return cls(m, **kw)


@dataclass
class StainStats:
    stain_matrix: StainMatrix
    conc_percentile_99: np.ndarray
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        p = np.asarray(self.conc_percentile_99, dtype=np.float64).reshape(2)
        if not (p > 0).all():
            raise ValueError("concentration percentiles must be positive")
        self.conc_percentile_99 = p

    def to_json(self) -> str:
        return json.dumps(
            {
                "stain_matrix": self.stain_matrix.matrix.tolist(),
                "conc_percentile_99": self.conc_percentile_99.tolist(),
                "meta": self.meta,
            },
            sort_keys=True,
        )

    @classmethod
    def from_json(cls, text: str) -> "StainStats":
        doc = json.loads(text)
        return cls(StainMatrix(np.array(doc["stain_matrix"])), np.array(doc["conc_percentile_99"]), doc.get("meta", {}))

    def save(self, path) -> None:
        Path(path).write_text(self.to_json())

    @classmethod
    def load(cls, path) -> "StainStats":
        return cls.from_json(Path(path).read_text())


def rgb_to_od(img) -> np.ndarray:
    """Optical density ``-log10((I + 1) / 255)``, floored at 0 for saturated white."""
    img = np.asarray(img)
    if img.ndim != 3 or img.shape[-1] != 3:
        raise ValueError("expected an HxWx3 RGB image")
    od = -np.log10((img.astype(np.float64) + EPS) / I0)
    return np.maximum(od, 0.0)


def od_to_rgb(od) -> np.ndarray:
    """Inverse of :func:`rgb_to_od`, rounded and clipped to uint8."""
    rgb = I0 * np.power(10.0, -np.asarray(od, dtype=np.float64)) - EPS
    return np.clip(np.rint(rgb), 0, 255).astype(np.uint8)


def tissue_mask(od, od_threshold: float = 0.15) -> np.ndarray:
    mask = np.asarray(od).mean(axis=-1) > od_threshold
    if not mask.any():
        raise NoTissueError()
    return mask


def _nonneg_2var(gram: np.ndarray, rhs: np.ndarray, lam: float = 0.0) -> np.ndarray:
    """Exact minimizer of ``0.5 h'Gh - rhs'h + lam*sum(h)`` over ``h >= 0`` for 2-vectors.

    ``rhs`` has shape ``(N, 2)``; each row is an independent problem sharing ``gram``.
    The optimum lies on one of four faces of the orthant, so every face's
    stationary point is evaluated and the best feasible one kept.
    """
    c = rhs - lam
    g00, g01, g11 = gram[0, 0], gram[0, 1], gram[1, 1]
    n = len(c)

    def objective(h):
        quad = 0.5 * (g00 * h[:, 0] ** 2 + 2 * g01 * h[:, 0] * h[:, 1] + g11 * h[:, 1] ** 2)
        return quad - (c * h).sum(axis=1)

    cands = [np.zeros((n, 2))]
    for j, gjj in ((0, g00), (1, g11)):
        h = np.zeros((n, 2))
        if gjj > 0:
            h[:, j] = np.maximum(c[:, j] / gjj, 0.0)
        cands.append(h)
    det = g00 * g11 - g01 * g01
    if det > 1e-12 * max(g00 * g11, 1e-300):
        both = np.stack([(g11 * c[:, 0] - g01 * c[:, 1]) / det, (g00 * c[:, 1] - g01 * c[:, 0]) / det], axis=1)
        feasible = (both >= 0).all(axis=1)
        cands.append(np.where(feasible[:, None], both, 0.0))
    vals = np.stack([objective(h) for h in cands], axis=0)
    best = np.argmin(vals, axis=0)
    stacked = np.stack(cands, axis=0)
    return stacked[best, np.arange(n)]


def compute_concentrations(od, stain_matrix) -> np.ndarray:
    """Per-pixel non-negative least squares ``od ~ W @ h``; returns ``(..., 2)``."""
    W = stain_matrix.matrix if isinstance(stain_matrix, StainMatrix) else np.asarray(stain_matrix)
    od = np.asarray(od, dtype=np.float64)
    flat = od.reshape(-1, 3)
    h = _nonneg_2var(W.T @ W, flat @ W)
    return h.reshape(od.shape[:-1] + (2,))


def _objective(X, H, W, lam):
    r = X - H @ W.T
    return 0.5 * float((r * r).sum()) + lam * float(H.sum())


def estimate_stain_matrix(
    od_pixels,
    sparsity_weight: float = 0.1,
    iterations: int = 200,
    seed: int = 0,
    tol: float = 1e-8,
    max_pixels: int = 100_000,
    init_noise: float = 0.05,
    refine_iterations: int = 20,
) -> StainMatrix:
    """Learn a two-stain OD basis by alternating non-negative least squares.

    Concentrations get an L1 penalty ``sparsity_weight``; after every basis
    update the columns are rescaled to unit norm. The iterate with the lowest
    objective is returned; ``converged`` is False (and a
    :class:`StainConvergenceWarning` raised) if the relative objective change
    never fell below ``tol``.

    The L1 term shrinks the basis towards the interior of the data cone, so
    ``refine_iterations`` unpenalized sweeps started from the sparse solution
    follow (relaxed-lasso style debiasing); set it to 0 to skip.
    """
    X = np.asarray(od_pixels, dtype=np.float64).reshape(-1, 3)
    if len(X) < 100:
        raise ValueError(f"need at least 100 tissue pixels, got {len(X)}")
    rng = np.random.default_rng(seed)
    if len(X) > max_pixels:
        X = X[np.sort(rng.choice(len(X), size=max_pixels, replace=False))]

    init = np.abs(PAS_REFERENCE.T + init_noise * rng.standard_normal((3, 2)))
    starts = [init / np.linalg.norm(init, axis=0, keepdims=True), _angular_extremes(X)]
    runs = [_sparse_anls(X, W0, sparsity_weight, iterations, tol) for W0 in starts]
    W, best_obj, converged = min(runs, key=lambda r: r[1])
    if not converged:
        warnings.warn(f"stain estimation did not converge in {iterations} iterations", StainConvergenceWarning)
    for _ in range(refine_iterations):
        H = _nonneg_2var(W.T @ W, X @ W)
        W = _update_basis(X, H, W)
    return StainMatrix.from_columns(W, converged=converged, objective=best_obj)


def _sparse_anls(X, W, lam, iterations, tol):
    best_W, best_obj = W.copy(), np.inf
    prev = np.inf
    for _ in range(iterations):
        H = _nonneg_2var(W.T @ W, X @ W, lam)
        obj = _objective(X, H, W, lam)
        if obj < best_obj:
            best_W, best_obj = W.copy(), obj
        if np.isfinite(prev) and abs(prev - obj) <= tol * max(abs(prev), 1e-300):
            return best_W, best_obj, True
        prev = obj
        W = _update_basis(X, H, W)
    return best_W, best_obj, False


def _angular_extremes(X, q=1.0):
    """Start basis from the 1st/99th percentile directions in the principal OD plane."""
    _, vecs = np.linalg.eigh(X.T @ X)
    plane = vecs[:, [2, 1]]
    plane *= np.where(plane.sum(axis=0) < 0, -1.0, 1.0)
    proj = X @ plane
    phi = np.arctan2(proj[:, 1], proj[:, 0])
    lo, hi = np.percentile(phi, [q, 100 - q], method="inverted_cdf")
    cols = np.stack([plane @ [np.cos(a), np.sin(a)] for a in (lo, hi)], axis=1)
    cols = np.maximum(cols, 1e-6)
    return cols / np.linalg.norm(cols, axis=0, keepdims=True)


def _update_basis(X, H, W):
    # channel rows are independent 2-variable NNLS problems in H
    W_new = _nonneg_2var(H.T @ H, X.T @ H)
    norms = np.linalg.norm(W_new, axis=0)
    dead = norms <= 1e-12
    if dead.any():
        W_new[:, dead] = W[:, dead]
        norms[dead] = 1.0
    return W_new / norms


def compute_stain_stats(img, config: StainConfig | None = None) -> StainStats:
    """Stain basis and per-stain concentration percentile over tissue pixels."""
    cfg = (config or StainConfig()).validate()
    od = rgb_to_od(img)
    mask = tissue_mask(od, cfg.od_threshold)
    pixels = od[mask]
    W = estimate_stain_matrix(
        pixels, cfg.sparsity, cfg.iterations, cfg.seed, cfg.tol, cfg.max_pixels, cfg.init_noise,
        cfg.refine_iterations,
    )
    conc = compute_concentrations(pixels, W)
    pct = np.percentile(conc, cfg.percentile, axis=0)
    if not (pct > 0).all():
        raise NoTissueError("a stain is absent from the tissue pixels")
    return StainStats(W, pct, {"tissue_pixels": int(mask.sum()), "converged": W.converged})


def normalize(source, target_stats: StainStats, config: StainConfig | None = None) -> np.ndarray:
    """Re-render ``source`` with the target stain basis and concentration scale.

    The part of each pixel's OD that the source basis does not explain (the
    NNLS residual) is carried over unchanged, so structure outside the
    two-stain cone survives and self-normalization is the identity.
    """
    cfg = config or StainConfig()
    src = compute_stain_stats(source, cfg)
    od = rgb_to_od(source)
    W_src = src.stain_matrix.matrix
    conc = compute_concentrations(od, W_src)
    residual = od - conc @ W_src.T
    conc = conc * (target_stats.conc_percentile_99 / src.conc_percentile_99)
    return od_to_rgb(conc @ target_stats.stain_matrix.matrix.T + residual)


def compose(conc, stain_matrix) -> np.ndarray:
    """RGB image from a ``(..., 2)`` concentration map and a stain basis."""
    W = stain_matrix.matrix if isinstance(stain_matrix, StainMatrix) else np.asarray(stain_matrix)
    return od_to_rgb(np.asarray(conc) @ W.T)

