"""Dense linear-algebra kernels and seeded sampling.

Matrices are plain ``numpy.ndarray`` values of dtype float64 (row-major).
Randomness always flows through an explicit ``numpy.random.Generator``;
nothing in the package touches numpy's global RNG.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidArgumentError, ShapeError

SYMMETRY_TOL = 1e-10


def make_rng(seed: int) -> np.random.Generator:
    """PCG64 generator for a 64-bit seed; same seed, same stream."""
    return np.random.default_rng(np.random.SeedSequence(int(seed)))


def spawn_rngs(seed: int, n: int) -> list[np.random.Generator]:
    """``n`` statistically independent generators derived from one seed."""
    return [np.random.default_rng(s) for s in np.random.SeedSequence(int(seed)).spawn(n)]


def gaussian(rng: np.random.Generator, rows: int, cols: int,
             mean: float = 0.0, std: float = 1.0) -> np.ndarray:
    """``rows x cols`` matrix of i.i.d. N(mean, std^2) draws.

    Uses numpy's ziggurat normal sampler on the supplied generator.
    """
    if std < 0:
        raise InvalidArgumentError(f"std must be >= 0, got {std}")
    z = rng.standard_normal((rows, cols))
    return mean + std * z


def matmul(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
        raise ShapeError(f"cannot multiply {a.shape} by {b.shape}")
    return a @ b


def sym_eig(a: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Eigen-decomposition of a symmetric matrix.

    Returns eigenvalues in descending order and the matching orthonormal
    eigenvectors as columns.
    """
    a = np.asarray(a, dtype=np.float64)
    if a.ndim != 2 or a.shape[0] != a.shape[1]:
        raise ShapeError(f"sym_eig needs a square matrix, got {a.shape}")
    scale = max(1.0, float(np.max(np.abs(a)))) if a.size else 1.0
    if a.size and np.max(np.abs(a - a.T)) > SYMMETRY_TOL * scale:
        raise ShapeError("sym_eig needs a symmetric matrix")
    w, v = np.linalg.eigh(0.5 * (a + a.T))
    order = np.argsort(w)[::-1]
    return w[order], v[:, order]
