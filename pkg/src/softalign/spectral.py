"""Matrix-free analysis of the loss Hessian and loss-landscape geometry.

The Hessian is always that of the true mean cross-entropy loss, whichever
rule trained the network. Hessian-vector products are exact: the analytic
backpropagation gradient is differentiated in direction ``v`` by carrying
tangents through the forward and backward passes. ReLU's second derivative
is taken as zero everywhere.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .dataio import apply_stats
from .errors import InvalidArgumentError, ShapeError
from .metrics import write_rows
from .network import (BackwardRule, NetworkParams, backward, evaluate, flatten,
                      forward, loss_and_output_delta, relu_grad, unflatten)

BREAKDOWN_TOL = 1e-12


class HessianOracle:
    """Loss, gradient and Hessian-vector products at fixed (params, batch)."""

    def __init__(self, params: NetworkParams, x: np.ndarray, labels, loss_scale: float = 1.0):
        self.params = params.copy()
        self.dims = params.dims
        self.x = np.asarray(x, dtype=np.float64)
        self.labels = np.asarray(labels, dtype=np.int64)
        self.loss_scale = float(loss_scale)
        self.n_params = params.n_params
        self._cache = forward(self.params, self.x)
        loss, self._delta_out = loss_and_output_delta(self._cache, self.labels)
        self._loss = self.loss_scale * loss
        self._grads = backward(BackwardRule.exact_transpose(), self.params, self._cache, self._delta_out)

    @property
    def theta(self) -> np.ndarray:
        return flatten(self.params)

    def loss(self) -> float:
        return self._loss

    def gradient(self) -> np.ndarray:
        return self.loss_scale * flatten(self._grads)

    def hvp(self, v: np.ndarray) -> np.ndarray:
        v = np.asarray(v, dtype=np.float64)
        if v.shape != (self.n_params,):
            raise ShapeError(f"probe has length {v.size}, expected {self.n_params}")
        tangent = unflatten(v, self.dims)
        W, V, c = self.params.weights, tangent.weights, tangent.biases
        cache = self._cache
        L = len(W)
        n = self.x.shape[0]

        # forward tangents: dh_0 = 0
        dact = [np.zeros_like(self.x)]
        dpre = [None]
        for l in range(L):
            do = dact[l] @ W[l].T + cache.act[l] @ V[l].T + c[l]
            dpre.append(do)
            if l < L - 1:
                dact.append(do * relu_grad(cache.pre[l + 1]))

        # softmax tangent: d p = p * (dz - <p, dz>)
        p = cache.probs
        dz = dpre[L]
        dp = p * (dz - np.sum(p * dz, axis=1, keepdims=True))
        ddelta = dp / n
        delta = self._delta_out

        hw, hb = [None] * L, [None] * L
        for l in range(L - 1, -1, -1):
            hw[l] = ddelta.T @ cache.act[l] + delta.T @ dact[l]
            hb[l] = ddelta.sum(axis=0)
            if l == 0:
                break
            mask = relu_grad(cache.pre[l])
            ddelta = (ddelta @ W[l] + delta @ V[l]) * mask
            delta = (delta @ W[l]) * mask
        return self.loss_scale * np.concatenate([h.ravel() for h in hw] + [h.ravel() for h in hb])


def dense_hessian(oracle: HessianOracle) -> np.ndarray:
    """Explicit Hessian from HVPs with unit vectors (small nets only)."""
    eye = np.eye(oracle.n_params)
    return np.stack([oracle.hvp(e) for e in eye], axis=1)


# ---------------------------------------------------------------------------
# Top eigenpairs
# ---------------------------------------------------------------------------

@dataclass
class EigResult:
    value: float
    vector: np.ndarray
    converged: bool
    iterations: int


def _unit(rng, n):
    v = rng.standard_normal(n)
    return v / np.linalg.norm(v)


def _orthogonalize(v, basis):
    for u in basis:
        v = v - np.dot(u, v) * u
    return v


def top_eigenvalue(oracle: HessianOracle, rng: np.random.Generator, tol: float = 1e-3,
                   max_iters: int = 100, orthogonal_to: Sequence[np.ndarray] = ()) -> EigResult:
    """Power iteration; converges to the eigenvalue of largest magnitude.

    ``orthogonal_to`` deflates previously found eigenvectors. The returned
    value is the Rayleigh quotient of the returned unit vector.
    """
    if tol <= 0:
        raise InvalidArgumentError("tol must be > 0")
    v = _unit(rng, oracle.n_params)
    v = _orthogonalize(v, orthogonal_to)
    v /= np.linalg.norm(v)
    prev = None
    for it in range(1, max_iters + 1):
        hv = _orthogonalize(oracle.hvp(v), orthogonal_to)
        lam = float(np.dot(v, hv))
        if prev is not None and abs(lam - prev) / (abs(lam) + 1e-12) < tol:
            return EigResult(lam, v, True, it)
        norm = np.linalg.norm(hv)
        if norm == 0:
            return EigResult(lam, v, True, it)
        prev = lam
        v = hv / norm
    lam = float(np.dot(v, _orthogonalize(oracle.hvp(v), orthogonal_to)))
    return EigResult(lam, v, False, max_iters)


def top_eigenpairs(oracle: HessianOracle, rng: np.random.Generator, k: int = 2,
                   tol: float = 1e-3, max_iters: int = 100) -> list[EigResult]:
    found: list[EigResult] = []
    for _ in range(k):
        res = top_eigenvalue(oracle, rng, tol, max_iters, [r.vector for r in found])
        res.vector = _orthogonalize(res.vector, [r.vector for r in found])
        res.vector /= np.linalg.norm(res.vector)
        found.append(res)
    return found


# ---------------------------------------------------------------------------
# Trace
# ---------------------------------------------------------------------------

@dataclass
class TraceResult:
    estimate: float
    stderr: float
    n_probes: int
    samples: np.ndarray = field(repr=False)


def hessian_trace(oracle: HessianOracle, rng: np.random.Generator, n_probes: int = 100,
                  probe: str = "rademacher") -> TraceResult:
    """Hutchinson estimate ``mean(v.T H v)`` with its standard error."""
    if n_probes < 1:
        raise InvalidArgumentError("n_probes must be >= 1")
    samples = np.empty(n_probes)
    for i in range(n_probes):
        if probe == "rademacher":
            v = rng.integers(0, 2, oracle.n_params) * 2.0 - 1.0
        elif probe == "gaussian":
            v = rng.standard_normal(oracle.n_params)
        else:
            raise InvalidArgumentError(f"unknown probe {probe!r}")
        samples[i] = np.dot(v, oracle.hvp(v))
    se = float(samples.std(ddof=1) / math.sqrt(n_probes)) if n_probes > 1 else float("nan")
    return TraceResult(float(samples.mean()), se, n_probes, samples)


# ---------------------------------------------------------------------------
# Spectral density (stochastic Lanczos quadrature)
# ---------------------------------------------------------------------------

def lanczos(matvec: Callable[[np.ndarray], np.ndarray], v0: np.ndarray, q: int):
    """``q`` Lanczos steps with full reorthogonalisation.

    Returns Ritz values and their quadrature weights (squared first
    components of the tridiagonal eigenvectors). Stops early on breakdown.
    """
    n = v0.size
    q = min(q, n)
    basis = np.zeros((q, n))
    alphas, betas = [], []
    v = v0 / np.linalg.norm(v0)
    for j in range(q):
        basis[j] = v
        w = matvec(v)
        alpha = float(np.dot(w, v))
        w = w - alpha * v
        if j:
            w = w - betas[-1] * basis[j - 1]
        # two passes of classical Gram-Schmidt against the whole basis
        for _ in range(2):
            w = w - basis[:j + 1].T @ (basis[:j + 1] @ w)
        alphas.append(alpha)
        beta = float(np.linalg.norm(w))
        if j == q - 1 or beta < BREAKDOWN_TOL:
            break
        betas.append(beta)
        v = w / beta
    k = len(alphas)
    T = np.diag(alphas) + np.diag(betas[:k - 1], 1) + np.diag(betas[:k - 1], -1)
    nodes, vecs = np.linalg.eigh(T)
    weights = vecs[0] ** 2
    return nodes, weights / weights.sum()


def gaussian_mixture_density(t: np.ndarray, nodes_list, weights_list, sigma: float) -> np.ndarray:
    """Average over runs of sum_i w_i N(t; node_i, sigma^2)."""
    rho = np.zeros_like(t, dtype=np.float64)
    norm = 1.0 / (sigma * math.sqrt(2 * math.pi))
    for nodes, weights in zip(nodes_list, weights_list):
        diff = t[:, None] - nodes[None, :]
        rho += norm * np.exp(-0.5 * (diff / sigma) ** 2) @ weights
    return rho / len(nodes_list)


def default_grid(lo: float, hi: float, n_grid: int = 1024) -> np.ndarray:
    span = hi - lo
    pad = 0.05 * span if span > 0 else max(1.0, abs(lo)) * 0.05
    return np.linspace(lo - pad, hi + pad, n_grid)


@dataclass
class DensityResult:
    grid: np.ndarray
    density: np.ndarray
    sigma: float
    n_v: int
    q: int
    nodes: list = field(repr=False, default_factory=list)
    weights: list = field(repr=False, default_factory=list)

    def integral(self) -> float:
        return float(np.trapezoid(self.density, self.grid))


def esd_slq(oracle: HessianOracle, rng: np.random.Generator, n_v: int = 10, q: int = 80,
            sigma: float | None = None, grid: np.ndarray | None = None,
            n_grid: int = 1024) -> DensityResult:
    """Smoothed eigenvalue density of the Hessian by stochastic Lanczos quadrature."""
    if q < 2:
        raise InvalidArgumentError("q must be >= 2")
    if sigma is not None and sigma <= 0:
        raise InvalidArgumentError("sigma must be > 0")
    nodes_list, weights_list = [], []
    for _ in range(n_v):
        v0 = rng.standard_normal(oracle.n_params)
        nodes, weights = lanczos(oracle.hvp, v0, q)
        nodes_list.append(nodes)
        weights_list.append(weights)
    if grid is None:
        lo = min(float(n.min()) for n in nodes_list)
        hi = max(float(n.max()) for n in nodes_list)
        grid = default_grid(lo, hi, n_grid)
    grid = np.asarray(grid, dtype=np.float64)
    if sigma is None:
        sigma = 0.01 * (grid[-1] - grid[0])
    density = gaussian_mixture_density(grid, nodes_list, weights_list, sigma)
    return DensityResult(grid, density, sigma, n_v, q, nodes_list, weights_list)


# ---------------------------------------------------------------------------
# Landscapes
# ---------------------------------------------------------------------------

def centered_grid(lo: float, hi: float, n: int) -> np.ndarray:
    g = np.linspace(lo, hi, n)
    g[np.abs(g) < 1e-12 * max(abs(lo), abs(hi), 1.0)] = 0.0
    return g


def perturbed_landscape(params: NetworkParams, dir1: np.ndarray, dir2: np.ndarray,
                        alphas, betas, eval_ds, stats=None, batch_size: int = 1000) -> np.ndarray:
    """Loss at ``theta + alpha * dir1 + beta * dir2`` over a grid.

    Entry ``[i, j]`` corresponds to ``(alphas[i], betas[j])``.
    """
    d1, d2 = np.asarray(dir1, float), np.asarray(dir2, float)
    for d in (d1, d2):
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise InvalidArgumentError("perturbation directions must be unit vectors")
    if abs(np.dot(d1, d2)) > 1e-6:
        raise InvalidArgumentError("perturbation directions must be orthogonal")
    theta = flatten(params)
    dims = params.dims
    out = np.empty((len(alphas), len(betas)))
    for i, a in enumerate(alphas):
        for j, b in enumerate(betas):
            if a == 0 and b == 0:
                p = params
            else:
                p = unflatten(theta + a * d1 + b * d2, dims)
            out[i, j] = evaluate(p, eval_ds, batch_size, stats)[1]
    return out


@dataclass
class PCAResult:
    directions: np.ndarray  # (2, P) orthonormal rows; second row zero if degenerate
    path: np.ndarray  # (k, 2) checkpoint coordinates
    explained: tuple[float, float]
    alphas: np.ndarray
    betas: np.ndarray
    surface: np.ndarray  # (len(alphas), len(betas))
    degenerate: bool


def pca_trajectory(checkpoints, theta_final: np.ndarray, loss_fn: Callable[[np.ndarray], float],
                   n_grid: int = 21, margin: float = 0.25) -> PCAResult:
    """Project a training trajectory onto its top-2 principal directions.

    PCA runs on the k x k Gram matrix of the (centred) difference vectors
    ``theta_i - theta_final`` so the P-dimensional covariance is never
    formed. The loss surface is sampled on a grid anchored at
    ``theta_final`` that covers the projected path plus ``margin``.
    """
    diffs = np.asarray(checkpoints, dtype=np.float64) - theta_final[None, :]
    k = diffs.shape[0]
    if k < 3:
        raise InvalidArgumentError("need at least 3 checkpoints")
    centered = diffs - diffs.mean(axis=0)
    gram = centered @ centered.T
    evals, evecs = np.linalg.eigh(gram)
    order = np.argsort(evals)[::-1]
    evals, evecs = np.clip(evals[order], 0.0, None), evecs[:, order]
    total = evals.sum()

    dirs = np.zeros((2, diffs.shape[1]))
    degenerate = False
    for j in range(2):
        if total == 0 or evals[j] <= 1e-12 * evals[0]:
            degenerate = True
            break
        d = centered.T @ evecs[:, j]
        d = _orthogonalize(d, dirs[:j])
        dirs[j] = d / np.linalg.norm(d)
    if total == 0:
        raise InvalidArgumentError("trajectory has no spread")
    explained = (float(evals[0] / total), float(evals[1] / total) if not degenerate else 0.0)

    path = diffs @ dirs.T

    def span(col):
        # symmetric about theta_final so an odd grid samples it exactly
        lo, hi = float(path[:, col].min()), float(path[:, col].max())
        reach = max(abs(lo), abs(hi)) + margin * max(hi - lo, 1e-12)
        return centered_grid(-reach, reach, n_grid)

    alphas = span(0)
    betas = np.array([0.0]) if degenerate else span(1)
    surface = np.empty((len(alphas), len(betas)))
    for i, a in enumerate(alphas):
        for j, b in enumerate(betas):
            surface[i, j] = loss_fn(theta_final + a * dirs[0] + b * dirs[1])
    return PCAResult(dirs, path, explained, alphas, betas, surface, degenerate)


# ---------------------------------------------------------------------------
# Reports
# ---------------------------------------------------------------------------

@dataclass
class SpectrumReport:
    lambda_max: float
    eigvec: np.ndarray
    converged: bool
    trace: float
    trace_stderr: float
    n_probes: int
    density: DensityResult


def write_density_csv(density: DensityResult, path):
    write_rows(path, ["t", "rho"], zip(density.grid, density.density))


def write_grid_csv(alphas, betas, values, path):
    rows = [(a, b, values[i, j]) for i, a in enumerate(alphas) for j, b in enumerate(betas)]
    write_rows(path, ["alpha", "beta", "loss"], rows)


def oracle_batch(ds, n: int, rng: np.random.Generator, stats=None):
    """Fixed, seeded evaluation batch of ``n`` samples (all if fewer)."""
    n = min(n, len(ds))
    idx = np.sort(rng.choice(len(ds), size=n, replace=False))
    return apply_stats(ds.images[idx], stats), ds.labels[idx]
