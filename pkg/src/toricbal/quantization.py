"""Quantization maps on torus-invariant data: Hilb, FS, Bergman density.

All numerics run in logarithmic coordinates u on the open torus orbit,
u_j = log|z_j|.  A torus-invariant Hermitian form on the sections of L^k is
diagonal in the monomial basis {z^alpha : alpha in kP} and is stored as the
vector of log-weights logw.  The key quantities:

* log Bergman sum   log B(u) = LSE_alpha(2<alpha,u> - logw_alpha)
* FS potential      phi(u) = (log B(u) - log N_k) / k        (level-1 class)
* softmax           p_alpha(u) = exp(2<alpha,u> - logw_alpha) / B(u)
* moment            E_p[alpha] = (1/2) grad(k phi),  in the interior of kP
* metric            2 Cov_p(alpha) = (1/2) Hess(k phi), positive definite

The reference measure is det(2 Cov) du.  Its pushforward under the moment
map is Lebesgue measure on kP, so its total mass is exactly k^m Vol(P); that
identity validates every quadrature grid.  The paper-facing normalisations
pinned by it: the volume of X is identified with Vol(P), the Bergman
function of round CP^1 is k+1, and the scalar curvature of round CP^1 is 2.
"""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from .polytope import LatticePointSet, Polytope, lattice_points

# relative tolerance for the grid volume identity, per axis count
REL_TOL_QUAD = {1: 1e-9, 2: 1e-7}

# target quadrature step is GRID_STEP_SCALE / sqrt(k), capped per dimension.
# Rough (random) weight vectors narrow the analyticity strip of the softmax
# integrands and may need a finer step than the caps; validation failures
# trigger a refinement ladder, and smoothed iterates run at the cap.
GRID_STEP_SCALE = 0.5
GRID_STEP_MAX = {1: 0.08, 2: 0.15}
GRID_BASE_RADIUS = 14.5
# fraction of the total mass allowed on the outermost node ring
RING_TOL = 1e-12
MIN_RESOLUTION = 32

_CHUNK = 1 << 14


class GridValidationError(RuntimeError):
    """Quadrature grid failed the exact-volume identity.

    Increase the radius (tail too heavy) or the resolution (step too coarse)
    and rebuild the grid.
    """


# ---------------------------------------------------------------------------
# Hermitian weights


@dataclass
class HermitianWeights:
    """Diagonal positive Hermitian form on H^0(X, L^k) in the monomial basis."""

    k: int
    points: LatticePointSet
    logw: np.ndarray

    def __post_init__(self):
        self.logw = np.asarray(self.logw, dtype=float)
        if self.logw.shape != (self.points.count,):
            raise ValueError(
                f"logw has shape {self.logw.shape}, expected ({self.points.count},)"
            )
        if not np.all(np.isfinite(self.logw)):
            raise ValueError("logw entries must be finite (H positive definite)")
        if self.k != self.points.k:
            raise ValueError(f"k mismatch: {self.k} != lattice set k {self.points.k}")

    @property
    def n_sections(self) -> int:
        return self.points.count

    def sl_normalized(self) -> "HermitianWeights":
        """Same form rescaled so that mean(logw) = 0 (det H = 1)."""
        return HermitianWeights(self.k, self.points, self.logw - self.logw.mean())

    def copy(self) -> "HermitianWeights":
        return HermitianWeights(self.k, self.points, self.logw.copy())


def uniform_weights(points: LatticePointSet) -> HermitianWeights:
    return HermitianWeights(points.k, points, np.zeros(points.count))


def random_weights(points: LatticePointSet, seed: int) -> HermitianWeights:
    """Seeded random start: logw i.i.d. uniform in [-1, 1], SL-normalized."""
    rng = np.random.default_rng(seed)
    logw = rng.uniform(-1.0, 1.0, size=points.count)
    return HermitianWeights(points.k, points, logw - logw.mean()).sl_normalized()


# ---------------------------------------------------------------------------
# softmax statistics


def _as_rows(u) -> tuple[np.ndarray, bool]:
    arr = np.asarray(u, dtype=float)
    if arr.ndim == 1:
        return arr[None, :], True
    return arr, False


def _logits(h: HermitianWeights, nodes: np.ndarray) -> np.ndarray:
    alpha = h.points.points.astype(float)
    return 2.0 * nodes @ alpha.T - h.logw


def _softmax_stats(h: HermitianWeights, nodes: np.ndarray):
    """Per-node softmax p, log B, moment and covariance, all exact formulas.

    The covariance is accumulated from centered second moments (same-sign
    terms on the diagonal), not E[aa] - mu mu, so it stays relatively
    accurate deep in the tails where it is exponentially small.
    """
    alpha = h.points.points.astype(float)
    m = alpha.shape[1]
    logits = _logits(h, nodes)
    top = logits.max(axis=1)
    p = np.exp(logits - top[:, None])
    z = p.sum(axis=1)
    p /= z[:, None]
    log_b = top + np.log(z)

    moment = p @ alpha
    cov = np.empty(nodes.shape[0:1] + (m, m))
    centered = [alpha[None, :, i] - moment[:, i, None] for i in range(m)]
    for i in range(m):
        for j in range(i, m):
            cov[:, i, j] = (p * centered[i] * centered[j]).sum(axis=1)
            cov[:, j, i] = cov[:, i, j]
    return p, log_b, moment, cov


def _det2cov(cov: np.ndarray) -> np.ndarray:
    m = cov.shape[-1]
    if m == 1:
        return 2.0 * cov[:, 0, 0]
    if m == 2:
        return 4.0 * (cov[:, 0, 0] * cov[:, 1, 1] - cov[:, 0, 1] ** 2)
    return np.linalg.det(2.0 * cov)


def log_bergman_density(h: HermitianWeights, u) -> np.ndarray | float:
    """log of B_H(u) = sum_alpha exp(2<alpha,u> - logw_alpha), via log-sum-exp."""
    nodes, single = _as_rows(u)
    if not np.all(np.isfinite(nodes)):
        raise ValueError("NaN/inf evaluation point")
    logits = _logits(h, nodes)
    top = logits.max(axis=1)
    out = top + np.log(np.exp(logits - top[:, None]).sum(axis=1))
    return float(out[0]) if single else out


def bergman_density(h: HermitianWeights, u) -> np.ndarray | float:
    return np.exp(log_bergman_density(h, u))


def moment_and_metric(h: HermitianWeights, u):
    """Moment E_p[alpha] in int(kP) and metric 2 Cov_p(alpha), exact softmax formulas."""
    nodes, single = _as_rows(u)
    _, _, moment, cov = _softmax_stats(h, nodes)
    metric = 2.0 * cov
    if single:
        return moment[0], metric[0]
    return moment, metric


# ---------------------------------------------------------------------------
# potentials


@dataclass
class PotentialFunction:
    """A strictly convex level-1 Kahler potential in log coordinates.

    value/gradient/hessian evaluate on (n, m) arrays of u-points and return
    (n,), (n, m), (n, m, m).  `analytic` records whether the derivatives are
    exact; finite-difference fallbacks record their step.
    """

    dim: int
    value: Callable[[np.ndarray], np.ndarray]
    gradient: Callable[[np.ndarray], np.ndarray]
    hessian: Callable[[np.ndarray], np.ndarray]
    analytic: bool = True
    fd_step: float | None = None

    @staticmethod
    def from_scalar(dim: int, f: Callable, fd_step: float = 1e-4) -> "PotentialFunction":
        """Wrap a plain scalar function with central-difference derivatives."""

        def grad(u):
            u = np.atleast_2d(np.asarray(u, dtype=float))
            out = np.empty_like(u)
            for j in range(dim):
                e = np.zeros(dim)
                e[j] = fd_step
                out[:, j] = (f(u + e) - f(u - e)) / (2 * fd_step)
            return out

        def hess(u):
            u = np.atleast_2d(np.asarray(u, dtype=float))
            n = u.shape[0]
            out = np.empty((n, dim, dim))
            f0 = f(u)
            for i in range(dim):
                ei = np.zeros(dim)
                ei[i] = fd_step
                out[:, i, i] = (f(u + ei) - 2 * f0 + f(u - ei)) / fd_step**2
                for j in range(i + 1, dim):
                    ej = np.zeros(dim)
                    ej[j] = fd_step
                    out[:, i, j] = (
                        f(u + ei + ej) - f(u + ei - ej) - f(u - ei + ej) + f(u - ei - ej)
                    ) / (4 * fd_step**2)
                    out[:, j, i] = out[:, i, j]
            return out

        return PotentialFunction(dim, f, grad, hess, analytic=False, fd_step=fd_step)


def fs_potential(h: HermitianWeights) -> PotentialFunction:
    """FS potential phi(u) = (log B_H(u) - log N_k) / k with analytic derivatives."""
    k = float(h.k)
    log_n = np.log(h.n_sections)

    def value(u):
        nodes, single = _as_rows(u)
        out = (log_bergman_density(h, nodes) - log_n) / k
        return out[0] if single else out

    def gradient(u):
        nodes, single = _as_rows(u)
        _, _, moment, _ = _softmax_stats(h, nodes)
        out = 2.0 * moment / k
        return out[0] if single else out

    def hessian(u):
        nodes, single = _as_rows(u)
        _, _, _, cov = _softmax_stats(h, nodes)
        out = 4.0 * cov / k
        return out[0] if single else out

    return PotentialFunction(h.points.dim, value, gradient, hessian, analytic=True)


def round_potential(polytope: Polytope) -> PotentialFunction:
    """The reference potential of the polarization: FS of the uniform k=1 form."""
    return fs_potential(uniform_weights(lattice_points(polytope, 1)))


def perturbed_cp1_potential(amplitude: float = 0.05) -> PotentialFunction:
    """Round CP^1 potential plus amplitude * sech^2(u); convex for |amplitude| < 1/2.

    Uses the cancellation-free forms grad = 1 + tanh + ..., hess = sech^2 + ...
    so the metric keeps full relative accuracy deep in the tails.
    """

    def value(u):
        u = np.asarray(u, dtype=float)
        x = u[..., 0]
        return np.logaddexp(0.0, 2.0 * x) + amplitude / np.cosh(x) ** 2

    def gradient(u):
        u = np.atleast_2d(np.asarray(u, dtype=float))
        x = u[:, 0]
        s, th = 1.0 / np.cosh(x) ** 2, np.tanh(x)
        return (1.0 + th - 2.0 * amplitude * s * th)[:, None]

    def hessian(u):
        u = np.atleast_2d(np.asarray(u, dtype=float))
        x = u[:, 0]
        s, th = 1.0 / np.cosh(x) ** 2, np.tanh(x)
        # 4 t (1 - t) = sech^2(u) exactly
        return (s + amplitude * (4.0 * s * th**2 - 2.0 * s**2))[:, None, None]

    def val_rows(u):
        nodes, single = _as_rows(u)
        out = value(nodes)
        return out[0] if single else out

    return PotentialFunction(1, val_rows, gradient, hessian, analytic=True)


# ---------------------------------------------------------------------------
# quadrature grids


@dataclass
class QuadratureGrid:
    """Tensor-product trapezoid grid on [-R, R]^m with validated tails."""

    nodes: np.ndarray  # (n, m)
    weights: np.ndarray  # (n,) product trapezoid weights
    truncation_radius: float
    resolution: int  # points per axis
    k: int
    target_volume: float  # k^m Vol(P), the exact mass of det(2 Cov) du
    rel_tol: float
    volume_defect: float = field(default=np.nan)

    @property
    def dim(self) -> int:
        return self.nodes.shape[1]

    @property
    def step(self) -> float:
        return 2.0 * self.truncation_radius / (self.resolution - 1)


def _tensor_grid(m: int, radius: float, resolution: int):
    axis = np.linspace(-radius, radius, resolution)
    w_axis = np.full(resolution, axis[1] - axis[0])
    w_axis[0] *= 0.5
    w_axis[-1] *= 0.5
    grids = np.meshgrid(*([axis] * m), indexing="ij")
    nodes = np.stack([g.reshape(-1) for g in grids], axis=1)
    weights = np.ones(nodes.shape[0])
    for j in range(m):
        idx = np.meshgrid(*([np.arange(resolution)] * m), indexing="ij")[j].reshape(-1)
        weights *= w_axis[idx]
    return nodes, weights


def auto_radius(h: HermitianWeights, margin: float = 0.0) -> float:
    """Truncation radius adapted to the weights.

    The density tail sets in where the top two logits separate; that onset is
    governed by log-weight jumps between lattice neighbours (for smooth,
    convex-ish weight vectors), with the total spread as a safe upper bound.
    The boundary-ring check in validate_grid backstops adversarial cases.
    """
    if h.n_sections <= 1:
        return GRID_BASE_RADIUS + margin
    logw = h.logw
    spread = float(logw.max() - logw.min())
    index = {tuple(a): i for i, a in enumerate(h.points.points.tolist())}
    jump = 0.0
    m = h.points.dim
    for alpha, i in index.items():
        for j in range(m):
            nbr = list(alpha)
            nbr[j] += 1
            other = index.get(tuple(nbr))
            if other is not None:
                jump = max(jump, abs(logw[i] - logw[other]))
    return GRID_BASE_RADIUS + min(0.5 * spread, 1.0 + jump) + margin


def default_resolution(k: int, radius: float, dim: int) -> int:
    step = min(GRID_STEP_MAX[dim], GRID_STEP_SCALE / np.sqrt(k))
    return max(MIN_RESOLUTION, int(np.ceil(2.0 * radius / step)) + 1)


def make_grid(
    h: HermitianWeights,
    resolution: int | None = None,
    radius: float | str = "auto",
    rel_tol: float | None = None,
    validate: bool = True,
) -> QuadratureGrid:
    """Build a quadrature grid adapted to the given weights.

    The radius policy "auto" uses the base radius plus half the log-weight
    spread, which drives the tail of det(2 Cov) below 1e-12 of the total.
    Validation checks the exact identity integral det(2 Cov) du = k^m Vol(P)
    and the mass on the outermost node ring; on failure, auto-set radius and
    resolution are refined a couple of times before giving up.  Explicitly
    requested values are used strictly.
    """
    m = h.points.dim
    auto_r = radius == "auto"
    auto_res = resolution is None
    r = auto_radius(h) if auto_r else float(radius)
    res = default_resolution(h.k, r, m) if auto_res else int(resolution)
    if res < MIN_RESOLUTION:
        raise ValueError(f"resolution {res} < minimum {MIN_RESOLUTION} per axis")
    vol_p = float(h.points.polytope.volume())
    target = (h.k**m) * vol_p

    attempts = 3 if (auto_r or auto_res) else 1
    last_error: GridValidationError | None = None
    for _ in range(attempts):
        nodes, weights = _tensor_grid(m, r, res)
        grid = QuadratureGrid(
            nodes=nodes,
            weights=weights,
            truncation_radius=r,
            resolution=res,
            k=h.k,
            target_volume=target,
            rel_tol=REL_TOL_QUAD[m] if rel_tol is None else rel_tol,
        )
        if not validate:
            return grid
        try:
            validate_grid(h, grid)
            return grid
        except GridValidationError as exc:
            last_error = exc
            if "tail" in str(exc) and auto_r:
                r += 3.0
                if auto_res:
                    res = default_resolution(h.k, r, m)
            elif auto_res:
                res = int(np.ceil(res * 1.45))
            else:
                raise
    raise last_error


def _quadrature_pass(h: HermitianWeights, grid: QuadratureGrid, keep_matrix: bool):
    """Single sweep over the grid: section sums, volume, density, softmax.

    Returns (d_unnormalized, vol, dens, p or None).  The covariance enters
    only as the quadrature density here, so the fixed-center second-moment
    matmuls are used (their absolute error is integrable); the per-node
    accurate path is _softmax_stats.
    """
    alpha = h.points.points.astype(float)
    m = alpha.shape[1]
    n = grid.nodes.shape[0]
    a_c = alpha - h.points.barycenter
    pairs = [(i, j) for i in range(m) for j in range(i, m)]
    a2 = np.stack([a_c[:, i] * a_c[:, j] for i, j in pairs], axis=1)

    cache = keep_matrix and n * h.n_sections <= 20_000_000
    p_full = np.empty((n, h.n_sections)) if cache else None
    d_unnorm = np.zeros(h.n_sections)
    dens = np.empty(n)

    for sl in _chunks(n):
        q = grid.nodes[sl] @ (2.0 * alpha).T
        q -= h.logw
        top = q.max(axis=1)
        q -= top[:, None]
        np.exp(q, out=q)
        z = q.sum(axis=1)
        s1 = (q @ a_c) / z[:, None]
        s2 = (q @ a2) / z[:, None]
        if m == 1:
            det = 2.0 * (s2[:, 0] - s1[:, 0] ** 2)
        elif m == 2:
            c00 = s2[:, 0] - s1[:, 0] ** 2
            c01 = s2[:, 1] - s1[:, 0] * s1[:, 1]
            c11 = s2[:, 2] - s1[:, 1] ** 2
            det = 4.0 * (c00 * c11 - c01 * c01)
        else:
            cov = np.empty((q.shape[0], m, m))
            for idx, (i, j) in enumerate(pairs):
                cov[:, i, j] = cov[:, j, i] = s2[:, idx] - s1[:, i] * s1[:, j]
            det = np.linalg.det(2.0 * cov)
        dens[sl] = det * grid.weights[sl]
        d_unnorm += q.T @ (dens[sl] / z)
        if cache:
            q /= z[:, None]
            p_full[sl] = q
    return d_unnorm, float(dens.sum()), dens, p_full


def validate_grid(h: HermitianWeights, grid: QuadratureGrid) -> float:
    """Check the volume identity and the tail mass for h; returns the defect."""
    _, vol, dens, _ = _quadrature_pass(h, grid, keep_matrix=False)
    edge = grid.truncation_radius - 0.5 * grid.step
    on_ring = np.abs(grid.nodes).max(axis=1) >= edge
    ring = float(dens[on_ring].sum())
    defect = abs(vol - grid.target_volume) / grid.target_volume
    grid.volume_defect = defect
    if ring / grid.target_volume > RING_TOL:
        raise GridValidationError(
            f"tail too heavy: boundary-ring mass fraction {ring / grid.target_volume:.3e} "
            f"exceeds {RING_TOL:.1e} (radius {grid.truncation_radius}); increase the radius"
        )
    if defect > grid.rel_tol:
        raise GridValidationError(
            f"quadrature volume defect {defect:.3e} exceeds {grid.rel_tol:.1e} "
            f"(radius {grid.truncation_radius}, resolution {grid.resolution}); "
            "increase the resolution"
        )
    return defect


def _chunks(n: int, size: int = _CHUNK):
    for start in range(0, n, size):
        yield slice(start, min(start + size, n))


# ---------------------------------------------------------------------------
# section means: the single quadrature pass everything else reuses


def section_means(
    h: HermitianWeights, grid: QuadratureGrid, keep_matrix: bool = False
):
    """Normalized means D_alpha = <p_alpha> against det(2 Cov) du / (k^m Vol P).

    Returns (D, p_matrix or None).  Validates the grid volume identity as a
    by-product of the same pass; raises GridValidationError on failure.  The
    means are normalized by the computed volume, so sum(D) = 1 to machine
    precision (the pointwise softmax identity sum_alpha p_alpha = 1); the
    target volume only enters the validation.
    """
    if grid.k != h.k:
        raise ValueError(f"grid built for k={grid.k}, weights have k={h.k}")
    d_unnorm, vol, _, p_full = _quadrature_pass(h, grid, keep_matrix)
    defect = abs(vol - grid.target_volume) / grid.target_volume
    grid.volume_defect = defect
    if defect > grid.rel_tol:
        raise GridValidationError(
            f"quadrature volume defect {defect:.3e} exceeds {grid.rel_tol:.1e}; "
            "increase the grid radius or resolution"
        )
    return d_unnorm / vol, p_full


def hilb(h: HermitianWeights, grid: QuadratureGrid) -> HermitianWeights:
    """The L^2 form induced by FS(h): diagonal, positive, not SL-normalized.

    hilb(H)_aa = (N_k / (k^m Vol P)) * int e^{2<a,u>} / B_H(u) det(2 Cov) du,
    computed as N_k * w_a * D_a from the section means.
    """
    d, _ = section_means(h, grid)
    logw = np.log(h.n_sections) + np.log(d) + h.logw
    return HermitianWeights(h.k, h.points, logw)


# ---------------------------------------------------------------------------
# Bergman function of an arbitrary potential


def potential_grid(
    phi: PotentialFunction,
    k: int,
    points: LatticePointSet,
    resolution: int | None = None,
    radius: float | str = "auto",
) -> QuadratureGrid:
    """Grid for quantizing a potential at level k, validated against k^m Vol(P)."""
    m = points.dim
    r = GRID_BASE_RADIUS + 2.0 if radius == "auto" else float(radius)
    res = default_resolution(k, r, m) if resolution is None else int(resolution)
    vol_p = float(points.polytope.volume())
    target = (k**m) * vol_p
    nodes, weights = _tensor_grid(m, r, res)
    dens = _density_of_potential(phi, k, nodes)
    vol = float(dens @ weights)
    grid = QuadratureGrid(
        nodes=nodes,
        weights=weights,
        truncation_radius=r,
        resolution=res,
        k=k,
        target_volume=target,
        rel_tol=REL_TOL_QUAD[m],
    )
    grid.volume_defect = abs(vol - target) / target
    if grid.volume_defect > grid.rel_tol:
        raise GridValidationError(
            f"potential grid volume defect {grid.volume_defect:.3e} "
            f"exceeds {grid.rel_tol:.1e}; increase radius or resolution"
        )
    return grid


def _density_of_potential(phi: PotentialFunction, k: int, nodes: np.ndarray):
    hess = phi.hessian(nodes)
    if hess.ndim == 1:
        hess = hess[:, None, None]
    cov_like = np.asarray(hess) * (k / 4.0)  # Cov of the level-k quantization
    return _det2cov(cov_like)


def _potential_log_hilb(
    phi: PotentialFunction, k: int, grid: QuadratureGrid, points: LatticePointSet
):
    """log Hilb_k(phi)_bb per section, plus the section logits on the grid."""
    if points.k != k:
        raise ValueError("lattice point set must be built for the same k")
    # Nyquist guard: the integrands have u-features of width ~ 1/sqrt(k)
    if grid.step * np.sqrt(k) > 0.9:
        raise GridValidationError(
            f"grid step {grid.step:.3f} too coarse for k={k}; need resolution "
            f">= {default_resolution(k, grid.truncation_radius, points.dim)}"
        )
    alpha = points.points.astype(float)
    nodes = grid.nodes
    kphi = k * np.asarray(phi.value(nodes), dtype=float)
    dens = _density_of_potential(phi, k, nodes)
    if not np.all(dens > 0):
        raise GridValidationError("Hessian not positive definite at a grid node")
    logits = 2.0 * nodes @ alpha.T - kphi[:, None]
    top = logits.max(axis=0)
    hilb_diag = (np.exp(logits - top) * (dens * grid.weights)[:, None]).sum(axis=0)
    log_hilb = top + np.log(hilb_diag) - points.dim * np.log(k)
    return log_hilb, logits


def bergman_function(
    phi: PotentialFunction, k: int, grid: QuadratureGrid, points: LatticePointSet
):
    """Bergman density rho_k(phi) evaluated on the grid nodes.

    rho_k(u) = sum_beta e^{2<beta,u> - k phi(u)} / Hilb_k(phi)_bb with
    Hilb_k(phi)_bb = k^{-m} int e^{2<beta,u> - k phi} det(Hess(k phi)/2) du.
    Constant exactly N_k / Vol(P) for a balanced potential, with the uniform
    expansion k^m + (S/2) k^{m-1} + ... (round CP^1: k+1, round CP^2:
    (k+1)(k+2), pinning A_1 = S/2).
    """
    log_hilb, logits = _potential_log_hilb(phi, k, grid, points)
    return np.exp(logits - log_hilb).sum(axis=1)


def quantize_potential(
    phi: PotentialFunction,
    k: int,
    points: LatticePointSet,
    resolution: int | None = None,
) -> HermitianWeights:
    """Level-k quantization of a potential: the L^2 form it induces.

    Useful as a warm start: quantizing the FS potential of a converged
    fixed point at level k+2 lands within O(k^{-2}) of the next fixed point.
    """
    grid = potential_grid(phi, k, points, resolution=resolution)
    log_hilb, _ = _potential_log_hilb(phi, k, grid, points)
    return HermitianWeights(k, points, log_hilb - log_hilb.mean())


# ---------------------------------------------------------------------------
# scalar curvature


def scalar_curvature_batch(
    phi: PotentialFunction, u: np.ndarray, fd_step: float = 2e-3
) -> np.ndarray:
    """Scalar curvature S = -tr(Hess(phi)^{-1} Hess(log det Hess phi)), batched.

    The outer Hessian is taken by Richardson-extrapolated central differences
    of the analytic metric, with all stencil shifts evaluated vectorized over
    the input points.  Normalised so round CP^1 gives 2 and round CP^2 gives
    6; the mean of S against det(2 Cov) du is Vol(dP)/Vol(P).
    """
    pts = np.atleast_2d(np.asarray(u, dtype=float))
    n, m = pts.shape

    def logdet(q):
        hess = phi.hessian(q)
        if hess.ndim == 1:
            hess = hess[:, None, None]
        sign, val = np.linalg.slogdet(hess)
        if np.any(sign <= 0):
            raise FloatingPointError("metric not positive definite near evaluation point")
        return val

    def hess_fd(step):
        out = np.empty((n, m, m))
        f0 = logdet(pts)
        for i in range(m):
            ei = np.zeros(m)
            ei[i] = step
            out[:, i, i] = (logdet(pts + ei) - 2 * f0 + logdet(pts - ei)) / step**2
            for j in range(i + 1, m):
                ej = np.zeros(m)
                ej[j] = step
                out[:, i, j] = (
                    logdet(pts + ei + ej)
                    - logdet(pts + ei - ej)
                    - logdet(pts - ei + ej)
                    + logdet(pts - ei - ej)
                ) / (4 * step**2)
                out[:, j, i] = out[:, i, j]
        return out

    hess_ld = (4.0 * hess_fd(fd_step / 2) - hess_fd(fd_step)) / 3.0
    metric = phi.hessian(pts)
    if metric.ndim == 1:
        metric = metric[:, None, None]
    solved = np.linalg.solve(metric, hess_ld)
    return -np.einsum("nii->n", solved)


def scalar_curvature(phi: PotentialFunction, u, fd_step: float = 2e-3) -> float:
    """Scalar curvature at a single point; see scalar_curvature_batch."""
    return float(scalar_curvature_batch(phi, np.asarray(u, dtype=float).reshape(1, -1), fd_step)[0])


# ---------------------------------------------------------------------------
# twist potential


def psi_function(h: HermitianWeights, v, grid: QuadratureGrid):
    """Twist potential psi(u) = phi(u + v/2) - phi(u) + c of sigma = exp(v).

    The constant is fixed so the det(2 Cov)-weighted mean of e^psi equals
    N_k / (k^m Vol P).  Returns a vectorized callable; the constant is
    exposed as the `constant` attribute.
    """
    v = np.asarray(v, dtype=float).reshape(-1)
    k = h.k

    def raw(u):
        nodes, single = _as_rows(u)
        out = (
            log_bergman_density(h, nodes + 0.5 * v) - log_bergman_density(h, nodes)
        ) / k
        return out[0] if single else out

    target_mean = h.n_sections / grid.target_volume
    total = 0.0
    shift = None
    # stabilised mean of exp(raw) against the density
    raws = []
    denss = []
    for sl in _chunks(grid.nodes.shape[0]):
        _, _, _, cov = _softmax_stats(h, grid.nodes[sl])
        r = raw(grid.nodes[sl])
        raws.append(r)
        denss.append(_det2cov(cov) * grid.weights[sl])
    raw_all = np.concatenate(raws)
    dens_all = np.concatenate(denss)
    shift = raw_all.max()
    mean_raw = float(np.exp(raw_all - shift) @ dens_all) / grid.target_volume
    mean_raw *= np.exp(shift)
    if not np.isfinite(mean_raw) or mean_raw <= 0:
        raise GridValidationError("twisted density mean not finite; rebuild the grid")
    c = float(np.log(target_mean) - np.log(mean_raw))

    def psi(u):
        return raw(u) + c

    psi.constant = c
    psi.v = v
    return psi


# ---------------------------------------------------------------------------
# CSV serialization


def weights_to_csv(h: HermitianWeights) -> str:
    """Canonical CSV form: comment header with k and polytope name, then rows."""
    m = h.points.dim
    buf = io.StringIO()
    name = h.points.polytope.name if h.points.polytope is not None else ""
    buf.write(f"# k={h.k} polytope={name}\n")
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow([f"alpha_{j + 1}" for j in range(m)] + ["logw"])
    for alpha, w in zip(h.points.points, h.logw):
        writer.writerow([str(int(a)) for a in alpha] + [format(w, ".17g")])
    return buf.getvalue()


def weights_from_csv(text: str, points: LatticePointSet) -> HermitianWeights:
    lines = [ln for ln in text.splitlines() if ln and not ln.startswith("#")]
    reader = csv.reader(lines)
    header = next(reader)
    m = len(header) - 1
    if m != points.dim:
        raise ValueError(f"CSV has {m} alpha columns, lattice set has dim {points.dim}")
    rows = {tuple(int(x) for x in row[:m]): float(row[m]) for row in reader}
    logw = np.array([rows[tuple(int(a) for a in alpha)] for alpha in points.points])
    return HermitianWeights(points.k, points, logw)
