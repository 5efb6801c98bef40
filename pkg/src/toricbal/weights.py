"""Optimal torus twist: the convex functional G, its character, and k*v_k.

A twist sigma = exp(v), v in Lie(T^c) ~ R^m, acts on the monomial section
z^alpha with SL-centered weight lambda_alpha(v) = <alpha - alpha_bar, v>.
Given the section masses D_alpha (the softmax means of a Hermitian form),

    G(v) = sum_alpha e^{lambda_alpha(v)} D_alpha

is strictly convex and proper, so it has a unique minimizer: the optimal
weight.  Its gradient is (minus) the character

    F^sigma(a) = - sum_alpha lambda_alpha(a) e^{lambda_alpha(v)} D_alpha,

which therefore vanishes exactly at the optimal weight.  The same character
has a defining-integral form (f_character_direct below); the two routes
agree identically, which the tests exercise as a cross-check.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .polytope import LatticePointSet, Polytope
from .quantization import (
    HermitianWeights,
    QuadratureGrid,
    _as_rows,
    _chunks,
    _det2cov,
    _softmax_stats,
    log_bergman_density,
    section_means,
)

NEWTON_GRAD_TOL = 1e-12
NEWTON_MAX_ITER = 100
ARMIJO_C = 1e-4


@dataclass
class SectionMass:
    """Probability vector D_alpha = <|s_alpha|^2 / sum|s_beta|^2> over X."""

    values: np.ndarray
    points: LatticePointSet
    source: HermitianWeights | None = None

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=float)
        total = self.values.sum()
        if abs(total - 1.0) > 1e-10:
            raise ValueError(f"section masses sum to {total}, expected 1")
        if np.any(self.values <= 0):
            raise ValueError("section masses must be strictly positive")


def weight_vector(v, points: LatticePointSet) -> np.ndarray:
    """SL-centered weights lambda_alpha(v) = <alpha - alpha_bar, v>; sums to ~0."""
    v = np.asarray(v, dtype=float).reshape(-1)
    lam = points.centered() @ v
    lam -= math.fsum(lam) / lam.size
    return lam


def section_mass(h: HermitianWeights, grid: QuadratureGrid) -> SectionMass:
    d, _ = section_means(h, grid)
    return SectionMass(values=d, points=h.points, source=h)


def _lambda_log_d(d: SectionMass, v) -> np.ndarray:
    return weight_vector(v, d.points) + np.log(d.values)


def g_functional(d: SectionMass, v) -> float:
    """G(v) = sum_alpha e^{lambda_alpha(v)} D_alpha, log-sum-exp guarded."""
    x = _lambda_log_d(d, v)
    top = x.max()
    return float(np.exp(top) * np.exp(x - top).sum())


def g_gradient_hessian(d: SectionMass, v):
    a_c = d.points.centered()
    w = np.exp(_lambda_log_d(d, v))
    grad = a_c.T @ w
    hess = (a_c * w[:, None]).T @ a_c
    return grad, hess


def optimal_weight(d: SectionMass, return_info: bool = False):
    """Unique minimizer of G by Newton iteration with Armijo backtracking.

    Requires the lattice points to affinely span R^m (automatic for a
    full-dimensional Delzant polytope); then the Hessian is positive
    definite everywhere and the iteration converges globally.
    """
    m = d.points.dim
    v = np.zeros(m)
    for iteration in range(NEWTON_MAX_ITER):
        grad, hess = g_gradient_hessian(d, v)
        gnorm = float(np.linalg.norm(grad))
        if gnorm < NEWTON_GRAD_TOL:
            if return_info:
                return v, {"iterations": iteration, "grad_norm": gnorm}
            return v
        try:
            step = np.linalg.solve(hess, -grad)
        except np.linalg.LinAlgError as exc:
            raise RuntimeError(
                "singular G-Hessian: lattice points do not affinely span"
            ) from exc
        if gnorm < 1e-6:
            # quadratic basin: the Armijo decrease dips below float resolution
            # (G decrements ~ gnorm^2), plain Newton steps finish the job
            v = v + step
            continue
        g0 = g_functional(d, v)
        slope = float(grad @ step)
        t = 1.0
        while g_functional(d, v + t * step) > g0 + ARMIJO_C * t * slope and t > 1e-16:
            t *= 0.5
        v = v + t * step
    raise RuntimeError(
        f"optimal weight Newton iteration did not reach {NEWTON_GRAD_TOL} "
        f"in {NEWTON_MAX_ITER} steps"
    )


def f_character(d: SectionMass, v, a) -> float:
    """F^sigma(a) = - sum_alpha lambda_alpha(a) e^{lambda_alpha(v)} D_alpha.

    Linear in a; vanishes for every a exactly when v is the optimal weight.
    """
    lam_a = weight_vector(a, d.points)
    return float(-(lam_a * np.exp(_lambda_log_d(d, v))).sum())


def f_character_direct(
    h: HermitianWeights, v, a, grid: QuadratureGrid, fd_step: float = 5e-4
) -> float:
    """The character as its defining integral, evaluated literally.

    - theta_a(u) = sum_alpha lambda_alpha(a) p_alpha(u), the twisted-action
      potential of a;
    - Phi_v(u) = e^{-<alpha_bar, v>} B(u + v/2) / B(u), the SL-normalized
      level-k twisted density exp(psi);
    - the level-k complex Laplacian Delta_k f = -tr((2 Cov)^{-1} Hess f / 2)
      evaluated with the exact metric, Hess Phi_v by central differences.

    Returns -<theta_a (1 + Delta_k) Phi_v> against det(2 Cov) du / k^m Vol P.
    Agrees with f_character up to quadrature and finite-difference error.
    """
    v = np.asarray(v, dtype=float).reshape(-1)
    a = np.asarray(a, dtype=float).reshape(-1)
    lam_a = weight_vector(a, h.points)
    bary = h.points.barycenter
    m = h.points.dim
    center = float(bary @ v)

    def phi_v(nodes):
        return np.exp(
            log_bergman_density(h, nodes + 0.5 * v)
            - log_bergman_density(h, nodes)
            - center
        )

    total = 0.0
    hs = fd_step
    for sl in _chunks(grid.nodes.shape[0]):
        nodes = grid.nodes[sl]
        p, _, _, cov = _softmax_stats(h, nodes)
        dens = _det2cov(cov) * grid.weights[sl]
        theta_a = p @ lam_a

        base = phi_v(nodes)
        hess = np.empty((nodes.shape[0], m, m))
        for i in range(m):
            ei = np.zeros(m)
            ei[i] = hs
            hess[:, i, i] = (phi_v(nodes + ei) - 2 * base + phi_v(nodes - ei)) / hs**2
            for j in range(i + 1, m):
                ej = np.zeros(m)
                ej[j] = hs
                hess[:, i, j] = (
                    phi_v(nodes + ei + ej)
                    - phi_v(nodes + ei - ej)
                    - phi_v(nodes - ei + ej)
                    + phi_v(nodes - ei - ej)
                ) / (4 * hs**2)
                hess[:, j, i] = hess[:, i, j]

        # tr((4 Cov)^{-1} Hess) * det(2 Cov) via the adjugate: regular at the tails
        if m == 1:
            lap_times_dens = hess[:, 0, 0] / 2.0 * grid.weights[sl]
        else:
            adj = np.empty_like(cov)
            adj[:, 0, 0] = cov[:, 1, 1]
            adj[:, 1, 1] = cov[:, 0, 0]
            adj[:, 0, 1] = -cov[:, 0, 1]
            adj[:, 1, 0] = -cov[:, 1, 0]
            tr_adj = np.einsum("nij,nji->n", adj, hess)
            lap_times_dens = tr_adj * grid.weights[sl]
        integrand = theta_a * (base * dens - lap_times_dens)
        total += float(integrand.sum())
    return -total / grid.target_volume


def quantized_field(polytope: Polytope, k: int, solver_handle) -> np.ndarray:
    """k * v_k for the converged twisted-balanced solve produced by solver_handle.

    solver_handle(polytope, k) must return an iteration state with attributes
    `converged` and `v`; non-convergence propagates as a RuntimeError.
    """
    state = solver_handle(polytope, k)
    if not state.converged:
        raise RuntimeError(f"solve for k={k} did not converge (residual {state.residuals[-1]:.3e})")
    return k * np.asarray(state.v, dtype=float)
