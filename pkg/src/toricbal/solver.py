"""The twisted Donaldson fixed-point iteration and its diagnostics.

One step of the plain iteration replaces a Hermitian form H by its Hilb
image (SL-normalized); the twisted step additionally rescales section alpha
by e^{lambda_alpha(v)}.  A form is a twisted-balanced fixed point exactly
when the diagonal ratios e^{lambda_alpha} hilb(H)_aa / H_aa are constant,
and the solver's convergence measure is the relative operator norm of their
trace-free part -- the moment-map residual.  In auto mode the twist v is
re-optimized from the current section masses every step, so the returned
pair (H, v) is simultaneously a fixed point and a critical point of G.

No acceleration is applied; the iteration is the plain fixed-point map so
the trajectory is the discrete dynamical system itself.
"""

from __future__ import annotations

import json
import time
from dataclasses import dataclass, field

import numpy as np

from .polytope import LatticePointSet, Polytope, lattice_points
from .quantization import (
    GridValidationError,
    HermitianWeights,
    QuadratureGrid,
    auto_radius,
    hilb,
    make_grid,
    random_weights,
    section_means,
    weights_to_csv,
)
from .weights import f_character, optimal_weight, weight_vector

MODES = ("plain", "fixed_sigma", "auto_sigma")


@dataclass
class SolverConfig:
    mode: str = "plain"
    tol: float = 1e-8
    max_iter: int = 2000
    grid_resolution: int | None = None
    grid_radius: float | str = "auto"
    weight_update_period: int = 1
    sigma: np.ndarray | None = None  # fixed_sigma: the twist vector v
    seed: int = 0
    threads: int | None = None

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValueError(f"mode must be one of {MODES}, got {self.mode!r}")
        if self.tol <= 0:
            raise ValueError("tol must be positive")
        if self.max_iter < 1:
            raise ValueError("max_iter must be >= 1")
        if self.weight_update_period < 1:
            raise ValueError("weight_update_period must be >= 1")
        if self.mode == "fixed_sigma" and self.sigma is None:
            raise ValueError("fixed_sigma mode needs a sigma vector")


@dataclass
class IterationState:
    """Solver trajectory snapshot: final form, twist, and diagnostics."""

    h: HermitianWeights
    v: np.ndarray
    residuals: list[float]
    iterations: int
    converged: bool
    mode: str
    k: int
    seed: int | None = None
    f_max: float = np.nan
    sup_twisted: float = np.nan
    inf_twisted: float = np.nan
    runtime_s: float = np.nan
    history: list[tuple] = field(default_factory=list)  # (iter, residual, *v, sup, inf)

    @property
    def residual(self) -> float:
        return self.residuals[-1] if self.residuals else np.nan


# ---------------------------------------------------------------------------
# single steps


def t_step(h: HermitianWeights, grid: QuadratureGrid) -> HermitianWeights:
    """One plain iteration step: SL-normalized hilb(H)."""
    return hilb(h, grid).sl_normalized()


def sigma_step(h: HermitianWeights, v, grid: QuadratureGrid) -> HermitianWeights:
    """One twisted step: SL-normalize(e^{lambda(v)} hilb(H)); v = 0 is t_step."""
    lam = weight_vector(v, h.points)
    stepped = hilb(h, grid)
    return HermitianWeights(h.k, h.points, stepped.logw + lam).sl_normalized()


def _residual_from_masses(d: np.ndarray, lam: np.ndarray) -> float:
    x = lam + np.log(d)
    ratios = np.exp(x - x.max())
    mean = ratios.mean()
    return float(np.max(np.abs(ratios - mean)) / mean)


def residual(h: HermitianWeights, v, grid: QuadratureGrid) -> float:
    """Moment-map residual: relative sup-deviation of e^{lambda} hilb(H)/H.

    Zero exactly at a twisted-balanced fixed point; invariant under scaling
    of H and under the gauge translations.
    """
    d, _ = section_means(h, grid)
    return _residual_from_masses(d, weight_vector(v, h.points))


def twisted_bergman_range(
    h: HermitianWeights,
    v,
    d: np.ndarray,
    grid: QuadratureGrid,
    p_matrix: np.ndarray | None = None,
):
    """(sup, inf) over the grid of the twisted Bergman density.

    rho_tw(u) = sum_alpha e^{-lambda_alpha} p_alpha(u) / D_alpha; constant at
    a twisted-balanced point, with sup/inf - 1 of the order of the residual.
    """
    lam = weight_vector(v, h.points)
    coeff = np.exp(-lam - np.log(d))
    if p_matrix is not None:
        vals = p_matrix @ coeff
        return float(vals.max()), float(vals.min())
    from .quantization import _chunks, _softmax_stats

    sup, inf = -np.inf, np.inf
    for sl in _chunks(grid.nodes.shape[0]):
        p, _, _, _ = _softmax_stats(h, grid.nodes[sl])
        vals = p @ coeff
        sup = max(sup, float(vals.max()))
        inf = min(inf, float(vals.min()))
    return sup, inf


# ---------------------------------------------------------------------------
# the solve loop


def solve(
    polytope: Polytope,
    k: int,
    cfg: SolverConfig | None = None,
    initial: HermitianWeights | None = None,
) -> IterationState:
    """Iterate the (twisted) fixed-point map until the residual drops below tol.

    Non-convergence is not an error: the returned state carries the full
    residual history with converged=False.  In auto mode the twist is
    re-optimized from the current section masses every weight_update_period
    steps, and the final state additionally satisfies the first-order
    optimality max_a |F(a)| below the Newton tolerance.
    """
    cfg = cfg or SolverConfig()
    if k < 1:
        raise ValueError("k must be >= 1")
    t_start = time.perf_counter()
    pts = lattice_points(polytope, k)
    if initial is not None:
        if initial.k != k or initial.n_sections != pts.count:
            raise ValueError("initial weights do not match the lattice set")
        h = initial.sl_normalized()
    else:
        h = random_weights(pts, cfg.seed)
    m = pts.dim

    if cfg.mode == "fixed_sigma":
        v = np.asarray(cfg.sigma, dtype=float).reshape(m).copy()
    else:
        v = np.zeros(m)

    grid: QuadratureGrid | None = None
    residuals: list[float] = []
    history: list[tuple] = []
    converged = False
    d = np.full(pts.count, 1.0 / pts.count)
    iterations = 0
    design = _affine_design(pts)
    # refinements after a failed validation persist for a while, then the
    # default step is retried (iterates smooth out as they converge)
    step_override: float | None = None
    radius_margin = 0.0
    refined_until = -1

    def degauge(weights: HermitianWeights) -> HermitianWeights:
        """Subtract the affine-in-alpha (gauge) part of the log-weights.

        The section masses are exactly gauge-invariant and the gauge part is
        a pure translation in u, so quadrature always runs on the centered,
        minimal-spread representative; obstructed runs drift along the gauge
        orbit without ever growing the grid.
        """
        coef, *_ = np.linalg.lstsq(design, weights.logw, rcond=None)
        return HermitianWeights(k, pts, weights.logw - design @ coef)

    def build_grid(h_eval: HermitianWeights) -> QuadratureGrid:
        radius = (
            auto_radius(h_eval, radius_margin + 0.5)
            if cfg.grid_radius == "auto"
            else float(cfg.grid_radius)
        )
        res = cfg.grid_resolution
        if res is None and step_override is not None:
            res = int(np.ceil(2.0 * radius / step_override)) + 1
        return make_grid(h_eval, resolution=res, radius=radius, validate=False)

    for it in range(cfg.max_iter):
        iterations = it + 1
        h_eval = degauge(h)
        if cfg.grid_resolution is None and step_override is not None and it > refined_until:
            # iterates smooth out as the run progresses: retry the default
            # step (a failure below re-refines at the cost of one pass)
            step_override = None
            grid = None
        if grid is None or (
            cfg.grid_radius == "auto"
            and auto_radius(h_eval, radius_margin) > grid.truncation_radius
        ):
            grid = build_grid(h_eval)
        for attempt in range(4):
            try:
                d, p_matrix = section_means(h_eval, grid, keep_matrix=True)
                break
            except GridValidationError as exc:
                tail = "tail" in str(exc)
                can_grow = cfg.grid_radius == "auto"
                can_refine = cfg.grid_resolution is None
                if attempt == 3 or (tail and not can_grow) or (not tail and not can_refine):
                    raise
                if tail:
                    radius_margin += 3.0
                else:
                    step_override = grid.step / 1.45
                    refined_until = it + 24
                grid = build_grid(h_eval)

        if cfg.mode == "auto_sigma" and it % cfg.weight_update_period == 0:
            from .weights import SectionMass

            v = optimal_weight(SectionMass(values=d, points=pts, source=h))

        lam = weight_vector(v, pts)
        res = _residual_from_masses(d, lam)
        residuals.append(res)
        if p_matrix is not None:
            sup_tw, inf_tw = twisted_bergman_range(h_eval, v, d, grid, p_matrix)
        else:
            sup_tw, inf_tw = np.nan, np.nan
        history.append((it, res, *v.tolist(), sup_tw, inf_tw))

        if res < cfg.tol:
            converged = True
            break

        # twisted step from the quantities already computed:
        # logw' = lambda + log hilb = lambda + logw + log D + log N, SL-normalized
        new_logw = h.logw + lam + np.log(d)
        h = HermitianWeights(k, pts, new_logw - new_logw.mean())

    if np.isnan(history[-1][-1]):
        sup_tw, inf_tw = twisted_bergman_range(h_eval, v, d, grid)
        history[-1] = history[-1][:-2] + (sup_tw, inf_tw)
    else:
        sup_tw, inf_tw = history[-1][-2], history[-1][-1]

    from .weights import SectionMass

    mass = SectionMass(values=d, points=pts, source=h)
    f_max = max(abs(f_character(mass, v, e)) for e in np.eye(m))

    return IterationState(
        h=h,
        v=v,
        residuals=residuals,
        iterations=iterations,
        converged=converged,
        mode=cfg.mode,
        k=k,
        seed=None if initial is not None else cfg.seed,
        f_max=f_max,
        sup_twisted=sup_tw,
        inf_twisted=inf_tw,
        runtime_s=time.perf_counter() - t_start,
        history=history,
    )


# ---------------------------------------------------------------------------
# gauge and splitting diagnostics


def _affine_design(points: LatticePointSet) -> np.ndarray:
    return np.hstack([np.ones((points.count, 1)), points.points.astype(float)])


def gauge_compare(h1: HermitianWeights, h2: HermitianWeights) -> float:
    """Sup-norm distance between two forms modulo the exact gauge freedom.

    The gauge group (torus translations and rescaling) acts on log-weights by
    adding affine functions of alpha; the difference is fitted by least
    squares over [1, alpha] and the sup-norm of the fit residual returned.
    """
    if h1.k != h2.k or h1.n_sections != h2.n_sections:
        raise ValueError("weights live on different lattice sets")
    diff = h1.logw - h2.logw
    design = _affine_design(h1.points)
    coef, *_ = np.linalg.lstsq(design, diff, rcond=None)
    return float(np.max(np.abs(diff - design @ coef)))


def split_check(h: HermitianWeights, p1: Polytope, p2: Polytope):
    """Additive-splitting defect of weights on a product polytope.

    Fits logw_(a1,a2) = f(a1) + g(a2) by least squares and returns
    (sup residual, factor weights on p1, factor weights on p2).  Zero
    residual means H is a tensor product, i.e. the metric splits.
    """
    k = h.k
    pts1 = lattice_points(p1, k)
    pts2 = lattice_points(p2, k)
    m1 = pts1.dim
    prod_pts = {tuple(a) for a in h.points.points}
    expected = {
        tuple(a) + tuple(b) for a in pts1.points.tolist() for b in pts2.points.tolist()
    }
    if prod_pts != expected:
        raise ValueError("polytope of H is not the declared product")

    index1 = {tuple(a): i for i, a in enumerate(pts1.points.tolist())}
    index2 = {tuple(b): j for j, b in enumerate(pts2.points.tolist())}
    table = np.empty((pts1.count, pts2.count))
    for row, alpha in zip(h.logw, h.points.points.tolist()):
        table[index1[tuple(alpha[:m1])], index2[tuple(alpha[m1:])]] = row

    row_means = table.mean(axis=1)
    col_means = table.mean(axis=0)
    grand = table.mean()
    fitted = row_means[:, None] + col_means[None, :] - grand
    defect = float(np.max(np.abs(table - fitted)))
    f1 = HermitianWeights(k, pts1, row_means - row_means.mean())
    f2 = HermitianWeights(k, pts2, col_means - col_means.mean())
    return defect, f1, f2


# ---------------------------------------------------------------------------
# report files


def write_run_log(state: IterationState, path) -> None:
    m = len(state.v)
    cols = ["iter", "residual"] + [f"v_{j + 1}" for j in range(m)]
    cols += ["sup_twisted_bergman", "inf_twisted_bergman"]
    lines = [",".join(cols)]
    for row in state.history:
        lines.append(
            ",".join(
                [str(row[0])] + [format(x, ".17g") for x in row[1:]]
            )
        )
    with open(path, "w") as fh:
        fh.write("\n".join(lines) + "\n")


def summary_dict(state: IterationState, extra: dict | None = None) -> dict:
    out = {
        "k": state.k,
        "mode": state.mode,
        "converged": bool(state.converged),
        "iterations": state.iterations,
        "residual": state.residual,
        "v": [float(x) for x in state.v],
        "kv": [float(state.k * x) for x in state.v],
        "seed": state.seed,
        "f_max": None if np.isnan(state.f_max) else float(state.f_max),
        "sup_twisted_bergman": float(state.sup_twisted),
        "inf_twisted_bergman": float(state.inf_twisted),
        "runtime_s": float(state.runtime_s),
    }
    if extra:
        out.update(extra)
    return out


def write_summary(state: IterationState, path, extra: dict | None = None) -> None:
    with open(path, "w") as fh:
        json.dump(summary_dict(state, extra), fh, indent=2, sort_keys=True)
        fh.write("\n")


def write_weights(state: IterationState, path) -> None:
    with open(path, "w") as fh:
        fh.write(weights_to_csv(state.h))
