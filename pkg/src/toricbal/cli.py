"""Experiment runner: lattice counts, solves, weight sweeps, Bergman checks.

Configuration comes from flags, optionally seeded by a JSON config file
(--config); explicit flags win.  Every command writes CSV reports plus a
JSON summary into --out and is deterministic given (config, seed) at a
fixed thread count.  Exit codes: 0 success, 1 usage or configuration
error, 2 numerical non-convergence or a failed numerical assertion.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .polytope import (
    Polytope,
    ehrhart_polynomial,
    extremal_affine,
    fixture_path,
    lattice_points,
    load_polytope,
)
from .quantization import (
    bergman_function,
    fs_potential,
    make_grid,
    perturbed_cp1_potential,
    potential_grid,
    psi_function,
    quantize_potential,
    round_potential,
    scalar_curvature_batch,
)
from .solver import (
    SolverConfig,
    solve,
    summary_dict,
    write_run_log,
    write_summary,
    write_weights,
)
from .weights import SectionMass, f_character, g_gradient_hessian, section_mass

EXIT_OK = 0
EXIT_USAGE = 1
EXIT_NUMERIC = 2


def _fmt(x) -> str:
    return format(float(x), ".17g")


def _parse_k_range(spec: str) -> list[int]:
    if ".." in spec:
        parts = spec.split("..")
        if len(parts) == 2:
            a, b, step = int(parts[0]), int(parts[1]), 1
        elif len(parts) == 3:
            a, b, step = int(parts[0]), int(parts[1]), int(parts[2])
        else:
            raise ValueError(f"bad k range {spec!r}")
        ks = list(range(a, b + 1, step))
    else:
        ks = [int(spec)]
    if not ks or any(k < 1 for k in ks) or ks != sorted(ks):
        raise ValueError(f"k range must be nonempty and increasing, got {spec!r}")
    return ks


def _resolve_polytope(arg: str) -> Polytope:
    path = Path(arg)
    if not path.exists():
        # bare fixture names are a convenience: cp1, cp2, f1, cp1xcp1
        try:
            path = fixture_path(arg)
        except (FileNotFoundError, ModuleNotFoundError):
            pass
    return load_polytope(path)


def _solver_config(args, mode: str | None = None) -> SolverConfig:
    sigma = None
    if args.sigma is not None:
        sigma = np.array([float(x) for x in args.sigma.split(",")])
    return SolverConfig(
        mode=(mode or args.mode).replace("-", "_"),
        tol=args.tol,
        max_iter=args.max_iter,
        grid_resolution=args.grid_res,
        grid_radius="auto" if args.grid_radius == "auto" else float(args.grid_radius),
        sigma=sigma,
        seed=args.seed,
        threads=args.threads,
    )


def _out_dir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_csv(path: Path, header: list[str], rows: list[list]) -> None:
    lines = [",".join(header)]
    for row in rows:
        lines.append(",".join(x if isinstance(x, str) else _fmt(x) for x in row))
    path.write_text("\n".join(lines) + "\n")


# ---------------------------------------------------------------------------
# commands


def cmd_lattice(args) -> int:
    poly = _resolve_polytope(args.polytope)
    ks = _parse_k_range(args.k)
    m = poly.dim
    vol = float(poly.volume())
    bvol = float(poly.boundary_volume())
    coeffs = ehrhart_polynomial(poly)
    rows = []
    for k in ks:
        n_k = lattice_points(poly, k).count
        prediction = vol * k**m + 0.5 * bvol * k ** (m - 1)
        rows.append([str(k), str(n_k), _fmt(prediction), _fmt(n_k - prediction)])
    out = _out_dir(args)
    _write_csv(out / "lattice.csv", ["k", "N_k", "prediction", "gap"], rows)
    with open(out / "lattice_summary.json", "w") as fh:
        json.dump(
            {
                "polytope": poly.name,
                "volume": vol,
                "boundary_volume": bvol,
                "ehrhart_coefficients": [str(c) for c in coeffs],
                "threads": args.threads,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    for row in rows:
        print("  ".join(row))
    return EXIT_OK


def cmd_solve(args) -> int:
    poly = _resolve_polytope(args.polytope)
    ks = _parse_k_range(args.k)
    cfg = _solver_config(args)
    out = _out_dir(args)
    all_converged = True
    for k in ks:
        state = solve(poly, k, cfg)
        write_run_log(state, out / f"run_k{k}.csv")
        write_weights(state, out / f"weights_k{k}.csv")
        write_summary(state, out / f"summary_k{k}.json", extra={"polytope": poly.name, "threads": args.threads})
        all_converged = all_converged and state.converged
        print(
            f"k={k} mode={state.mode} converged={state.converged} "
            f"iterations={state.iterations} residual={state.residual:.3e} "
            f"v={np.array2string(state.v, precision=8)}"
        )
    return EXIT_OK if all_converged else EXIT_NUMERIC


def cmd_weights(args) -> int:
    poly = _resolve_polytope(args.polytope)
    ks = _parse_k_range(args.k)
    if len(ks) < 3:
        raise ValueError("need at least 3 k-values to assess the k v_k trend")
    cfg = _solver_config(args, mode="auto_sigma")
    out = _out_dir(args)
    m = poly.dim
    theta = extremal_affine(poly)
    theta_lin = np.array([float(c) for c in theta.linear])

    rows = []
    kv_list = []
    prev = None
    ok = True
    for k in ks:
        initial = None
        if prev is not None and args.warm_start:
            initial = quantize_potential(fs_potential(prev.h), k, lattice_points(poly, k))
        state = solve(poly, k, cfg, initial=initial)
        ok = ok and state.converged
        d = section_mass(state.h, make_grid(state.h))
        grad, _ = g_gradient_hessian(d, state.v)
        kv = k * state.v
        kv_list.append(kv)
        rows.append(
            [str(k), str(state.h.n_sections)]
            + [_fmt(x) for x in state.v]
            + [_fmt(x) for x in kv]
            + [_fmt(np.linalg.norm(grad)), _fmt(state.f_max)]
        )
        prev = state
        print(
            f"k={k} converged={state.converged} kv={np.array2string(kv, precision=8)} "
            f"F_max={state.f_max:.2e}"
        )
    header = (
        ["k", "N_k"]
        + [f"v_{j + 1}" for j in range(m)]
        + [f"kv_{j + 1}" for j in range(m)]
        + ["grad_norm", "F_max"]
    )
    _write_csv(out / "weights_report.csv", header, rows)

    kv_arr = np.array(kv_list)
    deltas = np.linalg.norm(np.diff(kv_arr, axis=0), axis=1)
    cauchy = bool(np.all(np.diff(deltas) <= 1e-12 + 0.0 * deltas[1:])) if len(deltas) > 1 else True
    cauchy = bool(np.all(deltas[1:] <= deltas[:-1] + 1e-12))
    # empirical ratio of k v_k to the extremal affine slope, where nonzero
    kappas = []
    if np.linalg.norm(theta_lin) > 1e-12:
        j = int(np.argmax(np.abs(theta_lin)))
        kappas = [float(kv[j] / theta_lin[j]) for kv in kv_arr]
    summary = {
        "polytope": poly.name,
        "k": ks,
        "kv": [list(map(float, kv)) for kv in kv_arr],
        "delta_kv": list(map(float, deltas)),
        "cauchy_decreasing": cauchy,
        "theta_ex_linear": list(map(float, theta_lin)),
        "kappa": kappas,
        "converged": ok,
        "threads": args.threads,
    }
    with open(out / "weights_summary.json", "w") as fh:
        json.dump(summary, fh, indent=2, sort_keys=True)
        fh.write("\n")
    if not ok or not cauchy:
        return EXIT_NUMERIC
    return EXIT_OK


def _background_potential(args, poly: Polytope):
    if args.background == "round":
        return round_potential(poly)
    if args.background == "perturbed":
        if poly.dim != 1:
            raise ValueError("perturbed background is defined for the segment only")
        return perturbed_cp1_potential(args.bump_amp)
    raise ValueError(f"unknown background {args.background!r}")


def cmd_bergman_fit(args) -> int:
    poly = _resolve_polytope(args.polytope)
    ks = _parse_k_range(args.k)
    phi = _background_potential(args, poly)
    out = _out_dir(args)
    m = poly.dim
    rows = []
    prev_err = None
    ratios = []
    for k in ks:
        pts = lattice_points(poly, k)
        grid = potential_grid(phi, k, pts, resolution=args.grid_res)
        rho = bergman_function(phi, k, grid, pts)
        mask = np.max(np.abs(grid.nodes), axis=1) <= min(5.0, grid.truncation_radius - 1)
        s_half = 0.5 * scalar_curvature_batch(phi, grid.nodes[mask])
        a1_fit = (rho[mask] - float(k) ** m) / float(k) ** (m - 1)
        dev0 = float(np.max(np.abs(rho[mask] - float(k) ** m - s_half * float(k) ** (m - 1))))
        a1_err = float(np.max(np.abs(a1_fit - s_half)))
        rel = a1_err / max(1e-300, float(np.max(np.abs(s_half))))
        ratio = a1_err / prev_err if prev_err else np.nan
        if prev_err:
            ratios.append(ratio)
        prev_err = a1_err
        rows.append([str(k), _fmt(dev0), _fmt(a1_err), _fmt(rel), _fmt(ratio)])
        print(f"k={k} max|rho - leading|={dev0:.3e} max|A1 - S/2|={a1_err:.3e} ratio={ratio:.3f}")
    _write_csv(
        out / "bergman_fit.csv",
        ["k", "max_dev_leading", "a1_max_err", "a1_rel_err", "decay_ratio"],
        rows,
    )
    with open(out / "bergman_summary.json", "w") as fh:
        json.dump(
            {
                "polytope": poly.name,
                "background": args.background,
                "k": ks,
                "decay_ratios": [float(r) for r in ratios],
                "threads": args.threads,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    return EXIT_OK


def cmd_b1_check(args) -> int:
    poly = _resolve_polytope(args.polytope)
    ks = _parse_k_range(args.k)
    if len(ks) < 2:
        raise ValueError("b1-check needs converged solves for at least 2 values of k")
    cfg = _solver_config(args, mode="auto_sigma")
    out = _out_dir(args)
    theta = extremal_affine(poly)
    rows = []
    errs = []
    ok = True
    prev = None
    for k in ks:
        initial = None
        if prev is not None and args.warm_start:
            initial = quantize_potential(fs_potential(prev.h), k, lattice_points(poly, k))
        state = solve(poly, k, cfg, initial=initial)
        ok = ok and state.converged
        prev = state
        v = np.zeros(poly.dim) if args.zero_twist else state.v
        grid = make_grid(state.h)
        psi = psi_function(state.h, v, grid)
        from .quantization import _det2cov, _softmax_stats

        _, _, moment, cov = _softmax_stats(state.h, grid.nodes)
        dens = _det2cov(cov) * grid.weights
        mask = dens > 1e-8 * dens.max()
        e_k = k * (np.exp(psi(grid.nodes[mask])) - 1.0) - 0.5 * theta(moment[mask] / k)
        err = float(np.max(np.abs(e_k)))
        errs.append(err)
        rows.append([str(k), _fmt(err), _fmt(state.residual)])
        print(f"k={k} max|e_k|={err:.4e} (converged={state.converged})")
    decreasing = bool(errs[-1] < errs[0])
    _write_csv(out / "b1_check.csv", ["k", "max_e_k", "solve_residual"], rows)
    with open(out / "b1_summary.json", "w") as fh:
        json.dump(
            {
                "polytope": poly.name,
                "k": ks,
                "max_e_k": errs,
                "decreasing": decreasing,
                "zero_twist": bool(args.zero_twist),
                "threads": args.threads,
            },
            fh,
            indent=2,
            sort_keys=True,
        )
        fh.write("\n")
    if not ok or (not decreasing and not args.zero_twist):
        return EXIT_NUMERIC
    return EXIT_OK


# ---------------------------------------------------------------------------
# argument plumbing


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="toricbal",
        description="balanced and twisted-balanced metrics on toric manifolds",
    )
    parser.add_argument("--config", help="JSON file with default flag values")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, needs_solver=True):
        p.add_argument("--polytope", required=True, help="polytope JSON path or fixture name")
        p.add_argument("--k", required=True, help="INT or A..B[..STEP]")
        p.add_argument("--out", default="out", help="output directory")
        p.add_argument("--seed", type=int, default=0)
        p.add_argument("--threads", type=int, default=None)
        p.add_argument("--grid-res", dest="grid_res", type=int, default=None)
        p.add_argument("--grid-radius", dest="grid_radius", default="auto")
        if needs_solver:
            p.add_argument(
                "--mode",
                choices=["plain", "fixed-sigma", "auto-sigma"],
                default="plain",
            )
            p.add_argument("--sigma", default=None, help="v1,...,vm for fixed-sigma")
            p.add_argument("--tol", type=float, default=1e-8)
            p.add_argument("--max-iter", dest="max_iter", type=int, default=2000)
            p.add_argument(
                "--no-warm-start",
                dest="warm_start",
                action="store_false",
                help="disable warm starts in k sweeps",
            )

    p = sub.add_parser("lattice", help="lattice counts vs the Ehrhart prediction")
    common(p, needs_solver=False)

    p = sub.add_parser("solve", help="run the fixed-point iteration")
    common(p)

    p = sub.add_parser("weights", help="optimal twist sweep: k v_k trend report")
    common(p)

    p = sub.add_parser("bergman-fit", help="Bergman density against k + S/2")
    common(p, needs_solver=False)
    p.add_argument("--background", choices=["round", "perturbed"], default="round")
    p.add_argument("--bump-amp", dest="bump_amp", type=float, default=0.05)

    p = sub.add_parser("b1-check", help="subleading twist coefficient check")
    common(p)
    p.add_argument("--zero-twist", dest="zero_twist", action="store_true",
                   help="negative control: force v = 0 in the twist potential")
    return parser


def _apply_config_file(parser, argv):
    """Seed parser defaults from --config JSON; explicit flags still win."""
    probe = argparse.ArgumentParser(add_help=False)
    probe.add_argument("--config")
    known, _ = probe.parse_known_args(argv)
    if not known.config:
        return
    path = Path(known.config)
    if not path.exists():
        raise FileNotFoundError(f"config file not found: {known.config}")
    data = json.loads(path.read_text())
    if not isinstance(data, dict):
        raise ValueError("config file must hold a JSON object")
    # apply to every subparser that knows the key
    for action in parser._subparsers._group_actions[0].choices.values():  # noqa: SLF001
        keys = {a.dest for a in action._actions}  # noqa: SLF001
        action.set_defaults(**{k: v for k, v in data.items() if k in keys})


COMMANDS = {
    "lattice": cmd_lattice,
    "solve": cmd_solve,
    "weights": cmd_weights,
    "bergman-fit": cmd_bergman_fit,
    "b1-check": cmd_b1_check,
}


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = _build_parser()
    try:
        _apply_config_file(parser, argv)
        try:
            args = parser.parse_args(argv)
        except SystemExit as exc:
            return EXIT_USAGE if exc.code not in (0, None) else EXIT_OK
        runner = COMMANDS[args.command]
        if getattr(args, "threads", None):
            try:
                from threadpoolctl import threadpool_limits

                with threadpool_limits(limits=args.threads):
                    return runner(args)
            except ImportError:
                pass
        return runner(args)
    except (ValueError, FileNotFoundError, NotImplementedError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
