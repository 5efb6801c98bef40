"""Exact computations on Delzant moment polytopes.

A polytope is described facet-wise as ``{x : <n_i, x> + c_i >= 0}`` with
primitive integer inward normals ``n_i`` and rational offsets ``c_i``.
Everything in this module is exact: vertices, volumes, boundary measures,
the extremal affine function and the Futaki pairing are all computed with
``fractions.Fraction`` and only converted to floats at the boundary to the
numerical modules.

Conventions pinned here (and relied on everywhere else):

* the boundary measure ``dsigma`` on a facet gives a primitive lattice
  segment length 1, so for CP^1 the total boundary mass is 2 and for the
  standard simplex the mean scalar curvature is 6;
* the extremal affine function ``theta_ex`` is the unique affine function
  with ``int_P theta_ex * f = int_dP f dsigma`` for every affine ``f``; its
  mean over P is then Vol(dP)/Vol(P), the average scalar curvature;
* the Futaki pairing is ``L(f) = int_dP f dsigma - (Vol dP / Vol P) int_P f``.

Only dimensions 1 and 2 are supported; that covers every bundled fixture
(segment, simplex, trapezoid, square).
"""

from __future__ import annotations

import itertools
import json
from dataclasses import dataclass
from fractions import Fraction
from importlib import resources
from math import gcd
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

Rational = Fraction | int
ExponentKey = tuple[int, ...]


class DelzantError(ValueError):
    """The facet description does not define a valid Delzant polytope."""


# ---------------------------------------------------------------------------
# exact linear algebra helpers


def _solve_exact(matrix, rhs):
    """Solve a square rational system by Gaussian elimination; None if singular."""
    n = len(rhs)
    aug = [list(row) + [r] for row, r in zip(matrix, rhs)]
    for col in range(n):
        pivot = next((r for r in range(col, n) if aug[r][col] != 0), None)
        if pivot is None:
            return None
        aug[col], aug[pivot] = aug[pivot], aug[col]
        inv = Fraction(1, 1) / aug[col][col]
        aug[col] = [a * inv for a in aug[col]]
        for r in range(n):
            if r != col and aug[r][col] != 0:
                f = aug[r][col]
                aug[r] = [a - f * b for a, b in zip(aug[r], aug[col])]
    return tuple(aug[r][n] for r in range(n))


def _det_exact(matrix):
    n = len(matrix)
    rows = [list(map(Fraction, row)) for row in matrix]
    det = Fraction(1)
    for col in range(n):
        pivot = next((r for r in range(col, n) if rows[r][col] != 0), None)
        if pivot is None:
            return Fraction(0)
        if pivot != col:
            rows[col], rows[pivot] = rows[pivot], rows[col]
            det = -det
        det *= rows[col][col]
        inv = Fraction(1, 1) / rows[col][col]
        for r in range(col + 1, n):
            if rows[r][col] != 0:
                f = rows[r][col] * inv
                rows[r] = [a - f * b for a, b in zip(rows[r], rows[col])]
    return det


def _is_primitive(normal: Sequence[int]) -> bool:
    g = 0
    for entry in normal:
        g = gcd(g, abs(int(entry)))
    return g == 1


def _normals_span_plane(normals) -> bool:
    """True iff the 2-d integer vectors positively span R^2.

    Equivalent to the recession cone {d : <n_i, d> >= 0} being {0}, i.e. the
    polytope being bounded.  Exact test: sort the (primitive, hence distinct
    per direction) normals by angle and require every cyclic angular gap to
    be strictly less than pi.
    """
    import functools

    def half(v):
        x, y = v
        return 0 if (y > 0 or (y == 0 and x > 0)) else 1

    def cmp(a, b):
        ha, hb = half(a), half(b)
        if ha != hb:
            return -1 if ha < hb else 1
        cross = a[0] * b[1] - a[1] * b[0]
        return 0 if cross == 0 else (-1 if cross > 0 else 1)

    dirs = sorted({(int(n[0]), int(n[1])) for n in normals}, key=functools.cmp_to_key(cmp))
    if len(dirs) < 3:
        return False
    for a, b in zip(dirs, dirs[1:] + dirs[:1]):
        cross = a[0] * b[1] - a[1] * b[0]
        # ccw gap from a to b is < pi exactly when cross(a, b) > 0
        if cross <= 0:
            return False
    return True


# ---------------------------------------------------------------------------
# core types


@dataclass(frozen=True)
class AffineFunction:
    """An affine function c + <l, x> with exact rational coefficients."""

    constant: Fraction
    linear: tuple[Fraction, ...]

    @property
    def dim(self) -> int:
        return len(self.linear)

    def evaluate_exact(self, point: Sequence[Rational]) -> Fraction:
        value = Fraction(self.constant)
        for coeff, x in zip(self.linear, point):
            value += coeff * Fraction(x)
        return value

    def __call__(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        lin = np.array([float(c) for c in self.linear])
        if pts.ndim == 1:
            return float(self.constant) + pts @ lin
        return float(self.constant) + pts @ lin

    @staticmethod
    def constant_function(value: Rational, dim: int) -> "AffineFunction":
        return AffineFunction(Fraction(value), tuple(Fraction(0) for _ in range(dim)))


@dataclass(frozen=True)
class Polytope:
    """Bounded Delzant polytope {x : <n_i, x> + c_i >= 0}."""

    dim: int
    normals: tuple[tuple[int, ...], ...]
    offsets: tuple[Fraction, ...]
    vertices: tuple[tuple[Fraction, ...], ...]
    name: str = ""

    @property
    def n_facets(self) -> int:
        return len(self.normals)

    def facet_vertices(self, i: int) -> list[tuple[Fraction, ...]]:
        n, c = self.normals[i], self.offsets[i]
        active = []
        for v in self.vertices:
            if sum(Fraction(a) * b for a, b in zip(n, v)) + c == 0:
                active.append(v)
        return active

    def contains_exact(self, point: Sequence[Rational], scale: int = 1) -> bool:
        """Exact membership of `point` in scale*P."""
        for n, c in zip(self.normals, self.offsets):
            if sum(Fraction(a) * Fraction(x) for a, x in zip(n, point)) + scale * c < 0:
                return False
        return True

    def volume(self) -> Fraction:
        return interior_integral(self, {(0,) * self.dim: Fraction(1)})

    def boundary_volume(self) -> Fraction:
        return boundary_integral(self, AffineFunction.constant_function(1, self.dim))

    def mean_scalar_curvature(self) -> Fraction:
        return self.boundary_volume() / self.volume()

    def vertices_float(self) -> np.ndarray:
        return np.array([[float(x) for x in v] for v in self.vertices])


@dataclass(frozen=True)
class LatticePointSet:
    """The lattice points of k*P in canonical lexicographic order."""

    k: int
    points: np.ndarray  # (N, m) int64, read-only
    barycenter_exact: tuple[Fraction, ...]
    polytope: Polytope

    @property
    def count(self) -> int:
        return self.points.shape[0]

    @property
    def dim(self) -> int:
        return self.points.shape[1]

    @property
    def barycenter(self) -> np.ndarray:
        return np.array([float(b) for b in self.barycenter_exact])

    def centered(self) -> np.ndarray:
        """points - barycenter as floats (rows sum to ~0 per column)."""
        return self.points.astype(float) - self.barycenter

    def __len__(self) -> int:
        return self.count


# ---------------------------------------------------------------------------
# construction / validation


def _enumerate_vertices(dim, normals, offsets):
    vertices = set()
    for idx in itertools.combinations(range(len(normals)), dim):
        mat = [[Fraction(normals[i][j]) for j in range(dim)] for i in idx]
        rhs = [-offsets[i] for i in idx]
        sol = _solve_exact(mat, rhs)
        if sol is None:
            continue
        if all(
            sum(Fraction(n[j]) * sol[j] for j in range(dim)) + c >= 0
            for n, c in zip(normals, offsets)
        ):
            vertices.add(tuple(sol))
    return sorted(vertices)


def _validate_delzant(dim, normals, offsets, vertices):
    for v in vertices:
        active = [
            i
            for i, (n, c) in enumerate(zip(normals, offsets))
            if sum(Fraction(n[j]) * v[j] for j in range(dim)) + c == 0
        ]
        if len(active) != dim:
            raise DelzantError(
                f"vertex {tuple(map(str, v))} lies on {len(active)} facets, expected {dim}"
            )
        det = _det_exact([normals[i] for i in active])
        if abs(det) != 1:
            raise DelzantError(
                f"facet normals at vertex {tuple(map(str, v))} have determinant {det}, "
                "not a Z-basis"
            )


def load_polytope(source) -> Polytope:
    """Build a validated Polytope from a JSON file path, JSON text, or dict.

    The JSON schema is ``{"dim": m, "facets": [{"normal": [ints],
    "offset": "p/q"}, ...], "name": str}``.
    """
    if isinstance(source, Polytope):
        return source
    if isinstance(source, Mapping):
        data = source
    else:
        if isinstance(source, str) and source.lstrip().startswith("{"):
            text = source
        else:
            path = Path(source)
            if not path.exists():
                raise FileNotFoundError(f"polytope file not found: {source}")
            text = path.read_text()
        try:
            data = json.loads(text)
        except json.JSONDecodeError as exc:
            raise ValueError(f"invalid polytope JSON ({source}): {exc}") from exc

    try:
        dim = int(data["dim"])
        raw_facets = data["facets"]
    except KeyError as exc:
        raise ValueError(f"polytope description missing key {exc}") from exc
    if dim < 1:
        raise ValueError("polytope dim must be >= 1")
    if dim > 2:
        raise NotImplementedError("only dim <= 2 polytopes are supported")

    normals = []
    offsets = []
    for facet in raw_facets:
        normal = tuple(int(x) for x in facet["normal"])
        if len(normal) != dim:
            raise ValueError(f"normal {normal} has wrong dimension (expected {dim})")
        if not _is_primitive(normal):
            raise DelzantError(f"normal {normal} is not primitive")
        normals.append(normal)
        offsets.append(Fraction(str(facet["offset"])))

    if dim == 1:
        if not (any(n[0] > 0 for n in normals) and any(n[0] < 0 for n in normals)):
            raise DelzantError("polytope is unbounded (normals do not positively span)")
    else:
        if not _normals_span_plane(normals):
            raise DelzantError("polytope is unbounded (normals do not positively span)")

    vertices = _enumerate_vertices(dim, normals, offsets)
    if not vertices:
        raise DelzantError("polytope is empty (no vertex satisfies all facets)")
    if dim == 1 and len(vertices) < 2:
        raise DelzantError("degenerate segment")
    if dim == 2:
        if len(vertices) < 3:
            raise DelzantError("polytope is not full-dimensional")
        (x0, y0), (x1, y1), *rest = vertices
        if not any((x1 - x0) * (y - y0) - (y1 - y0) * (x - x0) != 0 for x, y in rest):
            raise DelzantError("polytope is not full-dimensional (vertices collinear)")

    # every facet must carry a full (dim-1)-face; a facet met by fewer
    # vertices is redundant or tangent and the description is rejected
    poly = Polytope(dim, tuple(normals), tuple(offsets), tuple(vertices), str(data.get("name", "")))
    needed = 1 if dim == 1 else 2
    for i in range(poly.n_facets):
        if len(poly.facet_vertices(i)) < needed:
            raise DelzantError(f"facet {i} (normal {normals[i]}) does not support a face")

    _validate_delzant(dim, normals, offsets, vertices)
    return poly


def fixture_path(name: str) -> Path:
    """Path of a bundled polytope fixture: cp1, cp2, f1, cp1xcp1."""
    candidate = name if name.endswith(".json") else f"{name}.json"
    with resources.as_file(resources.files("toricbal.fixtures") / candidate) as p:
        return Path(p)


def load_fixture(name: str) -> Polytope:
    return load_polytope(fixture_path(name))


# ---------------------------------------------------------------------------
# lattice points


def lattice_points(polytope: Polytope, k: int) -> LatticePointSet:
    """All lattice points of k*P, lexicographically sorted."""
    if k <= 0:
        raise ValueError(f"tensor power k must be positive, got {k}")
    import math

    m = polytope.dim
    lo = [min(k * v[j] for v in polytope.vertices) for j in range(m)]
    hi = [max(k * v[j] for v in polytope.vertices) for j in range(m)]
    ranges = [range(math.ceil(a), math.floor(b) + 1) for a, b in zip(lo, hi)]
    pts = [
        alpha
        for alpha in itertools.product(*ranges)
        if polytope.contains_exact(alpha, scale=k)
    ]
    if not pts:
        raise ValueError("k*P contains no lattice points")
    arr = np.array(sorted(pts), dtype=np.int64)
    arr.setflags(write=False)
    n = arr.shape[0]
    bary = tuple(Fraction(int(arr[:, j].sum()), n) for j in range(m))
    return LatticePointSet(k=k, points=arr, barycenter_exact=bary, polytope=polytope)


# ---------------------------------------------------------------------------
# exact integration


def _simplex_monomial_integral(verts, exponents):
    """Exact integral of prod x_j^{e_j} (deg <= 2) over the simplex with given vertices."""
    m = len(verts) - 1
    v0 = verts[0]
    edges = [[verts[i + 1][j] - v0[j] for j in range(m)] for i in range(m)]
    det = _det_exact(edges)
    if det == 0:
        return Fraction(0)
    scale = abs(det)

    # expand prod_j (v0_j + sum_i T_ji y_i)^{e_j} into monomials in y of deg <= 2
    poly: dict[ExponentKey, Fraction] = {(0,) * m: Fraction(1)}
    for j, e in enumerate(exponents):
        for _ in range(e):
            new: dict[ExponentKey, Fraction] = {}
            for key, coeff in poly.items():
                base = new.get(key, Fraction(0))
                new[key] = base + coeff * v0[j]
                for i in range(m):
                    t = Fraction(edges[i][j])
                    if t != 0:
                        k2 = list(key)
                        k2[i] += 1
                        k2 = tuple(k2)
                        new[k2] = new.get(k2, Fraction(0)) + coeff * t
            poly = new

    from math import factorial

    total = Fraction(0)
    for key, coeff in poly.items():
        num = Fraction(1)
        for b in key:
            num *= factorial(b)
        total += coeff * num / factorial(m + sum(key))
    return scale * total


def _ordered_boundary(polytope: Polytope):
    """Vertices of a 2-d polytope in counterclockwise boundary order."""
    verts = list(polytope.vertices)
    n = len(verts)
    cx = sum(v[0] for v in verts) / n
    cy = sum(v[1] for v in verts) / n

    import math as _math

    return sorted(verts, key=lambda v: _math.atan2(float(v[1] - cy), float(v[0] - cx)))


def interior_integral(polytope: Polytope, f) -> Fraction:
    """Exact integral over P of a polynomial of degree <= 2.

    `f` is either an AffineFunction or a mapping from exponent tuples to
    rational coefficients, e.g. ``{(0, 0): 1, (1, 0): 2, (1, 1): c}``.
    """
    m = polytope.dim
    if isinstance(f, AffineFunction):
        coeffs = {(0,) * m: Fraction(f.constant)}
        for j, c in enumerate(f.linear):
            if c != 0:
                key = tuple(1 if i == j else 0 for i in range(m))
                coeffs[key] = Fraction(c)
    else:
        coeffs = {tuple(k): Fraction(v) for k, v in f.items()}
    for key in coeffs:
        if len(key) != m or sum(key) > 2 or any(e < 0 for e in key):
            raise ValueError(f"unsupported monomial exponent {key} (degree must be <= 2)")

    if m == 1:
        a = min(v[0] for v in polytope.vertices)
        b = max(v[0] for v in polytope.vertices)
        total = Fraction(0)
        for key, c in coeffs.items():
            e = key[0]
            total += c * (b ** (e + 1) - a ** (e + 1)) / (e + 1)
        return total

    ring = _ordered_boundary(polytope)
    v0 = ring[0]
    total = Fraction(0)
    for a, b in zip(ring[1:], ring[2:]):
        for key, c in coeffs.items():
            if c != 0:
                total += c * _simplex_monomial_integral([v0, a, b], key)
    return total


def boundary_integral(polytope: Polytope, f: AffineFunction) -> Fraction:
    """Exact integral of an affine f over the boundary of P.

    The measure on the facet with primitive normal n_i is Lebesgue measure
    normalised so a primitive lattice segment has length 1; for m = 1 each
    of the two boundary vertices carries mass 1.
    """
    m = polytope.dim
    if m == 1:
        return sum((f.evaluate_exact(v) for v in polytope.vertices), Fraction(0))

    total = Fraction(0)
    for i in range(polytope.n_facets):
        ends = polytope.facet_vertices(i)
        if len(ends) != 2:
            raise DelzantError(f"facet {i} is not an edge")
        a, b = ends
        direction = [b[j] - a[j] for j in range(2)]
        # lattice length: |b - a| measured in units of the primitive integer
        # direction vector.  b - a is rational, so clear denominators first.
        denom = 1
        for d in direction:
            denom = denom * d.denominator // gcd(denom, d.denominator)
        ints = [int(d * denom) for d in direction]
        g = gcd(abs(ints[0]), abs(ints[1]))
        length = Fraction(g, denom)
        total += length * (f.evaluate_exact(a) + f.evaluate_exact(b)) / 2
    return total


# ---------------------------------------------------------------------------
# extremal affine function and Futaki pairing


def extremal_affine(polytope: Polytope) -> AffineFunction:
    """The unique affine theta with int_P theta*f = int_dP f for all affine f.

    Solves the (m+1)x(m+1) Gram system with exact rational arithmetic.  The
    mean of the result over P equals Vol(dP)/Vol(P).
    """
    m = polytope.dim

    def mono(key):
        return interior_integral(polytope, {tuple(key): Fraction(1)})

    zero = (0,) * m
    basis_keys = [zero] + [tuple(1 if i == j else 0 for i in range(m)) for j in range(m)]
    gram = [
        [mono(tuple(a + b for a, b in zip(k1, k2))) for k2 in basis_keys]
        for k1 in basis_keys
    ]
    rhs = [
        boundary_integral(
            polytope,
            AffineFunction(
                Fraction(1) if key == zero else Fraction(0),
                tuple(Fraction(1) if key[j] == 1 else Fraction(0) for j in range(m)),
            ),
        )
        for key in basis_keys
    ]
    sol = _solve_exact(gram, rhs)
    if sol is None:
        raise RuntimeError("singular Gram matrix: polytope is not full-dimensional")
    return AffineFunction(sol[0], tuple(sol[1:]))


def donaldson_futaki(polytope: Polytope, f: AffineFunction) -> Fraction:
    """Futaki pairing L(f) = int_dP f - (Vol dP / Vol P) int_P f, exact."""
    vol = polytope.volume()
    bvol = polytope.boundary_volume()
    return boundary_integral(polytope, f) - bvol / vol * interior_integral(polytope, f)


# ---------------------------------------------------------------------------
# Ehrhart counting


def ehrhart_polynomial(polytope: Polytope) -> tuple[Fraction, ...]:
    """Coefficients (c_m, ..., c_0) of the lattice-count polynomial of P.

    Determined by exact interpolation on k = 1..m+1 and verified against the
    counts for k up to 6; the polytopes in scope have integral vertices so
    the count is a true polynomial in k.
    """
    m = polytope.dim
    counts = {k: lattice_points(polytope, k).count for k in range(1, 7)}
    ks = list(range(1, m + 2))
    mat = [[Fraction(k) ** (m - j) for j in range(m + 1)] for k in ks]
    sol = _solve_exact(mat, [Fraction(counts[k]) for k in ks])
    coeffs = tuple(sol)
    for k in range(1, 7):
        predicted = sum(c * Fraction(k) ** (m - j) for j, c in enumerate(coeffs))
        if predicted != counts[k]:
            raise ValueError(
                "lattice counts are not polynomial in k (non-integral vertices?)"
            )
    return coeffs
