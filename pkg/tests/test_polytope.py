from fractions import Fraction

import numpy as np
import pytest

from toricbal.polytope import (
    AffineFunction,
    DelzantError,
    boundary_integral,
    donaldson_futaki,
    ehrhart_polynomial,
    extremal_affine,
    interior_integral,
    lattice_points,
    load_fixture,
    load_polytope,
)

F = Fraction


@pytest.fixture(scope="module")
def cp1():
    return load_fixture("cp1")


@pytest.fixture(scope="module")
def cp2():
    return load_fixture("cp2")


@pytest.fixture(scope="module")
def f1():
    return load_fixture("f1")


@pytest.fixture(scope="module")
def square():
    return load_fixture("cp1xcp1")


def affine(const, *linear):
    return AffineFunction(F(const), tuple(F(x) for x in linear))


class TestLoad:
    def test_segment_vertices(self, cp1):
        assert cp1.vertices == ((F(0),), (F(1),))

    def test_simplex_vertices(self, cp2):
        assert set(cp2.vertices) == {(F(0), F(0)), (F(1), F(0)), (F(0), F(1))}

    def test_trapezoid_vertices(self, f1):
        assert set(f1.vertices) == {
            (F(0), F(0)),
            (F(2), F(0)),
            (F(1), F(1)),
            (F(0), F(1)),
        }

    def test_non_primitive_normal_rejected(self):
        bad = {"dim": 1, "facets": [{"normal": [2], "offset": "0"}, {"normal": [-1], "offset": "1"}]}
        with pytest.raises(DelzantError, match="primitive"):
            load_polytope(bad)

    def test_unbounded_rejected(self):
        bad = {"dim": 2, "facets": [{"normal": [1, 0], "offset": "0"}, {"normal": [0, 1], "offset": "0"}]}
        with pytest.raises(DelzantError, match="unbounded"):
            load_polytope(bad)

    def test_empty_rejected(self):
        bad = {
            "dim": 1,
            "facets": [{"normal": [1], "offset": "-2"}, {"normal": [-1], "offset": "1"}],
        }
        with pytest.raises(DelzantError, match="empty"):
            load_polytope(bad)

    def test_non_delzant_vertex_reported(self):
        # triangle (0,0), (1,0), (0,2): normals at (1,0) are not a Z-basis
        bad = {
            "dim": 2,
            "facets": [
                {"normal": [1, 0], "offset": "0"},
                {"normal": [0, 1], "offset": "0"},
                {"normal": [-2, -1], "offset": "2"},
            ],
        }
        with pytest.raises(DelzantError, match="determinant"):
            load_polytope(bad)

    def test_vertices_rederived_exactly(self, f1):
        again = load_polytope(
            {
                "dim": 2,
                "facets": [
                    {"normal": list(n), "offset": str(c)}
                    for n, c in zip(f1.normals, f1.offsets)
                ],
            }
        )
        assert again.vertices == f1.vertices


class TestLattice:
    def test_segment_k3(self, cp1):
        pts = lattice_points(cp1, 3)
        assert pts.points[:, 0].tolist() == [0, 1, 2, 3]
        assert pts.count == 4

    def test_simplex_k2(self, cp2):
        assert lattice_points(cp2, 2).count == 6

    def test_trapezoid_k1(self, f1):
        pts = lattice_points(f1, 1)
        assert [tuple(p) for p in pts.points] == [(0, 0), (0, 1), (1, 0), (1, 1), (2, 0)]
        # Pick: A + B/2 + 1 = 3/2 + 5/2 + 1 = 5
        assert pts.count == 5

    def test_k_must_be_positive(self, cp1):
        with pytest.raises(ValueError):
            lattice_points(cp1, 0)

    def test_product_lattice_is_cartesian(self, cp1, square):
        for k in (1, 2, 3):
            seg = [p[0] for p in lattice_points(cp1, k).points]
            prod = {tuple(p) for p in lattice_points(square, k).points}
            assert prod == {(a, b) for a in seg for b in seg}

    def test_barycenter_exact(self, cp1):
        pts = lattice_points(cp1, 2)
        assert pts.barycenter_exact == (F(1),)
        assert np.allclose(pts.centered().sum(axis=0), 0.0)


class TestIntegrals:
    def test_unit_square_volume(self, square):
        assert interior_integral(square, {(0, 0): 1}) == 1

    def test_segment_x(self, cp1):
        assert interior_integral(cp1, {(1,): 1}) == F(1, 2)

    def test_trapezoid_y(self, f1):
        assert interior_integral(f1, {(0, 1): 1}) == F(2, 3)

    def test_trapezoid_quadratics(self, f1):
        # direct slicing: int_0^1 dy int_0^{2-y} dx of each monomial
        assert interior_integral(f1, {(0, 0): 1}) == F(3, 2)
        assert interior_integral(f1, {(1, 0): 1}) == F(7, 6)
        assert interior_integral(f1, {(2, 0): 1}) == F(5, 4)
        assert interior_integral(f1, {(1, 1): 1}) == F(11, 24)
        assert interior_integral(f1, {(0, 2): 1}) == F(5, 12)

    def test_degree_cap(self, cp1):
        with pytest.raises(ValueError):
            interior_integral(cp1, {(3,): 1})

    def test_boundary_segment(self, cp1):
        assert boundary_integral(cp1, affine(1)) == 2

    def test_boundary_trapezoid_total(self, f1):
        assert boundary_integral(f1, affine(1, 0, 0)) == 5

    def test_boundary_trapezoid_y(self, f1):
        assert boundary_integral(f1, affine(0, 0, 1)) == 2


class TestExtremal:
    def test_segment_constant_two(self, cp1):
        theta = extremal_affine(cp1)
        assert theta.constant == 2 and theta.linear == (F(0),)

    def test_simplex_constant_six(self, cp2):
        theta = extremal_affine(cp2)
        assert theta.constant == 6 and theta.linear == (F(0), F(0))

    def test_trapezoid(self, f1):
        theta = extremal_affine(f1)
        assert theta.constant == F(54, 13)
        assert theta.linear == (F(0), F(-24, 13))

    def test_defining_equations_exact(self, f1):
        theta = extremal_affine(f1)
        m = f1.dim
        tests = [affine(1, 0, 0), affine(0, 1, 0), affine(0, 0, 1)]
        for f in tests:
            lhs = sum(
                (
                    theta.constant * interior_integral(f1, f),
                    sum(
                        theta.linear[j]
                        * interior_integral(
                            f1,
                            {
                                tuple(
                                    (1 if i == j else 0) + e
                                    for i, e in enumerate(key)
                                ): c
                                for key, c in _as_coeffs(f, m).items()
                            },
                        )
                        for j in range(m)
                    ),
                ),
                F(0),
            )
            assert lhs == boundary_integral(f1, f)

    def test_mean_is_sbar(self, f1):
        theta = extremal_affine(f1)
        mean = interior_integral(f1, theta) / f1.volume()
        assert mean == f1.mean_scalar_curvature() == F(10, 3)


def _as_coeffs(f: AffineFunction, m):
    coeffs = {(0,) * m: f.constant}
    for j, c in enumerate(f.linear):
        if c != 0:
            coeffs[tuple(1 if i == j else 0 for i in range(m))] = c
    return coeffs


class TestFutaki:
    def test_segment_x_vanishes(self, cp1):
        assert donaldson_futaki(cp1, affine(0, 1)) == 0

    def test_simplex_vanishes(self, cp2):
        for f in (affine(1, 0, 0), affine(0, 1, 0), affine(0, 0, 1), affine(2, -3, 5)):
            assert donaldson_futaki(cp2, f) == 0

    def test_trapezoid_y(self, f1):
        assert donaldson_futaki(f1, affine(0, 0, 1)) == F(-2, 9)

    def test_constants_in_kernel(self, f1):
        assert donaldson_futaki(f1, affine(7, 0, 0)) == 0

    def test_pairing_identity(self, f1):
        # L(f) = int_P (theta_ex - Sbar) f, exactly, for affine f
        theta = extremal_affine(f1)
        sbar = f1.mean_scalar_curvature()
        rng = np.random.default_rng(0)
        for _ in range(5):
            a, b, c = (F(int(x)) for x in rng.integers(-5, 6, size=3))
            f = affine(a, b, c)
            lhs = donaldson_futaki(f1, f)
            prod = {
                (0, 0): (theta.constant - sbar) * a,
                (1, 0): (theta.constant - sbar) * b + theta.linear[0] * a,
                (0, 1): (theta.constant - sbar) * c + theta.linear[1] * a,
                (2, 0): theta.linear[0] * b,
                (1, 1): theta.linear[0] * c + theta.linear[1] * b,
                (0, 2): theta.linear[1] * c,
            }
            assert lhs == interior_integral(f1, prod)


class TestEhrhart:
    @pytest.mark.parametrize("name", ["cp1", "cp2", "f1", "cp1xcp1"])
    def test_leading_coefficients(self, name):
        poly = load_fixture(name)
        coeffs = ehrhart_polynomial(poly)
        assert coeffs[0] == poly.volume()
        assert coeffs[1] == poly.boundary_volume() / 2

    def test_counts_match_polynomial(self, f1):
        coeffs = ehrhart_polynomial(f1)
        assert coeffs == (F(3, 2), F(5, 2), F(1))
        for k in range(1, 7):
            pred = sum(c * F(k) ** (2 - j) for j, c in enumerate(coeffs))
            assert pred == lattice_points(f1, k).count
