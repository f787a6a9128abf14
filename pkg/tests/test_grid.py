import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from monopolist.grid import (ScalarField, boundary_normal_residual, format_field, gradient, hessian,
                             laplacian, make_grid, parse_field, side_integral)


def test_make_grid_nodes():
    g = make_grid(0, 3)
    assert np.array_equal(g.coords, [0.0, 0.5, 1.0])
    x1, x2 = g.mesh()
    assert x1[2, 0] == 1.0 and x2[2, 0] == 0.0
    assert make_grid(2.5, 129).h == 1 / 128
    assert make_grid(2.5, 129).h * 128 == 1.0


@pytest.mark.parametrize("a,n,msg", [(-1, 10, "a must be nonnegative"), (0, 2, "n must be"), (np.inf, 5, "finite")])
def test_make_grid_rejects(a, n, msg):
    with pytest.raises(ValueError, match=msg):
        make_grid(a, n)


def test_field_rejects_bad_values():
    g = make_grid(0, 4)
    with pytest.raises(ValueError):
        ScalarField(g, np.zeros(15))
    with pytest.raises(ValueError):
        ScalarField(g, np.full(16, np.nan))


def test_gradient_constant_and_affine():
    g = make_grid(1.3, 17)
    G = gradient(g.sample(lambda x1, x2: 0 * x1 + 4.2))
    assert np.max(np.abs(G.d1)) < 1e-12 and np.max(np.abs(G.d2)) < 1e-12
    G = gradient(g.sample(lambda x1, x2: 2.0 * x1 - 0.7 * x2 + 1))
    assert np.allclose(G.d1, 2.0, atol=1e-12) and np.allclose(G.d2, -0.7, atol=1e-12)


def test_gradient_quadratic_oracle():
    g = make_grid(0, 65)
    x1, x2 = g.mesh()
    G = gradient(g.sample(lambda x1, x2: 0.75 * (x1**2 + x2**2)))
    assert np.max(np.abs(G.d1 - 1.5 * x1)) < 1e-10
    assert np.max(np.abs(G.d2 - 1.5 * x2)) < 1e-10


def test_hessian_quadratics():
    g = make_grid(0.5, 33)
    M = np.array([[2.0, -0.6], [-0.6, 1.1]])
    H = hessian(g.sample(lambda x1, x2: 0.5 * (M[0, 0] * x1**2 + 2 * M[0, 1] * x1 * x2 + M[1, 1] * x2**2)))
    assert np.allclose(H.d11, M[0, 0], atol=1e-10)
    assert np.allclose(H.d12, M[0, 1], atol=1e-10)
    assert np.allclose(H.d22, M[1, 1], atol=1e-10)
    assert np.allclose(laplacian(g.sample(lambda x1, x2: 0.75 * (x1**2 + x2**2))), 3.0, atol=1e-10)
    Z = hessian(g.sample(lambda x1, x2: 0 * x1))
    assert not np.any(Z.d11) and not np.any(Z.d12) and not np.any(Z.d22)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(-3, 3), min_size=6, max_size=6), st.floats(0, 4), st.integers(3, 20))
def test_operators_exact_on_degree_two(c, a, n):
    g = make_grid(a, n)

    def f(x1, x2):
        return c[0] + c[1] * x1 + c[2] * x2 + c[3] * x1**2 + c[4] * x1 * x2 + c[5] * x2**2

    x1, x2 = g.mesh()
    u = g.sample(f)
    G, H = gradient(u), hessian(u)
    scale = 1 + (a + 1) ** 2
    assert np.max(np.abs(G.d1 - (c[1] + 2 * c[3] * x1 + c[4] * x2))) <= 1e-10 * scale * 10
    assert np.max(np.abs(G.d2 - (c[2] + c[4] * x1 + 2 * c[5] * x2))) <= 1e-10 * scale * 10
    assert np.max(np.abs(H.d11 - 2 * c[3])) <= 1e-10 * scale * 100
    assert np.max(np.abs(H.d12 - c[4])) <= 1e-10 * scale * 100


def test_reflection_commutes():
    g = make_grid(0.7, 21)
    rng = np.random.default_rng(3)
    u = ScalarField(g, rng.standard_normal((21, 21)))
    G, Gr = gradient(u), gradient(u.reflect())
    assert np.max(np.abs(Gr.d1 - G.d2.T)) <= 1e-12
    assert np.max(np.abs(Gr.d2 - G.d1.T)) <= 1e-12
    H, Hr = hessian(u), hessian(u.reflect())
    assert np.max(np.abs(Hr.d11 - H.d22.T)) <= 1e-12
    assert np.max(np.abs(Hr.d12 - H.d12.T)) <= 1e-12


def test_boundary_trace_layout():
    g = make_grid(0, 9)
    bt = boundary_normal_residual(g.sample(lambda x1, x2: 0 * x1))
    assert len(bt.values) == 4 * (g.n - 1)
    assert tuple(bt.points[0]) == (0.0, 0.0)
    assert np.sum(bt.is_corner) == 4
    assert np.allclose(np.linalg.norm(bt.normals, axis=1), 1.0)


def test_boundary_residual_quadratic():
    a = 1.5
    g = make_grid(a, 33)
    c = np.array([a + 0.5, a + 0.5])
    bt = boundary_normal_residual(g.sample(lambda x1, x2: 0.75 * ((x1 - c[0]) ** 2 + (x2 - c[1]) ** 2)))
    keep = ~bt.is_corner
    expect = 0.5 * np.sum(bt.points * bt.normals, axis=1) - 1.5 * bt.normals @ c
    assert np.max(np.abs(bt.values[keep] - expect[keep])) < 1e-10


def test_boundary_residual_identities():
    g = make_grid(2.0, 17)
    bt = boundary_normal_residual(g.sample(lambda x1, x2: 0.5 * (x1**2 + x2**2)))
    assert np.max(np.abs(bt.values)) < 1e-12
    bt = boundary_normal_residual(g.sample(lambda x1, x2: 0 * x1))
    keep = ~bt.is_corner
    # (0 - x).n is +a on the west/south sides and -(a+1) on the east/north sides
    for side, val in (("west", 2.0), ("south", 2.0), ("east", -3.0), ("north", -3.0)):
        assert np.allclose(bt.values[bt.on_side(side)], val)
    assert keep.sum() == len(bt.values) - 4
    # the closed line integral of -x.n is -2|Omega|
    assert side_integral(g.sample(lambda x1, x2: 0 * x1)) == pytest.approx(-2.0, abs=1e-12)


def test_field_format_roundtrip():
    g = make_grid(0.1, 5)
    rng = np.random.default_rng(0)
    u = ScalarField(g, rng.standard_normal((5, 5)) * 1e-3)
    text = format_field(u)
    assert text.splitlines()[0] == "# monopolist-field v1"
    assert text.splitlines()[1] == "n=5 a=0.10000000000000001"
    v = parse_field(text)
    assert np.array_equal(v.values, u.values) and v.grid == g
    assert format_field(v) == text
    with pytest.raises(ValueError):
        parse_field(text.replace("v1", "v2"))
