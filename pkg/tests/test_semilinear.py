import numpy as np
import pytest

from kolmolab.evolve import evolve
from kolmolab.grids import Grid, GridFunction
from kolmolab.operators import example_family
from kolmolab.semilinear import (Nonlinearity, kt_norm, mild_solve,
                                 mollify_nonlinearity,
                                 nonlinearity_from_exprs, sqrtQ_at)


def test_linear_case_matches_time_reversed_evolve():
    spec = example_family("ou", {"d": 1})
    T, dt = 0.4, 2e-2
    grid = Grid(1, 6.0, 121)
    g = GridFunction.from_callable(grid, 1, lambda p: np.cos(p[0]),
                                   bc="neumann")
    sol = mild_solve(spec, None, g, T, dt, graded_steps=1)
    ref = evolve(spec.time_reversed(T), g, 0.0, T, dt)
    assert np.max(np.abs(sol.values[0] - ref.values)) <= 1e-12


def test_zero_nonlinearity_equals_linear():
    spec = example_family("ou", {"d": 1})
    grid = Grid(1, 6.0, 121)
    g = GridFunction.from_callable(grid, 1, lambda p: np.sin(p[0]),
                                   bc="neumann")
    nl = Nonlinearity(1, 1, lambda x, z: np.zeros((1, x.shape[1])),
                      growth_c=0.0)
    a = mild_solve(spec, None, g, 0.3, 2e-2)
    b = mild_solve(spec, nl, g, 0.3, 2e-2)
    for va, vb in zip(a.values, b.values):
        assert np.max(np.abs(va - vb)) <= 1e-12
    assert b.picard_history[-1] <= 1e-12


def test_constant_source_oracle():
    # heat flow with constant source c: spatially constant data stays
    # constant under neumann walls, so u(t) = g - (T - t) c exactly
    spec = example_family("heat", {"d": 1})
    grid = Grid(1, 5.0, 81)
    g = GridFunction.constant(grid, [2.0], bc="neumann")
    c = 0.7
    nl = nonlinearity_from_exprs(["0.7"], 1, 1)
    T = 0.5
    sol = mild_solve(spec, nl, g, T, dt=2.5e-2)
    for t, v in zip(sol.times, sol.values):
        expect = 2.0 - (T - t) * c
        assert np.max(np.abs(v - expect)) <= 1e-10


def test_terminal_condition_exact():
    spec = example_family("ou", {"d": 1})
    grid = Grid(1, 6.0, 81)
    g = GridFunction.from_callable(grid, 1, lambda p: np.tanh(p[0]),
                                   bc="neumann")
    nl = nonlinearity_from_exprs(["z11/4"], 1, 1)
    sol = mild_solve(spec, nl, g, 0.3, 2e-2)
    assert sol.times[-1] == 0.3
    assert np.array_equal(sol.values[-1], g.values)


def test_picard_contraction_tanh_gradient_coupling():
    spec = example_family("ou", {"d": 1})
    grid = Grid(1, 6.0, 121)
    g = GridFunction.from_callable(grid, 1, lambda p: np.sin(p[0]),
                                   bc="neumann")
    # psi(x, z) = tanh(z11) / 2, written with exp only
    nl = nonlinearity_from_exprs(
        ["((exp(2*z11)-1)/(exp(2*z11)+1))/2"], 1, 1)
    sol = mild_solve(spec, nl, g, 0.5, 2e-2, picard_tol=1e-10)
    h = sol.picard_history
    assert len(h) >= 2
    assert not np.isnan(h[-1])
    assert h[-1] <= 1e-10
    assert h[1] <= 0.5 * h[0]  # geometric contraction


def test_mollify_zero_stays_zero():
    nl = Nonlinearity(1, 1, lambda x, z: np.zeros((1, x.shape[1])))
    mol = mollify_nonlinearity(nl, 4)
    x = np.linspace(-3, 3, 11).reshape(1, -1)
    z = np.linspace(-2, 2, 11).reshape(1, 1, -1)
    assert np.max(np.abs(mol(x, z))) == 0.0


def test_mollify_linear_exact_inside_cutoff():
    # symmetric stencil averages a linear map exactly; the cutoff is 1
    # on |z| <= n, so the mollification is the identity there
    nl = nonlinearity_from_exprs(["z11"], 1, 1)
    mol = mollify_nonlinearity(nl, 10)
    x = np.zeros((1, 7))
    z = np.linspace(-8, 8, 7).reshape(1, 1, -1)
    assert np.max(np.abs(mol(x, z) - z[0])) <= 1e-12


def test_mollify_vanishes_beyond_double_cutoff():
    nl = nonlinearity_from_exprs(["z11"], 1, 1)
    mol = mollify_nonlinearity(nl, 5)
    z = np.array([[[10.5, -30.0, 100.0]]])
    x = np.zeros((1, 3))
    assert np.max(np.abs(mol(x, z))) == 0.0


def test_mollify_proximity_bounded_nonlinearity():
    # bounded Lipschitz psi: the averaged stand-in stays within the
    # stencil width of the original inside the cutoff radius
    def tanh_fn(x, z):
        return np.tanh(z[0, 0])[None, :]

    nl = Nonlinearity(1, 1, tanh_fn, growth_c=1.0)
    rng = np.random.default_rng(3)
    z = rng.uniform(-5, 5, (1, 1, 256))
    x = np.zeros((1, 256))
    for n, tol in ((10, 0.11), (40, 0.026)):
        mol = mollify_nonlinearity(nl, n)
        err = np.max(np.abs(mol(x, z) - nl(x, z)))
        assert err <= tol


def test_kt_norm_constant_and_homogeneity():
    spec = example_family("heat", {"d": 1})
    grid = Grid(1, 5.0, 81)
    g = GridFunction.constant(grid, [3.0], bc="neumann")
    sol = mild_solve(spec, None, g, 0.4, 2e-2)
    assert sol.kt_norm == pytest.approx(3.0, abs=1e-10)
    # linear problem: doubling the data doubles the graded norm
    g1 = GridFunction.from_callable(grid, 1, lambda p: np.sin(p[0]),
                                    bc="neumann")
    g2 = GridFunction(grid, 1, 2 * g1.values, bc="neumann")
    s1 = mild_solve(spec, None, g1, 0.4, 2e-2)
    s2 = mild_solve(spec, None, g2, 0.4, 2e-2)
    assert s2.kt_norm == pytest.approx(2 * s1.kt_norm, rel=1e-10)


def test_sqrtQ_consistency():
    spec = example_family("ex71ii", {"d": 2, "m": 2})
    pts = np.array([[0.3, -1.0, 2.0], [0.1, 0.5, -1.5]])
    R = sqrtQ_at(spec, 0.2, pts)
    Q = spec.Q_at(0.2, pts)
    RR = np.einsum("abN,bcN->acN", R, R)
    assert np.max(np.abs(RR - Q)) <= 1e-12


def test_graded_ladder_clusters_near_terminal_time():
    spec = example_family("ou", {"d": 1})
    grid = Grid(1, 6.0, 61)
    g = GridFunction.from_callable(grid, 1, lambda p: np.cos(p[0]),
                                   bc="neumann")
    sol = mild_solve(spec, None, g, 0.5, 5e-2, graded_steps=8)
    steps = np.diff(sol.times)
    # the last steps (near t = T) shrink quadratically
    assert steps[-1] < steps[0] / 10


def test_export_roundtrip(tmp_path):
    import json

    from kolmolab.grids import read_kgf
    spec = example_family("ou", {"d": 1})
    grid = Grid(1, 6.0, 61)
    g = GridFunction.from_callable(grid, 1, lambda p: np.exp(-p[0] ** 2),
                                   bc="neumann")
    sol = mild_solve(spec, None, g, 0.2, 5e-2)
    out = tmp_path / "run"
    sol.export(out)
    manifest = json.loads((out / "manifest.json").read_text())
    assert manifest["T"] == 0.2
    assert len(manifest["files"]) == len(sol.times)
    back = read_kgf(out / manifest["files"][-1])
    assert np.array_equal(back.values, sol.values[-1])
