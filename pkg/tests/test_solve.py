"""Linear saddle solvers and the nonlinear Picard/Newton loop."""

import numpy as np
import pytest

from msforch.errors import LinearSolverError, SingularSystemError
from msforch.fields import ScalarCellField, gen_synthetic
from msforch.grid import build_fine_grid
from msforch.mfmfe import (
    assemble_divergence,
    assemble_velocity_matrix,
    left_right_spec,
    no_flow_spec,
    quadrature_norm_matrix,
)
from msforch.solve import (
    LinearizedSystem,
    NonlinearConfig,
    cell_divergence,
    nonlinear_solve,
    saddle_oracle,
    schur_solve,
    velocity_error_norm,
)

GOLDEN = (np.sqrt(5.0) - 1.0) / 2.0


def _const(grid, value=1.0):
    return ScalarCellField(grid.nx, grid.ny, np.full(grid.n_cells, value))


def _random_reduced_system(rng, nx, ny):
    """Random heterogeneous left-right problem, constraints eliminated."""
    grid = build_fine_grid(nx, ny)
    bc = left_right_spec(grid, rng.uniform(0.5, 2.0), rng.uniform(-1.0, 0.5))
    f = rng.standard_normal(grid.n_cells)
    sys_ = LinearizedSystem(grid, f, bc)
    A = assemble_velocity_matrix(grid, rng.uniform(0.1, 10.0, grid.n_cells))
    Ahat, G2 = sys_.reduce(A, sys_.G0)
    return Ahat, sys_.Bfree, G2, sys_.F


def _rel(a, b):
    return np.linalg.norm(a - b) / max(np.linalg.norm(b), 1e-300)


def test_schur_matches_saddle_oracle():
    rng = np.random.default_rng(42)
    for _ in range(6):
        nx, ny = rng.integers(1, 7, size=2)
        Ahat, B, G, F = _random_reduced_system(rng, int(nx), int(ny))
        U1, P1 = schur_solve(Ahat, B, G, F, method="dense")
        U2, P2 = saddle_oracle(Ahat, B, G, F)
        assert _rel(U1, U2) <= 1e-12
        assert _rel(P1, P2) <= 1e-12


def test_schur_backends_agree():
    rng = np.random.default_rng(3)
    Ahat, B, G, F = _random_reduced_system(rng, 6, 5)
    U_d, P_d = schur_solve(Ahat, B, G, F, method="dense")
    U_s, P_s = schur_solve(Ahat, B, G, F, method="splu")
    U_c, P_c = schur_solve(Ahat, B, G, F, method="cg", linear_tol=1e-14)
    assert _rel(P_s, P_d) <= 1e-10
    assert _rel(P_c, P_d) <= 1e-8
    assert _rel(U_s, U_d) <= 1e-10
    assert _rel(U_c, U_d) <= 1e-8


def test_closed_box_is_singular():
    # all-Neumann box with net injection: no solution, and the pressure is
    # only determined up to a constant even for compatible data
    grid = build_fine_grid(3, 3)
    f = np.ones(grid.n_cells)
    sys_ = LinearizedSystem(grid, f, no_flow_spec(grid))
    A = assemble_velocity_matrix(grid, np.ones(grid.n_cells))
    Ahat, G2 = sys_.reduce(A, sys_.G0)
    with pytest.raises(SingularSystemError):
        schur_solve(Ahat, sys_.Bfree, G2, sys_.F, method="dense")
    with pytest.raises(SingularSystemError):
        saddle_oracle(Ahat, sys_.Bfree, G2, sys_.F)


def test_zero_data_zero_solution():
    grid = build_fine_grid(4, 4)
    bc = left_right_spec(grid, 0.0, 0.0)
    sys_ = LinearizedSystem(grid, np.zeros(grid.n_cells), bc)
    A = assemble_velocity_matrix(grid, np.ones(grid.n_cells))
    Ahat, G2 = sys_.reduce(A, sys_.G0)
    U, P = schur_solve(Ahat, sys_.Bfree, G2, sys_.F, method="dense")
    assert np.allclose(U, 0.0, atol=1e-13)
    assert np.allclose(P, 0.0, atol=1e-13)


def test_saddle_oracle_size_refusal():
    grid = build_fine_grid(40, 40)
    A = assemble_velocity_matrix(grid, np.ones(grid.n_cells))
    B = assemble_divergence(grid)
    with pytest.raises(ValueError, match="5000"):
        saddle_oracle(A, B, np.zeros(grid.n_dofs), np.zeros(grid.n_cells))


@pytest.mark.parametrize("scheme", ["picard", "newton"])
def test_darcy_limit_single_iteration(scheme):
    grid = build_fine_grid(8, 8)
    bc = left_right_spec(grid)
    sol = nonlinear_solve(
        grid, _const(grid), _const(grid, 0.0), bc, np.zeros(grid.n_cells),
        NonlinearConfig(scheme=scheme),
    )
    assert sol.converged
    assert sol.iterations == 1
    # p = 1 - x recovered exactly up to linear algebra roundoff
    assert np.allclose(sol.pressure, 1.0 - grid.cell_centers[:, 0], atol=1e-11)


@pytest.mark.parametrize("scheme", ["picard", "newton"])
def test_unit_drop_golden_ratio(scheme):
    # kappa = beta = mu = rho = 1 with unit pressure drop: u + u^2 = 1
    grid = build_fine_grid(8, 8)
    bc = left_right_spec(grid, 1.0, 0.0)
    sol = nonlinear_solve(
        grid, _const(grid), _const(grid), bc, np.zeros(grid.n_cells),
        NonlinearConfig(scheme=scheme, tol_nl=1e-12, max_iter=2000),
    )
    assert sol.converged
    interior_vertical = [
        grid.vertical_edge(ix, iy) for ix in range(1, 8) for iy in range(8)
    ]
    dofs = np.concatenate([[2 * e, 2 * e + 1] for e in interior_vertical])
    assert np.allclose(sol.velocity[dofs], GOLDEN, atol=1e-9)


def test_newton_needs_fewer_iterations_and_gap_grows():
    grid = build_fine_grid(12, 12)
    kappa = gen_synthetic("channel", 5, 100.0, 12, 12)
    kappa = ScalarCellField(12, 12, kappa.values * 0.05)
    bc = left_right_spec(grid)
    f = np.zeros(grid.n_cells)
    ratios = []
    for b0 in (10.0, 1000.0):
        beta = ScalarCellField(12, 12, b0 / kappa.values)
        it = {}
        for scheme in ("picard", "newton"):
            cfg = NonlinearConfig(scheme=scheme, tol_nl=1e-8, max_iter=30000)
            sol = nonlinear_solve(grid, kappa, beta, bc, f, cfg)
            assert sol.converged
            it[scheme] = sol.iterations
        assert it["newton"] < it["picard"]
        ratios.append(it["picard"] / it["newton"])
    assert ratios[1] > ratios[0]


def test_max_iter_exhaustion_is_reported_not_raised():
    grid = build_fine_grid(10, 10)
    kappa = _const(grid)
    beta = _const(grid, 1e4)
    bc = left_right_spec(grid)
    cfg = NonlinearConfig(scheme="picard", tol_nl=1e-12, max_iter=3)
    sol = nonlinear_solve(grid, kappa, beta, bc, np.zeros(grid.n_cells), cfg)
    assert not sol.converged
    assert sol.iterations == 3
    assert sol.history.shape[0] == 3


def test_initial_guess_does_not_change_solution():
    grid = build_fine_grid(8, 8)
    kappa = _const(grid)
    beta = _const(grid, 50.0)
    bc = left_right_spec(grid)
    sols = [
        nonlinear_solve(
            grid, kappa, beta, bc, np.zeros(grid.n_cells),
            NonlinearConfig(scheme="newton", tol_nl=1e-12, initial=init),
        )
        for init in ("darcy", "zero")
    ]
    assert np.allclose(sols[0].pressure, sols[1].pressure, atol=1e-9)
    assert np.allclose(sols[0].velocity, sols[1].velocity, atol=1e-9)


def test_cg_iteration_cap_raises_with_residual():
    rng = np.random.default_rng(17)
    grid = build_fine_grid(12, 12)
    bc = left_right_spec(grid)
    sys_ = LinearizedSystem(grid, np.zeros(grid.n_cells), bc)
    A = assemble_velocity_matrix(grid, rng.uniform(0.01, 100.0, grid.n_cells))
    Ahat, G2 = sys_.reduce(A, sys_.G0)
    with pytest.raises(LinearSolverError) as info:
        schur_solve(Ahat, sys_.Bfree, G2, sys_.F, method="cg", linear_max_iter=1)
    assert info.value.final_residual > 0.0


def test_bad_config_rejected():
    with pytest.raises(ValueError):
        NonlinearConfig(scheme="gauss").validate()
    with pytest.raises(ValueError):
        NonlinearConfig(initial="warm").validate()
    with pytest.raises(ValueError):
        NonlinearConfig(max_iter=0).validate()
    with pytest.raises(ValueError):
        NonlinearConfig(linear_solver="amg").validate()


def test_velocity_error_norm_definition():
    grid = build_fine_grid(4, 3)
    M = quadrature_norm_matrix(grid)
    rng = np.random.default_rng(1)
    e = rng.standard_normal(grid.n_dofs)
    assert velocity_error_norm(M, e) == pytest.approx(
        np.sqrt(e @ M.matvec(e)), rel=1e-14
    )
    assert velocity_error_norm(M, np.zeros(grid.n_dofs)) == 0.0


def test_cell_divergence_matches_source():
    grid = build_fine_grid(9, 7)
    kappa = gen_synthetic("blobs", 1, 10.0, 9, 7)
    bc = left_right_spec(grid)
    rng = np.random.default_rng(2)
    f = rng.standard_normal(grid.n_cells)
    f -= 0.0  # Dirichlet outflow: no compatibility condition needed
    sol = nonlinear_solve(
        grid, kappa, _const(grid, 0.0), bc, f, NonlinearConfig(scheme="picard")
    )
    B = assemble_divergence(grid)
    div = cell_divergence(grid, B, sol.velocity)
    assert np.allclose(div, f, atol=1e-9)


def test_history_tracks_increments():
    grid = build_fine_grid(8, 8)
    sol = nonlinear_solve(
        grid, _const(grid), _const(grid, 100.0), left_right_spec(grid),
        np.zeros(grid.n_cells), NonlinearConfig(scheme="newton", tol_nl=1e-10),
    )
    assert sol.converged
    assert sol.history.shape == (sol.iterations, 2)
    # final recorded increment is below tolerance
    assert sol.history[-1, 0] <= 1e-10
