"""Saddle-point solvers and the Picard/Newton iteration for Forchheimer flow.

The discrete model per linearization step is

    A(|u^n|) U^{n+1} + B P^{n+1} = G^n,      B^T U^{n+1} = F,

where A carries the coefficient mu/kappa + beta rho |u^n| at element corners.
Picard uses G^n = G.  Newton augments A with the rank-one corner tensor
beta rho (u^n (x) u^n) / |u^n| and adds the matching term to the right-hand
side, G^n = G + A_tensor U^n, which is the exact Jacobian of the momentum
residual (the tensor is dropped where |u^n| vanishes).

Because A is blockwise invertible, each step reduces to the SPD pressure
system  B^T A^{-1} B P = B^T A^{-1} G - F  (optionally projected onto a
coarse pressure space R), solved by a direct factorization or preconditioned
conjugate gradients.  Convergence is declared on the relative increment
max_z ||z^{n+1} - z^n|| / max(||z^n||, eps) over both state vectors z = P, U;
the velocity must take part because on uniform flow a constant linearized
coefficient scales out of the pressure system entirely, leaving P exact while
U is still moving.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass, field

import numpy as np
import scipy.linalg as la
import scipy.sparse as sp
import scipy.sparse.linalg as spla

from .errors import LinearSolverError, SingularSystemError
from .fields import ScalarCellField
from .grid import FineGrid
from .mfmfe import (
    BoundarySpec,
    VertexBlockMatrix,
    assemble_divergence,
    assemble_rhs,
    assemble_velocity_matrix,
    corner_velocities,
)

#: Floor in the denominator of the relative pressure increment.
_EPS_NORM = 1e-30

#: Dense Cholesky is used below this pressure-system size in 'auto' mode.
_DENSE_LIMIT = 400


@dataclass
class NonlinearConfig:
    """Settings for the outer linearization loop and inner pressure solves."""

    scheme: str = "newton"          # "picard" | "newton"
    tol_nl: float = 1e-8
    max_iter: int = 200
    initial: str = "darcy"         # "darcy" | "zero"
    linear_solver: str = "auto"    # "auto" | "dense" | "splu" | "cg"
    linear_tol: float = 1e-12
    linear_max_iter: int = 20000

    def validate(self) -> None:
        if self.scheme not in ("picard", "newton"):
            raise ValueError(f"unknown scheme {self.scheme!r}")
        if self.initial not in ("darcy", "zero"):
            raise ValueError(f"unknown initial guess {self.initial!r}")
        if self.linear_solver not in ("auto", "dense", "splu", "cg"):
            raise ValueError(f"unknown linear solver {self.linear_solver!r}")
        if self.tol_nl <= 0 or self.max_iter < 1:
            raise ValueError("tol_nl must be positive and max_iter >= 1")


@dataclass
class FlowSolution:
    """Converged (or abandoned) state of a nonlinear flow solve.

    ``history`` has one row per iteration: relative pressure increment and
    the momentum-equation residual norm of the iterate that step produced.
    For reduced solves ``coefficients`` holds the coarse pressure vector and
    ``pressure`` its fine-grid expansion.
    """

    pressure: np.ndarray
    velocity: np.ndarray
    iterations: int
    converged: bool
    history: np.ndarray
    coefficients: np.ndarray | None = None


def _solve_spd(S, rhs: np.ndarray, method: str, tol: float, maxiter: int) -> np.ndarray:
    """Solve the SPD pressure system with the requested backend."""
    n = S.shape[0]
    if method == "auto":
        method = "dense" if n <= _DENSE_LIMIT else "splu"
    if method == "dense":
        try:
            c, low = la.cho_factor(np.asarray(S.todense()) if sp.issparse(S) else S)
        except la.LinAlgError as exc:
            raise SingularSystemError(f"pressure system is not SPD: {exc}") from exc
        return la.cho_solve((c, low), rhs)
    if method == "splu":
        try:
            lu = spla.splu(sp.csc_matrix(S))
        except RuntimeError as exc:
            raise SingularSystemError(f"pressure system is singular: {exc}") from exc
        out = lu.solve(rhs)
        if not np.all(np.isfinite(out)):
            raise SingularSystemError("pressure solve produced non-finite values")
        return out
    if method == "cg":
        Ssp = sp.csr_matrix(S)
        diag = Ssp.diagonal()
        if np.any(diag <= 0):
            raise SingularSystemError("pressure system has a non-positive diagonal")
        M = sp.diags(1.0 / diag)
        rhs2 = np.atleast_2d(rhs.T).T
        out = np.empty_like(rhs2, dtype=float)
        for j in range(rhs2.shape[1]):
            x, info = spla.cg(Ssp, rhs2[:, j], rtol=tol, atol=0.0, maxiter=maxiter, M=M)
            if info > 0:
                res = float(np.linalg.norm(Ssp @ x - rhs2[:, j]))
                raise LinearSolverError(
                    f"CG did not converge in {maxiter} iterations (residual {res:.3e})",
                    final_residual=res,
                )
            out[:, j] = x
        return out if rhs.ndim > 1 else out[:, 0]
    raise ValueError(f"unknown linear solver {method!r}")


def schur_solve(
    A: VertexBlockMatrix,
    B: sp.spmatrix,
    G: np.ndarray,
    F: np.ndarray,
    *,
    method: str = "auto",
    linear_tol: float = 1e-12,
    linear_max_iter: int = 20000,
    check_pd: bool = True,
):
    """Solve the saddle system via the blockwise-eliminated pressure equation.

    Velocity constraints must already be reduced out of (A, B, G, F).
    Returns (U, P) with B^T U = F satisfied to solver precision.
    """
    if check_pd:
        A.check_positive_definite()
    Ainv = A.inverse_sparse()
    AinvB = Ainv @ B
    S = (B.T @ AinvB).tocsc()
    rhs = B.T @ (Ainv @ G) - F
    P = _solve_spd(S, rhs, method, linear_tol, linear_max_iter)
    U = Ainv @ (G - B @ P)
    return U, P


def reduced_schur_solve(
    A: VertexBlockMatrix,
    B: sp.spmatrix,
    R: sp.spmatrix,
    G: np.ndarray,
    F: np.ndarray,
):
    """Schur solve with pressure constrained to the column space of R.

    The reduced SPD system (BR)^T A^{-1} (BR) P_r = (BR)^T A^{-1} G - R^T F is
    dense of coarse dimension; the returned velocity lives on the fine grid.
    """
    A.check_positive_definite()
    Ainv = A.inverse_sparse()
    BR = (B @ R).tocsr()
    S = np.asarray((BR.T @ (Ainv @ BR)).todense())
    rhs = BR.T @ (Ainv @ G) - R.T @ F
    try:
        c, low = la.cho_factor(S)
    except la.LinAlgError as exc:
        raise SingularSystemError(f"reduced pressure system is not SPD: {exc}") from exc
    Pr = la.cho_solve((c, low), rhs)
    U = Ainv @ (G - BR @ Pr)
    return U, Pr


def saddle_oracle(A: VertexBlockMatrix, B: sp.spmatrix, G: np.ndarray, F: np.ndarray):
    """Reference solve of the full dense saddle matrix [[A, B], [B^T, 0]].

    Intended as an independent cross-check for small systems; refuses more
    than 5000 unknowns.  Raises :class:`SingularSystemError` on singular
    systems instead of returning garbage.
    """
    n_u, n_p = B.shape
    if n_u + n_p > 5000:
        raise ValueError(f"saddle oracle limited to 5000 unknowns, got {n_u + n_p}")
    K = np.zeros((n_u + n_p, n_u + n_p))
    K[:n_u, :n_u] = np.asarray(A.to_sparse().todense())
    Bd = np.asarray(B.todense())
    K[:n_u, n_u:] = Bd
    K[n_u:, :n_u] = Bd.T
    b = np.concatenate([G, F])
    # A backward-stable LU passes any residual-vs-(||K|| ||x||) test even on a
    # singular matrix, so escalate the ill-conditioning estimate instead.
    with warnings.catch_warnings():
        warnings.simplefilter("error", la.LinAlgWarning)
        try:
            x = la.solve(K, b)
        except (la.LinAlgError, la.LinAlgWarning) as exc:
            raise SingularSystemError(f"saddle system is singular: {exc}") from exc
    scale = np.linalg.norm(K, ord=np.inf) * np.linalg.norm(x, ord=np.inf) + np.linalg.norm(b)
    if not np.all(np.isfinite(x)) or np.linalg.norm(K @ x - b) > 1e-8 * max(scale, 1e-300):
        raise SingularSystemError("saddle system is numerically singular")
    return x[:n_u], x[n_u:]


class LinearizedSystem:
    """Static parts of the fine saddle problem: B, right-hand sides, constraints.

    Neumann DOFs are eliminated by the lifting U = U_free + lift, identity
    rows in A and zeroed rows of B; the lift term in G depends on the current
    matrix and is applied per linearization step.
    """

    def __init__(self, grid: FineGrid, f_cells: np.ndarray, bc: BoundarySpec):
        self.grid = grid
        self.B = assemble_divergence(grid)
        G, F, cdofs, cvals = assemble_rhs(grid, f_cells, bc)
        self.G0 = G
        self.cdofs = cdofs
        self.lift = np.zeros(grid.n_dofs)
        self.lift[cdofs] = cvals
        free = np.ones(grid.n_dofs)
        free[cdofs] = 0.0
        self.Bfree = (sp.diags(free) @ self.B).tocsr()
        self.F = F - self.B.T @ self.lift

    def reduce(self, A: VertexBlockMatrix, G: np.ndarray):
        """Apply the constraint elimination to a freshly assembled matrix."""
        G2 = G - A.matvec(self.lift)
        G2[self.cdofs] = 0.0
        return A.with_identity_rows(self.cdofs), G2

    def solve(self, A: VertexBlockMatrix, G: np.ndarray, cfg: NonlinearConfig,
              R: sp.spmatrix | None = None):
        Ahat, G2 = self.reduce(A, G)
        if R is None:
            U, P = schur_solve(
                Ahat, self.Bfree, G2, self.F,
                method=cfg.linear_solver, linear_tol=cfg.linear_tol,
                linear_max_iter=cfg.linear_max_iter,
            )
            U = U + self.lift
            return U, P, P
        U, Pr = reduced_schur_solve(Ahat, self.Bfree, R, G2, self.F)
        return U + self.lift, np.asarray(R @ Pr).ravel(), Pr


def _newton_tensor(grid: FineGrid, brho_cells: np.ndarray, w: np.ndarray,
                   speed: np.ndarray) -> np.ndarray:
    """Corner tensor beta rho (w (x) w)/|w|, zeroed below the velocity floor."""
    floor = 1e-14 * max(speed.max(), 1.0)
    safe = np.where(speed > floor, speed, 1.0)
    outer = w[..., :, None] * w[..., None, :]
    tensor = brho_cells[:, None, None, None] * outer / safe[..., None, None]
    tensor[speed <= floor] = 0.0
    return tensor


def nonlinear_solve(
    grid: FineGrid,
    kappa: ScalarCellField,
    beta: ScalarCellField,
    bc: BoundarySpec,
    f_cells: np.ndarray,
    cfg: NonlinearConfig,
    mu: float = 1.0,
    rho: float = 1.0,
    R: sp.spmatrix | None = None,
    system: LinearizedSystem | None = None,
) -> FlowSolution:
    """Run the Picard or Newton loop on the fine or reduced pressure space.

    The same engine drives both: with R the pressure updates live in the
    coarse space but the increment test and history use the fine expansion,
    so iteration counts are directly comparable.
    """
    cfg.validate()
    kappa.require_positive("permeability")
    sys_ = system if system is not None else LinearizedSystem(grid, f_cells, bc)
    c_darcy = (mu / kappa.values)[:, None] * np.ones((1, 4))
    brho = beta.values * rho

    def picard_coeff(U):
        w, speed = corner_velocities(grid, U)
        return c_darcy + brho[:, None] * speed, w, speed

    if cfg.initial == "darcy":
        A0 = assemble_velocity_matrix(grid, c_darcy)
        U, P_fine, _ = sys_.solve(A0, sys_.G0, cfg, R)
    else:
        U = sys_.lift.copy()
        P_fine = np.zeros(grid.n_cells)

    history = []
    converged = False
    iterations = 0
    Pr = None
    for n in range(cfg.max_iter):
        c_pic, w, speed = picard_coeff(U)
        A_pic = assemble_velocity_matrix(grid, c_pic)
        if history:
            history[-1][1] = _momentum_residual(sys_, A_pic, U, P_fine)
        if cfg.scheme == "newton":
            A_t = assemble_velocity_matrix(grid, _newton_tensor(grid, brho, w, speed))
            A_full = A_pic + A_t
            G = sys_.G0 + A_t.matvec(U)
        else:
            A_full, G = A_pic, sys_.G0
        U_new, P_new, Pr = sys_.solve(A_full, G, cfg, R)
        rel_p = np.linalg.norm(P_new - P_fine) / max(np.linalg.norm(P_fine), _EPS_NORM)
        rel_u = np.linalg.norm(U_new - U) / max(np.linalg.norm(U), _EPS_NORM)
        rel = max(rel_p, rel_u)
        history.append([rel, np.nan])
        U, P_fine = U_new, P_new
        iterations = n + 1
        if rel <= cfg.tol_nl:
            converged = True
            break

    if history and np.isnan(history[-1][1]):
        c_pic, _, _ = picard_coeff(U)
        A_pic = assemble_velocity_matrix(grid, c_pic)
        history[-1][1] = _momentum_residual(sys_, A_pic, U, P_fine)
    return FlowSolution(
        pressure=P_fine,
        velocity=U,
        iterations=iterations,
        converged=converged,
        history=np.array(history) if history else np.zeros((0, 2)),
        coefficients=Pr if R is not None else None,
    )


def _momentum_residual(sys_: LinearizedSystem, A_pic: VertexBlockMatrix,
                       U: np.ndarray, P: np.ndarray) -> float:
    """Norm of the nonlinear momentum residual on the free DOFs."""
    r = A_pic.matvec(U) + sys_.B @ P - sys_.G0
    r[sys_.cdofs] = 0.0
    return float(np.linalg.norm(r))


def solve_nonlinear(
    grid: FineGrid,
    kappa: ScalarCellField,
    beta: ScalarCellField,
    bc: BoundarySpec,
    f_cells: np.ndarray,
    cfg: NonlinearConfig,
    mu: float = 1.0,
    rho: float = 1.0,
) -> FlowSolution:
    """Fine-grid nonlinear solve (full pressure space)."""
    return nonlinear_solve(grid, kappa, beta, bc, f_cells, cfg, mu=mu, rho=rho)


def cell_divergence(grid: FineGrid, B: sp.spmatrix, U: np.ndarray) -> np.ndarray:
    """Cellwise divergence of a velocity DOF vector (signed flux sum / area)."""
    return -(B.T @ U) / grid.cell_areas


def velocity_error_norm(M: VertexBlockMatrix, e: np.ndarray) -> float:
    """Quadrature norm sqrt((e, e)_Q) induced by a unit-coefficient mass matrix."""
    return float(np.sqrt(max(e @ M.matvec(e), 0.0)))
