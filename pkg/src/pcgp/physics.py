#!/usr/bin/env python3
"""Field calculus on uniform 2-D grids.

Fields are stored row-major as (ny, nx) arrays; value (i, j) sits at
x = j*h, y = i*h. Gradients come from 3x3 Sobel stencils scaled by 1/(8h) in
the interior. On boundary nodes the component normal to the boundary uses a
one-sided first-order difference and the tangential component a central
difference, so linear fields are differentiated exactly everywhere.

The Sobel stencils are assembled once per grid shape as sparse matrices.
Losses apply them to flattened fields and their adjoints apply the
transposes, which is how the trainer pulls physics gradients back onto
predicted fields.
"""

from dataclasses import dataclass
from functools import lru_cache

import numpy as np
from scipy import sparse
from scipy.sparse import linalg as splinalg

from pcgp import common as rc


@dataclass(frozen=True, eq=False)
class ScalarField:
    nx: int
    ny: int
    h: float
    values: np.ndarray

    def __post_init__(self):
        if self.nx < 3 or self.ny < 3:
            raise rc.InputError(f"field must be at least 3x3, got {self.ny}x{self.nx}")
        if self.values.shape != (self.ny, self.nx):
            raise rc.InputError(f"values shape {self.values.shape} does not match {self.ny}x{self.nx}")
        if not self.h > 0:
            raise rc.InputError(f"grid spacing must be positive, got {self.h}")
        if not np.all(np.isfinite(self.values)):
            raise rc.InputError("field contains non-finite values")

    @classmethod
    def from_array(cls, values, h: float | None = None) -> "ScalarField":
        """Wrap a (ny, nx) array; the default spacing spans x in [0, 1]."""
        arr = np.array(values, dtype=np.float64)
        if arr.ndim != 2:
            raise rc.InputError(f"field values must be 2-D, got shape {arr.shape}")
        ny, nx = arr.shape
        return cls(nx=nx, ny=ny, h=h if h is not None else 1.0 / (nx - 1), values=arr)

    @classmethod
    def from_flat(cls, flat, ny: int, nx: int, h: float) -> "ScalarField":
        return cls.from_array(np.asarray(flat, dtype=np.float64).reshape(ny, nx), h)

    @property
    def shape(self) -> tuple[int, int]:
        return self.ny, self.nx

    def coordinates(self) -> tuple[np.ndarray, np.ndarray]:
        """(x, y) meshgrids of node positions."""
        return np.meshgrid(np.arange(self.nx) * self.h, np.arange(self.ny) * self.h)

    def flat(self) -> np.ndarray:
        return self.values.ravel()


@dataclass(frozen=True, eq=False)
class GradientField:
    gx: ScalarField
    gy: ScalarField


@lru_cache(maxsize=16)
def sobel_operators(ny: int, nx: int, h: float) -> tuple[sparse.csr_matrix, sparse.csr_matrix]:
    """Sparse (P, P) operators returning d/dx and d/dy of a flattened field."""
    if nx < 3 or ny < 3:
        raise rc.InputError(f"Sobel gradient needs at least a 3x3 grid, got {ny}x{nx}")
    idx = np.arange(ny * nx).reshape(ny, nx)
    rows_x, cols_x, vals_x = [], [], []
    rows_y, cols_y, vals_y = [], [], []

    def put(rows, cols, vals, p, q, w):
        rows.append(p)
        cols.append(q)
        vals.append(w)

    smooth = (1.0, 2.0, 1.0)
    for i in range(ny):
        for j in range(nx):
            p = idx[i, j]
            # d/dx
            if j == 0:
                put(rows_x, cols_x, vals_x, p, idx[i, 1], 1.0 / h)
                put(rows_x, cols_x, vals_x, p, idx[i, 0], -1.0 / h)
            elif j == nx - 1:
                put(rows_x, cols_x, vals_x, p, idx[i, j], 1.0 / h)
                put(rows_x, cols_x, vals_x, p, idx[i, j - 1], -1.0 / h)
            elif i in (0, ny - 1):
                put(rows_x, cols_x, vals_x, p, idx[i, j + 1], 0.5 / h)
                put(rows_x, cols_x, vals_x, p, idx[i, j - 1], -0.5 / h)
            else:
                for di, w in zip((-1, 0, 1), smooth):
                    put(rows_x, cols_x, vals_x, p, idx[i + di, j + 1], w / (8.0 * h))
                    put(rows_x, cols_x, vals_x, p, idx[i + di, j - 1], -w / (8.0 * h))
            # d/dy
            if i == 0:
                put(rows_y, cols_y, vals_y, p, idx[1, j], 1.0 / h)
                put(rows_y, cols_y, vals_y, p, idx[0, j], -1.0 / h)
            elif i == ny - 1:
                put(rows_y, cols_y, vals_y, p, idx[i, j], 1.0 / h)
                put(rows_y, cols_y, vals_y, p, idx[i - 1, j], -1.0 / h)
            elif j in (0, nx - 1):
                put(rows_y, cols_y, vals_y, p, idx[i + 1, j], 0.5 / h)
                put(rows_y, cols_y, vals_y, p, idx[i - 1, j], -0.5 / h)
            else:
                for dj, w in zip((-1, 0, 1), smooth):
                    put(rows_y, cols_y, vals_y, p, idx[i + 1, j + dj], w / (8.0 * h))
                    put(rows_y, cols_y, vals_y, p, idx[i - 1, j + dj], -w / (8.0 * h))

    size = ny * nx
    Sx = sparse.csr_matrix((vals_x, (rows_x, cols_x)), shape=(size, size))
    Sy = sparse.csr_matrix((vals_y, (rows_y, cols_y)), shape=(size, size))
    return Sx, Sy


def sobel_gradient(u: ScalarField) -> GradientField:
    Sx, Sy = sobel_operators(u.ny, u.nx, u.h)
    flat = u.flat()
    gx = ScalarField(u.nx, u.ny, u.h, (Sx @ flat).reshape(u.shape))
    gy = ScalarField(u.nx, u.ny, u.h, (Sy @ flat).reshape(u.shape))
    return GradientField(gx, gy)


def _check_pair(a: ScalarField, b: ScalarField, names: str) -> None:
    if a.shape != b.shape:
        raise rc.InputError(f"{names}: shape mismatch {a.shape} vs {b.shape}")


def diffusion_vloss_batch(
    D: np.ndarray, U: np.ndarray, ny: int, nx: int, h: float
) -> tuple[np.ndarray, np.ndarray]:
    """Diffusion energy loss and its gradient for a stack of flattened fields.

    D and U are (m, ny*nx). Returns per-record losses (m,) and dLoss/dU (m, P).
    The energy is averaged over every node; the Dirichlet penalties are means
    over the first (u = 1) and last (u = 0) columns.
    """
    D = np.atleast_2d(np.asarray(D, dtype=np.float64))
    U = np.atleast_2d(np.asarray(U, dtype=np.float64))
    if D.shape != U.shape or D.shape[1] != ny * nx:
        raise rc.InputError(f"diffusivity {D.shape} and solution {U.shape} do not match a {ny}x{nx} grid")
    if not np.all(D > 0):
        raise rc.InputError("diffusivity must be strictly positive")
    Sx, Sy = sobel_operators(ny, nx, h)
    size = ny * nx
    GX = (Sx @ U.T).T
    GY = (Sy @ U.T).T
    energy = 0.5 * np.sum(D * (GX * GX + GY * GY), axis=1) / size
    grid = U.reshape(-1, ny, nx)
    left = grid[:, :, 0] - 1.0
    right = grid[:, :, nx - 1]
    losses = energy + np.mean(left * left, axis=1) + np.mean(right * right, axis=1)

    grad = ((Sx.T @ (D * GX).T).T + (Sy.T @ (D * GY).T).T) / size
    grad = grad.reshape(-1, ny, nx)
    grad[:, :, 0] += 2.0 * left / ny
    grad[:, :, nx - 1] += 2.0 * right / ny
    return losses, grad.reshape(-1, size)


def diffusion_vloss_grad(D: ScalarField, u: ScalarField) -> tuple[float, np.ndarray]:
    _check_pair(D, u, "diffusion_vloss")
    losses, grad = diffusion_vloss_batch(D.flat(), u.flat(), u.ny, u.nx, u.h)
    return float(losses[0]), grad[0].reshape(u.shape)


def diffusion_vloss(D: ScalarField, u: ScalarField) -> float:
    return diffusion_vloss_grad(D, u)[0]


def poisson_vloss_grad(u: ScalarField, g: ScalarField) -> tuple[float, np.ndarray]:
    """Grid average of 0.5 |grad u|^2 - u g, with no boundary penalty."""
    _check_pair(u, g, "poisson_vloss")
    Sx, Sy = sobel_operators(u.ny, u.nx, u.h)
    flat, source = u.flat(), g.flat()
    gx, gy = Sx @ flat, Sy @ flat
    size = flat.size
    loss = float(np.sum(0.5 * (gx * gx + gy * gy) - flat * source) / size)
    grad = (Sx.T @ gx + Sy.T @ gy - source) / size
    return loss, grad.reshape(u.shape)


def poisson_vloss(u: ScalarField, g: ScalarField) -> float:
    return poisson_vloss_grad(u, g)[0]


def _harmonic(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    return 2.0 * a * b / (a + b)


def flux_operator(D: ScalarField) -> sparse.csr_matrix:
    """Symmetric finite-volume operator of -div(D grad u) on every node.

    Face conductances are harmonic means of the adjacent node values. Nodes on
    the zero-flux rows own half a control volume, so their east/west faces
    carry half the conductance; this is the ghost-node reflection scaled to
    keep the matrix symmetric.
    """
    values = D.values
    if not np.all(values > 0):
        raise rc.InputError("diffusivity must be strictly positive")
    ny, nx = D.shape
    idx = np.arange(ny * nx).reshape(ny, nx)
    half = np.ones(ny)
    half[[0, -1]] = 0.5
    cx = _harmonic(values[:, :-1], values[:, 1:]) * half[:, None]
    cy = _harmonic(values[:-1, :], values[1:, :])
    p = np.concatenate([idx[:, :-1].ravel(), idx[:-1, :].ravel()])
    q = np.concatenate([idx[:, 1:].ravel(), idx[1:, :].ravel()])
    c = np.concatenate([cx.ravel(), cy.ravel()])
    rows = np.concatenate([p, q, p, q])
    cols = np.concatenate([p, q, q, p])
    vals = np.concatenate([c, c, -c, -c])
    return sparse.coo_matrix((vals, (rows, cols)), shape=(ny * nx, ny * nx)).tocsr()


def _dirichlet_split(ny: int, nx: int) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    idx = np.arange(ny * nx).reshape(ny, nx)
    unknown = idx[:, 1:-1].ravel()
    fixed = np.concatenate([idx[:, 0], idx[:, -1]])
    fixed_values = np.concatenate([np.ones(ny), np.zeros(ny)])
    return unknown, fixed, fixed_values


def solve_diffusion(D: ScalarField) -> ScalarField:
    """Steady diffusion with u = 1 at x = 0, u = 0 at x = 1, zero flux at y = 0, 1."""
    A = flux_operator(D)
    unknown, fixed, fixed_values = _dirichlet_split(D.ny, D.nx)
    A_uu = A[unknown][:, unknown].tocsc()
    rhs = -(A[unknown][:, fixed] @ fixed_values)
    solution = splinalg.spsolve(A_uu, rhs)
    if not np.all(np.isfinite(solution)):
        raise rc.NumericalError("diffusion system is singular")
    flat = np.empty(D.ny * D.nx)
    flat[unknown] = solution
    flat[fixed] = fixed_values
    return ScalarField(D.nx, D.ny, D.h, flat.reshape(D.shape))


def diffusion_residual(D: ScalarField, u: ScalarField) -> float:
    """Relative flux residual of u at the non-Dirichlet nodes."""
    _check_pair(D, u, "diffusion_residual")
    A = flux_operator(D)
    unknown, fixed, fixed_values = _dirichlet_split(D.ny, D.nx)
    residual = (A @ u.flat())[unknown]
    scale = np.linalg.norm(A[unknown][:, fixed] @ fixed_values)
    return float(np.linalg.norm(residual) / scale)
