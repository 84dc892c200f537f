"""Grids, fields, discrete norms, and field serialization.

Spatial convention
------------------
The interval [0, L] is cut into N uniform cells of width h = L/N.  Node i
sits at x_i = i*h.  Node 0 and node N are identified for the purposes of
wrap-around stencils and both carry the pinned value 0, so a field stores
only the N-1 interior node values.  All spatial quadrature is the trapezoid
rule, which for zero endpoint values collapses to h * sum over interior
nodes.

Time convention
---------------
[0, T] is cut into M uniform steps of size dt = T/M; level n sits at
t_n = n*dt.  A space-time field stores the (M+1) x (N-1) array of level
values.  Time quadrature over levels is the trapezoid rule.

Norms
-----
The discrete H^1 and H^2 seminorms use the forward edge difference and the
three-point second difference, both closed by the pinned boundary values.
The discrete H^-1 norm is the Riesz norm of the map (I - D2)^-1: for data f
it returns sqrt(<f, u>_h) with (I - D2) u = f, which is never larger than
the L^2 norm because I - D2 dominates the identity.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass

import numpy as np

__all__ = [
    "SpatialGrid",
    "TimeGrid",
    "Field",
    "NormReport",
    "make_grid",
    "make_time_grid",
    "make_field",
    "quadrature_space",
    "inner_product",
    "norm_L2",
    "forward_diff",
    "second_diff",
    "time_weights",
    "discrete_norms",
    "write_field_csv",
    "read_field_csv",
    "write_field_bin",
    "read_field_bin",
]

_BIN_MAGIC = b"KDVBF10\x00"


@dataclass(frozen=True, eq=False)
class SpatialGrid:
    """Uniform pinned-periodic grid on [0, L].

    Attributes
    ----------
    L : float
        Domain length.
    N : int
        Number of cells; there are N-1 interior unknowns.
    h : float
        Cell width, L/N.
    x : ndarray, shape (N-1,)
        Interior node coordinates i*h for i = 1..N-1.
    """

    L: float
    N: int
    h: float
    x: np.ndarray

    @property
    def x_full(self) -> np.ndarray:
        """All node coordinates 0..L, shape (N+1,)."""
        return np.linspace(0.0, self.L, self.N + 1)


@dataclass(frozen=True, eq=False)
class TimeGrid:
    """Uniform time levels on [0, T].

    Attributes
    ----------
    T : float
        Horizon.
    M : int
        Number of steps; there are M+1 levels.
    dt : float
        Step size, T/M.
    t : ndarray, shape (M+1,)
        Level times n*dt.
    """

    T: float
    M: int
    dt: float
    t: np.ndarray


def make_grid(L: float, N: int) -> SpatialGrid:
    """Build the spatial grid; N must be at least 8 so the widest stencil fits."""
    if not np.isfinite(L) or L <= 0.0:
        raise ValueError(f"domain length must be positive, got {L}")
    if N < 8:
        raise ValueError(f"need at least 8 cells, got {N}")
    h = L / N
    x = h * np.arange(1, N)
    return SpatialGrid(L=float(L), N=int(N), h=h, x=x)


def make_time_grid(T: float, M: int) -> TimeGrid:
    """Build the time grid; M must be at least 8."""
    if not np.isfinite(T) or T <= 0.0:
        raise ValueError(f"horizon must be positive, got {T}")
    if M < 8:
        raise ValueError(f"need at least 8 time steps, got {M}")
    dt = T / M
    return TimeGrid(T=float(T), M=int(M), dt=dt, t=dt * np.arange(M + 1))


@dataclass(eq=False)
class Field:
    """Space-time field of interior node values.

    Attributes
    ----------
    grid : SpatialGrid
    tgrid : TimeGrid
    values : ndarray, shape (M+1, N-1)
        values[n, i-1] is the field at (x_i, t_n).  Always finite.
    """

    grid: SpatialGrid
    tgrid: TimeGrid
    values: np.ndarray

    def __post_init__(self) -> None:
        self.values = np.ascontiguousarray(self.values, dtype=np.float64)
        expect = (self.tgrid.M + 1, self.grid.N - 1)
        if self.values.shape != expect:
            raise ValueError(
                f"field shape {self.values.shape} does not match grid shape {expect}"
            )
        if not np.all(np.isfinite(self.values)):
            raise ValueError("field contains non-finite values")

    def level(self, n: int) -> np.ndarray:
        """Interior values at time level n."""
        return self.values[n]

    def level_full(self, n: int) -> np.ndarray:
        """Values at level n with the pinned boundary zeros reattached."""
        full = np.zeros(self.grid.N + 1)
        full[1:-1] = self.values[n]
        return full


def make_field(grid: SpatialGrid, tgrid: TimeGrid, values: np.ndarray) -> Field:
    """Validating Field constructor."""
    return Field(grid=grid, tgrid=tgrid, values=values)


def quadrature_space(u: np.ndarray, grid: SpatialGrid) -> float:
    """Trapezoid integral of interior values u over [0, L] with zero endpoints.

    With both endpoint values pinned to zero the composite trapezoid rule
    collapses to h times the plain interior sum.  Linear and monotone in u.
    """
    u = np.asarray(u)
    if u.shape != (grid.N - 1,):
        raise ValueError(f"expected {grid.N - 1} interior values, got shape {u.shape}")
    return grid.h * float(np.sum(u))


def inner_product(grid: SpatialGrid, u: np.ndarray, v: np.ndarray) -> float:
    """Discrete L^2 inner product h * sum(u v)."""
    return grid.h * float(np.dot(u, v))


def norm_L2(grid: SpatialGrid, u: np.ndarray) -> float:
    """Discrete L^2 norm sqrt(h * sum u^2)."""
    return float(np.sqrt(grid.h) * np.linalg.norm(u))


def forward_diff(grid: SpatialGrid, u: np.ndarray) -> np.ndarray:
    """Forward edge differences (u_{i+1} - u_i)/h over the N cell edges.

    The pinned values u_0 = u_N = 0 close both ends, so the result has one
    entry per cell and the summation-by-parts identity
    <D2 u, u>_h = -h * ||forward_diff(u)||^2 holds exactly.
    """
    ext = np.concatenate(([0.0], np.asarray(u), [0.0]))
    return np.diff(ext) / grid.h


def second_diff(grid: SpatialGrid, u: np.ndarray) -> np.ndarray:
    """Three-point second difference at interior nodes, pinned boundaries."""
    u = np.asarray(u)
    out = -2.0 * u
    out[:-1] += u[1:]
    out[1:] += u[:-1]
    return out / grid.h**2


def time_weights(tgrid: TimeGrid) -> np.ndarray:
    """Trapezoid quadrature weights over the M+1 time levels."""
    w = np.full(tgrid.M + 1, tgrid.dt)
    w[0] *= 0.5
    w[-1] *= 0.5
    return w


@dataclass(frozen=True)
class NormReport:
    """Discrete space-time norms of a field.

    Attributes
    ----------
    sup_t_L2 : float
        max over levels of the spatial L^2 norm.
    L2_Q : float
        Space-time L^2 norm.
    L2_H1 : float or None
        L^2-in-time of the full H^1 norm (L^2 part plus edge-gradient part);
        populated for upto_order >= 1.
    L2_H2 : float or None
        L^2-in-time of the full H^2 norm; populated for upto_order >= 2.
    L2_Hneg1 : float or None
        L^2-in-time of the discrete H^-1 norm; None unless requested.
    """

    sup_t_L2: float
    L2_Q: float
    L2_H1: float | None = None
    L2_H2: float | None = None
    L2_Hneg1: float | None = None


_riesz_cache: dict = {}


def _riesz_factor(grid: SpatialGrid):
    """Cached sparse factorization of I - D2 on the interior nodes."""
    import scipy.sparse as sp
    import scipy.sparse.linalg as spla

    key = (grid.N, grid.L)
    if key not in _riesz_cache:
        n = grid.N - 1
        main = np.full(n, 1.0 + 2.0 / grid.h**2)
        off = np.full(n - 1, -1.0 / grid.h**2)
        A = sp.diags([off, main, off], [-1, 0, 1], format="csc")
        _riesz_cache[key] = spla.splu(A)
    return _riesz_cache[key]


def hneg1_norm(grid: SpatialGrid, f: np.ndarray) -> float:
    """Discrete H^-1 norm: sqrt(<f, (I - D2)^-1 f>_h)."""
    u = _riesz_factor(grid).solve(np.asarray(f, dtype=np.float64))
    val = inner_product(grid, f, u)
    # I - D2 is SPD, so the pairing is nonnegative up to roundoff
    return float(np.sqrt(max(val, 0.0)))


def discrete_norms(
    fld: Field, upto_order: int = 2, include_hneg1: bool = False
) -> NormReport:
    """Compute the standard space-time norms of a field.

    Parameters
    ----------
    fld : Field
    upto_order : int in {0, 1, 2}
        Highest Sobolev order to populate: 0 gives sup_t_L2 and L2_Q only,
        1 adds L2_H1, 2 adds L2_H2.
    include_hneg1 : bool
        Also compute the L^2-in-time H^-1 norm (one tridiagonal solve per
        level; the factorization is cached per grid).

    Returns
    -------
    NormReport
    """
    if upto_order not in (0, 1, 2):
        raise ValueError(f"upto_order must be 0, 1 or 2, got {upto_order}")
    grid, tgrid = fld.grid, fld.tgrid
    w = time_weights(tgrid)
    vals = fld.values

    l2_sq = grid.h * np.sum(vals**2, axis=1)
    sup_t_L2 = float(np.sqrt(np.max(l2_sq)))
    L2_Q = float(np.sqrt(np.dot(w, l2_sq)))

    L2_H1 = L2_H2 = None
    if upto_order >= 1:
        h1_semi_sq = np.empty(tgrid.M + 1)
        for n in range(tgrid.M + 1):
            g = forward_diff(grid, vals[n])
            h1_semi_sq[n] = grid.h * float(np.dot(g, g))
        L2_H1 = float(np.sqrt(np.dot(w, l2_sq + h1_semi_sq)))
    if upto_order >= 2:
        h2_semi_sq = np.empty(tgrid.M + 1)
        for n in range(tgrid.M + 1):
            d2 = second_diff(grid, vals[n])
            h2_semi_sq[n] = grid.h * float(np.dot(d2, d2))
        L2_H2 = float(np.sqrt(np.dot(w, l2_sq + h1_semi_sq + h2_semi_sq)))

    L2_Hneg1 = None
    if include_hneg1:
        hneg_sq = np.array([hneg1_norm(grid, vals[n]) ** 2 for n in range(tgrid.M + 1)])
        L2_Hneg1 = float(np.sqrt(np.dot(w, hneg_sq)))

    return NormReport(
        sup_t_L2=sup_t_L2, L2_Q=L2_Q, L2_H1=L2_H1, L2_H2=L2_H2, L2_Hneg1=L2_Hneg1
    )


def write_field_csv(fld: Field, path: str) -> None:
    """Write a field as CSV rows t,x,value (row-major: time outer, space inner).

    Values are printed with 17 significant digits so the round trip through
    text recovers the exact doubles.
    """
    with open(path, "w", newline="") as fh:
        fh.write("t,x,value\n")
        for n in range(fld.tgrid.M + 1):
            t = fld.tgrid.t[n]
            for i in range(fld.grid.N - 1):
                fh.write(f"{t:.17g},{fld.grid.x[i]:.17g},{fld.values[n, i]:.17g}\n")


def read_field_csv(path: str) -> Field:
    """Read a field written by write_field_csv.

    The grids are reconstructed from the coordinate columns, assuming the
    uniform layout write_field_csv produces.
    """
    data = np.genfromtxt(path, delimiter=",", skip_header=1)
    if data.ndim == 1:
        data = data[None, :]
    if data.shape[1] != 3:
        raise ValueError(f"expected 3 CSV columns, got {data.shape[1]}")
    t_col, x_col, v_col = data[:, 0], data[:, 1], data[:, 2]
    x_unique = np.unique(x_col)
    t_unique = np.unique(t_col)
    n_x, n_t = len(x_unique), len(t_unique)
    if n_x * n_t != len(v_col):
        raise ValueError("CSV rows do not form a full time-space product grid")
    h = float(x_unique[0])
    L = float(x_unique[-1]) + h
    N = int(round(L / h))
    T = float(t_unique[-1])
    M = n_t - 1
    grid = make_grid(L, N)
    tgrid = make_time_grid(T, M)
    values = v_col.reshape(n_t, n_x)
    return make_field(grid, tgrid, values)


def write_field_bin(fld: Field, path: str) -> None:
    """Write a field in the binary layout: magic, dims, grid extents, doubles.

    Layout (all little-endian): 8-byte magic, int64 level count M+1, int64
    interior width N-1, float64 L, float64 T, then the (M+1)*(N-1) values in
    row-major order.
    """
    with open(path, "wb") as fh:
        fh.write(_BIN_MAGIC)
        fh.write(
            struct.pack(
                "<qqdd",
                fld.tgrid.M + 1,
                fld.grid.N - 1,
                fld.grid.L,
                fld.tgrid.T,
            )
        )
        fh.write(fld.values.astype("<f8").tobytes(order="C"))


def read_field_bin(path: str) -> Field:
    """Read a field written by write_field_bin; round trip is bitwise exact."""
    with open(path, "rb") as fh:
        magic = fh.read(8)
        if magic != _BIN_MAGIC:
            raise ValueError("not a field binary file (bad magic)")
        rows, cols, L, T = struct.unpack("<qqdd", fh.read(32))
        raw = fh.read(rows * cols * 8)
    values = np.frombuffer(raw, dtype="<f8").reshape(rows, cols).copy()
    grid = make_grid(L, cols + 1)
    tgrid = make_time_grid(T, rows - 1)
    return make_field(grid, tgrid, values)
