"""Weighted variational construction of distributed null controls.

The unknown is a space-time multiplier Phi at all M+1 time levels,
flattened level-major.  Two sparse operators act on it:

* ``Lstar`` maps levels to steps, row block n being
  (A_n^T Phi^n - B_n^T Phi^{n+1}) / dt with A_n, B_n the theta-scheme
  matrices.  This is the transposed-scheme discretization of the adjoint
  operator -phi_t - phi_xxx - nu phi_xx - ybar phi_x at the step time.
* ``Smat`` maps levels to steps by the scheme average
  (1-theta) Phi^n + theta Phi^{n+1}.

The normal matrix A = Lstar^T W2 Lstar + Smat^T Wobs Smat uses the
clamped "state" weight exp(-2 s beta_hat) in W2 and the "obs" weight
tau^9 exp(2 s beta_hat - 6 s beta_breve) restricted to the observation
nodes in Wobs, both sampled at the step times and scaled by the dt*h
quadrature.  The right side pairs the data: G = Smat^T (dt*h*h_steps)
plus h*y0 in the level-0 block.

From the solved multiplier the state and control are read off as

    yhat^n = rho_state^n * (Lstar Phi)^n
    vhat^n = -rho_obs^n * 1_omega * (Smat Phi)^n

and the normal equations A Phi = G unpack exactly to the staggered
scheme A_0 yhat^0 = y0 + dt (1-theta)(h+vhat)^0,
A_m yhat^m = B_{m-1} yhat^{m-1} + dt [theta (h+vhat)^{m-1}
+ (1-theta)(h+vhat)^m], with the closing row
B_{M-1} yhat^{M-1} + dt theta (h+vhat)^{M-1} = 0 forcing the terminal
value.  The result reports both this algebraic state and an honest
re-simulation of the controlled equation driven by h + vhat.

Conditioning: the weight ratio across [0, T] spans hundreds of orders
of magnitude even with a clamped exponent, so the normal matrix is
symmetrically equilibrated to unit diagonal before the sparse LU, the
solution is polished by iterative refinement, and positivity is probed
with a short Lanczos recursion on the equilibrated matrix.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import scipy.sparse as sp
import scipy.sparse.linalg as spla
from scipy.special import logsumexp

from .grid import (
    Field,
    SpatialGrid,
    TimeGrid,
    discrete_norms,
    hneg1_norm,
    make_field,
)
from .pde import (
    CoefficientSet,
    DiscreteOperators,
    SolverError,
    ThetaStepper,
    _check_initial,
    _self_convection_levels,
    _step_sources,
    make_coefficients,
)
from .weights import (
    CarlemanSpatialProfile,
    WeightSet,
    build_spatial_profile,
    eval_beta_weights,
    tau_function,
)

__all__ = [
    "VariationalSystem",
    "ControlResult",
    "ENormReport",
    "HumResult",
    "TrajectoryControlResult",
    "select_s",
    "omega_indices",
    "assemble_variational_system",
    "solve_null_control",
    "verify_E_membership",
    "compare_e_reports",
    "hum_null_control",
    "control_to_trajectory",
]

# Relative residual the normal-equation solve must reach.
RESIDUAL_BOUND = 1.0e-10


def select_s(
    profile: CarlemanSpatialProfile,
    tg: TimeGrid,
    target_exponent: float = 150.0,
    t_ref: float | None = None,
) -> float:
    """Carleman parameter that puts s * beta_hat(t_ref) at the target.

    The state weight exp(-2 s beta_hat) is what annihilates the terminal
    value, and beta_hat grows like max(phi)/(t(T-t))^2 toward t = T.
    Anchoring its size at the last interior level t_{M-1} makes the
    weight span, and with it the conditioning of the normal equations,
    resolution-aware: refining the time grid steepens the weight at the
    same rate the scheme can resolve.

    Parameters
    ----------
    profile : CarlemanSpatialProfile
    tg : TimeGrid
    target_exponent : float
        Desired value of s * max(phi) * tau(t_ref); 150 keeps the
        unclamped exponent representable while already flattening the
        state to ~1e-66 at the anchor.
    t_ref : float, optional
        Anchor time, strictly inside (0, T); defaults to t_{M-1}.
    """
    if target_exponent <= 0.0:
        raise ValueError("target_exponent must be positive")
    if t_ref is None:
        t_ref = tg.t[-2]
    if not 0.0 < t_ref < tg.T:
        raise ValueError("t_ref must lie strictly inside (0, T)")
    tau_ref = float(tau_function(t_ref, tg.T))
    return target_exponent / (profile.phi_max * tau_ref)


def omega_indices(grid: SpatialGrid, omega) -> np.ndarray:
    """Interior node indices strictly inside the open interval omega."""
    a, b = float(omega[0]), float(omega[1])
    if not 0.0 < a < b < grid.L:
        raise ValueError(f"omega must satisfy 0 < a < b < L, got ({a}, {b})")
    idx = np.nonzero((grid.x > a) & (grid.x < b))[0]
    if idx.size == 0:
        raise ValueError("observation interval contains no interior nodes")
    return idx


def _lanczos_ritz_min(A: sp.spmatrix, steps: int = 24, seed: int = 1234) -> float:
    """Smallest Ritz value of a symmetric matrix after a few Lanczos steps.

    Full reorthogonalization keeps the short recursion honest; the value
    overestimates the true smallest eigenvalue but certifies positivity
    of the probed subspace.
    """
    dim = A.shape[0]
    steps = min(steps, dim)
    rng = np.random.default_rng(seed)
    q = rng.standard_normal(dim)
    q /= np.linalg.norm(q)
    Q = np.zeros((dim, steps))
    alphas = np.zeros(steps)
    betas = np.zeros(steps)
    k = 0
    for j in range(steps):
        Q[:, j] = q
        w = A @ q
        alphas[j] = float(q @ w)
        w -= Q[:, : j + 1] @ (Q[:, : j + 1].T @ w)
        w -= Q[:, : j + 1] @ (Q[:, : j + 1].T @ w)
        beta = float(np.linalg.norm(w))
        k = j + 1
        if beta < 1e-14:
            break
        betas[j] = beta
        q = w / beta
    T = np.diag(alphas[:k]) + np.diag(betas[: k - 1], 1) + np.diag(betas[: k - 1], -1)
    return float(np.linalg.eigvalsh(T).min())


@dataclass(eq=False)
class VariationalSystem:
    """Assembled and factored normal equations for one configuration.

    The factorization is reused across solves with different data, which
    is what makes the trajectory-tracking iteration cheap.

    Attributes
    ----------
    ops, coeffs, ws : discretization, frozen coefficients, beta weights
    stepper : ThetaStepper
        Shared with the re-simulation so both see identical matrices.
    omega : tuple of float
    omega_idx : ndarray of int
    mask : ndarray
        Indicator of the observation nodes (exact zeros elsewhere).
    s, theta : float
    step_times : ndarray, shape (M,)
        Quadrature times t_n + theta dt.
    rho_state, rho_obs : ndarray, shape (M,)
        Clamped composite weights at the step times.
    Lstar, Smat : csr_matrix, shape (M*nw, (M+1)*nw)
    A : csr_matrix
        Symmetrized normal matrix.
    equil : ndarray
        Diagonal equilibration d with d*A*d of unit diagonal.
    Aeq : csr_matrix
        Equilibrated matrix actually factored.
    lu : SuperLU
    ritz_min : float
        Smallest Ritz value of Aeq from the Lanczos probe.
    """

    ops: DiscreteOperators
    coeffs: CoefficientSet
    ws: WeightSet
    stepper: ThetaStepper
    omega: tuple
    omega_idx: np.ndarray
    mask: np.ndarray
    s: float
    theta: float
    step_times: np.ndarray
    rho_state: np.ndarray
    rho_obs: np.ndarray
    Lstar: sp.csr_matrix
    Smat: sp.csr_matrix
    A: sp.csr_matrix
    equil: np.ndarray
    Aeq: sp.csr_matrix
    lu: object
    ritz_min: float

    @property
    def tg(self) -> TimeGrid:
        return self.ws.tgrid

    @property
    def dim(self) -> int:
        return self.A.shape[0]

    def build_rhs(self, y0: np.ndarray, h_steps: np.ndarray | None) -> np.ndarray:
        """Load vector pairing the source with S Phi and y0 with Phi^0."""
        tg = self.tg
        nw = self.ops.grid.N - 1
        g = np.zeros((tg.M + 1) * nw)
        g[:nw] = self.ops.grid.h * y0
        if h_steps is not None:
            g += self.Smat.T @ (tg.dt * self.ops.grid.h * h_steps).ravel()
        return g

    def solve(self, g: np.ndarray):
        """Solve A x = g to RESIDUAL_BOUND relative residual.

        Returns (x, stats dict).  Zero data short-circuits to exact
        zeros.  The LU solve is polished by iterative refinement in the
        equilibrated frame; if the raw-frame residual still misses the
        bound a conjugate-gradient fallback runs from the LU iterate.
        """
        g_norm = float(np.linalg.norm(g))
        if g_norm == 0.0:
            zero = np.zeros_like(g)
            return zero, {"method": "zero", "residual": 0.0, "rel_residual": 0.0,
                          "refine_steps": 0, "cg_iterations": 0}
        be = self.equil * g
        be_norm = float(np.linalg.norm(be))
        z = self.lu.solve(be)
        refine = 0
        for _ in range(3):
            r = be - self.Aeq @ z
            if float(np.linalg.norm(r)) <= 1e-13 * be_norm:
                break
            z = z + self.lu.solve(r)
            refine += 1
        x = self.equil * z
        res = float(np.linalg.norm(g - self.A @ x))
        cg_iters = 0
        method = "lu"
        if res > RESIDUAL_BOUND * g_norm:
            counter = {"n": 0}

            def _count(_):
                counter["n"] += 1

            z, info = spla.cg(self.Aeq, be, x0=z, rtol=1e-12, atol=0.0,
                              maxiter=2000, callback=_count)
            cg_iters = counter["n"]
            method = "cg"
            x = self.equil * z
            res = float(np.linalg.norm(g - self.A @ x))
            if res > RESIDUAL_BOUND * g_norm:
                raise SolverError(
                    "normal equations too ill-conditioned: relative residual "
                    f"{res / g_norm:.3e} exceeds {RESIDUAL_BOUND:.0e}; "
                    "reduce the clamp exponent or the s target"
                )
        return x, {"method": method, "residual": res, "rel_residual": res / g_norm,
                   "refine_steps": refine, "cg_iterations": cg_iters}


def assemble_variational_system(
    ops: DiscreteOperators,
    coeffs: CoefficientSet,
    ws: WeightSet,
    omega,
    s: float | None = None,
    theta: float = 0.5,
) -> VariationalSystem:
    """Build and factor the weighted normal equations.

    Parameters
    ----------
    ops : DiscreteOperators
    coeffs : CoefficientSet
        Frozen coefficients of the linearized equation; a transport
        profile, if any, must live on the weight set's time grid.
    ws : WeightSet
        Beta-family weights (finite at t = 0) on the time grid the
        system will march.
    omega : tuple of float
        Open observation interval.
    s : float, optional
        Must agree with ws.s when given; the weights are already
        sampled at a fixed parameter.
    theta : float
        Scheme parameter, 0.5 by default.

    Raises
    ------
    ValueError
        On family/grid/parameter mismatches or an empty observation set.
    RuntimeError
        If the symmetrized matrix is not exactly symmetric or has a
        nonpositive diagonal.
    """
    if ws.family != "beta":
        raise ValueError("variational weights must be the beta family "
                         "(finite at t = 0); got " + ws.family)
    if s is None:
        s = ws.s
    elif not np.isclose(s, ws.s, rtol=1e-12, atol=0.0):
        raise ValueError(f"s = {s} does not match the weight set's s = {ws.s}")
    grid = ops.grid
    if not np.isclose(ws.profile.L, grid.L, rtol=1e-12, atol=0.0):
        raise ValueError("weight profile domain length does not match the grid")
    tg = ws.tgrid
    if coeffs.ybar is not None and coeffs.ybar.shape[0] != tg.M + 1:
        raise ValueError("transport profile does not live on the weight time grid")

    nw = grid.N - 1
    M = tg.M
    dt = tg.dt
    idx = omega_indices(grid, omega)
    mask = np.zeros(nw)
    mask[idx] = 1.0

    stepper = ThetaStepper(ops, coeffs, tg, theta)

    rows, cols, vals = [], [], []
    s_rows, s_cols, s_vals = [], [], []
    for n in range(M):
        A_n, B_n = stepper.matrices(n)
        At = A_n.T.tocoo()
        Bt = B_n.T.tocoo()
        base = n * nw
        rows.append(base + At.row)
        cols.append(base + At.col)
        vals.append(At.data / dt)
        rows.append(base + Bt.row)
        cols.append(base + nw + Bt.col)
        vals.append(-Bt.data / dt)
    shape = (M * nw, (M + 1) * nw)
    Lstar = sp.csr_matrix(
        (np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
        shape=shape,
    )
    flat = np.arange(M * nw)
    s_rows = np.concatenate([flat, flat])
    s_cols = np.concatenate([flat, flat + nw])
    s_vals = np.concatenate(
        [np.full(M * nw, 1.0 - theta), np.full(M * nw, theta)]
    )
    Smat = sp.csr_matrix((s_vals, (s_rows, s_cols)), shape=shape)

    step_times = tg.t[:-1] + theta * dt
    rho_state = np.asarray(ws.composite_at("state", step_times))
    rho_obs = np.asarray(ws.composite_at("obs", step_times))
    w2 = np.repeat(dt * grid.h * rho_state, nw)
    wobs = np.repeat(dt * grid.h * rho_obs, nw) * np.tile(mask, M)

    A = (Lstar.T @ sp.diags(w2) @ Lstar) + (Smat.T @ sp.diags(wobs) @ Smat)
    A = (0.5 * (A + A.T)).tocsr()
    gap = A - A.T
    gap_max = 0.0 if gap.nnz == 0 else float(np.abs(gap.data).max())
    if gap_max != 0.0:
        raise RuntimeError("assembled normal matrix lost exact symmetry")

    diag = A.diagonal()
    if float(diag.min()) <= 0.0:
        raise RuntimeError("normal matrix has a nonpositive diagonal entry")
    equil = 1.0 / np.sqrt(diag)
    Aeq = (sp.diags(equil) @ A @ sp.diags(equil)).tocsc()
    lu = spla.splu(Aeq)
    ritz_min = _lanczos_ritz_min(Aeq)

    return VariationalSystem(
        ops=ops, coeffs=coeffs, ws=ws, stepper=stepper,
        omega=(float(omega[0]), float(omega[1])), omega_idx=idx, mask=mask,
        s=float(s), theta=float(theta), step_times=step_times,
        rho_state=rho_state, rho_obs=rho_obs, Lstar=Lstar, Smat=Smat,
        A=A, equil=equil, Aeq=Aeq.tocsr(), lu=lu, ritz_min=ritz_min,
    )


@dataclass(frozen=True)
class ENormReport:
    """Weighted space-time norms of a controlled (or free) trajectory.

    n1 is the exp(s beta_hat)-weighted L^2(Q) norm of the state, n2 the
    tau^{-9/2} exp(3 s beta_breve - s beta_hat)-weighted control norm
    over the observation cylinder, n3 the tau^{-3/2} exp(s beta_hat)-
    weighted sup-in-time L^2 and L^2-in-time H^1 norms, and n4 the
    tau^{-5/2} exp(2 s beta_hat)-weighted L^2-in-time H^-1 norm of the
    driving source.  All use the clamped composites, so every value is
    finite by construction; the log twins stay meaningful for clamp
    levels where the raw values would overflow.
    """

    n1: float
    n2: float
    n3_sup: float
    n3_l2h1: float
    n4: float
    log_n1: float
    log_n2: float
    log_n3_sup: float
    log_n3_l2h1: float
    log_n4: float

    @property
    def all_finite(self) -> bool:
        return all(
            np.isfinite(v) for v in (self.n1, self.n2, self.n3_sup,
                                     self.n3_l2h1, self.n4)
        )


@dataclass(eq=False)
class ControlResult:
    """Null control with its multiplier, states, and certificates.

    control and state are level fields for reporting; control_steps and
    state_steps are the step samples the scheme actually couples (the
    control slots are the f^{n+theta} sources, the state samples the
    algebraic recovery rho_state * Lstar Phi).  terminal_norm is the
    honest re-simulated terminal L^2 norm; terminal_norm_algebraic is
    the norm of the closing row B_{M-1} yhat^{M-1} + dt theta
    (h+vhat)^{M-1} that the normal equations force to zero.  The
    identity pair compares a(Phi, Phi) against the weighted quadratic
    form of the recovered pair computed through the inverse composites.
    """

    control: Field
    state: Field
    multiplier: Field
    control_steps: np.ndarray
    state_steps: np.ndarray
    source_steps: np.ndarray | None
    theta: float
    terminal_norm: float
    terminal_norm_algebraic: float
    control_norm: float
    identity_lhs: float
    identity_rhs: float
    identity_rel_gap: float
    e_norms: ENormReport
    stats: dict


def _steps_to_levels(steps: np.ndarray, theta: float) -> np.ndarray:
    """Adjoint of the scheme average: reconstruct level samples.

    Interior level m blends the adjacent step samples with weights
    (theta, 1-theta); the end levels take the nearest step.  For
    theta = 1 this reproduces the implicit-Euler sample placement
    exactly.
    """
    M, nw = steps.shape
    levels = np.empty((M + 1, nw))
    levels[0] = steps[0]
    levels[-1] = steps[-1]
    if M > 1:
        levels[1:-1] = theta * steps[:-1] + (1.0 - theta) * steps[1:]
    return levels


def _check_source_hypothesis(ws: WeightSet, step_times, h_steps, grid) -> None:
    """Reject sources whose weighted residual norm cannot be finite.

    The admissibility condition weights the source by
    tau^{-5/2} exp(2 s beta_hat).  With the clamped exponent the weight
    itself is finite, so the check catches non-finite entries and
    combinations whose weighted square would overflow.
    """
    if not np.all(np.isfinite(h_steps)):
        raise ValueError("source contains non-finite entries")
    log_w = np.asarray(ws.log_composite_at("source_resid", step_times))
    l2 = np.sqrt(grid.h * np.sum(h_steps**2, axis=1))
    with np.errstate(divide="ignore"):
        log_l2 = np.log(l2)
    active = l2 > 0.0
    if np.any(active) and float(np.max(log_w[active] + log_l2[active])) > 350.0:
        raise ValueError(
            "source violates the weighted admissibility condition: "
            "its tau^{-5/2} exp(2 s beta_hat)-weighted norm overflows"
        )


def _e_norm_report(
    ws: WeightSet,
    grid: SpatialGrid,
    theta: float,
    y_steps: np.ndarray,
    v_steps: np.ndarray,
    h_steps: np.ndarray | None,
) -> ENormReport:
    tg = ws.tgrid
    dt = tg.dt
    t_steps = tg.t[:-1] + theta * dt
    if y_steps.shape != (tg.M, grid.N - 1):
        raise ValueError("state steps do not match the weight time grid")

    l2_sq = grid.h * np.sum(y_steps**2, axis=1)
    ext = np.zeros((tg.M, grid.N + 1))
    ext[:, 1:-1] = y_steps
    grads = np.diff(ext, axis=1) / grid.h
    h1_sq = l2_sq + grid.h * np.sum(grads**2, axis=1)
    v_sq = grid.h * np.sum(v_steps**2, axis=1)
    if h_steps is None:
        hneg_sq = np.zeros(tg.M)
    else:
        hneg_sq = np.array(
            [hneg1_norm(grid, h_steps[n]) ** 2 for n in range(tg.M)]
        )

    inv_state = np.asarray(ws.composite_at("inv_state", t_steps))
    inv_obs = np.asarray(ws.composite_at("inv_obs", t_steps))
    w3 = np.asarray(ws.composite_at("sup_state", t_steps))
    w4 = np.asarray(ws.composite_at("source_resid", t_steps))
    log_inv_state = np.asarray(ws.log_composite_at("inv_state", t_steps))
    log_inv_obs = np.asarray(ws.log_composite_at("inv_obs", t_steps))
    log_w3 = np.asarray(ws.log_composite_at("sup_state", t_steps))
    log_w4 = np.asarray(ws.log_composite_at("source_resid", t_steps))

    def _log_quad(log_w, sq) -> float:
        # log of sqrt(dt * sum(exp(log_w) * sq)), safe for sq entries of 0
        with np.errstate(divide="ignore"):
            terms = log_w + np.log(sq)
        if np.all(np.isneginf(terms)):
            return float("-inf")
        return 0.5 * (float(logsumexp(terms)) + np.log(dt))

    n1 = float(np.sqrt(dt * np.sum(inv_state * l2_sq)))
    n2 = float(np.sqrt(dt * np.sum(inv_obs * v_sq)))
    n3_sup = float(np.max(w3 * np.sqrt(l2_sq)))
    n3_l2h1 = float(np.sqrt(dt * np.sum(w3**2 * h1_sq)))
    n4 = float(np.sqrt(dt * np.sum(w4**2 * hneg_sq)))

    with np.errstate(divide="ignore"):
        log_sup_terms = log_w3 + 0.5 * np.log(l2_sq)
    log_n3_sup = float(np.max(log_sup_terms)) if l2_sq.size else float("-inf")

    return ENormReport(
        n1=n1, n2=n2, n3_sup=n3_sup, n3_l2h1=n3_l2h1, n4=n4,
        log_n1=_log_quad(log_inv_state, l2_sq),
        log_n2=_log_quad(log_inv_obs, v_sq),
        log_n3_sup=log_n3_sup,
        log_n3_l2h1=_log_quad(2.0 * log_w3, h1_sq),
        log_n4=_log_quad(2.0 * log_w4, hneg_sq),
    )


def verify_E_membership(res, weights: WeightSet) -> ENormReport:
    """Evaluate the four weighted norms for a result or a plain field.

    For a ControlResult the state samples are the algebraic step
    recovery, whose first two norms reproduce the variational energy
    identity exactly and are therefore stable under refinement; the
    source norm weights the driving term h.  A bare Field (an
    uncontrolled trajectory) is averaged to step samples with zero
    control and zero source.  Growth under time-grid refinement is
    detected by comparing two reports with compare_e_reports.
    """
    if isinstance(res, Field):
        y_steps = 0.5 * (res.values[:-1] + res.values[1:])
        nw = res.grid.N - 1
        return _e_norm_report(
            weights, res.grid, 0.5, y_steps,
            np.zeros((weights.tgrid.M, nw)), None,
        )
    return _e_norm_report(
        weights, res.state.grid, res.theta, res.state_steps,
        res.control_steps, res.source_steps,
    )


def compare_e_reports(coarse: ENormReport, fine: ENormReport) -> dict:
    """Refinement ratios fine/coarse of the weighted norms.

    Computed in log space so the comparison stays meaningful when a
    norm saturates the floating range.  A norm that is zero at both
    resolutions gets ratio 1; zero only at the coarse level gets inf.
    """
    ratios = {}
    for name in ("n1", "n2", "n3_sup", "n3_l2h1", "n4"):
        lc = getattr(coarse, "log_" + name)
        lf = getattr(fine, "log_" + name)
        if np.isneginf(lc) and np.isneginf(lf):
            ratios[name] = 1.0
        elif np.isneginf(lc):
            ratios[name] = float("inf")
        else:
            ratios[name] = float(np.exp(lf - lc))
    ratios["max"] = max(ratios.values())
    return ratios


def solve_null_control(
    vsys: VariationalSystem, y0, h=None
) -> ControlResult:
    """Drive the linearized state from y0 to zero at t = T.

    Parameters
    ----------
    vsys : VariationalSystem
    y0 : array_like, shape (N-1,)
    h : None, Field, or array of step/level samples
        Additional source; must satisfy the weighted admissibility
        condition (checked).

    Returns
    -------
    ControlResult

    Raises
    ------
    ValueError
        On malformed data or an inadmissible source.
    SolverError
        If the normal equations cannot be solved to the residual bound.
    """
    ops = vsys.ops
    tg = vsys.tg
    grid = ops.grid
    nw = grid.N - 1
    y0 = _check_initial(ops, y0)
    h_steps = _step_sources(h, tg, nw, vsys.theta)
    if h_steps is not None:
        _check_source_hypothesis(vsys.ws, vsys.step_times, h_steps, grid)

    g = vsys.build_rhs(y0, h_steps)
    x, stats = vsys.solve(g)
    stats = dict(stats)
    stats["ritz_min"] = vsys.ritz_min

    Lx = (vsys.Lstar @ x).reshape(tg.M, nw)
    Sx = (vsys.Smat @ x).reshape(tg.M, nw)
    y_steps = vsys.rho_state[:, None] * Lx
    v_steps = -(vsys.rho_obs[:, None] * Sx) * vsys.mask[None, :]

    identity_lhs = float(x @ (vsys.A @ x))
    t_steps = vsys.step_times
    inv_state = np.asarray(vsys.ws.composite_at("inv_state", t_steps))
    inv_obs = np.asarray(vsys.ws.composite_at("inv_obs", t_steps))
    quad = tg.dt * grid.h
    identity_rhs = float(
        quad * np.sum(inv_state[:, None] * y_steps**2)
        + quad * np.sum(inv_obs[:, None] * v_steps**2)
    )
    ref = max(abs(identity_lhs), abs(identity_rhs), 1e-300)
    identity_rel_gap = abs(identity_lhs - identity_rhs) / ref

    src_total = v_steps if h_steps is None else h_steps + v_steps
    levels = vsys.stepper.forward(y0, src_total)
    state = make_field(grid, tg, levels)
    terminal_norm = float(np.sqrt(grid.h * np.sum(levels[-1] ** 2)))

    A_last, B_last = vsys.stepper.matrices(tg.M - 1)
    closing = B_last @ y_steps[-1] + tg.dt * vsys.theta * src_total[-1]
    terminal_norm_algebraic = float(np.sqrt(grid.h * np.sum(closing**2)))

    control_norm = float(np.sqrt(quad * np.sum(v_steps**2)))
    control = make_field(grid, tg, _steps_to_levels(v_steps, vsys.theta))
    multiplier = make_field(grid, tg, x.reshape(tg.M + 1, nw))

    e_norms = _e_norm_report(
        vsys.ws, grid, vsys.theta, y_steps, v_steps, h_steps
    )

    return ControlResult(
        control=control, state=state, multiplier=multiplier,
        control_steps=v_steps, state_steps=y_steps, source_steps=h_steps,
        theta=vsys.theta, terminal_norm=terminal_norm,
        terminal_norm_algebraic=terminal_norm_algebraic,
        control_norm=control_norm, identity_lhs=identity_lhs,
        identity_rhs=identity_rhs, identity_rel_gap=identity_rel_gap,
        e_norms=e_norms, stats=stats,
    )


@dataclass(frozen=True)
class HumResult:
    """Penalized minimal-norm control from the dual conjugate-gradient solve."""

    control_steps: np.ndarray
    terminal_norm: float
    control_norm: float
    iterations: int
    converged: bool


def hum_null_control(
    ops: DiscreteOperators,
    coeffs: CoefficientSet,
    tg: TimeGrid,
    y0,
    omega,
    eps: float = 1e-8,
    tol: float = 1e-8,
    maxit: int = 600,
    theta: float = 0.5,
) -> HumResult:
    """Approximate null control by penalizing the terminal value.

    Minimizes (1/2)||v||^2 + (1/(2 eps))||y_v(T)||^2 over controls
    supported on omega.  The optimality system (I + Lam/eps) v = -mu/eps
    is solved by conjugate gradients, each operator application being
    one forward march plus one transposed march that reuse the cached
    step factorizations.  Completely independent of the weighted
    variational construction, so it serves as a cross-check oracle for
    the order of magnitude of reachable terminal norms.
    """
    y0 = _check_initial(ops, y0)
    nw = ops.grid.N - 1
    idx = omega_indices(ops.grid, omega)
    mask = np.zeros(nw)
    mask[idx] = 1.0
    stepper = ThetaStepper(ops, coeffs, tg, theta)

    def _masked_adjoint_of_terminal(yT: np.ndarray) -> np.ndarray:
        mu, _ = stepper.adjoint(yT, None)
        return mu * mask[None, :]

    free_terminal = stepper.forward(y0, None)[-1]
    rhs = -(_masked_adjoint_of_terminal(free_terminal) / eps).ravel()

    def _apply(vflat: np.ndarray) -> np.ndarray:
        v = vflat.reshape(tg.M, nw)
        yT = stepper.forward(np.zeros(nw), v)[-1]
        return vflat + _masked_adjoint_of_terminal(yT).ravel() / eps

    op = spla.LinearOperator((tg.M * nw, tg.M * nw), matvec=_apply)
    counter = {"n": 0}

    def _count(_):
        counter["n"] += 1

    vflat, info = spla.cg(op, rhs, rtol=tol, atol=0.0, maxiter=maxit,
                          callback=_count)
    v_steps = vflat.reshape(tg.M, nw) * mask[None, :]
    terminal = stepper.forward(y0, v_steps)[-1]
    terminal_norm = float(np.sqrt(ops.grid.h * np.sum(terminal**2)))
    control_norm = float(
        np.sqrt(tg.dt * ops.grid.h * np.sum(v_steps**2))
    )
    return HumResult(
        control_steps=v_steps, terminal_norm=terminal_norm,
        control_norm=control_norm, iterations=counter["n"],
        converged=(info == 0),
    )


@dataclass(eq=False)
class TrajectoryControlResult:
    """Control steering the full nonlinear state onto a reference.

    state is ybar + z with z the controlled deviation; history holds
    the successive update sizes ||z^k - z^{k-1}||_{L^2(Q)} (the first
    entry is ||z^1||).
    """

    control: Field
    state: Field
    deviation: Field
    iterations: int
    history: np.ndarray
    terminal_mismatch: float
    initial_mismatch: float
    converged: bool
    last_result: ControlResult


def control_to_trajectory(
    ops: DiscreteOperators,
    coeffs: CoefficientSet,
    ybar: Field,
    y0,
    s: float | None = None,
    tol: float = 1e-8,
    maxit: int = 12,
    omega=None,
    ws: WeightSet | None = None,
    target_exponent: float = 150.0,
    clamp: float = 200.0,
    profile_eps: float = 0.5,
    theta: float = 0.5,
) -> TrajectoryControlResult:
    """Steer the nonlinear state onto the reference trajectory ybar.

    The deviation z = y - ybar solves the equation linearized along
    ybar, driven by the control and the lagged self-convection
    -(z z_x); a source-fixed-point iteration alternates a null-control
    solve for z with an update of that source.  One variational
    factorization is assembled and reused across all iterations.

    Parameters
    ----------
    ops : DiscreteOperators
    coeffs : CoefficientSet
        With no transport profile; the reference supplies it.
    ybar : Field
        Reference trajectory on the same grids.
    y0 : array_like
        Initial state to be steered; z starts at y0 - ybar(0).
    s : float, optional
        Carleman parameter; chosen by select_s when omitted.
    tol : float
        Relative stop: ||z^k - z^{k-1}|| <= tol * ||z^1||.
    maxit : int
    omega : tuple of float
        Observation interval (required unless ws is given).
    ws : WeightSet, optional
        Prebuilt beta weights; overrides s/omega-derived construction.
    target_exponent, clamp, profile_eps : float
        Weight-construction knobs used when ws is omitted.
    theta : float

    Raises
    ------
    SolverError
        If the fixed point has not converged after maxit iterations.
    """
    if coeffs.ybar is not None:
        raise ValueError("pass transport-free coefficients; the reference "
                         "trajectory supplies the linearization profile")
    grid = ops.grid
    tg = ybar.tgrid
    nw = grid.N - 1
    y0 = _check_initial(ops, y0)
    if ybar.values.shape != (tg.M + 1, nw):
        raise ValueError("reference trajectory does not match the grids")

    if ws is None:
        if omega is None:
            raise ValueError("either omega or a prebuilt weight set is required")
        profile = build_spatial_profile(grid.L, omega, profile_eps)
        if s is None:
            s = select_s(profile, tg, target_exponent)
        ws = eval_beta_weights(profile, tg, s, clamp=clamp)
    else:
        if s is None:
            s = ws.s
        if omega is None:
            omega = ws.profile.omega

    coeffs_lin = make_coefficients(
        tg, coeffs.nu0,
        None if coeffs.nu_tilde is None else coeffs.nu_tilde,
        ybar,
    )
    vsys = assemble_variational_system(ops, coeffs_lin, ws, omega, s, theta)

    z0 = y0 - ybar.values[0]
    z_prev = np.zeros((tg.M + 1, nw))
    history = []
    res = None
    z1_norm = None
    converged = False
    iterations = 0
    for k in range(maxit):
        if k == 0:
            h_steps = None
        else:
            conv = _self_convection_levels(ops, z_prev)
            h_steps = -((1.0 - theta) * conv[:-1] + theta * conv[1:])
        res = solve_null_control(vsys, z0, h_steps)
        z_new = res.state.values
        diff = make_field(grid, tg, z_new - z_prev)
        delta = discrete_norms(diff, upto_order=0).L2_Q
        history.append(delta)
        iterations = k + 1
        if k == 0:
            z1_norm = delta
            if z1_norm == 0.0:
                z_prev = z_new
                converged = True
                break
        elif delta <= tol * z1_norm:
            z_prev = z_new
            converged = True
            break
        z_prev = z_new
    if not converged:
        raise SolverError(
            f"trajectory tracking did not converge in {maxit} iterations; "
            f"last update {history[-1]:.3e} vs tolerance {tol * z1_norm:.3e}"
        )

    deviation = make_field(grid, tg, z_prev)
    state = make_field(grid, tg, ybar.values + z_prev)
    terminal_mismatch = float(np.sqrt(grid.h * np.sum(z_prev[-1] ** 2)))
    initial_mismatch = float(np.sqrt(grid.h * np.sum(z0**2)))
    return TrajectoryControlResult(
        control=res.control, state=state, deviation=deviation,
        iterations=iterations, history=np.asarray(history),
        terminal_mismatch=terminal_mismatch,
        initial_mismatch=initial_mismatch, converged=True,
        last_result=res,
    )
