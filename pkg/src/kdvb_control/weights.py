"""Carleman-type weight construction and evaluation.

Spatial profile
---------------
phi is a positive C^4 function on [0, L] built from three pieces around an
observation window omega = (l1, l2):

* on [0, l1]:   phi(x) = eps*x^3 - 3*l1*x^2 - x + C1
* on [l2, L]:   phi(x) = -eps*x^3 + (1 + 3*eps*L^2)*x + C2
* on [l1, l2]:  the unique degree-9 polynomial matching value through 4th
  derivative of the outer cubics at both junctions.

with C1 = 2*eps*L^3 + L + C2 and 0 < eps < 1.  These pieces give
phi(0) = phi(L) = C1, phi'(0) = -1, phi'(L) = +1, and strict concavity
outside [l1, l2] (phi'' = 6*(eps*x - l1) < 0 left, -6*eps*x < 0 right).
The left cubic is strictly decreasing and the right cubic strictly
increasing, so the extrema of phi sit at the domain ends and inside the
bridge.  C2 is chosen automatically so that phi > 0 and 2*max(phi) <
3*min(phi) with margin; the whole profile shifts additively with C2.

Time factors and families
-------------------------
Two families of space-time weights of the separable form phi(x) * factor(t):

* alpha family: factor xi(t) = 1/(t^2 (T-t)^2), singular at both endpoints.
* beta family:  factor tau(t) = 1/ell(t)^2 where ell(t) = T^2/4 on [0, T/2]
  and t*(T-t) on [T/2, T]; tau is finite at t = 0 (tau(0) = 16/T^4) and
  singular only at t = T.  ell is C^1: the nominal bridge on (T/4, T/2)
  matching value T^2/4 and slope 0 at both ends is the constant itself.

hat = max(phi) * factor and breve = min(phi) * factor.  The margin
2*max(phi) < 3*min(phi) makes every exponent combination used downstream
decay where it must.

Clamping
--------
All weights are consumed as exp(s * combination(hat, breve)) times a power
of the time factor.  Exponents are clipped to [-clamp, clamp] before
exponentiation; at a level where the time factor is singular the stored
sample is replaced by the sentinel factor value at which s * hat == clamp,
and the level is marked in ``sentinel_levels``.  Quadratures downstream
evaluate weights at step-centered times and never touch the singular
levels.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import polynomial as npoly

from .grid import TimeGrid

__all__ = [
    "CarlemanSpatialProfile",
    "ProfileValidation",
    "ProfileConstructionError",
    "WeightSet",
    "build_spatial_profile",
    "validate_spatial_profile",
    "xi_function",
    "ell_function",
    "ell_derivative",
    "tau_function",
    "eval_alpha_weights",
    "eval_beta_weights",
]


class ProfileConstructionError(RuntimeError):
    """Raised when no admissible profile can be built from the inputs."""


@dataclass(frozen=True, eq=False)
class CarlemanSpatialProfile:
    """Piecewise-polynomial spatial weight phi.

    Attributes
    ----------
    L : float
        Domain length.
    omega : tuple of float
        Observation window (l1, l2), strictly inside (0, L).
    eps : float
        Cubic shape parameter in (0, 1).
    C1, C2 : float
        Additive constants; C1 = 2*eps*L^3 + L + C2.
    left_coeffs, right_coeffs : ndarray
        Ascending coefficients of the outer cubics in x.
    bridge_coeffs : ndarray
        Ascending coefficients of the degree-9 bridge in the scaled
        variable u = (x - bridge_center)/bridge_halfwidth.
    bridge_center, bridge_halfwidth : float
    phi_max, phi_min : float
        Global extrema of phi over [0, L] (endpoint values and polished
        bridge critical points).
    sample_x, sample_values : ndarray
        Dense reference sampling of phi including both endpoints; used for
        separability checks and diagnostics.
    """

    L: float
    omega: tuple
    eps: float
    C1: float
    C2: float
    left_coeffs: np.ndarray
    right_coeffs: np.ndarray
    bridge_coeffs: np.ndarray
    bridge_center: float
    bridge_halfwidth: float
    phi_max: float
    phi_min: float
    sample_x: np.ndarray
    sample_values: np.ndarray

    def phi(self, x) -> np.ndarray:
        """Evaluate phi at x (scalar or array) in [0, L]."""
        return self.phi_deriv(x, 0)

    def phi_deriv(self, x, order: int = 1) -> np.ndarray:
        """Evaluate the order-th derivative of phi (order 0..4)."""
        x = np.asarray(x, dtype=np.float64)
        scalar = x.ndim == 0
        x = np.atleast_1d(x)
        if np.any((x < -1e-12) | (x > self.L + 1e-12)):
            raise ValueError("phi evaluated outside [0, L]")
        out = _piecewise_eval(
            x,
            self.omega[0],
            self.omega[1],
            self.left_coeffs,
            self.right_coeffs,
            self.bridge_coeffs,
            self.bridge_center,
            self.bridge_halfwidth,
            order,
        )
        return out[0] if scalar else out


@dataclass(frozen=True)
class ProfileValidation:
    """Per-condition outcome of the spatial profile checks."""

    positive: bool
    min_value: float
    boundary_match: bool
    boundary_gap: float
    slope_left: float
    slope_right: float
    slopes_ok: bool
    concave_outside: bool
    max_outer_second_deriv: float
    junction_ok: bool
    junction_max_rel_mismatch: float
    gap_ok: bool
    gap_margin: float

    @property
    def all_ok(self) -> bool:
        return (
            self.positive
            and self.boundary_match
            and self.slopes_ok
            and self.concave_outside
            and self.junction_ok
            and self.gap_ok
        )


def _piecewise_eval(x, l1, l2, left, right, bridge, center, halfwidth, order=0):
    out = np.empty_like(x)
    lm = x <= l1
    rm = x >= l2
    mm = ~(lm | rm)
    cl = npoly.polyder(left, order) if order else left
    cr = npoly.polyder(right, order) if order else right
    cb = npoly.polyder(bridge, order) if order else bridge
    out[lm] = npoly.polyval(x[lm], cl)
    out[rm] = npoly.polyval(x[rm], cr)
    # chain rule: d^k/dx^k = (1/halfwidth^k) d^k/du^k
    out[mm] = npoly.polyval((x[mm] - center) / halfwidth, cb) / halfwidth**order
    return out


def _bridge_system(l1, l2, left_coeffs, right_coeffs):
    """Solve the two-point C^4 matching problem for the bridge.

    Works in the scaled variable u = (x - c)/w, u in [-1, 1], where the
    monomial collocation matrix is well conditioned.
    """
    c = 0.5 * (l1 + l2)
    w = 0.5 * (l2 - l1)
    A = np.zeros((10, 10))
    b = np.zeros(10)
    row = 0
    for u0, x0, coeffs in ((-1.0, l1, left_coeffs), (1.0, l2, right_coeffs)):
        for k in range(5):
            for j in range(k, 10):
                fall = 1.0
                for m in range(k):
                    fall *= j - m
                A[row, j] = fall * u0 ** (j - k)
            b[row] = npoly.polyval(x0, npoly.polyder(coeffs, k) if k else coeffs) * w**k
            row += 1
    coeffs = np.linalg.solve(A, b)
    return coeffs, c, w


def _bridge_extrema(bridge_coeffs, center, halfwidth):
    """Values of the bridge at its interior critical points and endpoints."""
    dcoeffs = npoly.polyder(bridge_coeffs)
    roots = npoly.polyroots(dcoeffs)
    cands = [-1.0, 1.0]
    for r in roots:
        if abs(r.imag) < 1e-9 and -1.0 <= r.real <= 1.0:
            cands.append(float(r.real))
    return np.array([npoly.polyval(u, bridge_coeffs) for u in cands])


def build_spatial_profile(L: float, omega, eps: float) -> CarlemanSpatialProfile:
    """Construct the spatial weight with an automatic additive constant.

    Parameters
    ----------
    L : float
        Domain length.
    omega : pair of float
        Observation window (l1, l2) with 0 < l1 < l2 < L.
    eps : float
        Cubic shape parameter, 0 < eps < 1.

    Returns
    -------
    CarlemanSpatialProfile

    Notes
    -----
    The additive constant is chosen from the extrema of the C2-free part:
    C2 = max(1, 2*max0 - 3*min0) * 1.1 + 1.  Since the whole profile shifts
    by C2, this guarantees 2*max(phi) < 3*min(phi) with a 10% margin and
    positivity (2*max0 - 3*min0 >= -min0 always).  A guard loop grows C2
    further in the degenerate case; failure to validate raises.
    """
    l1, l2 = float(omega[0]), float(omega[1])
    if not (0.0 < l1 < l2 < L):
        raise ValueError(f"need 0 < l1 < l2 < L, got ({l1}, {l2}) in (0, {L})")
    if not (0.0 < eps < 1.0):
        raise ValueError(f"need 0 < eps < 1, got {eps}")

    def assemble(C2: float) -> CarlemanSpatialProfile:
        C1 = 2.0 * eps * L**3 + L + C2
        left = np.array([C1, -1.0, -3.0 * l1, eps])
        right = np.array([C2, 1.0 + 3.0 * eps * L**2, 0.0, -eps])
        bridge, c, w = _bridge_system(l1, l2, left, right)
        bvals = _bridge_extrema(bridge, c, w)
        phi_max = max(C1, float(np.max(bvals)))
        left_min = npoly.polyval(l1, left)
        right_min = npoly.polyval(l2, right)
        phi_min = min(left_min, right_min, float(np.min(bvals)))
        xs = np.unique(np.concatenate([np.linspace(0.0, L, 1025), [l1, l2]]))
        vals = _piecewise_eval(xs, l1, l2, left, right, bridge, c, w)
        return CarlemanSpatialProfile(
            L=float(L),
            omega=(l1, l2),
            eps=float(eps),
            C1=C1,
            C2=C2,
            left_coeffs=left,
            right_coeffs=right,
            bridge_coeffs=bridge,
            bridge_center=c,
            bridge_halfwidth=w,
            phi_max=phi_max,
            phi_min=phi_min,
            sample_x=xs,
            sample_values=vals,
        )

    base = assemble(0.0)
    C2 = max(1.0, 2.0 * base.phi_max - 3.0 * base.phi_min) * 1.1 + 1.0
    prof = assemble(C2)
    for _ in range(100):
        if prof.phi_min > 0.0 and 2.0 * prof.phi_max < 3.0 * prof.phi_min:
            break
        C2 *= 1.5
        prof = assemble(C2)
    report = validate_spatial_profile(prof, samples=2001)
    if not report.all_ok:
        raise ProfileConstructionError(f"profile failed validation: {report}")
    return prof


def validate_spatial_profile(
    p: CarlemanSpatialProfile, samples: int = 2001
) -> ProfileValidation:
    """Check every structural condition of the spatial weight.

    Parameters
    ----------
    p : CarlemanSpatialProfile
    samples : int
        Dense sample count, at least 100.

    Returns
    -------
    ProfileValidation
        Pass/fail per condition; never raises on a failing profile.
    """
    if samples < 100:
        raise ValueError(f"need at least 100 samples, got {samples}")
    l1, l2 = p.omega
    xs = np.unique(np.concatenate([np.linspace(0.0, p.L, samples), [l1, l2]]))
    vals = p.phi(xs)
    min_value = float(min(np.min(vals), p.phi_min))
    positive = min_value > 0.0

    phi0 = float(p.phi(0.0))
    phiL = float(p.phi(p.L))
    boundary_gap = abs(phi0 - phiL)
    boundary_match = boundary_gap <= 1e-12 * max(1.0, abs(phi0))

    slope_left = float(p.phi_deriv(0.0, 1))
    slope_right = float(p.phi_deriv(p.L, 1))
    slopes_ok = (
        slope_left < 0.0
        and slope_right > 0.0
        and abs(abs(slope_left) - abs(slope_right)) <= 1e-12
    )

    # outer second derivatives are linear in x, so their maxima over each
    # piece sit at the junction ends: 6*(eps*x - l1) at x=l1, -6*eps*x at x=l2
    max_second = max(6.0 * (p.eps * l1 - l1), -6.0 * p.eps * l2)
    concave_outside = max_second < 0.0

    mism = 0.0
    for k in range(5):
        lv = npoly.polyval(l1, npoly.polyder(p.left_coeffs, k) if k else p.left_coeffs)
        cb = npoly.polyder(p.bridge_coeffs, k) if k else p.bridge_coeffs
        b1 = npoly.polyval(-1.0, cb) / p.bridge_halfwidth**k
        b2 = npoly.polyval(1.0, cb) / p.bridge_halfwidth**k
        rv = npoly.polyval(
            l2, npoly.polyder(p.right_coeffs, k) if k else p.right_coeffs
        )
        scale = max(abs(lv), abs(rv), 1.0)
        mism = max(mism, abs(lv - b1) / scale, abs(rv - b2) / scale)
    junction_ok = mism <= 1e-8

    gap_margin = 3.0 * p.phi_min - 2.0 * p.phi_max
    gap_ok = gap_margin > 0.0

    return ProfileValidation(
        positive=positive,
        min_value=min_value,
        boundary_match=boundary_match,
        boundary_gap=boundary_gap,
        slope_left=slope_left,
        slope_right=slope_right,
        slopes_ok=slopes_ok,
        concave_outside=concave_outside,
        max_outer_second_deriv=max_second,
        junction_ok=junction_ok,
        junction_max_rel_mismatch=mism,
        gap_ok=gap_ok,
        gap_margin=gap_margin,
    )


def xi_function(t, T: float):
    """Time factor 1/(t^2 (T-t)^2); +inf at both endpoints."""
    t = np.asarray(t, dtype=np.float64)
    _check_time_range(t, T)
    denom = (t * (T - t)) ** 2
    out = np.full_like(denom, np.inf)
    np.divide(1.0, denom, out=out, where=denom > 0.0)
    return out if out.ndim else float(out)


def ell_function(t, T: float):
    """Flattened time profile: T^2/4 up to T/2, then t*(T-t)."""
    t = np.asarray(t, dtype=np.float64)
    _check_time_range(t, T)
    out = np.where(t <= 0.5 * T, 0.25 * T**2, t * (T - t))
    return out if out.ndim else float(out)


def ell_derivative(t, T: float):
    """Derivative of ell: 0 up to T/2, then T - 2t; continuous at T/2."""
    t = np.asarray(t, dtype=np.float64)
    _check_time_range(t, T)
    out = np.where(t <= 0.5 * T, 0.0, T - 2.0 * t)
    return out if out.ndim else float(out)


def tau_function(t, T: float):
    """Time factor 1/ell(t)^2; finite at t=0 (16/T^4), +inf only at t=T."""
    t = np.asarray(t, dtype=np.float64)
    _check_time_range(t, T)
    ell2 = np.where(t <= 0.5 * T, 0.25 * T**2, t * (T - t)) ** 2
    out = np.full_like(ell2, np.inf)
    np.divide(1.0, ell2, out=out, where=ell2 > 0.0)
    return out if out.ndim else float(out)


def _check_time_range(t: np.ndarray, T: float) -> None:
    if np.any((t < -1e-12) | (t > T + 1e-12)):
        raise ValueError(f"time outside [0, {T}]")


# composite weights: name -> (power of the time factor, (a, b)) meaning
#   factor^power * exp(clip(s*(a*phi_max + b*phi_min)*factor, +-clamp))
_COMPOSITES = {
    "beta": {
        "state": (0.0, (-2.0, 0.0)),  # e^{-2 s hat}: quadratic-form state weight
        "obs": (9.0, (2.0, -6.0)),  # tau^9 e^{2 s hat - 6 s breve}: observation
        "inv_state": (0.0, (2.0, 0.0)),  # e^{2 s hat}: reconstruction inverse
        "inv_obs": (-9.0, (-2.0, 6.0)),  # tau^-9 e^{6 s breve - 2 s hat}
        "sup_state": (-1.5, (1.0, 0.0)),  # tau^-3/2 e^{s hat}: sup-norm weight
        "ctrl": (-4.5, (-1.0, 3.0)),  # tau^-9/2 e^{3 s breve - s hat}: control
        "source_resid": (-2.5, (2.0, 0.0)),  # tau^-5/2 e^{2 s hat}: residual
        "state_plain": (0.0, (1.0, 0.0)),  # e^{s hat}: plain weighted state
    },
    "alpha": {
        "lhs": (0.0, (-4.0, 0.0)),  # e^{-4 s hat}
        "source": (0.0, (-2.0, 0.0)),  # e^{-2 s hat}
        "obs": (9.0, (2.0, -6.0)),  # xi^9 e^{2 s hat - 6 s breve}
    },
}


@dataclass(eq=False)
class WeightSet:
    """Sampled time weights of one family at a fixed parameter s.

    Level arrays are finite everywhere: levels where the raw time factor is
    singular carry the sentinel factor value at which s*hat == clamp and
    are marked in sentinel_levels.  Arbitrary-time evaluation (used by the
    step-centered quadratures) goes through the *_at methods, which never
    apply the sentinel and clip only the exponent.

    Attributes
    ----------
    family : str
        "alpha" or "beta".
    s : float
        Carleman parameter, > 0.
    clamp_exponent : float
        Cap on |s * combination| before exponentiation.
    profile : CarlemanSpatialProfile
    tgrid : TimeGrid
    time_factor : ndarray, shape (M+1,)
        xi or tau at levels, sentinel-replaced where singular.
    hat, breve : ndarray
        max(phi)*factor and min(phi)*factor at levels.
    node_samples : ndarray, shape (M+1, len(profile.sample_x))
        Separable samples factor[n] * phi(sample_x).
    sentinel_levels : ndarray of bool
    composites : dict of str -> ndarray
        Clamped composite weights at levels (family-specific names).
    clamped_count : int
        Number of (level, composite) entries where clipping engaged.
    """

    family: str
    s: float
    clamp_exponent: float
    profile: CarlemanSpatialProfile
    tgrid: TimeGrid
    time_factor: np.ndarray
    hat: np.ndarray
    breve: np.ndarray
    node_samples: np.ndarray
    sentinel_levels: np.ndarray
    composites: dict = field(default_factory=dict)
    clamped_count: int = 0

    def time_factor_at(self, t):
        """Raw time factor at arbitrary times (inf at singular endpoints)."""
        if self.family == "alpha":
            return xi_function(t, self.tgrid.T)
        return tau_function(t, self.tgrid.T)

    def hat_at(self, t):
        return self.profile.phi_max * self.time_factor_at(t)

    def breve_at(self, t):
        return self.profile.phi_min * self.time_factor_at(t)

    def _exponent_coef(self, a: float, b: float) -> float:
        return self.s * (a * self.profile.phi_max + b * self.profile.phi_min)

    def composite_at(self, name: str, t):
        """Clamped composite weight at arbitrary times."""
        power, (a, b) = _COMPOSITES[self.family][name]
        factor = np.asarray(self.time_factor_at(t), dtype=np.float64)
        expo = np.clip(
            self._exponent_coef(a, b) * factor,
            -self.clamp_exponent,
            self.clamp_exponent,
        )
        if power == 0.0:
            return np.exp(expo)
        return factor**power * np.exp(expo)

    def log_composite_at(self, name: str, t):
        """Natural log of the clamped composite (exponent-safe)."""
        power, (a, b) = _COMPOSITES[self.family][name]
        factor = np.asarray(self.time_factor_at(t), dtype=np.float64)
        expo = np.clip(
            self._exponent_coef(a, b) * factor,
            -self.clamp_exponent,
            self.clamp_exponent,
        )
        if power == 0.0:
            return expo
        with np.errstate(divide="ignore"):
            return power * np.log(factor) + expo


def _build_weight_set(
    family: str,
    p: CarlemanSpatialProfile,
    tg: TimeGrid,
    s: float,
    clamp: float,
) -> WeightSet:
    if s <= 0.0:
        raise ValueError(f"s must be positive, got {s}")
    if not (np.isfinite(clamp) and clamp > 0.0):
        raise ValueError(f"clamp must be finite and positive, got {clamp}")
    if family == "alpha":
        factor = np.asarray(xi_function(tg.t, tg.T))
    else:
        factor = np.asarray(tau_function(tg.t, tg.T))
    sentinel_value = clamp / (s * p.phi_max)
    sentinel = ~np.isfinite(factor)
    factor = np.where(sentinel, sentinel_value, factor)

    ws = WeightSet(
        family=family,
        s=float(s),
        clamp_exponent=float(clamp),
        profile=p,
        tgrid=tg,
        time_factor=factor,
        hat=p.phi_max * factor,
        breve=p.phi_min * factor,
        node_samples=factor[:, None] * p.sample_values[None, :],
        sentinel_levels=sentinel,
    )

    clamped = 0
    comps = {}
    for name, (power, (a, b)) in _COMPOSITES[family].items():
        raw = ws._exponent_coef(a, b) * factor
        clamped += int(np.sum(np.abs(raw) > clamp))
        expo = np.clip(raw, -clamp, clamp)
        # a clamp beyond ~709 overflows e^clamp to inf at the sentinel level;
        # that is the honest limit value, not an error
        with np.errstate(over="ignore"):
            comps[name] = (
                np.exp(expo) if power == 0.0 else factor**power * np.exp(expo)
            )
    ws.composites = comps
    ws.clamped_count = clamped
    return ws


def eval_alpha_weights(
    p: CarlemanSpatialProfile, tg: TimeGrid, s: float, clamp: float = 200.0
) -> WeightSet:
    """Sample the both-endpoint-singular weight family at the time levels."""
    return _build_weight_set("alpha", p, tg, s, clamp)


def eval_beta_weights(
    p: CarlemanSpatialProfile, tg: TimeGrid, s: float, clamp: float = 200.0
) -> WeightSet:
    """Sample the flattened-start weight family at the time levels.

    The returned set carries every composite weight the control solve
    consumes, clamped: e^{-2s hat}, tau^9 e^{2s hat - 6s breve}, their
    inverses, tau^{-5/2} e^{2s hat}, tau^{-3/2} e^{s hat}, and
    tau^{-9/2} e^{3s breve - s hat}.
    """
    return _build_weight_set("beta", p, tg, s, clamp)
