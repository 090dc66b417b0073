"""Base transition densities: Gaussian and rotation-invariant alpha-stable.

The Gaussian kernel is
    g(s,x,t,y) = (4 pi (t-s))^(-d/2) exp(-|y-x|^2 / (4 (t-s))),  s < t,
zero for s >= t, with per-coordinate variance 2(t-s).  The stable kernel
is p(s,x,t,y) = p_{t-s}(y-x) where p_t has Fourier transform
exp(-t |xi|^alpha).  For alpha = 1 this is the Cauchy semigroup in closed
form (any supported d); for other alpha the density is evaluated in d = 1
by numerical Fourier inversion: the cosine integral is split at the zeros
of the oscillating factor, panels are summed directly while they decay,
and the remaining alternating tail is Euler-accelerated.  Beyond sixty
scaled units the two-term power expansion of the tail takes over.

All operations are pure functions of their arguments.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass

import numpy as np
from scipy.interpolate import CubicSpline
from scipy.optimize import brentq
from scipy.special import gammaln

from . import quadrature
from .errors import NumericalFailure, UnsupportedKernelError

GAUSSIAN = "gaussian"
STABLE = "stable"

# exp(-745) is the last double above the underflow threshold
_EXP_CUTOFF = 745.0

# switch to the power-series tail beyond this many scaled units
_ASYMPTOTIC_CUT = 60.0


@dataclass(frozen=True)
class SpaceTimePoint:
    """A (time, position) argument pair."""

    time: float
    position: tuple

    def __post_init__(self):
        pos = np.asarray(self.position, dtype=float)
        if not np.all(np.isfinite(pos)) or not math.isfinite(self.time):
            raise ValueError("space-time point must be finite")


@dataclass(frozen=True)
class KernelSpec:
    """Which base transition density to use.

    family is "gaussian" or "stable"; alpha is required for the stable
    family.  Supported combinations: Gaussian with d in {1,2,3}; stable
    with alpha = 1 and d in {1,2,3}, or alpha in (0,2) and d = 1.
    """

    family: str
    d: int
    alpha: float | None = None

    def __post_init__(self):
        if self.family == GAUSSIAN:
            if self.d not in (1, 2, 3):
                raise UnsupportedKernelError(f"gaussian kernel needs d in {{1,2,3}}, got {self.d}")
            if self.alpha is not None:
                raise UnsupportedKernelError("alpha is only meaningful for the stable family")
        elif self.family == STABLE:
            if self.alpha is None or not 0.0 < self.alpha < 2.0:
                raise UnsupportedKernelError("stable kernel needs alpha in (0, 2)")
            if self.alpha == 1.0:
                if self.d not in (1, 2, 3):
                    raise UnsupportedKernelError("stable alpha=1 kernel needs d in {1,2,3}")
            elif self.d != 1:
                raise UnsupportedKernelError("stable kernel with alpha != 1 is supported in d = 1 only")
        else:
            raise UnsupportedKernelError(f"unknown kernel family {self.family!r}")


def gaussian(d: int = 1) -> KernelSpec:
    return KernelSpec(GAUSSIAN, d)


def stable(alpha: float, d: int = 1) -> KernelSpec:
    return KernelSpec(STABLE, d, alpha)


# ---------------------------------------------------------------------------
# Fourier inversion for the stable density, d = 1
# ---------------------------------------------------------------------------

def _stable_tail_1d(alpha, t, z):
    """Two-term large-|z| expansion of the stable density (d = 1)."""
    z = np.abs(np.asarray(z, dtype=float))
    c1 = math.gamma(alpha + 1.0) * math.sin(0.5 * math.pi * alpha) / math.pi
    c2 = math.gamma(2.0 * alpha + 1.0) * math.sin(math.pi * alpha) / (2.0 * math.pi)
    return c1 * t * z ** (-1.0 - alpha) - c2 * t * t * z ** (-1.0 - 2.0 * alpha)


def density_general_alpha_1d(alpha: float, t: float, z: float,
                             tol: float = 1e-10) -> float:
    """Stable density p_t(z) in d = 1 by direct Fourier inversion.

    Evaluates (1/pi) * int_0^inf exp(-t xi^alpha) cos(z xi) dxi by
    splitting at the cosine zeros; direct panel summation while the
    envelope decays, Euler averaging on the leftover alternating tail.
    Raises NumericalFailure (carrying the achieved estimate) if the
    target absolute accuracy is not reached.
    """
    if not 0.0 < alpha < 2.0:
        raise ValueError("alpha must lie in (0, 2)")
    if not t > 0.0:
        raise ValueError("t must be positive")
    z = abs(float(z))
    scaled = z / t ** (1.0 / alpha)
    if scaled > _ASYMPTOTIC_CUT:
        return float(_stable_tail_1d(alpha, t, z))
    if z == 0.0:
        return math.gamma(1.0 + 1.0 / alpha) / (math.pi * t ** (1.0 / alpha))

    nodes, weights = quadrature.gauss_legendre(24)

    def panel(a, b):
        xi = a + 0.5 * (b - a) * (nodes + 1.0)
        vals = np.exp(-t * xi ** alpha) * np.cos(z * xi)
        return 0.5 * (b - a) * float(np.dot(weights, vals))

    half = math.pi / (2.0 * z)
    total = panel(0.0, half)
    direct_panels = 48
    k = 0
    terms = []
    while k < direct_panels:
        a = half + k * 2.0 * half * 0.5  # panel edges at odd multiples of pi/(2z)
        a = half * (2 * k + 1)
        b = half * (2 * k + 3)
        val = panel(a, b)
        if abs(val) < 0.25 * tol and k > 2:
            total += val
            return total / math.pi
        total += val
        terms.append(val)
        k += 1
    # Euler transform of the remaining alternating series of panel sums
    extra = [panel(half * (2 * j + 1), half * (2 * j + 3))
             for j in range(k, k + 32)]
    partial = np.cumsum(extra)
    for _ in range(16):
        if len(partial) < 2:
            break
        partial = 0.5 * (partial[:-1] + partial[1:])
    est = abs(partial[-1] - partial[-2]) if len(partial) >= 2 else abs(extra[-1])
    total += partial[-1]
    value = total / math.pi
    if est / math.pi > tol:
        raise NumericalFailure(
            "oscillatory inversion failed to converge",
            value=value, error_estimate=est / math.pi)
    return value


class _StableProfile:
    """Cached interpolant of the unit-time stable density p_1 in d = 1.

    Plain cubic spline on [0, 2], log-log spline on (2, 60], two-term
    power expansion beyond.  Built once per alpha from the direct
    Fourier evaluator.
    """

    def __init__(self, alpha):
        self.alpha = alpha
        z_lin = np.linspace(0.0, 2.0, 481)
        z_log = np.geomspace(2.0, _ASYMPTOTIC_CUT, 481)
        v_lin = np.array([density_general_alpha_1d(alpha, 1.0, z) for z in z_lin])
        v_log = np.array([density_general_alpha_1d(alpha, 1.0, z) for z in z_log])
        self._lin = CubicSpline(z_lin, v_lin)
        self._log = CubicSpline(np.log(z_log), np.log(v_log))

    def density(self, z):
        z = np.abs(np.asarray(z, dtype=float))
        out = np.empty_like(z)
        lin = z <= 2.0
        mid = (z > 2.0) & (z <= _ASYMPTOTIC_CUT)
        far = z > _ASYMPTOTIC_CUT
        if np.any(lin):
            out[lin] = self._lin(z[lin])
        if np.any(mid):
            out[mid] = np.exp(self._log(np.log(z[mid])))
        if np.any(far):
            out[far] = _stable_tail_1d(self.alpha, 1.0, z[far])
        return out

    def log_density(self, z):
        return np.log(self.density(z))

    def quartile(self):
        """Half-width of the central interval holding probability 1/2."""
        target = 0.25

        def cdf_excess(r):
            return float(self._lin.integrate(0.0, min(r, 2.0))
                         + (self._mid_mass(r) if r > 2.0 else 0.0)) - target

        return brentq(cdf_excess, 1e-3, _ASYMPTOTIC_CUT)

    def _mid_mass(self, r):
        xs = np.geomspace(2.0, min(r, _ASYMPTOTIC_CUT), 200)
        return np.trapezoid(self.density(xs), xs)


@functools.lru_cache(maxsize=None)
def _stable_profile(alpha: float) -> _StableProfile:
    return _StableProfile(alpha)


@functools.lru_cache(maxsize=None)
def _stable_quartile(alpha: float) -> float:
    if alpha == 1.0:
        return 1.0  # Cauchy: P(|Z| <= 1) = 1/2 exactly
    return _stable_profile(alpha).quartile()


# ---------------------------------------------------------------------------
# density / log-density
# ---------------------------------------------------------------------------

def _check_point(kernel, x):
    x = np.atleast_1d(np.asarray(x, dtype=float))
    if x.shape != (kernel.d,):
        raise ValueError(f"position must have length {kernel.d}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValueError("position coordinates must be finite")
    return x


def log_density_tau(kernel: KernelSpec, tau, disp):
    """Vectorized log p over time gaps tau and displacements disp.

    tau broadcasts against disp[..., 0]; entries with tau <= 0 come back
    as -inf.  This is the workhorse used by the quadrature lattices.
    """
    tau = np.asarray(tau, dtype=float)
    disp = np.asarray(disp, dtype=float)
    r2 = np.sum(disp * disp, axis=-1)
    tau, r2 = np.broadcast_arrays(tau, r2)
    out = np.full(tau.shape, -np.inf)
    pos = tau > 0.0
    if not np.any(pos):
        return out
    tp = tau[pos]
    r2p = r2[pos]
    d = kernel.d
    if kernel.family == GAUSSIAN:
        out[pos] = -0.5 * d * np.log(4.0 * math.pi * tp) - r2p / (4.0 * tp)
    elif kernel.alpha == 1.0:
        k = 0.5 * (d + 1.0)
        const = gammaln(k) - k * math.log(math.pi)
        out[pos] = const + np.log(tp) - k * np.log(r2p + tp * tp)
    else:
        prof = _stable_profile(kernel.alpha)
        inv = tp ** (-1.0 / kernel.alpha)
        out[pos] = np.log(inv) + prof.log_density(inv * np.sqrt(r2p))
    return out


def density_tau(kernel: KernelSpec, tau, disp):
    """Vectorized density; Gaussian far field underflows to exact zero."""
    logs = log_density_tau(kernel, tau, disp)
    out = np.zeros_like(logs)
    ok = logs > -_EXP_CUTOFF
    out[ok] = np.exp(logs[ok])
    return out


def density_tau_1d(kernel: KernelSpec, tau, disp):
    """Fast vectorized density for d = 1: tau broadcastable against the
    scalar displacement array disp (no coordinate axis).  Used by the
    series lattices where the kernel tensor build dominates the cost."""
    tau = np.atleast_1d(np.asarray(tau, dtype=float))
    disp = np.atleast_1d(np.asarray(disp, dtype=float))
    pos = tau > 0.0
    tp = np.where(pos, tau, 1.0)
    full = np.broadcast_shapes(tau.shape, disp.shape)
    if kernel.family == GAUSSIAN:
        out = np.multiply(disp, disp) if disp.shape == full \
            else np.broadcast_to(disp * disp, full).copy()
        out /= -4.0 * tp
        np.exp(out, out=out)
        out *= 1.0 / np.sqrt(4.0 * math.pi * tp)
    elif kernel.alpha == 1.0:
        out = np.multiply(disp, disp) if disp.shape == full \
            else np.broadcast_to(disp * disp, full).copy()
        out += tp * tp
        np.divide(np.broadcast_to(tp, full), out, out=out)
        out *= 1.0 / math.pi
    else:
        prof = _stable_profile(kernel.alpha)
        inv = tp ** (-1.0 / kernel.alpha)
        out = np.asarray(inv * prof.density(inv * np.abs(disp)))
        out = out if out.shape == full else np.broadcast_to(out, full).copy()
    out *= pos
    return out


def density(kernel: KernelSpec, s: float, x, t: float, y) -> float:
    """Transition density p(s,x,t,y); exactly zero when s >= t."""
    x = _check_point(kernel, x)
    y = _check_point(kernel, y)
    if s >= t:
        return 0.0
    return float(density_tau(kernel, np.array(t - s), y - x))


def log_density(kernel: KernelSpec, s: float, x, t: float, y) -> float:
    """log p(s,x,t,y); -inf when s >= t.  Analytic for the Gaussian, so
    density ratios far beyond the underflow threshold stay usable."""
    x = _check_point(kernel, x)
    y = _check_point(kernel, y)
    if s >= t:
        return -np.inf
    return float(log_density_tau(kernel, np.array(t - s), y - x))


def log_density_many(kernel: KernelSpec, s, xs, t, ys):
    """log p between arrays of points; s, t scalars or arrays."""
    xs = np.asarray(xs, dtype=float)
    ys = np.asarray(ys, dtype=float)
    tau = np.asarray(t, dtype=float) - np.asarray(s, dtype=float)
    return log_density_tau(kernel, tau, ys - xs)


def spread(kernel: KernelSpec, tau: float) -> float:
    """Characteristic width of the kernel after a time gap tau."""
    tau = max(float(tau), 0.0)
    if kernel.family == GAUSSIAN:
        return math.sqrt(2.0 * tau)
    return _stable_quartile(kernel.alpha) * tau ** (1.0 / kernel.alpha)


def spread_many(kernel: KernelSpec, tau):
    """Vectorized kernel width over an array of time gaps."""
    tau = np.maximum(np.asarray(tau, dtype=float), 0.0)
    if kernel.family == GAUSSIAN:
        return np.sqrt(2.0 * tau)
    return _stable_quartile(kernel.alpha) * tau ** (1.0 / kernel.alpha)


def endpoint_time_grading(kernel: KernelSpec, q) -> float:
    """Exponent gamma such that space integrals of p |q| can blow up like
    (time gap)^-gamma at a window endpoint sitting on a singular point of
    the potential; 0 for regular potentials."""
    sings = getattr(q, "singularities", ())
    if not sings:
        return 0.0
    expo = max(e for _, e in sings)
    alpha_eff = 2.0 if kernel.family == GAUSSIAN else kernel.alpha
    return min(expo / alpha_eff, 0.95)


def bridge_center_scale(kernel: KernelSpec, s, x, t, y, u):
    """Center and scale of the bridge distribution at intermediate time u.

    The center interpolates linearly between the endpoints.  The scale
    follows the sharper kernel factor through the harmonic time gap
    (u-s)(t-u)/(t-s): for the Gaussian this is the exact bridge standard
    deviation, for stable kernels the matching quartile width.  Far
    bridge mass (the heavy-tailed factor) is reached by the tangent
    substitution's tail nodes rather than by widening the scale, which
    would destroy the resolution of the concentrating factor near the
    endpoints.
    """
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    tau = t - s
    frac = (u - s) / tau
    center = x + frac * (y - x)
    harm = max((u - s) * (t - u) / tau, 0.0)
    if kernel.family == GAUSSIAN:
        sc = math.sqrt(2.0 * harm)
    else:
        sc = _stable_quartile(kernel.alpha) * harm ** (1.0 / kernel.alpha)
    return center, max(sc, 1e-12 * max(tau, 1.0))


# ---------------------------------------------------------------------------
# mass and Chapman-Kolmogorov residual
# ---------------------------------------------------------------------------

_SPHERE_AREA = {1: 2.0, 2: 2.0 * math.pi, 3: 4.0 * math.pi}


def kernel_mass(kernel: KernelSpec, s: float, x, t: float, radius: float,
                config: quadrature.QuadratureConfig | None = None) -> float:
    """Mass of the ball |y - x| <= radius under p(s,x,t,.).

    Computed by radial quadrature on panels graded toward the center;
    increases to 1 as the radius grows (both families are probabilistic).
    """
    if not s < t:
        raise ValueError("need s < t")
    if not radius > 0.0:
        raise ValueError("radius must be positive")
    x = _check_point(kernel, x)
    config = config or quadrature.QuadratureConfig()
    tau = t - s
    d = kernel.d
    order = config.space_order
    panels = []
    levels = 24
    lo = 0.0
    for k in range(levels, 0, -1):
        hi = radius * 0.5 ** (k - 1)
        panels.append((lo, hi))
        lo = hi
    rho, w = quadrature.panel_nodes(panels, order)
    dens = density_tau(kernel, np.array(tau), rho.reshape(-1, 1))
    if d == 1:
        return float(2.0 * np.dot(w, dens))
    area = _SPHERE_AREA[d]
    return float(area * np.dot(w * rho ** (d - 1), dens))


def chapman_kolmogorov_residual(kernel: KernelSpec, s: float, x, u: float,
                                t: float, y,
                                config: quadrature.QuadratureConfig | None = None) -> float:
    """Relative residual of int p(s,x,u,z) p(u,z,t,y) dz = p(s,x,t,y)."""
    if not s < u < t:
        raise ValueError("need s < u < t")
    x = _check_point(kernel, x)
    y = _check_point(kernel, y)
    config = config or quadrature.QuadratureConfig()
    log_pxy = log_density(kernel, s, x, t, y)

    def f(pts):
        lp1 = log_density_many(kernel, s, np.broadcast_to(x, pts.shape), u, pts)
        lp2 = log_density_many(kernel, u, pts, t, np.broadcast_to(y, pts.shape))
        return np.exp(lp1 + lp2 - log_pxy)

    center, scale = bridge_center_scale(kernel, s, x, t, y, u)
    res = quadrature.integrate_space(f, kernel.d, center, scale, config)
    return abs(res.value - 1.0)
