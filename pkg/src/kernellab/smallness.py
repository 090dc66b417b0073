"""Relative-smallness data for a potential.

The central quantity is the normalized bridge integral

    I(s,t) = sup_{x,y} int_s^t int p(s,x,u,z) p(u,z,t,y) |q(u,z)| dz du
                        / p(s,x,t,y),

estimated by a coarse endpoint grid followed by coordinate descent.
Every supremum reported here is a search-based lower estimate; the
certificates are explicitly non-exhaustive and the acceptance suite
leans on cases with closed forms.  From the window bound eta = I over
windows of length at most h, the linear-in-time coefficient is taken as
beta = eta / h, so bridged integrals over any horizon are bounded by
eta + beta (t - s).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from . import kernels, quadrature
from .errors import NumericalFailure
from .potentials import Potential


@dataclass(frozen=True)
class SearchConfig:
    grid_points: int = 7
    descent_rounds: int = 40
    step_shrink: float = 0.5
    min_step_fraction: float = 1e-3
    time_grid: int = 4
    s_offsets: tuple = (0.0,)
    box_spreads_gaussian: float = 8.0
    box_spreads_stable: float = 32.0
    far_field_points: int = 5

    def box_halfwidth(self, kernel, tau):
        w = kernels.spread(kernel, tau)
        if kernel.family == kernels.STABLE:
            return self.box_spreads_stable * w
        return self.box_spreads_gaussian * w


@dataclass
class SmallnessCertificate:
    """Empirical (eta, beta, h) data for a potential.

    eta bounds the normalized bridge integral of |q| over windows of
    length at most h; beta = eta / h extends the bound linearly in time.
    evidence records the probes (s, t, x, y, value) behind the estimate.
    exhaustive is always False: the suprema are searched, never proved.
    """

    eta: float
    beta: float
    h: float
    evidence: list = field(default_factory=list)
    exhaustive: bool = False


@dataclass
class KatoImplicationReport:
    eta: float
    max_forward: float
    max_backward: float
    holds: bool
    records: list


def _abs_potential(q: Potential) -> Potential:
    return q.absolute()


def _search_max(fn, center_x, center_y, halfwidth, search: SearchConfig):
    """Grid probe of fn(x, y) followed by coordinate descent from the best
    cell; deterministic, first-found maximum wins."""
    g = search.grid_points
    xs = center_x + np.linspace(-halfwidth, halfwidth, g)
    ys = center_y + np.linspace(-halfwidth, halfwidth, g)
    best = -np.inf
    best_xy = (xs[0], ys[0])
    for xv in xs:
        for yv in ys:
            val = fn(xv, yv)
            if val > best:
                best = val
                best_xy = (xv, yv)
    step = 2.0 * halfwidth / max(g - 1, 1)
    x0, y0 = best_xy
    improvement = 0.0
    min_step = step * search.min_step_fraction
    rounds = 0
    while step > min_step and rounds < search.descent_rounds:
        rounds += 1
        moved = False
        for dx, dy in ((step, 0.0), (-step, 0.0), (0.0, step), (0.0, -step)):
            val = fn(x0 + dx, y0 + dy)
            if val > best:
                improvement = val - best
                best = val
                x0, y0 = x0 + dx, y0 + dy
                moved = True
                break
        if not moved:
            step *= search.step_shrink
    return best, (x0, y0), improvement


def estimate_I(kernel, q: Potential, s: float, t: float,
               search: SearchConfig | None = None,
               config: quadrature.QuadratureConfig | None = None) -> float:
    """Lower estimate of I(s, t) for |q| by endpoint search."""
    value, _ = estimate_I_detailed(kernel, q, s, t, search, config)
    return value


def estimate_I_detailed(kernel, q, s, t, search=None, config=None):
    if not s < t:
        raise ValueError("need s < t")
    search = search or SearchConfig()
    config = config or quadrature.QuadratureConfig()
    aq = _abs_potential(q)
    halfwidth = search.box_halfwidth(kernel, t - s)
    d = kernel.d
    failures = []

    def probe(xv, yv):
        try:
            res = quadrature.bridge_functional(
                kernel, aq, s, np.full(d, xv), t, np.full(d, yv), config)
            return res.value
        except NumericalFailure as exc:
            failures.append(exc)
            return -np.inf

    best, argmax, improvement = _search_max(probe, 0.0, 0.0, halfwidth, search)
    if kernel.family == kernels.STABLE and search.far_field_points > 0:
        # coarse far-field sweep: heavy tails can hide mass well outside
        # the central box
        for f in np.linspace(2.0, 8.0, search.far_field_points):
            for sx, sy in ((f, f), (-f, f), (f, -f), (-f, -f)):
                val = probe(sx * halfwidth, sy * halfwidth)
                if val > best:
                    best = val
                    argmax = (sx * halfwidth, sy * halfwidth)
    if not math.isfinite(best):
        raise NumericalFailure("all bridge probes failed", value=None,
                               error_estimate=None)
    detail = {"argmax": argmax, "slack": improvement, "failures": len(failures)}
    return best, detail


def certify(kernel, q: Potential, h: float,
            search: SearchConfig | None = None,
            config: quadrature.QuadratureConfig | None = None) -> SmallnessCertificate:
    """Search-based (eta, beta, h) certificate for |q|.

    Bounded potentials with a known sup short-circuit to the exact
    certificate eta = 0, beta = sup |q|.  Otherwise eta is the largest
    bridge estimate over a grid of window lengths h' <= h and window
    starts, and beta = eta / h.  A certificate with eta >= 1 is still
    returned; series summation will refuse it.
    """
    if not h > 0:
        raise ValueError("h must be positive")
    search = search or SearchConfig()
    config = config or quadrature.QuadratureConfig()
    if q.known_sup is not None:
        return SmallnessCertificate(eta=0.0, beta=float(q.known_sup), h=h,
                                    evidence=[], exhaustive=False)
    eta = 0.0
    evidence = []
    fractions = [h * 0.5 ** k for k in range(search.time_grid)]
    for h_prime in fractions:
        for s0 in search.s_offsets:
            value, detail = estimate_I_detailed(
                kernel, q, s0, s0 + h_prime, search, config)
            evidence.append((s0, s0 + h_prime, detail["argmax"][0],
                             detail["argmax"][1], value))
            eta = max(eta, value)
    return SmallnessCertificate(eta=eta, beta=eta / h, h=h,
                                evidence=evidence, exhaustive=False)


def subadditivity_check(kernel, q: Potential, s: float, t: float, v: float,
                        search: SearchConfig | None = None,
                        config: quadrature.QuadratureConfig | None = None):
    """Estimates (I(s,v), I(s,t), I(t,v)); the caller asserts
    I(s,v) <= I(s,t) + I(t,v) up to the search slack."""
    if not s < t < v:
        raise ValueError("need s < t < v")
    return (estimate_I(kernel, q, s, v, search, config),
            estimate_I(kernel, q, s, t, search, config),
            estimate_I(kernel, q, t, v, search, config))


def _kato_window_integral(kernel, q: Potential, anchor: float, x, h: float,
                          forward: bool,
                          config: quadrature.QuadratureConfig) -> float:
    """Forward: int_anchor^{anchor+h} int p(anchor,x,u,z) |q(u,z)| dz du.
    Backward: int_{anchor-h}^{anchor} int p(u,z,anchor,x) |q| dz du."""
    aq = _abs_potential(q)
    d = kernel.d
    x = np.asarray(x, dtype=float).reshape(d)

    if forward:
        s0, t0 = anchor, anchor + h

        def f(u, pts):
            tau = u - s0
            dens = kernels.density_tau(kernel, np.full(pts.shape[0], tau),
                                       pts - x)
            return dens * aq(u, pts)

        def scale(u):
            return max(kernels.spread(kernel, u - s0), 1e-9 * h)
    else:
        s0, t0 = anchor - h, anchor

        def f(u, pts):
            tau = t0 - u
            dens = kernels.density_tau(kernel, np.full(pts.shape[0], tau),
                                       x - pts)
            return dens * aq(u, pts)

        def scale(u):
            return max(kernels.spread(kernel, t0 - u), 1e-9 * h)

    gamma = kernels.endpoint_time_grading(kernel, q)
    res = quadrature.integrate_spacetime(
        f, s0, t0, d, config, center=lambda u: x, scale=scale,
        singularities=getattr(q, "singularities", ()),
        time_grading=(gamma, 0.0) if forward else (0.0, gamma))
    return res.value


def _line_search_max(fn, halfwidth, search: SearchConfig):
    """1-d grid probe plus halving descent; deterministic."""
    g = search.grid_points
    xs = np.linspace(-halfwidth, halfwidth, g)
    vals = [fn(xv) for xv in xs]
    best = max(vals)
    x0 = float(xs[int(np.argmax(vals))])
    step = 2.0 * halfwidth / max(g - 1, 1)
    min_step = step * search.min_step_fraction
    rounds = 0
    while step > min_step and rounds < search.descent_rounds:
        rounds += 1
        moved = False
        for dx in (step, -step):
            val = fn(x0 + dx)
            if val > best:
                best = val
                x0 = x0 + dx
                moved = True
                break
        if not moved:
            step *= search.step_shrink
    return best, x0


def kato_profile(kernel, q: Potential, h_values,
                 search: SearchConfig | None = None,
                 config: quadrature.QuadratureConfig | None = None):
    """Searched forward/backward parabolic window integrals per h.

    Returns [(h, sup_forward, sup_backward), ...]; a potential passes the
    vanishing-window test empirically when both columns decrease to 0.
    """
    h_values = list(h_values)
    if any(h <= 0 for h in h_values):
        raise ValueError("h values must be positive")
    search = search or SearchConfig()
    config = config or quadrature.QuadratureConfig()
    out = []
    for h in h_values:
        halfwidth = search.box_halfwidth(kernel, h)
        sup_f = -np.inf
        sup_b = -np.inf
        for s0 in search.s_offsets:
            vf, _ = _line_search_max(
                lambda xv: _kato_window_integral(
                    kernel, q, s0, np.full(kernel.d, xv), h, True, config),
                halfwidth, search)
            vb, _ = _line_search_max(
                lambda xv: _kato_window_integral(
                    kernel, q, s0 + h, np.full(kernel.d, xv), h, False, config),
                halfwidth, search)
            sup_f = max(sup_f, vf)
            sup_b = max(sup_b, vb)
        out.append((h, sup_f, sup_b))
    return out


def relative_kato_implies_kato_check(kernel, q: Potential, h: float,
                                     search: SearchConfig | None = None,
                                     config: quadrature.QuadratureConfig | None = None
                                     ) -> KatoImplicationReport:
    """Checks the integrated implication: over the certificate evidence,
    the plain window integrals of p |q| never exceed the certified eta.

    Requires a probabilistic symmetric kernel (both families qualify):
    integrating the bridge bound in the free endpoint collapses one
    kernel factor to total mass one.
    """
    search = search or SearchConfig()
    config = config or quadrature.QuadratureConfig()
    cert = certify(kernel, q, h, search, config)
    records = []
    max_f = 0.0
    max_b = 0.0
    probes = cert.evidence or [(0.0, h, 0.0, 0.0, cert.eta)]
    for (s0, t0, xv, yv, value) in probes:
        win = t0 - s0
        f = _kato_window_integral(kernel, q, s0, np.full(kernel.d, xv),
                                  win, True, config)
        b = _kato_window_integral(kernel, q, t0, np.full(kernel.d, yv),
                                  win, False, config)
        records.append((s0, t0, xv, yv, f, b, value))
        max_f = max(max_f, f)
        max_b = max(max_b, b)
    eta_ref = cert.eta if cert.evidence else max(cert.eta, cert.beta * h)
    slack = 1e-6 + 1e-3 * max(eta_ref, 1e-12)
    holds = max_f <= eta_ref + slack and max_b <= eta_ref + slack
    return KatoImplicationReport(eta=eta_ref, max_forward=max_f,
                                 max_backward=max_b, holds=holds,
                                 records=records)
