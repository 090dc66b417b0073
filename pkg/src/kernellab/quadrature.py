"""Deterministic space-time integration engine.

Space integrals over R^d use tensor-product Gauss-Legendre after the
substitution z = center + scale*tan(pi*w/2) per axis, which maps (-1,1)
onto the whole line and concentrates nodes near the center.  Time
integrals use Gauss-Legendre on panels graded dyadically toward both
endpoints.  Integrable point singularities of the integrand (power-law
potentials) are removed by an algebraic substitution around the singular
point.

Node sums always run in fixed node order, so results are reproducible
for a given config regardless of any caller-side threading.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass

import numpy as np

from .errors import NumericalFailure


@functools.lru_cache(maxsize=None)
def gauss_legendre(order: int):
    nodes, weights = np.polynomial.legendre.leggauss(order)
    return nodes, weights


def dyadic_panels(a: float, b: float, levels: int = 4):
    """Split [a, b] into 2*levels panels graded toward both endpoints."""
    fracs = [0.5 ** k for k in range(levels, 0, -1)]  # 1/2^L .. 1/2
    breaks = [a] + [a + (b - a) * f for f in fracs]
    breaks += [b - (b - a) * f for f in reversed(fracs[:-1])] + [b]
    return list(zip(breaks[:-1], breaks[1:]))


def panel_nodes(panels, order: int):
    """Gauss-Legendre nodes and weights on a list of panels, in panel order."""
    ref_x, ref_w = gauss_legendre(order)
    xs, ws = [], []
    for a, b in panels:
        h = 0.5 * (b - a)
        xs.append(a + h * (ref_x + 1.0))
        ws.append(h * ref_w)
    return np.concatenate(xs), np.concatenate(ws)


@dataclass(frozen=True)
class QuadratureConfig:
    space_order: int = 40
    time_order: int = 10
    refinement_levels: int = 3
    rel_tol: float = 1e-7
    abs_tol: float = 1e-12

    def __post_init__(self):
        if self.space_order < 8:
            raise ValueError("space_order must be >= 8")
        if self.time_order < 8:
            raise ValueError("time_order must be >= 8")
        if self.rel_tol <= 0:
            raise ValueError("rel_tol must be positive")


@dataclass
class IntegralResult:
    value: float
    error_estimate: float
    evaluations: int


def _tan_axis_nodes(center: float, scale: float, order: int):
    """Nodes/weights for integrating over the whole line along one axis."""
    w, omega = gauss_legendre(order)
    half = 0.5 * np.pi * w
    t = np.tan(half)
    z = center + scale * t
    jac = scale * 0.5 * np.pi * (1.0 + t * t)
    return z, omega * jac


def _power_core_nodes(loc, R, expo, order):
    """Nodes on [loc-R, loc+R] under z = loc + sign(v) |v|^(1/(1-expo)),
    which absorbs an |z-loc|^-expo singularity exactly."""
    p = 1.0 / (1.0 - expo)
    vmax = R ** (1.0 - expo)
    w, omega = gauss_legendre(2 * order)
    v = vmax * w
    z = loc + np.sign(v) * np.abs(v) ** p
    jac = vmax * p * np.abs(v) ** (p - 1.0)
    return z, omega * jac


def _half_tail_nodes(edge, scale, order, direction):
    """Half-line tan map from edge outward (direction +1 or -1)."""
    wt, ot = gauss_legendre(order)
    half = 0.25 * np.pi * (wt + 1.0)  # (0, pi/2)
    t = np.tan(half)
    jac = 0.25 * np.pi * (1.0 + t * t) * scale
    z = edge + direction * scale * t
    return z, ot * jac


def _graded_box_nodes(a, b, order, focus, min_width=None):
    """Panels of [a, b] graded dyadically toward the focus point, going
    down to panels of roughly min_width next to the focus."""
    if min_width is None:
        min_width = (b - a) / 64.0
    levels = int(np.clip(np.ceil(np.log2(max((b - a) / max(min_width, 1e-300), 2.0))),
                         4, 48))
    if focus <= a:
        fracs = [0.5 ** k for k in range(levels, 0, -1)] + [1.0]
        breaks = [a + (b - a) * f for f in fracs]
        panels = list(zip([a] + breaks[:-1], breaks))
    elif focus >= b:
        fracs = [0.5 ** k for k in range(levels, 0, -1)] + [1.0]
        breaks = [b - (b - a) * f for f in fracs][::-1]
        panels = list(zip(breaks, breaks[1:] + [b]))
    else:
        half = max(levels // 2, 2)
        panels = (dyadic_panels(a, focus, half)
                  + dyadic_panels(focus, b, half))
    return panel_nodes(panels, order)


def _singular_axis_nodes(center, scale, order, singularities):
    """1-d nodes for an integrand with one integrable point singularity
    plus a kernel concentration of width ``scale`` at ``center``.

    The line is partitioned into a power-mapped core around the singular
    point (absorbing the |z-loc|^-expo factor), a panel piece graded
    toward the kernel spike when it sits away from the core, smooth gap
    pieces, and tangent-map tails.
    """
    loc, expo = singularities[0]
    if not 0.0 < expo < 1.0:
        raise ValueError("singularity exponent must lie in (0, 1)")
    c, sig = float(center), float(scale)
    sep = abs(c - loc)
    if sep <= 16.0 * sig:
        R = max(8.0 * sig, 2.0 * sep, 1e-300)
        zc, wc = _power_core_nodes(loc, R, expo, 2 * order)
        zl, wl = _half_tail_nodes(loc - R, max(sig, R), order, -1.0)
        zr, wr = _half_tail_nodes(loc + R, max(sig, R), order, +1.0)
        return (np.concatenate([zl[::-1], zc, zr]),
                np.concatenate([wl[::-1], wc, wr]))
    R = 0.5 * sep
    W = min(12.0 * sig, 0.45 * sep)
    zc, wc = _power_core_nodes(loc, R, expo, order)
    zs_, ws_ = _graded_box_nodes(c - W, c + W, order, c, min_width=0.1 * sig)
    pieces_z = [zc, zs_]
    pieces_w = [wc, ws_]
    outer = max(sig, sep)

    def spike_side_tail(edge, direction):
        # graded bounded stretch resolving the kernel's power tail just
        # outside the spike piece, then a far tangent tail
        reach = max(0.5 * sep, 8.0 * W)
        if direction > 0:
            zb, wb = _graded_box_nodes(edge, edge + reach, order, edge,
                                       min_width=0.25 * W)
        else:
            zb, wb = _graded_box_nodes(edge - reach, edge, order, edge,
                                       min_width=0.25 * W)
        zt, wt = _half_tail_nodes(edge + direction * reach, outer, order,
                                  direction)
        return np.concatenate([zb, zt]), np.concatenate([wb, wt])

    if c < loc:
        gap = (c + W, loc - R, c + W)
        ztail_l, wtail_l = spike_side_tail(c - W, -1.0)
        ztail_r, wtail_r = _half_tail_nodes(loc + R, outer, order, +1.0)
    else:
        gap = (loc + R, c - W, c - W)
        ztail_l, wtail_l = _half_tail_nodes(loc - R, outer, order, -1.0)
        ztail_r, wtail_r = spike_side_tail(c + W, +1.0)
    if gap[1] > gap[0]:
        zg, wg = _graded_box_nodes(gap[0], gap[1], order, gap[2],
                                   min_width=max(sig, 1e-12 * sep))
        pieces_z.append(zg)
        pieces_w.append(wg)
    pieces_z += [ztail_l, ztail_r]
    pieces_w += [wtail_l, wtail_r]
    zs = np.concatenate(pieces_z)
    ws = np.concatenate(pieces_w)
    order_idx = np.argsort(zs, kind="stable")
    return zs[order_idx], ws[order_idx]


def space_nodes(d, center, scale, order, singularities=()):
    """Tensor-product nodes and weights covering R^d.

    Returns (points, weights) with points of shape (n, d).  Singularity
    hints are honored for d = 1 only; higher dimensions fall back to the
    plain tangent map.
    """
    center = np.atleast_1d(np.asarray(center, dtype=float))
    scales = np.broadcast_to(np.asarray(scale, dtype=float), center.shape)
    if d == 1:
        if singularities:
            z, w = _singular_axis_nodes(center[0], scales[0], order, singularities)
        else:
            z, w = _tan_axis_nodes(center[0], scales[0], order)
        return z.reshape(-1, 1), w
    axes = [_tan_axis_nodes(center[i], scales[i], order) for i in range(d)]
    grids = np.meshgrid(*[a[0] for a in axes], indexing="ij")
    points = np.stack([g.ravel() for g in grids], axis=-1)
    wgrids = np.meshgrid(*[a[1] for a in axes], indexing="ij")
    weights = np.ones(points.shape[0])
    for wg in wgrids:
        weights = weights * wg.ravel()
    return points, weights


def integrate_box(f, a, b, order):
    """Plain Gauss-Legendre on a bounded box [a, b] (1-d helper).

    Exact for polynomials of degree <= 2*order - 1.
    """
    x, w = gauss_legendre(order)
    h = 0.5 * (b - a)
    pts = a + h * (x + 1.0)
    return h * float(np.dot(w, f(pts)))


def integrate_space(f, d, center, scale, config: QuadratureConfig,
                    singularities=()):
    """Integrate a scalar field over R^d with nested order refinement.

    ``f`` receives an array of points of shape (n, d) and must return an
    array of n values.  Refinement doubles the per-axis order until the
    last-two-levels difference meets max(abs_tol, rel_tol*|value|).
    """
    evaluations = 0
    prev = None
    value = 0.0
    err = np.inf
    for level in range(config.refinement_levels + 1):
        order = config.space_order * (2 ** level)
        pts, ws = space_nodes(d, center, scale, order, singularities)
        vals = np.asarray(f(pts), dtype=float)
        evaluations += pts.shape[0]
        value = float(np.dot(ws, vals))
        if prev is not None:
            err = abs(value - prev)
            if err <= max(config.abs_tol, config.rel_tol * abs(value)):
                return IntegralResult(value, err, evaluations)
        prev = value
    raise NumericalFailure(
        "space integral did not converge within the refinement budget",
        value=value, error_estimate=err)


def time_nodes(s, t, order, grading_levels=4, time_grading=(0.0, 0.0)):
    """Time nodes/weights on (s, t), graded dyadically toward both
    endpoints.

    time_grading = (gamma_left, gamma_right) regularizes integrable
    endpoint singularities u^-gamma by the substitution u = w^(1/(1-gamma))
    on the corresponding half interval.
    """
    mid = 0.5 * (s + t)
    halves = []
    for (a, b, gamma, toward_a) in ((s, mid, time_grading[0], True),
                                    (mid, t, time_grading[1], False)):
        p = 1.0 / (1.0 - gamma) if 0.0 < gamma < 1.0 else 1.0
        span = b - a
        fracs = [0.5 ** k for k in range(grading_levels, 0, -1)] + [1.0]
        breaks = [0.0] + fracs
        ws, omegas = [], []
        for w0, w1 in zip(breaks[:-1], breaks[1:]):
            xs, wq = panel_nodes([(w0, w1)], order)
            ws.append(xs)
            omegas.append(wq)
        wgrid = np.concatenate(ws)
        wq = np.concatenate(omegas)
        jac = span * p * wgrid ** (p - 1.0)
        offs = span * wgrid ** p
        if toward_a:
            us = a + offs
        else:
            us = b - offs[::-1]
            jac = jac[::-1]
            wq = wq[::-1]
        halves.append((us, wq * jac))
    return (np.concatenate([halves[0][0], halves[1][0]]),
            np.concatenate([halves[0][1], halves[1][1]]))


def integrate_spacetime(f, s, t, d, config: QuadratureConfig, *,
                        center=None, scale=None, singularities=(),
                        grading_levels=4, time_grading=(0.0, 0.0)):
    """Integrate f(u, z) over (s,t) x R^d.

    Outer Gauss-Legendre in u on dyadically graded panels (optionally
    power-mapped around integrable endpoint singularities), inner
    tangent-map rule in z.  ``center`` and ``scale`` may be callables of
    u choosing the inner substitution per time node; they default to the
    origin and unit scale.  ``f`` receives (u, points) with points of
    shape (n, d) and returns n values.
    """
    if not s < t:
        raise ValueError("need s < t")
    if center is None:
        center = lambda u: np.zeros(d)
    if scale is None:
        scale = lambda u: 1.0
    evaluations = 0
    prev = None
    value = 0.0
    err = np.inf
    for level in range(config.refinement_levels + 1):
        t_order = config.time_order * (2 ** level)
        s_order = config.space_order * (2 ** level)
        us, wu = time_nodes(s, t, t_order, grading_levels, time_grading)
        total = 0.0
        for u, w in zip(us, wu):
            pts, ws = space_nodes(d, center(u), scale(u), s_order, singularities)
            vals = np.asarray(f(u, pts), dtype=float)
            evaluations += pts.shape[0]
            total += w * float(np.dot(ws, vals))
        value = total
        if prev is not None:
            err = abs(value - prev)
            if err <= max(config.abs_tol, config.rel_tol * abs(value)):
                return IntegralResult(value, err, evaluations)
        prev = value
    raise NumericalFailure(
        "space-time integral did not converge within the refinement budget",
        value=value, error_estimate=err)


def bridge_functional(kernel, q, s, x, t, y, config: QuadratureConfig):
    """Normalized bridge integral of a potential.

    Computes  int_s^t int p(s,x,u,z) q(u,z) p(u,z,t,y) dz du / p(s,x,t,y)
    with the integrand formed in log space, so extreme density ratios
    never overflow or underflow.  For the Gaussian kernel this equals the
    expected path integral of q along the bridge from (s,x) to (t,y).
    """
    from . import kernels  # deferred: kernels imports this module too

    if not s < t:
        raise ValueError("need s < t")
    x = np.atleast_1d(np.asarray(x, dtype=float))
    y = np.atleast_1d(np.asarray(y, dtype=float))
    d = kernel.d
    log_pxy = kernels.log_density(kernel, s, x, t, y)

    def integrand(u, pts):
        lp1 = kernels.log_density_many(kernel, s, np.broadcast_to(x, pts.shape), u, pts)
        lp2 = kernels.log_density_many(kernel, u, pts, t, np.broadcast_to(y, pts.shape))
        return np.exp(lp1 + lp2 - log_pxy) * q(u, pts)

    def center(u):
        c, _ = kernels.bridge_center_scale(kernel, s, x, t, y, u)
        return c

    def scale(u):
        _, sc = kernels.bridge_center_scale(kernel, s, x, t, y, u)
        return sc

    gamma = kernels.endpoint_time_grading(kernel, q)
    return integrate_spacetime(
        integrand, s, t, d, config,
        center=center, scale=scale,
        singularities=getattr(q, "singularities", ()),
        time_grading=(gamma, gamma))
