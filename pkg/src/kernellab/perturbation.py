"""Perturbation series for transition densities.

The perturbed kernel is the sum of iterated space-time convolutions

    p_0 = p,   p_n(s,x,t,y) = int_s^t int p_{n-1}(s,x,u,z) p(u,z,t,y) q(u,z) dz du,

summed with a truncation index chosen from the certified majorant
b_n = sum_k C(n,k) (beta tau)^k eta^(n-k) / k!, whose total is
exp(beta tau / (1-eta)) / (1-eta).

Terms are materialized on a shared space-time lattice so the recursion
costs O(N * lattice^2) instead of blowing up exponentially.  Time nodes
are Chebyshev-Lobatto points on panels graded dyadically toward both
endpoints; this makes every partial integral int_s^{v_k} an exact
integral of a panel interpolant, with the integrand value at the moving
endpoint supplied by the diagonal limit

    lim_{v->v_k} int f(v,w) q(v,w) p(v,w,v_k,z) dw = q(v_k,z) f(v_k,z),

valid because both kernel families are probabilistic.  Space nodes per
time row follow the bridge center and spread.  The endpoint rows carry
analytic limits instead of degenerate grids, which restricts the series
machinery to potentials that are bounded near the two endpoints (all
corpus potentials qualify; the power law does away from the origin).

The lattice recursion supports one space dimension; the series cost in
d >= 2 grows with the fourth power of the per-axis order and none of the
verification scenarios need it.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field

import numpy as np
from numpy.polynomial import chebyshev as _cheb

from . import combinatorics, kernels, quadrature
from .errors import DivergenceRiskError, InvalidPotentialError, UnsupportedKernelError
from .potentials import ConstantPotential, Potential, SumPotential

_N_CAP = 40


@dataclass
class SeriesEvaluation:
    """Outcome of summing the perturbation series at one point."""

    terms: list
    value: float
    tail_bound: float
    eta_used: float
    beta_used: float

    @property
    def truncation_index(self) -> int:
        return len(self.terms) - 1


# ---------------------------------------------------------------------------
# time grid: Lobatto panels and partial-interval weights
# ---------------------------------------------------------------------------

@functools.lru_cache(maxsize=None)
def _lobatto_reference(m: int):
    """Chebyshev-Lobatto nodes on [-1,1] (increasing) and, for each j,
    weights integrating the degree-j interpolant on nodes 0..j over
    [-1, node_j]."""
    nodes = -np.cos(np.pi * np.arange(m + 1) / m)
    partial = [None]
    for j in range(1, m + 1):
        sub = nodes[: j + 1]
        V = _cheb.chebvander(sub, j)
        b = np.empty(j + 1)
        for k in range(j + 1):
            coef = np.zeros(k + 1)
            coef[k] = 1.0
            anti = _cheb.chebint(coef)
            b[k] = _cheb.chebval(nodes[j], anti) - _cheb.chebval(-1.0, anti)
        partial.append(np.linalg.solve(V.T, b))
    return nodes, partial


def _interp_weights(sub_nodes, lo: float, hi: float):
    """Weights on sub_nodes integrating their interpolant over [lo, hi];
    all coordinates in the panel reference interval [-1, 1]."""
    j = len(sub_nodes) - 1
    V = _cheb.chebvander(np.asarray(sub_nodes), j)
    b = np.empty(j + 1)
    for k in range(j + 1):
        coef = np.zeros(k + 1)
        coef[k] = 1.0
        anti = _cheb.chebint(coef)
        b[k] = _cheb.chebval(hi, anti) - _cheb.chebval(lo, anti)
    return np.linalg.solve(V.T, b)


class _TimeGrid:
    """Global Lobatto time grid on dyadic panels of [s, t].

    Row 0 is s, row M is t, panel boundaries are shared.  W[k, i] holds
    the weight of node i in the rule for int_s^{v_k}; rules integrate the
    per-panel Chebyshev interpolants exactly.
    """

    def __init__(self, s: float, t: float, m: int, levels: int = 4):
        self.s, self.t, self.m = s, t, m
        self.panels = quadrature.dyadic_panels(s, t, levels)
        P = len(self.panels)
        ref, partial = _lobatto_reference(m)
        self.M = P * m
        times = np.empty(self.M + 1)
        for p, (a, b) in enumerate(self.panels):
            times[p * m: (p + 1) * m + 1] = a + 0.5 * (b - a) * (ref + 1.0)
        times[0], times[self.M] = s, t
        self.times = times
        W = np.zeros((self.M + 1, self.M + 1))
        full = partial[m]
        for k in range(1, self.M + 1):
            p = (k - 1) // m
            j = k - p * m
            a, b = self.panels[p]
            for pp in range(p):
                aa, bb = self.panels[pp]
                W[k, pp * m: (pp + 1) * m + 1] += 0.5 * (bb - aa) * full
            W[k, p * m: p * m + j + 1] += 0.5 * (b - a) * partial[j]
        self.W = W

    def rule_to(self, u: float):
        """Rule for int_s^u: (global row indices, their weights, diagonal
        weight for the limit value at u itself)."""
        if not self.s < u <= self.t:
            raise ValueError("u must lie in (s, t]")
        span = self.t - self.s
        near = np.argmin(np.abs(self.times - u))
        if abs(self.times[near] - u) <= 1e-13 * span and near > 0:
            k = int(near)
            return np.arange(k), self.W[k, :k].copy(), self.W[k, k]
        ref, partial = _lobatto_reference(self.m)
        p = min(int(np.searchsorted([b for _, b in self.panels], u)),
                len(self.panels) - 1)
        a, b = self.panels[p]
        vu = 2.0 * (u - a) / (b - a) - 1.0
        acc = np.zeros(self.M + 1)
        for pp in range(p):
            aa, bb = self.panels[pp]
            acc[pp * self.m: (pp + 1) * self.m + 1] += 0.5 * (bb - aa) * partial[self.m]
        local = np.where(ref < vu - 1e-14)[0]
        sub = np.concatenate([ref[local], [vu]])
        w = 0.5 * (b - a) * _interp_weights(sub, -1.0, vu)
        acc[p * self.m + local] += w[:-1]
        nz = np.where(acc != 0.0)[0]
        return nz, acc[nz], w[-1]


# ---------------------------------------------------------------------------
# the series lattice
# ---------------------------------------------------------------------------

_RESOLUTION_KAPPA = 2.5


def _closing_weights(A, B, n: int):
    """Two-point rule on [A, B] (coordinates measured from the lattice
    start) exact for the span of (v)^(n-1) and (v)^n.

    This is the growth profile of term n under a constant potential, so
    the closing segment of every truncated time rule stays exact for
    constants and stable as n grows; a plain trapezoid would amplify the
    profile misfit geometrically through the recursion.
    """
    A = np.asarray(A, dtype=float)
    B = np.asarray(B, dtype=float)
    Bsafe = np.where(B > 0.0, B, 1.0)
    r = np.clip(A / Bsafe, 0.0, 1.0)
    rn1 = r ** (n - 1) if n > 1 else np.ones_like(r)
    one_minus = 1.0 - r
    usable = (rn1 > 1e-250) & (one_minus > 1e-8)
    denom = np.where(usable, rn1 * one_minus, 1.0)
    num = (1.0 - r ** n) / n - (1.0 - r ** (n + 1)) / (n + 1)
    wa = np.where(usable, B * num / denom, 0.0)
    wb = B * (1.0 - r ** n) / n - wa * rn1
    tiny_gap = one_minus <= 1e-8
    wa = np.where(tiny_gap, 0.5 * (B - A), wa)
    wb = np.where(tiny_gap, 0.5 * (B - A), wb)
    return wa, wb


class SeriesLattice:
    """Materialized recursion state for one endpoint pair (s,x) -> (t,y).

    Interior rows r = 1..M-1 carry bridge-adapted space grids; the
    endpoint rows contribute analytic limit values.  Per target node, the
    time rule is truncated at the last source row whose grid still
    resolves the kernel width over the remaining gap; the gap is closed
    with a trapezoid ending in the diagonal limit.  Without this cutoff
    the near-diagonal rows feed unresolved spike integrals into every
    off-center target.  ``extra_scale`` widens the row grids (used when
    series values are later queried at off-bridge targets).
    """

    def __init__(self, kernel, q: Potential, s, x, t, y,
                 config: quadrature.QuadratureConfig, extra_scale: float = 0.0):
        if kernel.d != 1:
            raise UnsupportedKernelError(
                "the series lattice supports one space dimension")
        self.kernel = kernel
        self.q = q
        self.s, self.t = float(s), float(t)
        self.x = np.atleast_1d(np.asarray(x, dtype=float))
        self.y = np.atleast_1d(np.asarray(y, dtype=float))
        self.config = config
        self.grid = _TimeGrid(self.s, self.t, config.time_order)
        M = self.grid.M
        self.R = M - 1
        Z = config.space_order
        tau = self.t - self.s
        inner = self.grid.times[1:M]
        centers = np.empty(self.R)
        scales = np.empty(self.R)
        for r, u in enumerate(inner):
            c, sc = kernels.bridge_center_scale(kernel, self.s, self.x, self.t, self.y, u)
            centers[r] = c[0]
            scales[r] = sc + extra_scale * min(u - self.s, self.t - u) / tau * 2.0
        gl_w, gl_omega = quadrature.gauss_legendre(Z)
        tan_half = np.tan(0.5 * np.pi * gl_w)
        jac = 0.5 * np.pi * (1.0 + tan_half * tan_half)
        self.nodes = centers[:, None] + scales[:, None] * tan_half[None, :]
        self.V = scales[:, None] * (gl_omega * jac)[None, :]
        self.inner_times = inner
        self.centers = centers
        self.scales = scales
        self._spacing_coeff = 0.5 * np.pi / Z

        disp = self.nodes[None, None, :, :] - self.nodes[:, :, None, None]
        taumat = inner[None, None, :, None] - inner[:, None, None, None]
        self.K4 = kernels.density_tau_1d(kernel, taumat, disp)
        self.Kx = kernels.density_tau_1d(
            kernel, (inner - self.s)[:, None], self.nodes - self.x[0])
        self.Ky = kernels.density_tau_1d(
            kernel, (self.t - inner)[:, None], self.y[0] - self.nodes)
        self.pxy = float(kernels.density_tau_1d(kernel, np.array(tau),
                                                np.array(self.y[0] - self.x[0])))

        pts = self.nodes[..., None]
        self.Q = np.asarray(q(inner[:, None], pts), dtype=float)
        self.qx = float(np.asarray(q(self.s, self.x[None, :]), dtype=float).reshape(())[()])
        self.qy = float(np.asarray(q(self.t, self.y[None, :]), dtype=float).reshape(())[()])
        if not (np.all(np.isfinite(self.Q)) and math.isfinite(self.qx)
                and math.isfinite(self.qy)):
            raise InvalidPotentialError(
                "potential evaluated to a non-finite value on the lattice")

        self._build_interior_rules()
        self._wy_rows, self._wy_zero, self._wy_cut, self._wy_A = \
            self._rule_for_targets(self.t, np.array([self.y[0]]))
        self._F = self.Kx.copy()          # current term on interior rows
        self._P = self.pxy                # current term at (t, y)
        self.term_values = [self.pxy]
        self.term_rows = [self.Kx.copy()]
        self.n = 0

    # -- resolution-aware time rules -----------------------------------------

    def _local_spacing(self, zt):
        """Approximate node spacing of every row grid at target positions
        zt: shape (R, len(zt))."""
        D = zt[None, :] - self.centers[:, None]
        sig = self.scales[:, None]
        return self._spacing_coeff * (sig * sig + D * D) / sig

    def _cut_index(self, v_target: float, zt):
        """For each target position, the last interior row index whose grid
        resolves the kernel over the gap up to v_target (-1 if none)."""
        before = np.where(self.inner_times < v_target - 1e-15 * (self.t - self.s))[0]
        if before.size == 0:
            return np.full(zt.shape, -1, dtype=int)
        widths = kernels.spread_many(self.kernel, v_target - self.inner_times[before])
        spacing = self._local_spacing(zt)[before]
        ok = widths[:, None] >= _RESOLUTION_KAPPA * spacing
        any_ok = ok.any(axis=0)
        last = before.size - 1 - np.argmax(ok[::-1], axis=0)
        idx = np.where(any_ok, before[np.clip(last, 0, before.size - 1)], -1)
        return idx

    def _rule_for_targets(self, v_target: float, zt):
        """Truncated time rules toward (v_target, zt).

        Returns (w_rows, w_zero, cut, A): w_rows has shape (len(zt), R)
        weighting the interior-source values up to the cut row, w_zero
        weights the endpoint limit at s, cut holds the cut row index per
        target (-1 when no row resolves), and A the cut time measured
        from s.  The closing segment (A, v_target] is weighted per term
        by _closing_weights.
        """
        zt = np.asarray(zt, dtype=float).reshape(-1)
        cut = self._cut_index(v_target, zt)
        J = zt.size
        w_rows = np.zeros((J, self.R))
        w_zero = np.zeros(J)
        A = np.zeros(J)
        rule_cache = {}
        for j in range(J):
            istar = cut[j]
            if istar < 0:
                continue
            g = istar + 1  # global row of the cut
            if g not in rule_cache:
                rule_cache[g] = (self.grid.W[g, 1:self.grid.M].copy(),
                                 self.grid.W[g, 0])
            base, w0 = rule_cache[g]
            w_rows[j, :] = base
            w_zero[j] = w0
            A[j] = self.inner_times[istar] - self.s
        return w_rows, w_zero, cut, A

    def _build_interior_rules(self):
        """Rules for every interior lattice node, stacked as (R, Z, R)."""
        R, Z = self.R, self.nodes.shape[1]
        self._Wg = np.zeros((R, Z, R))
        self._Wg_zero = np.zeros((R, Z))
        self._cut = np.zeros((R, Z), dtype=int)
        self._cutA = np.zeros((R, Z))
        for k in range(R):
            w_rows, w_zero, cut, A = self._rule_for_targets(
                self.inner_times[k], self.nodes[k])
            self._Wg[k] = w_rows
            self._Wg_zero[k] = w_zero
            self._cut[k] = cut
            self._cutA[k] = A
        self._cutB = np.broadcast_to(
            (self.inner_times - self.s)[:, None], (R, Z)).copy()

    # -- recursion ----------------------------------------------------------

    def advance(self):
        """Compute term n+1 from term n on the lattice."""
        n = self.n + 1
        R, Z = self.R, self.nodes.shape[1]
        G = self.V * self._F * self.Q
        H = np.einsum("ij,ijkl->ikl", G, self.K4)
        F_new = np.einsum("kli,ikl->kl", self._Wg, H)
        wa, wb = _closing_weights(self._cutA, self._cutB, n)
        krange = np.arange(R)[:, None]
        lrange = np.arange(Z)[None, :]
        phi_cut = H[np.clip(self._cut, 0, R - 1), krange, lrange]
        if n == 1:
            phi_cut = np.where(self._cut >= 0, phi_cut, self.qx * self.Kx)
        else:
            phi_cut = np.where(self._cut >= 0, phi_cut, 0.0)
        F_new += wa * phi_cut + wb * self.Q * self._F
        if n == 1:
            F_new += self._Wg_zero * (self.qx * self.Kx)
        Gy = np.sum(G * self.Ky, axis=1)
        P_new = float(np.dot(self._wy_rows[0], Gy))
        wya, wyb = _closing_weights(self._wy_A, np.array([self.t - self.s]), n)
        cut_y = int(self._wy_cut[0])
        phi_y = Gy[cut_y] if cut_y >= 0 else (self.qx * self.pxy if n == 1 else 0.0)
        P_new += float(wya[0]) * phi_y + float(wyb[0]) * self.qy * self._P
        if n == 1:
            P_new += self._wy_zero[0] * self.qx * self.pxy
        self._F, self._P = F_new, P_new
        self.n = n
        self.term_values.append(P_new)
        self.term_rows.append(F_new)
        return P_new

    def terms_up_to(self, n: int):
        while self.n < n:
            self.advance()
        return self.term_values[: n + 1]

    def interior_sum(self, n: int):
        """Sum of terms 0..n on the interior rows (perturbed density there)."""
        self.terms_up_to(n)
        return sum(self.term_rows[k] for k in range(n + 1))

    # -- evaluation at off-lattice targets -----------------------------------

    def target_terms(self, u: float, zs, n_max: int):
        """Series terms p_n(s, x, u, z*) for arbitrary u in (s, t] and a
        vector of space targets, n = 0..n_max."""
        zs = np.atleast_1d(np.asarray(zs, dtype=float)).reshape(-1)
        self.terms_up_to(n_max)
        w_rows, w_zero, cut, A = self._rule_for_targets(u, zs)
        disp = zs[None, None, :] - self.nodes[:, :, None]
        taus = np.full((self.R, 1, 1), u) - self.inner_times[:, None, None]
        Kto = kernels.density_tau_1d(self.kernel, taus, disp)
        Kx_to = kernels.density_tau_1d(
            self.kernel, np.full(zs.shape, u - self.s), zs - self.x[0])
        q_at = np.asarray(self.q(u, zs[:, None]), dtype=float)
        B = np.full(zs.shape, u - self.s)
        out = [Kx_to]
        for n in range(1, n_max + 1):
            G = self.V * self.term_rows[n - 1] * self.Q
            phi = np.einsum("ij,ijm->im", G, Kto)
            vals = np.einsum("mi,im->m", w_rows, phi)
            wa, wb = _closing_weights(A, B, n)
            phi_cut = phi[np.clip(cut, 0, self.R - 1), np.arange(zs.size)]
            if n == 1:
                phi_cut = np.where(cut >= 0, phi_cut, self.qx * Kx_to)
            else:
                phi_cut = np.where(cut >= 0, phi_cut, 0.0)
            vals = vals + wa * phi_cut + wb * q_at * out[n - 1]
            if n == 1:
                vals = vals + w_zero * self.qx * Kx_to
            out.append(vals)
        return out

    def final_values_at(self, zs, n_max: int):
        """Series terms at the lattice end time for arbitrary space targets."""
        return self.target_terms(self.t, zs, n_max)


def reversed_lattice(kernel, q, s, x, t, y, config, extra_scale=0.0):
    """Lattice computing terms p_n(., ., t, y) via time reversal.

    Both kernel families are symmetric and homogeneous, so
    p_n(u, z, t, y) for potential q equals the forward term from (-t, y)
    to (-u, z) for the reversed potential u -> q(-u).  Interior row r of
    the returned lattice holds p_n(u_r, z, t, y) with u_r = -times[r+1].
    """
    return SeriesLattice(kernel, q.time_reversed(), -t, y, -s, x, config,
                         extra_scale=extra_scale)


# ---------------------------------------------------------------------------
# truncation policy
# ---------------------------------------------------------------------------

def _truncation_tolerance(config):
    return max(config.rel_tol * 10.0, 1e-9)


def _certified_sum(lattice: SeriesLattice, cert, config) -> SeriesEvaluation:
    eta = float(cert.eta)
    beta = float(cert.beta)
    if eta >= 1.0:
        raise DivergenceRiskError(
            f"certificate eta = {eta} >= 1: series not certified to converge")
    tau = lattice.t - lattice.s
    beta_tau = beta * tau
    tol = _truncation_tolerance(config)
    total_majorant = combinatorics.majorant_total(eta, beta_tau)
    acc = 0.0
    for n in range(_N_CAP + 1):
        acc += lattice.terms_up_to(n)[n]
        tail = lattice.pxy * (total_majorant - combinatorics.majorant_sum(eta, beta_tau, n))
        if tail <= tol * max(abs(acc), 1e-300):
            return SeriesEvaluation(list(lattice.term_values), acc, tail, eta, beta)
    raise DivergenceRiskError(
        f"series tail still {tail:.3e} after {_N_CAP} terms "
        f"(eta={eta}, beta*tau={beta_tau}); refusing to report a value")


def certified_term_count(cert, tau, pxy, config) -> int:
    """Smallest N whose majorant tail meets the truncation tolerance."""
    eta, beta = float(cert.eta), float(cert.beta)
    if eta >= 1.0:
        raise DivergenceRiskError("certificate eta >= 1")
    tol = _truncation_tolerance(config)
    total = combinatorics.majorant_total(eta, beta * tau)
    for n in range(_N_CAP + 1):
        if pxy * (total - combinatorics.majorant_sum(eta, beta * tau, n)) <= tol * pxy:
            return max(n, 1)
    raise DivergenceRiskError("majorant tail does not meet tolerance within the term cap")


# ---------------------------------------------------------------------------
# public operations
# ---------------------------------------------------------------------------

def term_pn(kernel, q: Potential, n: int, s, x, t, y,
            config: quadrature.QuadratureConfig | None = None) -> float:
    """The n-th series term p_n(s,x,t,y); p_0 is the base density."""
    if n < 0:
        raise ValueError("n must be nonnegative")
    if n > _N_CAP:
        raise DivergenceRiskError(
            f"term recursion capped at n = {_N_CAP}; use the tail bound instead")
    config = config or quadrature.QuadratureConfig()
    if not s < t:
        return 0.0
    if n == 0:
        return kernels.density(kernel, s, x, t, y)
    lattice = SeriesLattice(kernel, q, s, x, t, y, config)
    return lattice.terms_up_to(n)[n]


def perturbed_density(kernel, q: Potential, s, x, t, y, cert,
                      config: quadrature.QuadratureConfig | None = None) -> SeriesEvaluation:
    """Sum the signed series with the certified majorant tail bound."""
    config = config or quadrature.QuadratureConfig()
    if not s < t:
        return SeriesEvaluation([0.0], 0.0, 0.0, float(cert.eta), float(cert.beta))
    if float(cert.eta) == 0.0 and float(cert.beta) == 0.0:
        value = kernels.density(kernel, s, x, t, y)
        return SeriesEvaluation([value], value, 0.0, 0.0, 0.0)
    lattice = SeriesLattice(kernel, q, s, x, t, y, config)
    return _certified_sum(lattice, cert, config)


def duhamel_residual(kernel, q: Potential, s, x, t, y, cert,
                     config: quadrature.QuadratureConfig | None = None) -> float:
    """Relative residual of ptilde = p + int p q ptilde.

    The unknown under the integral is materialized by a backward lattice
    (time reversal) and then integrated against p q on fresh space grids
    per time row, so the fixed-point identity is probed away from the
    quadrature that built the series.
    """
    config = config or quadrature.QuadratureConfig()
    x1 = np.atleast_1d(np.asarray(x, dtype=float))
    y1 = np.atleast_1d(np.asarray(y, dtype=float))
    back = reversed_lattice(kernel, q, s, x, t, y, config)
    ev = _certified_sum(back, cert, config)
    ptilde = ev.value
    n_used = ev.truncation_index
    pxy = back.pxy
    qx = float(np.asarray(q(s, x1[None, :])).reshape(())[()])
    qy = float(np.asarray(q(t, y1[None, :])).reshape(())[()])
    WM = back.grid.W[back.grid.M]
    J = 2 * config.space_order
    gl_w, gl_omega = quadrature.gauss_legendre(J)
    tan_half = np.tan(0.5 * np.pi * gl_w)
    jac = 0.5 * np.pi * (1.0 + tan_half * tan_half)
    phi_rows = np.empty(back.R)
    for r in range(back.R):
        u = -back.inner_times[r]          # original time of reversed row r
        cu, su = kernels.bridge_center_scale(kernel, s, x1, t, y1, u)
        zs = cu[0] + su * tan_half
        vz = su * gl_omega * jac
        ptilde_vals = sum(back.target_terms(back.inner_times[r], zs, n_used))
        pvals = kernels.density_tau_1d(kernel, np.full(J, u - s), zs - x1[0])
        qvals = np.asarray(q(u, zs[:, None]), dtype=float)
        phi_rows[r] = float(np.dot(vz, pvals * qvals * ptilde_vals))
    integral = float(np.dot(WM[1:back.grid.M], phi_rows))
    integral += WM[0] * qy * pxy          # reversed row 0 is the original u = t
    integral += WM[back.grid.M] * qx * ptilde
    return abs(ptilde - pxy - integral) / abs(ptilde)


def perturbed_chapman_residual(kernel, q: Potential, s, x, u, t, y, cert,
                               config: quadrature.QuadratureConfig | None = None) -> float:
    """Relative residual of int ptilde(s,x,u,z) ptilde(u,z,t,y) dz = ptilde(s,x,t,y)."""
    if not s < u < t:
        raise ValueError("need s < u < t")
    config = config or quadrature.QuadratureConfig()
    x1 = np.atleast_1d(np.asarray(x, dtype=float))
    y1 = np.atleast_1d(np.asarray(y, dtype=float))
    center, scale = kernels.bridge_center_scale(kernel, s, x1, t, y1, u)
    zs, vz = quadrature.space_nodes(1, center, scale, 2 * config.space_order)
    zs = zs[:, 0]

    left = SeriesLattice(kernel, q, s, x, u, center, config,
                         extra_scale=0.5 * scale)
    n_left = certified_term_count(cert, u - s, left.pxy, config)
    left_terms = left.final_values_at(zs, n_left)
    left_vals = sum(left_terms)

    right = reversed_lattice(kernel, q, u, center, t, y, config,
                             extra_scale=0.5 * scale)
    n_right = certified_term_count(cert, t - u, right.pxy, config)
    right_terms = right.final_values_at(zs, n_right)
    right_vals = sum(right_terms)

    lhs = float(np.dot(vz, left_vals * right_vals))
    rhs = perturbed_density(kernel, q, s, x, t, y, cert, config).value
    return abs(lhs - rhs) / abs(rhs)


def term_chapman(kernel, q: Potential, n: int, s, x, u, t, y,
                 config: quadrature.QuadratureConfig | None = None) -> float:
    """Relative residual of
    sum_{m=0}^n int p_m(s,x,u,z) p_{n-m}(u,z,t,y) dz = p_n(s,x,t,y)."""
    if not s < u < t:
        raise ValueError("need s < u < t")
    if n > 4:
        raise ValueError("term-level consistency checks are limited to n <= 4")
    config = config or quadrature.QuadratureConfig()
    x1 = np.atleast_1d(np.asarray(x, dtype=float))
    y1 = np.atleast_1d(np.asarray(y, dtype=float))
    center, scale = kernels.bridge_center_scale(kernel, s, x1, t, y1, u)
    zs, vz = quadrature.space_nodes(1, center, scale, 2 * config.space_order)
    zs = zs[:, 0]
    left = SeriesLattice(kernel, q, s, x, u, center, config,
                         extra_scale=0.5 * scale)
    right = reversed_lattice(kernel, q, u, center, t, y, config,
                             extra_scale=0.5 * scale)
    L = left.final_values_at(zs, n)
    Rv = right.final_values_at(zs, n)
    lhs = sum(float(np.dot(vz, L[m] * Rv[n - m])) for m in range(n + 1))
    full = SeriesLattice(kernel, q, s, x, t, y, config)
    rhs = full.terms_up_to(n)[n]
    scale_ref = abs(rhs) if rhs != 0.0 else full.pxy
    return abs(lhs - rhs) / scale_ref


def split_consistency(kernel, q: Potential, n: int, m: int, s, x, t, y,
                      config: quadrature.QuadratureConfig | None = None) -> float:
    """Relative residual of the split recursion
    p_n = int int p_{n-1-m}(s,x,u,z) p_m(u,z,t,y) q(u,z) dz du."""
    if not (1 <= n <= 5 and 0 <= m <= n - 1):
        raise ValueError("need 1 <= n <= 5 and 0 <= m <= n-1")
    config = config or quadrature.QuadratureConfig()
    fwd = SeriesLattice(kernel, q, s, x, t, y, config)
    lhs = fwd.terms_up_to(n)[n]
    back = reversed_lattice(kernel, q, s, x, t, y, config)
    back.terms_up_to(m)
    R = fwd.R
    Hm = np.empty((R, fwd.nodes.shape[1]))
    for r in range(R):
        u_r = fwd.inner_times[r]
        Hm[r] = back.target_terms(-u_r, fwd.nodes[r], m)[m]
    WM = fwd.grid.W[fwd.grid.M]
    phi_rows = np.sum(fwd.V * fwd.term_rows[n - 1 - m] * fwd.Q * Hm, axis=1)
    rhs = float(np.dot(WM[1:fwd.grid.M], phi_rows))
    if n - 1 - m == 0:
        rhs += WM[0] * fwd.qx * back.term_values[m]
    if m == 0:
        rhs += WM[fwd.grid.M] * fwd.qy * fwd.term_values[n - 1]
    scale_ref = abs(lhs) if lhs != 0.0 else fwd.pxy
    return abs(lhs - rhs) / scale_ref


# ---------------------------------------------------------------------------
# two-stage composition on a coarse pairwise lattice
# ---------------------------------------------------------------------------

class _PairwiseLattice:
    """Coarse lattice carrying kernel values between every node pair.

    Used only by the composition check: stage one builds the pairwise
    perturbed kernel of q1, stage two perturbs that kernel by q2 through
    the ordinary forward recursion.  Sizes are kept small because the
    pairwise recursion costs lattice^2 per intermediate row.
    """

    def __init__(self, kernel, s, x, t, y, config, m=8, Z=24, levels=2):
        self.kernel = kernel
        self.s, self.t = float(s), float(t)
        self.x = np.atleast_1d(np.asarray(x, dtype=float))
        self.y = np.atleast_1d(np.asarray(y, dtype=float))
        self.grid = _TimeGrid(self.s, self.t, m, levels)
        self.m = m
        M = self.grid.M
        self.R = M - 1
        inner = self.grid.times[1:M]
        self.inner_times = inner
        centers = np.empty(self.R)
        scales = np.empty(self.R)
        for r, u in enumerate(inner):
            c, sc = kernels.bridge_center_scale(kernel, self.s, self.x, self.t, self.y, u)
            centers[r], scales[r] = c[0], sc
        gl_w, gl_omega = quadrature.gauss_legendre(Z)
        tan_half = np.tan(0.5 * np.pi * gl_w)
        jac = 0.5 * np.pi * (1.0 + tan_half * tan_half)
        self.Z = Z
        self.nodes = centers[:, None] + scales[:, None] * tan_half[None, :]
        self.V = scales[:, None] * (gl_omega * jac)[None, :]
        disp = self.nodes[None, None, :, :] - self.nodes[:, :, None, None]
        taumat = inner[None, None, :, None] - inner[:, None, None, None]
        self.K4 = kernels.density_tau_1d(kernel, taumat, disp)
        self.Kx = kernels.density_tau_1d(kernel, (inner - self.s)[:, None],
                                         self.nodes - self.x[0])
        self.Ky = kernels.density_tau_1d(kernel, (self.t - inner)[:, None],
                                         self.y[0] - self.nodes)
        self.pxy = float(kernels.density_tau_1d(kernel, np.array(self.t - self.s),
                                                np.array(self.y[0] - self.x[0])))
        self._pair_rules = {}

    def pair_rule(self, i: int, k: int):
        """Rule for int_{v_i}^{v_k} over interior rows (both in 0..R-1):
        (row indices, weights, lower diagonal weight, upper diagonal weight)."""
        key = (i, k)
        if key in self._pair_rules:
            return self._pair_rules[key]
        gi, gk = i + 1, k + 1
        ref, partial = _lobatto_reference(self.m)
        m = self.m
        pi, ji = (gi - 1) // m, gi - ((gi - 1) // m) * m
        pk = (gk - 1) // m
        acc = np.zeros(self.grid.M + 1)
        w_lo = w_hi = 0.0
        if pi == pk or (ji == m and pk == pi + 1):
            # both ends inside one panel (ji == m means gi is the shared
            # boundary, i.e. the start of panel pk)
            panel = pk
            a, b = self.grid.panels[panel]
            lo = 2.0 * (self.grid.times[gi] - a) / (b - a) - 1.0
            hi = 2.0 * (self.grid.times[gk] - a) / (b - a) - 1.0
            sel = np.where((ref > lo + 1e-14) & (ref < hi - 1e-14))[0]
            sub = np.concatenate([[lo], ref[sel], [hi]])
            w = 0.5 * (b - a) * _interp_weights(sub, lo, hi)
            w_lo, w_hi = w[0], w[-1]
            np.add.at(acc, panel * m + sel, w[1:-1])
        else:
            # right piece of panel pi, full panels, left piece of panel pk
            a, b = self.grid.panels[pi]
            lo = 2.0 * (self.grid.times[gi] - a) / (b - a) - 1.0
            sel = np.where(ref > lo + 1e-14)[0]
            sub = np.concatenate([[lo], ref[sel]])
            w = 0.5 * (b - a) * _interp_weights(sub, lo, 1.0)
            w_lo = w[0]
            np.add.at(acc, pi * m + sel, w[1:])
            for pp in range(pi + 1, pk):
                aa, bb = self.grid.panels[pp]
                np.add.at(acc, pp * m + np.arange(m + 1),
                          0.5 * (bb - aa) * partial[m])
            a, b = self.grid.panels[pk]
            hi = 2.0 * (self.grid.times[gk] - a) / (b - a) - 1.0
            sel = np.where(ref < hi - 1e-14)[0]
            sub = np.concatenate([ref[sel], [hi]])
            w = 0.5 * (b - a) * _interp_weights(sub, -1.0, hi)
            w_hi = w[-1]
            np.add.at(acc, pk * m + sel, w[:-1])
        # panel-boundary endpoints pick up full-panel weight at their own
        # row; that weight belongs to the corresponding diagonal limit
        w_lo += acc[gi]
        w_hi += acc[gk]
        acc[gi] = acc[gk] = 0.0
        rows = np.where(acc != 0.0)[0]
        rows = rows[(rows >= 1) & (rows <= self.R)]
        rows = rows[(self.grid.times[rows] > self.grid.times[gi])
                    & (self.grid.times[rows] < self.grid.times[gk])]
        out = (rows - 1, acc[rows], w_lo, w_hi)
        self._pair_rules[key] = out
        return out

    def pairwise_series(self, q: Potential, n_terms: int):
        """Pairwise terms K_n[(i,j),(k,l)] ~ p_n(v_i, z_ij, v_k, z_kl) and
        the matching x-row, y-row and endpoint sums of the series."""
        R, Z = self.R, self.Z
        Q = np.asarray(q(self.inner_times[:, None], self.nodes[..., None]), dtype=float)
        if not np.all(np.isfinite(Q)):
            raise InvalidPotentialError("potential non-finite on the pairwise lattice")
        QV = Q * self.V
        K0 = self.K4.reshape(R * Z, R * Z)
        rows_of = np.repeat(np.arange(R), Z)
        Ks = [K0]
        # gather static weight tables
        Wmid = np.zeros((R, R, R))
        Wlo = np.zeros((R, R))
        Whi = np.zeros((R, R))
        for i in range(R):
            for k in range(i + 1, R):
                rr, ww, wl, wh = self.pair_rule(i, k)
                Wmid[i, k, rr] = ww
                Wlo[i, k] = wl
                Whi[i, k] = wh
        Kprev = K0
        for n in range(1, n_terms + 1):
            Knew = np.zeros_like(K0)
            for r in range(R):
                cols = slice(r * Z, (r + 1) * Z)
                A = (Kprev[:, cols] * QV[r][None, :]) @ K0[cols, :]
                Knew += Wmid[rows_of[:, None], rows_of[None, :], r] * A
            Knew += Whi[rows_of[:, None], rows_of[None, :]] * (Q.reshape(-1)[None, :] * Kprev)
            if n == 1:
                Knew += Wlo[rows_of[:, None], rows_of[None, :]] * (Q.reshape(-1)[:, None] * K0)
            Ks.append(Knew)
            Kprev = Knew
        return Ks, Q


def composition_check(kernel, q1: Potential, q2: Potential, s, x, t, y, cert,
                      config: quadrature.QuadratureConfig | None = None) -> float:
    """Relative difference between perturbing by q1 then q2 and perturbing
    by q1 + q2 directly.

    The direct route runs on the standard lattice; the two-stage route
    rebuilds the stage-one kernel pairwise on an independent coarse
    lattice, so the comparison exercises genuinely different quadratures.
    ``cert`` must certify |q1| + |q2|.
    """
    config = config or quadrature.QuadratureConfig()
    direct = perturbed_density(kernel, SumPotential(q1, q2), s, x, t, y, cert, config).value

    coarse = _PairwiseLattice(kernel, s, x, t, y, config)
    n_terms = certified_term_count(cert, t - s, coarse.pxy, config)
    Ks, Q1 = coarse.pairwise_series(q1, n_terms)
    R, Z = coarse.R, coarse.Z

    # stage-one series viewed from (s,x) and toward (t,y) on the same nodes
    stage1 = _stage_sums(coarse, q1, n_terms)
    Ktilde = sum(Ks).reshape(R, Z, R, Z)

    two_stage = _forward_on_tensors(
        coarse, q2, n_terms,
        K4=Ktilde, Kx=stage1["Fx"], Ky=stage1["Fy"], pxy=stage1["pxy"])
    return abs(two_stage - direct) / abs(direct)


def _stage_sums(coarse: _PairwiseLattice, q: Potential, n_terms: int):
    """Forward and backward series of q on the coarse lattice: interior
    rows from (s,x), interior rows toward (t,y), and the endpoint value."""
    lat = {"Fx": None, "Fy": None, "pxy": None}
    Q = np.asarray(q(coarse.inner_times[:, None], coarse.nodes[..., None]), dtype=float)
    qx = float(np.asarray(q(coarse.s, coarse.x[None, :])).reshape(())[()])
    qy = float(np.asarray(q(coarse.t, coarse.y[None, :])).reshape(())[()])
    R, Z, M = coarse.R, coarse.Z, coarse.grid.M
    W = coarse.grid.W
    W_int, W_diag, W_zero = W[1:M, 1:M], np.diag(W)[1:M], W[1:M, 0]
    F = coarse.Kx.copy()
    P = coarse.pxy
    # backward rows toward (t, y): recursion over [v_i, t]
    H = coarse.Ky.copy()
    Fx_sum, Fy_sum, P_sum = F.copy(), H.copy(), P
    Whi = np.zeros((R,))
    rules = [coarse.pair_rule(i, R - 1) if i < R - 1 else None for i in range(R)]
    for n in range(1, n_terms + 1):
        G = coarse.V * F * Q
        Hh = np.einsum("ij,ijkl->ikl", G, coarse.K4)
        F_new = np.einsum("ki,ikl->kl", W_int, Hh)
        F_new += W_diag[:, None] * Q * F
        if n == 1:
            F_new += W_zero[:, None] * (qx * coarse.Kx)
        WM = W[M]
        P_new = float(np.dot(WM[1:M], np.sum(G * coarse.Ky, axis=1)))
        P_new += WM[M] * qy * P
        if n == 1:
            P_new += WM[0] * qx * coarse.pxy
        # backward: H_n(i,j) = int_{v_i}^t p((i,j) -> (r,m)) q H_{n-1}(r,m)
        H_new = np.zeros_like(H)
        GB = coarse.V * H * Q
        for i in range(R):
            rr, ww, wl, wh = _rule_to_end(coarse, i)
            if rr.size:
                contrib = np.einsum("r,ijrm->ij",
                                    ww, coarse.K4[i:i + 1, :, rr, :] * GB[rr][None, None, :, :])
                H_new[i] = contrib[0]
            H_new[i] += wl * Q[i] * H[i]
            if n == 1:
                H_new[i] += wh * qy * coarse.Ky[i]
        F, P, H = F_new, P_new, H_new
        Fx_sum += F
        Fy_sum += H
        P_sum += P
    lat["Fx"], lat["Fy"], lat["pxy"] = Fx_sum, Fy_sum, P_sum
    return lat


def _rule_to_end(coarse: _PairwiseLattice, i: int):
    """Rule for int_{v_i}^{t} over interior rows, with diagonal weights at
    v_i (lower) and t (upper)."""
    key = ("end", i)
    if key in coarse._pair_rules:
        return coarse._pair_rules[key]
    gi = i + 1
    m = coarse.m
    ref, partial = _lobatto_reference(m)
    acc = np.zeros(coarse.grid.M + 1)
    pi, ji = (gi - 1) // m, gi - ((gi - 1) // m) * m
    a, b = coarse.grid.panels[pi]
    lo = 2.0 * (coarse.grid.times[gi] - a) / (b - a) - 1.0
    sel = np.where(ref > lo + 1e-14)[0]
    sub = np.concatenate([[lo], ref[sel]])
    w = 0.5 * (b - a) * _interp_weights(sub, lo, 1.0)
    w_lo = w[0]
    np.add.at(acc, pi * m + sel, w[1:])
    for pp in range(pi + 1, len(coarse.grid.panels)):
        aa, bb = coarse.grid.panels[pp]
        np.add.at(acc, pp * m + np.arange(m + 1), 0.5 * (bb - aa) * partial[m])
    w_lo += acc[gi]
    w_hi = acc[coarse.grid.M]
    acc[gi] = acc[coarse.grid.M] = 0.0
    rows = np.where(acc != 0.0)[0]
    rows = rows[(rows >= 1) & (rows <= coarse.R)]
    rows = rows[coarse.grid.times[rows] > coarse.grid.times[gi]]
    out = (rows - 1, acc[rows], w_lo, w_hi)
    coarse._pair_rules[key] = out
    return out


def _forward_on_tensors(coarse: _PairwiseLattice, q: Potential, n_terms: int,
                        K4, Kx, Ky, pxy) -> float:
    """Ordinary forward series driven by externally supplied base-kernel
    tensors (the two-stage route's second stage)."""
    Q = np.asarray(q(coarse.inner_times[:, None], coarse.nodes[..., None]), dtype=float)
    if not np.all(np.isfinite(Q)):
        raise InvalidPotentialError("potential non-finite on the pairwise lattice")
    qx = float(np.asarray(q(coarse.s, coarse.x[None, :])).reshape(())[()])
    qy = float(np.asarray(q(coarse.t, coarse.y[None, :])).reshape(())[()])
    M = coarse.grid.M
    W = coarse.grid.W
    W_int, W_diag, W_zero = W[1:M, 1:M], np.diag(W)[1:M], W[1:M, 0]
    F = Kx.copy()
    P = pxy
    total = P
    for n in range(1, n_terms + 1):
        G = coarse.V * F * Q
        H = np.einsum("ij,ijkl->ikl", G, K4)
        F_new = np.einsum("ki,ikl->kl", W_int, H)
        F_new += W_diag[:, None] * Q * F
        if n == 1:
            F_new += W_zero[:, None] * (qx * Kx)
        WM = W[M]
        P_new = float(np.dot(WM[1:M], np.sum(G * Ky, axis=1)))
        P_new += WM[M] * qy * P
        if n == 1:
            P_new += WM[0] * qx * pxy
        F, P = F_new, P_new
        total += P
    return total
