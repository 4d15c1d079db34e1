"""Piecewise Lyapunov function ψ_0 .. ψ_{j+4} on the principal wedge.

Outer pieces are closed-form power laws in (r, φ_m); ψ_1 needs a quadrature
and the inner piece ψ_{j+4} is built from exit moments E e^{pτ} of the linear
process dη = κη dt + σ dW, κ = (3n+2)/2 (finite differences, checked against
the Kummer-function closed form used for evaluation).
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np
from scipy.linalg import solve_banded
from scipy.special import hyp1f1

from .dynamics_model import DynamicsModel, ModelError, normalize_leading, polar_generator
from .operator_algebra import CoordinateChain, build_chain, phi_derivs
from .region_atlas import RegionAtlas, RegionParams, default_params, make_atlas


# ---------------------------------------------------------------- exponents

def _exact(x):
    if isinstance(x, (int, Fraction)) and not isinstance(x, bool):
        return Fraction(x)
    if isinstance(x, str):
        return Fraction(x)
    return float(x)


def _q_next(lower, rule):
    if rule == "midpoint":
        return (lower + 1) / 2
    if isinstance(rule, tuple) and rule[0] == "offset":
        return lower + _exact(rule[1]) * (1 - lower)
    raise ModelError(f"unknown q_rule {rule!r}")


@dataclass(frozen=True)
class ExponentTable:
    n: int
    j: int
    p: object
    q: object
    p_lm: dict          # (l, m) -> p_{l,m}, 1 ≤ l ≤ m, 2 ≤ m ≤ j+3
    q_lm: dict
    p_final: dict       # l -> p_{l,j+4}, l = 1 .. j+4
    q_rule: object = "midpoint"

    @property
    def top(self) -> int:
        return self.j + 3

    def p_m(self, m: int):
        return self.p_final[self.j + 4] if m == self.j + 4 else self.p_lm[(m, m)]

    def q_m(self, m: int):
        return self.q_lm[(m, m)]

    @property
    def p_last(self):
        return self.p_final[self.j + 4]

    @property
    def kappa(self) -> Fraction:
        return Fraction(3 * self.n + 2, 2)

    def orderings(self) -> list[str]:
        """Violations of the strict orderings; empty when the table is admissible."""
        bad = []
        for m in range(2, self.top + 1):
            ps = [self.p_lm[(l, m)] for l in range(1, m + 1)]
            qs = [self.q_lm[(l, m)] for l in range(1, m + 1)]
            if ps[-1] != ps[-2]:
                bad.append(f"p_{{m-1,m}} != p_{{m,m}} at m={m}")
            if any(not ps[i] < ps[i + 1] for i in range(len(ps) - 2)):
                bad.append(f"p ordering at m={m}")
            if any(not qs[i] < qs[i + 1] for i in range(len(qs) - 1)) or not qs[-1] < 1:
                bad.append(f"q ordering at m={m}")
            if not self.q_m(m) * (self.n + m - 2) > self.p_m(m):
                bad.append(f"q_m(n+m-2) <= p_m at m={m}")
        pf = [self.p_final[l] for l in range(1, self.j + 5)]
        if any(not pf[i] < pf[i + 1] for i in range(len(pf) - 2)) or pf[-1] != pf[-2]:
            bad.append("p_{l,j+4} ordering")
        if not pf[-1] < self.kappa:
            bad.append("p_{j+4} >= (3n+2)/2")
        return bad

    def to_dict(self):
        return {
            "n": self.n, "j": self.j, "p": self.p, "q": self.q, "q_rule": str(self.q_rule),
            "p_lm": [{"l": l, "m": m, "value": v} for (l, m), v in sorted(self.p_lm.items())],
            "q_lm": [{"l": l, "m": m, "value": v} for (l, m), v in sorted(self.q_lm.items())],
            "p_final": [{"l": l, "value": v} for l, v in sorted(self.p_final.items())],
        }


def exponent_table(n: int, p, q, q_rule="midpoint") -> ExponentTable:
    p, q = _exact(p), _exact(q)
    if not 0 < p < n:
        raise ModelError("p must lie in (0, n)")
    if not p / n < q < 1:
        raise ModelError("q must lie in (p/n, 1)")
    j = (n - 1) // 2
    P = {(1, 2): p, (2, 2): p}
    Q = {(1, 2): p / n, (2, 2): q}
    for m in range(3, j + 4):
        for l in range(1, m):
            P[(l, m)] = P[(l, m - 1)] + Q[(l, m - 1)]
            Q[(l, m)] = P[(l, m)] / (n + m - 2)
        P[(m, m)] = P[(m - 1, m)]
        lower = max(Q[(m - 1, m - 1)], P[(m, m)] / (n + m - 2))
        Q[(m, m)] = _q_next(lower, q_rule)
    top = j + 3
    half = Fraction(1, 2) if n % 2 == 1 else 1
    if isinstance(p, float) or isinstance(q, float):
        half = float(half)
    final = {l: P[(l, top)] + Q[(l, top)] * half for l in range(1, top + 1)}
    final[top + 1] = final[top]
    tab = ExponentTable(n=n, j=j, p=p, q=q, p_lm=P, q_lm=Q, p_final=final, q_rule=q_rule)
    if not final[top + 1] < tab.kappa:
        raise ModelError("p_{j+4} must stay below (3n+2)/2")
    return tab


# ---------------------------------------------------------------- ψ_1 profile

_GL_X, _GL_W = np.polynomial.legendre.leggauss(30)


class Psi1Profile:
    """ψ_1^±(1, θ) = |sin nθ|^{-p/n} (|sin nθ0|^{p/n} + h_1^± I(|θ|)),

    I(x) = ∫_x^{θ0} |sin nα|^{p/n} / (α^q sin nα) dα, tabulated by Gauss-Legendre.
    """

    def __init__(self, n, p, q, theta0, theta1, h1_plus, h1_minus, grid: int = 400):
        self.n, self.p, self.q = n, float(p), float(q)
        self.theta0, self.theta1 = float(theta0), float(theta1)
        self.h1 = {1: float(h1_plus), -1: float(h1_minus)}
        lo = self.theta1 / 4
        self.nodes = np.linspace(lo, self.theta0, grid)
        seg = np.array([self._gl(a, b) for a, b in zip(self.nodes[:-1], self.nodes[1:])])
        # I at node k is the integral from node k up to θ0
        self.I_nodes = np.concatenate([np.cumsum(seg[::-1])[::-1], [0.0]])

    def _f(self, a):
        s = np.sin(self.n * a)
        return np.abs(s) ** (self.p / self.n) / (a ** self.q * s)

    def _gl(self, a, b):
        a = np.asarray(a, dtype=float)
        b = np.asarray(b, dtype=float)
        mid, half = (a + b) / 2, (b - a) / 2
        x = mid[..., None] + half[..., None] * _GL_X
        return half * (self._f(x) @ _GL_W)

    def integral(self, x):
        """I(x) for θ1/4 ≤ x ≤ (θ0 + π/n)/2, vectorized."""
        x = np.asarray(x, dtype=float)
        top = (self.theta0 + math.pi / self.n) / 2
        if np.any(x < self.nodes[0] * (1 - 1e-12)) or np.any(x > top):
            raise ModelError("ψ_1 evaluated outside its tabulated domain")
        # past θ0 (only for difference stencils) the integral is continued directly
        xin = np.minimum(x, self.theta0)
        k = np.clip(np.searchsorted(self.nodes, xin), 0, len(self.nodes) - 1)
        inside = self.I_nodes[k] + self._gl(xin, self.nodes[k])
        return np.where(x > self.theta0, -self._gl(self.theta0 + 0 * x, x), inside)

    def value(self, theta, sign=None):
        theta = np.asarray(theta, dtype=float)
        sgn = np.sign(theta) if sign is None else sign
        h = np.where(sgn >= 0, self.h1[1], self.h1[-1])
        n, p = self.n, self.p
        K = abs(math.sin(n * self.theta0)) ** (p / n) + h * self.integral(np.abs(theta))
        return np.abs(np.sin(n * theta)) ** (-p / n) * K

    def derivs(self, theta, sign=None):
        """g, g', g'' from the ODE p cos(nθ) g + sin(nθ) g' = -h |θ|^{-q}."""
        theta = np.asarray(theta, dtype=float)
        sgn = np.sign(theta) if sign is None else sign
        h = np.where(sgn >= 0, self.h1[1], self.h1[-1])
        n, p, q = self.n, self.p, self.q
        g = self.value(theta, sign)
        S, C = np.sin(n * theta), np.cos(n * theta)
        at = np.abs(theta)
        N = p * C * g + h * at ** (-q)
        g1 = -N / S
        dN = -p * n * S * g + p * C * g1 - q * h * at ** (-q - 1) * np.sign(theta)
        g2 = -(dN * S - N * n * C) / S ** 2
        return g, g1, g2

    def table(self):
        th = self.nodes
        return {"theta": th, "plus": self.value(th, 1), "minus": self.value(-th, -1)}


def psi1_profile(params: RegionParams, h1_plus, h1_minus, grid: int = 400, *, n, p, q):
    return Psi1Profile(n, p, q, params.theta0, params.theta1, h1_plus, h1_minus, grid)


# ---------------------------------------------------------------- exit moments

class ExitMoment:
    """u(η) = E_η e^{pτ}: (σ²/2) u'' + κ η u' + p u = 0 on [lo, hi], u = 1 at both ends.

    The boundary-value problem is solved by second-order finite differences on
    two nested grids (Richardson check, positivity check).  Evaluation uses the
    closed form through Kummer functions, x = -κη²/σ², a = p/(2κ):
    y_even = M(a, 1/2, x), y_odd = η M(a + 1/2, 3/2, x), and u'' from the ODE.
    `fd_mismatch` is the largest gap between the two.
    """

    def __init__(self, p, kappa, sigma, lo, hi, nodes: int = 2001):
        self.p, self.kappa, self.sigma = float(p), float(kappa), float(sigma)
        self.lo, self.hi = float(lo), float(hi)
        self.nodes = max(int(nodes), 2001) | 1
        if not self.lo < self.hi:
            raise ModelError("empty exit interval")
        if not self.lo <= 0 <= self.hi:
            raise ModelError("exit interval must contain the fixed point η = 0")
        if self.p >= self.kappa:
            raise ModelError("exit moment is infinite for p >= κ")
        self.s = self.kappa / self.sigma ** 2
        self.a = self.p / (2 * self.kappa)
        ends = np.array([self.lo, self.hi])
        y = np.array([self._basis(ends)[0], self._basis(ends)[2]])     # rows: even, odd
        self.alpha, self.beta = np.linalg.solve(y.T, np.ones(2))
        x = np.linspace(self.lo, self.hi, self.nodes)
        if self.p == 0:
            self.richardson_error = self.fd_mismatch = 0.0
        else:
            coarse = self._solve(self.nodes)
            fine = self._solve(2 * self.nodes - 1)
            if np.any(coarse <= 0) or np.any(fine <= 0):
                raise ModelError("discrete exit moment is not positive")
            rich = (4 * fine[::2] - coarse) / 3
            scale = np.maximum(np.abs(rich), 1.0)
            self.richardson_error = float(np.max(np.abs(fine[::2] - coarse) / 3 / scale))
            self.fd_mismatch = float(np.max(np.abs(rich - self(x)) / scale))
        xi = x[1:-1]
        self.residual = float(np.max(np.abs(self.second(xi) - self._second_direct(xi))
                                     / np.maximum(np.abs(self(xi)), 1.0)))

    def _solve(self, N):
        x = np.linspace(self.lo, self.hi, N)
        h = x[1] - x[0]
        a = self.sigma ** 2 / 2 / h ** 2
        b = self.kappa * x / (2 * h)
        ab = np.zeros((3, N))
        ab[1] = -2 * a + self.p
        ab[0, 1:] = a + b[:-1]           # coefficient of u_{i+1} in row i
        ab[2, :-1] = a - b[1:]           # coefficient of u_{i-1} in row i
        ab[1, 0] = ab[1, -1] = 1.0
        ab[0, 1] = 0.0
        ab[2, -2] = 0.0
        rhs = np.zeros(N)
        rhs[0] = rhs[-1] = 1.0
        return solve_banded((1, 1), ab, rhs)

    def _basis(self, eta):
        eta = np.asarray(eta, dtype=float)
        a, s = self.a, self.s
        x = -s * eta ** 2
        ye = hyp1f1(a, 0.5, x)
        ye1 = 2 * a * hyp1f1(a + 1, 1.5, x) * (-2 * s * eta)
        mo = hyp1f1(a + 0.5, 1.5, x)
        yo = eta * mo
        yo1 = mo + eta * (a + 0.5) / 1.5 * hyp1f1(a + 1.5, 2.5, x) * (-2 * s * eta)
        return ye, ye1, yo, yo1

    def __call__(self, eta):
        ye, _, yo, _ = self._basis(eta)
        return self.alpha * ye + self.beta * yo

    def deriv(self, eta):
        _, ye1, _, yo1 = self._basis(eta)
        return self.alpha * ye1 + self.beta * yo1

    def second(self, eta):
        eta = np.asarray(eta, dtype=float)
        return -(2 / self.sigma ** 2) * (self.kappa * eta * self.deriv(eta) + self.p * self(eta))

    def _second_direct(self, eta, h=1e-5):
        # centred difference of u', used only as a self-check
        return (self.deriv(eta + h) - self.deriv(eta - h)) / (2 * h)

    def to_dict(self):
        x = np.linspace(self.lo, self.hi, self.nodes)
        return {"p": self.p, "kappa": self.kappa, "sigma": self.sigma, "interval": [self.lo, self.hi],
                "richardson_error": self.richardson_error,
                "fd_mismatch": self.fd_mismatch, "ode_residual": self.residual, "eta": x, "u": self(x)}


def exit_moment(p, n: int, sigma, interval, nodes: int = 2001) -> ExitMoment:
    return ExitMoment(p, (3 * n + 2) / 2, sigma, interval[0], interval[1], nodes)


# ---------------------------------------------------------------- coefficients

@dataclass
class CoefficientTable:
    h_plus: dict            # m -> h_m^+, m = 1 .. j+3
    h_minus: dict
    h_final: float          # h_{j+4}
    d_plus: dict            # (l, m) -> d_{l,m}^+, 2 ≤ m ≤ j+3
    d_minus: dict
    b_plus: dict            # (l, m) -> b_{l,m}^+, 3 ≤ m ≤ j+3, l < m
    b_minus: dict
    e: dict                 # m -> e_m

    def d(self, sign: int) -> dict:
        return self.d_plus if sign >= 0 else self.d_minus

    def h(self, sign: int) -> dict:
        return self.h_plus if sign >= 0 else self.h_minus

    def to_dict(self):
        def lm(d):
            return [{"l": l, "m": m, "value": v} for (l, m), v in sorted(d.items())]
        return {"h_plus": [self.h_plus[k] for k in sorted(self.h_plus)],
                "h_minus": [self.h_minus[k] for k in sorted(self.h_minus)],
                "h_final": self.h_final, "d_plus": lm(self.d_plus), "d_minus": lm(self.d_minus),
                "b_plus": lm(self.b_plus), "b_minus": lm(self.b_minus),
                "e": [{"m": m, "value": v} for m, v in sorted(self.e.items())]}


def _b_table(exps: ExponentTable, chain: CoordinateChain, phi_star: float, sign: int) -> dict:
    b = {}
    for m in range(3, exps.top + 1):
        cm1 = float(chain.c_at(m - 1))
        base = abs(sign * phi_star - cm1)
        for l in range(1, m):
            b[(l, m)] = phi_star ** float(exps.q_lm[(l, m)]) / base ** float(exps.q_lm[(l, m - 1)])
    return b


def _e_table(exps: ExponentTable, phi_star: float) -> dict:
    e = {}
    for m in range(3, exps.top + 1):
        k = exps.q_lm[(m - 1, m)] - exps.q_lm[(m, m)]
        e[m] = 1 if k == 0 else phi_star ** float(k)
    return e


def _denominator(exps: ExponentTable, m: int):
    n = exps.n
    if m == 2:
        return exps.q * n - exps.p
    return exps.q_m(m) * (n + m - 2) - exps.p_m(m)


def _d_side(exps, chain, params, h: dict, b: dict, e: dict, psi1_at_theta1):
    n, p, q, th1 = exps.n, float(exps.p), float(exps.q), params.theta1
    d = {(2, 2): h[2] / _denominator(exps, 2)}
    d[(1, 2)] = th1 ** (p / n) * psi1_at_theta1 - h[2] * th1 ** (p / n - q) / float(_denominator(exps, 2))
    for m in range(3, exps.top + 1):
        d[(m, m)] = h[m] / _denominator(exps, m)
        d[(m - 1, m)] = d[(m - 1, m - 1)] * b[(m - 1, m)] - d[(m, m)] * e[m]
        for l in range(1, m - 1):
            d[(l, m)] = d[(l, m - 1)] * b[(l, m)]
    return d


def default_h_plus(exps: ExponentTable, params: RegionParams) -> dict:
    n, p, q = exps.n, float(exps.p), float(exps.q)
    cap = p * params.theta0 ** q * abs(math.cos(n * params.theta0))
    h = {1: 0.5 * cap}
    for m in range(2, exps.top + 1):
        h[m] = h[m - 1] / 2
    return h


def default_h_final(exps: ExponentTable, params: RegionParams, h: float = 0.1) -> float:
    return h * float(exps.p_last) * params.eta_star ** (-float(exps.q_m(exps.top)))


def inner_flux_cap(exps: ExponentTable, d_top: float, em: ExitMoment, params: RegionParams) -> float:
    """Largest h (in h_{j+4} = h p_{j+4} η*^{-q_{j+3}}) keeping the inner-boundary jump ≤ 0.

    Leading order in r the jump is proportional to
    -d q + (d + h) μ,   μ = -u'(η_b) η*,
    evaluated at both ends of the exit interval.
    """
    q = float(exps.q_m(exps.top))
    es = params.eta_star
    caps = []
    for end in (em.lo, em.hi):
        mu = abs(float(em.deriv(end))) * es
        caps.append(d_top * (q - mu) / mu)
    cap = min(caps)
    if not cap > 0:
        raise ModelError("inner boundary flux cannot be made non-positive: q_{j+3} too small")
    return cap


def coefficient_table(exps: ExponentTable, h_plus: dict, params: RegionParams,
                      chain: CoordinateChain, *, h_minus: dict | None = None,
                      h_final: float | None = None, psi1: Psi1Profile | None = None) -> CoefficientTable:
    h_minus = dict(h_plus) if h_minus is None else h_minus
    if psi1 is None:
        psi1 = psi1_profile(params, h_plus[1], h_minus[1], n=exps.n, p=exps.p, q=exps.q)
    bp = _b_table(exps, chain, params.phi_star, 1)
    bm = _b_table(exps, chain, params.phi_star, -1)
    e = _e_table(exps, params.phi_star)
    th1 = params.theta1
    dp = _d_side(exps, chain, params, h_plus, bp, e, float(psi1.value(th1, 1)))
    dm = _d_side(exps, chain, params, h_minus, bm, e, float(psi1.value(-th1, -1)))
    hf = default_h_final(exps, params) if h_final is None else h_final
    return CoefficientTable(h_plus=dict(h_plus), h_minus=dict(h_minus), h_final=float(hf),
                            d_plus=dp, d_minus=dm, b_plus=bp, b_minus=bm, e=e)


def solve_h_minus(exps: ExponentTable, h_plus: dict, params: RegionParams,
                  chain: CoordinateChain) -> tuple[dict, dict]:
    """Choose h^- so that d_{m,j+3}^+ = d_{m,j+3}^- for every m (ψ_{j+3} even in φ).

    Exact back-substitution from m = j+2 down to 1.  Returns (h_minus, residuals).
    """
    top, n = exps.top, exps.n
    plus = coefficient_table(exps, h_plus, params, chain)
    dp, bm, e = plus.d_plus, plus.b_minus, plus.e
    hm = {top: h_plus[top]}
    dmm = {top: hm[top] / _denominator(exps, top)}

    def prod_b(l, start):
        out = 1.0
        for k in range(start, top + 1):
            out *= bm[(l, k)]
        return out

    for m in range(top - 1, 1, -1):
        target = dp[(m, top)] / prod_b(m, m + 2)
        dmm[m] = (target + dmm[m + 1] * e[m + 1]) / bm[(m, m + 1)]
        hm[m] = dmm[m] * _denominator(exps, m)
    # m = 1 goes through the ψ_1 boundary value at θ = -θ1
    p, q, th1 = float(exps.p), float(exps.q), params.theta1
    target = dp[(1, top)] / prod_b(1, 3)
    psi_val = (target + hm[2] * th1 ** (p / n - q) / float(_denominator(exps, 2))) / th1 ** (p / n)
    prof = psi1_profile(params, h_plus[1], 0.0, n=n, p=exps.p, q=exps.q)
    I = float(prof.integral(th1))
    k0 = abs(math.sin(n * params.theta0)) ** (p / n)
    hm[1] = (psi_val * abs(math.sin(n * th1)) ** (p / n) - k0) / I
    hm = {m: float(hm[m]) if not isinstance(hm[m], Fraction) else hm[m] for m in sorted(hm)}
    bad = [m for m, v in hm.items() if not v > 0]
    if bad:
        raise ModelError(f"symmetry solve gives non-positive h^- at m={bad}; enlarge φ*")
    full = coefficient_table(exps, h_plus, params, chain, h_minus=hm)
    res = {m: abs(float(full.d_plus[(m, top)]) - float(full.d_minus[(m, top)]))
           / max(abs(float(full.d_plus[(m, top)])), 1e-300) for m in range(1, top + 1)}
    return hm, res


# ---------------------------------------------------------------- evaluation

def _powersum(terms, r, s):
    """F = Σ d r^a |s|^{-b} with (F, F_r, F_s, F_rr, F_rs, F_ss)."""
    r = np.asarray(r, dtype=float)
    s = np.asarray(s, dtype=float)
    at = np.abs(s)
    sg = np.sign(s)
    F = Fr = Fs = Frr = Frs = Fss = 0.0
    for d, a, b in terms:
        d, a, b = float(d), float(a), float(b)
        base = d * r ** a * at ** (-b)
        F = F + base
        Fr = Fr + a * base / r
        Frr = Frr + a * (a - 1) * base / r ** 2
        Fs = Fs - b * base / at * sg
        Frs = Frs - a * b * base / (r * at) * sg
        Fss = Fss + b * (b + 1) * base / at ** 2
    return F, Fr, Fs, Frr, Frs, Fss


def _chain_rule(F, s_r, s_rr, s_t):
    f, fr, fs, frr, frs, fss = F
    psi_r = fr + fs * s_r
    psi_rr = frr + 2 * frs * s_r + fss * s_r ** 2 + fs * s_rr
    return f, psi_r, fs * s_t, psi_rr, fss * s_t ** 2


@dataclass
class PiecewiseLyapunov:
    model: DynamicsModel | None          # normalized model, None for a bare operator
    scale: complex                       # z = λ w normalization
    chain: CoordinateChain
    atlas: RegionAtlas
    exponents: ExponentTable
    coefficients: CoefficientTable
    psi1: Psi1Profile
    exit_moments: dict                   # l -> ExitMoment for p_{l,j+4}
    sigma_eta: float
    symmetry_residuals: dict = field(default_factory=dict)
    wedge_index: int = 0

    @property
    def params(self) -> RegionParams:
        return self.atlas.params

    @property
    def top(self) -> int:
        return self.chain.j + 3

    def eta_coords(self, r, theta):
        """η and its derivatives (η_r, η_rr, η_θ) for the inner layer."""
        xi, xr, xrr, xt = phi_derivs(self.chain, self.top, r, theta)
        r = np.asarray(r, dtype=float)
        if self.atlas.odd:
            sr = np.sqrt(r)
            return (sr * xi, 0.5 * xi / sr + sr * xr,
                    -0.25 * xi / (r * sr) + xr / sr + sr * xrr, sr * xt)
        c = float(self.chain.c_at(self.top))
        return r * xi + c, xi + r * xr, 2 * xr + r * xrr, r * xt

    def piece(self, rid: int, sign: int, r, theta):
        """Formula of ψ_rid on side `sign`, with (ψ, ψ_r, ψ_θ, ψ_rr, ψ_θθ)."""
        r = np.asarray(r, dtype=float)
        theta = np.asarray(theta, dtype=float)
        r, theta = np.broadcast_arrays(r, theta)
        ex, co = self.exponents, self.coefficients
        p = float(ex.p)
        n = ex.n
        zero = np.zeros_like(r)
        if rid == 0:
            f = r ** p
            return f, p * f / r, zero, p * (p - 1) * f / r ** 2, zero
        if rid == 1:
            g, g1, g2 = self.psi1.derivs(theta, sign)
            rp = r ** p
            return rp * g, p * rp / r * g, rp * g1, p * (p - 1) * rp / r ** 2 * g, rp * g2
        d = co.d(sign)
        if rid == 2:
            terms = [(d[(1, 2)], p, p / n), (d[(2, 2)], p, ex.q)]
            F = _powersum(terms, r, theta)
            return _chain_rule(F, 0.0, 0.0, 1.0)
        if rid <= self.top:
            terms = [(d[(l, rid)], ex.p_lm[(l, rid)], ex.q_lm[(l, rid)]) for l in range(1, rid + 1)]
            s, s_r, s_rr, s_t = phi_derivs(self.chain, rid, r, theta)
            return _chain_rule(_powersum(terms, r, s), s_r, s_rr, s_t)
        if rid == self.top + 1:
            eta, e_r, e_rr, e_t = self.eta_coords(r, theta)
            return _chain_rule(self._inner(r, eta), e_r, e_rr, e_t)
        raise ModelError(f"no region {rid}")

    def _inner(self, r, eta):
        ex, co = self.exponents, self.coefficients
        es = self.params.eta_star
        top = self.top
        F = [0.0] * 6
        parts = [(float(co.d_plus[(l, top)]) * es ** (-float(ex.q_lm[(l, top)])),
                  float(ex.p_final[l]), self.exit_moments[l], 0.0) for l in range(1, top + 1)]
        pl = float(ex.p_last)
        parts.append((co.h_final / pl, pl, self.exit_moments[top], 1.0))
        for A, a, um, shift in parts:
            u, u1, u2 = um(eta) - shift, um.deriv(eta), um.second(eta)
            ra = A * r ** a
            F[0] = F[0] + ra * u
            F[1] = F[1] + a * ra / r * u
            F[2] = F[2] + ra * u1
            F[3] = F[3] + a * (a - 1) * ra / r ** 2 * u
            F[4] = F[4] + a * ra / r * u1
            F[5] = F[5] + ra * u2
        return tuple(F)

    def regions(self, r, theta):
        return self.atlas.classify_many(r, theta)

    def derivs(self, r, theta):
        """Ψ and derivatives at wedge points, each point using its own region's formula."""
        r = np.atleast_1d(np.asarray(r, dtype=float))
        theta = np.atleast_1d(np.asarray(theta, dtype=float))
        r, theta = np.broadcast_arrays(r, theta)
        rid = self.regions(r, theta)
        out = [np.empty(r.shape) for _ in range(5)]
        sign = np.where(theta >= 0, 1, -1)
        for k in np.unique(rid):
            for sg in (1, -1):
                sel = (rid == k) & (sign == sg)
                if not np.any(sel):
                    continue
                vals = self.piece(int(k), sg, r[sel], theta[sel])
                for o, v in zip(out, vals):
                    o[sel] = v
        return tuple(out), rid

    def generator(self, r, theta, model: DynamicsModel | None = None):
        """𝓛Ψ (untimechanged generator) at wedge points in normalized coordinates."""
        from .dynamics_model import drift_polar
        model = model or self.model
        if model is None:
            raise ModelError("generator needs a dynamics model")
        (f, fr, ft, frr, ftt), rid = self.derivs(r, theta)
        r = np.asarray(r, dtype=float) + 0 * f
        rad, ang = drift_polar(model, r, np.asarray(theta, dtype=float) + 0 * f)
        s2 = float(model.sigma) ** 2
        return rad * fr + ang / r * ft + 0.5 * s2 * (frr + fr / r + ftt / r ** 2), rid

    def to_dict(self):
        return {
            "chain": self.chain.to_dict(), "atlas": self.atlas.to_dict(),
            "exponents": self.exponents.to_dict(), "coefficients": self.coefficients.to_dict(),
            "psi1_profile": self.psi1.table(),
            "exit_moments": {str(l): em.to_dict() for l, em in self.exit_moments.items()},
            "sigma_eta": self.sigma_eta, "symmetry_residuals": self.symmetry_residuals,
            "scale": complex(self.scale), "model": self.model.to_dict() if self.model else None,
        }


def evaluate_psi(psi: PiecewiseLyapunov, r, theta):
    (f, *_), _ = psi.derivs(r, theta)
    return f if f.size > 1 else float(f[0])


def global_extension(psi, z):
    """Ψ(z) on the whole plane.

    z is mapped to normalized coordinates, its argument reduced into the
    principal wedge (θ - 2πk/n), and below r* the value is held at Ψ(r*, θ).
    `psi` may be a list with one PiecewiseLyapunov per wedge.
    """
    wedges = psi if isinstance(psi, (list, tuple)) else [psi]
    base = wedges[0]
    n = base.chain.n
    w = np.atleast_1d(np.asarray(z, dtype=complex)) / complex(base.scale)
    r = np.abs(w)
    ang = np.angle(w)
    k = np.round(ang * n / (2 * math.pi)).astype(int)
    th = ang - 2 * math.pi * k / n
    th = np.clip(th, -math.pi / n, math.pi / n)
    rr = np.maximum(r, base.params.r_star)
    out = np.empty(r.shape)
    kk = np.mod(k, n) if len(wedges) > 1 else np.zeros_like(k)
    for idx in np.unique(kk):
        sel = kk == idx
        out[sel] = wedges[int(idx)].derivs(rr[sel], th[sel])[0][0]
    return out if np.ndim(z) else float(out[0])


# ---------------------------------------------------------------- build

def _default_pq(n: int):
    p = Fraction(n, 2)
    q = (p / n + 1) / 2
    return p, q


def build_from_chain(chain: CoordinateChain, *, sigma_eta: float, model: DynamicsModel | None = None,
                     scale=1, p=None, q=None, q_rule="midpoint", params: RegionParams | None = None,
                     h_plus: dict | None = None, h: float | None = None, h_final: float | None = None,
                     solve_symmetry: bool = True, eta_nodes: int = 2001,
                     overrides: dict | None = None) -> PiecewiseLyapunov:
    """Assemble Ψ; `overrides` replaces rungs of the default parameter ladder."""
    n = chain.n
    dp, dq = _default_pq(n)
    p = dp if p is None else p
    q = dq if q is None else q
    exps = exponent_table(n, p, q, q_rule)
    params = params or default_params(chain, **(overrides or {}))
    atlas = make_atlas(chain, params)
    h_plus = default_h_plus(exps, params) if h_plus is None else dict(h_plus)
    if solve_symmetry:
        h_minus, _ = solve_h_minus(exps, h_plus, params, chain)
    else:
        h_minus = dict(h_plus)
    psi1 = psi1_profile(params, h_plus[1], h_minus[1], n=n, p=exps.p, q=exps.q)
    es = params.eta_star
    shift = 0.0 if n % 2 == 1 else float(chain.c_at(exps.top))
    interval = (-es + shift, es + shift)
    ems = {}
    cache = {}
    for l in range(1, exps.top + 1):
        key = exps.p_final[l]
        if key not in cache:
            cache[key] = exit_moment(key, n, sigma_eta, interval, eta_nodes)
        ems[l] = cache[key]
    co = coefficient_table(exps, h_plus, params, chain, h_minus=h_minus, psi1=psi1)
    if h_final is None:
        if h is None:
            d_top = float(co.d_plus[(exps.top, exps.top)])
            h = min(0.1, 0.5 * inner_flux_cap(exps, d_top, ems[exps.top], params))
        h_final = default_h_final(exps, params, h)
    co.h_final = float(h_final)
    psi = PiecewiseLyapunov(model=model, scale=scale, chain=chain, atlas=atlas, exponents=exps,
                            coefficients=co, psi1=psi1, exit_moments=ems, sigma_eta=sigma_eta)
    psi.symmetry_residuals = {"psi_top": check_symmetry_residual(psi)}
    return psi


def build_lyapunov(model: DynamicsModel, *, J: int | None = None, wedge: int = 0, **kw) -> PiecewiseLyapunov:
    """Normalize, decompose and assemble Ψ for one wedge of the model."""
    from .dynamics_model import rotate_to_wedge
    norm, lam = normalize_leading(model)
    norm = rotate_to_wedge(norm, wedge)
    chain = build_chain(polar_generator(norm, J), norm.n)
    sigma_eta = math.sqrt(2 * float(chain.asymptotic_ops["A"].coeff(
        -chain.balance[-1].diffusion_exponent, 0, 0, 2)))
    psi = build_from_chain(chain, sigma_eta=sigma_eta, model=norm, scale=lam, **kw)
    psi.wedge_index = wedge
    return psi


def build_all_wedges(model: DynamicsModel, **kw) -> list:
    return [build_lyapunov(model, wedge=k, **kw) for k in range(model.n)]


def check_symmetry_residual(psi: PiecewiseLyapunov, count: int = 200) -> float:
    """max |ψ_{j+3}(r, φ) - ψ_{j+3}(r, -φ)| / ψ over a grid of S_{j+3} points."""
    top = psi.top
    ex, co = psi.exponents, psi.coefficients
    rs = np.geomspace(psi.params.r_star, 1e3 * psi.params.r_star, count)
    worst = 0.0
    for frac in (0.1, 0.5, 0.9):
        lo = psi.atlas.inner_width(rs)
        phi = lo + frac * (psi.params.phi_star - lo)
        vp = sum(float(co.d_plus[(l, top)]) * rs ** float(ex.p_lm[(l, top)]) * phi ** -float(ex.q_lm[(l, top)])
                 for l in range(1, top + 1))
        vm = sum(float(co.d_minus[(l, top)]) * rs ** float(ex.p_lm[(l, top)]) * phi ** -float(ex.q_lm[(l, top)])
                 for l in range(1, top + 1))
        worst = max(worst, float(np.max(np.abs(vp - vm) / np.abs(vp))))
    return worst
