"""Inductive angular coordinate changes φ_m = r φ_{m-1} + c_{m-1} and dominant balance."""
from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np

from .dynamics_model import DERIV_ORDERS, ModelError, PolarOperator

# Laurent polynomials in (r, φ) as {(r_pow, phi_pow): coeff}
Poly = dict


def _padd(*ps) -> Poly:
    out: Poly = {}
    for p in ps:
        for k, v in p.items():
            out[k] = out.get(k, 0) + v
    return {k: v for k, v in out.items() if v != 0}


def _pmul(p: Poly, q: Poly) -> Poly:
    out: Poly = {}
    for (a1, b1), v1 in p.items():
        for (a2, b2), v2 in q.items():
            k = (a1 + a2, b1 + b2)
            out[k] = out.get(k, 0) + v1 * v2
    return {k: v for k, v in out.items() if v != 0}


def _pscale(p: Poly, c) -> Poly:
    return {k: v * c for k, v in p.items() if v * c != 0}


def _ppow(p: Poly, e: int) -> Poly:
    out: Poly = {(0, 0): 1}
    for _ in range(e):
        out = _pmul(out, p)
    return out


def _pdr(p: Poly) -> Poly:
    return {(a - 1, b): v * a for (a, b), v in p.items() if a != 0}


def _pdphi(p: Poly) -> Poly:
    return {(a, b - 1): v * b for (a, b), v in p.items() if b != 0}


def _transform(op: PolarOperator, sub: Poly, g: Poly, s: Poly) -> PolarOperator:
    """Rewrite op in new coordinates.

    sub is φ_old as a polynomial in the new coordinates; old derivatives are
    ∂_r|old = ∂_r + g ∂_φ and ∂_φ|old = s ∂_φ.
    """
    one = {(0, 0): 1}
    g_r, g_p, s_r, s_p = _pdr(g), _pdphi(g), _pdr(s), _pdphi(s)
    rules = {
        (1, 0): [((1, 0), one), ((0, 1), g)],
        (0, 1): [((0, 1), s)],
        (2, 0): [((2, 0), one), ((1, 1), _pscale(g, 2)), ((0, 2), _pmul(g, g)),
                 ((0, 1), _padd(g_r, _pmul(g, g_p)))],
        (1, 1): [((1, 1), s), ((0, 1), _padd(s_r, _pmul(g, s_p))), ((0, 2), _pmul(g, s))],
        (0, 2): [((0, 2), _pmul(s, s)), ((0, 1), _pmul(s, s_p))],
    }
    powers: dict[int, Poly] = {}
    out: dict = {}
    for (a, b, i, j), c in op.terms.items():
        if b not in powers:
            powers[b] = _ppow(sub, b)
        coeff_poly = _pmul({(a, 0): c}, powers[b])
        for (ni, nj), poly in rules[(i, j)]:
            for (ra, pb), v in _pmul(coeff_poly, poly).items():
                key = (ra, pb, ni, nj)
                out[key] = out.get(key, 0) + v
    return _truncate(out, op)


def _truncate(terms: dict, op: PolarOperator) -> PolarOperator:
    J, n = op.J, op.n
    kept, dropped = {}, 0.0
    for (a, b, i, j), v in terms.items():
        if v == 0:
            continue
        if b > J or a < -(n + J + 1):
            dropped = max(dropped, abs(float(v)))
        else:
            kept[(a, b, i, j)] = v
    return PolarOperator(kept, n=n, J=J, remainder_bound=op.remainder_bound + dropped)


def pushforward(op: PolarOperator, c) -> PolarOperator:
    """Express op in (r, φ_new) with φ_new = r φ_old + c."""
    sub = _padd({(-1, 1): 1}, {(-1, 0): -c})      # φ_old = (φ - c)/r
    return _transform(op, sub, g=sub, s={(1, 0): 1})


def pullback(op: PolarOperator, c) -> PolarOperator:
    """Inverse of pushforward: back to φ_old = (φ_new - c)/r."""
    sub = _padd({(1, 1): 1}, {(0, 0): c})         # φ_new = r φ + c
    return _transform(op, sub, g={(-1, 1): -1}, s={(-1, 0): 1})


@dataclass(frozen=True)
class BalanceReport:
    m: int
    diffusion_exponent: int           # D in σ²/(2 r^D) ∂_φ²
    terms: dict                       # name -> coefficient for I, II, III_i, IV
    is_diffusive: bool
    residual_kept: bool               # γ r^{-1} ∂_φ balances the diffusion (D = 2)

    def to_dict(self):
        return {"m": self.m, "diffusion_exponent": self.diffusion_exponent,
                "terms": self.terms, "is_diffusive": self.is_diffusive,
                "residual_kept": self.residual_kept}


def dominant_balance(op: PolarOperator, m: int) -> BalanceReport:
    """Classify which terms survive the scaling at level m.

    I: r∂_r, II: φ∂_φ, III_i: r^{-i}∂_φ, IV: r^{-D}∂_φ².  The level is diffusive
    once D ≤ 2, i.e. the angular diffusion is no longer dominated.
    """
    if op.coeff(1, 0, 1, 0) == 0:
        raise ModelError("operator lacks the leading r∂_r term")
    diff = op.part(0, 2)
    lead = [a for (a, b) in diff if b == 0]
    if not lead:
        raise ModelError("operator has no angular diffusion term")
    D = -max(lead)
    terms = {"I": op.coeff(1, 0, 1, 0), "II": op.coeff(0, 1, 0, 1),
             "IV": op.coeff(-D, 0, 0, 2)}
    for i in range(1, max(D // 2, 1) + 1):
        terms[f"III_{i}"] = op.coeff(-i, 0, 0, 1)
    return BalanceReport(m=m, diffusion_exponent=D, terms=terms,
                         is_diffusive=D <= 2, residual_kept=(D == 2))


@dataclass
class CoordinateChain:
    n: int
    j: int
    c: list                      # c_2 .. c_{j+2}
    gamma1: list                 # γ_1^{(m)} for m = 3 .. j+3
    gamma1_base: object          # γ_1 of the generator itself
    generator: PolarOperator
    transformed_ops: list        # L_(r, φ_m) for m = 3 .. j+3
    asymptotic_ops: dict = field(default_factory=dict)
    balance: list = field(default_factory=list)

    @property
    def levels(self) -> range:
        return range(3, self.j + 4)

    def c_at(self, m: int):
        """c_m for 2 ≤ m ≤ j+2; c_{j+3} is γ_1^{(j+3)}/(n+j+2) (used for n even)."""
        if 2 <= m <= self.j + 2:
            return self.c[m - 2]
        if m == self.j + 3:
            return self.gamma1[-1] / (self.n + m - 1)
        raise IndexError(m)

    def op_at(self, m: int) -> PolarOperator:
        return self.generator if m == 2 else self.transformed_ops[m - 3]

    def to_dict(self) -> dict:
        return {
            "n": self.n, "j": self.j, "c": list(self.c), "gamma1": list(self.gamma1),
            "gamma1_base": self.gamma1_base,
            "transformed_ops": [op.to_dict() for op in self.transformed_ops],
            "asymptotic_ops": {k: v.to_dict() for k, v in self.asymptotic_ops.items()},
            "balance": [b.to_dict() for b in self.balance],
        }


def _frac(x, y):
    if isinstance(x, (int, Fraction)) and isinstance(y, (int, Fraction)):
        return Fraction(x) / Fraction(y)
    return float(x) / float(y)


def build_chain(gen: PolarOperator, n: int) -> CoordinateChain:
    """Run exactly j+1 transforms starting from the time-changed generator."""
    if gen.n != n:
        raise ModelError("operator degree does not match n")
    j = (n - 1) // 2
    g0 = gen.coeff(-1, 0, 0, 1)
    cs = [_frac(g0, n + 1)]
    ops, gammas, balance = [], [], [dominant_balance(gen, 2)]
    cur = gen
    for m in range(3, j + 4):
        cur = pushforward(cur, cs[-1])
        ops.append(cur)
        gam = cur.coeff(-1, 0, 0, 1)
        gammas.append(gam)
        rep = dominant_balance(cur, m)
        balance.append(rep)
        if rep.is_diffusive != (m == j + 3):
            raise ModelError(f"dominant balance disagrees with the transform count at m={m}")
        if m < j + 3:
            cs.append(_frac(gam, n + m - 1))
    chain = CoordinateChain(n=n, j=j, c=cs, gamma1=gammas, gamma1_base=g0,
                            generator=gen, transformed_ops=ops, balance=balance)
    chain.asymptotic_ops = asymptotic_operators(chain)
    return chain


def asymptotic_operators(chain: CoordinateChain) -> dict:
    """T_1 (Taylor-truncated), T_2 .. T_{j+3} and the inner operator A."""
    n, j, J = chain.n, chain.j, chain.generator.J
    gen = chain.generator
    # r cos(nθ)∂_r + sin(nθ)∂_θ are the only r^1 ∂_r and r^0 ∂_θ terms of L
    out = {"T1": PolarOperator({k: v for k, v in gen.terms.items()
                                if (k[0], k[2], k[3]) in ((1, 1, 0), (0, 0, 1))},
                               n=n, J=J)}
    for m in range(2, j + 4):
        out[f"T{m}"] = PolarOperator({(1, 0, 1, 0): 1, (0, 1, 0, 1): n + m - 2}, n=n, J=J)
    last = chain.transformed_ops[-1]
    D = chain.balance[-1].diffusion_exponent
    A = dict(out[f"T{j + 3}"].terms)
    A[(-D, 0, 0, 2)] = last.coeff(-D, 0, 0, 2)
    if D == 2:
        A[(-1, 0, 0, 1)] = last.coeff(-1, 0, 0, 1)
    out["A"] = PolarOperator(A, n=n, J=J)
    return out


def phi_coords(chain: CoordinateChain, r, theta) -> list:
    """[θ, φ_3, ..., φ_{j+3}] at (r, θ)."""
    out = [theta]
    for m in range(3, chain.j + 4):
        out.append(r * out[-1] + chain.c[m - 3])
    return out


def phi_derivs(chain: CoordinateChain, m: int, r, theta):
    """φ_m and its r-derivatives (φ, φ_r, φ_rr) plus φ_θ = r^{m-2}."""
    r = np.asarray(r, dtype=float)
    phi = np.asarray(theta, dtype=float) + 0 * r
    pr = np.zeros_like(phi)
    prr = np.zeros_like(phi)
    for k in range(2, m):
        c = float(chain.c[k - 2])
        phi, pr, prr = r * phi + c, phi + r * pr, 2 * pr + r * prr
    return phi, pr, prr, r ** (m - 2)


def theta_from_phi(chain: CoordinateChain, m: int, r, phi):
    """Invert the affine recursion: θ with φ_m(r, θ) = phi."""
    x = np.asarray(phi, dtype=float)
    for k in range(m - 1, 1, -1):
        x = (x - float(chain.c[k - 2])) / r
    return x


def first_order_field(op: PolarOperator):
    """(coef ∂_r, coef ∂_φ) as polynomials, for flows of the first-order part."""
    return op.part(1, 0), op.part(0, 1)
