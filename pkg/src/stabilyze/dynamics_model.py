"""SDE coefficient data and the time-changed polar generator.

The model is dz = [a z^(n+1) + F(z, zbar)] dt + sigma dB with B a standard
complex Brownian motion.  The generator is drift + (sigma^2/2) Laplacian.
"""
from __future__ import annotations

import cmath
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from math import factorial

import numpy as np

from .serialize import rational

# (r_pow, phi_pow, d_r, d_phi)
TermKey = tuple[int, int, int, int]

DERIV_ORDERS = ((1, 0), (0, 1), (2, 0), (1, 1), (0, 2))


class ModelError(ValueError):
    pass


def _is_exact(x) -> bool:
    return isinstance(x, (int, Fraction)) and not isinstance(x, bool)


def _num(x):
    """Keep ints/Fractions exact, everything else becomes float."""
    if _is_exact(x):
        return Fraction(x)
    return float(x)


@dataclass(frozen=True, eq=False)
class DynamicsModel:
    n: int
    a: tuple = (Fraction(1), Fraction(0))
    f_coeffs: dict = field(default_factory=dict)   # (k, l) -> (re, im)
    sigma: Fraction | float = Fraction(1)

    def __post_init__(self):
        if not isinstance(self.n, int) or self.n < 1:
            raise ModelError("n must be a positive integer")
        a = tuple(_num(v) for v in _pair(self.a))
        if a[0] == 0 and a[1] == 0:
            raise ModelError("leading coefficient a must be nonzero")
        sig = _num(self.sigma)
        if not sig > 0:
            raise ModelError("sigma must be positive")
        fc = {}
        for key, val in dict(self.f_coeffs).items():
            k, l = (int(key[0]), int(key[1]))
            if k < 0 or l < 0 or k + l > self.n:
                raise ModelError(f"monomial z^{k} zbar^{l} exceeds degree n={self.n}")
            re, im = (_num(v) for v in _pair(val))
            if re != 0 or im != 0:
                fc[(k, l)] = (re, im)
        object.__setattr__(self, "a", a)
        object.__setattr__(self, "sigma", sig)
        object.__setattr__(self, "f_coeffs", dict(sorted(fc.items())))

    def _key(self):
        return (self.n, self.a, tuple(self.f_coeffs.items()), self.sigma)

    def __eq__(self, other):
        return isinstance(other, DynamicsModel) and self._key() == other._key()

    def __hash__(self):
        return hash(self._key())

    @property
    def a_complex(self) -> complex:
        return complex(float(self.a[0]), float(self.a[1]))

    @property
    def exact(self) -> bool:
        vals = [*self.a, self.sigma] + [v for p in self.f_coeffs.values() for v in p]
        return all(_is_exact(v) for v in vals)

    def to_dict(self) -> dict:
        return {
            "n": self.n,
            "a": list(self.a),
            "sigma": self.sigma,
            "F": [{"k": k, "l": l, "re": re, "im": im}
                  for (k, l), (re, im) in self.f_coeffs.items()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "DynamicsModel":
        a = d.get("a", [1, 0])
        if not isinstance(a, (list, tuple)):
            a = [a, 0]
        fc = {}
        for item in d.get("F", []):
            key = (int(item["k"]), int(item["l"]))
            val = (rational(item.get("re", 0)), rational(item.get("im", 0)))
            if key in fc:
                val = (fc[key][0] + val[0], fc[key][1] + val[1])
            fc[key] = val
        return cls(n=int(d["n"]), a=(rational(a[0]), rational(a[1])),
                   f_coeffs=fc, sigma=rational(d.get("sigma", 1)))


def _pair(v):
    if isinstance(v, complex):
        return (v.real, v.imag)
    if isinstance(v, (tuple, list)):
        return (v[0], v[1])
    return (v, 0)


def load_model(path: str) -> DynamicsModel:
    with open(path) as fh:
        return DynamicsModel.from_dict(json.load(fh))


def default_model(n: int, sigma=1) -> DynamicsModel:
    return DynamicsModel(n=n, sigma=sigma)


def figure1_model(sigma=1) -> DynamicsModel:
    """n=3 model whose principal-wedge chain has c_2 = 1/2, c_3 = 1, γ_1 = 5.

    F = 2i z^2 zbar + 5i z^2 gives angular drift 3θ + 2/r + 5/r^2 at leading
    order, hence gamma_1 = 2, gamma_1^(3) = 5, c = [1/2, 1].
    """
    return DynamicsModel(n=3, f_coeffs={(2, 1): (0, 2), (2, 0): (0, 5)}, sigma=sigma)


def eval_drift(model: DynamicsModel, z):
    """a z^(n+1) + sum f_kl z^k zbar^l; works on scalars and numpy arrays."""
    z = np.asarray(z, dtype=complex) if not isinstance(z, complex) else z
    zb = np.conj(z)
    out = model.a_complex * z ** (model.n + 1)
    for (k, l), (re, im) in model.f_coeffs.items():
        out = out + complex(float(re), float(im)) * z ** k * zb ** l
    return out


def drift_polar(model: DynamicsModel, r, theta):
    """Radial and angular components of the drift, Re/Im of b(z) e^{-iθ}.

    Computed from e^{iωθ} directly so tiny angles keep full precision.
    """
    r = np.asarray(r, dtype=float)
    theta = np.asarray(theta, dtype=float)
    a = model.a_complex
    n = model.n
    w = a * np.exp(1j * n * theta) * r ** (n + 1)
    rad, ang = w.real, w.imag
    for (k, l), (re, im) in model.f_coeffs.items():
        om = k - l - 1
        t = complex(float(re), float(im)) * np.exp(1j * om * theta) * r ** (k + l)
        rad = rad + t.real
        ang = ang + t.imag
    return rad, ang


def normalize_leading(model: DynamicsModel) -> tuple[DynamicsModel, complex]:
    """Rescale z = λ w so the leading coefficient becomes 1.

    λ is the principal n-th root of 1/a.  Returns the model in w and λ.
    """
    n = model.n
    a = model.a
    if a[0] == 1 and a[1] == 0:
        return model, 1
    lam = _exact_root(a, n)
    if lam is None:
        lam = cmath.exp(-cmath.log(model.a_complex) / n)
        lamc = complex(lam)
        fc = {}
        for (k, l), (re, im) in model.f_coeffs.items():
            v = complex(float(re), float(im)) * lamc ** k * lamc.conjugate() ** l / lamc
            fc[(k, l)] = (v.real, v.imag)
        return DynamicsModel(n=n, a=(1, 0), f_coeffs=fc,
                             sigma=float(model.sigma) / abs(lamc)), lamc
    # rational positive λ: everything stays exact
    fc = {(k, l): (re * lam ** (k + l - 1), im * lam ** (k + l - 1))
          for (k, l), (re, im) in model.f_coeffs.items()}
    return DynamicsModel(n=n, a=(1, 0), f_coeffs=fc, sigma=model.sigma / lam), lam


def _exact_root(a, n):
    """Rational λ with λ^n = 1/a when a is a positive rational perfect power."""
    re, im = a
    if im != 0 or not _is_exact(re) or re <= 0:
        return None
    x = 1 / Fraction(re)
    num = _iroot(x.numerator, n)
    den = _iroot(x.denominator, n)
    if num is None or den is None:
        return None
    return Fraction(num, den)


def _iroot(v: int, n: int):
    g = round(v ** (1.0 / n))
    for c in (g - 1, g, g + 1):
        if c >= 0 and c ** n == v:
            return c
    return None


def denormalize_drift(model_w: DynamicsModel, lam, z):
    """Drift of the original z-process rebuilt from the w-model (inverse map)."""
    lam = complex(lam)
    return lam * eval_drift(model_w, np.asarray(z) / lam)


def default_J(n: int) -> int:
    return -(-n // 2) + 7


class PolarOperator:
    """Second-order operator with Laurent-polynomial coefficients in (r, φ).

    Terms map (r_pow, phi_pow, d_r, d_phi) -> coefficient; coefficients are
    Fractions when exact, floats otherwise.
    """

    __slots__ = ("terms", "J", "n", "remainder_bound")

    def __init__(self, terms, n: int, J: int | None = None, remainder_bound: float = 0.0):
        J = default_J(n) if J is None else int(J)
        if not J > n / 2 + 6:
            raise ModelError(f"truncation order J={J} must exceed n/2 + 6")
        merged: dict[TermKey, object] = {}
        items = terms.items() if isinstance(terms, dict) else terms
        for key, c in items:
            key = tuple(int(v) for v in key)
            if (key[2], key[3]) not in DERIV_ORDERS or key[1] < 0:
                raise ModelError(f"bad term key {key}")
            merged[key] = merged.get(key, 0) + c
        clean = {k: v for k, v in merged.items() if v != 0}
        self.terms = dict(sorted(clean.items(), key=_sort_key))
        self.J = J
        self.n = n
        self.remainder_bound = float(remainder_bound)

    def coeff(self, r_pow: int, phi_pow: int, d_r: int, d_phi: int):
        return self.terms.get((r_pow, phi_pow, d_r, d_phi), 0)

    def part(self, d_r: int, d_phi: int) -> dict:
        return {(a, b): c for (a, b, i, j), c in self.terms.items() if (i, j) == (d_r, d_phi)}

    def __eq__(self, other):
        return isinstance(other, PolarOperator) and self.terms == other.terms

    def __repr__(self):
        return f"PolarOperator({self.pretty()})"

    def pretty(self) -> str:
        names = {(1, 0): "∂r", (0, 1): "∂φ", (2, 0): "∂r²", (1, 1): "∂r∂φ", (0, 2): "∂φ²"}
        parts = []
        for (a, b, i, j), c in self.terms.items():
            mono = (f"r^{a}" if a else "") + (f"φ^{b}" if b else "")
            parts.append(f"{c}{'·' + mono if mono else ''}{names[(i, j)]}")
        return " + ".join(parts) if parts else "0"

    def coefficient_value(self, d_r: int, d_phi: int, r, phi):
        """Numerical value of the coefficient in front of ∂_r^d_r ∂_φ^d_phi."""
        r = np.asarray(r, dtype=float)
        phi = np.asarray(phi, dtype=float)
        out = np.zeros(np.broadcast(r, phi).shape)
        for (a, b), c in self.part(d_r, d_phi).items():
            out = out + float(c) * r ** a * phi ** b
        return out

    def apply(self, r, phi, u_r, u_phi, u_rr, u_rphi, u_phiphi):
        """Apply the operator to a function given its partial derivatives at (r, φ)."""
        d = {(1, 0): u_r, (0, 1): u_phi, (2, 0): u_rr, (1, 1): u_rphi, (0, 2): u_phiphi}
        return sum(self.coefficient_value(i, j, r, phi) * d[(i, j)] for (i, j) in DERIV_ORDERS)

    def to_dict(self) -> dict:
        return {
            "n": self.n, "J": self.J, "remainder_bound": self.remainder_bound,
            "terms": [{"r_pow": a, "phi_pow": b, "d_r": i, "d_phi": j, "coeff": c}
                      for (a, b, i, j), c in self.terms.items()],
        }

    @classmethod
    def from_dict(cls, d: dict) -> "PolarOperator":
        terms = {(t["r_pow"], t["phi_pow"], t["d_r"], t["d_phi"]): rational(t["coeff"])
                 for t in d["terms"]}
        return cls(terms, n=d["n"], J=d["J"], remainder_bound=d.get("remainder_bound", 0.0))


def _sort_key(item):
    (a, b, i, j), _ = item
    return (DERIV_ORDERS.index((i, j)), -a, b)


def _cos_series(omega, J):
    """Taylor coefficients {k: c_k} of cos(ωθ) up to θ^(J-1)."""
    return {k: Fraction((-1) ** (k // 2) * omega ** k, factorial(k))
            for k in range(0, J, 2) if omega ** k != 0 or k == 0}


def _sin_series(omega, J):
    return {k: Fraction((-1) ** ((k - 1) // 2) * omega ** k, factorial(k))
            for k in range(1, J, 2) if omega != 0}


def _tail_const(omega, J):
    # |cos or sin remainder| <= |ω|^J |θ|^J / J!
    return abs(omega) ** J / factorial(J)


def polar_generator(model: DynamicsModel, J: int | None = None) -> PolarOperator:
    """Time-changed generator L = r^{-n} 𝓛 in polar coordinates, Taylor-expanded in θ.

    L = r cos nθ ∂_r + sin nθ ∂_θ + P ∂_r + Q ∂_θ
        + σ²/(2 r^n) ∂_r² + σ²/(2 r^{n+2}) ∂_θ²
    with P, Q collecting F and the σ²/(2 r^{n+1}) drift from the Laplacian.
    """
    n = model.n
    J = default_J(n) if J is None else J
    if model.a != (1, 0):
        raise ModelError("normalize the leading coefficient first")
    terms: dict[TermKey, object] = {}
    bound = 0.0

    def add(key, c):
        terms[key] = terms.get(key, 0) + c

    for k, c in _cos_series(n, J).items():
        add((1, k, 1, 0), c)
    for k, c in _sin_series(n, J).items():
        add((0, k, 0, 1), c)
    bound += 2 * _tail_const(n, J)

    for (k, l), (fr, fi) in model.f_coeffs.items():
        om = k - l - 1
        e = k + l - n
        cs, sn = _cos_series(om, J), _sin_series(om, J)
        # P: Re(f e^{iωθ}) = fr cos ωθ - fi sin ωθ
        for p, c in cs.items():
            add((e, p, 1, 0), fr * c)
            add((e - 1, p, 0, 1), fi * c)
        for p, c in sn.items():
            add((e, p, 1, 0), -fi * c)
            add((e - 1, p, 0, 1), fr * c)
        bound += 2 * (abs(float(fr)) + abs(float(fi))) * _tail_const(om, J)

    s2 = model.sigma ** 2
    half = Fraction(1, 2) if _is_exact(s2) else 0.5
    add((-n - 1, 0, 1, 0), s2 * half)
    add((-n, 0, 2, 0), s2 * half)
    add((-n - 2, 0, 0, 2), s2 * half)
    return PolarOperator(terms, n=n, J=J, remainder_bound=bound)


def figure1_operator(sigma=1, J: int | None = None) -> PolarOperator:
    """L = r∂_r + (3θ + 2r⁻¹ + 5r⁻²)∂_θ + σ²r⁻³∂_r² + σ²r⁻⁵∂_θ²  (n = 3)."""
    s2 = Fraction(sigma) ** 2 if _is_exact(sigma) else float(sigma) ** 2
    terms = {(1, 0, 1, 0): 1, (0, 1, 0, 1): 3, (-1, 0, 0, 1): 2, (-2, 0, 0, 1): 5,
             (-3, 0, 2, 0): s2, (-5, 0, 0, 2): s2}
    return PolarOperator({k: Fraction(v) if _is_exact(v) else v for k, v in terms.items()},
                         n=3, J=J)


def generator_coefficients_exact(model: DynamicsModel, r, theta):
    """Untruncated coefficients of the time-changed L at (r, θ).

    Returns (coef ∂_r, coef ∂_θ, coef ∂_r², coef ∂_θ²) for comparing against
    the truncated PolarOperator.
    """
    n = model.n
    rad, ang = drift_polar(model, r, theta)
    r = np.asarray(r, dtype=float)
    s2 = float(model.sigma) ** 2
    cr = rad / r ** n + s2 / (2 * r ** (n + 1))
    ct = ang / r ** (n + 1)
    return cr, ct, s2 / (2 * r ** n) + 0 * cr, s2 / (2 * r ** (n + 2)) + 0 * cr


def model_hash(model: DynamicsModel) -> str:
    import hashlib
    from .serialize import dumps
    return hashlib.sha256(dumps(model).encode()).hexdigest()


def rotate_to_wedge(model: DynamicsModel, k: int) -> DynamicsModel:
    """Model seen from the wedge centred at angle 2πk/n (w = z e^{-2πik/n}).

    The leading term is invariant; lower-order terms pick up phases.
    """
    n = model.n
    if k % n == 0:
        return model
    rot = cmath.exp(2j * math.pi * k / n)
    fc = {}
    for (kk, ll), (re, im) in model.f_coeffs.items():
        v = complex(float(re), float(im)) * rot ** kk * rot.conjugate() ** ll / rot
        fc[(kk, ll)] = (v.real, v.imag)
    return DynamicsModel(n=n, a=model.a, f_coeffs=fc, sigma=model.sigma)
