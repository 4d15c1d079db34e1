"""Regions S_0 .. S_{j+4} of the principal wedge and the parameter ladder."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .dynamics_model import ModelError
from .operator_algebra import CoordinateChain, phi_coords, theta_from_phi


@dataclass(frozen=True)
class RegionParams:
    theta0: float
    theta1: float
    phi_star: float
    eta_star: float
    r_star: float

    def to_dict(self):
        return {"theta0": self.theta0, "theta1": self.theta1, "phi_star": self.phi_star,
                "eta_star": self.eta_star, "r_star": self.r_star}


def default_params(chain: CoordinateChain, **override) -> RegionParams:
    """Ladder θ0 → θ1 → φ* → η* → r*, each scale chosen after the previous one."""
    n = chain.n
    theta0 = override.get("theta0", 3 * math.pi / (4 * n))
    theta1 = override.get("theta1", theta0 / 10)
    cmax = max(abs(float(c)) for c in chain.c)
    g1 = abs(float(chain.gamma1_base))
    phi_star = override.get("phi_star", 10 * (1 + cmax + g1))
    c_last = abs(float(chain.c[-1]))
    eta_star = override.get("eta_star", 10 * (1 + c_last + math.sqrt(phi_star)))
    r_star = override.get("r_star", 10 * phi_star ** 2)
    p = RegionParams(float(theta0), float(theta1), float(phi_star), float(eta_star), float(r_star))
    validate_params(chain, p)
    return p


def validate_params(chain: CoordinateChain, p: RegionParams) -> None:
    n = chain.n
    cmax = max(abs(float(c)) for c in chain.c)
    checks = [
        (math.pi / (2 * n) < p.theta0 < math.pi / n, "θ0 must lie in (π/2n, π/n)"),
        (0 < p.theta1 < p.theta0, "need 0 < θ1 < θ0"),
        (p.phi_star > cmax * (n + 2), "φ* must exceed (n+2)·max|c_m|"),
        (p.phi_star > abs(float(chain.gamma1_base)) / (n + 1), "φ* must exceed γ_1/(n+1)"),
        (p.eta_star > abs(float(chain.c[-1])), "η* must exceed |c_{j+2}|"),
        (p.r_star > p.phi_star, "r* must exceed φ*"),
    ]
    for ok, msg in checks:
        if not ok:
            raise ModelError(msg)


class RegionAtlas:
    """Classifier for the regions; ties on a boundary go to the larger index."""

    def __init__(self, chain: CoordinateChain, params: RegionParams):
        validate_params(chain, params)
        self.chain = chain
        self.params = params
        self.n = chain.n
        self.j = chain.j
        self.odd = chain.n % 2 == 1
        self.last = chain.j + 4

    @property
    def region_ids(self) -> list[int]:
        return list(range(self.last + 1))

    def inner_width(self, r):
        """Half-width in φ_{j+3} of the inner layer S_{j+4}."""
        es = self.params.eta_star
        return es / np.sqrt(r) if self.odd else es / np.asarray(r, dtype=float)

    def classify_many(self, r, theta) -> np.ndarray:
        r = np.asarray(r, dtype=float)
        theta = np.asarray(theta, dtype=float)
        r, theta = np.broadcast_arrays(r, theta)
        p = self.params
        if np.any(r < p.r_star):
            raise ModelError("point below r*: outside the atlas")
        if np.any(np.abs(theta) > math.pi / self.n + 1e-15):
            raise ModelError("angle outside the principal wedge")
        phis = phi_coords(self.chain, r, theta)
        out = np.full(r.shape, self.last, dtype=int)
        decided = np.zeros(r.shape, dtype=bool)

        def mark(mask, rid):
            nonlocal decided
            sel = mask & ~decided
            out[sel] = rid
            decided |= sel

        # inner layer first so that ties resolve toward larger indices
        at = np.abs(theta)
        mark(np.abs(phis[-1]) <= self.inner_width(r), self.last)
        mark(np.abs(phis[-1]) <= p.phi_star, self.j + 3)
        for m in range(self.j + 2, 2, -1):
            # S_m: |φ_m| ≤ φ* and |φ_{m+1}| ≥ φ*
            mark(np.abs(phis[m - 2]) <= p.phi_star, m)
        mark(at <= p.theta1, 2)
        mark(at <= p.theta0, 1)
        mark(np.ones_like(decided), 0)
        return out

    def classify(self, r: float, theta: float) -> int:
        return int(self.classify_many(np.array([r]), np.array([theta]))[0])

    def boundary_theta(self, pair, r, sign: int):
        """θ on the boundary between regions pair=(i, i+1), on the ± side."""
        a, b = sorted(pair)
        if b != a + 1:
            raise ModelError("regions are not adjacent")
        p = self.params
        r = np.asarray(r, dtype=float)
        if a == 0:
            return sign * p.theta0 + 0 * r
        if a == 1:
            return sign * p.theta1 + 0 * r
        if a <= self.j + 2:
            # |φ_{a+1}| = φ*
            return theta_from_phi(self.chain, a + 1, r, sign * p.phi_star)
        if a == self.j + 3:
            return theta_from_phi(self.chain, self.j + 3, r, sign * self.inner_width(r))
        raise ModelError(f"no boundary between {a} and {b}")

    def boundary_samples(self, id_pair, count: int, r_range) -> list[tuple[float, float, str]]:
        """`count` points per side, log-spaced in r."""
        lo, hi = r_range
        if lo < self.params.r_star:
            raise ModelError("r range starts below r*")
        rs = np.geomspace(lo, hi, count)
        out = []
        for sign, side in ((1, "+"), (-1, "-")):
            th = self.boundary_theta(id_pair, rs, sign)
            out.extend((float(r), float(t), side) for r, t in zip(rs, th))
        return out

    def boundary_pairs(self) -> list[tuple[int, int]]:
        return [(i, i + 1) for i in range(self.last)]

    def region_coordinate(self, rid: int):
        """Index m of the angular coordinate that parametrizes region rid."""
        if rid <= 2:
            return 2
        return min(rid, self.j + 3)

    def to_dict(self):
        return {"params": self.params.to_dict(), "parity": "odd" if self.odd else "even",
                "regions": [f"S_{i}" for i in self.region_ids]}


def make_atlas(chain: CoordinateChain, params: RegionParams | None = None) -> RegionAtlas:
    return RegionAtlas(chain, params or default_params(chain))


def figure1_params(chain: CoordinateChain) -> RegionParams:
    return default_params(chain, phi_star=10.0, eta_star=5.0)


def figure1_curves(atlas: RegionAtlas, r_max: float = 1.0e4, count: int = 400,
                   stable_phi4: tuple = (-1e-6, -1e-9, 1e-9, 1e-6)) -> list[tuple]:
    """Polylines (curve_id, r, θ): region boundaries, the unstable curve and a few stable ones.

    The unstable curve is φ_{j+3} = 0 and stable ones are φ_{j+3} = φ(0) r^{n+j+1},
    which for the worked n=3 operator read θ = φ_4(0) r³ − 1/(2r) − 1/r².
    """
    ch = atlas.chain
    top = ch.j + 3
    rows = []
    rs = np.geomspace(atlas.params.r_star, r_max, count)
    for a, b in atlas.boundary_pairs():
        for sign, side in ((1, "plus"), (-1, "minus")):
            th = atlas.boundary_theta((a, b), rs, sign)
            rows += [(f"boundary_S{a}_S{b}_{side}", float(r), float(t)) for r, t in zip(rs, th)]
    rs_all = np.geomspace(1.0, r_max, count)
    th = theta_from_phi(ch, top, rs_all, 0.0)
    rows += [("unstable", float(r), float(t)) for r, t in zip(rs_all, th)]
    mult = ch.n + top - 2
    for k, v in enumerate(stable_phi4):
        phi = v * rs_all ** mult
        th = theta_from_phi(ch, top, rs_all, phi)
        keep = np.abs(th) <= math.pi / ch.n
        rows += [(f"stable_{k}", float(r), float(t)) for r, t in zip(rs_all[keep], th[keep])]
    return rows
