"""Numerical checks of the Lyapunov construction at sampled scale.

Local bounds 𝓛ψ_i ≤ -C_i Φ_i + D_i, boundary flux signs, the ψ_{j+3}
symmetry, a Monte Carlo Dynkin/flux estimate for kinked test functions and
the supermartingale-with-drift property E Ψ(z_{t∧τ}) ≤ Ψ(z_0) + b t.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics_model import DynamicsModel, ModelError
from .lyapunov_builder import PiecewiseLyapunov, check_symmetry_residual, global_extension
from .operator_algebra import theta_from_phi
from .sde_simulator import SimConfig, simulate_paths


@dataclass
class VerificationReport:
    sections: dict = field(default_factory=dict)

    def violations(self) -> dict:
        out = {}
        for name, sec in self.sections.items():
            v = sec.get("violations", [])
            if v:
                out[name] = v
        return out

    @property
    def ok(self) -> bool:
        return not self.violations()

    def exit_code(self) -> int:
        return 0 if self.ok else 1

    def to_dict(self):
        return {"sections": self.sections, "ok": self.ok,
                "violation_counts": {k: len(v) for k, v in self.violations().items()}}

    def text(self) -> str:
        lines = []
        for name, sec in self.sections.items():
            nv = len(sec.get("violations", []))
            lines.append(f"{name}: {'ok' if nv == 0 else f'{nv} violation(s)'}")
            for k in ("summary",):
                if k in sec:
                    for row in sec[k]:
                        lines.append("  " + row)
        lines.append("certified at sampled scale" if self.ok else "NOT certified")
        return "\n".join(lines) + "\n"


# ---------------------------------------------------------------- sampling grids

def region_grid(psi: PiecewiseLyapunov, rid: int, r_max: float, n_r: int = 50, n_c: int = 24):
    """Points (r, θ) covering region rid, log-spaced in r and spread over the region's coordinate.

    Returns r, θ and the row index of r for every point that classifies into rid.
    """
    at, P, ch = psi.atlas, psi.params, psi.chain
    n, top = ch.n, psi.top
    rs = np.geomspace(P.r_star, r_max, n_r)
    half = max(n_c // 2, 2)
    R, T, I = [], [], []
    for i, r in enumerate(rs):
        ths = []
        if rid == 0:
            a = np.linspace(P.theta0, math.pi / n, half + 1)[1:]
            ths = [a, -a]
        elif rid == 1:
            a = np.linspace(P.theta1, P.theta0, half + 1)[1:]
            ths = [a, -a]
        elif rid == 2:
            for sg in (1, -1):
                b = float(at.boundary_theta((2, 3), r, sg))
                ths.append(np.linspace(b, sg * P.theta1, half + 1)[1:])
        elif rid <= top:
            for sg in (1, -1):
                if rid < top:
                    fb = (sg * P.phi_star - float(ch.c_at(rid))) / r
                else:
                    fb = sg * float(at.inner_width(r))
                ph = sg * np.geomspace(abs(fb), P.phi_star, half + 1)[1:]
                ths.append(theta_from_phi(ch, rid, r, ph))
        elif rid == top + 1:
            w = float(at.inner_width(r))
            ph = np.linspace(-w, w, 2 * half + 1)
            ths = [theta_from_phi(ch, top, r, ph)]
        else:
            raise ModelError(f"no region {rid}")
        th = np.concatenate(ths)
        th = np.clip(th, -math.pi / n, math.pi / n)
        R.append(np.full(th.size, r))
        T.append(th)
        I.append(np.full(th.size, i))
    R, T, I = np.concatenate(R), np.concatenate(T), np.concatenate(I)
    keep = at.classify_many(R, T) == rid
    return R[keep], T[keep], I[keep], rs


def comparison(psi: PiecewiseLyapunov, rid: int, r, theta):
    """Φ_i: r^{p+n} on S_0, r^{p+n}/|θ|^q on S_1, S_2, r^{p_m+n}/|φ_m|^{q_m} on S_m, r^{p_{j+4}+n} inside."""
    ex = psi.exponents
    n, p, q = ex.n, float(ex.p), float(ex.q)
    r = np.asarray(r, dtype=float)
    if rid == 0:
        return r ** (p + n)
    if rid in (1, 2):
        return r ** (p + n) / np.abs(theta) ** q
    if rid <= psi.top:
        from .operator_algebra import phi_derivs
        ph = phi_derivs(psi.chain, rid, r, theta)[0]
        return r ** (float(ex.p_m(rid)) + n) / np.abs(ph) ** float(ex.q_m(rid))
    return r ** (float(ex.p_last) + n)


def fd_partials(psi: PiecewiseLyapunov, rid: int, sign: int, r, theta, rel: float = 1e-5, theta_scale=None):
    """(ψ_r, ψ_θ, ψ_rr, ψ_θθ) of one closed form by central differences with a Richardson step."""
    r = np.asarray(r, dtype=float)
    theta = np.asarray(theta, dtype=float)
    hr = rel * r
    ht = rel * (np.abs(theta) if theta_scale is None else theta_scale)

    def f(rr, tt):
        return psi.piece(rid, sign, rr, tt)[0]

    def d(h, axis):
        if axis == 0:
            fp, fm = f(r + h, theta), f(r - h, theta)
        else:
            fp, fm = f(r, theta + h), f(r, theta - h)
        f0 = f(r, theta)
        return (fp - fm) / (2 * h), (fp - 2 * f0 + fm) / h ** 2

    out = []
    for axis, h in ((0, hr), (1, ht)):
        d1a, d2a = d(h, axis)
        d1b, d2b = d(h / 2, axis)
        out.append(((4 * d1b - d1a) / 3, (4 * d2b - d2a) / 3))
    return out[0][0], out[1][0], out[0][1], out[1][1]


# ---------------------------------------------------------------- local bounds

def check_local_lyapunov(psi: PiecewiseLyapunov, model: DynamicsModel | None = None, *,
                         r_max: float = 1e6, n_r: int = 50, n_c: int = 24,
                         crosscheck: bool = True) -> dict:
    """Fit C_i, D_i per region and a (Ψ, Ψ^{1+δ}) pair on a log grid up to r_max.

    C_i is half the smallest -𝓛ψ_i/Φ_i over the upper half of the r-grid, D_i
    the smallest offset that makes the bound hold on the whole grid.  A point in
    the upper half with 𝓛ψ_i ≥ 0, a non-finite value, or C_i ≤ 0 is a violation.
    """
    model = model or psi.model
    if model is None:
        raise ModelError("local check needs the dynamics model")
    if not r_max > psi.params.r_star:
        raise ModelError("r_max must exceed r*")
    regions, violations, summary = [], [], []
    data = {}
    for rid in psi.atlas.region_ids:
        r, th, ridx, rs = region_grid(psi, rid, r_max, n_r, n_c)
        if r.size == 0:
            violations.append({"region": rid, "reason": "empty sample"})
            continue
        L, got = psi.generator(r, th, model)
        f = psi.derivs(r, th)[0][0]
        Phi = comparison(psi, rid, r, th)
        upper = ridx >= n_r // 2
        finite = np.isfinite(L) & np.isfinite(Phi) & np.isfinite(f)
        for k in np.flatnonzero(~finite)[:20]:
            violations.append({"region": rid, "r": r[k], "theta": th[k], "reason": "non-finite"})
        ratio = -L / Phi
        C = 0.5 * float(np.min(ratio[upper & finite])) if np.any(upper & finite) else -math.inf
        D = float(max(0.0, np.max((L + C * Phi)[finite]))) if C > 0 else math.inf
        bad = upper & finite & (L >= 0)
        for k in np.flatnonzero(bad)[:20]:
            violations.append({"region": rid, "r": r[k], "theta": th[k], "L_psi": L[k], "reason": "L psi >= 0"})
        if not C > 0:
            violations.append({"region": rid, "reason": "no positive C"})
        row = {"region": rid, "points": int(r.size), "C": C, "D": D,
               "max_L_over_Phi_upper": float(np.max(-ratio[upper & finite])) if np.any(upper & finite) else None,
               "upper_violations": int(bad.sum())}
        if crosscheck and rid in (1, psi.top + 1):
            row["fd_crosscheck"] = _crosscheck(psi, rid, r, th)
        regions.append(row)
        summary.append(f"S_{rid}: {r.size} pts, C={C:.4g}, D={D:.4g}")
        data[rid] = (r, th, ridx, L, f)
    pair = _fit_pair(psi, data, n_r)
    if not pair["delta"] > 0:
        violations.append({"reason": "no delta > 0 for the (Psi, Psi^(1+delta)) shape"})
    summary.append(f"pair: delta={pair['delta']:.4g} (max {pair['delta_max']:.4g}), m={pair['m']:.4g}, b={pair['b']:.4g}")
    return {"regions": regions, "pair": pair, "violations": violations, "summary": summary,
            "r_max": r_max, "grid": {"n_r": n_r, "n_c": n_c}}


def _crosscheck(psi, rid, r, th, count: int = 40):
    idx = np.linspace(0, r.size - 1, min(count, r.size)).astype(int)
    worst = 0.0
    for sg in (1, -1):
        sel = idx[(np.where(th[idx] >= 0, 1, -1) == sg)]
        if sel.size == 0:
            continue
        rr, tt = r[sel], th[sel]
        an = psi.piece(rid, sg, rr, tt)
        scale = None
        if rid == psi.top + 1:
            scale = psi.atlas.inner_width(rr) / rr ** (psi.top - 2)
        fd = fd_partials(psi, rid, sg, rr, tt, theta_scale=scale)
        for a, b in zip((an[1], an[2], an[3], an[4]), fd):
            den = max(float(np.max(np.abs(a))), 1e-300)
            worst = max(worst, float(np.max(np.abs(a - b)) / den))
    return worst


def _slope(rs_log, env_log):
    A = np.vstack([rs_log, np.ones_like(rs_log)]).T
    return float(np.linalg.lstsq(A, env_log, rcond=None)[0][0])


def _fit_pair(psi, data, n_r, tol: float = 1e-3):
    """Largest δ for which -𝓛Ψ/Ψ^{1+δ} has a non-decreasing lower envelope in r in every region.

    Half of it is reported as δ; m is half the smallest positive ratio at that δ
    and b the offset needed for 𝓛Ψ ≤ -m Ψ^{1+δ} + b on the whole grid.
    """
    def ok(delta):
        for rid, (r, th, ridx, L, f) in data.items():
            g = -L / f ** (1 + delta)
            levels = np.unique(ridx[ridx >= n_r // 2])
            if levels.size < 3:
                continue
            env = np.array([np.min(g[ridx == i]) for i in levels])
            if np.any(env <= 0):
                return False
            rl = np.array([np.log(r[ridx == i][0]) for i in levels])
            if _slope(rl, np.log(env)) < -tol:
                return False
        return True
    lo, hi = 0.0, 4.0
    if not ok(0.0):
        return {"delta": 0.0, "delta_max": 0.0, "m": 0.0, "b": math.inf}
    for _ in range(40):
        mid = (lo + hi) / 2
        lo, hi = (mid, hi) if ok(mid) else (lo, mid)
    delta = lo / 2
    ms, bs = [], []
    for rid, (r, th, ridx, L, f) in data.items():
        g = -L / f ** (1 + delta)
        ms.append(float(np.min(g[g > 0])) if np.any(g > 0) else math.inf)
    m = 0.5 * min(ms)
    for rid, (r, th, ridx, L, f) in data.items():
        bs.append(float(np.max(L + m * f ** (1 + delta))))
    return {"delta": delta, "delta_max": lo, "m": m, "b": max(0.0, max(bs))}


# ---------------------------------------------------------------- flux signs

def _stencil(fn, x0, h):
    """One-sided 4-point derivative, h > 0 looks right, h < 0 looks left."""
    f = [fn(x0 + k * h) for k in range(4)]
    return (-11 * f[0] + 18 * f[1] - 9 * f[2] + 2 * f[3]) / (6 * h)


def check_flux_signs(psi: PiecewiseLyapunov, samples_per_boundary: int = 100, *,
                     r_range=None, method: str = "analytic", tol: float = 0.0) -> dict:
    """θ-derivative jump (right minus left) at every boundary sample; a positive jump is a violation.

    On the + side the right piece is the outer one, on the - side the inner one.
    method "stencil" replaces the closed-form derivatives by one-sided 4-point
    stencils at distance 1e-4 times the local angular scale.
    """
    at, P = psi.atlas, psi.params
    lo, hi = r_range or (P.r_star, 1e3 * P.r_star)
    table, violations, summary = [], [], []
    for a, b in at.boundary_pairs():
        s = at.boundary_samples((a, b), samples_per_boundary, (lo, hi))
        r = np.array([x[0] for x in s])
        th = np.array([x[1] for x in s])
        sg = np.array([1 if x[2] == "+" else -1 for x in s])
        jumps = np.empty(r.size)
        rel = np.empty(r.size)
        for side in (1, -1):
            sel = sg == side
            rr, tt = r[sel], th[sel]
            if method == "analytic":
                da = psi.piece(a, side, rr, tt)[2]
                db = psi.piece(b, side, rr, tt)[2]
            elif method == "stencil":
                scale = _angular_scale(psi, a, rr)
                h = 1e-4 * scale
                # outer piece a lies at larger |θ|
                da = _stencil(lambda x: psi.piece(a, side, rr, x)[0], tt, side * h)
                db = _stencil(lambda x: psi.piece(b, side, rr, x)[0], tt, -side * h)
            else:
                raise ModelError(f"unknown flux method {method!r}")
            j = (da - db) if side == 1 else (db - da)
            jumps[sel] = j
            rel[sel] = j / (np.abs(da) + np.abs(db))
        bad = jumps > tol
        for k in np.flatnonzero(bad)[:20]:
            violations.append({"pair": [a, b], "r": r[k], "theta": th[k], "side": s[k][2], "jump": jumps[k]})
        table.append({"pair": [a, b], "samples": int(r.size), "max_jump": float(jumps.max()),
                      "max_relative_jump": float(rel.max()), "positive": int(bad.sum()),
                      "sign": "nonpositive" if not bad.any() else "positive"})
        summary.append(f"S_{a}/S_{b}: max relative jump {rel.max():.3g}, {int(bad.sum())} positive")
    return {"table": table, "violations": violations, "summary": summary, "method": method}


def _angular_scale(psi, a, r):
    P = psi.params
    if a == 0:
        return P.theta0 + 0 * r
    if a == 1:
        return P.theta1 + 0 * r
    m = a + 1 if a <= psi.chain.j + 2 else psi.top
    width = P.phi_star if a <= psi.chain.j + 2 else psi.atlas.inner_width(r)
    return width / r ** (m - 2)


# ---------------------------------------------------------------- symmetry

def check_symmetry(psi: PiecewiseLyapunov, count: int = 200, tol: float = 1e-10) -> dict:
    res = check_symmetry_residual(psi, count)
    v = [] if res < tol else [{"residual": res, "tol": tol}]
    return {"residual": res, "violations": v, "summary": [f"max relative residual {res:.3g}"]}


# ---------------------------------------------------------------- Dynkin / flux

@dataclass
class KinkedFunction:
    """φ = left(x) for x < b, right(x) for x ≥ b; each piece returns (f, f', f'')."""
    left: object
    right: object
    boundary: float = 0.0
    jump_sign: int = 1              # sign of φ'(b+) - φ'(b-)

    def value(self, x):
        x = np.asarray(x, dtype=float)
        return np.where(x < self.boundary, self.left(x)[0], self.right(x)[0])

    def generator_avg(self, x, mu, s):
        """½[𝓛φ(+) + 𝓛φ(-)] with 𝓛 = μ ∂ + ½ s² ∂²; at the boundary both pieces are averaged."""
        x = np.asarray(x, dtype=float)
        fl, fr = self.left(x), self.right(x)
        gl = mu * fl[1] + 0.5 * s ** 2 * fl[2]
        gr = mu * fr[1] + 0.5 * s ** 2 * fr[2]
        return np.where(x < self.boundary, gl, np.where(x > self.boundary, gr, 0.5 * (gl + gr)))


def abs_function() -> KinkedFunction:
    return KinkedFunction(left=lambda x: (-x, -1 + 0 * x, 0 * x), right=lambda x: (x, 1 + 0 * x, 0 * x),
                          boundary=0.0, jump_sign=1)


def square_function() -> KinkedFunction:
    sq = lambda x: (x * x, 2 * x, 2 + 0 * x)          # noqa: E731
    return KinkedFunction(left=sq, right=sq, boundary=0.0, jump_sign=0)


def check_dynkin(phi: KinkedFunction, *, x0: float = 0.0, t_grid=(0.5, 1.0, 2.0), n_ball: float = 1e6,
                 N: int = 100_000, seed: int = 0, dt: float = 1e-3, drift=None, diffusion=None) -> dict:
    """Monte Carlo Flux(t) = E φ(ξ_{t∧τ}) - φ(ξ_0) - E ∫_0^{t∧τ} ½[𝓛φ(+) + 𝓛φ(-)] ds for a 1-D diffusion.

    Default process is standard Brownian motion; τ is the exit time of (-n_ball, n_ball).
    The time integral uses the trapezoid rule along each path.
    """
    t_grid = np.asarray(sorted(t_grid), dtype=float)
    mu_fn = drift or (lambda x: 0 * x)
    s_fn = diffusion or (lambda x: 1 + 0 * x)
    x = np.full(N, float(x0))
    integ = np.zeros(N)
    alive = np.ones(N, dtype=bool)
    g_prev = phi.generator_avg(x, mu_fn(x), s_fn(x))
    steps = int(round(t_grid[-1] / dt))
    rec = {}
    marks = {int(round(t / dt)): t for t in t_grid}
    block = -1
    noise = None
    for k in range(steps):
        if k // _DYN_BLOCK != block:
            block = k // _DYN_BLOCK
            noise = _dynkin_noise(seed, N, block)
        z = noise[:, k % _DYN_BLOCK]
        mu, s = mu_fn(x), s_fn(x)
        xn = x + mu * dt + s * math.sqrt(dt) * z
        xn = np.where(alive, xn, x)
        g_new = phi.generator_avg(xn, mu_fn(xn), s_fn(xn))
        integ += np.where(alive, 0.5 * (g_prev + g_new) * dt, 0.0)
        x, g_prev = xn, g_new
        alive &= np.abs(x) < n_ball
        if k + 1 in marks:
            vals = phi.value(x) - phi.value(np.array([x0]))[0] - integ
            rec[marks[k + 1]] = vals.copy()
    rows, violations = [], []
    for t in t_grid:
        v = rec[t]
        mean = float(v.mean())
        se = float(v.std(ddof=1) / math.sqrt(N))
        rows.append({"t": float(t), "flux": mean, "se": se, "ci": [mean - 1.96 * se, mean + 1.96 * se]})
    fl = [r["flux"] for r in rows]
    monotone = all(fl[i] <= fl[i + 1] + 2 * math.hypot(rows[i]["se"], rows[i + 1]["se"]) for i in range(len(fl) - 1))
    if phi.jump_sign > 0:
        sign_ok = all(r["ci"][0] > 0 for r in rows)
    elif phi.jump_sign < 0:
        sign_ok = all(r["ci"][1] < 0 for r in rows)
    else:
        sign_ok = all(abs(r["flux"]) <= 2.5 * r["se"] + 1e-12 for r in rows)
    if not sign_ok:
        violations.append({"reason": "flux sign disagrees with the declared jump", "rows": rows})
    if not monotone:
        violations.append({"reason": "flux not increasing in t", "rows": rows})
    return {"rows": rows, "monotone": monotone, "sign_ok": sign_ok, "violations": violations,
            "summary": [f"t={r['t']}: flux {r['flux']:.5g} ± {1.96 * r['se']:.2g}" for r in rows]}


_DYN_BLOCK = 64


def _dynkin_noise(seed, N, block):
    """Normals (N, _DYN_BLOCK) for steps of one block, counter addressed by (seed, block)."""
    bg = np.random.Philox(key=np.array([int(seed) & ((1 << 64) - 1), 0xD1], dtype=np.uint64),
                          counter=np.array([0, block, 0, 0], dtype=np.uint64))
    return np.random.Generator(bg).standard_normal((N, _DYN_BLOCK))


# ---------------------------------------------------------------- Lyapunov pair

def check_lyapunov_pair(psi, model: DynamicsModel, z0_set, t_grid=(0.01, 0.1, 1.0), N: int = 400,
                        seed: int = 0, *, b: float | None = None, local: dict | None = None,
                        n_ball: float | None = None, cfg: SimConfig | None = None) -> dict:
    """E Ψ(z_{t∧τ}) ≤ Ψ(z_0) + b t within 2 standard errors.

    τ is the exit time of the annulus |λ| r* < |z| < n_ball (λ the normalization),
    so paths stay where Ψ is built from its closed forms.  b comes from the
    fitted local bounds unless given.
    """
    wedges = psi if isinstance(psi, (list, tuple)) else [psi]
    base = wedges[0]
    scale = abs(complex(base.scale))
    inner = base.params.r_star * scale
    n_ball = n_ball or 1e3 * inner
    if b is None:
        local = local or check_local_lyapunov(base, base.model, r_max=min(1e6, n_ball / scale))
        b = max([r["D"] for r in local["regions"]] + [local["pair"]["b"]])
    if not math.isfinite(b):
        raise ModelError("no finite b: local bounds failed")
    cfg = cfg or SimConfig(dt_max=1e-3, rule="relative", eps_c=1e-3, T=max(t_grid),
                           seed=seed, path_count=N, blowup_radius=10 * n_ball)
    cfg = SimConfig(**{**cfg.to_dict(), "T": max(t_grid), "path_count": N, "seed": seed})
    rows, violations = [], []
    for zi, z0 in enumerate(np.atleast_1d(np.asarray(z0_set, dtype=complex))):
        if abs(z0) <= inner:
            raise ModelError("z0 must lie outside |λ| r*")
        psi0 = float(global_extension(wedges, z0))
        bundle = simulate_paths(model, z0, SimConfig(**{**cfg.to_dict(), "seed": seed + 7919 * zi}),
                                record_times=list(t_grid), stop_inside=inner, stop_outside=n_ball)
        for k, t in enumerate(t_grid):
            zt = bundle.records[:, k]
            ok = np.isfinite(zt)
            vals = global_extension(wedges, zt[ok]) if ok.any() else np.array([])
            mean = float(np.mean(vals)) if vals.size else math.nan
            se = float(np.std(vals, ddof=1) / math.sqrt(vals.size)) if vals.size > 1 else 0.0
            bound = psi0 + b * t
            passed = bool(mean <= bound + 2 * se)
            row = {"z0": complex(z0), "t": float(t), "mean_psi": mean, "se": se, "psi0": psi0, "bound": bound,
                   "stopped_fraction": float(np.mean(bundle.stopped)), "flagged": int(bundle.flagged.sum()),
                   "pass": passed}
            rows.append(row)
            if not passed:
                violations.append(row)
    return {"rows": rows, "b": b, "n_ball": n_ball, "inner_radius": inner, "violations": violations,
            "summary": [f"z0={r['z0']:.4g} t={r['t']}: E psi {r['mean_psi']:.4g} ± {r['se']:.2g} vs bound {r['bound']:.4g}"
                        for r in rows]}


def verify_all(psi: PiecewiseLyapunov, model: DynamicsModel | None = None, *, r_max: float = 1e6,
               samples_per_boundary: int = 100) -> VerificationReport:
    rep = VerificationReport()
    rep.sections["local_lyapunov"] = check_local_lyapunov(psi, model, r_max=r_max)
    rep.sections["flux_signs"] = check_flux_signs(psi, samples_per_boundary)
    rep.sections["symmetry"] = check_symmetry(psi)
    return rep
