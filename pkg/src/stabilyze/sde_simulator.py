"""Seeded integration: adaptive Euler-Maruyama for the main SDE and the adjoint
process, Monte Carlo exit moments of the η-process, and high-precision flows of
the first-order part of a polar operator.

Randomness is counter based.  Path `pid` under seed `s` owns the Philox stream
with key (s, pid); its step k reads pair k % BLOCK of the block counter k // BLOCK,
so results do not depend on how paths are batched or threaded.
"""
from __future__ import annotations

import json
import math
import os
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from fractions import Fraction

import gmpy2
import numpy as np

from .dynamics_model import DynamicsModel, ModelError, eval_drift, model_hash
from .serialize import atomic_write, csv_text, dumps

BLOCK = 4096
RULES = ("absolute", "relative")
_U64 = (1 << 64) - 1


def worker_count(requested: int | None = None) -> int:
    """Thread count: explicit request, else STABILYZE_THREADS, else 1."""
    if requested is not None:
        return max(1, int(requested))
    env = os.environ.get("STABILYZE_THREADS", "").strip()
    if env:
        try:
            return max(1, int(env))
        except ValueError:
            raise ModelError(f"STABILYZE_THREADS must be an integer, got {env!r}")
    return 1


@dataclass(frozen=True)
class SimConfig:
    dt_max: float = 1e-2
    rule: str = "absolute"
    T: float = 1.0
    seed: int = 0
    path_count: int = 1
    blowup_radius: float = 1e6
    eps_c: float = 0.1

    def __post_init__(self):
        if not self.dt_max > 0:
            raise ModelError("dt_max must be positive")
        if self.rule not in RULES:
            raise ModelError(f"step rule must be one of {RULES}")
        if not self.T >= 0:
            raise ModelError("horizon T must be non-negative")
        if not 0 <= int(self.seed) <= _U64:
            raise ModelError("seed must fit in 64 bits")
        if int(self.path_count) < 1:
            raise ModelError("path_count must be at least 1")
        if not self.blowup_radius > 0 or not self.eps_c > 0:
            raise ModelError("blowup_radius and eps_c must be positive")

    def check_radius(self, r_star: float) -> None:
        if self.blowup_radius < 10 * r_star:
            raise ModelError("blowup_radius must be at least 10·r*")

    @property
    def scheme(self) -> str:
        return f"euler-maruyama/{self.rule}/eps={self.eps_c!r}/dt_max={self.dt_max!r}"

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in cls.__dataclass_fields__ if k in d})


@dataclass
class SamplePath:
    times: np.ndarray
    states: np.ndarray
    flagged: bool
    path_id: int
    seed: int
    scheme: str
    steps: int

    def to_dict(self):
        return {"path_id": self.path_id, "seed": self.seed, "scheme": self.scheme,
                "flagged": self.flagged, "steps": self.steps, "points": len(self.times)}

    def csv(self) -> str:
        return csv_text(["t", "re", "im"], zip(self.times, self.states.real, self.states.imag))


@dataclass
class PathBundle:
    """End states of many paths; `records[i, k]` is z at record_times[k] (stopped value after τ)."""
    z: np.ndarray
    t: np.ndarray
    flagged: np.ndarray
    stopped: np.ndarray
    steps: np.ndarray
    record_times: np.ndarray | None = None
    records: np.ndarray | None = None
    seed: int = 0
    scheme: str = ""


@dataclass
class SampleSet:
    samples: np.ndarray
    burn_in: float
    thin: float
    seed: int
    scheme: str
    model_hash: str = ""
    path_count: int = 1
    flagged_count: int = 0
    steps: int = 0
    ess: float = float("nan")
    per_path: int = 0
    extra: dict = field(default_factory=dict)

    def meta(self) -> dict:
        return {"burn_in": self.burn_in, "thin": self.thin, "seed": self.seed, "scheme": self.scheme,
                "model_hash": self.model_hash, "path_count": self.path_count,
                "flagged_count": self.flagged_count, "steps": self.steps, "ess": self.ess,
                "per_path": self.per_path, "count": int(self.samples.size), **self.extra}

    def to_dict(self):
        return self.meta()


# ---------------------------------------------------------------- RNG

def normal_block(seed: int, path_ids, block: int, size: int = BLOCK) -> np.ndarray:
    """Standard normals of shape (len(path_ids), size, 2) for one counter block."""
    path_ids = np.asarray(path_ids, dtype=np.uint64)
    out = np.empty((len(path_ids), size, 2))
    ctr = np.array([0, block, 0, 0], dtype=np.uint64)
    for i, pid in enumerate(path_ids):
        bg = np.random.Philox(key=np.array([int(seed) & _U64, int(pid)], dtype=np.uint64), counter=ctr)
        out[i] = np.random.Generator(bg).standard_normal((size, 2))
    return out


def step_size(cfg: SimConfig, z, drift):
    mag = np.abs(drift)
    if cfg.rule == "absolute":
        dt = cfg.eps_c / (1 + mag)
    else:
        dt = cfg.eps_c * np.maximum(np.abs(z), 1.0) / (1 + mag)
    return np.minimum(cfg.dt_max, dt)


# ---------------------------------------------------------------- engine

def _run_chunk(drift, noise_scale, z0, pids, cfg: SimConfig, record_times, stop, keep, max_steps):
    P = len(pids)
    z = np.array(z0, dtype=complex)
    t = np.zeros(P)
    alive = np.ones(P, dtype=bool)
    flagged = np.zeros(P, dtype=bool)
    stopped = np.zeros(P, dtype=bool)
    steps = np.zeros(P, dtype=np.int64)
    R = cfg.blowup_radius
    rt = None if record_times is None else np.asarray(record_times, dtype=float)
    rec = ridx = None
    if rt is not None:
        rec = np.full((P, len(rt)), np.nan + 0j)
        ridx = np.zeros(P, dtype=np.int64)
        while np.any(ridx < len(rt)) and rt[0] <= 0:
            hit = (ridx < len(rt)) & (rt[np.minimum(ridx, len(rt) - 1)] <= 0)
            if not hit.any():
                break
            rec[hit, ridx[hit]] = z[hit]
            ridx[hit] += 1
    hist = [(t.copy(), z.copy())] if keep else None
    if stop is not None:
        s0 = stop(z)
        stopped |= s0
        alive &= ~s0
    alive &= cfg.T > 0
    noise = np.empty((P, BLOCK, 2))
    block = -1
    k = 0
    while True:
        idx = np.flatnonzero(alive)
        if idx.size == 0:
            break
        if k >= max_steps:
            flagged[idx] = True
            break
        if k // BLOCK != block:
            block = k // BLOCK
            noise[idx] = normal_block(cfg.seed, pids[idx], block)
        zi = z[idx]
        b = drift(zi)
        dt = step_size(cfg, zi, b)
        target = np.full(idx.size, float(cfg.T))
        if rt is not None:
            nxt = ridx[idx]
            has = nxt < len(rt)
            target = np.where(has, np.minimum(target, rt[np.minimum(nxt, len(rt) - 1)]), target)
        gap = target - t[idx]
        land = dt >= gap
        dt = np.where(land, gap, dt)
        xi = noise[idx, k % BLOCK]
        dW = np.sqrt(dt) * (xi[:, 0] + 1j * xi[:, 1])
        z_new = zi + b * dt + noise_scale(zi) * dW
        t_new = np.where(land, target, t[idx] + dt)
        z[idx] = z_new
        t[idx] = t_new
        steps[idx] += 1
        bad = ~np.isfinite(z_new) | (np.abs(z_new) >= R)
        if bad.any():
            flagged[idx[bad]] = True
            alive[idx[bad]] = False
        if stop is not None:
            s = stop(z_new) & ~bad
            if s.any():
                stopped[idx[s]] = True
                alive[idx[s]] = False
        if rt is not None:
            fin = idx[land & ~bad & (ridx[idx] < len(rt))]
            if fin.size:
                rec[fin, ridx[fin]] = z[fin]
                ridx[fin] += 1
        done = idx[land & (t_new >= cfg.T)]
        alive[done] = False
        if keep:
            hist.append((t.copy(), z.copy()))
        k += 1
    if rt is not None:
        # stopped paths keep their stopped value at later record times
        for i in np.flatnonzero(stopped):
            rec[i, ridx[i]:] = z[i]
    return z, t, flagged, stopped, steps, rec, hist


def _run(drift, noise_scale, z0, cfg: SimConfig, *, record_times=None, stop=None, keep=False,
         workers=None, max_steps=10 ** 9, first_id=0):
    P = int(cfg.path_count)
    z0 = np.broadcast_to(np.asarray(z0, dtype=complex), (P,)).copy()
    pids = np.arange(first_id, first_id + P, dtype=np.uint64)
    w = min(worker_count(workers), P)
    if keep or w == 1:
        parts = [_run_chunk(drift, noise_scale, z0, pids, cfg, record_times, stop, keep, max_steps)]
    else:
        cuts = np.array_split(np.arange(P), w)
        with ThreadPoolExecutor(max_workers=w) as ex:
            parts = list(ex.map(lambda c: _run_chunk(drift, noise_scale, z0[c], pids[c], cfg,
                                                     record_times, stop, False, max_steps), cuts))
    z = np.concatenate([p[0] for p in parts])
    t = np.concatenate([p[1] for p in parts])
    flagged = np.concatenate([p[2] for p in parts])
    stopped = np.concatenate([p[3] for p in parts])
    steps = np.concatenate([p[4] for p in parts])
    rec = None if record_times is None else np.concatenate([p[5] for p in parts])
    bundle = PathBundle(z=z, t=t, flagged=flagged, stopped=stopped, steps=steps,
                        record_times=None if record_times is None else np.asarray(record_times, float),
                        records=rec, seed=cfg.seed, scheme=cfg.scheme)
    return bundle, parts[0][6]


def _model_fns(model: DynamicsModel | None, sigma=None, drift_fn=None):
    """Drift and noise amplitude; sigma / drift_fn override the model (σ = 0 gives the ODE)."""
    if drift_fn is None:
        if model is None:
            raise ModelError("need a model or a drift function")
        drift_fn = lambda z: eval_drift(model, z)      # noqa: E731
    s = float(model.sigma if sigma is None else sigma)
    if s < 0:
        raise ModelError("sigma must be non-negative")
    return drift_fn, (lambda z: s)


def simulate_path(model: DynamicsModel | None, z0, cfg: SimConfig, path_id: int = 0,
                  max_steps: int = 10 ** 8, *, sigma=None, drift_fn=None) -> SamplePath:
    """One path with every step recorded; truncated and flagged at blowup_radius."""
    one = SimConfig(**{**cfg.to_dict(), "path_count": 1})
    drift, ns = _model_fns(model, sigma, drift_fn)
    b, hist = _run(drift, ns, complex(z0), one, keep=True, max_steps=max_steps, first_id=path_id)
    times = np.array([h[0][0] for h in hist])
    states = np.array([h[1][0] for h in hist])
    keep = np.concatenate([[True], np.diff(times) > 0])
    return SamplePath(times=times[keep], states=states[keep], flagged=bool(b.flagged[0]),
                      path_id=path_id, seed=cfg.seed, scheme=cfg.scheme, steps=int(b.steps[0]))


def simulate_paths(model: DynamicsModel | None, z0, cfg: SimConfig, *, record_times=None,
                   stop_inside: float | None = None, stop_outside: float | None = None,
                   workers: int | None = None, max_steps: int = 10 ** 9,
                   sigma=None, drift_fn=None) -> PathBundle:
    """cfg.path_count paths from z0 (scalar or one value per path).

    stop_inside / stop_outside stop a path once |z| ≤ stop_inside or |z| ≥ stop_outside.
    """
    drift, ns = _model_fns(model, sigma, drift_fn)
    stop = None
    if stop_inside is not None or stop_outside is not None:
        lo = -math.inf if stop_inside is None else stop_inside
        hi = math.inf if stop_outside is None else stop_outside

        def stop(z):
            a = np.abs(z)
            return (a <= lo) | (a >= hi)
    b, _ = _run(drift, ns, z0, cfg, record_times=record_times, stop=stop, workers=workers,
                max_steps=max_steps)
    return b


# ---------------------------------------------------------------- adjoint process

def _adjoint_fns(model: DynamicsModel):
    n, s = model.n, float(model.sigma)

    def drift(z):
        r = np.abs(z)
        return -r ** (-(n - 1)) * (eval_drift(model, z) + s ** 2 * (n + 1) / np.conj(z))

    def scale(z):
        return s * np.abs(z) ** (-(n - 1) / 2)
    return drift, scale


def simulate_adjoint(model: DynamicsModel, z0, gamma: float, cfg: SimConfig,
                     path_id: int = 0) -> tuple[SamplePath, float]:
    """dz* = -|z*|^{-(n-1)}(P + σ²(n+1)/z̄*) dt + σ|z*|^{-(n-1)/2} dB, stopped at |z*| ≤ γ.

    P is the drift polynomial of `model`.  Returns the path and S_γ (inf if censored at T).
    """
    z0 = complex(z0)
    if z0 == 0:
        raise ModelError("the adjoint process is not defined at z = 0")
    if not abs(z0) > gamma > 0:
        raise ModelError("need |z0| > gamma > 0")
    one = SimConfig(**{**cfg.to_dict(), "path_count": 1})
    drift, scale = _adjoint_fns(model)
    b, hist = _run(drift, scale, z0, one, stop=lambda z: np.abs(z) <= gamma, keep=True, first_id=path_id)
    times = np.array([h[0][0] for h in hist])
    states = np.array([h[1][0] for h in hist])
    keep = np.concatenate([[True], np.diff(times) > 0])
    path = SamplePath(times=times[keep], states=states[keep], flagged=bool(b.flagged[0]),
                      path_id=path_id, seed=cfg.seed, scheme=cfg.scheme, steps=int(b.steps[0]))
    return path, (float(b.t[0]) if b.stopped[0] else math.inf)


def adjoint_hitting_times(model: DynamicsModel, z0, gamma: float, cfg: SimConfig,
                          workers: int | None = None) -> np.ndarray:
    """S_γ for cfg.path_count adjoint paths; inf marks censoring at T or a flagged path."""
    z0 = np.asarray(z0, dtype=complex)
    if np.any(z0 == 0):
        raise ModelError("the adjoint process is not defined at z = 0")
    if np.any(np.abs(z0) <= gamma):
        raise ModelError("need |z0| > gamma")
    drift, scale = _adjoint_fns(model)
    b, _ = _run(drift, scale, z0, cfg, stop=lambda z: np.abs(z) <= gamma, workers=workers)
    return np.where(b.stopped, b.t, np.inf)


# ---------------------------------------------------------------- η exit moments

@dataclass
class EtaExitEstimate:
    mean: float
    ci_low: float
    ci_high: float
    se: float
    N: int
    mean_tau: float

    def to_dict(self):
        return asdict(self)


def sample_eta_exit(n: int, sigma: float, interval, eta0: float, p: float, N: int, seed: int,
                    h: float = 0.01) -> EtaExitEstimate:
    """Monte Carlo E e^{pτ} for dη = κη dt + σ dW, κ = (3n+2)/2, τ = exit from interval.

    Steps use the exact Gaussian transition; a Brownian-bridge test catches
    crossings between grid points, and steps are cut by 16 within a few
    standard deviations of either end.
    """
    lo, hi = float(interval[0]), float(interval[1])
    kappa = (3 * n + 2) / 2
    if not lo < hi:
        raise ModelError("empty interval")
    if not p < kappa:
        raise ModelError("p must stay below (3n+2)/2")
    if not lo <= eta0 <= hi:
        raise ModelError("eta0 outside the interval")
    if p == 0 or eta0 in (lo, hi):
        return EtaExitEstimate(1.0, 1.0, 1.0, 0.0, int(N), 0.0)
    rng = np.random.Generator(np.random.Philox(key=np.array([int(seed) & _U64, 0xE7A], dtype=np.uint64)))
    x = np.full(int(N), float(eta0))
    tau = np.zeros(int(N))
    act = np.arange(int(N))
    s2 = sigma ** 2
    while act.size:
        xa = x[act]
        near = np.minimum(xa - lo, hi - xa) < 4 * sigma * math.sqrt(h)
        dt = np.where(near, h / 16, h)
        e = np.exp(kappa * dt)
        sd = sigma * np.sqrt((e * e - 1) / (2 * kappa))
        xn = xa * e + sd * rng.standard_normal(act.size)
        u = rng.random(act.size)
        out = (xn <= lo) | (xn >= hi)
        # bridge crossing probability for each end, endpoints both inside
        pl = np.exp(-2 * np.maximum(xa - lo, 0) * np.maximum(xn - lo, 0) / (s2 * dt))
        ph = np.exp(-2 * np.maximum(hi - xa, 0) * np.maximum(hi - xn, 0) / (s2 * dt))
        cross = out | (u < pl + ph - pl * ph)
        # crossing inside the step: take its midpoint
        tau[act] += np.where(cross, dt / 2, dt)
        x[act] = xn
        act = act[~cross]
    vals = np.exp(p * tau)
    mean = float(vals.mean())
    se = float(vals.std(ddof=1) / math.sqrt(N)) if N > 1 else 0.0
    half = vals[: N // 2]
    se_half = float(half.std(ddof=1) / math.sqrt(half.size)) if half.size > 1 else 0.0
    if N >= 1000 and se > 1.2 * se_half:
        raise ModelError("running mean of e^{pτ} does not settle: CI grows with N")
    return EtaExitEstimate(mean, mean - 1.96 * se, mean + 1.96 * se, se, int(N), float(tau.mean()))


# ---------------------------------------------------------------- deterministic flows

@dataclass
class Trajectory:
    t: np.ndarray
    r: np.ndarray
    theta: np.ndarray
    hp: list                  # (t, r, φ) as mpfr, one per recorded step
    flagged: bool
    halvings: int
    precision: int

    def csv(self) -> str:
        return csv_text(["t", "r", "theta"], zip(self.t, self.r, self.theta))


def _mp(x):
    if isinstance(x, Fraction):
        return gmpy2.mpfr(x.numerator) / gmpy2.mpfr(x.denominator)
    if isinstance(x, str):
        return _mp(Fraction(x))
    return gmpy2.mpfr(x)


def _field(op):
    """(dr/dt, dφ/dt) of the first-order part as one generated function.

    The operator has only a handful of monomials, so a straight-line
    expression avoids most of the interpreter overhead per mpfr operation.
    """
    consts, exprs = {}, []
    for d in (op.part(1, 0), op.part(0, 1)):
        terms = []
        for (a, b), c in sorted(d.items()):
            name = f"k{len(consts)}"
            consts[name] = _mp(c)
            fac = [name]
            if a > 0:
                fac.append(f"r**{a}" if a > 1 else "r")
            elif a < 0:
                fac.append(f"ri**{-a}" if a < -1 else "ri")
            if b > 0:
                fac.append(f"ph**{b}" if b > 1 else "ph")
            terms.append("*".join(fac))
        exprs.append(" + ".join(terms) if terms else "zero")
    src = f"def f(r, ph):\n    ri = 1 / r\n    return ({exprs[0]}), ({exprs[1]})\n"
    scope = {**consts, "zero": gmpy2.mpfr(0)}
    exec(compile(src, "<field>", "exec"), scope)
    return scope["f"]


def _rk4(f, r, ph, h):
    k1 = f(r, ph)
    k2 = f(r + h / 2 * k1[0], ph + h / 2 * k1[1])
    k3 = f(r + h / 2 * k2[0], ph + h / 2 * k2[1])
    k4 = f(r + h * k3[0], ph + h * k3[1])
    return (r + h / 6 * (k1[0] + 2 * k2[0] + 2 * k3[0] + k4[0]),
            ph + h / 6 * (k1[1] + 2 * k2[1] + 2 * k3[1] + k4[1]))


def deterministic_flow(op, start, T: float, dt: float, *, blowup_radius: float = 1e6,
                       tol: float | None = 1e-15, precision: int = 192, record_every: int = 1) -> Trajectory:
    """Classical RK4 for the first-order part of `op` (its ∂_r and ∂_φ terms), σ-terms ignored.

    Arithmetic is carried in `precision`-bit floats, since unstable directions
    amplify rounding like e^{λt}.  Each step of size dt is compared against two
    half steps; if they differ by more than tol (relative per component) the
    step is halved recursively.  The accepted value is the Richardson
    combination of the two.  tol=None takes plain RK4 steps of size dt.
    """
    if not dt > 0 or not T >= 0:
        raise ModelError("need dt > 0 and T >= 0")
    ctx = gmpy2.get_context().copy()
    ctx.precision = precision
    with gmpy2.context(ctx):
        f = _field(op)
        r, ph = _mp(start[0]), _mp(start[1])
        t = gmpy2.mpfr(0)
        Tm = _mp(Fraction(T).limit_denominator(10 ** 12) if isinstance(T, float) else T)
        h0 = _mp(Fraction(dt).limit_denominator(10 ** 12) if isinstance(dt, float) else dt)
        R = gmpy2.mpfr(blowup_radius)
        hp = [(t, r, ph)]
        halvings = 0
        flagged = False

        def rel(a, b):
            s = abs(b)
            return abs(a - b) / s if s > 0 else abs(a - b)

        def advance(r, ph, h, depth):
            nonlocal halvings
            if tol is None:
                return _rk4(f, r, ph, h)
            one = _rk4(f, r, ph, h)
            mid = _rk4(f, r, ph, h / 2)
            two = _rk4(f, mid[0], mid[1], h / 2)
            err = max(rel(one[0], two[0]), rel(one[1], two[1]))
            if err > tol and depth < 40:
                halvings += 1
                r1, p1 = advance(r, ph, h / 2, depth + 1)
                return advance(r1, p1, h / 2, depth + 1)
            return two[0] + (two[0] - one[0]) / 15, two[1] + (two[1] - one[1]) / 15

        k = 0
        while t < Tm:
            h = min(h0, Tm - t)
            r, ph = advance(r, ph, h, 0)
            t = t + h
            k += 1
            if abs(r) >= R or not gmpy2.is_finite(r):
                flagged = True
                hp.append((t, r, ph))
                break
            if k % record_every == 0 or t >= Tm:
                hp.append((t, r, ph))
    tt = np.array([float(x[0]) for x in hp])
    rr = np.array([float(x[1]) for x in hp])
    th = np.array([float(x[2]) for x in hp])
    return Trajectory(t=tt, r=rr, theta=th, hp=hp, flagged=flagged, halvings=halvings, precision=precision)


def operator_drift(op):
    """Cartesian drift z ↦ (f_r + i f_φ) e^{iθ} of the first-order part of a polar operator in (r, θ)."""
    fr = [(a, b, float(c)) for (a, b), c in op.part(1, 0).items()]
    fp = [(a, b, float(c)) for (a, b), c in op.part(0, 1).items()]

    def drift(z):
        r = np.abs(z)
        th = np.angle(z)
        vr = sum(c * r ** a * th ** b for a, b, c in fr) + 0 * r
        vt = sum(c * r ** a * th ** b for a, b, c in fp) + 0 * r
        return (vr + 1j * r * vt) * np.exp(1j * th)
    return drift


def phi_along(traj: Trajectory, chain, m: int) -> np.ndarray:
    """φ_m along a trajectory, evaluated in the trajectory's working precision."""
    ctx = gmpy2.get_context().copy()
    ctx.precision = traj.precision
    out = []
    with gmpy2.context(ctx):
        cs = [_mp(Fraction(c) if isinstance(c, (int, Fraction)) else c) for c in chain.c]
        for _, r, th in traj.hp:
            x = th
            for k in range(3, m + 1):
                x = r * x + cs[k - 3]
            out.append(float(x))
    return np.array(out)


# ---------------------------------------------------------------- files

def write_samples(path: str, z, meta: dict) -> str:
    """Little-endian f64 (re, im) pairs plus a JSON sidecar at path + '.json'."""
    z = np.ascontiguousarray(np.asarray(z, dtype=complex))
    raw = np.empty((z.size, 2), dtype="<f8")
    raw[:, 0] = z.real
    raw[:, 1] = z.imag
    sha = atomic_write(path, raw.tobytes())
    atomic_write(path + ".json", dumps({**meta, "count": int(z.size), "sha256": sha}))
    return sha


def read_samples(path: str) -> tuple[np.ndarray, dict]:
    raw = np.fromfile(path, dtype="<f8").reshape(-1, 2)
    with open(path + ".json") as fh:
        meta = json.load(fh)
    return raw[:, 0] + 1j * raw[:, 1], meta


def sample_set_meta(model: DynamicsModel, cfg: SimConfig) -> dict:
    return {"model_hash": model_hash(model), "seed": cfg.seed, "scheme": cfg.scheme, "config": cfg.to_dict()}
