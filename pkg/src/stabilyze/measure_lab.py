"""Stationary sampling and the estimators built on it: radial tail index,
moment frontier and the scaled density on an annulus."""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .dynamics_model import DynamicsModel, ModelError, model_hash
from .sde_simulator import SampleSet, SimConfig, simulate_paths
from .serialize import csv_text

ESS_CAP = 10.0          # |z| ∧ 10 is the ESS observable
MIN_ANNULUS = 200
MIN_TAIL_ESS = 1e5


class MeasureError(ModelError):
    pass


# ---------------------------------------------------------------- sampling

def integrated_autocorr(x: np.ndarray, c: float = 5.0) -> float:
    """Integrated autocorrelation time with Sokal's automatic window."""
    x = np.asarray(x, dtype=float)
    n = x.size
    if n < 4:
        return 1.0
    y = x - x.mean()
    var = float(np.dot(y, y)) / n
    if var == 0:
        return 1.0
    m = 1 << (2 * n - 1).bit_length()
    f = np.fft.rfft(y, m)
    acf = np.fft.irfft(f * np.conj(f), m)[:n] / (n * var)
    tau = 2 * np.cumsum(acf) - 1
    for w in range(1, n):
        if w >= c * tau[w]:
            return float(max(tau[w], 1.0))
    return float(max(tau[-1], 1.0))


def effective_size(chains: np.ndarray) -> float:
    """Σ over chains of length / τ_int, using |z| ∧ 10."""
    obs = np.minimum(np.abs(chains), ESS_CAP)
    return float(sum(row.size / integrated_autocorr(row) for row in obs))


def invariant_samples(model: DynamicsModel, cfg: SimConfig, burn_in: float, thinning: float,
                      *, z0=0j, workers: int | None = None) -> SampleSet:
    """cfg.path_count chains on [0, cfg.T], recorded every `thinning` after `burn_in`.

    Samples are stored chain by chain, so order within a chain is time order.
    """
    if not model.sigma > 0:
        raise MeasureError("stationary sampling needs σ > 0")
    if not 0 <= burn_in < cfg.T:
        raise MeasureError("burn_in must lie in [0, T)")
    if not thinning > 0:
        raise MeasureError("thinning must be positive")
    k = int(math.floor((cfg.T - burn_in) / thinning + 1e-9))
    if k < 1:
        raise MeasureError("no record times after burn-in; lengthen T")
    rt = burn_in + thinning * np.arange(1, k + 1)
    b = simulate_paths(model, z0, cfg, record_times=rt, workers=workers)
    nflag = int(b.flagged.sum())
    if nflag > 0.01 * cfg.path_count:
        raise MeasureError(f"{nflag} of {cfg.path_count} paths hit the explosion guard; "
                           "tighten eps_c or raise blowup_radius")
    chains = b.records[~b.flagged]
    return SampleSet(samples=chains.ravel(), burn_in=float(burn_in), thin=float(thinning), seed=cfg.seed,
                     scheme=cfg.scheme, model_hash=model_hash(model), path_count=int(cfg.path_count),
                     flagged_count=nflag, steps=int(b.steps.sum()), ess=effective_size(chains),
                     per_path=k, extra={"n": model.n, "sigma": float(model.sigma), "T": float(cfg.T)})


def _unpack(samples, n=None):
    if isinstance(samples, SampleSet):
        z = np.asarray(samples.samples)
        return z, (n if n is not None else samples.extra.get("n")), samples.ess
    z = np.asarray(samples)
    return z, n, float(z.size)


# ---------------------------------------------------------------- tail index

@dataclass
class TailReport:
    k_grid: list
    hill_estimates: list
    k: int
    estimate: float
    ci: tuple
    target: float
    tolerance: float
    verdict: str
    plateau: tuple
    ess: float
    count: int

    def to_dict(self):
        return {"k_grid": self.k_grid, "hill_estimates": self.hill_estimates, "k": self.k,
                "estimate": self.estimate, "ci": list(self.ci), "target": self.target,
                "tolerance": self.tolerance, "verdict": self.verdict, "plateau": list(self.plateau),
                "ess": self.ess, "count": self.count}


def hill(x: np.ndarray, k_grid) -> np.ndarray:
    """Hill index estimates 1/H_k on the k largest values of x."""
    s = np.sort(np.asarray(x, dtype=float))[::-1]
    logs = np.log(s)
    csum = np.cumsum(logs)
    ks = np.asarray(k_grid, dtype=int)
    if ks.min() < 2 or ks.max() >= s.size:
        raise MeasureError("k grid must satisfy 2 ≤ k < sample count")
    H = csum[ks - 1] / ks - logs[ks]
    return 1.0 / H


def default_k_grid(count: int, points: int = 25) -> list:
    """Log grid from √count to count/20; below √count the Hill curve is mostly noise."""
    lo = max(50, int(math.sqrt(count)))
    hi = max(lo + points, count // 20)
    return sorted({int(k) for k in np.geomspace(lo, hi, points)})


def tail_exponent(samples, k_grid=None, *, n: int | None = None, tolerance: float | None = None,
                  window: int = 5, plateau_tol: float = 0.1, min_ess: float = MIN_TAIL_ESS) -> TailReport:
    """Hill estimator of the radial tail index, compared with 2n.

    k comes from the flattest run of `window` consecutive grid points (smallest
    relative spread); no run within plateau_tol means the tail is not resolved.
    The normal CI α/√k is widened by √(count/ESS) for serial correlation.
    """
    z, n, ess = _unpack(samples, n)
    r = np.abs(z)
    if ess < min_ess:
        raise MeasureError(f"effective sample size {ess:.3g} < {min_ess:.3g}; run longer")
    k_grid = list(k_grid) if k_grid is not None else default_k_grid(r.size)
    if len(k_grid) < window:
        raise MeasureError("k grid shorter than the plateau window")
    est = hill(r, k_grid)
    best, spread = None, math.inf
    for i in range(len(k_grid) - window + 1):
        seg = est[i:i + window]
        sp = float((seg.max() - seg.min()) / seg.mean())
        if sp < spread:
            best, spread = i, sp
    if spread > plateau_tol:
        raise MeasureError(f"no Hill plateau (best relative spread {spread:.3g}); run longer")
    mid = best + window // 2
    k, a = int(k_grid[mid]), float(est[mid])
    half = 1.96 * a / math.sqrt(k) * math.sqrt(max(1.0, r.size / ess))
    target = float(2 * n) if n is not None else math.nan
    tol = tolerance if tolerance is not None else (max(0.3, n / 4) if n is not None else 0.0)
    verdict = "pass" if abs(a - target) <= half + tol else "fail"
    return TailReport(k_grid=[int(v) for v in k_grid], hill_estimates=[float(v) for v in est], k=k,
                      estimate=a, ci=(a - half, a + half), target=target, tolerance=float(tol),
                      verdict=verdict, plateau=(int(k_grid[best]), int(k_grid[best + window - 1])),
                      ess=float(ess), count=int(r.size))


# ---------------------------------------------------------------- moments

def maxima_slope(lz: np.ndarray, sizes: int = 12) -> float:
    """Growth rate of log max|z| with the window length m.

    The mean over disjoint windows of the log window-max is regressed on log m;
    for a tail index α the slope is 1/α.  Averaging over windows is what makes
    this usable where a single running max is dominated by one excursion.
    """
    N = lz.size
    if N < 10000:
        return float("nan")
    ms = np.unique(np.geomspace(max(100, N // 1000), N // 10, sizes).astype(int))
    means = [lz[: (N // m) * m].reshape(-1, m).max(axis=1).mean() for m in ms]
    return float(np.polyfit(np.log(ms), means, 1)[0])


def moment_curve(samples, gamma_list, *, checkpoints: int = 40) -> dict:
    """Running means of (1+|z|)^γ and a stabilizing / jump-dominated call per γ.

    Jump-dominated: the largest single term exceeds half the sum, or the maxima
    of (1+|z|)^γ grow at least linearly in the window length (slope ≥ 1), the
    signature of an infinite mean.
    """
    z, n, _ = _unpack(samples)
    lr = np.log1p(np.abs(z))
    N = lr.size
    ks = np.unique(np.geomspace(max(10, N // 1000), N, checkpoints).astype(int))
    # the slope for (1+|z|)^γ is γ times the slope for (1+|z|)
    base_slope = maxima_slope(np.log(np.maximum(np.abs(z), 1e-300)))
    rows = []
    for g in gamma_list:
        g = float(g)
        if g == 0:
            vals = np.ones(N)
        else:
            vals = np.exp(g * (lr - lr.max()))      # rescaled to avoid overflow
        csum = np.cumsum(vals)
        scale = 1.0 if g == 0 else math.exp(g * lr.max())
        running = csum[ks - 1] / ks * scale
        ratio = float(vals.max() / csum[-1])
        slope = g * base_slope
        cls = "jump-dominated" if (ratio > 0.5 or slope >= 1.0) else "stabilizing"
        rows.append({"gamma": g, "mean": float(csum[-1] / N * scale), "dominance_ratio": ratio,
                     "runmax_slope": slope, "classification": cls,
                     "running_mean": [float(v) for v in running]})
    order = sorted(rows, key=lambda r: r["gamma"])
    seen_jump, monotone = False, True
    for r in order:
        if r["classification"] == "jump-dominated":
            seen_jump = True
        elif seen_jump:
            monotone = False
    stab = [r["gamma"] for r in order if r["classification"] == "stabilizing"]
    jump = [r["gamma"] for r in order if r["classification"] == "jump-dominated"]
    frontier = (max(stab) + min(jump)) / 2 if stab and jump else math.nan
    return {"rows": rows, "checkpoints": [int(k) for k in ks], "monotone": monotone,
            "frontier": frontier, "target": float(2 * n) if n is not None else math.nan}


# ---------------------------------------------------------------- density

@dataclass
class DensityReport:
    R1: float
    R2: float
    n: int
    r_edges: np.ndarray
    theta_edges: np.ndarray
    counts: np.ndarray
    rho_hat: np.ndarray
    c_hat: np.ndarray
    total: int
    mass_error: float
    min_c_hat: float
    min_bin: tuple
    lower_cb: float
    boot: int
    theta_ratio: np.ndarray
    extra: dict = field(default_factory=dict)

    def csv(self) -> str:
        rows = []
        for i in range(self.counts.shape[0]):
            for j in range(self.counts.shape[1]):
                rows.append([i, j, int(self.counts[i, j]), float(self.rho_hat[i, j]), float(self.c_hat[i, j])])
        return csv_text(["r_bin", "theta_bin", "count", "rho_hat", "c_hat"], rows)

    def to_dict(self):
        return {"annulus": [self.R1, self.R2], "n": self.n, "r_edges": self.r_edges.tolist(),
                "theta_edges": self.theta_edges.tolist(), "total": self.total,
                "in_annulus": int(self.counts.sum()), "mass_error": self.mass_error,
                "min_c_hat": self.min_c_hat, "min_bin": list(self.min_bin), "lower_cb": self.lower_cb,
                "bootstrap": self.boot, "theta_ratio": self.theta_ratio.tolist(), **self.extra}


def _weights(r_edges, n):
    """Bin area per unit angle and the area-average of r^{2n+2} in each radial shell."""
    lo, hi = r_edges[:-1], r_edges[1:]
    area = (hi ** 2 - lo ** 2) / 2
    e = 2 * n + 4
    avg = (hi ** e - lo ** e) / e / area
    return area, avg


def density_annulus(samples, R1: float, R2: float, n_r: int = 8, n_theta: int = 16, *,
                    n: int | None = None, boot: int = 200, seed: int = 0, level: float = 0.05,
                    block: int | None = None) -> DensityReport:
    """ρ̂ on (log r, θ) bins of R1 ≤ |z| < R2 and ĉ = |z|^{2n+2} ρ̂.

    ĉ uses the area average of |z|^{2n+2} over each bin, which is exact for a
    density constant on the bin.  The lower bound on min ĉ is the `level`
    quantile of a block bootstrap (block length ≈ count/ESS).
    """
    z, n, ess = _unpack(samples, n)
    if n is None:
        raise MeasureError("density scaling needs the degree n")
    if not 0 < R1 < R2:
        raise MeasureError("need 0 < R1 < R2")
    N = z.size
    r = np.abs(z)
    th = np.angle(z)
    r_edges = np.geomspace(R1, R2, n_r + 1)
    t_edges = np.linspace(-math.pi, math.pi, n_theta + 1)
    inside = (r >= R1) & (r < R2)
    if inside.sum() < MIN_ANNULUS:
        raise MeasureError(f"only {int(inside.sum())} samples in the annulus (need {MIN_ANNULUS}); run longer")
    ri = np.clip(np.searchsorted(r_edges, r[inside], side="right") - 1, 0, n_r - 1)
    ti = np.clip(np.searchsorted(t_edges, th[inside], side="right") - 1, 0, n_theta - 1)
    flat = ri * n_theta + ti
    counts = np.bincount(flat, minlength=n_r * n_theta).reshape(n_r, n_theta)
    area_r, avg = _weights(r_edges, n)
    area = area_r[:, None] * (t_edges[1] - t_edges[0])
    rho = counts / (N * area)
    c_hat = rho * avg[:, None]
    mass_error = abs(float((rho * area).sum()) - inside.sum() / N)
    if mass_error > 1e-12:
        raise MeasureError(f"histogram mass not conserved ({mass_error:.2e})")
    mi = np.unravel_index(int(np.argmin(c_hat)), c_hat.shape)

    L = block or max(1, int(round(N / max(ess, 1.0))))
    blocks = -(-N // L)
    blk = np.flatnonzero(inside) // L
    sizes = np.bincount(np.arange(N) // L, minlength=blocks)
    rng = np.random.Generator(np.random.Philox(key=np.array([seed, 0xB007], dtype=np.uint64)))
    mins = np.empty(boot)
    for b in range(boot):
        w = np.bincount(rng.integers(0, blocks, blocks), minlength=blocks)
        tot = float(np.dot(w, sizes))
        cb = np.bincount(flat, weights=w[blk], minlength=n_r * n_theta).reshape(n_r, n_theta)
        mins[b] = float((cb / (tot * area) * avg[:, None]).min())
    lower = float(np.quantile(mins, level))
    row_min = counts.min(axis=1)
    ratio = np.where(row_min > 0, counts.max(axis=1) / np.maximum(row_min, 1), np.inf)
    return DensityReport(R1=float(R1), R2=float(R2), n=int(n), r_edges=r_edges, theta_edges=t_edges,
                         counts=counts, rho_hat=rho, c_hat=c_hat, total=int(N), mass_error=mass_error,
                         min_c_hat=float(c_hat[mi]), min_bin=(int(mi[0]), int(mi[1])), lower_cb=lower,
                         boot=int(boot), theta_ratio=ratio, extra={"block": L, "level": level})
