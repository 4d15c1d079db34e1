import math

import numpy as np
import pytest

from stabilyze.dynamics_model import ModelError, default_model, figure1_model, polar_generator
from stabilyze.lyapunov_builder import build_lyapunov, inner_flux_cap
from stabilyze.verifier import (abs_function, check_dynkin, check_flux_signs, check_local_lyapunov,
                                check_lyapunov_pair, check_symmetry, square_function, verify_all)


@pytest.fixture(scope="module")
def psis():
    return {n: build_lyapunov(default_model(n)) for n in (1, 3)}


@pytest.mark.parametrize("n", [1, 3])
def test_local_check_clean(psis, n):
    loc = check_local_lyapunov(psis[n], r_max=1e5, n_r=30, n_c=12)
    assert loc["violations"] == []
    assert all(row["C"] > 0 and math.isfinite(row["D"]) for row in loc["regions"])
    assert loc["pair"]["delta"] > 0 and loc["pair"]["m"] > 0


def test_local_check_needs_model_and_range(psis):
    psi = psis[1]
    with pytest.raises(ModelError):
        check_local_lyapunov(psi, r_max=psi.params.r_star / 2)


def test_generator_is_linear():
    op = polar_generator(default_model(2))
    r, th = np.array([3.0, 40.0]), np.array([0.01, -0.2])
    parts = [np.array([1.0, -2.0]), np.array([0.5, 3.0]), np.array([2.0, 1.0]),
             np.array([-1.0, 0.0]), np.array([4.0, 1.5])]
    one = op.apply(r, th, *parts)
    two = op.apply(r, th, *[2 * x for x in parts])
    assert np.allclose(two, 2 * one, rtol=1e-14, atol=0)


@pytest.mark.parametrize("n", [1, 3])
def test_flux_jumps_nonpositive(psis, n):
    for method in ("analytic", "stencil"):
        rep = check_flux_signs(psis[n], 50, method=method)
        assert rep["violations"] == []
        assert all(row["sign"] == "nonpositive" for row in rep["table"])


def test_flux_violation_when_inner_h_too_large():
    m = default_model(2)
    psi = build_lyapunov(m)
    top = psi.top
    cap = inner_flux_cap(psi.exponents, float(psi.coefficients.d_plus[(top, top)]),
                         psi.exit_moments[top], psi.params)
    bad = build_lyapunov(m, h=2 * cap)
    assert check_flux_signs(bad, 100)["violations"]


def test_zero_forcing_mirrors_sides(psis):
    psi = psis[3]
    lo, hi = psi.params.r_star, 1e3 * psi.params.r_star
    for pair in psi.atlas.boundary_pairs():
        pts = [x for x in psi.atlas.boundary_samples(pair, 10, (lo, hi)) if x[2] == "+"]
        r = np.array([x[0] for x in pts])
        th = np.array([x[1] for x in pts])
        up, down = psi.piece(pair[0], 1, r, th), psi.piece(pair[0], -1, r, -th)
        assert np.allclose(up[0], down[0], rtol=1e-12, atol=0)
        assert np.allclose(up[2], -down[2], rtol=1e-10, atol=0)


def test_symmetry_residual(psis):
    for psi in (psis[1], psis[3], build_lyapunov(figure1_model())):
        rep = check_symmetry(psi)
        assert rep["violations"] == [] and rep["residual"] < 1e-10


def test_dynkin_abs_matches_local_time():
    rep = check_dynkin(abs_function(), t_grid=(0.25, 0.5), N=20000, seed=1)
    assert rep["sign_ok"] and rep["monotone"] and rep["violations"] == []
    for row in rep["rows"]:
        exact = math.sqrt(2 * row["t"] / math.pi)
        assert abs(row["flux"] - exact) < 4 * row["se"] + 5e-3


def test_dynkin_smooth_function_has_no_flux():
    rep = check_dynkin(square_function(), t_grid=(0.25, 0.5), N=20000, seed=1)
    assert rep["sign_ok"] and rep["violations"] == []


def test_lyapunov_pair_short_time():
    psi = build_lyapunov(default_model(1))
    z0 = 1.5e3 * np.exp(0.3j)
    rep = check_lyapunov_pair(psi, default_model(1), [z0], t_grid=(1e-3,), N=400, seed=3)
    row = rep["rows"][0]
    assert row["pass"] and rep["violations"] == []
    # the z² drift is already strong at this radius, so E Ψ falls well below Ψ(z0)
    assert row["mean_psi"] < row["psi0"]


def test_verify_all_report(psis):
    rep = verify_all(psis[1], r_max=1e4, samples_per_boundary=20)
    assert rep.ok
    assert {"local_lyapunov", "flux_signs"} <= set(rep.sections)
