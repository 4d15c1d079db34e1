import math
from fractions import Fraction

import numpy as np
import pytest
from scipy import stats

from stabilyze.dynamics_model import ModelError, PolarOperator, default_model, figure1_operator
from stabilyze.lyapunov_builder import exit_moment
from stabilyze.operator_algebra import build_chain
from stabilyze.sde_simulator import (SimConfig, adjoint_hitting_times, deterministic_flow, normal_block,
                                     operator_drift, phi_along, read_samples, sample_eta_exit,
                                     simulate_adjoint, simulate_path, simulate_paths, write_samples)


def test_config_validation():
    with pytest.raises(ModelError):
        SimConfig(dt_max=0)
    with pytest.raises(ModelError):
        SimConfig(rule="implicit")
    cfg = SimConfig(seed=5, T=2.0)
    assert SimConfig.from_dict(cfg.to_dict()) == cfg


def test_blowup_is_flagged_not_raised():
    cfg = SimConfig(T=1.0, dt_max=1e-3, eps_c=0.05, blowup_radius=1e3)
    p = simulate_path(default_model(1), 2.0, cfg, sigma=0)
    assert p.flagged
    assert p.times[-1] < 0.5 + 0.01


def test_stable_figure1_curves_track_the_flow():
    op = figure1_operator()
    drift = operator_drift(op)
    r0 = 5.0
    ends, flows = [], []
    for v in (1e-6, -1e-6):
        th = (v - r0 / 2 - 1) / r0 ** 2
        p = simulate_path(None, r0 * np.exp(1j * th), SimConfig(T=2.0, dt_max=1e-3, eps_c=1e-3),
                          sigma=0, drift_fn=drift)
        tr = deterministic_flow(op, (r0, th), 2.0, 1e-2, tol=None)
        assert abs(np.angle(p.states[-1]) - tr.theta[-1]) < 1e-3
        assert abs(abs(p.states[-1]) / tr.r[-1] - 1) < 1e-3
        ends.append(np.angle(p.states[-1]))
        flows.append(tr.theta[-1])
    # the 2e-6 offset in φ4 is carried along, not lost in the step error
    assert (ends[0] - ends[1]) == pytest.approx(flows[0] - flows[1], rel=0.05)


def test_zero_drift_increments_gaussian():
    cfg = SimConfig(T=1.0, dt_max=0.01, path_count=2000, seed=7)
    b = simulate_paths(None, 0j, cfg, sigma=1.5, drift_fn=lambda z: 0 * z, record_times=[0.5, 1.0])
    x = np.concatenate([b.records[:, 0].real, b.records[:, 0].imag]) / (1.5 * math.sqrt(0.5))
    edges = stats.norm.ppf(np.linspace(0, 1, 11))
    counts = np.histogram(x, edges)[0]
    assert stats.chisquare(counts).pvalue > 0.01


def test_results_independent_of_workers_and_batching():
    m = default_model(1)
    cfg = SimConfig(T=0.5, path_count=16, seed=3)
    b1 = simulate_paths(m, 1 + 1j, cfg, workers=1)
    b4 = simulate_paths(m, 1 + 1j, cfg, workers=4)
    assert np.array_equal(b1.z, b4.z)
    single = simulate_path(m, 1 + 1j, cfg, path_id=5)
    assert single.states[-1] == b1.z[5]


def test_normal_block_counter_addressing():
    a = normal_block(9, [0, 1], 3)
    b = normal_block(9, [1], 3)
    assert np.array_equal(a[1], b[0])
    assert not np.array_equal(a[0], normal_block(9, [0], 4)[0])


def test_record_times_are_hit_exactly():
    cfg = SimConfig(T=1.0, dt_max=0.03, path_count=4, seed=1)
    p = simulate_path(default_model(2), 0.3, cfg)
    for t in (0.03, 0.3, 1.0):
        assert np.any(np.isclose(p.times, t, atol=1e-12, rtol=0))


def test_adjoint_n1_drift_and_hitting():
    m = default_model(1)
    with pytest.raises(ModelError):
        simulate_adjoint(m, 0j, 1.0, SimConfig())
    cfg = SimConfig(T=1.0, dt_max=1e-2, rule="relative", eps_c=0.05, path_count=500, seed=2)
    frac = [np.mean(adjoint_hitting_times(m, k * 8.0, 8.0, cfg) <= 1.0) for k in (2, 10, 100)]
    assert min(frac) >= 0.95
    longer = SimConfig(**{**cfg.to_dict(), "T": 4.0})
    cens = np.mean(np.isinf(adjoint_hitting_times(m, 100.0, 1.0, longer)))
    first = np.mean(np.isinf(adjoint_hitting_times(m, 100.0, 1.0, SimConfig(**{**cfg.to_dict(), "T": 0.5}))))
    assert cens <= first


def test_eta_exit_trivial_cases():
    assert sample_eta_exit(1, 1.0, (-3, 3), 0.0, 0.0, 100, seed=0).mean == 1.0
    assert sample_eta_exit(1, 1.0, (-3, 3), 3.0, 1.0, 100, seed=0).mean == 1.0
    with pytest.raises(ModelError):
        sample_eta_exit(1, 1.0, (-3, 3), 0.0, 3.0, 100, seed=0)


def test_eta_exit_small_run_matches_closed_form():
    est = sample_eta_exit(1, 1.0, (-3, 3), 1.0, 1.0, 50_000, seed=4)
    u = float(exit_moment(1, 1, 1.0, (-3, 3))(1.0))
    assert abs(est.mean - u) < 4 * est.se + 5e-3 * u


def test_deterministic_flow_unstable_curve_short():
    op = figure1_operator()
    ch = build_chain(op, 3)
    r0 = Fraction(2)
    tr = deterministic_flow(op, (r0, -1 / (2 * r0) - 1 / r0 ** 2), 1.0, 1e-3)
    assert np.max(np.abs(phi_along(tr, ch, 4))) < 1e-12
    assert tr.r[-1] == pytest.approx(2 * math.e, rel=1e-12)


def test_T1_flow_radial_sign():
    op = build_chain(figure1_operator(), figure1_operator().n).asymptotic_ops["T1"]
    tr = deterministic_flow(op, (10, 0), 0.5, 1e-2)
    assert tr.r[-1] == pytest.approx(10 * math.exp(0.5), rel=1e-12)
    assert np.all(tr.theta == 0)
    tr = deterministic_flow(op, (10, 0.1), 0.5, 1e-2)
    assert np.all(np.diff(tr.theta) > 0)
    with pytest.raises(ModelError):
        deterministic_flow(op, (10, 0.1), 1.0, 0.0)


def test_flow_flags_blowup():
    op = PolarOperator({(2, 0, 1, 0): 1}, n=1)
    tr = deterministic_flow(op, (1, 0), 2.0, 1e-3, blowup_radius=100, tol=None)
    assert tr.flagged and tr.t[-1] <= 0.995


def test_sample_file_roundtrip(tmp_path):
    z = np.array([1 + 2j, -0.5j, 3.0])
    path = str(tmp_path / "s.bin")
    write_samples(path, z, {"seed": 1, "n": 1})
    z2, meta = read_samples(path)
    assert np.array_equal(z, z2) and meta["seed"] == 1
