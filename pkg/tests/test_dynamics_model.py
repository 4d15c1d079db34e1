import cmath
import json
from fractions import Fraction

import numpy as np
import pytest

from stabilyze.dynamics_model import (DynamicsModel, ModelError, PolarOperator, default_J, default_model,
                                      eval_drift, figure1_model, generator_coefficients_exact, load_model,
                                      model_hash, normalize_leading, polar_generator, rotate_to_wedge)


def test_eval_drift_monomial():
    assert eval_drift(default_model(1), 2 + 0j) == 4


def test_eval_drift_origin_is_zero():
    m = DynamicsModel(n=2, f_coeffs={(1, 1): (2, 1), (0, 2): (0, 3)})
    assert eval_drift(m, 0j) == 0


def test_eval_drift_hand_value():
    m = DynamicsModel(n=1, f_coeffs={(0, 1): (3, 0)})
    assert eval_drift(m, 1 + 1j) == pytest.approx(3 - 1j)


@pytest.mark.parametrize("kw, msg", [
    (dict(n=1, a=(0, 0)), "leading"),
    (dict(n=1, sigma=0), "sigma"),
    (dict(n=0), "positive"),
    (dict(n=2, f_coeffs={(2, 1): (1, 0)}), "degree"),
])
def test_model_validation(kw, msg):
    with pytest.raises(ModelError, match=msg):
        DynamicsModel(**kw)


def test_normalize_identity():
    m = default_model(3)
    norm, lam = normalize_leading(m)
    assert lam == 1 and norm == m


def test_normalize_rational_root():
    m = DynamicsModel(n=1, a=(4, 0))
    norm, lam = normalize_leading(m)
    assert lam == Fraction(1, 4)
    assert norm.a == (1, 0)


def test_normalize_complex_root_matches_substitution():
    m = DynamicsModel(n=2, a=(-1, 0), f_coeffs={(1, 1): (0.5, 0.2)})
    norm, lam = normalize_leading(m)
    assert lam == pytest.approx(cmath.exp(-cmath.log(-1) / 2))
    w = 0.7 - 0.3j
    # z = λ w  ⇒  dw/dt = b(λ w)/λ
    assert eval_drift(norm, w) == pytest.approx(eval_drift(m, lam * w) / lam)


def test_generator_n1_terms():
    L = polar_generator(default_model(1, sigma=Fraction(3)))
    assert L.coeff(-1, 0, 2, 0) == Fraction(9, 2)
    assert L.coeff(-3, 0, 0, 2) == Fraction(9, 2)
    assert L.coeff(1, 0, 1, 0) == 1 and L.coeff(0, 1, 0, 1) == 1
    assert L.coeff(-1, 0, 0, 1) == 0


def test_generator_figure1_gammas():
    L = polar_generator(figure1_model())
    assert L.coeff(-1, 0, 0, 1) == 2
    assert L.coeff(-2, 0, 0, 1) == 5


def test_generator_constant_forcing_weight():
    n = 1
    L = polar_generator(DynamicsModel(n=n, f_coeffs={(0, 0): (1, 0)}))
    assert L.coeff(-n, 0, 1, 0) != 0 or L.coeff(-n - 1, 1, 0, 1) != 0
    assert any(a == -n - 1 and j == 1 for (a, b, i, j) in L.terms)


def test_generator_matches_untruncated_coefficients():
    m = DynamicsModel(n=2, f_coeffs={(1, 1): (Fraction(1, 3), Fraction(-1, 2)), (2, 0): (0, 1)})
    L = polar_generator(m)
    r, th = 50.0, 0.05        # Taylor remainder ~ (nθ)^J/J! stays below 1e-12
    cr, ct, crr, ctt = generator_coefficients_exact(m, r, th)
    assert L.coefficient_value(1, 0, r, th) == pytest.approx(cr, rel=1e-10)
    assert L.coefficient_value(0, 1, r, th) == pytest.approx(ct, rel=1e-10)
    assert L.coefficient_value(0, 2, r, th) == pytest.approx(ctt, rel=1e-12)


def test_truncation_order_enforced():
    with pytest.raises(ModelError):
        polar_generator(default_model(4), J=8)
    assert default_J(3) == 9


def test_operator_canonical_form():
    op = PolarOperator({(1, 0, 1, 0): 1, (0, 1, 0, 1): 0}, n=1)
    assert list(op.terms) == [(1, 0, 1, 0)]


def test_model_roundtrip(tmp_path):
    m = figure1_model()
    p = tmp_path / "m.json"
    p.write_text(json.dumps({"n": 3, "F": [{"k": 2, "l": 1, "im": 2}, {"k": 2, "l": 0, "im": 5}]}))
    assert load_model(str(p)) == m
    assert model_hash(load_model(str(p))) == model_hash(m)


def test_rotation_leaves_f0_model_alone():
    assert rotate_to_wedge(default_model(3), 1) == default_model(3)
    m = rotate_to_wedge(figure1_model(), 1)
    z = 1.3 - 0.4j
    rot = np.exp(2j * np.pi / 3)
    assert eval_drift(m, z) == pytest.approx(eval_drift(figure1_model(), rot * z) / rot)
