import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from clustmd.dataset import ColumnSpec
from clustmd.kernels import build_layout
from clustmd.params import (ALL_MODELS, CovModel, ModelParams, count_free_parameters,
                            covariance_parameter_count, enforce_identifiability, sigma_diagonal, validate)
from clustmd.simulate import shipped_spec

LAYOUT = build_layout([ColumnSpec("x", "continuous"), ColumnSpec("o", "ordinal", 3),
                       ColumnSpec("n1", "nominal", 3), ColumnSpec("n2", "nominal", 4)])  # C=1, O=1, P=7
CONT5 = build_layout([ColumnSpec(f"x{k}", "continuous") for k in range(5)])


def _params(model, G, rng, layout=LAYOUT):
    P = layout.P
    pi = rng.dirichlet(np.ones(G))
    a = np.exp(rng.normal(0, 0.3, (G, P)))
    if layout.CO:
        a[:, :layout.CO] /= np.exp(np.log(a[:, :layout.CO]).mean(1))[:, None]
    lt = rng.uniform(0.2, 2, G) if layout.has_nominal else None
    return ModelParams(model, pi, rng.normal(size=(G, P)), rng.uniform(0.2, 2, G), lt, a)


def test_sigma_diagonal_examples():
    p = enforce_identifiability(ModelParams("EII", [0.5, 0.5], np.zeros((2, 7)), [1.7, 1.7], [3.0, 3.0],
                                            np.ones((2, 7))), LAYOUT)
    np.testing.assert_array_equal(sigma_diagonal(p, 1, LAYOUT), [1.7, 1.7, 1, 1, 1, 1, 1])
    p = ModelParams("VVI", [0.5, 0.5], np.zeros((2, 7)), [2.0, 2.0], [0.5, 0.5], np.ones((2, 7)))
    np.testing.assert_array_equal(sigma_diagonal(p, 0, LAYOUT), [2, 2, 0.5, 0.5, 0.5, 0.5, 0.5])
    p = ModelParams("EEI", [0.3, 0.7], np.zeros((2, 5)), [1.2, 1.2], None,
                    np.tile([2.0, 0.5, 1.0, 4.0, 0.25], (2, 1)))
    np.testing.assert_array_equal(sigma_diagonal(p, 0, CONT5), sigma_diagonal(p, 1, CONT5))


def test_enforce_examples():
    rng = np.random.default_rng(0)
    one = enforce_identifiability(_params(CovModel.VVI, 1, rng), LAYOUT)
    np.testing.assert_allclose(one.mu[:, LAYOUT.CO:], 0, atol=1e-15)
    assert one.lam_tilde.tolist() == [1.0]
    p = ModelParams("VII", [0.5, 0.5], np.zeros((2, 7)), [1, 1], [2, 2], np.ones((2, 7)))
    assert enforce_identifiability(p, LAYOUT).lam_tilde.tolist() == [0.5, 0.5]
    a = np.ones((2, 7))
    a[:, 2] = [0.4, 1.6]
    p = ModelParams("EVI", [0.5, 0.5], np.zeros((2, 7)), [1, 1], [1, 1], a)
    np.testing.assert_allclose(enforce_identifiability(p, LAYOUT).a[:, 2], [0.2, 0.8], rtol=1e-15)


def _constraints_hold(p, layout, tol=1e-12):
    CO = layout.CO
    assert np.all(np.abs(p.pi @ p.mu[:, CO:]) < tol)
    m = p.model
    if m.nominal_volume_varies:
        assert abs(p.lam_tilde.sum() - 1) < tol
    else:
        assert np.all(p.lam_tilde == 1)
    if m.nominal_shape_varies:
        assert np.all(np.abs(p.a[:, CO:].sum(0) - 1) < tol)
    else:
        assert np.all(p.a[:, CO:] == 1)


@settings(max_examples=150, deadline=None)
@given(st.sampled_from(ALL_MODELS), st.integers(1, 4), st.integers(0, 2 ** 32 - 1))
def test_enforce_idempotent_and_leaves_co_block(model, G, seed):
    p = _params(model, G, np.random.default_rng(seed))
    once = enforce_identifiability(p, LAYOUT)
    twice = enforce_identifiability(once, LAYOUT)
    _constraints_hold(once, LAYOUT)
    for f in ("pi", "mu", "lam", "lam_tilde", "a"):
        np.testing.assert_array_equal(getattr(once, f), getattr(twice, f))
    co = LAYOUT.CO
    np.testing.assert_array_equal(p.variances(LAYOUT)[:, :co], once.variances(LAYOUT)[:, :co])
    np.testing.assert_array_equal(p.mu[:, :co], once.mu[:, :co])
    validate(once, LAYOUT)


def test_count_examples():
    assert covariance_parameter_count("VVI", 3, CONT5) == 3 * 6
    assert covariance_parameter_count("VII", 3, LAYOUT) == 5
    assert count_free_parameters("EII", 1, CONT5) == 6


def _published_counts(model, G, C, O, P, nominal):
    """Covariance parameter counts transcribed from the published table of the six structures."""
    if not nominal:
        return {"EII": 1, "VII": G, "EEI": P + 1, "VEI": P + G, "EVI": G * P + 1, "VVI": G * P + G}[model]
    return {"EII": 1, "VII": 2 * G - 1, "EEI": C + O, "VEI": 2 * G + C + O - 2,
            "EVI": G * (P - 2) + C + O - P + 2, "VVI": P * (G - 1) + O}[model]


@pytest.mark.parametrize("G", [1, 2, 3, 4])
@pytest.mark.parametrize("model", [m.value for m in ALL_MODELS])
def test_counts_match_hand_count(model, G):
    lay = build_layout(shipped_spec().schema)
    assert covariance_parameter_count(model, G, lay) == _published_counts(model, G, 4, 3, 14, True)
    assert covariance_parameter_count(model, G, CONT5) == _published_counts(model, G, 5, 0, 5, False)
    total = (G - 1) + G * 7 + (G - 1) * 7 + _published_counts(model, G, 4, 3, 14, True)
    assert count_free_parameters(model, G, lay) == total


def _lattice_holds(G, lay):
    nu = {m: count_free_parameters(m, G, lay) for m in ALL_MODELS}
    E = CovModel
    return nu[E.EII] <= nu[E.VII] <= nu[E.VVI] and nu[E.EEI] <= nu[E.VEI] <= nu[E.VVI]


@settings(max_examples=150, deadline=None)
@given(st.integers(1, 8), st.integers(0, 4), st.integers(0, 4), st.lists(st.integers(3, 6), max_size=3))
def test_model_lattice(G, C, O, nom):
    cols = [ColumnSpec(f"c{k}", "continuous") for k in range(C)]
    cols += [ColumnSpec(f"o{k}", "ordinal", 3) for k in range(O)]
    cols += [ColumnSpec(f"n{k}", "nominal", K) for k, K in enumerate(nom)]
    if not cols:
        return
    lay = build_layout(cols)
    # The published nominal-column counts are not ordered at G=1, nor for a
    # lone 3-level nominal variable; everywhere else the lattice holds.
    if lay.has_nominal and (G == 1 or lay.P == 2):
        return
    assert _lattice_holds(G, lay)


def test_model_lattice_published_exception():
    lay = build_layout([ColumnSpec("x", "continuous"), ColumnSpec("n", "nominal", 3)])
    assert covariance_parameter_count("VVI", 1, lay) == 0
    assert covariance_parameter_count("EEI", 1, lay) == 1
    assert not _lattice_holds(1, lay) and _lattice_holds(2, lay)


def test_validate_rejects():
    rng = np.random.default_rng(1)
    good = enforce_identifiability(_params(CovModel.VVI, 2, rng), LAYOUT)
    validate(good, LAYOUT)
    from dataclasses import replace
    with pytest.raises(ValueError):
        validate(replace(good, lam=np.array([1.0, -1.0])), LAYOUT)
    with pytest.raises(ValueError):
        validate(replace(good, pi=np.array([0.6, 0.6])), LAYOUT)
    bad_a = np.array(good.a)
    bad_a[0, 0] *= 2
    with pytest.raises(ValueError):
        validate(replace(good, a=bad_a), LAYOUT)
    with pytest.raises(ValueError):
        validate(replace(good, mu=good.mu + 1), LAYOUT)


def test_serialization_round_trip():
    p = enforce_identifiability(_params(CovModel.EVI, 3, np.random.default_rng(2)), LAYOUT)
    d = p.to_dict(LAYOUT)
    assert len(d["sigma_diag"]) == 3 and len(d["sigma_diag"][0]) == 7
    back = ModelParams.from_dict(d)
    np.testing.assert_array_equal(back.flatten(), p.flatten())
    flat = ModelParams.unflatten("EVI", p.flatten(), 3, 7, True)
    np.testing.assert_array_equal(flat.a, p.a)
    assert len(p.flat_names()) == p.flatten().size
