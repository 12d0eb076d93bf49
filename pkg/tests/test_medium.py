import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from irwri.medium import (ActiveSet, Bounds, DomainError, OptimizationModel, PhysicalModel, PhysicalRanges,
                          from_optimization, make_bounds, read_model, stiffness_to_compliance, to_compliance,
                          to_optimization, to_stiffness, write_model)


def test_conversion_example_values():
    pm = PhysicalModel.homogeneous((1, 1), 3.0, 0.05, 0.05)
    m = to_optimization(pm)
    assert m.m_v0[0] == pytest.approx(1 / 9)
    assert m.m_eps[0] == pytest.approx(1.1)
    assert m.m_delta[0] == pytest.approx(np.sqrt(1.1))
    iso = to_optimization(PhysicalModel.homogeneous((2, 2), 2.0))
    np.testing.assert_allclose(iso.m_eps, 1.0)
    np.testing.assert_allclose(iso.m_delta, 1.0)


def test_stiffness_example():
    pm = PhysicalModel.homogeneous((1, 1), 3.0, 0.1, 0.2)
    sm = to_stiffness(pm)
    assert sm.c33[0, 0] == pytest.approx(9.0)
    assert sm.c11[0, 0] == pytest.approx(9.0 * 1.2)
    assert sm.c13[0, 0] == pytest.approx(9.0 * np.sqrt(1.4))


def test_compliance_singular_when_eps_equals_delta():
    pm = PhysicalModel.homogeneous((3, 3), 2.5, 0.1, 0.1)
    with pytest.raises(DomainError):
        to_compliance(pm)


def test_domain_checks():
    with pytest.raises(DomainError):
        PhysicalModel.homogeneous((2, 2), -1.0)
    with pytest.raises(DomainError):
        PhysicalModel.homogeneous((2, 2), 2.0, delta=-0.6)
    with pytest.raises(DomainError):
        from_optimization(OptimizationModel(np.r_[np.ones(4), np.zeros(4), np.ones(4)], (2, 2)))
    with pytest.raises(DomainError):
        OptimizationModel(np.ones(10), (2, 2))


fields = arrays(float, (3, 4), elements=st.floats(0, 1))


@settings(max_examples=50, deadline=None)
@given(v=fields, e=fields, d=fields)
def test_round_trip_is_identity(v, e, d):
    pm = PhysicalModel(1.4 + 4 * v, 0.3 * e, 0.3 * d)
    back = from_optimization(to_optimization(pm))
    np.testing.assert_allclose(back.v0, pm.v0, rtol=1e-12)
    np.testing.assert_allclose(back.epsilon, pm.epsilon, atol=1e-12)
    np.testing.assert_allclose(back.delta, pm.delta, atol=1e-12)


@settings(max_examples=50, deadline=None)
@given(v=fields, e=fields, d=fields)
def test_stiffness_times_compliance_is_identity(v, e, d):
    eps = 0.3 * e
    delta = 0.3 * d
    delta = np.where(np.abs(eps - delta) < 0.02, eps + 0.05, delta)
    pm = PhysicalModel(1.4 + 4 * v, eps, delta)
    sm = to_stiffness(pm)
    cm = stiffness_to_compliance(sm)
    for i in np.ndindex(pm.shape):
        C = np.array([[sm.c11[i], sm.c13[i]], [sm.c13[i], sm.c33[i]]])
        S = np.array([[cm.s11[i], cm.s13[i]], [cm.s13[i], cm.s33[i]]])
        np.testing.assert_allclose(C @ S, np.eye(2), atol=1e-9)


def test_class_ordering_and_active_vector():
    shape = (2, 3)
    m = OptimizationModel.from_blocks(np.full(6, 1.0), np.full(6, 2.0), np.full(6, 3.0), shape)
    np.testing.assert_array_equal(m.values[:6], 1.0)
    np.testing.assert_array_equal(m.values[6:12], 2.0)
    np.testing.assert_array_equal(m.values[12:], 3.0)
    act = ActiveSet(v0=False, eps=True, delta=True)
    assert act.names == ("eps", "delta")
    np.testing.assert_array_equal(m.active_vector(act), np.r_[np.full(6, 2.0), np.full(6, 3.0)])
    m2 = m.with_active(np.r_[np.full(6, 7.0), np.full(6, 8.0)], act)
    np.testing.assert_array_equal(m2.m_v0, 1.0)
    np.testing.assert_array_equal(m2.m_eps, 7.0)
    np.testing.assert_array_equal(m.m_eps, 2.0)  # original untouched


def test_active_set():
    with pytest.raises(ValueError):
        ActiveSet(False, False, False)
    with pytest.raises(ValueError):
        ActiveSet.from_names(["v0", "eta"])
    assert ActiveSet.from_names(["delta", "v0"]).classes == (0, 2)
    assert ActiveSet.all().count == 3


def test_bounds_map_velocity_interval_reversed():
    b = make_bounds(4, PhysicalRanges(v0=(1.5, 4.0), eps=(0.0, 0.2), delta=(0.0, 0.1)))
    assert b.lower[0] == pytest.approx(1 / 16) and b.upper[0] == pytest.approx(1 / 2.25)
    assert b.lower[4] == pytest.approx(1.0) and b.upper[4] == pytest.approx(1.4)
    assert b.upper[8] == pytest.approx(np.sqrt(1.2))
    r = b.restrict(ActiveSet(v0=False, eps=True), 4)
    assert r.lower.size == 4 and r.upper[0] == pytest.approx(1.4)
    with pytest.raises(ValueError):
        Bounds(np.ones(2), np.ones(2))


def test_model_file_round_trip(tmp_path):
    rng = np.random.default_rng(0)
    pm = PhysicalModel(2 + rng.random((5, 7)), 0.1 * rng.random((5, 7)), 0.1 * rng.random((5, 7)))
    paths = write_model(str(tmp_path), pm, 0.02, 0.02, prefix="x_")
    assert len(paths) == 3
    back = read_model(str(tmp_path), prefix="x_")
    np.testing.assert_array_equal(back.v0, pm.v0)
    np.testing.assert_array_equal(back.delta, pm.delta)
    hdr = (tmp_path / "x_v0.bin.hdr").read_text()
    assert "nx = 7" in hdr and "nz = 5" in hdr
