import mpmath
import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from fedtar.demographics import (GmmModel, PatientProfile, ProjectionParams, build_profile_vector,
                                 gmm_fit, gmm_soft_assign, hash_unit, profile_matrix,
                                 project_embedding, project_embedding_vjp, read_demographics,
                                 write_demographics)
from fedtar.temporal import relative_error
from oracles import naive_matmul, sha256

# leading 8 bytes of SHA-256(b"patient_001") as a big-endian integer, from the
# pure-Python oracle in oracles.py
PATIENT_001_INT = 11926496285200284292
PATIENT_001_UNIT = 0.6465366591277223


# ---- profile vectors ------------------------------------------------------

def test_frozen_hash_constant():
    assert int.from_bytes(sha256(b"patient_001")[:8], "big") == PATIENT_001_INT
    assert PATIENT_001_INT / 2.0**64 == PATIENT_001_UNIT
    v = build_profile_vector(PatientProfile("patient_001", 50, "female"))
    np.testing.assert_array_equal(v, [PATIENT_001_UNIT, 0.5, 1.0])


def test_boundary_profile():
    v = build_profile_vector(PatientProfile("x", 0, "male"))
    assert 0.0 <= v[0] < 1.0 and v[1] == 0.0 and v[2] == 0.0
    assert v[0] == int.from_bytes(sha256(b"x")[:8], "big") / 2.0**64
    assert build_profile_vector(PatientProfile("u", 130, "unknown"))[1:].tolist() == [1.3, 0.5]


def test_profile_is_pure():
    a = build_profile_vector(PatientProfile("p-17", 33.5, "female"))
    b = build_profile_vector(PatientProfile("p-17", 33.5, "female"))
    assert a.tobytes() == b.tobytes()


@pytest.mark.parametrize("kwargs", [dict(id="a", age=-1), dict(id="a", age=131), dict(id="", age=3),
                                    dict(id="a", age=3, sex="f")])
def test_profile_validation(kwargs):
    with pytest.raises(ValueError):
        PatientProfile(**kwargs)


@settings(max_examples=100, deadline=None)
@given(st.text(min_size=1, max_size=30), st.floats(0, 130), st.sampled_from(["male", "female", "unknown"]))
def test_profile_ranges(pid, age, sex):
    v = build_profile_vector(PatientProfile(pid, age, sex))
    assert 0.0 <= v[0] < 1.0 and 0.0 <= v[1] <= 1.3 and v[2] in (0.0, 0.5, 1.0)
    assert v[0] == hash_unit(pid)


# ---- GMM ------------------------------------------------------------------

def test_single_component_closed_form():
    rng = np.random.default_rng(0)
    X = rng.normal(size=(50, 3)) * [1.0, 0.1, 1e-5]
    m = gmm_fit(X, n_comp=1, floor=1e-6)
    np.testing.assert_allclose(m.means[0], X.mean(axis=0), atol=1e-14)
    np.testing.assert_allclose(m.variances[0], np.maximum(X.var(axis=0), 1e-6), rtol=1e-12)
    assert m.variances[0, 2] == 1e-6


def test_identical_samples_use_floor():
    m = gmm_fit(np.ones((10, 3)), n_comp=2, floor=1e-4)
    assert np.all(m.variances == 1e-4)
    assert np.all(np.isfinite(m.history))


def test_too_many_components_rejected():
    with pytest.raises(ValueError, match="exceeds"):
        gmm_fit(np.zeros((3, 2)), n_comp=4)


def test_default_hyperparameters():
    import inspect
    sig = inspect.signature(gmm_fit).parameters
    assert sig["n_comp"].default == 16 and sig["floor"].default == 1e-6 and sig["tol"].default == 1e-3


def two_clouds(rng, n=60, sep=20.0, spread=0.5):
    a = rng.normal(0.0, spread, (n, 3))
    b = rng.normal(0.0, spread, (n, 3)) + sep
    return a, b


def test_two_clouds_separated():
    rng = np.random.default_rng(1)
    a, b = two_clouds(rng)
    m = gmm_fit(np.vstack([a, b]), n_comp=2, seed=3)
    ra, rb = gmm_soft_assign(m, a), gmm_soft_assign(m, b)
    ja, jb = np.argmax(ra.sum(axis=0)), np.argmax(rb.sum(axis=0))
    assert ja != jb
    assert ra[:, ja].min() >= 0.99 and rb[:, jb].min() >= 0.99


def test_soft_assign_at_component_mean():
    m = GmmModel(np.full(3, 1 / 3), np.array([[0.0, 0.0], [5.0, 5.0], [-5.0, 5.0]]), np.full((3, 2), 0.1))
    for j in range(3):
        assert np.argmax(gmm_soft_assign(m, m.means[j])) == j


def test_identical_components_give_uniform_posterior():
    m = GmmModel(np.full(4, 0.25), np.zeros((4, 3)), np.ones((4, 3)))
    np.testing.assert_allclose(gmm_soft_assign(m, [0.3, -1.0, 2.0]), 0.25, atol=1e-15)


def test_soft_assign_matches_extended_precision():
    mpmath.mp.dps = 40
    rng = np.random.default_rng(2)
    for _ in range(5):
        K, d = 4, 3
        w = rng.dirichlet(np.ones(K))
        mu = rng.normal(size=(K, d))
        var = rng.uniform(0.05, 2.0, (K, d))
        v = rng.normal(size=d) * 1.5
        dens = []
        for k in range(K):
            p = mpmath.mpf(w[k])
            for i in range(d):
                s2 = mpmath.mpf(var[k, i])
                p *= mpmath.exp(-(mpmath.mpf(v[i]) - mpmath.mpf(mu[k, i])) ** 2 / (2 * s2)) / mpmath.sqrt(2 * mpmath.pi * s2)
            dens.append(p)
        ref = np.array([float(x / sum(dens)) for x in dens])
        got = gmm_soft_assign(GmmModel(w, mu, var), v)
        np.testing.assert_allclose(got, ref, rtol=1e-12, atol=1e-300)


def test_monotone_loglik_many_fits():
    rng = np.random.default_rng(3)
    for i in range(30):
        n = int(rng.integers(10, 80))
        X = rng.normal(size=(n, 3)) * rng.uniform(0.01, 2, 3)
        m = gmm_fit(X, n_comp=int(rng.integers(1, min(n, 8) + 1)), seed=i, tol=0.0, max_iter=40)
        assert np.all(np.diff(m.history) >= -1e-9)
        assert abs(m.weights.sum() - 1) < 1e-9 and np.all(m.variances >= m.floor)


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**31), st.floats(1e-3, 1e3))
def test_soft_assign_simplex_under_variance_scaling(seed, c):
    rng = np.random.default_rng(seed)
    K, d = int(rng.integers(1, 6)), 3
    m = GmmModel(rng.dirichlet(np.ones(K)), rng.normal(size=(K, d)), rng.uniform(1e-6, 1, (K, d)))
    V = rng.normal(size=(5, d)) * 10
    for model in (m, GmmModel(m.weights, m.means, m.variances * c)):
        r = gmm_soft_assign(model, V)
        assert np.all(r >= 0) and np.max(np.abs(r.sum(axis=1) - 1)) < 1e-9


def test_fit_on_profiles_is_deterministic():
    profs = [PatientProfile(f"p{i}", 20 + i, ("male", "female")[i % 2]) for i in range(40)]
    X = profile_matrix(profs)
    a, b = gmm_fit(X, 16, seed=5), gmm_fit(X, 16, seed=5)
    assert a.means.tobytes() == b.means.tobytes() and a.history == b.history


# ---- projection -----------------------------------------------------------

def test_projection_cases():
    q = np.array([0.2, 0.3, 0.5])
    b = np.array([1.0, -2.0])
    np.testing.assert_array_equal(project_embedding(ProjectionParams(np.zeros((2, 3)), b), q), b)
    np.testing.assert_array_equal(project_embedding(ProjectionParams(np.eye(3), np.zeros(3)), q), q)
    rng = np.random.default_rng(4)
    pp = ProjectionParams(rng.normal(size=(4, 6)), rng.normal(size=4))
    q = rng.dirichlet(np.ones(6))
    ref = np.array(naive_matmul(pp.W.tolist(), [[x] for x in q]))[:, 0] + pp.b
    np.testing.assert_allclose(project_embedding(pp, q), ref, atol=1e-15)
    with pytest.raises(ValueError):
        project_embedding(pp, np.ones(5))


def test_projection_vjp():
    rng = np.random.default_rng(5)
    pp = ProjectionParams(rng.normal(size=(4, 6)), rng.normal(size=4))
    q = rng.dirichlet(np.ones(6))
    dW, db, dq = project_embedding_vjp(pp, q, np.zeros(4))
    assert not (dW.any() or db.any() or dq.any())
    u = rng.normal(size=4)
    dW, db, dq = project_embedding_vjp(pp, q, u)
    np.testing.assert_array_equal(db, u)

    def f(W, b, qq):
        return float(u @ project_embedding(ProjectionParams(W, b), qq))
    h = 1e-6
    fdW = np.zeros_like(pp.W)
    for idx in np.ndindex(pp.W.shape):
        Wp, Wm = pp.W.copy(), pp.W.copy()
        Wp[idx] += h
        Wm[idx] -= h
        fdW[idx] = (f(Wp, pp.b, q) - f(Wm, pp.b, q)) / (2 * h)
    fdq = np.array([(f(pp.W, pp.b, q + h * e) - f(pp.W, pp.b, q - h * e)) / (2 * h) for e in np.eye(6)])
    assert relative_error(dW, fdW) < 1e-6 and relative_error(dq, fdq) < 1e-6
    with pytest.raises(ValueError):
        project_embedding_vjp(pp, q, np.ones(3))


# ---- record file ----------------------------------------------------------

def test_demographics_round_trip(tmp_path):
    recs = [(PatientProfile("a", 31.25, "female"), 0), (PatientProfile("b", 77.0, "unknown"), 1),
            (PatientProfile("c", 0.1, "male"), 0)]
    path = tmp_path / "demo.csv"
    write_demographics(path, recs)
    back = read_demographics(path)
    assert back == {0: [recs[0][0], recs[2][0]], 1: [recs[1][0]]}


def test_demographics_bad_row_reports_line(tmp_path):
    path = tmp_path / "demo.csv"
    path.write_text("id,age,sex,client_id\na,30,male,0\nb,200,male,0\n")
    with pytest.raises(ValueError, match=":3:"):
        read_demographics(path)
