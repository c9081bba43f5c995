import json

import numpy as np
import pytest

from fedtar.federation import DriftConfig, GmmConfig, MetaConfig, make_config, run_experiment
from fedtar.adapters import ModelSpec, TrainConfig
from fedtar.verification import (AuditFormatError, check_convex_hull, convex_hull_instance,
                                 hypergradient_gradcheck, make_surrogate, policy_size, verify_audit)


@pytest.fixture(scope="module")
def audit_lines():
    cfg = make_config(cohort=DriftConfig(clients=2, time_steps=3, patients_per_client=6, samples_per_patient=5,
                                         input_dim=3),
                      model=ModelSpec(e=4, rank=2, embed_dim=2, hyper_hidden=3), gmm=GmmConfig(n_comp=3),
                      train=TrainConfig(steps=2), meta=MetaConfig(embed_dim=2, hidden=2), rounds=2)
    return [json.dumps(r) for r in run_experiment(cfg, method="fedtar").audit]


def test_convex_hull_random_instances():
    rng = np.random.default_rng(0)
    for _ in range(100):
        res = check_convex_hull(*convex_hull_instance(rng))
        assert res["simplex_error"] <= 1e-12 and res["negativity"] <= 0.0
        assert res["reconstruction_error"] <= 1e-10


def test_healthy_audit_passes(audit_lines):
    rep = verify_audit(audit_lines)
    assert rep.ok and rep.records == 6


def test_tampered_alpha_fails_naming_step(audit_lines):
    lines = list(audit_lines)
    rec = json.loads(lines[1])
    rec["alpha_t"] = 1.2
    lines[1] = json.dumps(rec)
    rep = verify_audit(lines)
    assert not rep.ok
    assert any(v.check == "alpha_range" and v.lineno == 2 and v.t == 2 for v in rep.violations)


def test_perturbed_iterate_fails_reconstruction(audit_lines):
    lines = list(audit_lines)
    rec = json.loads(lines[4])
    rec["w"][0] += 1e-6
    lines[4] = json.dumps(rec)
    rep = verify_audit(lines)
    assert any(v.check == "reconstruction" and v.lineno == 5 for v in rep.violations)


def test_corrupt_line_reports_line_number(audit_lines):
    lines = list(audit_lines)
    lines[2] = lines[2][:-5]
    with pytest.raises(AuditFormatError) as info:
        verify_audit(lines)
    assert info.value.lineno == 3
    with pytest.raises(AuditFormatError, match="missing"):
        verify_audit(['{"round": 1}'])


def test_empty_audit_is_not_ok():
    assert not verify_audit([]).ok


def test_gradcheck_surrogate():
    rng = np.random.default_rng(1)
    prob = make_surrogate(rng, 20, 4, 2, 2)
    assert prob.policy.flatten().size == policy_size(4, 2, 2) == 17
    res = hypergradient_gradcheck(prob)
    assert res["max_rel_error"] < 1e-4


def test_zero_policy_hypergradient_is_symmetric():
    prob = make_surrogate(np.random.default_rng(2), 10, 4, zero_mlp=True)
    hg = prob.hypergrad(prob.policy.flatten())
    g = hg[:prob.policy.table.size].reshape(prob.policy.table.shape)
    assert np.all(g == g[0])


def test_first_order_cosine_is_measured():
    # a diagnostic only: the value is reported, not required to exceed a bound
    res = hypergradient_gradcheck(make_surrogate(np.random.default_rng(3), 30, 5))
    assert -1.0 <= res["first_order_cosine"] <= 1.0
