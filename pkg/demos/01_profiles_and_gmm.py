"""Patient profiles, soft demographic clusters and the learned embedding."""
import numpy as np

from fedtar.demographics import (PatientProfile, ProjectionParams, build_profile_vector, profile_matrix,
                                 gmm_fit, gmm_soft_assign, project_embedding)

rng = np.random.default_rng(0)

# a profile is [hashed id in [0,1), age / 100, sex code]
p = PatientProfile("patient-001", 64, "female")
print("profile vector:", build_profile_vector(p))

# a small synthetic clinic: two age groups
profiles = [PatientProfile(f"p{i:03d}", float(np.clip(rng.normal(35 if i % 2 else 70, 6), 18, 95)),
                           ["male", "female", "unknown"][i % 3])
            for i in range(200)]

gmm = gmm_fit(profile_matrix(profiles), n_comp=4, seed=1)
print(f"EM stopped after {gmm.n_iter} iterations, converged={gmm.converged}")
print("log-likelihood per iteration never decreases:",
      bool(np.all(np.diff(gmm.history) >= -1e-12)))
print("mixture weights:", np.round(gmm.weights, 3))

q = gmm_soft_assign(gmm, build_profile_vector(profiles[0]))
print("responsibilities of p000:", np.round(q, 3), "sum", q.sum())

# the embedding is an affine map of the responsibilities
pp = ProjectionParams.init(8, gmm.n_comp, rng)
print("embedding phi:", np.round(project_embedding(pp, q), 3))
