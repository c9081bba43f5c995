"""Forward-mode hypergradient of the validation loss with respect to the temporal policy."""
import numpy as np

from fedtar.verification import central_difference, hypergradient_gradcheck, make_surrogate

rng = np.random.default_rng(3)
prob = make_surrogate(rng, d_w=30, T=4, embed_dim=2, hidden=2)
psi = prob.policy.flatten()

exact = prob.hypergrad(psi, "exact")
fd = central_difference(prob.objective, psi)
print("exact:", np.round(exact[:5], 6), "...")
print("fd   :", np.round(fd[:5], 6), "...")

res = hypergradient_gradcheck(prob)
print(f"d_psi={res['d_psi']}  relative error {res['max_rel_error']:.2e}")
print(f"first-order variant: gap {res['first_order_gap']:.3f}, cosine {res['first_order_cosine']:.3f}")

# a few plain gradient steps on psi lower the meta-objective
for k in range(5):
    print(f"step {k}: L_val = {prob.objective(psi):.5f}")
    psi = psi - 0.5 * prob.hypergrad(psi, "exact")
