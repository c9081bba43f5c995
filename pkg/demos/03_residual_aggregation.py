"""Temporal residual aggregation and its closed form."""
import numpy as np

from fedtar.temporal import (check_bounded_update, closed_form_betas, reconstruct_from_betas,
                             run_recursion)

rng = np.random.default_rng(0)
T, d = 5, 6
w0 = rng.normal(size=d)
snaps = [w0 + rng.normal(size=d) for _ in range(T)]
alphas = rng.dirichlet(np.ones(T))

hist = run_recursion(w0, snaps, alphas)
betas = closed_form_betas(alphas)
print("alphas:", np.round(alphas, 3))
print("betas (w0 first):", np.round(betas, 3), "sum", betas.sum())

recon = reconstruct_from_betas(w0, snaps, betas)
print("max |recursion - closed form|:", np.max(np.abs(recon - hist.current)))

# each step moves exactly alpha_t of the way to the new snapshot
for rep in check_bounded_update(hist):
    print(f"t={rep.t}  |w_t - w_t-1| = {rep.update_norm:.4f}  alpha*|delta| = {rep.bound:.4f}")

# alpha = (0, ..., 0, 1) recovers plain last-snapshot averaging
print("last-step only:", np.allclose(run_recursion(w0, snaps, [0] * (T - 1) + [1]).current, snaps[-1]))
