"""Client weights with shared and patient-specific low-rank adapters."""
import numpy as np

from fedtar.adapters import ModelSpec, compose_weights, hypernet_generate, init_weights, model_forward

rng = np.random.default_rng(0)
spec = ModelSpec(in_dim=4, out_dim=2, e=8, n_layers=2, rank=2, embed_dim=4, n_comp=3, hyper_hidden=6)
w = init_weights(spec, rng)
print(f"flat client vector: {w.flatten().size} parameters, LoRA scale {spec.scale:g}")

phi = rng.normal(size=spec.embed_dim)
A_p, B_p = hypernet_generate(w.hypernet(0), phi, spec.e, spec.rank)
print("patient factors:", A_p.shape, B_p.shape)

# at initialisation both adapters contribute nothing
W = w.part("W0")
print("composed == base at init:",
      bool(np.array_equal(compose_weights(W, w.lora(0), (A_p, B_p)), W)))

# perturb the hypernetworks and two patients now get different layers
parts = w.parts()
for name in parts:
    if name.startswith("h"):
        parts[name] = parts[name] + rng.normal(0, 0.1, parts[name].shape)
w2 = type(w).from_parts(spec, parts)
x = rng.normal(size=spec.in_dim)
print("patient a:", np.round(model_forward(w2, phi, x), 4))
print("patient b:", np.round(model_forward(w2, -phi, x), 4))
