"""
Checking every gradient against finite differences
==================================================

The models run on a small reverse-mode engine over numpy arrays. Here the
engine's gradients are compared with central differences, first on single
ops, then on the whole training objective of a toy three-expert model.
"""

import time

import numpy as np

from momehtl.numerics import Tensor, check_gradients, kl_from_logits, parameter, softmax
from momehtl.harness import TOY_DATA, TOY_DIMS, toy_gradcheck

rng = np.random.default_rng(0)

# a single op: KL between two softmax distributions
p, q = parameter(rng.standard_normal(6)), parameter(rng.standard_normal(6))
rep = check_gradients(lambda: kl_from_logits(p, q), {"teacher": p, "student": q})
print("kl_from_logits:", rep.summary())

# softmax with a temperature, reduced through a weighted sum
w = rng.standard_normal(6)
rep = check_gradients(lambda: (softmax(p, 2.0) * w).sum(), {"logits": p})
print("softmax(tau=2):", rep.summary())

# negative control: a square whose backward forgets the factor 2
def wrong_square(t):
    return Tensor.from_op(t.data ** 2, (t,), lambda g: (g * t.data,))


x = parameter(rng.standard_normal(4))
print("x**2, correct:", check_gradients(lambda: (x * x).sum(), {"x": x}).summary())
print("x**2, broken: ", check_gradients(lambda: wrong_square(x).sum(), {"x": x}).summary())

# the full objective: experts, gate, fusion, classifier, intra and inter terms
print(f"\ntoy model: N={TOY_DATA.num_modalities} experts, d={TOY_DIMS.embed_dim}, "
      f"B={TOY_DIMS.num_blocks} blocks, K={TOY_DATA.num_classes} classes, float64")
for detach in (True, False):
    t0 = time.perf_counter()
    rep = toy_gradcheck("mome_htl", detach_teacher=detach)
    label = "frozen teacher" if detach else "live teacher"
    print(f"{label:>15}: {rep.summary()} in {time.perf_counter() - t0:.1f}s")
    for name in ("gate.mlp.layers.0.weight", "gate.mlp.layers.1.weight", "block_weights.w"):
        idx, rel = rep.worst[name]
        print(f"{'':>17}{name:<28} worst rel diff {rel:.1e} at index {idx}")
