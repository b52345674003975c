"""Worst-case perturbations for several norms, and the penalty each induces.

Run: python3 demos/perturbation_family.py
"""

import math

import numpy as np

from gradreg.numcore import lp_norm, make_rng
from gradreg.perturb import PerturbSpec, oracle_epsilon, regularizer_value, worst_case_epsilon

np.set_printoptions(precision=4, suppress=True)

grad = np.array([0.5, -2.0, 1.0, 0.1])
print("loss gradient:", grad)
print()

# Small p concentrates the budget, large p spreads it evenly.
for p in (1.0, 1.5, 2.0, 3.0, math.inf):
    spec = PerturbSpec(p, sigma=1.0)
    eps = worst_case_epsilon(grad, spec)
    print(f"p={p:<4} eps={eps}  ||eps||_p={lp_norm(eps, p):.6f}  "
          f"g.eps={grad @ eps:.6f}  penalty sigma*||g||_q={regularizer_value(grad, spec):.6f}")
print()

# A brute-force search over the ball agrees with the closed form.
spec = PerturbSpec(3.0, 1.0)
oracle = oracle_epsilon(grad, spec, rng=make_rng(0))
print("p=3 closed form objective:", grad @ worst_case_epsilon(grad, spec))
print("p=3 numerical oracle     :", grad @ oracle)
