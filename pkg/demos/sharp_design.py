"""
Sharp design on simulated data
==============================

Draw one sample from a sharp design with a known jump of 0.04, select the
coverage-optimal bandwidth and read off intervals with and without the
Bartlett factor.
"""

# %%
import numpy as np

from elrdd import DGPSpec, analyze, generate
from elrdd.montecarlo import design_for

dgp = DGPSpec("sharp_model1", n=5000, seed=1)
sample = generate(dgp)
print(f"n = {sample.n}, true jump = {dgp.truth[0]:.4f}")

# %%
# ``analyze`` estimates the curvature constants, picks h = H* n^(-1/3)
# and inverts the likelihood ratio at each level.
res = analyze(sample, design_for(dgp), levels=(0.90, 0.95, 0.99))
plan = res.bandwidth_plan
print(f"estimate      {res.point_estimate[0]: .4f}")
print(f"h             {res.h: .4f}  (H* = {plan.H_star:.3f})")
print(f"Bartlett      {res.bartlett_factor: .4f}")
print(f"p-value at 0  {res.p_value: .4f}")

# %%
# The corrected interval is never shorter than the plain one when the
# factor exceeds one.
for lv in res.levels:
    a, b = res.ci[lv], res.ci_bartlett[lv]
    print(f"{lv:.2f}: plain [{a.lo: .4f}, {a.hi: .4f}]   "
          f"corrected [{b.lo: .4f}, {b.hi: .4f}]")

# %%
# Bandwidth sensitivity: the same analysis at half and twice the selected h.
res = analyze(sample, design_for(dgp), levels=(0.95,), h_multipliers=(0.5, 1, 2))
for row in res.sensitivity:
    print({k: (np.round(v, 4) if isinstance(v, float) else v) for k, v in row.items()})
