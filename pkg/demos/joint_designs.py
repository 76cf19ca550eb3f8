"""
Several outcomes and covariate balance
======================================

Joint designs test all jumps at once. The joint region is described by a
membership oracle, and a balance test checks that a pre-treatment
covariate does not jump at the cutoff.
"""

# %%
import numpy as np

from elrdd import DGPSpec, DesignSpec, analyze, generate
from elrdd.montecarlo import design_for

# single draws scatter widely around the truth at this n (the outcome
# polynomials are steep), so judge the method by coverage, not one sample
dgp = DGPSpec("multi_outcome", n=3000, seed=7, params={"J": 2})
sample = generate(dgp)
res = analyze(sample, design_for(dgp), levels=(0.95,))
print("estimates", np.round(res.point_estimate, 4), "truth", dgp.truth)
print(f"joint p-value for no jumps: {res.p_value:.4f}")
# marginal intervals, one outcome at a time
for comp in res.components:
    print(comp["name"], np.round(comp["ci"]["0.95"], 4))

# %%
# Coarse grid scan of the 95% joint region around the estimate.
from elrdd import build_moment_system, build_weights, compute_kernel_constants
from elrdd.elcore import bind
from elrdd.inference import region_membership

kc = compute_kernel_constants("triangular")
bound = bind(build_moment_system(design_for(dgp), sample),
             build_weights(sample, res.h, kc))
est = res.point_estimate
grid = np.linspace(-0.3, 0.3, 13)
for d2 in grid[::-1]:
    row = "".join("#" if region_membership(bound, res.bartlett_factor,
                                           est + [d1, d2], 0.95, bartlett=True)
                  else "." for d1 in grid)
    print(row)

# %%
# Balance of the covariate in the covariate design.
cov = generate(DGPSpec("sharp_cov_model2", n=3000, seed=6))
bal = analyze(cov, DesignSpec("balance_test", ("z",)), levels=(0.95,))
print(f"jump in z: {bal.point_estimate[0]: .4f}, p-value {bal.p_value:.4f}")
