# Fit the mini body to synthetic problems with a corrupted occluded region, once
# with visibility-weighted data terms and once with uniform weights.
import numpy as np

from visfit.body_model import forward
from visfit.evaluation import mpjpe, pa_mpjpe
from visfit.fitter import FitConfig, FitProblem, fit
from visfit.mini_model import make_mini_model
from visfit.prior import make_synthetic_prior
from visfit.synth import SyntheticProblemSpec, body_height, make_problem

model = make_mini_model()
prior = make_synthetic_prior(3 * (model.n_kin - 1))

problem = make_problem(model, SyntheticProblemSpec(seed=4, occluded_fraction=0.4), prior)
obs = problem.observations
print("vertices marked occluded:", int((obs.vertex_visibility[:, 2] == 0).sum()), "of", len(obs.vertices))

result = fit(FitProblem(model, obs, prior), FitConfig(max_iters=150))
J = forward(model, result.theta, result.beta).joints_out
rejected = sum(not t["accepted"] for t in result.trace)
print(f"{result.n_iters} iterations ({result.stop_reason}, {rejected} rejected steps)")
print(f"MPJPE {mpjpe(J * 1000, problem.truth.joints * 1000):.1f} mm, "
      f"PA-MPJPE {pa_mpjpe(J * 1000, problem.truth.joints * 1000):.1f} mm")

# the objective trace, every 25th accepted step
for t in [t for t in result.trace if t["accepted"]][::25]:
    print(f"  iter {t['iter']:3d}  total {t['total']:.4f}")

# a single problem says little about the weighting; compare over ten seeds
errors = {"visibility": [], "uniform": []}
for seed in range(10):
    pr = make_problem(model, SyntheticProblemSpec(seed=seed, occluded_fraction=0.4), prior)
    height = body_height(model, pr.truth.beta)
    for weighting, errs in errors.items():
        res = fit(FitProblem(model, pr.observations, prior), FitConfig(max_iters=150, weighting=weighting))
        J = forward(model, res.theta, res.beta).joints_out
        errs.append(100 * pa_mpjpe(J, pr.truth.joints) / height)
for weighting, errs in errors.items():
    print(f"{weighting:>10}: median PA-MPJPE {np.median(errs):.2f}% of height, worst {max(errs):.2f}%")
