"""
Implicit SGD for the Cox model
==============================

Censored exponential survival times, 20 covariates.  Each step samples one
unit, recomputes the cumulative hazard terms at the current iterate, and
solves a one-dimensional implicit equation.
"""

import numpy as np

from isgd import LearningRate, SgdConfig, cox_fit
from isgd.cox import cox_information, partial_loglik
from isgd.linalg import jacobi_eigh
from isgd.simlab.experiments import cox_gamma1
from isgd.simlab.generators import CoxExponential, gen_cox
from isgd.simlab.replicate import run_cox_batch

design = CoxExponential(p=20)
data = gen_cox(design, n=1000, seed=0)
print(f"{data.n} units, {int(data.status.sum())} events")

# %% a one-pass AdaGrad pilot, then read a learning rate off the information matrix
pilot = run_cox_batch([data], "adagrad", LearningRate(0.3, mode="constant"), data.n, seed=1)
theta_pilot = pilot.theta[0]
eig = jacobi_eigh(cox_information(data, theta_pilot) / data.n)[0]
g1 = cox_gamma1(data, theta_pilot)
print("information eigenvalues (per unit): %.3f .. %.3f" % (eig[-1], eig[0]))
print("gamma1 =", round(g1, 3))

# %% implicit SGD, two passes
res = cox_fit(data, SgdConfig(method="implicit", rate=LearningRate(g1), seed=2, npasses=2,
                              stride=200, track_lambda=True))
for row in res.trajectory:
    mse = np.sum((row[1:] - design.theta_star) ** 2)
    print(f"iter {int(row[0]):5d}  mse {mse:8.4f}")
print("partial log-likelihood: start %.1f, end %.1f"
      % (partial_loglik(data, np.zeros(20)), partial_loglik(data, res.theta)))
print("lambda range [%.4f, %.4f]" % (res.lambdas.min(), res.lambdas.max()))
