"""
Robust regression with implicit Huber SGD
=========================================

5% of responses are replaced by a constant outlier.  Squared loss chases
them; the Huber score caps each residual's pull at delta.
"""

import numpy as np

from isgd import SgdConfig, LearningRate, fit, models, optimal_gamma1
from isgd.asymptotics import huber_moments, mest_variance
from isgd.linalg import jacobi_eigh
from isgd.simlab.generators import ContaminatedLinear, gen_contaminated

N, p = 1000, 50
design = ContaminatedLinear.random_theta(p=p, seed=0, n_scale=N)
data = gen_contaminated(design, N, seed=1)
print("outlier fraction:", np.mean(data.y == design.outlier_value))

# %% learning rate from the second-moment matrix of the covariates
S = data.X.T @ data.X / N
g1 = optimal_gamma1(jacobi_eigh(S)[0])
print("gamma1 =", round(g1, 1))

for token in ("squared", "huber"):
    res = fit(data, models.from_token(token),
              SgdConfig(method="implicit", rate=LearningRate(g1), seed=2, npasses=2))
    mse = np.sum((res.theta - design.theta_star) ** 2)
    print(f"{token:8s} mse after 2 passes: {mse:9.2f}")

# %% what the theory expects for clean Gaussian noise
psi2, vp = huber_moments(1.345)
print("Huber psi^2 = %.4f, v'(0) = %.4f" % (psi2, vp))
v = mest_variance(S, g1 * np.eye(p), psi2, vp)
print("asymptotic n Var trace:", round(float(np.trace(v.sigma)), 1) if v.valid else "undefined")
