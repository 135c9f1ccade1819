"""Diffusion toolbox: the linear schedule, forward noising, prediction
conversions, and ancestral sampling with spaced step plans.

Run from the repo root:  python3 demos/03_diffusion_sampler.py
"""

import numpy as np

from midflow import diffusion as D
from midflow.rng import Rng
from midflow.tensor import Tensor

sched = D.make_linear_schedule(1000, 1e-4, 0.02)
print("schedule: T=1000, abar_1=%.6f, abar_500=%.4f, abar_1000=%.2e"
      % (sched.abar(1), sched.abar(500), sched.abar(1000)))

rng = Rng(5)
z0 = Tensor(rng.uniform((1, 4, 8, 8), -0.9, 0.9))

# forward noising at increasing t drowns the signal
for t in (1, 250, 500, 1000):
    zt = D.q_sample(z0, t, Tensor(rng.normal(z0.shape)), sched)
    corr = np.corrcoef(z0.data.ravel(), zt.data.ravel())[0, 1]
    print("t=%4d  corr(z0, z_t) = %.3f" % (t, corr))

# prediction parameterizations convert into each other
zt = D.q_sample(z0, 400, Tensor(rng.normal(z0.shape)), sched)
eps = D.convert_prediction(z0, zt, 400, sched, "x0", "eps")
x0_back = D.convert_prediction(eps, zt, 400, sched, "eps", "x0")
print("x0 -> eps -> x0 max error: %.2e" % np.abs(x0_back.data - z0.data).max())

# an oracle predictor recovers the target for any step count
for k in (1, 8, 20, 50):
    plan = D.make_step_plan(k, 1000)
    out = D.ancestral_sample(lambda z, t: z0, z0.shape, plan, sched, Rng(7, k))
    print("K=%2d steps %s -> max |out - z0| = %.2e"
          % (k, list(plan.timesteps)[:4] + (["..."] if k > 4 else []),
             np.abs(out.data - z0.data).max()))

# the SNR-weighted x0 loss IS the eps-space squared loss
pred = Tensor(rng.uniform(z0.shape, -0.9, 0.9))
for t in (10, 500, 990):
    lhs = D.loss_snr_weighted_x0(pred, z0, t, sched).item()
    e_pred = D.convert_prediction(pred, zt, t, sched, "x0", "eps")
    e_true = D.convert_prediction(z0, zt, t, sched, "x0", "eps")
    rhs = float(np.mean((e_pred.data - e_true.data) ** 2))
    print("t=%3d  snr-weighted %.5f  vs eps-space %.5f" % (t, lhs, rhs))
