"""Tour of the tensor core: building blocks, gradients, and a finite-difference
spot check.

Run from the repo root:  python3 demos/01_autodiff_basics.py
"""

import numpy as np

from midflow import tensor as T
from midflow.nn import GroupNorm
from midflow.optim import AdamW, EmaShadow
from midflow.nn import Parameter
from midflow.tensor import Tensor

rng = np.random.default_rng(0)

# ---- tensors track gradients through the kernels the networks use --------

x = Tensor(rng.uniform(-1, 1, (1, 2, 6, 6)).astype(np.float32), requires_grad=True)
w = Tensor(rng.uniform(-0.5, 0.5, (4, 2, 3, 3)).astype(np.float32), requires_grad=True)
out = T.conv2d(x, w, stride=1, padding=1)
print("conv2d output shape:", out.shape)

loss = T.square(out).mean()
loss.backward()
print("loss %.5f, |dL/dx| mean %.5f, |dL/dw| mean %.5f"
      % (loss.item(), np.abs(x.grad).mean(), np.abs(w.grad).mean()))

# ---- central finite differences agree with the backward pass -------------

i = (0, 1, 3, 3)
h = 1e-3
analytic = x.grad[i]
orig = x.data[i]
x.data[i] = orig + h
fp = T.square(T.conv2d(x, w, stride=1, padding=1)).mean().item()
x.data[i] = orig - h
fm = T.square(T.conv2d(x, w, stride=1, padding=1)).mean().item()
x.data[i] = orig
fd = (fp - fm) / (2 * h)
print("coordinate %s: analytic %.6f vs finite difference %.6f" % (i, analytic, fd))

# ---- softmax over the channel axis is a convex combination ---------------

logits = Tensor(rng.normal(0, 2, (1, 9, 2, 2)).astype(np.float32))
soft = T.softmax_channel(logits)
print("softmax column sums (expect 1):", soft.data.sum(axis=1).ravel())

# ---- group norm standardizes per group ------------------------------------

gn = GroupNorm(2, 4)
y = gn(Tensor(rng.normal(3, 2, (1, 4, 5, 5)).astype(np.float32)))
print("group-norm output mean %.2e, var %.4f" % (y.data.mean(), y.data.var()))

# ---- one AdamW step plus an EMA shadow ------------------------------------

p = Parameter(np.ones(3, dtype=np.float32))
opt = AdamW([("p", p)], lr=0.1, weight_decay=0.01)
ema = EmaShadow([("p", p)], decay=0.9)
p.grad = np.array([0.3, -0.2, 0.05], dtype=np.float32)
opt.step()
ema.update([("p", p)])
print("after one AdamW step:", p.data, "EMA shadow:", ema.shadow["p"])
