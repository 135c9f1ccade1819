"""Shared test oracles, chiefly the central finite-difference gradient check."""

import numpy as np

from midflow.tensor import Tensor, no_grad


def fd_gradcheck(build_output, wrt, h=1e-3, coords_per_tensor=16, tol=1e-3, seed=0):
    """Compare backward() gradients against central finite differences.

    ``build_output()`` must rebuild the op output tensor from the current
    contents of the ``wrt`` tensors. The output is projected onto a fixed
    random +-1 direction to get a scalar objective; the finite-difference
    side accumulates that projection in float64 to keep the noise floor low.

    The error is measured per tensor relative to the gradient scale,
    ``max_i |g_i - fd_i| / max(||g||_inf, ||fd||_inf, 1e-6)``, and must stay
    below ``tol``. Coordinates are subsampled for large tensors.
    """
    rng = np.random.default_rng(seed)
    out = build_output()
    proj = rng.choice([-1.0, 1.0], size=out.shape).astype(np.float32)
    loss = (out * Tensor(proj)).sum()
    loss.backward()
    analytic = [(t, t.grad.copy()) for t in wrt]
    for t in wrt:
        t.grad = None

    def objective():
        with no_grad():
            return float(np.vdot(build_output().data.astype(np.float64), proj))

    worst = 0.0
    for t, grad in analytic:
        flat = t.data.reshape(-1)
        n = flat.size
        coords = (np.arange(n) if n <= coords_per_tensor
                  else rng.choice(n, size=coords_per_tensor, replace=False))
        fd = np.empty(len(coords))
        for j, i in enumerate(coords):
            step = h * max(1.0, abs(float(flat[i])))
            orig = flat[i]
            flat[i] = orig + step
            fp = objective()
            flat[i] = orig - step
            fm = objective()
            flat[i] = orig
            fd[j] = (fp - fm) / (2.0 * step)
        ana = grad.reshape(-1)[coords].astype(np.float64)
        scale = max(np.abs(ana).max(), np.abs(fd).max(), 1e-6)
        err = np.abs(ana - fd).max() / scale
        worst = max(worst, err)
        assert err < tol, f"gradient mismatch {err:.2e} (tol {tol}) on tensor shape {t.shape}"
    return worst
