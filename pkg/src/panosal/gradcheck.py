"""Central-difference gradient checking for layers and whole models.

The pattern everywhere: reduce a forward pass to a scalar with a fixed
random projection R, backprop R, and compare each analytic gradient to
central finite differences on float64 inputs.
"""

from __future__ import annotations

import numpy as np

from .nn import Ctx, Module


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """max |a - n| scaled by the largest gradient magnitude present."""
    denom = max(np.abs(analytic).max(), np.abs(numeric).max(), 1e-12)
    return float(np.abs(analytic - numeric).max() / denom)


def fd_gradient(f, x: np.ndarray, step: float = 1e-5) -> np.ndarray:
    """Central differences of scalar-valued f at every element of x."""
    g = np.zeros_like(x, dtype=np.float64)
    flat = x.reshape(-1)
    gflat = g.reshape(-1)
    for i in range(flat.size):
        orig = flat[i]
        flat[i] = orig + step
        hi = f()
        flat[i] = orig - step
        lo = f()
        flat[i] = orig
        gflat[i] = (hi - lo) / (2.0 * step)
    return g


def check_block_gradients(module: Module, forward, inputs: list[np.ndarray],
                          seed: int = 0, step: float = 1e-5,
                          param_names=None) -> dict[str, float]:
    """Compare analytic vs numeric gradients of a module.

    ``forward(ctx) -> np.ndarray`` must run the module on ``inputs`` (the
    caller closes over them); backward must be ``module.backward`` taking the
    projection and returning per-input gradients (array or tuple). Returns
    {"input0": err, ..., param_name: err}.
    """
    rng = np.random.default_rng(seed)
    module.zero_grad()
    out = forward(Ctx(train=True))
    proj = rng.standard_normal(out.shape)
    gin = module.backward(proj)

    def scalar():
        # train-mode forward so batchnorm differentiates through batch stats
        return float((forward(Ctx(train=True)) * proj).sum())
    if not isinstance(gin, tuple):
        gin = (gin,)

    errs = {}
    for i, x in enumerate(inputs):
        errs[f"input{i}"] = rel_error(gin[i], fd_gradient(scalar, x, step))
    params = dict(module.named_parameters())
    names = param_names if param_names is not None else [
        n for n, p in params.items() if p.trainable
    ]
    for name in names:
        p = params[name]
        errs[name] = rel_error(p.grad, fd_gradient(scalar, p.data, step))
    return errs
