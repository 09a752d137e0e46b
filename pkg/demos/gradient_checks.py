"""
Checking hand-written gradients
===============================

All backward passes are written by hand, so they are checked numerically.
Central differences struggle on a ReLU network with thousands of weights:
a step of 1e-5 can cross a kink, and many gradient entries sit below the
rounding noise of the difference quotient. The complex-step derivative has
neither problem.
"""

import time

import numpy as np

from mmbeddings.nn import grad_check
from mmbeddings.simgen import SimConfig, simulate
from mmbeddings.variational import CatFeatureSpec, MMbeddings, ModelConfig

ds = simulate(SimConfig(q=20, n=100, seed=0))
model = MMbeddings(ModelConfig(p=10, features=[CatFeatureSpec(20, 4)]), 0)
# freeze the reparameterization noise so the loss is a deterministic function
noise = [np.random.default_rng(0).standard_normal((20, 4))]


def loss_and_grad(P):
    return model.loss_and_grad(ds.X, ds.y, ds.codes, noise=noise)


def loss(P):
    return model.loss(ds.X, ds.y, ds.codes, noise=noise)


for method in ("central", "complex"):
    t0 = time.perf_counter()
    kw = {"value_fn": loss} if method == "complex" else {}
    err = grad_check(loss_and_grad, model.params, method=method, **kw)
    print(f"{method:8s} max relative error {err:.2e}  ({time.perf_counter() - t0:.1f}s)")
