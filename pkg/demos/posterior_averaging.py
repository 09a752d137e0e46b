"""
From per-row posteriors to per-level embeddings
===============================================

The encoder emits a mean and log-variance for every row. Rows of the same
level are pooled into one Gaussian per level. This demo walks through the
pooling on a toy batch and compares the optional shrinkage against the
closed-form random-intercept posterior.
"""

import numpy as np

from mmbeddings.variational import (
    PosteriorBatch,
    apply_shrinkage,
    average_posterior_params,
    lmm_posterior_oracle,
    reparameterize,
)

rng = np.random.default_rng(1)
codes = np.array([0, 0, 0, 2, 2, 3])  # level 1 is absent from this batch
mu = rng.normal(size=(6, 2))
log_var = np.full((6, 2), np.log(0.5))

cluster = average_posterior_params(PosteriorBatch([mu], [log_var], codes), [4])
print("counts", cluster.counts[0])
print("pooled means\n", cluster.mu[0].round(3))
# variance of an average of n independent draws: tau^2 / n
print("pooled variances", np.exp(cluster.log_var[0][:, 0]).round(4))

# sampling keeps absent levels at exactly zero
b = reparameterize(cluster, rng).levels[0]
print("sampled level 1", b[1])

# heuristic shrinkage n / (n + 1) next to the random-intercept posterior mean
shrunk = apply_shrinkage(cluster, "heuristic")
for n_j in (1, 2, 3, 10, 100):
    mean, var = lmm_posterior_oracle(1.0, n_j, sigma2=1.0, sigma2_b=1.0)
    print(f"n_j={n_j:3d}  heuristic {n_j / (n_j + 1):.3f}  closed form {float(mean):.3f}  "
          f"posterior var {float(var):.3f}")
print("shrunk level 0", shrunk.mu[0][0].round(3), "from", cluster.mu[0][0].round(3))
