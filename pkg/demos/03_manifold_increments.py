"""The embedding-maintenance core, isolated on a synthetic manifold.

Points on a noisy swiss roll get a full locally-linear embedding (dense
eigensolve). Thirty new points then arrive and are placed by the
incremental path alone: sum-to-one reconstruction weights against their
nearest neighbors, and a Jacobi sweep for the few points whose
neighborhoods reference each other. The quality check is the summed
reconstruction residual over the union, scored against a from-scratch
rebuild of all 330 points.

Run: python3 demos/03_manifold_increments.py
"""
import time

import numpy as np
import scipy.spatial

from dhge.fixtures import swiss_roll_points
from dhge.graph import NodeRef
from dhge.incremental import (NeighborSample, embed_increment, full_lle_oracle,
                              lle_weight_matrix, reconstruction_weights)
from dhge.model import EmbeddingTable

K, EPS, DIM = 8, 1e-3, 2
N_BASE, N_NEW = 300, 30


def residual_loss(y, w):
    r = y - w @ y
    return float(np.sum(r * r))


def main():
    pts, _ = swiss_roll_points(N_BASE + N_NEW, seed=5, noise=0.05)
    base_x = pts[:N_BASE]

    t0 = time.perf_counter()
    y_base, lam = full_lle_oracle(base_x, K, DIM, EPS)
    base_s = time.perf_counter() - t0
    base_loss = residual_loss(y_base, lle_weight_matrix(base_x, K, EPS))
    print("base embedding of %d points: %.0f ms, residual %.3e, spectrum %s"
          % (N_BASE, 1000 * base_s, base_loss,
             ["%.1e" % v for v in lam]))

    table = EmbeddingTable([y_base.copy()], version=0)
    t0 = time.perf_counter()
    d_new = scipy.spatial.distance.cdist(pts[N_BASE:], pts)
    d_new[np.arange(N_NEW), np.arange(N_BASE, N_BASE + N_NEW)] = np.inf
    samples, weights = [], []
    for j in range(N_NEW):
        part = np.argpartition(d_new[j], K)[:K]
        nn = part[np.argsort(d_new[j][part], kind="stable")]
        samples.append(NeighborSample(NodeRef(0, N_BASE + j),
                                      [NodeRef(0, int(i)) for i in nn], [1] * K))
        weights.append(reconstruction_weights(pts[N_BASE + j], pts[nn], EPS))
    rows, new_loss, sweeps = embed_increment(table, samples, weights, tol=1e-6)
    inc_s = time.perf_counter() - t0
    coupled = sum(1 for s in samples
                  if any(nb.intra_id >= N_BASE for nb in s.neighbors))
    print("placed %d new points in %.1f ms (%d with coupled neighborhoods, "
          "%d sweeps)" % (N_NEW, 1000 * inc_s, coupled, sweeps))

    t0 = time.perf_counter()
    y_scr, _ = full_lle_oracle(pts, K, DIM, EPS)
    scr_s = time.perf_counter() - t0
    scr_loss = residual_loss(y_scr, lle_weight_matrix(pts, K, EPS))

    inc_loss = base_loss + new_loss
    print("union residual: incremental %.3e vs rebuild %.3e (ratio %.2f)"
          % (inc_loss, scr_loss, inc_loss / scr_loss))
    print("wall time:      incremental %.1f ms vs rebuild %.0f ms (%.1f%%)"
          % (1000 * inc_s, 1000 * scr_s, 100 * inc_s / scr_s))


if __name__ == "__main__":
    main()
