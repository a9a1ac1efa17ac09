"""Generate the K=15 kernel point disposition table.

One point is pinned at the origin. The remaining K-1 points minimise a
repulsive 1/d potential between all points plus a linear attraction to the
origin, with every point constrained to the unit ball. The best of several
random restarts is kept and scaled by RATIO so the outer points sit inside
the convolution radius.

Output: little-endian f32 triples, one per kernel point, origin first.
Usage: python gen_kernel_points.py ../data/kernel_points_k15.bin

Recorded for the shipped table: min pairwise distance 0.587087,
max radius 0.660000 (unit extent).
"""
import struct
import sys

import numpy as np

K = 15
RATIO = 0.66
RESTARTS = 64
STEPS = 20000
SEED = 20200311


def energy_and_grad(free):
    pts = np.vstack([np.zeros((1, 3)), free])
    diff = pts[:, None, :] - pts[None, :, :]
    dist = np.linalg.norm(diff, axis=-1)
    np.fill_diagonal(dist, np.inf)
    energy = 0.5 * np.sum(1.0 / dist) + np.sum(np.linalg.norm(free, axis=1))
    rep = -np.sum(diff / dist[..., None] ** 3, axis=1)
    norms = np.linalg.norm(free, axis=1, keepdims=True)
    grad = rep[1:] + free / np.maximum(norms, 1e-12)
    return energy, grad


def optimise(rng):
    free = rng.uniform(-1.0, 1.0, size=(K - 1, 3))
    free /= np.maximum(1.0, np.linalg.norm(free, axis=1, keepdims=True))
    step = 1e-2
    for it in range(STEPS):
        _, grad = energy_and_grad(free)
        gnorm = np.linalg.norm(grad, axis=1, keepdims=True)
        free -= step * grad / np.maximum(gnorm, 1e-12) * np.minimum(gnorm, 1.0)
        norms = np.linalg.norm(free, axis=1, keepdims=True)
        free /= np.maximum(1.0, norms)
        if it % 2000 == 1999:
            step *= 0.5
    return energy_and_grad(free)[0], free


def main():
    rng = np.random.default_rng(SEED)
    best = None
    for _ in range(RESTARTS):
        e, free = optimise(rng)
        if best is None or e < best[0]:
            best = (e, free)
    pts = np.vstack([np.zeros((1, 3)), best[1]]) * RATIO
    pts = pts.astype(np.float32)
    d = np.linalg.norm(pts[:, None] - pts[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    print(f"energy={best[0]:.6f} min_pairwise={d.min():.6f} "
          f"max_radius={np.linalg.norm(pts, axis=1).max():.6f}")
    with open(sys.argv[1], "wb") as f:
        for p in pts:
            f.write(struct.pack("<3f", *p))


if __name__ == "__main__":
    main()
