"""Fit the three-class network to one shape and reconstruct from its labels.

    python demos/learn_labels.py [disk|sphere] [epochs]
"""
import sys
import time

import numpy as np

from threepole import extract, field, learn, metrics, shapes

name = sys.argv[1] if len(sys.argv) > 1 else "disk"
epochs = int(sys.argv[2]) if len(sys.argv) > 2 else 150
mesh = shapes.disk() if name == "disk" else shapes.icosphere(3, 0.5)

octree = field.build_octree(mesh, 6)
batch = field.sample_points(mesh, octree, "octree", 1)
print(f"{name}: {len(batch)} octree corner samples, label counts {np.bincount(batch.labels)}")

cfg = learn.TrainConfig(hidden=(128, 128, 128), lr=4e-3, lr_decay=0.97, batch_size=2048, epochs=epochs)
t0 = time.perf_counter()
model, losses = learn.train(batch, cfg)
print(f"trained {epochs} epochs in {time.perf_counter() - t0:.0f} s, loss {losses[0]:.3f} -> {losses[-1]:.4f}")

grid = field.compute_grid(mesh, 6, octree=octree)
pred = learn.predict_grid(model, grid)
acc = np.mean(pred.labels() == grid.labels())
rec = extract.reconstruct(pred)
gt = metrics.surface_sample(mesh, 100_000, seed=1)
cd = metrics.chamfer_l2(metrics.surface_sample(rec, 100_000, seed=2), gt)
print(f"lattice accuracy {acc:.4f}, faces {rec.n_triangles}, CD {cd:.2e}")
print(metrics.topology_stats(rec))
