"""
Synthetic shapes and point-cloud distances
==========================================

A short tour of the data generator and the distances used to judge how
visible a perturbation is. Runs in a couple of seconds.
"""

import numpy as np

from cosa.geometry import chamfer, hausdorff, linf_clip, linf_distortion
from cosa.synthdata import ShapeKind, generate_shape, sample_surface, surface_residual

# every class is a parametric surface sampled uniformly by area; the raw
# samples lie on the canonical surface, the dataset clouds are then centred
# at the origin and scaled into the unit ball
rng = np.random.default_rng(0)
for kind in ShapeKind:
    off = np.abs(surface_residual(kind, sample_surface(kind, 256, rng))).max()
    cloud = generate_shape(kind, n=256, seed=0)
    radius = np.linalg.norm(cloud.points, axis=1).max()
    print(f"{kind.label:9s} points={len(cloud.points)} max radius={radius:.3f} off-surface={off:.1e}")

# two independent samples of the same sphere are not identical, and the
# Chamfer distance between them is the floor any reconstruction has to live with
a = generate_shape(ShapeKind.SPHERE, 256, seed=1)
b = generate_shape(ShapeKind.SPHERE, 256, seed=2)
print("sphere vs sphere  CD", round(chamfer(a, b), 4), " HD", round(hausdorff(a, b), 4))

# a different class is much further away
c = generate_shape(ShapeKind.CUBE, 256, seed=1)
print("sphere vs cube    CD", round(chamfer(a, c), 4), " HD", round(hausdorff(a, c), 4))

# a perturbation is kept inside an l-inf box of half-width eps around each point
rng = np.random.default_rng(0)
noisy = a.points + rng.normal(scale=0.3, size=a.points.shape)
clipped = linf_clip(noisy, a, eps=0.18)
print("l-inf before clip", round(linf_distortion(a, noisy), 3),
      " after clip", round(linf_distortion(a, clipped), 3))
