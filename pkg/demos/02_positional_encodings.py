"""Numerical properties of the positional machinery.

1D rotary: attention logits depend only on index differences.
Golden-angle 2D rotary: logits depend only on grid offsets, and the
direction set covers the circle far better than the two axes.
Fourier features: constant norm, bandwidth set by sigma.

Run: python demos/02_positional_encodings.py
"""

import numpy as np

from groundling.posenc import (FourierConfig, RopeConfig, apply_ggrope_2d,
                               apply_rope_1d, fourier_features, ggrope_directions)

rng = np.random.default_rng(0)
cfg = RopeConfig(head_dim=16)

q, k = rng.normal(size=8), rng.normal(size=8)
base = apply_rope_1d(q, 5, cfg) @ apply_rope_1d(k, 2, cfg)
shifted = apply_rope_1d(q, 105, cfg) @ apply_rope_1d(k, 102, cfg)
print(f"1D relative property: |logit(5,2) - logit(105,102)| = {abs(base - shifted):.2e}")

p1, p2, d = np.array([1, 2]), np.array([6, 3]), np.array([20, 11])
a = apply_ggrope_2d(q, p1, cfg) @ apply_ggrope_2d(k, p2, cfg)
b = apply_ggrope_2d(q, p1 + d, cfg) @ apply_ggrope_2d(k, p2 + d, cfg)
print(f"2D translation invariance: |delta| = {abs(a - b):.2e}")

for n in (4, 16, 64):
    dirs = ggrope_directions(n)
    ang = np.sort(np.mod(np.arctan2(dirs[:, 1], dirs[:, 0]), 2 * np.pi))
    gaps = np.diff(np.concatenate([ang, [ang[0] + 2 * np.pi]]))
    print(f"golden directions n={n:>3}: min angular gap "
          f"{np.degrees(gaps.min()):6.2f} deg (uniform would be {360 / n:6.2f})")

fc = FourierConfig(feature_dim=64, sigma=10.0, seed=1)
v = rng.random((5, 2))
g = fourier_features(v, fc)
print(f"\nFourier norm^2 (should all be {fc.feature_dim // 2}):",
      np.round((g ** 2).sum(axis=1), 12))

# kernel view: gamma(u) . gamma(v) falls off with |u - v|, bandwidth ~ 1/sigma
u = np.array([0.5, 0.5])
for eps in (0.0, 0.005, 0.02, 0.1):
    w = u + np.array([eps, 0.0])
    sim = fourier_features(u, fc) @ fourier_features(w, fc) / (fc.feature_dim / 2)
    print(f"  cosine(gamma(u), gamma(u + {eps:5.3f} e_x)) = {sim:+.3f}")
