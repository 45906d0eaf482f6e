"""Choosing a compression rank per layer.

Three schemes: one fixed rank everywhere, a rank growing linearly with depth,
and the smallest rank reaching an explained-variance target (with a cap).
"""

import numpy as np

from kvpack import RankScheme, layer_rank
from kvpack.cache import HeadGeometry
from kvpack.harness import RankProfile, factor_model
from kvpack.linalg import explained_variance_ratio, make_rng

linear = RankScheme.linear(16, 128, num_layers=32)
print("linear 16 -> 128 over 32 layers:", [layer_rank(linear, l) for l in range(0, 32, 4)] + [layer_rank(linear, 31)])

geometry = HeadGeometry(8, 8, 32)
target = RankScheme.variance(0.9, max_rank=64)
for true_rank in (8, 32, 128):
    keys = factor_model(make_rng(true_rank), 400, geometry, RankProfile(rank=true_rank, decay=0.97, noise=0.01))
    r = layer_rank(target, 0, keys)
    print(
        f"true rank {true_rank:3d}: 90% target picks rank {r:2d} "
        f"(explained {explained_variance_ratio(keys, r):.3f})"
    )

print("fixed:", layer_rank(RankScheme.fixed(64), 7), "at every layer")
print("the 90% target on isotropic noise hits the cap:",
      layer_rank(target, 0, np.random.default_rng(0).standard_normal((400, 256))))
