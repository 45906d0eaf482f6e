"""Why compress all KV heads together.

Keys generated from a latent model whose directions are shared across heads
need far fewer singular directions when the heads are concatenated than when
each head is factorized on its own. This script prints both explained
variance curves and then compares reconstruction error at equal storage.
"""

import numpy as np

from kvpack.cache import HeadGeometry
from kvpack.compressor import (
    combined_scalars,
    compress_per_head,
    compress_segment,
    equal_budget_ranks,
    per_head_error,
    per_head_scalars,
    variance_by_head,
)
from kvpack.harness import RankProfile, factor_model
from kvpack.linalg import make_rng

geometry = HeadGeometry(num_query_heads=8, num_kv_heads=8, head_dim=32)
tokens = 576

# 24 latent directions: 16 shared by every head, 8 private to single heads.
profile = RankProfile(rank=24, decay=0.93, shared_dim=16, noise=0.02)
keys = factor_model(make_rng(0), tokens, geometry, profile)

curves = variance_by_head(keys, geometry.num_kv_heads, max_rank=32)
print("rank  combined  per-head")
for r in (1, 2, 4, 8, 16, 24, 32):
    print(f"{r:4d}  {curves['combined'][r - 1]:.4f}    {curves['per_head'][r - 1]:.4f}")

print("\nequal-budget comparison")
for r_head in (1, 2, 4, 8):
    budget = per_head_scalars(tokens, geometry.num_kv_heads, geometry.head_dim, r_head)
    r_comb, _ = equal_budget_ranks(tokens, geometry.num_kv_heads, geometry.head_dim, budget)
    combined = np.linalg.norm(compress_segment(keys, r_comb).reconstruct() - keys)
    per_head = per_head_error(keys, compress_per_head(keys, geometry.num_kv_heads, r_head))
    used = combined_scalars(tokens, geometry.kv_width, r_comb)
    print(
        f"budget {budget:6d} scalars: per-head rank {r_head} error {per_head:8.3f} | "
        f"combined rank {r_comb} ({used} scalars) error {combined:8.3f}"
    )
