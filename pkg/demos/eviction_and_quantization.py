"""Composing low-rank storage with eviction and 4-bit quantization.

Eviction drops the low-importance tier instead of decompressing it at a
reduced rank. Quantization stores the per-token left factors in 4 bits with
one scale and zero-point per 64 values, while the small decompression
matrices stay at full precision.
"""

import numpy as np

from kvpack import DecodeConfig, GroupSpec, LayerCache, quantize_cache
from kvpack.cache import HeadGeometry
from kvpack.decoder import decode_step, prefill_compress
from kvpack.decoder import AttentionWeights
from kvpack.harness import RankProfile, factor_model
from kvpack.linalg import make_rng

geometry = HeadGeometry(8, 8, 64)
rng = make_rng(3)
visual = RankProfile(rank=48, decay=0.95, noise=0.01)
keys = factor_model(rng, 1000, geometry, visual)
values = factor_model(rng, 1000, geometry, visual)

cache = LayerCache(geometry, dtype=np.float16)
cache.append("visual", keys, values)
dense = cache.memory_bytes().total
prefill_compress(cache, DecodeConfig(rank_kv=64, rank_vv=64, svd_method="randomized"))
compressed = cache.memory_bytes().total
quantized = quantize_cache(cache).memory_bytes()
print(f"dense fp16 cache        {dense:9d} bytes")
print(f"rank-64 factors         {compressed:9d} bytes  ({dense / compressed:.1f}x)")
print(f"4-bit left factors      {quantized:9d} bytes  ({dense / quantized:.1f}x)")

# Eviction runs at compression events. Here a short text segment is compressed
# every 8 steps and keeps only its most attended quarter each time.
cfg = DecodeConfig(
    period=8,
    rank_kv=64,
    rank_vv=64,
    rank_kt=16,
    rank_vt=16,
    value_groups=GroupSpec((0.25, 0.75), (16, 4)),
    eviction=True,
)
weights = AttentionWeights.random(geometry, seed=1)
queries = np.random.default_rng(4).standard_normal((32, geometry.model_width))
evicted = 0
for step, h in enumerate(queries):
    _, report = decode_step(h[None], cache, weights, cfg, step)
    evicted += report.evicted
text = cache.segment("textual")
print(f"after 32 steps: {evicted} generated tokens evicted, {len(text)} kept")
