import numpy as np
import pytest
from hypothesis import HealthCheck, settings

from kvpack.cache import HeadGeometry, LayerCache, Modality
from kvpack.decoder import AttentionWeights

settings.register_profile(
    "default",
    max_examples=40,
    deadline=None,
    suppress_health_check=[HealthCheck.too_slow],
)
settings.load_profile("default")


def orthonormal(rng, n, k):
    q, _ = np.linalg.qr(rng.standard_normal((n, k)))
    return q


def weighted_outer_products(weights, shape=(32, 32), seed=0):
    """Matrix whose singular values are exactly ``weights``."""
    rng = np.random.default_rng(seed)
    u = orthonormal(rng, shape[0], len(weights))
    v = orthonormal(rng, shape[1], len(weights))
    return (u * np.asarray(weights, dtype=np.float64)) @ v.T


def low_rank(rng, rows, cols, rank, scale=1.0):
    return rng.standard_normal((rows, rank)) @ rng.standard_normal((rank, cols)) * scale / np.sqrt(rank)


def filled_cache(
    geometry,
    visual=0,
    text=0,
    dtype=np.float64,
    seed=0,
    visual_rank=None,
    alpha=0.25,
):
    """Cache with random (optionally low-rank) visual rows and random text rows."""
    rng = np.random.default_rng(seed)
    cache = LayerCache(geometry, dtype=dtype, alpha=alpha)
    w = geometry.kv_width
    if visual:
        if visual_rank:
            k, v = (low_rank(rng, visual, w, visual_rank) for _ in range(2))
        else:
            k, v = rng.standard_normal((2, visual, w))
        cache.append(Modality.VISUAL, k, v)
    if text:
        k, v = rng.standard_normal((2, text, w))
        cache.append(Modality.TEXTUAL, k, v)
    return cache


@pytest.fixture
def geo():
    return HeadGeometry(4, 4, 8)


@pytest.fixture
def gqa():
    return HeadGeometry(4, 2, 8)


@pytest.fixture
def weights_for():
    def make(geometry, seed=0, scale=1.0):
        return AttentionWeights.random(geometry, seed=seed, scale=scale)

    return make


def dense_history(cache):
    """All cached keys and values at full stored rank, in storage order."""
    ks, vs = zip(*(s.dense() for s in cache.ordered_segments())) if cache.segments else ((), ())
    w = cache.width
    k = np.concatenate(ks).astype(np.float64) if ks else np.zeros((0, w))
    v = np.concatenate(vs).astype(np.float64) if vs else np.zeros((0, w))
    return k, v


def decode_errors(cache, weights, cfg, steps, seed=0, t_q=1, history=None):
    """Max-abs output error of each decode step against the dense reference."""
    from kvpack.decoder import decode_step, reference_attention

    rng = np.random.default_rng(seed)
    past_k, past_v = history if history is not None else dense_history(cache)
    errors = []
    for step in range(steps):
        h = rng.standard_normal((t_q, cache.geometry.model_width))
        out, _ = decode_step(h, cache, weights, cfg, step=step)
        ref = reference_attention(h, past_k, past_v, weights, cache.geometry)
        errors.append(float(np.max(np.abs(out.astype(np.float64) - ref))))
        past_k = np.concatenate([past_k, h @ weights.w_k])
        past_v = np.concatenate([past_v, h @ weights.w_v])
    return errors
