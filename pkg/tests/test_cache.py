import numpy as np
import pytest

from kvpack.cache import HeadGeometry, LayerCache, Modality, compression_ratio
from kvpack.compressor import compress_whole_segment
from kvpack.errors import DataError, ParameterError, ShapeError
from kvpack.linalg import FactorPair

from conftest import filled_cache


def test_geometry():
    g = HeadGeometry(8, 2, 16)
    assert g.kv_width == 32 and g.model_width == 128 and g.group_size == 4
    with pytest.raises(ParameterError):
        HeadGeometry(6, 4, 8)


def test_append_counts(geo):
    cache = LayerCache(geo)
    pos = cache.append("visual", np.ones((5, 32)), np.ones((5, 32)))
    seg = cache.segment(Modality.VISUAL)
    assert list(pos) == [0, 1, 2, 3, 4]
    assert seg.num_uncompressed == 5 and seg.num_compressed == 0
    assert len(cache.importance) == 5 and not np.any(cache.importance.scores)


def test_append_after_compression(geo):
    cache = filled_cache(geo, visual=100)
    compress_whole_segment(cache.segment("visual"), 8, 8)
    cache.append("visual", np.ones((1, 32)), np.ones((1, 32)))
    seg = cache.segment("visual")
    assert (seg.num_uncompressed, seg.num_compressed, len(cache)) == (1, 100, 101)


def test_segment_isolation(geo):
    cache = filled_cache(geo, visual=20, text=4)
    before = cache.memory_bytes().segments[Modality.VISUAL]
    k_before = cache.segment("visual").tail_k.copy()
    cache.append("textual", np.ones((3, 32)), np.ones((3, 32)))
    assert cache.memory_bytes().segments[Modality.VISUAL] == before
    assert np.array_equal(cache.segment("visual").tail_k, k_before)
    compress_whole_segment(cache.segment("textual"), 2, 2)
    assert np.array_equal(cache.segment("visual").tail_k, k_before)


def test_append_validation(geo):
    cache = LayerCache(geo)
    with pytest.raises(ShapeError):
        cache.append("visual", np.ones((2, 31)), np.ones((2, 31)))
    with pytest.raises(ShapeError):
        cache.append("visual", np.ones((2, 32)), np.ones((3, 32)))
    with pytest.raises(DataError):
        cache.append("visual", np.full((1, 32), np.inf), np.ones((1, 32)))
    with pytest.raises(ParameterError):
        cache.append("audio", np.ones((1, 32)), np.ones((1, 32)))


def test_memory_uncompressed_half_precision():
    geo = HeadGeometry(4, 4, 16)
    cache = LayerCache(geo, dtype=np.float16)
    cache.append("visual", np.ones((10, 64)), np.ones((10, 64)))
    assert cache.memory_bytes().total == 2560


def test_memory_with_explicit_scalar_width():
    geo = HeadGeometry(4, 4, 16)
    cache = LayerCache(geo, dtype=np.float32)
    cache.append("visual", np.ones((10, 64)), np.ones((10, 64)))
    assert cache.memory_bytes(2).total == 2560
    assert cache.memory_bytes().total == 5120
    assert cache.memory_bytes(2).importance == 20


def test_memory_compressed_key_block():
    geo = HeadGeometry(40, 40, 128)
    cache = LayerCache(geo, dtype=np.float16)
    seg = cache.segment("visual")
    block = FactorPair(np.zeros((1000, 64), np.float16), np.zeros((64, 5120), np.float16))
    seg.set_block(block, block, np.arange(1000))
    assert block.scalar_count() == 391_680
    assert cache.memory_bytes(1).total == 2 * 391_680
    assert cache.dense_bytes(1) == 2 * 1000 * 5120


def test_empty_cache_bytes(geo):
    assert LayerCache(geo).memory_bytes().total == 0


def test_compression_ratio_examples():
    assert compression_ratio(1000, 5120, 64) == pytest.approx(5_120_000 / 391_680)
    assert round(compression_ratio(1000, 5120, 64), 2) == 13.07
    assert compression_ratio(6, 3, 2) == 1.0  # R = T*HD/(T+HD)
    assert compression_ratio(576, 4096, 64) == pytest.approx(2_359_296 / 299_008)
    assert round(compression_ratio(576, 4096, 64), 2) == 7.89
    with pytest.raises(ParameterError):
        compression_ratio(10, 10, 0)


def test_ratio_above_one_iff_below_break_even():
    for t, w in [(10, 20), (100, 64), (576, 4096)]:
        for r in range(1, 60):
            assert (compression_ratio(t, w, r) > 1) == (r < t * w / (t + w))


def test_byte_accounting_matches_storage(geo):
    cache = filled_cache(geo, visual=40, text=6, dtype=np.float32)
    compress_whole_segment(cache.segment("visual"), 5, None)
    seg = cache.segment("visual")
    stored = seg.block_k.left.nbytes + seg.block_k.right.nbytes + seg.block_v.nbytes
    text = cache.segment("textual")
    stored += text.tail_k.nbytes + text.tail_v.nbytes
    assert cache.memory_bytes().total == stored


def test_positions_preserved_through_compression(geo):
    cache = filled_cache(geo, visual=10, text=3)
    cache.append("visual", np.ones((2, 32)), np.ones((2, 32)))
    compress_whole_segment(cache.segment("visual"), 4, 4)
    assert list(cache.segment("visual").positions) == list(range(10)) + [13, 14]
    assert list(cache.positions()) == list(range(10)) + [13, 14] + [10, 11, 12]


def test_copy_is_deep(geo):
    cache = filled_cache(geo, visual=5)
    other = cache.copy()
    other.append("visual", np.ones((1, 32)), np.ones((1, 32)))
    other.importance.scores[:] = 0.5
    assert len(cache) == 5 and not np.any(cache.importance.scores)


def test_unsupported_dtype(geo):
    with pytest.raises(ParameterError):
        LayerCache(geo, dtype=np.int8)
