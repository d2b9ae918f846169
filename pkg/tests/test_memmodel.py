import math

import pytest
from hypothesis import given
from hypothesis import strategies as st

from kvpareto.memmodel import (GB, ArchSpec, MemoryProfile, MemQuery, baseline_query, builtin_arch,
                               builtin_arch_names, kv_bytes, lm_head_peak, load_arch, memory_reduction, mha_peak,
                               model_bytes, resolve_arch, total_memory)
from kvpareto.structured import ConfigError

TINY = ArchSpec("tiny", param_count=1000, layers=3, heads=4, kv_heads=2, head_dim=8, vocab_size=10)
QWEN3B_LIKE = ArchSpec("q", param_count=3_000_000_000, layers=36, heads=16, kv_heads=2, head_dim=128,
                       vocab_size=151_936)

# bf16 baseline GB, frontier (k, v), reduction percent
TABLE = {
    "qwen2.5-3b": (11.49, (4, 4), 73),
    "llama3.2-3b": (14.10, (4, 4), 76),
    "qwen2.5-7b": (24.90, (8, 8), 68),
    "llama3.1-8b": (26.91, (8, 2), 75),
    "mistral-v0.3-7b": (24.34, (4, 4), 78),
}


def test_kv_hand_examples():
    assert kv_bytes(MemQuery(context=4), TINY) == 768
    assert kv_bytes(MemQuery(context=0), TINY) == 0
    assert kv_bytes(MemQuery(context=4, k_bits=8, v_bits=2), TINY) == 240


def test_kv_group_overhead():
    q = MemQuery(context=4, k_bits=4, v_bits=4, count_group_overhead=True, group_size=32)
    assert kv_bytes(q, TINY) == 192 * (4 + 1) / 8 * 2
    assert kv_bytes(q.replace(k_bits=16, v_bits=16), TINY) == 768  # full precision has no code book


def test_mha_peak_examples():
    q = MemQuery(context=10_000)
    assert mha_peak(q, QWEN3B_LIKE) == pytest.approx(3.2 * GB)
    assert mha_peak(q.replace(chunk=256), QWEN3B_LIKE) == 16 * 256 * 10_000 * 2
    assert mha_peak(q.replace(chunk=256), QWEN3B_LIKE) / 1e6 == pytest.approx(81.92)
    assert mha_peak(q.replace(attention="flash"), QWEN3B_LIKE) == 98_304


def test_lm_head_peak_examples():
    assert lm_head_peak(MemQuery(context=10_000), QWEN3B_LIKE) / GB == pytest.approx(3.04, abs=0.005)
    assert lm_head_peak(MemQuery(context=1), QWEN3B_LIKE) == 151_936 * 2
    with pytest.raises(ValueError):
        ArchSpec("bad", 1, 1, 1, 1, 1, vocab_size=0)


def test_total_is_sum_and_peak_is_max():
    p = total_memory(MemQuery(context=100, chunk=10), TINY)
    assert p.total_bytes == p.model_bytes + p.kv_bytes + p.peak_activation_bytes
    assert p.peak_activation_bytes == max(p.mha_peak_bytes, p.lm_head_peak_bytes)
    assert set(p.breakdown()) == {"model", "kv_cache", "peak_activation", "total"}


def test_reduction_trivia():
    p = MemoryProfile(100.0, 50.0, 50.0, 50.0, 1.0)
    assert memory_reduction(p, p) == 0
    assert memory_reduction(p, MemoryProfile(25.0, 12.5, 12.5, 12.5, 0.0)) == 75


def test_pc_equals_sdpa_at_full_chunk():
    q = MemQuery(context=512)
    assert mha_peak(q.replace(chunk=512), QWEN3B_LIKE) == mha_peak(q, QWEN3B_LIKE)
    assert total_memory(q.replace(chunk=4096), QWEN3B_LIKE) == total_memory(q, QWEN3B_LIKE)


@given(st.integers(2, 200_000), st.sampled_from([16, 8, 4]), st.sampled_from([16, 8, 4, 2]),
       st.sampled_from([16, 8, 4, 2]), st.booleans())
def test_total_strictly_decreases_with_fewer_bits(m, wb, kb, vb, overhead):
    a = builtin_arch("llama3.1-8b")
    q = MemQuery(context=m, weight_bits=wb, k_bits=kb, v_bits=vb, count_group_overhead=overhead)
    t = total_memory(q, a).total_bytes
    lower = {16: 8, 8: 4, 4: 2}
    for field, bits in (("weight_bits", wb), ("k_bits", kb), ("v_bits", vb)):
        if bits in lower and not (field == "weight_bits" and bits == 4):
            assert total_memory(q.replace(**{field: lower[bits]}), a).total_bytes < t
    c = max(1, m // 3)
    if c < m:
        assert total_memory(q.replace(chunk=c), a).total_bytes < t


@pytest.mark.parametrize("name", sorted(TABLE))
def test_table_reproduction(name):
    base_gb, (k, v), red = TABLE[name]
    a = builtin_arch(name)
    base = total_memory(baseline_query(), a)
    opt = total_memory(MemQuery(weight_bits=4, k_bits=k, v_bits=v, chunk=256), a)
    assert abs(base.total_bytes / GB - base_gb) <= 0.15 * base_gb
    r = memory_reduction(base, opt)
    assert abs(r - red) <= 8
    assert 60 <= r <= 86


def test_128k_ordering_every_arch():
    m = 131_072
    for name in builtin_arch_names():
        a = builtin_arch(name)
        w16 = total_memory(MemQuery(context=m), a).total_bytes
        k8 = total_memory(MemQuery(context=m, weight_bits=4, k_bits=8, v_bits=8, chunk=1024), a).total_bytes
        k4 = total_memory(MemQuery(context=m, weight_bits=4, k_bits=4, v_bits=4, chunk=1024), a).total_bytes
        fl = total_memory(MemQuery(context=m, weight_bits=4, k_bits=4, v_bits=4, chunk=1024, attention="flash"),
                          a).total_bytes
        assert w16 > k8 > k4 > fl, name
        nopc = total_memory(MemQuery(context=m, weight_bits=4, k_bits=8, v_bits=8), a).total_bytes
        assert 1 - k8 / nopc >= 0.15


def test_w4_keeps_embeddings_at_16_bits():
    tied = ArchSpec("t", 10_000, 1, 2, 2, 4, 100, tie_word_embeddings=True)
    untied = ArchSpec("u", 10_000, 1, 2, 2, 4, 100)
    assert model_bytes(MemQuery(weight_bits=4), tied) == (10_000 - 800) * 0.5 + 800 * 2
    assert model_bytes(MemQuery(weight_bits=4), untied) == (10_000 - 1600) * 0.5 + 1600 * 2
    assert model_bytes(MemQuery(), untied) == 20_000
    over = MemQuery(weight_bits=4, count_group_overhead=True)
    assert over.weight_bits_effective == 4.25


def test_query_validation():
    for kw in ({"context": -1}, {"chunk": 0}, {"attention": "paged"}, {"b_q": 0}, {"delta": -1}):
        with pytest.raises(ValueError):
            MemQuery(**kw)


def test_builtin_archs_have_sources():
    names = builtin_arch_names()
    assert names == sorted(TABLE)
    for n in names:
        a = builtin_arch(n)
        assert a.name == n and a.source
        assert a.hidden == a.heads * a.head_dim
    with pytest.raises(ValueError, match="unknown architecture"):
        builtin_arch("gpt-2")


def test_load_arch_file(tmp_path):
    p = tmp_path / "a.yaml"
    p.write_text("name: x\nparam_count: 1.5e9\nlayers: 2\nheads: 4\nkv_heads: 2\nhead_dim: 8\nvocab_size: 9\n")
    a = resolve_arch(str(p))
    assert a.param_count == 1_500_000_000 and not a.tie_word_embeddings


def test_load_arch_errors(tmp_path):
    p = tmp_path / "a.yaml"
    p.write_text("name: x\nparam_count: 10\nlayers: 2\nheads: 4\nkv_heads: 2\nhead_dim: 8\nvocab_size: 9\nrope: 1\n")
    with pytest.raises(ConfigError) as e:
        load_arch(p)
    assert e.value.line == 8 and "rope" in str(e.value)
    p.write_text("name: x\nlayers: 2\n")
    with pytest.raises(ConfigError, match="param_count"):
        load_arch(p)
    p.write_text("name: x\nparam_count: 10\nlayers: 2\nheads: 4\nkv_heads: 3\nhead_dim: 8\nvocab_size: 9\n")
    with pytest.raises(ConfigError):
        load_arch(p)


def test_memory_is_linear_in_batch():
    q = MemQuery(context=1000, chunk=100)
    one, four = total_memory(q, TINY), total_memory(q.replace(batch=4), TINY)
    assert four.kv_bytes == 4 * one.kv_bytes
    assert math.isclose(four.peak_activation_bytes, 4 * one.peak_activation_bytes)


@pytest.mark.parametrize("gran", ["per-token", "per-seq", "per-tensor"])
@pytest.mark.parametrize("group", [32, 64])
def test_overhead_matches_cache_per_granularity(gran, group):
    import numpy as np

    from kvpareto.kvcache import KVCache, KVCacheConfig
    from kvpareto.memmodel import arch_from_model
    from kvpareto.model import ModelConfig, RunConfig, build_induction_model, forward_prefill

    cfg, w = build_induction_model(64, ModelConfig(max_positions=256), mix_seed=0, key_offset=3.0)
    kv = KVCacheConfig.mixed(4, 2, layers=cfg.layers, heads_kv=cfg.kv_heads, head_dim=cfg.head_dim,
                             granularity=gran, group_size=group)
    cache = KVCache(kv)
    forward_prefill(w, RunConfig(None, kv.k_spec, kv.v_spec), np.arange(256) % 64, cache)
    q = MemQuery(context=256, k_bits=4, v_bits=2, group_size=group, kv_granularity=gran, count_group_overhead=True)
    assert cache.stored_bytes(True) == kv_bytes(q, arch_from_model(cfg))


def test_overhead_ordering_by_granularity():
    q = MemQuery(context=4096, k_bits=4, v_bits=4, count_group_overhead=True)
    by = {g: kv_bytes(q.replace(kv_granularity=g), QWEN3B_LIKE) for g in ("per-token", "per-seq", "per-tensor")}
    codes = kv_bytes(q.replace(count_group_overhead=False), QWEN3B_LIKE)
    assert by["per-token"] > by["per-seq"] > by["per-tensor"] > codes
    assert by["per-tensor"] - codes == 2 * 36 * 4  # one 16-bit scale and zero per layer for K and V
    with pytest.raises(ValueError):
        MemQuery(kv_granularity="per-row")
