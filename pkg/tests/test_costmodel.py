import numpy as np
import pytest

from trajlab.costmodel import ARCHS, crossover_L, flops, kv_bytes, sweep_rows


def test_st_joint_small_case():
    # (N*L)^2 with unit d
    assert flops("st_joint", 2, 2, 1) == 16


def test_single_temporal_ratio_closed_form():
    n, L = 512, 64
    ratio = flops("pairformer_single_temporal", n, L, 7) / flops("st_joint", n, L, 7)
    # (N^3 L + N L^2) / (N^2 L^2) = N/L + 1/N
    assert abs(ratio - (n / L + 1 / n)) < 1e-12
    assert abs(ratio - 8.002) < 1e-3


def test_equal_cost_at_L_equals_N():
    # at L = N the forms differ by exactly the factor 1 + 1/N
    for n in (8, 64, 512):
        ratio = flops("pairformer_single_temporal", n, n, 3) / flops("st_joint", n, n, 3)
        assert abs(ratio - (1.0 + 1.0 / n)) < 1e-12


def test_pair_temporal_formula():
    n, L, d = 10, 4, 2
    expected = n**3 * L * d + (n + n * n) * L * L * d
    assert flops("pairformer_pair_temporal", n, L, d) == expected


def test_unknown_arch_rejected():
    with pytest.raises(ValueError):
        flops("transformer_xl", 4, 4, 4)
    assert set(ARCHS) == {"st_joint", "pairformer_pair_temporal", "pairformer_single_temporal"}


def test_crossover_values():
    assert crossover_L(2) == 4.0
    assert abs(crossover_L(100) - 10000.0 / 99.0) < 1e-12
    assert abs(crossover_L(10**6) / 10**6 - 1.0) < 1e-5
    with pytest.raises(ValueError):
        crossover_L(1)


def test_crossover_is_exact_equality_point():
    for n in (3, 17, 250):
        L = crossover_L(n)
        a = flops("st_joint", n, L, 1)
        b = flops("pairformer_single_temporal", n, L, 1)
        assert abs(a - b) / a < 1e-12


def test_regime_sweep_st_joint_cheaper():
    for n in (16, 64, 256, 1024, 4096):
        L = 4
        while L <= n // 4:
            assert flops("st_joint", n, L) < flops("pairformer_single_temporal", n, L)
            L *= 2


def test_kv_bytes_values_and_ratio():
    assert kv_bytes("singles", 200, 32, 256, 1, 4) == 6_553_600
    assert kv_bytes("singles_plus_pairs", 200, 32, 256, 1, 4) == 1_317_273_600
    for n in (3, 50, 200):
        s = kv_bytes("singles", n, 8, 16, 2, 4)
        p = kv_bytes("singles_plus_pairs", n, 8, 16, 2, 4)
        assert s * (1 + n) == p  # exact ratio 1/(1+N)


def test_sweep_rows_columns():
    rows = sweep_rows([16, 32], [4, 8], 64)
    assert len(rows) == 4
    assert rows[0]["kv_singles_bytes"] == 16 * 4 * 64 * 4
    assert "flops_st_joint" in rows[0]
