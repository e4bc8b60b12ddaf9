"""Closed-form FLOP and KV-memory proxies for the architecture comparison.

Leading-order terms only, unit constants: the comparisons of interest are
ratios and regime boundaries, not absolute FLOPs.

  joint space-time attention on singles : N^2 L^2 d
  pairformer + temporal attn on pairs   : N^3 L d + (N + N^2) L^2 d
  pairformer + temporal attn on singles : N^3 L d + N L^2 d
"""

from __future__ import annotations

ARCHS = ("st_joint", "pairformer_pair_temporal", "pairformer_single_temporal")


def flops(arch: str, n: int, L: int, d: int = 1) -> float:
    n, L, d = float(n), float(L), float(d)
    if arch == "st_joint":
        return n * n * L * L * d
    if arch == "pairformer_pair_temporal":
        return n**3 * L * d + (n + n * n) * L * L * d
    if arch == "pairformer_single_temporal":
        return n**3 * L * d + n * L * L * d
    raise ValueError(f"unknown architecture {arch!r}; choose from {ARCHS}")


def crossover_L(n: float) -> float:
    """Context length where joint attention and pairformer+singles cost match."""
    if n <= 1:
        raise ValueError("crossover defined for N > 1")
    return n * n / (n - 1.0)


def kv_bytes(variant: str, n: int, L: int, d: int, layers: int = 1, bytes_per_scalar: int = 4) -> int:
    """KV-cache footprint; exact integer arithmetic."""
    if variant == "singles":
        per_layer = n * L * d * bytes_per_scalar
    elif variant == "singles_plus_pairs":
        per_layer = (n + n * n) * L * d * bytes_per_scalar
    else:
        raise ValueError("variant must be 'singles' or 'singles_plus_pairs'")
    return layers * per_layer


def sweep_rows(n_values, L_values, d: int, layers: int = 1, bytes_per_scalar: int = 4):
    """CSV-ready sweep of all proxies; used by the cost-report command."""
    rows = []
    for n in n_values:
        for L in L_values:
            rows.append(
                {
                    "N": n,
                    "L": L,
                    "d": d,
                    "flops_st_joint": flops("st_joint", n, L, d),
                    "flops_pairformer_pair_temporal": flops("pairformer_pair_temporal", n, L, d),
                    "flops_pairformer_single_temporal": flops("pairformer_single_temporal", n, L, d),
                    "kv_singles_bytes": kv_bytes("singles", n, L, d, layers, bytes_per_scalar),
                    "kv_singles_plus_pairs_bytes": kv_bytes("singles_plus_pairs", n, L, d, layers, bytes_per_scalar),
                }
            )
    return rows
