"""Closed-form FLOPs and memory accounting.

Convention: one multiply-accumulate counts as 2 FLOPs. Per layer and per
token processed, with ``n`` the number of keys attended over:

* attention projections (q, k, v, o): ``8 d^2``
* attention scores and weighted values: ``4 n d``
* FFN: ``4 d m`` for a two-matrix FFN, ``6 d m`` for a gated one

Prefill processes every surviving token at every layer with causal attention
counted at full length ``n`` (no triangle discount). Decode processes one
token per step; its FFN term is scaled by the resident neuron fraction.
Every emitted token adds an LM-head term ``2 d V``. Layer norms, softmax and
activations are ignored.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

from . import numerics as nx
from .errors import InvalidParam
from .model import ModelConfig

CONVENTION = (
    "MAC=2 FLOPs; per layer per token: 8d^2 (qkvo) + 4nd (scores+values) + "
    "4dm or 6dm gated (FFN, x beta when decoding sparse); 2dV per emitted token"
)
COST_SCHEMA_VERSION = 1


@dataclass(frozen=True)
class CostDims:
    n_layers: int
    d_model: int
    d_ffn: int
    n_heads: int
    vocab: int
    gated_ffn: bool = False

    def __post_init__(self) -> None:
        for name in ("n_layers", "d_model", "d_ffn", "n_heads", "vocab"):
            if int(getattr(self, name)) < 1:
                raise InvalidParam(f"{name} must be positive")

    @classmethod
    def from_config(cls, cfg: ModelConfig) -> "CostDims":
        return cls(cfg.n_layers, cfg.d_model, cfg.d_ffn, cfg.n_heads, cfg.vocab_size, gated_ffn=False)

    @property
    def ffn_matrices(self) -> int:
        return 3 if self.gated_ffn else 2


PRESETS: dict[str, CostDims] = {
    "llava7b": CostDims(32, 4096, 11008, 32, 32000, gated_ffn=True),
    "llava13b": CostDims(40, 5120, 13824, 40, 32000, gated_ffn=True),
}


def layer_token_flops(dims: CostDims, n_context: int, ffn_fraction: float = 1.0) -> float:
    d, m = dims.d_model, dims.d_ffn
    return 8.0 * d * d + 4.0 * n_context * d + ffn_fraction * 2.0 * dims.ffn_matrices * d * m


def head_flops(dims: CostDims) -> float:
    return 2.0 * dims.d_model * dims.vocab


def prefill_flops(dims: CostDims, tokens_per_layer: Sequence[int]) -> float:
    """Prefill cost given how many tokens each layer processes."""
    if len(tokens_per_layer) != dims.n_layers:
        raise InvalidParam("need one token count per layer")
    total = 0.0
    for n in tokens_per_layer:
        if n < 1:
            raise InvalidParam("every layer must process at least one token")
        total += n * layer_token_flops(dims, n)
    return total + head_flops(dims)


def decode_flops(dims: CostDims, cache_per_layer: Sequence[int], ffn_fraction: float = 1.0) -> float:
    """One decode step; ``cache_per_layer`` counts cached keys before the step."""
    if len(cache_per_layer) != dims.n_layers:
        raise InvalidParam("need one cache length per layer")
    return sum(layer_token_flops(dims, n + 1, ffn_fraction) for n in cache_per_layer) + head_flops(dims)


@dataclass(frozen=True)
class CostReport:
    prefill_flops_dense: float
    prefill_flops_sparse: float
    decode_flops_per_token_dense: float
    decode_flops_per_token_sparse: float
    decode_flops_total_dense: float
    decode_flops_total_sparse: float
    kv_cache_entries_dense: int
    kv_cache_entries_sparse: int
    ffn_weight_fraction_resident: float
    token_counts: tuple[int, ...]
    n_generated: int = 0
    convention: str = CONVENTION
    schema_version: int = COST_SCHEMA_VERSION

    @property
    def prefill_ratio(self) -> float:
        return self.prefill_flops_sparse / self.prefill_flops_dense

    @property
    def decode_ratio(self) -> float:
        return self.decode_flops_per_token_sparse / self.decode_flops_per_token_dense

    @property
    def total_flops_dense(self) -> float:
        return self.prefill_flops_dense + self.decode_flops_total_dense

    @property
    def total_flops_sparse(self) -> float:
        return self.prefill_flops_sparse + self.decode_flops_total_sparse

    def to_dict(self) -> dict:
        out = asdict(self)
        out["token_counts"] = list(self.token_counts)
        out["prefill_ratio"] = self.prefill_ratio
        out["decode_ratio"] = self.decode_ratio
        return out


def _caches(n_layers: int, prune_layer: int, n_full: int, n_after: int, retain_early: bool) -> list[int]:
    early = n_full if retain_early else n_after
    return [early if i < prune_layer else n_after for i in range(n_layers)]


def cost_report(
    dims: CostDims,
    n_prompt: int,
    tokens_per_layer: Sequence[int],
    cache_per_layer: Sequence[int],
    ffn_fraction: float,
    n_generated: int = 0,
) -> CostReport:
    """Dense-vs-sparse report from explicit per-layer token and cache counts."""
    L = dims.n_layers
    if len(cache_per_layer) != L:
        raise InvalidParam("need one cache length per layer")
    if n_generated < 0:
        raise InvalidParam("n_generated must be non-negative")
    dense_tokens = [n_prompt] * L
    dec_dense = [decode_flops(dims, [n_prompt + t] * L) for t in range(n_generated)]
    dec_sparse = [
        decode_flops(dims, [c + t for c in cache_per_layer], ffn_fraction) for t in range(n_generated)
    ]
    first_dense = decode_flops(dims, dense_tokens)
    first_sparse = decode_flops(dims, list(cache_per_layer), ffn_fraction)
    return CostReport(
        prefill_flops_dense=prefill_flops(dims, dense_tokens),
        prefill_flops_sparse=prefill_flops(dims, tokens_per_layer),
        decode_flops_per_token_dense=first_dense,
        decode_flops_per_token_sparse=first_sparse,
        decode_flops_total_dense=float(sum(dec_dense)),
        decode_flops_total_sparse=float(sum(dec_sparse)),
        kv_cache_entries_dense=L * (n_prompt + n_generated),
        kv_cache_entries_sparse=int(sum(cache_per_layer)) + L * n_generated,
        ffn_weight_fraction_resident=ffn_fraction,
        token_counts=tuple(int(n) for n in tokens_per_layer),
        n_generated=n_generated,
    )


def flops_model(
    dims: CostDims,
    n_prompt: int,
    n_kept: int,
    prune_layer: int,
    beta: float,
    n_generated: int = 0,
    neuron_sparsity: bool = True,
    retain_early_kv: bool = True,
) -> CostReport:
    """Closed-form cost of a run that keeps ``n_kept`` tokens from ``prune_layer`` on.

    Layers below ``prune_layer`` see all ``n_prompt`` tokens, the rest see
    ``n_kept``. Decoding scales FFN work by ``beta`` when neuron sparsity is on.
    """
    if n_prompt < 1 or n_kept < 1:
        raise InvalidParam("token counts must be positive")
    if n_kept > n_prompt:
        raise InvalidParam("n_kept cannot exceed n_prompt")
    if not 0 <= prune_layer < dims.n_layers:
        raise InvalidParam(f"prune_layer must lie in [0, {dims.n_layers})")
    beta = nx.check_fraction(beta, "beta")
    tokens = [n_prompt if i < prune_layer else n_kept for i in range(dims.n_layers)]
    caches = _caches(dims.n_layers, prune_layer, n_prompt, n_kept, retain_early_kv)
    frac = beta if neuron_sparsity else 1.0
    return cost_report(dims, n_prompt, tokens, caches, frac, n_generated)


def memory_model(
    dims: CostDims, n_cached_dense: int, n_cached_sparse: int, beta: float, bytes_per_value: int = 2
) -> dict[str, float]:
    """KV-cache and resident FFN weight bytes, dense vs sparse."""
    if n_cached_dense < 1 or n_cached_sparse < 1 or bytes_per_value < 1:
        raise InvalidParam("cache lengths and bytes_per_value must be positive")
    if n_cached_sparse > n_cached_dense:
        raise InvalidParam("sparse cache cannot exceed the dense cache")
    beta = nx.check_fraction(beta, "beta")
    L, d = dims.n_layers, dims.d_model
    kv = lambda n: 2 * L * n * d * bytes_per_value  # noqa: E731
    ffn = L * dims.ffn_matrices * d * dims.d_ffn * bytes_per_value
    out = {
        "kv_bytes_dense": float(kv(n_cached_dense)),
        "kv_bytes_sparse": float(kv(n_cached_sparse)),
        "ffn_bytes_dense": float(ffn),
        "ffn_bytes_sparse": float(beta * ffn),
    }
    out["kv_ratio"] = out["kv_bytes_sparse"] / out["kv_bytes_dense"]
    out["ffn_ratio"] = out["ffn_bytes_sparse"] / out["ffn_bytes_dense"]
    return out
