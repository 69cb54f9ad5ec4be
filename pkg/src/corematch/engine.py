"""Co-adaptive sparse inference: pruned prefill and neuron-sparse decoding.

Prefill runs the dense model, records a sentence-level core-neuron set at
every layer and, at ``prune_layer``, keeps only core tokens (plus protected
ones) for all later layers. Decoding reuses the frozen per-layer core sets:
each new token's FFN only touches the core columns of ``W_u`` and rows of
``W_d``.
"""

from __future__ import annotations

from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np

from . import numerics as nx
from .costs import CostDims, CostReport, cost_report
from .errors import InvalidParam, TooFewPoints
from .model import (
    ActivationTrace,
    LayerTrace,
    Prompt,
    PromptLike,
    Weights,
    as_prompt,
    attend,
    embed_prompt,
    embed_tokens,
    forward_dense,
    head_logits,
    layer_forward,
)
from .sparsity import (
    CoreTokenSelection,
    SentenceCoreSet,
    intersection_counts,
    select_core_tokens,
    sentence_core_neurons,
)


@dataclass(frozen=True)
class SparsityParams:
    rho: float = 0.2
    beta: float = 0.4
    prune_layer: int = 2
    prunable_span: tuple[int, int] | None = None  # None: image block, else whole prompt
    enable_token_pruning: bool = True
    enable_neuron_sparsity: bool = True
    retain_early_kv: bool = True  # layers below prune_layer keep dropped tokens' K/V

    def __post_init__(self) -> None:
        nx.check_fraction(self.rho, "rho")
        nx.check_fraction(self.beta, "beta")
        if self.prune_layer < 0:
            raise InvalidParam("prune_layer must be non-negative")
        if self.prunable_span is not None:
            s, e = self.prunable_span
            if not 0 <= s <= e:
                raise InvalidParam("prunable_span must satisfy 0 <= start <= end")
            object.__setattr__(self, "prunable_span", (int(s), int(e)))

    def check(self, n_layers: int, n_tokens: int) -> None:
        if self.prune_layer >= n_layers:
            raise InvalidParam(f"prune_layer {self.prune_layer} outside [0, {n_layers})")
        if self.prunable_span is not None and self.prunable_span[1] > n_tokens:
            raise InvalidParam(f"prunable_span {self.prunable_span} exceeds the {n_tokens}-token prompt")

    def span_for(self, prompt: Prompt) -> tuple[int, int]:
        if self.prunable_span is not None:
            return self.prunable_span
        return prompt.image_span if prompt.n_image else (0, len(prompt))

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["prunable_span"] = None if self.prunable_span is None else list(self.prunable_span)
        return d


DENSE_PARAMS = SparsityParams(rho=1.0, beta=1.0, enable_token_pruning=False, enable_neuron_sparsity=False)


@dataclass
class KVCache:
    keys: np.ndarray
    values: np.ndarray
    positions: np.ndarray

    def __len__(self) -> int:
        return self.keys.shape[0]

    def append(self, k: np.ndarray, v: np.ndarray, pos: int) -> "KVCache":
        return KVCache(
            np.vstack([self.keys, k]), np.vstack([self.values, v]), np.append(self.positions, pos)
        )


@dataclass(frozen=True)
class PrefillState:
    core_sets: tuple[SentenceCoreSet, ...]
    selection: CoreTokenSelection | None
    caches: tuple[KVCache, ...]
    last_hidden: np.ndarray
    n_prompt: int
    tokens_per_layer: tuple[int, ...]
    generated: tuple[int, ...] = ()

    @property
    def next_position(self) -> int:
        return self.n_prompt + len(self.generated)

    @property
    def kept(self) -> tuple[int, ...]:
        return self.selection.kept if self.selection is not None else tuple(range(self.n_prompt))

    @property
    def degenerate(self) -> str | None:
        return None if self.selection is None else self.selection.degenerate


def _select(counts: np.ndarray, protected: Sequence[int], layer: int) -> CoreTokenSelection:
    try:
        return select_core_tokens(counts, protected, layer)
    except TooFewPoints:
        n = len(counts)
        return CoreTokenSelection(layer, counts, None, tuple(range(n)), tuple(protected), None, "too-few-points")


def protected_tokens(n_tokens: int, span: tuple[int, int]) -> tuple[int, ...]:
    """Everything outside the prunable span, plus the final token."""
    s, e = span
    return tuple(i for i in range(n_tokens) if not s <= i < e or i == n_tokens - 1)


def prefill(
    weights: Weights, prompt: PromptLike, params: SparsityParams = SparsityParams()
) -> tuple[PrefillState, np.ndarray, ActivationTrace]:
    """Process the prompt; returns the state, next-token logits and the trace."""
    cfg = weights.config
    p = as_prompt(prompt)
    n = len(p)
    params.check(cfg.n_layers, n)
    h = embed_prompt(weights, p)
    positions = np.arange(n)
    alive = np.arange(n)  # rows of h, as original positions
    caches: list[KVCache] = []
    core_sets: list[SentenceCoreSet] = []
    traces: list[LayerTrace] = []
    tokens_per_layer: list[int] = []
    selection = None

    for i, lw in enumerate(weights.layers):
        h, tr = layer_forward(lw, cfg, h, i, positions[alive])
        traces.append(tr)
        tokens_per_layer.append(len(alive))
        _, core = sentence_core_neurons(tr.act, params.rho, params.beta, layer=i)
        core_sets.append(core)
        caches.append(KVCache(tr.keys, tr.v, positions[alive].copy()))
        if i == params.prune_layer and params.enable_token_pruning:
            counts = intersection_counts(tr.act, core)
            protected = protected_tokens(len(alive), params.span_for(p))
            selection = _select(counts, protected, i)
            keep = np.asarray(selection.kept, dtype=np.int64)
            h = h[keep]
            alive = alive[keep]
            c = caches[i]
            caches[i] = KVCache(c.keys[keep], c.values[keep], c.positions[keep])
            if not params.retain_early_kv:
                for j in range(i):
                    c = caches[j]
                    caches[j] = KVCache(c.keys[keep], c.values[keep], c.positions[keep])

    logits = head_logits(weights, h)
    trace = ActivationTrace(traces, h, logits)
    state = PrefillState(
        core_sets=tuple(core_sets), selection=selection, caches=tuple(caches),
        last_hidden=h[-1].copy(), n_prompt=n, tokens_per_layer=tuple(tokens_per_layer),
    )
    return state, logits[-1].copy(), trace


def sparse_ffn(lw, cfg, x: np.ndarray, core: SentenceCoreSet | None) -> np.ndarray:
    """FFN restricted to ``core`` neurons; ``None`` means dense."""
    if core is None:
        return nx.activation(x @ lw.wu, cfg.activation) @ lw.wd
    idx = np.asarray(core.neuron_ids, dtype=np.int64)
    return nx.activation(x @ lw.wu[:, idx], cfg.activation) @ lw.wd[idx]


def step_logits(
    state: PrefillState, weights: Weights, params: SparsityParams, token: int
) -> tuple[np.ndarray, PrefillState]:
    """Feed ``token`` at the next position; returns its logits and the new state."""
    cfg = weights.config
    pos = state.next_position
    h = embed_tokens(weights, [token], [pos])
    caches = []
    for i, lw in enumerate(weights.layers):
        a = nx.layer_norm(h, lw.ln1_gain, lw.ln1_bias)
        cache = state.caches[i].append(a @ lw.wk, a @ lw.wv, pos)
        out, _ = attend(a @ lw.wq, cache.keys, cache.values, cfg.n_heads, causal=True)
        mid = h + out @ lw.wo
        x = nx.layer_norm(mid, lw.ln2_gain, lw.ln2_bias)
        core = state.core_sets[i] if params.enable_neuron_sparsity else None
        h = mid + sparse_ffn(lw, cfg, x, core)
        caches.append(cache)
    logits = head_logits(weights, h)[0]
    new = replace(state, caches=tuple(caches), last_hidden=h[0].copy(), generated=state.generated + (int(token),))
    return logits, new


def decode_step(
    state: PrefillState, weights: Weights, params: SparsityParams, last_logits: np.ndarray
) -> tuple[int, np.ndarray, PrefillState]:
    """Greedy step: pick argmax of ``last_logits``, feed it, return (token, logits, state)."""
    token = int(np.argmax(last_logits))
    logits, new = step_logits(state, weights, params, token)
    return token, logits, new


@dataclass
class GenerationResult:
    tokens: list[int]
    cost: CostReport
    reports: dict = field(default_factory=dict)


def _engine_cost(weights: Weights, state: PrefillState, params: SparsityParams, n_generated: int) -> CostReport:
    dims = CostDims.from_config(weights.config)
    caches = [len(c) - len(state.generated) for c in state.caches]
    # resident fraction is the realised core-set size, ceil(beta * d_ffn)
    frac = len(state.core_sets[0]) / weights.config.d_ffn if params.enable_neuron_sparsity else 1.0
    return cost_report(dims, state.n_prompt, state.tokens_per_layer, caches, frac, n_generated)


def generate(
    weights: Weights, prompt: PromptLike, params: SparsityParams = SparsityParams(), max_new_tokens: int = 16
) -> GenerationResult:
    if max_new_tokens < 0:
        raise InvalidParam("max_new_tokens must be non-negative")
    state, logits, _ = prefill(weights, prompt, params)
    tokens: list[int] = []
    first_logits = logits
    for _ in range(max_new_tokens):
        tok, logits, state = decode_step(state, weights, params, logits)
        tokens.append(tok)
    sel = state.selection
    reports = {
        "n_prompt": state.n_prompt,
        "tokens_per_layer": list(state.tokens_per_layer),
        "core_set_sizes": [len(c) for c in state.core_sets],
        "kept": list(state.kept),
        "kept_prunable": None if sel is None else len(sel.kept_prunable),
        "threshold": None if sel is None else sel.threshold,
        "degenerate": state.degenerate,
        "cache_lengths": [len(c) for c in state.caches],
        "first_logits_argmax": int(np.argmax(first_logits)),
    }
    return GenerationResult(tokens, _engine_cost(weights, state, params, len(tokens)), reports)


def generate_dense(weights: Weights, prompt: PromptLike, max_new_tokens: int = 16) -> tuple[list[int], list[np.ndarray]]:
    """Reference generator: full forward over the growing sequence every step.

    Returns the tokens and the logits that chose each of them.
    """
    p = as_prompt(prompt)
    tokens: list[int] = []
    chosen: list[np.ndarray] = []
    for _ in range(max_new_tokens):
        cur = Prompt(p.token_ids + tuple(tokens), image=p.image, image_at=p.image_at)
        logits, _ = forward_dense(weights, cur)
        chosen.append(logits[-1])
        tokens.append(int(np.argmax(logits[-1])))
    return tokens, chosen


@dataclass(frozen=True)
class TokenCountStats:
    kept_prunable: tuple[int, ...]
    n_prunable: tuple[int, ...]
    degenerate: tuple[str | None, ...]

    @property
    def mean_kept(self) -> float:
        return float(np.mean(self.kept_prunable))

    @property
    def degenerate_rate(self) -> float:
        return sum(d is not None for d in self.degenerate) / len(self.degenerate)


def token_count_stats(weights: Weights, prompts: Sequence[PromptLike], params: SparsityParams = SparsityParams()) -> TokenCountStats:
    """Kept prunable-token counts per prompt; no fixed budget is imposed."""
    if not prompts:
        raise InvalidParam("need at least one prompt")
    if not params.enable_token_pruning:
        raise InvalidParam("token pruning is disabled")
    kept, total, flags = [], [], []
    for pr in prompts:
        p = as_prompt(pr)
        state, _, _ = prefill(weights, p, params)
        sel = state.selection
        prot = set(sel.protected)
        kept.append(len(sel.kept_prunable))
        total.append(sum(1 for i in range(len(sel.intersection_counts)) if i not in prot))
        flags.append(sel.degenerate)
    return TokenCountStats(tuple(kept), tuple(total), tuple(flags))
