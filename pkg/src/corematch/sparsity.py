"""Core neurons, activated sets and knee-based core-token selection."""

from __future__ import annotations

import csv
import io
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from . import numerics as nx
from .errors import DegenerateDistribution, InvalidParam


@dataclass(frozen=True)
class TokenCoreSet:
    layer: int
    token: int
    neuron_ids: tuple[int, ...]
    dead: bool = False


@dataclass(frozen=True)
class FrequencyTable:
    layer: int
    counts: np.ndarray
    mass: np.ndarray  # summed positive activation per neuron, used for tie-breaks


@dataclass(frozen=True)
class SentenceCoreSet:
    layer: int
    neuron_ids: tuple[int, ...]
    d_ffn: int

    def mask(self) -> np.ndarray:
        m = np.zeros(self.d_ffn, dtype=bool)
        m[list(self.neuron_ids)] = True
        return m

    def __len__(self) -> int:
        return len(self.neuron_ids)


@dataclass(frozen=True)
class CoreTokenSelection:
    """Outcome of knee thresholding at one layer.

    ``threshold`` is ``None`` when the knee was undefined and every token was
    kept; ``degenerate`` then names the reason.
    """

    layer: int
    intersection_counts: np.ndarray
    threshold: int | None
    kept: tuple[int, ...]
    protected: tuple[int, ...]
    knee_index: int | None = None
    degenerate: str | None = None

    @property
    def dropped(self) -> tuple[int, ...]:
        keep = set(self.kept)
        return tuple(i for i in range(len(self.intersection_counts)) if i not in keep)

    @property
    def kept_prunable(self) -> tuple[int, ...]:
        prot = set(self.protected)
        return tuple(i for i in self.kept if i not in prot)


def activated_set(a_row: np.ndarray) -> frozenset[int]:
    return frozenset(np.flatnonzero(np.asarray(a_row) > 0).tolist())


def token_core_neurons(a_row: np.ndarray, rho: float, layer: int = 0, token: int = 0) -> TokenCoreSet:
    """Top ``ceil(rho * |A+|)`` positive activations, ties to the lower index."""
    rho = nx.check_fraction(rho, "rho")
    a = np.asarray(a_row, dtype=np.float64).ravel()
    pos = np.flatnonzero(a > 0)
    if pos.size == 0:
        return TokenCoreSet(layer, token, (), dead=True)
    k = nx.ceil_fraction(rho, pos.size)
    # stable sort on -a keeps the lower index first among equal activations
    order = pos[np.argsort(-a[pos], kind="stable")]
    return TokenCoreSet(layer, token, tuple(sorted(order[:k].tolist())))


def token_core_mask(acts: np.ndarray, rho: float) -> np.ndarray:
    """Boolean (tokens, d_ffn) membership matrix of every token's core set."""
    acts = np.asarray(acts)
    mask = np.zeros(acts.shape, dtype=bool)
    for t in range(acts.shape[0]):
        ids = token_core_neurons(acts[t], rho).neuron_ids
        mask[t, list(ids)] = True
    return mask


def sentence_core_neurons(
    acts: np.ndarray, rho: float, beta: float, layer: int = 0
) -> tuple[FrequencyTable, SentenceCoreSet]:
    """Frequency of each neuron among token core sets, and the top-beta neurons.

    Ranking is by count, then by summed positive activation over all tokens,
    then by lower neuron index. Exactly ``ceil(beta * d_ffn)`` neurons are
    returned, zero-count ones included if needed.
    """
    acts = np.asarray(acts, dtype=np.float64)
    if acts.ndim != 2 or acts.shape[0] < 1:
        raise InvalidParam("need a (tokens, d_ffn) activation matrix with at least one token")
    beta = nx.check_fraction(beta, "beta")
    d_ffn = acts.shape[1]
    counts = token_core_mask(acts, rho).sum(axis=0).astype(np.int64)
    mass = np.where(acts > 0, acts, 0.0).sum(axis=0)
    k = nx.ceil_fraction(beta, d_ffn)
    # lexsort: last key is primary
    order = np.lexsort((np.arange(d_ffn), -mass, -counts))
    core = tuple(sorted(order[:k].tolist()))
    return FrequencyTable(layer, counts, mass), SentenceCoreSet(layer, core, d_ffn)


def intersection_counts(activated: np.ndarray | Sequence[Iterable[int]], core: SentenceCoreSet) -> np.ndarray:
    """``|Gamma(x_m) & core|`` per token.

    ``activated`` is either a (tokens, d_ffn) activation/boolean matrix or a
    sequence of index sets.
    """
    if isinstance(activated, np.ndarray) and activated.ndim == 2:
        if activated.shape[1] != core.d_ffn:
            raise InvalidParam("activation width does not match the core set")
        gamma = activated > 0
        return (gamma & core.mask()[None, :]).sum(axis=1).astype(np.int64)
    ids = set(core.neuron_ids)
    return np.array([len(ids.intersection(s)) for s in activated], dtype=np.int64)


def select_core_tokens(
    counts: Sequence[int] | np.ndarray, protected: Iterable[int] = (), layer: int = 0
) -> CoreTokenSelection:
    """Keep protected tokens plus prunable tokens at or above the knee threshold.

    The knee is computed over prunable tokens only. An all-equal distribution
    keeps everything and records ``degenerate="all-equal"``; fewer than three
    prunable tokens raises ``TooFewPoints``.
    """
    counts = np.asarray(counts, dtype=np.int64)
    n = counts.size
    prot = tuple(sorted({int(p) for p in protected}))
    if any(p < 0 or p >= n for p in prot):
        raise InvalidParam("protected index outside the token range")
    prot_set = set(prot)
    prunable = [i for i in range(n) if i not in prot_set]
    try:
        threshold, knee = nx.knee_threshold(counts[prunable])
    except DegenerateDistribution:
        return CoreTokenSelection(layer, counts, None, tuple(range(n)), prot, None, "all-equal")
    kept = tuple(i for i in range(n) if i in prot_set or counts[i] >= threshold)
    return CoreTokenSelection(layer, counts, threshold, kept, prot, knee)


def core_set_stability(prefix_sets: Sequence[SentenceCoreSet]) -> list[float]:
    """Jaccard similarity of every set against the last one."""
    if len(prefix_sets) < 2:
        raise InvalidParam("need at least two core sets")
    layers = {s.layer for s in prefix_sets}
    if len(layers) != 1:
        raise InvalidParam("core sets come from different layers")
    last = set(prefix_sets[-1].neuron_ids)
    out = []
    for s in prefix_sets:
        cur = set(s.neuron_ids)
        union = cur | last
        out.append(1.0 if not union else len(cur & last) / len(union))
    return out


# ------------------------------------------------------------------ export

CSV_SCHEMA_VERSION = 1
CSV_HEADER = ("layer", "id", "count", "kept")


def frequency_rows(table: FrequencyTable, core: SentenceCoreSet) -> list[tuple[int, int, int, int]]:
    mask = core.mask()
    return [(table.layer, n, int(c), int(mask[n])) for n, c in enumerate(table.counts)]


def selection_rows(sel: CoreTokenSelection) -> list[tuple[int, int, int, int]]:
    kept = set(sel.kept)
    return [(sel.layer, i, int(c), int(i in kept)) for i, c in enumerate(sel.intersection_counts)]


def to_csv(rows: Iterable[Sequence], header: Sequence[str] = CSV_HEADER) -> str:
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(header)
    w.writerows(rows)
    return buf.getvalue()
