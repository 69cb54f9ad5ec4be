"""Token-importance criteria and numerical validators.

Three per-token scores are computed from one traced attention layer with
reference token ``M`` (default: the last row):

* attention: head-averaged ``alpha[:, M, i]``
* exact projection: signed projection of token ``i``'s contribution to the
  attention output ``O_M`` onto ``O_M``; these sum to ``|O_M|``
* approximate projection: the same contribution projected onto ``M``'s own
  contribution, i.e. assuming ``O_M`` is dominated by the self term

With several heads, token ``i``'s contribution is the concatenation over heads
of ``alpha_h[M, i] * V_h[i]``, which is what actually sums to ``O_M``.

The validators turn proportionality claims into correlation statements and
report them; they never raise on a failed claim.
"""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np
from scipy import stats

from . import numerics as nx
from .errors import InvalidParam, ZeroVector
from .model import ActivationTrace, LayerTrace, Weights, orthogonality_deviation, qk_deviation, split_heads
from .sparsity import SentenceCoreSet, intersection_counts

MIN_SAMPLES = 30
TOPK = (8, 16, 32)

OBSERVATION1_THRESHOLD = 0.1
OBSERVATION2_THRESHOLD = 0.8
INSIGHT1_THRESHOLD = 0.6
INSIGHT2_THRESHOLD = 0.8
MATCHING_THRESHOLD = 0.6
MATCHING_OVERLAP_THRESHOLD = 0.6
LEMMA_TOL = 1e-9


# ---------------------------------------------------------------- criteria


def _ref(tr: LayerTrace, M: int | None) -> int:
    M = tr.n_tokens - 1 if M is None else int(M)
    if not 0 <= M < tr.n_tokens:
        raise InvalidParam(f"reference token {M} outside [0, {tr.n_tokens})")
    return M


def contributions(tr: LayerTrace, M: int | None = None, head: int | None = None) -> tuple[np.ndarray, np.ndarray]:
    """Per-token contribution vectors to ``O_M`` and ``O_M`` itself.

    ``head`` restricts both to one head's slice.
    """
    M = _ref(tr, M)
    n_heads = tr.alpha.shape[0]
    alpha = tr.alpha[:, M, :]  # (H, T)
    vh = split_heads(np.asarray(tr.v, np.float64), n_heads)  # (H, T, dh)
    w = alpha[:, :, None] * vh
    o = np.asarray(tr.attn_out[M], np.float64)
    if head is not None:
        if not 0 <= head < n_heads:
            raise InvalidParam(f"head {head} outside [0, {n_heads})")
        dh = vh.shape[-1]
        return w[head], o[head * dh:(head + 1) * dh]
    return w.transpose(1, 0, 2).reshape(tr.n_tokens, -1), o


def attention_criterion(trace: ActivationTrace, layer: int, M: int | None = None) -> np.ndarray:
    tr = trace[layer]
    return tr.alpha[:, _ref(tr, M), :].mean(axis=0)


def exact_projection_criterion(
    trace: ActivationTrace, layer: int, M: int | None = None, head: int | None = None
) -> np.ndarray:
    w, o = contributions(trace[layer], M, head)
    norm = np.linalg.norm(o)
    if norm == 0.0:
        raise ZeroVector("attention output of the reference token is zero")
    return w @ o / norm


def approx_projection_criterion(
    trace: ActivationTrace, layer: int, M: int | None = None, head: int | None = None
) -> np.ndarray:
    tr = trace[layer]
    M = _ref(tr, M)
    w, _ = contributions(tr, M, head)
    norm = np.linalg.norm(w[M])
    if norm == 0.0:
        raise ZeroVector("self contribution of the reference token is zero")
    return w @ w[M] / norm


@dataclass
class CriterionReport:
    layer: int
    reference: int
    positions: np.ndarray
    attention_score: np.ndarray
    exact_projection: np.ndarray
    approx_projection: np.ndarray
    intersection_count: np.ndarray | None = None

    def rows(self) -> list[dict]:
        out = []
        for i in range(len(self.positions)):
            out.append({
                "layer": self.layer,
                "token": i,
                "position": int(self.positions[i]),
                "attention": float(self.attention_score[i]),
                "exact_projection": float(self.exact_projection[i]),
                "approx_projection": float(self.approx_projection[i]),
                "intersection": None if self.intersection_count is None else int(self.intersection_count[i]),
            })
        return out


def criterion_report(
    trace: ActivationTrace, layer: int, M: int | None = None, core: SentenceCoreSet | None = None
) -> CriterionReport:
    tr = trace[layer]
    M = _ref(tr, M)
    counts = None if core is None else intersection_counts(tr.act, core)
    return CriterionReport(
        layer=layer,
        reference=M,
        positions=np.asarray(tr.positions),
        attention_score=attention_criterion(trace, layer, M),
        exact_projection=exact_projection_criterion(trace, layer, M),
        approx_projection=approx_projection_criterion(trace, layer, M),
        intersection_count=counts,
    )


# -------------------------------------------------------------- validation


@dataclass
class ValidationSummary:
    """Result of one validator.

    ``verdict`` is ``"pass"``, ``"fail"`` or ``"insufficient"``; correlation
    validators return ``"insufficient"`` below ``MIN_SAMPLES`` samples or when
    either variable is constant.
    """

    name: str
    verdict: str
    metric: str
    statistic: float | None
    threshold: float
    sample_count: int
    pearson_r: float | None = None
    spearman_r: float | None = None
    bins: list[dict] = field(default_factory=list)
    details: dict = field(default_factory=dict)

    @property
    def passed(self) -> bool:
        return self.verdict == "pass"

    def to_dict(self) -> dict:
        return _jsonable(asdict(self))


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.integer,)):
        return int(obj)
    if isinstance(obj, (np.floating, float)):
        f = float(obj)
        return f if math.isfinite(f) else None
    if isinstance(obj, np.bool_):
        return bool(obj)
    return obj


def binned_means(x: np.ndarray, y: np.ndarray, n_bins: int = 10) -> list[dict]:
    x, y = np.asarray(x, np.float64), np.asarray(y, np.float64)
    if x.size == 0:
        return []
    lo, hi = float(x.min()), float(x.max())
    if lo == hi:
        return [{"x_lo": lo, "x_hi": hi, "y_mean": float(y.mean()), "n": int(x.size)}]
    edges = np.linspace(lo, hi, n_bins + 1)
    idx = np.clip(np.searchsorted(edges, x, side="right") - 1, 0, n_bins - 1)
    out = []
    for b in range(n_bins):
        sel = idx == b
        if sel.any():
            out.append({"x_lo": float(edges[b]), "x_hi": float(edges[b + 1]),
                        "y_mean": float(y[sel].mean()), "n": int(sel.sum())})
    return out


def _correlations(x: np.ndarray, y: np.ndarray) -> tuple[float | None, float | None]:
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return None, None
    return float(stats.pearsonr(x, y)[0]), float(stats.spearmanr(x, y)[0])


def _summary(name: str, x, y, metric: str, threshold: float, details: dict) -> ValidationSummary:
    x, y = np.asarray(x, np.float64), np.asarray(y, np.float64)
    ok = np.isfinite(x) & np.isfinite(y)
    x, y = x[ok], y[ok]
    pr, sr = _correlations(x, y)
    stat = pr if metric == "pearson" else sr
    if x.size < MIN_SAMPLES or stat is None:
        verdict = "insufficient"
    else:
        verdict = "pass" if stat >= threshold else "fail"
    return ValidationSummary(
        name=name, verdict=verdict, metric=metric, statistic=stat, threshold=threshold,
        sample_count=int(x.size), pearson_r=pr, spearman_r=sr,
        bins=binned_means(x, y), details=details,
    )


def _pairs(n: int, M: int, mode: str) -> tuple[np.ndarray, np.ndarray]:
    if mode == "last":
        i = np.array([t for t in range(n) if t != M], dtype=np.int64)
        return i, np.full(i.size, M)
    if mode == "all":
        i, j = np.triu_indices(n, k=1)
        return i, j
    raise InvalidParam(f"pair mode must be 'last' or 'all', got {mode!r}")


def _pair_cos(X: np.ndarray, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    X = np.asarray(X, np.float64)
    norms = np.linalg.norm(X, axis=1)
    with np.errstate(invalid="ignore", divide="ignore"):
        c = np.einsum("pd,pd->p", X[i], X[j]) / (norms[i] * norms[j])
    return np.clip(c, -1.0, 1.0)


def _null_pearson(x: np.ndarray, y: np.ndarray, seed: int) -> float | None:
    ok = np.isfinite(x) & np.isfinite(y)
    x, y = x[ok], y[ok]
    if x.size < 2 or np.ptp(x) == 0 or np.ptp(y) == 0:
        return None
    return float(stats.pearsonr(x, np.random.default_rng(seed).permutation(y))[0])


def validate_observation1(weights: Weights, threshold: float = OBSERVATION1_THRESHOLD) -> ValidationSummary:
    """Orthogonality deviations of W_q W_k^T, W_v, W_o, W_u and W_d per layer.

    Descriptive: pass when every deviation is at most ``threshold``.
    """
    per_layer = []
    broken = []
    for i, lw in enumerate(weights.layers):
        qk, theta_hat = qk_deviation(lw.wq, lw.wk)
        row = {
            "layer": i,
            "qk": qk,
            "theta_hat": theta_hat,
            "wv": orthogonality_deviation(lw.wv),
            "wo": orthogonality_deviation(lw.wo),
            "wu": orthogonality_deviation(lw.wu),
            "wd": orthogonality_deviation(lw.wd),
            # W_d W_d^T on the d_ffn side: the angle-preservation premise
            "wd_rows": orthogonality_deviation(lw.wd, side="rows"),
        }
        per_layer.append(row)
        broken += [f"layer {i}: {k}" for k in ("qk", "wv", "wo", "wu", "wd") if row[k] > threshold]
    worst = max(max(r[k] for k in ("qk", "wv", "wo", "wu", "wd")) for r in per_layer)
    return ValidationSummary(
        name="observation1", verdict="fail" if broken else "pass",
        metric="max_orthogonality_deviation", statistic=worst, threshold=threshold,
        sample_count=5 * len(per_layer),
        details={"layers": per_layer, "broken_premises": broken},
    )


def validate_observation2(
    trace: ActivationTrace, layer: int, M: int | None = None, pairs: str = "all",
    threshold: float = OBSERVATION2_THRESHOLD, seed: int = 0,
) -> ValidationSummary:
    """Pearson r between cos(A_i, A_j) and the size of the co-activated set."""
    tr = trace[layer]
    A = np.asarray(tr.act, np.float64)
    i, j = _pairs(tr.n_tokens, _ref(tr, M), pairs)
    gamma = A > 0
    overlap = (gamma[i] & gamma[j]).sum(axis=1).astype(np.float64)
    cos = _pair_cos(A, i, j)
    return _summary(
        "observation2", overlap, cos, "pearson", threshold,
        {"layer": layer, "pairs": pairs, "null_pearson": _null_pearson(overlap, cos, seed)},
    )


def validate_insight1(
    trace: ActivationTrace, layer: int, M: int | None = None, tokens: Sequence[int] | None = None,
    threshold: float = INSIGHT1_THRESHOLD, weights: Weights | None = None,
) -> ValidationSummary:
    """Spearman between exact projections and cos(y_i, y_M).

    ``y`` is the residual stream entering the attention block. Passing
    ``weights`` records the Observation-1 premise next to the result.
    """
    tr = trace[layer]
    M = _ref(tr, M)
    proj = exact_projection_criterion(trace, layer, M)
    cos = nx.cosine_rows(tr.resid_in, tr.resid_in[M])
    idx = _token_subset(tr.n_tokens, M, tokens)
    details: dict = {"layer": layer, "reference": M}
    if weights is not None:
        lw = weights.layers[layer]
        details["premise"] = {"qk": qk_deviation(lw.wq, lw.wk)[0], "wv": orthogonality_deviation(lw.wv)}
    return _summary("insight1", cos[idx], proj[idx], "spearman", threshold, details)


def angle_gaps(A: np.ndarray, w_down: np.ndarray, i: np.ndarray, j: np.ndarray) -> np.ndarray:
    """|cos(A_i W, A_j W) - cos(A_i, A_j)| for each pair."""
    A = np.asarray(A, np.float64)
    Y = A @ np.asarray(w_down, np.float64)
    return np.abs(_pair_cos(Y, i, j) - _pair_cos(A, i, j))


def angle_preservation_gap(A: np.ndarray, w_down: np.ndarray, n_pairs: int = 1000, seed: int = 0) -> float:
    """Max angle change over ``n_pairs`` random row pairs of ``A`` under ``A @ w_down``."""
    A = np.asarray(A, np.float64)
    if A.shape[0] < 2:
        raise InvalidParam("need at least two rows")
    rng = np.random.default_rng(seed)
    i = rng.integers(0, A.shape[0], n_pairs)
    j = (i + rng.integers(1, A.shape[0], n_pairs)) % A.shape[0]
    gaps = angle_gaps(A, w_down, i, j)
    return float(np.nanmax(gaps))


def validate_insight2(
    trace: ActivationTrace, layer: int, M: int | None = None, pairs: str = "last",
    threshold: float = INSIGHT2_THRESHOLD, lemma_tol: float = LEMMA_TOL,
    w_down: np.ndarray | None = None,
) -> ValidationSummary:
    """Pearson r between cos(y_i, y_M) of FFN outputs and co-activation counts.

    Also measures how far ``W_d`` moves angles, over the same pairs:
    ``max |cos(y_i, y_M) - cos(A_i, A_M)|``. When ``w_down`` is given the
    deviation of ``W_d W_d^T`` is recorded as the lemma's premise.
    """
    tr = trace[layer]
    A = np.asarray(tr.act, np.float64)
    Y = np.asarray(tr.ffn_out, np.float64)
    i, j = _pairs(tr.n_tokens, _ref(tr, M), pairs)
    gamma = A > 0
    overlap = (gamma[i] & gamma[j]).sum(axis=1).astype(np.float64)
    cos_y = _pair_cos(Y, i, j)
    delta = np.abs(cos_y - _pair_cos(A, i, j))
    max_delta = float(np.nanmax(delta)) if np.isfinite(delta).any() else None
    details = {
        "layer": layer, "pairs": pairs,
        "lemma_max_delta": max_delta,
        "lemma_holds": max_delta is not None and max_delta <= lemma_tol,
    }
    if w_down is not None:
        details["lemma_premise_deviation"] = orthogonality_deviation(w_down, side="rows")
    return _summary("insight2", overlap, cos_y, "pearson", threshold, details)


def _token_subset(n: int, M: int, tokens: Sequence[int] | None) -> np.ndarray:
    if tokens is None:
        return np.array([t for t in range(n) if t != M], dtype=np.int64)
    idx = np.asarray(sorted(set(int(t) for t in tokens)), dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= n):
        raise InvalidParam("token subset outside the traced range")
    return idx


def topk_overlap(a: np.ndarray, b: np.ndarray, k: int) -> float:
    """|topk(a) & topk(b)| / k, ties broken toward the lower index."""
    ta = set(np.argsort(-np.asarray(a), kind="stable")[:k].tolist())
    tb = set(np.argsort(-np.asarray(b), kind="stable")[:k].tolist())
    return len(ta & tb) / k


def validate_matching(
    trace: ActivationTrace, layer: int, core: SentenceCoreSet, M: int | None = None,
    tokens: Sequence[int] | None = None, projection_layer: int | None = None,
    threshold: float = MATCHING_THRESHOLD, overlap_threshold: float = MATCHING_OVERLAP_THRESHOLD,
    topk: Sequence[int] = TOPK, n_null: int = 200, seed: int = 0,
) -> ValidationSummary:
    """Rank agreement between exact projections and core-neuron intersections.

    Intersections use the activations of FFN ``layer``; projections are taken
    at the attention of ``projection_layer`` (default ``layer + 1``, the block
    that consumes that FFN's output, or ``layer`` itself at the last layer).
    Both traces must cover the same tokens.
    """
    n_layers = len(trace.layers)
    if projection_layer is None:
        projection_layer = layer + 1 if layer + 1 < n_layers else layer
    tr, tp = trace[layer], trace[projection_layer]
    if not np.array_equal(tr.positions, tp.positions):
        raise InvalidParam("projection and intersection layers cover different tokens")
    M = _ref(tp, M)
    counts = intersection_counts(tr.act, core).astype(np.float64)
    proj = exact_projection_criterion(trace, projection_layer, M)
    idx = _token_subset(tr.n_tokens, M, tokens)
    c, p = counts[idx], proj[idx]

    overlaps = {int(k): topk_overlap(p, c, k) for k in topk if k <= idx.size}
    rng = np.random.default_rng(seed)
    null = []
    if idx.size >= 2 and np.ptp(c) > 0 and np.ptp(p) > 0:
        null = [float(stats.spearmanr(rng.permutation(c), p)[0]) for _ in range(n_null)]
    summary = _summary(
        "matching", c, p, "spearman", threshold,
        {
            "layer": layer, "projection_layer": projection_layer, "reference": M,
            "core_size": len(core), "topk_overlap": overlaps,
            "null_spearman_mean": float(np.mean(null)) if null else None,
            "null_spearman_sd": float(np.std(null)) if null else None,
        },
    )
    top16 = overlaps.get(16)
    if summary.verdict == "pass" and top16 is not None and top16 < overlap_threshold:
        summary.verdict = "fail"
    return summary


def pool_matching(
    summaries: Sequence[ValidationSummary], threshold: float = MATCHING_THRESHOLD,
    overlap_threshold: float = MATCHING_OVERLAP_THRESHOLD, k: int = 16,
) -> ValidationSummary:
    """Median Spearman and median top-``k`` overlap over several traces.

    Single traces of a few dozen tokens are noisy; the batch verdict is what
    the matching claim is judged on. Per-trace values are kept in ``details``.
    """
    usable = [s for s in summaries if s.statistic is not None and k in s.details.get("topk_overlap", {})]
    rhos = [s.statistic for s in usable]
    overlaps = [s.details["topk_overlap"][k] for s in usable]
    nulls = [s.details["null_spearman_mean"] for s in usable if s.details.get("null_spearman_mean") is not None]
    med_rho = float(np.median(rhos)) if rhos else None
    med_ov = float(np.median(overlaps)) if overlaps else None
    if not usable:
        verdict = "insufficient"
    else:
        verdict = "pass" if med_rho >= threshold and med_ov >= overlap_threshold else "fail"
    per_trace_pass = [r >= threshold and o >= overlap_threshold for r, o in zip(rhos, overlaps)]
    return ValidationSummary(
        name="matching-batch", verdict=verdict, metric="median spearman", statistic=med_rho,
        threshold=threshold, sample_count=sum(s.sample_count for s in usable),
        details={
            "n_traces": len(summaries), "n_usable": len(usable),
            f"median_top{k}_overlap": med_ov, "overlap_threshold": overlap_threshold,
            "spearman": rhos, f"top{k}_overlap": overlaps,
            "trace_pass_fraction": float(np.mean(per_trace_pass)) if usable else None,
            "null_spearman_mean": float(np.mean(nulls)) if nulls else None,
        },
    )
