"""Toy decoder-only transformer with full activation tracing.

Pre-norm residual blocks, multi-head causal attention and a two-matrix FFN
(``A = act(x W_u)``, ``y = A W_d``). Weights are plain numpy arrays; nothing
is trained. Synthetic weights interpolate between Gaussian and exactly
scaled-orthogonal matrices so the orthogonality premise can be switched on
and off.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field, fields, replace
from typing import Iterator, Sequence, Union

import numpy as np

from . import numerics as nx
from .errors import DegenerateMatrix, InvalidParam, SequenceOverflow, ShapeError, VocabError

ACTIVATIONS = ("relu", "silu")
DTYPES = ("float64", "float32")


@dataclass(frozen=True)
class ModelConfig:
    n_layers: int
    d_model: int
    d_ffn: int
    n_heads: int
    vocab_size: int
    activation: str = "relu"
    max_seq_len: int = 512
    dtype: str = "float64"

    def __post_init__(self) -> None:
        for name in ("n_layers", "d_model", "d_ffn", "n_heads", "vocab_size", "max_seq_len"):
            value = getattr(self, name)
            if not isinstance(value, (int, np.integer)) or value < 1:
                raise InvalidParam(f"{name} must be a positive integer, got {value!r}")
        if self.d_model % self.n_heads:
            raise InvalidParam("d_model must be divisible by n_heads")
        if self.d_ffn < self.d_model:
            raise InvalidParam("d_ffn must be >= d_model")
        if self.activation not in ACTIVATIONS:
            raise InvalidParam(f"activation must be one of {ACTIVATIONS}")
        if self.dtype not in DTYPES:
            raise InvalidParam(f"dtype must be one of {DTYPES}")

    @property
    def d_head(self) -> int:
        return self.d_model // self.n_heads

    @property
    def np_dtype(self) -> np.dtype:
        return np.dtype(self.dtype)

    def to_dict(self) -> dict:
        return {f.name: getattr(self, f.name) for f in fields(self)}

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        return cls(**{f.name: d[f.name] for f in fields(cls) if f.name in d})


TOY_CONFIG = ModelConfig(n_layers=4, d_model=32, d_ffn=128, n_heads=4, vocab_size=256)


@dataclass
class LayerWeights:
    wq: np.ndarray
    wk: np.ndarray
    wv: np.ndarray
    wo: np.ndarray
    wu: np.ndarray
    wd: np.ndarray
    ln1_gain: np.ndarray
    ln1_bias: np.ndarray
    ln2_gain: np.ndarray
    ln2_bias: np.ndarray

    # serialisation order
    NAMES = ("ln1_gain", "ln1_bias", "wq", "wk", "wv", "wo", "ln2_gain", "ln2_bias", "wu", "wd")

    @staticmethod
    def shapes(cfg: ModelConfig) -> dict[str, tuple[int, ...]]:
        d, m = cfg.d_model, cfg.d_ffn
        return {
            "ln1_gain": (d,), "ln1_bias": (d,),
            "wq": (d, d), "wk": (d, d), "wv": (d, d), "wo": (d, d),
            "ln2_gain": (d,), "ln2_bias": (d,),
            "wu": (d, m), "wd": (m, d),
        }


@dataclass
class Weights:
    config: ModelConfig
    embed: np.ndarray
    layers: list[LayerWeights]
    lnf_gain: np.ndarray
    lnf_bias: np.ndarray
    lm_head: np.ndarray
    seed: int = 0
    orthogonality_mix: float = 1.0
    scale: float = 1.0
    theta: float = 1.0

    def __post_init__(self) -> None:
        self.validate()

    def validate(self) -> None:
        cfg = self.config
        expect = {
            "embed": (cfg.vocab_size, cfg.d_model),
            "lnf_gain": (cfg.d_model,),
            "lnf_bias": (cfg.d_model,),
            "lm_head": (cfg.d_model, cfg.vocab_size),
        }
        for name, shape in expect.items():
            if getattr(self, name).shape != shape:
                raise ShapeError(f"{name}: expected {shape}, got {getattr(self, name).shape}")
        if len(self.layers) != cfg.n_layers:
            raise ShapeError(f"expected {cfg.n_layers} layers, got {len(self.layers)}")
        for i, lw in enumerate(self.layers):
            for name, shape in lw.shapes(cfg).items():
                if getattr(lw, name).shape != shape:
                    raise ShapeError(f"layer {i} {name}: expected {shape}, got {getattr(lw, name).shape}")
        for name, arr in self.named_tensors():
            if not np.all(np.isfinite(arr)):
                raise InvalidParam(f"{name} contains non-finite values")

    def named_tensors(self) -> Iterator[tuple[str, np.ndarray]]:
        """All tensors in file declaration order."""
        yield "embed", self.embed
        for i, lw in enumerate(self.layers):
            for name in LayerWeights.NAMES:
                yield f"layers.{i}.{name}", getattr(lw, name)
        yield "lnf_gain", self.lnf_gain
        yield "lnf_bias", self.lnf_bias
        yield "lm_head", self.lm_head

    def astype(self, dtype: str) -> "Weights":
        cfg = replace(self.config, dtype=dtype)
        cast = lambda a: np.asarray(a, dtype=cfg.np_dtype)  # noqa: E731
        layers = [
            LayerWeights(**{n: cast(getattr(lw, n)) for n in LayerWeights.NAMES})
            for lw in self.layers
        ]
        return replace(
            self, config=cfg, embed=cast(self.embed), layers=layers,
            lnf_gain=cast(self.lnf_gain), lnf_bias=cast(self.lnf_bias),
            lm_head=cast(self.lm_head),
        )


# ---------------------------------------------------------------- synthesis


def _mixed(
    rng: np.random.Generator, rows: int, cols: int, mix: float, ortho: np.ndarray | None = None
) -> np.ndarray:
    """(1 - mix) * G + mix * Q, with G rescaled to the Frobenius norm of Q."""
    q = nx.random_orthogonal(rng, rows, cols) if ortho is None else ortho
    g = rng.standard_normal((rows, cols))
    g *= np.linalg.norm(q) / np.linalg.norm(g)
    return (1.0 - mix) * g + mix * q


def init_synthetic(
    config: ModelConfig,
    seed: int,
    orthogonality_mix: float = 1.0,
    scale: float = 1.0,
    theta: float = 1.0,
) -> Weights:
    """Random weights ``scale * ((1 - m) G + m Q)`` per matrix.

    ``W_q`` and ``W_k`` share one orthogonal ``Q`` and a rotation ``R`` so that
    ``W_q W_k^T = scale**2 * theta * I`` exactly at ``m = 1``. Deterministic in
    ``seed``; draws happen in a fixed order.
    """
    m = float(orthogonality_mix)
    if not 0.0 <= m <= 1.0 or math.isnan(m):
        raise InvalidParam(f"orthogonality_mix must lie in [0, 1], got {orthogonality_mix}")
    if not scale > 0.0 or not math.isfinite(scale):
        raise InvalidParam(f"scale must be positive, got {scale}")
    if not theta > 0.0 or not math.isfinite(theta):
        raise InvalidParam(f"theta must be positive, got {theta}")

    rng = np.random.default_rng(seed)
    d, ffn, vocab = config.d_model, config.d_ffn, config.vocab_size
    embed = rng.standard_normal((vocab, d))
    layers = []
    for _ in range(config.n_layers):
        q = nx.random_orthogonal(rng, d, d)
        r = nx.random_orthogonal(rng, d, d)
        root = math.sqrt(theta)
        wq = _mixed(rng, d, d, m, root * q @ r)
        wk = _mixed(rng, d, d, m, root * q @ np.linalg.inv(r).T)
        layers.append(
            LayerWeights(
                wq=scale * wq,
                wk=scale * wk,
                wv=scale * _mixed(rng, d, d, m),
                wo=scale * _mixed(rng, d, d, m),
                wu=scale * _mixed(rng, d, ffn, m),
                wd=scale * _mixed(rng, ffn, d, m),
                ln1_gain=np.ones(d), ln1_bias=np.zeros(d),
                ln2_gain=np.ones(d), ln2_bias=np.zeros(d),
            )
        )
    lm_head = rng.standard_normal((d, vocab)) / math.sqrt(d)
    w = Weights(
        config=replace(config, dtype="float64"),
        embed=embed,
        layers=layers,
        lnf_gain=np.ones(d),
        lnf_bias=np.zeros(d),
        lm_head=lm_head,
        seed=int(seed),
        orthogonality_mix=m,
        scale=float(scale),
        theta=float(theta),
    )
    return w if config.dtype == "float64" else w.astype(config.dtype)


def orthogonality_deviation(W: np.ndarray, side: str = "auto") -> float:
    """Relative distance of a Gram matrix of ``W`` from its scaled-identity fit.

    ``side="rows"`` uses ``W W^T``, ``"cols"`` uses ``W^T W``. ``"auto"`` picks
    the smaller Gram, the only one that can be a multiple of the identity for
    a rectangular matrix.
    """
    W = np.asarray(W, dtype=np.float64)
    if W.ndim != 2 or W.size == 0:
        raise ShapeError(f"expected a non-empty matrix, got shape {W.shape}")
    if side == "auto":
        side = "rows" if W.shape[0] <= W.shape[1] else "cols"
    if side == "rows":
        gram = W @ W.T
    elif side == "cols":
        gram = W.T @ W
    else:
        raise InvalidParam(f"side must be auto, rows or cols, got {side!r}")
    return nx.scaled_identity_deviation(gram)[0]


def qk_deviation(wq: np.ndarray, wk: np.ndarray) -> tuple[float, float]:
    """Deviation of ``W_q W_k^T`` from ``theta_hat * I``; returns (dev, theta_hat).

    The product is not a Gram matrix, so its mean diagonal can be non-positive;
    no positive multiple of the identity fits then and the deviation is ``inf``.
    """
    P = np.asarray(wq, np.float64) @ np.asarray(wk, np.float64).T
    try:
        return nx.scaled_identity_deviation(P)
    except DegenerateMatrix:
        return math.inf, float(np.mean(np.diag(P)))


# ------------------------------------------------------------------ inputs


@dataclass(frozen=True)
class Prompt:
    """Token ids with an optional block of continuous (image) embeddings.

    The sequence is ``token_ids[:image_at] + image rows + token_ids[image_at:]``.
    """

    token_ids: tuple[int, ...]
    image: np.ndarray | None = None
    image_at: int = 0

    def __post_init__(self) -> None:
        object.__setattr__(self, "token_ids", tuple(int(t) for t in self.token_ids))
        if self.image is not None:
            img = np.asarray(self.image, dtype=np.float64)
            if img.ndim != 2:
                raise ShapeError("image embeddings must be a 2-D array")
            object.__setattr__(self, "image", img)
        if not 0 <= self.image_at <= len(self.token_ids):
            raise InvalidParam("image_at must index into token_ids")

    @property
    def n_image(self) -> int:
        return 0 if self.image is None else self.image.shape[0]

    def __len__(self) -> int:
        return len(self.token_ids) + self.n_image

    @property
    def image_span(self) -> tuple[int, int]:
        return (self.image_at, self.image_at + self.n_image)


PromptLike = Union[Prompt, Sequence[int], np.ndarray]


def as_prompt(p: PromptLike) -> Prompt:
    return p if isinstance(p, Prompt) else Prompt(tuple(int(t) for t in np.asarray(p).ravel()))


@functools.lru_cache(maxsize=16)
def _sinusoid(n: int, d: int) -> np.ndarray:
    pos = np.arange(n)[:, None]
    i = np.arange(d)[None, :]
    angle = pos / np.power(10000.0, (2 * (i // 2)) / d)
    table = np.where(i % 2 == 0, np.sin(angle), np.cos(angle))
    table.setflags(write=False)
    return table


def positional_table(cfg: ModelConfig) -> np.ndarray:
    return _sinusoid(cfg.max_seq_len, cfg.d_model)


def embed_tokens(weights: Weights, token_ids: Sequence[int], positions: Sequence[int]) -> np.ndarray:
    cfg = weights.config
    ids = np.asarray(token_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise VocabError(f"token id outside [0, {cfg.vocab_size})")
    pos = np.asarray(positions, dtype=np.int64)
    if pos.size and pos.max() >= cfg.max_seq_len:
        raise SequenceOverflow(f"position {int(pos.max())} exceeds max_seq_len {cfg.max_seq_len}")
    return (weights.embed[ids] + positional_table(cfg)[pos]).astype(cfg.np_dtype)


def embed_prompt(weights: Weights, prompt: PromptLike) -> np.ndarray:
    p = as_prompt(prompt)
    cfg = weights.config
    n = len(p)
    if n == 0:
        raise InvalidParam("empty prompt")
    if n > cfg.max_seq_len:
        raise SequenceOverflow(f"prompt length {n} exceeds max_seq_len {cfg.max_seq_len}")
    ids = np.asarray(p.token_ids, dtype=np.int64)
    if ids.size and (ids.min() < 0 or ids.max() >= cfg.vocab_size):
        raise VocabError(f"token id outside [0, {cfg.vocab_size})")
    if p.image is None:
        rows = weights.embed[ids]
    else:
        if p.image.shape[1] != cfg.d_model:
            raise ShapeError(f"image embeddings must have width {cfg.d_model}")
        rows = np.concatenate(
            [weights.embed[ids[: p.image_at]], p.image, weights.embed[ids[p.image_at:]]]
        )
    return (rows + positional_table(cfg)[:n]).astype(cfg.np_dtype)


# ------------------------------------------------------------------ blocks


@dataclass
class LayerTrace:
    """Everything one layer computed during pre-filling.

    ``positions`` holds the original sequence index of each row. ``alpha`` is
    ``(heads, query, key)``; ``v`` and ``attn_out`` are head-concatenated and
    taken before ``W_o``. ``act`` is recorded after the activation function.
    """

    layer: int
    positions: np.ndarray
    resid_in: np.ndarray
    attn_in: np.ndarray
    alpha: np.ndarray
    v: np.ndarray
    attn_out: np.ndarray
    ffn_in: np.ndarray
    act: np.ndarray
    ffn_out: np.ndarray
    keys: np.ndarray = field(repr=False, default=None)

    @property
    def n_tokens(self) -> int:
        return self.resid_in.shape[0]


@dataclass
class ActivationTrace:
    layers: list[LayerTrace]
    final_hidden: np.ndarray
    logits: np.ndarray

    def __getitem__(self, layer: int) -> LayerTrace:
        if not 0 <= layer < len(self.layers):
            raise InvalidParam(f"layer {layer} outside traced range [0, {len(self.layers)})")
        return self.layers[layer]


def split_heads(x: np.ndarray, n_heads: int) -> np.ndarray:
    """(T, d) -> (H, T, d_head)."""
    t, d = x.shape
    return x.reshape(t, n_heads, d // n_heads).transpose(1, 0, 2)


def merge_heads(x: np.ndarray) -> np.ndarray:
    h, t, dh = x.shape
    return x.transpose(1, 0, 2).reshape(t, h * dh)


def attend(q: np.ndarray, k: np.ndarray, v: np.ndarray, n_heads: int, causal: bool) -> tuple[np.ndarray, np.ndarray]:
    """Multi-head attention; returns (head-concatenated output, alpha[H, Tq, Tk]).

    With ``causal`` the queries are the last ``Tq`` rows of the key sequence.
    """
    qh, kh, vh = split_heads(q, n_heads), split_heads(k, n_heads), split_heads(v, n_heads)
    scores = qh @ kh.transpose(0, 2, 1) / math.sqrt(qh.shape[-1])
    if causal:
        tq, tk = scores.shape[1:]
        mask = np.arange(tk)[None, :] > (np.arange(tq)[:, None] + (tk - tq))
        scores = np.where(mask[None], -np.inf, scores)
    alpha = nx.softmax(scores, axis=-1)
    return merge_heads(alpha @ vh), alpha


def attention_sublayer(lw: LayerWeights, cfg: ModelConfig, h: np.ndarray) -> dict:
    attn_in = nx.layer_norm(h, lw.ln1_gain, lw.ln1_bias)
    q, k, v = attn_in @ lw.wq, attn_in @ lw.wk, attn_in @ lw.wv
    out, alpha = attend(q, k, v, cfg.n_heads, causal=True)
    return {
        "attn_in": attn_in, "keys": k, "v": v, "alpha": alpha, "attn_out": out,
        "mid": h + out @ lw.wo,
    }


def ffn_activations(lw: LayerWeights, cfg: ModelConfig, h: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    x = nx.layer_norm(h, lw.ln2_gain, lw.ln2_bias)
    return x, nx.activation(x @ lw.wu, cfg.activation)


def layer_forward(lw: LayerWeights, cfg: ModelConfig, h: np.ndarray, layer: int, positions: np.ndarray) -> tuple[np.ndarray, LayerTrace]:
    parts = attention_sublayer(lw, cfg, h)
    x, act = ffn_activations(lw, cfg, parts["mid"])
    y = act @ lw.wd
    trace = LayerTrace(
        layer=layer, positions=positions, resid_in=h, attn_in=parts["attn_in"],
        alpha=parts["alpha"], v=parts["v"], attn_out=parts["attn_out"],
        ffn_in=x, act=act, ffn_out=y, keys=parts["keys"],
    )
    return parts["mid"] + y, trace


def head_logits(weights: Weights, h: np.ndarray) -> np.ndarray:
    return nx.layer_norm(h, weights.lnf_gain, weights.lnf_bias) @ weights.lm_head


def forward_dense(weights: Weights, prompt: PromptLike) -> tuple[np.ndarray, ActivationTrace]:
    """Plain causal forward over the whole prompt; logits are ``(T, vocab)``."""
    cfg = weights.config
    h = embed_prompt(weights, prompt)
    positions = np.arange(h.shape[0])
    traces = []
    for i, lw in enumerate(weights.layers):
        h, tr = layer_forward(lw, cfg, h, i, positions)
        traces.append(tr)
    logits = head_logits(weights, h)
    return logits, ActivationTrace(traces, h, logits)
