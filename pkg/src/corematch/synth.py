"""Synthetic vision-language prompts.

Image tokens are continuous embeddings mixed between a query direction (the
embedding of the final text token) and isotropic noise. The mixing weight is
the token's relevance: a ``relevant_frac`` share of image tokens draws it
from ``relevant_range``, the rest from ``background_range``.
"""

from __future__ import annotations

import numpy as np

from .errors import InvalidParam
from .model import Prompt, Weights


def synthetic_vlm_prompt(
    weights: Weights,
    seed: int,
    n_image: int = 48,
    n_prefix: int = 4,
    n_suffix: int = 8,
    relevant_frac: float = 0.25,
    relevant_range: tuple[float, float] = (0.6, 0.95),
    background_range: tuple[float, float] = (0.0, 0.3),
) -> tuple[Prompt, np.ndarray]:
    """Build ``prefix text + image block + suffix text``.

    Returns the prompt and the per-image-token relevance weights. The last
    suffix token is the query token whose embedding anchors the image block.
    """
    if n_image < 1 or n_suffix < 1 or n_prefix < 0:
        raise InvalidParam("need n_image >= 1, n_suffix >= 1, n_prefix >= 0")
    if not 0.0 <= relevant_frac <= 1.0:
        raise InvalidParam("relevant_frac must lie in [0, 1]")
    cfg = weights.config
    rng = np.random.default_rng(seed)
    ids = rng.integers(0, cfg.vocab_size, n_prefix + n_suffix)
    query = weights.embed[ids[-1]].astype(np.float64)
    typical = np.sqrt(cfg.d_model)
    u = query / np.linalg.norm(query)

    n_rel = int(round(relevant_frac * n_image))
    rel = np.concatenate([
        rng.uniform(*relevant_range, n_rel),
        rng.uniform(*background_range, n_image - n_rel),
    ])
    rng.shuffle(rel)
    noise = rng.standard_normal((n_image, cfg.d_model))
    noise /= np.linalg.norm(noise, axis=1, keepdims=True)
    image = typical * (rel[:, None] * u[None, :] + np.sqrt(1.0 - rel[:, None] ** 2) * noise)
    return Prompt(tuple(int(t) for t in ids), image=image, image_at=n_prefix), rel
