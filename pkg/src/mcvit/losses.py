"""Channel and token diversification losses plus the combined objective.

The channel loss pulls each active channel's token toward its own learnable
anchor and pushes it from every other anchor: softmax over negative squared
Euclidean distances between L2-normalized vectors, temperature-scaled, with
the denominator ranging over the anchors of the *full* vocabulary while the
numerator covers only channels active in the batch.

The token loss penalizes mean cosine similarity between projected patch
tokens, with separate weights for same-channel and cross-channel pairs; the
absolute value is applied to each mean, not per pair.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .errors import ContractError, NumericFailureError, ParameterError
from .tensor import Tensor

__all__ = ["DiversityConfig", "cdl_loss", "tdl_loss", "total_loss", "pair_masks"]


@dataclass(frozen=True)
class DiversityConfig:
    lambda_cdl: float = 0.01
    t_cdl: float = 1.0 / 14.0
    lambda_s: float = 0.05
    lambda_d: float = 0.2

    def __post_init__(self):
        if self.t_cdl <= 0:
            raise ParameterError(f"t_cdl must be positive, got {self.t_cdl}")
        for name in ("lambda_cdl", "lambda_s", "lambda_d"):
            if getattr(self, name) < 0:
                raise ParameterError(f"{name} must be non-negative")


def cdl_loss(
    channel_tokens: Tensor,
    anchors: Tensor,
    t_cdl: float,
    token_channels: np.ndarray | None = None,
) -> Tensor:
    """Mean over active channels of -log softmax(-d/t) at the own anchor.

    channel_tokens: (|S|, D) tokens of the channels active in the batch.
    anchors: (m, D) anchors of the full vocabulary.
    token_channels: vocabulary index of each token row (default: 0..|S|-1,
    i.e. tokens already aligned with the anchor table).
    """
    if t_cdl <= 0:
        raise ParameterError(f"t_cdl must be positive, got {t_cdl}")
    if channel_tokens.ndim != 2 or anchors.ndim != 2:
        raise ContractError(
            f"expected 2-D tokens/anchors, got {channel_tokens.shape} and {anchors.shape}"
        )
    if channel_tokens.shape[0] < 1:
        raise ContractError("need at least one active channel token")
    own = (
        np.arange(channel_tokens.shape[0], dtype=np.int64)
        if token_channels is None
        else np.asarray(token_channels, dtype=np.int64)
    )
    if own.max() >= anchors.shape[0]:
        raise ContractError(f"token channel {own.max()} has no anchor (m={anchors.shape[0]})")
    tok_n = T.rows_l2_normalize(channel_tokens)
    anc_n = T.rows_l2_normalize(anchors)
    # d(x, a) = ||x - a||^2 = 2 - 2 <x, a> for unit vectors, so the softmax
    # logits -d/t are an affine map of the cosine similarities
    sims = T.linear(tok_n, anc_n)
    logits = T.affine(sims, 2.0 / t_cdl, -2.0 / t_cdl)
    return T.cross_entropy(logits, own)


def pair_masks(channel_map: np.ndarray) -> tuple[np.ndarray, np.ndarray, int, int]:
    """Strictly-upper-triangular masks of same- and cross-channel pairs."""
    ch = np.asarray(channel_map)
    n = ch.shape[0]
    upper = np.triu(np.ones((n, n)), k=1)
    same = upper * (ch[:, None] == ch[None, :])
    diff = upper - same
    return same, diff, int(same.sum()), int(diff.sum())


def tdl_loss(
    raw_tokens: Tensor,
    channel_map: np.ndarray,
    lambda_s: float,
    lambda_d: float,
) -> Tensor:
    """lambda_s * |mean same-channel cos| + lambda_d * |mean cross-channel cos|.

    raw_tokens: (T, D) for one image or (B, T, D) for a batch sharing one
    channel layout; the batch value is the mean of per-image losses.
    """
    if lambda_s < 0 or lambda_d < 0:
        raise ParameterError("lambda_s and lambda_d must be non-negative")
    tokens = raw_tokens if raw_tokens.ndim == 3 else T.reshape(raw_tokens, (1,) + raw_tokens.shape)
    if tokens.ndim != 3:
        raise ContractError(f"raw_tokens must be (T, D) or (B, T, D), got {raw_tokens.shape}")
    n_tok = tokens.shape[1]
    if n_tok != len(channel_map):
        raise ContractError(f"{n_tok} tokens but channel map of length {len(channel_map)}")
    same, diff, n_s, n_d = pair_masks(channel_map)
    if lambda_s > 0 and n_s == 0:
        raise ContractError("no same-channel token pair but lambda_s > 0")
    if lambda_d > 0 and n_d == 0:
        raise ContractError("no cross-channel token pair but lambda_d > 0")
    if lambda_s == 0 and lambda_d == 0:
        return Tensor(np.zeros(()))
    normed = T.rows_l2_normalize(tokens)
    gram = T.matmul(normed, T.transpose_last2(normed))
    terms = []
    if lambda_s > 0:
        mean_s = T.scale(T.masked_sum_last2(gram, same), 1.0 / n_s)
        terms.append(T.scale(T.abs_(mean_s), lambda_s))
    if lambda_d > 0:
        mean_d = T.scale(T.masked_sum_last2(gram, diff), 1.0 / n_d)
        terms.append(T.scale(T.abs_(mean_d), lambda_d))
    per_image = terms[0] if len(terms) == 1 else T.add(terms[0], terms[1])
    return T.mean_all(per_image)


def total_loss(task_loss: Tensor, cdl: Tensor | None, tdl: Tensor | None, lambda_cdl: float) -> Tensor:
    """task + lambda_cdl * cdl + tdl (tdl already carries its weights)."""
    for name, comp in (("task", task_loss), ("cdl", cdl), ("tdl", tdl)):
        if comp is not None and not np.isfinite(comp.data).all():
            raise NumericFailureError(f"{name} loss component is not finite")
    out = task_loss
    if cdl is not None and lambda_cdl != 0.0:
        out = T.add(out, T.scale(cdl, lambda_cdl))
    if tdl is not None:
        out = T.add(out, tdl)
    return out
