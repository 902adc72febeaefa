"""Channel-subset samplers: none, hierarchical (HCS), and diversity (DCS).

HCS draws a subset size k uniformly from {1..m}, then a uniform k-subset.
DCS draws k the same way, picks an anchor channel uniformly, and fills the
remaining k-1 slots by weighted sampling without replacement where a
channel's weight rises with its cosine *dissimilarity* to the anchor,
sharpened by a temperature. As the temperature grows the weights flatten
and DCS becomes HCS; as it shrinks DCS picks the least-similar channels.

Sampling is discrete: it reads feature vectors as a plain-value snapshot
and never touches gradients.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Sequence

import numpy as np

from .errors import ContractError, DegenerateInputError, ParameterError
from .tensor import Tensor, no_grad, softmax_temp

__all__ = [
    "SamplerSpec",
    "SubsetSample",
    "hcs_sample",
    "dcs_sample",
    "weighted_subset_without_replacement",
    "inclusion_frequencies",
    "hcs_inclusion_probability",
]

SAMPLER_KINDS = ("none", "hcs", "dcs")
FEATURE_SOURCES = ("channel_tokens", "patch_token_mean")


@dataclass
class SamplerSpec:
    kind: str = "dcs"
    t_dcs: float = 0.1
    feature_source: str = "channel_tokens"

    def __post_init__(self):
        if self.kind not in SAMPLER_KINDS:
            raise ParameterError(f"sampler kind must be one of {SAMPLER_KINDS}, got {self.kind!r}")
        if self.kind == "dcs" and self.t_dcs <= 0:
            raise ParameterError(f"t_dcs must be positive, got {self.t_dcs}")
        if self.feature_source not in FEATURE_SOURCES:
            raise ParameterError(
                f"feature_source must be one of {FEATURE_SOURCES}, got {self.feature_source!r}"
            )


@dataclass(frozen=True)
class SubsetSample:
    channels: tuple[int, ...]  # sorted, distinct
    k: int
    anchor: int | None = None  # dcs only

    def __post_init__(self):
        if len(self.channels) != self.k or len(set(self.channels)) != self.k:
            raise ContractError(f"subset {self.channels} does not have k={self.k} distinct channels")
        if self.anchor is not None and self.anchor not in self.channels:
            raise ContractError(f"anchor {self.anchor} not in subset {self.channels}")


def hcs_sample(m: int, rng: np.random.Generator) -> SubsetSample:
    """Uniform subset size, then a uniform subset of that size."""
    if m < 1:
        raise ParameterError(f"need at least one channel, got m={m}")
    k = int(rng.integers(1, m + 1))
    chosen = rng.choice(m, size=k, replace=False)
    return SubsetSample(channels=tuple(sorted(int(c) for c in chosen)), k=k)


def _cosine_to_anchor(features: np.ndarray, anchor: int, others: np.ndarray) -> np.ndarray:
    norms = np.linalg.norm(features, axis=1)
    if norms.min() <= 1e-12:
        raise DegenerateInputError("a channel feature vector has (near-)zero norm")
    unit = features / norms[:, None]
    return unit[others] @ unit[anchor]


def weighted_subset_without_replacement(
    logits: np.ndarray, n_draw: int, t: float, rng: np.random.Generator
) -> list[int]:
    """Draw n_draw distinct indices, weight softmax(logits / t), sequentially.

    Each draw removes the winner and renormalizes, which is the same as
    re-applying the temperature softmax over the remaining logits (done here
    for numerical stability at extreme temperatures).
    """
    remaining = list(range(len(logits)))
    picked: list[int] = []
    for _ in range(n_draw):
        with no_grad():
            p = softmax_temp(Tensor(logits[remaining]), t).data
        j = int(rng.choice(len(remaining), p=p))
        picked.append(remaining.pop(j))
    return picked


def dcs_sample(
    channel_features: np.ndarray, t_dcs: float, rng: np.random.Generator
) -> SubsetSample:
    """Diversity-weighted subset: anchor plus k-1 dissimilar companions.

    k ~ Uniform{1..m}; anchor ~ Uniform over channels; companions drawn from
    the other m-1 channels with probability softmax((1 - cos_sim) / t).
    """
    features = np.asarray(channel_features, dtype=np.float64)
    if features.ndim != 2 or features.shape[0] < 1:
        raise ParameterError(f"channel_features must be (m, d), got {features.shape}")
    if t_dcs <= 0:
        raise ParameterError(f"t_dcs must be positive, got {t_dcs}")
    m = features.shape[0]
    k = int(rng.integers(1, m + 1))
    anchor = int(rng.integers(0, m))
    if k == 1:
        return SubsetSample(channels=(anchor,), k=1, anchor=anchor)
    others = np.array([i for i in range(m) if i != anchor])
    sims = _cosine_to_anchor(features, anchor, others)
    picked = weighted_subset_without_replacement(1.0 - sims, k - 1, t_dcs, rng)
    chosen = sorted([anchor] + [int(others[j]) for j in picked])
    return SubsetSample(channels=tuple(chosen), k=k, anchor=anchor)


def hcs_inclusion_probability(m: int) -> float:
    """P(a given channel is in the subset) = E[k]/m = (m+1)/(2m)."""
    return (m + 1) / (2 * m)


def inclusion_frequencies(
    spec: SamplerSpec,
    features_or_m: np.ndarray | int,
    trials: int,
    rng: np.random.Generator,
) -> np.ndarray:
    """Fraction of trials in which each channel appears in the sample."""
    if trials < 1:
        raise ParameterError(f"trials must be >= 1, got {trials}")
    if isinstance(features_or_m, (int, np.integer)):
        m, features = int(features_or_m), None
    else:
        features = np.asarray(features_or_m, dtype=np.float64)
        m = features.shape[0]
    counts = np.zeros(m, dtype=np.int64)
    if spec.kind == "none":
        return np.ones(m)
    for _ in range(trials):
        if spec.kind == "hcs":
            sample = hcs_sample(m, rng)
        else:
            if features is None:
                raise ParameterError("dcs needs channel feature vectors, got only m")
            sample = dcs_sample(features, spec.t_dcs, rng)
        counts[list(sample.channels)] += 1
    return counts / trials
