"""Tiny multi-channel ViT with channel tokens and attention recording.

Every channel plane is cut into patches and pushed through one shared
projection; each projected patch token then receives its positional
embedding plus the learnable token of the channel it came from (added, like
positional embeddings). A CLS token is prepended, the sequence runs through
pre-norm transformer blocks (self-attention + GELU MLP), and the classifier
head reads the final CLS embedding. The raw projected tokens (before the
positional/channel additions) are retained in the trace for the token
diversification loss; per-layer CLS attention rows can be recorded for the
channel-attention diagnostics.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Batch
from .errors import (
    ConfigurationError,
    ContractError,
    FormatError,
    IntegrityError,
    NumericFailureError,
    ParameterError,
    StateError,
)
from .rng import stream
from .tensor import Tensor

__all__ = [
    "ModelConfig",
    "ModelState",
    "ForwardTrace",
    "init_model",
    "patch_embed",
    "forward",
    "cls_attention_by_channel",
    "save_checkpoint",
    "load_checkpoint",
    "param_count",
]

CHECKPOINT_FILE = "checkpoint.json"
PARAMS_FILE = "params.bin"


@dataclass(frozen=True)
class ModelConfig:
    dim: int = 64
    depth: int = 4
    heads: int = 2
    patch_size: int = 8
    mlp_ratio: int = 2
    n_classes: int = 8
    m: int = 6
    height: int = 32
    width: int = 32

    def __post_init__(self):
        if self.dim % self.heads != 0:
            raise ConfigurationError(f"dim {self.dim} not divisible by heads {self.heads}")
        if self.height % self.patch_size or self.width % self.patch_size:
            raise ConfigurationError(
                f"image {self.height}x{self.width} not divisible by patch size {self.patch_size}"
            )
        if self.m > self.dim:
            raise ConfigurationError(
                f"vocabulary size {self.m} exceeds dim {self.dim}; orthogonal channel tokens need m <= dim"
            )

    @property
    def n_patches(self) -> int:
        return (self.height // self.patch_size) * (self.width // self.patch_size)

    def to_dict(self) -> dict:
        return {
            "dim": self.dim,
            "depth": self.depth,
            "heads": self.heads,
            "patch_size": self.patch_size,
            "mlp_ratio": self.mlp_ratio,
            "n_classes": self.n_classes,
            "m": self.m,
            "height": self.height,
            "width": self.width,
        }


@dataclass
class ModelState:
    config: ModelConfig
    params: dict[str, Tensor]  # insertion order defines the checkpoint layout

    def named_parameters(self):
        return self.params.items()

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def checksum(self) -> float:
        """Cheap order-sensitive digest of all parameter values."""
        total = 0.0
        for i, p in enumerate(self.params.values()):
            total += (i + 1) * float(np.sum(p.data))
        return total


@dataclass
class ForwardTrace:
    logits: Tensor  # (N, n_classes)
    cls_embedding: Tensor  # (N, dim)
    raw_tokens: Tensor  # (N, |S| * n_patches, dim), pre pos/channel additions
    channel_map: np.ndarray  # channel index of each patch token
    subset: tuple[int, ...]
    attention: list[np.ndarray] | None = None  # per layer: (N, H, T, T)


def _orthonormal_rows(m: int, d: int, rng: np.random.Generator) -> np.ndarray:
    """m orthonormal rows in R^d from QR of a seeded Gaussian, signs fixed
    so the diagonal of R is positive."""
    a = rng.standard_normal((d, m))
    q, r = np.linalg.qr(a)
    signs = np.sign(np.diag(r))
    signs[signs == 0] = 1.0
    return np.ascontiguousarray((q * signs).T)


def _trunc_normal(shape, rng: np.random.Generator, std: float = 0.02) -> np.ndarray:
    """Normal(0, std) resampled until within 2 std (torch-style init)."""
    out = rng.normal(0.0, std, size=shape)
    bad = np.abs(out) > 2 * std
    while bad.any():
        out[bad] = rng.normal(0.0, std, size=int(bad.sum()))
        bad = np.abs(out) > 2 * std
    return out


def init_model(config: ModelConfig, seed: int) -> ModelState:
    """Fresh parameters; same (config, seed) gives bit-identical states."""
    if config.m > config.dim:
        raise ConfigurationError(f"m={config.m} > dim={config.dim}")
    d, hidden = config.dim, config.dim * config.mlp_ratio
    p2 = config.patch_size * config.patch_size

    params: dict[str, Tensor] = {}

    def tn(name: str, shape):
        params[name] = Tensor(_trunc_normal(shape, stream(seed, "init:" + name)), requires_grad=True)

    def zeros(name: str, shape):
        params[name] = Tensor(np.zeros(shape), requires_grad=True)

    def ones(name: str, shape):
        params[name] = Tensor(np.ones(shape), requires_grad=True)

    tn("patch_proj.weight", (d, p2))
    zeros("patch_proj.bias", (d,))
    params["channel_tokens"] = Tensor(
        _orthonormal_rows(config.m, d, stream(seed, "init:channel_tokens")), requires_grad=True
    )
    params["cdl_anchors"] = Tensor(
        _orthonormal_rows(config.m, d, stream(seed, "init:cdl_anchors")), requires_grad=True
    )
    tn("pos_embed", (config.n_patches, d))
    tn("cls_token", (d,))
    for i in range(config.depth):
        pre = f"blocks.{i}."
        ones(pre + "norm1.gamma", (d,))
        zeros(pre + "norm1.beta", (d,))
        for proj in ("wq", "wk", "wv", "wo"):
            tn(pre + f"attn.{proj}.weight", (d, d))
            zeros(pre + f"attn.{proj}.bias", (d,))
        ones(pre + "norm2.gamma", (d,))
        zeros(pre + "norm2.beta", (d,))
        tn(pre + "mlp.fc1.weight", (hidden, d))
        zeros(pre + "mlp.fc1.bias", (hidden,))
        tn(pre + "mlp.fc2.weight", (d, hidden))
        zeros(pre + "mlp.fc2.bias", (d,))
    ones("final_norm.gamma", (d,))
    zeros("final_norm.beta", (d,))
    tn("head.weight", (config.n_classes, d))
    zeros("head.bias", (config.n_classes,))
    return ModelState(config=config, params=params)


def param_count(config: ModelConfig) -> int:
    d, hidden, p2 = config.dim, config.dim * config.mlp_ratio, config.patch_size**2
    per_block = 2 * d + 4 * (d * d + d) + 2 * d + hidden * d + hidden + d * hidden + d
    return (
        d * p2 + d
        + 2 * config.m * d
        + config.n_patches * d + d
        + config.depth * per_block
        + 2 * d
        + config.n_classes * d + config.n_classes
    )


def extract_patches(planes: np.ndarray, patch_size: int) -> np.ndarray:
    """(N, C, H, W) -> (N, C * n_patches, patch_size^2), channel-major,
    patches in row-major grid order, pixels flattened row-major."""
    n, c, h, w = planes.shape
    gh, gw = h // patch_size, w // patch_size
    x = planes.reshape(n, c, gh, patch_size, gw, patch_size)
    x = x.transpose(0, 1, 2, 4, 3, 5)
    return np.ascontiguousarray(x.reshape(n, c * gh * gw, patch_size * patch_size))


def patch_embed(batch: Batch, state: ModelState):
    """Project patches and add positional + channel embeddings.

    Returns (raw_tokens, embedded_tokens, channel_map). raw_tokens are the
    shared-projection outputs before any additions.
    """
    cfg = state.config
    if any(c < 0 or c >= cfg.m for c in batch.subset):
        raise ContractError(f"batch subset {batch.subset} outside vocabulary of size {cfg.m}")
    patches = extract_patches(batch.planes, cfg.patch_size)
    x_in = Tensor(patches)
    raw = T.linear(x_in, state.params["patch_proj.weight"], state.params["patch_proj.bias"])

    n_pat = cfg.n_patches
    subset = np.asarray(batch.subset, dtype=np.intp)
    pos_idx = np.tile(np.arange(n_pat, dtype=np.intp), len(subset))
    ch_idx = np.repeat(subset, n_pat)
    extras = T.add(
        T.gather_rows(state.params["pos_embed"], pos_idx),
        T.gather_rows(state.params["channel_tokens"], ch_idx),
    )
    embedded = T.add(raw, extras)
    return raw, embedded, ch_idx.astype(np.int64)


def _check_finite(x: Tensor, layer: int) -> None:
    # NaN propagates through the sum, so one reduction covers the block
    if not np.isfinite(np.sum(x.data)):
        raise NumericFailureError(f"non-finite activations after block {layer}")


def forward(batch: Batch, state: ModelState, record_attention: bool = False) -> ForwardTrace:
    """Full forward pass over one batch (all images share the subset)."""
    cfg = state.config
    p = state.params
    raw, x, channel_map = patch_embed(batch, state)
    x = T.prepend_row(p["cls_token"], x)

    scale = (cfg.dim // cfg.heads) ** -0.5
    attn_record: list[np.ndarray] | None = [] if record_attention else None
    for i in range(cfg.depth):
        pre = f"blocks.{i}."
        h = T.layernorm(x, p[pre + "norm1.gamma"], p[pre + "norm1.beta"])
        q = T.linear(h, p[pre + "attn.wq.weight"], p[pre + "attn.wq.bias"])
        k = T.linear(h, p[pre + "attn.wk.weight"], p[pre + "attn.wk.bias"])
        v = T.linear(h, p[pre + "attn.wv.weight"], p[pre + "attn.wv.bias"])
        qh = T.heads_split(q, cfg.heads, scale_by=scale)
        kt = T.heads_split_t(k, cfg.heads)
        vh = T.heads_split(v, cfg.heads)
        att = T.row_softmax(T.matmul(qh, kt))
        if attn_record is not None:
            attn_record.append(att.data.copy())  # recorded rows outlive pooled scratch
        ctx = T.heads_merge(T.matmul(att, vh))
        x = T.add(x, T.linear(ctx, p[pre + "attn.wo.weight"], p[pre + "attn.wo.bias"]))
        h2 = T.layernorm(x, p[pre + "norm2.gamma"], p[pre + "norm2.beta"])
        mid = T.gelu(T.linear(h2, p[pre + "mlp.fc1.weight"], p[pre + "mlp.fc1.bias"]))
        x = T.add(x, T.linear(mid, p[pre + "mlp.fc2.weight"], p[pre + "mlp.fc2.bias"]))
        _check_finite(x, i)

    cls = T.take_token0(x)
    cls_n = T.layernorm(cls, p["final_norm.gamma"], p["final_norm.beta"])
    logits = T.linear(cls_n, p["head.weight"], p["head.bias"])
    return ForwardTrace(
        logits=logits,
        cls_embedding=cls_n,
        raw_tokens=raw,
        channel_map=channel_map,
        subset=batch.subset,
        attention=attn_record,
    )


def cls_attention_by_channel(trace: ForwardTrace, layer: int) -> np.ndarray:
    """Mean per-channel share of the CLS token's attention at one layer.

    Head-averaged CLS row, CLS->CLS entry dropped, renormalized over patch
    tokens, mass summed per channel, averaged over the batch. Sums to 1.
    """
    if trace.attention is None:
        raise StateError("attention was not recorded; rerun forward with record_attention=True")
    if layer < 0 or layer >= len(trace.attention):
        raise ParameterError(f"layer {layer} out of range (depth {len(trace.attention)})")
    att = trace.attention[layer]  # (N, H, T, T)
    cls_row = att[:, :, 0, 1:].mean(axis=1)  # (N, T-1)
    cls_row = cls_row / cls_row.sum(axis=1, keepdims=True)
    masses = np.zeros((cls_row.shape[0], len(trace.subset)))
    for j, ch in enumerate(trace.subset):
        masses[:, j] = cls_row[:, trace.channel_map == ch].sum(axis=1)
    return masses.mean(axis=0)


# ---------------------------------------------------------------------------
# checkpoint serialization: checkpoint.json (config + section table with
# element offsets) next to params.bin (little-endian float64, section order)


def save_checkpoint(state: ModelState, out_dir: str | Path) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    sections = []
    offset = 0
    blobs = []
    for name, p in state.params.items():
        sections.append({"name": name, "offset": offset, "shape": list(p.shape)})
        blobs.append(np.ascontiguousarray(p.data, dtype="<f8"))
        offset += p.size
    meta = {"config": state.config.to_dict(), "sections": sections}
    (out / CHECKPOINT_FILE).write_text(json.dumps(meta, indent=2), encoding="utf-8")
    with open(out / PARAMS_FILE, "wb") as f:
        for b in blobs:
            f.write(b.tobytes())
    return out / CHECKPOINT_FILE


def load_checkpoint(path: str | Path) -> ModelState:
    """Load from a checkpoint.json path or the directory containing it."""
    p = Path(path)
    if p.is_dir():
        p = p / CHECKPOINT_FILE
    if not p.is_file():
        raise FormatError(f"missing checkpoint file: {p}")
    try:
        meta = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as e:
        raise FormatError(f"corrupt checkpoint {p}: {e}") from e
    if "config" not in meta or "sections" not in meta:
        raise FormatError(f"checkpoint {p} missing config/sections")
    config = ModelConfig(**meta["config"])
    bin_path = p.parent / PARAMS_FILE
    if not bin_path.is_file():
        raise FormatError(f"missing parameter file: {bin_path}")
    flat = np.fromfile(bin_path, dtype="<f8")
    total = sum(int(np.prod(s["shape"])) for s in meta["sections"])
    if flat.size != total:
        raise IntegrityError(f"{bin_path} holds {flat.size} values, section table implies {total}")
    params: dict[str, Tensor] = {}
    for sec in meta["sections"]:
        size = int(np.prod(sec["shape"]))
        start = int(sec["offset"])
        if start + size > flat.size:
            raise IntegrityError(f"section {sec['name']} overruns {bin_path}")
        params[sec["name"]] = Tensor(
            flat[start : start + size].reshape(sec["shape"]).copy(), requires_grad=True
        )
    return ModelState(config=config, params=params)
