"""Optimizer, schedule, training loop, and evaluation protocols.

Training follows the warmup-plus-cosine recipe: the learning rate ramps
linearly from zero over the warmup epochs, peaks, and decays on a cosine to
the final value at the last step. AdamW applies decoupled weight decay to
everything except biases and normalization parameters. Every batch draws a
fresh channel subset from the configured sampler (with channel features
snapshotted from the live model when the diversity sampler is active),
restricts the batch to it, and optimizes cross-entropy plus the weighted
diversity losses.
"""

from __future__ import annotations

import itertools
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np

from . import tensor as T
from .data import Batch, Dataset, make_batches
from .errors import ContractError, NumericFailureError, ParameterError
from .losses import DiversityConfig, cdl_loss, pair_masks, tdl_loss, total_loss
from .model import ModelConfig, ModelState, extract_patches, forward, init_model
from .rng import stream, stream_seed
from .sampling import SamplerSpec, dcs_sample, hcs_sample
from .tensor import Tensor

__all__ = [
    "OptimSpec",
    "EpochRecord",
    "TrainLog",
    "lr_at",
    "AdamW",
    "adamw_step",
    "train",
    "evaluate",
    "leave_k_out_sweep",
]


@dataclass(frozen=True)
class OptimSpec:
    peak_lr: float = 5e-4
    final_lr: float = 1e-6
    warmup_epochs: int = 3
    total_epochs: int = 30
    weight_decay: float = 0.04
    betas: tuple[float, float] = (0.9, 0.999)
    eps: float = 1e-8
    batch_size: int = 64
    decay_exempt: tuple[str, ...] = ("bias", "norm")
    grad_clip: float | None = None

    def __post_init__(self):
        if not (0 <= self.warmup_epochs <= self.total_epochs):
            raise ParameterError(
                f"warmup {self.warmup_epochs} must lie in [0, {self.total_epochs}]"
            )
        if not (self.peak_lr > self.final_lr > 0):
            raise ParameterError(
                f"need peak_lr > final_lr > 0, got {self.peak_lr} and {self.final_lr}"
            )

    def is_exempt(self, name: str) -> bool:
        return any(pat in name for pat in self.decay_exempt)


@dataclass
class EpochRecord:
    epoch: int
    lr: float
    task_loss: float
    cdl: float
    tdl: float
    train_acc: float
    eval_acc: float


@dataclass
class TrainLog:
    records: list[EpochRecord] = field(default_factory=list)
    sampler_counts: np.ndarray | None = None  # times each channel was in a batch subset
    n_batches: int = 0

    def write_csv(self, path: str | Path) -> None:
        lines = ["epoch,lr,task_loss,cdl,tdl,train_acc,eval_acc"]
        for r in self.records:
            lines.append(
                f"{r.epoch},{r.lr:.10g},{r.task_loss:.10g},{r.cdl:.10g},"
                f"{r.tdl:.10g},{r.train_acc:.10g},{r.eval_acc:.10g}"
            )
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")

    def write_counts_csv(self, path: str | Path) -> None:
        if self.sampler_counts is None:
            raise ContractError("no sampler counters recorded")
        lines = ["channel,times_sampled"]
        for ch, c in enumerate(self.sampler_counts):
            lines.append(f"{ch},{int(c)}")
        Path(path).write_text("\n".join(lines) + "\n", encoding="utf-8")


def lr_at(step: int, steps_per_epoch: int, spec: OptimSpec) -> float:
    """Linear 0-to-peak ramp over warmup, then cosine to final_lr at the end."""
    if step < 0:
        raise ParameterError(f"step must be non-negative, got {step}")
    warm = spec.warmup_epochs * steps_per_epoch
    total = spec.total_epochs * steps_per_epoch
    if warm > 0 and step < warm:
        return spec.peak_lr * step / warm
    denom = max(1, total - 1 - warm)
    progress = min(1.0, (step - warm) / denom)
    return spec.final_lr + 0.5 * (spec.peak_lr - spec.final_lr) * (1 + math.cos(math.pi * progress))


class AdamW:
    """Decoupled-weight-decay adaptive-moment optimizer over named tensors."""

    def __init__(self, params: dict[str, Tensor], spec: OptimSpec):
        self.spec = spec
        self.params = params
        self.m = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.v = {n: np.zeros_like(p.data) for n, p in params.items()}
        self.t = 0

    def step(self, lr: float) -> None:
        from ._kernels import adamw_update

        self.t += 1
        b1, b2 = self.spec.betas
        bc1 = 1.0 - b1**self.t
        bc2 = 1.0 - b2**self.t
        if self.spec.grad_clip is not None:
            sq = 0.0
            for p in self.params.values():
                if p.grad is not None:
                    sq += float(np.sum(p.grad * p.grad))
            norm = math.sqrt(sq)
            if norm > self.spec.grad_clip:
                scale = self.spec.grad_clip / norm
                for p in self.params.values():
                    if p.grad is not None:
                        p.grad *= scale
        for name, p in self.params.items():
            if p.grad is None:
                continue
            if p.grad.shape != p.data.shape:
                raise ContractError(
                    f"grad shape {p.grad.shape} != param shape {p.data.shape} for {name}"
                )
            wd = 0.0 if self.spec.is_exempt(name) else self.spec.weight_decay
            adamw_update(
                p.data.reshape(-1),
                np.ascontiguousarray(p.grad).reshape(-1),
                self.m[name].reshape(-1),
                self.v[name].reshape(-1),
                lr, b1, b2, self.spec.eps, wd, bc1, bc2,
            )

    def zero_grads(self) -> None:
        for p in self.params.values():
            p.zero_grad()


def adamw_step(opt: AdamW, lr: float) -> None:
    """Apply one update using the grads currently stored on the parameters."""
    opt.step(lr)


def _patch_token_mean_features(state: ModelState, planes: np.ndarray) -> np.ndarray:
    """Per-channel mean of projected patch tokens over the current batch."""
    cfg = state.config
    patches = extract_patches(planes, cfg.patch_size)  # (N, m * n_patches, P^2)
    tok = patches @ state.params["patch_proj.weight"].data.T + state.params["patch_proj.bias"].data
    n, _, d = tok.shape
    return tok.reshape(n, cfg.m, cfg.n_patches, d).mean(axis=(0, 2))


def _make_subset_sampler(
    sampler: SamplerSpec, state: ModelState, rng: np.random.Generator
):
    """Returns fn(full_planes) -> subset tuple; reads live channel tokens."""
    m = state.config.m

    def draw(full_planes: np.ndarray) -> tuple[int, ...]:
        if sampler.kind == "none":
            return tuple(range(m))
        if sampler.kind == "hcs":
            return hcs_sample(m, rng).channels
        if sampler.feature_source == "channel_tokens":
            feats = state.params["channel_tokens"].data
        else:
            feats = _patch_token_mean_features(state, full_planes)
        return dcs_sample(feats, sampler.t_dcs, rng).channels

    return draw


def train(
    model_config: ModelConfig,
    diversity: DiversityConfig,
    sampler: SamplerSpec,
    optim: OptimSpec,
    dataset: Dataset,
    seed: int,
    eval_dataset: Dataset | None = None,
    eval_subset_size: int = 512,
) -> tuple[ModelState, TrainLog]:
    """Train a model; (configs, seed) fully determine the result.

    Per batch: sample a channel subset, restrict, forward, combine
    cross-entropy with the diversity losses, backward, AdamW step. The epoch
    eval accuracy is measured on a fixed slice of eval_dataset (the train
    split itself when none is given) under the full-channel protocol.
    """
    state = init_model(model_config, seed)
    opt = AdamW(state.params, optim)
    sampler_rng = stream(seed, "sampler")
    draw_subset = _make_subset_sampler(sampler, state, sampler_rng)
    steps_per_epoch = math.ceil(len(dataset) / optim.batch_size)
    log = TrainLog(sampler_counts=np.zeros(model_config.m, dtype=np.int64))
    eval_ds = eval_dataset if eval_dataset is not None else dataset
    eval_n = min(eval_subset_size, len(eval_ds))

    global_step = 0
    all_channels = tuple(range(model_config.m))
    pool = T.BufferPool()
    for epoch in range(optim.total_epochs):
        epoch_seed = stream_seed(seed, "epoch-order", epoch)
        sums = {"task": 0.0, "cdl": 0.0, "tdl": 0.0}
        correct = 0
        seen = 0
        for b_idx, full_batch in enumerate(
            make_batches(dataset, optim.batch_size, epoch_seed, lambda: all_channels)
        ):
            try:
                with T.use_pool(pool):
                    subset = draw_subset(full_batch.planes)
                    log.sampler_counts[list(subset)] += 1
                    log.n_batches += 1
                    positions = [all_channels.index(c) for c in subset]
                    batch = Batch(
                        planes=full_batch.planes[:, positions],
                        labels=full_batch.labels,
                        subset=subset,
                    )
                    lr = lr_at(global_step, steps_per_epoch, optim)
                    with T.tape() as tp:
                        trace = forward(batch, state)
                        task = T.cross_entropy(trace.logits, batch.labels)
                        cdl = None
                        if diversity.lambda_cdl > 0:
                            cdl = cdl_loss(
                                T.gather_rows(state.params["channel_tokens"], np.asarray(subset)),
                                state.params["cdl_anchors"],
                                diversity.t_cdl,
                                np.asarray(subset),
                            )
                        tdl = None
                        if diversity.lambda_s > 0 or diversity.lambda_d > 0:
                            # single-channel batches have no cross-channel pair;
                            # the term is simply absent rather than an error
                            _, _, n_s, n_d = pair_masks(trace.channel_map)
                            lam_s = diversity.lambda_s if n_s > 0 else 0.0
                            lam_d = diversity.lambda_d if n_d > 0 else 0.0
                            if lam_s > 0 or lam_d > 0:
                                tdl = tdl_loss(trace.raw_tokens, trace.channel_map, lam_s, lam_d)
                        loss = total_loss(task, cdl, tdl, diversity.lambda_cdl)
                        T.backward(loss, tp)
                    opt.step(lr)
                    opt.zero_grads()
                    n = len(batch.labels)
                    sums["task"] += task.item() * n
                    sums["cdl"] += (cdl.item() if cdl is not None else 0.0) * n
                    sums["tdl"] += (tdl.item() if tdl is not None else 0.0) * n
                    correct += int((np.argmax(trace.logits.data, axis=1) == batch.labels).sum())
                    seen += n
                    global_step += 1
            except NumericFailureError as e:
                raise NumericFailureError(f"epoch {epoch}, batch {b_idx}: {e}") from e
        eval_acc = _accuracy_on_slice(state, eval_ds, eval_n)
        log.records.append(
            EpochRecord(
                epoch=epoch,
                lr=lr_at(global_step - 1, steps_per_epoch, optim),
                task_loss=sums["task"] / seen,
                cdl=sums["cdl"] / seen,
                tdl=sums["tdl"] / seen,
                train_acc=correct / seen,
                eval_acc=eval_acc,
            )
        )
    return state, log


def _accuracy_on_slice(state: ModelState, ds: Dataset, n: int) -> float:
    sub = Dataset(
        vocabulary=ds.vocabulary,
        height=ds.height,
        width=ds.width,
        class_names=ds.class_names,
        planes=ds.planes[:n],
        labels=ds.labels[:n],
        split=ds.split,
        seed=ds.seed,
        noise_sigma=ds.noise_sigma,
    )
    return evaluate(state, sub, None)


def evaluate(
    state: ModelState,
    dataset: Dataset,
    channel_subset: Sequence[int] | None = None,
    batch_size: int = 256,
) -> float:
    """Top-1 accuracy on a split; exact correct-counts, so the result does
    not depend on batch size. None means the full-channel protocol."""
    m = state.config.m
    subset = tuple(range(m)) if channel_subset is None else tuple(sorted(set(channel_subset)))
    if len(subset) == 0:
        raise ParameterError("channel subset must not be empty")
    if subset[0] < 0 or subset[-1] >= m:
        raise ParameterError(f"channel subset {subset} outside vocabulary of size {m}")
    correct = 0
    pool = T.BufferPool()
    for start in range(0, len(dataset), batch_size):
        planes = dataset.planes[start : start + batch_size, list(subset)].astype(np.float64)
        labels = dataset.labels[start : start + batch_size].astype(np.int64)
        batch = Batch(planes=planes, labels=labels, subset=subset)
        with T.no_grad(), T.use_pool(pool):
            trace = forward(batch, state)
            correct += int((np.argmax(trace.logits.data, axis=1) == labels).sum())
    return correct / len(dataset)


def leave_k_out_sweep(
    state: ModelState, dataset: Dataset, n_keep: int
) -> tuple[list[tuple[tuple[int, ...], float]], float, float]:
    """Accuracy for every channel subset of size n_keep, plus mean and the
    std across subsets."""
    m = state.config.m
    if not (1 <= n_keep <= m):
        raise ParameterError(f"n_keep must be in [1, {m}], got {n_keep}")
    rows = []
    for combo in itertools.combinations(range(m), n_keep):
        rows.append((combo, evaluate(state, dataset, combo)))
    accs = np.array([a for _, a in rows])
    return rows, float(accs.mean()), float(accs.std())
