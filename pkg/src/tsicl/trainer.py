"""Adam training loop over context datasets with early stopping.

Loss is masked MSE over the query's answer region only; demonstration answers
inside the context carry no loss unless ``supervise_demo_outputs`` is set.
Samples are bucketed by token length (context size varies with demo count) and
both bucket-internal order and batch order are reshuffled per epoch from the
run seed, so training is fully reproducible.
"""

from __future__ import annotations

import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .context import ContextDataset
from .errors import ConfigError, GeometryError, NumericalError
from .model import (
    DECODER_CAUSAL,
    EVAL_MODE,
    TRAIN_MODE,
    ModelConfig,
    answer_region,
    forward_patch_predictions,
    horizon_patch_count,
    readout_rows,
)


@dataclass(frozen=True)
class TrainConfig:
    learning_rate: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 5
    seed: int = 0
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    clip_norm: float = 1.0
    supervise_demo_outputs: bool = False

    def __post_init__(self) -> None:
        if min(self.batch_size, self.max_epochs, self.patience) < 1:
            raise ConfigError("batch_size, max_epochs and patience must be >= 1")
        if self.learning_rate < 0 or self.eps <= 0 or self.clip_norm <= 0:
            raise ConfigError("learning_rate must be >= 0; eps and clip_norm > 0")
        if not (0 <= self.beta1 < 1 and 0 <= self.beta2 < 1):
            raise ConfigError("betas must lie in [0, 1)")
        if self.patience > self.max_epochs:
            raise ConfigError("patience must not exceed max_epochs")


@dataclass
class TrainRecord:
    train_losses: list[float] = field(default_factory=list)
    valid_losses: list[float] = field(default_factory=list)
    best_epoch: int = -1
    wall_time_s: float = 0.0

    @property
    def best_valid_loss(self) -> float:
        return self.valid_losses[self.best_epoch]

    def write_csv(self, path: str | Path) -> None:
        lines = ["epoch,train_loss,valid_loss"]
        for e, (tr, va) in enumerate(zip(self.train_losses, self.valid_losses)):
            lines.append(f"{e},{tr!r},{va!r}")
        Path(path).write_text("\n".join(lines) + "\n")


class Adam:
    """Adam with global-norm gradient clipping; state keyed by parameter name."""

    def __init__(self, params: dict[str, ad.Parameter], config: TrainConfig):
        self.params = params
        self.config = config
        self.step_count = 0
        self.m = {name: np.zeros_like(p.data) for name, p in params.items()}
        self.v = {name: np.zeros_like(p.data) for name, p in params.items()}

    def step(self) -> None:
        c = self.config
        grads = {}
        sq_sum = 0.0
        for name, p in self.params.items():
            g = p.grad if p.grad is not None else np.zeros_like(p.data)
            grads[name] = g
            sq_sum += float(np.sum(g * g))
        norm = np.sqrt(sq_sum)
        if norm > c.clip_norm:
            scale = c.clip_norm / norm
            grads = {name: g * scale for name, g in grads.items()}
        self.step_count += 1
        t = self.step_count
        correction = np.sqrt(1.0 - c.beta2**t) / (1.0 - c.beta1**t)
        for name, p in self.params.items():
            g = grads[name]
            self.m[name] = c.beta1 * self.m[name] + (1 - c.beta1) * g
            self.v[name] = c.beta2 * self.v[name] + (1 - c.beta2) * g * g
            p.data -= c.learning_rate * correction * self.m[name] / (np.sqrt(self.v[name]) + c.eps)


def _check_geometry(dataset: ContextDataset, config: ModelConfig) -> None:
    L, h = dataset.window.lookback, dataset.window.horizon
    p = config.patch_size
    if L % p != 0 or h % p != 0:
        raise GeometryError(f"window {L}/{h} not divisible by patch size {p}")
    for s in dataset.samples[:1]:
        if (len(s.tokens) + h) % p != 0:
            raise GeometryError("token stream not divisible by patch size")


def _length_buckets(dataset: ContextDataset) -> dict[int, list[int]]:
    buckets: dict[int, list[int]] = {}
    for i, s in enumerate(dataset.samples):
        buckets.setdefault(len(s.tokens), []).append(i)
    return buckets


def _batch_streams(dataset: ContextDataset, idxs: list[int], mode: str, variant: str) -> np.ndarray:
    h = dataset.window.horizon
    streams = []
    for i in idxs:
        s = dataset.samples[i]
        if variant == DECODER_CAUSAL and mode == TRAIN_MODE:
            region = answer_region(h, values=s.target)
        else:
            region = answer_region(h)
        streams.append(np.concatenate([s.tokens, region]))
    return np.stack(streams)


def _loss_regions(
    dataset: ContextDataset, idxs: list[int], config: ModelConfig, total_patches: int, supervise_demos: bool
) -> list[tuple[int, int, np.ndarray]]:
    """(row_start, row_stop, truth grid) per supervised region of the stream."""
    L, h = dataset.window.lookback, dataset.window.horizon
    p = config.patch_size
    hp = horizon_patch_count(h, config)
    regions = []
    r0, r1 = readout_rows(config, total_patches, hp)
    truth = np.stack([dataset.samples[i].target for i in idxs]).reshape(len(idxs), hp, p)
    regions.append((r0, r1, truth))
    if supervise_demos:
        n_tokens = len(dataset.samples[idxs[0]].tokens)
        m = (n_tokens - L) // (L + h)
        shift = 1 if config.variant == DECODER_CAUSAL else 0
        for k in range(m):
            lo = (k * (L + h) + L) // p
            hi = ((k + 1) * (L + h)) // p
            vals = np.stack(
                [dataset.samples[i].tokens[k * (L + h) + L : (k + 1) * (L + h), 0] for i in idxs]
            ).reshape(len(idxs), hp, p)
            regions.append((lo - shift, hi - shift, vals))
    return regions


def _batch_loss_graph(
    dataset: ContextDataset,
    idxs: list[int],
    params: dict[str, ad.Parameter],
    config: ModelConfig,
    supervise_demos: bool,
) -> ad.Tensor:
    streams = _batch_streams(dataset, idxs, TRAIN_MODE, config.variant)
    preds = forward_patch_predictions(streams, params, config)
    regions = _loss_regions(dataset, idxs, config, preds.shape[1], supervise_demos)
    slices = [ad.row_slice(preds, r0, r1) for r0, r1, _ in regions]
    pred_cat = slices[0] if len(slices) == 1 else ad.concat(slices, axis=1)
    truth = np.concatenate([t for _, _, t in regions], axis=1)
    return ad.mse_loss(pred_cat, truth, np.ones_like(truth))


def evaluate_loss(
    dataset: ContextDataset,
    params: dict[str, ad.Parameter],
    config: ModelConfig,
    batch_size: int = 64,
) -> float:
    """Deployment-mode MSE over the answer region (placeholder inputs, no tape)."""
    h = dataset.window.horizon
    hp = horizon_patch_count(h, config)
    sq_sum, count = 0.0, 0
    for _, idxs in sorted(_length_buckets(dataset).items()):
        for lo in range(0, len(idxs), batch_size):
            chunk = idxs[lo : lo + batch_size]
            streams = _batch_streams(dataset, chunk, EVAL_MODE, config.variant)
            preds = forward_patch_predictions(streams, params, config)
            r0, r1 = readout_rows(config, preds.shape[1], hp)
            got = preds.data[:, r0:r1, :].reshape(len(chunk), h)
            truth = np.stack([dataset.samples[i].target for i in chunk])
            sq_sum += float(np.sum((got - truth) ** 2))
            count += truth.size
    return sq_sum / count


def train(
    params: dict[str, ad.Parameter],
    dataset: ContextDataset,
    valid: ContextDataset,
    model_config: ModelConfig,
    train_config: TrainConfig,
) -> tuple[dict[str, ad.Parameter], TrainRecord]:
    """Optimize in place; restore and return the best-validation parameters."""
    if not dataset.samples or not valid.samples:
        raise ConfigError("train/valid datasets must be non-empty")
    _check_geometry(dataset, model_config)
    _check_geometry(valid, model_config)

    start = time.perf_counter()
    record = TrainRecord()
    optimizer = Adam(params, train_config)
    buckets = _length_buckets(dataset)
    best_valid = np.inf
    best_state: dict[str, np.ndarray] = {}
    stale = 0

    for epoch in range(train_config.max_epochs):
        rng = np.random.default_rng(np.random.SeedSequence((train_config.seed, 1, epoch)))
        batches: list[list[int]] = []
        for _, idxs in sorted(buckets.items()):
            order = [idxs[j] for j in rng.permutation(len(idxs))]
            for lo in range(0, len(order), train_config.batch_size):
                batches.append(order[lo : lo + train_config.batch_size])
        batches = [batches[j] for j in rng.permutation(len(batches))]

        loss_sum, n_seen = 0.0, 0
        for batch in batches:
            for p in params.values():
                p.zero_grad()
            with ad.Tape() as tape:
                loss = _batch_loss_graph(
                    dataset, batch, params, model_config, train_config.supervise_demo_outputs
                )
                tape.backward(loss)
            value = float(loss.data)
            if not np.isfinite(value):
                raise NumericalError(f"training loss diverged at epoch {epoch}")
            optimizer.step()
            loss_sum += value * len(batch)
            n_seen += len(batch)

        valid_loss = evaluate_loss(valid, params, model_config)
        record.train_losses.append(loss_sum / n_seen)
        record.valid_losses.append(valid_loss)

        if valid_loss < best_valid:
            best_valid = valid_loss
            record.best_epoch = epoch
            best_state = {name: p.data.copy() for name, p in params.items()}
            stale = 0
        else:
            stale += 1
            if stale >= train_config.patience:
                break

    for name, p in params.items():
        p.data = best_state[name]
    record.wall_time_s = time.perf_counter() - start
    return params, record
