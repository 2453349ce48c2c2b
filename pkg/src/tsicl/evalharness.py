"""Unseen-task evaluation: frozen weights, context path vs reprogramming baseline.

The protocol mirrors the pre-training split: a model trained on some task set
is evaluated on a task it never saw. The context path prepends demonstrations
of the unseen task (train-split data only); the baseline path rewrites each
query with the matching non-fine-tuning adapter. Parameters are checksummed
around the whole stage to enforce that evaluation never updates them.
"""

from __future__ import annotations

import hashlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .adapters import AdaptedQuery, adapter_for, apply_adapter
from .context import answer_tokens
from .errors import ConfigError, DataError
from .model import (
    DECODER_CAUSAL,
    ModelConfig,
    answer_region,
    forward_patch_predictions,
    horizon_patch_count,
    readout_rows,
)
from .series import SplitStore
from .tasks import TaskExample, TaskKind, WindowSpec, generate_example, valid_start_range


def mse(pred: np.ndarray, truth: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DataError(f"mse length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise DataError("mse of empty arrays")
    return float(np.mean((pred - truth) ** 2))


def mae(pred: np.ndarray, truth: np.ndarray) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    truth = np.asarray(truth, dtype=np.float64)
    if pred.shape != truth.shape:
        raise DataError(f"mae length mismatch: {pred.shape} vs {truth.shape}")
    if pred.size == 0:
        raise DataError("mae of empty arrays")
    return float(np.mean(np.abs(pred - truth)))


def params_checksum(params: dict[str, ad.Parameter]) -> str:
    """SHA-256 over parameter names and raw float64 bytes (order-independent)."""
    digest = hashlib.sha256()
    for name in sorted(params):
        digest.update(name.encode())
        digest.update(np.ascontiguousarray(params[name].data).tobytes())
    return digest.hexdigest()


@dataclass(frozen=True)
class EvalProtocol:
    eval_task: TaskKind
    pretrain_tasks: tuple[TaskKind, ...]
    window: WindowSpec
    demo_count: int = 4
    dataset_ids: tuple[str, ...] = ()
    seeds: tuple[int, ...] = (0,)

    def __post_init__(self) -> None:
        if self.eval_task in self.pretrain_tasks:
            raise ConfigError(f"evaluation task {self.eval_task} was seen in pre-training")
        if self.demo_count < 0:
            raise ConfigError("demo_count must be >= 0")


@dataclass(frozen=True)
class EvalRow:
    backbone: str
    task: str
    dataset: str
    horizon: int
    method: str  # "baseline" or "ictp"
    mse: float
    mae: float
    seed: int


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)

    def write_csv(self, path: str | Path) -> None:
        lines = ["backbone,task,dataset,horizon,method,mse,mae,seed"]
        for r in self.rows:
            lines.append(
                f"{r.backbone},{r.task},{r.dataset},{r.horizon},{r.method},{r.mse!r},{r.mae!r},{r.seed}"
            )
        try:
            ratio = improvement_ratio(self)
            lines.append(f"# improvement_ratio,{ratio!r}")
        except DataError:
            pass
        Path(path).write_text("\n".join(lines) + "\n")

    @staticmethod
    def read_csv(path: str | Path) -> "EvalReport":
        report = EvalReport()
        text = Path(path).read_text().splitlines()
        for line in text[1:]:
            if not line or line.startswith("#"):
                continue
            bk, task, ds, hz, method, m_, a_, seed = line.split(",")
            report.rows.append(EvalRow(bk, task, ds, int(hz), method, float(m_), float(a_), int(seed)))
        return report


def improvement_ratio(report: EvalReport) -> float:
    """Mean per-cell relative improvement (baseline - ictp) / baseline.

    A cell is one (backbone, task, dataset, horizon, seed, metric) tuple and
    must carry both methods. Negative improvements are averaged in as-is.
    """
    by_cell: dict[tuple, dict[str, EvalRow]] = {}
    for r in report.rows:
        by_cell.setdefault((r.backbone, r.task, r.dataset, r.horizon, r.seed), {})[r.method] = r
    ratios = []
    for key, methods in by_cell.items():
        if "baseline" not in methods or "ictp" not in methods:
            raise DataError(f"cell {key} is missing a method; cannot pair")
        for metric in ("mse", "mae"):
            b = getattr(methods["baseline"], metric)
            i = getattr(methods["ictp"], metric)
            if b == 0:
                raise DataError(f"baseline {metric} is 0 in cell {key}; ratio undefined")
            ratios.append((b - i) / b)
    if not ratios:
        raise DataError("empty report")
    return float(np.mean(ratios))


def demo_span_width(task: TaskKind, w: WindowSpec) -> int:
    return w.lookback if task is TaskKind.IMPUTE else w.lookback + w.horizon


def select_eval_demos(
    train_s, task: TaskKind, w: WindowSpec, m: int, rng: np.random.Generator
) -> list[TaskExample]:
    """The m most recent pairwise-disjoint train windows, oldest first.

    Deterministic by construction; rng is only consumed by imputation masks.
    """
    if m == 0:
        return []
    lo, hi = valid_start_range(task, len(train_s), w)
    width = demo_span_width(task, w)
    starts = [hi - i * width for i in range(m)]
    if not starts or starts[-1] < lo:
        available = max(0, (hi - lo) // width + 1) if hi >= lo else 0
        raise DataError(f"train split admits only {available} disjoint demo windows, need {m}")
    return [generate_example(task, train_s, t, w, rng) for t in reversed(starts)]


def build_stream(demos: list[TaskExample], query: TaskExample) -> np.ndarray:
    """Flatten demos and query into one token stream (no task-match check).

    The dataset builder goes through ``assemble`` which enforces matching
    tasks; this variant also serves deliberate wrong-task-context probes.
    """
    parts = []
    for d in demos:
        parts.append(d.input)
        parts.append(answer_tokens(d.target))
    parts.append(query.input)
    return np.concatenate(parts, axis=0)


def batched_predict(
    streams: list[np.ndarray],
    horizons: list[int],
    params: dict[str, ad.Parameter],
    config: ModelConfig,
    batch_size: int = 64,
) -> list[np.ndarray]:
    """Evaluation-mode predictions for streams that already end in answer regions.

    Streams are grouped by (length, horizon) so each batch is rectangular;
    outputs come back in input order.
    """
    groups: dict[tuple[int, int], list[int]] = {}
    for i, (s, h) in enumerate(zip(streams, horizons)):
        groups.setdefault((len(s), h), []).append(i)
    out: list[np.ndarray | None] = [None] * len(streams)
    for (_, h), idxs in sorted(groups.items()):
        hp = horizon_patch_count(h, config)
        for lo in range(0, len(idxs), batch_size):
            chunk = idxs[lo : lo + batch_size]
            batch = np.stack([streams[i] for i in chunk])
            preds = forward_patch_predictions(batch, params, config)
            r0, r1 = readout_rows(config, preds.shape[1], hp)
            values = preds.data[:, r0:r1, :].reshape(len(chunk), h)
            for row, i in enumerate(chunk):
                out[i] = values[row]
    return out


def _fit_adapted(adapted: AdaptedQuery, config: ModelConfig) -> tuple[np.ndarray, int]:
    """Make an adapted query's geometry patch-divisible for the model.

    The answer region is rounded up to whole patches; surplus history is
    trimmed from the oldest end. Extra predicted steps are simply unread.
    """
    p = config.patch_size
    if adapted.includes_region:
        if len(adapted.tokens) % p != 0:
            raise DataError(f"adapted stream length {len(adapted.tokens)} not patch-divisible")
        return adapted.tokens, adapted.predict_steps
    model_h = -(-adapted.predict_steps // p) * p
    trim = (len(adapted.tokens) + model_h) % p
    history = adapted.tokens[trim:]
    if len(history) < p:
        raise DataError("adapted query has no usable context after patch alignment")
    return np.concatenate([history, answer_region(model_h)]), model_h


def context_path(
    queries: list[TaskExample],
    demos: list[TaskExample],
    params: dict[str, ad.Parameter],
    config: ModelConfig,
    horizon: int,
) -> tuple[np.ndarray, np.ndarray]:
    """Predictions and truths, stacked (N, h), for the demonstration path."""
    streams = [np.concatenate([build_stream(demos, q), answer_region(horizon)]) for q in queries]
    preds = batched_predict(streams, [horizon] * len(streams), params, config)
    return np.stack(preds), np.stack([q.target for q in queries])


def baseline_path(
    queries: list[TaskExample],
    params: dict[str, ad.Parameter],
    config: ModelConfig,
) -> tuple[np.ndarray, np.ndarray]:
    """Predictions and truths for the matching reprogramming adapter."""
    kind = adapter_for(config.variant == DECODER_CAUSAL, queries[0].task)
    adapted = [apply_adapter(kind, q) for q in queries]
    fitted = [_fit_adapted(a, config) for a in adapted]
    raw = batched_predict([f[0] for f in fitted], [f[1] for f in fitted], params, config)
    preds, truths = [], []
    for a, r in zip(adapted, raw):
        got, want = a.score_prediction(r)
        preds.append(got)
        truths.append(want)
    return np.stack(preds), np.stack(truths)


def enumerate_queries(
    test_s, task: TaskKind, w: WindowSpec, stride: int, rng: np.random.Generator
) -> list[TaskExample]:
    lo, hi = valid_start_range(task, len(test_s), w)
    if hi < lo:
        raise DataError(f"test split of length {len(test_s)} admits no {task} window")
    return [generate_example(task, test_s, t, w, rng) for t in range(lo, hi + 1, stride)]


def run_unseen_eval(
    protocol: EvalProtocol,
    backbones: dict[str, tuple[ModelConfig, dict[str, ad.Parameter]]],
    stores: list[SplitStore],
    seed: int = 0,
    stride: int | None = None,
) -> EvalReport:
    """Score every (backbone, dataset) cell with both methods on frozen weights."""
    stride = protocol.window.horizon if stride is None else stride
    wanted = set(protocol.dataset_ids) if protocol.dataset_ids else None
    report = EvalReport()
    for backbone, (config, params) in backbones.items():
        before = params_checksum(params)
        for store in stores:
            if wanted is not None and store.dataset not in wanted:
                continue
            ctx_preds, ctx_truths, base_preds, base_truths = [], [], [], []
            for ch_idx, ch in enumerate(store.channels):
                train_s = store.series(ch, "train")
                test_s = store.series(ch, "test")
                query_rng = np.random.default_rng(np.random.SeedSequence((seed, 2, ch_idx)))
                queries = enumerate_queries(test_s, protocol.eval_task, protocol.window, stride, query_rng)
                demo_rng = np.random.default_rng(np.random.SeedSequence((seed, 3, ch_idx)))
                demos = select_eval_demos(
                    train_s, protocol.eval_task, protocol.window, protocol.demo_count, demo_rng
                )
                p, t = context_path(queries, demos, params, config, protocol.window.horizon)
                ctx_preds.append(p)
                ctx_truths.append(t)
                p, t = baseline_path(queries, params, config)
                base_preds.append(p)
                base_truths.append(t)
            for method, preds, truths in (
                ("baseline", base_preds, base_truths),
                ("ictp", ctx_preds, ctx_truths),
            ):
                pred = np.concatenate(preds)
                truth = np.concatenate(truths)
                report.rows.append(
                    EvalRow(
                        backbone=backbone,
                        task=str(protocol.eval_task),
                        dataset=store.dataset,
                        horizon=protocol.window.horizon,
                        method=method,
                        mse=mse(pred, truth),
                        mae=mae(pred, truth),
                        seed=seed,
                    )
                )
        after = params_checksum(params)
        if before != after:
            raise RuntimeError(f"frozen-model contract violated for backbone {backbone}")
    return report
