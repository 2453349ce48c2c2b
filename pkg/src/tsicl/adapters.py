"""Non-fine-tuning baselines: coerce an unseen task into a model's native one.

Each adapter rewrites a single task example into a query the frozen model can
answer natively, plus the bookkeeping needed to score the model output against
the example's chronological target. Adapters never touch model parameters.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass

import numpy as np

from .errors import DataError
from .tasks import TaskExample, TaskKind, token_array


class AdapterKind(enum.Enum):
    BACKTRACE_FLIP = "backtrace_flip"
    IMPUTE_TRUNCATE = "impute_truncate"
    ENCODER_CONCAT_MASK = "encoder_concat_mask"


@dataclass(frozen=True)
class AdaptedQuery:
    """A reprogrammed query plus the recipe for scoring the model's output.

    ``predict_steps`` values are requested from the model; if
    ``reverse_output`` they are flipped back into chronological order, then
    ``score_offsets`` (or all of them) are compared against ``truth``.
    ``includes_region`` marks token streams that already carry their masked
    answer region (encoder concat) rather than needing one appended.
    """

    tokens: np.ndarray
    predict_steps: int
    truth: np.ndarray
    reverse_output: bool = False
    score_offsets: np.ndarray | None = None
    includes_region: bool = False

    def score_prediction(self, raw: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Map a raw model output onto (prediction, truth) pairs to score."""
        chron = raw[: self.predict_steps]
        if self.reverse_output:
            chron = chron[::-1]
        if self.score_offsets is not None:
            chron = chron[self.score_offsets]
        return chron, self.truth


def adapt_backtrace_flip(example: TaskExample) -> AdaptedQuery:
    """Reverse the input in time and forecast; un-reverse the prediction."""
    if example.task is not TaskKind.BACKTRACE:
        raise DataError(f"backtrace flip applied to a {example.task} example")
    flipped = token_array(example.input[::-1, 0])
    return AdaptedQuery(
        tokens=flipped,
        predict_steps=example.horizon,
        truth=example.target.copy(),
        reverse_output=True,
    )


def adapt_impute_truncate(example: TaskExample) -> AdaptedQuery:
    """Truncate an imputation input on one side of the masked area and forecast.

    The reconstruction area is the hull [first, last] of the masked positions.
    When its midpoint sits in the late half of the window, the observed prefix
    becomes forecasting history; otherwise the observed suffix is reversed and
    forecast backwards through the hull. Scoring always happens at the masked
    positions, in chronological order.
    """
    if example.task is not TaskKind.IMPUTE:
        raise DataError(f"impute truncate applied to a {example.task} example")
    positions = example.masked_positions
    if positions.size == 0:
        raise DataError("imputation example has no masked positions")
    L = example.lookback
    first, last = int(positions[0]), int(positions[-1])
    hull = last - first + 1
    if first == 0 and last == L - 1:
        raise DataError("masked area touches both ends; no usable context remains")
    midpoint = (first + last) / 2.0
    if midpoint >= L / 2.0:
        if first == 0:
            raise DataError("masked area reaches the start; no prefix context")
        history = example.input[:first, 0]
        return AdaptedQuery(
            tokens=token_array(history),
            predict_steps=hull,
            truth=example.target.copy(),
            score_offsets=positions - first,
        )
    if last == L - 1:
        raise DataError("masked area reaches the end; no suffix context")
    suffix = example.input[last + 1 :, 0]
    return AdaptedQuery(
        tokens=token_array(suffix[::-1]),
        predict_steps=hull,
        truth=example.target.copy(),
        reverse_output=True,
        score_offsets=positions - first,
    )


def adapt_encoder_concat(example: TaskExample) -> AdaptedQuery:
    """Concatenate input and masked answer region for the encoder variant.

    Backtrace examples pass through the flip first, so the encoder always sees
    a forecasting-shaped stream of length L+h with the last h steps masked.
    """
    if example.task is TaskKind.BACKTRACE:
        flip = adapt_backtrace_flip(example)
        base_tokens, reverse = flip.tokens, True
    elif example.task is TaskKind.FORECAST:
        base_tokens, reverse = token_array(example.input[:, 0]), False
    else:
        raise DataError(f"encoder concat applied to a {example.task} example")
    h = example.horizon
    masked_tail = token_array(np.zeros(h), mask=np.ones(h), segment=1)
    return AdaptedQuery(
        tokens=np.concatenate([base_tokens, masked_tail]),
        predict_steps=h,
        truth=example.target.copy(),
        reverse_output=reverse,
        includes_region=True,
    )


def adapter_for(variant_is_decoder: bool, task: TaskKind) -> AdapterKind:
    """Baseline adapter table by (backbone family, evaluated task)."""
    if variant_is_decoder:
        if task is TaskKind.BACKTRACE:
            return AdapterKind.BACKTRACE_FLIP
        if task is TaskKind.IMPUTE:
            return AdapterKind.IMPUTE_TRUNCATE
        raise DataError("no baseline adapter for (decoder, forecast): forecasting is native")
    if task in (TaskKind.FORECAST, TaskKind.BACKTRACE):
        return AdapterKind.ENCODER_CONCAT_MASK
    raise DataError("no baseline adapter for (encoder, impute)")


def apply_adapter(kind: AdapterKind, example: TaskExample) -> AdaptedQuery:
    if kind is AdapterKind.BACKTRACE_FLIP:
        return adapt_backtrace_flip(example)
    if kind is AdapterKind.IMPUTE_TRUNCATE:
        return adapt_impute_truncate(example)
    return adapt_encoder_concat(example)
