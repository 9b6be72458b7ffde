"""
Monte-Carlo evaluation: per-context accuracy, balanced and worst-context
summaries, and the minority-context generalization gap.
"""
import logging
import math
from dataclasses import asdict, dataclass

import numpy as np

from errors import EmptyGroupError, ValidationError
from objectives import TrainConfig, TrainMethod, exp_loss, fit_method
from predictors import EnpPipeline, IccModel
from synthdata import (BLOCK_SIZE, STREAM_C1, STREAM_C2, Context,
                       attach_annotations, canonical_mask_rows, sample_context,
                       sample_dataset, sample_range)

logger = logging.getLogger(__name__)

# rows per evaluation shard
SHARD_SIZE = 25 * BLOCK_SIZE
GAP_TEST_SIZE = 100_000


@dataclass(frozen=True)
class AccuracyReport:
    acc_c1: float
    acc_c2: float
    balanced: float
    worst: float
    n_eval: int
    stderr_c1: float
    stderr_c2: float

    @classmethod
    def from_accuracies(cls, acc_c1, acc_c2, n_eval, stderr_c1=0.0, stderr_c2=0.0):
        return cls(acc_c1=acc_c1, acc_c2=acc_c2, balanced=(acc_c1 + acc_c2) / 2.0,
                   worst=min(acc_c1, acc_c2), n_eval=n_eval, stderr_c1=stderr_c1, stderr_c2=stderr_c2)

    def as_dict(self):
        return asdict(self)


@dataclass(frozen=True)
class GapReport:
    method: str
    context: str
    train_loss: float
    test_loss: float
    gap: float
    n: int
    p_c: float
    seed: int

    def as_dict(self):
        return asdict(self)


def predict_labels(model, x, contexts, oracle_router=False):
    """
    Labels from any model. Composite models route with their own router
    unless `oracle_router` hands them the true contexts.
    """
    if isinstance(model, (EnpPipeline, IccModel)):
        return model.predict(x, contexts=contexts, oracle_router=oracle_router)
    return model.predict(x)


def count_correct(model, params, context, start, stop, seed, oracle_router=False):
    """
    Correct predictions on examples [start, stop) of the context's evaluation stream.
    """
    context = Context(context)
    stream = STREAM_C1 if context is Context.C1 else STREAM_C2
    contexts, y, x = sample_range(params, seed, start, stop, stream=stream, fixed_context=context)
    return int(np.count_nonzero(predict_labels(model, x, contexts, oracle_router) == y))


def mc_accuracy(model, params, context, n_mc, seed, oracle_router=False):
    """
    Accuracy on n_mc fresh samples of one context and its normal-approximation
    standard error. Samples are processed in shards; counts are exact so the
    shard size never changes the result.
    """
    if n_mc < 1:
        raise ValidationError(f"n_mc >= 1 required, got {n_mc}")
    params.validate()
    correct = 0
    for start in range(0, int(n_mc), SHARD_SIZE):
        correct += count_correct(model, params, context, start, min(start + SHARD_SIZE, n_mc), seed,
                                 oracle_router)
    accuracy = correct / n_mc
    return accuracy, math.sqrt(accuracy * (1.0 - accuracy) / n_mc)


def report(model, params, n_mc, seed, oracle_router=False):
    """
    Both per-context accuracies plus balanced and worst-context summaries.
    The two contexts read disjoint sample streams derived from `seed`.
    """
    acc_c1, se_c1 = mc_accuracy(model, params, Context.C1, n_mc, seed, oracle_router)
    acc_c2, se_c2 = mc_accuracy(model, params, Context.C2, n_mc, seed, oracle_router)
    return AccuracyReport.from_accuracies(acc_c1, acc_c2, int(n_mc), se_c1, se_c2)


def _minority_loss(model, x, y):
    if isinstance(model, IccModel):
        scores = model.w_c2.score(x)
    else:
        # ground-truth c2 annotation for every minority example
        masked = canonical_mask_rows(np.full(len(x), Context.C2), model.d) * x
        scores = model.target.score(masked)
    return float(np.mean(exp_loss(scores, y.astype(float))))


def generalization_gap(method, params, n, fraction=1.0, seed=0, config=None):
    """
    Exponential loss of the trained minority-context predictor on its own
    training examples against 1e5 fresh c2 samples; gap = test - train.
    """
    method = TrainMethod(method)
    if method not in (TrainMethod.ICC, TrainMethod.ENP):
        raise ValidationError(f"generalization gap is defined for ICC and ENP, got {method.value}")
    if n < 10:
        raise ValidationError(f"n >= 10 required, got {n}")
    config = (config or TrainConfig()).replace(seed=seed)
    dataset = sample_dataset(params, n, seed)
    minority = dataset.subset(Context.C2)
    if len(minority) == 0:
        raise EmptyGroupError(Context.C2.name)
    if method is TrainMethod.ENP:
        dataset = attach_annotations(dataset, fraction)
    model = fit_method(method, dataset, config).model
    train_loss = _minority_loss(model, minority.x, minority.y)
    fresh = sample_context(params, Context.C2, GAP_TEST_SIZE, seed)
    test_loss = _minority_loss(model, fresh.x, fresh.y)
    logger.info("%s gap at n=%d p_c=%.4g seed=%d: %.4g", method.value, n, params.p_c, seed, test_loss - train_loss)
    return GapReport(method=method.value, context=Context.C2.name, train_loss=train_loss, test_loss=test_loss,
                     gap=test_loss - train_loss, n=int(n), p_c=params.p_c, seed=int(seed))
