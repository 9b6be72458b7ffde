"""
Training objectives and optimizers.

Linear models minimise the exponential loss over the unit ball with
projected gradient descent and backtracking; conDRO alternates
exponentiated-gradient ascent on the two context weights with one descent
step on w; the ReLU network uses mini-batch momentum SGD.

Objectives are available on a sampled Dataset (EMPIRICAL) or exactly on the
generating distribution (POPULATION) through the Gaussian moment generating
function: for every (context, y) cell the signed score z is Gaussian with
mean M and variance V, so E[exp(-z)] = exp(-M + V/2).
"""
import enum
import logging
import math
from dataclasses import dataclass, field, replace

import numpy as np

from errors import (DivergenceError, EmptyGroupError, UnsupportedModeError,
                    ValidationError)
from predictors import (DEFAULT_HIDDEN, EnpPipeline, IccModel, LinearPredictor,
                        MaskPolicy, MlpPredictor, Router, classify)
from synthdata import Context, Dataset, ProblemParams, canonical_mask_rows

logger = logging.getLogger(__name__)

MONOTONE_SLACK = 1e-12
MIN_STEP = 1e-20


class Method(enum.Enum):
    ERM = "erm"
    IRM = "irm"
    ICC = "icc"
    CONDRO = "condro"
    ENP_FEATURE = "enp_feature"
    ENP_TARGET = "enp_target"


class DataMode(enum.Enum):
    EMPIRICAL = "empirical"
    POPULATION = "population"


class ModelKind(enum.Enum):
    LINEAR = "linear"
    MLP = "mlp"


@dataclass(frozen=True)
class TrainConfig:
    max_steps: int = 50000
    step_size: float = 1.0
    backtrack_factor: float = 0.5
    sufficient_decrease: float = 1e-4
    tolerance: float = 1e-10
    seed: int = 0
    weight_penalty: float = 0.0
    model_kind: ModelKind = ModelKind.LINEAR
    # conDRO context-weight step and stall patience
    group_step: float = 0.05
    patience: int = 2000
    # ReLU network recipe
    hidden: int = DEFAULT_HIDDEN
    epochs: int = 200
    batch_size: int = 64
    mlp_step: float = 0.01
    momentum: float = 0.9
    holdout_fraction: float = 0.2
    icc_router: Router = Router.ORACLE_CONTEXT

    def validate(self):
        checks = [
            (self.max_steps >= 1, "max_steps >= 1"),
            (self.step_size > 0, "step_size > 0"),
            (0 < self.backtrack_factor < 1, "backtrack_factor in (0, 1)"),
            (0 < self.sufficient_decrease < 1, "sufficient_decrease in (0, 1)"),
            (self.tolerance > 0, "tolerance > 0"),
            (self.weight_penalty >= 0, "weight_penalty >= 0"),
            (self.group_step > 0, "group_step > 0"),
            (self.patience >= 1, "patience >= 1"),
            (self.hidden >= 1, "hidden >= 1"),
            (self.epochs >= 1, "epochs >= 1"),
            (self.batch_size >= 1, "batch_size >= 1"),
            (self.mlp_step > 0, "mlp_step > 0"),
            (0 <= self.momentum < 1, "momentum in [0, 1)"),
            (0 <= self.holdout_fraction < 1, "holdout_fraction in [0, 1)"),
        ]
        for ok, constraint in checks:
            if not ok:
                raise ValidationError(f"train config violates {constraint}")
        return self

    def replace(self, **changes):
        return replace(self, **changes)


@dataclass(frozen=True)
class ObjectiveSpec:
    method: Method
    data_mode: DataMode = DataMode.EMPIRICAL
    mask_policy: MaskPolicy = MaskPolicy.ZERO_MASK
    # ICC objectives are per context
    context: Context = None


@dataclass
class TrainResult:
    model: object
    steps: int = 0
    objective: float = float("nan")
    trace: list = field(default_factory=list)


# ---------------------------------------------------------
#  LOSSES
# ---------------------------------------------------------

def exp_loss(z, y):
    """
    exp(-z * y) for a label y in {-1, +1}.
    """
    return np.exp(-np.asarray(z, dtype=float) * y) if np.ndim(z) else math.exp(-z * y)


def context_label(context):
    return np.where(np.asarray(context) == Context.C1, 1, -1)


def context_loss(z, context):
    """
    exp(-z) on c1, exp(+z) on c2: c1 is treated as the +1 class.
    """
    t = context_label(context)
    return exp_loss(z, t) if np.ndim(t) == 0 else np.exp(-np.asarray(z, dtype=float) * t)


def project_unit_ball(w, support=None):
    """
    Zero w outside `support`, then rescale onto the unit sphere if ||w|| > 1.
    """
    w = np.array(w, dtype=float)
    if support is not None:
        keep = np.zeros(len(w), dtype=bool)
        keep[list(support)] = True
        w[~keep] = 0.0
    norm = np.linalg.norm(w)
    if norm > 1.0:
        w = w / norm
    return w


def irm_support(d):
    return tuple(range(d))


# ---------------------------------------------------------
#  EMPIRICAL OBJECTIVES
# ---------------------------------------------------------

def _empirical_terms(spec, dataset):
    """
    (inputs, signs, weights, groups) such that the objective is
    sum_i weights_i * exp(-signs_i * f(inputs_i)) within each group.
    """
    if not isinstance(dataset, Dataset):
        raise ValidationError("EMPIRICAL mode requires a Dataset")
    method = Method(spec.method)
    x, y, contexts = dataset.x, dataset.y.astype(float), dataset.contexts
    n = len(dataset)
    if method in (Method.ERM, Method.IRM):
        if n == 0:
            raise EmptyGroupError("all")
        if method is Method.IRM:
            x = x * (np.arange(x.shape[1]) < dataset.d)
        return x, y, np.full(n, 1.0 / n), None
    if method is Method.ICC:
        if spec.context is None:
            raise ValidationError("ICC objective needs a context")
        members = contexts == Context(spec.context)
        if not members.any():
            raise EmptyGroupError(Context(spec.context).name)
        return x[members], y[members], np.full(int(members.sum()), 1.0 / members.sum()), None
    if method is Method.CONDRO:
        weights = np.zeros(n)
        for context in Context:
            members = contexts == context
            if not members.any():
                raise EmptyGroupError(context.name)
            weights[members] = 1.0 / members.sum()
        return x, y, weights, contexts
    if method is Method.ENP_FEATURE:
        annotated = dataset.annotated
        if not annotated.any():
            raise EmptyGroupError("annotated")
        x, contexts = x[annotated], contexts[annotated]
        present = [c for c in Context if (contexts == c).any()]
        weights = np.zeros(len(contexts))
        for context in present:
            members = contexts == context
            weights[members] = 1.0 / (len(present) * members.sum())
        return x, context_label(contexts).astype(float), weights, None
    if method is Method.ENP_TARGET:
        if n == 0:
            raise EmptyGroupError("all")
        return dataset.target_masks() * x, y, np.full(n, 1.0 / n), None
    raise ValidationError(f"unknown method {method}")


def _reduce(losses, weights, groups):
    weighted = losses * weights
    if groups is None:
        return weighted.sum()
    return np.array([weighted[groups == c].sum() for c in Context])


def empirical_objective(theta, spec, dataset, weight_penalty=0.0):
    """
    Objective value and exact gradient on a dataset. `theta` is a weight
    vector (linear) or an MlpPredictor, whose gradient is returned flattened.
    CONDRO returns per-context losses (shape (2,)) and gradients (shape (2, p)).
    """
    x, signs, weights, groups = _empirical_terms(spec, dataset)
    if isinstance(theta, MlpPredictor):
        scores, cache = theta.forward(x)
        params_vec = theta.get_vector()
    else:
        params_vec = np.asarray(theta, dtype=float)
        scores = x @ params_vec
    losses = np.exp(-signs * scores)
    dscore = -signs * losses * weights
    penalty = 0.5 * weight_penalty * float(params_vec @ params_vec)

    def gradient(ds):
        if isinstance(theta, MlpPredictor):
            grads, _ = theta.backward(cache, ds)
            return MlpPredictor.grads_to_vector(grads) + weight_penalty * params_vec
        return x.T @ ds + weight_penalty * params_vec

    if groups is None:
        return float(_reduce(losses, weights, None)) + penalty, gradient(dscore)
    value = _reduce(losses, weights, groups) + penalty
    grad = np.vstack([gradient(np.where(groups == c, dscore, 0.0)) for c in Context])
    return value, grad


# ---------------------------------------------------------
#  POPULATION OBJECTIVES
# ---------------------------------------------------------

def _cells(params, method, context=None):
    """
    (context, y, weight, sign_kind, group) per Gaussian cell of the objective.
    sign_kind 'label' scores y*w.x, 'context' scores t_c*w.x.
    """
    p = params.p_c
    mixture = {Context.C1: p, Context.C2: 1.0 - p}
    cells = []
    for c in Context:
        for y in (1, -1):
            if method in (Method.ERM, Method.IRM, Method.ENP_TARGET):
                cells.append((c, y, 0.5 * mixture[c], "label", None))
            elif method is Method.ICC:
                if c is Context(context):
                    cells.append((c, y, 0.5, "label", None))
            elif method is Method.CONDRO:
                cells.append((c, y, 0.5, "label", c))
            elif method is Method.ENP_FEATURE:
                cells.append((c, y, 0.25, "context", None))
    return cells


def _cell_moments(params, c, y):
    mu = params.mu_vec
    s = c.sign
    mean = np.concatenate([y * mu, s * y * mu, s * mu])
    d = params.d
    cov = np.concatenate([np.full(d, params.sigma ** 2),
                          np.full(d, params.x2_variance_factor(c) * params.sigma ** 2),
                          np.full(d, params.eta ** 2)])
    return mean, cov


def population_objective(w, spec, params, weight_penalty=0.0):
    """
    Exact expected objective and gradient for a linear predictor.
    """
    if isinstance(w, MlpPredictor):
        raise UnsupportedModeError("population objectives exist for linear predictors only")
    if not isinstance(params, ProblemParams):
        raise ValidationError("POPULATION mode requires ProblemParams")
    method = Method(spec.method)
    if method is Method.ICC and spec.context is None:
        raise ValidationError("ICC objective needs a context")
    w = np.asarray(w, dtype=float)
    d = params.d
    ones = np.ones(3 * d)
    irm_mask = (np.arange(3 * d) < d).astype(float)
    total = np.zeros(2) if method is Method.CONDRO else 0.0
    grad = np.zeros((2, 3 * d)) if method is Method.CONDRO else np.zeros(3 * d)
    for c, y, weight, sign_kind, group in _cells(params, method, spec.context):
        if method is Method.IRM:
            mask = irm_mask
        elif method is Method.ENP_TARGET:
            mask = canonical_mask_rows([c], d)[0]
        else:
            mask = ones
        w_eff = mask * w
        mean, cov = _cell_moments(params, c, y)
        sign = y if sign_kind == "label" else c.sign
        m = sign * (w_eff @ mean)
        v = float((w_eff * w_eff) @ cov)
        loss = math.exp(-m + 0.5 * v)
        cell_grad = weight * loss * mask * (-sign * mean + cov * w_eff)
        if group is None:
            total += weight * loss
            grad += cell_grad
        else:
            index = 0 if group is Context.C1 else 1
            total[index] += weight * loss
            grad[index] += cell_grad
    penalty = 0.5 * weight_penalty * float(w @ w)
    if method is Method.CONDRO:
        return total + penalty, grad + weight_penalty * w
    return float(total) + penalty, grad + weight_penalty * w


def objective_function(spec, source, weight_penalty=0.0):
    """
    Closure w -> (value, gradient) for the objective's data mode.
    """
    mode = DataMode(spec.data_mode)
    if mode is DataMode.POPULATION:
        if not isinstance(source, ProblemParams):
            raise ValidationError("POPULATION mode requires ProblemParams")
        return lambda w: population_objective(w, spec, source, weight_penalty)
    if not isinstance(source, Dataset):
        raise ValidationError("EMPIRICAL mode requires a Dataset")
    return lambda w: empirical_objective(w, spec, source, weight_penalty)


# ---------------------------------------------------------
#  OPTIMIZERS
# ---------------------------------------------------------

def _backtracking_step(fun, w, value, grad, step, config, support, step_index):
    """
    One projected step with Armijo backtracking. Returns (w, value, grad, step)
    or None when no step of size >= MIN_STEP decreases the objective.
    """
    while step >= MIN_STEP:
        candidate = project_unit_ball(w - step * grad, support)
        new_value, new_grad = fun(candidate)
        moved = float(grad @ (w - candidate))
        if math.isfinite(new_value) and new_value <= value - config.sufficient_decrease * moved:
            if new_value > value + MONOTONE_SLACK:
                raise AssertionError(f"accepted step {step_index} increased the objective")
            return candidate, new_value, new_grad, step
        step *= config.backtrack_factor
    return None


def projected_gradient_descent(fun, w0, config, support=None):
    """
    Minimise fun over the unit ball (restricted to `support` if given).
    Stops when an accepted step lowers the objective by less than tolerance.
    """
    w = project_unit_ball(w0, support)
    value, grad = fun(w)
    if not math.isfinite(value):
        raise DivergenceError(0, value)
    trace = [value]
    step = config.step_size
    steps = 0
    for steps in range(1, config.max_steps + 1):
        accepted = _backtracking_step(fun, w, value, grad, min(config.step_size, step / config.backtrack_factor),
                                      config, support, steps)
        if accepted is None:
            break
        w, new_value, grad, step = accepted
        decrease = value - new_value
        value = new_value
        trace.append(value)
        if decrease < config.tolerance:
            break
    logger.debug("projected descent finished after %d steps, objective %.6g", steps, value)
    return TrainResult(model=w, steps=steps, objective=value, trace=trace)


def minimax_condro(fun, w0, config, support=None):
    """
    min_w max_c L_c(w): exponentiated-gradient ascent on the context weights q
    alternated with one backtracking descent step on q . L(w). The returned
    weights are the best iterate under the true max.
    """
    w = project_unit_ball(w0, support)
    q = np.full(2, 0.5)
    losses, grads = fun(w)
    if not np.all(np.isfinite(losses)):
        raise DivergenceError(0, losses)
    best_w, best_value = w, float(losses.max())
    trace = [best_value]
    since_improved = 0
    step = config.step_size
    steps = 0
    for steps in range(1, config.max_steps + 1):
        q = q * np.exp(config.group_step * (losses - losses.max()))
        q = q / q.sum()

        def weighted(v):
            group_losses, group_grads = fun(v)
            return float(q @ group_losses), q @ group_grads

        value, grad = weighted(w)
        accepted = _backtracking_step(weighted, w, value, grad,
                                      min(config.step_size, step / config.backtrack_factor), config, support, steps)
        if accepted is not None:
            w, _, _, step = accepted
        losses, grads = fun(w)
        if not np.all(np.isfinite(losses)):
            raise DivergenceError(steps, losses)
        worst = float(losses.max())
        if worst < best_value - config.tolerance:
            best_w, best_value = w, worst
            since_improved = 0
        else:
            since_improved += 1
            best_w, best_value = (w, worst) if worst < best_value else (best_w, best_value)
        trace.append(worst)
        if since_improved >= config.patience:
            break
    logger.debug("conDRO finished after %d steps, worst-context loss %.6g, q=%s", steps, best_value, q)
    return TrainResult(model=best_w, steps=steps, objective=best_value, trace=trace)


# ---------------------------------------------------------
#  RELU NETWORK TRAINING
# ---------------------------------------------------------

def _balanced_accuracy(model, x, y, contexts):
    correct = model.predict(x) == y
    per_context = [correct[contexts == c].mean() for c in Context if (contexts == c).any()]
    return float(np.mean(per_context)) if per_context else 0.0


def train_mlp(spec, dataset, config):
    """
    Mini-batch momentum SGD on one network; the parameters with the best
    held-out balanced accuracy are returned.
    """
    if not isinstance(dataset, Dataset):
        raise UnsupportedModeError("the ReLU network trains on sampled data only")
    method = Method(spec.method)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=config.seed, spawn_key=(7,)))
    x, y, weights, groups = _empirical_terms(spec, dataset)
    contexts = dataset.contexts
    if method is Method.ICC:
        contexts = contexts[contexts == Context(spec.context)]
    elif method is Method.ENP_FEATURE:
        contexts = contexts[dataset.annotated]
    n = len(x)
    support = tuple(range(dataset.d)) if method is Method.IRM else None
    model = MlpPredictor.initialize(x.shape[1], config.hidden, rng, support=support)

    order = rng.permutation(n)
    n_val = int(math.floor(config.holdout_fraction * n)) if n >= 5 else 0
    val, fit = order[:n_val], order[n_val:]
    theta = model.get_vector()
    velocity = np.zeros_like(theta)
    q = np.full(2, 0.5)
    best_theta, best_score = theta.copy(), -1.0
    step_index = 0
    for epoch in range(config.epochs):
        shuffled = fit[rng.permutation(len(fit))]
        for start in range(0, len(shuffled), config.batch_size):
            batch = shuffled[start:start + config.batch_size]
            scores, cache = model.forward(x[batch])
            losses = np.exp(-y[batch] * scores)
            if method is Method.CONDRO:
                batch_groups = contexts[batch]
                group_losses = np.array([losses[batch_groups == c].mean() if (batch_groups == c).any() else 0.0
                                         for c in Context])
                q = q * np.exp(config.group_step * group_losses)
                q = q / q.sum()
                per_example = np.array([q[0] / max((batch_groups == Context.C1).sum(), 1),
                                        q[1] / max((batch_groups == Context.C2).sum(), 1)])
                batch_weights = np.where(batch_groups == Context.C1, per_example[0], per_example[1])
            else:
                batch_weights = np.full(len(batch), 1.0 / len(batch))
            value = float(losses @ batch_weights)
            step_index += 1
            if not math.isfinite(value):
                raise DivergenceError(step_index, value)
            grads, _ = model.backward(cache, -y[batch] * losses * batch_weights)
            gradient = MlpPredictor.grads_to_vector(grads) + config.weight_penalty * theta
            velocity = config.momentum * velocity - config.mlp_step * gradient
            theta = theta + velocity
            model = model.with_vector(theta)
        if n_val:
            score = _balanced_accuracy(model, x[val], y[val], contexts[val])
        else:
            score = -float(np.mean(np.exp(-y * model.score(x))))
        if score > best_score:
            best_theta, best_score = theta.copy(), score
    logger.debug("network training: %d updates, best held-out score %.4f", step_index, best_score)
    return TrainResult(model=model.with_vector(best_theta), steps=step_index, objective=best_score)


# ---------------------------------------------------------
#  TRAINING ENTRY POINTS
# ---------------------------------------------------------

def _check_source(spec, source):
    mode = DataMode(spec.data_mode)
    if mode is DataMode.POPULATION and not isinstance(source, ProblemParams):
        raise ValidationError("POPULATION mode requires ProblemParams")
    if mode is DataMode.EMPIRICAL and not isinstance(source, Dataset):
        raise ValidationError("EMPIRICAL mode requires a Dataset")
    return source if isinstance(source, ProblemParams) else source.params


def _fit_single(spec, source, config):
    params = _check_source(spec, source)
    method = Method(spec.method)
    if ModelKind(config.model_kind) is ModelKind.MLP and method is not Method.ENP_FEATURE:
        if DataMode(spec.data_mode) is DataMode.POPULATION:
            raise UnsupportedModeError("population training is defined for linear predictors only")
        return train_mlp(spec, source, config)
    fun = objective_function(spec, source, config.weight_penalty)
    support = irm_support(params.d) if method is Method.IRM else None
    w0 = np.zeros(3 * params.d)
    if method is Method.CONDRO:
        result = minimax_condro(fun, w0, config, support)
    else:
        result = projected_gradient_descent(fun, w0, config, support)
    result.model = LinearPredictor(result.model, support=support)
    return result


def _context_router(source, config):
    """
    Linear context predictor on every example's context label (ICC learned router).
    """
    spec = ObjectiveSpec(Method.ENP_FEATURE,
                         DataMode.POPULATION if isinstance(source, ProblemParams) else DataMode.EMPIRICAL)
    if isinstance(source, Dataset):
        source = Dataset(source.x, source.y, source.contexts, source.params, source.seed, 1.0,
                         np.ones(len(source), dtype=bool))
    return _fit_single(spec, source, config.replace(model_kind=ModelKind.LINEAR)).model


def fit(spec, source, config=None):
    """
    Train per `spec` and return a TrainResult (model, optimizer steps, final objective).
    """
    config = (config or TrainConfig()).validate()
    method = Method(spec.method)
    if method is Method.ICC:
        results = [_fit_single(replace(spec, context=c), source, config) for c in Context]
        router = None
        if Router(config.icc_router) is Router.LEARNED_ROUTER:
            router = _context_router(source, config)
        model = IccModel(results[0].model, results[1].model, config.icc_router, router)
        return TrainResult(model=model, steps=sum(r.steps for r in results),
                           objective=results[0].objective + results[1].objective,
                           trace=results[0].trace + results[1].trace)
    return _fit_single(spec, source, config)


def train(spec, source, config=None):
    return fit(spec, source, config).model


def fit_enp_pipeline(source, config=None, mask_policy=MaskPolicy.ZERO_MASK):
    """
    Stage one: context (feature) predictor on the annotated examples with
    class-balanced weights. Stage two: masks predicted for the unannotated
    examples, then the target minimises the masked loss over all examples.
    With ProblemParams both stages use their exact population objectives.
    """
    config = (config or TrainConfig()).validate()
    population = isinstance(source, ProblemParams)
    mode = DataMode.POPULATION if population else DataMode.EMPIRICAL
    if not population:
        if source.n_annotated == 0:
            raise ValidationError("ENP needs at least one annotated example")
        annotated_contexts = set(source.contexts[source.annotated].tolist())
        if len(annotated_contexts) < 2:
            logger.warning("annotated examples cover context %s only; the router sees one class",
                           Context(annotated_contexts.pop()).name)

    logger.info("ENP stage 1: fitting the feature predictor")
    feature = _fit_single(ObjectiveSpec(Method.ENP_FEATURE, mode), source, config.replace(model_kind=ModelKind.LINEAR))

    logger.info("ENP stage 2: fitting the target predictor")
    if not population:
        routed = np.where(classify(feature.model.score(source.x)) > 0, Context.C1, Context.C2)
        source = source.with_masks(canonical_mask_rows(routed, source.d))
    target = _fit_single(ObjectiveSpec(Method.ENP_TARGET, mode, mask_policy), source, config)
    pipeline = EnpPipeline(feature.model, target.model, mask_policy)
    return TrainResult(model=pipeline, steps=feature.steps + target.steps, objective=target.objective,
                       trace=target.trace)


def train_enp_pipeline(source, config=None, mask_policy=MaskPolicy.ZERO_MASK):
    return fit_enp_pipeline(source, config, mask_policy).model


class TrainMethod(enum.Enum):
    """
    The five compared training procedures.
    """
    ERM = "erm"
    IRM = "irm"
    ICC = "icc"
    CONDRO = "condro"
    ENP = "enp"


def fit_method(method, source, config=None, mask_policy=MaskPolicy.ZERO_MASK):
    """
    Train one of the compared methods on a Dataset (EMPIRICAL) or ProblemParams (POPULATION).
    """
    method = TrainMethod(method)
    if method is TrainMethod.ENP:
        return fit_enp_pipeline(source, config, mask_policy)
    mode = DataMode.POPULATION if isinstance(source, ProblemParams) else DataMode.EMPIRICAL
    return fit(ObjectiveSpec(Method(method.value), mode), source, config)
