"""
Predictors for the two-context problem: norm-bounded linear scores, a
one-hidden-layer ReLU network, the two-stage ENP pipeline (context router
+ masked target) and per-context ICC classifiers.
"""
import enum
import math
import re

import numpy as np

from errors import DatasetFormatError, DimensionError, ValidationError
from synthdata import Context, canonical_mask, canonical_mask_rows

NORM_SLACK = 1e-9
DEFAULT_HIDDEN = 512


class MaskPolicy(enum.Enum):
    ZERO_MASK = "zero_mask"
    NO_MASK_AT_EVAL = "no_mask_at_eval"


class Router(enum.Enum):
    ORACLE_CONTEXT = "oracle_context"
    LEARNED_ROUTER = "learned_router"


def classify(score):
    """
    +1 for score >= 0, -1 otherwise. Works on scalars and arrays.
    """
    if np.ndim(score) == 0:
        return 1 if score >= 0 else -1
    return np.where(np.asarray(score) >= 0, 1, -1).astype(np.int8)


def apply_mask(mask, x):
    """
    Hadamard product of a mask (FeatureMask or array) with x (one row or a matrix).
    """
    bits = mask.as_array() if hasattr(mask, "as_array") else np.asarray(mask, dtype=float)
    x = np.asarray(x, dtype=float)
    if bits.shape[-1] != x.shape[-1]:
        raise DimensionError(f"mask has {bits.shape[-1]} coordinates, input has {x.shape[-1]}")
    return bits * x


def _as_matrix(x, width):
    x = np.asarray(x, dtype=float)
    if x.shape[-1] != width:
        raise DimensionError(f"input has {x.shape[-1]} coordinates, model expects {width}")
    return x


class LinearPredictor:
    kind = "linear"

    def __init__(self, w, support=None):
        w = np.array(w, dtype=float).ravel()
        if len(w) % 3:
            raise DimensionError(f"weight length {len(w)} is not a multiple of 3")
        if support is not None:
            support = tuple(int(j) for j in support)
            outside = np.ones(len(w), dtype=bool)
            outside[list(support)] = False
            if np.any(w[outside] != 0):
                raise ValidationError("weights must be zero outside the support")
        norm = float(np.linalg.norm(w))
        if norm > 1.0 + NORM_SLACK:
            raise ValidationError(f"||w||_2 = {norm} exceeds 1")
        w.setflags(write=False)
        self.w = w
        self.support = support

    @property
    def d(self):
        return len(self.w) // 3

    @property
    def n_inputs(self):
        return len(self.w)

    def score(self, x):
        return _as_matrix(x, len(self.w)) @ self.w

    def predict(self, x, contexts=None):
        return classify(self.score(x))

    def __eq__(self, other):
        return (isinstance(other, LinearPredictor) and self.support == other.support
                and np.array_equal(self.w, other.w))

    __hash__ = None

    def __repr__(self):
        return f"LinearPredictor(d={self.d}, norm={np.linalg.norm(self.w):.6g})"


def relu(z):
    return np.maximum(z, 0.0)


def relu_grad(z):
    return np.where(z > 0, 1.0, 0.0)


class MlpPredictor:
    """
    score(x) = w2 . relu(W1^T x + b1) + b2, with W1 of shape (3d, H).
    `support` zeroes all other input coordinates before the first layer.
    """
    kind = "mlp"

    def __init__(self, W1, b1, w2, b2, support=None):
        self.W1 = np.array(W1, dtype=float)
        self.b1 = np.array(b1, dtype=float).ravel()
        self.w2 = np.array(w2, dtype=float).ravel()
        self.b2 = float(b2)
        if self.W1.ndim != 2 or self.W1.shape[1] != len(self.b1) or len(self.w2) != len(self.b1):
            raise DimensionError("inconsistent MLP layer shapes")
        if self.W1.shape[0] % 3:
            raise DimensionError(f"input width {self.W1.shape[0]} is not a multiple of 3")
        self.support = None if support is None else tuple(int(j) for j in support)
        self._input_mask = None
        if self.support is not None:
            self._input_mask = np.zeros(self.W1.shape[0])
            self._input_mask[list(self.support)] = 1.0

    @classmethod
    def initialize(cls, n_inputs, hidden=DEFAULT_HIDDEN, rng=None, support=None):
        """
        Centered uniform init with scale 1/sqrt(fan-in) per layer.
        """
        rng = np.random.default_rng(rng)
        s1 = 1.0 / math.sqrt(n_inputs)
        s2 = 1.0 / math.sqrt(hidden)
        return cls(rng.uniform(-s1, s1, (n_inputs, hidden)), rng.uniform(-s1, s1, hidden),
                   rng.uniform(-s2, s2, hidden), rng.uniform(-s2, s2), support=support)

    @property
    def hidden(self):
        return len(self.b1)

    @property
    def n_inputs(self):
        return self.W1.shape[0]

    @property
    def d(self):
        return self.n_inputs // 3

    def _restrict(self, x):
        return x if self._input_mask is None else x * self._input_mask

    def forward(self, x):
        x = self._restrict(_as_matrix(x, self.n_inputs))
        z = x @ self.W1 + self.b1
        a = relu(z)
        return a @ self.w2 + self.b2, (x, z, a)

    def score(self, x):
        return self.forward(x)[0]

    def predict(self, x, contexts=None):
        return classify(self.score(x))

    def backward(self, cache, dscore):
        """
        Gradients of sum(dscore * score) w.r.t. parameters and input.
        """
        x, z, a = cache
        dscore = np.asarray(dscore, dtype=float)
        if x.ndim == 1:
            x, z, a, dscore = x[None, :], z[None, :], a[None, :], dscore.reshape(1)
        dw2 = a.T @ dscore
        db2 = float(dscore.sum())
        dz = relu_grad(z) * (dscore[:, None] * self.w2[None, :])
        dW1 = x.T @ dz
        db1 = dz.sum(axis=0)
        dx = self._restrict(dz @ self.W1.T)
        return {"W1": dW1, "b1": db1, "w2": dw2, "b2": db2}, dx

    def get_vector(self):
        return np.concatenate([self.W1.ravel(), self.b1, self.w2, [self.b2]])

    def with_vector(self, theta):
        n, h = self.n_inputs, self.hidden
        theta = np.asarray(theta, dtype=float)
        W1 = theta[:n * h].reshape(n, h)
        b1 = theta[n * h:n * h + h]
        w2 = theta[n * h + h:n * h + 2 * h]
        return MlpPredictor(W1, b1, w2, theta[-1], support=self.support)

    @staticmethod
    def grads_to_vector(grads):
        return np.concatenate([grads["W1"].ravel(), grads["b1"], grads["w2"], [grads["b2"]]])

    def copy(self):
        return self.with_vector(self.get_vector())

    def __eq__(self, other):
        return (isinstance(other, MlpPredictor) and self.support == other.support
                and self.W1.shape == other.W1.shape and np.array_equal(self.get_vector(), other.get_vector()))

    __hash__ = None


def score(model, x):
    """
    Real-valued score of a linear predictor or MLP on one input (or a matrix of inputs).
    """
    result = model.score(x)
    return float(result) if np.ndim(result) == 0 else result


class EnpPipeline:
    """
    Stage one routes an input to a context from the sign of the feature
    predictor (c1 is the +1 class); stage two scores the target predictor on
    the input masked with that context's canonical annotation.
    """
    kind = "enp"

    def __init__(self, feature_predictor, target, mask_policy=MaskPolicy.ZERO_MASK):
        if feature_predictor.n_inputs != target.n_inputs:
            raise DimensionError("feature predictor and target disagree on input width")
        self.feature_predictor = feature_predictor
        self.target = target
        self.mask_policy = MaskPolicy(mask_policy)

    @property
    def d(self):
        return self.target.d

    @property
    def n_inputs(self):
        return self.target.n_inputs

    def predict_context(self, x):
        labels = classify(self.feature_predictor.score(x))
        if np.ndim(labels) == 0:
            return Context.C1 if labels > 0 else Context.C2
        return np.where(labels > 0, Context.C1, Context.C2).astype(np.int8)

    def masked_input(self, x, contexts):
        if self.mask_policy is MaskPolicy.NO_MASK_AT_EVAL:
            return np.asarray(x, dtype=float)
        x = _as_matrix(x, self.n_inputs)
        if x.ndim == 1:
            return apply_mask(canonical_mask(contexts, self.d), x)
        return canonical_mask_rows(contexts, self.d) * x

    def predict(self, x, contexts=None, oracle_router=False):
        """
        Labels for x. With oracle_router the true `contexts` choose the masks.
        """
        if oracle_router:
            if contexts is None:
                raise ValidationError("oracle routing needs the true contexts")
            routed = contexts
        else:
            routed = self.predict_context(x)
        return classify(self.target.score(self.masked_input(x, routed)))

    def with_policy(self, mask_policy):
        return EnpPipeline(self.feature_predictor, self.target, mask_policy)


def pipeline_predict(pipeline, x):
    """
    (predicted context, label) for a single input.
    """
    x = _as_matrix(x, pipeline.n_inputs)
    context = pipeline.predict_context(x)
    label = classify(score(pipeline.target, pipeline.masked_input(x, context)))
    return context, int(label)


class IccModel:
    """
    Independent classifier per context. ORACLE_CONTEXT routes with the true
    context, LEARNED_ROUTER with a context predictor (c1 is the +1 class).
    """
    kind = "icc"

    def __init__(self, w_c1, w_c2, router=Router.ORACLE_CONTEXT, context_predictor=None):
        self.w_c1 = w_c1
        self.w_c2 = w_c2
        self.router = Router(router)
        self.context_predictor = context_predictor
        if self.router is Router.LEARNED_ROUTER and context_predictor is None:
            raise ValidationError("LEARNED_ROUTER requires a context predictor")

    @property
    def d(self):
        return self.w_c1.d

    @property
    def n_inputs(self):
        return self.w_c1.n_inputs

    def route(self, x, contexts=None):
        if self.router is Router.ORACLE_CONTEXT:
            if contexts is None:
                raise ValidationError("ORACLE_CONTEXT routing needs the true contexts")
            return np.asarray(contexts)
        labels = classify(self.context_predictor.score(x))
        return np.where(np.asarray(labels) > 0, Context.C1, Context.C2)

    def predict(self, x, contexts=None, oracle_router=False):
        x = _as_matrix(x, self.n_inputs)
        routed = np.asarray(contexts) if oracle_router else self.route(x, contexts)
        scores = np.where(routed == Context.C1, self.w_c1.score(x), self.w_c2.score(x))
        return classify(scores)

    def with_router(self, router, context_predictor=None):
        return IccModel(self.w_c1, self.w_c2, router, context_predictor or self.context_predictor)


# ---------------------------------------------------------
#  MODEL FILES
# ---------------------------------------------------------

_FIELD = re.compile(r"(\S+)=(\S+)")


def _fmt(values):
    return " ".join(format(float(v), ".17g") for v in np.ravel(values))


def _component_lines(model, prefix):
    header = {f"{prefix}kind": model.kind}
    lines = []
    if isinstance(model, LinearPredictor):
        lines.append(f"{prefix}w {_fmt(model.w)}")
    elif isinstance(model, MlpPredictor):
        header[f"{prefix}hidden"] = str(model.hidden)
        lines += [f"{prefix}W1 {_fmt(model.W1)}", f"{prefix}b1 {_fmt(model.b1)}",
                  f"{prefix}w2 {_fmt(model.w2)}", f"{prefix}b2 {_fmt([model.b2])}"]
    else:
        raise ValidationError(f"cannot serialize component {type(model).__name__}")
    if model.support is not None:
        lines.append(f"{prefix}support " + " ".join(str(j) for j in model.support))
    return header, lines


def save_model(model, path):
    """
    Header `# kind=<linear|mlp|enp|icc> d=<d> ...`, then one line per array:
    `<name> v0 v1 ...` with 17 significant digits. MLP W1 is written row-major
    (3d rows of H values).
    """
    header = {"kind": model.kind, "d": str(model.d)}
    lines = []
    if isinstance(model, EnpPipeline):
        header["mask_policy"] = model.mask_policy.value
        parts = [("feature.", model.feature_predictor), ("target.", model.target)]
    elif isinstance(model, IccModel):
        header["router"] = model.router.value
        parts = [("c1.", model.w_c1), ("c2.", model.w_c2)]
        if model.context_predictor is not None:
            parts.append(("router.", model.context_predictor))
    else:
        parts = [("", model)]
    for prefix, part in parts:
        h, body = _component_lines(part, prefix)
        header.update(h if prefix else {k: v for k, v in h.items() if k != "kind"})
        lines += body
    with open(path, "w", encoding="utf-8") as f:
        f.write("# " + " ".join(f"{k}={v}" for k, v in header.items()) + "\n")
        f.write("\n".join(lines) + "\n")


def _load_component(header, arrays, prefix, n_inputs):
    kind = header.get(f"{prefix}kind") if prefix else header["kind"]
    support = arrays.get(f"{prefix}support")
    support = None if support is None else tuple(int(j) for j in support)
    try:
        if kind == "linear":
            return LinearPredictor(arrays[f"{prefix}w"], support=support)
        if kind == "mlp":
            hidden = int(header[f"{prefix}hidden"])
            W1 = np.asarray(arrays[f"{prefix}W1"]).reshape(n_inputs, hidden)
            return MlpPredictor(W1, arrays[f"{prefix}b1"], arrays[f"{prefix}w2"],
                                arrays[f"{prefix}b2"][0], support=support)
    except KeyError as e:
        raise DatasetFormatError(f"model file lacks {e.args[0]}") from e
    except ValueError as e:
        raise DatasetFormatError(f"bad array shape for {prefix or 'model'}: {e}") from e
    raise DatasetFormatError(f"unknown component kind {kind!r}", line=1)


def load_model(path):
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines or not lines[0].startswith("#"):
        raise DatasetFormatError("missing '# kind=... d=...' header", line=1)
    header = dict(_FIELD.findall(lines[0]))
    if "kind" not in header or "d" not in header:
        raise DatasetFormatError("header needs kind and d", line=1)
    arrays = {}
    for line_no, line in enumerate(lines[1:], start=2):
        if not line.strip():
            continue
        name, *values = line.split()
        try:
            arrays[name] = np.array([float(v) for v in values])
        except ValueError as e:
            raise DatasetFormatError(f"non-numeric value in {name}", line=line_no) from e
    n_inputs = 3 * int(header["d"])
    kind = header["kind"]
    if kind == "enp":
        return EnpPipeline(_load_component(header, arrays, "feature.", n_inputs),
                           _load_component(header, arrays, "target.", n_inputs),
                           MaskPolicy(header.get("mask_policy", MaskPolicy.ZERO_MASK.value)))
    if kind == "icc":
        router = _load_component(header, arrays, "router.", n_inputs) if "router.kind" in header else None
        return IccModel(_load_component(header, arrays, "c1.", n_inputs),
                        _load_component(header, arrays, "c2.", n_inputs),
                        Router(header.get("router", Router.ORACLE_CONTEXT.value)), router)
    return _load_component(header, arrays, "", n_inputs)
