"""
Two-context Gaussian data for the contextual-reliability lab.

Each example is x = [x1, x2, x3] (three blocks of d coordinates), a label
y in {-1, +1} and a latent context c1 / c2:

    x1 | y       ~ N(mu*y, sigma^2 I)
    x2 | y, c1   ~ N(mu*y, gamma*sigma^2 I)
    x2 | y, c2   ~ N(-mu*y, sigma^2/gamma I)
    x3 | c1      ~ N(mu, eta^2 I)
    x3 | c2      ~ N(-mu, eta^2 I)

Randomness comes from numpy's SeedSequence: block b of BLOCK_SIZE examples
uses SeedSequence(entropy=seed, spawn_key=(stream, b)), so any index range can
be generated on its own and gives the same values as a full run.
"""
import enum
import logging
import math
import re
import warnings
from dataclasses import dataclass

import numpy as np
import pandas as pd

from errors import DatasetFormatError, MissingMaskError, TheoryRangeWarning, ValidationError

logger = logging.getLogger(__name__)

BLOCK_SIZE = 4096

# SeedSequence stream tags
STREAM_MIXTURE = 0
STREAM_C1 = 1
STREAM_C2 = 2


class Context(enum.IntEnum):
    C1 = 1
    C2 = 2

    @property
    def sign(self):
        # +1 for c1, -1 for c2 (x2 correlation and x3 mean both flip)
        return 1 if self is Context.C1 else -1


@dataclass(frozen=True)
class ProblemParams:
    mu: tuple
    sigma: float
    gamma: float
    eta: float
    p_c: float

    @property
    def d(self):
        return len(self.mu)

    @property
    def mu_vec(self):
        return np.asarray(self.mu, dtype=float)

    @property
    def mu_norm(self):
        return float(np.linalg.norm(self.mu_vec))

    @property
    def rho1(self):
        return self.mu_norm / (math.sqrt(2.0) * self.sigma)

    @property
    def rho2(self):
        return self.mu_norm / (math.sqrt(2.0) * self.eta)

    def x2_variance_factor(self, context):
        return self.gamma if Context(context) is Context.C1 else 1.0 / self.gamma

    def validate(self):
        """
        Raises ValidationError naming the first violated constraint.
        Warns when gamma >= 1, outside the gamma << 1 regime the theory assumes.
        """
        if self.d < 1:
            raise ValidationError("d >= 1 required (mu is empty)")
        if not all(math.isfinite(m) for m in self.mu):
            raise ValidationError("mu must be finite")
        if not self.mu_norm > 0:
            raise ValidationError("||mu||_2 > 0 required")
        for name in ("sigma", "gamma", "eta"):
            value = getattr(self, name)
            if not (math.isfinite(value) and value > 0):
                raise ValidationError(f"{name} > 0 required, got {value}")
        if not 0.0 <= self.p_c <= 1.0:
            raise ValidationError(f"0 <= p_c <= 1 required, got {self.p_c}")
        if not (math.isfinite(self.rho1) and math.isfinite(self.rho2)):
            raise ValidationError("rho1 and rho2 must be finite")
        if self.gamma >= 1:
            warnings.warn(f"gamma={self.gamma} >= 1; closed-form results assume gamma << 1",
                          TheoryRangeWarning, stacklevel=2)
        return self

    def replace(self, **changes):
        fields = {"mu": self.mu, "sigma": self.sigma, "gamma": self.gamma,
                  "eta": self.eta, "p_c": self.p_c}
        if "d" in changes:
            d = int(changes.pop("d"))
            fields["mu"] = tuple([self.mu_norm / math.sqrt(d)] * d)
        fields.update(changes)
        fields["mu"] = tuple(float(m) for m in fields["mu"])
        return ProblemParams(**fields)


def make_params(d=20, mu_norm=1.0, sigma=1.0, gamma=0.1, eta=0.3, p_c=0.9):
    """
    Parameters with mu = mu_norm * 1/sqrt(d).
    """
    mu = tuple([float(mu_norm) / math.sqrt(d)] * int(d))
    return ProblemParams(mu=mu, sigma=float(sigma), gamma=float(gamma), eta=float(eta), p_c=float(p_c))


def p0():
    """
    Default parameter set P0: d=20, mu=1/sqrt(d) (unit norm), sigma=1,
    gamma=0.1, eta=0.3, p_c=0.9.
    """
    return make_params()


@dataclass(frozen=True)
class FeatureMask:
    bits: tuple

    def as_array(self):
        return np.asarray(self.bits, dtype=float)

    def __len__(self):
        return len(self.bits)


def canonical_mask(context, d):
    """
    C1 keeps x1 and x2 (j < 2d), C2 keeps x1 only (j < d).
    """
    if d < 1:
        raise ValidationError("d >= 1 required")
    keep = 2 * d if Context(context) is Context.C1 else d
    return FeatureMask(tuple([1] * keep + [0] * (3 * d - keep)))


def canonical_mask_rows(contexts, d):
    """
    (n, 3d) array of canonical masks for an array of context codes.
    """
    contexts = np.asarray(contexts)
    cols = np.arange(3 * d)
    keep = np.where(contexts == Context.C1, 2 * d, d)
    return (cols[None, :] < keep[:, None]).astype(float)


@dataclass(frozen=True)
class Example:
    x: np.ndarray
    y: int
    context: Context
    annotation: FeatureMask = None


class Dataset:
    """
    Value-semantics container over column arrays. Arrays are read-only.

    `annotated` marks examples carrying their ground-truth mask; these are
    always the first floor(annotated_fraction * n) examples. `supplied_masks`
    holds predicted masks for the remaining examples (ENP stage two).
    """

    def __init__(self, x, y, contexts, params, seed, annotated_fraction=0.0,
                 annotated=None, supplied_masks=None):
        x = np.array(x, dtype=float).reshape(-1, 3 * params.d)
        n = x.shape[0]
        self.x = _frozen(x)
        self.y = _frozen(np.array(y, dtype=np.int8).reshape(n))
        self.contexts = _frozen(np.array(contexts, dtype=np.int8).reshape(n))
        if annotated is None:
            annotated = np.zeros(n, dtype=bool)
        self.annotated = _frozen(np.array(annotated, dtype=bool).reshape(n))
        self.supplied_masks = None if supplied_masks is None else _frozen(
            np.array(supplied_masks, dtype=float).reshape(n, 3 * params.d))
        self.params = params
        self.seed = int(seed)
        self.annotated_fraction = float(annotated_fraction)

    def __len__(self):
        return self.x.shape[0]

    @property
    def n(self):
        return len(self)

    @property
    def d(self):
        return self.params.d

    @property
    def examples(self):
        out = []
        for i in range(len(self)):
            context = Context(int(self.contexts[i]))
            mask = canonical_mask(context, self.d) if self.annotated[i] else None
            out.append(Example(x=self.x[i], y=int(self.y[i]), context=context, annotation=mask))
        return out

    def __iter__(self):
        return iter(self.examples)

    def __eq__(self, other):
        if not isinstance(other, Dataset):
            return NotImplemented
        return (self.params == other.params and self.seed == other.seed
                and self.annotated_fraction == other.annotated_fraction
                and np.array_equal(self.x, other.x) and np.array_equal(self.y, other.y)
                and np.array_equal(self.contexts, other.contexts)
                and np.array_equal(self.annotated, other.annotated)
                and _same_masks(self.supplied_masks, other.supplied_masks))

    __hash__ = None

    @property
    def n_annotated(self):
        return int(self.annotated.sum())

    def ground_truth_masks(self):
        """
        Canonical masks for annotated rows, all-zero rows elsewhere.
        """
        masks = canonical_mask_rows(self.contexts, self.d)
        masks[~self.annotated] = 0.0
        return masks

    def target_masks(self):
        """
        Mask per example for the ENP target objective: ground truth where
        annotated, supplied (predicted) masks elsewhere.
        """
        masks = self.ground_truth_masks()
        missing = ~self.annotated
        if missing.any():
            if self.supplied_masks is None:
                raise MissingMaskError(f"{int(missing.sum())} examples carry no mask")
            masks[missing] = self.supplied_masks[missing]
        return masks

    def with_masks(self, masks):
        return Dataset(self.x, self.y, self.contexts, self.params, self.seed,
                       self.annotated_fraction, self.annotated, supplied_masks=masks)

    def take(self, index):
        """
        Sub-dataset of the given rows. Annotation flags travel with the rows.
        """
        index = np.asarray(index)
        supplied = None if self.supplied_masks is None else self.supplied_masks[index]
        return Dataset(self.x[index], self.y[index], self.contexts[index], self.params, self.seed,
                       self.annotated_fraction, self.annotated[index], supplied)

    def subset(self, context):
        return self.take(np.flatnonzero(self.contexts == Context(context)))


def _frozen(array):
    array.setflags(write=False)
    return array


def _same_masks(a, b):
    if a is None or b is None:
        return a is b
    return np.array_equal(a, b)


def _block_rng(seed, stream, block):
    return np.random.default_rng(np.random.SeedSequence(entropy=int(seed), spawn_key=(stream, block)))


def _draw_block(params, seed, stream, block, fixed_context=None):
    """
    One full block of BLOCK_SIZE examples. Draw order: context uniforms,
    labels, then the 3d standard normals of every example.
    """
    rng = _block_rng(seed, stream, block)
    u = rng.random(BLOCK_SIZE)
    y = rng.integers(0, 2, BLOCK_SIZE) * 2 - 1
    eps = rng.standard_normal((BLOCK_SIZE, 3 * params.d))
    if fixed_context is None:
        contexts = np.where(u < params.p_c, Context.C1, Context.C2)
    else:
        contexts = np.full(BLOCK_SIZE, int(fixed_context))
    return contexts.astype(np.int8), y.astype(np.int8), _features(params, contexts, y, eps)


def _features(params, contexts, y, eps):
    d = params.d
    mu = params.mu_vec
    sign = np.where(contexts == Context.C1, 1.0, -1.0)[:, None]
    x2_scale = np.where(contexts == Context.C1, math.sqrt(params.gamma), 1.0 / math.sqrt(params.gamma))[:, None]
    yy = y.astype(float)[:, None]
    x1 = yy * mu + params.sigma * eps[:, :d]
    x2 = sign * yy * mu + params.sigma * x2_scale * eps[:, d:2 * d]
    x3 = sign * mu + params.eta * eps[:, 2 * d:]
    return np.hstack([x1, x2, x3])


def sample_range(params, seed, start, stop, stream=STREAM_MIXTURE, fixed_context=None):
    """
    Examples with indices [start, stop) of the stream. Any split of an index
    range into shards concatenates to the same arrays.
    """
    d3 = 3 * params.d
    if stop <= start:
        return np.zeros(0, np.int8), np.zeros(0, np.int8), np.zeros((0, d3))
    contexts, labels, features = [], [], []
    for block in range(start // BLOCK_SIZE, (stop - 1) // BLOCK_SIZE + 1):
        c, y, x = _draw_block(params, seed, stream, block, fixed_context)
        lo = max(start - block * BLOCK_SIZE, 0)
        hi = min(stop - block * BLOCK_SIZE, BLOCK_SIZE)
        contexts.append(c[lo:hi])
        labels.append(y[lo:hi])
        features.append(x[lo:hi])
    return np.concatenate(contexts), np.concatenate(labels), np.vstack(features)


def sample_dataset(params, n, seed):
    """
    n i.i.d. examples from the two-context mixture. No annotations attached.
    """
    params.validate()
    if n < 0:
        raise ValidationError(f"n >= 0 required, got {n}")
    contexts, y, x = sample_range(params, seed, 0, int(n))
    return Dataset(x, y, contexts, params, seed)


def sample_context(params, context, n, seed):
    """
    n examples drawn from a single context (context-conditional sampling).
    """
    params.validate()
    if n < 0:
        raise ValidationError(f"n >= 0 required, got {n}")
    context = Context(context)
    stream = STREAM_C1 if context is Context.C1 else STREAM_C2
    contexts, y, x = sample_range(params, seed, 0, int(n), stream=stream, fixed_context=context)
    return Dataset(x, y, contexts, params, seed)


def n_annotated_for(fraction, n):
    # tolerance keeps e.g. 0.29 * 100 at 29
    return min(n, int(math.floor(fraction * n + 1e-9)))


def attach_annotations(dataset, fraction):
    """
    The first floor(fraction * n) examples carry their context's canonical mask.
    """
    if not 0.0 <= fraction <= 1.0:
        raise ValidationError(f"annotation fraction must lie in [0, 1], got {fraction}")
    k = n_annotated_for(fraction, len(dataset))
    annotated = np.zeros(len(dataset), dtype=bool)
    annotated[:k] = True
    return Dataset(dataset.x, dataset.y, dataset.contexts, dataset.params, dataset.seed,
                   fraction, annotated)


# ---------------------------------------------------------
#  DATASET FILE FORMAT
# ---------------------------------------------------------

_HEADER_KEYS = ("d", "sigma", "gamma", "eta", "pc", "seed", "n")
_HEADER_PATTERN = re.compile(r"(\w+)=(\S+)")


def _format_header(dataset):
    p = dataset.params
    mu = ";".join(repr(float(m)) for m in p.mu)
    return (f"# d={p.d} sigma={p.sigma!r} gamma={p.gamma!r} eta={p.eta!r} pc={p.p_c!r} "
            f"seed={dataset.seed} n={len(dataset)} fraction={dataset.annotated_fraction!r} mu={mu}")


def save_dataset(dataset, path):
    """
    Header line, then rows `context,y,mask_flag,x_0,...,x_{3d-1}`.
    """
    columns = {"context": dataset.contexts.astype(int), "y": dataset.y.astype(int),
               "mask_flag": dataset.annotated.astype(int)}
    for j in range(3 * dataset.d):
        columns[f"x_{j}"] = dataset.x[:, j]
    frame = pd.DataFrame(columns)
    with open(path, "w", encoding="utf-8") as f:
        f.write(_format_header(dataset) + "\n")
        frame.to_csv(f, header=False, index=False, float_format="%.17g", lineterminator="\n")


def _parse_header(line):
    if not line.startswith("#"):
        raise DatasetFormatError("missing '# d=... ' header", line=1)
    fields = dict(_HEADER_PATTERN.findall(line))
    missing = [k for k in _HEADER_KEYS if k not in fields]
    if missing:
        raise DatasetFormatError(f"header lacks {', '.join(missing)}", line=1)
    try:
        d = int(fields["d"])
        if "mu" in fields:
            mu = tuple(float(v) for v in fields["mu"].split(";"))
        else:
            mu = tuple([1.0 / math.sqrt(d)] * d)
        params = ProblemParams(mu=mu, sigma=float(fields["sigma"]), gamma=float(fields["gamma"]),
                               eta=float(fields["eta"]), p_c=float(fields["pc"]))
        seed, n = int(fields["seed"]), int(fields["n"])
        fraction = float(fields.get("fraction", "nan"))
    except ValueError as e:
        raise DatasetFormatError(f"bad header value ({e})", line=1) from e
    if params.d != d:
        raise DatasetFormatError(f"mu has {params.d} entries but d={d}", line=1)
    return params, seed, n, fraction


def load_dataset(path, params=None):
    """
    Parse a dataset file. If `params` is given it must equal the header's.
    """
    with open(path, "r", encoding="utf-8") as f:
        lines = f.read().splitlines()
    if not lines:
        raise DatasetFormatError("empty file", line=1)
    file_params, seed, n, fraction = _parse_header(lines[0])
    if params is not None and params != file_params:
        raise ValidationError(f"dataset parameters {file_params} do not match expected {params}")

    width = 3 + 3 * file_params.d
    rows = [(i, line) for i, line in enumerate(lines[1:], start=2) if line.strip()]
    for line_no, line in rows:
        if line.count(",") + 1 != width:
            raise DatasetFormatError(f"expected {width} columns, found {line.count(',') + 1}", line=line_no)
    if len(rows) != n:
        raise DatasetFormatError(f"header says n={n} but file has {len(rows)} rows", line=1)

    d3 = 3 * file_params.d
    if n == 0:
        table = np.zeros((0, width))
    else:
        frame = pd.read_csv(path, skiprows=1, header=None, skip_blank_lines=True, float_precision="round_trip")
        frame = frame.apply(pd.to_numeric, errors="coerce")
        bad = frame.isna().any(axis=1).to_numpy()
        if bad.any():
            raise DatasetFormatError("non-numeric value", line=rows[int(np.argmax(bad))][0])
        table = frame.to_numpy(dtype=float)

    contexts, y, flags = table[:, 0], table[:, 1], table[:, 2]
    for values, allowed, name in ((contexts, (1, 2), "context"), (y, (-1, 1), "y"), (flags, (0, 1), "mask_flag")):
        bad = ~np.isin(values, allowed)
        if bad.any():
            raise DatasetFormatError(f"{name} must be one of {allowed}", line=rows[int(np.argmax(bad))][0])

    annotated = flags.astype(bool)
    k = int(annotated.sum())
    if not annotated[:k].all():
        raise DatasetFormatError("annotated rows must come first", line=rows[int(np.argmin(annotated[:k]))][0])
    if math.isnan(fraction):
        fraction = k / n if n else 0.0
    elif n_annotated_for(fraction, n) != k:
        raise DatasetFormatError(f"fraction={fraction} implies {n_annotated_for(fraction, n)} annotated rows, found {k}",
                                 line=1)
    return Dataset(table[:, 3:3 + d3], y.astype(np.int8), contexts.astype(np.int8), file_params, seed,
                   fraction, annotated)
