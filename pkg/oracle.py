"""
Closed-form ground truth for the two-context problem.

erfc follows FreeBSD's msun s_erf.c rational approximations (via the numpy
port in optuna), extended with the erfc branches for large |x|.
"""
import enum
import logging
import math
import warnings
from dataclasses import dataclass

import numpy as np
from numpy.polynomial import Polynomial

from errors import TheoryRangeWarning, ValidationError
from objectives import DataMode, Method, ObjectiveSpec, population_objective
from predictors import LinearPredictor
from synthdata import Context

logger = logging.getLogger(__name__)

erx = 8.45062911510467529297e-01

# erf on [0, 0.84375]
pp = Polynomial([1.28379167095512558561e-01, -3.25042107247001499370e-01, -2.84817495755985104766e-02,
                 -5.77027029648944159157e-03, -2.37630166566501626084e-05])
qq = Polynomial([1.0, 3.97917223959155352819e-01, 6.50222499887672944485e-02, 5.08130628187576562776e-03,
                 1.32494738004321644526e-04, -3.96022827877536812320e-06])

# erf on [0.84375, 1.25]
pa = Polynomial([-2.36211856075265944077e-03, 4.14856118683748331666e-01, -3.72207876035701323847e-01,
                 3.18346619901161753674e-01, -1.10894694282396677476e-01, 3.54783043256182359371e-02,
                 -2.16637559486879084300e-03])
qa = Polynomial([1.0, 1.06420880400844228286e-01, 5.40397917702171048937e-01, 7.18286544141962662868e-02,
                 1.26171219808761642112e-01, 1.36370839120290507362e-02, 1.19844998467991074170e-02])

# erfc on [1.25, 1/0.35]
ra = Polynomial([-9.86494403484714822705e-03, -6.93858572707181764372e-01, -1.05586262253232909814e01,
                 -6.23753324503260060396e01, -1.62396669462573470355e02, -1.84605092906711035994e02,
                 -8.12874355063065934246e01, -9.81432934416914548592e00])
sa = Polynomial([1.0, 1.96512716674392571292e01, 1.37657754143519042600e02, 4.34565877475229228821e02,
                 6.45387271733267880336e02, 4.29008140027567833386e02, 1.08635005541779435134e02,
                 6.57024977031928170135e00, -6.04244152148580987438e-02])

# erfc on [1/0.35, 28]
rb = Polynomial([-9.86494292470009928597e-03, -7.99283237680523006574e-01, -1.77579549177547519889e01,
                 -1.60636384855821916062e02, -6.37566443368389627722e02, -1.02509513161107724954e03,
                 -4.83519191608651397019e02])
sb = Polynomial([1.0, 3.03380607434824582924e01, 3.25792512996573918826e02, 1.53672958608443695994e03,
                 3.19985821950859553908e03, 2.55305040643316442583e03, 4.74528541206955367215e02,
                 -2.24409524465858183362e01])


def _erfc_nonnegative(a):
    """
    erfc on a 1-D array of values >= 0.
    """
    out = np.empty_like(a)
    bins = np.count_nonzero(a[None, :] >= np.array([[0.84375], [1.25], [1 / 0.35], [28.0]]), axis=0)
    branches = [
        lambda x: 1.0 - x * (1.0 + pp(x * x) / qq(x * x)),
        lambda x: 1.0 - erx - pa(x - 1.0) / qa(x - 1.0),
        lambda x: np.exp(-x * x - 0.5625 + ra(1.0 / (x * x)) / sa(1.0 / (x * x))) / x,
        lambda x: np.exp(-x * x - 0.5625 + rb(1.0 / (x * x)) / sb(1.0 / (x * x))) / x,
        lambda x: np.zeros_like(x),
    ]
    for index, branch in enumerate(branches):
        if (target := np.nonzero(bins == index)[0]).size:
            out[target] = branch(a[target])
    return out


def erfc(x):
    """
    Complementary error function 2/sqrt(pi) * int_x^inf exp(-t^2) dt.
    Scalar in, float out; array in, array out.
    """
    values = np.asarray(x, dtype=float)
    flat = values.ravel()
    a = np.abs(flat)
    finite = np.isfinite(a)
    result = np.where(flat < 0, 2.0, 0.0)
    result[np.isnan(flat)] = np.nan
    if finite.any():
        tail = _erfc_nonnegative(a[finite])
        result[finite] = np.where(flat[finite] < 0, 2.0 - tail, tail)
    result = result.reshape(values.shape)
    return float(result) if result.ndim == 0 else result


def normal_cdf(z):
    return 0.5 * erfc(-np.asarray(z, dtype=float) / math.sqrt(2.0))


# ---------------------------------------------------------
#  PER-CONTEXT ACCURACY
# ---------------------------------------------------------

def _signed_cell_moments(w, params, context):
    """
    For w.x in `context`: mean for y=+1, mean for y=-1 and the common standard deviation.
    """
    d = params.d
    mu = params.mu_vec
    w1, w2, w3 = w[:d], w[d:2 * d], w[2 * d:]
    context = Context(context)
    s = context.sign
    label_part = float(w1 @ mu + s * (w2 @ mu))
    context_part = float(s * (w3 @ mu))
    var = (params.sigma ** 2 * (w1 @ w1 + params.x2_variance_factor(context) * (w2 @ w2))
           + params.eta ** 2 * (w3 @ w3))
    return label_part + context_part, -label_part + context_part, math.sqrt(max(var, 0.0))


def per_context_accuracy(w, params, context, mask=None):
    """
    Exact accuracy of sign(w.x) (sign(0) = +1) on one context. With `mask`,
    w scores C o x, which is the same as scoring x with C o w.
    """
    w = np.asarray(getattr(w, "w", w), dtype=float)
    if mask is not None:
        bits = mask.as_array() if hasattr(mask, "as_array") else np.asarray(mask, dtype=float)
        w = bits * w
    mean_pos, mean_neg, sd = _signed_cell_moments(w, params, context)
    if sd == 0.0:
        # score is the constant mean: label +1 wins ties
        correct_pos = 1.0 if mean_pos >= 0 else 0.0
        correct_neg = 1.0 if mean_neg < 0 else 0.0
        return 0.5 * (correct_pos + correct_neg)
    correct_pos = 0.5 * erfc(-mean_pos / (math.sqrt(2.0) * sd))
    correct_neg = 0.5 * erfc(mean_neg / (math.sqrt(2.0) * sd))
    return 0.5 * (correct_pos + correct_neg)


def lemma_accuracy(w1, w2, params, context):
    """
    Two-block accuracy formula for w = [w1, w2, 0].
    """
    mu = params.mu_vec
    s = Context(context).sign
    v = params.x2_variance_factor(context)
    num = (np.asarray(w1) + s * np.asarray(w2)) @ mu
    den = params.sigma * math.sqrt(2.0 * (np.dot(w1, w1) + v * np.dot(w2, w2)))
    return 0.5 * erfc(-num / den)


def bayes_predictor(context, params):
    """
    Least 0-1 error predictor in the unit ball for one context:
    c1 -> [mu*gamma, mu, 0], c2 -> [mu, -mu*gamma, 0], normalised.
    """
    mu, g = params.mu_vec, params.gamma
    scale = params.mu_norm * math.sqrt(1.0 + g * g)
    zeros = np.zeros(params.d)
    if Context(context) is Context.C1:
        w = np.concatenate([mu * g, mu, zeros]) / scale
    else:
        w = np.concatenate([mu, -mu * g, zeros]) / scale
    return LinearPredictor(w / max(1.0, np.linalg.norm(w)))


def pipeline_accuracy(router_accuracy, acc_right_mask, acc_wrong_mask):
    """
    End-to-end accuracy when routing errors are independent of the label noise
    (router reads only x3).
    """
    return router_accuracy * acc_right_mask + (1.0 - router_accuracy) * acc_wrong_mask


# ---------------------------------------------------------
#  THEOREM TABLES
# ---------------------------------------------------------

class TheoremMethod(enum.Enum):
    ERM_PC_TO_1 = "erm_pc_to_1"
    IRM = "irm"
    CONDRO = "condro"
    ICC = "icc"
    ENP_LOWER_BOUND = "enp_lower_bound"
    ENP_THEOREM_EVAL = "enp_theorem_eval"


@dataclass(frozen=True)
class TheoremAccuracies:
    method: TheoremMethod
    acc_c1: float
    acc_c2: float


def _check_theory_range(params):
    params.validate()
    if params.p_c < 0.5:
        warnings.warn(f"p_c={params.p_c} < 0.5; the ENP bound assumes c1 is the majority context",
                      TheoryRangeWarning, stacklevel=3)


def theorem1_table(params):
    """
    Population accuracies of the five objectives over the unit ball.
    """
    _check_theory_range(params)
    r1, r2, g = params.rho1, params.rho2, params.gamma
    half = lambda t: 0.5 * erfc(-t)
    bayes_c1 = half(r1 * math.sqrt(1 + 1 / g))
    enp_c2 = half(r1 / math.sqrt(1 + 1 / g ** 3))
    router = half(r2)
    return [
        TheoremAccuracies(TheoremMethod.ERM_PC_TO_1, bayes_c1, half(r1 * (g - 1) / math.sqrt(g * g + 1 / g))),
        TheoremAccuracies(TheoremMethod.IRM, half(r1), half(r1)),
        TheoremAccuracies(TheoremMethod.CONDRO, half(r1), half(r1)),
        TheoremAccuracies(TheoremMethod.ICC, bayes_c1, half(r1 * math.sqrt(1 + g))),
        TheoremAccuracies(TheoremMethod.ENP_LOWER_BOUND, router * bayes_c1, router * enp_c2),
        TheoremAccuracies(TheoremMethod.ENP_THEOREM_EVAL, bayes_c1, enp_c2),
    ]


def theorem_entry(params, method):
    method = TheoremMethod(method)
    return next(row for row in theorem1_table(params) if row.method is method)


def corollary1_ratios(params):
    """
    ENP (router-inclusive lower bound) over the Bayes accuracy on c1, and over
    0.5*erfc(-rho1) on c2. As eta -> 0 these tend to 1 and
    erfc(-rho1/sqrt(1+1/gamma^3)) / erfc(-rho1).
    """
    if params.gamma >= 1:
        warnings.warn("gamma >= 1 is outside the range of the ratio limits", TheoryRangeWarning, stacklevel=2)
    table = {row.method: row for row in theorem1_table(params)}
    enp = table[TheoremMethod.ENP_LOWER_BOUND]
    bayes_c1 = table[TheoremMethod.ICC].acc_c1
    return enp.acc_c1 / bayes_c1, enp.acc_c2 / (0.5 * erfc(-params.rho1))


# ---------------------------------------------------------
#  GENERALIZATION BOUNDS
# ---------------------------------------------------------

@dataclass(frozen=True)
class BoundReport:
    c0: float
    icc_bound: float
    enp_bound: float
    delta: float
    n: int
    radius: float
    lipschitz: float


def input_norm_radius(params, delta):
    """
    With probability >= 1 - delta/2 every input satisfies ||x|| <= B,
    B = max(sigma/sqrt(gamma), eta) (sqrt(2 log(2/delta)) + sqrt(3d)) + sqrt(3)||mu||.
    """
    scale = max(params.sigma / math.sqrt(params.gamma), params.eta)
    return scale * (math.sqrt(2 * math.log(2 / delta)) + math.sqrt(3 * params.d)) + math.sqrt(3) * params.mu_norm


def bound_constant(params, delta):
    scale = max(params.sigma / math.sqrt(params.gamma), params.eta)
    return math.sqrt(3) * params.mu_norm + (math.sqrt(3 * params.d) + math.sqrt(math.log(2 / delta))) * scale


def _rate(n, delta):
    return 1.0 / math.sqrt(n) + math.sqrt(math.log(2 / delta) / (2 * n))


def generalization_bounds(params, n, delta):
    """
    Minority-context estimation-error bounds: ENP learns from all n samples,
    ICC from the n(1 - p_c) minority samples. L = exp(B) is the derivative
    bound of exp(-y w.x) on the radius-B ball for ||w|| <= 1.
    """
    if not 0.0 < delta < 1.0:
        raise ValidationError(f"delta must lie in (0, 1), got {delta}")
    if n < 1:
        raise ValidationError(f"n >= 1 required, got {n}")
    params.validate()
    if params.p_c >= 1.0:
        raise ValidationError("p_c = 1 leaves no minority samples; ICC bound undefined")
    radius = input_norm_radius(params, delta)
    lipschitz = float(np.exp(radius))
    c0 = bound_constant(params, delta)
    enp = lipschitz * c0 * _rate(n, delta)
    icc = lipschitz * c0 * _rate(n * (1.0 - params.p_c), delta)
    return BoundReport(c0=c0, icc_bound=icc, enp_bound=enp, delta=delta, n=int(n),
                       radius=radius, lipschitz=lipschitz)


# ---------------------------------------------------------
#  SUBSPACE REFERENCE SOLUTIONS
# ---------------------------------------------------------

def subspace_basis(params):
    d = params.d
    u = params.mu_vec / params.mu_norm
    z = np.zeros(d)
    return np.concatenate([u, z, z]), np.concatenate([z, u, z])


def subspace_residual(w, params):
    """
    Norm of w outside span{[mu,0,0], [0,mu,0]}.
    """
    w = np.asarray(getattr(w, "w", w), dtype=float)
    b1, b2 = subspace_basis(params)
    return float(np.linalg.norm(w - (w @ b1) * b1 - (w @ b2) * b2))


def population_subspace_minimizer(method, params, context=None, n_radius=100, n_angle=360, refine=3):
    """
    Grid minimiser of the exact population objective of `method` over
    w = l1*[u,0,0] + l2*[0,u,0] in the unit disc (polar grid, then `refine`
    rounds of zooming around the best point). conDRO minimises the larger
    context loss; ICC needs `context`.
    """
    spec = ObjectiveSpec(Method(method), DataMode.POPULATION, context=context)
    b1, b2 = subspace_basis(params)

    def evaluate(r, t):
        value, _ = population_objective(r * math.cos(t) * b1 + r * math.sin(t) * b2, spec, params)
        return float(np.max(value))

    radii = np.linspace(0.0, 1.0, n_radius + 1)
    angles = np.linspace(-math.pi, math.pi, n_angle, endpoint=False)
    best = min(((evaluate(r, t), r, t) for r in radii for t in angles))
    dr, dt = radii[1] - radii[0], angles[1] - angles[0]
    for _ in range(refine):
        _, r0, t0 = best
        radii = np.clip(np.linspace(r0 - dr, r0 + dr, 41), 0.0, 1.0)
        angles = np.linspace(t0 - dt, t0 + dt, 41)
        best = min([best] + [(evaluate(r, t), r, t) for r in radii for t in angles])
        dr, dt = dr / 20.0, dt / 20.0
    _, r, t = best
    return LinearPredictor(r * math.cos(t) * b1 + r * math.sin(t) * b2)
