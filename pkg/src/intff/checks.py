"""Self-contained verification suites: finite-difference gradient checks for
every hand-written backward pass, and the stop-gradient equality check
between per-unit gradients and the detached global loss.

Central differences are only valid inside a smooth neighborhood, so random
instances are resampled until every ReLU pre-activation clears the
finite-difference window; the subgradient convention at the kink itself is
covered by a dedicated unit test.  Both suites back the gradcheck and
oracle-check CLI subcommands as well as the test suite.
"""

from dataclasses import dataclass

import numpy as np

from .model import ArchSpec, HiddenUnit, HiddenUnitSpec, build_model
from .numerics import (
    Conv2DLayer,
    DenseLayer,
    finite_diff_grad,
    l2_normalize_rows,
    mean_square_rows,
    sigmoid,
)
from .training import (
    bp_loss_and_grads,
    ff_reference_grads,
    stopgrad_oracle_grads,
    unit_backward,
    unit_loss,
)

GRAD_TOL = 1e-4
FD_STEP = 1e-4
ORACLE_TOL = 1e-9
FF_REDUCTION_TOL = 1e-12
KINK_MARGIN = 3e-3      # min |pre-activation| for an FD-checkable instance
REROLL_LIMIT = 500


@dataclass
class CheckResult:
    name: str
    worst: float
    threshold: float

    @property
    def passed(self) -> bool:
        return self.worst < self.threshold


def rel_err(analytic: np.ndarray, numeric: np.ndarray) -> float:
    """Max-norm relative error with a floor guarding all-zero gradients."""
    analytic = np.asarray(analytic, dtype=np.float64)
    numeric = np.asarray(numeric, dtype=np.float64)
    scale = max(float(np.max(np.abs(numeric))), 1e-8)
    return float(np.max(np.abs(analytic - numeric))) / scale


def _preactivations(layer, x) -> np.ndarray:
    saved = layer.activation
    layer.activation = "identity"
    try:
        z, _ = layer.forward(x)
    finally:
        layer.activation = saved
    return z


def _chain_min_preactivation(layers, x) -> float:
    """Smallest |z| over all relu layers of a chain applied to x."""
    worst = np.inf
    h = x
    for layer in layers:
        z = _preactivations(layer, h)
        if layer.activation == "relu":
            worst = min(worst, float(np.min(np.abs(z))))
            h = np.maximum(z, 0.0)
        else:
            h = z
    return worst


def _resample(rng, build) -> tuple:
    """Draw instances until the kink margin holds (deterministic per rng)."""
    instance = None
    for _ in range(REROLL_LIMIT):
        instance, margin = build(rng)
        if margin > KINK_MARGIN:
            return instance
    return instance


def _check_param(param, loss_fn, analytic: np.ndarray, h: float = FD_STEP) -> float:
    """FD-vs-analytic relative error for one parameter array."""
    original = param.copy()

    def probe(values):
        param[...] = values
        try:
            return loss_fn()
        finally:
            param[...] = original

    fd = finite_diff_grad(probe, original, h)
    return rel_err(analytic, fd)


def check_dense(rng, activation: str) -> float:
    def build(rng):
        n_in = int(rng.integers(4, 9))
        n_out = int(rng.integers(3, 8))
        layer = DenseLayer.init(n_in, n_out, rng, activation=activation)
        x = rng.normal(0.0, 1.0, size=(3, n_in))
        return (layer, x), _chain_min_preactivation([layer], x)

    layer, x = _resample(rng, build)

    def loss_fn():
        y, _ = layer.forward(x)
        return float(np.sum(mean_square_rows(y)))

    y, cache = layer.forward(x)
    dy = (2.0 / y.shape[1]) * y
    dW, db, _ = layer.backward(dy, cache)
    return max(_check_param(layer.W, loss_fn, dW),
               _check_param(layer.b, loss_fn, db))


def check_conv(rng) -> float:
    def build(rng):
        ic = int(rng.integers(1, 3))
        oc = int(rng.integers(1, 3))
        size = int(rng.integers(4, 7))
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 2))
        layer = Conv2DLayer.init(ic, oc, 3, 3, rng, stride=stride, padding=padding)
        x = rng.normal(0.0, 1.0, size=(2, ic, size, size))
        return (layer, x), _chain_min_preactivation([layer], x)

    layer, x = _resample(rng, build)

    def loss_fn():
        y, _ = layer.forward(x)
        flat = y.reshape(y.shape[0], -1)
        return float(np.sum(mean_square_rows(flat)))

    y, cache = layer.forward(x)
    flat = y.reshape(y.shape[0], -1)
    dy = ((2.0 / flat.shape[1]) * flat).reshape(y.shape)
    dk, dbias, _ = layer.backward(dy, cache)
    return max(_check_param(layer.kernels, loss_fn, dk),
               _check_param(layer.bias, loss_fn, dbias))


def check_unit_loss_partials(rng) -> float:
    theta = float(rng.uniform(0.5, 3.0))
    worst = 0.0
    for _ in range(4):
        g_pos = float(rng.uniform(0.0, 4.0))
        g_neg = float(rng.uniform(0.0, 4.0))
        a_pos = -sigmoid(theta - g_pos)
        a_neg = sigmoid(g_neg - theta)
        h = 1e-6
        fd_pos = (unit_loss(g_pos + h, g_neg, theta) - unit_loss(g_pos - h, g_neg, theta)) / (2 * h)
        fd_neg = (unit_loss(g_pos, g_neg + h, theta) - unit_loss(g_pos, g_neg - h, theta)) / (2 * h)
        worst = max(worst, abs(a_pos - fd_pos), abs(a_neg - fd_neg))
    return worst


def _random_unit(rng, with_conv: bool):
    layers = []
    if with_conv:
        side = 5
        in_width = side * side
        conv = Conv2DLayer.init(1, 2, 3, 3, rng, stride=1, padding=1,
                                in_shape=(1, side, side))
        layers.append(conv)
        width = conv.out_width
        depth = int(rng.integers(1, 3))
    else:
        in_width = int(rng.integers(4, 9))
        width = in_width
        depth = int(rng.integers(1, 4))
    for _ in range(depth):
        out = int(rng.integers(3, 8))
        layers.append(DenseLayer.init(width, out, rng))
        width = out
    return HiddenUnit(layers), in_width


def check_unit_backward(rng, with_conv: bool = False) -> float:
    theta = 1.5

    def build(rng):
        unit, in_width = _random_unit(rng, with_conv)
        pos = rng.uniform(0.0, 1.0, size=(3, in_width))
        neg = rng.uniform(0.0, 1.0, size=(3, in_width))
        margin = min(
            _chain_min_preactivation(unit.layers, l2_normalize_rows(pos)),
            _chain_min_preactivation(unit.layers, l2_normalize_rows(neg)))
        return (unit, pos, neg), margin

    unit, pos, neg = _resample(rng, build)

    def loss_fn():
        tp = unit.forward(pos)
        tn = unit.forward(neg)
        return float(np.mean(unit_loss(tp.goodness, tn.goodness, theta)))

    grads = unit_backward(unit, unit.forward(pos), unit.forward(neg), theta)
    worst = 0.0
    params = unit.params()
    for li in range(len(unit.layers)):
        dW, db = grads.layers[li]
        worst = max(worst,
                    _check_param(params[2 * li], loss_fn, dW),
                    _check_param(params[2 * li + 1], loss_fn, db))
    return worst


def check_bp_stack(rng) -> float:
    def build(rng):
        arch = ArchSpec(int(rng.integers(4, 8)),
                        tuple(HiddenUnitSpec((int(rng.integers(3, 7)),))
                              for _ in range(2)),
                        bp_head_width=3)
        model = build_model(arch, seed=int(rng.integers(0, 10_000)))
        x = rng.normal(0.0, 1.0, size=(4, arch.input_width))
        labels = rng.integers(0, 3, size=4)
        margin = _chain_min_preactivation(model._bp_layers(), x)
        return (model, x, labels), margin

    model, x, labels = _resample(rng, build)
    _, grads = bp_loss_and_grads(model, x, labels)
    worst = 0.0
    for param, analytic in zip(model.parameter_arrays(), grads):
        def loss_fn():
            loss, _ = bp_loss_and_grads(model, x, labels)
            return loss

        worst = max(worst, _check_param(param, loss_fn, analytic))
    return worst


def run_gradient_checks(seed: int = 0, instances: int = 10):
    """The full finite-difference suite; every analytic backward pass is
    checked on `instances` random small instances."""
    suites = [
        ("dense_relu", lambda rng: check_dense(rng, "relu")),
        ("dense_identity", lambda rng: check_dense(rng, "identity")),
        ("conv2d", check_conv),
        ("unit_loss_partials", check_unit_loss_partials),
        ("unit_backward_dense", lambda rng: check_unit_backward(rng, False)),
        ("unit_backward_conv", lambda rng: check_unit_backward(rng, True)),
        ("bp_stack", check_bp_stack),
    ]
    results = []
    for suite_index, (name, fn) in enumerate(suites):
        rng = np.random.default_rng([seed, suite_index])
        worst = max(fn(rng) for _ in range(instances))
        threshold = 1e-6 if name == "unit_loss_partials" else GRAD_TOL
        results.append(CheckResult(name, worst, threshold))
    return results


def random_small_arch(rng) -> ArchSpec:
    """Random dense architecture up to the scale of 16,(12,8),(6,4)."""
    input_width = int(rng.integers(4, 17))
    units = []
    for _ in range(int(rng.integers(1, 4))):
        depth = int(rng.integers(1, 4))
        units.append(HiddenUnitSpec(tuple(int(rng.integers(2, 13)) for _ in range(depth))))
    return ArchSpec(input_width, tuple(units))


def run_oracle_checks(seed: int = 0, n_models: int = 20):
    """Stop-gradient equality: per-unit gradients vs the detached global
    loss, plus the original-FF reduction on singleton-unit models."""
    rng = np.random.default_rng([seed, 17])
    results = []
    for i in range(n_models):
        arch = random_small_arch(rng)
        model = build_model(arch, seed=int(rng.integers(0, 10_000)))
        n = int(rng.integers(2, 7))
        pos = rng.uniform(0.0, 1.0, size=(n, arch.input_width))
        neg = rng.uniform(0.0, 1.0, size=(n, arch.input_width))
        per_unit = [unit_backward(u, u.forward(hp), u.forward(hn), model.theta)
                    for u, hp, hn in _unit_inputs(model, pos, neg)]
        oracle = stopgrad_oracle_grads(model, pos, neg, model.theta)
        worst = _max_grad_diff(per_unit, oracle)
        results.append(CheckResult(f"stopgrad[{i}] {arch.to_string()}", worst, ORACLE_TOL))

        flat = arch.flattened()
        fmodel = build_model(flat, seed=int(rng.integers(0, 10_000)))
        per_unit = [unit_backward(u, u.forward(hp), u.forward(hn), fmodel.theta)
                    for u, hp, hn in _unit_inputs(fmodel, pos, neg)]
        reference = ff_reference_grads(fmodel, pos, neg, fmodel.theta)
        worst = _max_grad_diff(per_unit, reference)
        results.append(CheckResult(f"ff_reduction[{i}] {flat.to_string()}",
                                   worst, FF_REDUCTION_TOL))
    return results


def _unit_inputs(model, pos, neg):
    """Yield (unit, pos_input, neg_input) walking the chain forward."""
    hp = np.asarray(pos, dtype=np.float64)
    hn = np.asarray(neg, dtype=np.float64)
    for unit in model.units:
        yield unit, hp, hn
        hp = unit.forward(hp).group
        hn = unit.forward(hn).group


def _max_grad_diff(a, b) -> float:
    worst = 0.0
    for ga, gb in zip(a, b):
        for (aw, ab), (bw, bb) in zip(ga.layers, gb.layers):
            worst = max(worst,
                        float(np.max(np.abs(aw - bw))),
                        float(np.max(np.abs(ab - bb))))
    return worst
