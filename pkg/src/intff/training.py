"""Local-loss training: per-unit shallow backpropagation, the contrastive
two-pass step, a full-depth backprop baseline, Adam, early stopping, and two
independent gradient oracles (finite differences live in numerics).

The per-unit loss is softplus(theta - g_pos) + softplus(g_neg - theta): it
falls as positive-pass goodness rises and rises with negative-pass goodness.
Gradients never cross unit boundaries; the stop-gradient oracle rebuilds the
same gradients from a single detached global loss as an equality check.
"""

import csv
import io
from dataclasses import dataclass, field

import numpy as np

from . import seeding
from .data import make_batches, overlay_labels, sample_negative_labels
from .errors import NumericalOverflowError, ShapeError
from .kernels import adam_step
from .model import ArchSpec, IntFFModel, UnitTrace, build_model, parse_arch
from .numerics import l2_normalize_rows, mean_square_rows, sigmoid

ALGORITHMS = ("intff", "ff", "bp")
SCHEDULES = ("per-batch", "per-unit")


def softplus(x):
    """ln(1 + e^x), overflow-safe for large |x|."""
    return np.logaddexp(0.0, x)


def unit_loss(g_pos, g_neg, theta: float):
    """Per-sample local loss: softplus(theta - g_pos) + softplus(g_neg - theta)."""
    if theta <= 0:
        raise ValueError(f"theta must be positive, got {theta}")
    g_pos = np.asarray(g_pos, dtype=np.float64)
    g_neg = np.asarray(g_neg, dtype=np.float64)
    out = softplus(theta - g_pos) + softplus(g_neg - theta)
    if out.ndim == 0:
        return float(out)
    return out


@dataclass
class UnitGradients:
    """Per-layer (dW, db) pairs for exactly one hidden unit."""

    layers: list

    def flat(self):
        out = []
        for dW, db in self.layers:
            out.append(dW)
            out.append(db)
        return out


def unit_backward(unit, pos_trace: UnitTrace, neg_trace: UnitTrace,
                  theta: float) -> UnitGradients:
    """Batch-mean gradients of the unit loss w.r.t. this unit's parameters only.

    The unit's normalized input is treated as a constant, so gradients flow
    back through at most the unit's own layers.
    """
    n = pos_trace.group.shape[0]
    if neg_trace.group.shape[0] != n:
        raise ShapeError(
            f"positive/negative batch sizes differ: {n} vs {neg_trace.group.shape[0]}")
    m = pos_trace.group.shape[1]
    # dL/dg for the batch-mean loss; L falls in g_pos and rises in g_neg
    dg_pos = -sigmoid(theta - pos_trace.goodness) / n
    dg_neg = sigmoid(neg_trace.goodness - theta) / n

    grads = None
    for trace, dg in ((pos_trace, dg_pos), (neg_trace, dg_neg)):
        dy = (2.0 / m) * trace.group * dg[:, None]
        contrib = []
        for layer, cache in zip(reversed(unit.layers), reversed(trace.caches)):
            dW, db, dy = layer.backward(dy, cache)
            contrib.append((dW, db))
        contrib.reverse()
        if grads is None:
            grads = contrib
        else:
            grads = [(gW + cW, gb + cb) for (gW, gb), (cW, cb) in zip(grads, contrib)]
    for dW, db in grads:
        if not (np.all(np.isfinite(dW)) and np.all(np.isfinite(db))):
            raise NumericalOverflowError("non-finite gradient in unit backward")
    return UnitGradients(grads)


class Adam:
    """Adam with bias correction over a fixed list of parameter arrays.

    Defaults lr=1e-3, beta1=0.9, beta2=0.999, eps=1e-8; eps sits outside the
    square root, so the first step moves each entry by about lr*sign(g).
    """

    def __init__(self, params, lr: float = 1e-3, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8):
        self.params = list(params)
        self.lr = lr
        self.beta1 = beta1
        self.beta2 = beta2
        self.eps = eps
        self.t = 0
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]

    def step(self, grads):
        """Apply one update in place; grads must align with the params list."""
        if len(grads) != len(self.params):
            raise ShapeError(f"expected {len(self.params)} gradients, got {len(grads)}")
        self.t += 1
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            if p.shape != g.shape:
                raise ShapeError(f"gradient shape {g.shape} != parameter shape {p.shape}")
            adam_step(p, np.ascontiguousarray(g, dtype=np.float64), m, v,
                      self.t, self.lr, self.beta1, self.beta2, self.eps)


def unit_optimizers(model: IntFFModel, lr: float):
    return [Adam(unit.params(), lr=lr) for unit in model.units]


def train_step_intff(model: IntFFModel, pos_batch, neg_batch, optimizers,
                     schedule: str = "per-batch") -> np.ndarray:
    """One contrastive step: forward both batches unit by unit, compute each
    unit's batch-mean loss and gradients, and apply the per-unit Adam steps.

    per-batch applies all updates after the last unit; per-unit updates each
    unit as soon as its gradients exist.  Either way the next unit consumes
    the activations computed before any update.  Returns per-unit mean losses.
    """
    if schedule not in SCHEDULES:
        raise ValueError(f"unknown schedule {schedule!r}")
    pos = np.asarray(pos_batch, dtype=np.float64)
    neg = np.asarray(neg_batch, dtype=np.float64)
    if pos.shape != neg.shape:
        raise ShapeError(f"positive/negative batch shapes differ: {pos.shape} vs {neg.shape}")
    losses = np.empty(len(model.units), dtype=np.float64)
    pending = []
    hp, hn = pos, neg
    for k, unit in enumerate(model.units):
        tr_pos = unit.forward(hp)
        tr_neg = unit.forward(hn)
        loss_k = float(np.mean(unit_loss(tr_pos.goodness, tr_neg.goodness, model.theta)))
        if not np.isfinite(loss_k):
            raise NumericalOverflowError(f"non-finite loss in unit {k}")
        losses[k] = loss_k
        grads = unit_backward(unit, tr_pos, tr_neg, model.theta)
        if schedule == "per-unit":
            optimizers[k].step(grads.flat())
        else:
            pending.append(grads)
        hp, hn = tr_pos.group, tr_neg.group
    if schedule == "per-batch":
        for k, grads in enumerate(pending):
            optimizers[k].step(grads.flat())
    return losses


def stopgrad_oracle_grads(model: IntFFModel, pos_batch, neg_batch,
                          theta: float):
    """Gradients of the detached global loss sum(unit losses), one reverse
    sweep over the whole network with gradient flow stopped at unit inputs.

    Independent of unit_backward: it runs its own forward pass recording
    pre-activations and differentiates the summed loss directly.  Dense
    chains only.  Returns one UnitGradients per unit.
    """
    recs = []
    hp = np.asarray(pos_batch, dtype=np.float64)
    hn = np.asarray(neg_batch, dtype=np.float64)
    for unit in model.units:
        rec = {"inputs": [], "zs": [], "ys": []}
        for h in (hp, hn):
            xn = l2_normalize_rows(h)
            zs, ys = [], []
            x = xn
            for layer in unit.layers:
                if layer.activation != "relu":
                    raise ValueError("oracle supports relu dense chains only")
                z = x @ layer.W.T + layer.b
                y = np.maximum(z, 0.0)
                zs.append(z)
                ys.append(y)
                x = y
            rec["inputs"].append(xn)
            rec["zs"].append(zs)
            rec["ys"].append(ys)
        recs.append(rec)
        hp = rec["ys"][0][-1]
        hn = rec["ys"][1][-1]

    n = np.asarray(pos_batch).shape[0]
    out = []
    for unit, rec in zip(model.units, recs):
        m = rec["ys"][0][-1].shape[1]
        per_pass = []
        for which, sign in ((0, "pos"), (1, "neg")):
            y_last = rec["ys"][which][-1]
            g = mean_square_rows(y_last)
            if sign == "pos":
                # -sigmoid(theta - g) written via the complement identity
                dg = (sigmoid(g - theta) - 1.0) / n
            else:
                dg = (1.0 - sigmoid(theta - g)) / n
            dy = dg[:, None] * (2.0 / m) * y_last
            layer_grads = []
            for li in range(len(unit.layers) - 1, -1, -1):
                z = rec["zs"][which][li]
                dz = np.where(z > 0.0, dy, 0.0)
                x_prev = rec["inputs"][which] if li == 0 else rec["ys"][which][li - 1]
                dW = dz.T @ x_prev
                db = dz.sum(axis=0)
                dy = dz @ unit.layers[li].W  # discarded at li == 0: stop-gradient
                layer_grads.append((dW, db))
            layer_grads.reverse()
            per_pass.append(layer_grads)
        combined = [(a[0] + b[0], a[1] + b[1]) for a, b in zip(*per_pass)]
        out.append(UnitGradients(combined))
    return out


def ff_reference_grads(model: IntFFModel, pos_batch, neg_batch, theta: float):
    """Original-FF per-layer rule, written in closed form for singleton units.

    Each layer normalizes its input, computes relu(Wx+b), and takes the
    gradient of its own loss; because y = relu(z), d(y^2)/dz collapses to 2y.
    """
    if any(len(u.layers) != 1 for u in model.units):
        raise ValueError("reference rule applies to singleton-unit models only")
    hp = np.asarray(pos_batch, dtype=np.float64)
    hn = np.asarray(neg_batch, dtype=np.float64)
    n = hp.shape[0]
    out = []
    for unit in model.units:
        layer = unit.layers[0]
        m = layer.out_width
        xp = l2_normalize_rows(hp)
        xn = l2_normalize_rows(hn)
        yp = np.maximum(xp @ layer.W.T + layer.b, 0.0)
        yn = np.maximum(xn @ layer.W.T + layer.b, 0.0)
        gp = mean_square_rows(yp)
        gn = mean_square_rows(yn)
        cp = -sigmoid(theta - gp) / n * (2.0 / m)
        cn = sigmoid(gn - theta) / n * (2.0 / m)
        dzp = yp * cp[:, None]
        dzn = yn * cn[:, None]
        dW = dzp.T @ xp + dzn.T @ xn
        db = dzp.sum(axis=0) + dzn.sum(axis=0)
        out.append(UnitGradients([(dW, db)]))
        hp, hn = yp, yn
    return out


def bp_loss_and_grads(model: IntFFModel, x_batch, labels):
    """Softmax cross-entropy loss and full-depth gradients for the baseline.

    Returns (loss, grads) with grads aligned to model.parameter_arrays().
    """
    if model.bp_head is None:
        raise ShapeError("bp step needs a model built with a head")
    x = np.asarray(x_batch, dtype=np.float64)
    labels = np.asarray(labels)
    n_classes = model.bp_head.out_width
    if labels.ndim != 1 or labels.shape[0] != x.shape[0]:
        raise ShapeError(f"labels shape {labels.shape} does not match batch {x.shape}")
    if labels.min() < 0 or labels.max() >= n_classes:
        raise ValueError(f"label out of range 0..{n_classes - 1}")
    logits, caches = model.bp_forward(x)
    z = logits - logits.max(axis=1, keepdims=True)
    logp = z - np.log(np.exp(z).sum(axis=1, keepdims=True))
    n = x.shape[0]
    loss = float(-np.mean(logp[np.arange(n), labels]))
    if not np.isfinite(loss):
        raise NumericalOverflowError("non-finite bp loss")
    dlogits = np.exp(logp)
    dlogits[np.arange(n), labels] -= 1.0
    dlogits /= n
    per_layer = []
    dy = dlogits
    layers = model._bp_layers()
    for layer, cache in zip(reversed(layers), reversed(caches)):
        dW, db, dy = layer.backward(dy, cache)
        per_layer.append((dW, db))
    per_layer.reverse()
    flat = []
    for dW, db in per_layer:
        flat.extend((dW, db))
    return loss, flat


def train_bp_step(model: IntFFModel, x_batch, labels, optimizer: Adam) -> float:
    """One full-depth backprop step (loss, gradients, Adam update)."""
    loss, grads = bp_loss_and_grads(model, x_batch, labels)
    optimizer.step(grads)
    return loss


class EarlyStopController:
    """Track best validation accuracy and stop after `patience` epochs
    without an improvement larger than `min_delta`; restores the best
    parameter snapshot on stop (and on demand at end of budget)."""

    def __init__(self, patience: int, min_delta: float = 0.0):
        if patience < 1:
            raise ValueError(f"patience must be >= 1, got {patience}")
        self.patience = patience
        self.min_delta = min_delta
        self.best_metric = -np.inf
        self.best_snapshot = None
        self.since_improvement = 0

    def update(self, metric: float, model: IntFFModel) -> bool:
        """Record one epoch's validation metric; True means stop now."""
        if metric > self.best_metric + self.min_delta:
            self.best_metric = metric
            self.best_snapshot = [p.copy() for p in model.parameter_arrays()]
            self.since_improvement = 0
            return False
        self.since_improvement += 1
        if self.since_improvement >= self.patience:
            self.restore(model)
            return True
        return False

    def restore(self, model: IntFFModel):
        if self.best_snapshot is None:
            return
        for p, saved in zip(model.parameter_arrays(), self.best_snapshot):
            p[...] = saved


@dataclass
class TrainConfig:
    """Everything a training run needs; defaults follow the desk-scale setup."""

    algorithm: str = "intff"
    arch: str = "784,(100,50),(30,10)"
    theta: float = 1.5
    lr: float = 1e-3
    batch_size: int = 64
    epochs: int = 15
    seed: int = 0
    update_schedule: str = "per-batch"
    validation_fraction: float = 0.1
    patience: int = 5
    min_delta: float = 0.0
    noise_profile: str = None  # path of a noise profile JSON, applied to the train split

    def validate(self):
        if self.algorithm not in ALGORITHMS:
            raise ValueError(f"unknown algorithm {self.algorithm!r}")
        if self.update_schedule not in SCHEDULES:
            raise ValueError(f"unknown update schedule {self.update_schedule!r}")
        if self.batch_size < 1:
            raise ValueError(f"batch_size must be >= 1, got {self.batch_size}")
        if self.epochs < 1:
            raise ValueError(f"epochs must be >= 1, got {self.epochs}")
        if not 0.0 <= self.validation_fraction <= 0.5:
            raise ValueError(
                f"validation_fraction must be in [0, 0.5], got {self.validation_fraction}")
        if self.theta <= 0:
            raise ValueError(f"theta must be positive, got {self.theta}")


@dataclass
class MetricsRow:
    epoch: int
    split: str                 # "train" or "val"
    unit_index: int = None
    mean_local_loss: float = None
    accuracy: float = None


@dataclass
class MetricsLog:
    """Per-epoch per-unit train losses and per-epoch validation accuracy."""

    rows: list = field(default_factory=list)

    HEADER = ["epoch", "split", "unit_index", "mean_local_loss", "accuracy"]

    def add_train(self, epoch, unit_index, mean_local_loss):
        self.rows.append(MetricsRow(epoch, "train", unit_index, mean_local_loss, None))

    def add_val(self, epoch, accuracy):
        self.rows.append(MetricsRow(epoch, "val", None, None, accuracy))

    def unit_losses(self, epoch: int) -> dict:
        return {r.unit_index: r.mean_local_loss for r in self.rows
                if r.split == "train" and r.epoch == epoch}

    def to_csv_text(self) -> str:
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(self.HEADER)
        for r in self.rows:
            writer.writerow([
                r.epoch,
                r.split,
                "" if r.unit_index is None else r.unit_index,
                "" if r.mean_local_loss is None else repr(r.mean_local_loss),
                "" if r.accuracy is None else repr(r.accuracy),
            ])
        return buf.getvalue()

    def write_csv(self, path):
        with open(path, "w", encoding="utf-8", newline="") as fh:
            fh.write(self.to_csv_text())

    @classmethod
    def from_csv(cls, path) -> "MetricsLog":
        log = cls()
        with open(path, "r", encoding="utf-8", newline="") as fh:
            reader = csv.reader(fh)
            header = next(reader)
            if header != cls.HEADER:
                raise ValueError(f"unexpected metrics header: {header}")
            for row in reader:
                epoch, split, unit_index, loss, acc = row
                log.rows.append(MetricsRow(
                    int(epoch), split,
                    int(unit_index) if unit_index else None,
                    float(loss) if loss else None,
                    float(acc) if acc else None))
        return log


def resolve_arch(config: TrainConfig) -> ArchSpec:
    """Arch for the chosen algorithm: ff flattens groups to singleton units;
    bp flattens and adds a 10-way head."""
    arch = parse_arch(config.arch)
    if config.algorithm == "ff":
        arch = arch.flattened()
    elif config.algorithm == "bp":
        arch = arch.flattened().with_head(10)
    return arch


def train(config: TrainConfig, images, labels, noise_profile=None,
          progress=None):
    """Full training loop; deterministic in config.seed.

    Splits off a validation fraction, optionally corrupts the training split
    only, then runs contrastive (intff/ff) or supervised (bp) epochs with
    per-epoch shuffling.  Early stopping watches validation accuracy when a
    validation split exists.  Returns (model, MetricsLog).
    """
    from .data import corrupt_dataset  # local import keeps module load light
    from .evaluate import predict_labels, predict_labels_bp

    config.validate()
    images = np.asarray(images, dtype=np.float64)
    labels = np.asarray(labels)
    arch = resolve_arch(config)
    model = build_model(arch, theta=config.theta, seed=config.seed)

    n_total = images.shape[0]
    n_val = int(round(config.validation_fraction * n_total))
    if n_val > 0:
        perm = seeding.stream(config.seed, seeding.DOMAIN_SPLIT).permutation(n_total)
        val_idx, train_idx = perm[:n_val], perm[n_val:]
        val_images, val_labels = images[val_idx], labels[val_idx]
        train_images, train_labels = images[train_idx], labels[train_idx]
    else:
        val_images = val_labels = None
        train_images, train_labels = images, labels

    if noise_profile is not None:
        train_images, train_labels, _ = corrupt_dataset(
            train_images, train_labels, noise_profile)

    if config.algorithm == "bp":
        optimizer = Adam(model.parameter_arrays(), lr=config.lr)
        optimizers = None
    else:
        optimizers = unit_optimizers(model, config.lr)
        optimizer = None

    shuffle_rng = seeding.stream(config.seed, seeding.DOMAIN_SHUFFLE)
    neg_rng = seeding.stream(config.seed, seeding.DOMAIN_NEGATIVES)
    log = MetricsLog()
    controller = EarlyStopController(config.patience, config.min_delta) \
        if n_val > 0 else None

    n_units = len(model.units)
    n_train = train_images.shape[0]
    for epoch in range(1, config.epochs + 1):
        loss_sums = np.zeros(n_units if config.algorithm != "bp" else 1)
        for batch_index, idx in enumerate(make_batches(n_train, config.batch_size,
                                                       shuffle_rng)):
            x = train_images[idx]
            y = train_labels[idx]
            try:
                if config.algorithm == "bp":
                    loss = train_bp_step(model, x, y, optimizer)
                    loss_sums[0] += loss * len(idx)
                else:
                    pos = overlay_labels(x, y)
                    neg = overlay_labels(x, sample_negative_labels(y, neg_rng))
                    losses = train_step_intff(model, pos, neg, optimizers,
                                              config.update_schedule)
                    loss_sums += losses * len(idx)
            except NumericalOverflowError as exc:
                raise NumericalOverflowError(
                    f"{exc} (epoch {epoch}, batch {batch_index})") from None
        mean_losses = loss_sums / n_train
        for k, value in enumerate(mean_losses):
            log.add_train(epoch, k, float(value))

        stop = False
        if n_val > 0:
            if config.algorithm == "bp":
                preds = predict_labels_bp(model, val_images)
            else:
                preds = predict_labels(model, val_images)
            val_acc = float(np.mean(preds == val_labels))
            log.add_val(epoch, val_acc)
            stop = controller.update(val_acc, model)
        if progress is not None:
            progress(epoch, mean_losses, log)
        if stop:
            break
    if controller is not None:
        controller.restore(model)
    return model, log
