"""Architecture parsing, hidden-unit composition, forward traces, goodness,
and model persistence.

A model is an ordered chain of hidden units.  Each unit L2-normalizes its
input, runs a short dense/ReLU chain (1-3 layers by default), and exposes
its final layer as the selected group: the group's mean squared activation
is the unit's goodness, and unit boundaries are gradient barriers.
"""

import json
from dataclasses import dataclass

import numpy as np

from . import seeding
from .errors import ArchParseError, ConfigError, NumericalOverflowError, ShapeError
from .numerics import (
    DenseLayer,
    check_finite,
    l2_normalize_rows,
    mean_square_rows,
    sigmoid,
)

MODEL_FORMAT_VERSION = 1
DEFAULT_THETA = 1.5
DEFAULT_MAX_UNIT_DEPTH = 3


@dataclass(frozen=True)
class HiddenUnitSpec:
    """Layer widths of one hidden unit; the final width is the selected group."""

    layer_widths: tuple

    def __post_init__(self):
        if not self.layer_widths:
            raise ValueError("hidden unit needs at least one layer")
        if any(w < 1 for w in self.layer_widths):
            raise ValueError(f"layer widths must be positive: {self.layer_widths}")

    @property
    def depth(self) -> int:
        return len(self.layer_widths)

    @property
    def group_width(self) -> int:
        return self.layer_widths[-1]


@dataclass(frozen=True)
class ArchSpec:
    """Parsed architecture: input width, hidden units, optional classifier head."""

    input_width: int
    units: tuple
    bp_head_width: int = None

    def __post_init__(self):
        if self.input_width < 1:
            raise ValueError(f"input width must be positive: {self.input_width}")
        if not self.units:
            raise ValueError("architecture needs at least one hidden unit")
        if self.bp_head_width is not None and self.bp_head_width < 1:
            raise ValueError(f"bp head width must be positive: {self.bp_head_width}")

    def unit_in_width(self, k: int) -> int:
        return self.input_width if k == 0 else self.units[k - 1].group_width

    def flattened(self) -> "ArchSpec":
        """Same layer stack with every layer as its own singleton unit (original FF)."""
        widths = [w for u in self.units for w in u.layer_widths]
        return ArchSpec(self.input_width,
                        tuple(HiddenUnitSpec((w,)) for w in widths),
                        self.bp_head_width)

    def with_head(self, width: int) -> "ArchSpec":
        return ArchSpec(self.input_width, self.units, width)

    def to_string(self) -> str:
        parts = [str(self.input_width)]
        for u in self.units:
            if u.depth == 1:
                parts.append(str(u.layer_widths[0]))
            else:
                parts.append("(" + ",".join(str(w) for w in u.layer_widths) + ")")
        return ",".join(parts)


def parse_arch(spec: str, max_unit_depth: int = DEFAULT_MAX_UNIT_DEPTH) -> ArchSpec:
    """Parse an architecture string like "784,(100,50),(30,10)".

    Bare integers after the input width become singleton units (original-FF
    style); parenthesized groups become multi-layer units whose final width
    is the selected group.  A fully parenthesized form "(784,(100,50))" is
    accepted too.  Errors carry the character offset of the offending token.
    """
    s = spec
    # strip one enclosing pair when it wraps the entire string
    stripped = s.strip()
    if stripped.startswith("("):
        depth = 0
        for i, ch in enumerate(stripped):
            if ch == "(":
                depth += 1
            elif ch == ")":
                depth -= 1
                if depth == 0:
                    if i == len(stripped) - 1:
                        s = stripped[1:-1]
                    break

    tokens = _tokenize_arch(s)
    pos = 0

    def peek():
        return tokens[pos] if pos < len(tokens) else ("end", None, len(s))

    def take(kind):
        nonlocal pos
        tok = peek()
        if tok[0] != kind:
            raise ArchParseError(f"expected {kind}, found {tok[0]} {tok[1]!r}", tok[2])
        pos += 1
        return tok

    def take_int(role):
        kind, value, off = peek()
        if kind != "int":
            raise ArchParseError(f"expected {role}, found {kind} {value!r}", off)
        if value < 1:
            raise ArchParseError(f"{role} must be positive, got {value}", off)
        take("int")
        return value

    input_width = take_int("input width")
    units = []
    while peek()[0] != "end":
        take(",")
        kind, _, off = peek()
        if kind == "int":
            units.append(HiddenUnitSpec((take_int("layer width"),)))
        elif kind == "(":
            take("(")
            widths = [take_int("layer width")]
            while peek()[0] == ",":
                take(",")
                widths.append(take_int("layer width"))
            if peek()[0] != ")":
                raise ArchParseError("unclosed '('", off)
            take(")")
            if len(widths) > max_unit_depth:
                raise ArchParseError(
                    f"hidden unit depth {len(widths)} exceeds limit {max_unit_depth}", off)
            units.append(HiddenUnitSpec(tuple(widths)))
        elif kind == "end":
            raise ArchParseError("trailing comma", off)
        else:
            raise ArchParseError(f"unexpected token {kind!r}", off)
    if not units:
        raise ArchParseError("architecture needs at least one hidden unit", len(s))
    return ArchSpec(input_width, tuple(units))


def _tokenize_arch(s: str):
    tokens = []
    i = 0
    while i < len(s):
        ch = s[i]
        if ch.isspace():
            i += 1
        elif ch in "(),":
            tokens.append((ch, ch, i))
            i += 1
        elif ch.isdigit():
            j = i
            while j < len(s) and s[j].isdigit():
                j += 1
            tokens.append(("int", int(s[i:j]), i))
            i = j
        else:
            raise ArchParseError(f"unexpected character {ch!r}", i)
    return tokens


@dataclass
class UnitTrace:
    """Recorded forward pass of one unit on a batch."""

    normalized_input: np.ndarray
    activations: list                 # post-activation outputs per layer
    caches: list                      # per-layer backward caches
    goodness: np.ndarray              # (n,) mean square of the selected group

    @property
    def group(self) -> np.ndarray:
        return self.activations[-1]

    @property
    def interior(self) -> list:
        return self.activations[:-1]


@dataclass
class ForwardTrace:
    """Per-unit traces for one batch; `single` marks a promoted 1-D input."""

    units: list
    single: bool = False

    def goodness_matrix(self) -> np.ndarray:
        return np.stack([u.goodness for u in self.units], axis=1)


class HiddenUnit:
    """Normalizer plus a short layer chain; the final layer is the selected group."""

    def __init__(self, layers):
        if not layers:
            raise ValueError("hidden unit needs at least one layer")
        self.layers = list(layers)

    @property
    def in_width(self) -> int:
        return self.layers[0].in_width

    @property
    def group_width(self) -> int:
        return self.layers[-1].out_width

    def params(self):
        out = []
        for layer in self.layers:
            out.extend(layer.params())
        return out

    def forward(self, x) -> UnitTrace:
        """Normalize the input, run the chain, record activations and goodness.

        The normalized input is data as far as gradients are concerned; no
        gradient ever leaves the unit through it.
        """
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.in_width:
            raise ShapeError(f"unit forward expects (n, {self.in_width}), got {x.shape}")
        xn = l2_normalize_rows(x)
        activations = []
        caches = []
        h = xn
        for layer in self.layers:
            h, cache = layer.forward(h)
            activations.append(h)
            caches.append(cache)
        return UnitTrace(xn, activations, caches, mean_square_rows(activations[-1]))


class IntFFModel:
    """Ordered hidden units with goodness threshold theta, plus an optional
    linear head for the backprop baseline."""

    def __init__(self, arch: ArchSpec, theta: float, seed: int, units, bp_head=None):
        if theta <= 0:
            raise ValueError(f"theta must be positive, got {theta}")
        self.arch = arch
        self.theta = float(theta)
        self.seed = int(seed)
        self.units = list(units)
        self.bp_head = bp_head

    def parameter_arrays(self):
        """All parameter arrays in fixed order (units first, then head)."""
        out = []
        for unit in self.units:
            out.extend(unit.params())
        if self.bp_head is not None:
            out.extend(self.bp_head.params())
        return out

    @property
    def input_width(self) -> int:
        return self.arch.input_width

    def forward(self, x) -> ForwardTrace:
        """Run all units in order; unit k+1 consumes unit k's group activations."""
        x = np.asarray(x, dtype=np.float64)
        single = x.ndim == 1
        if single:
            x = x[None, :]
        if x.ndim != 2 or x.shape[1] != self.input_width:
            raise ShapeError(f"model forward expects (n, {self.input_width}), got {x.shape}")
        traces = []
        h = x
        for k, unit in enumerate(self.units):
            tr = unit.forward(h)
            if not np.all(np.isfinite(tr.group)):
                raise NumericalOverflowError(f"non-finite activations in unit {k}")
            traces.append(tr)
            h = tr.group
        return ForwardTrace(traces, single)

    def bp_forward(self, x):
        """Plain dense/ReLU stack plus linear head: no normalization barriers.

        Returns (logits, caches); caches drive the full-depth backward pass.
        """
        if self.bp_head is None:
            raise ShapeError("model has no bp head")
        x = np.asarray(x, dtype=np.float64)
        if x.ndim != 2 or x.shape[1] != self.input_width:
            raise ShapeError(f"bp forward expects (n, {self.input_width}), got {x.shape}")
        caches = []
        h = x
        for layer in self._bp_layers():
            h, cache = layer.forward(h)
            caches.append(cache)
        return h, caches

    def _bp_layers(self):
        return [layer for unit in self.units for layer in unit.layers] + [self.bp_head]


def build_model(arch: ArchSpec, theta: float = DEFAULT_THETA, seed: int = 0) -> IntFFModel:
    """Initialize all layers he-uniform from the seed's init stream."""
    rng = seeding.stream(seed, seeding.DOMAIN_INIT)
    units = []
    for k, uspec in enumerate(arch.units):
        in_w = arch.unit_in_width(k)
        layers = []
        for w in uspec.layer_widths:
            layers.append(DenseLayer.init(in_w, w, rng, activation="relu"))
            in_w = w
        units.append(HiddenUnit(layers))
    bp_head = None
    if arch.bp_head_width is not None:
        bp_head = DenseLayer.init(arch.units[-1].group_width, arch.bp_head_width,
                                  rng, activation="identity")
    return IntFFModel(arch, theta, seed, units, bp_head)


def unit_forward(unit: HiddenUnit, x) -> UnitTrace:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 1:
        x = x[None, :]
    return unit.forward(x)


def model_forward(model: IntFFModel, x) -> ForwardTrace:
    return model.forward(x)


def goodness_total(trace: ForwardTrace):
    """Sum of per-unit goodness; interior activations never contribute."""
    total = np.zeros(trace.units[0].goodness.shape[0], dtype=np.float64)
    for u in trace.units:
        total = total + u.goodness
    if trace.single:
        return float(total[0])
    return total


def p_positive(goodness, theta: float):
    """logistic(goodness - theta): the likelihood that the input was positive."""
    if theta <= 0:
        raise ValueError(f"theta must be positive, got {theta}")
    return sigmoid(np.asarray(goodness, dtype=np.float64) - theta)


def save_model(model: IntFFModel, path):
    """Write the model as JSON with decimal float64 literals (lossless)."""
    doc = {
        "format_version": MODEL_FORMAT_VERSION,
        "arch": model.arch.to_string(),
        "bp_head_width": model.arch.bp_head_width,
        "theta": model.theta,
        "seed": model.seed,
        "units": [
            {"layers": [
                {"shape": list(layer.W.shape),
                 "w": layer.W.tolist(),
                 "b": layer.b.tolist(),
                 "activation": layer.activation}
                for layer in unit.layers]}
            for unit in model.units
        ],
    }
    if model.bp_head is not None:
        doc["bp_head"] = {"shape": list(model.bp_head.W.shape),
                          "w": model.bp_head.W.tolist(),
                          "b": model.bp_head.b.tolist(),
                          "activation": model.bp_head.activation}
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(doc, fh)
        fh.write("\n")


def _layer_from_doc(doc, what: str) -> DenseLayer:
    try:
        W = np.asarray(doc["w"], dtype=np.float64)
        b = np.asarray(doc["b"], dtype=np.float64)
        shape = tuple(doc["shape"])
        activation = doc["activation"]
    except (KeyError, TypeError) as exc:
        raise ConfigError(f"model file: malformed {what}: {exc}") from None
    if W.shape != shape:
        raise ConfigError(f"model file: {what} shape field {shape} != data {W.shape}")
    if not (np.all(np.isfinite(W)) and np.all(np.isfinite(b))):
        raise ConfigError(f"model file: non-finite values in {what}")
    return DenseLayer(W, b, activation)


def load_model(path) -> IntFFModel:
    """Load a model JSON, validating version, arch consistency, and finiteness."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"model file: corrupt JSON: {exc}") from None
    version = doc.get("format_version")
    if version != MODEL_FORMAT_VERSION:
        raise ConfigError(
            f"model file: format_version {version!r} unsupported (expected {MODEL_FORMAT_VERSION})")
    try:
        arch = parse_arch(doc["arch"])
    except KeyError:
        raise ConfigError("model file: missing field arch") from None
    if doc.get("bp_head_width") is not None:
        arch = arch.with_head(int(doc["bp_head_width"]))
    theta = doc.get("theta")
    if not isinstance(theta, (int, float)) or theta <= 0:
        raise ConfigError(f"model file: bad theta {theta!r}")
    unit_docs = doc.get("units")
    if not isinstance(unit_docs, list) or len(unit_docs) != len(arch.units):
        raise ConfigError(
            f"model file: units count {len(unit_docs) if isinstance(unit_docs, list) else '?'}"
            f" does not match arch {arch.to_string()!r}")
    units = []
    for k, (uspec, udoc) in enumerate(zip(arch.units, unit_docs)):
        ldocs = udoc.get("layers", [])
        if len(ldocs) != uspec.depth:
            raise ConfigError(f"model file: units[{k}] has {len(ldocs)} layers, "
                              f"arch says {uspec.depth}")
        layers = []
        in_w = arch.unit_in_width(k)
        for li, (w, ldoc) in enumerate(zip(uspec.layer_widths, ldocs)):
            layer = _layer_from_doc(ldoc, f"units[{k}].layers[{li}]")
            if layer.W.shape != (w, in_w):
                raise ConfigError(
                    f"model file: units[{k}].layers[{li}] shape {layer.W.shape} "
                    f"inconsistent with arch (expected {(w, in_w)})")
            layers.append(layer)
            in_w = w
        if len(layers) != uspec.depth:
            raise ConfigError(f"model file: units[{k}] has {len(layers)} layers, "
                              f"arch says {uspec.depth}")
        units.append(HiddenUnit(layers))
    bp_head = None
    if "bp_head" in doc:
        bp_head = _layer_from_doc(doc["bp_head"], "bp_head")
        if arch.bp_head_width is not None and bp_head.out_width != arch.bp_head_width:
            raise ConfigError(
                f"model file: bp_head width {bp_head.out_width} != declared {arch.bp_head_width}")
    return IntFFModel(arch, theta, int(doc.get("seed", 0)), units, bp_head)
