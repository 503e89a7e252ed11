"""
MicroBotNet: architecture table, width scaling, MAC/parameter accounting and
numpy inference with hard activations
"""
import json
import logging
import math
import os
from dataclasses import dataclass, field
from typing import NamedTuple, Optional

import numpy as np
import pandas as pd
from numpy.lib.stride_tricks import sliding_window_view
from pydantic import BaseModel, ConfigDict

from microbench.errors import DomainError, StructuralError

logger = logging.getLogger(__name__)

DIVISOR = 8
SE_REDUCTION = 4
BN_EPSILON = 1e-5
INPUT_SIZE = 32
KINDS = ("conv", "bneck", "pool", "pointwise")

# reference totals per width multiplier: (MACs, parameters)
REFERENCE = {
    1.00: (6_597_218, 2_044_298),
    0.32: (932_886, 236_658),
    0.25: (697_662, 160_162),
}
REFERENCE_TOLERANCE = 0.05

# (kind, kernel, exp, out, se, stride, activation)
TABLE = (
    ("conv", 3, 0, 16, False, 2, "hswish"),
    ("bneck", 3, 72, 24, False, 2, "relu"),
    ("bneck", 5, 96, 40, True, 2, "hswish"),
    ("bneck", 5, 240, 40, True, 1, "hswish"),
    ("bneck", 5, 120, 48, True, 1, "hswish"),
    ("bneck", 5, 144, 48, True, 1, "hswish"),
    ("bneck", 5, 288, 96, True, 2, "hswish"),
    ("bneck", 5, 576, 96, True, 1, "hswish"),
    ("bneck", 5, 576, 96, True, 1, "hswish"),
    ("bneck", 5, 576, 96, True, 1, "hswish"),
    ("bneck", 5, 576, 96, True, 1, "hswish"),
    ("pointwise", 1, 0, 576, True, 1, "hswish"),
    ("pool", 2, 0, 0, False, 1, None),
    ("pointwise", 1, 0, 1024, False, 1, "hswish"),
    ("pointwise", 1, 0, -1, False, 1, None),
)
FAST_DOWNSAMPLING_LAYERS = 6


class MacConvention(BaseModel):
    """
    Which optional terms enter the count

    The defaults reproduce the published x1.00 parameter total exactly.
    norm_ops, pool_ops and bias_ops add the elementwise work THOP's counting
    rules charge: two operations per batch-norm output, one per pooled output
    plus the adds of each SE global pool, and one per biased output.
    scale_head=False keeps the 1024-channel head unscaled below x1.00.
    """

    model_config = ConfigDict(frozen=True)

    se_bias: bool = False
    head_se: bool = False
    classifier_bias: bool = True
    scale_head: bool = True
    norm_ops: bool = False
    pool_ops: bool = False
    bias_ops: bool = False

    @classmethod
    def table_literal(cls):
        """SE on the 1x1x576 row with biased SE projections, as the table reads"""
        return cls(se_bias=True, head_se=True, classifier_bias=True)

    @classmethod
    def thop(cls):
        """The table-literal network counted with THOP's rules"""
        return cls.table_literal().model_copy(update={"norm_ops": True, "pool_ops": True, "bias_ops": True})

    @classmethod
    def unscaled_head(cls):
        return cls(scale_head=False)

    @classmethod
    def named(cls, name):
        conventions = {
            "default": cls,
            "table": cls.table_literal,
            "thop": cls.thop,
            "head": cls.unscaled_head,
        }
        if name not in conventions:
            raise DomainError(f"unknown MAC convention {name!r}, expected one of {sorted(conventions)}")
        return conventions[name]()


def make_divisible(value, divisor=DIVISOR):
    """Nearest multiple of divisor, at least divisor, bumped up when rounding loses more than 10%"""
    rounded = max(divisor, int(value + divisor / 2) // divisor * divisor)
    if rounded < 0.9 * value:
        rounded += divisor
    return rounded


def hard_activations(x):
    """(h_sigmoid(x), h_swish(x)); works elementwise on arrays"""
    h_sigmoid = np.minimum(np.maximum(np.asarray(x, dtype=np.float64) + 3.0, 0.0), 6.0) / 6.0
    h_swish = x * h_sigmoid
    if np.ndim(h_sigmoid) == 0:
        return float(h_sigmoid), float(h_swish)
    return h_sigmoid, h_swish


def h_sigmoid(x):
    return np.clip(x + 3.0, 0.0, 6.0) / 6.0


def h_swish(x):
    return x * h_sigmoid(x)


def softmax(logits):
    z = np.asarray(logits, dtype=np.float64)
    z = z - z.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


@dataclass(frozen=True)
class LayerSpec:
    name: str
    kind: str
    kernel: int
    out_channels: int
    stride: int
    in_shape: tuple
    exp_size: int = 0
    use_se: bool = False
    activation: Optional[str] = "hswish"
    batch_norm: bool = True
    bias: bool = False

    def __post_init__(self):
        if self.kind not in KINDS:
            raise StructuralError(f"unknown layer kind {self.kind!r}", self.name)
        if self.stride not in (1, 2):
            raise StructuralError(f"stride must be 1 or 2, got {self.stride}", self.name)
        if self.kernel not in (1, 2, 3, 5):
            raise StructuralError(f"kernel must be 1, 2, 3 or 5, got {self.kernel}", self.name)
        if self.kind == "bneck" and self.exp_size < self.in_shape[2]:
            raise StructuralError(
                f"expansion {self.exp_size} below input channels {self.in_shape[2]}", self.name)

    @property
    def out_shape(self):
        h, w, c = self.in_shape
        if self.kind == "pool":
            return (h // self.kernel, w // self.kernel, c)
        return (math.ceil(h / self.stride), math.ceil(w / self.stride), self.out_channels)


@dataclass(frozen=True)
class NetworkSpec:
    alpha: float
    classes: int
    layers: tuple
    divisor: int = DIVISOR
    convention: MacConvention = field(default_factory=MacConvention)

    def __post_init__(self):
        for prev, layer in zip(self.layers, self.layers[1:]):
            if tuple(prev.out_shape) != tuple(layer.in_shape):
                raise StructuralError(
                    f"{prev.name} emits {prev.out_shape} but {layer.name} expects {layer.in_shape}", layer.name)
        size = self.input_shape[0]
        fast = min(layer.out_shape[0] for layer in self.layers[:FAST_DOWNSAMPLING_LAYERS])
        if fast != size // 8:
            raise StructuralError(f"fast downsampling reaches {fast}x{fast}, expected {size // 8}x{size // 8}")

    @property
    def input_shape(self):
        return tuple(self.layers[0].in_shape)


def build_microbotnet(alpha=1.0, classes=10, convention=None, input_size=INPUT_SIZE, divisor=DIVISOR):
    """
    MicroBotNet at width multiplier alpha

    Every channel count (including expansions and the 576/1024 head) is scaled
    by alpha and rounded with make_divisible; the last layer emits `classes`
    logits.

    Returns:
        NetworkSpec: 15 chained layers for an input_size^2 x 3 image
    """
    if not alpha > 0:
        raise DomainError(f"alpha must be positive, got {alpha}")
    if classes < 1:
        raise DomainError(f"classes must be at least 1, got {classes}")
    convention = convention or MacConvention()
    width = lambda c: make_divisible(c * alpha, divisor)  # noqa: E731

    shape = (input_size, input_size, 3)
    layers = []
    for i, (kind, kernel, exp, out, se, stride, act) in enumerate(TABLE):
        name = f"{kind}{i}"
        if kind == "pool":
            layer = LayerSpec(name, kind, kernel, shape[2], stride, shape, activation=None, batch_norm=False)
        elif kind == "bneck":
            layer = LayerSpec(name, kind, kernel, width(out), stride, shape, exp_size=width(exp),
                              use_se=se, activation=act)
        elif out == -1:
            layer = LayerSpec(name, kind, kernel, classes, stride, shape, activation=None,
                              batch_norm=False, bias=convention.classifier_bias)
        elif out == 1024:
            head = width(out) if convention.scale_head or alpha > 1.0 else out
            layer = LayerSpec(name, kind, kernel, head, stride, shape, activation=act, batch_norm=False)
        else:
            layer = LayerSpec(name, kind, kernel, width(out), stride, shape,
                              use_se=se and (kind == "conv" or convention.head_se), activation=act)
        layers.append(layer)
        shape = layer.out_shape
    return NetworkSpec(alpha, classes, tuple(layers), divisor, convention)


class MacRow(NamedTuple):
    name: str
    in_shape: tuple
    out_shape: tuple
    macs: int
    params: int


@dataclass(frozen=True)
class MacReport:
    alpha: float
    classes: int
    layers: tuple

    @property
    def total_macs(self):
        return sum(row.macs for row in self.layers)

    @property
    def total_params(self):
        return sum(row.params for row in self.layers)

    def to_dict(self):
        return {
            "alpha": self.alpha,
            "classes": self.classes,
            "layers": [
                {"name": r.name, "in": list(r.in_shape), "out": list(r.out_shape), "macs": r.macs, "params": r.params}
                for r in self.layers
            ],
            "total_macs": self.total_macs,
            "total_params": self.total_params,
        }

    def to_json(self, indent=2):
        return json.dumps(self.to_dict(), indent=indent)


def _se_cost(channels, pooled, convention):
    """SE block on `channels` maps whose global pool averages `pooled` positions"""
    reduced = channels // SE_REDUCTION
    macs = 2 * channels * reduced
    biases = (reduced + channels) if convention.se_bias else 0
    params = macs + biases
    if convention.pool_ops:
        macs += (pooled + 1) * channels
    if convention.bias_ops:
        macs += biases
    return macs, params


def layer_cost(layer, convention):
    """
    (MACs, params) of one layer

    Pooling, activations, batch norm and adds cost nothing unless the
    convention asks for THOP-style elementwise operations.
    """
    h, w, cin = layer.in_shape
    ho, wo, cout = layer.out_shape
    if layer.kind == "pool":
        return (ho * wo * cout if convention.pool_ops else 0), 0
    if layer.kind == "bneck":
        e, k = layer.exp_size, layer.kernel
        macs = h * w * e * cin + ho * wo * e * k * k + ho * wo * cout * e
        params = cin * e + k * k * e + e * cout + 2 * (e + e + cout)
        if convention.norm_ops:
            macs += 2 * (h * w * e + ho * wo * e + ho * wo * cout)
        if layer.use_se:
            se_macs, se_params = _se_cost(e, ho * wo, convention)
            macs += se_macs
            params += se_params
        return macs, params
    k = layer.kernel
    macs = ho * wo * cout * k * k * cin
    params = k * k * cin * cout + (2 * cout if layer.batch_norm else 0) + (cout if layer.bias else 0)
    if convention.norm_ops and layer.batch_norm:
        macs += 2 * ho * wo * cout
    if convention.bias_ops and layer.bias:
        macs += ho * wo * cout
    if layer.use_se:
        se_macs, se_params = _se_cost(cout, ho * wo, convention)
        macs += se_macs
        params += se_params
    return macs, params


def count_macs(spec):
    """Per-layer and total MACs and parameters, all in integer arithmetic"""
    rows = []
    for layer in spec.layers:
        macs, params = layer_cost(layer, spec.convention)
        rows.append(MacRow(layer.name, tuple(layer.in_shape), tuple(layer.out_shape), int(macs), int(params)))
    report = MacReport(spec.alpha, spec.classes, tuple(rows))
    logger.debug("alpha %.2f: %d MACs, %d params", spec.alpha, report.total_macs, report.total_params)
    return report


def reference_for(alpha):
    for ref_alpha, values in REFERENCE.items():
        if math.isclose(alpha, ref_alpha, abs_tol=1e-9):
            return values
    return None


def compare_with_reference(report):
    """
    Discrepancy of a report against the published totals

    Returns:
        dict | None: totals, absolute and relative deltas, tolerance verdict and
        each layer's share of the counted MACs; None for unpublished alphas
    """
    ref = reference_for(report.alpha)
    if ref is None:
        return None
    ref_macs, ref_params = ref
    macs, params = report.total_macs, report.total_params
    return {
        "alpha": report.alpha,
        "macs": macs,
        "reference_macs": ref_macs,
        "macs_delta": macs - ref_macs,
        "macs_relative": (macs - ref_macs) / ref_macs,
        "params": params,
        "reference_params": ref_params,
        "params_delta": params - ref_params,
        "params_relative": (params - ref_params) / ref_params,
        "within_tolerance": abs(macs - ref_macs) <= REFERENCE_TOLERANCE * ref_macs
        and abs(params - ref_params) <= REFERENCE_TOLERANCE * ref_params,
        "layers": [{"name": r.name, "macs": r.macs, "params": r.params, "macs_share": r.macs / macs}
                   for r in report.layers],
    }


CONVENTIONS = ("default", "table", "thop", "head")


def convention_ledger(alpha, classes=10):
    """
    Totals and per-layer costs of every named convention, against the reference

    Returns:
        dict: {"totals": [...], "layers": [...]}; each total row carries
        macs_relative and params_relative (None for unpublished alphas), each
        layer row holds that layer's MACs and params under every convention
    """
    ref = reference_for(alpha)
    totals, layers = [], {}
    for name in CONVENTIONS:
        report = count_macs(build_microbotnet(alpha, classes, MacConvention.named(name)))
        row = {"convention": name, "macs": report.total_macs, "params": report.total_params,
               "macs_relative": None, "params_relative": None}
        if ref is not None:
            row["macs_relative"] = (report.total_macs - ref[0]) / ref[0]
            row["params_relative"] = (report.total_params - ref[1]) / ref[1]
        totals.append(row)
        for r in report.layers:
            entry = layers.setdefault(r.name, {"name": r.name})
            entry[f"{name}_macs"] = r.macs
            entry[f"{name}_params"] = r.params
    return {"totals": totals, "layers": list(layers.values())}


def tradeoff_table(alphas=(0.25, 0.32, 1.0), classes=10, convention=None):
    """MAC and parameter totals per width multiplier, beside the published ones"""
    rows = []
    for alpha in alphas:
        report = count_macs(build_microbotnet(alpha, classes, convention))
        ref = reference_for(alpha) or (None, None)
        rows.append({
            "alpha": alpha,
            "total_macs": report.total_macs,
            "total_params": report.total_params,
            "reference_macs": ref[0],
            "reference_params": ref[1],
            "top1": np.nan,
        })
    return pd.DataFrame(rows)


# ---------------------------------------------------------------------------
# weights


def _bn_tensors(prefix, channels):
    return [(f"{prefix}.bn.{p}", (channels,)) for p in ("gamma", "beta", "mean", "var")]


def _se_tensors(prefix, channels, se_bias):
    reduced = channels // SE_REDUCTION
    out = [(f"{prefix}.se.fc1.weight", (reduced, channels))]
    if se_bias:
        out.append((f"{prefix}.se.fc1.bias", (reduced,)))
    out.append((f"{prefix}.se.fc2.weight", (channels, reduced)))
    if se_bias:
        out.append((f"{prefix}.se.fc2.bias", (channels,)))
    return out


def weight_manifest(spec):
    """
    Deterministic (name, shape) enumeration of every tensor the network reads

    Conv kernels are (out, in/groups, k, k); batch norm contributes gamma,
    beta, running mean and running variance.
    """
    se_bias = spec.convention.se_bias
    tensors = []
    for layer in spec.layers:
        cin = layer.in_shape[2]
        n, k = layer.name, layer.kernel
        if layer.kind == "pool":
            continue
        if layer.kind == "bneck":
            e = layer.exp_size
            tensors.append((f"{n}.expand.weight", (e, cin, 1, 1)))
            tensors += _bn_tensors(f"{n}.expand", e)
            tensors.append((f"{n}.depthwise.weight", (e, 1, k, k)))
            tensors += _bn_tensors(f"{n}.depthwise", e)
            if layer.use_se:
                tensors += _se_tensors(n, e, se_bias)
            tensors.append((f"{n}.project.weight", (layer.out_channels, e, 1, 1)))
            tensors += _bn_tensors(f"{n}.project", layer.out_channels)
            continue
        tensors.append((f"{n}.weight", (layer.out_channels, cin, k, k)))
        if layer.batch_norm:
            tensors += _bn_tensors(n, layer.out_channels)
        if layer.bias:
            tensors.append((f"{n}.bias", (layer.out_channels,)))
        if layer.use_se:
            tensors += _se_tensors(n, layer.out_channels, se_bias)
    return tensors


def _is_learnable(name):
    return not (name.endswith(".bn.mean") or name.endswith(".bn.var"))


@dataclass(frozen=True)
class WeightBundle:
    """Named float32 tensors in manifest order"""

    tensors: dict

    def __getitem__(self, name):
        return self.tensors[name]

    def __len__(self):
        return len(self.tensors)

    def names(self):
        return list(self.tensors)

    def param_count(self):
        return int(sum(t.size for name, t in self.tensors.items() if _is_learnable(name)))

    def equals(self, other):
        return self.names() == other.names() and all(
            np.array_equal(self[n], other[n]) for n in self.names())


def random_weights(spec, rng):
    """Fan-in scaled normal kernels, identity batch norm"""
    tensors = {}
    for name, shape in weight_manifest(spec):
        if name.endswith(".bn.gamma") or name.endswith(".bn.var"):
            value = np.ones(shape)
        elif name.endswith(".bn.beta") or name.endswith(".bn.mean") or name.endswith(".bias"):
            value = np.zeros(shape)
        else:
            fan_in = int(np.prod(shape[1:]))
            value = rng.normal(0.0, 1.0 / math.sqrt(fan_in), size=shape)
        tensors[name] = value.astype(np.float32)
    return WeightBundle(tensors)


def zero_weights(spec):
    """All kernels, biases and batch-norm shifts zero; unit running variance"""
    tensors = {
        name: (np.ones(shape) if name.endswith(".bn.var") else np.zeros(shape)).astype(np.float32)
        for name, shape in weight_manifest(spec)
    }
    return WeightBundle(tensors)


def save_weights(bundle, path):
    """
    Write a text manifest at path and the little-endian float32 blob beside it

    The manifest's first non-comment line names the blob file; every following
    line is `<tensor name> <dim> <dim> ...`.
    """
    blob_name = os.path.basename(path) + ".bin"
    lines = ["# microbotnet weights", f"blob {blob_name}"]
    lines += [" ".join([name] + [str(d) for d in tensor.shape]) for name, tensor in bundle.tensors.items()]
    with open(path, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    blob = np.concatenate([t.astype("<f4").ravel() for t in bundle.tensors.values()]) if len(bundle) else \
        np.empty(0, dtype="<f4")
    blob.tofile(os.path.join(os.path.dirname(path), blob_name))
    logger.info("Saved %d tensors (%d values) to %s", len(bundle), blob.size, path)


def load_weights(spec, path):
    """
    Read a bundle written by save_weights and check it against spec

    Raises:
        StructuralError: naming the first tensor whose name or shape diverges
            from the enumeration, or when the blob is truncated or oversized
    """
    with open(path, "r", encoding="utf-8") as f:
        lines = [ln.split() for ln in f if ln.strip() and not ln.lstrip().startswith("#")]
    if not lines or lines[0][0] != "blob" or len(lines[0]) != 2:
        raise StructuralError(f"{path}: manifest must start with a blob line")
    blob_path = os.path.join(os.path.dirname(path), lines[0][1])
    entries = [(ln[0], tuple(int(d) for d in ln[1:])) for ln in lines[1:]]

    expected = weight_manifest(spec)
    for i, (exp, got) in enumerate(zip(expected, entries)):
        if exp != got:
            raise StructuralError(f"tensor {i}: expected {exp[0]} {exp[1]}, found {got[0]} {got[1]}", exp[0])
    if len(entries) != len(expected):
        name = expected[len(entries)][0] if len(entries) < len(expected) else entries[len(expected)][0]
        raise StructuralError(f"manifest lists {len(entries)} tensors, network has {len(expected)}", name)

    blob = np.fromfile(blob_path, dtype="<f4")
    needed = sum(int(np.prod(shape)) for _, shape in entries)
    if blob.size != needed:
        raise StructuralError(f"{blob_path}: holds {blob.size} values, manifest needs {needed}")
    tensors = {}
    offset = 0
    for name, shape in entries:
        size = int(np.prod(shape))
        tensors[name] = blob[offset:offset + size].reshape(shape).astype(np.float32)
        offset += size
    return WeightBundle(tensors)


# ---------------------------------------------------------------------------
# inference


def check_weights(spec, weights):
    expected = weight_manifest(spec)
    for name, shape in expected:
        if name not in weights.tensors:
            raise StructuralError(f"missing tensor {name}", name.split(".")[0])
        if tuple(weights[name].shape) != shape:
            raise StructuralError(f"{name} has shape {weights[name].shape}, expected {shape}", name.split(".")[0])
    if len(weights) != len(expected):
        extra = sorted(set(weights.names()) - {n for n, _ in expected})
        raise StructuralError(f"unexpected tensors {extra}", extra[0].split(".")[0])


def _conv(x, w, stride, depthwise=False):
    """NHWC convolution with 'same' padding; w is (out, in/groups, k, k)"""
    k = w.shape[-1]
    if k == 1:
        return np.einsum("nhwc,oc->nhwo", x[:, ::stride, ::stride], w[:, :, 0, 0])
    pad = k // 2
    xp = np.pad(x, ((0, 0), (pad, pad), (pad, pad), (0, 0)))
    win = sliding_window_view(xp, (k, k), axis=(1, 2))[:, ::stride, ::stride]
    if depthwise:
        return np.einsum("nhwcij,cij->nhwc", win, w[:, 0])
    return np.einsum("nhwcij,ocij->nhwo", win, w)


def _bn(x, weights, prefix):
    g, b = weights[f"{prefix}.bn.gamma"], weights[f"{prefix}.bn.beta"]
    m, v = weights[f"{prefix}.bn.mean"], weights[f"{prefix}.bn.var"]
    return (x - m) / np.sqrt(v.astype(np.float64) + BN_EPSILON) * g + b


def _activate(x, activation):
    if activation == "hswish":
        return h_swish(x)
    if activation == "relu":
        return np.maximum(x, 0.0)
    return x


def _se(x, weights, prefix, se_bias):
    pooled = x.mean(axis=(1, 2))
    z = pooled @ weights[f"{prefix}.se.fc1.weight"].T
    if se_bias:
        z = z + weights[f"{prefix}.se.fc1.bias"]
    z = np.maximum(z, 0.0) @ weights[f"{prefix}.se.fc2.weight"].T
    if se_bias:
        z = z + weights[f"{prefix}.se.fc2.bias"]
    return x * h_sigmoid(z)[:, None, None, :]


def _run_layer(layer, x, weights, se_bias):
    n = layer.name
    if layer.kind == "pool":
        k = layer.kernel
        b, h, w, c = x.shape
        return x[:, :h // k * k, :w // k * k].reshape(b, h // k, k, w // k, k, c).mean(axis=(2, 4))
    if layer.kind == "bneck":
        y = _activate(_bn(_conv(x, weights[f"{n}.expand.weight"], 1), weights, f"{n}.expand"), layer.activation)
        y = _conv(y, weights[f"{n}.depthwise.weight"], layer.stride, depthwise=True)
        y = _activate(_bn(y, weights, f"{n}.depthwise"), layer.activation)
        if layer.use_se:
            y = _se(y, weights, n, se_bias)
        y = _bn(_conv(y, weights[f"{n}.project.weight"], 1), weights, f"{n}.project")
        if layer.stride == 1 and layer.in_shape[2] == layer.out_channels:
            y = y + x
        return y
    y = _conv(x, weights[f"{n}.weight"], layer.stride)
    if layer.batch_norm:
        y = _bn(y, weights, n)
    if layer.bias:
        y = y + weights[f"{n}.bias"]
    y = _activate(y, layer.activation)
    if layer.use_se:
        y = _se(y, weights, n, se_bias)
    return y


def forward(spec, weights, image, trace=False):
    """
    Logits for one image (H, W, 3) or a batch (N, H, W, 3)

    Args:
        spec (NetworkSpec): architecture
        weights (WeightBundle): tensors matching weight_manifest(spec)
        image (np.ndarray): input in HWC order
        trace (bool): also return every layer's output shape

    Returns:
        np.ndarray | tuple: logits (k,) or (N, k); with trace, (logits, shapes)
    """
    check_weights(spec, weights)
    x = np.asarray(image, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4 or tuple(x.shape[1:]) != spec.input_shape:
        raise StructuralError(f"input shape {x.shape} does not match {spec.input_shape}", "input")
    shapes = []
    for layer in spec.layers:
        x = _run_layer(layer, x, weights, spec.convention.se_bias)
        if tuple(x.shape[1:]) != tuple(layer.out_shape):
            raise StructuralError(f"produced {x.shape[1:]}, expected {layer.out_shape}", layer.name)
        shapes.append(tuple(x.shape[1:]))
    logits = x.reshape(x.shape[0], -1)
    logits = logits[0] if single else logits
    return (logits, shapes) if trace else logits
