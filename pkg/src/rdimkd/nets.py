"""Small fully-connected networks with feature taps and manual backprop.

A network is a stack of dense maps ``a = act(x W^T + b)``.  A layer declared
with ``split_through=t`` is stored as two dense maps ``f1`` (t x p, no bias,
linear) and ``f2`` (q x t, bias, original activation); its tap sits on the
``f1`` output so a width-``t`` teacher feature can be distilled into it.
"""

from __future__ import annotations

import copy
from dataclasses import dataclass, field

import numpy as np

from .exceptions import InvalidDims, ShapeMismatch
from .linalg import SeededRng, matrix_to_text, read_matrix

ACTIVATIONS = ("relu", "identity", "softmax")


@dataclass(frozen=True)
class LayerSpec:
    in_dim: int
    out_dim: int
    activation: str = "relu"
    tap: bool = False
    split_through: int | None = None

    def __post_init__(self):
        if self.in_dim < 1 or self.out_dim < 1:
            raise InvalidDims(f"layer dims must be positive, got {self.in_dim}->{self.out_dim}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.split_through is not None and self.split_through < 1:
            raise InvalidDims(f"split_through must be >= 1, got {self.split_through}")

    @property
    def tap_dim(self) -> int:
        return self.split_through if self.split_through is not None else self.out_dim


@dataclass
class Dense:
    weight: np.ndarray  # (out, in)
    bias: np.ndarray | None
    activation: str = "identity"
    tap: bool = False
    group: int = 0
    role: str = "full"  # full | f1 | f2


@dataclass
class Network:
    specs: tuple
    layers: list
    seed: int = 0
    meta: dict = field(default_factory=dict)

    @property
    def input_dim(self) -> int:
        return self.layers[0].weight.shape[1]

    @property
    def output_dim(self) -> int:
        return self.layers[-1].weight.shape[0]

    @property
    def tap_indices(self) -> list:
        return [i for i, layer in enumerate(self.layers) if layer.tap]

    @property
    def tap_dims(self) -> list:
        return [self.layers[i].weight.shape[0] for i in self.tap_indices]

    def copy(self) -> "Network":
        return copy.deepcopy(self)

    def parameters(self):
        """Flat list of parameter arrays (weights and present biases), in layer order."""
        out = []
        for layer in self.layers:
            out.append(layer.weight)
            if layer.bias is not None:
                out.append(layer.bias)
        return out


def mlp_specs(input_dim, hidden, output_dim, taps=(), splits=None, output_activation="softmax"):
    """LayerSpecs for an MLP; ``taps`` and ``splits`` index the linear layers."""
    splits = dict(splits or {})
    dims = [input_dim, *hidden, output_dim]
    specs = []
    for i in range(len(dims) - 1):
        last = i == len(dims) - 2
        specs.append(
            LayerSpec(
                dims[i],
                dims[i + 1],
                output_activation if last else "relu",
                tap=i in taps,
                split_through=splits.get(i),
            )
        )
    return tuple(specs)


def split_linear(weight, bias, t: int, rng: SeededRng):
    """Factor a q x p linear map into f1 (t x p, no bias) and f2 (q x t, bias).

    Only the shape of ``weight`` is used; the factors are freshly drawn with
    std ``1/sqrt(p)`` and ``1/sqrt(t)``.  ``bias`` moves onto f2 unchanged.
    """
    q, p = np.shape(weight)
    if t < 1:
        raise InvalidDims(f"split dimension must be >= 1, got {t}")
    w1 = rng.normal((t, p), 1.0 / np.sqrt(p))
    w2 = rng.normal((q, t), 1.0 / np.sqrt(t))
    b2 = np.zeros(q) if bias is None else np.array(bias, dtype=np.float64)
    return w1, w2, b2


def merge_linear(w1, w2, b1=None, b2=None):
    """Collapse ``f2(f1(x))`` into one affine map ``(W2 W1, W2 b1 + b2)``."""
    w1 = np.asarray(w1, dtype=np.float64)
    w2 = np.asarray(w2, dtype=np.float64)
    if w2.shape[1] != w1.shape[0]:
        raise ShapeMismatch(f"cannot compose {w1.shape} then {w2.shape}")
    q = w2.shape[0]
    b = np.zeros(q)
    if b1 is not None:
        b = b + w2 @ np.asarray(b1, dtype=np.float64)
    if b2 is not None:
        b = b + np.asarray(b2, dtype=np.float64)
    return w2 @ w1, b


def build_network(specs, seed: int = 0) -> Network:
    """Seeded init: weights N(0, 1/fan_in), biases zero."""
    specs = tuple(specs)
    for a, b in zip(specs, specs[1:]):
        if a.out_dim != b.in_dim:
            raise ShapeMismatch(f"layer widths do not chain: {a.out_dim} -> {b.in_dim}")
    root = SeededRng(seed)
    layers = []
    for g, spec in enumerate(specs):
        rng = root.derive(g)
        if spec.split_through is None:
            w = rng.normal((spec.out_dim, spec.in_dim), 1.0 / np.sqrt(spec.in_dim))
            layers.append(Dense(w, np.zeros(spec.out_dim), spec.activation, spec.tap, g, "full"))
        else:
            w1, w2, b2 = split_linear(np.empty((spec.out_dim, spec.in_dim)), None, spec.split_through, rng)
            layers.append(Dense(w1, None, "identity", spec.tap, g, "f1"))
            layers.append(Dense(w2, b2, spec.activation, False, g, "f2"))
    return Network(specs, layers, seed)


def merge_network(net: Network) -> Network:
    """Inference form: every split pair multiplied back into a single layer."""
    specs, layers = [], []
    i = 0
    while i < len(net.layers):
        layer = net.layers[i]
        spec = net.specs[layer.group]
        if layer.role == "f1":
            f2 = net.layers[i + 1]
            w, b = merge_linear(layer.weight, f2.weight, layer.bias, f2.bias)
            layers.append(Dense(w, b, f2.activation, False, layer.group, "full"))
            specs.append(LayerSpec(spec.in_dim, spec.out_dim, spec.activation, False, None))
            i += 2
        else:
            layers.append(copy.deepcopy(layer))
            specs.append(spec)
            i += 1
    return Network(tuple(specs), layers, net.seed, dict(net.meta))


def _act(name, z):
    if name == "relu":
        return np.maximum(z, 0.0)
    return z


def _forward(net: Network, x):
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 2 or x.shape[1] != net.input_dim:
        raise ShapeMismatch(f"batch shape {x.shape} does not match input dim {net.input_dim}")
    inputs, pre, taps = [], [], []
    a = x
    for layer in net.layers:
        inputs.append(a)
        z = a @ layer.weight.T
        if layer.bias is not None:
            z = z + layer.bias
        pre.append(z)
        a = _act(layer.activation, z)
        if layer.tap:
            taps.append(a)
    return a, taps, (inputs, pre)


def forward(net: Network, x):
    """Return ``(logits, taps)``; taps are post-activation, in layer order.

    The output head is returned before softmax; use :func:`predict_proba`
    for probabilities.
    """
    logits, taps, _ = _forward(net, x)
    return logits, taps


def predict_proba(net: Network, x) -> np.ndarray:
    from .losses import softmax

    logits, _ = forward(net, x)
    return softmax(logits)


def backward(net: Network, x, logit_grad, tap_grads=None, cache=None):
    """Parameter gradients for a loss with gradient ``logit_grad`` at the output
    and ``tap_grads[i]`` at tap ``i`` (``None`` entries contribute nothing).

    Returns a list of ``(dW, db)`` per dense layer; ``db`` is None for
    bias-free layers.
    """
    if cache is None:
        _, _, cache = _forward(net, x)
    inputs, pre = cache
    n_taps = len(net.tap_indices)
    tap_grads = list(tap_grads) if tap_grads is not None else [None] * n_taps
    if len(tap_grads) != n_taps:
        raise ShapeMismatch(f"{len(tap_grads)} tap gradients for {n_taps} taps")
    g = np.asarray(logit_grad, dtype=np.float64)
    if g.shape != pre[-1].shape:
        raise ShapeMismatch(f"logit gradient {g.shape} vs output {pre[-1].shape}")

    grads = [None] * len(net.layers)
    tap_pos = n_taps - 1
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if layer.tap:
            tg = tap_grads[tap_pos]
            tap_pos -= 1
            if tg is not None:
                tg = np.asarray(tg, dtype=np.float64)
                if tg.shape != pre[i].shape:
                    raise ShapeMismatch(f"tap gradient {tg.shape} vs tap {pre[i].shape}")
                g = g + tg
        if layer.activation == "relu":
            g = g * (pre[i] > 0)
        dw = g.T @ inputs[i]
        db = g.sum(axis=0) if layer.bias is not None else None
        grads[i] = (dw, db)
        if i > 0:
            g = g @ layer.weight
    return grads


def inherit_init(student: Network, teacher: Network):
    """Copy teacher weights into same-index student layers of identical shape.

    Returns ``(new_student, copied_layer_indices)``.
    """
    out = student.copy()
    copied = []
    for i, (s, t) in enumerate(zip(out.layers, teacher.layers)):
        same_bias = (s.bias is None) == (t.bias is None) and (s.bias is None or s.bias.shape == t.bias.shape)
        if s.weight.shape == t.weight.shape and same_bias:
            s.weight = t.weight.copy()
            s.bias = None if t.bias is None else t.bias.copy()
            copied.append(i)
    return out, copied


def _fmt(v) -> str:
    if isinstance(v, float):
        return format(v, ".17g")
    return str(v)


def network_to_text(net: Network) -> str:
    lines = ["rdimkd-network 1", f"seed {net.seed}", f"layers {len(net.specs)}"]
    for s in net.specs:
        split = "-" if s.split_through is None else str(s.split_through)
        lines.append(f"{s.in_dim} {s.out_dim} {s.activation} {int(s.tap)} {split}")
    lines.append(f"dense {len(net.layers)}")
    body = "\n".join(lines) + "\n"
    for i, layer in enumerate(net.layers):
        has_bias = layer.bias is not None
        body += f"dense {i} {layer.role} {layer.group} {layer.activation} {int(layer.tap)} {int(has_bias)}\n"
        body += matrix_to_text(layer.weight)
        if has_bias:
            body += matrix_to_text(layer.bias[None, :])
    body += f"meta {len(net.meta)}\n"
    for key in net.meta:
        value = net.meta[key]
        kind = "f" if isinstance(value, float) else "i" if isinstance(value, int) else "s"
        body += f"{key} {kind} {_fmt(value)}\n"
    return body


def network_from_text(text: str) -> Network:
    lines = iter(text.splitlines())
    if next(lines).strip() != "rdimkd-network 1":
        raise ValueError("not an rdimkd network checkpoint")
    seed = int(next(lines).split()[1])
    n_specs = int(next(lines).split()[1])
    specs = []
    for _ in range(n_specs):
        ind, outd, act, tap, split = next(lines).split()
        specs.append(LayerSpec(int(ind), int(outd), act, bool(int(tap)), None if split == "-" else int(split)))
    n_dense = int(next(lines).split()[1])
    layers = []
    for _ in range(n_dense):
        _, _, role, group, act, tap, has_bias = next(lines).split()
        w = read_matrix(lines)
        b = read_matrix(lines)[0] if int(has_bias) else None
        layers.append(Dense(w, b, act, bool(int(tap)), int(group), role))
    meta = {}
    n_meta = int(next(lines).split()[1])
    for _ in range(n_meta):
        key, kind, value = next(lines).split(" ", 2)
        meta[key] = float(value) if kind == "f" else int(value) if kind == "i" else value
    net = Network(tuple(specs), layers, seed, meta)
    _validate_shapes(net)
    return net


def _validate_shapes(net: Network):
    for layer in net.layers:
        spec = net.specs[layer.group]
        q, p = layer.weight.shape
        if layer.role == "full":
            ok = (q, p) == (spec.out_dim, spec.in_dim)
        elif layer.role == "f1":
            ok = (q, p) == (spec.split_through, spec.in_dim)
        else:
            ok = (q, p) == (spec.out_dim, spec.split_through)
        if not ok:
            raise ShapeMismatch(f"layer {layer.group} ({layer.role}) has weight {layer.weight.shape}")


def save_network(net: Network, path) -> None:
    with open(path, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(network_to_text(net))


def load_network(path) -> Network:
    with open(path, encoding="utf-8") as fh:
        return network_from_text(fh.read())
