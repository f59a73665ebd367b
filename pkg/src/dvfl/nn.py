"""Small dense neural nets for two-party split training.

The model has three sections: one bottom stack per party, an interactive
layer that linearly combines the two bottom outputs (identity activation on
a concatenated view, held entirely by the active party), and a top stack
ending in a single sigmoid unit.  Matrices are float64, row-major,
(batch x features); weights are (out x in).
"""

import math
import struct
from dataclasses import dataclass, field

import numpy as np
from scipy.special import erf

_SQRT2 = math.sqrt(2.0)
_INV_SQRT_2PI = 1.0 / math.sqrt(2.0 * math.pi)


def _act_identity(z):
    return z


def _dact_identity(z, out):
    return np.ones_like(z)


def _act_relu(z):
    return np.maximum(z, 0.0)


def _dact_relu(z, out):
    return (z > 0.0).astype(np.float64)


def _act_sigmoid(z):
    return 1.0 / (1.0 + np.exp(-z))


def _dact_sigmoid(z, out):
    return out * (1.0 - out)


def _act_gelu(z):
    return 0.5 * z * (1.0 + erf(z / _SQRT2))


def _dact_gelu(z, out):
    cdf = 0.5 * (1.0 + erf(z / _SQRT2))
    pdf = _INV_SQRT_2PI * np.exp(-0.5 * z * z)
    return cdf + z * pdf


ACTIVATIONS = {
    "identity": (_act_identity, _dact_identity),
    "relu": (_act_relu, _dact_relu),
    "sigmoid": (_act_sigmoid, _dact_sigmoid),
    "gelu": (_act_gelu, _dact_gelu),
}


class DenseLayer:
    def __init__(self, weights, bias, activation):
        if activation not in ACTIVATIONS:
            raise ValueError("unknown activation %r" % activation)
        self.weights = np.asarray(weights, dtype=np.float64)
        self.bias = np.asarray(bias, dtype=np.float64)
        if self.weights.ndim != 2 or self.bias.shape != (self.weights.shape[0],):
            raise ValueError("weights must be (out, in) with matching bias")
        self.activation = activation

    @property
    def n_out(self):
        return self.weights.shape[0]

    @property
    def n_in(self):
        return self.weights.shape[1]

    def pre_activation(self, x):
        return x @ self.weights.T + self.bias

    def forward(self, x):
        z = self.pre_activation(x)
        return ACTIVATIONS[self.activation][0](z), z


def init_dense(n_in, n_out, activation, rng):
    """Glorot-uniform weights, zero bias."""
    limit = math.sqrt(6.0 / (n_in + n_out))
    w = rng.uniform(-limit, limit, size=(n_out, n_in))
    return DenseLayer(w, np.zeros(n_out), activation)


def forward(layers, x):
    """Run a stack; returns (output, caches) for the matching backward."""
    caches = []
    out = np.asarray(x, dtype=np.float64)
    for layer in layers:
        a, z = layer.forward(out)
        caches.append((out, z, a))
        out = a
    return out, caches


def backward(layers, caches, grad_out):
    """Gradients per layer ([(gW, gb), ...]) plus the input gradient."""
    grads = [None] * len(layers)
    g = grad_out
    for i in range(len(layers) - 1, -1, -1):
        x, z, a = caches[i]
        layer = layers[i]
        dz = g * ACTIVATIONS[layer.activation][1](z, a)
        grads[i] = (dz.T @ x, dz.sum(axis=0))
        g = dz @ layer.weights
    return grads, g


def bce_loss(pred, labels):
    """Mean binary cross-entropy and its gradient w.r.t. the predictions.

    Predictions are clamped to [1e-12, 1 - 1e-12] before the logs; labels
    must be 0 or 1.
    """
    y = np.asarray(labels, dtype=np.float64).reshape(-1, 1)
    if not np.all((y == 0.0) | (y == 1.0)):
        raise ValueError("labels must be 0 or 1")
    p = np.clip(np.asarray(pred, dtype=np.float64), 1e-12, 1.0 - 1e-12)
    n = p.shape[0]
    loss = float(-(y * np.log(p) + (1.0 - y) * np.log(1.0 - p)).sum() / n)
    dpred = (p - y) / (p * (1.0 - p)) / n
    return loss, dpred


# --- flat parameter vectors --------------------------------------------------

class WeightVector:
    """Flat float64 view of a set of named parameters, with its layout."""

    def __init__(self, layout, values):
        self.layout = tuple(layout)  # ((name, shape), ...) in vector order
        self.values = np.asarray(values, dtype=np.float64)
        want = sum(int(np.prod(s)) for _, s in self.layout)
        if self.values.size != want:
            raise ValueError("vector has %d entries, layout needs %d"
                             % (self.values.size, want))

    def copy(self):
        return WeightVector(self.layout, self.values.copy())

    def same_layout(self, other):
        return self.layout == other.layout

    def __len__(self):
        return self.values.size


def collect_params(named_layers):
    layout, chunks = [], []
    for name, layer in named_layers:
        layout.append((name + ".w", layer.weights.shape))
        layout.append((name + ".b", layer.bias.shape))
        chunks.append(layer.weights.ravel())
        chunks.append(layer.bias.ravel())
    return WeightVector(layout, np.concatenate(chunks) if chunks else np.zeros(0))


def assign_params(named_layers, vec):
    offset = 0
    entries = iter(vec.layout)
    for name, layer in named_layers:
        for attr in ("weights", "bias"):
            ename, shape = next(entries)
            expect = name + (".w" if attr == "weights" else ".b")
            if ename != expect or tuple(shape) != getattr(layer, attr).shape:
                raise ValueError("layout entry %r does not match layer %r" % (ename, expect))
            size = int(np.prod(shape))
            setattr(layer, attr, vec.values[offset:offset + size].reshape(shape).copy())
            offset += size


def grads_to_vector(named_layers, grads):
    layout, chunks = [], []
    for (name, layer), (gw, gb) in zip(named_layers, grads):
        layout.append((name + ".w", layer.weights.shape))
        layout.append((name + ".b", layer.bias.shape))
        chunks.append(np.asarray(gw).ravel())
        chunks.append(np.asarray(gb).ravel())
    return WeightVector(layout, np.concatenate(chunks))


def sgd_step(params, grads, lr):
    """params - lr * grads; layouts must match exactly."""
    if not params.same_layout(grads):
        raise ValueError("parameter and gradient layouts differ")
    return WeightVector(params.layout, params.values - lr * grads.values)


# --- split model -------------------------------------------------------------

@dataclass
class ModelArch:
    active_bottom: list = field(default_factory=lambda: [32, 16])
    passive_bottom: list = field(default_factory=lambda: [32, 16])
    interactive_out: int = 32
    top: list = field(default_factory=lambda: [16])
    bottom_activation: str = "relu"
    top_activation: str = "relu"


class SplitModel:
    def __init__(self, active_bottom, passive_bottom, interactive, top):
        self.active_bottom = active_bottom
        self.passive_bottom = passive_bottom
        self.interactive = interactive
        self.top = top

    @property
    def active_out_dim(self):
        return self.active_bottom[-1].n_out

    @property
    def passive_out_dim(self):
        return self.passive_bottom[-1].n_out

    def interactive_slices(self):
        """(weights for the active slice, weights for the passive slice)."""
        p = self.active_out_dim
        return self.interactive.weights[:, :p], self.interactive.weights[:, p:]

    def named_layers(self, party="all"):
        active = ([("active_bottom.%d" % i, l) for i, l in enumerate(self.active_bottom)]
                  + [("interactive", self.interactive)]
                  + [("top.%d" % i, l) for i, l in enumerate(self.top)])
        passive = [("passive_bottom.%d" % i, l) for i, l in enumerate(self.passive_bottom)]
        if party == "active":
            return active
        if party == "passive":
            return passive
        if party == "all":
            return active + passive
        raise ValueError("party must be active, passive or all")

    def params(self, party="all"):
        return collect_params(self.named_layers(party))

    def load_params(self, vec, party="all"):
        assign_params(self.named_layers(party), vec)


def build_split_model(active_in, passive_in, arch, seed):
    """Deterministic construction: same (dims, arch, seed) -> same weights."""
    rng = np.random.default_rng(seed)
    act = arch.bottom_activation

    def stack(n_in, sizes, activation):
        layers = []
        for n_out in sizes:
            layers.append(init_dense(n_in, n_out, activation, rng))
            n_in = n_out
        return layers

    active_bottom = stack(active_in, arch.active_bottom, act)
    passive_bottom = stack(passive_in, arch.passive_bottom, act)
    concat = active_bottom[-1].n_out + passive_bottom[-1].n_out
    interactive = init_dense(concat, arch.interactive_out, "identity", rng)
    top = stack(arch.interactive_out, arch.top, arch.top_activation)
    top.append(init_dense(top[-1].n_out if top else arch.interactive_out, 1,
                          "sigmoid", rng))
    return SplitModel(active_bottom, passive_bottom, interactive, top)


def interactive_forward(model, a, b):
    """Pre-activation of the interactive layer from the two bottom outputs."""
    wa, wp = model.interactive_slices()
    return a @ wa.T + b @ wp.T + model.interactive.bias


@dataclass
class SplitCache:
    a: np.ndarray
    b: np.ndarray
    ca: list
    cb: list
    z: np.ndarray
    out: np.ndarray
    ct: list


def split_forward(model, xa, xp):
    a, ca = forward(model.active_bottom, xa)
    b, cb = forward(model.passive_bottom, xp)
    z = interactive_forward(model, a, b)
    out, ct = forward(model.top, z)
    return SplitCache(a, b, ca, cb, z, out, ct)


@dataclass
class SplitGrads:
    active_bottom: list
    passive_bottom: list
    interactive: tuple
    top: list
    db: np.ndarray  # gradient w.r.t. the passive bottom output


def split_backward(model, cache, labels):
    loss, dpred = bce_loss(cache.out, labels)
    g_top, dz = backward(model.top, cache.ct, dpred)
    wa, wp = model.interactive_slices()
    gw_int = np.concatenate([dz.T @ cache.a, dz.T @ cache.b], axis=1)
    gb_int = dz.sum(axis=0)
    da = dz @ wa
    db = dz @ wp
    g_a, _ = backward(model.active_bottom, cache.ca, da)
    g_p, _ = backward(model.passive_bottom, cache.cb, db)
    return loss, SplitGrads(g_a, g_p, (gw_int, gb_int), g_top, db)


def split_grads_vector(model, grads, party):
    if party == "active":
        named = model.named_layers("active")
        glist = grads.active_bottom + [grads.interactive] + grads.top
    elif party == "passive":
        named = model.named_layers("passive")
        glist = grads.passive_bottom
    else:
        named = model.named_layers("all")
        glist = (grads.active_bottom + [grads.interactive] + grads.top
                 + grads.passive_bottom)
    return grads_to_vector(named, glist)


def centralized_reference_step(model, xa, xp, labels, lr):
    """One plain SGD step on the joined model; the distributed-path oracle."""
    cache = split_forward(model, xa, xp)
    loss, grads = split_backward(model, cache, labels)
    for party in ("active", "passive"):
        new = sgd_step(model.params(party), split_grads_vector(model, grads, party), lr)
        model.load_params(new, party)
    return loss


def predict(model, xa, xp):
    return split_forward(model, xa, xp).out


# --- checkpoints -------------------------------------------------------------
#
# Layout header (entry count, then per entry: name, rows, cols with cols = 0
# marking a 1-D parameter) followed by the values as big-endian float64.

def save_weights(vec):
    out = [struct.pack(">I", len(vec.layout))]
    for name, shape in vec.layout:
        nb = name.encode()
        rows = shape[0]
        cols = shape[1] if len(shape) == 2 else 0
        out.append(struct.pack(">H", len(nb)) + nb + struct.pack(">II", rows, cols))
    out.append(vec.values.astype(">f8").tobytes())
    return b"".join(out)


def load_weights(buf):
    (count,) = struct.unpack_from(">I", buf, 0)
    offset = 4
    layout = []
    for _ in range(count):
        (nlen,) = struct.unpack_from(">H", buf, offset)
        offset += 2
        name = buf[offset:offset + nlen].decode()
        offset += nlen
        rows, cols = struct.unpack_from(">II", buf, offset)
        offset += 8
        layout.append((name, (rows,) if cols == 0 else (rows, cols)))
    total = sum(int(np.prod(s)) for _, s in layout)
    values = np.frombuffer(buf, dtype=">f8", count=total, offset=offset)
    return WeightVector(layout, values.astype(np.float64))


def save_weights_file(path, vec):
    with open(path, "wb") as fh:
        fh.write(save_weights(vec))


def load_weights_file(path):
    with open(path, "rb") as fh:
        return load_weights(fh.read())
