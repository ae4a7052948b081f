"""Small dense feed-forward networks with exact backprop and Adam (float64)."""
from __future__ import annotations

import io
import struct
from dataclasses import dataclass, field

import numba
import numpy as np

RELU = "relu"
LINEAR = "linear"
_ACT_TAGS = {RELU: 1, LINEAR: 0}
_TAG_ACTS = {v: k for k, v in _ACT_TAGS.items()}

MLP_MAGIC = b"NPADS"
MLP_VERSION = 1


class StaleCacheError(RuntimeError):
    pass


@dataclass
class Layer:
    W: np.ndarray  # (out, in)
    b: np.ndarray  # (out,)
    activation: str = RELU

    @property
    def n_in(self) -> int:
        return self.W.shape[1]

    @property
    def n_out(self) -> int:
        return self.W.shape[0]


@dataclass
class Mlp:
    layers: list[Layer]
    # bumped on every parameter update so caches from older forwards are rejected
    version: int = field(default=0, compare=False)

    def __post_init__(self):
        if not self.layers:
            raise ValueError("an Mlp needs at least one layer")
        for prev, nxt in zip(self.layers, self.layers[1:]):
            if prev.n_out != nxt.n_in:
                raise ValueError(f"layer dims do not chain: {prev.n_out} -> {nxt.n_in}")
        for layer in self.layers:
            if layer.activation not in _ACT_TAGS:
                raise ValueError(f"unknown activation {layer.activation!r}")

    @property
    def n_in(self) -> int:
        return self.layers[0].n_in

    @property
    def n_out(self) -> int:
        return self.layers[-1].n_out

    @property
    def dims(self) -> list[int]:
        return [self.n_in] + [layer.n_out for layer in self.layers]

    def params(self) -> list[np.ndarray]:
        out = []
        for layer in self.layers:
            out.extend((layer.W, layer.b))
        return out

    def param_names(self) -> list[str]:
        names = []
        for i in range(len(self.layers)):
            names.extend((f"layer{i}.W", f"layer{i}.b"))
        return names

    def copy(self) -> "Mlp":
        return Mlp([Layer(l.W.copy(), l.b.copy(), l.activation) for l in self.layers])

    def __call__(self, x: np.ndarray) -> np.ndarray:
        return forward(self, x)[0]


@dataclass
class Cache:
    inputs: list[np.ndarray]
    pre: list[np.ndarray]
    net_id: int
    version: int


def init_mlp(dims, activations=None, rng: np.random.Generator | None = None) -> Mlp:
    """Glorot-uniform weights and zero biases; hidden ReLU, output linear by default."""
    dims = list(dims)
    if len(dims) < 2:
        raise ValueError("dims needs at least input and output sizes")
    if activations is None:
        activations = [RELU] * (len(dims) - 2) + [LINEAR]
    if len(activations) != len(dims) - 1:
        raise ValueError("need one activation per layer")
    rng = np.random.default_rng() if rng is None else rng
    layers = []
    for n_in, n_out, act in zip(dims[:-1], dims[1:], activations):
        bound = np.sqrt(6.0 / (n_in + n_out))
        layers.append(Layer(rng.uniform(-bound, bound, size=(n_out, n_in)), np.zeros(n_out), act))
    return Mlp(layers)


def forward(net: Mlp, x: np.ndarray) -> tuple[np.ndarray, Cache]:
    h = np.asarray(x, dtype=np.float64)
    squeeze = h.ndim == 1
    if squeeze:
        h = h[None, :]
    if h.shape[1] != net.n_in:
        raise ValueError(f"input dim {h.shape[1]} != network input dim {net.n_in}")
    inputs, pre = [], []
    for layer in net.layers:
        inputs.append(h)
        a = h @ layer.W.T + layer.b
        pre.append(a)
        h = np.maximum(a, 0.0) if layer.activation == RELU else a
    cache = Cache(inputs, pre, id(net), net.version)
    return (h[0] if squeeze else h), cache


def backward(net: Mlp, cache: Cache, grad_output: np.ndarray):
    """Return (param_grads, grad_input); param_grads align with ``net.params()``."""
    if cache.net_id != id(net) or cache.version != net.version:
        raise StaleCacheError("cache does not belong to the current network parameters")
    g = np.asarray(grad_output, dtype=np.float64)
    squeeze = g.ndim == 1
    if squeeze:
        g = g[None, :]
    grads: list[np.ndarray] = [None] * (2 * len(net.layers))
    for i in range(len(net.layers) - 1, -1, -1):
        layer = net.layers[i]
        if layer.activation == RELU:
            g = g * (cache.pre[i] > 0.0)
        grads[2 * i] = g.T @ cache.inputs[i]
        grads[2 * i + 1] = g.sum(axis=0)
        g = g @ layer.W
    return grads, (g[0] if squeeze else g)


@numba.njit(cache=True)
def _adam_kernel(p, g, m, v, sign, l2, b1, b2, inv_c1, inv_sqrt_c2, eps, lr):
    # sign=+1 ascends g, sign=-1 descends it; decay always pulls toward zero
    pf, gf, mf, vf = p.ravel(), g.ravel(), m.ravel(), v.ravel()
    for i in range(pf.size):
        d = l2 * pf[i] - sign * gf[i]
        mf[i] = b1 * mf[i] + (1.0 - b1) * d
        vf[i] = b2 * vf[i] + (1.0 - b2) * d * d
        pf[i] -= lr * (mf[i] * inv_c1) / (np.sqrt(vf[i]) * inv_sqrt_c2 + eps)


class Adam:
    """Adam on a fixed list of parameter arrays, updated in place.

    L2 decay is folded into the gradient before the moment updates.  With
    ``maximize=True`` the supplied gradient is ascended instead.
    """

    def __init__(self, params, beta1=0.9, beta2=0.999, eps=1e-8, names=None):
        self.params = list(params)
        for p in self.params:
            if not (p.flags.c_contiguous and p.flags.writeable):
                raise ValueError("Adam parameters must be writeable C-contiguous arrays")
        self.names = list(names) if names is not None else [f"param{i}" for i in range(len(self.params))]
        self.beta1, self.beta2, self.eps = beta1, beta2, eps
        self.nets: list[Mlp] = []
        self.m = [np.zeros_like(p) for p in self.params]
        self.v = [np.zeros_like(p) for p in self.params]
        self.t = 0

    def step(self, grads, lr: float, l2: float = 0.0, maximize: bool = False) -> None:
        if len(grads) != len(self.params):
            raise ValueError("gradient list does not match parameter list")
        for name, p, g in zip(self.names, self.params, grads):
            if g.shape != p.shape:
                raise ValueError(f"{name}: gradient shape {g.shape} != parameter shape {p.shape}")
            if not np.all(np.isfinite(g)):
                raise FloatingPointError(f"non-finite gradient in {name}")
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        c1 = 1.0 - b1 ** self.t
        c2 = 1.0 - b2 ** self.t
        sign = 1.0 if maximize else -1.0
        for p, g, m, v in zip(self.params, grads, self.m, self.v):
            _adam_kernel(p, np.ascontiguousarray(g), m, v, sign, l2, b1, b2,
                         1.0 / c1, 1.0 / np.sqrt(c2), self.eps, lr)
        touch(*self.nets)


def mlp_optimizer(*nets: Mlp, **kw) -> Adam:
    params, names = [], []
    for k, net in enumerate(nets):
        params.extend(net.params())
        names.extend(f"net{k}.{n}" for n in net.param_names())
    opt = Adam(params, names=names, **kw)
    opt.nets = list(nets)
    return opt


def touch(*nets: Mlp) -> None:
    """Mark networks as updated, invalidating outstanding caches."""
    for net in nets:
        net.version += 1


# --------------------------------------------------------------------------
# Serialization
# --------------------------------------------------------------------------

def write_mlp(fh, net: Mlp) -> None:
    fh.write(MLP_MAGIC + struct.pack("<II", MLP_VERSION, len(net.layers)))
    for layer in net.layers:
        fh.write(struct.pack("<III", layer.n_in, layer.n_out, _ACT_TAGS[layer.activation]))
        fh.write(np.ascontiguousarray(layer.W, dtype="<f8").tobytes())
        fh.write(np.ascontiguousarray(layer.b, dtype="<f8").tobytes())


def _read_exact(fh, n: int) -> bytes:
    data = fh.read(n)
    if len(data) != n:
        raise ValueError("truncated network block")
    return data


def read_mlp(fh) -> Mlp:
    head = _read_exact(fh, len(MLP_MAGIC) + 8)
    if head[:len(MLP_MAGIC)] != MLP_MAGIC:
        raise ValueError("bad network block magic")
    version, n_layers = struct.unpack("<II", head[len(MLP_MAGIC):])
    if version != MLP_VERSION:
        raise ValueError(f"unsupported network block version {version}")
    layers = []
    for _ in range(n_layers):
        n_in, n_out, tag = struct.unpack("<III", _read_exact(fh, 12))
        if tag not in _TAG_ACTS:
            raise ValueError(f"unknown activation tag {tag}")
        W = np.frombuffer(_read_exact(fh, 8 * n_in * n_out), dtype="<f8").reshape(n_out, n_in).copy()
        b = np.frombuffer(_read_exact(fh, 8 * n_out), dtype="<f8").copy()
        layers.append(Layer(W, b, _TAG_ACTS[tag]))
    return Mlp(layers)


def mlp_to_bytes(net: Mlp) -> bytes:
    buf = io.BytesIO()
    write_mlp(buf, net)
    return buf.getvalue()


def mlp_from_bytes(data: bytes) -> Mlp:
    return read_mlp(io.BytesIO(data))
