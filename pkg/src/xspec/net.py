"""Miniature VGG-style embedding towers with exact reverse-mode gradients.

Layout conventions: the public ``forward``/``backward`` accept a single
(H, W, C) input or an (N, H, W, C) batch. Internally everything runs
batch-first NCHW through the kernels in ``xspec._kernels``.
"""

import copy
import json
import struct
from dataclasses import dataclass, field

import numpy as np

from . import _kernels
from .io import FormatError

CONV = "conv3x3"
RELU = "relu"
MAXPOOL = "maxpool2"
GLOBAL_AVG = "global_avg_pool"
GLOBAL_MAX = "global_max_pool"
LAYER_KINDS = (CONV, RELU, MAXPOOL, GLOBAL_AVG, GLOBAL_MAX)

PRNG_ID = "numpy.PCG64"
CHECKPOINT_MAGIC = b"XSPC"
CHECKPOINT_VERSION = 1

DEFAULT_BLOCKS = ((16, 16), (32, 32), (64,))


@dataclass(frozen=True)
class LayerSpec:
    kind: str
    in_channels: int = 0
    out_channels: int = 0

    def __post_init__(self):
        if self.kind not in LAYER_KINDS:
            raise ValueError(f"unknown layer kind {self.kind!r}")
        if self.kind == CONV and (self.in_channels < 1 or self.out_channels < 1):
            raise ValueError("conv layers need positive channel counts")

    def to_dict(self):
        if self.kind == CONV:
            return {"kind": self.kind, "in": self.in_channels, "out": self.out_channels}
        return {"kind": self.kind}

    @classmethod
    def from_dict(cls, d):
        return cls(d["kind"], d.get("in", 0), d.get("out", 0))


def vgg_layers(in_channels, blocks=DEFAULT_BLOCKS, global_pool=GLOBAL_AVG):
    """conv/relu blocks separated by 2x2 max pooling, closed by a global pool."""
    if global_pool not in (GLOBAL_AVG, GLOBAL_MAX):
        raise ValueError(f"global pool must be {GLOBAL_AVG} or {GLOBAL_MAX}")
    layers = []
    c = in_channels
    for bi, block in enumerate(blocks):
        if bi > 0:
            layers.append(LayerSpec(MAXPOOL))
        for width in block:
            layers.append(LayerSpec(CONV, c, width))
            layers.append(LayerSpec(RELU))
            c = width
    layers.append(LayerSpec(global_pool))
    return layers


class EmbeddingNet:
    """Layer list plus per-conv parameters and a per-layer trainable mask."""

    def __init__(self, layers, weights=None, biases=None, trainable=None):
        self.layers = list(layers)
        self._check_layers()
        n = len(self.layers)
        self.weights = list(weights) if weights is not None else [None] * n
        self.biases = list(biases) if biases is not None else [None] * n
        for i, spec in enumerate(self.layers):
            if spec.kind == CONV and self.weights[i] is None:
                self.weights[i] = np.zeros((spec.out_channels, spec.in_channels, 3, 3))
                self.biases[i] = np.zeros(spec.out_channels)
        if trainable is None:
            trainable = [spec.kind == CONV for spec in self.layers]
        self.trainable = [bool(t) and spec.kind == CONV for t, spec in zip(trainable, self.layers)]

    def _check_layers(self):
        if not self.layers or self.layers[-1].kind not in (GLOBAL_AVG, GLOBAL_MAX):
            raise ValueError("layer list must end in a global pooling layer")
        c = None
        for i, spec in enumerate(self.layers):
            if spec.kind in (GLOBAL_AVG, GLOBAL_MAX) and i != len(self.layers) - 1:
                raise ValueError("global pooling must be the last layer")
            if spec.kind == CONV:
                if c is not None and spec.in_channels != c:
                    raise ValueError(f"layer {i}: expects {spec.in_channels} channels, gets {c}")
                c = spec.out_channels
        if c is None:
            raise ValueError("network has no conv layer")

    @property
    def conv_indices(self):
        return [i for i, s in enumerate(self.layers) if s.kind == CONV]

    @property
    def in_channels(self):
        return self.layers[self.conv_indices[0]].in_channels

    @property
    def embedding_dim(self):
        return self.layers[self.conv_indices[-1]].out_channels

    def freeze_except_last(self, k):
        """Mark only the last ``k`` conv layers trainable (k=0 freezes all)."""
        convs = self.conv_indices
        if k < 0:
            raise ValueError("k must be nonnegative")
        keep = set(convs[len(convs) - k:]) if k else set()
        self.trainable = [i in keep for i in range(len(self.layers))]
        return self

    def first_trainable(self):
        """Index of the first trainable layer, or len(layers) when all frozen."""
        for i, t in enumerate(self.trainable):
            if t:
                return i
        return len(self.layers)

    def copy(self):
        return copy.deepcopy(self)

    def describe(self):
        return {"layers": [s.to_dict() for s in self.layers], "trainable": list(self.trainable)}


@dataclass
class CoupledModel:
    """Visible and polarimetric towers; parameters are never shared."""

    vis_net: EmbeddingNet
    pol_net: EmbeddingNet
    meta: dict = field(default_factory=dict)
    velocity: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.vis_net.embedding_dim != self.pol_net.embedding_dim:
            raise ValueError("towers must share the embedding dimension")

    def towers(self):
        return {"vis": self.vis_net, "pol": self.pol_net}

    def copy(self):
        return copy.deepcopy(self)


# ----------------------------------------------------------------------------
# forward / backward


@dataclass
class ForwardCache:
    net: EmbeddingNet
    start: int
    inputs: list
    pool_idx: dict
    out_shape: tuple


def _as_nchw(x, channels):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 3
    if single:
        x = x[None]
    if x.ndim != 4:
        raise ValueError(f"expected (H, W, C) or (N, H, W, C) input, got shape {x.shape}")
    if x.shape[-1] != channels:
        raise ValueError(f"input has {x.shape[-1]} channels, network expects {channels}")
    return np.ascontiguousarray(x.transpose(0, 3, 1, 2)), single


def forward(net, x, return_cache=False, backend=None):
    """Embed an (H, W, C) patch or (N, H, W, C) batch."""
    xb, single = _as_nchw(x, net.in_channels)
    if not np.all(np.isfinite(xb)):
        raise ValueError("input has non-finite values")
    z, cache = forward_nchw(net, xb, start=0, stop=None, keep_cache=return_cache, backend=backend)
    if single:
        z = z[0]
    return (z, cache) if return_cache else z


def forward_nchw(net, x, start=0, stop=None, keep_cache=False, backend=None):
    """Run layers[start:stop] on an NCHW batch. Returns (output, cache-or-None)."""
    k = _kernels.get_backend(backend)
    nt = _kernels.num_threads()
    stop = len(net.layers) if stop is None else stop
    inputs, pool_idx = [], {}
    h = x
    for i in range(start, stop):
        spec = net.layers[i]
        if keep_cache:
            inputs.append(h)
        if spec.kind == CONV:
            if h.ndim != 4 or h.shape[1] != spec.in_channels:
                raise ValueError(f"layer {i}: input shape {h.shape} does not match conv {spec.in_channels}->{spec.out_channels}")
            h = k.conv3x3_forward(h, net.weights[i], net.biases[i], num_threads=nt)
        elif spec.kind == RELU:
            h = np.maximum(h, 0.0)
        elif spec.kind == MAXPOOL:
            if h.shape[2] < 2 or h.shape[3] < 2:
                raise ValueError(f"layer {i}: cannot max-pool a {h.shape[2]}x{h.shape[3]} map")
            h, idx = k.maxpool2_forward(h, num_threads=nt)
            if keep_cache:
                pool_idx[i] = idx
        elif spec.kind == GLOBAL_AVG:
            h = h.mean(axis=(2, 3))
        elif spec.kind == GLOBAL_MAX:
            flat = h.reshape(h.shape[0], h.shape[1], -1)
            idx = flat.argmax(axis=2)
            if keep_cache:
                pool_idx[i] = idx
            h = np.take_along_axis(flat, idx[..., None], axis=2)[..., 0]
    cache = ForwardCache(net, start, inputs, pool_idx, h.shape) if keep_cache else None
    return h, cache


def backward(net, cache, grad_out, need_input_grad=False, backend=None):
    """Reverse-mode pass through the cached forward.

    Returns (grads, dx): ``grads[i]`` is (dW, db) for conv layers (zeros for
    frozen ones) and None elsewhere; ``dx`` is the input gradient in the same
    layout the forward received, or None unless requested.
    """
    if cache is None or cache.net is not net:
        raise ValueError("backward needs the cache from forward on this network")
    k = _kernels.get_backend(backend)
    nt = _kernels.num_threads()
    g = np.asarray(grad_out, dtype=np.float64)
    single = g.ndim == 1
    if single:
        g = g[None]
    if g.shape != cache.out_shape:
        raise ValueError(f"grad_out shape {g.shape} does not match forward output {cache.out_shape}")
    start = cache.start
    grads = [None] * len(net.layers)
    for i in net.conv_indices:
        if i >= start:
            grads[i] = (np.zeros_like(net.weights[i]), np.zeros_like(net.biases[i]))
    # below `floor` no layer needs a gradient, so the sweep can stop there
    floor = start if need_input_grad else max(start, net.first_trainable())
    stop = start + len(cache.inputs)
    for i in range(stop - 1, floor - 1, -1):
        spec = net.layers[i]
        xin = cache.inputs[i - start]
        if spec.kind == CONV:
            want_dx = i > floor or need_input_grad
            if net.trainable[i]:
                dw, db, dx = k.conv3x3_backward(xin, net.weights[i], g, need_dx=want_dx, num_threads=nt)
                grads[i] = (dw, db)
            elif want_dx:
                w_flip = net.weights[i][:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                dx = k.conv3x3_forward(g, w_flip, np.zeros(spec.in_channels), num_threads=nt)
            else:
                dx = None
            g = dx
        elif spec.kind == RELU:
            g = g * (xin > 0)
        elif spec.kind == MAXPOOL:
            g = k.maxpool2_backward(g, cache.pool_idx[i], xin.shape, num_threads=nt)
        elif spec.kind == GLOBAL_AVG:
            n, c, hh, ww = xin.shape
            g = np.broadcast_to((g / (hh * ww))[:, :, None, None], xin.shape).copy()
        elif spec.kind == GLOBAL_MAX:
            n, c, hh, ww = xin.shape
            flat = np.zeros((n, c, hh * ww))
            np.put_along_axis(flat, cache.pool_idx[i][..., None], g[..., None], axis=2)
            g = flat.reshape(xin.shape)
        if g is None:
            break
    dx = None
    if need_input_grad:
        dx = g
        if start == 0 and dx is not None:
            dx = dx.transpose(0, 2, 3, 1)
            if single:
                dx = dx[0]
    return grads, dx


# ----------------------------------------------------------------------------
# parameters


def init_params(net, seed):
    """He-normal conv weights (std sqrt(2 / (9 * C_in))), zero biases. Returns a new net."""
    out = net.copy()
    rng = np.random.default_rng(seed)
    for i in out.conv_indices:
        spec = out.layers[i]
        std = np.sqrt(2.0 / (9 * spec.in_channels))
        out.weights[i] = rng.normal(0.0, std, size=(spec.out_channels, spec.in_channels, 3, 3))
        out.biases[i] = np.zeros(spec.out_channels)
    return out


def expand_input_channels(net, channels):
    """Copy of ``net`` whose first conv accepts ``channels`` inputs.

    The original single-channel filters are replicated and divided by the
    channel count, so an input with identical channels gives the same output.
    """
    first = net.conv_indices[0]
    spec = net.layers[first]
    if spec.in_channels != 1:
        raise ValueError("only single-channel towers can be expanded")
    out = net.copy()
    out.layers[first] = LayerSpec(CONV, channels, spec.out_channels)
    out.weights[first] = np.repeat(net.weights[first], channels, axis=1) / channels
    return out


def build_coupled(blocks=DEFAULT_BLOCKS, global_pool=GLOBAL_AVG, seed=0, pol_channels=3, pol_from_vis=True):
    """Fresh coupled model.

    With ``pol_from_vis`` the polarimetric tower starts as a copy of the
    visible tower with its first conv expanded to ``pol_channels`` inputs;
    otherwise it gets an independent initialization.
    """
    ss = np.random.SeedSequence(seed)
    vis_seed, pol_seed = (int(s.generate_state(1, np.uint64)[0]) for s in ss.spawn(2))
    vis = init_params(EmbeddingNet(vgg_layers(1, blocks, global_pool)), vis_seed)
    if pol_from_vis:
        pol = expand_input_channels(vis, pol_channels)
    else:
        pol = init_params(EmbeddingNet(vgg_layers(pol_channels, blocks, global_pool)), pol_seed)
    return CoupledModel(vis, pol)


def sgd_step(model, grads, lr, momentum=0.9):
    """Momentum SGD on trainable layers: v = momentum*v - lr*g; p += v.

    ``grads`` maps tower name ("vis"/"pol") to the list returned by
    ``backward``. Velocities live on the model.
    """
    if lr < 0:
        raise ValueError("learning rate must be nonnegative")
    if not 0.0 <= momentum < 1.0:
        raise ValueError("momentum must lie in [0, 1)")
    for name, net in model.towers().items():
        tower_grads = grads.get(name)
        if tower_grads is None:
            continue
        vel = model.velocity.setdefault(name, {})
        for i in net.conv_indices:
            if not net.trainable[i] or tower_grads[i] is None:
                continue
            dw, db = tower_grads[i]
            if dw.shape != net.weights[i].shape or db.shape != net.biases[i].shape:
                raise ValueError(f"{name} layer {i}: gradient shape mismatch")
            vw, vb = vel.get(i, (np.zeros_like(dw), np.zeros_like(db)))
            vw = momentum * vw - lr * dw
            vb = momentum * vb - lr * db
            vel[i] = (vw, vb)
            net.weights[i] = net.weights[i] + vw
            net.biases[i] = net.biases[i] + vb
    return model


# ----------------------------------------------------------------------------
# checkpoints


def save_checkpoint(model, path, precision="f64"):
    """Write ``model`` as an XSPC checkpoint.

    Layout: b"XSPC", u16 version, u32 header length, UTF-8 JSON header, then
    every conv weight and bias (vis tower first) as little-endian IEEE-754
    in declaration order, row-major.
    """
    if precision not in ("f32", "f64"):
        raise ValueError("precision must be f32 or f64")
    dtype = np.dtype("<f4") if precision == "f32" else np.dtype("<f8")
    arrays, payload = [], []
    for name, net in model.towers().items():
        for i in net.conv_indices:
            for kind, arr in (("weight", net.weights[i]), ("bias", net.biases[i])):
                arrays.append({"tower": name, "layer": i, "name": kind, "shape": list(arr.shape)})
                payload.append(np.ascontiguousarray(arr, dtype=dtype).tobytes())
    header = {
        "towers": {name: net.describe() for name, net in model.towers().items()},
        "arrays": arrays,
        "prng": PRNG_ID,
        "precision": precision,
        "meta": model.meta,
    }
    hbytes = json.dumps(header, sort_keys=True).encode("utf-8")
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<HI", CHECKPOINT_VERSION, len(hbytes)))
        fh.write(hbytes)
        for chunk in payload:
            fh.write(chunk)


def load_checkpoint(path):
    with open(path, "rb") as fh:
        data = fh.read()
    if data[:4] != CHECKPOINT_MAGIC:
        raise FormatError(f"{path}: bad checkpoint magic {data[:4]!r}")
    if len(data) < 10:
        raise FormatError(f"{path}: truncated checkpoint header")
    version, hlen = struct.unpack_from("<HI", data, 4)
    if version != CHECKPOINT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    if len(data) < 10 + hlen:
        raise FormatError(f"{path}: truncated checkpoint header")
    try:
        header = json.loads(data[10:10 + hlen].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: unreadable checkpoint header ({exc})") from None
    dtype = np.dtype("<f4") if header["precision"] == "f32" else np.dtype("<f8")
    nets = {}
    for name, desc in header["towers"].items():
        layers = [LayerSpec.from_dict(d) for d in desc["layers"]]
        nets[name] = EmbeddingNet(layers, trainable=desc["trainable"])
    off = 10 + hlen
    for a in header["arrays"]:
        n = int(np.prod(a["shape"], dtype=np.int64))
        end = off + n * dtype.itemsize
        if end > len(data):
            raise FormatError(f"{path}: truncated parameter payload")
        arr = np.frombuffer(data, dtype=dtype, count=n, offset=off).reshape(a["shape"]).astype(np.float64)
        net = nets[a["tower"]]
        if a["name"] == "weight":
            net.weights[a["layer"]] = arr
        else:
            net.biases[a["layer"]] = arr
        off = end
    if off != len(data):
        raise FormatError(f"{path}: {len(data) - off} trailing bytes after parameters")
    return CoupledModel(nets["vis"], nets["pol"], meta=header.get("meta", {}))
