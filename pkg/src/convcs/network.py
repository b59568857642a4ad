"""Two-branch unrolled reconstruction network with a trainable sensing layer.

Branch 1 turns zero-filled measurements into feature maps: an L x L
depthwise back-projection conv followed by ``depth`` 3 x 3 conv layers.
Branch 2 starts from the scaled back-projection ``x0`` and, at each stage,
mixes the previous estimate, ``x0`` and a 3 x 3 projection of a branch-1 tap::

    x_{t+1} = rho_t * x_t + delta_t * x0 + gamma_t * proj_t(alpha_{t+1})
"""

import struct
from collections import OrderedDict
from dataclasses import asdict, dataclass

import numpy as np

from . import autodiff as ad
from . import sensing, solver, tensor

BETA1, BETA2, EPS = 0.9, 0.999, 1e-8

CHECKPOINT_MAGIC = b"CCSN"
CHECKPOINT_VERSION = 1


class ConfigMismatchError(ValueError):
    pass


class CheckpointFormatError(ValueError):
    pass


@dataclass(frozen=True)
class NetConfig:
    m: int
    L: int
    s: int
    stages: int = 14
    depth: int = 14
    width: int = 96
    init_seed: int = 0
    sensing_seed: int = 0
    tap_mode: str = "per_layer"  # or "final": every stage reads the last layer
    fill_offset: str = "center"  # or "corner": zero-fill at window top-left corners

    def __post_init__(self):
        if self.stages < 1 or self.depth < 1 or self.width < 1:
            raise ValueError("stages, depth and width must be positive")
        if self.tap_mode not in ("per_layer", "final"):
            raise ValueError(f"unknown tap mode {self.tap_mode!r}")
        if self.fill_offset not in ("corner", "center"):
            raise ValueError(f"unknown fill offset {self.fill_offset!r}")

    @classmethod
    def from_preset(cls, name, **kw):
        L, m, s = sensing.PRESETS[name]
        return cls(m=m, L=L, s=s, **kw)

    def tap_layers(self):
        """Index of the branch-1 layer read by each stage."""
        if self.tap_mode == "final":
            return [self.depth - 1] * self.stages
        return [((t + 1) * self.depth) // self.stages - 1 for t in range(self.stages)]


def param_shapes(cfg):
    shapes = OrderedDict()
    shapes["sensing"] = (cfg.m, 1, cfg.L, cfg.L)
    shapes["backproj.w"] = (cfg.m, 1, cfg.L, cfg.L)
    shapes["backproj.b"] = (cfg.m,)
    cin = cfg.m
    for i in range(cfg.depth):
        shapes[f"branch.{i}.w"] = (cfg.width, cin, 3, 3)
        shapes[f"branch.{i}.b"] = (cfg.width,)
        cin = cfg.width
    for t in range(cfg.stages):
        shapes[f"proj.{t}.w"] = (1, cfg.width, 3, 3)
        shapes[f"proj.{t}.b"] = (1,)
    shapes["stage_scalars"] = (cfg.stages, 3)
    shapes["x0_scale"] = (1,)
    return shapes


def param_count(cfg):
    return int(sum(np.prod(s) for s in param_shapes(cfg).values()))


def init_params(cfg, bank=None, dtype=np.float32):
    """Fresh parameters: sensing filters from ``bank`` (or its seed), He-normal convs."""
    if bank is None:
        bank = sensing.make_filter_bank(cfg.m, cfg.L, cfg.s, cfg.sensing_seed)
    if (bank.m, bank.L, bank.stride) != (cfg.m, cfg.L, cfg.s):
        raise ConfigMismatchError("filter bank does not match network config")
    rng = np.random.default_rng(cfg.init_seed)
    params = OrderedDict()
    for name, shape in param_shapes(cfg).items():
        if name == "sensing":
            value = bank.kernels
        elif name == "backproj.w":
            value = bank.kernels[:, :, ::-1, ::-1]
        elif name == "stage_scalars":
            value = np.tile(solver.simplified_coefficients(0.1, 1.0), (cfg.stages, 1))
        elif name == "x0_scale":
            # asymptotic mean diagonal of Phi^T Phi
            value = np.array([cfg.s ** 2 / np.sum(bank.filters.astype(np.float64) ** 2)])
        elif name.endswith(".b"):
            value = np.zeros(shape)
        else:
            fan_in = shape[1] * shape[2] * shape[3]
            value = rng.normal(0.0, np.sqrt(2.0 / fan_in), size=shape)
        params[name] = np.ascontiguousarray(value, dtype=dtype)
    return params


def delta_only_params(cfg, bank, x0_scale, dtype=np.float32):
    """Parameters whose output is exactly ``x0`` (rho = gamma = 0, delta = 1)."""
    params = init_params(cfg, bank, dtype=dtype)
    for name in params:
        if name not in ("sensing", "x0_scale"):
            params[name] = np.zeros_like(params[name])
    params["stage_scalars"][:, 1] = 1.0
    params["x0_scale"][0] = x0_scale
    return params


class ConvCSNet:
    """Graph builder for one forward/backward pass at a time.

    ``forward`` records the graph; ``backward`` consumes it and returns
    gradients keyed like ``params``.
    """

    def __init__(self, cfg, params):
        shapes = param_shapes(cfg)
        if list(shapes) != list(params):
            raise ConfigMismatchError("parameter groups do not match config")
        for name, shape in shapes.items():
            if tuple(params[name].shape) != shape:
                raise ConfigMismatchError(f"{name}: shape {params[name].shape}, expected {shape}")
        self.cfg = cfg
        self.params = params
        self._out = None
        self._nodes = None

    @property
    def dtype(self):
        return self.params["sensing"].dtype

    def _param_nodes(self):
        self._nodes = OrderedDict((k, ad.param(v, name=k)) for k, v in self.params.items())
        return self._nodes

    def _graph(self, y_node, shape, nodes):
        cfg = self.cfg
        offset = cfg.L // 2 if cfg.fill_offset == "center" else 0
        z = ad.zero_fill(y_node, shape, cfg.s, offset)
        h = ad.conv(z, nodes["backproj.w"], pads=tensor.same_pads(cfg.L), groups=cfg.m)
        h = ad.relu(ad.bias(h, nodes["backproj.b"]))
        taps = []
        for i in range(cfg.depth):
            h = ad.bias(ad.conv(h, nodes[f"branch.{i}.w"], pads=tensor.same_pads(3)), nodes[f"branch.{i}.b"])
            if i < cfg.depth - 1:
                h = ad.relu(h)
            taps.append(h)
        back = ad.conv_transposed(y_node, nodes["sensing"], cfg.s, shape)
        x0 = ad.scale(back, nodes["x0_scale"], (0,))
        x = x0
        st = nodes["stage_scalars"]
        for t, layer in enumerate(cfg.tap_layers()):
            xh = ad.conv(taps[layer], nodes[f"proj.{t}.w"], pads=tensor.same_pads(3))
            xh = ad.bias(xh, nodes[f"proj.{t}.b"])
            x = ad.add(ad.scale(x, st, (t, 0)), ad.scale(x0, st, (t, 1)), ad.scale(xh, st, (t, 2)))
        self._out = x
        return x.value

    def forward_measurements(self, maps, shape):
        """Reconstruct from measurement maps ``(N, m, gh, gw)`` onto ``shape``."""
        maps = np.asarray(maps, dtype=self.dtype)
        if maps.ndim == 3:
            maps = maps[None]
        if maps.shape[1] != self.cfg.m:
            raise ConfigMismatchError(f"got {maps.shape[1]} measurement maps, network expects {self.cfg.m}")
        return self._graph(ad.constant(maps), tuple(shape), self._param_nodes())

    def forward_images(self, x):
        """Sense images ``(N, 1, H, W)`` with the trainable filters, then reconstruct."""
        x = np.asarray(x, dtype=self.dtype)
        if x.ndim == 3:
            x = x[None]
        nodes = self._param_nodes()
        y = ad.conv(ad.constant(x), nodes["sensing"], stride=self.cfg.s)
        return self._graph(y, x.shape[-2:], nodes)

    def backward(self, loss_grad):
        """Gradients of the loss w.r.t. every parameter group."""
        if self._out is None:
            raise ad.GraphError("backward called before forward")
        ad.backward(self._out, np.asarray(loss_grad, dtype=self._out.value.dtype))
        grads = OrderedDict()
        for name, node in self._nodes.items():
            g = node.grad
            grads[name] = np.zeros_like(self.params[name]) if g is None else g
        self._out = None
        return grads


def forward(y, params, cfg):
    """Reconstruct one :class:`~convcs.sensing.MeasurementSet`; returns ``(1, H, W)``."""
    meta = y.meta
    if (meta.m, meta.L, meta.s) != (cfg.m, cfg.L, cfg.s):
        raise ConfigMismatchError(
            f"measurements (m={meta.m}, L={meta.L}, s={meta.s}) do not match network "
            f"(m={cfg.m}, L={cfg.L}, s={cfg.s})"
        )
    net = ConvCSNet(cfg, params)
    return net.forward_measurements(y.maps, (meta.H, meta.W))[0]


# -- optimiser ---------------------------------------------------------------


@dataclass
class AdamState:
    m: dict
    v: dict
    step: int = 0

    @classmethod
    def zeros_like(cls, params):
        return cls(
            m={k: np.zeros_like(v) for k, v in params.items()},
            v={k: np.zeros_like(v) for k, v in params.items()},
        )


def adam_step(params, grads, state, lr, frozen=()):
    """One ADAM update (beta1=0.9, beta2=0.999, eps=1e-8); returns new params and state."""
    t = state.step + 1
    new_params, new_m, new_v = OrderedDict(), {}, {}
    c1 = 1.0 - BETA1 ** t
    c2 = 1.0 - BETA2 ** t
    for name, p in params.items():
        g = grads[name]
        m = BETA1 * state.m[name] + (1.0 - BETA1) * g
        v = BETA2 * state.v[name] + (1.0 - BETA2) * g * g
        new_m[name], new_v[name] = m, v
        if name in frozen:
            new_params[name] = p
            continue
        update = lr * (m / c1) / (np.sqrt(v / c2) + EPS)
        new_params[name] = (p - update).astype(p.dtype)
    return new_params, AdamState(m=new_m, v=new_v, step=t)


# -- checkpoint file -----------------------------------------------------------

_CFG_INTS = ("m", "L", "s", "stages", "depth", "width")
_TAP = {"per_layer": 0, "final": 1}
_FILL = {"corner": 0, "center": 1}


def checkpoint_bytes(cfg, params):
    out = bytearray(CHECKPOINT_MAGIC)
    out += struct.pack("<H", CHECKPOINT_VERSION)
    out += struct.pack("<6I", *(getattr(cfg, k) for k in _CFG_INTS))
    out += struct.pack("<QQBB", cfg.init_seed, cfg.sensing_seed, _TAP[cfg.tap_mode], _FILL[cfg.fill_offset])
    out += struct.pack("<I", len(params))
    for name, value in params.items():
        raw = name.encode("utf-8")
        out += struct.pack("<H", len(raw)) + raw
        out += struct.pack("<B", value.ndim) + struct.pack(f"<{value.ndim}I", *value.shape)
        out += np.ascontiguousarray(value, dtype="<f4").tobytes()
    return bytes(out)


def parse_checkpoint(data):
    if data[:4] != CHECKPOINT_MAGIC:
        raise CheckpointFormatError("not a checkpoint file (bad magic)")
    pos = 4
    try:
        (version,) = struct.unpack_from("<H", data, pos)
        pos += 2
        if version != CHECKPOINT_VERSION:
            raise CheckpointFormatError(f"unsupported checkpoint version {version}")
        ints = struct.unpack_from("<6I", data, pos)
        pos += 24
        init_seed, sensing_seed, tap, fill = struct.unpack_from("<QQBB", data, pos)
        pos += 18
        fields = dict(zip(_CFG_INTS, ints))
        cfg = NetConfig(
            **fields, init_seed=init_seed, sensing_seed=sensing_seed,
            tap_mode={v: k for k, v in _TAP.items()}[tap],
            fill_offset={v: k for k, v in _FILL.items()}[fill],
        )
        (count,) = struct.unpack_from("<I", data, pos)
        pos += 4
        params = OrderedDict()
        for _ in range(count):
            (n,) = struct.unpack_from("<H", data, pos)
            pos += 2
            name = data[pos:pos + n].decode("utf-8")
            pos += n
            (rank,) = struct.unpack_from("<B", data, pos)
            pos += 1
            shape = struct.unpack_from(f"<{rank}I", data, pos)
            pos += 4 * rank
            size = int(np.prod(shape)) if rank else 1
            arr = np.frombuffer(data, dtype="<f4", count=size, offset=pos).reshape(shape)
            pos += 4 * size
            params[name] = arr.astype(np.float32)
    except (struct.error, ValueError, KeyError) as exc:
        if isinstance(exc, CheckpointFormatError):
            raise
        raise CheckpointFormatError(f"truncated or corrupt checkpoint: {exc}") from exc
    if pos != len(data):
        raise CheckpointFormatError("trailing bytes after checkpoint payload")
    expected = param_shapes(cfg)
    if list(expected) != list(params) or any(expected[k] != params[k].shape for k in params):
        raise CheckpointFormatError("parameter groups inconsistent with stored config")
    return cfg, params


def save_checkpoint(path, cfg, params):
    with open(path, "wb") as fh:
        fh.write(checkpoint_bytes(cfg, params))


def load_checkpoint(path):
    with open(path, "rb") as fh:
        return parse_checkpoint(fh.read())


def describe(cfg):
    return ", ".join(f"{k}={v}" for k, v in asdict(cfg).items())
