"""ConvLSTM cells, stacked networks and the density head.

Parameters live in a flat ``{name: array}`` dict so the optimiser, the tape
and the checkpoint writer can all treat them uniformly. Names look like
``"l0.fwd.W_xi"``; the head is ``"head.W"`` / ``"head.b"``.

All forward functions work on plain arrays or on :class:`~crowdcount.grad.Var`
handles (pass ``tape.watch(params)`` to record a differentiable forward).
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, field
from typing import Mapping, NamedTuple, Sequence

import numpy as np

from . import grad as G
from .errors import ConfigError
from .tensor import ShapeError

GATES = ("i", "f", "c", "o")
DIRECTIONS = ("unidirectional", "bidirectional", "no-temporal")


@dataclass
class NetworkConfig:
    layer_channels: list[int] = field(default_factory=lambda: [128, 64, 64, 64])
    kernel: int = 5
    direction: str = "unidirectional"
    in_channels: int = 1
    height: int = 72
    width: int = 72
    # the head regresses output_scale * density; forward() divides it back out
    output_scale: float = 1.0

    def __post_init__(self):
        self.layer_channels = [int(c) for c in self.layer_channels]
        if not self.layer_channels or min(self.layer_channels) < 1:
            raise ConfigError(f"layer_channels must be a non-empty list of positive ints, got {self.layer_channels}")
        if self.direction not in DIRECTIONS:
            raise ConfigError(f"direction must be one of {DIRECTIONS}, got {self.direction!r}")
        if self.kernel < 1 or self.kernel % 2 == 0:
            raise ConfigError(f"kernel must be odd, got {self.kernel}")
        if self.in_channels < 1 or self.height < 1 or self.width < 1:
            raise ConfigError("in_channels, height and width must be positive")
        self.output_scale = float(self.output_scale)
        if not self.output_scale > 0:
            raise ConfigError(f"output_scale must be positive, got {self.output_scale}")

    @property
    def bidirectional(self) -> bool:
        return self.direction == "bidirectional"

    @property
    def streams(self) -> tuple[str, ...]:
        return ("fwd", "bwd") if self.bidirectional else ("fwd",)

    @property
    def head_channels(self) -> int:
        return self.layer_channels[-1] * len(self.streams)

    def layer_inputs(self, layer: int) -> int:
        if layer == 0:
            return self.in_channels
        return self.layer_channels[layer - 1] * len(self.streams)

    def to_dict(self) -> dict:
        return asdict(self)


class ConvLSTMParams(NamedTuple):
    W_xi: object
    W_xf: object
    W_xc: object
    W_xo: object
    W_hi: object
    W_hf: object
    W_hc: object
    W_ho: object
    W_ci: object
    W_cf: object
    W_co: object
    b_i: object
    b_f: object
    b_c: object
    b_o: object

    @classmethod
    def from_dict(cls, params: Mapping, prefix: str) -> "ConvLSTMParams":
        return cls(*(params[f"{prefix}.{name}"] for name in cls._fields))


class ConvLSTMState(NamedTuple):
    H: object
    C: object


def zero_state(channels: int, height: int, width: int, dtype=np.float32) -> ConvLSTMState:
    z = np.zeros((channels, height, width), dtype=dtype)
    return ConvLSTMState(z, z)


class _Stacked(NamedTuple):
    Wx: object
    Wh: object
    b: object
    p: ConvLSTMParams


def _stack(p: ConvLSTMParams) -> _Stacked:
    """Fuse the four gate kernels so each step needs two convolutions."""
    return _Stacked(
        G.concat_channels([p.W_xi, p.W_xf, p.W_xc, p.W_xo]),
        G.concat_channels([p.W_hi, p.W_hf, p.W_hc, p.W_ho]),
        G.concat_channels([p.b_i, p.b_f, p.b_c, p.b_o]),
        p,
    )


def _step(x, prev: ConvLSTMState, s: _Stacked, with_gates: bool = False):
    ch = G.value(s.p.b_i).shape[0]
    z = G.add(G.conv2d(x, s.Wx, s.b), G.conv2d(prev.H, s.Wh))
    zi, zf, zc, zo = (G.slice_channels(z, k * ch, (k + 1) * ch) for k in range(4))
    i = G.sigmoid(G.add(zi, G.hadamard(s.p.W_ci, prev.C)))
    f = G.sigmoid(G.add(zf, G.hadamard(s.p.W_cf, prev.C)))
    C = G.add(G.hadamard(f, prev.C), G.hadamard(i, G.tanh(zc)))
    # output gate peeks at the updated cell state
    o = G.sigmoid(G.add(zo, G.hadamard(s.p.W_co, C)))
    H = G.hadamard(o, G.tanh(C))
    if with_gates:
        return ConvLSTMState(H, C), {"i": i, "f": f, "o": o}
    return ConvLSTMState(H, C)


def cell_step(x, prev: ConvLSTMState, p: ConvLSTMParams, return_gates: bool = False):
    """One ConvLSTM update with peephole connections.

    With ``return_gates`` the result is ``(state, {"i": .., "f": .., "o": ..})``.
    """
    ch = G.value(p.b_i).shape[0]
    xv = G.value(x)
    if xv.ndim != 3 or xv.shape[0] != G.value(p.W_xi).shape[1]:
        raise ShapeError(f"cell_step: input {xv.shape} incompatible with W_xi {G.value(p.W_xi).shape}")
    expected = (ch,) + xv.shape[1:]
    for name, t in (("H", prev.H), ("C", prev.C), ("W_ci", p.W_ci)):
        if G.value(t).shape != expected:
            raise ShapeError(f"cell_step: {name} has shape {G.value(t).shape}, expected {expected}")
    return _step(x, prev, _stack(p), with_gates=return_gates)


def _check_clip(clip: Sequence) -> tuple:
    if len(clip) == 0:
        raise ShapeError("empty clip")
    shape = G.value(clip[0]).shape
    for t, frame in enumerate(clip):
        if G.value(frame).shape != shape:
            raise ShapeError(f"frame {t} has shape {G.value(frame).shape}, expected {shape}")
    if len(shape) != 3:
        raise ShapeError(f"frames must be [C,H,W], got {shape}")
    return shape


def _run_layer(inputs: Sequence, s: _Stacked, reverse: bool = False, reset: bool = False) -> list:
    ch = G.value(s.p.b_i).shape[0]
    _, h, w = G.value(inputs[0]).shape
    dtype = G.value(s.p.b_i).dtype
    order = range(len(inputs) - 1, -1, -1) if reverse else range(len(inputs))
    outputs = [None] * len(inputs)
    state = zero_state(ch, h, w, dtype)
    for t in order:
        if reset:
            state = zero_state(ch, h, w, dtype)
        state = _step(inputs[t], state, s)
        outputs[t] = state.H
    return outputs


def head(features, params: Mapping, output_scale: float = 1.0):
    """1x1 convolution to a single linear (unclamped) density channel."""
    out = G.conv2d(features, params["head.W"], params["head.b"])
    return out if output_scale == 1.0 else G.scale(out, 1.0 / output_scale)


def _features(clip, params, config: NetworkConfig, reset: bool) -> list:
    seq = list(clip)
    for layer in range(len(config.layer_channels)):
        s = _stack(ConvLSTMParams.from_dict(params, f"l{layer}.fwd"))
        seq = _run_layer(seq, s, reset=reset)
    return seq


def forward_sequence(clip: Sequence, params: Mapping, config: NetworkConfig):
    """Unidirectional stacked ConvLSTM; returns ``(top hidden states, density maps)``."""
    _check_clip(clip)
    feats = _features(clip, params, config, reset=False)
    return feats, [head(f, params, config.output_scale) for f in feats]


def forward_nt(clip: Sequence, params: Mapping, config: NetworkConfig):
    """Same cells with every recurrent connection cut: each frame starts from zero state."""
    _check_clip(clip)
    feats = _features(clip, params, config, reset=True)
    return feats, [head(f, params, config.output_scale) for f in feats]


def bidirectional_features(clip: Sequence, params: Mapping, config: NetworkConfig) -> list:
    seq = list(clip)
    for layer in range(len(config.layer_channels)):
        fwd = _run_layer(seq, _stack(ConvLSTMParams.from_dict(params, f"l{layer}.fwd")))
        bwd = _run_layer(seq, _stack(ConvLSTMParams.from_dict(params, f"l{layer}.bwd")), reverse=True)
        seq = [G.concat_channels([a, b]) for a, b in zip(fwd, bwd)]
    return seq


def forward_bidirectional(clip: Sequence, params: Mapping, config: NetworkConfig):
    """Each layer runs forward and backward in time and concatenates both hidden states."""
    _check_clip(clip)
    feats = bidirectional_features(clip, params, config)
    return feats, [head(f, params, config.output_scale) for f in feats]


def forward(clip: Sequence, params: Mapping, config: NetworkConfig) -> list:
    """Density predictions ``[1,H,W]`` per frame for the configured direction."""
    fn = {
        "unidirectional": forward_sequence,
        "bidirectional": forward_bidirectional,
        "no-temporal": forward_nt,
    }[config.direction]
    return fn(clip, params, config)[1]


# ---------------------------------------------------------------- parameters


def param_shapes(config: NetworkConfig) -> dict[str, tuple]:
    k, h, w = config.kernel, config.height, config.width
    shapes = {}
    for layer, ch in enumerate(config.layer_channels):
        cin = config.layer_inputs(layer)
        for d in config.streams:
            pre = f"l{layer}.{d}"
            for g in GATES:
                shapes[f"{pre}.W_x{g}"] = (ch, cin, k, k)
            for g in GATES:
                shapes[f"{pre}.W_h{g}"] = (ch, ch, k, k)
            for g in ("i", "f", "o"):
                shapes[f"{pre}.W_c{g}"] = (ch, h, w)
            for g in GATES:
                shapes[f"{pre}.b_{g}"] = (ch,)
    shapes["head.W"] = (1, config.head_channels, 1, 1)
    shapes["head.b"] = (1,)
    return shapes


def init_params(config: NetworkConfig, seed: int = 0, dtype=np.float32) -> dict[str, np.ndarray]:
    """Glorot-uniform kernels, zero peepholes, zero biases except forget-gate bias 1."""
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if len(shape) == 4:
            cout, cin, kh, kw = shape
            bound = np.sqrt(6.0 / (cin * kh * kw + cout * kh * kw))
            params[name] = rng.uniform(-bound, bound, size=shape).astype(dtype)
        elif leaf == "b_f":
            params[name] = np.ones(shape, dtype=dtype)
        else:
            params[name] = np.zeros(shape, dtype=dtype)
    return params


def check_params(params: Mapping[str, np.ndarray], config: NetworkConfig) -> None:
    shapes = param_shapes(config)
    missing = sorted(set(shapes) - set(params))
    if missing:
        raise ConfigError(f"parameters missing for this network: {missing[:4]}")
    for name, shape in shapes.items():
        if tuple(params[name].shape) != shape:
            raise ShapeError(f"parameter {name} has shape {params[name].shape}, expected {shape}")


def resize_peepholes(params: Mapping[str, np.ndarray], height: int, width: int) -> dict[str, np.ndarray]:
    """Centre-crop or zero-pad every per-position peephole tensor to ``height x width``."""
    out = dict(params)
    for name, p in params.items():
        if not name.rsplit(".", 1)[-1] in ("W_ci", "W_cf", "W_co"):
            continue
        ch, h, w = p.shape
        new = np.zeros((ch, height, width), dtype=p.dtype)
        sh, sw = min(h, height), min(w, width)
        src_y, src_x = (h - sh) // 2, (w - sw) // 2
        dst_y, dst_x = (height - sh) // 2, (width - sw) // 2
        new[:, dst_y:dst_y + sh, dst_x:dst_x + sw] = p[:, src_y:src_y + sh, src_x:src_x + sw]
        out[name] = new
    return out
