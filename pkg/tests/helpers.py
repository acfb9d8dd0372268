"""Shared network fixtures and gradient-check cases for the test suite."""
import numpy as np

from crowdcount import convlstm as M
from crowdcount import grad as G


def small_net(direction="unidirectional", channels=(3, 2), size=6, seed=0):
    cfg = M.NetworkConfig(list(channels), 5, direction, 1, size, size)
    params = M.init_params(cfg, seed, dtype=np.float64)
    rng = np.random.default_rng(seed + 100)
    # non-zero peepholes so every path is exercised
    for k in params:
        if ".W_c" in k:
            params[k] = rng.normal(0, 0.3, params[k].shape)
    return cfg, params


def clip_of(T, size=6, seed=0):
    rng = np.random.default_rng(seed)
    return [rng.random((1, size, size)) for _ in range(T)]


def swap_directions(params, cfg):
    """Exchange forward/backward cells; deeper layers also swap their input-channel halves."""
    out = dict(params)
    for layer in range(len(cfg.layer_channels)):
        for name in M.ConvLSTMParams._fields:
            f, b = params[f"l{layer}.fwd.{name}"], params[f"l{layer}.bwd.{name}"]
            if layer > 0 and name.startswith("W_x"):
                half = f.shape[1] // 2
                f = np.concatenate([f[:, half:], f[:, :half]], axis=1)
                b = np.concatenate([b[:, half:], b[:, :half]], axis=1)
            out[f"l{layer}.fwd.{name}"], out[f"l{layer}.bwd.{name}"] = b, f
    return out


def _weighted(out, weights):
    return G.total(G.hadamard(out, weights))


PRIMITIVES = {
    "conv2d": lambda p, w: _weighted(G.conv2d(p["x"], p["k"], p["b"]), w[0]),
    "hadamard": lambda p, w: _weighted(G.hadamard(p["x"], p["y"]), w[1]),
    "sigmoid": lambda p, w: _weighted(G.sigmoid(p["x"]), w[1]),
    "tanh": lambda p, w: _weighted(G.tanh(p["x"]), w[1]),
    "add": lambda p, w: _weighted(G.add(p["x"], p["y"]), w[1]),
    "sub": lambda p, w: _weighted(G.sub(p["x"], p["y"]), w[1]),
    "scale": lambda p, w: _weighted(G.scale(p["x"], -1.7), w[1]),
    "sum": lambda p, w: G.scale(G.total(G.hadamard(p["x"], p["x"])), 0.5),
    "concat": lambda p, w: _weighted(G.concat_channels([p["x"], p["y"]]), w[2]),
    "slice": lambda p, w: _weighted(G.slice_channels(p["x"], 1, 2), w[3]),
}


def primitive_case(seed):
    rng = np.random.default_rng(seed)
    params = {
        "x": rng.normal(size=(2, 4, 4)),
        "y": rng.normal(size=(2, 4, 4)),
        "k": rng.normal(size=(3, 2, 3, 3)),
        "b": rng.normal(size=3),
    }
    weights = (rng.normal(size=(3, 4, 4)), rng.normal(size=(2, 4, 4)),
               rng.normal(size=(4, 4, 4)), rng.normal(size=(1, 4, 4)))
    return params, weights
