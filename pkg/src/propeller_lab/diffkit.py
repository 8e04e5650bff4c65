"""A small reverse-mode kit: conv U-Net regularizer, VJPs, finite-difference checks, ADAM."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .datamodel import read_arrays, write_arrays


class ParamSet(dict):
    """Named real float64 tensors. Keys are unique by construction (a dict)."""

    def __init__(self, *args, **kw):
        super().__init__(*args, **kw)
        for k, v in self.items():
            v = np.asarray(v, dtype=np.float64)
            if not np.all(np.isfinite(v)):
                raise ValueError(f"parameter {k!r} is not finite")
            dict.__setitem__(self, k, v)

    @property
    def count(self) -> int:
        return int(sum(v.size for v in self.values()))

    def copy(self) -> "ParamSet":
        return ParamSet({k: v.copy() for k, v in self.items()})

    def zeros_like(self) -> "ParamSet":
        return ParamSet({k: np.zeros_like(v) for k, v in self.items()})

    def save(self, path, meta: dict | None = None):
        """Checkpoint as a manifest plus ``f64le`` blobs."""
        write_arrays(path, {k: v.astype(np.float64) for k, v in self.items()}, meta=meta,
                     extra_manifest={"kind": "checkpoint"})

    @classmethod
    def load(cls, path) -> tuple["ParamSet", dict]:
        arrays, manifest = read_arrays(path)
        return cls(arrays), manifest.get("meta", {})


# ---------------------------------------------------------------- primitive ops

def _im2col(x):
    C, H, W = x.shape
    xp = np.pad(x, ((0, 0), (1, 1), (1, 1)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (3, 3), axis=(1, 2))
    return win.transpose(1, 2, 0, 3, 4).reshape(H * W, C * 9)


def conv3x3(x, w, b):
    """Zero-padded 'same' 3x3 convolution (cross-correlation). ``x``: ``(Cin, H, W)``."""
    Cin, H, W = x.shape
    if w.shape[1:] != (Cin, 3, 3) or b.shape != (w.shape[0],):
        raise ValueError(f"conv weight {w.shape} / bias {b.shape} incompatible with input {x.shape}")
    cols = _im2col(x)
    out = cols @ w.reshape(w.shape[0], -1).T + b
    return out.T.reshape(w.shape[0], H, W), cols


def conv3x3_vjp(x_shape, cols, w, g):
    Cin, H, W = x_shape
    Cout = w.shape[0]
    G = g.reshape(Cout, -1)                                      # (Cout, HW)
    dw = (G @ cols).reshape(w.shape)
    db = G.sum(axis=1)
    dcols = (G.T @ w.reshape(Cout, -1)).reshape(H, W, Cin, 3, 3)
    dxp = np.zeros((Cin, H + 2, W + 2))
    for dy in range(3):
        for dx in range(3):
            dxp[:, dy:dy + H, dx:dx + W] += dcols[:, :, :, dy, dx].transpose(2, 0, 1)
    return dxp[:, 1:-1, 1:-1], dw, db


def relu(x):
    return np.maximum(x, 0.0)


def relu_vjp(x, g):
    return g * (x > 0)


def avgpool2(x):
    C, H, W = x.shape
    if H % 2 or W % 2:
        raise ValueError(f"avgpool2 needs even spatial size, got {H}x{W}")
    return x.reshape(C, H // 2, 2, W // 2, 2).mean(axis=(2, 4))


def avgpool2_vjp(g):
    return np.repeat(np.repeat(g, 2, axis=1), 2, axis=2) / 4.0


def upsample2(x):
    return np.repeat(np.repeat(x, 2, axis=1), 2, axis=2)


def upsample2_vjp(g):
    C, H, W = g.shape
    return g.reshape(C, H // 2, 2, W // 2, 2).sum(axis=(2, 4))


# ---------------------------------------------------------------- U-Net

_LAYERS = ("enc1", "enc2", "bot1", "bot2", "dec1", "dec2", "out")


def _layer_shapes(width, channels=2):
    w = width
    return {
        "enc1": (w, channels), "enc2": (w, w),
        "bot1": (2 * w, w), "bot2": (2 * w, 2 * w),
        "dec1": (w, 3 * w), "dec2": (w, w),
        "out": (channels, w),
    }


def init_unet(width: int = 16, seed: int = 0, prefix: str = "cnn.", channels: int = 2) -> ParamSet:
    """He-normal initialization with a zero output layer (network output starts at 0)."""
    rng = np.random.default_rng(seed)
    p = {}
    for name, (cout, cin) in _layer_shapes(width, channels).items():
        if name == "out":
            p[f"{prefix}{name}.w"] = np.zeros((cout, cin, 3, 3))
        else:
            p[f"{prefix}{name}.w"] = rng.standard_normal((cout, cin, 3, 3)) * np.sqrt(2.0 / (9 * cin))
        p[f"{prefix}{name}.b"] = np.zeros(cout)
    return ParamSet(p)


def _unet_forward(params, x, prefix):
    def P(n):
        try:
            return params[f"{prefix}{n}.w"], params[f"{prefix}{n}.b"]
        except KeyError as exc:
            raise ValueError(f"missing parameter {exc.args[0]!r}") from None

    c = {}
    c["x"] = x
    c["z1"], c["k1"] = conv3x3(x, *P("enc1")); a1 = relu(c["z1"])
    c["a1"] = a1
    c["z2"], c["k2"] = conv3x3(a1, *P("enc2")); e2 = relu(c["z2"])
    c["e2"] = e2
    p = avgpool2(e2)
    c["p"] = p
    c["z3"], c["k3"] = conv3x3(p, *P("bot1")); b1 = relu(c["z3"])
    c["b1"] = b1
    c["z4"], c["k4"] = conv3x3(b1, *P("bot2")); b2 = relu(c["z4"])
    cat = np.concatenate([upsample2(b2), e2], axis=0)
    c["cat"] = cat
    c["z5"], c["k5"] = conv3x3(cat, *P("dec1")); d1 = relu(c["z5"])
    c["d1"] = d1
    c["z6"], c["k6"] = conv3x3(d1, *P("dec2")); d2 = relu(c["z6"])
    c["d2"] = d2
    out, c["k7"] = conv3x3(d2, *P("out"))
    return out, c


def _check_input(x):
    x = np.asarray(x)
    if x.ndim != 3 or x.shape[0] != 2:
        raise ValueError(f"expected a (2, H, W) real field, got shape {x.shape}")
    if np.iscomplexobj(x):
        raise ValueError("network input must be real (stack real/imag as channels)")
    return x.astype(np.float64, copy=False)


def cnn_apply(params: ParamSet, image, prefix: str = "cnn.") -> np.ndarray:
    """Two-level U-Net on a ``(2, H, W)`` field (real and imaginary planes).

    Encoder: two conv3x3+ReLU at width ``w``; 2x average pool; bottleneck of
    two conv3x3+ReLU at ``2w``; nearest 2x upsample, concatenation with the
    encoder output, two conv3x3+ReLU at ``w``; final conv3x3 to 2 channels.
    """
    out, _ = _unet_forward(params, _check_input(image), prefix)
    return out


def cnn_vjp(params: ParamSet, image, cotangent, prefix: str = "cnn."):
    """Reverse-mode derivative of :func:`cnn_apply`.

    Returns
    -------
    grad_params : ParamSet
        Gradients for the parameters under ``prefix`` only.
    grad_image : ndarray
    """
    x = _check_input(image)
    out, c = _unet_forward(params, x, prefix)
    g = np.asarray(cotangent, dtype=np.float64)
    if g.shape != out.shape:
        raise ValueError(f"cotangent shape {g.shape} != output shape {out.shape}")
    w = lambda n: params[f"{prefix}{n}.w"]  # noqa: E731
    grads = {}

    def back(name, inp_shape, cols, g):
        dx, dw, db = conv3x3_vjp(inp_shape, cols, w(name), g)
        grads[f"{prefix}{name}.w"], grads[f"{prefix}{name}.b"] = dw, db
        return dx

    g = back("out", c["d2"].shape, c["k7"], g)
    g = back("dec2", c["d1"].shape, c["k6"], relu_vjp(c["z6"], g))
    g = back("dec1", c["cat"].shape, c["k5"], relu_vjp(c["z5"], g))
    nb = c["b1"].shape[0]
    g_up, g_skip = g[:nb], g[nb:]
    g = upsample2_vjp(g_up)
    g = back("bot2", c["b1"].shape, c["k4"], relu_vjp(c["z4"], g))
    g = back("bot1", c["p"].shape, c["k3"], relu_vjp(c["z3"], g))
    g = avgpool2_vjp(g) + g_skip
    g = back("enc2", c["a1"].shape, c["k2"], relu_vjp(c["z2"], g))
    g = back("enc1", x.shape, c["k1"], relu_vjp(c["z1"], g))
    return ParamSet(grads), g


def complex_to_channels(z) -> np.ndarray:
    z = np.asarray(z)
    return np.stack([z.real, z.imag])


def channels_to_complex(x) -> np.ndarray:
    return x[0] + 1j * x[1]


# ---------------------------------------------------------------- gradient check

def _inner(a, b):
    return float(np.real(np.vdot(a, b)))


def gradcheck(fun, vjp, point: dict, epsilon: float = 1e-6, directions: int = 2,
              seed: int = 0, atol: float = 1e-12) -> float:
    """Maximum relative mismatch between a VJP and central differences.

    ``fun(point) -> ndarray`` and ``vjp(point, cotangent) -> dict`` share the
    same keys as ``point``. For every key, random directions ``d`` are
    compared through ``<ct, (f(p+eps d) - f(p-eps d)) / (2 eps)>`` against
    ``Re <vjp(p, ct)[key], d>``. Complex entries get complex directions.
    """
    rng = np.random.default_rng(seed)
    f0 = np.asarray(fun(point))
    ct = rng.standard_normal(f0.shape)
    if np.iscomplexobj(f0):
        ct = ct + 1j * rng.standard_normal(f0.shape)
    grads = vjp(point, ct)
    worst = 0.0
    for key, val in point.items():
        val = np.asarray(val)
        for _ in range(directions):
            d = rng.standard_normal(val.shape)
            if np.iscomplexobj(val):
                d = d + 1j * rng.standard_normal(val.shape)
            plus = dict(point); plus[key] = val + epsilon * d
            minus = dict(point); minus[key] = val - epsilon * d
            fd = _inner(ct, np.asarray(fun(plus)) - np.asarray(fun(minus))) / (2 * epsilon)
            an = _inner(grads[key], d)
            denom = max(abs(fd), abs(an), atol)
            worst = max(worst, abs(fd - an) / denom)
    return worst


# ---------------------------------------------------------------- ADAM

@dataclass
class AdamState:
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)
    step: int = 0

    @classmethod
    def zeros(cls, params: ParamSet) -> "AdamState":
        return cls({k: np.zeros_like(v) for k, v in params.items()},
                   {k: np.zeros_like(v) for k, v in params.items()}, 0)


def adam_step(params: ParamSet, grads: dict, state: AdamState, lr: float,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8):
    """One bias-corrected ADAM update. Returns ``(params, state)`` as new objects."""
    for k, g in grads.items():
        if k not in params:
            raise ValueError(f"gradient for unknown parameter {k!r}")
        if np.shape(g) != params[k].shape:
            raise ValueError(f"gradient shape mismatch for {k!r}")
        if not np.all(np.isfinite(g)):
            raise FloatingPointError(f"non-finite gradient for {k!r} at step {state.step + 1}")
    t = state.step + 1
    new_p, m, v = {}, {}, {}
    for k, p in params.items():
        g = np.asarray(grads.get(k, np.zeros_like(p)), dtype=np.float64)
        m[k] = beta1 * state.m[k] + (1 - beta1) * g
        v[k] = beta2 * state.v[k] + (1 - beta2) * g * g
        mh = m[k] / (1 - beta1 ** t)
        vh = v[k] / (1 - beta2 ** t)
        new_p[k] = p - lr * mh / (np.sqrt(vh) + eps)
    return ParamSet(new_p), AdamState(m, v, t)


# ---------------------------------------------------------------- registry

def _reg_conv(rng):
    point = {"x": rng.standard_normal((3, 6, 6)), "w": rng.standard_normal((4, 3, 3, 3)),
             "b": rng.standard_normal(4)}

    def fun(p):
        return conv3x3(p["x"], p["w"], p["b"])[0]

    def vjp(p, g):
        dx, dw, db = conv3x3_vjp(p["x"].shape, _im2col(p["x"]), p["w"], g)
        return {"x": dx, "w": dw, "b": db}
    return fun, vjp, point


def _reg_relu(rng):
    x = rng.standard_normal((2, 5, 5))
    x = np.where(np.abs(x) < 0.05, 0.5, x)       # stay away from the kink
    return (lambda p: relu(p["x"])), (lambda p, g: {"x": relu_vjp(p["x"], g)}), {"x": x}


def _reg_pool(rng):
    return ((lambda p: avgpool2(p["x"])), (lambda p, g: {"x": avgpool2_vjp(g)}),
            {"x": rng.standard_normal((2, 6, 8))})


def _reg_up(rng):
    return ((lambda p: upsample2(p["x"])), (lambda p, g: {"x": upsample2_vjp(g)}),
            {"x": rng.standard_normal((2, 3, 4))})


def _reg_cnn(rng, size=8, width=4):
    params = init_unet(width, seed=int(rng.integers(1 << 31)))
    # a non-zero output layer so the whole chain is exercised
    params["cnn.out.w"] = rng.standard_normal(params["cnn.out.w"].shape) * 0.3
    point = dict(params)
    point["image"] = rng.standard_normal((2, size, size))

    def fun(p):
        return cnn_apply(ParamSet({k: v for k, v in p.items() if k != "image"}), p["image"])

    def vjp(p, g):
        gp, gx = cnn_vjp(ParamSet({k: v for k, v in p.items() if k != "image"}), p["image"], g)
        out = dict(gp)
        out["image"] = gx
        return out
    return fun, vjp, point


REGISTRY = {
    "conv3x3": _reg_conv,
    "relu": _reg_relu,
    "avgpool2": _reg_pool,
    "upsample2": _reg_up,
    "cnn": _reg_cnn,
}


def check_registered(seed: int = 0, epsilon: float = 1e-6) -> dict:
    """Run :func:`gradcheck` on every registered op; returns ``{name: max rel err}``."""
    out = {}
    for name, make in REGISTRY.items():
        fun, vjp, point = make(np.random.default_rng(seed))
        out[name] = gradcheck(fun, vjp, point, epsilon, seed=seed)
    return out
