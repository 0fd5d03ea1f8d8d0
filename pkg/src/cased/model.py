"""A small fully convolutional 3-D voxel classifier with explicit weights.

Two architectures, both valid-convolution only so outputs shrink by a fixed
context margin:

  flat:  L valid 3^3 conv+activation layers, then a 1^3 conv + sigmoid head.
         context_margin = 2L.
  unet1: two 3^3 convs, 2x max (or average) pool, two 3^3 convs, 2x transposed
         conv (kernel 2, stride 2), center-cropped skip concatenation, two 3^3
         convs, then the sigmoid head. context_margin = 16; interior sizes
         force even input minus 4, so the output stride must be even.

Forward, backward, loss, and the optimizer are all explicit ndarray code.
Convolutions run as im2col + matmul; gradients come from the transpose view of
the same expansion, so every layer is finite-difference checkable.
"""

from __future__ import annotations

import hashlib
import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view
from scipy.special import expit

from .errors import FileFormatError, NonFiniteGradientError, StaleCacheError
from .patching import PatchGeometry

ACTIVATIONS = ("tanh", "relu")
POOLS = ("max", "avg")


@dataclass(frozen=True)
class FcnConfig:
    """Architecture description. channels lists hidden widths (flat: one per
    layer; unet1: (encoder, bottleneck))."""

    kind: str = "flat"
    channels: tuple[int, ...] = (8, 8, 8, 8)
    activation: str = "tanh"
    pool: str = "max"

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        if self.kind not in ("flat", "unet1"):
            raise ValueError(f"unknown architecture kind {self.kind!r}")
        if self.activation not in ACTIVATIONS:
            raise ValueError(f"unknown activation {self.activation!r}")
        if self.pool not in POOLS:
            raise ValueError(f"unknown pool {self.pool!r}")
        if any(c < 1 for c in self.channels):
            raise ValueError(f"channel counts must be >= 1, got {self.channels}")
        if self.kind == "flat" and len(self.channels) < 1:
            raise ValueError("flat architecture needs at least one conv layer")
        if self.kind == "unet1" and len(self.channels) != 2:
            raise ValueError("unet1 takes exactly two channel counts (encoder, bottleneck)")

    @property
    def context_margin(self) -> int:
        if self.kind == "flat":
            return 2 * len(self.channels)
        # two encoder convs + two bottleneck convs at half resolution + two decoder convs
        return 4 + 2 * 4 + 4

    def geometry(self, output_stride: int = 8) -> PatchGeometry:
        if self.kind == "unet1" and output_stride % 2 != 0:
            raise ValueError("unet1 needs an even output_stride (2x pooling parity)")
        return PatchGeometry(output_stride, self.context_margin)


def require_geometry_match(cfg: FcnConfig, geom: PatchGeometry) -> None:
    if geom.context_margin != cfg.context_margin:
        raise ValueError(
            f"patch context_margin {geom.context_margin} does not match the "
            f"architecture's margin {cfg.context_margin}"
        )


def layout_for_config(cfg: FcnConfig) -> list[tuple[str, tuple[int, ...]]]:
    """Deterministic (name, shape) list defining the flat parameter vector."""
    entries: list[tuple[str, tuple[int, ...]]] = []

    def conv(name, co, ci, k):
        entries.append((f"{name}.w", (co, ci, k, k, k)))
        entries.append((f"{name}.b", (co,)))

    if cfg.kind == "flat":
        prev = 1
        for i, c in enumerate(cfg.channels):
            conv(f"conv{i}", c, prev, 3)
            prev = c
        conv("head", 1, prev, 1)
    else:
        ce, cb = cfg.channels
        conv("enc0", ce, 1, 3)
        conv("enc1", ce, ce, 3)
        conv("bot0", cb, ce, 3)
        conv("bot1", cb, cb, 3)
        conv("up", ce, cb, 2)
        conv("dec0", ce, 2 * ce, 3)
        conv("dec1", ce, ce, 3)
        conv("head", 1, ce, 1)
    return entries


def layout_hash(layout: list[tuple[str, tuple[int, ...]]]) -> str:
    doc = json.dumps([[name, list(shape)] for name, shape in layout])
    return hashlib.sha256(doc.encode()).hexdigest()


@dataclass
class Weights:
    """Flat parameter and momentum vectors plus the layout that names slices of them."""

    data: np.ndarray
    momentum: np.ndarray
    layout: list[tuple[str, tuple[int, ...]]]
    steps: int = 0
    _offsets: dict = field(default_factory=dict, repr=False)

    def __post_init__(self):
        if not self._offsets:
            off = 0
            for name, shape in self.layout:
                size = int(np.prod(shape))
                self._offsets[name] = (off, shape)
                off += size
            if off != self.data.size or off != self.momentum.size:
                raise ValueError(f"layout implies {off} parameters, arrays hold {self.data.size}")

    def view(self, name: str) -> np.ndarray:
        off, shape = self._offsets[name]
        return self.data[off : off + int(np.prod(shape))].reshape(shape)

    def grad_view(self, flat: np.ndarray, name: str) -> np.ndarray:
        off, shape = self._offsets[name]
        return flat[off : off + int(np.prod(shape))].reshape(shape)

    @property
    def n_params(self) -> int:
        return int(self.data.size)

    @property
    def dtype(self):
        return self.data.dtype


def initialize_weights(cfg: FcnConfig, seed, dtype=np.float32) -> Weights:
    """Glorot-uniform conv weights (limit sqrt(6/(fan_in+fan_out))), zero biases."""
    rng = np.random.default_rng(seed)
    layout = layout_for_config(cfg)
    parts = []
    for name, shape in layout:
        if name.endswith(".b"):
            parts.append(np.zeros(int(np.prod(shape))))
            continue
        co, ci = shape[0], shape[1]
        k3 = int(np.prod(shape[2:]))
        limit = np.sqrt(6.0 / (ci * k3 + co * k3))
        parts.append(rng.uniform(-limit, limit, int(np.prod(shape))))
    data = np.concatenate(parts).astype(dtype)
    return Weights(data=data, momentum=np.zeros_like(data), layout=layout)


def snapshot(weights: Weights) -> Weights:
    """Immutable copy for prediction/mining; unaffected by later training steps."""
    data = weights.data.copy()
    mom = weights.momentum.copy()
    data.flags.writeable = False
    mom.flags.writeable = False
    return Weights(data=data, momentum=mom, layout=list(weights.layout), steps=weights.steps)


# ---------------------------------------------------------------------------
# Layer primitives. Tensors are (B, C, X, Y, Z).


def _conv3d_forward(x, w, b):
    co, ci, k = w.shape[0], w.shape[1], w.shape[2]
    if x.shape[1] != ci:
        raise ValueError(f"conv expects {ci} input channels, got {x.shape[1]}")
    if min(x.shape[2:]) < k:
        raise ValueError(f"input spatial dims {x.shape[2:]} smaller than kernel {k}")
    bsz = x.shape[0]
    ox, oy, oz = (x.shape[2] - k + 1, x.shape[3] - k + 1, x.shape[4] - k + 1)
    win = sliding_window_view(x, (k, k, k), axis=(2, 3, 4))
    col = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(
        bsz * ox * oy * oz, ci * k**3
    )
    out = col @ w.reshape(co, -1).T + b
    y = out.reshape(bsz, ox, oy, oz, co).transpose(0, 4, 1, 2, 3)
    return y, (x.shape, col)


def _conv3d_backward(cache, w, gy, need_gx: bool = True):
    x_shape, col = cache
    co, ci, k = w.shape[0], w.shape[1], w.shape[2]
    bsz = gy.shape[0]
    gmat = np.ascontiguousarray(gy.transpose(0, 2, 3, 4, 1)).reshape(-1, co)
    gw = (gmat.T @ col).reshape(w.shape)
    gb = gmat.sum(axis=0)
    if not need_gx:
        return None, gw, gb
    pad = k - 1
    gy_pad = np.pad(gy, ((0, 0), (0, 0), (pad, pad), (pad, pad), (pad, pad)))
    win = sliding_window_view(gy_pad, (k, k, k), axis=(2, 3, 4))
    col2 = np.ascontiguousarray(win.transpose(0, 2, 3, 4, 1, 5, 6, 7)).reshape(
        bsz * x_shape[2] * x_shape[3] * x_shape[4], co * k**3
    )
    wflip = w[:, :, ::-1, ::-1, ::-1]
    wmat = np.ascontiguousarray(wflip.transpose(1, 0, 2, 3, 4)).reshape(ci, -1)
    gx = (col2 @ wmat.T).reshape(bsz, x_shape[2], x_shape[3], x_shape[4], ci).transpose(
        0, 4, 1, 2, 3
    )
    return gx, gw, gb


def _act_forward(x, kind):
    if kind == "tanh":
        y = np.tanh(x)
        return y, y
    y = np.maximum(x, 0)
    return y, (x > 0)


def _act_backward(cache, kind, gy):
    if kind == "tanh":
        return gy * (1.0 - cache * cache)
    return gy * cache


def _sigmoid_forward(x):
    y = expit(x)
    return y, y


def _sigmoid_backward(cache, gy):
    return gy * cache * (1.0 - cache)


def _pool2_forward(x, kind):
    bsz, c, nx, ny, nz = x.shape
    if nx % 2 or ny % 2 or nz % 2:
        raise ValueError(f"2x pooling needs even spatial dims, got {x.shape[2:]}")
    xr = x.reshape(bsz, c, nx // 2, 2, ny // 2, 2, nz // 2, 2)
    xw = np.ascontiguousarray(xr.transpose(0, 1, 2, 4, 6, 3, 5, 7)).reshape(
        bsz, c, nx // 2, ny // 2, nz // 2, 8
    )
    if kind == "max":
        idx = xw.argmax(axis=-1)
        y = np.take_along_axis(xw, idx[..., None], axis=-1)[..., 0]
        return y, (x.shape, idx)
    return xw.mean(axis=-1), (x.shape, None)


def _pool2_backward(cache, kind, gy):
    x_shape, idx = cache
    bsz, c, nx, ny, nz = x_shape
    gw = np.zeros((bsz, c, nx // 2, ny // 2, nz // 2, 8), dtype=gy.dtype)
    if kind == "max":
        np.put_along_axis(gw, idx[..., None], gy[..., None], axis=-1)
    else:
        gw[:] = (gy / 8.0)[..., None]
    gx = gw.reshape(bsz, c, nx // 2, ny // 2, nz // 2, 2, 2, 2).transpose(
        0, 1, 2, 5, 3, 6, 4, 7
    )
    return np.ascontiguousarray(gx).reshape(x_shape)


def _upconv2_forward(x, w, b):
    # transposed conv, kernel 2, stride 2: exact non-overlapping scatter
    if x.shape[1] != w.shape[1]:
        raise ValueError(f"up-conv expects {w.shape[1]} input channels, got {x.shape[1]}")
    t = np.einsum("nixyz,oipqr->noxpyqzr", x, w)
    bsz, co = x.shape[0], w.shape[0]
    nx, ny, nz = x.shape[2:]
    y = t.reshape(bsz, co, 2 * nx, 2 * ny, 2 * nz) + b[None, :, None, None, None]
    return y, x


def _upconv2_backward(cache, w, gy):
    x = cache
    bsz, co = gy.shape[0], gy.shape[1]
    nx, ny, nz = x.shape[2:]
    gyr = gy.reshape(bsz, co, nx, 2, ny, 2, nz, 2)
    gx = np.einsum("noxpyqzr,oipqr->nixyz", gyr, w)
    gw = np.einsum("nixyz,noxpyqzr->oipqr", x, gyr)
    gb = gy.sum(axis=(0, 2, 3, 4))
    return gx, gw, gb


def _center_crop(x, target_spatial):
    offs = [(s - t) // 2 for s, t in zip(x.shape[2:], target_spatial)]
    if any(o < 0 or (s - t) % 2 for o, s, t in zip(offs, x.shape[2:], target_spatial)):
        raise ValueError(f"cannot center-crop {x.shape[2:]} to {target_spatial}")
    sl = tuple(slice(o, o + t) for o, t in zip(offs, target_spatial))
    return x[(slice(None), slice(None)) + sl], offs


def _crop_backward(g, source_spatial, offs):
    out = np.zeros(g.shape[:2] + tuple(source_spatial), dtype=g.dtype)
    sl = tuple(slice(o, o + t) for o, t in zip(offs, g.shape[2:]))
    out[(slice(None), slice(None)) + sl] = g
    return out


# ---------------------------------------------------------------------------
# Whole-network forward/backward.


@dataclass
class ForwardCache:
    cfg: FcnConfig
    weights: Weights
    steps_at_forward: int
    squeeze: bool
    items: dict


def _check_input(cfg: FcnConfig, x):
    m = cfg.context_margin
    if min(x.shape[2:]) < m + 1:
        raise ValueError(
            f"input spatial dims {x.shape[2:]} too small for context margin {m}"
        )
    if cfg.kind == "unet1" and any((d - 4) % 2 for d in x.shape[2:]):
        raise ValueError(
            f"unet1 needs input dims with (d - 4) even, got {x.shape[2:]}"
        )


def forward(weights: Weights, cfg: FcnConfig, x, need_cache: bool = True):
    """Run the classifier. x is one patch (X, Y, Z) or a batch (B, X, Y, Z).

    Returns (probabilities, cache); output spatial dims shrink by
    cfg.context_margin. Pass need_cache=False for inference to skip saving
    intermediates (cache comes back None).
    """
    xs = np.asarray(x, dtype=weights.dtype)
    squeeze = xs.ndim == 3
    if squeeze:
        xs = xs[None]
    if xs.ndim != 4:
        raise ValueError(f"expected (X,Y,Z) or (B,X,Y,Z) input, got shape {np.shape(x)}")
    xs = xs[:, None]
    _check_input(cfg, xs)
    items: dict = {}

    def conv(name, a):
        y, c = _conv3d_forward(a, weights.view(f"{name}.w"), weights.view(f"{name}.b"))
        if need_cache:
            items[name] = c
        return y

    def act(name, a):
        y, c = _act_forward(a, cfg.activation)
        if need_cache:
            items[name] = c
        return y

    if cfg.kind == "flat":
        a = xs
        for i in range(len(cfg.channels)):
            a = act(f"act{i}", conv(f"conv{i}", a))
        logits = conv("head", a)
    else:
        e = act("enc_a1", conv("enc1", act("enc_a0", conv("enc0", xs))))
        p, pc = _pool2_forward(e, cfg.pool)
        b2 = act("bot_a1", conv("bot1", act("bot_a0", conv("bot0", p))))
        u, uc = _upconv2_forward(b2, weights.view("up.w"), weights.view("up.b"))
        ec, offs = _center_crop(e, u.shape[2:])
        cat = np.concatenate([ec, u], axis=1)
        d = act("dec_a1", conv("dec1", act("dec_a0", conv("dec0", cat))))
        logits = conv("head", d)
        if need_cache:
            items["pool"] = pc
            items["up"] = uc
            items["crop"] = (e.shape[2:], offs, ec.shape[1])
    prob, sc = _sigmoid_forward(logits)
    if need_cache:
        items["sigmoid"] = sc
    y = prob[:, 0]
    if squeeze:
        y = y[0]
    if not need_cache:
        return y, None
    return y, ForwardCache(cfg, weights, weights.steps, squeeze, items)


def backward(cache: ForwardCache, dprob) -> np.ndarray:
    """Parameter gradient for the forward pass that produced cache.

    dprob is the loss gradient with respect to the returned probabilities.
    Raises StaleCacheError if the weights have stepped since the forward pass.
    """
    w = cache.weights
    cfg = cache.cfg
    if w.steps != cache.steps_at_forward:
        raise StaleCacheError(
            f"weights advanced {w.steps - cache.steps_at_forward} step(s) since forward"
        )
    g = np.asarray(dprob, dtype=w.dtype)
    if cache.squeeze:
        g = g[None]
    g = g[:, None]
    grads = np.zeros(w.n_params, dtype=w.dtype)
    items = cache.items

    def conv_back(name, gy, need_gx=True):
        gx, gw, gb = _conv3d_backward(items[name], w.view(f"{name}.w"), gy, need_gx)
        grads_w = w.grad_view(grads, f"{name}.w")
        grads_w += gw
        grads_b = w.grad_view(grads, f"{name}.b")
        grads_b += gb
        return gx

    g = _sigmoid_backward(items["sigmoid"], g)
    if cfg.kind == "flat":
        g = conv_back("head", g)
        for i in reversed(range(len(cfg.channels))):
            g = _act_backward(items[f"act{i}"], cfg.activation, g)
            g = conv_back(f"conv{i}", g, need_gx=i > 0)
        return grads

    g = conv_back("head", g)
    g = _act_backward(items["dec_a1"], cfg.activation, g)
    g = conv_back("dec1", g)
    g = _act_backward(items["dec_a0"], cfg.activation, g)
    g = conv_back("dec0", g)
    e_spatial, offs, c_skip = items["crop"]
    g_skip, g_up = g[:, :c_skip], g[:, c_skip:]
    gx, gw, gb = _upconv2_backward(items["up"], w.view("up.w"), g_up)
    w.grad_view(grads, "up.w")[...] += gw
    w.grad_view(grads, "up.b")[...] += gb
    g = _act_backward(items["bot_a1"], cfg.activation, gx)
    g = conv_back("bot1", g)
    g = _act_backward(items["bot_a0"], cfg.activation, g)
    g = conv_back("bot0", g)
    g_e = _pool2_backward(items["pool"], cfg.pool, g)
    g_e = g_e + _crop_backward(g_skip, e_spatial, offs)
    g = _act_backward(items["enc_a1"], cfg.activation, g_e)
    g = conv_back("enc1", g)
    g = _act_backward(items["enc_a0"], cfg.activation, g)
    conv_back("enc0", g, need_gx=False)
    return grads


def bce_loss(pred, target, eps: float = 1e-7):
    """Mean binary cross-entropy with predictions clamped to [eps, 1-eps].

    Returns (loss, dloss/dpred). The gradient is exactly that of the clamped
    expression: zero where the clamp is active.
    """
    p = np.asarray(pred, dtype=np.float64)
    t = np.asarray(target, dtype=np.float64)
    if p.shape != t.shape:
        raise ValueError(f"pred shape {p.shape} != target shape {t.shape}")
    if t.size and (t.min() < 0 or t.max() > 1):
        raise ValueError("targets must lie in [0, 1]")
    pc = np.clip(p, eps, 1.0 - eps)
    n = p.size
    loss = float(-(t * np.log(pc) + (1.0 - t) * np.log1p(-pc)).mean())
    grad = np.where((p > eps) & (p < 1.0 - eps), (pc - t) / (pc * (1.0 - pc) * n), 0.0)
    return loss, grad


def sgd_nesterov_step(weights: Weights, grad, lr: float, momentum: float) -> Weights:
    """One momentum step: v <- mu*v - lr*grad; w <- w + v, applied in place.

    The stored weights are read as the lookahead point, so the incoming
    gradient plays the Nesterov role of a gradient evaluated at w + mu*v.
    Non-finite gradients reject the step and leave the weights untouched.
    """
    if lr <= 0:
        raise ValueError(f"lr must be positive, got {lr}")
    if not 0.0 <= momentum < 1.0:
        raise ValueError(f"momentum must lie in [0, 1), got {momentum}")
    g = np.asarray(grad, dtype=weights.dtype)
    if g.shape != weights.data.shape:
        raise ValueError(f"gradient shape {g.shape} != parameter shape {weights.data.shape}")
    if not np.isfinite(g).all():
        raise NonFiniteGradientError("gradient contains NaN or Inf; step rejected")
    weights.momentum *= momentum
    weights.momentum -= lr * g
    weights.data += weights.momentum
    weights.steps += 1
    return weights


# ---------------------------------------------------------------------------
# Checkpoints: <stem>.json manifest + <stem>.weights.raw / <stem>.momentum.raw
# little-endian f32 blobs. Loading verifies the layout hash against the config.


def save_checkpoint(stem, weights: Weights, cfg: FcnConfig, hyper: dict, iteration: int) -> Path:
    stem = Path(stem)
    stem.parent.mkdir(parents=True, exist_ok=True)
    layout = layout_for_config(cfg)
    manifest = {
        "config": {
            "kind": cfg.kind,
            "channels": list(cfg.channels),
            "activation": cfg.activation,
            "pool": cfg.pool,
        },
        "hyper": hyper,
        "iteration": int(iteration),
        "layout": [[name, list(shape)] for name, shape in layout],
        "layout_hash": layout_hash(layout),
        "n_params": weights.n_params,
        "dtype": "f32le",
    }
    Path(f"{stem}.json").write_text(json.dumps(manifest, sort_keys=True) + "\n")
    Path(f"{stem}.weights.raw").write_bytes(weights.data.astype("<f4").tobytes())
    Path(f"{stem}.momentum.raw").write_bytes(weights.momentum.astype("<f4").tobytes())
    return stem


def load_checkpoint(stem, dtype=np.float32):
    """Returns (weights, cfg, hyper, iteration). Verifies layout hash and blob sizes."""
    stem = Path(stem)
    try:
        manifest = json.loads(Path(f"{stem}.json").read_text())
    except json.JSONDecodeError as e:
        raise FileFormatError(f"malformed checkpoint manifest {stem}.json: {e}") from e
    try:
        c = manifest["config"]
        cfg = FcnConfig(
            kind=c["kind"],
            channels=tuple(c["channels"]),
            activation=c["activation"],
            pool=c["pool"],
        )
        stored_hash = manifest["layout_hash"]
        iteration = int(manifest["iteration"])
        hyper = manifest.get("hyper", {})
        n_params = int(manifest["n_params"])
    except (KeyError, TypeError) as e:
        raise FileFormatError(f"checkpoint manifest {stem}.json missing fields: {e}") from e
    layout = layout_for_config(cfg)
    if layout_hash(layout) != stored_hash:
        raise FileFormatError(
            f"checkpoint {stem} layout hash does not match its config; refusing to load"
        )
    expected = sum(int(np.prod(shape)) for _, shape in layout)
    if expected != n_params:
        raise FileFormatError(f"checkpoint {stem} claims {n_params} params, layout implies {expected}")
    data = np.frombuffer(Path(f"{stem}.weights.raw").read_bytes(), dtype="<f4")
    mom = np.frombuffer(Path(f"{stem}.momentum.raw").read_bytes(), dtype="<f4")
    if data.size != expected or mom.size != expected:
        raise FileFormatError(
            f"checkpoint {stem} blob sizes ({data.size}, {mom.size}) != {expected} params"
        )
    weights = Weights(
        data=data.astype(dtype), momentum=mom.astype(dtype), layout=layout, steps=iteration
    )
    return weights, cfg, hyper, iteration
