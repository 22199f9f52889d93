"""Convolutional memory layer and a two-layer stack.

Each filter position runs the dense layer with shared weights but keeps its
own inhibition, integrated activity and recurrent input; recurrent input has
a 1x1 field. Predictions are decoded with a transposed convolution. Feedback
from a higher layer is bilinearly resized to the lower layer's positions.
"""

from __future__ import annotations

from ast import literal_eval
from dataclasses import dataclass, fields

import numpy as np

from . import layer
from .kernels import DTYPE, DimensionError, Optimizer, check_finite, outer_sum, sparse_matmul
from .model import pack_optimizer, unpack_optimizer


class GeometryError(ValueError):
    pass


@dataclass
class ConvGeometry:
    field_h: int
    field_w: int
    stride_h: int
    stride_w: int
    in_h: int
    in_w: int
    in_channels: int
    pool: int = 1

    def __post_init__(self):
        for name in ("field_h", "field_w", "stride_h", "stride_w", "in_h", "in_w",
                     "in_channels", "pool"):
            if getattr(self, name) < 1:
                raise GeometryError(f"{name} must be positive")
        if self.field_h > self.in_h or self.field_w > self.in_w:
            raise GeometryError("receptive field larger than input")
        # valid padding that tiles the input exactly, so the decoder covers every pixel
        if (self.in_h - self.field_h) % self.stride_h or (self.in_w - self.field_w) % self.stride_w:
            raise GeometryError(
                f"field {self.field_h}x{self.field_w} / stride {self.stride_h}x{self.stride_w} "
                f"does not tile a {self.in_h}x{self.in_w} input")
        if self.out_h % self.pool or self.out_w % self.pool:
            raise GeometryError(f"pool {self.pool} does not divide {self.out_h}x{self.out_w}")

    @property
    def out_h(self) -> int:
        return (self.in_h - self.field_h) // self.stride_h + 1

    @property
    def out_w(self) -> int:
        return (self.in_w - self.field_w) // self.stride_w + 1

    @property
    def patch_size(self) -> int:
        return self.field_h * self.field_w * self.in_channels

    @property
    def positions(self) -> int:
        return self.out_h * self.out_w


def im2col(x: np.ndarray, geo: ConvGeometry) -> np.ndarray:
    """[b, H, W, C] -> [b, oh, ow, fh*fw*C] patches (row-major within a patch)."""
    if x.shape[1:] != (geo.in_h, geo.in_w, geo.in_channels):
        raise GeometryError(f"input {x.shape[1:]} does not match geometry "
                            f"{(geo.in_h, geo.in_w, geo.in_channels)}")
    win = np.lib.stride_tricks.sliding_window_view(x, (geo.field_h, geo.field_w), axis=(1, 2))
    win = win[:, ::geo.stride_h, ::geo.stride_w]  # [b, oh, ow, C, fh, fw]
    return np.ascontiguousarray(win.transpose(0, 1, 2, 4, 5, 3)).reshape(
        x.shape[0], geo.out_h, geo.out_w, geo.patch_size)


def col2im(cols: np.ndarray, geo: ConvGeometry) -> np.ndarray:
    """Adjoint of im2col: overlapping patch entries are summed."""
    b = cols.shape[0]
    out = np.zeros((b, geo.in_h, geo.in_w, geo.in_channels), dtype=DTYPE)
    p = cols.reshape(b, geo.out_h, geo.out_w, geo.field_h, geo.field_w, geo.in_channels)
    hs = geo.stride_h * (geo.out_h - 1) + 1
    ws = geo.stride_w * (geo.out_w - 1) + 1
    for i in range(geo.field_h):
        for j in range(geo.field_w):
            out[:, i:i + hs:geo.stride_h, j:j + ws:geo.stride_w, :] += p[:, :, :, i, j, :]
    return out


def feedback_interpolate(xB_map: np.ndarray, target: tuple[int, int]) -> np.ndarray:
    """Bilinear resize [b, h2, w2, d] -> [b, h1, w1, d] with corners aligned."""
    h1, w1 = target
    if h1 < 1 or w1 < 1:
        raise DimensionError("target size must be positive")
    _, h2, w2, _ = xB_map.shape
    if (h1, w1) == (h2, w2):
        return xB_map

    def axis_weights(src, dst):
        pos = np.zeros(dst) if dst == 1 else np.arange(dst) * ((src - 1) / (dst - 1))
        lo = np.floor(pos).astype(int)
        lo = np.minimum(lo, src - 1)
        hi = np.minimum(lo + 1, src - 1)
        frac = (pos - lo).astype(DTYPE)
        return lo, hi, frac

    lo, hi, f = axis_weights(h2, h1)
    rows = xB_map[:, lo] * (1 - f)[None, :, None, None] + xB_map[:, hi] * f[None, :, None, None]
    lo, hi, f = axis_weights(w2, w1)
    out = rows[:, :, lo] * (1 - f)[None, None, :, None] + rows[:, :, hi] * f[None, None, :, None]
    return out.astype(DTYPE)


def pool_up(psi_map: np.ndarray, pool: int) -> np.ndarray:
    """Spatial max-pool of a [b, h, w, d] map."""
    b, h, w, d = psi_map.shape
    if pool == 1:
        return psi_map
    if h % pool or w % pool:
        raise GeometryError(f"pool {pool} does not divide {h}x{w}")
    return psi_map.reshape(b, h // pool, pool, w // pool, pool, d).max(axis=(2, 4))


@dataclass
class ConvRsmState:
    phi: np.ndarray  # [b, h, w, g, c]
    psi: np.ndarray
    xR: np.ndarray  # [b, h, w, g*c]

    def flat(self) -> layer.RsmState:
        b, h, w, g, c = self.phi.shape
        n = b * h * w
        return layer.RsmState(self.phi.reshape(n, g, c), self.psi.reshape(n, g, c),
                              self.xR.reshape(n, g * c))

    def copy(self) -> "ConvRsmState":
        return ConvRsmState(self.phi.copy(), self.psi.copy(), self.xR.copy())


def conv_reset_state(config: layer.RsmConfig, geo: ConvGeometry, batch: int) -> ConvRsmState:
    g, c = config.groups, config.cells
    shape = (batch, geo.out_h, geo.out_w)
    return ConvRsmState(np.zeros(shape + (g, c), DTYPE), np.zeros(shape + (g, c), DTYPE),
                        np.zeros(shape + (g * c,), DTYPE))


def conv_forward(params: layer.RsmParams, geo: ConvGeometry, config: layer.RsmConfig,
                 state: ConvRsmState, xF_image: np.ndarray, xB_map: np.ndarray | None = None,
                 rng=None, training: bool = False):
    """One step at every filter position. Returns (trace, next_state).

    ``trace.xHat`` is the decoded raster [b, H, W, C].
    """
    if config.input_size != geo.patch_size:
        raise GeometryError(f"input_size {config.input_size} != patch size {geo.patch_size}")
    b = xF_image.shape[0]
    patches = im2col(xF_image, geo).reshape(b * geo.positions, geo.patch_size)
    xB = None
    if xB_map is not None:
        if xB_map.shape[1:3] != (geo.out_h, geo.out_w):
            raise GeometryError(f"feedback map {xB_map.shape[1:3]} != positions "
                                f"{(geo.out_h, geo.out_w)}")
        xB = xB_map.reshape(b * geo.positions, -1)
    parts, nxt = layer.encode(params, config, state.flat(), patches, xB, rng, training)
    cols = sparse_matmul(parts["yG"], params.wD.T)
    xHat = col2im(cols.reshape(b, geo.out_h, geo.out_w, geo.patch_size), geo)
    check_finite(xHat, "decoded prediction (xHat)")
    trace = layer.RsmTrace(xHat=xHat, **parts)
    g, c = config.groups, config.cells
    shape = (b, geo.out_h, geo.out_w)
    next_state = ConvRsmState(nxt.phi.reshape(shape + (g, c)), nxt.psi.reshape(shape + (g, c)),
                              nxt.xR.reshape(shape + (g * c,)))
    return trace, next_state


def conv_loss_and_grads(trace: layer.RsmTrace, target: np.ndarray, params: layer.RsmParams,
                        geo: ConvGeometry):
    """Raster MSE with gradients for the shared weights."""
    if target.shape != trace.xHat.shape:
        raise DimensionError(f"target {target.shape} != prediction {trace.xHat.shape}")
    err = trace.xHat - target
    loss = float(np.mean(np.square(err, dtype=np.float64)))
    dxHat = (2.0 / err.size) * err.astype(DTYPE)
    dcols = im2col(dxHat, geo).reshape(-1, geo.patch_size)
    grads = layer.encoder_grads(trace, sparse_matmul(dcols, params.wD), params)
    grads["wD"] = outer_sum(dcols, trace.yG)
    return loss, grads


_PENDING = ("xF", "xR_used", "xB", "y", "mG", "mC", "yG", "yG_argmax", "xHat")


class ConvLayer:
    """Parameters, geometry, state and optimizer of one convolutional layer."""

    def __init__(self, config: layer.RsmConfig, geo: ConvGeometry, batch: int, rng,
                 lr: float = 0.0005):
        if config.input_size != geo.patch_size:
            raise GeometryError(f"input_size {config.input_size} != patch size {geo.patch_size}")
        self.config = config
        self.geo = geo
        self.params = layer.init_params(config, rng)
        self.state = conv_reset_state(config, geo, batch)
        self.opt = Optimizer(lr=lr)
        self.prev_trace = None

    def reset(self, batch: int | None = None, rows=None) -> None:
        """Zero the state of all rows, or only of ``rows`` (bool mask)."""
        if rows is None:
            b = batch or self.state.phi.shape[0]
            self.state = conv_reset_state(self.config, self.geo, b)
            self.prev_trace = None
        else:
            for arr in (self.state.phi, self.state.psi, self.state.xR):
                arr[rows] = 0


class ConvStack:
    """Lower layer predicts frames; optional upper layer models the lower code.

    The upper layer's recurrent input is fed back (resized) to the lower
    layer; the lower layer's pooled recurrent input is the upper's input.
    Each layer trains on its own prediction loss only.
    """

    def __init__(self, lower: ConvLayer, upper: ConvLayer | None = None):
        if upper is not None:
            geo = lower.geo
            want = (geo.out_h // geo.pool, geo.out_w // geo.pool, lower.config.size)
            got = (upper.geo.in_h, upper.geo.in_w, upper.geo.in_channels)
            if want != got:
                raise GeometryError(f"upper layer expects input {got}, lower provides {want}")
            if lower.config.feedback_size not in (0, upper.config.size):
                raise GeometryError("lower feedback_size must be 0 or the upper layer size")
        elif lower.config.feedback_size:
            raise GeometryError("lower layer has feedback but no upper layer")
        self.lower = lower
        self.upper = upper

    @property
    def layers(self):
        return [self.lower] if self.upper is None else [self.lower, self.upper]

    def reset(self, batch: int | None = None, rows=None) -> None:
        for lay in self.layers:
            lay.reset(batch, rows)

    def _feedback(self):
        low = self.lower
        if self.upper is None or not low.config.feedback_size:
            return None
        return feedback_interpolate(self.upper.state.xR, (low.geo.out_h, low.geo.out_w))

    def step(self, frame: np.ndarray, next_frame: np.ndarray | None = None, rng=None,
             training: bool = False):
        """Advance one frame. Returns (lower prediction, {layer: loss}).

        With ``training`` each layer takes one Adam step on its own loss:
        the lower against ``next_frame``, the upper against the pooled lower
        code it predicted on the previous step.
        """
        losses = {}
        low = self.lower
        trace, low_next = conv_forward(low.params, low.geo, low.config, low.state, frame,
                                       self._feedback(), rng, training)
        if training:
            losses["lower"], grads = conv_loss_and_grads(trace, next_frame, low.params, low.geo)
            low.opt.step(low.params.named(), grads)
        low.state = low_next
        low.prev_trace = trace
        if self.upper is not None:
            up = self.upper
            pooled = pool_up(low_next.xR, low.geo.pool)
            if training and up.prev_trace is not None:
                losses["upper"], grads = conv_loss_and_grads(up.prev_trace, pooled, up.params, up.geo)
                up.opt.step(up.params.named(), grads)
            up_trace, up.state = conv_forward(up.params, up.geo, up.config, up.state, pooled,
                                              None, rng, training)
            up.prev_trace = up_trace
        return trace.xHat, losses

    def eval_clone(self) -> "ConvStack":
        clones = []
        for lay in self.layers:
            c = ConvLayer.__new__(ConvLayer)
            c.__dict__.update(lay.__dict__)
            c.state = lay.state.copy()
            c.opt = None
            c.prev_trace = None
            clones.append(c)
        return ConvStack(*clones)

    # checkpointing ------------------------------------------------------
    def to_checkpoint(self) -> tuple[dict, dict]:
        config, tensors = {"layers": str(len(self.layers))}, {}
        for i, lay in enumerate(self.layers):
            for k, v in vars(lay.config).items():
                config[f"layer{i}.rsm.{k}"] = repr(v)
            for f in fields(ConvGeometry):
                config[f"layer{i}.geometry.{f.name}"] = str(getattr(lay.geo, f.name))
            for k, v in lay.params.named().items():
                tensors[f"layer{i}.{k}"] = v
            tensors[f"layer{i}.state.phi"] = lay.state.phi
            tensors[f"layer{i}.state.psi"] = lay.state.psi
            tensors[f"layer{i}.state.xR"] = lay.state.xR
            if lay.opt is not None:
                pack_optimizer(f"layer{i}.adam", lay.opt, config, tensors)
            if i > 0 and lay.prev_trace is not None:
                # the upper layer's pending loss needs last step's trace
                tr = lay.prev_trace
                for name in _PENDING:
                    value = getattr(tr, name)
                    if value is not None:
                        tensors[f"layer{i}.pending.{name}"] = np.asarray(value, dtype=DTYPE)
        return config, tensors

    @classmethod
    def from_checkpoint(cls, config: dict, tensors: dict) -> "ConvStack":
        layers = []
        for i in range(int(config["layers"])):
            pre = f"layer{i}."
            cfg = layer.config_from_dict({k[len(pre) + 4:]: literal_eval(v) for k, v in config.items()
                                          if k.startswith(pre + "rsm.")})
            geo = ConvGeometry(**{k[len(pre) + 9:]: int(v) for k, v in config.items()
                                  if k.startswith(pre + "geometry.")})
            lay = ConvLayer.__new__(ConvLayer)
            lay.config, lay.geo, lay.prev_trace = cfg, geo, None
            t = {k[len(pre):]: v.copy() for k, v in tensors.items() if k.startswith(pre)}
            lay.params = layer.RsmParams(wF=t["wF"], wR=t["wR"], wD=t["wD"], wB=t.get("wB"))
            lay.state = ConvRsmState(t["state.phi"], t["state.psi"], t["state.xR"])
            lay.opt = (unpack_optimizer(pre + "adam", config, tensors)
                       if pre + "adam.lr" in config else None)
            if "pending.y" in t:
                parts = {name: t.get("pending." + name) for name in _PENDING}
                parts["yG_argmax"] = parts["yG_argmax"].astype(np.int64)
                lay.prev_trace = layer.RsmTrace(**parts, zF=None, zR=None, zB=None, sigma=None,
                                                pi=None, piG=None, alpha=None)
            layers.append(lay)
        return cls(*layers)


def build_stack(l1: dict, l2: dict | None, frame_h: int, frame_w: int, batch: int, rng,
                lr: float = 0.0005) -> ConvStack:
    """Create a one- or two-layer stack from per-layer hyperparameter dicts.

    Each dict holds groups, cells, k, gamma, epsilon, field, stride and
    (lower only) pool.
    """
    geo1 = ConvGeometry(l1["field"], l1["field"], l1["stride"], l1["stride"], frame_h, frame_w, 1,
                        pool=l1.get("pool", 1))
    fb = l2["groups"] * l2["cells"] if l2 is not None and l2.get("feedback", True) else 0
    cfg1 = layer.RsmConfig(input_size=geo1.patch_size, groups=l1["groups"], cells=l1["cells"],
                           k=l1["k"], gamma=l1["gamma"], epsilon=l1["epsilon"], feedback_size=fb)
    lower = ConvLayer(cfg1, geo1, batch, rng, lr)
    upper = None
    if l2 is not None:
        geo2 = ConvGeometry(l2["field"], l2["field"], l2["stride"], l2["stride"],
                            geo1.out_h // geo1.pool, geo1.out_w // geo1.pool, cfg1.size)
        cfg2 = layer.RsmConfig(input_size=geo2.patch_size, groups=l2["groups"], cells=l2["cells"],
                               k=l2["k"], gamma=l2["gamma"], epsilon=l2["epsilon"])
        upper = ConvLayer(cfg2, geo2, batch, rng, lr)
    return ConvStack(lower, upper)


def self_loop_generate(stack: ConvStack, priming_frames: np.ndarray, n_steps: int) -> np.ndarray:
    """Prime with real frames, then feed back clamped predictions.

    ``priming_frames`` is [T, b, H, W, C]; returns [n_steps, b, H, W, C]. The
    stack passed in is not modified.
    """
    if len(priming_frames) < 1:
        raise ValueError("need at least one priming frame")
    s = stack.eval_clone()
    pred = None
    for frame in priming_frames:
        pred, _ = s.step(frame)
    out = np.empty((n_steps,) + priming_frames.shape[1:], dtype=DTYPE)
    for t in range(n_steps):
        out[t] = np.clip(pred, 0.0, 1.0)
        pred, _ = s.step(out[t])
    return out
