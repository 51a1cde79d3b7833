"""Two-prong model-error regressor written directly in numpy.

A conv stack embeds the channel-stacked image history; the embedding seeds
the hidden and cell state of an LSTM that consumes the encoded action
sequence.  The LSTM outputs for every step are flattened and passed through
a two-layer head producing one scalar.  Float64 parameters let the
hand-written backward pass can be checked against finite differences;
every function follows the dtype of the parameters it is given.
"""

from __future__ import annotations

from dataclasses import asdict, dataclass, field

import numpy as np


class ShapeMismatch(ValueError):
    def __init__(self, name, expected, got):
        super().__init__(f"{name}: expected shape {tuple(expected)}, got {tuple(got)}")
        self.name = name


@dataclass(frozen=True)
class ArchConfig:
    obs_channels: int = 3
    obs_height: int = 32
    obs_width: int = 32
    history_len: int = 2  # m + 1 images
    horizon: int = 20
    conv_channels: tuple = (8, 16, 32)
    kernel: int = 3
    stride: int = 2
    action_dim: int = 2
    action_hidden: int = 16
    action_embed: int = 32
    hidden: int = 64
    head_hidden: int = 64
    slope: float = 0.01

    def __post_init__(self):
        object.__setattr__(self, "conv_channels", tuple(int(c) for c in self.conv_channels))
        widths = (self.obs_channels, self.obs_height, self.obs_width, self.history_len,
                  self.horizon, self.kernel, self.stride, self.action_hidden,
                  self.action_embed, self.hidden, self.head_hidden, *self.conv_channels)
        if min(widths) < 1:
            raise ValueError("all architecture widths must be >= 1")

    @property
    def in_channels(self) -> int:
        return self.obs_channels * self.history_len

    def conv_out_hw(self) -> list[tuple[int, int]]:
        pad = self.kernel // 2
        hw = [(self.obs_height, self.obs_width)]
        for _ in self.conv_channels:
            h, w = hw[-1]
            hw.append(((h + 2 * pad - self.kernel) // self.stride + 1,
                       (w + 2 * pad - self.kernel) // self.stride + 1))
        return hw[1:]

    @property
    def embed_dim(self) -> int:
        h, w = self.conv_out_hw()[-1]
        return self.conv_channels[-1] * h * w

    def param_shapes(self) -> dict[str, tuple]:
        shapes = {}
        c_in = self.in_channels
        for i, c in enumerate(self.conv_channels, 1):
            shapes[f"conv{i}.w"] = (c, c_in, self.kernel, self.kernel)
            shapes[f"conv{i}.b"] = (c,)
            c_in = c
        E, Hd = self.embed_dim, self.hidden
        shapes.update({
            "init.wh": (Hd, E), "init.bh": (Hd,),
            "init.wc": (Hd, E), "init.bc": (Hd,),
            "act1.w": (self.action_hidden, self.action_dim), "act1.b": (self.action_hidden,),
            "act2.w": (self.action_embed, self.action_hidden), "act2.b": (self.action_embed,),
            "lstm.wx": (4 * Hd, self.action_embed), "lstm.wh": (4 * Hd, Hd), "lstm.b": (4 * Hd,),
            "head1.w": (self.head_hidden, self.horizon * Hd), "head1.b": (self.head_hidden,),
            "head2.w": (1, self.head_hidden), "head2.b": (1,),
        })
        return shapes

    def to_dict(self) -> dict:
        d = asdict(self)
        d["conv_channels"] = list(self.conv_channels)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ArchConfig":
        return cls(**d)


def init_params(arch: ArchConfig, seed: int = 0) -> dict[str, np.ndarray]:
    """Fan-in scaled uniform initialisation, deterministic in ``seed``."""
    rng = np.random.default_rng(seed)
    shapes = arch.param_shapes()
    params = {}
    for name, shape in shapes.items():
        if name.startswith("lstm."):
            fan_in = arch.hidden
        else:
            layer, kind = name.split(".")
            wshape = shapes[f"{layer}.{'w' + kind[1:] if kind.startswith('b') else kind}"]
            fan_in = int(np.prod(wshape[1:]))
        bound = 1.0 / np.sqrt(fan_in)
        params[name] = rng.uniform(-bound, bound, size=shape)
    # bias the forget gate open
    params["lstm.b"][arch.hidden:2 * arch.hidden] += 1.0
    return params


def zeros_like(params):
    return {k: np.zeros_like(v) for k, v in params.items()}


def check_params(params, arch: ArchConfig) -> None:
    for name, shape in arch.param_shapes().items():
        if name not in params:
            raise ShapeMismatch(name, shape, ())
        if params[name].shape != shape:
            raise ShapeMismatch(name, shape, params[name].shape)


# ---------------------------------------------------------------- layers

def _leaky(x, slope):
    return np.where(x > 0, x, slope * x)


def _leaky_grad(x, slope):
    return np.where(x > 0, 1.0, slope).astype(x.dtype, copy=False)


def _sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def _im2col(x, k, stride):
    pad = k // 2
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    win = np.lib.stride_tricks.sliding_window_view(xp, (k, k), axis=(2, 3))
    win = win[:, :, ::stride, ::stride]  # (B, C, Ho, Wo, k, k)
    B, C, Ho, Wo = win.shape[:4]
    cols = win.transpose(0, 2, 3, 1, 4, 5).reshape(B * Ho * Wo, C * k * k)
    return cols, (B, C, Ho, Wo), xp.shape


def _col2im(dcols, meta, xp_shape, k, stride):
    B, C, Ho, Wo = meta
    pad = k // 2
    d = dcols.reshape(B, Ho, Wo, C, k, k).transpose(0, 3, 1, 2, 4, 5)
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    for i in range(k):
        for j in range(k):
            dxp[:, :, i:i + stride * Ho:stride, j:j + stride * Wo:stride] += d[..., i, j]
    return dxp[:, :, pad:xp_shape[2] - pad, pad:xp_shape[3] - pad]


def _conv_forward(x, w, b, stride):
    F, _, k, _ = w.shape
    cols, meta, xp_shape = _im2col(x, k, stride)
    B, _, Ho, Wo = meta
    out = cols @ w.reshape(F, -1).T + b
    return out.reshape(B, Ho, Wo, F).transpose(0, 3, 1, 2), (cols, meta, xp_shape)


def _conv_backward(dout, w, cache, stride, need_dx=True):
    cols, meta, xp_shape = cache
    F, _, k, _ = w.shape
    d = dout.transpose(0, 2, 3, 1).reshape(-1, F)
    dw = (d.T @ cols).reshape(w.shape)
    db = d.sum(axis=0)
    dx = _col2im(d @ w.reshape(F, -1), meta, xp_shape, k, stride) if need_dx else None
    return dx, dw, db


# ---------------------------------------------------------------- forward

def _check_inputs(images, actions, arch):
    exp_img = (arch.history_len, arch.obs_channels, arch.obs_height, arch.obs_width)
    if images.shape[1:] != exp_img:
        raise ShapeMismatch("images", ("B",) + exp_img, images.shape)
    if actions.shape[1:] != (arch.horizon, arch.action_dim):
        raise ShapeMismatch("actions", ("B", arch.horizon, arch.action_dim), actions.shape)


def embed_images(params, images, arch: ArchConfig, cache=None):
    """Conv stack on ``(B, m+1, C, h, w)`` image histories -> ``(B, E)``."""
    x = np.asarray(images, dtype=params["conv1.w"].dtype)
    x = x.reshape(x.shape[0], arch.in_channels, arch.obs_height, arch.obs_width)
    for i in range(1, len(arch.conv_channels) + 1):
        z, c = _conv_forward(x, params[f"conv{i}.w"], params[f"conv{i}.b"], arch.stride)
        if cache is not None:
            cache[f"conv{i}"] = (c, z)
        x = _leaky(z, arch.slope)
    return x.reshape(x.shape[0], -1)


def _sequence_forward(params, emb, actions, arch, cache=None):
    """LSTM + head given image embeddings ``(B, E)`` and actions ``(B, H, 2)``."""
    s = arch.slope
    B, H, _ = actions.shape
    Hd = arch.hidden
    h = emb @ params["init.wh"].T + params["init.bh"]
    c = emb @ params["init.wc"].T + params["init.bc"]

    a1 = actions @ params["act1.w"].T + params["act1.b"]
    e1 = _leaky(a1, s)
    a2 = e1 @ params["act2.w"].T + params["act2.b"]
    xs = _leaky(a2, s)

    # input projection for all steps at once
    zx = xs @ params["lstm.wx"].T + params["lstm.b"]
    wh_t = params["lstm.wh"].T
    hs = np.empty((B, H, Hd), dtype=h.dtype)
    steps = []
    for t in range(H):
        z = zx[:, t] + h @ wh_t
        gates = _sigmoid(z)
        i, f, o = gates[:, :Hd], gates[:, Hd:2 * Hd], gates[:, 3 * Hd:]
        g = np.tanh(z[:, 2 * Hd:3 * Hd])
        c_prev, h_prev = c, h
        c = f * c + i * g
        tc = np.tanh(c)
        h = o * tc
        hs[:, t] = h
        if cache is not None:
            steps.append((i, f, g, o, c_prev, h_prev, tc))

    flat = hs.reshape(B, H * Hd)
    z1 = flat @ params["head1.w"].T + params["head1.b"]
    r1 = _leaky(z1, s)
    out = r1 @ params["head2.w"].T + params["head2.b"]
    if cache is not None:
        cache.update(emb=emb, actions=actions, a1=a1, e1=e1, a2=a2, xs=xs,
                     steps=steps, flat=flat, z1=z1, r1=r1)
    return out[:, 0]


def forward_batch(params, images, actions, arch: ArchConfig, cache=None) -> np.ndarray:
    dtype = params["conv1.w"].dtype
    images = np.asarray(images, dtype=dtype)
    actions = np.asarray(actions, dtype=dtype)
    _check_inputs(images, actions, arch)
    emb = embed_images(params, images, arch, cache)
    return _sequence_forward(params, emb, actions, arch, cache)


def forward(params, history, actions, arch: ArchConfig) -> float:
    """Predicted model error for one image history ``(m+1, C, h, w)`` and ``(H, 2)`` actions."""
    history = np.asarray(history, dtype=float)
    actions = np.asarray(actions, dtype=float)
    return float(forward_batch(params, history[None], actions[None], arch)[0])


def predict_many(params, history, action_batch, arch: ArchConfig) -> np.ndarray:
    """Score ``K`` candidate action sequences against one shared image history.

    The conv embedding is computed once and broadcast, which is what makes
    running the network inside the sampling controller cheap.  Arithmetic
    follows the parameter dtype, so float32 parameters give float32 scoring.
    """
    dtype = params["conv1.w"].dtype
    history = np.asarray(history, dtype=dtype)[None]
    action_batch = np.asarray(action_batch, dtype=dtype)
    _check_inputs(history, action_batch, arch)
    emb = embed_images(params, history, arch)
    emb = np.broadcast_to(emb, (len(action_batch), emb.shape[1]))
    return _sequence_forward(params, emb, action_batch, arch)


# ---------------------------------------------------------------- loss / backward

def loss(params, images, actions, targets, arch: ArchConfig) -> float:
    pred = forward_batch(params, images, actions, arch).astype(float)
    r = np.asarray(targets, dtype=float) - pred
    return float(np.mean(r * r))


def loss_and_grad(params, images, actions, targets, arch: ArchConfig):
    """Mean squared error and its exact gradient for every parameter tensor."""
    dtype = params["conv1.w"].dtype
    targets = np.asarray(targets, dtype=dtype)
    if targets.size == 0:
        raise ValueError("empty batch")
    cache = {}
    pred = forward_batch(params, images, actions, arch, cache)
    B = len(targets)
    resid = pred - targets
    value = float(np.mean(resid.astype(float) ** 2))
    grads = {}
    s = arch.slope
    Hd = arch.hidden
    H = arch.horizon

    dout = (2.0 / B) * resid[:, None]  # (B, 1)
    grads["head2.w"] = dout.T @ cache["r1"]
    grads["head2.b"] = dout.sum(axis=0)
    dz1 = (dout @ params["head2.w"]) * _leaky_grad(cache["z1"], s)
    grads["head1.w"] = dz1.T @ cache["flat"]
    grads["head1.b"] = dz1.sum(axis=0)
    dhs = (dz1 @ params["head1.w"]).reshape(B, H, Hd)

    wh = params["lstm.wh"]
    dzx = np.empty((B, H, 4 * Hd), dtype=dtype)
    dwh = np.zeros_like(wh)
    dh = np.zeros((B, Hd), dtype=dtype)
    dc = np.zeros((B, Hd), dtype=dtype)
    for t in reversed(range(H)):
        i, f, g, o, c_prev, h_prev, tc = cache["steps"][t]
        dh = dh + dhs[:, t]
        do = dh * tc
        dc = dc + dh * o * (1.0 - tc * tc)
        di = dc * g
        dg = dc * i
        df = dc * c_prev
        dz = np.concatenate([di * i * (1 - i), df * f * (1 - f),
                             dg * (1 - g * g), do * o * (1 - o)], axis=1)
        dzx[:, t] = dz
        dwh += dz.T @ h_prev
        dh = dz @ wh
        dc = dc * f
    grads["lstm.wh"] = dwh
    flat_dz = dzx.reshape(B * H, 4 * Hd)
    grads["lstm.wx"] = flat_dz.T @ cache["xs"].reshape(B * H, -1)
    grads["lstm.b"] = flat_dz.sum(axis=0)

    dxs = (dzx @ params["lstm.wx"]) * _leaky_grad(cache["a2"], s)
    grads["act2.w"] = dxs.reshape(B * H, -1).T @ cache["e1"].reshape(B * H, -1)
    grads["act2.b"] = dxs.sum(axis=(0, 1))
    da1 = (dxs @ params["act2.w"]) * _leaky_grad(cache["a1"], s)
    grads["act1.w"] = da1.reshape(B * H, -1).T @ cache["actions"].reshape(B * H, -1)
    grads["act1.b"] = da1.sum(axis=(0, 1))

    emb = cache["emb"]
    grads["init.wh"] = dh.T @ emb
    grads["init.bh"] = dh.sum(axis=0)
    grads["init.wc"] = dc.T @ emb
    grads["init.bc"] = dc.sum(axis=0)
    demb = dh @ params["init.wh"] + dc @ params["init.wc"]

    n_conv = len(arch.conv_channels)
    (c_last, z_last) = cache[f"conv{n_conv}"]
    dx = demb.reshape(z_last.shape)
    for li in range(n_conv, 0, -1):
        conv_cache, z = cache[f"conv{li}"]
        dz = dx * _leaky_grad(z, s)
        dx, dw, db = _conv_backward(dz, params[f"conv{li}.w"], conv_cache, arch.stride,
                                    need_dx=li > 1)
        grads[f"conv{li}.w"] = dw
        grads[f"conv{li}.b"] = db
    return value, grads


# ---------------------------------------------------------------- optimiser

@dataclass
class Adam:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    t: int = 0
    m: dict = field(default_factory=dict)
    v: dict = field(default_factory=dict)

    def step(self, params, grads):
        """Update ``params`` in place."""
        self.t += 1
        b1, b2 = self.beta1, self.beta2
        for k, g in grads.items():
            if k not in self.m:
                self.m[k] = np.zeros_like(g)
                self.v[k] = np.zeros_like(g)
            self.m[k] = b1 * self.m[k] + (1 - b1) * g
            self.v[k] = b2 * self.v[k] + (1 - b2) * g * g
            mhat = self.m[k] / (1 - b1 ** self.t)
            vhat = self.v[k] / (1 - b2 ** self.t)
            params[k] -= self.lr * mhat / (np.sqrt(vhat) + self.eps)
