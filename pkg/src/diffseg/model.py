"""Time-conditioned 2-d U-net built on :mod:`diffseg.tensor`.

Layout for ``widths = (w0, w1, ..., wL)``::

    enc0 ─ down0 ─ enc1 ─ ... ─ downL-1 ─ encL [+ mid.attn]
                                            │
    out ─ dec0 ─ up0 ─ ... ─ decL-1 ─ upL-1 ┘      (dec_i also sees enc_i)

Each block is conv3x3 → layer-norm → (+ time bias) → SiLU → conv3x3 →
layer-norm → SiLU with a residual path. Non-diffusion models drop the
mask input channels and every time-conditioning parameter.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import tensor as tn
from .tensor import Tensor

PRESETS = {
    "desk": (8, 16, 32),
    "full": (32, 64, 128, 256),
}


@dataclass
class UNetConfig:
    widths: tuple[int, ...] = PRESETS["desk"]
    classes: int = 3
    image_channels: int = 1
    time_embed_dim: int = 32
    with_transformer: bool = True
    with_self_cond_input: bool = False
    diffusion: bool = True
    heads: int = 1
    spatial: tuple[int, int] = (32, 32)

    def __post_init__(self):
        self.widths = tuple(int(w) for w in self.widths)
        self.spatial = tuple(int(s) for s in self.spatial)

    def validate(self) -> None:
        if len(self.widths) < 2:
            raise ValueError("U-net needs at least 2 levels")
        if any(w <= 0 for w in self.widths) or any(b < a for a, b in zip(self.widths, self.widths[1:])):
            raise ValueError("widths must be positive and non-decreasing")
        if self.classes < 2 or self.image_channels < 1:
            raise ValueError("need classes >= 2 and image_channels >= 1")
        if self.time_embed_dim % 2:
            raise ValueError("time_embed_dim must be even")
        if self.with_self_cond_input and not self.diffusion:
            raise ValueError("self-conditioning input requires diffusion mode")
        if self.with_transformer and self.widths[-1] % self.heads:
            raise ValueError("bottleneck width must be divisible by the head count")
        self.check_spatial(self.spatial)

    def check_spatial(self, spatial) -> None:
        factor = 2 ** (len(self.widths) - 1)
        if any(s % factor for s in spatial):
            raise ValueError(f"spatial dims {tuple(spatial)} must be divisible by {factor}")

    @property
    def in_channels(self) -> int:
        if not self.diffusion:
            return self.image_channels
        return self.image_channels + self.classes * (1 + int(self.with_self_cond_input))

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> "UNetConfig":
        return cls(**d)


def time_embedding(t, dim: int, max_period: float = 10000.0) -> np.ndarray:
    """Interleaved sin/cos features of ``t`` (int or 1-d array) → ``[..., dim]``."""
    if dim % 2:
        raise ValueError("embedding dim must be even")
    half = dim // 2
    freqs = np.exp(-np.log(max_period) * np.arange(half) / half)
    args = np.asarray(t, dtype=np.float64)[..., None] * freqs
    emb = np.empty(args.shape[:-1] + (dim,))
    emb[..., 0::2] = np.sin(args)
    emb[..., 1::2] = np.cos(args)
    return emb


def positional_encoding(length: int, dim: int) -> np.ndarray:
    return time_embedding(np.arange(length), dim)


# ---------------------------------------------------------------- parameters


def param_shapes(config: UNetConfig) -> dict[str, tuple[int, ...]]:
    """Ordered parameter names and shapes; a pure function of ``config``."""
    shapes: dict[str, tuple[int, ...]] = {}
    w = config.widths
    d = config.time_embed_dim
    if config.diffusion:
        shapes["time.w"] = (d, d)
        shapes["time.b"] = (d,)

    def block(name: str, cin: int, cout: int) -> None:
        shapes[f"{name}.conv1.w"] = (cout, cin, 3, 3)
        shapes[f"{name}.norm1.g"] = (cout,)
        shapes[f"{name}.norm1.b"] = (cout,)
        if config.diffusion:
            shapes[f"{name}.time.w"] = (d, cout)
            shapes[f"{name}.time.b"] = (cout,)
        shapes[f"{name}.conv2.w"] = (cout, cout, 3, 3)
        shapes[f"{name}.norm2.g"] = (cout,)
        shapes[f"{name}.norm2.b"] = (cout,)
        if cin != cout:
            shapes[f"{name}.skip.w"] = (cout, cin, 1, 1)

    block("enc0", config.in_channels, w[0])
    for i in range(1, len(w)):
        shapes[f"down{i - 1}.w"] = (w[i], w[i - 1], 3, 3)
        shapes[f"down{i - 1}.b"] = (w[i],)
        block(f"enc{i}", w[i], w[i])
    if config.with_transformer:
        c = w[-1]
        for k, shape in [
            ("ln1.g", (c,)), ("ln1.b", (c,)),
            ("wq", (c, c)), ("wk", (c, c)), ("wv", (c, c)), ("wo", (c, c)),
            ("ln2.g", (c,)), ("ln2.b", (c,)),
            ("mlp1.w", (c, 2 * c)), ("mlp1.b", (2 * c,)),
            ("mlp2.w", (2 * c, c)), ("mlp2.b", (c,)),
        ]:
            shapes[f"mid.attn.{k}"] = shape
    for i in reversed(range(len(w) - 1)):
        shapes[f"up{i}.w"] = (w[i], w[i + 1], 3, 3)
        shapes[f"up{i}.b"] = (w[i],)
        block(f"dec{i}", 2 * w[i], w[i])
    shapes["out.w"] = (config.classes, w[0], 1, 1)
    shapes["out.b"] = (config.classes,)
    return shapes


def init(config: UNetConfig, seed: int = 0, dtype=np.float32) -> dict[str, Tensor]:
    """Fan-in scaled normal weights, unit norm gains, zero biases and zero output head."""
    config.validate()
    rng = np.random.default_rng(seed)
    params = {}
    for name, shape in param_shapes(config).items():
        leaf = name.rsplit(".", 1)[-1]
        if name.startswith("out.") or leaf == "b":
            value = np.zeros(shape)
        elif leaf == "g":
            value = np.ones(shape)
        else:
            fan_in = shape[1] * int(np.prod(shape[2:])) if len(shape) == 4 else shape[0]
            value = rng.standard_normal(shape) * np.sqrt(1.0 / fan_in)
        params[name] = Tensor(value.astype(dtype), requires_grad=True, name=name)
    return params


# ------------------------------------------------------------------- forward


def _conv_block(p: dict[str, Tensor], name: str, x: Tensor, temb: Tensor | None) -> Tensor:
    # activations are channels-last [N, H, W, C] inside the network
    h = tn.conv2d(x, p[f"{name}.conv1.w"], layout="NHWC")
    h = tn.layer_norm(h, axis=(1, 2, 3)) * p[f"{name}.norm1.g"] + p[f"{name}.norm1.b"]
    if temb is not None:
        bias = temb @ p[f"{name}.time.w"] + p[f"{name}.time.b"]
        h = h + tn.reshape(bias, (bias.shape[0], 1, 1, bias.shape[1]))
    h = tn.silu(h)
    h = tn.conv2d(h, p[f"{name}.conv2.w"], layout="NHWC")
    h = tn.layer_norm(h, axis=(1, 2, 3)) * p[f"{name}.norm2.g"] + p[f"{name}.norm2.b"]
    h = tn.silu(h)
    skip = tn.conv2d(x, p[f"{name}.skip.w"], layout="NHWC") if f"{name}.skip.w" in p else x
    return h + skip


def _transformer(p: dict[str, Tensor], x: Tensor, heads: int) -> Tensor:
    n, hh, ww, c = x.shape
    length = hh * ww
    tokens = tn.reshape(x, (n, length, c))
    tokens = tokens + positional_encoding(length, c).astype(x.dtype)
    pre = "mid.attn."
    h = tn.layer_norm(tokens, axis=-1) * p[pre + "ln1.g"] + p[pre + "ln1.b"]
    q, k, v = (h @ p[pre + key] for key in ("wq", "wk", "wv"))
    if heads > 1:
        dh = c // heads
        q, k, v = (tn.transpose(tn.reshape(a, (n, length, heads, dh)), (0, 2, 1, 3)) for a in (q, k, v))
        att = tn.reshape(tn.transpose(tn.attention(q, k, v), (0, 2, 1, 3)), (n, length, c))
    else:
        att = tn.attention(q, k, v)
    tokens = tokens + att @ p[pre + "wo"]
    h = tn.layer_norm(tokens, axis=-1) * p[pre + "ln2.g"] + p[pre + "ln2.b"]
    h = tn.silu(h @ p[pre + "mlp1.w"] + p[pre + "mlp1.b"]) @ p[pre + "mlp2.w"] + p[pre + "mlp2.b"]
    tokens = tokens + h
    return tn.reshape(tokens, (n, hh, ww, c))


def _as_batch(x, dtype) -> Tensor:
    t = x if isinstance(x, Tensor) else Tensor(np.asarray(x), dtype=dtype)
    if t.dtype != dtype:
        t = Tensor(t.data.astype(dtype), dtype=dtype)
    return t


def _channels_last(x: Tensor) -> Tensor:
    if x.requires_grad:
        return tn.transpose(x, (0, 2, 3, 1))
    return Tensor(np.ascontiguousarray(x.data.transpose(0, 2, 3, 1)), dtype=x.dtype)


def forward(params: dict[str, Tensor], config: UNetConfig, image, t=None, x_t=None, self_cond=None) -> Tensor:
    """Per-class logits with the spatial shape of ``image``.

    ``image`` is ``[N, C_img, H, W]`` (or unbatched ``[C_img, H, W]``, in
    which case the batch axis is dropped from the result). ``t`` is an int or
    one step label per sample.
    """
    if config.diffusion:
        if t is None or x_t is None:
            raise ValueError("diffusion model requires t and x_t")
        if self_cond is not None and not config.with_self_cond_input:
            raise ValueError("model has no self-conditioning input")
    elif t is not None or x_t is not None or self_cond is not None:
        raise ValueError("non-diffusion model takes the image only")

    dtype = params["out.w"].dtype
    unbatched = np.ndim(image.data if isinstance(image, Tensor) else image) == 3
    if unbatched:
        image = image[None] if not isinstance(image, Tensor) else tn.reshape(image, (1,) + image.shape)
        if x_t is not None:
            x_t = x_t[None] if not isinstance(x_t, Tensor) else tn.reshape(x_t, (1,) + x_t.shape)
        if self_cond is not None:
            self_cond = self_cond[None] if not isinstance(self_cond, Tensor) else tn.reshape(self_cond, (1,) + self_cond.shape)
    image = _as_batch(image, dtype)
    n = image.shape[0]
    config.check_spatial(image.shape[2:])
    if image.shape[1] != config.image_channels:
        raise ValueError(f"expected {config.image_channels} image channels, got {image.shape[1]}")

    inputs = [_channels_last(image)]
    temb = None
    if config.diffusion:
        x_t = _as_batch(x_t, dtype)
        if x_t.shape != (n, config.classes) + image.shape[2:]:
            raise ValueError(f"x_t shape {x_t.shape} does not match image/classes")
        inputs.append(_channels_last(x_t))
        if config.with_self_cond_input:
            if self_cond is None:
                self_cond = np.zeros(x_t.shape, dtype=dtype)
            self_cond = _as_batch(self_cond, dtype)
            if self_cond.shape != x_t.shape:
                raise ValueError(f"self_cond shape {self_cond.shape} does not match x_t")
            inputs.append(_channels_last(self_cond))
        steps = np.broadcast_to(np.asarray(t), (n,))
        emb = Tensor(time_embedding(steps, config.time_embed_dim).astype(dtype))
        temb = tn.silu(emb @ params["time.w"] + params["time.b"])
    x = tn.concat(inputs, axis=-1) if len(inputs) > 1 else inputs[0]

    levels = len(config.widths)
    skips = []
    h = _conv_block(params, "enc0", x, temb)
    for i in range(1, levels):
        skips.append(h)
        h = tn.conv2d(h, params[f"down{i - 1}.w"], stride=2, layout="NHWC") + params[f"down{i - 1}.b"]
        h = _conv_block(params, f"enc{i}", h, temb)
    if config.with_transformer:
        h = _transformer(params, h, config.heads)
    for i in reversed(range(levels - 1)):
        h = tn.conv2d(tn.upsample2x(h, axes=(1, 2)), params[f"up{i}.w"], layout="NHWC") + params[f"up{i}.b"]
        h = _conv_block(params, f"dec{i}", tn.concat([h, skips[i]], axis=-1), temb)
    logits = tn.conv2d(h, params["out.w"], layout="NHWC") + params["out.b"]
    logits = tn.transpose(logits, (0, 3, 1, 2))
    if unbatched:
        logits = tn.reshape(logits, logits.shape[1:])
    return logits


def parameter_count(params: dict[str, Tensor]) -> int:
    return int(sum(p.data.size for p in params.values()))
