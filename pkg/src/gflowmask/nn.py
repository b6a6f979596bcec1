"""Miniature backbones (MiniRes, MiniViT) built on the autograd engine.

Both models expose one dropout site per block.  ``forward`` calls a site
function at every site so mask policies can read the activation entering
the site before choosing the mask (masks are produced lazily, site by site).
"""

from __future__ import annotations

import math
from collections.abc import Callable, Mapping

import numpy as np

from . import autograd as ag
from .autograd import Tensor
from .config import BackboneConfig

SiteFn = Callable[[int, str, Tensor, Tensor], Tensor]


class MaskError(ValueError):
    """Masks do not cover the model's dropout sites exactly once."""


# -- initialisation ------------------------------------------------------


def kaiming_uniform(rng: np.random.Generator, shape: tuple[int, ...], fan_in: int) -> Tensor:
    bound = math.sqrt(6.0 / fan_in)
    return Tensor(rng.uniform(-bound, bound, size=shape), requires_grad=True)


def zeros(shape) -> Tensor:
    return Tensor(np.zeros(shape), requires_grad=True)


def ones(shape) -> Tensor:
    return Tensor(np.ones(shape), requires_grad=True)


# -- layers --------------------------------------------------------------


def dense(x: Tensor, weights: Tensor, bias: Tensor) -> Tensor:
    """y = W x + b over the last axis; ``weights`` is (n_out, n_in)."""
    n_out, n_in = weights.shape
    if x.shape[-1] != n_in or bias.shape != (n_out,):
        raise ValueError(f"dense shape mismatch: x {x.shape}, W {weights.shape}, b {bias.shape}")
    return ag.matmul(x, ag.transpose(weights)) + bias


def mask_multiply(activation: Tensor, keep) -> Tensor:
    """Multiply by a per-channel (conv) or per-embedding-dim (tokens) mask.

    ``keep`` is (units,) or (batch, units) and broadcasts over spatial or
    token axes.
    """
    keep = ag.as_tensor(keep)
    units = activation.shape[1] if activation.ndim == 4 else activation.shape[-1]
    if keep.shape[-1] != units:
        raise ValueError(f"mask has {keep.shape[-1]} units, site has {units}")
    if activation.ndim == 4:
        keep = keep.reshape(keep.shape + (1, 1)) if keep.ndim == 2 else keep.reshape(1, units, 1, 1)
    elif activation.ndim == 3 and keep.ndim == 2:
        keep = keep.reshape(keep.shape[0], 1, units)
    return activation * keep


def residual_block(x: Tensor, params: Mapping[str, Tensor], stride: int = 1) -> Tensor:
    """relu(conv(relu(conv(x))) + shortcut(x)); shortcut is identity or a 1x1 conv."""
    h = ag.relu(ag.conv2d(x, params["conv1.w"], params["conv1.b"], stride=stride, padding=1))
    h = ag.conv2d(h, params["conv2.w"], params["conv2.b"], stride=1, padding=1)
    if "short.w" in params:
        short = ag.conv2d(x, params["short.w"], params["short.b"], stride=stride)
    else:
        if stride != 1 or x.shape[1] != h.shape[1]:
            raise ValueError("identity shortcut needs matching channels and stride 1")
        short = x
    return ag.relu(h + short)


def multi_head_attention(x: Tensor, params: Mapping[str, Tensor], n_heads: int) -> Tensor:
    B, N, D = x.shape
    dh = D // n_heads

    def heads(t: Tensor) -> Tensor:
        return t.reshape(B, N, n_heads, dh).transpose(0, 2, 1, 3)

    q = heads(dense(x, params["q.w"], params["q.b"]))
    k = heads(dense(x, params["k.w"], params["k.b"]))
    v = heads(dense(x, params["v.w"], params["v.b"]))
    att = ag.softmax(ag.matmul(q, k.transpose(0, 1, 3, 2)) * (1.0 / math.sqrt(dh)))
    out = ag.matmul(att, v).transpose(0, 2, 1, 3).reshape(B, N, D)
    return dense(out, params["o.w"], params["o.b"])


def attention_block(x: Tensor, params: Mapping[str, Tensor], n_heads: int) -> Tensor:
    """Pre-norm transformer block: x + MHA(LN(x)), then h + MLP(LN(h))."""
    if x.ndim != 3 or x.shape[-1] != params["ln1.g"].shape[0]:
        raise ValueError(f"attention block expects (batch, tokens, {params['ln1.g'].shape[0]}), got {x.shape}")
    h = x + multi_head_attention(ag.layer_norm(x, params["ln1.g"], params["ln1.b"]), params, n_heads)
    m = ag.gelu(dense(ag.layer_norm(h, params["ln2.g"], params["ln2.b"]), params["fc1.w"], params["fc1.b"]))
    return h + dense(m, params["fc2.w"], params["fc2.b"])


def cross_entropy(logits: Tensor, labels) -> Tensor:
    """Per-sample −log softmax(logits)[label]; (batch,) for 2-D logits, scalar for 1-D."""
    labels = np.asarray(labels)
    n_classes = logits.shape[-1]
    if np.any(labels < 0) or np.any(labels >= n_classes):
        raise ValueError(f"label out of range [0, {n_classes})")
    onehot = np.eye(n_classes)[labels]
    return -(ag.log_softmax(logits) * onehot).sum(axis=-1)


def softmax_np(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=-1, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=-1, keepdims=True)


# -- backbones -----------------------------------------------------------


class Backbone:
    """Parameters live in ``params`` under ``backbone/``-prefixed names."""

    def __init__(self, config: BackboneConfig):
        self.config = config
        self.params: dict[str, Tensor] = {}

    @property
    def sites(self) -> list[str]:
        return self.config.dropout_sites

    def block_params(self, prefix: str) -> dict[str, Tensor]:
        n = len(prefix)
        return {k[n:]: v for k, v in self.params.items() if k.startswith(prefix)}

    def forward(self, x, site_fn: SiteFn | None = None, capture: dict | None = None) -> Tensor:
        raise NotImplementedError

    def __call__(self, x, site_fn: SiteFn | None = None, capture: dict | None = None) -> Tensor:
        return self.forward(x, site_fn, capture)


class MiniRes(Backbone):
    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        super().__init__(config)
        p = self.params
        c_in, k = config.in_channels, 3
        p["backbone/stem.w"] = kaiming_uniform(rng, (config.stem_channels, c_in, k, k), c_in * k * k)
        p["backbone/stem.b"] = zeros(config.stem_channels)
        c_prev = config.stem_channels
        for i, (c, s) in enumerate(zip(config.channels, config.strides)):
            pre = f"backbone/block{i}."
            p[pre + "conv1.w"] = kaiming_uniform(rng, (c, c_prev, k, k), c_prev * k * k)
            p[pre + "conv1.b"] = zeros(c)
            p[pre + "conv2.w"] = kaiming_uniform(rng, (c, c, k, k), c * k * k)
            p[pre + "conv2.b"] = zeros(c)
            if c != c_prev or s != 1:
                p[pre + "short.w"] = kaiming_uniform(rng, (c, c_prev, 1, 1), c_prev)
                p[pre + "short.b"] = zeros(c)
            c_prev = c
        p["backbone/head.w"] = kaiming_uniform(rng, (config.n_classes, c_prev), c_prev)
        p["backbone/head.b"] = zeros(config.n_classes)

    def forward(self, x, site_fn=None, capture=None):
        x = ag.as_tensor(x)
        p = self.params
        h = ag.relu(ag.conv2d(x, p["backbone/stem.w"], p["backbone/stem.b"], stride=self.config.stem_stride, padding=1))
        x_embed = h.mean(axis=(2, 3))
        for i, (name, stride) in enumerate(zip(self.sites, self.config.strides)):
            h = residual_block(h, self.block_params(f"backbone/{name}."), stride)
            if site_fn is not None:
                h = site_fn(i, name, h, x_embed)
            if capture is not None:
                capture[name] = h
        pooled = h.mean(axis=(2, 3))
        return dense(pooled, p["backbone/head.w"], p["backbone/head.b"])


class MiniViT(Backbone):
    def __init__(self, config: BackboneConfig, rng: np.random.Generator):
        super().__init__(config)
        p = self.params
        d, ps = config.embed_dim, config.patch_size
        patch_dim = config.in_channels * ps * ps
        n_tokens = (config.input_size // ps) ** 2
        p["backbone/patch.w"] = kaiming_uniform(rng, (d, patch_dim), patch_dim)
        p["backbone/patch.b"] = zeros(d)
        p["backbone/pos"] = Tensor(rng.normal(0.0, 0.02, size=(n_tokens, d)), requires_grad=True)
        for i in range(config.n_layers):
            pre = f"backbone/block{i}."
            p[pre + "ln1.g"], p[pre + "ln1.b"] = ones(d), zeros(d)
            for proj in ("q", "k", "v", "o"):
                p[pre + f"{proj}.w"] = kaiming_uniform(rng, (d, d), d)
                p[pre + f"{proj}.b"] = zeros(d)
            p[pre + "ln2.g"], p[pre + "ln2.b"] = ones(d), zeros(d)
            p[pre + "fc1.w"] = kaiming_uniform(rng, (config.mlp_dim, d), d)
            p[pre + "fc1.b"] = zeros(config.mlp_dim)
            p[pre + "fc2.w"] = kaiming_uniform(rng, (d, config.mlp_dim), config.mlp_dim)
            p[pre + "fc2.b"] = zeros(d)
        p["backbone/head.w"] = kaiming_uniform(rng, (config.n_classes, d), d)
        p["backbone/head.b"] = zeros(config.n_classes)

    @property
    def grid(self) -> int:
        return self.config.input_size // self.config.patch_size

    def patchify(self, x: Tensor) -> Tensor:
        B, C, H, W = x.shape
        g, ps = self.grid, self.config.patch_size
        return x.reshape(B, C, g, ps, g, ps).transpose(0, 2, 4, 1, 3, 5).reshape(B, g * g, C * ps * ps)

    def forward(self, x, site_fn=None, capture=None):
        x = ag.as_tensor(x)
        p = self.params
        tokens = dense(self.patchify(x), p["backbone/patch.w"], p["backbone/patch.b"])
        x_embed = tokens.mean(axis=1)
        h = tokens + p["backbone/pos"]
        for i, name in enumerate(self.sites):
            h = attention_block(h, self.block_params(f"backbone/{name}."), self.config.n_heads)
            if site_fn is not None:
                h = site_fn(i, name, h, x_embed)
            if capture is not None:
                capture[name] = h
        pooled = h.mean(axis=1)
        return dense(pooled, p["backbone/head.w"], p["backbone/head.b"])


def build_backbone(config: BackboneConfig, rng: np.random.Generator) -> Backbone:
    return MiniRes(config, rng) if config.kind == "minires" else MiniViT(config, rng)


def fixed_masks(masks: Mapping[str, object]) -> SiteFn:
    """Site function applying pre-chosen binary keep vectors (no rescaling)."""

    def site_fn(index, name, activation, x_embed):
        keep = masks[name]
        keep = getattr(keep, "keep", keep)
        return mask_multiply(activation, keep)

    return site_fn


def forward(model: Backbone, x, masks: Mapping[str, object] | None = None) -> Tensor:
    """Logits for ``x`` under fixed per-site masks.

    ``masks=None`` runs the plain network with no dropout sites at all.
    """
    if masks is None:
        return model(x)
    names = set(masks)
    expected = set(model.sites)
    if names != expected:
        missing, extra = sorted(expected - names), sorted(names - expected)
        raise MaskError(f"masks must cover every dropout site once (missing {missing}, extra {extra})")
    return model(x, fixed_masks(masks))
