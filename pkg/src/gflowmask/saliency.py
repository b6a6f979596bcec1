"""Grad-CAM heatmaps and blue-to-red overlays.

Maps are computed on the deterministic expected-mask forward pass so they
are reproducible.  MiniRes sites are (channels, h, w) feature maps; MiniViT
sites are token activations reshaped onto the patch grid, giving one
"channel" per embedding dimension.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.ndimage import zoom

from .autograd import Tensor
from .data import ImageSample


class SaliencyError(ValueError):
    """Site has no spatial layout, or heatmap and image sizes disagree."""


@dataclass
class Heatmap:
    values: np.ndarray  # h x w in [0, 1]
    source_site: str
    class_index: int


def cam_from_activations(activations: np.ndarray, grads: np.ndarray) -> np.ndarray:
    """ReLU(sum_k alpha_k A_k) with alpha_k the spatial mean of dScore/dA_k; inputs are (K, h, w)."""
    activations = np.asarray(activations, dtype=np.float64)
    grads = np.asarray(grads, dtype=np.float64)
    if activations.ndim != 3 or activations.shape != grads.shape:
        raise SaliencyError(f"need matching (K, h, w) arrays, got {activations.shape} and {grads.shape}")
    alpha = grads.mean(axis=(1, 2))
    return np.maximum(np.tensordot(alpha, activations, axes=1), 0.0)


def normalize(raw: np.ndarray) -> np.ndarray:
    """Min-max scale to [0, 1]; a map without contrast carries no location and becomes zeros."""
    lo, hi = raw.min(), raw.max()
    if hi - lo <= 0:
        return np.zeros_like(raw, dtype=np.float64)
    return (raw - lo) / (hi - lo)


def upsample(values: np.ndarray, size: int) -> np.ndarray:
    """Bilinear resize with pixel-centre alignment (edges replicate)."""
    h, w = values.shape
    if (h, w) == (size, size):
        return values.astype(np.float64, copy=True)
    return zoom(values, (size / h, size / w), order=1, mode="nearest", grid_mode=True)


def _spatial(activation: np.ndarray, name: str) -> np.ndarray:
    """(K, h, w) view of one sample's site activation."""
    if activation.ndim == 3:  # conv: C, h, w
        return activation
    if activation.ndim == 2:  # tokens: N, D -> D, g, g
        n, d = activation.shape
        g = int(round(np.sqrt(n)))
        if g * g != n:
            raise SaliencyError(f"site {name}: {n} tokens do not form a square patch grid")
        return activation.T.reshape(d, g, g)
    raise SaliencyError(f"site {name} has no spatial layout (activation shape {activation.shape})")


def grad_cam(model, x, class_index: int, site: str | None = None, gfo=None) -> Heatmap:
    """Grad-CAM for one preprocessed image ``x`` (3, H, W) at ``site``.

    ``site`` defaults to the last dropout site.  With ``gfo`` the forward
    pass uses expected masks; the map is upsampled to the input size before
    min-max normalisation, so a non-zero map spans exactly [0, 1].
    """
    site = site or model.sites[-1]
    if site not in model.sites:
        raise SaliencyError(f"unknown site {site!r}; model has {model.sites}")
    x = np.asarray(x, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    capture: dict[str, Tensor] = {}
    logits = model(x, gfo.expected() if gfo is not None else None, capture)
    n_classes = logits.shape[-1]
    if not 0 <= class_index < n_classes:
        raise SaliencyError(f"class index {class_index} out of range [0, {n_classes})")
    score = (logits * np.eye(n_classes)[class_index]).sum()
    act = capture[site]
    score.backward()
    grad = act.grad if act.grad is not None else np.zeros_like(act.data)
    raw = cam_from_activations(_spatial(act.data[0], site), _spatial(grad[0], site))
    return Heatmap(normalize(upsample(raw, x.shape[-1])), site, int(class_index))


def colormap(values: np.ndarray) -> np.ndarray:
    """Linear blue (0) to red (1) colour ramp: (h, 0, 1 - h)."""
    v = np.asarray(values, dtype=np.float64)
    return np.stack([v, np.zeros_like(v), 1.0 - v], axis=-1)


def overlay(heatmap: Heatmap | np.ndarray, img: ImageSample) -> ImageSample:
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    if values.shape != img.pixels.shape[:2]:
        raise SaliencyError(f"heatmap {values.shape} does not match image {img.pixels.shape[:2]}")
    out = np.clip(0.5 * img.pixels + 0.5 * colormap(values), 0.0, 1.0)
    return ImageSample(out, img.label, img.id)
