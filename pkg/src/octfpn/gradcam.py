"""Per-scale Grad-CAM heatmaps for the fusion classifier."""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from . import autodiff as ad
from .data import resize_bilinear
from .fusion import FPNModel

OVERLAY_ALPHA = 0.4


@dataclass
class Heatmap:
    scale: int
    grid: np.ndarray
    target_class: int
    source: str = ""


def tap_node(model: FPNModel, scale: int, tap: str = "head") -> int:
    if tap == "head":
        if scale not in model.heads:
            raise ValueError(f"scale {scale} is not merged; merged scales are {sorted(model.heads)}")
        return model.heads[scale]
    if tap == "encoder":
        for f in model.features:
            if f.scale == scale:
                return f.node
        raise ValueError(f"backbone has no scale {scale}")
    raise ValueError(f"tap must be 'head' or 'encoder', got {tap!r}")


def cam_from_activations(activations: np.ndarray, gradients: np.ndarray) -> np.ndarray:
    """ReLU(sum_k mean(g_k) * A_k), divided by its max when the max is positive.

    Both arrays are ``(x, x, c)``.
    """
    alpha = gradients.mean(axis=(0, 1))
    cam = np.maximum((activations * alpha).sum(axis=-1), 0.0)
    peak = cam.max()
    return cam / peak if peak > 0 else np.zeros_like(cam)


def grad_cams(model: FPNModel, image: np.ndarray, target_class: int, scales=None,
              params=None, tap: str = "head", source: str = "") -> dict[int, Heatmap]:
    """Heatmaps for several scales from one forward and one backward pass.

    Gradients are taken of the pre-softmax score of ``target_class``; the
    model runs in inference mode.
    """
    params = model.params if params is None else params
    scales = sorted(model.heads) if scales is None else list(scales)
    nodes = {s: tap_node(model, s, tap) for s in scales}
    if not 0 <= target_class < model.n_classes:
        raise ValueError(f"target class {target_class} out of range")
    image = np.asarray(image)
    batch = image[None] if image.ndim == 3 else image
    trace = ad.run(model.tape, {"image": batch}, params, [model.logits])
    seed = np.zeros_like(trace.values[model.logits])
    seed[:, target_class] = 1.0
    grads = ad.reverse(trace, {model.logits: seed}, wrt=list(nodes.values()), parameters=False)
    out = {}
    for s, nid in nodes.items():
        a = trace.values[nid][0].astype(np.float64)
        g = grads.get(nid)
        g = np.zeros_like(a) if g is None else g[0].astype(np.float64)
        out[s] = Heatmap(s, cam_from_activations(a, g), target_class, source)
    return out


def grad_cam(model: FPNModel, image, target_class: int, scale: int, params=None,
             tap: str = "head") -> Heatmap:
    return grad_cams(model, image, target_class, [scale], params, tap)[scale]


def color_ramp(values: np.ndarray) -> np.ndarray:
    """Blue (0) to red (1) ramp, RGB floats in [0, 1]."""
    v = np.clip(values, 0.0, 1.0)[..., None]
    return v * np.array([1.0, 0.0, 0.0]) + (1 - v) * np.array([0.0, 0.0, 1.0])


def display_gray(image: np.ndarray) -> np.ndarray:
    g = np.asarray(image, dtype=np.float64)
    if g.ndim == 3:
        g = g[..., 0]
    lo, hi = g.min(), g.max()
    return (g - lo) / (hi - lo) if hi > lo else np.zeros_like(g)


def overlay(heatmap: Heatmap, image: np.ndarray) -> np.ndarray:
    """Heatmap upscaled to the image, colour-ramped and alpha-blended; uint8 RGB."""
    gray = display_gray(image)
    up = resize_bilinear(heatmap.grid, gray.shape[0]) if heatmap.grid.shape != gray.shape else heatmap.grid
    rgb = (1 - OVERLAY_ALPHA) * gray[..., None] + OVERLAY_ALPHA * color_ramp(up)
    return np.round(np.clip(rgb, 0, 1) * 255).astype(np.uint8)


def heatmap_name(stem: str, heatmap: Heatmap) -> str:
    return f"{stem}_class{heatmap.target_class}_scale{heatmap.scale}.png"


def export_heatmap(heatmap: Heatmap, image: np.ndarray, out_dir, stem: str) -> tuple[Path, Path]:
    """Write the overlay ``<stem>_class<k>_scale<i>.png`` and the raw grid next to it
    (``..._raw.png``, native resolution, 8-bit grayscale).  Returns both paths."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    over_path = out_dir / heatmap_name(stem, heatmap)
    raw_path = over_path.with_name(over_path.stem + "_raw.png")
    raw = np.round(np.clip(heatmap.grid, 0, 1) * 255).astype(np.uint8)
    Image.fromarray(raw, mode="L").save(raw_path, format="PNG")
    Image.fromarray(overlay(heatmap, image), mode="RGB").save(over_path, format="PNG")
    return over_path, raw_path


def localization_scores(heatmap: Heatmap, mask: np.ndarray) -> tuple[float, float]:
    """Mean heatmap value inside and outside a lesion mask (heatmap upscaled to the mask)."""
    up = resize_bilinear(heatmap.grid, mask.shape[0]) if heatmap.grid.shape != mask.shape else heatmap.grid
    inside = float(up[mask].mean()) if mask.any() else float("nan")
    outside = float(up[~mask].mean()) if (~mask).any() else float("nan")
    return inside, outside
