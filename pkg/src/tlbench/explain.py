"""Grad-CAM heatmaps and overlay rendering."""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

import matplotlib
import numpy as np
import torch
from PIL import Image
from torch import nn

from .errors import LayerSelectionError, ShapeError
from .pipeline.images import to_uint8


@dataclass(frozen=True)
class Heatmap:
    values: np.ndarray  # (H, W) in [0, 1]
    layer: str
    target: int
    zero_gradient: bool = False


def _named(model: nn.Module, name: str) -> nn.Module:
    modules = dict(model.named_modules())
    if name not in modules:
        raise LayerSelectionError(f"model has no layer named {name!r}")
    return modules[name]


def last_spatial_layer(model: nn.Module, image: torch.Tensor) -> str:
    """Name of the last backbone leaf module (in execution order) with a 4-D output."""
    root = model.backbone if hasattr(model, "backbone") else model
    prefix = "backbone." if root is not model else ""
    seen: list[str] = []
    hooks = []
    for name, module in root.named_modules():
        if not name or any(True for _ in module.children()):
            continue

        def hook(_m, _inp, out, name=name):
            if isinstance(out, torch.Tensor) and out.dim() == 4:
                seen.append(name)

        hooks.append(module.register_forward_hook(hook))
    was_training = model.training
    model.eval()
    try:
        with torch.no_grad():
            model(image)
    finally:
        for h in hooks:
            h.remove()
        model.train(was_training)
    if not seen:
        raise LayerSelectionError("no layer produces a spatial feature map")
    return prefix + seen[-1]


def grad_cam(
    model: nn.Module,
    image: np.ndarray | torch.Tensor,
    target: int | None = None,
    layer: str | None = None,
) -> Heatmap:
    """Gradient-weighted class activation map for one (H, W, 3) image.

    Channel weights are the spatial mean of d(score)/d(feature map); the map
    is the rectified weighted channel sum, bilinearly upsampled to the image
    size and divided by its maximum. For one-unit (sigmoid) models the score
    is the pre-sigmoid logit; otherwise it is the logit of ``target``
    (default: the arg-max class).
    """
    x = torch.as_tensor(np.asarray(image, dtype=np.float32))
    if x.dim() != 3 or x.shape[2] != 3:
        raise ShapeError(f"expected an (H, W, 3) image, got {tuple(x.shape)}")
    x = x.permute(2, 0, 1).unsqueeze(0)
    h, w = x.shape[2:]

    was_training = model.training
    model.eval()
    layer = layer or last_spatial_layer(model, x)
    module = _named(model, layer)
    captured: dict[str, torch.Tensor] = {}

    def hook(_m, _inp, out):
        if not isinstance(out, torch.Tensor) or out.dim() != 4:
            raise LayerSelectionError(f"layer {layer!r} output is not a spatial feature map")
        captured["fmap"] = out

    handle = module.register_forward_hook(hook)
    try:
        with torch.enable_grad():
            logits = model(x)
            if logits.shape[1] == 1:
                target = 0 if target is None else target
                score = logits[0, 0]
            else:
                target = int(logits[0].argmax()) if target is None else target
                score = logits[0, target]
            if "fmap" not in captured:
                raise LayerSelectionError(f"layer {layer!r} was not used in the forward pass")
            fmap = captured["fmap"]
            grads = torch.autograd.grad(score, fmap, allow_unused=True)[0]
    finally:
        handle.remove()
        model.train(was_training)

    if grads is None or not torch.any(grads != 0):
        return Heatmap(np.zeros((h, w), dtype=np.float32), layer, target, zero_gradient=True)
    with torch.no_grad():
        weights = grads.mean(dim=(2, 3), keepdim=True)
        cam = torch.relu((weights * fmap).sum(dim=1, keepdim=True))
        cam = nn.functional.interpolate(cam, size=(h, w), mode="bilinear", align_corners=False)
        cam = cam[0, 0].double().numpy()
    peak = cam.max()
    cam = cam / peak if peak > 0 else np.zeros_like(cam)
    return Heatmap(cam.astype(np.float32), layer, target)


def colorize(heatmap: np.ndarray, cmap: str = "jet") -> np.ndarray:
    """Map a [0, 1] heatmap to an (H, W, 3) RGB float array."""
    return matplotlib.colormaps[cmap](np.clip(heatmap, 0.0, 1.0))[..., :3]


def overlay(
    image: np.ndarray,
    heatmap: Heatmap | np.ndarray,
    alpha: float = 0.4,
    path: str | Path | None = None,
    cmap: str = "jet",
) -> np.ndarray:
    """Blend ``(1 - alpha) * image + alpha * colormap(heatmap)`` as uint8 RGB.

    Writes a PNG when ``path`` is given. ``alpha = 0`` reproduces the image.
    """
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    image = np.asarray(image, dtype=np.float64)
    if not 0.0 <= alpha <= 1.0:
        raise ValueError("alpha must lie in [0, 1]")
    if image.ndim != 3 or image.shape[:2] != values.shape:
        raise ShapeError(f"image {image.shape} and heatmap {values.shape} are not aligned")
    blended = (1.0 - alpha) * image + alpha * colorize(values, cmap)
    pixels = to_uint8(blended)
    if path is not None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        Image.fromarray(pixels).save(path)
    return pixels


def save_heatmap(heatmap: Heatmap | np.ndarray, path: str | Path, cmap: str = "jet") -> Path:
    values = heatmap.values if isinstance(heatmap, Heatmap) else np.asarray(heatmap)
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    Image.fromarray(to_uint8(colorize(values, cmap))).save(path)
    return Path(path)
