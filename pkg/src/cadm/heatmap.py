"""Gradient-weighted activation maps of the decoder levels for one output pixel."""

from __future__ import annotations

import torch
import torch.nn.functional as F

from .schedule import NoiseSchedule, predict_x0


def gradcam(scalar: torch.Tensor, features, size) -> list[torch.Tensor]:
    """Per-feature-map heatmaps of ``scalar``, each ``(H, W)`` in [0, 1].

    Channel weights are the spatially averaged gradients; the weighted sum is
    rectified, upsampled to ``size`` and divided by its peak. A map whose
    rectified response is zero everywhere stays zero.
    """
    features = list(features)
    needs = [f for f in features if f.requires_grad]
    grads = iter(torch.autograd.grad(scalar, needs, allow_unused=True, retain_graph=True) if needs and scalar.requires_grad else ())
    maps = []
    for f in features:
        g = next(grads, None) if f.requires_grad and scalar.requires_grad else None
        if g is None:
            g = torch.zeros_like(f)
        weights = g.mean((2, 3), keepdim=True)
        cam = F.relu((weights * f).sum(1, keepdim=True))
        cam = F.interpolate(cam.detach(), size=tuple(size), mode="bilinear", align_corners=False)[0, 0]
        peak = cam.max()
        maps.append(cam / peak if peak > 0 else torch.zeros_like(cam))
    return maps


def pixel_heatmaps(model, x_t, I_a, I_b, t: int, sched: NoiseSchedule, pixel) -> list[torch.Tensor]:
    """Heatmaps of the predicted ``x_0`` at ``pixel = (row, col)`` for a single pair.

    ``t`` indexes ``sched``; the decoder levels are returned coarsest first.
    """
    if I_a.shape[0] != 1:
        raise ValueError("heatmaps are computed for one pair at a time")
    H, W = I_a.shape[-2:]
    r, c = pixel
    if not (0 <= r < H and 0 <= c < W):
        raise IndexError(f"pixel {tuple(pixel)} outside the {H}x{W} image")
    taps: list = []
    model_t = torch.full((1,), int(sched.timesteps[t - 1]), dtype=torch.long)
    with torch.enable_grad():
        eps_hat = model(x_t, I_a, I_b, model_t, taps=taps)
        x0 = predict_x0(x_t, t, eps_hat, sched)
        return gradcam(x0[0, 0, r, c], taps, (H, W))
