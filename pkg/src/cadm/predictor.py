"""Conditioned noise predictor eps(x_t, I_a, I_b, t).

Two siamese residual encoders feed the network: one sees the raw images
(shared by I_a and I_b), the other sees the noisy map concatenated with each
image (shared by x_t(c)I_a and x_t(c)I_b). At every pyramid level a noise
suppression and semantic enhancement block (NSSE) fuses the x_t features into
the image features, and the a/b difference of the fused features is injected
into a residual decoder.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, asdict
from typing import Sequence

import torch
import torch.nn as nn
import torch.nn.functional as F

NUM_LEVELS = 3


@dataclass
class PredictorConfig:
    base_channels: int = 32
    blocks_per_level: int = 1
    time_embed_dim: int = 64
    image_channels: int = 3
    # ablation flags; scale s in {1, 2, 3} injects pyramid level k = s - 1,
    # so scale 3 is the coarsest level routed through the bottleneck
    active_scales: tuple = (1, 2, 3)
    nsse: bool = True

    def __post_init__(self):
        self.active_scales = tuple(sorted(int(s) for s in self.active_scales))
        for name in ("base_channels", "blocks_per_level", "time_embed_dim", "image_channels"):
            if getattr(self, name) < 1:
                raise ValueError(f"{name} must be positive")
        validate_scales(self.active_scales)

    def channels(self, k: int) -> int:
        return self.base_channels * 2**k

    def to_dict(self):
        d = asdict(self)
        d["active_scales"] = list(self.active_scales)
        return d


def validate_scales(scales: Sequence[int]):
    scales = sorted(scales)
    if not scales or scales[-1] != 3 or scales != list(range(scales[0], 4)) or scales[0] < 1:
        raise ValueError(
            f"active scales must be a non-empty run ending at scale 3 (coarsest), got {list(scales)}"
        )


def _groups(channels: int) -> int:
    return 8 if channels % 8 == 0 else 1


class ChannelLayerNorm(nn.Module):
    """LayerNorm over the channel axis of an NCHW tensor, applied per pixel."""

    def __init__(self, channels: int, eps: float = 1e-5):
        super().__init__()
        self.weight = nn.Parameter(torch.ones(channels))
        self.bias = nn.Parameter(torch.zeros(channels))
        self.eps = eps

    def forward(self, x):
        mu = x.mean(1, keepdim=True)
        var = (x - mu).pow(2).mean(1, keepdim=True)
        x = (x - mu) / torch.sqrt(var + self.eps)
        return x * self.weight[:, None, None] + self.bias[:, None, None]


def timestep_embedding(t: torch.Tensor, dim: int, max_period: float = 10000.0) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(-math.log(max_period) * torch.arange(half, dtype=torch.float64) / half)
    args = t.to(torch.float64)[:, None] * freqs[None]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class ResBlock(nn.Module):
    def __init__(self, channels: int, temb_dim: int | None = None):
        super().__init__()
        self.norm1 = nn.GroupNorm(_groups(channels), channels)
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.norm2 = nn.GroupNorm(_groups(channels), channels)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)
        self.temb = nn.Linear(temb_dim, channels) if temb_dim else None

    def forward(self, x, temb=None):
        h = self.conv1(F.silu(self.norm1(x)))
        if self.temb is not None:
            h = h + self.temb(temb)[:, :, None, None]
        h = self.conv2(F.silu(self.norm2(h)))
        return x + h


class Encoder(nn.Module):
    """Reduced-width residual encoder returning a three-level feature pyramid.

    The stem halves the resolution, so level k sits at 1/2**(k+1) of the input.
    """

    def __init__(self, in_ch: int, cfg: PredictorConfig):
        super().__init__()
        self.stem = nn.Conv2d(in_ch, cfg.channels(0), 3, stride=2, padding=1)
        self.downs = nn.ModuleList()
        self.stages = nn.ModuleList()
        for k in range(NUM_LEVELS):
            ch = cfg.channels(k)
            if k == 0:
                self.downs.append(nn.Identity())
            else:
                self.downs.append(nn.Conv2d(cfg.channels(k - 1), ch, 3, stride=2, padding=1))
            self.stages.append(nn.ModuleList([ResBlock(ch) for _ in range(cfg.blocks_per_level)]))

    def forward(self, x) -> list[torch.Tensor]:
        h = self.stem(x)
        pyramid = []
        for down, blocks in zip(self.downs, self.stages):
            h = down(h)
            for block in blocks:
                h = block(h)
            pyramid.append(h)
        return pyramid


class NSSE(nn.Module):
    """Noise suppression and semantic enhancement for one pyramid level.

    ``suppress`` filters the x_t feature in the frequency domain with a learnable
    real attention map over the half spectrum; ``fuse`` derives a pixel map and
    a channel vector from the filtered feature and gates the normalised image
    feature with both.
    """

    def __init__(self, channels: int, height: int, width: int):
        super().__init__()
        self.pre = nn.Conv2d(channels, channels, 1)
        self.spectral = nn.Parameter(torch.ones(channels, height, width // 2 + 1))
        self.size = (height, width)
        self.norm_x = ChannelLayerNorm(channels)
        self.norm_m = ChannelLayerNorm(channels)
        self.pixel = nn.Conv2d(channels, 1, 1)
        # start as a pass-through filter with unit gates (the channel gate via the norm bias)
        self.set_identity()
        nn.init.zeros_(self.pixel.weight)
        nn.init.ones_(self.pixel.bias)
        nn.init.ones_(self.norm_x.bias)

    def set_identity(self):
        """Make ``pre`` an identity map and ``spectral`` all ones."""
        c = self.pre.in_channels
        with torch.no_grad():
            self.pre.weight.copy_(torch.eye(c).view(c, c, 1, 1))
            self.pre.bias.zero_()
            self.spectral.fill_(1.0)

    def suppress(self, m_x):
        h = self.pre(m_x)
        spec = torch.fft.rfft2(h, norm="ortho")
        if spec.shape[-3:] != self.spectral.shape:
            raise ValueError(
                f"spectrum shape {tuple(spec.shape[-3:])} does not match attention map "
                f"{tuple(self.spectral.shape)}"
            )
        return torch.fft.irfft2(spec * self.spectral, s=h.shape[-2:], norm="ortho")

    def attention_maps(self, m_prime):
        z = self.norm_x(m_prime)
        return self.pixel(z), z.mean(dim=(2, 3), keepdim=True)

    def fuse(self, m, m_prime):
        if m.shape != m_prime.shape:
            raise ValueError(f"level mismatch: {tuple(m.shape)} vs {tuple(m_prime.shape)}")
        pix, chan = self.attention_maps(m_prime)
        return combine(pix, chan, self.norm_m(m))

    def forward(self, m, m_x):
        return self.fuse(m, self.suppress(m_x))


def combine(pix, chan, normed):
    """Broadcast product of a (N,1,H,W) pixel map, (N,C,1,1) channel vector and (N,C,H,W) feature."""
    return pix * chan * normed


class Decoder(nn.Module):
    def __init__(self, cfg: PredictorConfig):
        super().__init__()
        td = cfg.time_embed_dim * 4
        c0, c1, c2 = (cfg.channels(k) for k in range(NUM_LEVELS))
        n = cfg.blocks_per_level
        self.bottleneck = nn.ModuleList([ResBlock(c2, td) for _ in range(n)])
        self.up1 = nn.Conv2d(c2, c1, 3, padding=1)
        self.dec1 = nn.ModuleList([ResBlock(c1, td) for _ in range(n)])
        self.up0 = nn.Conv2d(c1, c0, 3, padding=1)
        self.dec0 = nn.ModuleList([ResBlock(c0, td) for _ in range(n)])
        self.up_full = nn.Conv2d(c0, c0, 3, padding=1)
        # full-resolution x_t skip; encoders start at half resolution
        self.merge = nn.Conv2d(c0 + 1, c0, 3, padding=1)
        self.out_norm = nn.GroupNorm(_groups(c0), c0)
        self.head = nn.Conv2d(c0, 1, 3, padding=1)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    @staticmethod
    def _run(blocks, h, temb):
        for block in blocks:
            h = block(h, temb)
        return h

    def forward(self, injections, x_t, temb, taps=None):
        h = self._run(self.bottleneck, injections[2], temb)
        if taps is not None:
            taps.append(h)
        h = self.up1(F.interpolate(h, scale_factor=2, mode="nearest")) + injections[1]
        h = self._run(self.dec1, h, temb)
        if taps is not None:
            taps.append(h)
        h = self.up0(F.interpolate(h, scale_factor=2, mode="nearest")) + injections[0]
        h = self._run(self.dec0, h, temb)
        if taps is not None:
            taps.append(h)
        h = self.up_full(F.interpolate(h, scale_factor=2, mode="nearest"))
        h = self.merge(torch.cat([F.silu(h), x_t], dim=1))
        return self.head(F.silu(self.out_norm(h)))


class NoisePredictor(nn.Module):
    def __init__(self, cfg: PredictorConfig, image_size: int | tuple[int, int] = 64):
        super().__init__()
        if isinstance(image_size, int):
            image_size = (image_size, image_size)
        H, W = image_size
        if H % 2**NUM_LEVELS or W % 2**NUM_LEVELS:
            raise ValueError(f"image size {image_size} must be divisible by {2**NUM_LEVELS}")
        self.cfg = cfg
        self.image_size = (H, W)
        self.cond_encoder = Encoder(cfg.image_channels, cfg)
        self.xt_encoder = Encoder(cfg.image_channels + 1, cfg)
        self.nsse = nn.ModuleList(
            [NSSE(cfg.channels(k), H // 2 ** (k + 1), W // 2 ** (k + 1)) for k in range(NUM_LEVELS)]
        )
        d = cfg.time_embed_dim
        self.time_mlp = nn.Sequential(nn.Linear(d, 4 * d), nn.SiLU(), nn.Linear(4 * d, 4 * d))
        self.decoder = Decoder(cfg)
        self.register_buffer(
            "scale_mask",
            torch.tensor([float(k + 1 in cfg.active_scales) for k in range(NUM_LEVELS)]),
            persistent=False,
        )

    def _check(self, x_t, I_a, I_b):
        if I_a.shape != I_b.shape:
            raise ValueError(f"I_a {tuple(I_a.shape)} and I_b {tuple(I_b.shape)} differ in shape")
        if I_a.ndim != 4 or I_a.shape[1] != self.cfg.image_channels:
            raise ValueError(f"expected (N, {self.cfg.image_channels}, H, W) images, got {tuple(I_a.shape)}")
        if tuple(I_a.shape[-2:]) != self.image_size:
            raise ValueError(f"spatial size {tuple(I_a.shape[-2:])} does not match model size {self.image_size}")
        if x_t is not None and (x_t.shape[1] != 1 or x_t.shape[-2:] != I_a.shape[-2:] or x_t.shape[0] != I_a.shape[0]):
            raise ValueError(f"x_t shape {tuple(x_t.shape)} incompatible with images {tuple(I_a.shape)}")

    def encode_conditions(self, I_a, I_b):
        """Conditional pyramids of both images; independent of x_t and t, so cacheable across steps."""
        self._check(None, I_a, I_b)
        n = I_a.shape[0]
        both = self.cond_encoder(torch.cat([I_a, I_b]))
        return [f[:n] for f in both], [f[n:] for f in both]

    def encode_xt(self, x_t, I_a, I_b):
        n = I_a.shape[0]
        both = self.xt_encoder(torch.cat([torch.cat([x_t, I_a], 1), torch.cat([x_t, I_b], 1)]))
        return [f[:n] for f in both], [f[n:] for f in both]

    def encode_branches(self, x_t, I_a, I_b):
        self._check(x_t, I_a, I_b)
        pyr_a, pyr_b = self.encode_conditions(I_a, I_b)
        pyr_xa, pyr_xb = self.encode_xt(x_t, I_a, I_b)
        return pyr_a, pyr_b, pyr_xa, pyr_xb

    def dif_features(self, pyr_a, pyr_b, pyr_xa, pyr_xb):
        out = []
        for k in range(NUM_LEVELS):
            if self.cfg.nsse:
                nsse = self.nsse[k]
                out.append(nsse(pyr_b[k], pyr_xb[k]) - nsse(pyr_a[k], pyr_xa[k]))
            else:
                out.append(pyr_b[k] - pyr_a[k])
        return out

    def time_embed(self, t):
        if not isinstance(t, torch.Tensor):
            t = torch.tensor([t])
        emb = timestep_embedding(t.reshape(-1), self.cfg.time_embed_dim)
        dtype = self.time_mlp[0].weight.dtype
        return self.time_mlp(emb.to(dtype=dtype, device=self.time_mlp[0].weight.device))

    def forward(self, x_t, I_a, I_b, t, cond=None, taps=None):
        """Predict the noise in ``x_t``.

        ``cond`` optionally carries ``encode_conditions(I_a, I_b)`` from an earlier
        call; ``taps``, when a list, receives the decoder features from coarsest
        to finest.
        """
        self._check(x_t, I_a, I_b)
        if cond is None:
            cond = self.encode_conditions(I_a, I_b)
        pyr_a, pyr_b = cond
        pyr_xa, pyr_xb = self.encode_xt(x_t, I_a, I_b)
        dif = self.dif_features(pyr_a, pyr_b, pyr_xa, pyr_xb)
        injections = [self.scale_mask[k] * dif[k] + (pyr_xa[k] - pyr_xb[k]) for k in range(NUM_LEVELS)]
        temb = self.time_embed(t)
        if temb.shape[0] == 1 and x_t.shape[0] > 1:
            temb = temb.expand(x_t.shape[0], -1)
        return self.decoder(injections, x_t, temb, taps=taps)


def predict_noise(model: NoisePredictor, x_t, I_a, I_b, t, T: int | None = None):
    if T is not None:
        lo = int(t.min()) if isinstance(t, torch.Tensor) else int(t)
        hi = int(t.max()) if isinstance(t, torch.Tensor) else int(t)
        if lo < 1 or hi > T:
            raise ValueError(f"timestep out of range [1, {T}]: {t}")
    return model(x_t, I_a, I_b, t)
