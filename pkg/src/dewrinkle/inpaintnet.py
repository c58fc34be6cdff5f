"""FFC inpainting generator, patch discriminator, input stacking and compositing."""

from __future__ import annotations

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .data import check_image, check_mask


class FourierUnit(nn.Module):
    """Global branch core: real FFT -> 1x1 conv on (real, imag) channels -> inverse real FFT.

    With ``bn_act=False`` the unit is a pure linear map in the frequency
    domain, which makes the transform round trip directly testable.
    """

    def __init__(self, in_ch: int, out_ch: int, bn_act: bool = True):
        super().__init__()
        self.conv = nn.Conv2d(2 * in_ch, 2 * out_ch, 1, bias=False)
        self.bn = nn.BatchNorm2d(2 * out_ch) if bn_act else nn.Identity()
        self.act = nn.ReLU(inplace=True) if bn_act else nn.Identity()

    @staticmethod
    def spectrum(x: torch.Tensor) -> torch.Tensor:
        ff = torch.fft.rfft2(x, norm="ortho")
        return torch.cat([ff.real, ff.imag], dim=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        z = self.act(self.bn(self.conv(self.spectrum(x))))
        re, im = z.chunk(2, dim=1)
        return torch.fft.irfft2(torch.complex(re, im), s=(h, w), norm="ortho")


class SpectralTransform(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        mid = max(out_ch // 2, 1)
        self.reduce = nn.Sequential(nn.Conv2d(in_ch, mid, 1, bias=False), nn.BatchNorm2d(mid), nn.ReLU(inplace=True))
        self.fu = FourierUnit(mid, mid)
        self.expand = nn.Conv2d(mid, out_ch, 1, bias=False)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        x = self.reduce(x)
        return self.expand(x + self.fu(x))


def _split(ch: int, ratio: float) -> tuple[int, int]:
    g = int(round(ch * ratio))
    return ch - g, g


class FFC(nn.Module):
    """Fast Fourier convolution on a (local, global) channel pair.

    ``out_l = l2l(x_l) + g2l(x_g)`` and ``out_g = l2g(x_l) + g2g(x_g)`` where
    ``g2g`` is the spectral transform and the rest are spatial convolutions.
    """

    def __init__(self, in_ch: int, out_ch: int, kernel_size: int = 3, ratio_gin: float = 0.5, ratio_gout: float = 0.5):
        super().__init__()
        self.in_cl, self.in_cg = _split(in_ch, ratio_gin)
        self.out_cl, self.out_cg = _split(out_ch, ratio_gout)
        pad = kernel_size // 2

        def conv(i: int, o: int) -> nn.Module | None:
            if i == 0 or o == 0:
                return None
            return nn.Conv2d(i, o, kernel_size, padding=pad, padding_mode="reflect", bias=False)

        self.l2l = conv(self.in_cl, self.out_cl)
        self.l2g = conv(self.in_cl, self.out_cg)
        self.g2l = conv(self.in_cg, self.out_cl)
        self.g2g = SpectralTransform(self.in_cg, self.out_cg) if self.in_cg and self.out_cg else None

    @property
    def global_modules(self) -> list[nn.Module]:
        return [m for m in (self.l2g, self.g2l, self.g2g) if m is not None]

    @torch.no_grad()
    def zero_global_(self) -> "FFC":
        """Zero every weight touching the global branch (ablation helper)."""
        for m in self.global_modules:
            for p in m.parameters():
                p.zero_()
        return self

    def forward(self, x: tuple[torch.Tensor, torch.Tensor | None]) -> tuple[torch.Tensor, torch.Tensor | None]:
        x_l, x_g = x
        out_l = out_g = None
        if self.out_cl:
            out_l = 0
            if self.l2l is not None:
                out_l = out_l + self.l2l(x_l)
            if self.g2l is not None:
                out_l = out_l + self.g2l(x_g)
        if self.out_cg:
            out_g = 0
            if self.l2g is not None:
                out_g = out_g + self.l2g(x_l)
            if self.g2g is not None:
                out_g = out_g + self.g2g(x_g)
        return out_l, out_g


class FFCBlock(nn.Module):
    """FFC followed by per-branch batch norm and ReLU."""

    def __init__(self, in_ch: int, out_ch: int, ratio_gin: float = 0.5, ratio_gout: float = 0.5):
        super().__init__()
        self.ffc = FFC(in_ch, out_ch, 3, ratio_gin, ratio_gout)
        self.bn_l = nn.BatchNorm2d(self.ffc.out_cl) if self.ffc.out_cl else nn.Identity()
        self.bn_g = nn.BatchNorm2d(self.ffc.out_cg) if self.ffc.out_cg else nn.Identity()

    def forward(self, x):
        out_l, out_g = self.ffc(x)
        if out_l is not None:
            out_l = F.relu(self.bn_l(out_l))
        if out_g is not None:
            out_g = F.relu(self.bn_g(out_g))
        return out_l, out_g


class FFCResnetBlock(nn.Module):
    def __init__(self, dim: int, ratio: float = 0.5):
        super().__init__()
        self.conv1 = FFCBlock(dim, dim, ratio, ratio)
        self.conv2 = FFCBlock(dim, dim, ratio, ratio)

    def forward(self, x):
        x_l, x_g = x
        out_l, out_g = self.conv2(self.conv1((x_l, x_g)))
        return x_l + out_l, x_g + out_g


def ffc_block_forward(block: FFC | FFCBlock | FFCResnetBlock, features: torch.Tensor) -> torch.Tensor:
    """Run an FFC-type block on a plain ``N x C x H x W`` map (channels split local-first)."""
    ffc = block if isinstance(block, FFC) else (block.ffc if isinstance(block, FFCBlock) else block.conv1.ffc)
    x_l, x_g = features[:, : ffc.in_cl], features[:, ffc.in_cl :]
    out_l, out_g = block((x_l, x_g if x_g.shape[1] else None))
    return torch.cat([o for o in (out_l, out_g) if o is not None], dim=1)


class InpaintGenerator(nn.Module):
    """Downsample (3 strided convs) -> residual FFC trunk -> upsample (3 transposed convs) -> sigmoid.

    Input is the 4-channel stacked image; spatial dims must be divisible by 8.
    """

    factor = 8

    def __init__(
        self,
        in_channels: int = 4,
        out_channels: int = 3,
        ngf: int = 64,
        n_blocks: int = 9,
        ffc_global_fraction: float = 0.5,
        max_channels: int = 512,
    ):
        super().__init__()
        if not 0.0 < ffc_global_fraction < 1.0:
            raise ValueError("ffc_global_fraction must be in (0, 1)")
        self.arch = dict(
            in_channels=in_channels,
            out_channels=out_channels,
            ngf=ngf,
            n_blocks=n_blocks,
            ffc_global_fraction=ffc_global_fraction,
            max_channels=max_channels,
        )
        ch = [min(ngf * 2**i, max_channels) for i in range(4)]
        down = [
            nn.ReflectionPad2d(3),
            nn.Conv2d(in_channels, ch[0], 7, bias=False),
            nn.BatchNorm2d(ch[0]),
            nn.ReLU(inplace=True),
        ]
        for i in range(3):
            down += [nn.Conv2d(ch[i], ch[i + 1], 3, stride=2, padding=1, bias=False), nn.BatchNorm2d(ch[i + 1]), nn.ReLU(inplace=True)]
        self.down = nn.Sequential(*down)
        self.n_local, self.n_global = _split(ch[3], ffc_global_fraction)
        self.trunk = nn.ModuleList([FFCResnetBlock(ch[3], ffc_global_fraction) for _ in range(n_blocks)])
        up = []
        for i in range(3, 0, -1):
            up += [
                nn.ConvTranspose2d(ch[i], ch[i - 1], 3, stride=2, padding=1, output_padding=1, bias=False),
                nn.BatchNorm2d(ch[i - 1]),
                nn.ReLU(inplace=True),
            ]
        up += [nn.ReflectionPad2d(3), nn.Conv2d(ch[0], out_channels, 7)]
        self.up = nn.Sequential(*up)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        if x.shape[-2] % self.factor or x.shape[-1] % self.factor:
            raise ValueError(f"input dims {tuple(x.shape[-2:])} must be divisible by {self.factor}")
        z = self.down(x)
        feats = (z[:, : self.n_local], z[:, self.n_local :])
        for block in self.trunk:
            feats = block(feats)
        return torch.sigmoid(self.up(torch.cat(feats, dim=1)))


class PatchDiscriminator(nn.Module):
    """Strided 4x4 conv stack producing a map of patch logits.

    ``n_layers=3`` gives the usual 70 px receptive field. ``forward`` returns
    ``(logits, features)`` where features are the outputs of every conv stage
    before the score head.
    """

    kernel = 4

    def __init__(self, in_channels: int = 3, ndf: int = 64, n_layers: int = 3, max_channels: int = 512):
        super().__init__()
        self.arch = dict(in_channels=in_channels, ndf=ndf, n_layers=n_layers, max_channels=max_channels)
        self.n_layers = n_layers
        stages = []
        prev = in_channels
        for i in range(n_layers + 1):
            out = min(ndf * 2**i, max_channels)
            stride = 2 if i < n_layers else 1
            stages.append(nn.Sequential(nn.Conv2d(prev, out, self.kernel, stride=stride, padding=1), nn.LeakyReLU(0.2)))
            prev = out
        self.stages = nn.ModuleList(stages)
        self.head = nn.Conv2d(prev, 1, self.kernel, stride=1, padding=1)

    @property
    def strides(self) -> list[int]:
        return [2] * self.n_layers + [1, 1]

    @property
    def receptive_field(self) -> int:
        rf, jump = 1, 1
        for s in self.strides:
            rf += (self.kernel - 1) * jump
            jump *= s
        return rf

    @property
    def total_stride(self) -> int:
        return 2**self.n_layers

    @property
    def n_stages(self) -> int:
        return len(self.stages)

    def forward(self, x: torch.Tensor) -> tuple[torch.Tensor, list[torch.Tensor]]:
        rf = self.receptive_field
        if min(x.shape[-2:]) < rf:
            raise ValueError(f"input {tuple(x.shape[-2:])} is smaller than the receptive field ({rf} px)")
        feats = []
        for stage in self.stages:
            x = stage(x)
            feats.append(x)
        return self.head(x), feats


def stack_input(x: np.ndarray, m_I: np.ndarray) -> np.ndarray:
    """``H x W x 4``: the image with holes zeroed, then the hole mask."""
    x = np.asarray(x, dtype=np.float32)
    m = check_mask(m_I, x.shape[:2], name="inpaint mask").astype(np.float32)
    return np.concatenate([x * (1.0 - m)[..., None], m[..., None]], axis=2)


def stack_input_tensor(x: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    if x.shape[-2:] != m.shape[-2:]:
        raise ValueError(f"image {tuple(x.shape)} and mask {tuple(m.shape)} dims differ")
    m = m.to(x.dtype)
    return torch.cat([x * (1 - m), m], dim=1)


def composite(x: np.ndarray, x_raw: np.ndarray, m_I: np.ndarray) -> np.ndarray:
    """Generated pixels inside the mask, original pixels (bit-exact) elsewhere."""
    x, x_raw = np.asarray(x), np.asarray(x_raw)
    if x.shape != x_raw.shape:
        raise ValueError(f"image dims differ: {x.shape} vs {x_raw.shape}")
    m = check_mask(m_I, x.shape[:2], name="inpaint mask").astype(bool)
    return np.where(m[..., None], x_raw, x).astype(x.dtype, copy=False)


def composite_tensor(x: torch.Tensor, x_raw: torch.Tensor, m: torch.Tensor) -> torch.Tensor:
    return torch.where(m.bool().expand_as(x), x_raw, x)


def _module_param(module: nn.Module) -> torch.Tensor:
    return next(module.parameters())


def inpaint_forward(gen: InpaintGenerator, x_prime: np.ndarray) -> np.ndarray:
    """Raw generator output for one stacked ``H x W x 4`` input."""
    h, w = x_prime.shape[:2]
    if h % gen.factor or w % gen.factor:
        raise ValueError(f"input dims {h}x{w} must be divisible by {gen.factor}; pad first")
    p = _module_param(gen)
    t = torch.as_tensor(np.ascontiguousarray(x_prime.transpose(2, 0, 1)), dtype=p.dtype, device=p.device)[None]
    gen.eval()
    with torch.no_grad():
        out = gen(t)
    return out[0].permute(1, 2, 0).cpu().numpy().astype(np.float32)


def inpaint_image(gen: InpaintGenerator, x: np.ndarray, m_I: np.ndarray) -> np.ndarray:
    """Stack, reflect-pad to the generator factor, inpaint, crop back and composite."""
    check_image(x)
    m_I = check_mask(m_I, x.shape[:2], name="inpaint mask")
    if not m_I.any():
        return np.array(x, copy=True)
    h, w = x.shape[:2]
    ph, pw = (-h) % gen.factor, (-w) % gen.factor
    stacked = stack_input(x, m_I)
    if ph or pw:
        stacked = np.pad(stacked, ((0, ph), (0, pw), (0, 0)), mode="reflect")
    raw = inpaint_forward(gen, stacked)[:h, :w]
    return composite(x, raw.astype(x.dtype), m_I)


def disc_forward(d: PatchDiscriminator, x: np.ndarray) -> tuple[np.ndarray, list[np.ndarray]]:
    """Patch logits and intermediate features for one ``H x W x 3`` image."""
    p = _module_param(d)
    t = torch.as_tensor(np.ascontiguousarray(np.asarray(x).transpose(2, 0, 1)), dtype=p.dtype, device=p.device)[None]
    with torch.no_grad():
        score, feats = d(t)
    return score[0, 0].cpu().numpy(), [f[0].cpu().numpy() for f in feats]
