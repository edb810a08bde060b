"""Network architectures.

The super-resolution generator is a 2D UNet with one encoder and twin
decoders (grey reconstruction and per-class segmentation); the stack of
low-resolution z slices enters as input channels and the network emits
``scale`` output slices per input slice, so through-plane upsampling is
channel expansion. Encoder features ride skip connections into both
decoders. Convolution blocks follow the conv -> ReLU -> BN order; the
discriminator follows conv -> BN -> LeakyReLU(0.2).

The adaptation backbones are a small variational encoder (two stride-2
stages, convolutional mu/log-sigma heads, per-stage feature taps that can
receive injected features from a frozen twin) and a UNet-style decoder
that turns a latent map plus skip features into a residual image stack.
"""

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .errors import ValidationError
from .volume import GreyVolume

LEAKY_SLOPE = 0.2
DISCRIMINATOR_BLOCKS = 8


def _conv_relu_bn(cin, cout, stride=1):
    return nn.Sequential(
        nn.Conv2d(cin, cout, 3, stride=stride, padding=1),
        nn.ReLU(inplace=True),
        nn.BatchNorm2d(cout),
    )


def _double_conv(cin, cout):
    return nn.Sequential(_conv_relu_bn(cin, cout), _conv_relu_bn(cout, cout))


@dataclass(frozen=True)
class GeminiGeneratorSpec:
    """Twin-decoder generator layout.

    ``in_slices`` low-resolution slices enter as channels; the grey head
    emits scale*in_slices channels and the segmentation head emits
    num_classes*scale*in_slices channels. ``inplane_scale`` in {1, 2} adds
    one extra transposed-convolution upsampling before the heads.
    """

    in_slices: int
    num_classes: int = 4
    levels: int = 4
    base_channels: int = 32
    scale: int = 4
    inplane_scale: int = 1

    def __post_init__(self):
        for name in ("in_slices", "num_classes", "levels", "base_channels", "scale"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")
        if self.num_classes < 2:
            raise ValidationError("num_classes must be at least 2")
        if self.inplane_scale not in (1, 2):
            raise ValidationError("inplane_scale must be 1 or 2")

    @property
    def out_slices(self):
        return self.scale * self.in_slices

    def echo(self):
        return dict(self.__dict__)


class _Decoder(nn.Module):
    """One UNet decoder path fed by the shared encoder's skip features."""

    def __init__(self, spec, out_channels):
        super().__init__()
        c0, L = spec.base_channels, spec.levels
        self.ups = nn.ModuleList()
        self.blocks = nn.ModuleList()
        for i in reversed(range(L)):
            upper = c0 * 2 ** (i + 1)
            lower = c0 * 2 ** i
            self.ups.append(nn.ConvTranspose2d(upper, lower, 2, stride=2))
            self.blocks.append(_double_conv(2 * lower, lower))
        if spec.inplane_scale == 2:
            self.final_up = nn.Sequential(
                nn.ConvTranspose2d(c0, c0, 2, stride=2), nn.ReLU(inplace=True),
                nn.BatchNorm2d(c0),
            )
        else:
            self.final_up = None
        self.head = nn.Conv2d(c0, out_channels, 1)

    def forward(self, x, skips):
        for up, block, skip in zip(self.ups, self.blocks, reversed(skips)):
            x = up(x)
            x = block(torch.cat([x, skip], dim=1))
        if self.final_up is not None:
            x = self.final_up(x)
        return self.head(x)


class GeminiGenerator(nn.Module):
    """Shared encoder, twin decoders; returns (grey stack, seg logits).

    Input (N, d, H, W); grey output (N, s*d, u*H, u*W), raw (unclamped);
    seg logits (N, K, s*d, u*H, u*W), softmax over dim 1 left to the loss.
    """

    def __init__(self, spec: GeminiGeneratorSpec):
        super().__init__()
        self.spec = spec
        c0, L = spec.base_channels, spec.levels
        self.enc = nn.ModuleList()
        cin = spec.in_slices
        for i in range(L):
            self.enc.append(_double_conv(cin, c0 * 2 ** i))
            cin = c0 * 2 ** i
        self.pool = nn.MaxPool2d(2)
        self.bottleneck = _double_conv(cin, c0 * 2 ** L)
        self.grey_decoder = _Decoder(spec, spec.out_slices)
        self.seg_decoder = _Decoder(spec, spec.num_classes * spec.out_slices)

    def forward(self, x):
        self.check_input(x)
        skips = []
        for block in self.enc:
            x = block(x)
            skips.append(x)
            x = self.pool(x)
        x = self.bottleneck(x)
        grey = self.grey_decoder(x, skips)
        seg = self.seg_decoder(x, skips)
        n, _, h, w = seg.shape
        logits = seg.view(n, self.spec.num_classes, self.spec.out_slices, h, w)
        return grey, logits

    def check_input(self, x):
        spec = self.spec
        if x.ndim != 4 or x.shape[1] != spec.in_slices:
            raise ValidationError(
                f"generator expects (N, {spec.in_slices}, H, W) input, got {tuple(x.shape)}"
            )
        stride = 2 ** spec.levels
        for axis, size in (("x", x.shape[2]), ("y", x.shape[3])):
            if size % stride != 0:
                raise ValidationError(
                    f"in-plane axis {axis} has size {size}, not divisible by 2^levels = {stride}"
                )


@dataclass(frozen=True)
class DiscriminatorSpec:
    """Conv-stack discriminator: n_blocks 3x3 convs, BN, LeakyReLU(0.2),
    global average pooling and a sigmoid scalar. Production uses the
    default eight blocks; smaller counts exist for gradient-oracle tests.
    """

    in_channels: int
    base_channels: int = 64
    n_blocks: int = DISCRIMINATOR_BLOCKS

    def __post_init__(self):
        if self.in_channels < 1 or self.base_channels < 1:
            raise ValidationError("channel counts must be positive")
        if self.n_blocks < 1:
            raise ValidationError("n_blocks must be positive")

    @classmethod
    def for_gemini(cls, gen: GeminiGeneratorSpec, base_channels: int = 64):
        """Judge of concatenated grey stack and per-class probabilities."""
        return cls(gen.out_slices * (1 + gen.num_classes), base_channels)

    def echo(self):
        return dict(self.__dict__)


class Discriminator(nn.Module):
    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        layers = []
        cin = spec.in_channels
        for i in range(spec.n_blocks):
            cout = spec.base_channels * 2 ** (i // 2)
            layers += [
                nn.Conv2d(cin, cout, 3, stride=2 if i % 2 else 1, padding=1),
                nn.BatchNorm2d(cout),
                nn.LeakyReLU(LEAKY_SLOPE, inplace=True),
            ]
            cin = cout
        self.features = nn.Sequential(*layers)
        self.head = nn.Conv2d(cin, 1, 1)

    def forward(self, x):
        if x.ndim != 4 or x.shape[1] != self.spec.in_channels:
            raise ValidationError(
                f"discriminator expects {self.spec.in_channels} channels, got {tuple(x.shape)}"
            )
        x = self.features(x)
        x = self.head(x).mean(dim=(1, 2, 3))
        return torch.sigmoid(x)


def discriminator_input(grey: torch.Tensor, seg_probs: torch.Tensor) -> torch.Tensor:
    """Concatenate a grey stack (N, S, H, W) with per-class probabilities
    (N, K, S, H, W) flattened to channels."""
    if grey.ndim != 4 or seg_probs.ndim != 5:
        raise ValidationError("expected grey (N,S,H,W) and seg_probs (N,K,S,H,W)")
    n, k, s, h, w = seg_probs.shape
    if grey.shape != (n, s, h, w):
        raise ValidationError(
            f"grey {tuple(grey.shape)} does not match seg probs {tuple(seg_probs.shape)}"
        )
    return torch.cat([grey, seg_probs.reshape(n, k * s, h, w)], dim=1)


@dataclass(frozen=True)
class VamaNetSpec:
    """Backbone layout shared by the adaptation blocks.

    The encoder sees ``in_volumes * slices`` channels (two concatenated
    volumes for the target block, one for the source block) and produces
    convolutional mu / log-sigma maps at quarter resolution; the decoder
    returns a ``slices``-channel residual image stack.
    """

    slices: int
    in_volumes: int = 2
    base_channels: int = 32
    latent_channels: int = 16

    def __post_init__(self):
        for name in ("slices", "in_volumes", "base_channels", "latent_channels"):
            if getattr(self, name) < 1:
                raise ValidationError(f"{name} must be positive")

    def echo(self):
        return dict(self.__dict__)


class VamaEncoder(nn.Module):
    """Three conv stages (full, half, quarter resolution) with feature taps.

    ``inject`` adds a frozen twin's per-stage features element-wise after
    each stage, which is how target-encoder knowledge reaches the source
    encoder. Returns (mu, log_sigma, [stage features]).
    """

    def __init__(self, spec: VamaNetSpec):
        super().__init__()
        self.spec = spec
        c = spec.base_channels
        self.stages = nn.ModuleList([
            _conv_relu_bn(spec.in_volumes * spec.slices, c),
            _conv_relu_bn(c, 2 * c, stride=2),
            _conv_relu_bn(2 * c, 4 * c, stride=2),
        ])
        self.mu_head = nn.Conv2d(4 * c, spec.latent_channels, 1)
        self.log_sigma_head = nn.Conv2d(4 * c, spec.latent_channels, 1)

    def forward(self, x, inject=None):
        expected = self.spec.in_volumes * self.spec.slices
        if x.ndim != 4 or x.shape[1] != expected:
            raise ValidationError(
                f"encoder expects {expected} channels, got {tuple(x.shape)}"
            )
        if inject is not None and len(inject) != len(self.stages):
            raise ValidationError("one injected feature map per encoder stage required")
        features = []
        for i, stage in enumerate(self.stages):
            x = stage(x)
            if inject is not None:
                x = x + inject[i]
            features.append(x)
        return self.mu_head(x), self.log_sigma_head(x), features


class VamaDecoder(nn.Module):
    """Latent map + encoder skip features -> residual image stack."""

    def __init__(self, spec: VamaNetSpec):
        super().__init__()
        self.spec = spec
        c = spec.base_channels
        self.entry = _conv_relu_bn(spec.latent_channels, 4 * c)
        self.fuse2 = _conv_relu_bn(8 * c, 4 * c)
        self.up1 = nn.Sequential(
            nn.ConvTranspose2d(4 * c, 2 * c, 2, stride=2), nn.ReLU(inplace=True),
            nn.BatchNorm2d(2 * c),
        )
        self.fuse1 = _conv_relu_bn(4 * c, 2 * c)
        self.up0 = nn.Sequential(
            nn.ConvTranspose2d(2 * c, c, 2, stride=2), nn.ReLU(inplace=True),
            nn.BatchNorm2d(c),
        )
        self.fuse0 = _conv_relu_bn(2 * c, c)
        self.head = nn.Conv2d(c, spec.slices, 1)

    def forward(self, z, features):
        if len(features) != 3:
            raise ValidationError("decoder expects the encoder's three stage features")
        x = self.entry(z)
        x = self.fuse2(torch.cat([x, features[2]], dim=1))
        x = self.up1(x)
        x = self.fuse1(torch.cat([x, features[1]], dim=1))
        x = self.up0(x)
        x = self.fuse0(torch.cat([x, features[0]], dim=1))
        return self.head(x)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def volume_to_tensor(volume: GreyVolume, dtype=torch.float32) -> torch.Tensor:
    """(nx, ny, nz) volume -> (1, nz, nx, ny) tensor, z slices as channels."""
    arr = np.ascontiguousarray(volume.voxels.transpose(2, 0, 1))
    return torch.from_numpy(arr).to(dtype).unsqueeze(0)


def tensor_to_grey(stack: torch.Tensor, spacing, phase="NA", domain="NA") -> GreyVolume:
    """(1, nz, nx, ny) tensor -> clamped GreyVolume with the given spacing."""
    if stack.ndim != 4 or stack.shape[0] != 1:
        raise ValidationError(f"expected a (1, nz, nx, ny) tensor, got {tuple(stack.shape)}")
    arr = stack.detach().squeeze(0).clamp(0.0, 1.0).cpu().numpy()
    return GreyVolume(arr.transpose(1, 2, 0).astype(np.float32), spacing, phase, domain)


def gemini_forward(model: GeminiGenerator, lr: GreyVolume):
    """Run the generator on one LR volume.

    Returns (sr: GreyVolume, seg_logits: float32 array (K, X, Y, Z)) where
    the SR grid is (u*nx, u*ny, s*nz) with spacing reduced accordingly.
    The grey output is clamped to [0, 1]; logits are raw.
    """
    spec = model.spec
    if lr.dims[2] != spec.in_slices:
        raise ValidationError(
            f"axis z has {lr.dims[2]} slices, generator expects {spec.in_slices}"
        )
    x = volume_to_tensor(lr).to(next(model.parameters()).dtype)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        grey, logits = model(x)
    if was_training:
        model.train()
    u = spec.inplane_scale
    sr_spacing = (lr.spacing[0] / u, lr.spacing[1] / u, lr.spacing[2] / spec.scale)
    sr = tensor_to_grey(grey, sr_spacing, lr.phase, lr.domain)
    logits_np = logits.squeeze(0).cpu().numpy().astype(np.float32)
    return sr, np.ascontiguousarray(logits_np.transpose(0, 2, 3, 1))


def logits_to_labels(seg_logits: np.ndarray):
    """Per-voxel argmax of a (K, X, Y, Z) logits grid -> uint8 label grid."""
    if seg_logits.ndim != 4:
        raise ValidationError(f"expected (K, X, Y, Z) logits, got {seg_logits.shape}")
    return np.argmax(seg_logits, axis=0).astype(np.uint8)
