"""Variational adversarial domain adaptation.

Two blocks, trained in sequence. The target block autoencodes a
channel-concatenated (target, source) pair through a Gaussian latent and
emits a residual correction of the target volume. The source block then
encodes the source volume alone — with the frozen target encoder's
features added level-wise — and decodes from the *mixture* latent, whose
mean and scale are the sums of the target and source posteriors'
(Gaussian-sum). Both blocks optimize reconstruction (MSE + L1), a KL pull
toward the standard normal, and a small adversarial term; adaptation
inference feeds the source volume to both encoders with a zero latent
noise, making it deterministic.
"""

from dataclasses import dataclass, replace

import torch
from torch import nn

from .errors import ValidationError
from .losses import generator_gan_loss, mse_loss
from .nets import VamaDecoder, VamaEncoder, VamaNetSpec, tensor_to_grey, volume_to_tensor
from .volume import GreyVolume

MIXTURE_MODES = ("scale_sum", "variance_sum")


@dataclass
class GaussianLatent:
    """Diagonal Gaussian q(z) = N(mu, exp(log_sigma)^2)."""

    mu: torch.Tensor
    log_sigma: torch.Tensor

    def __post_init__(self):
        if self.mu.shape != self.log_sigma.shape:
            raise ValidationError(
                f"mu shape {tuple(self.mu.shape)} != log_sigma shape "
                f"{tuple(self.log_sigma.shape)}"
            )
        if not (torch.isfinite(self.mu).all() and torch.isfinite(self.log_sigma).all()):
            raise ValidationError("latent parameters must be finite")

    @property
    def sigma(self):
        return self.log_sigma.exp()


@dataclass
class MixtureLatent:
    """Gaussian-sum latent: mu = mu_t + mu_s, sigma from the configured rule."""

    mu: torch.Tensor
    sigma: torch.Tensor
    z: torch.Tensor

    def __post_init__(self):
        if not (self.sigma > 0).all():
            raise ValidationError("mixture sigma must be positive")


@dataclass(frozen=True)
class VamaConfig:
    """Adaptation weights and backbone sizes.

    ``kl_weight`` (default 0.5) absorbs the objective's extra half factor;
    ``mixture_variance`` selects how the two posteriors' scales combine:
    "scale_sum" adds sigmas (the sampling rule), "variance_sum" adds
    variances.
    """

    lambda_t: float = 1.0
    lambda_s: float = 1.0
    gan_weight: float = 0.05
    kl_weight: float = 0.5
    base_channels: int = 32
    latent_channels: int = 16
    mixture_variance: str = "scale_sum"
    lr: float = 2e-4
    beta1: float = 0.5

    def __post_init__(self):
        for name in ("lambda_t", "lambda_s", "gan_weight", "kl_weight", "lr"):
            if getattr(self, name) < 0:
                raise ValidationError(f"{name} must be >= 0")
        if self.mixture_variance not in MIXTURE_MODES:
            raise ValidationError(
                f"mixture_variance must be one of {MIXTURE_MODES}, got {self.mixture_variance!r}"
            )

    def echo(self):
        return dict(self.__dict__)


def reparameterize(lat: GaussianLatent, k: torch.Tensor = None, generator=None):
    """z = mu + sigma * k with k ~ N(0, I) unless supplied."""
    if k is None:
        k = torch.randn(lat.mu.shape, generator=generator, dtype=lat.mu.dtype)
    elif k.shape != lat.mu.shape and k.numel() != 1:
        raise ValidationError(f"k shape {tuple(k.shape)} incompatible with latent")
    return lat.mu + lat.sigma * k


def kl_standard_normal(lat: GaussianLatent) -> torch.Tensor:
    """KL(N(mu, sigma^2) || N(0, I)): half-sum of mu^2 + sigma^2 - log sigma^2 - 1.

    Summed over latent dimensions, averaged over the leading batch dim.
    """
    s2 = (2.0 * lat.log_sigma).exp()
    per_element = lat.mu ** 2 + s2 - 2.0 * lat.log_sigma - 1.0
    return 0.5 * per_element.flatten(1).sum(dim=1).mean() if per_element.ndim > 1 \
        else 0.5 * per_element.sum()


def _kl_mu_sigma(mu: torch.Tensor, sigma: torch.Tensor) -> torch.Tensor:
    per_element = mu ** 2 + sigma ** 2 - 2.0 * sigma.log() - 1.0
    return 0.5 * per_element.flatten(1).sum(dim=1).mean() if per_element.ndim > 1 \
        else 0.5 * per_element.sum()


def mixture_combine(
    target: GaussianLatent, source: GaussianLatent, k: torch.Tensor = None,
    generator=None, mode: str = "scale_sum",
) -> MixtureLatent:
    """Combine two posteriors into the Gaussian-sum latent and sample it.

    mu_m = mu_t + mu_s; sigma_m = sigma_t + sigma_s under "scale_sum" (the
    sampling rule), or sqrt(sigma_t^2 + sigma_s^2) under "variance_sum";
    z_m = mu_m + sigma_m * k. Commutative in its two latents.
    """
    if target.mu.shape != source.mu.shape:
        raise ValidationError(
            f"latent shape mismatch: {tuple(target.mu.shape)} vs {tuple(source.mu.shape)}"
        )
    if mode not in MIXTURE_MODES:
        raise ValidationError(f"unknown mixture mode {mode!r}")
    mu = target.mu + source.mu
    if mode == "scale_sum":
        sigma = target.sigma + source.sigma
    else:
        sigma = (target.sigma ** 2 + source.sigma ** 2).sqrt()
    if k is None:
        k = torch.randn(mu.shape, generator=generator, dtype=mu.dtype)
    z = mu + sigma * k
    return MixtureLatent(mu, sigma, z)


def _l1(a, b):
    return (a - b).abs().mean()


def _block_parts(reference, output, kl, d_fake, cfg: VamaConfig):
    parts = {
        "mse": mse_loss(output, reference),
        "kl": kl,
        "l1": _l1(output, reference),
        "gan": generator_gan_loss(d_fake) if d_fake is not None
        else torch.zeros((), dtype=output.dtype),
    }
    total = (parts["mse"] + cfg.kl_weight * parts["kl"] + parts["l1"]
             + cfg.gan_weight * parts["gan"])
    return total, parts


def target_block_loss(reference, output, lat: GaussianLatent, d_fake, cfg: VamaConfig):
    """MSE + kl_weight*KL + L1 + gan_weight*GAN against the target volume."""
    return _block_parts(reference, output, kl_standard_normal(lat), d_fake, cfg)


def source_block_loss(reference, output, mix: MixtureLatent, d_fake, cfg: VamaConfig):
    """Same composition, with the KL taken on the mixture posterior."""
    return _block_parts(reference, output, _kl_mu_sigma(mix.mu, mix.sigma), d_fake, cfg)


class VamaModel(nn.Module):
    """The four adaptation networks plus the residual wiring between them."""

    def __init__(self, slices: int, cfg: VamaConfig = VamaConfig()):
        super().__init__()
        if slices < 1:
            raise ValidationError("slices must be positive")
        self.slices = slices
        self.cfg = cfg
        self.target_spec = VamaNetSpec(slices, 2, cfg.base_channels, cfg.latent_channels)
        self.source_spec = VamaNetSpec(slices, 1, cfg.base_channels, cfg.latent_channels)
        self.target_encoder = VamaEncoder(self.target_spec)
        self.target_decoder = VamaDecoder(self.target_spec)
        self.source_encoder = VamaEncoder(self.source_spec)
        self.source_decoder = VamaDecoder(self.source_spec)

    def target_encode(self, i_target: torch.Tensor, i_source: torch.Tensor):
        """Concat the pair on channels and encode to the target posterior."""
        if i_target.shape != i_source.shape:
            raise ValidationError(
                f"target/source shapes differ: {tuple(i_target.shape)} vs "
                f"{tuple(i_source.shape)}"
            )
        mu, log_sigma, features = self.target_encoder(torch.cat([i_target, i_source], dim=1))
        return GaussianLatent(mu, log_sigma), features

    def target_reconstruct(self, i_target, z, features):
        """Residual output I_t + lambda_t * decoded correction."""
        return i_target + self.cfg.lambda_t * self.target_decoder(z, features)

    def target_forward(self, i_target, i_source, k=None, generator=None):
        lat, features = self.target_encode(i_target, i_source)
        z = reparameterize(lat, k=k, generator=generator)
        return self.target_reconstruct(i_target, z, features), lat

    def source_forward(self, i_target, i_source, k=None, generator=None):
        """Source branch: frozen target posterior + infused source encoder.

        The target encoder runs without gradients (its phase is over); its
        stage features are added into the source encoder, the two
        posteriors are summed into the mixture, and the source decoder
        produces the residual correction of I_s.
        """
        with torch.no_grad():
            target_lat, target_features = self.target_encode(i_target, i_source)
        mu, log_sigma, source_features = self.source_encoder(
            i_source, inject=[f.detach() for f in target_features]
        )
        source_lat = GaussianLatent(mu, log_sigma)
        mix = mixture_combine(
            target_lat, source_lat, k=k, generator=generator,
            mode=self.cfg.mixture_variance,
        )
        out = i_source + self.cfg.lambda_s * self.source_decoder(mix.z, source_features)
        return out, mix, source_lat


def adapt(model: VamaModel, volume: GreyVolume) -> GreyVolume:
    """Map a source-domain volume toward the target domain.

    The target encoder receives the source volume duplicated on channels
    (the training-time pair arity), the latent noise is zero, and the
    source decoder's residual output is clamped to [0, 1]. Deterministic
    for a fixed checkpoint.
    """
    if volume.dims[2] != model.slices:
        raise ValidationError(
            f"volume has {volume.dims[2]} slices, adaptation model expects {model.slices}"
        )
    x = volume_to_tensor(volume).to(next(model.parameters()).dtype)
    was_training = model.training
    model.eval()
    with torch.no_grad():
        out, _, _ = model.source_forward(x, x, k=torch.zeros(()))
    if was_training:
        model.train()
    return tensor_to_grey(out, volume.spacing, volume.phase, "target")
