"""Training losses for the twin-decoder generator and its discriminator.

The segmentation branch uses a numerically stable log-softmax (max
subtraction inside the logsumexp) and a class-weighted cross entropy
normalized by the summed target weights. Adversarial terms are the
non-saturating GAN losses with probabilities clamped away from 0 and 1.
The generator objective is CE + lambda * MSE + omega * GAN; the small L2
penalty on the weights (beta) is realized as optimizer weight decay, not
as a loss term here.
"""

from dataclasses import dataclass

import torch

from .errors import ValidationError

EPSILON = 1e-7
_PROB_TOLERANCE = 1e-6


@dataclass(frozen=True)
class GeminiLossConfig:
    """Weights of the generator objective.

    lambda scales the SR (MSE) term, omega the adversarial term, beta is
    the optimizer weight-decay coefficient carried here for provenance.
    ``class_weights`` maps each segmentation class to its CE weight; None
    means uniform.
    """

    lambda_mse: float = 1.0
    omega_gan: float = 1e-3
    beta_l2: float = 1e-6
    class_weights: tuple = None

    def __post_init__(self):
        if self.lambda_mse < 0 or self.omega_gan < 0 or self.beta_l2 < 0:
            raise ValidationError("loss weights must be non-negative")
        if self.class_weights is not None:
            weights = tuple(float(w) for w in self.class_weights)
            if any(w < 0 for w in weights):
                raise ValidationError("class weights must be non-negative")
            object.__setattr__(self, "class_weights", weights)

    def weight_tensor(self, num_classes: int, dtype=torch.float32) -> torch.Tensor:
        if self.class_weights is None:
            return torch.ones(num_classes, dtype=dtype)
        if len(self.class_weights) != num_classes:
            raise ValidationError(
                f"class_weights has {len(self.class_weights)} entries, need {num_classes}"
            )
        return torch.tensor(self.class_weights, dtype=dtype)

    def echo(self):
        out = dict(self.__dict__)
        if out["class_weights"] is not None:
            out["class_weights"] = list(out["class_weights"])
        return out


def log_softmax(logits: torch.Tensor, dim: int = 1) -> torch.Tensor:
    """log(softmax) as z - logsumexp(z), with the max subtracted first."""
    if not torch.isfinite(logits).all():
        raise ValidationError("log_softmax input contains non-finite values")
    zmax = logits.detach().amax(dim=dim, keepdim=True)
    shifted = logits - zmax
    return shifted - shifted.exp().sum(dim=dim, keepdim=True).log()


def weighted_cross_entropy(
    logits: torch.Tensor, target: torch.Tensor, class_weights: torch.Tensor
) -> torch.Tensor:
    """Class-weighted CE over voxels, normalized by the summed target weights.

    ``logits`` is (N, K, ...), ``target`` (N, ...) integer class ids,
    ``class_weights`` (K,). Equal weights reduce to plain mean CE.
    """
    if logits.shape[0] != target.shape[0] or logits.shape[2:] != target.shape[1:]:
        raise ValidationError(
            f"logits {tuple(logits.shape)} incompatible with target {tuple(target.shape)}"
        )
    if class_weights.ndim != 1 or class_weights.shape[0] != logits.shape[1]:
        raise ValidationError("class_weights must have one entry per class")
    if target.numel() and int(target.max()) >= logits.shape[1]:
        raise ValidationError(
            f"target id {int(target.max())} out of range for {logits.shape[1]} classes"
        )
    logp = log_softmax(logits, dim=1)
    picked = logp.gather(1, target.unsqueeze(1).long()).squeeze(1)
    w = class_weights.to(logits.dtype)[target.long()]
    return -(w * picked).sum() / w.sum()


def mse_loss(pred: torch.Tensor, target: torch.Tensor) -> torch.Tensor:
    if pred.shape != target.shape:
        raise ValidationError(f"shape mismatch {tuple(pred.shape)} vs {tuple(target.shape)}")
    diff = pred - target
    return (diff * diff).mean()


def _check_probability(p: torch.Tensor, name: str) -> None:
    if p.numel() == 0:
        raise ValidationError(f"{name} is empty")
    if (p.min() < -_PROB_TOLERANCE) or (p.max() > 1.0 + _PROB_TOLERANCE):
        raise ValidationError(
            f"{name} must be probabilities in (0, 1), got range "
            f"[{p.min().item():.6g}, {p.max().item():.6g}]"
        )


def _clamped_log(p: torch.Tensor) -> torch.Tensor:
    return p.clamp(EPSILON, 1.0 - EPSILON).log()


def discriminator_loss(d_real: torch.Tensor, d_fake: torch.Tensor) -> torch.Tensor:
    """-E[log D(real)] - E[log(1 - D(fake))]; finite even at saturated outputs."""
    _check_probability(d_real, "d_real")
    _check_probability(d_fake, "d_fake")
    return -_clamped_log(d_real).mean() - _clamped_log(1.0 - d_fake).mean()


def generator_gan_loss(d_fake: torch.Tensor) -> torch.Tensor:
    """Non-saturating generator term -E[log D(fake)]."""
    _check_probability(d_fake, "d_fake")
    return -_clamped_log(d_fake).mean()


def gemini_total_loss(ce, mse, gan_g, cfg: GeminiLossConfig):
    """CE + lambda*MSE + omega*GAN; beta's L2 lives in the optimizer."""
    return ce + cfg.lambda_mse * mse + cfg.omega_gan * gan_g


def gemini_generator_loss(
    seg_logits: torch.Tensor,
    seg_target: torch.Tensor,
    grey_pred: torch.Tensor,
    grey_target: torch.Tensor,
    d_fake: torch.Tensor,
    cfg: GeminiLossConfig = GeminiLossConfig(),
):
    """Total generator loss and its parts on one batch."""
    class_weights = cfg.weight_tensor(seg_logits.shape[1], seg_logits.dtype)
    parts = {
        "ce": weighted_cross_entropy(seg_logits, seg_target, class_weights),
        "mse": mse_loss(grey_pred, grey_target),
        "gan": generator_gan_loss(d_fake),
    }
    return gemini_total_loss(parts["ce"], parts["mse"], parts["gan"], cfg), parts
