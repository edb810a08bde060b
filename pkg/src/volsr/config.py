"""Run configuration: one JSON document drives every training/eval run.

Parsing is strict — an unknown key anywhere in the document is an error
naming its dotted path, so typos cannot silently fall back to defaults.
The parsed config serializes to a canonical nested dict (``echo``) whose
machine-independent part (``canonical`` — corpus paths stripped) is
hashed; that hash is embedded in checkpoints and reports and ties every
artifact back to the exact configuration that produced it.

The ``GV_SEED`` environment variable, when set, overrides the seed from
the document (and stands in for it when the document has none).

The small L2 penalty on generator weights appears once, as
``gemini.optimizer.weight_decay``; the loss config's ``beta_l2`` field is
filled from it so echoes stay self-describing.
"""

import json
import os
from dataclasses import dataclass, field, replace

from .augment import AugmentationSpec
from .errors import ValidationError
from .ioutil import config_hash
from .losses import GeminiLossConfig
from .nets import GeminiGeneratorSpec
from .vama import VamaConfig


@dataclass(frozen=True)
class OptimizerConfig:
    """Adam hyperparameters for one optimizer."""

    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    weight_decay: float = 0.0

    def __post_init__(self):
        if not self.lr > 0:
            raise ValidationError(f"learning rate must be > 0, got {self.lr}")
        for name in ("beta1", "beta2"):
            b = getattr(self, name)
            if not 0.0 <= b < 1.0:
                raise ValidationError(f"{name} must lie in [0, 1), got {b}")
        if self.weight_decay < 0:
            raise ValidationError(f"weight_decay must be >= 0, got {self.weight_decay}")

    def echo(self):
        return dict(self.__dict__)


GEMINI_OPTIMIZER_DEFAULT = OptimizerConfig(lr=1e-4, weight_decay=1e-6)


@dataclass(frozen=True)
class RunConfig:
    """Everything a training or evaluation run needs beyond the data dirs."""

    seed: int
    epochs: int = 30
    batch_size: int = 4
    corpus: str = None
    source_corpus: str = None
    target_corpus: str = None
    gemini_spec: GeminiGeneratorSpec = field(default_factory=lambda: GeminiGeneratorSpec(in_slices=8))
    gemini_loss: GeminiLossConfig = field(default_factory=GeminiLossConfig)
    gemini_optimizer: OptimizerConfig = GEMINI_OPTIMIZER_DEFAULT
    discriminator_base_channels: int = 64
    vama: VamaConfig = field(default_factory=VamaConfig)
    vama_phase1_epochs: int = None
    vama_phase2_epochs: int = None
    augmentation: AugmentationSpec = field(default_factory=AugmentationSpec)

    def __post_init__(self):
        if isinstance(self.seed, bool) or not isinstance(self.seed, int) or self.seed < 0:
            raise ValidationError(f"seed must be a non-negative integer, got {self.seed!r}")
        for name in ("epochs", "batch_size", "discriminator_base_channels"):
            v = getattr(self, name)
            if isinstance(v, bool) or not isinstance(v, int) or v <= 0:
                raise ValidationError(f"{name} must be a positive integer, got {v!r}")
        for name in ("vama_phase1_epochs", "vama_phase2_epochs"):
            v = getattr(self, name)
            if v is not None and (isinstance(v, bool) or not isinstance(v, int) or v <= 0):
                raise ValidationError(f"{name} must be a positive integer or null, got {v!r}")
        if self.gemini_loss.class_weights is not None:
            k = self.gemini_spec.num_classes
            if len(self.gemini_loss.class_weights) != k:
                raise ValidationError(
                    f"class_weights has {len(self.gemini_loss.class_weights)} entries, "
                    f"generator emits {k} classes"
                )

    @property
    def phase1_epochs(self) -> int:
        return self.epochs if self.vama_phase1_epochs is None else self.vama_phase1_epochs

    @property
    def phase2_epochs(self) -> int:
        return self.epochs if self.vama_phase2_epochs is None else self.vama_phase2_epochs

    def with_seed(self, seed: int) -> "RunConfig":
        return replace(self, seed=seed)

    def echo(self) -> dict:
        """The full config as the nested dict the JSON schema uses."""
        return {
            "seed": self.seed,
            "epochs": self.epochs,
            "batch_size": self.batch_size,
            "corpus": self.corpus,
            "source_corpus": self.source_corpus,
            "target_corpus": self.target_corpus,
            "gemini": {
                "spec": self.gemini_spec.echo(),
                "loss": self.gemini_loss.echo(),
                "optimizer": self.gemini_optimizer.echo(),
                "discriminator_base_channels": self.discriminator_base_channels,
            },
            "vama": {
                **self.vama.echo(),
                "phase1_epochs": self.vama_phase1_epochs,
                "phase2_epochs": self.vama_phase2_epochs,
            },
            "augmentation": None if self.augmentation is None else self.augmentation.echo(),
        }

    def canonical(self) -> dict:
        """echo() minus the machine-specific corpus paths."""
        doc = self.echo()
        for key in ("corpus", "source_corpus", "target_corpus"):
            doc.pop(key)
        return doc

    @property
    def hash(self) -> str:
        return config_hash(self.canonical())


def _reject_unknown(section: dict, allowed, path: str) -> None:
    if not isinstance(section, dict):
        raise ValidationError(f"config section {path or '<root>'} must be an object")
    unknown = sorted(set(section) - set(allowed))
    if unknown:
        where = f"{path}.{unknown[0]}" if path else unknown[0]
        raise ValidationError(f"unknown config key {where!r}")


def _as_int(value, path, minimum=None, optional=False):
    if value is None and optional:
        return None
    if isinstance(value, bool) or not isinstance(value, int):
        raise ValidationError(f"config key {path!r} must be an integer, got {value!r}")
    if minimum is not None and value < minimum:
        raise ValidationError(f"config key {path!r} must be >= {minimum}, got {value}")
    return value


def _as_float(value, path):
    if isinstance(value, bool) or not isinstance(value, (int, float)):
        raise ValidationError(f"config key {path!r} must be a number, got {value!r}")
    return float(value)


def _as_str(value, path, optional=False):
    if value is None and optional:
        return None
    if not isinstance(value, str):
        raise ValidationError(f"config key {path!r} must be a string, got {value!r}")
    return value


def _build(cls, section: dict, path: str, casts: dict):
    _reject_unknown(section, casts.keys(), path)
    kwargs = {}
    for key, value in section.items():
        kwargs[key] = casts[key](value, f"{path}.{key}")
    try:
        return cls(**kwargs)
    except ValidationError as exc:
        raise ValidationError(f"in config section {path!r}: {exc}") from exc


def parse_run_config(doc: dict, env=None) -> RunConfig:
    """Build a RunConfig from a parsed JSON document, strictly."""
    env = os.environ if env is None else env
    _reject_unknown(
        doc,
        (
            "seed", "epochs", "batch_size",
            "corpus", "source_corpus", "target_corpus",
            "gemini", "vama", "augmentation",
        ),
        "",
    )

    gem = doc.get("gemini", {})
    _reject_unknown(gem, ("spec", "loss", "optimizer", "discriminator_base_channels"), "gemini")
    for key in ("spec", "loss", "optimizer"):
        if key in gem and not isinstance(gem[key], dict):
            raise ValidationError(f"config section 'gemini.{key}' must be an object")
    spec = _build(
        GeminiGeneratorSpec, {"in_slices": 8, **gem.get("spec", {})}, "gemini.spec",
        {
            "in_slices": lambda v, p: _as_int(v, p, minimum=1),
            "num_classes": lambda v, p: _as_int(v, p, minimum=2),
            "levels": lambda v, p: _as_int(v, p, minimum=1),
            "base_channels": lambda v, p: _as_int(v, p, minimum=1),
            "scale": lambda v, p: _as_int(v, p, minimum=1),
            "inplane_scale": lambda v, p: _as_int(v, p, minimum=1),
        },
    )
    optimizer = _build(
        OptimizerConfig,
        {"lr": 1e-4, "weight_decay": 1e-6, **gem.get("optimizer", {})},
        "gemini.optimizer",
        {k: _as_float for k in ("lr", "beta1", "beta2", "weight_decay")},
    )

    loss_section = gem.get("loss", {})
    _reject_unknown(
        loss_section, ("lambda_mse", "omega_gan", "beta_l2", "class_weights"), "gemini.loss"
    )
    loss_section = dict(loss_section)
    if "beta_l2" in loss_section:
        beta = _as_float(loss_section.pop("beta_l2"), "gemini.loss.beta_l2")
        if beta != optimizer.weight_decay:
            raise ValidationError(
                f"gemini.loss.beta_l2 ({beta}) disagrees with "
                f"gemini.optimizer.weight_decay ({optimizer.weight_decay}); "
                "set the optimizer field only"
            )
    weights = loss_section.pop("class_weights", None)
    if weights is not None:
        if not isinstance(weights, list) or not all(
            isinstance(w, (int, float)) and not isinstance(w, bool) for w in weights
        ):
            raise ValidationError("config key 'gemini.loss.class_weights' must be a list of numbers")
        weights = tuple(float(w) for w in weights)
    loss_kwargs = {
        key: _as_float(value, f"gemini.loss.{key}") for key, value in loss_section.items()
    }
    try:
        loss = GeminiLossConfig(
            beta_l2=optimizer.weight_decay, class_weights=weights, **loss_kwargs
        )
    except ValidationError as exc:
        raise ValidationError(f"in config section 'gemini.loss': {exc}") from exc

    vama_section = doc.get("vama", {})
    _reject_unknown(
        vama_section,
        (
            "lambda_t", "lambda_s", "gan_weight", "kl_weight",
            "base_channels", "latent_channels", "mixture_variance",
            "lr", "beta1", "phase1_epochs", "phase2_epochs",
        ),
        "vama",
    )
    vama_section = dict(vama_section)
    phase1 = _as_int(vama_section.pop("phase1_epochs", None), "vama.phase1_epochs",
                     minimum=1, optional=True)
    phase2 = _as_int(vama_section.pop("phase2_epochs", None), "vama.phase2_epochs",
                     minimum=1, optional=True)
    vama = _build(
        VamaConfig, vama_section, "vama",
        {
            "lambda_t": _as_float,
            "lambda_s": _as_float,
            "gan_weight": _as_float,
            "kl_weight": _as_float,
            "base_channels": lambda v, p: _as_int(v, p, minimum=1),
            "latent_channels": lambda v, p: _as_int(v, p, minimum=1),
            "mixture_variance": _as_str,
            "lr": _as_float,
            "beta1": _as_float,
        },
    )

    if "augmentation" in doc and doc["augmentation"] is None:
        augmentation = None
    else:
        aug_section = doc.get("augmentation", {})
        _reject_unknown(aug_section, ("crop_size", "hflip_p", "vflip_p"), "augmentation")
        aug_section = dict(aug_section)
        if "crop_size" in aug_section and aug_section["crop_size"] is not None:
            cs = aug_section["crop_size"]
            if not isinstance(cs, list) or len(cs) != 2:
                raise ValidationError(
                    "config key 'augmentation.crop_size' must be [x, y] or null"
                )
            aug_section["crop_size"] = tuple(
                _as_int(c, "augmentation.crop_size", minimum=1) for c in cs
            )
        for key in ("hflip_p", "vflip_p"):
            if key in aug_section:
                aug_section[key] = _as_float(aug_section[key], f"augmentation.{key}")
        try:
            augmentation = AugmentationSpec(**aug_section)
        except ValidationError as exc:
            raise ValidationError(f"in config section 'augmentation': {exc}") from exc

    if "GV_SEED" in env:
        raw = env["GV_SEED"]
        try:
            seed = int(raw)
        except (TypeError, ValueError):
            raise ValidationError(f"GV_SEED must be an integer, got {raw!r}") from None
    elif "seed" in doc:
        seed = _as_int(doc["seed"], "seed", minimum=0)
    else:
        raise ValidationError("config must set 'seed' (or export GV_SEED)")

    return RunConfig(
        seed=seed,
        epochs=_as_int(doc.get("epochs", 30), "epochs", minimum=1),
        batch_size=_as_int(doc.get("batch_size", 4), "batch_size", minimum=1),
        corpus=_as_str(doc.get("corpus"), "corpus", optional=True),
        source_corpus=_as_str(doc.get("source_corpus"), "source_corpus", optional=True),
        target_corpus=_as_str(doc.get("target_corpus"), "target_corpus", optional=True),
        gemini_spec=spec,
        gemini_loss=loss,
        gemini_optimizer=optimizer,
        discriminator_base_channels=_as_int(
            gem.get("discriminator_base_channels", 64),
            "gemini.discriminator_base_channels", minimum=1,
        ),
        vama=vama,
        vama_phase1_epochs=phase1,
        vama_phase2_epochs=phase2,
        augmentation=augmentation,
    )


def load_run_config(path, env=None) -> RunConfig:
    """Read and parse a config JSON file."""
    try:
        with open(path, "r", encoding="utf-8") as fh:
            doc = json.load(fh)
    except OSError as exc:
        raise ValidationError(f"cannot read config {path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ValidationError(f"config {path} is not valid JSON: {exc}") from exc
    if not isinstance(doc, dict):
        raise ValidationError(f"config {path} must contain a JSON object")
    return parse_run_config(doc, env=env)
