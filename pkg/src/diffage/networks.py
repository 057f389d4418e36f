"""The three learnable components: noise predictor, semantic encoder, age head.

The noise predictor is a U-Net whose stem expands a single channel to the
base width, followed by five stages of three convolutional blocks with
channel multipliers (1, 1, 2, 3, 4), stride-2 downsampling between stages,
and three single-head attention blocks over the flattened middle
representation.  The upward path mirrors the downward path; a residual
connection crosses wherever the two paths have equal channel width.  Group
normalization follows every convolution, with SiLU activations.

Every residual block is conditioned on an embedding combining the
sinusoidal timestep encoding and the semantic latent (per-block affine
scale-and-shift).  The semantic encoder reuses the downward path and
middle block topology (separate weights, no conditioning) and projects the
pooled features to the latent.  The age head is an MLP (latent -> 128 ->
32 -> 1) with ReLU, batch normalization and 0.5 dropout between layers and
a softplus output so predicted ages are strictly positive.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .schedule import NoiseSchedule, make_linear_schedule

CHECKPOINT_FORMAT_VERSION = 1


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

@dataclass(frozen=True)
class UNetConfig:
    """Backbone hyperparameters; defaults reproduce the full-size model."""

    image_size: int = 128
    in_channels: int = 1
    base_channels: int = 32
    channel_multipliers: tuple = (1, 1, 2, 3, 4)
    convs_per_stage: int = 3
    attention_blocks: int = 3
    norm_groups: int = 8
    time_embedding_dim: int = 128
    latent_dim: int = 512

    def __post_init__(self):
        object.__setattr__(self, "channel_multipliers",
                           tuple(int(m) for m in self.channel_multipliers))
        if self.in_channels < 1 or self.base_channels < 1:
            raise ValueError("channel counts must be positive")
        if len(self.channel_multipliers) < 1:
            raise ValueError("need at least one stage")
        if self.convs_per_stage < 1:
            raise ValueError("convs_per_stage must be >= 1")
        if self.time_embedding_dim % 2 != 0:
            raise ValueError("time_embedding_dim must be even")
        if self.latent_dim < 1:
            raise ValueError("latent_dim must be positive")
        down_factor = 2 ** (self.num_stages - 1)
        if self.image_size % down_factor != 0 or self.image_size < down_factor:
            raise ValueError(
                f"image_size {self.image_size} not divisible by the "
                f"downsampling factor {down_factor} of {self.num_stages} stages")
        for ch in self.stage_channels:
            if ch % self.norm_groups != 0:
                raise ValueError(
                    f"stage width {ch} not divisible by norm_groups "
                    f"{self.norm_groups}")

    @property
    def num_stages(self) -> int:
        return len(self.channel_multipliers)

    @property
    def stage_channels(self) -> tuple:
        return tuple(self.base_channels * m for m in self.channel_multipliers)

    @property
    def middle_resolution(self) -> int:
        return self.image_size // 2 ** (self.num_stages - 1)

    @property
    def cond_dim(self) -> int:
        return 4 * self.base_channels


@dataclass(frozen=True)
class AgeHeadConfig:
    """Dense sizes for the age regressor; the last layer maps to the age."""

    layer_sizes: tuple = (512, 128, 32, 1)
    dropout: float = 0.5

    def __post_init__(self):
        object.__setattr__(self, "layer_sizes",
                           tuple(int(s) for s in self.layer_sizes))
        if len(self.layer_sizes) < 2 or self.layer_sizes[-1] != 1:
            raise ValueError("layer_sizes must end in 1 and have >= 2 entries")
        if any(s < 1 for s in self.layer_sizes):
            raise ValueError("layer sizes must be positive")
        if not 0.0 <= self.dropout < 1.0:
            raise ValueError("dropout must lie in [0, 1)")


def paper_config() -> UNetConfig:
    """Full-size configuration (128x128 inputs, 512-dim latent)."""
    return UNetConfig()


def reduced_config() -> UNetConfig:
    """Small configuration for fast tests: 32x32 inputs, 64-dim latent."""
    return UNetConfig(image_size=32, base_channels=8, time_embedding_dim=32,
                      latent_dim=64)


def tiny_config() -> UNetConfig:
    """Minimal 8x8 configuration used by gradient-accuracy checks."""
    return UNetConfig(image_size=8, base_channels=4,
                      channel_multipliers=(1, 2), convs_per_stage=2,
                      attention_blocks=1, norm_groups=2,
                      time_embedding_dim=8, latent_dim=8)


def default_age_config(latent_dim: int) -> AgeHeadConfig:
    return AgeHeadConfig(layer_sizes=(latent_dim, 128, 32, 1))


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

def timestep_embedding(t: torch.Tensor, dim: int,
                       dtype: torch.dtype = torch.float32) -> torch.Tensor:
    """Sinusoidal embedding of integer steps, shape (B, dim)."""
    half = dim // 2
    scale = math.log(10000.0) / max(half - 1, 1)
    freqs = torch.exp(-scale * torch.arange(half, dtype=dtype,
                                            device=t.device))
    args = t.to(dtype)[:, None] * freqs[None, :]
    return torch.cat([torch.cos(args), torch.sin(args)], dim=1)


class ResidualBlock(nn.Module):
    """conv -> group norm -> (affine modulation) -> SiLU, plus skip."""

    def __init__(self, in_ch: int, out_ch: int, groups: int,
                 cond_dim: int | None = None):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)
        self.norm = nn.GroupNorm(groups, out_ch)
        self.film = nn.Linear(cond_dim, 2 * out_ch) if cond_dim else None
        self.skip = (nn.Identity() if in_ch == out_ch
                     else nn.Conv2d(in_ch, out_ch, 1))

    def forward(self, x, cond=None):
        h = self.norm(self.conv(x))
        if self.film is not None:
            scale, shift = self.film(F.silu(cond)).chunk(2, dim=1)
            h = h * (1.0 + scale[:, :, None, None]) + shift[:, :, None, None]
        return F.silu(h) + self.skip(x)


class AttentionBlock(nn.Module):
    """Single-head self-attention over the flattened spatial grid."""

    def __init__(self, channels: int, groups: int):
        super().__init__()
        self.norm = nn.GroupNorm(groups, channels)
        self.qkv = nn.Conv2d(channels, 3 * channels, 1)
        self.proj = nn.Conv2d(channels, channels, 1)

    def forward(self, x):
        b, c, hgt, wid = x.shape
        q, k, v = self.qkv(self.norm(x)).reshape(b, 3 * c, hgt * wid).chunk(3, dim=1)
        attn = torch.softmax(torch.einsum("bci,bcj->bij", q, k) / math.sqrt(c),
                             dim=-1)
        out = torch.einsum("bij,bcj->bci", attn, v).reshape(b, c, hgt, wid)
        return x + self.proj(out)


class Downsample(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, x):
        return self.conv(x)


class Upsample(nn.Module):
    def __init__(self, in_ch: int, out_ch: int):
        super().__init__()
        self.conv = nn.Conv2d(in_ch, out_ch, 3, padding=1)

    def forward(self, x):
        return self.conv(F.interpolate(x, scale_factor=2, mode="nearest"))


def _down_modules(cfg: UNetConfig, cond_dim: int | None):
    chans = cfg.stage_channels
    stem = nn.Conv2d(cfg.in_channels, chans[0], 3, padding=1)
    stages = nn.ModuleList()
    prev = chans[0]
    for ch in chans:
        blocks = nn.ModuleList()
        for b in range(cfg.convs_per_stage):
            blocks.append(ResidualBlock(prev if b == 0 else ch, ch,
                                        cfg.norm_groups, cond_dim))
        stages.append(blocks)
        prev = ch
    downs = nn.ModuleList(Downsample(ch) for ch in chans[:-1])
    middle = nn.ModuleList(AttentionBlock(chans[-1], cfg.norm_groups)
                           for _ in range(cfg.attention_blocks))
    return stem, stages, downs, middle


def _as_step_tensor(t, batch: int, device) -> torch.Tensor:
    if isinstance(t, torch.Tensor):
        t = t.to(device=device, dtype=torch.long)
        if t.ndim == 0:
            t = t.expand(batch)
    else:
        t = torch.full((batch,), int(t), dtype=torch.long, device=device)
    if t.shape != (batch,):
        raise ValueError(f"step tensor shape {tuple(t.shape)} != ({batch},)")
    if bool((t < 0).any()):
        raise ValueError("negative step index")
    return t


class NoisePredictor(nn.Module):
    """U-Net predicting the corrupting noise from (x_t, t, z_sem)."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        chans = cfg.stage_channels
        self.time_mlp = nn.Sequential(
            nn.Linear(cfg.time_embedding_dim, cfg.cond_dim), nn.SiLU(),
            nn.Linear(cfg.cond_dim, cfg.cond_dim))
        self.z_proj = nn.Linear(cfg.latent_dim, cfg.cond_dim)
        self.stem, self.down_stages, self.downs, self.middle = \
            _down_modules(cfg, cfg.cond_dim)
        self.up_stages = nn.ModuleList()
        for ch in reversed(chans):
            self.up_stages.append(nn.ModuleList(
                ResidualBlock(ch, ch, cfg.norm_groups, cfg.cond_dim)
                for _ in range(cfg.convs_per_stage)))
        self.ups = nn.ModuleList(
            Upsample(chans[i + 1], chans[i])
            for i in reversed(range(len(chans) - 1)))
        self.out_norm = nn.GroupNorm(cfg.norm_groups, chans[0])
        self.out_conv = nn.Conv2d(chans[0], cfg.in_channels, 3, padding=1)

    def forward(self, x, t, z_sem):
        cfg = self.cfg
        if x.shape[-2:] != (cfg.image_size, cfg.image_size):
            raise ValueError(
                f"expected {cfg.image_size}x{cfg.image_size} input, "
                f"got {tuple(x.shape[-2:])}")
        z_sem = _as_latent_batch(z_sem, x.shape[0], cfg.latent_dim)
        steps = _as_step_tensor(t, x.shape[0], x.device)
        cond = self.time_mlp(timestep_embedding(
            steps, cfg.time_embedding_dim, dtype=x.dtype)) + self.z_proj(z_sem)

        h = self.stem(x)
        skips = []
        for i, blocks in enumerate(self.down_stages):
            for block in blocks:
                h = block(h, cond)
            skips.append(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        for attn in self.middle:
            h = attn(h)

        h = h + skips[-1]
        for block in self.up_stages[0]:
            h = block(h, cond)
        for j, up in enumerate(self.ups):
            h = up(h)
            h = h + skips[len(skips) - 2 - j]
            for block in self.up_stages[j + 1]:
                h = block(h, cond)
        return self.out_conv(F.silu(self.out_norm(h)))


class SemanticEncoder(nn.Module):
    """Downward path + middle block, pooled and projected to the latent."""

    def __init__(self, cfg: UNetConfig):
        super().__init__()
        self.cfg = cfg
        self.stem, self.down_stages, self.downs, self.middle = \
            _down_modules(cfg, None)
        last = cfg.stage_channels[-1]
        self.out_norm = nn.GroupNorm(cfg.norm_groups, last)
        self.out_proj = nn.Linear(last, cfg.latent_dim)

    def forward(self, x0):
        cfg = self.cfg
        if x0.shape[-2:] != (cfg.image_size, cfg.image_size):
            raise ValueError(
                f"expected {cfg.image_size}x{cfg.image_size} input, "
                f"got {tuple(x0.shape[-2:])}")
        h = self.stem(x0)
        for i, blocks in enumerate(self.down_stages):
            for block in blocks:
                h = block(h)
            if i < len(self.downs):
                h = self.downs[i](h)
        for attn in self.middle:
            h = attn(h)
        h = F.silu(self.out_norm(h)).mean(dim=(2, 3))
        return self.out_proj(h)


def _as_latent_batch(z, batch: int, latent_dim: int) -> torch.Tensor:
    if z.ndim == 1:
        z = z[None, :].expand(batch, -1)
    if z.shape != (batch, latent_dim):
        raise ValueError(
            f"latent shape {tuple(z.shape)} != ({batch}, {latent_dim})")
    return z


def inverse_softplus(y: float) -> float:
    """x with softplus(x) == y, for y > 0."""
    if y <= 0:
        raise ValueError("softplus output is strictly positive")
    if y > 30.0:  # softplus(x) ~ x; expm1 would overflow far above this
        return float(y)
    return math.log(math.expm1(y))


class AgeHead(nn.Module):
    """MLP regressor from the semantic latent to a positive age in years."""

    def __init__(self, cfg: AgeHeadConfig):
        super().__init__()
        self.cfg = cfg
        sizes = cfg.layer_sizes
        layers = []
        for a, b in zip(sizes[:-2], sizes[1:-1]):
            layers += [nn.Linear(a, b), nn.ReLU(), nn.BatchNorm1d(b),
                       nn.Dropout(cfg.dropout)]
        self.body = nn.Sequential(*layers)
        self.out = nn.Linear(sizes[-2], sizes[-1])

    def forward(self, z):
        if not torch.isfinite(z).all():
            raise ValueError("latent contains non-finite entries")
        if z.ndim == 1:
            z = z[None, :]
        if z.shape[1] != self.cfg.layer_sizes[0]:
            raise ValueError(
                f"latent dim {z.shape[1]} != {self.cfg.layer_sizes[0]}")
        return F.softplus(self.out(self.body(z))).squeeze(-1)

    def set_initial_age(self, age_years: float) -> None:
        """Bias the output so an untrained head predicts a plausible age."""
        with torch.no_grad():
            self.out.weight.zero_()
            self.out.bias.fill_(inverse_softplus(float(age_years)))


# ---------------------------------------------------------------------------
# bundle
# ---------------------------------------------------------------------------

@dataclass
class ModelBundle:
    """The trained trio plus its schedule, configs and age normalization."""

    noise_model: NoisePredictor
    encoder: SemanticEncoder
    age_head: AgeHead
    sched: NoiseSchedule
    unet_config: UNetConfig
    age_config: AgeHeadConfig
    age_mean: float | None = None
    age_std: float | None = None

    @classmethod
    def create(cls, unet_config: UNetConfig | None = None,
               age_config: AgeHeadConfig | None = None,
               sched: NoiseSchedule | None = None,
               seed: int = 0) -> "ModelBundle":
        unet_config = unet_config or paper_config()
        age_config = age_config or default_age_config(unet_config.latent_dim)
        if age_config.layer_sizes[0] != unet_config.latent_dim:
            raise ValueError(
                f"age head input {age_config.layer_sizes[0]} != latent dim "
                f"{unet_config.latent_dim}")
        sched = sched or make_linear_schedule()
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            noise_model = NoisePredictor(unet_config)
            encoder = SemanticEncoder(unet_config)
            age_head = AgeHead(age_config)
        return cls(noise_model, encoder, age_head, sched,
                   unet_config, age_config)

    def modules(self) -> tuple:
        return (self.noise_model, self.encoder, self.age_head)

    def parameters(self):
        for m in self.modules():
            yield from m.parameters()

    def train(self) -> "ModelBundle":
        for m in self.modules():
            m.train()
        return self

    def eval(self) -> "ModelBundle":
        for m in self.modules():
            m.eval()
        return self

    def to(self, dtype: torch.dtype) -> "ModelBundle":
        for m in self.modules():
            m.to(dtype)
        return self

    def semantic_encode(self, x0: torch.Tensor) -> torch.Tensor:
        return self.encoder(x0)

    def noise_predict(self, x_t, t, z_sem) -> torch.Tensor:
        t_arr = torch.as_tensor(t)
        if bool((t_arr < 0).any()) or bool((t_arr >= self.sched.num_steps).any()):
            raise ValueError(
                f"step {t} outside [0, {self.sched.num_steps})")
        return self.noise_model(x_t, t, z_sem)

    def age_predict(self, z_sem: torch.Tensor, train: bool = False) -> torch.Tensor:
        """Predicted age in years; eval mode (the default) is deterministic."""
        was_training = self.age_head.training
        self.age_head.train(train)
        try:
            return self.age_head(z_sem)
        finally:
            self.age_head.train(was_training)


def count_parameters(bundle: ModelBundle) -> dict:
    """Trainable-parameter counts per component plus their total."""
    counts = {
        "noise_predictor": sum(p.numel() for p in
                               bundle.noise_model.parameters()
                               if p.requires_grad),
        "semantic_encoder": sum(p.numel() for p in
                                bundle.encoder.parameters()
                                if p.requires_grad),
        "age_head": sum(p.numel() for p in bundle.age_head.parameters()
                        if p.requires_grad),
    }
    counts["total"] = sum(counts.values())
    return counts


# ---------------------------------------------------------------------------
# checkpoints: binary weight archive + human-readable json sidecar
# ---------------------------------------------------------------------------

def save_checkpoint(bundle: ModelBundle, path, optimizer=None,
                    step: int | None = None, train_config: dict | None = None,
                    extra: dict | None = None) -> str:
    """Write ``path`` (torch archive) and ``path + '.json'`` (metadata)."""
    import json
    from pathlib import Path

    from . import __version__

    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    payload = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "unet_config": asdict(bundle.unet_config),
        "age_config": asdict(bundle.age_config),
        "schedule_betas": torch.as_tensor(bundle.sched.betas,
                                          dtype=torch.float64),
        "age_mean": bundle.age_mean,
        "age_std": bundle.age_std,
        "noise_model": bundle.noise_model.state_dict(),
        "encoder": bundle.encoder.state_dict(),
        "age_head": bundle.age_head.state_dict(),
        "optimizer": optimizer.state_dict() if optimizer is not None else None,
        "step": step,
        "train_config": train_config,
        "extra": extra or {},
    }
    torch.save(payload, path)

    sched = bundle.sched
    sidecar = {
        "format_version": CHECKPOINT_FORMAT_VERSION,
        "package_version": __version__,
        "unet_config": asdict(bundle.unet_config),
        "age_config": asdict(bundle.age_config),
        "schedule": {"num_steps": sched.num_steps,
                     "beta_first": float(sched.betas[0]),
                     "beta_last": float(sched.betas[-1])},
        "age_normalization": {"mean": bundle.age_mean, "std": bundle.age_std},
        "parameter_counts": count_parameters(bundle),
        "step": step,
        "train_config": train_config,
    }
    with open(f"{path}.json", "w", encoding="utf-8") as fh:
        json.dump(sidecar, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return str(path)


def load_checkpoint(path) -> tuple:
    """Read a checkpoint written by :func:`save_checkpoint`.

    Returns ``(bundle, state)`` where ``state`` carries the optimizer state
    dict, step counter, train-config snapshot and any extra payload.
    """
    payload = torch.load(path, map_location="cpu", weights_only=False)
    version = payload.get("format_version")
    if version != CHECKPOINT_FORMAT_VERSION:
        raise ValueError(f"unsupported checkpoint format {version!r}")
    betas = payload["schedule_betas"].numpy()
    sched = NoiseSchedule(num_steps=len(betas), betas=betas,
                          alpha_bars=(1.0 - betas).cumprod())
    unet_config = UNetConfig(**payload["unet_config"])
    age_config = AgeHeadConfig(**payload["age_config"])
    bundle = ModelBundle.create(unet_config, age_config, sched=sched)
    bundle.noise_model.load_state_dict(payload["noise_model"])
    bundle.encoder.load_state_dict(payload["encoder"])
    bundle.age_head.load_state_dict(payload["age_head"])
    bundle.age_mean = payload["age_mean"]
    bundle.age_std = payload["age_std"]
    state = {
        "optimizer": payload["optimizer"],
        "step": payload["step"],
        "train_config": payload["train_config"],
        "extra": payload.get("extra", {}),
    }
    return bundle, state
