"""U-Net backbone with optional salient-attention blocks on the contracting path."""

from __future__ import annotations

import enum
from dataclasses import asdict, dataclass, field
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import nn

CHECKPOINT_FORMAT = 1


class Architecture(str, enum.Enum):
    UNET = "unet"
    UNET_SA = "unet-sa"


# Training variants map onto two architectures; SA-C differs only in its saliency inputs.
VARIANTS = ("unet", "unet-sa", "unet-sa-c")
ARCHITECTURE_OF = {
    "unet": Architecture.UNET,
    "unet-sa": Architecture.UNET_SA,
    "unet-sa-c": Architecture.UNET_SA,
}


@dataclass(frozen=True)
class ModelSpec:
    variant: Architecture = Architecture.UNET_SA
    input_side: int = 256
    encoder_filters: tuple[int, ...] = (32, 32, 64, 64, 128)
    attention_channels: int = 128
    init_seed: int = 0

    def __post_init__(self):
        object.__setattr__(self, "variant", Architecture(self.variant))
        object.__setattr__(self, "encoder_filters", tuple(int(f) for f in self.encoder_filters))
        if self.input_side < 16 or self.input_side % 16:
            raise ValueError(f"input_side must be a positive multiple of 16, got {self.input_side}")
        if len(self.encoder_filters) != 5:
            raise ValueError(f"encoder_filters needs 5 levels, got {len(self.encoder_filters)}")
        if min(self.encoder_filters) < 1 or self.attention_channels < 1:
            raise ValueError("channel counts must be positive")

    @property
    def uses_saliency(self) -> bool:
        return self.variant is Architecture.UNET_SA

    def to_dict(self) -> dict:
        d = asdict(self)
        d["variant"] = self.variant.value
        d["encoder_filters"] = list(self.encoder_filters)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ModelSpec":
        return cls(**d)


@dataclass(frozen=True)
class AttentionBlockIO:
    """Channels-last shapes entering and leaving attention block ``level``."""

    level: int
    feature_in_shape: tuple[int, int, int]
    saliency_in_shape: tuple[int, int, int]
    attention_map_shape: tuple[int, int, int]
    output_shape: tuple[int, int, int]


def attention_io(spec: ModelSpec) -> list[AttentionBlockIO]:
    side, f = spec.input_side, spec.encoder_filters
    table = []
    for n in range(1, 5):
        s_in, s_out = side // 2 ** (n - 1), side // 2**n
        table.append(AttentionBlockIO(
            level=n,
            feature_in_shape=(s_in, s_in, f[n - 1]),
            saliency_in_shape=(side, side, 1),
            attention_map_shape=(s_out, s_out, 1),
            output_shape=(s_out, s_out, f[n - 1]),
        ))
    return table


def _double_conv(in_ch: int, out_ch: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv2d(in_ch, out_ch, 3, padding=1),
        nn.ReLU(inplace=True),
        nn.Conv2d(out_ch, out_ch, 3, padding=1),
        nn.ReLU(inplace=True),
    )


class AttentionBlock(nn.Module):
    """Down-sampling transition weighted by a saliency-driven attention map.

    Takes encoder features ``F_n`` of shape (B, k_n, s, s) and the full-resolution
    saliency map (B, 1, side, side). Returns ``O_n = A * maxpool(F_n)`` of shape
    (B, k_n, s/2, s/2), where ``A`` is a one-channel sigmoid map.

    Pooled features are projected to ``attention_channels`` with a 1x1 convolution
    before they are summed with the projected saliency, so both addends agree in
    channel count and spatial size.
    """

    def __init__(self, level: int, in_channels: int, attention_channels: int = 128):
        super().__init__()
        if level not in (1, 2, 3, 4):
            raise ValueError(f"attention level must be in 1..4, got {level}")
        self.level = level
        self.saliency_proj = nn.Conv2d(1, attention_channels, 1)
        self.feature_proj = nn.Conv2d(in_channels, attention_channels, 1)
        self.refine = nn.Conv2d(attention_channels, attention_channels, 3, padding=1)
        self.to_map = nn.Conv2d(attention_channels, 1, 1)

    def attention_map(self, pooled: torch.Tensor, saliency: torch.Tensor) -> torch.Tensor:
        s = F.max_pool2d(saliency, kernel_size=2**self.level)
        if s.shape[-2:] != pooled.shape[-2:]:
            raise ValueError(
                f"saliency pools to {tuple(s.shape[-2:])} but level-{self.level} features "
                f"pool to {tuple(pooled.shape[-2:])}"
            )
        mixed = F.relu(self.feature_proj(pooled)) + F.relu(self.saliency_proj(s))
        return torch.sigmoid(self.to_map(F.relu(self.refine(mixed))))

    def forward(self, features: torch.Tensor, saliency: torch.Tensor, return_attention: bool = False):
        pooled = F.max_pool2d(features, 2)
        att = self.attention_map(pooled, saliency)
        out = att * pooled
        if return_attention:
            return out, att
        return out


class SalientUNet(nn.Module):
    """Five-level U-Net; with ``Architecture.UNET_SA`` the four encoder
    down-transitions are attention blocks fed by the saliency map.

    Inputs are NCHW: image (B, 1, H, W), saliency (B, 1, H, W). Output is a
    (B, 1, H, W) probability map.
    """

    def __init__(self, spec: ModelSpec):
        super().__init__()
        self.spec = spec
        f = spec.encoder_filters
        self.encoders = nn.ModuleList(
            [_double_conv(1 if i == 0 else f[i - 1], f[i]) for i in range(5)]
        )
        if spec.uses_saliency:
            self.attention = nn.ModuleList(
                [AttentionBlock(n, f[n - 1], spec.attention_channels) for n in range(1, 5)]
            )
            for block, io in zip(self.attention, attention_io(spec)):
                if block.feature_proj.in_channels != io.feature_in_shape[2]:
                    raise ValueError(f"attention block {io.level} channel mismatch")
                if io.output_shape[0] * 2 != io.feature_in_shape[0]:
                    raise ValueError(f"attention block {io.level} does not halve the spatial size")
        else:
            self.attention = None
        # decoder level i (0-based, top to bottom) upsamples from f[i+1] to f[i]
        self.up_convs = nn.ModuleList([nn.Conv2d(f[i + 1], f[i], 3, padding=1) for i in range(4)])
        self.decoders = nn.ModuleList([_double_conv(2 * f[i], f[i]) for i in range(4)])
        self.head = nn.Conv2d(f[0], 1, 1)
        self.reset_parameters(spec.init_seed)

    def reset_parameters(self, seed: int) -> None:
        gen = torch.Generator().manual_seed(seed)
        for module in self.modules():
            if isinstance(module, nn.Conv2d):
                nn.init.xavier_normal_(module.weight, generator=gen)
                nn.init.zeros_(module.bias)

    def encode(self, image: torch.Tensor, saliency: torch.Tensor | None = None):
        """Return the pre-pool skip features of levels 1-4 and the bottleneck."""
        skips = []
        x = image
        for n in range(4):
            feat = self.encoders[n](x)
            skips.append(feat)
            if self.attention is not None:
                x = self.attention[n](feat, saliency)
            else:
                x = F.max_pool2d(feat, 2)
        return skips, self.encoders[4](x)

    def forward(self, image: torch.Tensor, saliency: torch.Tensor | None = None) -> torch.Tensor:
        if image.dim() != 4 or image.shape[1] != 1:
            raise ValueError(f"image must be (B, 1, H, W), got {tuple(image.shape)}")
        side = self.spec.input_side
        if image.shape[-2:] != (side, side):
            raise ValueError(f"model expects {side}x{side} inputs, got {tuple(image.shape[-2:])}")
        if self.attention is not None:
            if saliency is None:
                raise ValueError("the salient-attention model needs a saliency map")
            if saliency.shape != image.shape:
                raise ValueError(
                    f"saliency shape {tuple(saliency.shape)} != image shape {tuple(image.shape)}"
                )
        skips, x = self.encode(image, saliency)
        for i in reversed(range(4)):
            up = F.relu(self.up_convs[i](F.interpolate(x, scale_factor=2, mode="nearest")))
            x = self.decoders[i](torch.cat([skips[i], up], dim=1))
        return torch.sigmoid(self.head(x))


def build_model(spec: ModelSpec) -> SalientUNet:
    return SalientUNet(spec)


def count_parameters(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


@dataclass
class Checkpoint:
    """Weights plus everything needed to rebuild the network."""

    spec: ModelSpec
    state_dict: dict
    metadata: dict = field(default_factory=dict)

    @classmethod
    def from_model(cls, model: SalientUNet, metadata: dict | None = None) -> "Checkpoint":
        state = {k: v.detach().clone() for k, v in model.state_dict().items()}
        return cls(model.spec, state, dict(metadata or {}))

    def build(self) -> SalientUNet:
        model = build_model(self.spec)
        dtype = next(iter(self.state_dict.values())).dtype
        model.to(dtype)
        model.load_state_dict(self.state_dict)
        model.eval()
        return model

    def save(self, path: str | Path) -> None:
        path = Path(path)
        path.parent.mkdir(parents=True, exist_ok=True)
        payload = {
            "format": CHECKPOINT_FORMAT,
            "spec": self.spec.to_dict(),
            "state_dict": self.state_dict,
            "metadata": self.metadata,
        }
        tmp = path.with_suffix(path.suffix + ".tmp")
        torch.save(payload, tmp)
        tmp.replace(path)

    @classmethod
    def load(cls, path: str | Path) -> "Checkpoint":
        payload = torch.load(Path(path), map_location="cpu", weights_only=True)
        if payload.get("format") != CHECKPOINT_FORMAT:
            raise ValueError(f"{path}: unsupported checkpoint format {payload.get('format')!r}")
        return cls(ModelSpec.from_dict(payload["spec"]), payload["state_dict"], payload["metadata"])
