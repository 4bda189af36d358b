"""Feature-binding network: encoder, two-branch source separator, binding head."""

from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass
from pathlib import Path

import torch
import torch.nn.functional as F
from torch import Tensor, nn

from .errors import ValidationError

CHECKPOINT_VERSION = 1


@dataclass(frozen=True)
class NetworkConfig:
    num_classes: int = 5
    encoder_tag: str = "toy"
    output_stride: int = 8
    encoder_width: int = 16
    encoder_blocks: int = 6
    branch_hidden: int = 32
    fbh_hidden: int | None = None  # defaults to 2 * num_classes

    def __post_init__(self):
        if self.fbh_hidden is None:
            object.__setattr__(self, "fbh_hidden", 2 * self.num_classes)
        if self.output_stride not in (4, 8, 16):
            raise ValidationError(f"output_stride must be 4, 8 or 16, got {self.output_stride}")
        for name in ("num_classes", "encoder_width", "encoder_blocks", "branch_hidden", "fbh_hidden"):
            if getattr(self, name) <= 0:
                raise ValidationError(f"{name} must be positive")
        if self.encoder_tag not in ENCODERS:
            raise ValidationError(f"unknown encoder {self.encoder_tag!r}; known: {sorted(ENCODERS)}")

    def to_dict(self) -> dict:
        return asdict(self)


def _groups(ch: int) -> int:
    return math.gcd(ch, 8)


class ResidualBlock(nn.Module):
    def __init__(self, cin: int, cout: int, stride: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, stride, 1)
        self.norm1 = nn.GroupNorm(_groups(cout), cout)
        self.conv2 = nn.Conv2d(cout, cout, 3, 1, 1)
        self.norm2 = nn.GroupNorm(_groups(cout), cout)
        self.skip = None
        if stride != 1 or cin != cout:
            self.skip = nn.Conv2d(cin, cout, 1, stride)

    def forward(self, x: Tensor) -> Tensor:
        out = F.relu(self.norm1(self.conv1(x)))
        out = self.norm2(self.conv2(out))
        identity = x if self.skip is None else self.skip(x)
        return F.relu(out + identity)


class ToyEncoder(nn.Module):
    """Residual encoder: strided stem plus ``blocks`` residual blocks.

    Downsampling blocks are spread over the stack so the total stride equals
    ``output_stride``; width doubles at each of them.
    """

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        w = cfg.encoder_width
        self.stem = nn.Sequential(nn.Conv2d(3, w, 3, 2, 1), nn.GroupNorm(_groups(w), w), nn.ReLU())
        n_down = int(math.log2(cfg.output_stride)) - 1
        if n_down > cfg.encoder_blocks:
            raise ValidationError("not enough encoder blocks for the requested output_stride")
        down_at = {(2 * i + 1) * cfg.encoder_blocks // (2 * n_down) for i in range(n_down)}
        blocks, cin = [], w
        for i in range(cfg.encoder_blocks):
            stride = 2 if i in down_at else 1
            cout = cin * 2 if stride == 2 else cin
            blocks.append(ResidualBlock(cin, cout, stride))
            cin = cout
        self.blocks = nn.Sequential(*blocks)
        self.out_channels = cin

    def forward(self, x: Tensor) -> Tensor:
        return self.blocks(self.stem(x))


class ResNetEncoder(nn.Module):
    """torchvision ResNet-50 trunk with dilation for stride 8/16 (random init)."""

    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        from torchvision.models import resnet50

        if cfg.output_stride == 4:
            raise ValidationError("resnet encoder supports output_stride 8 or 16")
        dilate = [False, True, True] if cfg.output_stride == 8 else [False, False, True]
        net = resnet50(weights=None, replace_stride_with_dilation=dilate)
        self.body = nn.Sequential(net.conv1, net.bn1, net.relu, net.maxpool,
                                  net.layer1, net.layer2, net.layer3, net.layer4)
        self.out_channels = 2048

    def forward(self, x: Tensor) -> Tensor:
        return self.body(x)


ENCODERS = {"toy": ToyEncoder, "resnet": ResNetEncoder}


def make_branch(cin: int, hidden: int, num_classes: int) -> nn.Sequential:
    return nn.Sequential(nn.Conv2d(cin, hidden, 3, 1, 1), nn.ReLU(), nn.Conv2d(hidden, num_classes, 1))


class FeatureBindingHead(nn.Module):
    def __init__(self, num_classes: int, hidden: int):
        super().__init__()
        self.num_classes = num_classes
        self.conv1 = nn.Conv2d(2 * num_classes, hidden, 1)
        self.conv2 = nn.Conv2d(hidden, num_classes, 1)

    def forward(self, s_t: Tensor, s_p: Tensor) -> Tensor:
        if s_t.shape != s_p.shape or s_t.shape[1] != self.num_classes:
            raise ValidationError(f"binding head got mismatched inputs {tuple(s_t.shape)} / {tuple(s_p.shape)}")
        return self.conv2(F.relu(self.conv1(torch.cat([s_t, s_p], dim=1))))


@dataclass
class PredictionTriple:
    s_t: Tensor
    s_p: Tensor
    s_fb: Tensor | None = None

    def maps(self) -> dict[str, Tensor]:
        out = {"t": self.s_t, "p": self.s_p}
        if self.s_fb is not None:
            out["fb"] = self.s_fb
        return out


def upsample_logits(logits: Tensor, target_hw: tuple[int, int]) -> Tensor:
    if tuple(logits.shape[-2:]) == tuple(target_hw):
        return logits
    return F.interpolate(logits, size=tuple(target_hw), mode="bilinear", align_corners=False)


class BindingNet(nn.Module):
    def __init__(self, cfg: NetworkConfig):
        super().__init__()
        self.cfg = cfg
        self.encoder = ENCODERS[cfg.encoder_tag](cfg)
        feat = self.encoder.out_channels
        self.dominant = make_branch(feat, cfg.branch_hidden, cfg.num_classes)
        self.phantom = make_branch(feat, cfg.branch_hidden, cfg.num_classes)
        self.fbh = FeatureBindingHead(cfg.num_classes, cfg.fbh_hidden)
        self.register_buffer("pixel_mean", torch.zeros(1, 3, 1, 1))
        self.register_buffer("pixel_std", torch.ones(1, 3, 1, 1))
        self.reset_parameters()

    def reset_parameters(self) -> None:
        for m in self.modules():
            if isinstance(m, nn.Conv2d):
                nn.init.kaiming_normal_(m.weight, mode="fan_in", nonlinearity="relu")
                if m.bias is not None:
                    nn.init.zeros_(m.bias)

    def set_normalization(self, mean, std) -> None:
        self.pixel_mean.copy_(torch.as_tensor(mean, dtype=self.pixel_mean.dtype).view(1, 3, 1, 1))
        self.pixel_std.copy_(torch.as_tensor(std, dtype=self.pixel_std.dtype).view(1, 3, 1, 1))

    def _prepare(self, image: Tensor) -> Tensor:
        if image.dim() != 4 or image.shape[1] != 3:
            raise ValidationError(f"expected N x 3 x H x W input, got {tuple(image.shape)}")
        x = (image - self.pixel_mean) / self.pixel_std
        s = self.cfg.output_stride
        h, w = x.shape[-2:]
        ph, pw = -h % s, -w % s
        return F.pad(x, (0, pw, 0, ph)) if ph or pw else x

    def encode(self, image: Tensor) -> Tensor:
        """Features at ``ceil(H / stride) x ceil(W / stride)``."""
        return self.encoder(self._prepare(image))

    def ssm_forward(self, features: Tensor) -> tuple[Tensor, Tensor]:
        return self.dominant(features), self.phantom(features)

    def fbh_forward(self, s_t: Tensor, s_p: Tensor) -> Tensor:
        return self.fbh(s_t, s_p)

    def forward(self, image: Tensor, include_fbh: bool = True, upsample: bool = False) -> PredictionTriple:
        s_t, s_p = self.ssm_forward(self.encode(image))
        s_fb = self.fbh_forward(s_t, s_p) if include_fbh else None
        triple = PredictionTriple(s_t, s_p, s_fb)
        if upsample:
            triple = self.to_input_resolution(triple, tuple(image.shape[-2:]))
        return triple

    def to_input_resolution(self, triple: PredictionTriple, hw: tuple[int, int]) -> PredictionTriple:
        # upsample over the padded extent, then crop the padding away
        s = self.cfg.output_stride
        ph, pw = triple.s_t.shape[-2] * s, triple.s_t.shape[-1] * s

        def up(x):
            return None if x is None else upsample_logits(x, (ph, pw))[..., : hw[0], : hw[1]]

        return PredictionTriple(up(triple.s_t), up(triple.s_p), up(triple.s_fb))

    def branch_parameters(self) -> dict[str, list[nn.Parameter]]:
        return {
            "encoder": list(self.encoder.parameters()),
            "dominant": list(self.dominant.parameters()),
            "phantom": list(self.phantom.parameters()),
            "fbh": list(self.fbh.parameters()),
        }


def save_checkpoint(path: str | Path, model: BindingNet, stage: int, meta: dict | None = None) -> Path:
    path = Path(path)
    torch.save({
        "version": CHECKPOINT_VERSION,
        "config": json.dumps(model.cfg.to_dict(), sort_keys=True),
        "stage": int(stage),
        "meta": json.dumps(meta or {}, sort_keys=True),
        "state_dict": model.state_dict(),
    }, path)
    return path


def load_checkpoint(path: str | Path) -> tuple[BindingNet, dict]:
    blob = torch.load(Path(path), map_location="cpu", weights_only=True)
    if "version" not in blob:
        raise ValidationError(f"{path}: checkpoint has no version field")
    if blob["version"] != CHECKPOINT_VERSION:
        raise ValidationError(f"{path}: unsupported checkpoint version {blob['version']}")
    cfg = NetworkConfig(**json.loads(blob["config"]))
    model = BindingNet(cfg)
    model.load_state_dict(blob["state_dict"])
    info = {"stage": blob["stage"], "config": cfg, **json.loads(blob["meta"])}
    return model, info
