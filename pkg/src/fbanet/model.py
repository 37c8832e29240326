"""Shared-encoder U-Net with two structurally different decoders.

Decoder 1 upsamples with transposed convolutions, decoder 2 with
bilinear/trilinear interpolation followed by a 1x1 convolution. Both read
the same encoder skips, so their disagreement on unlabeled data is a usable
training signal.
"""

from __future__ import annotations

import io
import os
from dataclasses import asdict, dataclass
from typing import Dict, Optional

import torch
import torch.nn as nn

from .errors import CheckpointError, ConfigError

CHECKPOINT_FORMAT = "fba-ckpt-v1"


@dataclass
class BackboneConfig:
    dims: int = 2
    base_channels: int = 8
    depth: int = 3
    num_classes: int = 1  # foreground classes; the network adds background
    in_channels: int = 1

    def __post_init__(self):
        if self.dims not in (2, 3):
            raise ConfigError(f"model.dims must be 2 or 3, got {self.dims}")
        if self.depth < 2:
            raise ConfigError(f"model.depth must be >= 2, got {self.depth}")
        if self.base_channels < 2:
            raise ConfigError(f"model.base_channels must be >= 2, got {self.base_channels}")
        if self.num_classes < 1:
            raise ConfigError(f"model.num_classes must be >= 1, got {self.num_classes}")

    @property
    def out_channels(self) -> int:
        return self.num_classes + 1

    @property
    def multiple(self) -> int:
        return 2 ** self.depth

    @property
    def feature_channels(self) -> int:
        return self.base_channels * 2 ** self.depth


@dataclass
class DualOutput:
    prob1: torch.Tensor
    prob2: torch.Tensor
    features: torch.Tensor          # deepest encoder map
    decoder_features: torch.Tensor  # last decoder-1 map, full resolution

    @property
    def mean_prob(self) -> torch.Tensor:
        return 0.5 * (self.prob1 + self.prob2)


def _layers(dims: int):
    if dims == 2:
        return nn.Conv2d, nn.ConvTranspose2d, nn.MaxPool2d, "bilinear"
    return nn.Conv3d, nn.ConvTranspose3d, nn.MaxPool3d, "trilinear"


def _norm(channels: int) -> nn.GroupNorm:
    return nn.GroupNorm(min(4, channels), channels)


class ConvBlock(nn.Sequential):
    def __init__(self, dims: int, cin: int, cout: int):
        conv = _layers(dims)[0]
        super().__init__(
            conv(cin, cout, 3, padding=1), _norm(cout), nn.ReLU(inplace=True),
            conv(cout, cout, 3, padding=1), _norm(cout), nn.ReLU(inplace=True),
        )


class Encoder(nn.Module):
    def __init__(self, cfg: BackboneConfig):
        super().__init__()
        _, _, pool, _ = _layers(cfg.dims)
        ch = [cfg.base_channels * 2 ** i for i in range(cfg.depth + 1)]
        self.stem = ConvBlock(cfg.dims, cfg.in_channels, ch[0])
        self.pool = pool(2)
        self.down = nn.ModuleList(ConvBlock(cfg.dims, ch[i], ch[i + 1]) for i in range(cfg.depth))

    def forward(self, x):
        skips = [self.stem(x)]
        for block in self.down:
            skips.append(block(self.pool(skips[-1])))
        return skips


class _Up(nn.Module):
    def __init__(self, dims: int, cin: int, cout: int, transposed: bool):
        super().__init__()
        conv, convt, _, mode = _layers(dims)
        if transposed:
            self.up = convt(cin, cout, 2, stride=2)
        else:
            self.up = nn.Sequential(nn.Upsample(scale_factor=2, mode=mode, align_corners=False),
                                    conv(cin, cout, 1))
        self.block = ConvBlock(dims, 2 * cout, cout)

    def forward(self, x, skip):
        return self.block(torch.cat([self.up(x), skip], dim=1))


class Decoder(nn.Module):
    def __init__(self, cfg: BackboneConfig, transposed: bool):
        super().__init__()
        conv = _layers(cfg.dims)[0]
        ch = [cfg.base_channels * 2 ** i for i in range(cfg.depth + 1)]
        self.up = nn.ModuleList(
            _Up(cfg.dims, ch[i + 1], ch[i], transposed) for i in reversed(range(cfg.depth))
        )
        self.head = conv(ch[0], cfg.out_channels, 1)

    def forward(self, skips):
        x = skips[-1]
        for up, skip in zip(self.up, reversed(skips[:-1])):
            x = up(x, skip)
        return self.head(x), x


class DualDecoderUNet(nn.Module):
    def __init__(self, cfg: BackboneConfig, zero_init_heads: bool = False):
        super().__init__()
        self.cfg = cfg
        self.encoder = Encoder(cfg)
        self.decoder1 = Decoder(cfg, transposed=True)
        self.decoder2 = Decoder(cfg, transposed=False)
        if zero_init_heads:
            for head in (self.decoder1.head, self.decoder2.head):
                nn.init.zeros_(head.weight)
                nn.init.zeros_(head.bias)

    def check_shape(self, spatial) -> None:
        m = self.cfg.multiple
        if len(spatial) != self.cfg.dims or any(s % m for s in spatial):
            raise ConfigError(
                f"input spatial shape {tuple(spatial)} must be {self.cfg.dims}-D with every "
                f"dimension a multiple of {m} (2**depth, depth={self.cfg.depth})"
            )

    def forward(self, x: torch.Tensor) -> DualOutput:
        self.check_shape(x.shape[2:])
        skips = self.encoder(x)
        logits1, dec_feat = self.decoder1(skips)
        logits2, _ = self.decoder2(skips)
        return DualOutput(torch.softmax(logits1, dim=1), torch.softmax(logits2, dim=1), skips[-1], dec_feat)


def sharpen(prob: torch.Tensor) -> torch.Tensor:
    """Per-voxel one-hot argmax along dim 1; ties go to the lowest class index."""
    with torch.no_grad():
        idx = prob.argmax(dim=1, keepdim=True)
        return torch.zeros_like(prob).scatter_(1, idx, 1.0)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


# --------------------------------------------------------------------------
# checkpoints


def save_checkpoint(path, net: DualDecoderUNet, extra_state: Optional[Dict[str, torch.Tensor]] = None,
                    metadata: Optional[dict] = None) -> None:
    """Write the network weights, its BackboneConfig and optional extras to one archive."""
    state = {f"net.{k}": v.detach().clone() for k, v in net.state_dict().items()}
    for k, v in (extra_state or {}).items():
        state[k] = v.detach().clone()
    payload = {
        "format": CHECKPOINT_FORMAT,
        "backbone": asdict(net.cfg),
        "metadata": metadata or {},
        "state": state,
    }
    buf = io.BytesIO()
    torch.save(payload, buf)
    tmp = f"{path}.tmp"
    with open(tmp, "wb") as fh:
        fh.write(buf.getvalue())
    os.replace(tmp, path)


def load_checkpoint(path, expect: Optional[BackboneConfig] = None):
    """Returns ``(net, extra_state, metadata)``."""
    try:
        payload = torch.load(path, map_location="cpu", weights_only=True)
    except Exception as exc:  # torch raises a zoo of types for bad archives
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if not isinstance(payload, dict) or payload.get("format") != CHECKPOINT_FORMAT:
        raise CheckpointError(f"{path}: not a {CHECKPOINT_FORMAT} checkpoint")
    cfg = BackboneConfig(**payload["backbone"])
    if expect is not None and cfg != expect:
        raise CheckpointError(f"{path}: checkpoint backbone {cfg} does not match configured {expect}")
    net = DualDecoderUNet(cfg)
    net_state = {k[4:]: v for k, v in payload["state"].items() if k.startswith("net.")}
    net.load_state_dict(net_state)
    extra = {k: v for k, v in payload["state"].items() if not k.startswith("net.")}
    return net, extra, payload["metadata"]
