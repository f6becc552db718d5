"""Residual encoder-decoder generators and PatchGAN-style discriminators.

All modules take NCHW float tensors. Generators map ``N x 3 x H x W`` images
in [0, 1] to the same shape in [0, 1]; discriminators return an unbounded
``N x 1 x H/2^k x W/2^k`` score map.
"""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Union

import numpy as np
import torch
import torch.nn as nn


@dataclass(frozen=True)
class GeneratorSpec:
    in_channels: int = 3
    out_channels: int = 3
    width: int = 32
    levels: int = 2
    res_blocks: int = 3

    def __post_init__(self):
        if self.width < 8:
            raise ValueError(f"generator width must be >= 8, got {self.width}")
        if self.levels < 1:
            raise ValueError(f"generator levels must be >= 1, got {self.levels}")
        if self.res_blocks < 0:
            raise ValueError("res_blocks must be >= 0")


@dataclass(frozen=True)
class DiscriminatorSpec:
    in_channels: int = 3
    width: int = 32
    blocks: int = 3

    def __post_init__(self):
        if self.width < 8:
            raise ValueError(f"discriminator width must be >= 8, got {self.width}")
        if self.blocks < 1:
            raise ValueError(f"discriminator blocks must be >= 1, got {self.blocks}")


def _norm(channels: int) -> nn.Module:
    return nn.InstanceNorm2d(channels, affine=True)


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.body = nn.Sequential(
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            _norm(channels),
            nn.ReLU(inplace=True),
            nn.Conv2d(channels, channels, 3, padding=1, padding_mode="reflect"),
            _norm(channels),
        )

    def forward(self, x):
        return x + self.body(x)


class Generator(nn.Module):
    """Encoder, residual bottleneck, decoder, then a per-pixel head.

    The head sees the decoder features together with the raw input, so
    absolute colour survives the instance normalization; stain mappings
    are largely per-pixel and need it.
    """

    def __init__(self, spec: GeneratorSpec):
        super().__init__()
        self.spec = spec
        w = spec.width
        layers = [
            nn.Conv2d(spec.in_channels, w, 3, padding=1, padding_mode="reflect"),
            _norm(w),
            nn.ReLU(inplace=True),
        ]
        ch = w
        for _ in range(spec.levels):
            layers += [nn.Conv2d(ch, ch * 2, 3, stride=2, padding=1, padding_mode="reflect"), _norm(ch * 2), nn.ReLU(inplace=True)]
            ch *= 2
        layers += [ResidualBlock(ch) for _ in range(spec.res_blocks)]
        for _ in range(spec.levels):
            layers += [
                nn.Upsample(scale_factor=2, mode="nearest"),
                nn.Conv2d(ch, ch // 2, 3, padding=1, padding_mode="reflect"),
                _norm(ch // 2),
                nn.ReLU(inplace=True),
            ]
            ch //= 2
        self.body = nn.Sequential(*layers)
        self.head = nn.Sequential(
            nn.Conv2d(ch + spec.in_channels, w, 1),
            nn.ReLU(inplace=True),
            nn.Conv2d(w, spec.out_channels, 1),
        )

    @property
    def stride(self) -> int:
        return 2 ** self.spec.levels

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        if h % self.stride or w % self.stride:
            raise ValueError(f"input size {h}x{w} is not divisible by {self.stride}")
        feats = self.body(x)
        return torch.sigmoid(self.head(torch.cat([feats, x], dim=1)))


class Discriminator(nn.Module):
    def __init__(self, spec: DiscriminatorSpec):
        super().__init__()
        self.spec = spec
        layers = []
        ch_in, ch = spec.in_channels, spec.width
        for i in range(spec.blocks):
            layers.append(nn.Conv2d(ch_in, ch, 4, stride=2, padding=1))
            if i > 0:
                layers.append(_norm(ch))
            layers.append(nn.LeakyReLU(0.2, inplace=True))
            ch_in, ch = ch, min(ch * 2, spec.width * 8)
        layers.append(nn.Conv2d(ch_in, 1, 3, padding=1))
        self.model = nn.Sequential(*layers)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h, w = x.shape[-2:]
        k = 2 ** self.spec.blocks
        if h < k or w < k:
            raise ValueError(f"input {h}x{w} is smaller than the discriminator stride {k}")
        return self.model(x)


RngState = Union[int, torch.Generator]


def _seeded(rng_state: RngState, factory):
    seed = rng_state if isinstance(rng_state, int) else int(rng_state.initial_seed())
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        return factory()


def build_generator(spec: GeneratorSpec = GeneratorSpec(), rng_state: RngState = 0) -> Generator:
    return _seeded(rng_state, lambda: Generator(spec))


def build_discriminator(spec: DiscriminatorSpec = DiscriminatorSpec(), rng_state: RngState = 0) -> Discriminator:
    return _seeded(rng_state, lambda: Discriminator(spec))


def spec_to_dict(spec) -> dict:
    return asdict(spec)


def to_tensor(patches: np.ndarray) -> torch.Tensor:
    """``N x H x W x 3`` (or one ``H x W x 3``) array to an NCHW float32 tensor."""
    arr = np.asarray(patches, dtype=np.float32)
    if arr.ndim == 3:
        arr = arr[None]
    return torch.from_numpy(np.ascontiguousarray(arr.transpose(0, 3, 1, 2)))


def to_numpy(x: torch.Tensor) -> np.ndarray:
    return x.detach().cpu().numpy().transpose(0, 2, 3, 1)


@torch.no_grad()
def apply_generator(gen: nn.Module, patches: np.ndarray, batch_size: int = 32) -> np.ndarray:
    """Run a generator in inference mode over channel-last patches."""
    was_training = gen.training
    gen.eval()
    arr = np.asarray(patches, dtype=np.float32)
    single = arr.ndim == 3
    if single:
        arr = arr[None]
    out = [to_numpy(gen(to_tensor(arr[i : i + batch_size]))) for i in range(0, len(arr), batch_size)]
    gen.train(was_training)
    res = np.concatenate(out) if out else np.zeros_like(arr)
    return res[0] if single else res
