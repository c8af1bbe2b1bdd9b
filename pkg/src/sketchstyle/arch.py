"""Generator and discriminator networks.

The generator is a residual U-net: an encoder whose levels each leave one
skip tensor behind, a stack of residual blocks at the deepest resolution into
which the global style hint is injected, and a decoder that consumes the skip
tensors. Two guide decoders tap the mid-level stack at its entry (before the
hint goes in) and at its exit.

All tensors are NCHW; images live in [0, 1].
"""
from __future__ import annotations

from dataclasses import asdict, dataclass, fields
from typing import Dict, List, NamedTuple, Optional

import torch
import torch.nn.functional as F
from torch import nn

HINT_MODES = ("concat", "add")
DISC_VARIANTS = ("acgan", "dcgan")
PARAM_GROUPS = ("encoder", "mid", "decoder", "guide1", "guide2", "hint_proj")


class ConfigError(ValueError):
    """Raised when a network or training configuration violates an invariant."""


class _ConfigMixin:
    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict):
        known = {f.name for f in fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"{cls.__name__}: unknown field(s) {sorted(unknown)}")
        return cls(**d)


@dataclass(frozen=True)
class GeneratorConfig(_ConfigMixin):
    input_size: int = 64
    base_channels: int = 16
    depth: int = 4
    mid_blocks: int = 4
    hint_dim: int = 256
    hint_mode: str = "concat"
    # None -> same width as the mid-level features
    hint_proj_dim: Optional[int] = None
    guide_decoders_enabled: bool = True
    grayscale_guide1: bool = True
    skip_connections: bool = True
    in_channels: int = 1
    out_channels: int = 3
    max_channel_mult: int = 8

    def validate(self) -> "GeneratorConfig":
        if self.depth < 2:
            raise ConfigError(f"depth must be >= 2 (got {self.depth})")
        if self.input_size <= 0 or self.input_size % (2 ** self.depth):
            raise ConfigError(
                f"input_size must be divisible by 2**depth = {2 ** self.depth} (got {self.input_size})"
            )
        if self.mid_blocks < 1:
            raise ConfigError(f"mid_blocks must be >= 1 (got {self.mid_blocks})")
        if self.hint_dim <= 0:
            raise ConfigError(f"hint_dim must be > 0 (got {self.hint_dim})")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1 (got {self.base_channels})")
        if self.hint_mode not in HINT_MODES:
            raise ConfigError(f"hint_mode must be one of {HINT_MODES} (got {self.hint_mode!r})")
        if self.hint_proj_dim is not None and self.hint_proj_dim <= 0:
            raise ConfigError(f"hint_proj_dim must be > 0 (got {self.hint_proj_dim})")
        if self.hint_mode == "add" and self.proj_dim != self.mid_channels:
            raise ConfigError(
                f"hint_proj_dim ({self.proj_dim}) must equal mid channels ({self.mid_channels}) in add mode"
            )
        if self.in_channels < 1 or self.out_channels < 1:
            raise ConfigError("in_channels and out_channels must be >= 1")
        return self

    def channels(self, level: int) -> int:
        return self.base_channels * 2 ** min(level, _log2(self.max_channel_mult))

    @property
    def mid_channels(self) -> int:
        return self.channels(self.depth)

    @property
    def mid_size(self) -> int:
        return self.input_size // 2 ** self.depth

    @property
    def proj_dim(self) -> int:
        return self.hint_proj_dim if self.hint_proj_dim is not None else self.mid_channels

    @property
    def guide1_channels(self) -> int:
        return 1 if self.grayscale_guide1 else self.out_channels


@dataclass(frozen=True)
class DiscriminatorConfig(_ConfigMixin):
    variant: str = "acgan"
    input_size: int = 64
    base_channels: int = 16
    head_dim: int = 256
    in_channels: int = 3
    # trunk stops downsampling at this spatial size
    trunk_size: int = 4
    max_channel_mult: int = 8

    def validate(self) -> "DiscriminatorConfig":
        if self.variant not in DISC_VARIANTS:
            raise ConfigError(f"variant must be one of {DISC_VARIANTS} (got {self.variant!r})")
        if self.trunk_size < 1 or self.input_size <= self.trunk_size:
            raise ConfigError(f"input_size must exceed trunk_size (got {self.input_size}, {self.trunk_size})")
        n = self.input_size // self.trunk_size
        if self.input_size % self.trunk_size or n & (n - 1):
            raise ConfigError(
                f"input_size / trunk_size must be a power of two (got {self.input_size}/{self.trunk_size})"
            )
        if self.variant == "acgan" and self.head_dim <= 0:
            raise ConfigError(f"head_dim must be > 0 for the acgan variant (got {self.head_dim})")
        if self.base_channels < 1:
            raise ConfigError(f"base_channels must be >= 1 (got {self.base_channels})")
        return self

    @property
    def n_down(self) -> int:
        return _log2(self.input_size // self.trunk_size)


def _log2(n: int) -> int:
    return n.bit_length() - 1


class GeneratorOutput(NamedTuple):
    final: torch.Tensor
    guide1: Optional[torch.Tensor]
    guide2: Optional[torch.Tensor]


# ---------------------------------------------------------------------------
# building blocks
# ---------------------------------------------------------------------------

class EncoderLevel(nn.Module):
    def __init__(self, cin: int, cout: int, cdown: int):
        super().__init__()
        self.conv1 = nn.Conv2d(cin, cout, 3, padding=1)
        self.conv2 = nn.Conv2d(cout, cout, 3, padding=1)
        self.down = nn.Conv2d(cout, cdown, 4, stride=2, padding=1)

    def forward(self, x):
        x = F.leaky_relu(self.conv1(x), 0.2)
        skip = F.leaky_relu(self.conv2(x), 0.2)
        return F.leaky_relu(self.down(skip), 0.2), skip


class ResidualBlock(nn.Module):
    def __init__(self, channels: int):
        super().__init__()
        self.conv1 = nn.Conv2d(channels, channels, 3, padding=1)
        self.conv2 = nn.Conv2d(channels, channels, 3, padding=1)

    def forward(self, x):
        return x + self.conv2(F.leaky_relu(self.conv1(x), 0.2))


class DecoderLevel(nn.Module):
    def __init__(self, cin: int, cout: int, skip: bool):
        super().__init__()
        self.up = nn.ConvTranspose2d(cin, cout, 4, stride=2, padding=1)
        self.conv = nn.Conv2d(2 * cout if skip else cout, cout, 3, padding=1)
        self.skip = skip

    def forward(self, x, skip=None):
        x = F.relu(self.up(x))
        if self.skip:
            x = torch.cat([x, skip], dim=1)
        return F.relu(self.conv(x))


class GuideDecoder(nn.Module):
    """Skip-free decoder: nearest upsample + one conv per level, sigmoid head."""

    def __init__(self, cfg: GeneratorConfig, cin: int, out_channels: int):
        super().__init__()
        levels = []
        for i in reversed(range(cfg.depth)):
            levels.append(nn.Conv2d(cin, cfg.channels(i), 3, padding=1))
            cin = cfg.channels(i)
        self.levels = nn.ModuleList(levels)
        self.out = nn.Conv2d(cin, out_channels, 1)

    def forward(self, x):
        for conv in self.levels:
            x = F.relu(conv(F.interpolate(x, scale_factor=2, mode="nearest")))
        return torch.sigmoid(self.out(x))


class MidLevel(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        c = cfg.mid_channels
        self.mode = cfg.hint_mode
        self.proj_dim = cfg.proj_dim
        # concat mode fuses [features, hint] back to c channels with a 1x1 conv
        self.fuse = nn.Conv2d(c + cfg.proj_dim, c, 1) if cfg.hint_mode == "concat" else None
        self.blocks = nn.ModuleList([ResidualBlock(c) for _ in range(cfg.mid_blocks)])

    def forward(self, x, projected_hint):
        x = inject_hint(x, projected_hint, self.mode, proj_dim=self.proj_dim)
        if self.fuse is not None:
            x = F.leaky_relu(self.fuse(x), 0.2)
        for block in self.blocks:
            x = block(x)
        return x


def inject_hint(features: torch.Tensor, hint: Optional[torch.Tensor], mode: str,
                proj_dim: Optional[int] = None) -> torch.Tensor:
    """Spread a (projected) global hint over every spatial position of `features`.

    ``concat`` appends the hint as extra channels, ``add`` adds it channel-wise.
    A ``None`` hint in concat mode is treated as all zeros of width ``proj_dim``.
    """
    n, c, h, w = features.shape
    if hint is None:
        if mode == "add":
            return features
        hint = features.new_zeros(n, proj_dim)
    if hint.dim() == 1:
        hint = hint.unsqueeze(0).expand(n, -1)
    if hint.shape[0] != n:
        raise ValueError(f"hint batch {hint.shape[0]} != feature batch {n}")
    grid = hint[:, :, None, None].expand(n, hint.shape[1], h, w)
    if mode == "concat":
        return torch.cat([features, grid], dim=1)
    if mode == "add":
        if hint.shape[1] != c:
            raise ValueError(f"add-mode hint width {hint.shape[1]} != feature channels {c}")
        return features + grid
    raise ValueError(f"unknown hint mode {mode!r}")


# ---------------------------------------------------------------------------
# networks
# ---------------------------------------------------------------------------

class GeneratorNet(nn.Module):
    def __init__(self, cfg: GeneratorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        self.encoder = nn.ModuleList(
            EncoderLevel(cfg.in_channels if i == 0 else cfg.channels(i), cfg.channels(i), cfg.channels(i + 1))
            for i in range(cfg.depth)
        )
        self.hint_proj = nn.Linear(cfg.hint_dim, cfg.proj_dim)
        self.mid = MidLevel(cfg)
        self.decoder = nn.ModuleList(
            DecoderLevel(cfg.channels(i + 1), cfg.channels(i), cfg.skip_connections)
            for i in reversed(range(cfg.depth))
        )
        self.out = nn.Conv2d(cfg.channels(0), cfg.out_channels, 1)
        if cfg.guide_decoders_enabled:
            self.guide1 = GuideDecoder(cfg, cfg.mid_channels, cfg.guide1_channels)
            self.guide2 = GuideDecoder(cfg, cfg.mid_channels, cfg.out_channels)
        else:
            self.guide1 = self.guide2 = None

    def forward(self, sketch: torch.Tensor, hint: Optional[torch.Tensor] = None) -> GeneratorOutput:
        cfg = self.cfg
        if sketch.dim() != 4 or sketch.shape[1] != cfg.in_channels:
            raise ValueError(f"expected sketch of shape (N, {cfg.in_channels}, H, W), got {tuple(sketch.shape)}")
        if sketch.shape[-2:] != (cfg.input_size, cfg.input_size):
            raise ValueError(
                f"expected {cfg.input_size}x{cfg.input_size} input, got {sketch.shape[-2]}x{sketch.shape[-1]}"
            )
        x = sketch
        skips = []
        for level in self.encoder:
            x, s = level(x)
            skips.append(s)

        g1 = self.guide1(x) if self.guide1 is not None else None
        projected = None
        if hint is not None:
            if hint.shape[-1] != cfg.hint_dim:
                raise ValueError(f"hint width {hint.shape[-1]} != hint_dim {cfg.hint_dim}")
            projected = self.hint_proj(hint)
        x = self.mid(x, projected)
        g2 = self.guide2(x) if self.guide2 is not None else None

        for level, s in zip(self.decoder, reversed(skips)):
            x = level(x, s)
        return GeneratorOutput(torch.sigmoid(self.out(x)), g1, g2)

    def parameter_groups(self) -> Dict[str, List[nn.Parameter]]:
        groups = {g: [] for g in PARAM_GROUPS}
        for name, p in self.named_parameters():
            groups[_generator_group(name)].append(p)
        return groups


def _generator_group(param_name: str) -> str:
    top = param_name.split(".", 1)[0]
    if top == "out":
        return "decoder"
    if top in PARAM_GROUPS:
        return top
    raise KeyError(f"parameter {param_name!r} has no attribution group")


class DiscriminatorNet(nn.Module):
    """Strided-conv trunk shared by an F-wide AC head and a scalar real/fake head.

    The acgan variant carries both heads so training can shift between the two
    losses without rebuilding the trunk; the dcgan variant only has the scalar head.
    """

    def __init__(self, cfg: DiscriminatorConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        layers = []
        cin = cfg.in_channels
        mult_cap = _log2(cfg.max_channel_mult)
        for i in range(cfg.n_down):
            cout = cfg.base_channels * 2 ** min(i, mult_cap)
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            cin = cout
        self.trunk = nn.Sequential(*layers)
        flat = cin * cfg.trunk_size ** 2
        self.dcgan_head = nn.Linear(flat, 1)
        self.acgan_head = nn.Linear(flat, cfg.head_dim) if cfg.variant == "acgan" else None

    def forward(self, image: torch.Tensor, mode: Optional[str] = None) -> torch.Tensor:
        """Raw (pre-activation) scores: (N, head_dim) for acgan, (N,) for dcgan."""
        mode = mode or self.cfg.variant
        single = image.dim() == 3
        if single:
            image = image.unsqueeze(0)
        cfg = self.cfg
        if image.dim() != 4 or image.shape[1:] != (cfg.in_channels, cfg.input_size, cfg.input_size):
            raise ValueError(
                f"expected image of shape (N, {cfg.in_channels}, {cfg.input_size}, {cfg.input_size}), "
                f"got {tuple(image.shape)}"
            )
        h = self.trunk(image).flatten(1)
        if mode == "acgan":
            if self.acgan_head is None:
                raise ValueError("dcgan-variant discriminator has no acgan head")
            out = self.acgan_head(h)
        elif mode == "dcgan":
            out = self.dcgan_head(h).squeeze(1)
        else:
            raise ValueError(f"unknown discriminator mode {mode!r}")
        return out[0] if single else out


def init_weights(module: nn.Module) -> None:
    """Kaiming-normal weights (leaky slope 0.2, fan-out scaling), zero biases.

    Fan-out scaling keeps backward signals at unit scale, so a skip-free
    network still passes gradient to its deepest layers.
    """
    for m in module.modules():
        if isinstance(m, (nn.Conv2d, nn.ConvTranspose2d, nn.Linear)):
            nn.init.kaiming_normal_(m.weight, a=0.2, mode="fan_out", nonlinearity="leaky_relu")
            if m.bias is not None:
                nn.init.zeros_(m.bias)


def build_generator(cfg: GeneratorConfig, seed: int) -> GeneratorNet:
    cfg.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = GeneratorNet(cfg)
        init_weights(net)
    return net


def build_discriminator(cfg: DiscriminatorConfig, seed: int) -> DiscriminatorNet:
    cfg.validate()
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        net = DiscriminatorNet(cfg)
        init_weights(net)
    return net


def forward_generator(net: GeneratorNet, sketch: torch.Tensor, hint: Optional[torch.Tensor]) -> GeneratorOutput:
    return net(sketch, hint)


def forward_discriminator(net: DiscriminatorNet, image: torch.Tensor, mode: Optional[str] = None) -> torch.Tensor:
    return net(image, mode)
