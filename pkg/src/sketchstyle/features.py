"""Style encoder: a small trainable stand-in for a frozen classifier's fc1 features.

The encoder maps a painting to an F-wide pre-activation vector. That vector,
z-scored over its coordinates, is the global style hint fed to the generator
and the target of the discriminator's AC head.
"""
from __future__ import annotations

import logging
from dataclasses import dataclass
from typing import Optional, Tuple

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from . import archive
from .arch import ConfigError, _ConfigMixin, init_weights

log = logging.getLogger(__name__)

HINT_EPS = 1e-8


@dataclass(frozen=True)
class EncoderConfig(_ConfigMixin):
    input_size: int = 64
    base_channels: int = 16
    feature_dim: int = 256
    # extra dense layer F -> F/2 on top of the feature layer
    extra_projection: bool = False
    in_channels: int = 3
    max_channel_mult: int = 8

    def validate(self) -> "EncoderConfig":
        n = self.input_size
        if n < 2 or n & (n - 1):
            raise ConfigError(f"encoder input_size must be a power of two >= 2 (got {n})")
        if self.feature_dim <= 0 or (self.extra_projection and self.feature_dim < 2):
            raise ConfigError(f"feature_dim too small (got {self.feature_dim})")
        return self

    @property
    def hint_dim(self) -> int:
        return self.feature_dim // 2 if self.extra_projection else self.feature_dim


class StyleEncoder(nn.Module):
    def __init__(self, cfg: EncoderConfig):
        super().__init__()
        cfg.validate()
        self.cfg = cfg
        layers, cin = [], cfg.in_channels
        cap = cfg.max_channel_mult.bit_length() - 1
        for i in range(cfg.input_size.bit_length() - 1):
            cout = cfg.base_channels * 2 ** min(i, cap)
            layers += [nn.Conv2d(cin, cout, 4, stride=2, padding=1), nn.LeakyReLU(0.2)]
            cin = cout
        self.trunk = nn.Sequential(*layers)
        self.fc = nn.Linear(cin, cfg.feature_dim)
        self.proj = nn.Linear(cfg.feature_dim, cfg.hint_dim) if cfg.extra_projection else None
        self.probe_accuracy: Optional[float] = None

    @property
    def hint_dim(self) -> int:
        return self.cfg.hint_dim

    def forward(self, image: torch.Tensor) -> torch.Tensor:
        # outputs are taken before any nonlinearity
        h = self.fc(self.trunk(image).flatten(1))
        return self.proj(h) if self.proj is not None else h


def build_encoder(cfg: EncoderConfig, seed: int) -> StyleEncoder:
    with torch.random.fork_rng(devices=[]):
        torch.manual_seed(seed)
        enc = StyleEncoder(cfg)
        init_weights(enc)
    return enc


def freeze(encoder: StyleEncoder) -> StyleEncoder:
    encoder.eval()
    for p in encoder.parameters():
        p.requires_grad_(False)
    return encoder


def extract_hint(encoder: StyleEncoder, image: torch.Tensor) -> torch.Tensor:
    """Raw (unnormalized) hint. Accepts (3, H, W) or (N, 3, H, W)."""
    single = image.dim() == 3
    if single:
        image = image.unsqueeze(0)
    c = encoder.cfg
    if image.dim() != 4 or image.shape[1:] != (c.in_channels, c.input_size, c.input_size):
        raise ValueError(
            f"expected image of shape (N, {c.in_channels}, {c.input_size}, {c.input_size}), got {tuple(image.shape)}"
        )
    with torch.no_grad():
        out = encoder(image)
    return out[0] if single else out


def normalize_hint(raw: torch.Tensor) -> torch.Tensor:
    """Z-score over the last dimension (population std, eps 1e-8); constant rows map to zeros."""
    mean = raw.mean(dim=-1, keepdim=True)
    std = raw.std(dim=-1, unbiased=False, keepdim=True)
    out = (raw - mean) / (std + HINT_EPS)
    constant = (raw == raw[..., :1]).all(dim=-1, keepdim=True)
    return torch.where(constant, torch.zeros_like(out), out)


def style_hint(encoder: StyleEncoder, image: torch.Tensor) -> torch.Tensor:
    return normalize_hint(extract_hint(encoder, image))


# ---------------------------------------------------------------------------
# training (desk-scale substitute for pretrained weights)
# ---------------------------------------------------------------------------

class EncoderNotConverged(RuntimeError):
    def __init__(self, accuracy: float, required: float):
        super().__init__(f"style encoder linear-probe accuracy {accuracy:.3f} < required {required:.3f}")
        self.accuracy = accuracy


def _split(n: int, seed: int, held_out: float) -> Tuple[np.ndarray, np.ndarray]:
    perm = np.random.default_rng([seed, 31]).permutation(n)
    k = max(1, int(round(n * held_out)))
    return perm[k:], perm[:k]


def linear_probe_accuracy(encoder: StyleEncoder, images: np.ndarray, labels: np.ndarray,
                          seed: int = 0, held_out: float = 0.25) -> float:
    """Fit a logistic-regression probe on normalized hints, report held-out accuracy."""
    from sklearn.linear_model import LogisticRegression

    labels = np.asarray(labels)
    if len(np.unique(labels)) < 2:
        return 1.0
    feats = _hints_np(encoder, images)
    train, test = _split(len(labels), seed, held_out)
    if len(np.unique(labels[train])) < 2:
        return float(np.mean(labels[test] == labels[train][0]))
    clf = LogisticRegression(max_iter=2000)
    clf.fit(feats[train], labels[train])
    return float(clf.score(feats[test], labels[test]))


def _hints_np(encoder: StyleEncoder, images: np.ndarray, batch: int = 256) -> np.ndarray:
    out = []
    for i in range(0, len(images), batch):
        out.append(style_hint(encoder, torch.from_numpy(np.asarray(images[i:i + batch]))).numpy())
    return np.concatenate(out) if out else np.zeros((0, encoder.hint_dim), np.float32)


def train_style_encoder(images: np.ndarray, labels: np.ndarray, epochs: int, cfg: Optional[EncoderConfig] = None,
                        seed: int = 0, batch_size: int = 32, lr: float = 1e-3,
                        min_accuracy: Optional[float] = None) -> StyleEncoder:
    """Train the encoder as a style classifier (linear head on the hint), then probe it.

    `images` is N x 3 x H x W float32. Only the probe's training split is used for
    fitting, so the reported ``probe_accuracy`` is on held-out images. Returns a
    frozen encoder.
    """
    cfg = cfg or EncoderConfig(input_size=images.shape[-1])
    labels = np.asarray(labels, dtype=np.int64)
    classes = int(labels.max()) + 1 if len(labels) else 1
    encoder = build_encoder(cfg, seed)
    train_idx, _ = _split(len(labels), seed, 0.25)
    if epochs > 0 and classes > 1:
        with torch.random.fork_rng(devices=[]):
            torch.manual_seed(seed + 1)
            head = nn.Linear(cfg.hint_dim, classes)
        opt = torch.optim.Adam(list(encoder.parameters()) + list(head.parameters()), lr=lr)
        x_all = torch.from_numpy(np.asarray(images))
        y_all = torch.from_numpy(labels)
        encoder.train()
        for epoch in range(epochs):
            order = np.random.default_rng([seed, epoch]).permutation(train_idx)
            total = 0.0
            for i in range(0, len(order), batch_size):
                idx = order[i:i + batch_size]
                logits = head(F.leaky_relu(normalize_hint(encoder(x_all[idx])), 0.2))
                loss = F.cross_entropy(logits, y_all[idx])
                opt.zero_grad()
                loss.backward()
                opt.step()
                total += loss.item() * len(idx)
            log.info("encoder epoch %d: loss %.4f", epoch, total / len(order))
    freeze(encoder)
    encoder.probe_accuracy = linear_probe_accuracy(encoder, images, labels, seed)
    log.info("encoder probe accuracy %.3f", encoder.probe_accuracy)
    if min_accuracy is not None and encoder.probe_accuracy < min_accuracy:
        raise EncoderNotConverged(encoder.probe_accuracy, min_accuracy)
    return encoder


# ---------------------------------------------------------------------------
# persistence
# ---------------------------------------------------------------------------

def save_encoder_weights(encoder: StyleEncoder, path) -> None:
    meta = {"kind": "style_encoder", "encoder_config": encoder.cfg.to_dict(),
            "probe_accuracy": encoder.probe_accuracy}
    archive.write_archive(path, archive.module_tensors(encoder), meta)


def encoder_from_tensors(tensors, meta: dict, prefix: str = "") -> StyleEncoder:
    cfg = EncoderConfig.from_dict(meta["encoder_config"])
    encoder = StyleEncoder(cfg)
    archive.load_module_tensors(encoder, tensors, prefix=prefix, strict=not prefix)
    encoder.probe_accuracy = meta.get("probe_accuracy")
    return freeze(encoder)


def load_encoder_weights(path) -> StyleEncoder:
    tensors, meta = archive.read_archive(path)
    if "encoder_config" not in meta:
        raise archive.CorruptArchiveError(f"{path}: metadata has no encoder_config")
    return encoder_from_tensors(tensors, meta)
