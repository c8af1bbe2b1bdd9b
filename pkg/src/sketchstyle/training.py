"""Adversarial training loop with loss-mode shifting, checkpoints and metric stream."""
from __future__ import annotations

import hashlib
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Dict, List, Optional

import numpy as np
import torch
from torch import nn

from . import archive
from .arch import (ConfigError, DiscriminatorConfig, DiscriminatorNet, GeneratorConfig, GeneratorNet,
                   _ConfigMixin, build_discriminator, build_generator)
from .data import PairedArrays
from .features import StyleEncoder, encoder_from_tensors, freeze, style_hint
from .losses import LossWeights, gan_loss, generator_gan_loss, generator_objective, l1_composite
from .probes import capture_gradients, total_grad_norm

log = logging.getLogger(__name__)

CHECKPOINT_VERSION = 1


class TrainingDiverged(RuntimeError):
    def __init__(self, step: int, term: str, value: float):
        super().__init__(f"non-finite {term} = {value} at step {step}")
        self.step, self.term, self.value = step, term, value


class CheckpointMismatch(ConfigError):
    pass


@dataclass(frozen=True)
class TrainConfig(_ConfigMixin):
    steps: int = 10000
    batch_size: int = 4
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    alpha: float = 0.3
    beta: float = 0.9
    lam: float = 100.0
    # dcgan-only warmup, then acgan/dcgan alternate every `shift_every` steps
    warmup_steps: int = 1000
    shift_every: int = 500
    seed: int = 0
    checkpoint_interval: int = 0

    def validate(self) -> "TrainConfig":
        if self.batch_size < 1:
            raise ConfigError(f"batch_size must be >= 1 (got {self.batch_size})")
        if self.steps < 0:
            raise ConfigError(f"steps must be >= 0 (got {self.steps})")
        if self.warmup_steps < 0 or self.shift_every < 1:
            raise ConfigError("warmup_steps must be >= 0 and shift_every >= 1")
        if not self.lr > 0:
            raise ConfigError(f"lr must be > 0 (got {self.lr})")
        if self.checkpoint_interval < 0:
            raise ConfigError("checkpoint_interval must be >= 0")
        self.loss_weights.validate()
        return self

    @property
    def loss_weights(self) -> LossWeights:
        return LossWeights(self.alpha, self.beta, self.lam)


def select_loss_mode(step: int, warmup_steps: int = 1000, shift_every: int = 500) -> str:
    if step < 0:
        raise ValueError(f"step must be >= 0 (got {step})")
    if step < warmup_steps:
        return "dcgan"
    return "acgan" if ((step - warmup_steps) // shift_every) % 2 == 0 else "dcgan"


def batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    """Batch content is a pure function of (seed, step)."""
    return np.random.default_rng([seed, step]).choice(n, size=batch_size, replace=n < batch_size)


def param_hash(module: nn.Module) -> str:
    h = hashlib.sha256()
    for name, t in module.state_dict().items():
        h.update(name.encode())
        h.update(t.detach().cpu().contiguous().numpy().tobytes())
    return h.hexdigest()


def _adam(params, cfg: TrainConfig) -> torch.optim.Adam:
    return torch.optim.Adam(params, lr=cfg.lr, betas=(cfg.beta1, cfg.beta2))


@dataclass
class TrainState:
    generator: GeneratorNet
    discriminator: DiscriminatorNet
    encoder: StyleEncoder
    config: TrainConfig
    g_opt: torch.optim.Optimizer
    d_opt: torch.optim.Optimizer
    step: int = 0
    history: List[dict] = field(default_factory=list)

    @classmethod
    def create(cls, gen_cfg: GeneratorConfig, disc_cfg: DiscriminatorConfig, encoder: StyleEncoder,
               config: TrainConfig) -> "TrainState":
        config.validate()
        if gen_cfg.hint_dim != encoder.hint_dim:
            raise ConfigError(f"generator hint_dim {gen_cfg.hint_dim} != encoder hint width {encoder.hint_dim}")
        if disc_cfg.variant == "acgan" and disc_cfg.head_dim != encoder.hint_dim:
            raise ConfigError(f"discriminator head_dim {disc_cfg.head_dim} != encoder hint width {encoder.hint_dim}")
        g = build_generator(gen_cfg, config.seed)
        d = build_discriminator(disc_cfg, config.seed + 1)
        return cls(g, d, freeze(encoder), config, _adam(g.parameters(), config), _adam(d.parameters(), config))


def _check(step: int, **terms) -> None:
    for name, v in terms.items():
        if not math.isfinite(v):
            raise TrainingDiverged(step, name, v)


def train_step(state: TrainState, sketch: torch.Tensor, painting: torch.Tensor) -> dict:
    """One discriminator update, then one generator update. Mutates `state`, returns the metrics record."""
    cfg = state.config
    G, D = state.generator, state.discriminator
    step = state.step + 1
    mode = select_loss_mode(state.step, cfg.warmup_steps, cfg.shift_every)
    if D.acgan_head is None:
        mode = "dcgan"
    hint = style_hint(state.encoder, painting)

    # discriminator
    D.requires_grad_(True)
    with torch.no_grad():
        fake = G(sketch, hint).final
    d_terms = gan_loss(mode, D(painting, mode), D(fake, mode), hint)
    _check(step, d_loss=d_terms.d_loss.item())
    state.d_opt.zero_grad(set_to_none=True)
    d_terms.d_loss.backward()
    d_norm = total_grad_norm(D)
    state.d_opt.step()

    # generator
    D.requires_grad_(False)
    out = G(sketch, hint)
    l1 = l1_composite(out, painting, cfg.loss_weights, G.cfg.grayscale_guide1)
    g_gan = generator_gan_loss(D(out.final, mode))
    objective = generator_objective(l1.total, g_gan, cfg.loss_weights)
    _check(step, **l1.as_floats(), g_gan=g_gan.item(), g_objective=objective.item())
    state.g_opt.zero_grad(set_to_none=True)
    objective.backward()
    grads = capture_gradients(G, step)
    state.g_opt.step()
    D.requires_grad_(True)

    state.step = step
    rec = {"step": step, "mode": mode, **l1.as_floats(), "d_loss": d_terms.d_loss.item(),
           "g_gan": g_gan.item(), "g_objective": objective.item(), "grad_discriminator": d_norm}
    rec.update({k: v for k, v in grads.to_record().items() if k != "step"})
    state.history.append(rec)
    return rec


def fit(state: TrainState, data: PairedArrays, steps: int, metrics_path=None, checkpoint_dir=None) -> TrainState:
    """Run `steps` more steps. Metrics are appended to `metrics_path` (JSON lines) as they are produced."""
    cfg = state.config
    sketches = torch.from_numpy(data.sketches)
    paintings = torch.from_numpy(data.paintings)
    mf = open(metrics_path, "a") if metrics_path else None
    try:
        for _ in range(steps):
            idx = torch.from_numpy(batch_indices(cfg.seed, state.step, len(data), cfg.batch_size))
            rec = train_step(state, sketches[idx], paintings[idx])
            if mf:
                mf.write(json.dumps(rec) + "\n")
            if state.step % 100 == 0:
                log.info("step %d [%s] l1 %.4f d %.4f g %.4f", state.step, rec["mode"], rec["l1_total"],
                         rec["d_loss"], rec["g_gan"])
            if checkpoint_dir and cfg.checkpoint_interval and state.step % cfg.checkpoint_interval == 0:
                save_checkpoint(state, Path(checkpoint_dir) / f"step_{state.step:07d}.nta")
    finally:
        if mf:
            mf.close()
    return state


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _optim_tensors(opt: torch.optim.Optimizer, prefix: str) -> Dict[str, torch.Tensor]:
    out = {}
    for idx, st in opt.state_dict()["state"].items():
        for key, t in st.items():
            out[f"{prefix}.{idx}.{key}"] = torch.as_tensor(t, dtype=torch.float32)
    return out


def _load_optim(opt: torch.optim.Optimizer, tensors, prefix: str) -> None:
    sd = opt.state_dict()
    state = {}
    for name, arr in tensors.items():
        if not name.startswith(prefix + "."):
            continue
        idx, key = name[len(prefix) + 1:].split(".", 1)
        state.setdefault(int(idx), {})[key] = torch.from_numpy(np.array(arr, dtype=np.float32))
    sd["state"] = state
    opt.load_state_dict(sd)


def save_checkpoint(state: TrainState, path) -> None:
    tensors = {}
    tensors.update(archive.module_tensors(state.generator, "generator."))
    tensors.update(archive.module_tensors(state.discriminator, "discriminator."))
    tensors.update(archive.module_tensors(state.encoder, "encoder."))
    tensors.update(_optim_tensors(state.g_opt, "optim.generator"))
    tensors.update(_optim_tensors(state.d_opt, "optim.discriminator"))
    meta = {
        "kind": "checkpoint",
        "checkpoint_version": CHECKPOINT_VERSION,
        "generator_config": state.generator.cfg.to_dict(),
        "discriminator_config": state.discriminator.cfg.to_dict(),
        "encoder_config": state.encoder.cfg.to_dict(),
        "probe_accuracy": state.encoder.probe_accuracy,
        "train_config": state.config.to_dict(),
        "step": state.step,
        "history": state.history,
    }
    archive.write_archive(path, tensors, meta)


def _diff_fields(expected: dict, found: dict) -> List[str]:
    return sorted(k for k in set(expected) | set(found) if expected.get(k) != found.get(k))


def load_checkpoint(path, generator_config: Optional[GeneratorConfig] = None,
                    train_config: Optional[TrainConfig] = None) -> TrainState:
    """Restore a TrainState.

    If `generator_config` is given it must match the archived one exactly.
    `train_config` replaces the archived training config (for example to
    change the step budget); optimizer moments are still restored.
    """
    tensors, meta = archive.read_archive(path)
    if meta.get("kind") != "checkpoint":
        raise archive.CorruptArchiveError(f"{path} is not a training checkpoint")
    version = meta.get("checkpoint_version")
    if version != CHECKPOINT_VERSION:
        raise archive.ArchiveVersionError(f"checkpoint version {version}, expected {CHECKPOINT_VERSION}")
    gcfg = GeneratorConfig.from_dict(meta["generator_config"])
    if generator_config is not None and generator_config != gcfg:
        diff = _diff_fields(generator_config.to_dict(), gcfg.to_dict())
        raise CheckpointMismatch(f"generator config differs from checkpoint in field(s): {', '.join(diff)}")
    dcfg = DiscriminatorConfig.from_dict(meta["discriminator_config"])
    tcfg = train_config or TrainConfig.from_dict(meta["train_config"])
    tcfg.validate()

    G, D = GeneratorNet(gcfg), DiscriminatorNet(dcfg)
    archive.load_module_tensors(G, tensors, "generator.", strict=False)
    archive.load_module_tensors(D, tensors, "discriminator.", strict=False)
    encoder = encoder_from_tensors(tensors, meta, prefix="encoder.")
    g_opt, d_opt = _adam(G.parameters(), tcfg), _adam(D.parameters(), tcfg)
    _load_optim(g_opt, tensors, "optim.generator")
    _load_optim(d_opt, tensors, "optim.discriminator")
    return TrainState(G, D, encoder, tcfg, g_opt, d_opt, int(meta["step"]), list(meta.get("history", [])))


def load_generator(path):
    """Generator and encoder from a checkpoint, for inference."""
    tensors, meta = archive.read_archive(path)
    if "generator_config" not in meta:
        raise archive.CorruptArchiveError(f"{path} has no generator_config")
    G = GeneratorNet(GeneratorConfig.from_dict(meta["generator_config"]))
    archive.load_module_tensors(G, tensors, "generator.", strict=False)
    G.eval()
    return G, encoder_from_tensors(tensors, meta, prefix="encoder.")
