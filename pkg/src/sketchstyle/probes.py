"""Gradient-flow instrumentation.

* per-group gradient norms for the generator's attribution partition
* the image-copy experiment that exposes a lazy U-net
* the guide-decoder comparison on the sketch -> painting task
* a central finite-difference gradient checker
"""
from __future__ import annotations

import copy
import json
import logging
import math
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path
from typing import Callable, Dict, List, Optional

import numpy as np
import torch
from torch import nn

from .arch import PARAM_GROUPS, GeneratorConfig, build_generator
from .losses import LossWeights, l1_composite

log = logging.getLogger(__name__)


class MissingGradientsError(RuntimeError):
    pass


class DivergenceError(RuntimeError):
    pass


@dataclass
class GradientReport:
    step: int
    norms: Dict[str, float]

    @property
    def total(self) -> float:
        return math.sqrt(sum(v * v for v in self.norms.values()))

    @property
    def mid_encoder_ratio(self) -> float:
        return _ratio(self.norms["mid"], self.norms["encoder"])

    @property
    def mid_decoder_ratio(self) -> float:
        return _ratio(self.norms["mid"], self.norms["decoder"])

    def to_record(self) -> dict:
        rec = {"step": self.step}
        rec.update({f"grad_{k}": v for k, v in self.norms.items()})
        rec["ratio_mid_encoder"] = self.mid_encoder_ratio
        rec["ratio_mid_decoder"] = self.mid_decoder_ratio
        return rec


def _ratio(a: float, b: float) -> float:
    if b == 0:
        return 0.0 if a == 0 else math.inf
    return a / b


def capture_gradients(net: nn.Module, step: int = 0) -> GradientReport:
    """L2 norm of the accumulated gradients in each parameter group of `net`.

    Parameters without a gradient count as zero; a network where no parameter
    has a gradient has not been through a backward pass and is an error.
    """
    groups = net.parameter_groups()
    if all(p.grad is None for ps in groups.values() for p in ps):
        raise MissingGradientsError("no gradients found; run backward() before capturing")
    norms = {}
    for name in PARAM_GROUPS:
        sq = 0.0
        for p in groups.get(name, []):
            if p.grad is not None:
                sq += float(p.grad.detach().double().pow(2).sum())
        norms[name] = math.sqrt(sq)
    return GradientReport(step, norms)


def total_grad_norm(net: nn.Module) -> float:
    sq = sum(float(p.grad.detach().double().pow(2).sum()) for p in net.parameters() if p.grad is not None)
    return math.sqrt(sq)


# ---------------------------------------------------------------------------
# experiments
# ---------------------------------------------------------------------------

@dataclass
class LazinessReport:
    label: str
    config: dict
    losses: List[float] = field(default_factory=list)
    norms: Dict[str, List[float]] = field(default_factory=lambda: {g: [] for g in PARAM_GROUPS})
    window: int = 100
    # L1 objective of the trained network over the full input set (NaN if not evaluated)
    eval_loss: float = math.nan

    @property
    def steps(self) -> int:
        return len(self.losses)

    def ratios(self) -> np.ndarray:
        mid = np.asarray(self.norms["mid"], dtype=np.float64)
        enc = np.asarray(self.norms["encoder"], dtype=np.float64)
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(enc > 0, mid / np.where(enc > 0, enc, 1.0), 0.0)

    @property
    def summary_ratio(self) -> float:
        """Median of mid/encoder gradient-norm ratios over the last `window` steps."""
        r = self.ratios()
        return float(np.median(r[-self.window:])) if r.size else math.nan

    def median_ratio(self) -> float:
        """Median mid/encoder ratio over the whole run."""
        r = self.ratios()
        return float(np.median(r)) if r.size else math.nan

    @property
    def final_loss(self) -> float:
        return self.losses[-1] if self.losses else math.nan

    def append(self, loss: float, report: GradientReport) -> None:
        self.losses.append(loss)
        for g in PARAM_GROUPS:
            self.norms[g].append(report.norms[g])

    def records(self):
        for i, loss in enumerate(self.losses):
            rec = {"label": self.label, "step": i + 1, "loss": loss}
            rec.update({f"grad_{g}": self.norms[g][i] for g in PARAM_GROUPS})
            yield rec

    def write_jsonl(self, path) -> None:
        Path(path).parent.mkdir(parents=True, exist_ok=True)
        with open(path, "w") as f:
            for rec in self.records():
                f.write(json.dumps(rec) + "\n")

    def summary(self) -> dict:
        return {"label": self.label, "steps": self.steps, "final_loss": self.final_loss,
                "eval_loss": self.eval_loss, "summary_ratio": self.summary_ratio, "window": self.window,
                "config": self.config}


# acceptance thresholds for the experiments below
COPY_MAX_L1 = 0.01             # skips on: full-set L1 of the trained copy network
COPY_MAX_RATIO = 0.05          # skips on: median mid/encoder ratio over the last window
COPY_CONTROL_MIN_RATIO = 0.5   # skips off
GUIDE_MIN_FACTOR = 5.0         # median ratio with guides / without guides


@dataclass
class ProbeSettings:
    steps: int = 2000
    batch_size: int = 4
    lr: float = 2e-4
    beta1: float = 0.5
    beta2: float = 0.999
    seed: int = 0
    window: int = 100
    # "constant" or "linear" (decays to zero at the last step), after a linear warmup
    lr_schedule: str = "constant"
    warmup_steps: int = 0

    def validate(self) -> "ProbeSettings":
        if self.steps < 0 or self.batch_size < 1 or self.window < 1 or not self.lr > 0 or self.warmup_steps < 0:
            raise ValueError(f"invalid probe settings: {self}")
        if self.lr_schedule not in ("constant", "linear"):
            raise ValueError(f"lr_schedule must be 'constant' or 'linear' (got {self.lr_schedule!r})")
        return self

    def lr_at(self, step: int) -> float:
        if step < self.warmup_steps:
            return self.lr * (step + 1) / self.warmup_steps
        if self.lr_schedule == "linear":
            return self.lr * (1.0 - step / max(self.steps, 1))
        return self.lr


def _batch_indices(seed: int, step: int, n: int, batch_size: int) -> np.ndarray:
    return np.random.default_rng([seed, step]).choice(n, size=batch_size, replace=n < batch_size)


def _run(label: str, cfg: GeneratorConfig, inputs: torch.Tensor, targets: torch.Tensor,
         hints: Optional[torch.Tensor], weights: LossWeights, settings: ProbeSettings) -> LazinessReport:
    settings.validate()
    net = build_generator(cfg, settings.seed)
    opt = torch.optim.Adam(net.parameters(), lr=settings.lr, betas=(settings.beta1, settings.beta2))
    report = LazinessReport(label, {"generator": cfg.to_dict(), "settings": asdict(settings),
                                    "weights": asdict(weights)}, window=settings.window)
    for step in range(settings.steps):
        idx = torch.from_numpy(_batch_indices(settings.seed, step, len(inputs), settings.batch_size))
        out = net(inputs[idx], hints[idx] if hints is not None else None)
        loss = l1_composite(out, targets[idx], weights, cfg.grayscale_guide1).total
        if not torch.isfinite(loss):
            raise DivergenceError(f"{label}: loss is {loss.item()} at step {step + 1}")
        opt.zero_grad(set_to_none=True)
        loss.backward()
        report.append(loss.item(), capture_gradients(net, step + 1))
        for group in opt.param_groups:
            group["lr"] = settings.lr_at(step)
        opt.step()
        if (step + 1) % 250 == 0:
            log.info("%s step %d loss %.4f ratio %.4f", label, step + 1, loss.item(), report.ratios()[-1])
    report.eval_loss = evaluate(net, inputs, targets, hints, weights)
    return report


def evaluate(net: nn.Module, inputs: torch.Tensor, targets: torch.Tensor, hints: Optional[torch.Tensor],
             weights: LossWeights, batch: int = 64) -> float:
    """Composite L1 over the whole set (pixel-weighted mean of per-batch terms)."""
    if len(inputs) == 0:
        return math.nan
    total = 0.0
    with torch.no_grad():
        for i in range(0, len(inputs), batch):
            sl = slice(i, i + batch)
            out = net(inputs[sl], hints[sl] if hints is not None else None)
            total += l1_composite(out, targets[sl], weights, net.cfg.grayscale_guide1).total.item() * len(inputs[sl])
    return total / len(inputs)


def run_copy_experiment(paintings: torch.Tensor, cfg: Optional[GeneratorConfig] = None,
                        settings: Optional[ProbeSettings] = None, skip_connections: bool = True) -> LazinessReport:
    """Train a plain U-net to reproduce its input (L1 on the final output only).

    `paintings` is N x 3 x H x W. Guide decoders and the hint are disabled.
    """
    settings = settings or ProbeSettings()
    cfg = replace(cfg or GeneratorConfig(input_size=paintings.shape[-1]), in_channels=paintings.shape[1],
                  out_channels=paintings.shape[1], guide_decoders_enabled=False,
                  skip_connections=skip_connections)
    label = f"copy_skips_{'on' if skip_connections else 'off'}"
    return _run(label, cfg, paintings, paintings, None, LossWeights(0.0, 0.0), settings)


@dataclass
class GuideComparison:
    with_guides: LazinessReport
    without_guides: LazinessReport

    @property
    def ratio_factor(self) -> float:
        return _ratio(self.with_guides.median_ratio(), self.without_guides.median_ratio())


def run_guide_comparison(sketches: torch.Tensor, paintings: torch.Tensor, hints: torch.Tensor,
                         cfg: Optional[GeneratorConfig] = None, settings: Optional[ProbeSettings] = None,
                         weights: Optional[LossWeights] = None) -> GuideComparison:
    """Train the hinted generator twice on sketch -> painting, with and without guide decoders.

    The objective is the composite L1 loss; without guides it reduces to the
    final-output term. Both runs share data order and initialization seed.
    """
    settings = settings or ProbeSettings()
    weights = weights or LossWeights()
    cfg = cfg or GeneratorConfig(input_size=sketches.shape[-1], hint_dim=hints.shape[-1])
    on = _run("guides_on", replace(cfg, guide_decoders_enabled=True), sketches, paintings, hints, weights, settings)
    off = _run("guides_off", replace(cfg, guide_decoders_enabled=False), sketches, paintings, hints, weights, settings)
    return GuideComparison(on, off)


def plot_curves(reports: List[LazinessReport], path, title: str = "") -> None:
    """Loss curves (top) and mid/encoder gradient-norm ratio (bottom), one line per report."""
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    fig, (ax1, ax2) = plt.subplots(2, 1, figsize=(7, 6), sharex=True)
    for r in reports:
        steps = np.arange(1, r.steps + 1)
        ax1.plot(steps, r.losses, lw=0.8, label=r.label)
        ax2.semilogy(steps, np.maximum(r.ratios(), 1e-8), lw=0.8, label=r.label)
    ax1.set_ylabel("L1 loss")
    ax2.set_ylabel("|grad mid| / |grad encoder|")
    ax2.set_xlabel("step")
    ax1.legend()
    if title:
        ax1.set_title(title)
    fig.tight_layout()
    Path(path).parent.mkdir(parents=True, exist_ok=True)
    fig.savefig(path, dpi=100)
    plt.close(fig)


# ---------------------------------------------------------------------------
# finite differences
# ---------------------------------------------------------------------------

def _prepare(net: nn.Module, max_params: int):
    net = copy.deepcopy(net).double()
    params = [p for p in net.parameters() if p.requires_grad]
    count = sum(p.numel() for p in params)
    if count > max_params:
        raise ValueError(f"network has {count} parameters, more than max_params={max_params}")
    return net, params


def _central_differences(net: nn.Module, params, loss_fn, step_size: float) -> np.ndarray:
    out = []
    with torch.no_grad():
        for p in params:
            flat = p.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + step_size
                up = float(loss_fn(net))
                flat[i] = orig - step_size
                down = float(loss_fn(net))
                flat[i] = orig
                out.append((up - down) / (2 * step_size))
    return np.asarray(out)


def _max_rel_error(a: np.ndarray, b: np.ndarray) -> float:
    if a.size == 0:
        return 0.0
    return float(np.max(np.abs(a - b) / np.maximum(np.maximum(np.abs(a), np.abs(b)), 1e-8)))


def finite_difference_check(net: nn.Module, loss_fn: Callable[[nn.Module], torch.Tensor],
                            step_size: float = 1e-3, max_params: int = 500) -> float:
    """Max relative error between autograd and central-difference gradients.

    Works on a float64 copy of `net`; `loss_fn(net)` must return a scalar.
    Relative error per coordinate is ``|a - n| / max(|a|, |n|, 1e-8)``.
    """
    if not step_size > 0:
        raise ValueError(f"step_size must be > 0 (got {step_size})")
    net, params = _prepare(net, max_params)
    net.zero_grad(set_to_none=True)
    loss_fn(net).backward()
    analytic = np.concatenate([(p.grad if p.grad is not None else torch.zeros_like(p)).detach().reshape(-1).numpy()
                               for p in params]) if params else np.zeros(0)
    return _max_rel_error(analytic, _central_differences(net, params, loss_fn, step_size))


def locally_smooth(net: nn.Module, loss_fn: Callable[[nn.Module], torch.Tensor], step_size: float,
                   rtol: float = 1e-4, max_params: int = 500) -> bool:
    """True if central differences at `step_size` and `step_size / 4` agree within `rtol`.

    Piecewise-linear activations make the loss non-smooth wherever a unit's
    input crosses zero; a perturbation of `step_size` that crosses such a kink
    changes the central difference by far more than the O(h^2) smooth-case
    error. Uses no autograd information.
    """
    net, params = _prepare(net, max_params)
    coarse = _central_differences(net, params, loss_fn, step_size)
    fine = _central_differences(net, params, loss_fn, step_size / 4)
    return _max_rel_error(coarse, fine) < rtol


# ---------------------------------------------------------------------------
# gradient-check fixtures
# ---------------------------------------------------------------------------

GRADCHECK_TOL = 1e-3
GRADCHECK_STEP = 1e-3


def micro_generator_config() -> GeneratorConfig:
    return GeneratorConfig(input_size=4, base_channels=1, depth=2, mid_blocks=1, hint_dim=4,
                           hint_proj_dim=2, max_channel_mult=1)


def micro_discriminator_config(variant: str = "acgan"):
    from .arch import DiscriminatorConfig

    return DiscriminatorConfig(variant=variant, input_size=8, base_channels=2, head_dim=4, trunk_size=2)


def _jitter_biases(net: nn.Module, g: torch.Generator, scale: float = 0.1) -> None:
    with torch.no_grad():
        for name, p in net.named_parameters():
            if name.endswith("bias"):
                p.copy_(scale * torch.randn(p.shape, generator=g))


GRADCHECK_ATTEMPTS = 20


class _Fixture:
    """One randomly drawn gradient-check point: micro networks, inputs and loss closures."""

    def __init__(self, seed: int, attempt: int):
        from .arch import build_discriminator
        from .features import normalize_hint
        from .losses import acgan_loss, dcgan_loss

        g = torch.Generator().manual_seed(seed * 1000 + attempt)
        gcfg = micro_generator_config()
        self.generator = build_generator(gcfg, seed)
        _jitter_biases(self.generator, g)
        # a single tiny sample keeps the number of ReLU units (potential kinks) small
        s = gcfg.input_size
        sketch = (torch.rand(1, 1, s, s, generator=g) > 0.5).double()
        # binary targets: outputs are strictly inside (0, 1), so the L1 terms stay off their kink
        target = (torch.rand(1, 3, s, s, generator=g) > 0.5).double()
        hint = normalize_hint(torch.randn(1, gcfg.hint_dim, generator=g, dtype=torch.float64))
        weights = LossWeights(0.3, 0.9)
        n, s = 2, micro_discriminator_config().input_size
        real = torch.rand(n, 3, s, s, generator=g, dtype=torch.float64)
        fake = torch.rand(n, 3, s, s, generator=g, dtype=torch.float64)
        v = normalize_hint(torch.randn(n, 4, generator=g, dtype=torch.float64))
        self.discriminator = build_discriminator(micro_discriminator_config("acgan"), seed)
        _jitter_biases(self.discriminator, g)
        self.checks = {
            "generator_l1_composite": (self.generator, lambda m: l1_composite(
                m(sketch, hint), target, weights, gcfg.grayscale_guide1).total),
            "discriminator_acgan": (self.discriminator, lambda m: acgan_loss(
                m(real, "acgan"), m(fake, "acgan"), v).d_loss),
            "discriminator_acgan_generator_term": (self.discriminator, lambda m: acgan_loss(
                m(real, "acgan"), m(fake, "acgan"), v).g_loss),
            "discriminator_dcgan": (self.discriminator, lambda m: dcgan_loss(
                m(real, "dcgan"), m(fake, "dcgan")).d_loss),
        }


def gradcheck_suite(seed: int = 0, step_size: float = GRADCHECK_STEP) -> Dict[str, float]:
    """Finite-difference checks of the composite L1 loss and both GAN losses on micro networks.

    Biases are randomized (with zero biases many ReLU inputs sit exactly on 0,
    where only one-sided derivatives exist). For each check, input draws are
    tried in a fixed order and the first point where the loss is locally
    smooth at `step_size` is used; see `locally_smooth`.
    """
    results = {}
    for name in _Fixture(seed, 0).checks:
        for attempt in range(GRADCHECK_ATTEMPTS):
            net, fn = _Fixture(seed, attempt).checks[name]
            if locally_smooth(net, fn, step_size):
                break
        else:
            log.warning("%s: no locally smooth point in %d draws; checking the last one", name, GRADCHECK_ATTEMPTS)
        log.info("%s: checking draw %d", name, attempt)
        results[name] = finite_difference_check(net, fn, step_size)
    return results
