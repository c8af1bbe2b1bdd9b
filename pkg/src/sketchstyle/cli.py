"""Command-line entry point.

Exit codes: 0 success, 1 runtime failure, 2 usage or configuration error.
Every command writes ``run_manifest.json`` into its output root.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import asdict, replace
from datetime import datetime, timezone
from pathlib import Path
from typing import Dict, List, Optional

import torch
import yaml

from . import __version__, probes
from .archive import ArchiveError
from .arch import ConfigError, DiscriminatorConfig, GeneratorConfig
from .data import ImageDecodeError, PairedArrays, build_dataset, load_png, save_png
from .features import EncoderConfig, load_encoder_weights, save_encoder_weights, style_hint, train_style_encoder
from .training import TrainConfig, TrainState, fit, load_checkpoint, load_generator, save_checkpoint

log = logging.getLogger("sketchstyle")

MANIFEST_NAME = "run_manifest.json"
SECTIONS = {"generator": GeneratorConfig, "discriminator": DiscriminatorConfig,
            "encoder": EncoderConfig, "train": TrainConfig}


class UsageError(ConfigError):
    pass


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

def load_config(path: Optional[str]) -> Dict[str, dict]:
    """YAML document with optional top-level sections generator/discriminator/encoder/train."""
    if not path:
        return {k: {} for k in SECTIONS}
    try:
        doc = yaml.safe_load(Path(path).read_text()) or {}
    except (OSError, yaml.YAMLError) as e:
        raise UsageError(f"cannot read config {path}: {e}") from e
    if not isinstance(doc, dict):
        raise UsageError(f"config {path} must be a mapping")
    unknown = set(doc) - set(SECTIONS)
    if unknown:
        raise UsageError(f"config {path}: unknown section(s) {sorted(unknown)}")
    return {k: dict(doc.get(k) or {}) for k in SECTIONS}


def apply_overrides(cfg: Dict[str, dict], pairs: List[str]) -> None:
    for item in pairs:
        key, sep, raw = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or section not in SECTIONS:
            raise UsageError(f"--set expects section.key=value with section in {sorted(SECTIONS)}, got {item!r}")
        cfg[section][name] = yaml.safe_load(raw)


def _materialize(cls, values: dict):
    try:
        return cls.from_dict(values).validate()
    except TypeError as e:
        raise UsageError(f"{cls.__name__}: {e}") from e


# ---------------------------------------------------------------------------
# manifest
# ---------------------------------------------------------------------------

class RunManifest:
    def __init__(self, command: str, argv: List[str], out: Path):
        self.out = out
        self.data = {"command": command, "argv": argv, "version": __version__,
                     "started": _now(), "finished": None, "config": {}, "seed": None, "artifacts": {}}

    def write(self) -> None:
        self.data["finished"] = _now()
        self.out.mkdir(parents=True, exist_ok=True)
        (self.out / MANIFEST_NAME).write_text(json.dumps(self.data, indent=1, sort_keys=True) + "\n")


def _now() -> str:
    return datetime.now(timezone.utc).isoformat(timespec="seconds")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_dataset_gen(args, manifest: RunManifest) -> int:
    path = build_dataset(args.classes, args.per_class, args.size, args.seed, args.out)
    manifest.data.update(seed=args.seed, config={"classes": args.classes, "per_class": args.per_class,
                                                 "size": args.size})
    manifest.data["artifacts"] = {"manifest": str(path)}
    print(f"wrote {args.classes * args.per_class} pairs to {args.out}")
    return 0


def cmd_train_encoder(args, manifest: RunManifest) -> int:
    cfg = load_config(args.config)
    apply_overrides(cfg, args.set)
    data = PairedArrays.load(args.data)
    enc_values = {"input_size": int(data.paintings.shape[-1]), **cfg["encoder"]}
    enc_cfg = _materialize(EncoderConfig, enc_values)
    encoder = train_style_encoder(data.paintings, data.labels, args.epochs, enc_cfg, seed=args.seed)
    out = Path(args.out)
    save_encoder_weights(encoder, out / "encoder.nta")
    manifest.data.update(seed=args.seed, config={"encoder": enc_cfg.to_dict(), "epochs": args.epochs})
    manifest.data["artifacts"] = {"encoder": str(out / "encoder.nta")}
    manifest.data["probe_accuracy"] = encoder.probe_accuracy
    print(f"probe accuracy {encoder.probe_accuracy:.4f}")
    if args.min_accuracy is not None and encoder.probe_accuracy < args.min_accuracy:
        print(f"error: probe accuracy below required {args.min_accuracy}", file=sys.stderr)
        return 1
    return 0


def resolve_train_configs(args):
    cfg = load_config(args.config)
    for flag, key in (("steps", "steps"), ("seed", "seed"), ("alpha", "alpha"), ("beta", "beta"),
                      ("lam", "lam"), ("batch_size", "batch_size"), ("checkpoint_interval", "checkpoint_interval")):
        v = getattr(args, flag, None)
        if v is not None:
            cfg["train"][key] = v
    apply_overrides(cfg, args.set)
    tcfg = _materialize(TrainConfig, cfg["train"])
    return cfg, tcfg


def cmd_train(args, manifest: RunManifest) -> int:
    cfg, tcfg = resolve_train_configs(args)
    out = Path(args.out)
    data = PairedArrays.load(args.data)
    if args.resume:
        state = load_checkpoint(args.resume)
        tcfg = replace(state.config, **{k: v for k, v in cfg["train"].items()}).validate()
        state.config = tcfg
        remaining = max(0, tcfg.steps - state.step)
    else:
        if not args.encoder:
            raise UsageError("--encoder is required unless --resume is given")
        encoder = load_encoder_weights(args.encoder)
        gcfg = _materialize(GeneratorConfig, {"input_size": int(data.sketches.shape[-1]), "hint_dim": encoder.hint_dim,
                                              **cfg["generator"]})
        dcfg = _materialize(DiscriminatorConfig, {"input_size": gcfg.input_size, "head_dim": encoder.hint_dim,
                                                  **cfg["discriminator"]})
        state = TrainState.create(gcfg, dcfg, encoder, tcfg)
        remaining = tcfg.steps
    if data.sketches.shape[-1] != state.generator.cfg.input_size:
        raise UsageError(f"dataset images are {data.sketches.shape[-1]}px, generator expects "
                         f"{state.generator.cfg.input_size}px")
    manifest.data.update(seed=tcfg.seed, config={
        "generator": state.generator.cfg.to_dict(), "discriminator": state.discriminator.cfg.to_dict(),
        "encoder": state.encoder.cfg.to_dict(), "train": tcfg.to_dict()})
    out.mkdir(parents=True, exist_ok=True)
    metrics = out / "metrics.jsonl"
    if not args.resume and metrics.exists():
        metrics.unlink()
    fit(state, data, remaining, metrics_path=metrics, checkpoint_dir=out / "checkpoints")
    final = out / "final.nta"
    save_checkpoint(state, final)
    manifest.data["artifacts"] = {"checkpoint": str(final), "metrics": str(metrics)}
    manifest.data["final_step"] = state.step
    print(f"trained to step {state.step}; checkpoint {final}")
    return 0


def _image_tensor(path, channels: int, size: int, what: str) -> torch.Tensor:
    img = load_png(path, channels)
    if img.shape[:2] != (size, size):
        raise UsageError(f"{what} {path} is {img.shape[1]}x{img.shape[0]}, expected {size}x{size}")
    return torch.from_numpy(img.transpose(2, 0, 1).copy()).unsqueeze(0)


def cmd_infer(args, manifest: RunManifest) -> int:
    G, encoder = load_generator(args.checkpoint)
    size = G.cfg.input_size
    sketch = _image_tensor(args.sketch, G.cfg.in_channels, size, "sketch")
    style = _image_tensor(args.style, 3, encoder.cfg.input_size, "style image")
    with torch.no_grad():
        out = G(sketch, style_hint(encoder, style))
    out_path = Path(args.out)
    save_png(out.final[0].numpy().transpose(1, 2, 0), out_path)
    artifacts = {"painting": str(out_path)}
    if args.emit_guides:
        if out.guide1 is None:
            raise UsageError("checkpoint generator has no guide decoders")
        for name, t in (("guide1", out.guide1), ("guide2", out.guide2)):
            p = out_path.with_name(f"{out_path.stem}_{name}{out_path.suffix}")
            save_png(t[0].numpy().transpose(1, 2, 0), p)
            artifacts[name] = str(p)
    manifest.out = out_path.parent
    manifest.data["artifacts"] = artifacts
    manifest.data["config"] = {"checkpoint": str(args.checkpoint), "sketch": str(args.sketch),
                               "style": str(args.style)}
    print("\n".join(artifacts.values()))
    return 0


def _probe_data(args) -> PairedArrays:
    if args.data:
        return PairedArrays.load(args.data)
    return PairedArrays.synthesize(args.classes, args.per_class, args.size, args.seed)


def cmd_probe(args, manifest: RunManifest) -> int:
    out = Path(args.out)
    manifest.data["seed"] = args.seed
    if args.experiment == "gradcheck":
        results = probes.gradcheck_suite(seed=args.seed)
        for name, err in results.items():
            print(f"{name}: max relative error {err:.3e}")
        worst = max(results.values())
        manifest.data["config"] = {"experiment": "gradcheck"}
        manifest.data["results"] = results
        print(f"max relative error {worst:.3e} ({'ok' if worst < probes.GRADCHECK_TOL else 'FAIL'})")
        return 0 if worst < probes.GRADCHECK_TOL else 1

    settings = probes.ProbeSettings(steps=args.steps, seed=args.seed, lr=args.lr, batch_size=args.batch_size,
                                    lr_schedule=args.lr_schedule, window=args.window).validate()
    data = _probe_data(args)
    if args.experiment == "copy":
        paintings = torch.from_numpy(data.paintings)
        reports = [probes.run_copy_experiment(paintings, settings=settings, skip_connections=s) for s in (True, False)]
        summary = {r.label: r.summary() for r in reports}
        on, off = reports
        summary["gates"] = {
            "skips_on_l1": on.eval_loss < probes.COPY_MAX_L1,
            "skips_on_ratio": on.summary_ratio < probes.COPY_MAX_RATIO,
            "skips_off_ratio": off.summary_ratio > probes.COPY_CONTROL_MIN_RATIO,
        }
    else:
        if args.encoder:
            encoder = load_encoder_weights(args.encoder)
        else:
            encoder = train_style_encoder(data.paintings, data.labels, args.encoder_epochs, seed=args.seed)
        paintings = torch.from_numpy(data.paintings)
        hints = style_hint(encoder, paintings)
        cmp = probes.run_guide_comparison(torch.from_numpy(data.sketches), paintings, hints, settings=settings)
        reports = [cmp.with_guides, cmp.without_guides]
        summary = {r.label: {**r.summary(), "median_ratio": r.median_ratio(),
                             "min_mid_norm": float(min(r.norms["mid"]))} for r in reports}
        summary["ratio_factor"] = cmp.ratio_factor
        summary["gates"] = {"ratio_factor": cmp.ratio_factor >= probes.GUIDE_MIN_FACTOR,
                            "mid_norm_positive": min(cmp.with_guides.norms["mid"], default=1.0) > 0}
    for r in reports:
        r.write_jsonl(out / f"{r.label}.jsonl")
    probes.plot_curves(reports, out / f"{args.experiment}_curves.png", title=f"{args.experiment} experiment")
    (out / f"{args.experiment}_summary.json").write_text(json.dumps(summary, indent=1) + "\n")
    manifest.data["config"] = {"experiment": args.experiment, "settings": asdict(settings),
                               "data": args.data or {"classes": args.classes, "per_class": args.per_class,
                                                     "size": args.size}}
    manifest.data["artifacts"] = {"summary": str(out / f"{args.experiment}_summary.json"),
                                  "plot": str(out / f"{args.experiment}_curves.png")}
    for r in reports:
        print(f"{r.label}: eval L1 {r.eval_loss:.4f}, median ratio(last {r.window}) {r.summary_ratio:.4f}, "
              f"median ratio(all) {r.median_ratio():.4f}")
    if "ratio_factor" in summary:
        print(f"median-ratio factor with/without guides: {summary['ratio_factor']:.2f}")
    for name, ok in summary["gates"].items():
        print(f"gate {name}: {'met' if ok else 'not met'}")
    return 0


def cmd_rerun(args, manifest: RunManifest) -> int:
    recorded = json.loads(Path(args.manifest).read_text())
    argv = list(recorded["argv"])
    if args.out:
        argv = _replace_flag(argv, "--out", args.out)
    return main(argv)


def _replace_flag(argv: List[str], flag: str, value: str) -> List[str]:
    out = list(argv)
    for i, a in enumerate(out):
        if a == flag and i + 1 < len(out):
            out[i + 1] = value
            return out
        if a.startswith(flag + "="):
            out[i] = f"{flag}={value}"
            return out
    return out + [flag, value]


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sketchstyle", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    d = sub.add_parser("dataset-gen", help="generate the synthetic paired dataset")
    d.add_argument("--classes", type=int, default=8)
    d.add_argument("--per-class", type=int, default=250)
    d.add_argument("--size", type=int, default=64)
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", required=True)

    e = sub.add_parser("train-encoder", help="train the style encoder on a generated dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--epochs", type=int, default=5)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--config")
    e.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    e.add_argument("--min-accuracy", type=float, default=0.9)
    e.add_argument("--out", required=True)

    t = sub.add_parser("train", help="adversarial training")
    t.add_argument("--config")
    t.add_argument("--data", required=True)
    t.add_argument("--encoder")
    t.add_argument("--resume")
    t.add_argument("--steps", type=int)
    t.add_argument("--seed", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--alpha", type=float)
    t.add_argument("--beta", type=float)
    t.add_argument("--lam", type=float)
    t.add_argument("--checkpoint-interval", type=int)
    t.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE")
    t.add_argument("--out", required=True)

    i = sub.add_parser("infer", help="paint a sketch in the style of a reference image")
    i.add_argument("--sketch", required=True)
    i.add_argument("--style", required=True)
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--emit-guides", action="store_true")
    i.add_argument("--out", required=True)

    pr = sub.add_parser("probe", help="gradient-flow experiments")
    pr.add_argument("--experiment", required=True, choices=("copy", "guides", "gradcheck"))
    pr.add_argument("--steps", type=int, default=2000)
    pr.add_argument("--seed", type=int, default=0)
    pr.add_argument("--data")
    pr.add_argument("--classes", type=int, default=8)
    pr.add_argument("--per-class", type=int, default=50)
    pr.add_argument("--size", type=int, default=64)
    pr.add_argument("--encoder")
    pr.add_argument("--encoder-epochs", type=int, default=5)
    pr.add_argument("--lr", type=float, default=probes.ProbeSettings.lr)
    pr.add_argument("--lr-schedule", choices=("constant", "linear"), default=probes.ProbeSettings.lr_schedule)
    pr.add_argument("--batch-size", type=int, default=probes.ProbeSettings.batch_size)
    pr.add_argument("--window", type=int, default=probes.ProbeSettings.window)
    pr.add_argument("--out", required=True)

    r = sub.add_parser("rerun", help="replay the command recorded in a run manifest")
    r.add_argument("manifest")
    r.add_argument("--out")
    return p


COMMANDS = {"dataset-gen": cmd_dataset_gen, "train-encoder": cmd_train_encoder, "train": cmd_train,
            "infer": cmd_infer, "probe": cmd_probe, "rerun": cmd_rerun}


def main(argv: Optional[List[str]] = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)   # exits with status 2 on usage errors
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    out = Path(getattr(args, "out", None) or ".")
    manifest = RunManifest(args.command, argv, out)
    try:
        code = COMMANDS[args.command](args, manifest)
    except ConfigError as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ArchiveError, ImageDecodeError, OSError, RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1
    if args.command != "rerun":
        manifest.write()
    return code


if __name__ == "__main__":
    sys.exit(main())
