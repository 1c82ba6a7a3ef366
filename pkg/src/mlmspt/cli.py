"""Command-line entry point: synth, train, eval, gradcheck, predict.

Exit codes: 0 success, 1 usage/config error, 2 numeric divergence or failed
gradient check, 3 I/O error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import asdict, dataclass, fields
from pathlib import Path
from typing import Optional

from . import gradcheck
from .data_io import (CheckpointError, DatasetManifest, FormatError, Sample, SynthConfig, generate_synthetic,
                      load_checkpoint, read_manifest, save_checkpoint, write_labels)
from .model import ABLATIONS, ConfigError, ModelConfig, _coerce, init_params, parse_kv
from .pointcloud import AugmentConfig
from .tensor import DTYPES, ContractError
from .training import (DivergenceError, MetricReport, TrainConfig, evaluate, predict_class, predict_parts,
                       thread_limit, train)

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3

log = logging.getLogger("mlmspt")


@dataclass
class RunConfig:
    # model
    task: str = "cls"
    ablation: str = "full"
    embed_dim: int = 64
    psa_proj_dim: int = 16
    levels: int = 4
    scales: int = 3
    heads: int = 4
    head_dim: int = 128
    psa_scale: str = "D"
    psa_ffn: bool = False
    # training
    epochs: int = 250
    batch_size: int = 0  # 0: 32 for classification, 8 for segmentation
    base_lr: float = 3e-4
    lr_step_size: int = 20
    lr_gamma: float = 0.7
    augment: bool = True
    dropout_prob: float = 0.1
    scale_lo: float = 0.8
    scale_hi: float = 1.25
    shift_lo: float = -0.1
    shift_hi: float = 0.1
    seed: int = 0
    precision: str = "f32"
    deterministic: bool = False
    # synthetic data
    classes: str = "sphere,cube,torus,cylinder"
    per_class: int = 8
    points: int = 256
    noise: float = 0.0
    # paths
    manifest: str = ""
    checkpoint: str = ""
    out: str = ""

    def validate(self) -> None:
        if self.task not in ("cls", "seg"):
            raise ConfigError(f"task must be cls or seg, got {self.task!r}")
        if self.ablation not in ABLATIONS:
            raise ConfigError(f"ablation must be one of {list(ABLATIONS)}, got {self.ablation!r}")
        if self.precision not in DTYPES:
            raise ConfigError(f"precision must be f32 or f64, got {self.precision!r}")
        if self.seed < 0:
            raise ConfigError("seed must be a non-negative integer")

    def to_text(self) -> str:
        out = []
        for f in fields(self):
            v = getattr(self, f.name)
            out.append(f"{f.name}={str(v).lower() if isinstance(v, bool) else v}")
        return "\n".join(out) + "\n"

    def model_config(self, n_points: int, input_dim: int, num_classes: int) -> ModelConfig:
        return ModelConfig(
            n_points=n_points, input_dim=input_dim, embed_dim=self.embed_dim, psa_proj_dim=self.psa_proj_dim,
            levels=self.levels, scales=self.scales, heads=self.heads, head_dim=self.head_dim,
            num_classes=num_classes, task=self.task, psa_scale=self.psa_scale, psa_ffn=self.psa_ffn,
        ).with_ablation(self.ablation)

    def train_config(self) -> TrainConfig:
        return TrainConfig(
            epochs=self.epochs,
            batch_size=self.batch_size or (32 if self.task == "cls" else 8),
            base_lr=self.base_lr, lr_step_size=self.lr_step_size, lr_gamma=self.lr_gamma, seed=self.seed,
            augment=self.augment,
            augmentation=AugmentConfig(self.dropout_prob, self.scale_lo, self.scale_hi, self.shift_lo, self.shift_hi),
            precision=self.precision, deterministic=self.deterministic,
        )


# flag dest -> RunConfig key
FLAG_KEYS = {
    "task": "task", "ablation": "ablation", "embed_dim": "embed_dim", "proj_dim": "psa_proj_dim",
    "levels": "levels", "heads": "heads", "head_dim": "head_dim", "epochs": "epochs",
    "batch_size": "batch_size", "lr": "base_lr", "lr_step": "lr_step_size", "lr_gamma": "lr_gamma",
    "augment": "augment", "seed": "seed", "precision": "precision", "deterministic": "deterministic",
    "classes": "classes", "per_class": "per_class", "points": "points", "noise": "noise",
    "manifest": "manifest", "checkpoint": "checkpoint", "out": "out",
}
# longer spellings of the ablation rows, e.g. "baseline+ppt"
ABLATION_ALIASES = {f"baseline+{k}": k for k in ("ppt", "ppt+mlt", "ppt+mst")}
ABLATION_ALIASES.update({"baseline+ppt+mlt+mst": "full", "ppt+mlt+mst": "full"})
MODEL_KEYS = ("embed_dim", "psa_proj_dim", "levels", "scales", "heads", "head_dim", "psa_scale", "psa_ffn")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def resolve_config(args) -> tuple:
    """Defaults <- config file <- flags. Returns (RunConfig, keys set explicitly)."""
    defaults = RunConfig()
    values = asdict(defaults)
    explicit = set()
    if args.config:
        kv = parse_kv(Path(args.config).read_text(encoding="utf-8"))
        for k, raw in kv.items():
            if k not in values:
                raise ConfigError(f"unknown config key {k!r} in {args.config}")
            values[k] = _coerce(k, raw, getattr(defaults, k))
            explicit.add(k)
    for dest, key in FLAG_KEYS.items():
        v = getattr(args, dest, None)
        if v is not None:
            values[key] = v
            explicit.add(key)
    values["ablation"] = ABLATION_ALIASES.get(values["ablation"], values["ablation"])
    cfg = RunConfig(**values)
    cfg.validate()
    return cfg, explicit


def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="flat key=value config file; flags override it")
    p.add_argument("--seed", type=int)
    p.add_argument("--deterministic", action="store_const", const=True,
                   help="single-threaded kernels, fixed reduction order")
    p.add_argument("--out", help="output directory")
    p.add_argument("--precision", choices=list(DTYPES))
    p.add_argument("--task", choices=["cls", "seg"])
    p.add_argument("--ablation", choices=list(ABLATIONS) + list(ABLATION_ALIASES))
    p.add_argument("-v", "--verbose", action="store_true")


def _model_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--embed-dim", type=int)
    p.add_argument("--proj-dim", type=int)
    p.add_argument("--levels", type=int)
    p.add_argument("--heads", type=int)
    p.add_argument("--head-dim", type=int)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="mlmspt", description="Point-cloud transformer with multi-level, multi-scale attention")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic shape dataset")
    _common(p)
    p.add_argument("--classes", help="comma-separated families: sphere,cube,torus,cylinder")
    p.add_argument("--per-class", type=int)
    p.add_argument("--points", type=int)
    p.add_argument("--noise", type=float)

    p = sub.add_parser("train", help="train a model; writes a run directory")
    _common(p)
    _model_flags(p)
    p.add_argument("--manifest")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--lr-step", type=int)
    p.add_argument("--lr-gamma", type=float)
    p.add_argument("--no-augment", dest="augment", action="store_const", const=False)

    for name, desc in (("eval", "evaluate a checkpoint on a dataset"),
                       ("predict", "write per-cloud predictions")):
        p = sub.add_parser(name, help=desc)
        _common(p)
        _model_flags(p)
        p.add_argument("--manifest")
        p.add_argument("--checkpoint")

    p = sub.add_parser("gradcheck", help="finite-difference check of every differentiable block")
    _common(p)
    return parser


def _dataset(cfg: RunConfig):
    if not cfg.manifest:
        raise UsageError("--manifest is required")
    manifest = read_manifest(cfg.manifest)
    clouds = manifest.load()
    if not clouds:
        raise ConfigError(f"manifest {cfg.manifest} lists no samples")
    if manifest.task != cfg.task:
        raise ConfigError(f"manifest task is {manifest.task!r} but --task is {cfg.task!r}")
    sizes = {len(c) for c in clouds}
    if len(sizes) != 1:
        raise ConfigError(f"clouds have differing point counts {sorted(sizes)}")
    return manifest, clouds


def _require_out(cfg: RunConfig) -> Path:
    if not cfg.out:
        raise UsageError("--out is required")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_synth(cfg: RunConfig) -> int:
    out = _require_out(cfg)
    scfg = SynthConfig(families=tuple(c.strip() for c in cfg.classes.split(",") if c.strip()),
                       per_class=cfg.per_class, points=cfg.points, noise=cfg.noise, seed=cfg.seed, task=cfg.task)
    scfg.validate()
    print(generate_synthetic(scfg, out))
    return EXIT_OK


def _write_report(out: Path, report: MetricReport) -> None:
    (out / "metrics.txt").write_text(report.to_table(), encoding="utf-8")
    (out / "metrics.kv").write_text(report.to_kv(), encoding="utf-8")


def cmd_train(cfg: RunConfig) -> int:
    out = _require_out(cfg)
    manifest, clouds = _dataset(cfg)
    mcfg = cfg.model_config(len(clouds[0]), clouds[0].features.shape[1], manifest.num_classes)
    (out / "config.echo").write_text(cfg.to_text(), encoding="utf-8")
    params = init_params(mcfg, cfg.seed, dtype=DTYPES[cfg.precision])
    log.info("model %s with %d parameters", mcfg.ablation, params.num_elements())
    params, report = train(mcfg, params, clouds, cfg.train_config(), parts=manifest.parts or None)
    save_checkpoint(params, mcfg, out / "checkpoint.bin")
    _write_report(out, report)
    print(report.to_table(), end="")
    return EXIT_OK


def _load_model(cfg: RunConfig, explicit: set, clouds):
    if not cfg.checkpoint:
        raise UsageError("--checkpoint is required")
    params, mcfg = load_checkpoint(cfg.checkpoint, dtype=DTYPES[cfg.precision])
    if mcfg is None:
        raise ConfigError(f"checkpoint {cfg.checkpoint} carries no model config")
    for key in MODEL_KEYS:
        if key in explicit and getattr(cfg, key) != getattr(mcfg, key):
            raise ConfigError(f"checkpoint has {key}={getattr(mcfg, key)} but the run config asks for {getattr(cfg, key)}")
    if "ablation" in explicit and cfg.ablation != mcfg.ablation:
        raise ConfigError(f"checkpoint is ablation {mcfg.ablation!r}, run config asks for {cfg.ablation!r}")
    if mcfg.task != cfg.task:
        raise ConfigError(f"checkpoint task is {mcfg.task!r}, run config task is {cfg.task!r}")
    if len(clouds[0]) != mcfg.n_points:
        raise ConfigError(f"data has {len(clouds[0])} points per cloud, checkpoint expects n_points={mcfg.n_points}")
    if clouds[0].features.shape[1] != mcfg.input_dim:
        raise ConfigError(f"data has {clouds[0].features.shape[1]} channels, checkpoint expects {mcfg.input_dim}")
    return params, mcfg


def cmd_eval(cfg: RunConfig, explicit: set) -> int:
    manifest, clouds = _dataset(cfg)
    params, mcfg = _load_model(cfg, explicit, clouds)
    with thread_limit(cfg.deterministic):
        report = evaluate(mcfg, params, clouds, manifest.parts or None)
    if mcfg.task == "cls":
        print(f"overall_accuracy={report.overall_accuracy!r}")
    else:
        print(f"instance_miou={report.instance_miou!r}")
    if cfg.out:
        _write_report(_require_out(cfg), report)
    return EXIT_OK


def cmd_predict(cfg: RunConfig, explicit: set) -> int:
    out = _require_out(cfg)
    manifest, clouds = _dataset(cfg)
    params, mcfg = _load_model(cfg, explicit, clouds)
    with thread_limit(cfg.deterministic):
        if mcfg.task == "cls":
            lines = []
            for s, c in zip(manifest.samples, clouds):
                k = predict_class(c, mcfg, params)
                lines.append(f"{s.points},{k}")
                print(f"{s.points},{k}")
            (out / "predictions.csv").write_text("\n".join(lines) + "\n", encoding="utf-8")
            return EXIT_OK
        samples = []
        for s, c in zip(manifest.samples, clouds):
            pred = predict_parts(c, mcfg, params, manifest.parts[s.label])
            rel = Path(s.points)
            rel = (Path(rel.name) if rel.is_absolute() else rel).with_suffix(".pred.plb")
            (out / rel).parent.mkdir(parents=True, exist_ok=True)
            write_labels(out / rel, pred)
            samples.append(Sample(str(manifest.resolve(s.points).resolve()), s.label, str(rel)))
    pm = DatasetManifest("seg", manifest.class_names, samples, manifest.parts, out)
    pm.write(out / "predictions.txt")
    print(out / "predictions.txt")
    return EXIT_OK


def cmd_gradcheck(cfg: RunConfig) -> int:
    results = gradcheck.run_gradcheck(cfg.seed)
    report = gradcheck.format_report(results)
    print(report, end="")
    if cfg.out:
        (_require_out(cfg) / "gradcheck.txt").write_text(report, encoding="utf-8")
    return EXIT_OK if all(r.passed for r in results) else EXIT_NUMERIC


def main(argv: Optional[list] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg, explicit = resolve_config(args)
        if args.command == "synth":
            return cmd_synth(cfg)
        if args.command == "train":
            return cmd_train(cfg)
        if args.command == "eval":
            return cmd_eval(cfg, explicit)
        if args.command == "predict":
            return cmd_predict(cfg, explicit)
        return cmd_gradcheck(cfg)
    except (UsageError, ConfigError, ContractError) as exc:
        print(f"mlmspt {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except DivergenceError as exc:
        print(f"mlmspt {args.command}: diverged: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, FormatError, CheckpointError) as exc:
        print(f"mlmspt {args.command}: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO


if __name__ == "__main__":
    sys.exit(main())
