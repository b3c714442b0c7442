"""Command-line entry point: ``geofake {prepare,synth,train,eval,explain,report}``.

Every command resolves its settings from built-in defaults, then an optional
flat JSON ``--config`` file, then explicit flags, and writes the result to
``<out>/config.resolved.json`` before doing any work.

Exit codes: 0 success, 2 invalid input or configuration, 3 runtime failure.
"""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import explain, fixtures, ingest, metrics, models, report, trainer
from .transforms import TransformConfig

logger = logging.getLogger("geofake")

EXIT_OK, EXIT_INVALID, EXIT_RUNTIME = 0, 2, 3

_TRANSFORM_KEYS = ("crop_size", "flip_prob", "max_rotation", "brightness", "contrast", "saturation", "hue")

DEFAULTS: dict[str, dict] = {
    "prepare": {"root": None, "ratios": [0.80, 0.15, 0.05], "source": "unknown", "check_decode": True},
    "synth": {"n_per_class": 100, "size": 224, "artifact_kinds": list(fixtures.ARTIFACT_KINDS),
              "clone_patch": 40, "clone_copies": 3, "ratios": [0.80, 0.15, 0.05]},
    "train": {"manifest": None, "families": ["cnn"], "scale": "tiny", "pretrained": True,
              "epochs": 20, "batch_size": 32, "lr": 1e-4, "weight_decay": 1e-5, "patience": 3,
              "factor": 0.5, "min_lr": 1e-7, "monitor": "val_loss", "threshold": 1e-4, "resume": False,
              **TransformConfig().to_dict()},
    "eval": {"checkpoint": None, "manifest": None, "split": "test"},
    "explain": {"checkpoint": None, "manifest": None, "method": None, "split": "test", "n_correct": 10,
                "n_wrong": 10, "alpha": 0.5, "palette": "viridis"},
    "report": {"run_dir": None},
}
for _cmd in DEFAULTS:
    DEFAULTS[_cmd] = {"seed": 0, "out": None, **DEFAULTS[_cmd]}
# transform settings travel as a nested dict in the resolved train config
for _k in ("mu", "sigma", "crop_scale", "crop_ratio"):
    DEFAULTS["train"].pop(_k, None)


class ConfigError(ValueError):
    pass


def _parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="flat JSON file of settings; flags override it")
    common.add_argument("--seed", type=int)
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="geofake", description="Train and inspect real-vs-fake image classifiers.",
                                epilog="Exit codes: 0 success, 2 invalid input or configuration, 3 runtime failure.")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("prepare", parents=[common], help="scan an image tree and write a split manifest")
    s.add_argument("--root", type=Path)
    s.add_argument("--ratios", type=float, nargs=3, metavar=("TRAIN", "VAL", "TEST"))
    s.add_argument("--source")
    s.add_argument("--no-decode-check", dest="check_decode", action="store_const", const=False)

    s = sub.add_parser("synth", parents=[common], help="generate a procedural fixture dataset")
    s.add_argument("--n-per-class", type=int)
    s.add_argument("--size", type=int)
    s.add_argument("--artifact-kinds", nargs="+", choices=fixtures.ARTIFACT_KINDS)
    s.add_argument("--clone-patch", type=int)
    s.add_argument("--clone-copies", type=int)
    s.add_argument("--ratios", type=float, nargs=3, metavar=("TRAIN", "VAL", "TEST"))

    s = sub.add_parser("train", parents=[common], help="train classifier heads on a manifest")
    s.add_argument("--manifest", type=Path)
    s.add_argument("--families", nargs="+", choices=models.FAMILIES)
    s.add_argument("--scale", choices=models.SCALES)
    s.add_argument("--pretrained", action=argparse.BooleanOptionalAction, default=None)
    s.add_argument("--epochs", type=int)
    s.add_argument("--batch-size", type=int)
    s.add_argument("--lr", type=float)
    s.add_argument("--weight-decay", type=float)
    s.add_argument("--patience", type=int)
    s.add_argument("--factor", type=float)
    s.add_argument("--min-lr", type=float)
    s.add_argument("--monitor", choices=trainer.MONITORS)
    s.add_argument("--threshold", type=float)
    s.add_argument("--resume", action="store_const", const=True, help="continue from <out>/<family>/latest")
    for key in _TRANSFORM_KEYS:
        s.add_argument("--" + key.replace("_", "-"), type=float if key != "crop_size" else int)

    s = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint on one split")
    s.add_argument("--checkpoint", type=Path)
    s.add_argument("--manifest", type=Path)
    s.add_argument("--split", choices=ingest.SPLITS)

    s = sub.add_parser("explain", parents=[common], help="render a saliency overlay gallery")
    s.add_argument("--checkpoint", type=Path)
    s.add_argument("--manifest", type=Path)
    s.add_argument("--method", choices=explain.METHODS)
    s.add_argument("--split", choices=ingest.SPLITS)
    s.add_argument("--n-correct", type=int)
    s.add_argument("--n-wrong", type=int)
    s.add_argument("--alpha", type=float)
    s.add_argument("--palette")

    s = sub.add_parser("report", parents=[common], help="plot training curves and summarize runs")
    s.add_argument("--run-dir", type=Path)
    return p


def resolve_config(command: str, args: argparse.Namespace) -> dict:
    """Defaults, then the JSON config file, then explicit flags."""
    cfg = dict(DEFAULTS[command])
    if args.config is not None:
        try:
            loaded = json.loads(Path(args.config).read_text())
        except FileNotFoundError as exc:
            raise ConfigError(f"config file not found: {args.config}") from exc
        except json.JSONDecodeError as exc:
            raise ConfigError(f"config file {args.config} is not valid JSON: {exc}") from exc
        if not isinstance(loaded, dict):
            raise ConfigError("config file must hold a flat JSON object")
        unknown = set(loaded) - set(cfg)
        if unknown:
            raise ConfigError(f"unknown keys for '{command}': {sorted(unknown)}")
        cfg.update(loaded)
    for key, value in vars(args).items():
        if key in cfg and value is not None:
            cfg[key] = value
    cfg = {k: str(v) if isinstance(v, Path) else v for k, v in cfg.items()}
    if cfg["out"] is None:
        if command == "report" and cfg.get("run_dir"):
            cfg["out"] = cfg["run_dir"]
        else:
            raise ConfigError("--out is required")
    required = {"prepare": ["root"], "train": ["manifest"], "eval": ["checkpoint", "manifest"],
                "explain": ["checkpoint", "manifest", "method"], "report": []}.get(command, [])
    missing = [k for k in required if cfg.get(k) is None]
    if missing:
        raise ConfigError(f"'{command}' needs: {', '.join('--' + k.replace('_', '-') for k in missing)}")
    return cfg


def write_resolved(cfg: dict, command: str) -> Path:
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    path = out / "config.resolved.json"
    path.write_text(json.dumps({"command": command, **cfg}, indent=1, sort_keys=True) + "\n")
    return path


def _transform_config(cfg: dict) -> TransformConfig:
    return TransformConfig(**{k: cfg[k] for k in _TRANSFORM_KEYS if k in cfg})


def cmd_prepare(cfg: dict) -> Path:
    manifest = ingest.scan_tree(cfg["root"], source=cfg["source"], check_decode=cfg["check_decode"])
    manifest = ingest.assign_splits(manifest.records, ingest.SplitRatios(*cfg["ratios"]), seed=cfg["seed"],
                                    root=manifest.root)
    manifest.warnings = list(manifest.warnings) + list(ingest.scan_tree(cfg["root"], cfg["source"], False).warnings)
    report_ = ingest.verify_manifest(manifest, check_decode=cfg["check_decode"])
    path = manifest.save(Path(cfg["out"]) / "manifest.json")
    for finding in report_.findings:
        logger.warning("%s: %s (%s)", finding.kind, finding.path, finding.detail)
    logger.info("wrote %s: %s", path, json.dumps(manifest.counts))
    return path


def cmd_synth(cfg: dict) -> Path:
    spec = fixtures.FixtureSpec(n_per_class=cfg["n_per_class"], size=cfg["size"],
                                artifact_kinds=tuple(cfg["artifact_kinds"]), seed=cfg["seed"],
                                clone_patch=cfg["clone_patch"], clone_copies=cfg["clone_copies"],
                                split_ratios=tuple(cfg["ratios"]))
    manifest = fixtures.build_fixture(spec, cfg["out"])
    logger.info("fixture written to %s: %s", cfg["out"], json.dumps(manifest.counts))
    return Path(cfg["out"]) / "manifest.json"


def cmd_train(cfg: dict) -> dict[str, trainer.FitResult]:
    manifest = ingest.DatasetManifest.load(cfg["manifest"])
    train_set = trainer.ImageSet.from_manifest(manifest, "train")
    val_set = trainer.ImageSet.from_manifest(manifest, "val")
    if len(train_set) == 0 or len(val_set) == 0:
        raise ingest.SplitError("manifest needs non-empty train and val splits")
    tcfg = _transform_config(cfg)
    results = {}
    for family in cfg["families"]:
        spec = models.ModelSpec(family=family, scale=cfg["scale"], pretrained=cfg["pretrained"], seed=cfg["seed"])
        run_dir = Path(cfg["out"]) / family
        train_cfg = trainer.TrainConfig(
            epochs=cfg["epochs"], batch_size=cfg["batch_size"], lr=cfg["lr"], weight_decay=cfg["weight_decay"],
            patience=cfg["patience"], factor=cfg["factor"], min_lr=cfg["min_lr"], monitor=cfg["monitor"],
            threshold=cfg["threshold"], seed=cfg["seed"], checkpoint_dir=str(run_dir),
        )
        model = models.build(spec)
        logger.info("training %s/%s (%d trainable parameters)", family, cfg["scale"], models.count_trainable(model))
        results[family] = trainer.fit(model, train_set, val_set, train_cfg, tcfg,
                                      log_path=run_dir / "metrics.jsonl", resume=cfg["resume"])
    return results


def _checkpoint_dir(path) -> Path:
    """Accept a checkpoint directory, a family run directory or its ``best/`` child."""
    path = Path(path)
    for candidate in (path, path / "best"):
        if (candidate / "checkpoint.pt").is_file():
            return candidate
    raise FileNotFoundError(f"no checkpoint.pt in {path} or {path / 'best'}")


def cmd_eval(cfg: dict) -> Path:
    model, _ = models.load_checkpoint(_checkpoint_dir(cfg["checkpoint"]))
    manifest = ingest.DatasetManifest.load(cfg["manifest"])
    data = trainer.ImageSet.from_manifest(manifest, cfg["split"])
    if len(data) == 0:
        raise ingest.SplitError(f"split '{cfg['split']}' is empty")
    row, cm = trainer.evaluate(model, data, split=cfg["split"])
    path = metrics.write_report(cm, Path(cfg["out"]) / "report.json")
    logger.info("%s accuracy %.4f, f1_macro %.4f -> %s", cfg["split"], row.accuracy, row.f1_macro, path)
    return path


def cmd_explain(cfg: dict) -> Path:
    model, _ = models.load_checkpoint(_checkpoint_dir(cfg["checkpoint"]))
    manifest = ingest.DatasetManifest.load(cfg["manifest"])
    index = explain.explain_batch(model, manifest, cfg["method"], cfg["out"], n_correct=cfg["n_correct"],
                                  n_wrong=cfg["n_wrong"], split=cfg["split"], alpha=cfg["alpha"],
                                  palette=cfg["palette"])
    for note in index.get("notes", []):
        logger.warning(note)
    return Path(cfg["out"]) / "index.json"


def cmd_report(cfg: dict) -> tuple[Path, Path]:
    curves, summary = report.write_report(cfg["run_dir"] or cfg["out"], cfg["out"])
    logger.info("wrote %s and %s", curves, summary)
    return curves, summary


COMMANDS = {"prepare": cmd_prepare, "synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "explain": cmd_explain, "report": cmd_report}


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    logger.setLevel(logging.INFO)
    try:
        cfg = resolve_config(args.command, args)
        write_resolved(cfg, args.command)
        COMMANDS[args.command](cfg)
    except (ValueError, FileNotFoundError) as exc:
        logger.error("%s", exc)
        return EXIT_INVALID
    except Exception as exc:  # any other failure is a runtime error
        logger.error("%s: %s", type(exc).__name__, exc)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
