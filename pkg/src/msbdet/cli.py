"""Command-line entry point: ``msbdet {gradcheck,synth,train,infer,eval,ablation}``.

Every command that writes a run directory also writes the exact config used
(``config.json``) and ``run.json`` with the tool version and seed. Outputs
carry no timestamps, so reruns with the same config and seed are
byte-identical.

Exit codes: 0 success, 1 validation failure (bad config, failed gradient
check, shape mismatch), 2 I/O failure (missing or corrupt files).
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

from . import __version__
from .config import RunConfig
from .data_synth import read_manifest, write_dataset
from .errors import ConfigError, CorruptionError, ShapeError
from .froc_eval import evaluate, read_detections, read_ground_truth, write_detections
from .gradcheck import CHECKS, run_checks
from .model import VARIANTS

log = logging.getLogger("msbdet")

EXIT_OK, EXIT_INVALID, EXIT_IO = 0, 1, 2


class CheckFailed(Exception):
    """A verification command ran to completion but did not pass."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _fp_rates(text: str) -> tuple[float, ...]:
    try:
        rates = tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None
    if not rates or any(r <= 0 for r in rates):
        raise argparse.ArgumentTypeError("FP rates must be positive")
    return rates


def _int_list(text: str) -> tuple[int, ...]:
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None


def load_config(args: argparse.Namespace, fallback: Path | None = None) -> RunConfig:
    """Config file (or ``fallback`` if it exists, else defaults) with command-line overrides applied."""
    path = args.config
    if path is None and fallback is not None and fallback.is_file():
        path = fallback
    cfg = RunConfig.load(path) if path is not None else RunConfig()
    changes: dict = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.model is not None:
        changes["model"] = args.model
    if args.out is not None:
        changes["out_dir"] = str(args.out)
    if args.iou_thresh is not None:
        changes["iou_thresh"] = args.iou_thresh
    if args.fp_rates is not None:
        changes["fp_rates"] = args.fp_rates
    opt = {}
    if getattr(args, "lr", None) is not None:
        opt["learning_rate"] = args.lr
    if getattr(args, "epochs", None) is not None:
        opt["epochs"] = args.epochs
    if opt:
        changes["optimizer"] = type(cfg.optimizer)(**{**cfg.optimizer.__dict__, **opt})
    return cfg.replace(**changes) if changes else cfg


def write_run_files(out: Path, cfg: RunConfig, command: str) -> None:
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json() + "\n", encoding="utf-8")
    run = {"tool": "msbdet", "version": __version__, "command": command, "seed": cfg.seed}
    (out / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _dataset(args: argparse.Namespace, cfg: RunConfig):
    root = args.data or cfg.dataset_dir
    if root is None:
        raise ConfigError("no dataset given: pass --data DIR (see `msbdet synth`) or set dataset_dir in the config")
    if not (Path(root) / "manifest.json").is_file():
        raise FileNotFoundError(f"{root}: no manifest.json; generate a dataset with `msbdet synth --out {root}`")
    return read_manifest(root)


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------


def cmd_gradcheck(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    precision = args.precision or cfg.gradcheck_precision
    results = run_checks(precision, seed=cfg.seed, names=args.only)
    width = max(len(r.name) for r in results)
    for r in results:
        status = "ok" if r.passed else "FAIL"
        print(f"{r.name.ljust(width)}  max_rel_err={r.max_error:.3e}  tol={r.tolerance:.0e}  {status}")
    failed = [r for r in results if not r.passed]
    if failed:
        details = ", ".join(f"{r.name} ({r.worst_param}: {r.max_error:.3e})" for r in failed)
        raise CheckFailed(f"gradient check failed for: {details}")
    print(f"all {len(results)} gradient checks passed ({precision})")
    return EXIT_OK


def cmd_synth(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    out = Path(args.out or cfg.dataset_dir or "data")
    phantom = cfg.phantom
    if args.seed is not None:
        phantom = type(phantom)(**{**phantom.__dict__, "seed": args.seed})
    manifest = write_dataset(phantom, cfg.split_counts, out)
    print(f"wrote {len(manifest.images)} stacks to {out}")
    return EXIT_OK


def cmd_train(args: argparse.Namespace) -> int:
    from .training import load_split, save_params, train

    cfg = load_config(args)
    manifest = _dataset(args, cfg)
    out = Path(cfg.out_dir)
    images, anns, _ = load_split(manifest, args.split)
    if not images:
        raise ConfigError(f"split {args.split!r} of {manifest.root} is empty")
    write_run_files(out, cfg, "train")
    with open(out / "loss.csv", "w", encoding="utf-8", newline="") as fh:
        fh.write("epoch,step,loss,classification,regression\n")

        def on_step(epoch, step, loss, parts):
            fh.write(f"{epoch},{step},{loss!r},{parts['classification']!r},{parts['regression']!r}\n")
            log.info("epoch %d step %d loss %.6f", epoch, step, loss)

        result = train(cfg, images, anns, on_step=on_step)
    save_params(out / "checkpoint.msbt", result.params)
    print(f"trained {cfg.model} for {len(result.losses)} steps; checkpoint at {out / 'checkpoint.msbt'}")
    return EXIT_OK


def cmd_infer(args: argparse.Namespace) -> int:
    from .training import load_params, load_split, predict_detections

    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise FileNotFoundError(f"checkpoint not found: {ckpt}")
    cfg = load_config(args, fallback=ckpt.parent / "config.json")
    if args.out is None:
        cfg = cfg.replace(out_dir=str(ckpt.parent / f"infer_{args.split}"))
    manifest = _dataset(args, cfg)
    params = load_params(ckpt, cfg)
    images, _, ids = load_split(manifest, args.split)
    dets = predict_detections(cfg, params, images, ids)
    out = Path(cfg.out_dir)
    write_run_files(out, cfg, "infer")
    write_detections(out / "detections.csv", dets)
    (out / "images.txt").write_text("".join(f"{i}\n" for i in ids), encoding="utf-8")
    print(f"wrote {len(dets)} detections on {len(ids)} images to {out / 'detections.csv'}")
    return EXIT_OK


def _eval_image_ids(args, dets, anns) -> list[str]:
    if args.images is not None:
        return [ln.strip() for ln in Path(args.images).read_text(encoding="utf-8").splitlines() if ln.strip()]
    sibling = Path(args.detections).parent / "images.txt"
    if sibling.is_file():
        return [ln.strip() for ln in sibling.read_text(encoding="utf-8").splitlines() if ln.strip()]
    # only images that appear somewhere; images with neither lesions nor detections are invisible
    return sorted({a.image_id for a in anns} | {d.image_id for d in dets})


def cmd_eval(args: argparse.Namespace) -> int:
    cfg = load_config(args)
    dets = read_detections(args.detections)
    anns = read_ground_truth(args.ground_truth)
    ids = _eval_image_ids(args, dets, anns)
    report = evaluate(dets, anns, cfg.fp_rates, cfg.iou_thresh, image_ids=ids)
    text = report.to_text(args.model or cfg.model)
    print(text, end="")
    if args.out is not None:
        out = Path(args.out)
        write_run_files(out, cfg, "eval")
        (out / "report.txt").write_text(text, encoding="utf-8")
        (out / "report.json").write_text(json.dumps(report.to_json(), indent=2, sort_keys=True) + "\n",
                                         encoding="utf-8")
    return EXIT_OK


def cmd_ablation(args: argparse.Namespace) -> int:
    from .training import ablation_table, run_ablation

    cfg = load_config(args)
    manifest = _dataset(args, cfg)
    runs = run_ablation(cfg, manifest, models=args.models, seeds=args.seeds)
    summary = ablation_table(runs, cfg.fp_rates)
    text = summary["text"]
    print(text, end="")
    out = Path(cfg.out_dir)
    write_run_files(out, cfg, "ablation")
    (out / "ablation.txt").write_text(text, encoding="utf-8")
    (out / "ablation.json").write_text(json.dumps(summary["json"], indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", type=Path, help="JSON run configuration")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--model", choices=sorted(VARIANTS), help="ablation variant")
    common.add_argument("--out", type=Path, help="output directory")
    common.add_argument("--iou-thresh", type=float, help="detection-to-lesion IoU for a hit")
    common.add_argument("--fp-rates", type=_fp_rates, help="comma-separated FPs per image, e.g. 0.5,1,2,4,8")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")

    parser = argparse.ArgumentParser(
        prog="msbdet", description="Synthetic-phantom lesion detection: data, training, inference, verification, FROC."
    )
    parser.add_argument("--version", action="version", version=f"msbdet {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gradcheck", parents=[common], help="verify every backward pass by central differences")
    p.add_argument("--precision", choices=("float64", "float32"))
    p.add_argument("--only", nargs="+", choices=sorted(CHECKS), help="run a subset of checks")
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("synth", parents=[common], help="render the synthetic phantom dataset")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", parents=[common], help="train a detector and write a checkpoint")
    p.add_argument("--data", type=Path, help="dataset directory from `msbdet synth`")
    p.add_argument("--split", default="train")
    p.add_argument("--lr", type=float, help="override the learning rate")
    p.add_argument("--epochs", type=int, help="override the number of epochs")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("infer", parents=[common], help="run a checkpoint over a split and write detections.csv")
    p.add_argument("--checkpoint", required=True, type=Path)
    p.add_argument("--data", type=Path)
    p.add_argument("--split", default="test")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("eval", parents=[common], help="FROC and size-bucket report for a detections CSV")
    p.add_argument("--detections", required=True, type=Path)
    p.add_argument("--ground-truth", required=True, type=Path, help="JSONL annotations")
    p.add_argument("--images", type=Path, help="file listing every evaluated image id, one per line")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablation", parents=[common], help="train and evaluate several variants over several seeds")
    p.add_argument("--data", type=Path)
    p.add_argument("--models", type=lambda s: tuple(s.split(",")), default=("fpn", "fpn+msb"))
    p.add_argument("--seeds", type=_int_list, default=(0, 1, 2, 3, 4))
    p.set_defaults(func=cmd_ablation)
    return parser


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except CheckFailed as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except (OSError, CorruptionError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (ConfigError, ShapeError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID


if __name__ == "__main__":
    sys.exit(main())
