from __future__ import annotations

import argparse
import hashlib
import logging
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path

from dotenv import load_dotenv

from rsnet import report
from rsnet.arch import ABLATION_CONFIGS, ArchConfig, load_config
from rsnet.checkpoint import load_checkpoint
from rsnet.checks import check_names, run_checks
from rsnet.config import Settings
from rsnet.data import Dataset, SyntheticSceneSpec, generate_dataset
from rsnet.detect import predict
from rsnet.errors import ConfigError, DataError, NumericError, RsnetError, ShapeError
from rsnet.heatmap import as_batch, export_heatmap, feature_heatmap, peak_in_box
from rsnet.metrics import evaluate
from rsnet.model import DEFAULT_HEATMAP_LAYER, build_model, count_flops
from rsnet.pgm import annotate, read_pgm, write_pgm
from rsnet.textconf import dump
from rsnet.train import TrainOptions, train
from rsnet.tuning import TARGET_PARAMS, tune_widths

logger = logging.getLogger("rsnet")

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4
MANIFEST_NAME = "run.manifest"


def source_digest() -> str:
    """SHA-256 over the package's sources and shipped configs."""
    digest = hashlib.sha256()
    package = resources.files("rsnet")
    entries = sorted(
        [e for e in package.iterdir() if e.name.endswith(".py")]
        + [e for e in package.joinpath("configs").iterdir() if e.name.endswith(".cfg")],
        key=lambda e: e.name,
    )
    for entry in entries:
        digest.update(entry.name.encode("utf-8"))
        digest.update(entry.read_bytes())
    return digest.hexdigest()


@dataclass
class RunManifest:
    command: str
    config: str
    seed: int
    started: float = field(default_factory=time.time)
    outputs: list[str] = field(default_factory=list)

    def write(self, directory: Path) -> Path:
        path = directory / MANIFEST_NAME
        pairs = [
            ("command", self.command),
            ("config", self.config),
            ("seed", self.seed),
            ("source_digest", source_digest()),
            ("started", time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(self.started))),
            ("wall_seconds", round(time.time() - self.started, 3)),
            ("outputs", ", ".join(self.outputs)),
        ]
        try:
            path.write_text(dump(pairs), encoding="utf-8")
        except OSError as err:
            raise DataError(f"cannot write run manifest {path}: {err.strerror or err}") from err
        return path


def _config(args, settings: Settings) -> ArchConfig:
    return load_config(args.config or settings.default_config)


def _seed(args, settings: Settings) -> int:
    return settings.seed if args.seed is None else args.seed


def _model_from(args, settings: Settings):
    """Checkpoint weights when ``--ckpt`` is given (checked against ``--config`` if both are), else a fresh build."""
    if getattr(args, "ckpt", None):
        expected = load_config(args.config) if args.config else None
        return load_checkpoint(args.ckpt, expected).model
    return build_model(_config(args, settings), _seed(args, settings))


def cmd_summarize(args, settings: Settings) -> int:
    cfg = _config(args, settings)
    size = (args.input_size, args.input_size) if args.input_size else cfg.input_size
    counts = count_flops(build_model(cfg), size)
    print(report.count_table(counts))
    if args.ablation:
        rows = [count_flops(build_model(load_config(name)), size) for name in ABLATION_CONFIGS]
        no_star = cfg.replace(name=f"{cfg.name}-nostar", neck_star=False)
        rows.append(count_flops(build_model(no_star), size))
        print()
        print(report.ablation_table(rows))
    manifest = RunManifest("summarize", cfg.name, settings.seed)
    directory = Path.cwd()
    if args.csv:
        path = report.write_count_csv(counts, args.csv)
        manifest.outputs.append(path.name)
        directory = path.parent
        logger.info("wrote %s", path)
    manifest.write(directory)
    return EXIT_OK


def cmd_gendata(args, settings: Settings) -> int:
    spec = SyntheticSceneSpec.read(args.spec) if args.spec else SyntheticSceneSpec()
    if args.seed is not None or not args.spec:
        spec = spec.with_seed(_seed(args, settings))
    out = generate_dataset(spec, args.n, args.out, force=args.force)
    RunManifest("gendata", args.spec or "<default scene>", spec.seed, outputs=["images", "labels", "manifest.txt"]).write(out)
    return EXIT_OK


def cmd_train(args, settings: Settings) -> int:
    seed = _seed(args, settings)
    dataset = Dataset.open(args.data)
    optimizer = None
    if args.resume:
        expected = load_config(args.config) if args.config else None
        restored = load_checkpoint(args.resume, expected)
        model, optimizer = restored.model, restored.optimizer
        logger.info("resuming %s from step %d", restored.config.name, optimizer.step if optimizer else 0)
    else:
        model = build_model(_config(args, settings), seed)
    if tuple(dataset.image_size) != tuple(model.cfg.input_size):
        logger.warning("dataset images are %s, config %s expects %s",
                       dataset.image_size, model.cfg.name, model.cfg.input_size)
    options = TrainOptions(
        epochs=args.epochs,
        batch_size=args.batch_size or settings.batch_size,
        lr=args.lr or settings.lr,
        warmup_steps=args.warmup_steps,
        seed=seed,
    )
    logger.info("training %s on %d images for %d epochs", model.cfg.name, len(dataset), options.epochs)
    result = train(model, dataset, options, optimizer=optimizer, out_dir=args.out)
    RunManifest("train", model.cfg.name, seed, outputs=["model.ckpt", "loss.csv"]).write(Path(args.out))
    if result.history:
        print(f"steps {result.optimizer.step}  loss {result.first_loss:.5f} -> {result.last_loss:.5f}")
    return EXIT_OK


def cmd_eval(args, settings: Settings) -> int:
    model = _model_from(args, settings)
    dataset = Dataset.open(args.data)
    detections, truth = [], []
    hits = 0
    for index, sample in enumerate(dataset.samples):
        pixels, boxes = dataset.load(index)
        batch = as_batch(pixels, model.cfg.in_channels, model.dtype)
        detections.append((sample.image_id, predict(model, batch, args.conf, args.nms_iou)[0]))
        truth.append((sample.image_id, boxes))
        if args.heatmap_layer:
            hits += peak_in_box(feature_heatmap(model, pixels, args.heatmap_layer), boxes)
    result = evaluate(detections, truth, workers=args.workers or settings.workers)
    print(report.ap_table(result))
    if args.heatmap_layer:
        print(f"heat-map peak inside a ship box ({args.heatmap_layer}): {hits}/{len(dataset)}")
    manifest = RunManifest("eval", model.cfg.name, _seed(args, settings))
    directory = Path.cwd()
    if args.csv:
        path = report.write_ap_csv(result, args.csv)
        manifest.outputs.append(path.name)
        directory = path.parent
    manifest.write(directory)
    return EXIT_OK


def cmd_detect(args, settings: Settings) -> int:
    model = load_checkpoint(args.ckpt).model
    pixels = read_pgm(args.image)
    out = Path(args.out)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as err:
        raise DataError(f"cannot create output directory {out}: {err.strerror or err}") from err
    stem = Path(args.image).stem
    dets = predict(model, as_batch(pixels, model.cfg.in_channels, model.dtype), args.conf, args.nms_iou)[0]
    lines = [f"{d.class_id} {d.confidence:.4f} {d.cx:.6f} {d.cy:.6f} {d.w:.6f} {d.h:.6f}" for d in dets]
    text_path = out / f"{stem}.txt"
    try:
        text_path.write_text("".join(line + "\n" for line in lines), encoding="utf-8")
    except OSError as err:
        raise DataError(f"cannot write {text_path}: {err.strerror or err}") from err
    write_pgm(out / f"{stem}.det.pgm", annotate(pixels, dets))
    outputs = [text_path.name, f"{stem}.det.pgm"]
    if args.heatmap:
        export_heatmap(model, pixels, args.heatmap, out / f"{stem}.heat.pgm")
        outputs.append(f"{stem}.heat.pgm")
    for line in lines:
        print(line)
    RunManifest("detect", model.cfg.name, settings.seed, outputs=outputs).write(out)
    return EXIT_OK


def cmd_check(args, settings: Settings) -> int:
    manifest = RunManifest("check", ",".join(args.only or ["all"]), settings.seed)
    results = run_checks(args.only)
    print(report.check_table(results))
    manifest.write(Path.cwd())
    failed = [r.name for r in results if not r.ok]
    if failed:
        logger.error("%d of %d checks failed: %s", len(failed), len(results), ", ".join(failed))
        return EXIT_NUMERIC
    return EXIT_OK


def cmd_tune(args, settings: Settings) -> int:
    cfg = load_config(args.config or "rsnet-ref")
    result = tune_widths(cfg, args.target)
    print(report.tuning_table(result))
    best = result.apply(cfg)
    RunManifest("tune", cfg.name, settings.seed).write(Path.cwd())
    print(f"\nbest: stages = {', '.join(map(str, best.stages))}; neck_widths = "
          f"{', '.join(map(str, best.neck_widths))}; head_hidden = {best.head_hidden}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="rsnet", description="Lightweight SAR ship detector")
    parser.add_argument("--log-level", choices=["DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"],
                        help="overrides RSNET_LOG_LEVEL")
    commands = parser.add_subparsers(dest="command", required=True)

    p = commands.add_parser("summarize", help="per-layer parameter and FLOP counts")
    p.add_argument("--config")
    p.add_argument("--input-size", type=int)
    p.add_argument("--csv")
    p.add_argument("--ablation", action="store_true", help="also compare the ablation configs")
    p.set_defaults(handler=cmd_summarize)

    p = commands.add_parser("gendata", help="write a synthetic SAR dataset")
    p.add_argument("--spec", help="scene description file")
    p.add_argument("--n", type=int, default=8)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--force", action="store_true")
    p.set_defaults(handler=cmd_gendata)

    p = commands.add_parser("train", help="train on a dataset directory")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--epochs", type=int, default=1)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--warmup-steps", type=int, default=0)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(handler=cmd_train)

    p = commands.add_parser("eval", help="mAP of a model on a dataset directory")
    p.add_argument("--config")
    p.add_argument("--ckpt")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int)
    p.add_argument("--conf", type=float, default=0.001)
    p.add_argument("--nms-iou", type=float, default=0.7)
    p.add_argument("--workers", type=int)
    p.add_argument("--heatmap-layer", nargs="?", const=DEFAULT_HEATMAP_LAYER)
    p.add_argument("--csv")
    p.set_defaults(handler=cmd_eval)

    p = commands.add_parser("detect", help="detect ships in one PGM image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--conf", type=float, default=0.25)
    p.add_argument("--nms-iou", type=float, default=0.7)
    p.add_argument("--heatmap", nargs="?", const=DEFAULT_HEATMAP_LAYER, metavar="LAYER")
    p.set_defaults(handler=cmd_detect)

    p = commands.add_parser("check", help="run the invariant suite")
    p.add_argument("--only", action="append", choices=check_names())
    p.set_defaults(handler=cmd_check)

    p = commands.add_parser("tune", help="search widths towards a parameter budget")
    p.add_argument("--config")
    p.add_argument("--target", type=int, default=TARGET_PARAMS)
    p.set_defaults(handler=cmd_tune)
    return parser


def main(argv: list[str] | None = None) -> int:
    load_dotenv()
    args = build_parser().parse_args(argv)
    try:
        settings = Settings.from_env()
    except ValueError as err:
        logging.basicConfig(level=logging.INFO, format="%(asctime)s %(levelname)s %(name)s - %(message)s")
        logger.error("%s", err)
        return EXIT_USAGE
    logging.basicConfig(
        level=getattr(logging, args.log_level or settings.log_level),
        format="%(asctime)s %(levelname)s %(name)s - %(message)s",
    )
    logger.debug("rsnet %s", args.command)
    try:
        return args.handler(args, settings)
    except (ConfigError, ShapeError) as err:
        logger.error("%s", err)
        return EXIT_USAGE
    except NumericError as err:
        logger.error("numeric failure: %s", err)
        return EXIT_NUMERIC
    except RsnetError as err:
        logger.error("%s", err)
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
