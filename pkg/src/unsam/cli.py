"""``unsam`` command line: gen, train, eval, predict.

Exit codes: 0 success, 1 usage or bad input, 2 runtime failure.
A multi-domain data directory holds ``domains.txt`` (one domain name per
line, in id order) and one dataset directory per domain name.
"""

from __future__ import annotations

import argparse
import logging
import sys
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import yaml
from PIL import Image, UnidentifiedImageError

from . import __version__
from .core import ZERO_SHOT_STRATEGIES, DomainRegistry, load_config
from .data import DomainSpec, load_dataset, make_registry, save_dataset
from .errors import ConfigError, GenerationError, UnsamError, ValidationError
from .metrics import METRIC_COLUMNS
from .pipeline import evaluate, load_checkpoint, predict, train_all

log = logging.getLogger("unsam")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
DOMAINS_FILE = "domains.txt"


class UsageError(Exception):
    pass


@dataclass
class CommandResult:
    code: int = EXIT_OK
    artifacts: list[Path] = field(default_factory=list)


class _Parser(argparse.ArgumentParser):
    # argparse exits with 2 on bad flags; the contract here says 1
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --- gen ---------------------------------------------------------------------------------

def read_specs(path) -> list[DomainSpec]:
    path = Path(path)
    if not path.exists():
        raise UsageError(f"spec file {path} does not exist")
    try:
        data = yaml.safe_load(path.read_text())
    except yaml.YAMLError as exc:
        raise UsageError(f"cannot parse {path}: {exc}") from exc
    if isinstance(data, dict):
        data = data.get("domains")
    if not isinstance(data, list) or not data:
        raise UsageError(f"{path}: expected a non-empty list of domain specs")
    try:
        return [DomainSpec.from_dict(d) for d in data]
    except (ValidationError, TypeError, ValueError) as exc:
        raise UsageError(f"{path}: {exc}") from exc


def cmd_gen(args) -> CommandResult:
    specs = read_specs(args.specs)
    try:
        registry, datasets = make_registry(specs, n_images=args.images, size=args.size,
                                           seed=args.seed, test_fraction=args.test_fraction)
    except (ValidationError, GenerationError) as exc:
        # nuclei that cannot be placed are a property of the spec, not of the run
        raise UsageError(str(exc)) from exc
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    result = CommandResult()
    for name, ds in zip(registry.names, datasets):
        result.artifacts.append(save_dataset(ds, out / name))
    (out / DOMAINS_FILE).write_text("\n".join(registry.names) + "\n")
    result.artifacts.append(out / DOMAINS_FILE)
    log.info("wrote %d domains to %s", registry.K, out)
    return result


# --- train -------------------------------------------------------------------------------

def read_domains(data_dir) -> tuple[DomainRegistry, list]:
    data_dir = Path(data_dir)
    listing = data_dir / DOMAINS_FILE
    if not listing.exists():
        raise UsageError(f"{data_dir} has no {DOMAINS_FILE}; create it with `unsam gen`")
    names = [n.strip() for n in listing.read_text().splitlines() if n.strip()]
    try:
        registry = DomainRegistry(tuple(names))
    except ValidationError as exc:
        raise UsageError(f"{listing}: {exc}") from exc
    datasets = [load_dataset(data_dir / n) for n in names]
    for k, ds in enumerate(datasets):
        if any(s.domain_id != k for s in ds):
            raise UsageError(f"{data_dir / registry.names[k]}: domain ids disagree with {listing}")
    return registry, datasets


def cmd_train(args) -> CommandResult:
    try:
        cfg = load_config(args.config)
    except (ConfigError, ValidationError) as exc:
        raise UsageError(str(exc)) from exc
    if args.epochs is not None:
        cfg = cfg.replace(epochs=args.epochs)
    if args.seed is not None:
        cfg = cfg.replace(seed=args.seed)
    registry, datasets = read_domains(args.data)
    ckpt = Path(args.out)
    loss_csv = Path(args.log) if args.log else ckpt.with_suffix(".losses.csv")
    ckpt.parent.mkdir(parents=True, exist_ok=True)
    loss_csv.parent.mkdir(parents=True, exist_ok=True)
    train_all(registry, datasets, cfg, checkpoint_path=ckpt, log_path=loss_csv)
    return CommandResult(artifacts=[ckpt, loss_csv])


# --- eval --------------------------------------------------------------------------------

def plot_report(report, out_dir: Path) -> list[Path]:
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    means = report.mean
    cols = [c for c in METRIC_COLUMNS if c != "hd"]
    fig, ax = plt.subplots(figsize=(6, 3.5))
    ax.bar(cols, [means[c] for c in cols], color="tab:blue")
    ax.set_ylim(0, 1)
    ax.set_ylabel("mean")
    ax.set_title(f"n={len(report)}  HD={means['hd']:.2f}")
    fig.tight_layout()
    bar = out_dir / "metrics_bar.png"
    fig.savefig(bar, metadata={"Software": None})
    plt.close(fig)

    fig, ax = plt.subplots(figsize=(6, 3.5))
    for c in ("dice", "aji", "pq"):
        values = sorted(row[c] for row in report.rows)
        ax.plot(np.arange(1, len(values) + 1), values, marker="o", label=c)
    ax.set_ylim(0, 1.02)
    ax.set_xlabel("image (sorted)")
    ax.legend()
    fig.tight_layout()
    curve = out_dir / "metrics_curve.png"
    fig.savefig(curve, metadata={"Software": None})
    plt.close(fig)
    return [bar, curve]


def cmd_eval(args) -> CommandResult:
    if args.ckpt is None and not args.gt_as_prediction:
        raise UsageError("--ckpt is required unless --gt-as-prediction is given")
    if args.domain is None and args.zero_shot is None and not args.gt_as_prediction:
        raise UsageError("give --domain ID or --zero-shot STRATEGY")
    dataset = load_dataset(args.data)
    if args.split != "all":
        dataset = dataset.subset(args.split)
    if not len(dataset):
        raise UsageError(f"{args.data}: no samples in split {args.split!r}")
    model = None
    strategy = args.zero_shot or "specified"
    if args.ckpt is not None:
        model = load_checkpoint(args.ckpt).model
        if args.domain is not None and args.domain not in model.trained_domains:
            raise UsageError(f"domain {args.domain} was not trained; trained: {model.trained_domains}")
    report = evaluate(model, dataset, args.domain, strategy, gt_as_prediction=args.gt_as_prediction)
    out = Path(args.report)
    out.mkdir(parents=True, exist_ok=True)
    extra = {"data": str(args.data), "split": args.split, "domain": args.domain,
             "strategy": strategy, "gt_as_prediction": args.gt_as_prediction}
    artifacts = [report.to_csv(out / "metrics.csv"), report.to_json(out / "metrics.json", **extra)]
    artifacts += plot_report(report, out)
    means = report.mean
    print("  ".join(f"{c}={means[c]:.4f}" for c in METRIC_COLUMNS))
    return CommandResult(artifacts=[Path(a) for a in artifacts])


# --- predict -----------------------------------------------------------------------------

def read_image(path, channels: int) -> np.ndarray:
    path = Path(path)
    try:
        with Image.open(path) as im:
            im = im.convert("RGB" if channels == 3 else "L")
            arr = np.asarray(im)
    except (FileNotFoundError, UnidentifiedImageError, OSError) as exc:
        raise UsageError(f"cannot read image {path}: {exc}") from exc
    arr = arr[..., None] if arr.ndim == 2 else arr
    return np.moveaxis(arr, -1, 0).astype(np.float32) / 255.0


def overlay(image: np.ndarray, instances: np.ndarray) -> np.ndarray:
    """Blend a fixed colour per instance over the image; H x W x 3 uint8."""
    rgb = np.moveaxis(image, 0, -1)
    rgb = np.repeat(rgb, 3, axis=-1) if rgb.shape[-1] == 1 else rgb
    palette = np.random.default_rng(0).uniform(0.2, 1.0, size=(int(instances.max()) + 1, 3))
    colour = palette[instances]
    mask = (instances > 0)[..., None]
    out = np.where(mask, 0.5 * rgb + 0.5 * colour, rgb)
    return np.round(np.clip(out, 0, 1) * 255).astype(np.uint8)


def cmd_predict(args) -> CommandResult:
    model = load_checkpoint(args.ckpt).model
    image = read_image(args.image, model.cfg.in_channels)
    side = model.cfg.image_size
    if image.shape[1:] != (side, side):
        raise UsageError(f"{args.image}: expected {side}x{side} pixels, got {image.shape[2]}x{image.shape[1]}")
    if args.zero_shot is None and args.domain not in model.trained_domains:
        raise UsageError(f"domain {args.domain} was not trained; trained: {model.trained_domains}")
    pred = predict(model, image, args.domain, args.zero_shot or "specified")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    paths = [out / f"{stem}_semantic.png", out / f"{stem}_instances.png", out / f"{stem}_overlay.png"]
    Image.fromarray(pred.semantic.astype(np.uint8) * 255).save(paths[0])
    Image.fromarray(pred.instances.astype(np.uint16)).save(paths[1])
    Image.fromarray(overlay(image, pred.instances)).save(paths[2])
    print(f"{int(pred.instances.max())} instances, {pred.retained} prompt tokens kept")
    return CommandResult(artifacts=paths)


# --- entry point -------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="unsam", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("gen", help="generate synthetic multi-domain datasets")
    p.add_argument("--specs", required=True, help="YAML list of domain specs")
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--images", type=int, default=8, help="images per domain")
    p.add_argument("--size", type=int, default=128)
    p.add_argument("--test-fraction", type=float, default=0.25)
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train every domain in order")
    p.add_argument("--config", help="YAML run config (default: $UNSAM_CONFIG or built-in defaults)")
    p.add_argument("--data", required=True, help="directory written by `unsam gen`")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--log", help="loss CSV path (default: <out>.losses.csv)")
    p.add_argument("--epochs", type=int, help="override epochs per domain")
    p.add_argument("--seed", type=int, help="override the config seed")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on one dataset directory")
    p.add_argument("--ckpt")
    p.add_argument("--data", required=True, help="single-domain dataset directory")
    which = p.add_mutually_exclusive_group()
    which.add_argument("--domain", type=int)
    which.add_argument("--zero-shot", choices=ZERO_SHOT_STRATEGIES)
    p.add_argument("--split", choices=("train", "test", "all"), default="all")
    p.add_argument("--report", required=True, help="output directory")
    p.add_argument("--gt-as-prediction", action="store_true",
                   help="score the ground truth against itself (debug)")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="segment one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)
    which = p.add_mutually_exclusive_group(required=True)
    which.add_argument("--domain", type=int)
    which.add_argument("--zero-shot", choices=ZERO_SHOT_STRATEGIES)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:      # usage errors, --help, --version
        return exc.code if isinstance(exc.code, int) else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        args.func(args)
    except UsageError as exc:
        print(f"unsam {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (UnsamError, OSError) as exc:
        print(f"unsam {args.command}: {type(exc).__name__}: {exc}", file=sys.stderr)
        diagnostics = getattr(exc, "diagnostics", None)
        if diagnostics:
            for key, value in diagnostics.items():
                print(f"  {key}: {value}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
