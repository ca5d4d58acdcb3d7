"""Command-line interface: ``trojanscan <subcommand> ...``.

Exit codes: 0 on success, 1 for usage errors, 2 for runtime failures.
The default output directory comes from ``$TROJANSCAN_OUT`` (else
``./trojanscan-out``).
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .detector import DetectorHyper, auc, cross_validate, mad_detect
from .features import build_bag, dump_bags, parse_bags
from .filters import recover_filters
from .formats import read_pnm, write_pgm, write_ppm
from .model import load_model
from .persistence import format_diagram, superlevel_diagram
from .scan import probe_seed, scan_zoo
from .triggers import RecoveryConfig, recover_all
from .zoo import ZooConfig, build_zoo, load_zoo, probe_images

log = logging.getLogger("trojanscan")

EXIT_OK, EXIT_USAGE, EXIT_RUNTIME = 0, 1, 2
OUT_ENV = "TROJANSCAN_OUT"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_out() -> str:
    return os.environ.get(OUT_ENV, "trojanscan-out")


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--seed", type=int, default=0, help="master seed (default 0)")
    p.add_argument("--out", default=None, help=f"output directory (default ${OUT_ENV} or ./trojanscan-out)")
    p.add_argument("--workers", type=int, default=os.cpu_count() or 1, help="worker processes (default: all cores)")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")


def _add_recovery(p: argparse.ArgumentParser) -> None:
    d = RecoveryConfig()
    g = p.add_argument_group("trigger recovery")
    g.add_argument("--lambda-div", type=float, default=d.lambda_div, help="diversity weight (default 1)")
    g.add_argument("--lambda-topo", type=float, default=d.lambda_topo, help="topological weight (default 10)")
    g.add_argument("--nt", type=int, default=d.n_rounds, help="rounds per image; 1 disables diversity (default 3)")
    g.add_argument("--no-topo", action="store_true", help="set the topological weight to 0")
    g.add_argument("--iterations", type=int, default=d.iterations, help="Adam iterations per round (default 100)")
    g.add_argument("--lr", type=float, default=d.lr, help="Adam learning rate (default 0.1)")
    g.add_argument("--filter", action="store_true", help="also recover colour-filter triggers")
    g.add_argument("--filter-rounds", type=int, default=d.filter_rounds, help="colour-filter rounds (default 8)")


def _add_zoo(p: argparse.ArgumentParser) -> None:
    d = ZooConfig()
    g = p.add_argument_group("model zoo")
    g.add_argument("--count", type=int, default=d.count, help="number of models (default 200)")
    g.add_argument("--trojan-fraction", type=float, default=d.trojan_fraction, help="fraction Trojaned (default 0.5)")
    g.add_argument("--poison-rate", type=float, default=d.poison_rate, help="poisoned training fraction (default 0.2)")
    g.add_argument("--num-classes", type=int, default=d.num_classes, help="classes K (default 5)")
    g.add_argument("--epochs", type=int, default=d.epochs, help="training epochs per model (default 6)")
    g.add_argument("--side-min", type=int, default=d.side_range[0], help="smallest trigger side (default 3)")
    g.add_argument("--side-max", type=int, default=d.side_range[1], help="largest trigger side (default 6)")
    g.add_argument("--idx-images", default=None, help="IDX image file to train on instead of glyphs")
    g.add_argument("--idx-labels", default=None, help="IDX label file matching --idx-images")


def _add_detect(p: argparse.ArgumentParser) -> None:
    d = DetectorHyper()
    g = p.add_argument_group("detector")
    g.add_argument("--folds", type=int, default=8, help="cross-validation folds (default 8)")
    g.add_argument("--fold-seed", type=int, default=0, help="seed of the fold assignment (default 0)")
    g.add_argument("--detector-lr", type=float, default=d.lr, help="detector learning rate (default 1e-2)")
    g.add_argument("--max-epochs", type=int, default=d.max_epochs, help="detector epoch cap (default 300)")
    g.add_argument("--mad", action="store_true", help="unsupervised MAD scoring instead of the trained detector")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="trojanscan", description="Trojan trigger reverse engineering and model scanning.")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("zoo", help="train a zoo of clean and Trojaned models")
    _add_common(p)
    _add_zoo(p)

    p = sub.add_parser("recover", help="recover trigger candidates from one model")
    p.add_argument("model", help="NNM1 model file")
    _add_common(p)
    _add_recovery(p)

    p = sub.add_parser("detect", help="scan a zoo and evaluate Trojan detection")
    p.add_argument("zoo_dir", help="directory written by the zoo subcommand")
    p.add_argument("--features", default=None, help="reuse a feature dump instead of scanning")
    _add_common(p)
    _add_recovery(p)
    _add_detect(p)

    p = sub.add_parser("dump-diagram", help="persistence diagram of a 2-D grid")
    p.add_argument("grid", help="PGM file, or text with one row of numbers per line")
    p.add_argument("--out", default=None, help="write the diagram here instead of stdout")
    p.add_argument("--plot", default=None, help="also render the diagram as a PPM scatter plot")
    p.add_argument("--size", type=int, default=256, help="plot side in pixels (default 256)")

    p = sub.add_parser("reproduce", help="zoo, recovery and detection with the default constants")
    _add_common(p)
    _add_zoo(p)
    _add_recovery(p)
    _add_detect(p)
    return parser


def recovery_config(args) -> RecoveryConfig:
    if args.nt < 1:
        raise UsageError("--nt must be at least 1")
    return RecoveryConfig(
        lambda_div=args.lambda_div,
        lambda_topo=0.0 if args.no_topo else args.lambda_topo,
        n_rounds=args.nt,
        iterations=args.iterations,
        lr=args.lr,
        seed=args.seed,
        filter_enabled=args.filter,
        filter_rounds=args.filter_rounds,
    )


def zoo_config(args) -> ZooConfig:
    if not 0.0 <= args.trojan_fraction <= 1.0:
        raise UsageError(f"--trojan-fraction {args.trojan_fraction} must lie in [0, 1]")
    if not 0.0 <= args.poison_rate <= 1.0:
        raise UsageError(f"--poison-rate {args.poison_rate} must lie in [0, 1]")
    if args.count < 1 or args.side_min < 0 or args.side_max < args.side_min:
        raise UsageError("--count must be positive and 0 <= --side-min <= --side-max")
    if (args.idx_images is None) != (args.idx_labels is None):
        raise UsageError("--idx-images and --idx-labels go together")
    return ZooConfig(
        count=args.count, trojan_fraction=args.trojan_fraction, num_classes=args.num_classes,
        poison_rate=args.poison_rate, side_range=(args.side_min, args.side_max), epochs=args.epochs,
        seed=args.seed, idx_images=args.idx_images, idx_labels=args.idx_labels,
    )


def _out_dir(args) -> Path:
    out = Path(args.out or _default_out())
    out.mkdir(parents=True, exist_ok=True)
    return out


def _dump_config(out: Path, args, **configs) -> None:
    record = {"args": {k: v for k, v in vars(args).items() if k != "func"}}
    record.update({k: asdict(v) for k, v in configs.items()})
    (out / "run_config.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")


# -- subcommands --------------------------------------------------------------

def cmd_zoo(args) -> int:
    cfg = zoo_config(args)
    out = _out_dir(args)
    manifest = build_zoo(cfg, out, workers=args.workers)
    n = int(manifest.labels.sum())
    print(f"wrote {len(manifest)} models ({n} Trojaned, {len(manifest) - n} clean) to {out}")
    return EXIT_OK


def _candidate_line(c) -> str:
    return "\t".join(map(str, (
        c.class_index, c.round_index, c.source_label, c.flipped_label, int(c.flipped),
        repr(c.flip), repr(c.div), repr(c.topo), repr(c.reg), repr(c.total),
        "-" if c.first_flip is None else c.first_flip,
    )))


CANDIDATE_HEADER = "class\tround\tsource\tflipped_label\tflipped\tL_flip\tL_div\tL_topo\tR\ttotal\tfirst_flip"


def cmd_recover(args) -> int:
    config = recovery_config(args)
    model = load_model(args.model)
    out = _out_dir(args)
    K = model.num_classes
    images = probe_images(model, K, probe_seed(args.seed, 0))
    cands = recover_all(model, images, config)
    filters = []
    if config.filter_enabled:
        for i, x in enumerate(images):
            filters += recover_filters(model, x, config, image_index=i)
    lines = [CANDIDATE_HEADER]
    for c in cands:
        stem = out / f"cand_c{c.class_index}_r{c.round_index}"
        note = [f"class {c.class_index} round {c.round_index} flipped_label {c.flipped_label}"]
        write_pgm(f"{stem}_mask.pgm", c.mask, comments=note)
        write_ppm(f"{stem}_pattern.ppm", np.moveaxis(c.masked_pattern, 0, -1), comments=note)
        lines.append(_candidate_line(c))
    (out / "candidates.tsv").write_text("\n".join(lines) + "\n")
    bag = build_bag(Path(args.model).stem, cands, filters, K, config.n_rounds, config.filter_rounds)
    (out / "features.tsv").write_text(dump_bags([bag]))
    _dump_config(out, args, recovery=config)
    flipped = sum(c.flipped for c in cands)
    print(f"{len(cands)} candidates ({flipped} flipped) written to {out}")
    return EXIT_OK


def _detect(args, zoo_dir: Path, out: Path, config: RecoveryConfig) -> str:
    """Scan (or reuse features), evaluate, write reports; returns the summary text."""
    if not (zoo_dir / "manifest.tsv").is_file():
        raise FileNotFoundError(f"{zoo_dir} is not a zoo directory (no manifest.tsv)")
    _, manifest = load_zoo(zoo_dir)
    labels = manifest.labels
    if args.features:
        bags = parse_bags(Path(args.features).read_text())
        by_id = {b.model_id: b for b in bags}
        bags = [by_id[Path(e.path).stem] for e in manifest.entries]
        sizes = None
    else:
        scans, _ = scan_zoo(zoo_dir, config, workers=args.workers)
        bags = [s.bag for s in scans]
        sizes = np.array([s.trigger_sizes for s in scans])
        (out / "features.tsv").write_text(dump_bags(bags))
        (out / "trigger_sizes.tsv").write_text(
            "".join(f"{s.model_id}\t" + "\t".join(map(repr, s.trigger_sizes.tolist())) + "\n" for s in scans)
        )
    if args.mad:
        if sizes is None:
            raise UsageError("--mad needs a fresh scan (it uses recovered mask sizes, not the feature dump)")
        scores = mad_detect(sizes)
        text = "model\tlabel\tmad_score\n" + "".join(
            f"{b.model_id}\t{y}\t{s!r}\n" for b, y, s in zip(bags, labels, scores)
        )
        text += f"auc\n{auc(scores, labels)!r}\n"
        (out / "mad_report.tsv").write_text(text)
        return text
    hyper = DetectorHyper(lr=args.detector_lr, max_epochs=args.max_epochs, use_filter=config.filter_enabled)
    # folds follow --fold-seed so seeds can be compared on the same split
    report = cross_validate(bags, labels, folds=args.folds, seed=args.fold_seed, hyper=hyper,
                            workers=args.workers, init_seed=args.seed)
    text = report.to_tsv()
    (out / "report.tsv").write_text(text)
    return text


def cmd_detect(args) -> int:
    config = recovery_config(args)
    out = _out_dir(args)
    text = _detect(args, Path(args.zoo_dir), out, config)
    _dump_config(out, args, recovery=config)
    sys.stdout.write(text)
    return EXIT_OK


def _read_grid(path: str) -> np.ndarray:
    raw = Path(path).read_bytes()
    if raw[:2] in (b"P5", b"P6"):
        values, _, _ = read_pnm(path)
        if values.ndim != 2:
            raise UsageError("diagram input must be a single-channel (P5) image")
        return values
    rows = [line.split() for line in raw.decode().splitlines() if line.strip() and not line.startswith("#")]
    if not rows or len({len(r) for r in rows}) != 1:
        raise UsageError(f"{path}: text grids need equal-length rows of numbers")
    return np.array(rows, dtype=np.float64)


def render_diagram(diagram, size: int = 256) -> tuple[np.ndarray, list[str]]:
    """RGB raster of the diagram: death on x, birth on y (up), diagonal in grey."""
    births = np.array([d.birth for d in diagram.dots])
    deaths = np.array([d.death for d in diagram.dots])
    lo, hi = float(min(births.min(), deaths.min())), float(max(births.max(), deaths.max()))
    span = hi - lo if hi > lo else 1.0
    img = np.ones((size, size, 3))
    margin = 4
    scale = size - 1 - 2 * margin

    def to_px(v):
        return margin + np.rint((np.asarray(v) - lo) / span * scale).astype(int)

    diag = np.arange(margin, size - margin)
    img[size - 1 - diag, diag] = 0.6
    for k, (b, d) in enumerate(zip(births, deaths)):
        x, y = int(to_px(d)), size - 1 - int(to_px(b))
        color = (0.0, 0.0, 1.0) if k == diagram.star_index else (0.85, 0.0, 0.0)
        img[max(y - 1, 0) : y + 2, max(x - 1, 0) : x + 2] = color
    notes = [
        "persistence diagram: x = death, y = birth (upwards)",
        f"both axes span [{lo!r}, {hi!r}] over pixels {margin}..{size - 1 - margin}",
        "grey = diagonal, blue = most persistent dot, red = other dots",
    ]
    return img, notes


def cmd_dump_diagram(args) -> int:
    grid = _read_grid(args.grid)
    diagram = superlevel_diagram(grid)
    text = "# birth\tdeath\tbirth_pixel\tdeath_pixel (-1 = essential)\n" + format_diagram(diagram)
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    if args.plot:
        if args.size < 16:
            raise UsageError("--size must be at least 16")
        img, notes = render_diagram(diagram, args.size)
        write_ppm(args.plot, img, maxval=255, comments=notes)
    return EXIT_OK


def cmd_reproduce(args) -> int:
    zcfg = zoo_config(args)
    rcfg = recovery_config(args)
    out = _out_dir(args)
    zoo_dir = out / "zoo"
    if (zoo_dir / "manifest.tsv").is_file() and (zoo_dir / "zoo.json").is_file() and \
            ZooConfig.from_json((zoo_dir / "zoo.json").read_text()) == zcfg:
        log.info("reusing zoo in %s", zoo_dir)
    else:
        build_zoo(zcfg, zoo_dir, workers=args.workers)
    args.features = None
    text = _detect(args, zoo_dir, out, rcfg)
    _dump_config(out, args, zoo=zcfg, recovery=rcfg)
    sys.stdout.write(text)
    return EXIT_OK


COMMANDS = {
    "zoo": cmd_zoo,
    "recover": cmd_recover,
    "detect": cmd_detect,
    "dump-diagram": cmd_dump_diagram,
    "reproduce": cmd_reproduce,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if getattr(args, "verbose", False) else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"trojanscan {args.command}: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (OSError, ValueError) as exc:
        print(f"trojanscan {args.command}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
