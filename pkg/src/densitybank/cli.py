"""Command-line entry point: ``densitybank {synth,train,predict,eval,bank,rerun}``.

Every command that writes files also writes ``run_manifest.json`` next to
its outputs. The manifest holds the argument vector, the resolved
configuration, input and output paths, SHA-256 checksums of every artifact,
and the wall-clock duration. ``rerun`` replays a manifest and checks that
the artifacts come out bit-identical.

Exit codes: 0 success, 1 usage error, 2 data or integrity error, 3 numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import sys
import time
from dataclasses import asdict
from pathlib import Path

import numpy as np
from threadpoolctl import threadpool_limits

from . import __version__
from .bank import load_bank, make_prior, save_bank
from .errors import BoundsError, FormatError, IntegrityError, NumericError, ParameterError
from .grid import integrate, load_grid, save_c2dg, save_pgm
from .metrics import evaluate
from .model import load_checkpoint, save_checkpoint
from .synthdata import GenerationError, SceneConfig, gen_dataset, read_dataset, write_dataset
from .train import BANK_INITS, OPTIMIZERS, SAMPLERS, Normalizer, TrainConfig, fit, predict

log = logging.getLogger("densitybank")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
MANIFEST_NAME = "run_manifest.json"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on bad flags; usage errors here are status 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# --------------------------------------------------------------------------
# argument types


def count_range(text: str) -> tuple[int, int]:
    try:
        lo, hi = (int(x) for x in text.split(":"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"--counts expects lo:hi, got {text!r}") from None
    if lo < 0 or lo > hi:
        raise argparse.ArgumentTypeError(f"--counts range {text!r} must satisfy 0 <= lo <= hi")
    return lo, hi


def split_fractions(text: str) -> tuple[float, float, float]:
    try:
        parts = tuple(float(x) for x in text.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"--split expects three comma-separated fractions, got {text!r}") from None
    if len(parts) != 3 or min(parts) < 0 or abs(sum(parts) - 1.0) > 1e-9:
        raise argparse.ArgumentTypeError(f"--split fractions must be three nonnegative numbers summing to 1, got {text!r}")
    return parts


def positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError(f"expected a positive integer, got {text}")
    return value


def index_list(text: str) -> list[int]:
    try:
        return [int(x) for x in text.split(",") if x]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated indices, got {text!r}") from None


# --------------------------------------------------------------------------
# manifests


def sha256_file(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def checksum_tree(root: Path, skip=(MANIFEST_NAME,)) -> dict[str, str]:
    """``{relative path: sha256}`` of every file under ``root``, sorted."""
    out = {}
    for p in sorted(root.rglob("*")):
        if p.is_file() and p.name not in skip and not p.name.endswith(".tmp"):
            out[p.relative_to(root).as_posix()] = sha256_file(p)
    return out


def write_manifest(out_dir: Path, command: str, argv: list[str], config: dict, inputs: dict, started: float) -> Path:
    manifest = {
        "command": command,
        "argv": argv,
        "version": __version__,
        "config": config,
        "seed": config.get("seed"),
        "inputs": inputs,
        "output": str(out_dir),
        "checksums": checksum_tree(out_dir),
        "duration_s": round(time.time() - started, 3),
    }
    tmp = out_dir / (MANIFEST_NAME + ".tmp")
    tmp.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    tmp.replace(out_dir / MANIFEST_NAME)
    return out_dir / MANIFEST_NAME


def _prepare_out(path) -> Path:
    out = Path(path)
    out.mkdir(parents=True, exist_ok=True)
    return out


# --------------------------------------------------------------------------
# commands


def cmd_synth(args, argv) -> int:
    started = time.time()
    cfg = SceneConfig(size=args.size, count_range=args.counts, cluster_count=args.clusters, cluster_spread=args.spread)
    data = gen_dataset(args.seed, args.n, cfg, args.split)
    out = _prepare_out(args.out)
    write_dataset(out, data, pgm=not args.no_pgm)
    config = {"seed": args.seed, "n": args.n, "split": list(args.split), "scene": asdict(cfg)}
    write_manifest(out, "synth", argv, config, {}, started)
    print(f"wrote {args.n} scenes to {out} (train {len(data.train)}, val {len(data.val)}, test {len(data.test)})")
    return EXIT_OK


def train_config_from_args(args) -> TrainConfig:
    return TrainConfig(
        epochs=args.epochs,
        learning_rate=args.lr,
        optimizer=args.optimizer,
        weight_decay=args.weight_decay,
        alpha=args.alpha,
        tau=args.tau,
        seed=args.seed,
        labeled_fraction=args.labeled_fraction,
        bank_init=args.bank_init,
        sampler=args.sampler,
        use_bank=not args.no_bank,
        use_contrastive=not args.no_contrastive,
        include_positive=args.include_positive,
        snapshot_every=args.snapshot_every,
    )


def cmd_train(args, argv) -> int:
    started = time.time()
    data_dir = Path(args.data)
    if not data_dir.is_dir():
        raise IntegrityError(f"dataset directory {data_dir} does not exist")
    data = read_dataset(data_dir)
    cfg = train_config_from_args(args)
    if cfg.bank_init == "external":
        if not args.external_saliency:
            raise UsageError("--bank-init external needs --external-saliency DIR")
        ext = Path(args.external_saliency)
        cfg.external_saliency = [str(ext / f"{s.name}.pgm") if (ext / f"{s.name}.pgm").exists() else str(ext / f"{s.name}.c2dg") for s in data.train]
    out = _prepare_out(args.out)
    log_path = out / "train_log.jsonl"
    log_path.unlink(missing_ok=True)
    snapshots = out / "snapshots" if cfg.snapshot_every else None
    try:
        state = fit(data.train, cfg, val=data.val or None, log_path=log_path, snapshot_dir=snapshots)
    except NumericError as exc:
        raise NumericError(f"training aborted: {exc}") from exc

    extra = {
        "norm.mean": np.array([state.normalizer.mean]),
        "norm.std": np.array([state.normalizer.std]),
        "density_scale": np.array([state.density_scale]),
    }
    save_checkpoint(out / "model.c2dp", state.params, extra)
    save_bank(state.bank, out / "bank")
    config = asdict(cfg)
    write_manifest(out, "train", argv, config, {"data": str(data_dir)}, started)
    last = state.records[-1] if state.records else None
    if last is not None:
        print(f"trained {cfg.epochs} epochs; last: {last.to_json()}")
    print(f"checkpoint {out / 'model.c2dp'} sha256 {sha256_file(out / 'model.c2dp')}")
    return EXIT_OK


def _load_model(path):
    params, extra = load_checkpoint(path)
    try:
        norm = Normalizer(float(extra["norm.mean"][0]), float(extra["norm.std"][0]))
        scale = float(extra["density_scale"][0])
    except KeyError as exc:
        raise FormatError(f"{path}: checkpoint lacks {exc.args[0]!r}") from None
    return params, norm, scale


def _collect_images(source: Path, split: str) -> list[tuple[str, Path]]:
    """``(name, image path)`` pairs from a dataset directory or a flat folder of grids."""
    if (source / "manifest.json").exists():
        manifest = json.loads((source / "manifest.json").read_text())
        splits = ("train", "val", "test") if split == "all" else (split,)
        return [(e["name"], source / e["name"] / "image.c2dg") for s in splits for e in manifest["splits"].get(s, [])]
    files = sorted(p for p in source.iterdir() if p.suffix in (".c2dg", ".pgm"))
    return [(p.stem, p) for p in files]


def cmd_predict(args, argv) -> int:
    started = time.time()
    params, norm, scale = _load_model(args.model)
    source = Path(args.images)
    if not source.is_dir():
        raise IntegrityError(f"image directory {source} does not exist")
    items = _collect_images(source, args.split)
    out = _prepare_out(args.out)
    rows = []
    for name, path in items:
        image = load_grid(path)
        try:
            density = predict(image, params, norm, scale)
        except ParameterError as exc:
            raise IntegrityError(f"{path}: incompatible with checkpoint: {exc}") from exc
        save_c2dg(out / f"{name}.c2dg", density)
        save_pgm(out / f"{name}.pgm", density)
        rows.append((str(path), integrate(density)))
    with open(out / "counts.csv", "w", newline="") as fh:
        writer = csv.writer(fh)
        writer.writerow(["path", "count"])
        for path, count in rows:
            writer.writerow([path, f"{count:.6f}"])
    config = {"split": args.split, "seed": None}
    write_manifest(out, "predict", argv, config, {"model": str(args.model), "images": str(source)}, started)
    print(f"predicted {len(rows)} images into {out}")
    return EXIT_OK


def cmd_eval(args, argv) -> int:
    pred_dir, gt_dir = Path(args.pred), Path(args.gt)
    data = read_dataset(gt_dir)
    splits = {"train": data.train, "val": data.val, "test": data.test}
    scenes = data.train + data.val + data.test if args.split == "all" else splits[args.split]
    gt_names = {s.name for s in scenes}
    pred_names = {p.stem for p in pred_dir.glob("*.c2dg")}
    missing_pred = sorted(gt_names - pred_names)
    missing_gt = sorted(pred_names - gt_names)
    if missing_pred or missing_gt:
        parts = []
        if missing_gt:
            parts.append(f"no ground truth for: {', '.join(missing_gt)}")
        if missing_pred:
            parts.append(f"no prediction for: {', '.join(missing_pred)}")
        raise IntegrityError("unmatched filenames; " + "; ".join(parts))
    preds = [load_grid(pred_dir / f"{s.name}.c2dg") for s in scenes]
    report = evaluate(
        preds,
        [s.gt_density for s in scenes],
        gt_points=[s.gt_points for s in scenes],
        gt_counts=[s.count for s in scenes],
        tile=args.tile,
        match_radius=args.match_radius,
        min_density=args.min_density,
        nms_radius=args.nms_radius,
    )
    print(report.to_table())
    if args.json:
        Path(args.json).write_text(report.to_json())
    return EXIT_OK


def entry_stats(entry: np.ndarray) -> dict:
    return {
        "mass": integrate(entry),
        "max": float(entry.max()) if entry.size else 0.0,
        "support": int(np.count_nonzero(entry)),
    }


def cmd_bank(args, argv) -> int:
    root = Path(args.bank)
    if args.snapshots:
        dirs = sorted(p for p in root.iterdir() if (p / "manifest.json").exists())
        if not dirs:
            raise IntegrityError(f"{root}: no bank snapshots found")
    else:
        dirs = [root]
    banks = [(d.name, load_bank(d)) for d in dirs]
    n = len(banks[0][1])
    indices = args.entries if args.entries is not None else list(range(n))
    for i in indices:
        if not 0 <= i < n:
            raise BoundsError(f"entry index {i} outside bank of {n} entries")
    out = _prepare_out(args.export) if args.export else None
    for label, bank in banks:
        print(f"# {label}: epoch {bank.epoch}, alpha {bank.alpha}, {len(bank)} entries")
        for i in indices:
            s = entry_stats(bank.entries[i])
            print(f"entry {i:6d}  mass {s['mass']:12.4f}  max {s['max']:10.4f}  support {s['support']:7d}")
            if out is not None:
                grid = make_prior(bank, i).mass if args.prior else bank.entries[i]
                save_pgm(out / f"entry_{i:06d}_{label}.pgm", grid)
    return EXIT_OK


def cmd_rerun(args, argv) -> int:
    """Replay a manifest into a fresh output directory and compare artifact checksums."""
    path = Path(args.manifest)
    try:
        manifest = json.loads(path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise IntegrityError(f"cannot read manifest {path}: {exc}") from exc
    old_argv = list(manifest["argv"])
    out = str(Path(args.out))
    if "--out" not in old_argv:
        raise IntegrityError(f"{path}: manifest argv has no --out to redirect")
    old_argv[old_argv.index("--out") + 1] = out
    code = main(old_argv)
    if code != EXIT_OK:
        return code
    fresh = json.loads((Path(out) / MANIFEST_NAME).read_text())["checksums"]
    expected = manifest["checksums"]
    diff = sorted(k for k in set(fresh) | set(expected) if fresh.get(k) != expected.get(k))
    if diff:
        print("checksum mismatch: " + ", ".join(diff), file=sys.stderr)
        return EXIT_DATA
    print(f"reproduced {len(expected)} artifacts bit-identically")
    return EXIT_OK


# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="densitybank", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic scene dataset")
    p.add_argument("--n", type=positive_int, required=True)
    p.add_argument("--size", type=int, default=64)
    p.add_argument("--counts", type=count_range, default=(5, 50), metavar="LO:HI")
    p.add_argument("--clusters", type=positive_int, default=3)
    p.add_argument("--spread", type=float, default=6.0, help="std of head offsets around a cluster center")
    p.add_argument("--split", type=split_fractions, default=(0.8, 0.1, 0.1), metavar="TR,VA,TE")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--no-pgm", action="store_true", help="skip the PGM preview of each image")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    d = TrainConfig()
    p = sub.add_parser("train", help="train from count-only labels")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--epochs", type=int, default=d.epochs)
    p.add_argument("--lr", type=float, default=d.learning_rate)
    p.add_argument("--optimizer", choices=OPTIMIZERS, default=d.optimizer)
    p.add_argument("--weight-decay", type=float, default=d.weight_decay)
    p.add_argument("--alpha", type=float, default=d.alpha)
    p.add_argument("--tau", type=float, default=d.tau)
    p.add_argument("--seed", type=int, default=d.seed)
    p.add_argument("--labeled-fraction", type=float, default=d.labeled_fraction)
    p.add_argument("--bank-init", choices=BANK_INITS, default=d.bank_init)
    p.add_argument("--external-saliency", help="folder of <scene>.pgm or <scene>.c2dg saliency maps")
    p.add_argument("--sampler", choices=SAMPLERS, default=d.sampler)
    p.add_argument("--no-bank", action="store_true", help="build priors from the current prediction")
    p.add_argument("--no-contrastive", action="store_true")
    p.add_argument("--include-positive", action="store_true", help="put the positive pair in the denominator")
    p.add_argument("--snapshot-every", type=int, default=0, metavar="E")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="predict density maps and counts")
    p.add_argument("--model", required=True)
    p.add_argument("--images", required=True, help="dataset directory or folder of .c2dg/.pgm images")
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("eval", help="score predictions against a dataset")
    p.add_argument("--pred", required=True)
    p.add_argument("--gt", required=True)
    p.add_argument("--split", choices=("train", "val", "test", "all"), default="test")
    p.add_argument("--tile", type=positive_int)
    p.add_argument("--match-radius", type=float, default=4.0)
    p.add_argument("--min-density", type=float)
    p.add_argument("--nms-radius", type=float, default=2.0)
    p.add_argument("--json", help="also write the report as JSON here")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("bank", help="inspect a bank or a folder of bank snapshots")
    p.add_argument("--bank", required=True)
    p.add_argument("--snapshots", action="store_true", help="--bank holds one snapshot per subfolder")
    p.add_argument("--entries", type=index_list)
    p.add_argument("--export", help="write one PGM per (entry, snapshot) here")
    p.add_argument("--prior", action="store_true", help="export sampling priors instead of raw entries")
    p.set_defaults(func=cmd_bank)

    p = sub.add_parser("rerun", help="replay a run manifest and verify its checksums")
    p.add_argument("manifest")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rerun)
    return parser


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    threads = os.environ.get("C2D_THREADS")
    try:
        limit = int(threads) if threads else None
    except ValueError:
        print(f"densitybank: error: C2D_THREADS must be an integer, got {threads!r}", file=sys.stderr)
        return EXIT_USAGE
    try:
        with threadpool_limits(limits=limit):
            return args.func(args, argv)
    except (UsageError, ParameterError) as exc:
        print(f"densitybank {args.command}: usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"densitybank {args.command}: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (FormatError, IntegrityError, BoundsError, GenerationError, OSError) as exc:
        print(f"densitybank {args.command}: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
