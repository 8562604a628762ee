"""``breaknet`` command line: synth, train, eval, ablate, gradcheck, export-pgm.

Every command writes ``manifest.json`` into its output directory.  Exit
codes: 0 success, 1 usage/config error, 2 numeric failure, 3 I/O error.
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import json
import logging
import os
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__, tensorio
from .data import dataset_hash, dataset_num_classes, load_dataset, volume_dirs, write_pgm, write_volume
from .gradcheck import NonFiniteError, run_suite
from .metrics import evaluate, label_to_boundaries, table1_row, write_report
from .model import VARIANTS, BreakNet, ConfigError, build_variant, load_checkpoint
from .synth import REGIMES, SpecError, SynthSpec, degrade_ground_truth, gen_volume, regime_spec
from .tensorio import TensorFormatError
from .training import NonFiniteLossError, TrainConfig, train

log = logging.getLogger("breaknet")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC, EXIT_IO = 0, 1, 2, 3
SEED_ENV = "BREAKNET_SEED"


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


# ---------------------------------------------------------------------------
# shared helpers
# ---------------------------------------------------------------------------

def read_json(path) -> dict:
    if path is None:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except json.JSONDecodeError as exc:
        raise UsageError(f"{path}: invalid JSON ({exc})") from exc


def resolve_seed(cli_seed, config_seed: int) -> int:
    """--seed beats BREAKNET_SEED, which beats the config file."""
    if cli_seed is not None:
        return int(cli_seed)
    env = os.environ.get(SEED_ENV)
    if env is not None:
        try:
            return int(env)
        except ValueError as exc:
            raise UsageError(f"{SEED_ENV}={env!r} is not an integer") from exc
    return int(config_seed)


def split_train_config(raw: dict) -> tuple[TrainConfig, dict]:
    """A train.json holds TrainConfig fields plus an optional "model" override block."""
    raw = dict(raw)
    model_overrides = raw.pop("model", {}) or {}
    if "aux_loss_weights" in raw:
        raw["aux_loss_weights"] = tuple(raw["aux_loss_weights"])
    if "augment" in raw:
        raw["augment"] = tuple(raw["augment"])
    return TrainConfig.from_dict(raw), model_overrides


def write_manifest(out: Path, command: str, config: dict, seed, artifacts: list, started: float,
                   extra: dict | None = None) -> Path:
    root = out.resolve()
    rel = []
    for a in artifacts:
        p = Path(a).resolve()
        rel.append(str(p.relative_to(root)) if p.is_relative_to(root) else str(p))
    manifest = {
        "command": command,
        "config": config,
        "seed": seed,
        "artifacts": sorted(set(rel)),
        "version": __version__,
        "argv": sys.argv[1:],
        "wall_time_s": time.perf_counter() - started,
    }
    if extra:
        manifest.update(extra)
    path = out / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True))
    return path


def split_holdout(samples: list, fraction: float, seed: int) -> tuple[list, list]:
    n_val = max(1, int(round(fraction * len(samples))))
    if n_val >= len(samples):
        raise UsageError("dataset too small to hold out a validation split; pass --val")
    perm = np.random.default_rng([seed, 1]).permutation(len(samples))
    val_idx = set(perm[:n_val].tolist())
    return ([s for i, s in enumerate(samples) if i not in val_idx],
            [s for i, s in enumerate(samples) if i in val_idx])


def _loaded(root, label_set: str) -> list:
    samples = load_dataset(root, label_set)
    if not samples:
        raise UsageError(f"{root}: dataset is empty")
    return samples


def _check_classes(cfg_classes: int, data_root) -> None:
    data_classes = dataset_num_classes(data_root)
    if data_classes != cfg_classes:
        raise UsageError(f"class-count mismatch: model has {cfg_classes} classes, {data_root} has {data_classes}")


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_synth(args) -> int:
    started = time.perf_counter()
    raw = read_json(args.spec)
    try:
        spec = SynthSpec.from_dict(raw)
    except SpecError as exc:
        raise UsageError(f"invalid spec field '{exc.field}': {exc}") from exc
    seed = resolve_seed(args.seed, spec.seed)
    spec = replace(spec, seed=seed)
    if args.volumes < 1 or args.frames < 1:
        raise UsageError("--volumes and --frames must be >= 1")
    regimes = args.regimes.split(",") if args.regimes else [spec.regime]
    bad = [r for r in regimes if r not in REGIMES]
    if bad:
        raise UsageError(f"unknown regimes {bad}; choose from {list(REGIMES)}")
    if args.degrade is not None and args.degrade < 2:
        raise UsageError("--degrade stride must be >= 2")
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    vol_seeds = np.random.SeedSequence(seed).generate_state(args.volumes)
    artifacts = []
    for v in range(args.volumes):
        vs = regime_spec(spec, regimes[v % len(regimes)], int(vol_seeds[v]))
        volume = gen_volume(vs, args.frames)
        degraded = degrade_ground_truth(volume, args.degrade) if args.degrade else None
        d = write_volume(out / f"vol_{v:03d}", volume, int(vol_seeds[v]), degraded)
        artifacts.extend(p for p in d.iterdir())
    write_manifest(out, "synth", {"spec": spec.to_dict(), "volumes": args.volumes, "frames": args.frames,
                                  "regimes": regimes, "degrade": args.degrade}, seed, artifacts, started)
    print(f"wrote {args.volumes} volume(s) x {args.frames} frame(s) to {out}")
    return EXIT_OK


def _build_model(variant: str, overrides: dict, seed: int) -> BreakNet:
    try:
        cfg = build_variant(variant, **overrides)
    except TypeError as exc:
        raise UsageError(f"bad model override: {exc}") from exc
    return BreakNet(cfg, seed=seed)


def _train_one(variant, samples, val, tcfg, overrides, seed, out: Path):
    model = _build_model(variant, overrides, seed)
    t0 = time.perf_counter()
    result = train(model, samples, val, replace(tcfg, seed=seed), out_dir=out,
                   on_epoch=lambda e: log.info("%s epoch %d loss %.4f val dice %.4f",
                                               variant, e["epoch"], e["train_loss"], e["val_dice"]))
    return result, time.perf_counter() - t0


def cmd_train(args) -> int:
    from .plotting import plot_training

    started = time.perf_counter()
    tcfg, overrides = split_train_config(read_json(args.config))
    seed = resolve_seed(args.seed, tcfg.seed)
    tcfg = replace(tcfg, seed=seed)
    if args.epochs is not None:
        tcfg = replace(tcfg, max_epochs=args.epochs)
    model_cfg = build_variant(args.model, **overrides)
    _check_classes(model_cfg.num_classes, args.data)
    samples = _loaded(args.data, args.labels)
    if args.val:
        _check_classes(model_cfg.num_classes, args.val)
        train_set, val_set = samples, _loaded(args.val, "true")
    else:
        train_set, val_set = split_holdout(samples, tcfg.val_fraction, seed)
    out = Path(args.out)
    result, wall = _train_one(args.model, train_set, val_set, tcfg, overrides, seed, out)
    fig = plot_training(result.log.epochs, out / "training.png") if result.log.epochs else None
    artifacts = [p for p in out.iterdir() if p.name != "manifest.json"]
    write_manifest(out, "train", {"model": args.model, "model_config": model_cfg.to_dict(),
                                  "train": tcfg.to_dict(), "labels": args.labels,
                                  "data": str(args.data), "val": args.val},
                   seed, artifacts, started,
                   {"data_hash": dataset_hash(args.data), "best_epoch": result.best_epoch,
                    "best_val_dice": result.best_dice, "train_wall_time_s": wall})
    print(f"best epoch {result.best_epoch} val dice {result.best_dice:.4f}; wrote {out}"
          + (f" ({fig.name})" if fig else ""))
    return EXIT_OK


def _resolve_checkpoint(path) -> Path:
    """Accept a checkpoint manifest, a best.json pointer or a run directory."""
    p = Path(path)
    if p.is_dir():
        p = p / "best.json"
    if not p.is_file():
        raise FileNotFoundError(f"checkpoint {p} not found")
    meta = json.loads(p.read_text())
    if "checkpoint" in meta and "format" not in meta:
        p = p.parent / meta["checkpoint"]
    return p


def cmd_eval(args) -> int:
    from .plotting import plot_layer_scores, plot_overlay

    started = time.perf_counter()
    ckpt = _resolve_checkpoint(args.checkpoint)
    model = load_checkpoint(ckpt)
    _check_classes(model.config.num_classes, args.data)
    samples = _loaded(args.data, args.labels)
    report = evaluate(model.predict, samples, args.method, num_classes=model.config.num_classes)
    out = Path(args.out)
    paths = write_report(report, out)
    artifacts = list(paths.values())
    report_dict = report.to_dict()
    artifacts.append(plot_layer_scores(report_dict, out / "layers.png"))
    if args.overlay:
        odir = out / "overlays"
        odir.mkdir(exist_ok=True)
        for i in range(0, len(samples), 8):
            chunk = samples[i:i + 8]
            pred = model.predict(np.stack([s.image for s in chunk])[:, None]).argmax(axis=1)
            for j, (s, p) in enumerate(zip(chunk, pred)):
                k = i + j
                pb = label_to_boundaries(p, model.config.num_classes).rows
                gb = label_to_boundaries(s.labels, model.config.num_classes).rows
                pgm = odir / f"scan_{k:04d}.pgm"
                write_pgm(pgm, s.image, [gb, pb], [255, 0])
                artifacts.append(pgm)
                if k == 0:
                    artifacts.append(plot_overlay(s.image, gb, pb, out / "overlay_000.png",
                                                  f"{args.method} scan 0"))
    write_manifest(out, "eval", {"checkpoint": str(ckpt), "data": str(args.data), "labels": args.labels,
                                 "method": args.method}, None, artifacts, started)
    row = table1_row(report)
    print(",".join(row))
    print(",".join(str(v) for v in row.values()))
    return EXIT_OK


ABLATION_COLUMNS = ("Method", "Dice", "IoU", "FailureRate", "dice_mean", "dice_std",
                    "wall_time_s", "seeds", "data_hash")


def cmd_ablate(args) -> int:
    from .plotting import plot_ablation

    started = time.perf_counter()
    tcfg, overrides = split_train_config(read_json(args.config))
    base_seed = resolve_seed(args.seed, tcfg.seed)
    variants = args.variants.split(",") if args.variants else list(VARIANTS)
    unknown = [v for v in variants if v not in VARIANTS]
    if unknown:
        raise UsageError(f"unknown variants {unknown}; choose from {list(VARIANTS)}")
    if args.epochs is not None:
        tcfg = replace(tcfg, max_epochs=args.epochs)
    if args.seeds < 1:
        raise UsageError("--seeds must be >= 1")
    seeds = [base_seed + i for i in range(args.seeds)]
    _check_classes(build_variant(variants[0], **overrides).num_classes, args.data)
    samples = _loaded(args.data, args.labels)
    test_root = args.test or args.data
    test = _loaded(test_root, "true")
    if args.val:
        train_set, val_set = samples, _loaded(args.val, "true")
    else:
        train_set, val_set = split_holdout(samples, tcfg.val_fraction, base_seed)
    data_hash = dataset_hash(args.data)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    rows, runs, artifacts = [], [], []
    for variant in variants:
        dices, reports, wall = [], [], 0.0
        for seed in seeds:
            run_dir = out / f"{variant}_seed{seed}"
            result, w = _train_one(variant, train_set, val_set, tcfg, overrides, seed, run_dir)
            wall += w
            rep = evaluate(result.model.predict, test, variant, num_classes=result.model.config.num_classes)
            write_report(rep, run_dir / "report")
            reports.append(rep)
            dices.append(rep.dice()[0])
            runs.append({"variant": variant, "seed": seed, "dice": rep.dice()[0], "iou": rep.iou()[0],
                         "failure_rate": rep.failure_rate, "wall_time_s": w, "data_hash": data_hash})
            artifacts.append(run_dir)
        pooled = reports[0]
        for rep in reports[1:]:
            pooled.scans.extend(rep.scans)
        row = table1_row(pooled)
        rows.append({
            "Method": variant, "Dice": row["Dice"], "IoU": row["IoU"], "FailureRate": row["FailureRate"],
            "dice_mean": float(np.mean(dices)), "dice_std": float(np.std(dices)),
            "wall_time_s": wall / len(seeds), "seeds": " ".join(map(str, seeds)), "data_hash": data_hash,
        })
    csv_path = out / "ablation.csv"
    with open(csv_path, "w", newline="") as fh:
        wr = csv.DictWriter(fh, fieldnames=ABLATION_COLUMNS)
        wr.writeheader()
        wr.writerows(rows)
    runs_path = out / "ablation_runs.json"
    runs_path.write_text(json.dumps(runs, indent=2, sort_keys=True))
    artifacts += [csv_path, runs_path, plot_ablation(rows, out / "ablation.png")]
    write_manifest(out, "ablate", {"train": tcfg.to_dict(), "model_overrides": overrides, "variants": variants,
                                   "seeds": seeds, "data": str(args.data), "test": str(test_root),
                                   "labels": args.labels},
                   base_seed, artifacts, started, {"data_hash": data_hash})
    for r in rows:
        print(f"{r['Method']:9s} dice {r['dice_mean']:.4f} ({r['dice_std']:.4f})  wall {r['wall_time_s']:.1f}s")
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    started = time.perf_counter()
    seed = resolve_seed(args.seed, 0)
    failed = []

    def report(name, err, tol):
        ok = err < tol
        if not ok:
            failed.append(name)
        print(f"{name:36s} {err:.3e}  tol {tol:.0e}  {'ok' if ok else 'FAIL'}", flush=True)

    results = run_suite(args.scope, seed=seed, report=report)
    if args.out:
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        res_path = out / "gradcheck.json"
        res_path.write_text(json.dumps([{"target": n, "max_rel_error": e, "tolerance": t} for n, e, t in results],
                                       indent=2))
        write_manifest(out, "gradcheck", {"scope": args.scope}, seed, [res_path], started)
    if failed:
        print(f"{len(failed)} target(s) above tolerance: {', '.join(failed)}", file=sys.stderr)
        return EXIT_NUMERIC
    print(f"all {len(results)} target(s) within tolerance")
    return EXIT_OK


def cmd_export_pgm(args) -> int:
    started = time.perf_counter()
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    artifacts = []
    for vol in volume_dirs(args.data):
        meta = json.loads((vol / "meta.json").read_text())
        for fr in meta["frames"]:
            image = tensorio.load(vol / fr["image"])
            overlays = []
            if args.boundaries:
                key = "labels" if args.labels == "true" else "labels_lq"
                if key not in fr:
                    raise FileNotFoundError(f"{vol}: frame {fr['index']} has no {key}")
                labels = tensorio.load(vol / fr[key]).astype(np.int64)
                overlays.append(label_to_boundaries(labels, meta.get("num_classes", 9)).rows)
            p = out / f"{vol.name}_frame_{fr['index']:03d}.pgm"
            write_pgm(p, image, overlays, [255] * len(overlays))
            artifacts.append(p)
    write_manifest(out, "export-pgm", {"data": str(args.data), "labels": args.labels,
                                       "boundaries": args.boundaries}, None, artifacts, started)
    print(f"wrote {len(artifacts)} PGM file(s) to {out}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="breaknet", description="Toy BreakNet: synthetic OCT layer segmentation.")
    p.add_argument("--version", action="version", version=f"breaknet {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded BLAS for bit-exact reproduction")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate synthetic B-scan volumes")
    s.add_argument("--spec", help="SynthSpec JSON (defaults if omitted)")
    s.add_argument("--out", required=True)
    s.add_argument("--volumes", type=int, default=1)
    s.add_argument("--frames", type=int, default=1)
    s.add_argument("--regimes", help=f"comma list cycled per volume, from {','.join(REGIMES)}")
    s.add_argument("--degrade", type=int, metavar="STRIDE", help="also write keyframe-interpolated labels")
    s.add_argument("--seed", type=int)
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one model variant")
    t.add_argument("--model", default="BreakNet", choices=list(VARIANTS))
    t.add_argument("--data", required=True)
    t.add_argument("--config", help="train JSON (TrainConfig fields + optional 'model' overrides)")
    t.add_argument("--out", required=True)
    t.add_argument("--val", help="separate validation dataset (default: hold out val_fraction)")
    t.add_argument("--labels", choices=("true", "lq"), default="true", help="training label set")
    t.add_argument("--epochs", type=int, help="override max_epochs")
    t.add_argument("--seed", type=int)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="score a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True, help="checkpoint manifest, best.json or run directory")
    e.add_argument("--data", required=True)
    e.add_argument("--out", required=True)
    e.add_argument("--labels", choices=("true", "lq"), default="true")
    e.add_argument("--method", default="BreakNet", help="row label in the report")
    e.add_argument("--overlay", action="store_true", help="write one PGM per scan with boundaries")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train and score BL1..BL4 and BreakNet on shared data")
    a.add_argument("--data", required=True)
    a.add_argument("--config")
    a.add_argument("--out", required=True)
    a.add_argument("--test", help="held-out dataset (default: --data)")
    a.add_argument("--val")
    a.add_argument("--labels", choices=("true", "lq"), default="true")
    a.add_argument("--seeds", type=int, default=1, help="number of consecutive seeds per variant")
    a.add_argument("--variants", help="comma list (default: all)")
    a.add_argument("--epochs", type=int)
    a.add_argument("--seed", type=int)
    a.set_defaults(func=cmd_ablate)

    g = sub.add_parser("gradcheck", help="finite-difference gradient suite")
    g.add_argument("--scope", choices=("op", "block", "model"), default="op")
    g.add_argument("--out", help="also write gradcheck.json + manifest here")
    g.add_argument("--seed", type=int)
    g.set_defaults(func=cmd_gradcheck)

    x = sub.add_parser("export-pgm", help="dump dataset images (with boundaries) as PGM")
    x.add_argument("--data", required=True)
    x.add_argument("--out", required=True)
    x.add_argument("--labels", choices=("true", "lq"), default="true")
    x.add_argument("--boundaries", action="store_true", help="draw label boundaries")
    x.set_defaults(func=cmd_export_pgm)
    return p


@contextlib.contextmanager
def _threads(deterministic: bool):
    if not deterministic:
        yield
        return
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=1):
        yield


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(levelname)s %(message)s", stream=sys.stderr)
    try:
        with _threads(args.deterministic):
            return args.func(args)
    except (NonFiniteLossError, NonFiniteError, FloatingPointError) as exc:
        print(f"breaknet: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (OSError, TensorFormatError) as exc:
        print(f"breaknet: I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    except (UsageError, ConfigError, SpecError, ValueError, KeyError, TypeError) as exc:
        print(f"breaknet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
