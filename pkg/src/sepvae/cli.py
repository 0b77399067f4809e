"""Command-line entry points: ``gen-data``, ``train``, ``eval``, ``ablate``, ``report``.

Exit codes: 0 success, 2 config/validation error, 3 non-finite loss, 4 I/O error.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import yaml

from . import config as cfg
from .data import ContrastiveDataset, DatasetManifest, generate_synthetic, save_image_folder, split
from .errors import ConfigError, ContractViolation, NonFiniteLossError

log = logging.getLogger("sepvae")

EXIT_OK, EXIT_CONFIG, EXIT_NONFINITE, EXIT_IO = 0, 2, 3, 4
DATA_FILE, MANIFEST_FILE, CONFIG_SNAPSHOT = "data.npz", "manifest.json", "config.yaml"


def runs_root():
    return Path(os.environ.get("SEPVAE_RUNS_ROOT", "runs"))


def _resolve_config(args, extra_ablations=()):
    """Config file + ``--seed``/``--epochs``/``--ablate``/``--override``, as a validated RunConfig."""
    if args.config is None:
        d = cfg.default_config_dict()
    else:
        try:
            d = yaml.safe_load(Path(args.config).read_text()) or {}
        except yaml.YAMLError as exc:
            raise ConfigError(f"{args.config}: invalid YAML ({exc})", [str(args.config)]) from exc
    overrides = list(getattr(args, "override", None) or [])
    if getattr(args, "seed", None) is not None:
        overrides += [f"train.seed={args.seed}", f"data.seed={args.seed}"]
    if getattr(args, "epochs", None) is not None:
        overrides.append(f"train.epochs={args.epochs}")
    for o in overrides:
        cfg.apply_override(d, o)
    ablate = getattr(args, "ablate", None)
    if ablate:
        cfg.apply_ablations(d, ablate.split(","))
    return cfg.from_dict(d), overrides


def _load_data(data_dir):
    data_dir = Path(data_dir)
    dataset = ContrastiveDataset.load_npz(data_dir / DATA_FILE)
    manifest = DatasetManifest.read(data_dir / MANIFEST_FILE)
    if len(manifest.rows) != len(dataset):
        raise ContractViolation(f"{data_dir}: manifest has {len(manifest.rows)} rows, data has {len(dataset)}")
    return dataset, manifest


def cmd_gen_data(args):
    run_cfg, _ = _resolve_config(args)
    out = Path(args.out) if args.out else runs_root() / "data"
    dataset, base = generate_synthetic(run_cfg.data)
    manifest = split(dataset, run_cfg.split.fractions, run_cfg.split.seed, run_cfg.split.stratify_on_y, base=base)
    out.mkdir(parents=True, exist_ok=True)
    dataset.save_npz(out / DATA_FILE)
    manifest.write(out / MANIFEST_FILE)
    (out / CONFIG_SNAPSHOT).write_text(run_cfg.to_yaml())
    if args.folder:
        save_image_folder(dataset, out / "folder")
    print(f"wrote {len(dataset)} samples to {out} (manifest sha256 {manifest.hash()[:12]})")
    return manifest


def cmd_train(args):
    from .train import fit

    run_cfg, overrides = _resolve_config(args)
    dataset, manifest = _load_data(args.data)
    out = Path(args.out) if args.out else runs_root() / f"train-{run_cfg.hash()}"
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_SNAPSHOT).write_text(run_cfg.to_yaml())
    (out / "run.json").write_text(
        json.dumps(
            {"data_dir": str(Path(args.data).resolve()), "manifest_sha256": manifest.hash(),
             "overrides": overrides, "config_hash": run_cfg.hash()},
            indent=2,
        )
    )
    train_set = dataset.subset(manifest.indices("train"))
    val_idx = manifest.indices("val")
    val_set = dataset.subset(val_idx) if len(val_idx) else None
    _, history = fit(run_cfg.train, train_set, run_dir=out, val_dataset=val_set)
    final = history.epochs[-1] if history.epochs else {"epoch": 0}
    (out / "final_metrics.json").write_text(json.dumps(final, indent=2, sort_keys=True))
    print(f"run directory: {out}")
    return out


def cmd_eval(args):
    from .evaluation import evaluate
    from .model import load_checkpoint

    run_dir = Path(args.run)
    ckpt = run_dir / (args.checkpoint or "last.pt")
    if not ckpt.exists():
        raise FileNotFoundError(f"no checkpoint at {ckpt}")
    data_dir = args.data
    if data_dir is None:
        data_dir = json.loads((run_dir / "run.json").read_text())["data_dir"]
    dataset, manifest = _load_data(data_dir)
    run_cfg = cfg.load_config(run_dir / CONFIG_SNAPSHOT)
    model, _ = load_checkpoint(ckpt)
    method = "baseline" if run_cfg.train.weights.ablate_clsf else "sepvae"
    metrics = evaluate(
        model, dataset, manifest,
        seed=run_cfg.eval.seed, method=method, out_dir=run_dir / "eval",
        run_id=run_dir.name, config_hash=run_cfg.hash(), n_gallery=run_cfg.eval.n_gallery,
    )
    print(f"metrics written to {run_dir / 'eval' / 'metrics.json'}")
    return metrics


def cmd_ablate(args):
    from .evaluation import ABLATION_GRID, ablation_suite

    run_cfg, _ = _resolve_config(args)
    dataset, manifest = _load_data(args.data)
    out = Path(args.out) if args.out else runs_root() / f"ablate-{run_cfg.hash()}"
    cells = None
    if args.cells:
        cells = [c.strip() for c in args.cells.split(",")]
        unknown = [c for c in cells if c not in ABLATION_GRID]
        if unknown:
            raise ConfigError(f"unknown ablation cells {unknown}; choose from {list(ABLATION_GRID)}", ["--cells"])
    out.mkdir(parents=True, exist_ok=True)
    (out / CONFIG_SNAPSHOT).write_text(run_cfg.to_yaml())
    results = ablation_suite(run_cfg.train, dataset, manifest, cells, n_seeds=args.seeds, out_dir=out)
    print(f"ablation table: {out / 'ablation.md'}")
    return results


def cmd_report(args):
    from .evaluation import write_report

    path = write_report(args.runs, args.out)
    print(f"report: {path}")
    return path


def build_parser():
    p = argparse.ArgumentParser(prog="sepvae", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, data=True):
        sp.add_argument("--config", help="YAML run config (default: packaged synthetic config)")
        sp.add_argument("--override", action="append", default=[], metavar="KEY=VALUE",
                        help="dotted-key override, repeatable (e.g. weights.gamma=1.0)")
        sp.add_argument("--seed", type=int)
        if data:
            sp.add_argument("--data", required=True, help="dataset directory written by gen-data")
        sp.add_argument("--out", help="output directory (default under $SEPVAE_RUNS_ROOT)")

    sp = sub.add_parser("gen-data", help="generate the synthetic dataset and its split manifest")
    common(sp, data=False)
    sp.add_argument("--folder", action="store_true", help="also export images/*.png + labels.csv")
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("train", help="train one model")
    common(sp)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--ablate", help="comma-separated terms to disable: mi,clsf,sal")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="evaluate a run directory")
    sp.add_argument("--run", required=True)
    sp.add_argument("--data", help="dataset directory (default: the one the run was trained on)")
    sp.add_argument("--checkpoint", help="checkpoint file name inside the run (default last.pt)")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("ablate", help="train/evaluate the ablation grid over seeds")
    common(sp)
    sp.add_argument("--epochs", type=int)
    sp.add_argument("--seeds", type=int, default=3)
    sp.add_argument("--cells", help="comma-separated subset of the grid rows (default: all 7)")
    sp.set_defaults(func=cmd_ablate)

    sp = sub.add_parser("report", help="markdown report over evaluated runs")
    sp.add_argument("--runs", nargs="+", required=True)
    sp.add_argument("--out", required=True)
    sp.set_defaults(func=cmd_report)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        args.func(args)
    except (ConfigError, ContractViolation) as exc:
        fields = getattr(exc, "fields", None)
        print(f"config error: {exc}" + (f" [fields: {', '.join(fields)}]" if fields else ""), file=sys.stderr)
        return EXIT_CONFIG
    except NonFiniteLossError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except OSError as exc:
        print(f"I/O error: {exc}", file=sys.stderr)
        return EXIT_IO
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
