"""Command-line surface.

Subcommands:
  gen-data      write a synthetic trajectory dataset (binary + optional CSV)
  train         run a training job from a key=value config file + overrides
  eval-mig      score a checkpoint's disentanglement on a dataset
  traverse      decode a latent sweep to CSV (and optionally SVG)
  decompose-kl  split the mean KL into index-code MI / TC / dimension-wise
  experiment    multi-seed sweep; aggregates MIG and reconstruction loss
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from .datasets import (
    GENERATORS,
    DatasetFormatError,
    export_csv,
    load_dataset,
    save_dataset,
)
from .metrics import (
    build_latent_table,
    default_traversal_values,
    export_traversal_csv,
    export_traversal_svg,
    latent_traversal,
    median_path_reference,
    mig,
)
from .objective import kl_closed_form, kl_decomposition_estimate
from .tensor import RngStream
from .training import (
    TrainConfig,
    TrainingDivergedError,
    load_checkpoint,
    load_config,
    model_from_checkpoint,
    parse_config_text,
    run_experiment,
    train,
)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="favae",
        description="Ladder time-convolution VAE: data, training, evaluation.")
    sub = parser.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="generate a synthetic dataset")
    g.add_argument("dataset", choices=sorted(GENERATORS))
    g.add_argument("--length", type=int, default=100, help="time steps per trajectory")
    g.add_argument("--out", required=True, help="output dataset file")
    g.add_argument("--csv", help="also export a plain-text CSV here")

    t = sub.add_parser("train", help="train a model")
    t.add_argument("--config", help="key=value config file")
    t.add_argument("--out-dir", help="run directory (checkpoints, losses.csv)")
    t.add_argument("--resume", help="checkpoint to resume from")
    t.add_argument("overrides", nargs="*", metavar="key=value",
                   help="config overrides, e.g. beta=4 epochs=1000")

    e = sub.add_parser("eval-mig", help="MIG of a checkpoint on a dataset")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--dataset", required=True)
    e.add_argument("--bins", type=int, default=None,
                   help="histogram bins (default: adaptive, <= 20)")
    e.add_argument("--out", help="write the report JSON here (default stdout)")

    tr = sub.add_parser("traverse", help="latent traversal of one dimension")
    tr.add_argument("--checkpoint", required=True)
    tr.add_argument("--dataset", required=True,
                    help="reference dataset (median-path trajectory is used)")
    tr.add_argument("--ladder", type=int, required=True)
    tr.add_argument("--dim", type=int, required=True)
    tr.add_argument("--values", help="comma-separated latent values "
                                     "(default: 8 points in [-3, 3])")
    tr.add_argument("--out", required=True, help="CSV output path")
    tr.add_argument("--svg", help="optional SVG line-plot path")

    d = sub.add_parser("decompose-kl", help="index-code MI / TC / dimension-wise KL")
    d.add_argument("--checkpoint", required=True)
    d.add_argument("--dataset", required=True)
    d.add_argument("--batch", type=int, default=512,
                   help="posterior sample count (dataset is cycled if smaller)")
    d.add_argument("--seed", type=int, default=0)
    d.add_argument("--out", help="write the JSON here (default stdout)")

    x = sub.add_parser("experiment", help="multi-seed MIG/reconstruction sweep")
    x.add_argument("--dataset", required=True)
    x.add_argument("--repeats", type=int, default=10)
    x.add_argument("--config", help="key=value config file")
    x.add_argument("--out", help="write the JSON here (default stdout)")
    x.add_argument("overrides", nargs="*", metavar="key=value")
    return parser


def _emit(payload: dict, out: str | None) -> None:
    text = json.dumps(payload, sort_keys=True, indent=2)
    if out:
        Path(out).write_text(text + "\n")
        print(f"wrote {out}")
    else:
        print(text)


def _cmd_gen_data(args) -> int:
    ds = GENERATORS[args.dataset](args.length)
    save_dataset(ds, args.out)
    print(f"wrote {len(ds)} trajectories (T={ds.t_steps}) to {args.out}")
    if args.csv:
        export_csv(ds, args.csv)
        print(f"wrote {args.csv}")
    return 0


def _load_cli_config(args) -> TrainConfig:
    if args.config:
        cfg = load_config(args.config, overrides=list(args.overrides))
    else:
        cfg = parse_config_text("\n".join(args.overrides))
    return cfg


def _cmd_train(args) -> int:
    cfg = _load_cli_config(args)
    if args.out_dir:
        cfg = parse_config_text(f"out_dir={args.out_dir}", base=cfg)
    result = train(cfg, resume_from=args.resume)
    last = result.loss_log[-1] if result.loss_log else None
    print(f"trained {cfg.epochs} epochs, {result.checkpoint.step} steps")
    if last is not None:
        kls = ", ".join(f"{v:.3f}" for v in last.kl_per_ladder)
        print(f"final: total={last.total:.4f} recon={last.recon_nll:.4f} kl=[{kls}]")
    print(f"eval reconstruction: {result.eval_recon:.6f}")
    if result.checkpoint_path:
        print(f"checkpoint: {result.checkpoint_path}")
    return 0


def _cmd_eval_mig(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    ds = load_dataset(args.dataset)
    table = build_latent_table(model, ds, bins=args.bins)
    report = mig(table)
    if args.out:
        Path(args.out).write_text(report.to_json() + "\n")
        print(f"wrote {args.out}")
    print(f"MIG: {report.mig:.4f}  (bins={report.n_bins}, "
          f"concentration={report.concentration_flag})")
    return 0


def _cmd_traverse(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    ds = load_dataset(args.dataset)
    ref_idx = median_path_reference(ds)
    reference = ds.sequences()[ref_idx]
    if args.values:
        values = np.array([float(v) for v in args.values.split(",")])
    else:
        values = default_traversal_values()
    decoded = latent_traversal(model, reference, args.ladder, args.dim, values)
    export_traversal_csv(decoded, values, args.out)
    print(f"wrote {args.out} (reference trajectory {ref_idx}, "
          f"{len(values)} traversal values)")
    if args.svg:
        export_traversal_svg(decoded, values, args.svg)
        print(f"wrote {args.svg}")
    return 0


def _cmd_decompose_kl(args) -> int:
    model = model_from_checkpoint(load_checkpoint(args.checkpoint))
    ds = load_dataset(args.dataset)
    sequences = ds.sequences()
    idx = np.arange(args.batch) % len(ds)
    mu, log_sigma = model.posterior_params(sequences[idx])
    dec = kl_decomposition_estimate(mu, log_sigma, RngStream(args.seed, key=7))
    payload = dec.to_dict()
    payload["closed_form_kl"] = kl_closed_form(mu, log_sigma)
    _emit(payload, args.out)
    return 0


def _cmd_experiment(args) -> int:
    ds = load_dataset(args.dataset)
    if args.config:
        cfg = load_config(args.config, overrides=list(args.overrides))
    else:
        cfg = parse_config_text("\n".join(args.overrides))
    result = run_experiment(ds, cfg, repeats=args.repeats)
    _emit(result.to_dict(), args.out)
    return 0


_COMMANDS = {
    "gen-data": _cmd_gen_data,
    "train": _cmd_train,
    "eval-mig": _cmd_eval_mig,
    "traverse": _cmd_traverse,
    "decompose-kl": _cmd_decompose_kl,
    "experiment": _cmd_experiment,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except (FileNotFoundError, DatasetFormatError, TrainingDivergedError,
            ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
