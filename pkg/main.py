"""
Violence Sentinel - weakly supervised multimodal violence detection

Command-line entry point: synthetic data generation, training, evaluation,
gradient self-check and the ablation / sweep experiments.
"""

import argparse
import logging
import sys
from pathlib import Path
from typing import List, Optional

from src import autodiff as ad
from src.config import ABLATION_TERMS, ExperimentConfig
from src.datagen import MANIFEST_NAME, MODALITIES, generate_dataset, make_batch, read_manifest, write_manifest
from src.errors import NonFiniteLossError, SentinelError
from src.evaluation import evaluate, export_traces
from src.logging_utils import configure_logging
from src.training import (ABLATION_ROWS, CONFIG_NAME, SPLIT_NAME, Trainer, ViolenceDetector, ablation_summary,
                          batch_inputs, loss_graph, read_split, run_ablation_grid, run_dimension_sweep,
                          run_lambda_grid, run_lock, train_run)

logger = logging.getLogger("violence_sentinel")

EXIT_OK = 0
EXIT_GRADCHECK_FAILED = 1
EXIT_USER_ERROR = 2
EXIT_NON_FINITE = 3

GRADCHECK_TOLERANCE = 1e-4


class UsageError(SentinelError):
    """Command-line arguments that cannot be honoured"""


def _prepare_out_dir(out: Path, force: bool) -> Path:
    if out.exists() and any(out.iterdir()) and not force:
        raise UsageError(f"{out} exists and is not empty (use --force to write into it)")
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_config(args, extra: Optional[List[str]] = None) -> ExperimentConfig:
    overrides = list(args.set or [])
    if getattr(args, "seed", None) is not None:
        overrides.append(f"{args.seed_key}={args.seed}")
    return ExperimentConfig.load(args.config, overrides + list(extra or []))


def _load_bags(data_dir: Path):
    return read_manifest(Path(data_dir) / MANIFEST_NAME)


def _class_counts(bags) -> str:
    anomalous = sum(b.label for b in bags)
    return f"{len(bags)} bags: {anomalous} violent, {len(bags) - anomalous} normal"


# ---------------------------------------------------------------------------
# commands
# ---------------------------------------------------------------------------

def cmd_gen(args) -> int:
    config = _load_config(args)
    out = _prepare_out_dir(Path(args.out), args.force)
    bags = generate_dataset(config.gen)
    write_manifest(out / MANIFEST_NAME, bags)
    config.save(out / CONFIG_NAME)
    print(f"Wrote {_class_counts(bags)} to {out}")
    return EXIT_OK


def cmd_train(args) -> int:
    extra = []
    if args.ablate:
        extra.append(f"train.ablate=[{', '.join(sorted(set(args.ablate)))}]")
    if args.iterations is not None:
        extra.append(f"train.iterations={args.iterations}")
    config = _load_config(args, extra)
    bags = _load_bags(args.data)
    out = _prepare_out_dir(Path(args.out), args.force)
    with run_lock(out):
        result = train_run(config, bags, run_dir=out, progress=args.progress)
    last = result.runlog.records[-1] if len(result.runlog) else None
    print(f"Trained {len(result.runlog)} iterations on {_class_counts(result.train_bags)}; run saved to {out}")
    if last is not None:
        print(f"final loss {last['total']:.4f} (m_RA={last['m_ra']:.3f}, m_RF={last['m_rf']:.3f})")
    return EXIT_OK


def cmd_eval(args) -> int:
    run_dir = Path(args.run)
    if not run_dir.is_dir():
        raise UsageError(f"run directory {run_dir} not found")
    with run_lock(run_dir):
        trainer = Trainer.load(run_dir)
        bags = _load_bags(args.data)
        if args.split == "holdout":
            split_path = run_dir / SPLIT_NAME
            if not split_path.exists():
                raise UsageError(f"{split_path} not found; use --split all")
            test_ids = set(read_split(split_path)["test"])
            bags = [b for b in bags if b.id in test_ids]
            if not bags:
                raise UsageError("none of the held-out bags are in this dataset")
        report = evaluate(trainer.detector, bags, subsets=True, seed=trainer.config.train.seed)
        out = Path(args.out) if args.out else run_dir / "eval"
        export_traces(report, out)

    print(f"Evaluated {_class_counts(bags)} ({report.frames} frames)")
    for key in ("ap_fused", "ap_rgb", "ap_audio", "ap_flow"):
        print(f"  {key:<9} {getattr(report, key):.4f}")
    for key, value in report.subsets.items():
        print(f"  {key:<9} {value:.4f}")
    print(f"  params    {report.params}")
    print(f"Traces written to {out}")
    return EXIT_OK


def gradcheck_config(seed: int) -> ExperimentConfig:
    """A 2-bag, T=32 micro setting small enough for central differences on every parameter"""
    config = ExperimentConfig()
    config.gen.n_bags, config.gen.t_min, config.gen.t_max = 2, 32, 32
    config.gen.rgb_dim, config.gen.audio_dim, config.gen.flow_dim = 24, 8, 16
    config.gen.rgb_signal_dims, config.gen.audio_signal_dims, config.gen.flow_signal_dims = 12, 4, 8
    config.gen.latent_dim, config.gen.segment_max = 4, 16
    config.gen.seed = seed
    config.encoder.d_rgb, config.encoder.d_flow, config.encoder.d_audio = 16, 8, 4
    config.encoder.heads, config.encoder.layers, config.encoder.local_window = 2, 1, 5
    config.encoder.ffn_multiplier = 2
    config.fusion.hidden_dim, config.fusion.out_dim = 16, 8
    config.train.batch_size, config.train.t_train, config.train.seed = 2, 32, seed
    return config.validate()


def cmd_gradcheck(args) -> int:
    config = gradcheck_config(args.seed)
    with ad.default_dtype("float64"):
        bags = generate_dataset(config.gen)
        batch = make_batch(bags, config.train.t_train, args.seed)
        raw_dims = {m: bags[0].sequence(m).D for m in MODALITIES}
        detector = ViolenceDetector(raw_dims, config.encoder, config.fusion, seed=args.seed)
        graph = loss_graph(detector, batch, config.train)
        if args.inject_fault:
            with ad.fault_injection(args.inject_fault, 1.5):
                report = ad.grad_check_report(graph, batch_inputs(batch), eps=args.eps,
                                              max_components=args.max_components, seed=args.seed)
        else:
            report = ad.grad_check_report(graph, batch_inputs(batch), eps=args.eps,
                                          max_components=args.max_components, seed=args.seed)

    groups = {}
    for name, err in report.items():
        group = name.split(".")[0]
        groups[group] = max(groups.get(group, 0.0), err)
    worst = max(groups.values(), default=0.0)
    print(f"Gradient check over {len(report)} leaves (eps={args.eps:g}, "
          f"{args.max_components or 'all'} components per leaf)")
    for group in sorted(groups):
        flag = "ok" if groups[group] < GRADCHECK_TOLERANCE else "FAIL"
        print(f"  {group:<20} {groups[group]:.3e}  {flag}")
    print(f"max relative error {worst:.3e} (tolerance {GRADCHECK_TOLERANCE:g})")
    return EXIT_OK if worst < GRADCHECK_TOLERANCE else EXIT_GRADCHECK_FAILED


def cmd_ablate(args) -> int:
    config = _load_config(args)
    bags = _load_bags(args.data)
    out = _prepare_out_dir(Path(args.out), args.force)
    rows = {r: ABLATION_ROWS[r] for r in (args.rows or sorted(ABLATION_ROWS))}
    with run_lock(out):
        frame = run_ablation_grid(config, bags, rows=rows, seeds=range(args.seeds))
        frame.to_csv(out / "ablation.csv", index=False)
        summary = ablation_summary(frame)
        summary.to_csv(out / "ablation_median.csv", index=False)
        config.save(out / CONFIG_NAME)
    print(summary.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    return EXIT_OK


def cmd_sweep(args) -> int:
    config = _load_config(args)
    bags = _load_bags(args.data)
    out = _prepare_out_dir(Path(args.out), args.force)
    with run_lock(out):
        if args.kind == "dims":
            frame = run_dimension_sweep(config, bags)
            name = "dimension_sweep.csv"
        else:
            frame = run_lambda_grid(config, bags)
            name = "lambda_grid.csv"
        frame.to_csv(out / name, index=False)
        config.save(out / CONFIG_NAME)
    print(frame.to_string(index=False, float_format=lambda v: f"{v:.4f}"))
    return EXIT_OK


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------

def _common(parser: argparse.ArgumentParser, seed_key: str = "train.seed") -> None:
    parser.add_argument("--config", type=Path, default=None, help="YAML experiment config")
    parser.add_argument("--set", action="append", metavar="KEY=VALUE", help="Dotted config override, repeatable")
    parser.add_argument("--seed", type=int, default=None)
    parser.set_defaults(seed_key=seed_key)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="violence-sentinel", description=__doc__.strip().splitlines()[0])
    parser.add_argument("--log-level", default=None, help="Overrides VIOLENCE_SENTINEL_LOG_LEVEL")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="Generate a synthetic dataset")
    _common(gen, seed_key="gen.seed")
    gen.add_argument("--out", type=Path, required=True)
    gen.add_argument("--force", action="store_true")
    gen.set_defaults(func=cmd_gen)

    train = sub.add_parser("train", help="Train a detector on a dataset")
    _common(train)
    train.add_argument("--data", type=Path, required=True)
    train.add_argument("--out", type=Path, required=True)
    train.add_argument("--ablate", action="append", choices=ABLATION_TERMS)
    train.add_argument("--iterations", type=int, default=None)
    train.add_argument("--force", action="store_true")
    train.add_argument("--progress", action="store_true")
    train.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="Evaluate a trained run and export score traces")
    ev.add_argument("--run", type=Path, required=True)
    ev.add_argument("--data", type=Path, required=True)
    ev.add_argument("--out", type=Path, default=None)
    ev.add_argument("--split", choices=("holdout", "all"), default="holdout")
    ev.set_defaults(func=cmd_eval)

    gc = sub.add_parser("gradcheck", help="Finite-difference check of the full training loss")
    gc.add_argument("--seed", type=int, default=0)
    gc.add_argument("--eps", type=float, default=1e-6)
    gc.add_argument("--max-components", type=int, default=4)
    gc.add_argument("--inject-fault", default=None, metavar="OP",
                    help="Corrupt one op's gradient (negative control)")
    gc.set_defaults(func=cmd_gradcheck)

    ablate = sub.add_parser("ablate", help="Train the loss-ablation rows over several seeds")
    _common(ablate)
    ablate.add_argument("--data", type=Path, required=True)
    ablate.add_argument("--out", type=Path, required=True)
    ablate.add_argument("--seeds", type=int, default=5)
    ablate.add_argument("--rows", type=int, nargs="+", choices=sorted(ABLATION_ROWS))
    ablate.add_argument("--force", action="store_true")
    ablate.set_defaults(func=cmd_ablate)

    sweep = sub.add_parser("sweep", help="Dimension or loss-weight sweep")
    _common(sweep)
    sweep.add_argument("--data", type=Path, required=True)
    sweep.add_argument("--out", type=Path, required=True)
    sweep.add_argument("--kind", choices=("dims", "lambdas"), default="dims")
    sweep.add_argument("--force", action="store_true")
    sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    logger.debug("Running %s", args.command)
    try:
        return args.func(args)
    except NonFiniteLossError as exc:
        print(f"error: training aborted: {exc} (component: {exc.component})", file=sys.stderr)
        return EXIT_NON_FINITE
    except (SentinelError, ValueError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USER_ERROR


if __name__ == "__main__":
    sys.exit(main())
