"""Command-line entry point: ``deformdet {gen,train,eval,bench,gradcheck}``."""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import fields
from pathlib import Path

from .data import SceneSpec, gen_dataset, load_dataset, save_dataset


def _flag(name: str) -> str:
    return "--" + name.replace("_", "-")


def _add_run_flags(parser):
    from .train import RunConfig

    for f in fields(RunConfig):
        if f.name in ("seed", "out_dir"):
            continue
        parser.add_argument(_flag(f.name), dest=f.name, type=type(f.default), default=None,
                            choices=f.metadata.get("choices"), help=f"[{f.metadata['section']}] default {f.default}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="deformdet", description=__doc__)
    sub = parser.add_subparsers(dest="command", metavar="{gen,train,eval,bench,gradcheck}")

    def common(p, out_default):
        p.add_argument("--out-dir", default=out_default, help="all outputs go here")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("-v", "--verbose", action="store_true")

    p = sub.add_parser("gen", help="generate a synthetic scene dataset")
    common(p, "data")
    p.add_argument("--n-images", type=int, default=1024)
    for f in fields(SceneSpec):
        if f.name in ("seed", "classes"):
            continue
        p.add_argument(_flag(f.name), dest=f.name, type=type(f.default), default=None)

    p = sub.add_parser("train", help="train a detector and log metrics per epoch")
    common(p, None)
    p.add_argument("--config", help="INI file; flags override its values")
    p.add_argument("--train-data", help="dataset directory (default: generated from the config)")
    p.add_argument("--val-data", help="dataset directory (default: generated from the config)")
    _add_run_flags(p)

    p = sub.add_parser("eval", help="compute AP of a checkpoint")
    common(p, "eval")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", help="dataset directory (default: the run's validation split)")

    p = sub.add_parser("bench", help="measure attention MACs over an image-size sweep")
    common(p, "bench")
    p.add_argument("--sizes", type=int, nargs="+", default=None)
    p.add_argument("--n-queries", type=int, default=30)
    p.add_argument("--d-model", type=int, default=64)
    p.add_argument("--n-heads", type=int, default=8)
    p.add_argument("--n-points", type=int, default=4)
    p.add_argument("--n-levels", type=int, default=4)

    p = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    common(p, "gradcheck")
    p.add_argument("--instances", type=int, default=20)
    return parser


def _cmd_gen(args) -> int:
    overrides = {f.name: getattr(args, f.name) for f in fields(SceneSpec)
                 if f.name not in ("seed", "classes") and getattr(args, f.name) is not None}
    spec = SceneSpec(seed=args.seed or 0, **overrides)
    dataset = gen_dataset(spec, args.n_images)
    root = save_dataset(dataset, args.out_dir)
    print(f"wrote {len(dataset)} images to {root}")
    return 0


def _cmd_train(args) -> int:
    from .train import RunConfig, train

    overrides = {f.name: getattr(args, f.name, None) for f in fields(RunConfig)}
    overrides["out_dir"] = args.out_dir
    overrides["seed"] = args.seed
    if args.config:
        config = RunConfig.from_ini(args.config, **overrides)
    else:
        config = RunConfig(**{k: v for k, v in overrides.items() if v is not None})
    train_set = load_dataset(args.train_data) if args.train_data else None
    val_set = load_dataset(args.val_data) if args.val_data else None
    _, rows = train(config, train_set, val_set)
    last = rows[-1]
    print(f"epoch {last.epoch}: loss {last.loss:.4f} AP {last.ap:.3f} AP50 {last.ap50:.3f} -> {config.out_dir}")
    return 0


def _cmd_eval(args) -> int:
    from .evaluation import write_jsonl
    from .train import evaluate, load_checkpoint

    model, config, epoch = load_checkpoint(args.checkpoint)
    if args.data:
        dataset = load_dataset(args.data)
    else:
        if config is None:
            raise SystemExit("checkpoint has no run config; pass --data")
        dataset = gen_dataset(config.scene_spec("val"), config.n_val)
    losses, summary, macs = evaluate(model, dataset)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    report = {"checkpoint": str(args.checkpoint), "epoch": epoch, "images": len(dataset), "losses": losses,
              "ap": summary.as_dict(), "macs_per_image": macs}
    (out / "ap.json").write_text(json.dumps(report, indent=1))
    write_jsonl(dataset.records(), out / "ground_truth.jsonl")
    print(json.dumps(report["ap"]))
    return 0


def _cmd_bench(args) -> int:
    from .attention import AttnConfig
    from .bench import DEFAULT_SIZES, benchmark, write_bench

    config = AttnConfig(n_heads=args.n_heads, d_model=args.d_model, n_points=args.n_points, n_levels=args.n_levels)
    result = benchmark(config, args.sizes or DEFAULT_SIZES, n_queries=args.n_queries, seed=args.seed or 0)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    write_bench(result, out / "bench.json")
    print(json.dumps(result["exponents"]), f"decoder spread {result['decoder_spread']:.3%}")
    return 0


def _cmd_gradcheck(args) -> int:
    from .gradcheck import format_results, run_suite

    results = run_suite(seed=args.seed or 0, n_instances=args.instances)
    text = format_results(results)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "gradcheck.txt").write_text(text + "\n")
    print(text)
    return 0 if all(r.passed for r in results) else 1


COMMANDS = {"gen": _cmd_gen, "train": _cmd_train, "eval": _cmd_eval, "bench": _cmd_bench,
            "gradcheck": _cmd_gradcheck}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:  # argparse reports usage errors with code 2
        return int(exc.code or 0)
    if args.command is None:
        parser.print_usage(sys.stderr)
        print("deformdet: error: a subcommand is required", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    if args.command == "train" and args.out_dir is None and not args.config:
        args.out_dir = "runs/default"
    return COMMANDS[args.command](args)


if __name__ == "__main__":
    sys.exit(main())
