"""Command-line entry point: ``promptcl {pretrain,run,ablate,report,gradcheck,config}``."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import List, Optional

from . import __version__
from .serialization import CheckpointError
from .bench import CacheError, ResultCollisionError, SanityGateError
from .config import ConfigError, ExperimentConfig, dump_config, load_config


def _config(args) -> ExperimentConfig:
    if args.config is None:
        cfg = ExperimentConfig()
        return cfg if args.seed is None else cfg.with_seed(args.seed)
    return load_config(args.config, seed=args.seed)


def _seeds(text: str) -> List[int]:
    if "-" in text and "," not in text:
        lo, hi = text.split("-")
        return list(range(int(lo), int(hi) + 1))
    return [int(s) for s in text.split(",")]


def cmd_config(args) -> int:
    text = dump_config(_config(args))
    if args.out:
        Path(args.out).write_text(text)
    else:
        sys.stdout.write(text)
    return 0


def cmd_pretrain(args) -> int:
    from .bench import get_backbone, linear_probe_accuracy
    from .data import generate_synthetic

    cfg = _config(args)
    data = generate_synthetic(cfg.synthetic)
    backbone, report, hit = get_backbone(cfg, args.cache, data)
    probe = linear_probe_accuracy(backbone, data[1])
    print(json.dumps({"cache_hit": hit, "backbone_hash": backbone.content_hash(), **report,
                      "linear_probe_acc": probe, "stream_chance": 1.0 / cfg.synthetic.num_stream_classes},
                     indent=2, sort_keys=True))
    return 0


def cmd_run(args) -> int:
    from .bench import run_experiment

    res = run_experiment(_config(args), args.out, args.cache, reuse=args.reuse)
    s = res.summary
    print(f"{res.path}")
    print(f"last {s['last']:.4f}  avg {s['avg']:.4f}  ff {s['ff']:.4f}  task_acc {s['task_acc']:.4f}  "
          f"til_last {s['til_last']:.4f}")
    return 0


def cmd_ablate(args) -> int:
    from .bench import run_ablation_matrix

    variants = args.variants.split(",") if args.variants else None
    res = run_ablation_matrix(_config(args), _seeds(args.seeds), variants, args.out, args.cache,
                              jobs=args.jobs, reuse=not args.fresh)
    _print_ablation(res.summary, res.checks)
    return 0 if res.all_passed else 1


def _print_ablation(summary, checks) -> None:
    def fmt(v):
        return "   -  " if v is None else f"{100 * v:6.2f}"

    print(f"{'variant':<10} {'seeds':>5} {'last':>6} {'avg':>6} {'ff':>6} {'task':>6} {'fixed':>6}")
    for s in summary:
        print(f"{s['variant']:<10} {s['n_seeds']:>5} {fmt(s['last'])} {fmt(s['avg'])} {fmt(s['ff'])} "
              f"{fmt(s['task_acc'])} {fmt(s['fixed_prompt_last'])}")
    for c in checks:
        print(f"{'PASS' if c['passed'] else 'FAIL'}  {c['check']}  [{c['detail']}]")


def cmd_report(args) -> int:
    """Re-emit a run's report from its final checkpoint, or re-aggregate an ablation directory."""
    from .bench import directional_checks, read_rows, result_hash, summarize_rows, write_ablation
    from .evaluation import emit_report
    from .trainer import load_checkpoint

    out = Path(args.out)
    if (out / "ablation_runs.csv").exists():
        rows = read_rows(out / "ablation_runs.csv")
        previous = out / "ablation_summary.csv"
        til = not previous.exists() or any(line.startswith("til,") for line in previous.read_text().splitlines())
        summary = summarize_rows(rows, til=til)
        checks = directional_checks(rows, summary)
        write_ablation(out, rows, summary, checks)
        _print_ablation(summary, checks)
        return 0
    if not (out / "final.ckpt").exists():
        print(f"error: {out} is neither a run directory nor an ablation directory", file=sys.stderr)
        return 2
    manifest = out / "manifest.json"
    expected = json.loads(manifest.read_text())["result_hash"] if manifest.exists() else result_hash(out)
    state, _ = load_checkpoint(out / "final.ckpt")
    summary = emit_report(state.results, out, logs=state.logs, metrics=state.metrics)
    print(json.dumps(summary, indent=2, sort_keys=True))
    if result_hash(out) != expected:
        print("warning: re-emitted report does not match the recorded result hash", file=sys.stderr)
        return 1
    return 0


def cmd_gradcheck(args) -> int:
    from .gradcheck import run_suite

    ok, results = run_suite(seed=args.seed or 0)
    for k, v in results.items():
        print(f"{k:<28} {v:.3e}")
    print("PASS" if ok else "FAIL")
    return 0 if ok else 1


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="promptcl", description="Prompt-based class-incremental learning bench.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    p.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_default="runs"):
        sp.add_argument("--config", help="YAML experiment config (defaults apply when omitted)")
        sp.add_argument("--seed", type=int, help="override the config's seed")
        sp.add_argument("--cache", help="backbone cache directory (env PROMPTCL_CACHE)")
        sp.add_argument("--out", default=out_default, help="output directory")
        return sp

    sp = common(sub.add_parser("config", help="print the fully resolved config"), out_default=None)
    sp.set_defaults(func=cmd_config)
    common(sub.add_parser("pretrain", help="pretrain or load the cached backbone")).set_defaults(func=cmd_pretrain)
    sp = common(sub.add_parser("run", help="one continual-learning run"))
    sp.add_argument("--reuse", action="store_true", help="return an existing finished run without retraining")
    sp.set_defaults(func=cmd_run)
    sp = common(sub.add_parser("ablate", help="variant x seed grid with directional checks"))
    sp.add_argument("--seeds", default="0-4", help="e.g. 0-4 or 0,2,7")
    sp.add_argument("--variants", help="comma-separated subset (default: component grid, probes and the derived til row)")
    sp.add_argument("--jobs", type=int, default=1, help="parallel worker processes")
    sp.add_argument("--fresh", action="store_true", help="retrain runs that already exist")
    sp.set_defaults(func=cmd_ablate)
    common(sub.add_parser("report", help="re-emit a run or ablation report from disk")).set_defaults(func=cmd_report)
    sp = sub.add_parser("gradcheck", help="finite-difference suite for the objectives")
    sp.add_argument("--seed", type=int, default=0)
    sp.set_defaults(func=cmd_gradcheck)
    return p


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return 2
    except (CacheError, ResultCollisionError, SanityGateError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
