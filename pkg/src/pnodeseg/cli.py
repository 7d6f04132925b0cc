"""Command-line entry point: gen-data, train, attack-eval, gradcheck, run."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

import numpy as np

from .attacks import AttackSpec
from .config import Config, ConfigError
from .data import generate_dataset, load_dataset, shifted_domain, source_domain, split_train_test
from .gradcheck import TOLERANCE, gradient_suite
from .harness import build_model, evaluate, run_experiment, train_config_from, train_sat, train_standard
from .model import load_checkpoint, save_checkpoint

log = logging.getLogger("pnodeseg")

ATTACK_DEFAULTS = {"fgsm": (0.02, 1), "pgd": (0.01, 10), "smia": (0.04, 10)}


def _load_config(path) -> Config:
    return Config.from_file(path) if path else Config({})


def cmd_gen_data(args) -> int:
    classes = tuple(int(c) for c in args.classes.split(","))
    domain = source_domain(classes) if args.domain == "source" else shifted_domain(classes)
    manifest = generate_dataset(domain, args.n, classes, seed=args.seed, out_dir=args.out)
    print(f"wrote {args.n} images to {manifest.parent} ({args.domain} domain)")
    return 0


def cmd_train(args) -> int:
    cfg = _load_config(args.config)
    if args.episodes is not None:
        cfg.values["train.episodes"] = str(args.episodes)
    dataset = load_dataset(args.data)
    train_view, _ = split_train_test(dataset, cfg.get_int_list("data.base_classes"),
                                     cfg.get_int_list("data.novel_classes"))
    model = build_model(cfg, use_ode=args.model == "pnode", seed=args.seed)
    tcfg = train_config_from(cfg, seed=args.seed, sat=args.sat)
    (train_sat if args.sat else train_standard)(model, train_view, tcfg)
    save_checkpoint(model, args.out)
    label = f"{args.model}{'+sat' if args.sat else ''}"
    print(f"trained {label} (seed {args.seed}) -> {args.out}")
    return 0


def cmd_attack_eval(args) -> int:
    model = load_checkpoint(args.checkpoint)
    cfg = _load_config(args.config)
    dataset = load_dataset(args.data)
    _, test_view = split_train_test(dataset, cfg.get_int_list("data.base_classes"),
                                    cfg.get_int_list("data.novel_classes"))
    attacks = []
    if args.attack != "clean":
        eps_default, iters_default = ATTACK_DEFAULTS[args.attack]
        attacks.append(AttackSpec(
            family=args.attack,
            epsilon=args.eps if args.eps is not None else eps_default,
            step_size=args.step,
            n_iters=args.iters if args.iters is not None else iters_default,
            target=args.target,
            smia_lambda=args.smia_lambda,
        ))
    report = evaluate(model, test_view, attacks, n_episodes=args.episodes,
                      n_repeats=args.repeats, seed=args.seed,
                      n_way=cfg.get_int("episode.n_way"), k_shot=cfg.get_int("episode.k_shot"),
                      n_query=cfg.get_int("episode.n_query"))
    for row in report.rows:
        print(f"{row.attack:6s} target={row.target:7s} mean_dice={row.mean_dice:.4f} "
              f"std={row.std_dice:.4f} episodes={row.episode_count}")
    if args.out:
        from .report import write_results_csv
        rows = [{"model": Path(args.checkpoint).stem, "domain": "custom", "attack": r.attack,
                 "target": r.target, "shots": cfg.get_int("episode.k_shot"),
                 "mean_dice": r.mean_dice, "std_dice": r.std_dice} for r in report.rows]
        write_results_csv(rows, args.out)
        print(f"wrote {args.out}")
    return 0


def cmd_gradcheck(args) -> int:
    checks = gradient_suite(seed=args.seed)
    worst = 0.0
    for name, err in checks:
        status = "ok  " if err < TOLERANCE else "FAIL"
        print(f"{status} {name:28s} {err:.3e}")
        worst = max(worst, err)
    print(f"worst relative error: {worst:.3e} (tolerance {TOLERANCE:.0e})")
    return 0 if worst < TOLERANCE else 1


def cmd_run(args) -> int:
    summary = run_experiment(args.config)
    print(f"results: {summary['csv']}")
    for chart in summary["charts"]:
        print(f"chart:   {chart}")
    print(f"manifest: {summary['manifest']}")
    if summary["failures"]:
        for variant, why in summary["failures"].items():
            print(f"FAILED {variant}: {why}", file=sys.stderr)
        return 1
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="pnodeseg",
        description="Prototype few-shot segmentation lab: synthetic data, training, "
                    "adversarial evaluation, experiment reports.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic dataset")
    p.add_argument("--domain", choices=("source", "shifted"), required=True)
    p.add_argument("--n", type=int, required=True, help="number of images")
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True, help="output dataset directory")
    p.add_argument("--classes", default="1,2,3", help="comma-separated class ids")
    p.set_defaults(func=cmd_gen_data)

    p = sub.add_parser("train", help="train one model variant")
    p.add_argument("--model", choices=("pnode", "baseline"), required=True)
    p.add_argument("--sat", action="store_true", help="adversarial training (baseline only)")
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--out", required=True, help="checkpoint path")
    p.add_argument("--config", default=None, help="optional key = value config file")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--episodes", type=int, default=None, help="override train.episodes")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attack-eval", help="evaluate a checkpoint under an attack")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True, help="dataset directory")
    p.add_argument("--attack", choices=("clean", "fgsm", "pgd", "smia"), required=True)
    p.add_argument("--eps", type=float, default=None)
    p.add_argument("--iters", type=int, default=None)
    p.add_argument("--step", type=float, default=None)
    p.add_argument("--target", choices=("support", "query"), default="query")
    p.add_argument("--smia-lambda", type=float, default=1.0)
    p.add_argument("--episodes", type=int, default=50)
    p.add_argument("--repeats", type=int, default=2)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--config", default=None)
    p.add_argument("--out", default=None, help="optional CSV output path")
    p.set_defaults(func=cmd_attack_eval)

    p = sub.add_parser("gradcheck", help="finite-difference gradient verification")
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("run", help="full experiment from a config file")
    p.add_argument("config", help="path to key = value config file")
    p.set_defaults(func=cmd_run)
    return parser


def main(argv=None) -> int:
    logging.basicConfig(level=logging.INFO, format="%(levelname)s %(name)s: %(message)s")
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
