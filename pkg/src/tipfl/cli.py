"""Command-line entry point: ``tipfl train | attack | explain | report``.

Exit codes: 0 success, 1 configuration or usage error, 2 runtime error.
"""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import data as D
from .attack import ATTACK_HEADER
from .config import ConfigError, RunConfig, load_config
from .experiments import EXPLAIN_HEADER, run_attacks, run_explain
from .fl import load_checkpoint, run_federation, save_checkpoint
from .model import check_params, init_params
from .report import write_report
from .tensor import RngStream

log = logging.getLogger("tipfl")

EXIT_OK, EXIT_CONFIG, EXIT_RUNTIME = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _prepare(cfg: RunConfig, kinds):
    try:
        train, test = cfg.datasets()
        spec = cfg.model_spec(train)
        if any(k in ("tip", "apg") for k in kinds):
            cfg.perturbation().targets(spec)  # validates target layer ids
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    return train, test, spec


def _out(cfg: RunConfig, override: str | None) -> Path:
    out = Path(override or cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(path: str, spec):
    if not Path(path).is_file():
        raise ConfigError(f"model checkpoint not found: {path}")
    params = load_checkpoint(path)
    try:
        check_params(params, spec)
    except ValueError as exc:
        raise ConfigError(f"{path}: checkpoint does not match the configured model ({exc})") from exc
    return params


def cmd_train(args) -> int:
    cfg = load_config(args.config, seed=args.seed, out_dir=args.out)
    train, test, spec = _prepare(cfg, [cfg.defense.kind])
    out = _out(cfg, None)
    (out / "config_snapshot.json").write_text(cfg.snapshot())
    init = init_params(spec, RngStream(cfg.seed).child("init"), cfg.model.init_scale)
    _, params = run_federation(cfg.fl_config(), spec, train, test, init=init, out_dir=out)
    save_checkpoint(out / "model.tipm", params)
    return EXIT_OK


def cmd_attack(args) -> int:
    if args.targets < 1:
        raise UsageError("--targets must be >= 1")
    cfg = load_config(args.config, out_dir=args.out)
    kinds = cfg.attack.defenses or ["none", cfg.defense.kind]
    train, test, spec = _prepare(cfg, kinds)
    params = _load_model(args.model, spec)
    if args.targets > len(test):
        raise UsageError(f"--targets {args.targets} exceeds the {len(test)} held-out samples")
    policies = [cfg.policy(k) for k in dict.fromkeys(kinds)]
    targets = test.subset(range(args.targets))
    results = run_attacks(params, spec, targets, policies, cfg.attack_config(), cfg.train.learning_rate, cfg.seed)
    out = _out(cfg, None)
    images = out / "images"
    images.mkdir(exist_ok=True)
    for r in results:
        D.write_image(images / f"target{r.target_id}_original.ppm", r.original)
        D.write_image(images / f"target{r.target_id}_{r.defense}_recon.ppm", r.reconstruction)
    D.write_csv(out / "attack.csv", [r.row() for r in results], ATTACK_HEADER)
    return EXIT_OK


def cmd_explain(args) -> int:
    if args.samples < 1:
        raise UsageError("--samples must be >= 1")
    cfg = load_config(args.config, out_dir=args.out)
    train, test, spec = _prepare(cfg, cfg.explain.defenses)
    params = _load_model(args.model, spec)
    layer = cfg.explain.layer
    if layer is not None and layer not in spec.conv_layers():
        raise ConfigError(f"explain.layer {layer!r} is not a conv layer")
    policies = [cfg.policy(k) for k in dict.fromkeys(cfg.explain.defenses)]
    rows = run_explain(
        params, spec, test, train, policies, args.samples, cfg.seed, layer, cfg.explain.skip_empty_reference
    )
    out = _out(cfg, None)
    maps = out / "heatmaps"
    maps.mkdir(exist_ok=True)
    for r in rows:
        D.write_image(maps / f"sample{r.sample_id}_none.pgm", r.reference.values, fmt="pgm")
        D.write_image(maps / f"sample{r.sample_id}_{r.defense}.pgm", r.heatmap.values, fmt="pgm")
    D.write_csv(out / "explain.csv", [r.row() for r in rows], EXPLAIN_HEADER)
    return EXIT_OK


def cmd_report(args) -> int:
    missing = [d for d in args.run if not (Path(d) / "rounds.csv").is_file()]
    if missing:
        raise UsageError(f"no rounds.csv in {', '.join(missing)}")
    write_report(args.run, args.out)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="tipfl", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    t = sub.add_parser("train", help="run a federated training experiment")
    t.add_argument("--config", required=True)
    t.add_argument("--seed", type=int)
    t.add_argument("--out")
    t.set_defaults(func=cmd_train)

    a = sub.add_parser("attack", help="gradient-inversion attack on single-image client updates")
    a.add_argument("--config", required=True)
    a.add_argument("--model", required=True)
    a.add_argument("--targets", type=int, required=True)
    a.add_argument("--out")
    a.set_defaults(func=cmd_attack)

    e = sub.add_parser("explain", help="Grad-CAM heatmaps under each defense vs. no defense")
    e.add_argument("--config", required=True)
    e.add_argument("--model", required=True)
    e.add_argument("--samples", type=int, required=True)
    e.add_argument("--out")
    e.set_defaults(func=cmd_explain)

    r = sub.add_parser("report", help="merge run directories into summary.csv and accuracy.svg")
    r.add_argument("--run", nargs="+", required=True)
    r.add_argument("--out", default="report")
    r.set_defaults(func=cmd_report)
    return p


def main(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"tipfl: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, UsageError) as exc:
        print(f"tipfl: error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure past validation is a runtime error
        print(f"tipfl: runtime error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
