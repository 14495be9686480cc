"""Command-line entry point.

    agsdfl run --config exp.ini --out runs/a [--seed 3]
    agsdfl sweep --config exp.ini --param fl.sample_ratio --values 0.1,0.25,0.5 --out runs/sweep
    agsdfl demo-bias --config exp.ini --out runs/bias [--ood]

Exit status is 0 on success, 1 for configuration problems and 2 when a run
fails part way.
"""
from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from pathlib import Path

from . import __version__
from . import config as cfgmod
from . import harness

SEED_ENV = "AGSD_SEED"

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_RUNTIME = 2


def resolve_config(path, seed: int | None = None) -> cfgmod.FlConfig:
    """Load a config and apply seed overrides: ``--seed`` beats ``AGSD_SEED``."""
    cfg = cfgmod.load(path)
    env = os.environ.get(SEED_ENV)
    if seed is None and env not in (None, ""):
        try:
            seed = int(env)
        except ValueError:
            raise cfgmod.ConfigError("experiment.seed", f"{SEED_ENV}={env!r} is not an integer") from None
    if seed is not None:
        cfg = cfg.with_value("experiment.seed", seed)
    return cfg


def manifest(cfg: cfgmod.FlConfig, out_dir) -> dict:
    return {
        "config": cfg.to_flat(),
        "out_dir": str(out_dir),
        "version": __version__,
        "digest": cfg.digest(),
    }


def _dump_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def write_run(cfg: cfgmod.FlConfig, out_dir) -> harness.ExperimentResult:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = harness.run_experiment(cfg)
    harness.write_rounds_csv(out / "rounds.csv", result.records)
    harness.write_clients_csv(out / "clients.csv", result.records)
    _dump_json(out / "manifest.json", manifest(cfg, out))
    _dump_json(out / "summary.json", result.summary())
    return result


def cmd_run(config_path, out_dir, seed: int | None = None) -> int:
    cfg = resolve_config(config_path, seed)
    write_run(cfg, out_dir)
    return EXIT_OK


def parse_values(text: str) -> list:
    raw = [v.strip() for v in text.split(",") if v.strip()]
    if not raw:
        raise cfgmod.ConfigError("--values", "no values given")
    return [cfgmod.parse_literal(v) for v in raw]


def cmd_sweep(config_path, param: str, values, out_dir) -> int:
    base = resolve_config(config_path)
    if param not in cfgmod.known_keys():
        raise cfgmod.ConfigError(param, "unknown configuration key")
    values = parse_values(values) if isinstance(values, str) else list(values)
    # validate every point before running any of them
    cfgs = [base.with_value(param, v) for v in values]
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for i, (v, cfg) in enumerate(zip(values, cfgs)):
        res = write_run(cfg, out / f"{i:03d}_{_slug(v)}")
        rows.append((v, res.final_ca, res.final_asr))
    with open(out / "sweep_summary.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["value", "final_ca", "final_asr"])
        w.writerows(rows)
    _dump_json(out / "manifest.json", {**manifest(base, out), "param": param, "values": values})
    return EXIT_OK


def _slug(v) -> str:
    s = str(v)
    return "".join(c if c.isalnum() or c in "-._" else "_" for c in s) or "value"


def cmd_demo_bias(config_path, out_dir, ood: bool = False) -> int:
    cfg = resolve_config(config_path)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = harness.demo_bias(cfg, ood=ood or None)
    harness.write_bias_csv(out / "bias_trace.csv", rows)
    _dump_json(out / "manifest.json", {**manifest(cfg, out), "ood": bool(ood or cfg.bias.ood)})
    return EXIT_OK


class _Parser(argparse.ArgumentParser):
    # bad flags are configuration problems; argparse would otherwise exit 2
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_CONFIG, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="agsdfl", description="Federated backdoor attack and defense experiments.")
    p.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="run one experiment")
    r.add_argument("--config", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--seed", type=int, default=None)

    s = sub.add_parser("sweep", help="run one experiment per value of a parameter")
    s.add_argument("--config", required=True)
    s.add_argument("--param", required=True, help="dotted key, e.g. fl.sample_ratio")
    s.add_argument("--values", required=True, help="comma-separated values")
    s.add_argument("--out", required=True)

    b = sub.add_parser("demo-bias", help="trace the bias statistics of clean and poisoned models")
    b.add_argument("--config", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--ood", action="store_true", help="use out-of-distribution healing samples")
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            return cmd_run(args.config, args.out, args.seed)
        if args.command == "sweep":
            return cmd_sweep(args.config, args.param, args.values, args.out)
        return cmd_demo_bias(args.config, args.out, args.ood)
    except cfgmod.ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - any failure after validation is a runtime error
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
