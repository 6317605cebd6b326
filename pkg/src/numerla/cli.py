"""Command-line entry point: train, build-bank, synthesize-shield, run, report.

Settings come from three layers, later ones winning: built-in defaults, the
JSON config file given with ``--config`` (one section per subcommand plus a
shared ``sim`` section), and ``--set section.key=value`` overrides.

Exit status: 0 success, 2 configuration error, 3 runtime failure, 4 when
``report`` finds a failed ordering check.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys

import numpy as np

from . import env as E
from . import harness as H
from . import persist
from .belief import Belief, ModeTransitionModel
from .cola import build_sample_bank
from .policy import TrainConfig, resolve_modes, train_meta
from .ssc import SafetyAssessor, baseline_ssc, default_grammar, ssca_update

log = logging.getLogger("numerla")

EXIT_CONFIG, EXIT_RUNTIME, EXIT_CHECK = 2, 3, 4
OUTPUT_ENV = "NUMERLA_OUTPUT_DIR"

DEFAULTS = {
    "sim": {},
    "train": {},
    "bank": {"episodes_per_mode": 300, "K": 50, "seed": 1, "modes": ["Compliant", "Jaywalk"]},
    "shield": {"new_modes": [], "K": 10, "M_eval": 64, "exact": False, "seed": 2,
               "d_safe": 3.0, "horizon": 10},
    "run": {"methods": list(H.METHODS), "scenarios": list(H.SCENARIOS),
            "gaps": list(E.STANDARD_GAPS), "episodes": 1000, "seed": 0, "K": 50, "M": 64,
            "delta": 0.5, "cadence": 5, "n_iter": 1, "dispatch": "belief"},
    "report": {},
}


class CliError(E.ConfigError):
    pass


def parse_value(text):
    try:
        return json.loads(text)
    except json.JSONDecodeError:
        return text


def load_config(path, overrides):
    """Merge defaults, the config file and ``key=value`` overrides."""
    cfg = {k: dict(v) for k, v in DEFAULTS.items()}
    if path:
        try:
            with open(path) as fh:
                doc = json.load(fh)
        except FileNotFoundError:
            raise CliError(f"config file {path} not found") from None
        except json.JSONDecodeError as exc:
            raise CliError(f"config file {path} is not valid JSON: {exc}") from None
        if not isinstance(doc, dict):
            raise CliError("config file must hold a JSON object")
        for section, values in doc.items():
            if section not in cfg or not isinstance(values, dict):
                raise CliError(f"unknown or malformed config section {section!r}")
            cfg[section].update(values)
    for item in overrides or ():
        key, sep, raw = item.partition("=")
        section, dot, name = key.partition(".")
        if not sep or not dot or not name:
            raise CliError(f"override {item!r} must look like section.key=value")
        if section not in cfg:
            raise CliError(f"unknown config section {section!r}")
        cfg[section][name] = parse_value(raw)
    return cfg


def _sim(cfg):
    return E.SimConfig.from_dict(cfg["sim"])


def _out(args, name):
    return os.path.join(args.out, name)


def _modes(entries):
    """Mode names from the built-in registry, or full mode objects."""
    return [E.Mode.from_dict(m) if isinstance(m, dict) else resolve_modes([m])[0] for m in entries]


# ---------------------------------------------------------------------------
# subcommands


def cmd_train(args, cfg):
    tc = TrainConfig.from_dict(cfg["train"])
    params = train_meta(tc, _sim(cfg))
    path = _out(args, "checkpoint.json")
    persist.save_checkpoint(path, params, seed=tc.seed)
    print(f"checkpoint {params.version} -> {path}")


def cmd_build_bank(args, cfg):
    params = persist.load_checkpoint(args.checkpoint)
    bc = cfg["bank"]
    bank = build_sample_bank(params, _modes(bc["modes"]), int(bc["episodes_per_mode"]),
                             int(bc["K"]), int(bc["seed"]), _sim(cfg))
    path = _out(args, "bank.npz")
    persist.save_bank(path, bank)
    print(f"bank K={bank.K} counts={bank.counts} -> {path}")


def cmd_synthesize_shield(args, cfg):
    params = persist.load_checkpoint(args.checkpoint)
    bank = persist.load_bank(args.bank, params.version)
    sc = cfg["shield"]
    f = persist.load_ssc(args.kb) if args.kb else baseline_ssc()
    new_modes = [E.Mode.from_dict(m) for m in sc["new_modes"]]
    if new_modes:
        assessor = SafetyAssessor(float(sc["d_safe"]), int(sc["horizon"]), _sim(cfg))
        b = Belief(np.full(len(new_modes), 1.0 / len(new_modes)), tuple(m.name for m in new_modes))
        rng = np.random.default_rng(int(sc["seed"]))
        f = ssca_update(f, new_modes, bank, params, b, int(sc["K"]), assessor, default_grammar(),
                        rng, int(sc["M_eval"]), bool(sc["exact"]),
                        known_modes=(E.COMPLIANT, E.JAYWALK))
    path = _out(args, "kb.json")
    persist.save_ssc(path, f)
    print(f"knowledge base v{f.version} with {len(f.cases)} case(s) -> {path}")


def _specs(cfg):
    rc = dict(cfg["run"])
    sim = _sim(cfg)
    common = {k: rc[k] for k in ("K", "M", "delta", "cadence", "n_iter", "dispatch") if k in rc}
    for k in ("window", "baseline", "align", "ssc_version"):
        if k in rc:
            common[k] = rc[k]
    specs = []
    for method in rc["methods"]:
        for scenario in rc["scenarios"]:
            for gap in rc["gaps"]:
                specs.append(H.ScenarioSpec(scenario, float(gap), int(rc["episodes"]), method,
                                            seed=int(rc["seed"]), sim=sim, **common))
    return specs


def cmd_run(args, cfg):
    specs = _specs(cfg)
    params = persist.load_checkpoint(args.checkpoint)
    needs_bank = any(s.method != "RL" for s in specs)
    needs_kb = any(s.method == "NUMERLA" for s in specs)
    if needs_bank and not args.bank:
        raise CliError("COLA and NUMERLA runs need --bank")
    if needs_kb and not args.kb:
        raise CliError("NUMERLA runs need --kb")
    bank = persist.load_bank(args.bank, params.version) if args.bank else None
    kb = persist.load_ssc(args.kb) if args.kb else None
    if bank is not None and any(s.K != bank.K for s in specs if s.method != "RL"):
        raise CliError(f"run.K must equal the bank's K={bank.K}")
    art = H.Artifacts(params, bank, kb, ModeTransitionModel.stationary((E.COMPLIANT, E.JAYWALK)))
    progress = (lambda s: log.info("finished %s", s.cell)) if args.verbose else None
    summary, records = H.run_experiment(specs, art, jobs=args.jobs, progress=progress)
    H.save_metrics(_out(args, "metrics.json"), summary)
    H.write_metrics_csv(_out(args, "metrics.csv"), summary)
    H.write_episodes_csv(_out(args, "episodes.csv"), records)
    H.write_long_csv(_out(args, "metrics_long.csv"), summary)
    for row in summary.rows():
        print(f"{row['method']:8s} {row['scenario']:11s} {row['gap_m']:4g}  "
              f"reward {row['mean_reward']:8.3f} +- {row['std']:.3f}  "
              f"collision {row['collision_rate']:.4f}  (n={row['episodes']})")
    failures = sum(s.failures for s in summary.cells.values())
    if failures:
        log.error("%d episode(s) failed", failures)
        return EXIT_RUNTIME
    return 0


def cmd_report(args, cfg):
    summaries = [H.load_metrics(p) for p in args.metrics]
    prefix = _out(args, "report")
    report = H.compare_report(summaries, prefix)
    for c in report["checks"]:
        print(f"[{c['status']:4s}] {c['scenario']} {c['gap_m']:g} m: {c['check']} "
              f"({c['left']:.4g} vs {c['right']:.4g})")
    print(f"report -> {prefix}.csv, {prefix}.json")
    return EXIT_CHECK if report["failed"] else 0


COMMANDS = {"train": cmd_train, "build-bank": cmd_build_bank,
            "synthesize-shield": cmd_synthesize_shield, "run": cmd_run, "report": cmd_report}


def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("-c", "--config", help="JSON config file with per-subcommand sections")
    common.add_argument("--set", dest="overrides", action="append", default=[],
                        metavar="SECTION.KEY=VALUE", help="override a config value (repeatable)")
    common.add_argument("-o", "--out", default=None,
                        help=f"output directory (default ${OUTPUT_ENV} or ./numerla-out)")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="numerla", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, metavar="COMMAND")
    sub.add_parser("train", parents=[common], help="offline meta-training of the policy")
    p = sub.add_parser("build-bank", parents=[common], help="collect per-mode lookahead windows")
    p.add_argument("--checkpoint", required=True)
    p = sub.add_parser("synthesize-shield", parents=[common],
                       help="extend the knowledge base to cover new modes")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bank", required=True)
    p.add_argument("--kb", help="existing knowledge base (default: the baseline one)")
    p = sub.add_parser("run", parents=[common], help="evaluate methods over the scenario grid")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--bank")
    p.add_argument("--kb")
    p.add_argument("--jobs", type=int, default=1, help="worker processes for episodes")
    p = sub.add_parser("report", parents=[common], help="compare metrics files")
    p.add_argument("metrics", nargs="+", help="metrics.json files from run")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    args.out = args.out or os.environ.get(OUTPUT_ENV) or "numerla-out"
    try:
        cfg = load_config(args.config, args.overrides)
        if getattr(args, "jobs", 1) < 1:
            raise CliError("--jobs must be >= 1")
        status = COMMANDS[args.command](args, cfg)
    except E.ConfigError as exc:
        print(f"numerla: configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as exc:  # noqa: BLE001 - mapped to the runtime exit status
        log.debug("runtime failure", exc_info=True)
        print(f"numerla: runtime failure: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_RUNTIME
    return status or 0


if __name__ == "__main__":
    sys.exit(main())
