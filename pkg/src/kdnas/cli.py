"""``kdnas`` command line: latency tables, search, distillation and reports.

Exit codes: 0 success, 2 usage or configuration error, 3 missing prerequisite
artifact (latency table), 4 runtime failure.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from dataclasses import replace

from .config import echo_config, load_config
from .exceptions import CalibrationFailed, ConfigMismatch, ConfigurationError, InputError, KDNASError
from .space import parse_state

EXIT_OK, EXIT_USAGE, EXIT_MISSING, EXIT_RUNTIME = 0, 2, 3, 4

log = logging.getLogger("kdnas")


class MissingArtifact(KDNASError):
    pass


def _write_csv(path, rows, header):
    with open(path, "w", newline="") as fh:
        w = csv.DictWriter(fh, header, extrasaction="ignore")
        w.writeheader()
        w.writerows(rows)


def _load_table(cfg):
    from .latency import LatencyTable
    path = cfg.latency_path()
    if not path.exists():
        raise MissingArtifact(f"latency table {path} not found; run `kdnas latency-table --config ...` first")
    return LatencyTable.load(path)


def _search_evaluator(cfg, table, space):
    from .engine import MiniKDEvaluator, surrogate_landscape
    s = cfg.search
    params = s.reward_params(table.teacher_latency)
    if s.mode == "surrogate":
        return surrogate_landscape(space, s.surrogate_kind, s.seed, table, params)
    corpus = cfg.build_corpus()
    teacher = cfg.build_teacher(corpus)
    return MiniKDEvaluator(teacher, corpus, table, s.proxy_fraction, s.proxy_epochs, s.seed, cfg.kd)


def _evaluator_hash(cfg, evaluator, space):
    extra = {"space": space.to_dict(), "evaluator": evaluator.describe()}
    if cfg.search.mode == "real_kd":
        extra.update(model=vars(cfg.model), corpus=vars(cfg.corpus))
    return extra


def cmd_latency_table(cfg, args):
    from .latency import analytic_table, build_table
    space = cfg.build_space()
    teacher = cfg.model.teacher_state()
    path = cfg.latency_path()
    path.parent.mkdir(parents=True, exist_ok=True)
    lat = cfg.latency
    if lat.source == "analytic":
        table = analytic_table(space, teacher, lat.teacher_latency_ms or 64.98, lat.seq_len)
        table.save(path)
        print(f"wrote analytic latency table with {len(table)} entries to {path}")
        return EXIT_OK
    # measurement is serialized by construction: no evaluation pool exists here
    table = build_table(space, teacher, path, lat.seq_len, lat.n_samples, lat.n_runs, lat.seed,
                        cfg.model.vocab_size)
    print(f"measured {table.measured} new entries; table has {len(table)} entries at {path}")
    if table.missing:
        print(f"{len(table.missing)} states failed; see {table.sidecar(path)}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def cmd_search(cfg, args):
    from .engine import Search
    table = _load_table(cfg)
    space = cfg.build_space()
    s_cfg = cfg.search if args.jobs is None else replace(cfg.search, jobs=args.jobs)
    evaluator = _search_evaluator(cfg, table, space)
    out = cfg.output_path()
    search = Search(s_cfg, space, evaluator, out, _evaluator_hash(cfg, evaluator, space))
    resumed = search.episode
    search.run(args.stop_after)
    search.write_reports(out)
    print(f"episodes {resumed + 1}..{search.episode} done (resumed after {resumed})")
    for i, r in enumerate(search.top_k(), 1):
        print(f"top{i}: {r.state}  reward={r.reward:.6f} loss={r.loss:.6f} latency_ms={r.latency_ms:.4f}")
    return EXIT_OK


def _state_arg(text, space=None):
    return parse_state(text, space)


def cmd_distill(cfg, args):
    from .checkpoint import save_model
    from .distill import run_kd
    state = _state_arg(args.state)
    corpus = cfg.build_corpus()
    teacher = cfg.build_teacher(corpus)
    student, history = run_kd(teacher, state, corpus, cfg.kd)
    out = cfg.output_path() / "distill" / str(state).replace(",", "_")
    out.mkdir(parents=True, exist_ok=True)
    save_model(student, out / "student.bin", {"seed": cfg.kd.seed})
    history.to_csv(out / "losses.csv")
    print(f"{len(history)} steps; final loss {history.losses[-1] if len(history) else float('nan'):.6f}; "
          f"wrote {out}")
    return EXIT_OK


def cmd_mini_kd(cfg, args):
    from .distill import mini_kd_detail
    state = _state_arg(args.state)
    corpus = cfg.build_corpus()
    teacher = cfg.build_teacher(corpus)
    s = cfg.search
    res = mini_kd_detail(teacher, state, corpus, s.proxy_fraction, s.proxy_epochs, s.seed, cfg.kd)
    out = cfg.output_path()
    report = {"state": str(state), "initial_heldout_loss": res.initial_loss,
              "final_heldout_loss": res.final_loss, "n_train": res.n_train, "n_heldout": res.n_heldout}
    (out / f"mini_kd_{str(state).replace(',', '_')}.json").write_text(json.dumps(report, indent=2))
    print(json.dumps(report))
    return EXIT_OK


def cmd_compare_mappings(cfg, args):
    from .distill import compare_mappings
    corpus = cfg.build_corpus()
    teacher = cfg.build_teacher(corpus)
    state = _state_arg(args.state)
    rows = compare_mappings(teacher, state, corpus, cfg.kd, cfg.compare.seeds, cfg.compare.strategies)
    path = cfg.output_path() / "compare_mappings.csv"
    _write_csv(path, rows, ["strategy", "seed", "heldout_loss", "mean", "std"])
    print(f"wrote {len(rows)} rows to {path}")
    return EXIT_OK


def cmd_random_baseline(cfg, args):
    from .engine import random_baseline
    table = _load_table(cfg)
    space = cfg.build_space()
    evaluator = _search_evaluator(cfg, table, space)
    params = cfg.search.reward_params(table.teacher_latency)
    stats = random_baseline(space, cfg.baseline.n_per_seed, cfg.baseline.seeds, evaluator, params)
    # same hash the search logs, so baseline and search provably share an evaluator
    h = cfg.search.config_hash(_evaluator_hash(cfg, evaluator, space))
    rows = [{**s.as_row(), "config_hash": h} for s in stats]
    path = cfg.output_path() / "random_baseline.csv"
    _write_csv(path, rows, ["seed", "mean_loss", "std_loss", "mean_latency_ms", "std_latency_ms",
                            "mean_reward", "std_reward", "states", "config_hash"])
    for r in rows:
        print(f"seed {r['seed']}: loss={r['mean_loss']:.6f} latency_ms={r['mean_latency_ms']:.4f} "
              f"reward={r['mean_reward']:.6f}")
    return EXIT_OK


def cmd_calibrate_proxy(cfg, args):
    from .distill import calibrate_proxy
    c = cfg.calibration
    corpus = cfg.build_corpus()
    teacher = cfg.build_teacher(corpus)
    probes = [parse_state(s) for s in c.probe_states]
    path = cfg.output_path() / "calibration.csv"
    header = ["fraction", "epochs", "cost", "spearman", "accepted"]
    try:
        res = calibrate_proxy(teacher, probes, [tuple(p) for p in c.candidates], tuple(c.reference),
                              c.min_rank_correlation, corpus, c.seed, cfg.kd)
    except CalibrationFailed as exc:
        _write_csv(path, exc.table, header)
        raise
    _write_csv(path, res.table, header)
    print(f"chosen proxy: fraction={res.chosen[0]} epochs={res.chosen[1]}; table at {path}")
    return EXIT_OK


COMMANDS = {
    "latency-table": (cmd_latency_table, "build or extend the latency lookup table"),
    "search": (cmd_search, "run or resume the architecture search"),
    "distill": (cmd_distill, "distil one student architecture over the full corpus"),
    "mini-kd": (cmd_mini_kd, "proxy distillation of one state, held-out loss"),
    "compare-mappings": (cmd_compare_mappings, "held-out loss per layer-mapping strategy"),
    "random-baseline": (cmd_random_baseline, "score uniformly sampled states with the search evaluator"),
    "calibrate-proxy": (cmd_calibrate_proxy, "pick the cheapest rank-preserving proxy setting"),
}


def build_parser():
    parser = argparse.ArgumentParser(prog="kdnas", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, (_, help_text) in COMMANDS.items():
        p = sub.add_parser(name, help=help_text)
        p.add_argument("--config", required=True, help="JSON run configuration")
        p.add_argument("--set", action="append", default=[], metavar="KEY.PATH=VALUE",
                       help="override a config field (repeatable)")
        if name in ("distill", "mini-kd", "compare-mappings"):
            p.add_argument("state", help='student architecture "L,A,H,F,act"')
        if name == "search":
            p.add_argument("--jobs", type=int, default=None, help="concurrent candidate evaluations")
            p.add_argument("--stop-after", type=int, default=None,
                           help="stop once this many episodes are logged (resume later)")
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    handler = COMMANDS[args.command][0]
    try:
        cfg = load_config(args.config, args.set)
        if args.command == "latency-table":
            cfg.search = replace(cfg.search, jobs=1)
        out = cfg.output_path()
        echo_config(cfg, out, f"effective_config.{args.command}.json")
        return handler(cfg, args)
    except (ConfigurationError, InputError, ConfigMismatch) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except MissingArtifact as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except (KDNASError, OSError, FloatingPointError, ValueError) as exc:
        print(f"runtime failure: {exc}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
