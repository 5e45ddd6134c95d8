"""
Command-line front end.

Every command reads interactions, writes its artifacts plus ``manifest.json``
into the output directory, and exits 0 on success, 2 on a configuration error
and 1 on any other failure.  Settings come from an optional INI file
(``--config``) and are overridden by flags.
"""
from __future__ import annotations

import argparse
import configparser
import json
import logging
import os
import platform
import sys
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .baselines import VARIANT_SCHEMES, BaselineConfig, BaselineRanker, build_unified_graph
from .errors import CascRankError, ConfigError, DenseCapError
from .evaluation import (
    DEFAULT_K,
    CascadingRanker,
    bench_scalability,
    evaluate,
    leave_one_out_split,
    permute_sequences,
    prefix_ablation,
    sequence_table_rows,
    sweep,
)
from .graph import (
    build_behavior_graph,
    build_cascading_graph,
    canonical_scheme,
    ingest,
    ingest_files,
    write_index_map,
    write_log,
)
from .ranker import (
    DEFAULT_DENSE_CAP,
    RankParams,
    contraction_profile,
    convergence_diagnostics,
    objective_trajectory,
    rank,
)

_log = logging.getLogger("cascrank")

COMMANDS = ("ingest", "rank", "evaluate", "sweep", "permute", "bench", "diagnose")
VARIANTS = ("cascading",) + tuple(VARIANT_SCHEMES)


@dataclass
class RunConfig:
    mode: str
    data: str | None = None
    behavior_files: dict[str, str] = field(default_factory=dict)
    header: bool = False
    behaviors: list[str] | None = None
    sequence: list[str] | None = None
    target: str | None = None
    alpha: float = 0.3
    beta: float = 0.4
    epsilon: float = 1e-5
    max_iters: int = 200
    scheme: str = "symmetric"
    variant: str = "cascading"
    lambda_users: float = 0.15
    lambda_items: float = 0.15
    single_behavior: bool = False
    k: list[int] = field(default_factory=lambda: list(DEFAULT_K))
    jobs: int = 1
    output: str = "out"
    seed: int = 0
    users: list[str] = field(default_factory=list)
    exclude_seen: bool = False
    step: float = 0.1
    fractions: list[float] = field(default_factory=lambda: [0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0])
    queries: int = 32
    dense_cap: int = DEFAULT_DENSE_CAP

    def validate(self):
        if self.mode not in COMMANDS:
            raise ConfigError(f"unknown mode {self.mode!r}")
        if self.data is None and not self.behavior_files:
            raise ConfigError("no input: give --data or --behavior-file")
        if self.data is not None and self.behavior_files:
            raise ConfigError("give either --data or --behavior-file, not both")
        for path in [self.data, *self.behavior_files.values()]:
            if path is not None and not Path(path).is_file():
                raise ConfigError(f"input file not found: {path}")
        if self.variant not in VARIANTS:
            raise ConfigError(f"unknown variant {self.variant!r}")
        self.scheme = canonical_scheme(self.scheme)
        if self.sequence and self.target and self.sequence[-1] != self.target:
            raise ConfigError(f"sequence {'->'.join(self.sequence)} must end with target {self.target!r}")
        if any(k <= 0 for k in self.k) or not self.k:
            raise ConfigError("--k values must be positive")
        if self.jobs < 1:
            raise ConfigError("--jobs must be at least 1")
        self.params()  # raises on bad alpha/beta
        if self.variant != "cascading":
            self.baseline()
        return self

    def params(self) -> RankParams:
        return RankParams(self.alpha, self.beta, self.max_iters, self.epsilon, self.scheme)

    def baseline(self) -> BaselineConfig:
        return BaselineConfig(self.variant, self.lambda_users, self.lambda_items, self.max_iters, self.epsilon)


def _split_list(text):
    return [t.strip() for t in str(text).replace("->", ",").split(",") if t.strip()]


_CONVERT = {
    "header": lambda v: str(v).lower() in ("1", "true", "yes", "on"),
    "single_behavior": lambda v: str(v).lower() in ("1", "true", "yes", "on"),
    "exclude_seen": lambda v: str(v).lower() in ("1", "true", "yes", "on"),
    "behaviors": _split_list,
    "sequence": _split_list,
    "users": _split_list,
    "alpha": float, "beta": float, "epsilon": float, "step": float,
    "lambda_users": float, "lambda_items": float,
    "max_iters": int, "jobs": int, "seed": int, "queries": int, "dense_cap": int,
    "k": lambda v: [int(x) for x in _split_list(v)],
    "fractions": lambda v: [float(x) for x in _split_list(v)],
}


def _convert(key, value):
    try:
        return _CONVERT.get(key, str)(value)
    except ValueError as e:
        raise ConfigError(f"bad value for {key}: {value!r} ({e})") from None


def read_config_file(path) -> dict:
    """Flatten an INI file; any section may hold any key, ``[behavior_files]`` maps label to path."""
    cp = configparser.ConfigParser()
    if not cp.read(path, encoding="utf-8"):
        raise ConfigError(f"config file not found: {path}")
    out: dict = {}
    base = Path(path).parent
    for section in cp.sections():
        if section == "behavior_files":
            out["behavior_files"] = {b: str(base / p) for b, p in cp.items(section)}
            continue
        for key, value in cp.items(section):
            key = key.replace("-", "_")
            if key not in RunConfig.__dataclass_fields__ or key == "mode":
                raise ConfigError(f"unknown config key {key!r} in [{section}]")
            if key in ("data", "output"):
                value = str(base / value)
            out[key] = _convert(key, value)
    return out


def build_config(args: argparse.Namespace) -> RunConfig:
    values = read_config_file(args.config) if args.config else {}
    for key in RunConfig.__dataclass_fields__:
        if key in ("mode", "behavior_files"):
            continue
        v = getattr(args, key, None)
        if v is not None and v is not False:
            values[key] = _convert(key, v) if isinstance(v, str) else v
    if args.behavior_file:
        files = {}
        for spec in args.behavior_file:
            label, sep, path = spec.partition("=")
            if not sep:
                raise ConfigError(f"--behavior-file expects LABEL=PATH (got {spec!r})")
            files[label] = path
        values["behavior_files"] = files
    if args.scheme_flag:
        values["scheme"] = args.scheme_flag
    return RunConfig(mode=args.command, **values).validate()


def make_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    g = common.add_argument_group("input")
    g.add_argument("--config", help="INI file with run settings")
    g.add_argument("--data", help="TSV of user, item, behavior, timestamp")
    g.add_argument("--behavior-file", action="append", metavar="LABEL=PATH",
                   help="TSV of user, item, timestamp for one behavior (repeatable)")
    g.add_argument("--header", action="store_true", default=None, help="input files start with a header row")
    g.add_argument("--behaviors", help="declared behavior labels; others are rejected")
    m = common.add_argument_group("model")
    m.add_argument("--sequence", help="cascading sequence, e.g. view,cart,buy")
    m.add_argument("--target", help="target behavior (last in the sequence)")
    m.add_argument("--alpha", type=float)
    m.add_argument("--beta", type=float)
    m.add_argument("--epsilon", type=float)
    m.add_argument("--max-iters", dest="max_iters", type=int)
    m.add_argument("--scheme", dest="scheme_flag", choices=("sym", "col", "symmetric", "column"))
    m.add_argument("--variant", choices=VARIANTS)
    m.add_argument("--lambda-users", dest="lambda_users", type=float)
    m.add_argument("--lambda-items", dest="lambda_items", type=float)
    m.add_argument("--single-behavior", dest="single_behavior", action="store_true", default=None,
                   help="baselines use the target behavior graph instead of the union of all behaviors")
    m.add_argument("--dense-cap", dest="dense_cap", type=int)
    r = common.add_argument_group("run")
    r.add_argument("--k", help="cutoffs, e.g. 10,30,50")
    r.add_argument("--jobs", type=int)
    r.add_argument("-o", "--output", help="output directory")
    r.add_argument("--seed", type=int, help="seed for the bench slicing permutation")
    r.add_argument("--user", dest="users", action="append", help="user token (repeatable)")
    r.add_argument("--exclude-seen", dest="exclude_seen", action="store_true", default=None,
                   help="rank: drop items the user already has under the target behavior")
    r.add_argument("--step", type=float, help="sweep grid step")
    r.add_argument("--fractions", help="bench slice fractions, e.g. 0.25,0.5,1")
    r.add_argument("--queries", type=int, help="bench: query users timed per slice")
    common.add_argument("-v", "--verbose", action="count", default=0)

    parser = argparse.ArgumentParser(prog="cascrank", description="CascadingRank multi-behavior ranking")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "ingest": "deduplicate interactions and write index maps",
        "rank": "top-k items per user",
        "evaluate": "leave-one-out HR@k / NDCG@k",
        "sweep": "grid over alpha and beta on the validation holdout",
        "permute": "permutations and prefixes of the cascading sequence",
        "bench": "running time against edge count",
        "diagnose": "convergence and objective trajectories, spectral bounds",
    }
    for name in COMMANDS:
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


# ---------------------------------------------------------------------------
# commands


def _load(cfg: RunConfig):
    if cfg.data:
        return ingest(cfg.data, behaviors=cfg.behaviors, header=cfg.header)
    return ingest_files(cfg.behavior_files, header=cfg.header)


def _sequence(cfg: RunConfig, log) -> list[str]:
    seq = cfg.sequence or list(log.behavior_labels)
    if cfg.target and cfg.target not in seq:
        seq = [b for b in seq if b != cfg.target] + [cfg.target]
    return seq


def _scorer(cfg: RunConfig, log, seq):
    if cfg.variant == "cascading":
        return CascadingRanker(build_cascading_graph(log, seq, cfg.scheme, cfg.target), cfg.params())
    if cfg.single_behavior:
        g = build_behavior_graph(log, seq[-1])
    else:
        g = build_unified_graph(log)
    return BaselineRanker(g, cfg.baseline())


def _write_lines(path: Path, lines):
    with open(path, "w", encoding="utf-8", newline="") as fh:
        for line in lines:
            fh.write(line + "\n")


def _write_json(path: Path, obj):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(obj, fh, indent=2)
        fh.write("\n")


def _user_indices(cfg: RunConfig, log) -> list[int]:
    out = []
    for tok in cfg.users:
        if tok not in log.user_index:
            raise ConfigError(f"unknown user {tok!r}")
        out.append(log.user_index[tok])
    return out


def cmd_ingest(cfg, out: Path) -> list[str]:
    log = _load(cfg)
    write_log(log, out / "interactions.tsv")
    write_index_map(log.user_tokens, out / "users.tsv")
    write_index_map(log.item_tokens, out / "items.tsv")
    _write_json(out / "counts.json", {"users": log.n_users, "items": log.n_items, "records": log.counts()})
    return ["interactions.tsv", "users.tsv", "items.tsv", "counts.json"]


def cmd_rank(cfg, out: Path) -> list[str]:
    log = _load(cfg)
    seq = _sequence(cfg, log)
    users = _user_indices(cfg, log) or list(range(log.n_users))
    k = max(cfg.k)
    scorer = _scorer(cfg, log, seq)
    seen = build_behavior_graph(log, seq[-1]).adjacency if cfg.exclude_seen else None

    lines = ["user\titem\tscore\trank"]
    diag = []
    batch = 256
    for start in range(0, len(users), batch):
        chunk = users[start:start + batch]
        scores = scorer.score_users(chunk)
        for row, u in zip(scores, chunk):
            row = row.copy()
            if seen is not None:
                row[seen.indices[seen.indptr[u]:seen.indptr[u + 1]]] = -np.inf
            # descending score, ascending item index on ties
            order = np.lexsort((np.arange(len(row)), -row))[:k]
            order = order[np.isfinite(row[order])]
            for pos, i in enumerate(order, start=1):
                lines.append(f"{log.user_tokens[u]}\t{log.item_tokens[i]}\t{row[i]:.12g}\t{pos}")
    _write_lines(out / "scores.tsv", lines)
    written = ["scores.tsv"]

    if cfg.variant == "cascading" and cfg.users:
        cg = scorer.cg
        for u in users:
            res = rank(cg, u, cfg.params())
            diag.append({"user": log.user_tokens[u], "behaviors": [
                {"behavior": s.behavior, "iterations": s.iterations, "residual": s.residual}
                for s in res.behaviors]})
        with open(out / "diagnostics.jsonl", "w", encoding="utf-8") as fh:
            for rec in diag:
                fh.write(json.dumps(rec) + "\n")
        written.append("diagnostics.jsonl")
    return written


def cmd_evaluate(cfg, out: Path) -> list[str]:
    log = _load(cfg)
    seq = _sequence(cfg, log)
    split = leave_one_out_split(log, seq[-1])
    scorer = _scorer(cfg, split.train_log, seq)
    rep = evaluate(scorer, split, cfg.k, jobs=cfg.jobs)
    _write_json(out / "report.json", rep.to_dict())
    _write_lines(out / "report.tsv", rep.tsv_rows())
    _write_lines(out / "ranks.tsv", ["user\trank"] + [
        f"{log.user_tokens[u]}\t{r}" for u, r in zip(rep.users, rep.ranks)])
    cfg._timings["evaluate"] = rep.wall_clock
    return ["report.json", "report.tsv", "ranks.tsv"]


def cmd_sweep(cfg, out: Path) -> list[str]:
    log = _load(cfg)
    seq = _sequence(cfg, log)
    split = leave_one_out_split(log, seq[-1])
    cg = build_cascading_graph(split.train_log, seq, cfg.scheme, cfg.target)
    table = sweep(cg, split, cfg.k, step=cfg.step, max_iters=cfg.max_iters, epsilon=cfg.epsilon, jobs=cfg.jobs)
    _write_lines(out / "sweep.tsv", table.tsv_rows())
    best = {}
    for metric in ("hr", "ndcg"):
        for k in cfg.k:
            a, b, rep = table.best(metric, k)
            best[f"{metric}@{k}"] = {
                "alpha": a, "beta": b, "value": getattr(rep, metric)[k],
                "by_alpha": {f"{x:.2f}": v for x, v in table.maxima("alpha", metric, k).items()},
                "by_beta": {f"{x:.2f}": v for x, v in table.maxima("beta", metric, k).items()},
            }
    _write_json(out / "sweep_best.json", best)
    return ["sweep.tsv", "sweep_best.json"]


def cmd_permute(cfg, out: Path) -> list[str]:
    log = _load(cfg)
    seq = _sequence(cfg, log)
    split = leave_one_out_split(log, seq[-1])
    cg = build_cascading_graph(split.train_log, seq, cfg.scheme, cfg.target)
    p = cfg.params()
    perms = permute_sequences(cg, split, p, cfg.k, jobs=cfg.jobs)
    prefixes = prefix_ablation(cg, split, p, cfg.k, jobs=cfg.jobs)
    _write_lines(out / "permutations.tsv", sequence_table_rows(perms, cfg.k))
    _write_lines(out / "prefixes.tsv", sequence_table_rows(prefixes, cfg.k))
    return ["permutations.tsv", "prefixes.tsv"]


def cmd_bench(cfg, out: Path) -> list[str]:
    log = _load(cfg)
    seq = _sequence(cfg, log)
    table = bench_scalability(log, cfg.params(), cfg.fractions, sequence=seq, seed=cfg.seed, n_queries=cfg.queries)
    _write_lines(out / "bench.tsv", table.tsv_rows())
    _write_json(out / "bench_fit.json", table.fit() if len(table.rows) >= 2 else {})
    return ["bench.tsv", "bench_fit.json"]


def cmd_diagnose(cfg, out: Path) -> list[str]:
    log = _load(cfg)
    seq = _sequence(cfg, log)
    cg = build_cascading_graph(log, seq, cfg.scheme, cfg.target)
    p = cfg.params()
    users = _user_indices(cfg, log) or [0]
    spectral = []
    for b in seq:
        try:
            d = convergence_diagnostics(cg, b, p, dense_cap=cfg.dense_cap)
            spectral.append({"behavior": b, "gamma": d.gamma, "bound": d.bound, "measured": d.measured,
                             "power_iterations": d.power_iterations})
        except DenseCapError as e:
            spectral.append({"behavior": b, "skipped": str(e)})
    trajectories = []
    for u in users:
        prof = contraction_profile(cg, u, p)
        trajectories.append({
            "user": log.user_tokens[u],
            "trajectory": objective_trajectory(cg, u, p),
            "target_contraction": {
                "sweep_ratios": prof.sweep_ratios().tolist(),
                "item_ratios": prof.item_ratios().tolist(),
            },
        })
    _write_json(out / "diagnose.json", {
        "alpha": p.alpha, "beta": p.beta, "gamma": p.gamma, "epsilon": p.epsilon,
        "sequence": seq, "spectral": spectral, "users": trajectories,
    })
    rows = ["user\tbehavior\titeration\tresidual\tsmoothness\tquery_fit\tcascade_fit\tobjective"]
    fmt = lambda v: "NA" if v is None else f"{v:.12g}"  # noqa: E731
    for t in trajectories:
        for r in t["trajectory"]:
            rows.append("\t".join([t["user"], r["behavior"], str(r["iteration"])] + [
                fmt(r[c]) for c in ("residual", "smoothness", "query_fit", "cascade_fit", "objective")]))
    _write_lines(out / "trajectory.tsv", rows)
    return ["diagnose.json", "trajectory.tsv"]


HANDLERS = {
    "ingest": cmd_ingest, "rank": cmd_rank, "evaluate": cmd_evaluate, "sweep": cmd_sweep,
    "permute": cmd_permute, "bench": cmd_bench, "diagnose": cmd_diagnose,
}


def run(cfg: RunConfig) -> int:
    out = Path(cfg.output)
    out.mkdir(parents=True, exist_ok=True)
    cfg._timings = {}
    t0 = time.perf_counter()
    artifacts = HANDLERS[cfg.mode](cfg, out)
    elapsed = time.perf_counter() - t0
    echo = asdict(cfg)
    _write_json(out / "manifest.json", {
        "command": cfg.mode,
        "config": echo,
        "versions": {"cascrank": __version__, "python": platform.python_version(),
                     "numpy": np.__version__, "scipy": scipy.__version__},
        "artifacts": artifacts,
        "wall_clock": elapsed,
        "timings": cfg._timings,
    })
    _log.info("%s finished in %.2fs; wrote %s", cfg.mode, elapsed, ", ".join(artifacts))
    return 0


def main(argv=None) -> int:
    parser = make_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s")
    try:
        cfg = build_config(args)
    except ConfigError as e:
        print(f"cascrank: configuration error: {e}", file=sys.stderr)
        return 2
    try:
        return run(cfg)
    except ConfigError as e:
        print(f"cascrank {cfg.mode}: configuration error: {e}", file=sys.stderr)
        return 2
    except (CascRankError, OSError, ValueError) as e:
        print(f"cascrank {cfg.mode}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
