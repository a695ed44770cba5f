"""Command-line driver: rate curves, verification suites, the rate table and the lower-bound experiment.

Exit codes: 0 success, 1 a verification check failed, 2 usage or configuration error.
"""

from __future__ import annotations

import argparse
import os
import shutil
import sys
import tempfile
from pathlib import Path

import numpy as np

from .game_core import hard_instance, load_game
from .learners import parse_learner_spec
from .sim_harness import (
    RateCurve,
    fit_rate,
    geometric_checkpoints,
    lower_bound_experiment,
    monte_carlo_lp,
    replication_seed,
    run_episode,
)
from .verification import SUITES, run_suite

OUT_ENV = "BANDITGAMES_OUT"
DEFAULT_OUT = "banditgames_out"

EXIT_OK, EXIT_CHECK_FAILED, EXIT_USAGE = 0, 1, 2

RUN_DEFAULTS = {
    "game": "hard:0",
    "min_algo": "regexp3:T=10000",
    "max_algo": None,  # same as min_algo
    "horizon": 10_000,
    "reps": 100,
    "p": 2.0,
    "seed": 0,
    "checkpoints": "ratio:3.1622776601683795",
    "deterministic_loss": False,
    "workers": 1,
    "traces": 1,
    "svg": False,
}

# Reduced settings for smoke runs of the verification suites.
QUICK = {
    "oracles": dict(n_profiles=20, n_states=20, horizon=2000),
    "lemma2": dict(R=30, checkpoints=(10, 100, 1000)),
    "thm3": dict(R=20, horizons=(1000, 3000, 10_000)),
    "thm2": dict(R=20, horizon=10_000, fit_t_min=100),
    "thm4": dict(R=20, loops=4),
    "lowerbound": dict(R=4, trace_horizon=500),
    "properties": dict(n_pairs=10_000),
}


class UsageError(Exception):
    pass


# ---------------------------------------------------------------------------
# Configuration
# ---------------------------------------------------------------------------


def read_config(path):
    """Flat ``key = value`` file; ``#`` starts a comment.  Keys use underscores or dashes."""
    values = {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise UsageError(f"cannot read config {path}: {exc}") from exc
    for n, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        key, sep, value = line.partition("=")
        if not sep:
            raise UsageError(f"{path}:{n}: expected key = value")
        key = key.strip().replace("-", "_")
        if key not in RUN_DEFAULTS and key != "out":
            raise UsageError(f"{path}:{n}: unknown key {key!r}")
        values[key] = value.strip()
    return values


def _to_bool(value):
    if isinstance(value, bool):
        return value
    v = str(value).strip().lower()
    if v in ("1", "true", "yes", "on"):
        return True
    if v in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {value!r}")


def resolve_run_config(args):
    """Merge defaults, the optional config file and command-line flags (flags win)."""
    cfg = dict(RUN_DEFAULTS)
    cfg["out"] = os.environ.get(OUT_ENV, DEFAULT_OUT)
    if args.config:
        cfg.update(read_config(args.config))
    for key in list(RUN_DEFAULTS) + ["out"]:
        value = getattr(args, key, None)
        if value is not None:
            cfg[key] = value
    try:
        cfg["horizon"] = int(cfg["horizon"])
        cfg["reps"] = int(cfg["reps"])
        cfg["p"] = float(cfg["p"])
        cfg["seed"] = int(cfg["seed"])
        cfg["workers"] = int(cfg["workers"])
        cfg["traces"] = int(cfg["traces"])
    except ValueError as exc:
        raise UsageError(f"invalid numeric setting: {exc}") from exc
    cfg["deterministic_loss"] = _to_bool(cfg["deterministic_loss"])
    cfg["svg"] = _to_bool(cfg["svg"])
    if cfg["max_algo"] is None:
        cfg["max_algo"] = cfg["min_algo"]
    if cfg["horizon"] < 1:
        raise UsageError("horizon must be >= 1")
    if cfg["reps"] < 1:
        raise UsageError("reps must be >= 1")
    if not cfg["p"] > 0:
        raise UsageError("p must be positive")
    if cfg["workers"] < 1 or cfg["traces"] < 0:
        raise UsageError("workers must be >= 1 and traces >= 0")
    for spec in (cfg["min_algo"], cfg["max_algo"]):
        try:
            parse_learner_spec(spec)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    cfg["checkpoint_list"] = parse_checkpoints(cfg["checkpoints"], cfg["horizon"])
    return cfg


def parse_checkpoints(text, horizon):
    """``ratio:<r>`` for a geometric grid, or an explicit comma-separated list of rounds."""
    text = str(text).strip()
    try:
        if text.startswith("ratio:"):
            return geometric_checkpoints(horizon, ratio=float(text[6:]))
        pts = sorted({int(x) for x in text.split(",") if x.strip()})
    except ValueError as exc:
        raise UsageError(f"invalid checkpoints {text!r}: {exc}") from exc
    if not pts or pts[0] < 1 or pts[-1] > horizon:
        raise UsageError(f"checkpoints must lie in [1, {horizon}]")
    return pts


def build_game(source, deterministic):
    try:
        game = load_game(source)
    except (ValueError, FileNotFoundError, OSError) as exc:
        raise UsageError(f"cannot load game {source!r}: {exc}") from exc
    return game.with_mode("deterministic") if deterministic else game


# ---------------------------------------------------------------------------
# Output helpers
# ---------------------------------------------------------------------------


class Staging:
    """Write outputs into a scratch directory and move them into place only on success."""

    def __init__(self, out_dir):
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.tmp = Path(tempfile.mkdtemp(prefix=".partial-", dir=self.out))
        self.names = []

    def write(self, name, text):
        (self.tmp / name).write_text(text)
        self.names.append(name)

    def commit(self):
        for name in self.names:
            os.replace(self.tmp / name, self.out / name)
        shutil.rmtree(self.tmp, ignore_errors=True)
        return [self.out / n for n in self.names]

    def discard(self):
        shutil.rmtree(self.tmp, ignore_errors=True)


def curve_svg(curve, bound=None, width=480, height=320):
    """Minimal log-log line chart of a rate curve (positive points only)."""
    keep = curve.estimate > 0
    t, y = curve.t[keep].astype(float), curve.estimate[keep]
    if t.size < 2:
        return f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}"></svg>\n'
    series = [("#1f77b4", np.log10(y))]
    if bound is not None:
        series.append(("#d62728", np.log10([bound(x) for x in t])))
    lx = np.log10(t)
    ys = np.concatenate([s for _, s in series])
    x0, x1, y0, y1 = lx.min(), lx.max(), ys.min(), ys.max()
    if y1 == y0:
        y1 = y0 + 1
    pad = 40

    def px(x, yv):
        return (pad + (x - x0) / (x1 - x0) * (width - 2 * pad), height - pad - (yv - y0) / (y1 - y0) * (height - 2 * pad))

    parts = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}">']
    parts.append(f'<rect x="{pad}" y="{pad}" width="{width - 2 * pad}" height="{height - 2 * pad}" fill="none" stroke="#888"/>')
    for color, s in series:
        pts = " ".join("%.2f,%.2f" % px(x, v) for x, v in zip(lx, s))
        parts.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
    parts.append(f'<text x="{pad}" y="{height - 10}" font-size="11">log10 t: {x0:.2f} .. {x1:.2f}</text>')
    parts.append(f'<text x="{pad}" y="{pad - 10}" font-size="11">log10 L^{curve.p:g} EG: {y0:.2f} .. {y1:.2f}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def format_table(header, rows):
    cells = [header] + [[str(c) for c in r] for r in rows]
    widths = [max(len(r[i]) for r in cells) for i in range(len(header))]
    lines = ["  ".join(c.ljust(w) for c, w in zip(r, widths)).rstrip() for r in cells]
    lines.insert(1, "  ".join("-" * w for w in widths))
    return "\n".join(lines)


# ---------------------------------------------------------------------------
# Commands
# ---------------------------------------------------------------------------


def cmd_run(args):
    cfg = resolve_run_config(args)
    game = build_game(cfg["game"], cfg["deterministic_loss"])
    specs = (cfg["min_algo"], cfg["max_algo"])
    stage = Staging(cfg["out"])
    try:
        curve = monte_carlo_lp(
            game, specs, cfg["horizon"], cfg["reps"], cfg["p"], cfg["checkpoint_list"], cfg["seed"],
            workers=cfg["workers"],
        )
        stage.write("curve.csv", curve.to_csv())
        for r in range(min(cfg["traces"], cfg["reps"])):
            trace = run_episode(
                game, specs[0], specs[1], cfg["horizon"], replication_seed(cfg["seed"], r),
                checkpoints=cfg["checkpoint_list"],
            )
            stage.write(f"trace_{r:03d}.csv", trace.to_csv())
        if cfg["svg"]:
            stage.write("curve.svg", curve_svg(curve))
    except BaseException:
        stage.discard()
        raise
    written = stage.commit()
    print(f"L^{cfg['p']:g} exploitability, R={cfg['reps']}, seed={cfg['seed']}")
    for t, e, s in zip(curve.t, curve.estimate, curve.stderr):
        print(f"  t={int(t):>9d}  estimate={e:.6g}  stderr={s:.3g}")
    for path in written:
        print(f"wrote {path}")
    return EXIT_OK


def cmd_verify(args):
    options = dict(QUICK.get(args.suite, {})) if args.quick else {}
    if args.reps is not None:
        options["R"] = args.reps
    if args.seed is not None:
        options["seed"] = args.seed
    options["workers"] = args.workers
    checks = run_suite(args.suite, **options)
    for c in checks:
        print(c.line())
    failed = sum(not c.passed for c in checks)
    print(f"{args.suite}: {len(checks) - failed}/{len(checks)} checks passed")
    if args.out:
        stage = Staging(args.out)
        lines = ["check,measured,relation,bound,margin,passed"]
        for c in checks:
            name = c.name.replace(",", ";")
            lines.append(f"{name},{c.measured!r},{c.relation},{c.bound!r},{c.margin!r},{int(c.passed)}")
        stage.write(f"verify_{args.suite}.csv", "\n".join(lines) + "\n")
        stage.commit()
    return EXIT_OK if failed == 0 else EXIT_CHECK_FAILED


def table1_rows(horizon, R, seed, workers=1, t_min=100):
    """Fitted log-log slopes beside their theoretical exponents, one row per algorithm."""
    game = hard_instance(0.0)
    ck = geometric_checkpoints(horizon)
    rows = []

    def add(name, p, theory, curve):
        fit = fit_rate(curve, t_min=min(t_min, curve.t[-3]))
        rows.append((name, f"{p:g}", f"{theory:.4f}", f"{fit.slope:.4f}", f"{fit.slope_stderr:.4f}", f"{fit.t_range[0]}-{fit.t_range[1]}"))

    for p in (0.5, 1.0, 2.0):
        add(f"EOE over EXP3-IX (p={p:g})", p, -1 / (2 + p), monte_carlo_lp(game, f"eoe:p={p:g}", horizon, R, p, ck, seed, workers=workers))
    horizons = [t for t in ck if t >= 10]
    est, se = [], []
    for T in horizons:
        c = monte_carlo_lp(game, f"regexp3:T={T}", T, R, 2, [T], seed, workers=workers)
        est.append(c.estimate[0])
        se.append(c.stderr[0])
    add("Regularized EXP3 (tuned to T)", 2, -0.25, RateCurve(horizons, est, se, R, 2.0))
    add("Doubling meta-procedure", 2, -0.25, monte_carlo_lp(game, "doubling", horizon, R, 2, ck, seed, workers=workers))
    add("EXP3-IX average output", 2, -0.5, monte_carlo_lp(game, "exp3ix", horizon, R, 2, ck, seed, measure="output", workers=workers))
    return rows


TABLE1_HEADER = ["algorithm", "p", "theory exponent", "fitted slope", "slope se", "t range"]


def cmd_table1(args):
    if args.horizon < 1000 or args.reps < 1:
        raise UsageError("table1 needs horizon >= 1000 and reps >= 1")
    rows = table1_rows(args.horizon, args.reps, args.seed, args.workers, args.fit_from)
    print(format_table(TABLE1_HEADER, rows))
    if args.out:
        stage = Staging(args.out)
        stage.write("table1.csv", "\n".join([",".join(TABLE1_HEADER)] + [",".join(r) for r in rows]) + "\n")
        stage.commit()
    return EXIT_OK


def cmd_lowerbound(args):
    for spec in (args.min_algo, args.max_algo or args.min_algo):
        try:
            parse_learner_spec(spec)
        except ValueError as exc:
            raise UsageError(str(exc)) from exc
    spec = (args.min_algo, args.max_algo or args.min_algo)
    try:
        rep = lower_bound_experiment(spec, args.p, args.horizon, args.reps, args.seed)
    except RuntimeError as exc:
        print(f"FAIL  {exc}")
        return EXIT_CHECK_FAILED
    print(f"eps_T = {rep.epsilon:.6g}  (T={rep.T}, p={rep.p:g}, R={rep.R})")
    print(f"||EG||_p on +eps_T: {rep.lp_plus:.6g}")
    print(f"||EG||_p on -eps_T: {rep.lp_minus:.6g}")
    print(f"worse of the two:   {rep.worst:.6g}   (eps_T/2 = {rep.epsilon / 2:.6g})")
    print(f"mean KL budget on eps=0: {rep.mean_kl_budget:.6g} <= bound {rep.mean_kl_bound:.6g}")
    print("evidence only: the lower bound is asymptotic and is not decided at a single horizon")
    return EXIT_OK


# ---------------------------------------------------------------------------
# Argument parsing
# ---------------------------------------------------------------------------


def build_parser():
    parser = argparse.ArgumentParser(prog="banditgames", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="Monte Carlo L^p exploitability curve plus episode traces")
    run.add_argument("--config", help="key = value file; command-line flags override it")
    run.add_argument("--game", help='game file or "hard:<eps>" (default hard:0)')
    run.add_argument("--min-algo", dest="min_algo", help="learner spec for the min player")
    run.add_argument("--max-algo", dest="max_algo", help="learner spec for the max player (default: same as min)")
    run.add_argument("--horizon", type=int)
    run.add_argument("--reps", type=int, help="replications R")
    run.add_argument("--p", type=float, help="norm order of the L^p estimate")
    run.add_argument("--seed", type=int, help="master seed")
    run.add_argument("--checkpoints", help='"ratio:<r>" or a comma-separated list of rounds')
    run.add_argument("--out", help=f"output directory (default ${OUT_ENV} or ./{DEFAULT_OUT})")
    run.add_argument("--deterministic-loss", dest="deterministic_loss", action="store_const", const=True)
    run.add_argument("--workers", type=int, help="worker processes for replications")
    run.add_argument("--traces", type=int, help="number of per-round trace CSVs to write (default 1)")
    run.add_argument("--svg", action="store_const", const=True, help="also write curve.svg")
    run.set_defaults(func=cmd_run)

    verify = sub.add_parser("verify", help="run a verification suite")
    verify.add_argument("suite", choices=sorted(SUITES))
    verify.add_argument("--quick", action="store_true", help="reduced sizes for a smoke run")
    verify.add_argument("--reps", type=int)
    verify.add_argument("--seed", type=int)
    verify.add_argument("--workers", type=int, default=1)
    verify.add_argument("--out", help="also write verify_<suite>.csv here")
    verify.set_defaults(func=cmd_verify)

    table = sub.add_parser("table1", help="fitted rate exponents beside their theoretical values")
    table.add_argument("--horizon", type=int, default=10_000)
    table.add_argument("--reps", type=int, default=50)
    table.add_argument("--seed", type=int, default=0)
    table.add_argument("--workers", type=int, default=1)
    table.add_argument("--fit-from", dest="fit_from", type=float, default=100.0, help="smallest round used in fits")
    table.add_argument("--out")
    table.set_defaults(func=cmd_table1)

    lb = sub.add_parser("lowerbound", help="run a learner on the two hard instances +-eps_T")
    lb.add_argument("--min-algo", dest="min_algo", default="exp3ix")
    lb.add_argument("--max-algo", dest="max_algo")
    lb.add_argument("--p", type=float, default=2.0)
    lb.add_argument("--horizon", type=int, default=10_000)
    lb.add_argument("--reps", type=int, default=20)
    lb.add_argument("--seed", type=int, default=0)
    lb.set_defaults(func=cmd_lowerbound)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"banditgames: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as exc:
        print(f"banditgames: error: {exc}", file=sys.stderr)
        return EXIT_USAGE


if __name__ == "__main__":
    sys.exit(main())
