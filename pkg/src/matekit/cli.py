"""Command line interface.

Subcommands: estimate, decompose, chains, test, simulate. Machine output
is JSON (to --out or stdout) with an embedded run manifest; a short
aligned-column summary goes to stderr for humans. Exit codes: 0 success,
1 usage error, 2 data or estimation error.

Outputs are byte-reproducible given (input, config, seed): the manifest
records content hashes and versions but never thread counts, and timings
stay null unless --timings is passed.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import os
import platform
import sys
import time
from pathlib import Path

import numpy as np
import pandas as pd
import scipy

from . import __version__
from .chains import SupportGraph, count_all_chains, enumerate_chains, export_dot
from .errors import MatekitError
from .gmm import build_moment_system, efficient_estimate
from .mate import MateEstimator
from .moverreg import decompose_lemma1, decompose_prop1, diagnose_prop2, fit_mover_regression
from .panel import PanelSchema, load_panel, read_config
from .propensity import fit_cell_means, fit_multinomial_logit
from .simlab import DgpSpec, generate, population_oracle

log = logging.getLogger("matekit")


# ---------------------------------------------------------------------------
# shared plumbing


class _Parser(argparse.ArgumentParser):
    """Argument parser whose usage errors exit with code 1."""

    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(1, f"{self.prog}: error: {message}\n")


def _sha256(path):
    if path is None:
        return None
    h = hashlib.sha256()
    h.update(Path(path).read_bytes())
    return h.hexdigest()


def _manifest(config_path=None, input_path=None, seed=None, flags=None, timings=None):
    return {
        "config_sha256": _sha256(config_path),
        "input_sha256": _sha256(input_path),
        "seed": seed,
        "versions": {
            "matekit": __version__,
            "python": platform.python_version(),
            "numpy": np.__version__,
            "scipy": scipy.__version__,
            "pandas": pd.__version__,
        },
        "assumption_flags": flags,
        "timings": timings,
    }


def _json_default(value):
    if isinstance(value, np.ndarray):
        return value.tolist()
    if isinstance(value, np.generic):
        return value.item()
    if isinstance(value, tuple):
        return list(value)
    raise TypeError(f"not JSON serializable: {type(value)!r}")


def _emit(payload, out_path):
    text = json.dumps(payload, sort_keys=True, indent=2, default=_json_default) + "\n"
    if out_path:
        Path(out_path).write_text(text)
    else:
        sys.stdout.write(text)


def _fmt(value):
    if isinstance(value, float):
        return f"{value:.6g}"
    if isinstance(value, (list, tuple)):
        return ",".join(_fmt(v) for v in value)
    return str(value)


def _kv_table(pairs):
    pairs = [(str(k), _fmt(v)) for k, v in pairs if v is not None]
    if not pairs:
        return
    width = max(len(k) for k, _ in pairs)
    for k, v in pairs:
        sys.stderr.write(f"{k:<{width}}  {v}\n")


def _row_table(rows, columns):
    if not rows:
        return
    table = [[_fmt(row.get(c, "")) for c in columns] for row in rows]
    widths = [max(len(columns[i]), *(len(r[i]) for r in table)) for i in range(len(columns))]
    sys.stderr.write("  ".join(c.ljust(w) for c, w in zip(columns, widths)) + "\n")
    for r in table:
        sys.stderr.write("  ".join(v.ljust(w) for v, w in zip(r, widths)) + "\n")


def _load(args):
    cfg = read_config(args.config)
    schema = PanelSchema.from_config(cfg)
    panel = load_panel(args.data, schema)
    return cfg, panel


def _model_settings(cfg, trim_flag):
    prop = cfg.get("propensity", {}) if isinstance(cfg, dict) else {}
    kind = prop.get("kind", "cell_means")
    trim = trim_flag if trim_flag is not None else float(prop.get("trim", 0.01))
    features = prop.get("features")
    strata = prop.get("strata")
    return kind, trim, features, strata


def _fit_model(panel, cfg, trim_flag):
    kind, trim, features, strata = _model_settings(cfg, trim_flag)
    if kind == "cell_means":
        return fit_cell_means(panel, strata=strata, trim=trim)
    if kind == "multinomial_logit":
        return fit_multinomial_logit(panel, features=features, trim=trim)
    raise MatekitError(f"unknown propensity kind {kind!r}")


def _parse_chain(text):
    if text == "auto":
        return "auto"
    try:
        return tuple(int(p) for p in text.replace(" ", "").split(","))
    except ValueError:
        raise MatekitError(f"cannot parse chain {text!r}; expected like 0,2,1")


def _stringify_keys(mapping, fmt):
    return {fmt(k): v for k, v in mapping.items()}


# ---------------------------------------------------------------------------
# estimate


def _cmd_estimate(args):
    timings = {} if args.timings else None
    start = time.perf_counter()
    cfg, panel = _load(args)
    kind, trim, features, strata = _model_settings(cfg, args.trim)
    period = args.period if args.period == "avg" else int(args.period)
    estimator = MateEstimator(
        target=args.target,
        method=args.method,
        period=period,
        chain=_parse_chain(args.chain),
        link_weights=(
            None if args.link_weights is None
            else tuple(float(w) for w in args.link_weights.split(","))
        ),
        propensity={"cell_means": "cell_means", "multinomial_logit": "multinomial_logit"}[kind],
        strata=strata,
        features=features,
        trim_threshold=trim,
        assume_impersistence=args.assume_impersistence,
        se_method=None if args.se == "none" else args.se,
        n_bootstrap=args.bootstrap,
        random_state=args.seed,
    )
    estimator.fit(panel)
    est = estimator.estimate_
    if timings is not None:
        timings["total_s"] = time.perf_counter() - start
    payload = {
        "estimate": est.point,
        "se": est.se,
        "se_method": est.se_method,
        "method": est.method,
        "estimand": est.estimand,
        "target": est.target,
        "periods": list(est.periods),
        "chain": list(est.chain),
        "link_modes": list(est.link_modes),
        "weights": (
            est.link_weights if isinstance(est.link_weights, str)
            else list(est.link_weights)
        ),
        "n_units": est.n_units,
        "n_retained": est.n_retained,
        "n_trimmed": est.n_units - est.n_retained,
        "n_effective": est.n_effective,
        "assumptions": est.assumptions,
        "diagnostics": est.diagnostics,
        "manifest": _manifest(args.config, args.data, args.seed,
                              flags=est.assumptions, timings=timings),
    }
    _emit(payload, args.out)
    _kv_table([
        ("method", est.method), ("estimand", est.estimand),
        ("target", est.target), ("periods", est.periods),
        ("chain", est.chain), ("estimate", est.point), ("se", est.se),
        ("n_units", est.n_units), ("n_trimmed", est.n_units - est.n_retained),
    ])
    return 0


# ---------------------------------------------------------------------------
# decompose


def _cmd_decompose(args):
    cfg, panel = _load(args)
    fit = fit_mover_regression(panel)
    payload = {
        "tau": fit.tau,
        "beta": list(fit.beta),
        "omega": None,
        "cells": None,
        "prop1_weights": None,
        "prop2_gaps": None,
        "manifest": _manifest(args.config, args.data),
    }
    table = [("beta", tuple(fit.beta)), ("tau", fit.tau)]
    if panel.n_treatments == 2:
        lemma = decompose_lemma1(panel)
        prop1 = decompose_prop1(panel)
        payload["omega"] = lemma.omega
        payload["lemma"] = {
            "p_plus": lemma.p_plus, "p_minus": lemma.p_minus,
            "omega": lemma.omega, "d_in": lemma.d_in, "d_stay": lemma.d_stay,
            "d_out": lemma.d_out, "beta": lemma.beta,
            "no_stayers": lemma.no_stayers,
        }
        payload["cells"] = {
            f"t={t},d={d:+d}": {
                "value": cell.value, "weight": cell.weight,
                "n_mover": cell.n_mover, "n_stayer": cell.n_stayer,
                "feasible": cell.feasible,
            }
            for (t, d), cell in prop1.cells.items()
        }
        payload["prop1_weights"] = {
            "branch": prop1.branch,
            "p_stay0": prop1.p_stay0,
            "omega": prop1.omega,
            "matched": (
                None if prop1.matched_weights is None
                else _stringify_keys(prop1.matched_weights, lambda k: f"t={k[0]},d={k[1]:+d}")
            ),
            "crossed": (
                None if prop1.crossed_weights is None
                else _stringify_keys(prop1.crossed_weights, lambda k: f"t={k[0]},d={k[1]:+d}")
            ),
        }
        table += [("omega", lemma.omega), ("d_in", lemma.d_in),
                  ("d_stay", lemma.d_stay), ("d_out", lemma.d_out)]
    else:
        diag = diagnose_prop2(panel)
        gaps = {
            "stayer_trend_gaps": _stringify_keys(
                diag.stayer_trend_gaps, lambda k: f"j={k[0]},k={k[1]}"
            ),
            "chain_sum_gaps": _stringify_keys(
                diag.chain_sum_gaps,
                lambda k: f"j={k[0]},k={k[1]},t={k[2]},s={k[3]},u={k[4]}",
            ),
        }
        if diag.two_link is not None:
            gaps["two_link"] = {
                "p_stay0": diag.two_link.p_stay0,
                "effect_t0_1v0": diag.two_link.effect_t0_1v0,
                "effect_t1_2v1": diag.two_link.effect_t1_2v1,
                "stayer_gap": diag.two_link.stayer_gap,
                "noncausal": diag.two_link.noncausal,
                "beta1": diag.two_link.beta1,
                "beta2": diag.two_link.beta2,
            }
            table += [("noncausal", diag.two_link.noncausal)]
        payload["prop2_gaps"] = gaps
    _emit(payload, args.out)
    _kv_table(table)
    return 0


# ---------------------------------------------------------------------------
# chains


def _complete_graph(j):
    mover_ok = np.ones((j, j), dtype=bool)
    np.fill_diagonal(mover_ok, False)
    return SupportGraph(
        n_treatments=j,
        period_pair=(0, 1),
        mover_ok=mover_ok,
        stayer_ok=np.ones(j, dtype=bool),
        mover_counts=np.zeros((j, j)),
        stayer_counts=np.zeros(j),
        trim_threshold=0.0,
    )


def _cmd_chains(args):
    if args.complete:
        if args.treatments is None:
            raise MatekitError("--complete requires --treatments")
        graph = _complete_graph(args.treatments)
        manifest = _manifest()
    else:
        if not args.data or not args.config:
            raise MatekitError("chains needs --data and --config (or --complete)")
        cfg, panel = _load(args)
        model = _fit_model(panel, cfg, args.trim)
        from .chains import build_support_graph

        graph = build_support_graph(panel, model, (0, 1))
        manifest = _manifest(args.config, args.data)
    chains = enumerate_chains(graph, args.target, mode=args.mode)
    payload = {
        "n_treatments": graph.n_treatments,
        "target": args.target,
        "mode": args.mode,
        "period_pair": list(graph.period_pair),
        "feasibility": {
            "mover_ok": graph.mover_ok.astype(int).tolist(),
            "stayer_ok": graph.stayer_ok.astype(int).tolist(),
            "mover_counts": graph.mover_counts.tolist(),
            "stayer_counts": graph.stayer_counts.tolist(),
        },
        "chains": [
            {
                "treatments": list(c.treatments),
                "modes": list(c.modes),
                "link_weights": list(c.link_weights),
            }
            for c in chains
        ],
        "n_chains": len(chains),
        "complete_support_count": count_all_chains(graph.n_treatments),
        "manifest": manifest,
    }
    if args.dot:
        export_dot(graph, chains, args.dot)
    _emit(payload, args.out)
    _row_table(
        [
            {"chain": "->".join(str(t) for t in c.treatments),
             "modes": ",".join(c.modes),
             "weights": ",".join(_fmt(w) for w in c.link_weights)}
            for c in chains
        ],
        ["chain", "modes", "weights"],
    )
    return 0


# ---------------------------------------------------------------------------
# test (moment stacking)


def _cmd_test(args):
    cfg, panel = _load(args)
    model = _fit_model(panel, cfg, args.trim)
    if args.chains == "auto":
        from .chains import build_support_graph

        graph = build_support_graph(panel, model, (0, 1))
        mode = "prop4" if args.estimand == "half_sum" else "prop3"
        period = None if args.estimand == "half_sum" else args.period
        chain_list = enumerate_chains(graph, args.target, mode=mode, period=period)
    else:
        chain_list = [
            tuple(int(p) for p in part.replace(" ", "").split(","))
            for part in args.chains.split(";")
        ]
    system = build_moment_system(
        panel, model, chain_list, args.target, args.estimand,
        period=args.period, omega_method=args.omega,
        route_cap=args.route_cap, n_bootstrap=args.bootstrap, seed=args.seed,
    )
    result = efficient_estimate(system)
    payload = {
        "beta_star": result.beta_star,
        "se": result.se,
        "route_weights": result.route_weights.tolist(),
        "route_estimates": result.route_estimates.tolist(),
        "routes": [
            {"chain": list(r["chain"]), "directions": list(r["directions"])}
            for r in system.routes
        ],
        "moments": [
            {"label": ":".join(str(p) for p in lab), "value": float(v)}
            for lab, v in zip(system.labels, system.m_hat)
        ],
        "T": result.t_stat,
        "dof": result.dof,
        "p": result.p_value,
        "fallbacks": ["spectral_truncation"] if result.fallback else [],
        "omega_method": system.omega_method,
        "estimand": system.estimand,
        "target": system.target,
        "periods": list(system.periods),
        "n_units": system.n_units,
        "n_retained": system.n_retained,
        "manifest": _manifest(args.config, args.data, args.seed),
    }
    _emit(payload, args.out)
    _kv_table([
        ("beta_star", result.beta_star), ("se", result.se),
        ("routes", len(system.routes)), ("T", result.t_stat),
        ("dof", result.dof), ("p", result.p_value),
    ])
    return 0


# ---------------------------------------------------------------------------
# simulate


def _cmd_simulate(args):
    spec = DgpSpec.from_config(read_config(args.spec))
    seed = spec.seed if args.seed is None else args.seed
    panel = generate(spec, args.n, seed=seed)
    frame = panel.to_dataframe()
    out = Path(args.out)
    frame.to_csv(out, index=False)
    oracle = population_oracle(spec)
    j, t_count = spec.n_treatments, spec.n_periods
    mates = {
        f"mate_{j_}_{t}": oracle.true_mate(j_, t)
        for j_ in range(1, j) for t in range(t_count)
    }
    half = {f"half_sum_{j_}": oracle.true_half_sum(j_) for j_ in range(1, j)}
    payload = {
        "spec_name": spec.name,
        "n": int(args.n),
        "n_treatments": j,
        "n_periods": t_count,
        "mover_share": oracle.mover_share,
        "true_mate": mates,
        "true_half_sum": half,
        "assumption_flags": spec.assumption_flags(),
        "data_file": out.name,
        "manifest": _manifest(args.spec, None, seed, flags=spec.assumption_flags()),
    }
    oracle_path = args.oracle or str(out) + ".oracle.json"
    _emit(payload, oracle_path)
    _kv_table([
        ("written", str(out)), ("oracle", oracle_path),
        ("units", args.n), ("mover_share", oracle.mover_share),
    ])
    return 0


# ---------------------------------------------------------------------------
# parser and dispatch


def _add_common(sub, add_out=True):
    if add_out:
        sub.add_argument("--out", help="write JSON here instead of stdout")
    sub.add_argument("--threads", type=int,
                     default=int(os.environ.get("MATEKIT_THREADS", 0)) or None,
                     help="worker cap (results are identical for any value)")
    sub.add_argument("--timings", action="store_true",
                     help="record wall times in the manifest (breaks byte reproducibility)")
    sub.add_argument("--verbose", action="store_true")


def build_parser():
    parser = _Parser(prog="matekit", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=__version__)
    subs = parser.add_subparsers(dest="command", parser_class=_Parser)
    subs.required = True

    est = subs.add_parser("estimate", help="mover effect estimates")
    est.add_argument("--data", required=True)
    est.add_argument("--config", required=True)
    est.add_argument("--target", type=int, default=1)
    est.add_argument("--period", default="1", choices=["0", "1", "avg"])
    est.add_argument("--method", default="auto",
                     choices=["auto", "prop3", "corollary", "prop4"])
    est.add_argument("--chain", default="auto")
    est.add_argument("--link-weights", dest="link_weights")
    est.add_argument("--assume-impersistence", dest="assume_impersistence",
                     action="store_true")
    est.add_argument("--se", default="bootstrap",
                     choices=["bootstrap", "plugin", "none"])
    est.add_argument("--bootstrap", type=int, default=500)
    est.add_argument("--trim", type=float, default=None)
    est.add_argument("--seed", type=int, default=0)
    _add_common(est)
    est.set_defaults(func=_cmd_estimate)

    dec = subs.add_parser("decompose", help="regression coefficient anatomy")
    dec.add_argument("--data", required=True)
    dec.add_argument("--config", required=True)
    _add_common(dec)
    dec.set_defaults(func=_cmd_decompose)

    chn = subs.add_parser("chains", help="feasible chain enumeration")
    chn.add_argument("--data")
    chn.add_argument("--config")
    chn.add_argument("--treatments", type=int)
    chn.add_argument("--complete", action="store_true",
                     help="assume complete support instead of reading data")
    chn.add_argument("--target", type=int, default=1)
    chn.add_argument("--mode", default="prop3", choices=["prop3", "prop4"])
    chn.add_argument("--trim", type=float, default=None)
    chn.add_argument("--dot", help="write a graph description file here")
    _add_common(chn)
    chn.set_defaults(func=_cmd_chains)

    tst = subs.add_parser("test", help="stack routes and test their equality")
    tst.add_argument("--data", required=True)
    tst.add_argument("--config", required=True)
    tst.add_argument("--target", type=int, default=1)
    tst.add_argument("--estimand", default="mate", choices=["mate", "half_sum"])
    tst.add_argument("--period", type=int, default=None)
    tst.add_argument("--chains", default="auto",
                     help='"auto" or semicolon-separated chains like "0,1;0,2,1"')
    tst.add_argument("--omega", default="influence",
                     choices=["influence", "bootstrap"])
    tst.add_argument("--bootstrap", type=int, default=200)
    tst.add_argument("--route-cap", dest="route_cap", type=int, default=64)
    tst.add_argument("--trim", type=float, default=None)
    tst.add_argument("--seed", type=int, default=0)
    _add_common(tst)
    tst.set_defaults(func=_cmd_test)

    sim = subs.add_parser("simulate", help="draw a synthetic panel")
    sim.add_argument("--spec", required=True)
    sim.add_argument("--n", type=int, required=True)
    sim.add_argument("--seed", type=int, default=None)
    sim.add_argument("--oracle", help="population-truth JSON path (default <out>.oracle.json)")
    sim.add_argument("--out", required=True, help="panel CSV path")
    _add_common(sim, add_out=False)
    sim.set_defaults(func=_cmd_simulate)
    return parser


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    if getattr(args, "verbose", False):
        logging.basicConfig(level=logging.INFO, stream=sys.stderr,
                            format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (MatekitError, OSError) as exc:
        sys.stderr.write(f"error: {exc}\n")
        return 2


if __name__ == "__main__":
    sys.exit(main())
