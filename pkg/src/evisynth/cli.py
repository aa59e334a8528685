"""Command-line surface: simulate, fit, summarize, calibrate.

All settings travel in config files; flags are long-form only and carry
just paths, the seed and the parallelism degree. Every command writes a
run manifest sufficient to reproduce it. Exit codes: 0 success,
2 validation failure, 3 convergence failure, 4 I/O error.
"""

from __future__ import annotations

import argparse
import hashlib
import sys
import time
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import RNG_NAME, __version__, kernel_backend
from . import config as cfgmod
from .calibrate import run_sbc
from .errors import ConfigError, DataError, EvisynthError
from .ingest import load_bundle
from .inference import (BetaBinomialModel, SamplerConfig, engine_info,
                        run_chains)
from .likelihoods import build_model
from .model import ModelConfig, expit
from .simulator import (SimConfig, draw_truth, generate_bundle,
                        scenario_halving, write_truth)
from .strata import Frame, StrataConfig
from .summaries import (TABLE1_FAMILIES, TABLE_COLUMNS, MarginSet,
                        build_long_summary, build_wide_table, density_strip,
                        format_wide_table, margin_series, target_flags,
                        write_csv, write_json)

EXIT_OK = 0
EXIT_VALIDATION = 2
EXIT_CONVERGENCE = 3
EXIT_IO = 4


def _sha256_file(path: Path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _write_run_manifest(out_dir: Path, command: str, seed, configs: dict,
                        checksums: dict, diagnostics: dict, t0: float) -> None:
    payload = {
        "command": command,
        "engine_version": __version__,
        "rng": RNG_NAME,
        "kernel_backend": kernel_backend(),
        "seed": seed,
        "config_sha256": {k: _sha256_file(v) for k, v in configs.items()},
        "data_checksums": checksums,
        "diagnostics": diagnostics,
        "wall_time_s": round(time.perf_counter() - t0, 3),
    }
    write_json(out_dir / "run_manifest.json", payload)


def cmd_simulate(args) -> int:
    t0 = time.perf_counter()
    kv = cfgmod.parse_kv_file(args.config)
    frame = Frame(StrataConfig.from_kv(kv))
    model_config = ModelConfig.from_kv(kv)
    sim = SimConfig.from_kv(kv)
    scenario = args.scenario or sim.scenario
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    truth = draw_truth(frame, model_config, sim, seed=args.seed)
    if scenario == "halving":
        truth = scenario_halving(truth)
    elif scenario != "prior":
        raise ConfigError(f"unknown scenario {scenario!r} (prior | halving)")
    bundle, manifest_path = generate_bundle(truth, out / "data")
    write_truth(truth, out / "truth.json")
    _write_run_manifest(out, "simulate", args.seed, {"config": args.config},
                        bundle.fingerprint(), {"scenario": scenario}, t0)
    print(f"simulate: wrote bundle to {out / 'data'} "
          f"({len(bundle.tables)} sources, scenario={scenario})")
    return EXIT_OK


def _self_test() -> int:
    """Conjugate-oracle check: Beta-Binomial posterior moments from the
    engine vs the analytic posterior, three (y, n, prior) triples."""
    triples = ((7, 10, 1.0, 1.0), (2, 40, 2.0, 5.0), (23, 30, 0.5, 0.5))
    ok = True
    for y, n, a, b in triples:
        toy = BetaBinomialModel(y=y, n=n, a=a, b=b)
        cfg = SamplerConfig(n_chains=4, n_warmup=500, n_keep=1500, seed=2024)
        post, diag = run_chains(toy, cfg)
        p = expit(post.flat()[:, 0])
        mean_a, var_a = toy.posterior_mean_var()
        ess = max(float(diag.ess[0]), 10.0)
        se_mean = p.std(ddof=1) / np.sqrt(ess)
        err = abs(float(p.mean()) - mean_a)
        line_ok = err < 2 * se_mean + 1e-4
        ok &= line_ok
        print(f"self-test Beta({a},{b})+Bin({y}/{n}): mcmc mean {p.mean():.4f} "
              f"analytic {mean_a:.4f} (2se={2 * se_mean:.4f}) "
              f"{'ok' if line_ok else 'FAIL'}")
    return EXIT_OK if ok else EXIT_CONVERGENCE


def cmd_fit(args) -> int:
    if args.self_test:
        return _self_test()
    t0 = time.perf_counter()
    for name in ("manifest", "model_config", "sampler_config"):
        if getattr(args, name) is None:
            raise ConfigError(f"fit requires --{name.replace('_', '-')}")
    kv = cfgmod.parse_kv_file(args.model_config)
    frame = Frame(StrataConfig.from_kv(kv))
    model_config = ModelConfig.from_kv(kv)
    bundle = load_bundle(args.manifest, frame, model_config)
    model = build_model(frame, bundle.pop, bundle.tables, model_config)
    sampler = SamplerConfig.from_kv(cfgmod.parse_kv_file(args.sampler_config))
    if args.seed is not None:
        sampler = replace(sampler, seed=args.seed)
    post, diag = run_chains(model, sampler, threads=args.threads)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    header = ["chain", "draw"] + list(post.names)
    rows = []
    for c in range(post.draws.shape[0]):
        for i in range(post.draws.shape[1]):
            rows.append([c, i] + [float(v) for v in post.draws[c, i]])
    write_csv(out / "draws.csv", header, rows)
    write_json(out / "diagnostics.json", {
        "names": post.names,
        "rhat": diag.rhat,
        "ess": diag.ess,
        "acceptance": diag.acceptance,
        "divergence_flags": diag.divergence_flags,
        "limited": diag.limited,
    })
    diagnostics = {"max_rhat": diag.max_rhat(), "min_ess": diag.min_ess(),
                   "n_divergences": len(diag.divergence_flags)}
    _write_run_manifest(out, "fit", sampler.seed,
                        {"manifest": args.manifest,
                         "model_config": args.model_config,
                         "sampler_config": args.sampler_config},
                        bundle.fingerprint(), diagnostics, t0)
    max_rhat = diag.max_rhat()
    print(f"fit: {post.draws.shape[0]} chains x {post.draws.shape[1]} draws, "
          f"max R-hat {max_rhat:.3f}, min ESS {diag.min_ess():.0f}")
    if max_rhat > sampler.rhat_threshold:
        print(f"fit: convergence failure (R-hat {max_rhat:.3f} > "
              f"{sampler.rhat_threshold}); draws written", file=sys.stderr)
        return EXIT_CONVERGENCE
    return EXIT_OK


def cmd_summarize(args) -> int:
    t0 = time.perf_counter()
    draws_dir = Path(args.draws)
    draws_path = draws_dir / "draws.csv"
    if not draws_path.exists():
        print(f"summarize: no draws at {draws_dir}", file=sys.stderr)
        return EXIT_IO
    manifest = args.manifest
    model_config_path = args.model_config
    kv = cfgmod.parse_kv_file(model_config_path)
    frame = Frame(StrataConfig.from_kv(kv))
    model_config = ModelConfig.from_kv(kv)
    bundle = load_bundle(manifest, frame, model_config)
    model = build_model(frame, bundle.pop, bundle.tables, model_config)

    with open(draws_path, encoding="utf-8") as fh:
        header = fh.readline().strip().split(",")
        body = np.loadtxt(fh, delimiter=",", ndmin=2)
    if list(header[2:]) != list(model.names):
        raise DataError("draws.csv columns do not match the model build")
    theta_draws = body[:, 2:]

    c = frame.config
    first_year, last_year = c.years[0], c.years[-1]
    fams = [(name, groups) for name, groups in TABLE1_FAMILIES]
    m1 = MarginSet.build(frame, fams)
    s1 = margin_series(model, theta_draws, m1)
    groups2 = [(g, (g,)) for g in c.exposures]
    m2 = MarginSet.build(frame, groups2, by_age=True)
    s2 = margin_series(model, theta_draws, m2)

    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    regions = list(c.regions) + (["England"] if len(c.regions) == 2 else [])
    keys1 = [(fam, "ALL", region) for fam, _ in fams for region in regions]
    table1 = build_wide_table(s1, keys1, first_year, last_year)
    keys2 = [(g, age, region) for g in c.exposures for age in c.ages
             for region in regions]
    table2 = build_wide_table(s2, keys2, first_year, last_year)
    write_csv(out / "table1.csv", ["margin", "age", "region"] + list(TABLE_COLUMNS),
              [[r["margin"], r["age"], r["region"]] + [r[c] for c in TABLE_COLUMNS]
               for r in table1])
    write_csv(out / "table2.csv", ["margin", "age", "region"] + list(TABLE_COLUMNS),
              [[r["margin"], r["age"], r["region"]] + [r[c] for c in TABLE_COLUMNS]
               for r in table2])
    disp = format_wide_table(table1)
    write_csv(out / "table1_formatted.csv",
              ["margin", "age", "region", "count_first", "count_last", "p",
               "prev100k_first", "prev100k_last"],
              [[d["margin"], d["age"], d["region"], d["count_first"],
                d["count_last"], d["p"], d["prev100k_first"],
                d["prev100k_last"]] for d in disp])
    long_rows = build_long_summary(s1, first_year, last_year)
    write_csv(out / "summary_long.csv",
              ["margin", "age", "region", "year", "outcome", "median", "lo2_5",
               "hi97_5", "p_decrease", "p_increase"],
              [[r.margin, r.age, r.region, r.year, r.outcome, r.median, r.lo,
                r.hi, r.p_decrease, r.p_increase] for r in long_rows])

    # diagnosis-target flags and density strips per family/England/year
    flag_rows, strip_rows = [], []
    for fam, _ in fams:
        for year in c.years:
            pd_draws = s1.column("prop_diag", fam, "England" if len(c.regions) == 2
                                 else c.regions[0], year)
            flag, prob = target_flags(pd_draws, threshold=args.target)
            flag_rows.append([fam, year, bool(flag), prob])
            if len(pd_draws) >= 500:
                strip = density_strip(pd_draws, grid=121)
                for value, dens in strip:
                    strip_rows.append([fam, year, "prop_diag", float(value),
                                       float(dens)])
    write_csv(out / "target_flags.csv",
              ["margin", "year", "median_reaches_target", "posterior_prob"],
              flag_rows)
    write_csv(out / "density_strips.csv",
              ["margin", "year", "outcome", "value", "density"], strip_rows)
    write_json(out / "summary.json", {
        "table1": table1, "table2": table2,
        "long": [r.__dict__ for r in long_rows],
        "target_flags": [{"margin": r[0], "year": r[1], "flag": r[2],
                          "prob": r[3]} for r in flag_rows],
    })
    _write_run_manifest(out, "summarize", None,
                        {"model_config": model_config_path,
                         "manifest": manifest},
                        bundle.fingerprint(), {}, t0)
    print(f"summarize: wrote tables for {len(keys1)} + {len(keys2)} margins to {out}")
    return EXIT_OK


def cmd_calibrate(args) -> int:
    t0 = time.perf_counter()
    if args.replicates < 20:
        raise ConfigError("calibrate requires --replicates >= 20")
    kv = cfgmod.parse_kv_file(args.config)
    frame = Frame(StrataConfig.from_kv(kv))
    model_config = ModelConfig.from_kv(kv)
    sim = SimConfig.from_kv(kv)
    sampler = SamplerConfig.from_kv(cfgmod.parse_kv_file(args.sampler_config))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    report = run_sbc(frame, model_config, sim, sampler,
                     n_replicates=args.replicates, seed=args.seed,
                     work_dir=out / "replicates", threads=args.threads)
    write_json(out / "calibration.json", report.as_dict())
    rows = []
    for fam in report.rank_hist:
        for b, count in enumerate(report.rank_hist[fam]):
            rows.append([fam, b, int(count), int(report.pooled_hist[fam][b])])
    write_csv(out / "rank_histograms.csv",
              ["family", "bin", "rotating_count", "pooled_count"], rows)
    _write_run_manifest(out, "calibrate", args.seed,
                        {"config": args.config,
                         "sampler_config": args.sampler_config}, {},
                        {"coverage": report.coverage, "chi2_p": report.chi2_p},
                        t0)
    for fam in sorted(report.coverage):
        print(f"calibrate: {fam:6s} coverage {report.coverage[fam]:.3f} "
              f"(n={report.coverage_n[fam]}), rank chi2 p={report.chi2_p[fam]:.3f}")
    print(f"calibrate: {report.n_replicates} replicates in "
          f"{report.elapsed_s:.0f}s; {len(report.failures)} flagged fits")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="evisynth",
        description="Bayesian multi-source evidence synthesis for stratified "
                    "HIV burden estimation")
    parser.add_argument("--version", action="version",
                        version=f"evisynth {__version__} "
                                f"[{engine_info()}; rng={RNG_NAME}]")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic bundle")
    p.add_argument("--config", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--scenario", choices=("prior", "halving"))
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("fit", help="sample the posterior for a bundle")
    p.add_argument("--manifest")
    p.add_argument("--model-config", dest="model_config")
    p.add_argument("--sampler-config", dest="sampler_config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", default="fit-out")
    p.add_argument("--threads", type=int, default=1)
    p.add_argument("--self-test", dest="self_test", action="store_true")
    p.set_defaults(func=cmd_fit)

    p = sub.add_parser("summarize", help="tables and plot data from draws")
    p.add_argument("--draws", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--model-config", dest="model_config", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--target", type=float, default=0.90)
    p.set_defaults(func=cmd_summarize)

    p = sub.add_parser("calibrate", help="simulation-based calibration loop")
    p.add_argument("--config", required=True)
    p.add_argument("--sampler-config", dest="sampler_config", required=True)
    p.add_argument("--replicates", type=int, required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--threads", type=int, default=1)
    p.set_defaults(func=cmd_calibrate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION
    except OSError as exc:
        print(f"i/o error: {exc}", file=sys.stderr)
        return EXIT_IO
    except EvisynthError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_VALIDATION


if __name__ == "__main__":
    sys.exit(main())
