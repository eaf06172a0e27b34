"""Command-line surface: generate cohorts, run pipeline grids, report.

    connectome-kit generate   --config gen.json  [--seed N] [--out DIR]
    connectome-kit run        --config run.json  --grid grid.json
                              [--seed N] [--jobs N] [--out DIR]
    connectome-kit report     [--config report.json] [--out DIR]
    connectome-kit biomarkers --config run.json [--permutations N]
                              [--seed N] [--out DIR]

Exit codes: 0 success, 2 configuration error, 3 runtime failure. Paths
named inside config files are resolved relative to --out.
"""

from __future__ import annotations

import argparse
import json
import sys
import warnings
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import evaluate, figures, runner, synthdata

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_RUNTIME = 3

_FACTOR_CANDIDATES = ("atlas_method", "n_regions", "matrix_kind", "classifier",
                      "scheme", "subsample")


def _load_json(path, what):
    p = Path(path)
    if not p.exists():
        raise ValueError(f"{what} file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as err:
        raise ValueError(f"{what} is not valid JSON ({err})") from err


def cmd_generate(args):
    raw = _load_json(args.config, "config")
    name = raw.pop("name", "cohort")
    master_seed = raw.pop("master_seed", 0)
    if args.seed is not None:
        master_seed = args.seed
    config = synthdata.config_from_dict(raw)
    cohort = synthdata.generate_cohort(config, master_seed)
    out = Path(args.out) / name
    synthdata.write_cohort(cohort, out)
    manifest = runner.RunManifest(
        config_hash=runner.config_hash({"cohort": raw, "master_seed": master_seed}),
        cohort_hash=runner.cohort_fingerprint(cohort),
        module_versions=runner._module_versions())
    manifest.write(out / "generate_manifest.json")
    print(f"wrote cohort with {len(cohort.subjects)} subjects to {out}")
    return EXIT_OK


def _split_run_config(raw, args):
    raw = dict(raw)
    cohort_dir = raw.pop("cohort_dir", "cohort")
    fractions = raw.pop("learning_fractions", None)
    known = set(runner.PipelineConfig.__dataclass_fields__)
    unknown = set(raw) - known
    if unknown:
        raise ValueError(f"unknown run config fields: {sorted(unknown)}")
    config = runner.PipelineConfig(**raw)
    if args.seed is not None:
        config.master_seed = args.seed
    config.validate()
    return config, Path(args.out) / cohort_dir, fractions


def cmd_run(args):
    raw = _load_json(args.config, "config")
    config, cohort_dir, fractions = _split_run_config(raw, args)
    grid = _load_json(args.grid, "grid") if args.grid else {}
    if not cohort_dir.exists():
        raise ValueError(f"cohort directory not found: {cohort_dir}")
    cohort = synthdata.load_cohort(cohort_dir)
    records = runner.run_grid(cohort, config, grid, args.out, jobs=args.jobs,
                              fractions=fractions)
    print(f"wrote {len(records)} score rows to {Path(args.out) / 'scores.csv'}")
    return EXIT_OK


def _varied_factors(records):
    varied, skipped = [], []
    for factor in _FACTOR_CANDIDATES:
        levels = {str(getattr(r, factor)) for r in records}
        (varied if len(levels) > 1 else skipped).append(factor)
    return varied, skipped


def _pairwise_comparisons(records, factors):
    """Wilcoxon tests between level pairs of each factor, paired over
    pipelines that differ only in that factor (and over folds)."""
    comparisons = []
    for factor in factors:
        levels = sorted({str(getattr(r, factor)) for r in records})
        for a_idx in range(len(levels)):
            for b_idx in range(a_idx + 1, len(levels)):
                level_a, level_b = levels[a_idx], levels[b_idx]
                paired = {}
                for r in records:
                    other = tuple(str(getattr(r, f)) for f in _FACTOR_CANDIDATES
                                  if f != factor) + (r.fold,)
                    paired.setdefault(other, {})[str(getattr(r, factor))] = \
                        r.accuracy
                xs, ys = [], []
                for values in paired.values():
                    if level_a in values and level_b in values:
                        xs.append(values[level_a])
                        ys.append(values[level_b])
                if len(xs) < 6:
                    continue
                p = evaluate.wilcoxon_pairwise(xs, ys)
                comparisons.append({
                    "factor": factor, "level_a": level_a, "level_b": level_b,
                    "n_pairs": len(xs),
                    "median_diff": float(np.median(np.array(ys) - np.array(xs))),
                    "p_value": p,
                })
    if comparisons:
        adjusted = evaluate.holm_bonferroni([c["p_value"] for c in comparisons])
        for c, adj in zip(comparisons, adjusted):
            c["p_value_corrected"] = float(adj)
    return comparisons


def _text_table(rows, columns):
    widths = [max(len(str(r[c])) for r in rows + [dict(zip(columns, columns))])
              for c in columns]
    lines = ["  ".join(c.ljust(w) for c, w in zip(columns, widths))]
    lines.append("  ".join("-" * w for w in widths))
    for r in rows:
        lines.append("  ".join(str(r[c]).ljust(w)
                               for c, w in zip(columns, widths)))
    return "\n".join(lines)


def cmd_report(args):
    settings = _load_json(args.config, "config") if args.config else {}
    out = Path(args.out)
    scores_path = out / settings.get("scores", "scores.csv")
    if not scores_path.exists():
        raise ValueError(f"scores file not found: {scores_path}")
    records = runner.read_scores_csv(scores_path)
    if not records:
        raise ValueError("scores.csv is empty")

    varied, skipped = _varied_factors(records)
    for factor in skipped:
        warnings.warn(f"factor {factor!r} has a single level; skipped")

    fig_dir = out / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    report_lines = []

    effects = []
    if varied:
        effects = evaluate.anova_effects(records, varied)
        (out / "effects.json").write_text(json.dumps(
            [vars(e) for e in effects], sort_keys=True, indent=2))
        figures.save_effects_figure(effects, fig_dir / "effects.png")
        rows = [{"factor": e.factor, "level": e.level,
                 "effect_pts": f"{100 * e.coefficient:+.2f}",
                 "ci95": f"[{100 * e.ci_low:+.2f}, {100 * e.ci_high:+.2f}]"}
                for e in effects]
        report_lines += ["Accuracy effects relative to the mean (points):",
                         _text_table(rows, ["factor", "level", "effect_pts",
                                            "ci95"]), ""]

    comparisons = _pairwise_comparisons(records, varied)
    (out / "comparisons.json").write_text(json.dumps(comparisons, sort_keys=True,
                                                     indent=2))
    if comparisons:
        rows = [{**c, "p_value": f"{c['p_value']:.4g}",
                 "p_value_corrected": f"{c['p_value_corrected']:.4g}",
                 "median_diff": f"{100 * c['median_diff']:+.2f}"}
                for c in comparisons]
        report_lines += ["Pairwise comparisons (signed-rank, step-down "
                         "corrected):",
                         _text_table(rows, ["factor", "level_a", "level_b",
                                            "n_pairs", "median_diff", "p_value",
                                            "p_value_corrected"]), ""]

    summaries = {}
    for factor in varied:
        with warnings.catch_warnings():
            warnings.simplefilter("ignore")
            summaries[factor] = evaluate.top_decile(records, factor)
    (out / "summary.json").write_text(json.dumps(summaries, sort_keys=True,
                                                 indent=2))
    level_scores = {f: {lvl: [r.accuracy for r in records
                              if str(getattr(r, f)) == lvl]
                        for lvl in {str(getattr(r, f)) for r in records}}
                    for f in varied}
    if varied:
        figures.save_comparison_figure(level_scores, fig_dir / "comparisons.png")

    curves_path = out / "curves.csv"
    if curves_path.exists():
        rows = _read_curves(curves_path)
        summary = _summarize_curves(rows)
        figures.save_curve_figure(summary, fig_dir / "curves.png")
        report_lines += ["Learning curve (mean accuracy per training fraction):",
                         _text_table([{"fraction": s["fraction"],
                                       "mean": f"{100 * s['mean_accuracy']:.2f}%",
                                       "stderr": f"{100 * s['stderr']:.2f}"}
                                      for s in summary],
                                     ["fraction", "mean", "stderr"]), ""]

    (out / "report.txt").write_text("\n".join(report_lines) + "\n")
    print(f"report written under {out} (effects.json, comparisons.json, "
          f"summary.json, report.txt, figures/)")
    return EXIT_OK


def _read_curves(path):
    lines = Path(path).read_text().strip().splitlines()
    rows = []
    for line in lines[1:]:
        config, fraction, fold, accuracy = line.split(",")
        rows.append({"config": config, "fraction": float(fraction),
                     "fold": int(fold), "accuracy": float(accuracy)})
    return rows


def _summarize_curves(rows):
    fractions = sorted({r["fraction"] for r in rows})
    summary = []
    for fraction in fractions:
        accs = np.array([r["accuracy"] for r in rows
                         if r["fraction"] == fraction])
        summary.append({
            "fraction": fraction, "mean_accuracy": float(accs.mean()),
            "stderr": float(accs.std(ddof=1) / np.sqrt(len(accs)))
            if len(accs) > 1 else 0.0})
    return summary


def cmd_biomarkers(args):
    raw = _load_json(args.config, "config")
    _, cohort_dir, _ = _split_run_config(raw, args)
    out = Path(args.out)
    if not cohort_dir.exists():
        raise ValueError(f"cohort directory not found: {cohort_dir}")
    cohort = synthdata.load_cohort(cohort_dir)

    scores_path = out / "scores.csv"
    if not scores_path.exists():
        raise ValueError(f"no completed run found: {scores_path} missing")
    records = runner.read_scores_csv(scores_path)
    best = _best_pipeline(records)
    pipeline_dir, config = _find_pipeline_dir(out, best)
    if args.seed is not None:
        config.master_seed = args.seed

    bundles = runner.load_fold_bundles(pipeline_dir, cohort.lattice_dims)
    result = runner.run_biomarkers(cohort, config, bundles,
                                   n_permutations=args.permutations,
                                   seed=args.seed or 0)
    payload = {
        "pipeline": asdict(config),
        "n_permutations": result["n_permutations"],
        "n_consensus_regions": int(result["consensus"].n_regions),
        "consensus_region_sizes": result["consensus"].region_sizes.tolist(),
        "edges": result["edges"],
    }
    (out / "biomarkers.json").write_text(json.dumps(payload, sort_keys=True,
                                                    indent=2))
    fig_dir = out / "figures"
    fig_dir.mkdir(parents=True, exist_ok=True)
    figures.save_pvalue_figure(result["edges"], fig_dir / "biomarkers.png")
    rows = [{**e, "weight": f"{e['weight']:+.4f}",
             "p_value": f"{e['p_value']:.4g}"} for e in result["edges"][:20]]
    (out / "biomarkers.txt").write_text(_text_table(
        rows, ["region_i", "region_j", "weight", "p_value", "stronger_in"])
        + "\n")
    print(f"biomarker report written to {out / 'biomarkers.json'} "
          f"({len(result['edges'])} edges, "
          f"{payload['n_consensus_regions']} consensus regions)")
    return EXIT_OK


def _best_pipeline(records):
    groups = {}
    for r in records:
        groups.setdefault(r.pipeline_key(), []).append(r.accuracy)
    ranked = sorted(groups.items(), key=lambda kv: (-float(np.mean(kv[1])),
                                                    str(kv[0])))
    best_key = ranked[0][0]
    return next(r for r in records if r.pipeline_key() == best_key)


def _find_pipeline_dir(out, best):
    """Locate the artifact directory of the best-scoring pipeline by
    matching its recorded options against each pipeline.json."""
    pipelines_root = out / "pipelines"
    if not pipelines_root.exists():
        raise ValueError(f"no pipeline artifacts under {pipelines_root}")
    for pdir in sorted(pipelines_root.iterdir()):
        meta = pdir / "pipeline.json"
        if not meta.exists():
            continue
        payload = json.loads(meta.read_text())
        if all(payload[key] == getattr(best, key)
               for key in ("atlas_method", "n_regions", "matrix_kind",
                           "classifier", "scheme", "subsample")):
            config = runner.PipelineConfig(**payload)
            return pdir, config.validate()
    raise ValueError("no pipeline artifacts match the best-scoring options")


def build_parser():
    parser = argparse.ArgumentParser(
        prog="connectome-kit",
        description="connectome prediction pipelines on synthetic multi-site "
                    "cohorts")
    sub = parser.add_subparsers(dest="command", required=True)
    for name, fn, needs_config in (
            ("generate", cmd_generate, True),
            ("run", cmd_run, True),
            ("report", cmd_report, False),
            ("biomarkers", cmd_biomarkers, True)):
        p = sub.add_parser(name)
        p.add_argument("--config", required=needs_config,
                       help="JSON configuration file")
        p.add_argument("--grid", help="JSON pipeline grid (run only)")
        p.add_argument("--seed", type=int, default=None,
                       help="override the config master seed")
        p.add_argument("--jobs", type=int, default=1,
                       help="parallel pipeline jobs")
        p.add_argument("--permutations", type=int, default=1000,
                       help="label permutations (biomarkers only)")
        p.add_argument("--out", default=".", help="output directory root")
        p.set_defaults(fn=fn)
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    Path(args.out).mkdir(parents=True, exist_ok=True)
    try:
        return args.fn(args)
    except (ValueError, NotImplementedError, FileNotFoundError) as err:
        print(f"configuration error: {err}", file=sys.stderr)
        return EXIT_CONFIG
    except Exception as err:  # noqa: BLE001 - runtime failures exit 3
        print(f"runtime failure: {type(err).__name__}: {err}", file=sys.stderr)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
