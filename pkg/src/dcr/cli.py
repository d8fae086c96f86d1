"""Command-line surface: sampling runs, ablations, hyperparameter sweeps, and
benchmark evaluation, all emitting manifest-linked, plot-ready tables.

Configuration precedence: flags > config file > environment > scenario preset
> built-in defaults. Exit codes: 0 success, 1 usage/configuration error,
2 runtime failure under --strict.
"""

from __future__ import annotations

import argparse
import csv
import dataclasses
import json
import os
import sys
import time
from pathlib import Path

import numpy as np

from . import __version__
from .bench import BenchPrompt, load_fixture_suite, load_suite
from .errors import ConfigurationError, SuiteFormatError, ValidationError
from .guidance import GuidanceConfig
from .metrics import (ItemRow, aggregate_report, report_to_csv, report_to_json,
                      toy_collapse_fraction, wilson_interval)
from .sampling import (BatchItem, SamplerConfig, SchedulerKind, Variant,
                       run_batch, write_traces_jsonl)
from .toy import (ATTRACTOR, TARGET, BiasScenario, ToyDenoiser, cosine_schedule,
                  default_scenario, load_scenario, mode_assignment)

PAPER_DEFAULT_GUIDANCE = dict(w_attr=3.0, eta=1.0, gamma=2.0, r_s=0.2, r_e=0.8,
                              eps_stab=1e-8)


class _Parser(argparse.ArgumentParser):
    """argparse exits with status 2 on usage errors; the documented contract
    is 1 for usage/config problems."""

    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(1)


def _load_config_file(path: str | None) -> dict:
    if not path:
        return {}
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except (OSError, json.JSONDecodeError) as exc:
        raise ConfigurationError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(doc, dict):
        raise ConfigurationError("config file must hold a JSON object")
    return doc


def _setting(name, flag_value, cfg_file: dict, default):
    """flags > config file > default (environment only feeds endpoints)."""
    if flag_value is not None:
        return flag_value
    if name in cfg_file:
        return cfg_file[name]
    return default


def _resolve_scenario(arg: str | None) -> BiasScenario:
    if arg in (None, "default"):
        return default_scenario()
    return load_scenario(arg)


def _parse_interval(text: str) -> tuple[float, float]:
    try:
        lo, hi = text.split(":")
        return float(lo), float(hi)
    except ValueError:
        raise ConfigurationError(
            f"interval must look like '0.2:0.8', got {text!r}") from None


def _resolve_guidance(args, cfg_file: dict, scenario: BiasScenario) -> GuidanceConfig:
    preset = scenario.guidance
    base = {
        "w": preset.w if preset else None,
        "w_attr": preset.w_attr if preset else PAPER_DEFAULT_GUIDANCE["w_attr"],
        "eta": preset.eta if preset else PAPER_DEFAULT_GUIDANCE["eta"],
        "gamma": preset.gamma if preset else PAPER_DEFAULT_GUIDANCE["gamma"],
        "r_s": preset.r_s if preset else PAPER_DEFAULT_GUIDANCE["r_s"],
        "r_e": preset.r_e if preset else PAPER_DEFAULT_GUIDANCE["r_e"],
        "eps_stab": preset.eps_stab if preset else PAPER_DEFAULT_GUIDANCE["eps_stab"],
    }
    w = _setting("w", args.w, cfg_file, base["w"])
    if w is None:
        raise ConfigurationError(
            "guidance scale w is required (no default): pass --w or use a "
            "scenario with a guidance preset")
    interval = args.interval
    if interval is not None:
        r_s, r_e = _parse_interval(interval)
    else:
        r_s = _setting("r_s", None, cfg_file, base["r_s"])
        r_e = _setting("r_e", None, cfg_file, base["r_e"])
    return GuidanceConfig(
        w=float(w),
        w_attr=float(_setting("w_attr", args.w_attr, cfg_file, base["w_attr"])),
        eta=float(_setting("eta", args.eta, cfg_file, base["eta"])),
        gamma=float(_setting("gamma", args.gamma, cfg_file, base["gamma"])),
        r_s=float(r_s), r_e=float(r_e),
        eps_stab=float(_setting("eps_stab", None, cfg_file, base["eps_stab"])),
    )


def _manifest(command: str, args_dict: dict, sampler_cfg: SamplerConfig | None,
              scenario: BiasScenario | None, extra: dict | None = None) -> dict:
    args_dict = {k: v for k, v in args_dict.items()
                 if k != "func" and isinstance(v, (str, int, float, bool, dict,
                                                   list, type(None)))}
    doc = {
        "tool": "dcr",
        "version": __version__,
        "command": command,
        "timestamp_utc": time.strftime("%Y-%m-%dT%H:%M:%SZ", time.gmtime()),
        "args": args_dict,
        "endpoints": {
            "judge": os.environ.get("DCR_JUDGE_ENDPOINT"),
            "embeddings": os.environ.get("DCR_EMBED_ENDPOINT"),
            "text": os.environ.get("DCR_TEXT_ENDPOINT"),
        },
    }
    if sampler_cfg is not None:
        doc["sampler"] = {
            "T": sampler_cfg.T,
            "scheduler_kind": sampler_cfg.scheduler_kind.value,
            "seed": sampler_cfg.seed,
            "variant": sampler_cfg.variant.value,
            "guidance": dataclasses.asdict(sampler_cfg.guidance),
        }
    if scenario is not None:
        doc["scenario"] = {
            "means": scenario.base.means.tolist(),
            "weights": scenario.base.weights.tolist(),
            "sigma0": scenario.base.sigma0,
            "pi_major": scenario.pi_major,
            "leakage_beta": scenario.leakage_beta,
            "dominant_index": scenario.dominant_index,
            "rare_index": scenario.rare_index,
            "steps": scenario.steps,
        }
    if extra:
        doc.update(extra)
    return doc


def _write_manifest(outdir: Path, doc: dict) -> str:
    path = outdir / "manifest.json"
    path.write_text(json.dumps(doc, indent=2) + "\n", encoding="utf-8")
    return path.name


def _sampler_config(args, cfg_file, scenario, variant) -> SamplerConfig:
    guidance = _resolve_guidance(args, cfg_file, scenario)
    return SamplerConfig(
        T=int(_setting("steps", args.steps, cfg_file, scenario.steps)),
        guidance=guidance,
        variant=Variant(variant),
        scheduler_kind=SchedulerKind(_setting("scheduler", args.scheduler, cfg_file,
                                              SchedulerKind.ANCESTRAL_DDPM.value)),
        seed=int(_setting("seed", args.seed, cfg_file, 0)),
    )


def _run_scenario_batch(scenario, cfg: SamplerConfig, n: int, item_id="scenario"):
    backend = ToyDenoiser(scenario, cosine_schedule(cfg.T))
    return run_batch(backend, [BatchItem(item_id, TARGET, ATTRACTOR)], cfg, n)


def cmd_sample(args) -> int:
    cfg_file = _load_config_file(args.config)
    scenario = _resolve_scenario(args.scenario)
    cfg = _sampler_config(args, cfg_file, scenario, args.variant)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    results = _run_scenario_batch(scenario, cfg, args.n)
    failures = [r for r in results if r.error is not None]
    manifest = _manifest("sample", vars(args) | {"config_file": cfg_file},
                         cfg, scenario, {"n": args.n, "failures": len(failures)})
    mref = _write_manifest(outdir, manifest)
    write_traces_jsonl((r.trace for r in results if r.trace is not None),
                       outdir / "traces.jsonl", manifest_ref=mref)
    with (outdir / "samples.csv").open("w", encoding="utf-8", newline="") as fh:
        fh.write(f"# manifest: {mref}\n")
        writer = csv.writer(fh)
        dim = scenario.dim
        writer.writerow(["trajectory_id", "replicate"]
                        + [f"x{i}" for i in range(dim)] + ["mode", "collapsed"])
        for r in results:
            if r.final is None:
                continue
            mode = mode_assignment(r.final, scenario)
            writer.writerow([f"{r.item_id}/{r.replicate}", r.replicate]
                            + [repr(float(v)) for v in r.final]
                            + [mode, mode == scenario.dominant_index])
    print(f"wrote {len(results) - len(failures)} trajectories to {outdir} "
          f"({len(failures)} failures)")
    if failures and args.strict:
        return 2
    return 0


ALL_VARIANTS = [v.value for v in Variant]


def _collapse_row(variant: str, results, scenario) -> dict:
    finals = [r.final for r in results if r.final is not None]
    failures = sum(1 for r in results if r.error is not None)
    frac = toy_collapse_fraction(finals, scenario)
    lo, hi = wilson_interval(int(round(frac * len(finals))), len(finals))
    return {"variant": variant, "n": len(finals), "failures": failures,
            "collapse_fraction": frac, "wilson_lo": lo, "wilson_hi": hi}


def _write_rows_csv(path: Path, rows: list[dict], manifest_ref: str) -> None:
    with path.open("w", encoding="utf-8", newline="") as fh:
        fh.write(f"# manifest: {manifest_ref}\n")
        writer = csv.DictWriter(fh, fieldnames=list(rows[0].keys()))
        writer.writeheader()
        writer.writerows(rows)


def cmd_ablate(args) -> int:
    cfg_file = _load_config_file(args.config)
    scenario = _resolve_scenario(args.scenario)
    if args.variants is None:
        variants = ALL_VARIANTS
    else:
        variants = [v for v in args.variants.split(",") if v]
        if not variants:
            raise ConfigurationError("variant list must be nonempty")
    for v in variants:
        if v not in ALL_VARIANTS:
            raise ConfigurationError(f"unknown variant '{v}' (choose from {ALL_VARIANTS})")
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = []
    cfg0 = None
    for variant in variants:
        cfg = _sampler_config(args, cfg_file, scenario, variant)
        cfg0 = cfg0 or cfg
        results = _run_scenario_batch(scenario, cfg, args.n)
        rows.append(_collapse_row(variant, results, scenario))
    manifest = _manifest("ablate", vars(args) | {"config_file": cfg_file},
                         cfg0, scenario, {"variants": variants, "n": args.n})
    mref = _write_manifest(outdir, manifest)
    _write_rows_csv(outdir / "ablate_report.csv", rows, mref)
    notes = []
    if not (os.environ.get("DCR_JUDGE_ENDPOINT")
            or os.environ.get("DCR_EMBED_ENDPOINT")):
        notes.append("no judge/embedding providers configured; "
                     "collapse fractions only")
    (outdir / "ablate_report.json").write_text(
        json.dumps({"manifest": mref, "rows": rows, "notes": notes}, indent=2) + "\n",
        encoding="utf-8")
    for row in rows:
        print(f"{row['variant']}: collapse={row['collapse_fraction']:.4f} "
              f"[{row['wilson_lo']:.4f}, {row['wilson_hi']:.4f}]")
    return 0


SWEEP_AXES = ("w-attr", "eta", "interval")


def cmd_sweep(args) -> int:
    cfg_file = _load_config_file(args.config)
    if args.axis not in SWEEP_AXES:
        raise ConfigurationError(f"sweep axis must be one of {SWEEP_AXES}")
    if not args.values:
        raise ConfigurationError("sweep needs a nonempty --values list")
    scenario = _resolve_scenario(args.scenario)
    if args.w is None and "w" not in cfg_file:
        raise ConfigurationError("sweeps require an explicit --w")
    w = float(_setting("w", args.w, cfg_file, None))
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    rows = []
    values = [v for v in args.values.split(",") if v]
    base = dict(PAPER_DEFAULT_GUIDANCE)
    for value in values:
        g = dict(base)
        if args.axis == "w-attr":
            g["w_attr"] = float(value)
            row_key = {"axis": "w-attr", "value": float(value)}
        elif args.axis == "eta":
            g["eta"] = float(value)
            row_key = {"axis": "eta", "value": float(value)}
        else:
            r_s, r_e = _parse_interval(value)
            g["r_s"], g["r_e"] = r_s, r_e
            row_key = {"axis": "interval", "value": f"{r_s}:{r_e}"}
        guidance = GuidanceConfig(w=w, **g)
        cfg = SamplerConfig(
            T=int(_setting("steps", args.steps, cfg_file, scenario.steps)),
            guidance=guidance, variant=Variant.FULL_DCR,
            scheduler_kind=SchedulerKind(_setting("scheduler", args.scheduler,
                                                  cfg_file,
                                                  SchedulerKind.ANCESTRAL_DDPM.value)),
            seed=int(_setting("seed", args.seed, cfg_file, 0)))
        results = _run_scenario_batch(scenario, cfg, args.n)
        rows.append(row_key | {k: v for k, v in
                               _collapse_row("full-dcr", results, scenario).items()
                               if k != "variant"})
    manifest = _manifest("sweep", vars(args) | {"config_file": cfg_file}, None,
                         scenario, {"axis": args.axis, "values": values, "w": w})
    mref = _write_manifest(outdir, manifest)
    _write_rows_csv(outdir / "sweep_report.csv", rows, mref)
    (outdir / "sweep_report.json").write_text(
        json.dumps({"manifest": mref, "rows": rows}, indent=2) + "\n",
        encoding="utf-8")
    for row in rows:
        print(f"{row['axis']}={row['value']}: collapse={row['collapse_fraction']:.4f}")
    return 0


def _toy_extractors(item: BenchPrompt, scenario: BiasScenario):
    """Factor extractors for toy-backend evaluation: the semantic factor is
    the mode assignment; rare-mode samples satisfy every declared factor,
    dominant-mode samples land in the attractor set."""
    def make(fc):
        if fc.is_threshold:
            def extract(x0, _fc=fc):
                m = mode_assignment(np.asarray(x0), scenario)
                return 0.0 if m == scenario.rare_index else 1.0
        else:
            ok = next(iter(sorted(fc.allowed)))
            bad = next(iter(sorted(fc.attractor_set))) if fc.attractor_set else "__other__"
            def extract(x0, _ok=ok, _bad=bad):
                m = mode_assignment(np.asarray(x0), scenario)
                if m == scenario.rare_index:
                    return _ok
                if m == scenario.dominant_index:
                    return _bad
                return "__other__"
        return extract
    return {fc.name: make(fc) for fc in item.factors}


def _latent_frame(latent) -> "EncodedFrame":
    import base64

    from .judge import EncodedFrame
    payload = json.dumps([float(v) for v in np.asarray(latent).reshape(-1)])
    d = int(np.asarray(latent).size)
    return EncodedFrame(data_b64=base64.b64encode(payload.encode()).decode(),
                        width=d, height=1, source_width=d, source_height=1)


def cmd_bench(args) -> int:
    cfg_file = _load_config_file(args.config)
    if args.with_judge and not os.environ.get("DCR_JUDGE_ENDPOINT"):
        raise ConfigurationError("--with-judge requires DCR_JUDGE_ENDPOINT to be set")
    suite = load_suite(args.suite, canonical=args.canonical) if args.suite \
        else load_fixture_suite()
    if args.canonical and not args.suite:
        suite.validate_canonical()
    scenario = _resolve_scenario(args.scenario)
    cfg = _sampler_config(args, cfg_file, scenario, args.variant)
    outdir = Path(args.out)
    outdir.mkdir(parents=True, exist_ok=True)
    items = [BatchItem(item.id, TARGET, ATTRACTOR) for item in suite.items]
    results = run_batch(ToyDenoiser(scenario, cosine_schedule(cfg.T)), items,
                        cfg, args.n_per_item)
    by_id = {item.id: item for item in suite.items}
    judge_cfg = None
    judge_failures = 0
    if args.with_judge:
        from .judge import JudgeClientConfig
        judge_cfg = JudgeClientConfig(audit_log=outdir / "judge_audit.jsonl")
    rows = []
    from .bench import eval_constraint
    from .errors import TransportError, VerdictError
    for r in results:
        if r.final is None:
            continue
        item = by_id[r.item_id]
        outcome = eval_constraint(r.final, item, _toy_extractors(item, scenario))
        mode = mode_assignment(r.final, scenario)
        judge_score = None
        collapsed = (mode == scenario.dominant_index) or outcome.collapsed
        if judge_cfg is not None:
            from .judge import JudgeRequest, judge
            req = JudgeRequest(prompt_p=item.prompt,
                               factors=tuple(fc.name for fc in item.factors),
                               attractor=item.attractor_prompt,
                               frames=(_latent_frame(r.final),))
            try:
                verdict = judge(req, judge_cfg)
                judge_score = verdict.score
                collapsed = verdict.collapsed
            except (TransportError, VerdictError):
                judge_failures += 1  # excluded with a visible count, never imputed
        rows.append(ItemRow(item_id=f"{r.item_id}/{r.replicate}",
                            category=item.category.value,
                            judge_score=judge_score,
                            collapsed=collapsed,
                            clip_score=None, clip_attr=None,
                            caption_alignment=None))
    report = aggregate_report(rows, by_category=True, method=cfg.variant.value)
    if judge_failures:
        report.notes.append(f"judge verdicts missing for {judge_failures} items")
    manifest = _manifest("bench", vars(args) | {"config_file": cfg_file}, cfg,
                         scenario, {"suite_items": len(suite.items),
                                    "n_per_item": args.n_per_item})
    mref = _write_manifest(outdir, manifest)
    csv_text = report_to_csv(report)
    (outdir / "bench_report.csv").write_text(
        f"# manifest: {mref}\n" + csv_text, encoding="utf-8")
    doc = json.loads(report_to_json(report))
    doc["manifest"] = mref
    (outdir / "bench_report.json").write_text(json.dumps(doc, indent=2) + "\n",
                                              encoding="utf-8")
    print(f"evaluated {len(rows)} trajectories over {len(suite.items)} items; "
          f"cvr={report.overall.mean.get('cvr', float('nan')):.4f}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="dcr", description=__doc__)
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)

    def add_common(p, with_variant=True):
        p.add_argument("--config", help="JSON config file")
        p.add_argument("--scenario", default=None,
                       help="'default' or a scenario JSON path")
        p.add_argument("--seed", type=int, default=None)
        p.add_argument("--steps", type=int, default=None)
        p.add_argument("--scheduler", default=None,
                       choices=[k.value for k in SchedulerKind])
        p.add_argument("--w", type=float, default=None)
        p.add_argument("--w-attr", dest="w_attr", type=float, default=None)
        p.add_argument("--eta", type=float, default=None)
        p.add_argument("--gamma", type=float, default=None)
        p.add_argument("--interval", default=None, help="r_s:r_e")
        if with_variant:
            p.add_argument("--variant", default=Variant.FULL_DCR.value,
                           choices=ALL_VARIANTS)
        p.add_argument("--out", required=True)

    p = sub.add_parser("sample", help="run a batch of trajectories")
    add_common(p)
    p.add_argument("--n", type=int, default=100)
    p.add_argument("--strict", action="store_true")
    p.set_defaults(func=cmd_sample)

    p = sub.add_parser("ablate", help="run the ablation variants with shared seeds")
    add_common(p, with_variant=False)
    p.add_argument("--variants", default=None,
                   help=f"comma list from {ALL_VARIANTS} (default: all)")
    p.add_argument("--n", type=int, default=500)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("sweep", help="sweep one guidance axis")
    add_common(p, with_variant=False)
    p.add_argument("--axis", required=True, choices=SWEEP_AXES)
    p.add_argument("--values", required=True,
                   help="comma list, e.g. '0,0.5,1' or '0.2:0.8,0.5:1.0'")
    p.add_argument("--n", type=int, default=500)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("bench", help="evaluate a prompt suite on the toy backend")
    add_common(p)
    p.add_argument("--suite", default=None, help="suite JSON (default: fixture suite)")
    p.add_argument("--canonical", action="store_true")
    p.add_argument("--n-per-item", dest="n_per_item", type=int, default=8)
    p.add_argument("--with-judge", dest="with_judge", action="store_true")
    p.set_defaults(func=cmd_bench)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return int(exc.code or 0)
    try:
        return args.func(args)
    except (ConfigurationError, ValidationError, SuiteFormatError, OSError) as exc:
        print(f"dcr: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
