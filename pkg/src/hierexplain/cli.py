"""Command-line entry point: ``hierexplain {benchgen,train,explain,evaluate,ablate}``.

Exit codes: 0 success, 2 configuration error, 3 input mismatch, 4 incomplete
explanation coverage. Every output file carries the configuration and seed
that produced it.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
import warnings
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import List, Optional

from .attribution import METHODS, AttributionConfig, AttributionError
from .benchgen import BenchConfigError, BenchmarkConfig, generate, read_bundle, write_bundle
from .forecaster import Forecaster, ForecasterError, ForecasterSpec, NotProbabilisticError, train
from .hier_explain import HierConfig
from .metrics import MetricError, MissingExplanationError, report
from .panel import PanelError, WindowTask, split
from .pipeline import ExplainJob, explain_targets, read_explanations, write_explanations
from .prob_explain import GradientUnavailableError
from .seeding import derive_seed

log = logging.getLogger("hierexplain")

EXIT_OK, EXIT_CONFIG, EXIT_MISMATCH, EXIT_COVERAGE = 0, 2, 3, 4


class CliError(Exception):
    def __init__(self, code: int, message: str):
        self.code = code
        super().__init__(message)


def _read_json(path: Optional[str], what: str) -> dict:
    if path is None:
        return {}
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise CliError(EXIT_CONFIG, f"cannot read {what} {path}: {exc.strerror}") from None
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise CliError(EXIT_CONFIG, f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from None
    if not isinstance(data, dict):
        raise CliError(EXIT_CONFIG, f"{path}: top level must be a JSON object")
    return data


def _levels(text: Optional[str]) -> List[float]:
    if not text:
        return []
    try:
        levels = [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise CliError(EXIT_CONFIG, f"--levels: expected comma-separated floats, got {text!r}") from None
    bad = [q for q in levels if not 0 < q < 1]
    if bad:
        raise CliError(EXIT_CONFIG, f"--levels: {bad} outside (0, 1)")
    return levels


def _run_config(args, **sections) -> dict:
    cli = {k: v for k, v in vars(args).items() if k != "func"}
    return {"command": args.command, "args": cli, **sections}


def _write_json(path: Path, payload) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n")


# benchgen


def cmd_benchgen(args) -> int:
    raw = _read_json(args.config, "benchmark config")
    if args.seed is not None:
        raw["seed"] = args.seed
    try:
        cfg = BenchmarkConfig.from_dict(raw)
    except BenchConfigError as exc:
        raise CliError(EXIT_CONFIG, f"{args.config}: {exc}") from None
    out = Path(args.out)
    echo = _run_config(args, benchmark=cfg.to_dict())
    # the destination is not provenance; keeps reruns byte-identical
    echo["args"].pop("out", None)
    try:
        for i, panel, manifest in generate(cfg, args.jobs):
            d = write_bundle(out / f"dataset_{i:03d}", panel, manifest,
                             {**echo, "dataset_index": i, "dataset_seed": derive_seed(cfg.seed, "dataset", i)})
            print(f"{d}: nodes={panel.n_nodes} vars={panel.n_variables} T={panel.T} "
                  f"placements={len(manifest.placements)} targets={len(manifest.targets)} "
                  f"residual={panel.residual:.3g}")
    except BenchConfigError as exc:
        raise CliError(EXIT_CONFIG, f"{args.config}: {exc}") from None
    return EXIT_OK


# train


def _forecaster_spec(raw: dict, seed: Optional[int]) -> ForecasterSpec:
    raw = {k: v for k, v in raw.items() if k != "split_fraction"}
    if seed is not None:
        raw["seed"] = seed
    try:
        return ForecasterSpec.from_dict(raw)
    except (ForecasterError, TypeError) as exc:
        raise CliError(EXIT_CONFIG, f"forecaster config: {exc}") from None


def _load_bundle(path):
    try:
        return read_bundle(path)
    except (OSError, PanelError, KeyError, ValueError) as exc:
        raise CliError(EXIT_MISMATCH, f"cannot read bundle {path}: {exc}") from None


def _train_on(panel, spec: ForecasterSpec, split_fraction: float) -> Forecaster:
    task = WindowTask(spec.context_length, spec.horizon, split_fraction)
    try:
        train_view, _ = split(panel, task)
    except PanelError as exc:
        raise CliError(EXIT_MISMATCH, str(exc)) from None
    return train(spec, train_view)


def cmd_train(args) -> int:
    raw = _read_json(args.config, "forecaster config")
    spec = _forecaster_spec(raw, args.seed)
    panel, manifest, _ = _load_bundle(args.bundle)
    model = _train_on(panel, spec, float(raw.get("split_fraction", 0.6)))
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    model.save(out, extra={"run_config": _run_config(args, forecaster=spec.to_dict())})
    print(f"{out}: {spec.kind}/{spec.head} final_loss={model.metadata['final_loss']:.5g}")
    return EXIT_OK


# explain


def _attribution_config(raw: dict, seed: Optional[int]) -> AttributionConfig:
    if "attribution" in raw:
        raw = dict(raw["attribution"])
    else:
        raw = {k: v for k, v in raw.items() if k not in ("hier", "n_samples", "forecaster")}
    if seed is not None:
        raw["seed"] = seed
    try:
        return AttributionConfig.from_dict(raw)
    except (AttributionError, TypeError) as exc:
        raise CliError(EXIT_CONFIG, f"attribution config: {exc}") from None


def _hier_config(raw: dict) -> HierConfig:
    try:
        return HierConfig(**raw.get("hier", {}))
    except (TypeError, ValueError) as exc:
        raise CliError(EXIT_CONFIG, f"hier config: {exc}") from None


def _load_checkpoint(path) -> Forecaster:
    try:
        return Forecaster.load(path)
    except (OSError, ForecasterError, KeyError, ValueError) as exc:
        raise CliError(EXIT_MISMATCH, f"cannot load checkpoint {path}: {exc}") from None


def _explain_one(model, panel, manifest, job: ExplainJob):
    try:
        return explain_targets(model, panel, manifest, job)
    except (ForecasterError, GradientUnavailableError, NotProbabilisticError) as exc:
        raise CliError(EXIT_MISMATCH, str(exc)) from None


def _csv_name(method: str, mode: str, level: Optional[float]) -> str:
    tag = "point" if level is None else f"q{level:g}"
    return f"explain_{method}_{mode}_{tag}.csv"


def cmd_explain(args) -> int:
    raw = _read_json(args.config, "explain config")
    cfg = _attribution_config(raw, args.seed)
    hcfg = _hier_config(raw)
    levels = _levels(args.levels)
    panel, manifest, _ = _load_bundle(args.bundle)
    model = _load_checkpoint(args.checkpoint)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    n_samples = int(raw.get("n_samples", 2000))
    for level in [None] + levels:
        job = ExplainJob(args.method, args.mode, level, cfg, hcfg, n_samples, not args.no_fallback,
                         not args.empirical)
        with warnings.catch_warnings(record=True) as caught:
            warnings.simplefilter("always")
            tensors = _explain_one(model, panel, manifest, job)
        path = out / _csv_name(args.method, args.mode, level)
        rows = write_explanations(path, tensors, level)
        meta = {
            "run_config": _run_config(args, explain=job.echo()),
            "checkpoint_seed": model.spec.seed,
            "rows": rows,
            "targets": [{"node": t.target.node, "step": t.target.step} for t in tensors],
            "metadata": [_jsonable(t.metadata) for t in tensors],
            "warnings": [str(w.message) for w in caught],
        }
        _write_json(path.with_suffix(".meta.json"), meta)
        print(f"{path}: {rows} rows")
    return EXIT_OK


def _jsonable(meta: dict) -> dict:
    return json.loads(json.dumps(meta, default=lambda o: o.tolist() if hasattr(o, "tolist") else str(o)))


# evaluate


def _placement_summary(manifest) -> dict:
    kinds = sorted({a.kind for _, a in manifest.placements})
    modes = sorted({p.mode for p, _ in manifest.placements})
    return {"anomaly_kind": ",".join(kinds) or None, "placement_mode": ",".join(modes) or None}


def cmd_evaluate(args) -> int:
    panel, manifest, bundle_cfg = _load_bundle(args.bundle)
    L = int(manifest.context_length or 12)
    entries = []
    for csv_path in args.explanations:
        meta_path = Path(csv_path).with_suffix(".meta.json")
        meta = json.loads(meta_path.read_text()) if meta_path.exists() else {}
        try:
            tensors = read_explanations(csv_path, (panel.n_nodes, panel.n_variables, L))
        except (OSError, ValueError) as exc:
            raise CliError(EXIT_COVERAGE, str(exc)) from None
        try:
            rep = report(tensors, manifest, literal=args.literal, magnitude=not args.signed)
        except MissingExplanationError as exc:
            raise CliError(EXIT_COVERAGE, f"{csv_path}: {exc}") from None
        except MetricError as exc:
            raise CliError(EXIT_MISMATCH, f"{csv_path}: {exc}") from None
        explain_cfg = meta.get("run_config", {}).get("explain", {})
        entries.append({
            "method": tensors[0].method if tensors else None,
            "mode": explain_cfg.get("mode"),
            "level": explain_cfg.get("level"),
            **_placement_summary(manifest),
            "ias": rep.ias,
            "evda": rep.evda,
            "n_targets": rep.n_targets,
            "seed": explain_cfg.get("attribution", {}).get("seed"),
            "per_placement": rep.per_placement,
            "explanation": str(csv_path),
            "explain_run_config": meta.get("run_config"),
        })
    payload = {"run_config": _run_config(args), "bundle_config": bundle_cfg, "reports": entries}
    out = Path(args.out)
    if out.suffix != ".json":
        out = out / "report.json"
    _write_json(out, payload)
    for e in entries:
        tag = "point" if e["level"] is None else f"q{e['level']:g}"
        print(f"{e['method']}/{e['mode']}/{tag}: ias={e['ias']:.4f} evda={e['evda']}")
    return EXIT_OK


# ablate


def _ablate_bundle(bundle: str, spec_raw: dict, seed: Optional[int], methods, cfg: AttributionConfig,
                   hcfg: HierConfig, magnitude: bool, literal: bool) -> List[dict]:
    panel, manifest, _ = _load_bundle(bundle)
    spec = _forecaster_spec(spec_raw, seed)
    model = _train_on(panel, spec, float(spec_raw.get("split_fraction", 0.6)))
    rows = []
    for method in methods:
        for mode in ("subtree", "flat"):
            job = ExplainJob(method, mode, None, cfg, hcfg)
            start = time.perf_counter()
            tensors = _explain_one(model, panel, manifest, job)
            seconds = time.perf_counter() - start
            rep = report(tensors, manifest, literal=literal, magnitude=magnitude)
            rows.append({"bundle": bundle, "method": method, "mode": mode, **_placement_summary(manifest),
                         "ias": rep.ias, "evda": rep.evda, "n_targets": rep.n_targets,
                         "seconds": seconds, "seed": cfg.seed})
    return rows


def cmd_ablate(args) -> int:
    raw = _read_json(args.config, "ablation config")
    spec_raw = raw.get("forecaster", {})
    _forecaster_spec(spec_raw, args.seed)  # validate early
    cfg = _attribution_config(raw, args.seed)
    hcfg = _hier_config(raw)
    methods = args.method or list(METHODS)
    bundles = [str(b) for b in args.bundle]
    work = [(b, spec_raw, args.seed, methods, cfg, hcfg, not args.signed, args.literal) for b in bundles]
    if args.jobs > 1:
        with ProcessPoolExecutor(max_workers=args.jobs) as pool:
            results = list(pool.map(_ablate_star, work))
    else:
        results = [_ablate_star(w) for w in work]
    rows = [r for res in results for r in res]
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    runtime = {}
    for r in rows:
        runtime.setdefault((r["method"], r["mode"]), []).append(r["seconds"])
    table = [{"method": m, "mode": mode, "total_seconds": sum(v), "mean_seconds": sum(v) / len(v), "runs": len(v)}
             for (m, mode), v in sorted(runtime.items())]
    _write_json(out / "ablation.json", {"run_config": _run_config(args, config=raw), "reports": rows,
                                        "runtime": table})
    with open(out / "runtime.csv", "w") as fh:
        fh.write("method,mode,total_seconds,mean_seconds,runs\n")
        for t in table:
            fh.write(f"{t['method']},{t['mode']},{t['total_seconds']!r},{t['mean_seconds']!r},{t['runs']}\n")
    for t in table:
        print(f"{t['method']:5s} {t['mode']:8s} {t['total_seconds']:.3f}s over {t['runs']} bundle(s)")
    return EXIT_OK


def _ablate_star(work):
    return _ablate_bundle(*work)


# parser


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="hierexplain", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    def common(sp, out_help):
        sp.add_argument("--config", help="JSON configuration file")
        sp.add_argument("--seed", type=int, help="override the configured seed")
        sp.add_argument("--jobs", type=int, default=1, help="worker processes")
        sp.add_argument("--out", required=True, help=out_help)

    b = sub.add_parser("benchgen", help="generate benchmark bundles")
    common(b, "output directory for dataset_NNN bundles")
    b.set_defaults(func=cmd_benchgen)

    t = sub.add_parser("train", help="train a reference forecaster on a bundle")
    common(t, "checkpoint path")
    t.add_argument("--bundle", required=True)
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("explain", help="write explanation CSVs")
    common(e, "output directory")
    e.add_argument("--bundle", required=True)
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--method", choices=METHODS, required=True)
    e.add_argument("--mode", choices=("subtree", "flat"), default="subtree")
    e.add_argument("--levels", help="comma-separated quantile levels, e.g. 0.75,0.9,0.95")
    e.add_argument("--no-fallback", action="store_true",
                   help="fail instead of using fo when gradients are unavailable")
    e.add_argument("--empirical", action="store_true",
                   help="use sampled quantiles even when a closed form exists")
    e.set_defaults(func=cmd_explain)

    v = sub.add_parser("evaluate", help="score explanation CSVs against a bundle's ground truth")
    common(v, "report.json path or directory")
    v.add_argument("--bundle", required=True)
    v.add_argument("--explanations", nargs="+", required=True)
    v.add_argument("--literal", action="store_true", help="cross-series IAS denominator")
    v.add_argument("--signed", action="store_true", help="score signed importance instead of |I|")
    v.set_defaults(func=cmd_evaluate)

    a = sub.add_parser("ablate", help="subtree vs flat on bundles, with wall-clock timings")
    common(a, "output directory")
    a.add_argument("--bundle", nargs="+", required=True)
    a.add_argument("--method", choices=METHODS, action="append")
    a.add_argument("--mode", choices=("subtree", "flat"), help=argparse.SUPPRESS)
    a.add_argument("--literal", action="store_true")
    a.add_argument("--signed", action="store_true")
    a.set_defaults(func=cmd_ablate)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if getattr(args, "jobs", 1) < 1:
        print("error: --jobs must be >= 1", file=sys.stderr)
        return EXIT_CONFIG
    try:
        return args.func(args)
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.code


if __name__ == "__main__":
    sys.exit(main())
