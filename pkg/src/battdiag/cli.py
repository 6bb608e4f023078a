"""battdiag command line: simulate, featurize, train, attribute, diagnose, evaluate.

Every sub-command is independently scriptable; ``run`` chains them over
one synthetic fleet with a leakage-free vehicle split. Artifacts are
written atomically, output is byte-deterministic for a fixed seed and
the mock provider, and a run manifest records the configuration plus
content hashes of everything produced.
"""

from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import os
import sys
import tempfile
from pathlib import Path

import numpy as np

from . import agent, attribution, data_model, features, gbdt, metrics, synth
from .agent import DiagnoseConfig, diagnose_batch
from .knowledge import load_knowledge_base
from .providers import HttpProvider, MockProvider

CONFIG_ERROR = 2
STAGE_ERROR = 1


class CliError(Exception):
    def __init__(self, message: str, code: int = STAGE_ERROR):
        super().__init__(message)
        self.code = code


def _require_file(path, what: str) -> Path:
    path = Path(path)
    if not path.exists():
        raise CliError(f"{what} not found: {path}", CONFIG_ERROR)
    return path


def _atomic_write_text(path, text: str) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    fd, tmp = tempfile.mkstemp(dir=path.parent, prefix=f".{path.name}.")
    try:
        with os.fdopen(fd, "w", encoding="utf-8", newline="") as fh:
            fh.write(text)
        os.replace(tmp, path)
    except BaseException:
        if os.path.exists(tmp):
            os.unlink(tmp)
        raise


def _dump_json(obj) -> str:
    return json.dumps(obj, sort_keys=True, indent=2) + "\n"


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _jsonl(rows) -> str:
    return "".join(json.dumps(r, sort_keys=True) + "\n" for r in rows)


def _read_jsonl(path) -> list[dict]:
    out = []
    with Path(path).open(encoding="utf-8") as fh:
        for line in fh:
            line = line.strip()
            if line:
                out.append(json.loads(line))
    return out


def _make_provider(args):
    if args.provider == "mock":
        kb = load_knowledge_base(args.kb)
        return MockProvider(kb=kb)
    if args.provider == "http":
        if not args.http_url or not args.http_model:
            raise CliError("--http-url and --http-model are required with --provider http",
                           CONFIG_ERROR)
        return HttpProvider(url=args.http_url, model=args.http_model,
                            token_env=args.token_env, timeout=args.http_timeout)
    raise CliError(f"unknown provider {args.provider!r}", CONFIG_ERROR)


def _load_feature_rows(path, what="features file") -> list[features.FeatureRow]:
    return features.read_features_csv(_require_file(path, what))


# --------------------------------------------------------------------------
# sub-commands
# --------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    spec_doc = json.loads(_require_file(args.spec, "fleet spec").read_text(encoding="utf-8"))
    if args.seed is not None:
        spec_doc["seed"] = args.seed
    spec = synth.FleetSpec.from_dict(spec_doc)
    dataset, faults = synth.generate_fleet(spec)
    out = Path(args.out)
    data_model.write_fleet(dataset.segments, dataset.vehicle_labels, out)
    _atomic_write_text(
        out / "injected_faults.json",
        _dump_json({vid: (f.name if f else None) for vid, f in faults.items()}),
    )
    print(f"wrote {len(dataset.segments)} segments for {spec.n_vehicles} vehicles to {out}")
    return 0


def cmd_features(args) -> int:
    dataset = data_model.load_segments(_require_file(args.in_dir, "segment directory"))
    rows = features.featurize_segments(
        dataset.segments, args.voltage_eps, args.current_drop, jobs=args.jobs
    )
    features.write_features_csv(rows, Path(args.out))
    print(f"wrote {len(rows)} feature rows to {args.out}")
    return 0


def cmd_train(args) -> int:
    rows = _load_feature_rows(args.features)
    labeled = [(r.features, r.label) for r in rows if r.label is not None]
    if not labeled:
        raise CliError("features file carries no labels; cannot train", CONFIG_ERROR)
    config = gbdt.TrainConfig(
        n_trees=args.n_trees, learning_rate=args.learning_rate,
        max_leaves=args.max_leaves, min_samples_leaf=args.min_samples_leaf,
        l2_leaf_penalty=args.l2, seed=args.seed or 0,
    )
    model = gbdt.train(labeled, config)
    _atomic_write_text(args.out, json.dumps(model.to_dict(), sort_keys=True))
    print(f"trained {len(model.trees)} trees on {len(labeled)} rows -> {args.out}")
    return 0


def cmd_attribute(args) -> int:
    model = gbdt.TreeEnsemble.load(_require_file(args.model, "model file"))
    rows = _load_feature_rows(args.features)
    bg_rows = _load_feature_rows(args.background or args.features, "background file")
    background = np.asarray([r.features.to_array() for r in bg_rows])
    explainer = attribution.TreeShapExplainer(model, background, args.background_cap)
    out_rows = []
    for r in rows:
        attr = attribution.select_top_k(explainer.explain(r.features), args.top_k)
        out_rows.append(
            {"vehicle_id": r.vehicle_id, "segment_index": r.segment_index, **attr.to_dict()}
        )
    _atomic_write_text(args.out, _jsonl(out_rows))
    print(f"wrote {len(out_rows)} attributions to {args.out}")
    return 0


def cmd_diagnose(args) -> int:
    model = gbdt.TreeEnsemble.load(_require_file(args.model, "model file"))
    rows = _load_feature_rows(args.features)
    bg_rows = _load_feature_rows(args.background or args.features, "background file")
    background = np.asarray([r.features.to_array() for r in bg_rows])
    explainer = attribution.TreeShapExplainer(model, background, args.background_cap)
    kb = load_knowledge_base(args.kb)
    provider = _make_provider(args)
    config = DiagnoseConfig(top_k=args.top_k, gate_margin=args.gate_margin,
                            gate_mode=args.gate_mode, threshold=args.threshold)
    reports = diagnose_batch([r.features for r in rows], model, explainer, kb,
                             provider, config, jobs=args.jobs)
    out_rows = [
        {"vehicle_id": r.vehicle_id, "segment_index": r.segment_index, **rep.to_dict()}
        for r, rep in zip(rows, reports)
    ]
    _atomic_write_text(args.out, _jsonl(out_rows))
    n_esc = sum(1 for rep in reports if rep.provenance.escalated)
    print(f"wrote {len(out_rows)} reports to {args.out} ({n_esc} escalated)")
    return 0


def _summarize(report_rows, truth_labels, cost: metrics.CostParams,
               threshold: float, per_vehicle: bool) -> dict:
    for row in report_rows:
        vid = row["vehicle_id"]
        if vid not in truth_labels:
            raise CliError(f"vehicle {vid!r} missing from truth manifest", CONFIG_ERROR)

    def final_score(row) -> float:
        cal = row.get("calibrated_probability")
        return float(cal if cal is not None else row["provenance"]["gbdt_probability"])

    vids = [row["vehicle_id"] for row in report_rows]
    results = [row["result"] for row in report_rows]
    scores = [final_score(row) for row in report_rows]
    gbdt_probs = [float(row["provenance"]["gbdt_probability"]) for row in report_rows]
    gbdt_results = [
        agent.RESULT_ABNORMAL if p >= threshold else agent.RESULT_NORMAL for p in gbdt_probs
    ]

    if per_vehicle:
        by_vehicle_score = metrics.per_vehicle_scores(vids, scores)
        by_vehicle_result = metrics.per_vehicle_results(vids, results)
        by_vehicle_gbdt = metrics.per_vehicle_scores(vids, gbdt_probs)
        keys = sorted(by_vehicle_score)
        truth = [truth_labels[v] for v in keys]
        results = [by_vehicle_result[v] for v in keys]
        scores = [by_vehicle_score[v] for v in keys]
        gbdt_results = [
            agent.RESULT_ABNORMAL if by_vehicle_gbdt[v] >= threshold else agent.RESULT_NORMAL
            for v in keys
        ]
    else:
        truth = [truth_labels[v] for v in vids]

    summary: dict = {
        "per": "vehicle" if per_vehicle else "segment",
        "n": len(truth),
        "auroc": metrics.auroc(list(zip(scores, truth))),
        "policies": {},
    }
    for policy in metrics.WARNING_POLICIES:
        tally, q_tp, q_fp = metrics.tally_outcomes(results, truth, policy)
        summary["policies"][policy] = {
            "q_tp": q_tp,
            "q_fp": q_fp,
            "cost": metrics.average_cost(q_tp, q_fp, cost),
            "tally": tally.to_dict(),
        }
    g_tally, g_qtp, g_qfp = metrics.tally_outcomes(gbdt_results, truth,
                                                   metrics.WARNING_AS_ABNORMAL)
    summary["gbdt_only"] = {
        "q_tp": g_qtp,
        "q_fp": g_qfp,
        "cost": metrics.average_cost(g_qtp, g_qfp, cost),
        "tally": g_tally.to_dict(),
    }
    return summary


def cmd_evaluate(args) -> int:
    report_rows = _read_jsonl(_require_file(args.reports, "reports file"))
    manifest = json.loads(_require_file(args.truth, "truth manifest").read_text(encoding="utf-8"))
    truth_labels = {vid: entry["label"] for vid, entry in manifest.items()}
    cost = metrics.CostParams(p=args.cost_p, c_f=args.cost_cf, c_r=args.cost_cr)
    summary = _summarize(report_rows, truth_labels, cost, args.threshold,
                         per_vehicle=not args.per_segment)
    text = _dump_json(summary)
    if args.out:
        _atomic_write_text(args.out, text)
        print(f"wrote summary to {args.out}")
    else:
        sys.stdout.write(text)
    return 0


def cmd_run(args) -> int:
    spec_doc = json.loads(_require_file(args.spec, "fleet spec").read_text(encoding="utf-8"))
    if args.seed is not None:
        spec_doc["seed"] = args.seed
    spec = synth.FleetSpec.from_dict(spec_doc)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)

    dataset, faults = synth.generate_fleet(spec)
    data_dir = out / "data"
    data_model.write_fleet(dataset.segments, dataset.vehicle_labels, data_dir)
    _atomic_write_text(
        out / "injected_faults.json",
        _dump_json({vid: (f.name if f else None) for vid, f in faults.items()}),
    )

    rows = features.featurize_segments(
        dataset.segments, args.voltage_eps, args.current_drop, jobs=args.jobs
    )
    features_path = out / "features.csv"
    features.write_features_csv(rows, features_path)

    split = data_model.partition_by_vehicle(dataset, args.validation_fraction, spec.seed)
    train_rows = [r for r in rows if r.vehicle_id in split.train_vehicles]
    val_rows = [r for r in rows if r.vehicle_id in split.validation_vehicles]

    config = gbdt.TrainConfig(seed=spec.seed)
    model = gbdt.train([(r.features, r.label) for r in train_rows], config)
    model_path = out / "model.json"
    _atomic_write_text(model_path, json.dumps(model.to_dict(), sort_keys=True))

    background = np.asarray([r.features.to_array() for r in train_rows])
    explainer = attribution.TreeShapExplainer(model, background, args.background_cap)
    attr_rows = []
    attrs = []
    for r in val_rows:
        attr = attribution.select_top_k(explainer.explain(r.features), args.top_k)
        attrs.append(attr)
        attr_rows.append(
            {"vehicle_id": r.vehicle_id, "segment_index": r.segment_index, **attr.to_dict()}
        )
    attr_path = out / "attributions.jsonl"
    _atomic_write_text(attr_path, _jsonl(attr_rows))

    kb = load_knowledge_base(args.kb)
    provider = _make_provider(args)
    dconfig = DiagnoseConfig(top_k=args.top_k, gate_margin=args.gate_margin,
                             gate_mode=args.gate_mode, threshold=args.threshold)
    reports = diagnose_batch([r.features for r in val_rows], model, explainer, kb,
                             provider, dconfig, jobs=args.jobs)
    report_rows = [
        {"vehicle_id": r.vehicle_id, "segment_index": r.segment_index, **rep.to_dict()}
        for r, rep in zip(val_rows, reports)
    ]
    reports_path = out / "reports.jsonl"
    _atomic_write_text(reports_path, _jsonl(report_rows))

    cost = metrics.CostParams(p=args.cost_p, c_f=args.cost_cf, c_r=args.cost_cr)
    summary = _summarize(report_rows, dataset.vehicle_labels, cost, args.threshold,
                         per_vehicle=not args.per_segment)
    summary["n_escalated"] = sum(1 for r in reports if r.provenance.escalated)
    summary["n_validation_segments"] = len(val_rows)
    summary["segment_level"] = _summarize(report_rows, dataset.vehicle_labels, cost,
                                          args.threshold, per_vehicle=False)
    summary_path = out / "summary.json"
    _atomic_write_text(summary_path, _dump_json(summary))

    spec_echo = {f.name: getattr(spec, f.name) for f in dataclasses.fields(spec)}
    spec_echo["fault_mix"] = {f.name: p for f, p in spec.fault_mix.items()}
    run_manifest = {
        "seed": spec.seed,
        "spec": spec_echo,
        "config": {
            "validation_fraction": args.validation_fraction,
            "gate_margin": args.gate_margin,
            "gate_mode": args.gate_mode,
            "top_k": args.top_k,
            "threshold": args.threshold,
            "background_cap": args.background_cap,
            "provider": args.provider,
            "cost": {"p": args.cost_p, "c_f": args.cost_cf, "c_r": args.cost_cr},
        },
        "artifacts": {
            p.name: _sha256(p)
            for p in (features_path, model_path, attr_path, reports_path, summary_path)
        },
    }
    _atomic_write_text(out / "run_manifest.json", _dump_json(run_manifest))
    print(f"pipeline complete: {summary_path}")
    return 0


# --------------------------------------------------------------------------
# argument wiring
# --------------------------------------------------------------------------

def _add_provider_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--provider", choices=("mock", "http"), default="mock",
                   help="reasoning provider (default: mock, fully offline)")
    p.add_argument("--kb", default=None,
                   help="override the embedded knowledge base with a JSON file")
    p.add_argument("--http-url", default=None, help="completion endpoint URL")
    p.add_argument("--http-model", default=None, help="model name for the endpoint")
    p.add_argument("--http-timeout", type=float, default=30.0,
                   help="request timeout in seconds (default: 30)")
    p.add_argument("--token-env", default="BATTDIAG_API_TOKEN",
                   help="environment variable holding the bearer token")


def _add_gate_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--gate-margin", type=float, default=0.05,
                   help="escalate when |p - 0.5| is below this margin (default: 0.05)")
    p.add_argument("--gate-mode", choices=("boundary", "tail"), default="boundary",
                   help="boundary: escalate near 0.5; tail: escalate when min(p,1-p) "
                        "is below the margin (default: boundary)")
    p.add_argument("--top-k", type=int, default=8,
                   help="number of top attribution contributors in the prompt (default: 8)")
    p.add_argument("--threshold", type=float, default=0.5,
                   help="probability threshold for the Abnormal decision (default: 0.5)")
    p.add_argument("--background-cap", type=int, default=attribution.BACKGROUND_CAP,
                   help="max background rows for attribution (default: 512)")


def _add_cost_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--cost-p", type=float, default=0.00038,
                   help="fleet fault prevalence (default: 0.00038)")
    p.add_argument("--cost-cf", type=float, default=5e6,
                   help="cost of an undetected fault, CNY (default: 5e6)")
    p.add_argument("--cost-cr", type=float, default=8e3,
                   help="inspection cost per flagged vehicle, CNY (default: 8e3)")
    p.add_argument("--per-segment", action="store_true",
                   help="evaluate per segment instead of per vehicle (max score)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="battdiag",
        description="three-layer battery fault diagnosis pipeline",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("simulate", help="generate a synthetic labeled fleet")
    p.add_argument("--spec", required=True, help="fleet spec JSON")
    p.add_argument("--out", required=True, help="output directory for CSVs + manifest")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("features", help="extract the ten features per segment")
    p.add_argument("--in", dest="in_dir", required=True,
                   help="segment directory (with manifest.json) or manifest path")
    p.add_argument("--out", required=True, help="output features.csv")
    p.add_argument("--voltage-eps", type=float, default=features.DEFAULT_VOLTAGE_EPS,
                   help="CV detection: closeness to the voltage plateau in volts "
                        "(default: 0.01)")
    p.add_argument("--current-drop", type=float, default=features.DEFAULT_CURRENT_DROP,
                   help="CV detection: fractional current decay off the CC plateau "
                        "(default: 0.05)")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers (default: 1)")
    p.set_defaults(func=cmd_features)

    p = sub.add_parser("train", help="fit the boosted-tree classifier")
    p.add_argument("--features", required=True, help="labeled features.csv")
    p.add_argument("--out", required=True, help="output model.json")
    p.add_argument("--n-trees", type=int, default=100, help="boosting rounds (default: 100)")
    p.add_argument("--learning-rate", type=float, default=0.1, help="default: 0.1")
    p.add_argument("--max-leaves", type=int, default=31, help="default: 31")
    p.add_argument("--min-samples-leaf", type=int, default=20, help="default: 20")
    p.add_argument("--l2", type=float, default=1.0, help="leaf L2 penalty (default: 1.0)")
    p.add_argument("--seed", type=int, default=0, help="default: 0")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("attribute", help="exact Shapley attribution per segment")
    p.add_argument("--model", required=True, help="model.json")
    p.add_argument("--features", required=True, help="features.csv to attribute")
    p.add_argument("--background", default=None,
                   help="features.csv used as attribution background "
                        "(default: the --features file)")
    p.add_argument("--out", required=True, help="output attributions.jsonl")
    p.add_argument("--top-k", type=int, default=8, help="default: 8")
    p.add_argument("--background-cap", type=int, default=attribution.BACKGROUND_CAP,
                   help="default: 512")
    p.set_defaults(func=cmd_attribute)

    p = sub.add_parser("diagnose", help="full reports with gating and calibration")
    p.add_argument("--model", required=True, help="model.json")
    p.add_argument("--features", required=True, help="features.csv to diagnose")
    p.add_argument("--background", default=None,
                   help="background features.csv (default: the --features file)")
    p.add_argument("--out", required=True, help="output reports.jsonl")
    p.add_argument("--jobs", type=int, default=1, help="parallel workers (default: 1)")
    _add_gate_flags(p)
    _add_provider_flags(p)
    p.set_defaults(func=cmd_diagnose)

    p = sub.add_parser("evaluate", help="AUROC, direct cost and outcome tallies")
    p.add_argument("--reports", required=True, help="reports.jsonl")
    p.add_argument("--truth", required=True, help="manifest.json with vehicle labels")
    p.add_argument("--out", default=None, help="write summary JSON here instead of stdout")
    p.add_argument("--threshold", type=float, default=0.5,
                   help="classifier-only decision threshold (default: 0.5)")
    _add_cost_flags(p)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("run", help="simulate + featurize + train + attribute + "
                                   "diagnose + evaluate in one shot")
    p.add_argument("--spec", required=True, help="fleet spec JSON")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=None, help="override the spec seed")
    p.add_argument("--validation-fraction", type=float, default=0.4,
                   help="vehicle fraction held out for validation (default: 0.4)")
    p.add_argument("--voltage-eps", type=float, default=features.DEFAULT_VOLTAGE_EPS)
    p.add_argument("--current-drop", type=float, default=features.DEFAULT_CURRENT_DROP)
    p.add_argument("--jobs", type=int, default=1, help="parallel workers (default: 1)")
    _add_gate_flags(p)
    _add_provider_flags(p)
    _add_cost_flags(p)
    p.set_defaults(func=cmd_run)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except CliError as exc:
        print(f"battdiag {args.command}: {exc}", file=sys.stderr)
        return exc.code
    except (data_model.ValidationError, ValueError, OSError, json.JSONDecodeError) as exc:
        print(f"battdiag {args.command}: {exc}", file=sys.stderr)
        return STAGE_ERROR


if __name__ == "__main__":
    sys.exit(main())
