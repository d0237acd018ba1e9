"""Experiment runner: config parsing, the three training modes, reporting.

Commands:
    hetero-fdl run --config cfg.json [--seed N] [--out DIR] [--mode m]
    hetero-fdl report summary1.json summary2.json ... [--csv out.csv]
    hetero-fdl validate-topology topo.txt

Run artifacts land in the output directory: metrics.csv (per-round rows),
worker checkpoints, summary.json (final per-region metrics, the step-size
bound actually computed, the fitted stationarity decay slope) plus the input
config echoed back for provenance.
"""

from __future__ import annotations

import argparse
import json
import math
import shutil
import sys
import time
from dataclasses import dataclass, field
from importlib import resources
from pathlib import Path
from typing import Optional

import numpy as np

from . import fdl, hgat, objectives as ob, topology as tp
from .ehr_graph import (
    MaskedSplit,
    NodeKind,
    SynthConfig,
    chronological_mask,
    connected_doctors,
    read_claims,
    resample_candidates,
    synthesize_claims,
)
from .errors import WorkbenchError
from .features import init_features
from .objectives import HgatObjective, build_training_samples, estimate_lipschitz, evaluate_split


class UnknownKey(WorkbenchError):
    pass


class MissingKey(WorkbenchError):
    pass


class ConfigTypeError(WorkbenchError):
    pass


class RegionMismatch(WorkbenchError):
    pass


# ---------------------------------------------------------------------------
# configuration


def _type_name(t):
    return " or ".join(x.__name__ for x in t) if isinstance(t, tuple) else t.__name__


def _check_int(v):
    return isinstance(v, int) and not isinstance(v, bool)


def _check_num(v):
    return (isinstance(v, (int, float)) and not isinstance(v, bool))


def _check_int_pair(v):
    return isinstance(v, list) and len(v) == 2 and all(_check_int(x) for x in v)


def _check_auto_or_int(v):
    return v == "auto" or _check_int(v)


def _check_auto_or_num(v):
    return v == "auto" or _check_num(v)


# key -> (validator, description, required, default)
CONFIG_KEYS = {
    "mode": (lambda v: v in ("local", "global", "fdl"), "one of local|global|fdl", True, None),
    "seed": (_check_int, "integer", True, None),
    "rounds": (lambda v: _check_int(v) and v >= 1, "positive integer", True, None),
    "gamma": (lambda v: v == "auto" or (_check_num(v) and v > 0), "positive number or 'auto'", True, None),
    "mask_fraction": (lambda v: _check_num(v) and 0 < v < 1, "number in (0,1)", True, None),
    "feature_scheme": (lambda v: v in ("gaussian", "onehot", "pmi"), "one of gaussian|onehot|pmi", True, None),
    "f_prime": (lambda v: _check_int(v) and v >= 1, "positive integer", True, None),
    "heads": (lambda v: _check_int(v) and v >= 1, "positive integer", True, None),
    "layers": (lambda v: _check_int(v) and v >= 1, "positive integer", True, None),
    "loss_weights": (
        lambda v: isinstance(v, list) and len(v) == 3 and all(_check_num(x) and x >= 0 for x in v) and any(x > 0 for x in v),
        "three non-negative numbers, at least one positive",
        True,
        None,
    ),
    "out_dir": (lambda v: isinstance(v, str), "string path", False, "run_output"),
    "claims_path": (lambda v: v is None or isinstance(v, str), "string path or null", False, None),
    "synth_region_sizes": (
        lambda v: isinstance(v, list) and v and all(_check_int(x) and x > 0 for x in v),
        "non-empty list of positive integers",
        False,
        [145, 158, 177, 207, 147, 171],
    ),
    "synth_doctors": (lambda v: _check_int(v) and v >= 1, "positive integer", False, 320),
    "synth_services": (lambda v: _check_int(v) and v >= 1, "positive integer", False, 150),
    "synth_specialties": (lambda v: _check_int(v) and v >= 1, "positive integer", False, 8),
    "synth_claims_per_patient": (_check_int_pair, "pair of integers", False, [30, 60]),
    "synth_fresh_tail_doctors": (_check_int_pair, "pair of integers", False, [5, 10]),
    "synth_cross_region_rate": (lambda v: _check_num(v) and 0 <= v <= 1, "number in [0,1]", False, 0.08),
    "synth_service_noise": (lambda v: _check_num(v) and 0 <= v <= 1, "number in [0,1]", False, 0.5),
    "candidate_size": (lambda v: _check_int(v) and v >= 1, "positive integer", False, 250),
    "feature_dims": (
        lambda v: v is None or (isinstance(v, list) and len(v) == 3 and all(_check_int(x) and x >= 1 for x in v)),
        "list of three positive integers or null",
        False,
        None,
    ),
    "d_v": (lambda v: v is None or (_check_int(v) and v >= 1), "positive integer or null", False, None),
    "combine": (lambda v: v in ("average", "concat"), "one of average|concat", False, "average"),
    "score_mode": (lambda v: v in ("dot", "bilinear"), "one of dot|bilinear", False, "dot"),
    "heterogeneous": (lambda v: isinstance(v, bool), "boolean", False, True),
    "q": (_check_auto_or_int, "'auto' or positive integer", False, "auto"),
    "batch_size": (_check_auto_or_int, "'auto' or positive integer", False, "auto"),
    "neighbor_samples": (lambda v: _check_int(v) and v >= 1, "positive integer", False, 5),
    "topology_file": (lambda v: v is None or isinstance(v, str), "string path or null", False, None),
    "topology_graph": (lambda v: v is None or v in tp.NAMED_GRAPHS, "one of ring|complete|star or null", False, None),
    "l2": (lambda v: _check_num(v) and v >= 0, "non-negative number", False, 0.0),
    "strict_step_size": (lambda v: isinstance(v, bool), "boolean", False, False),
    "eval_every": (lambda v: _check_int(v) and v >= 0, "non-negative integer", False, 25),
    "diag_every": (lambda v: _check_int(v) and v >= 1, "positive integer", False, 1),
}


@dataclass
class RunConfig:
    raw: dict
    raw_text: str

    def __getattr__(self, key):
        try:
            return self.raw[key]
        except KeyError:
            raise AttributeError(key)

    def synth_config(self) -> SynthConfig:
        return SynthConfig(
            region_sizes=tuple(self.raw["synth_region_sizes"]),
            doctors=self.raw["synth_doctors"],
            services=self.raw["synth_services"],
            specialties=self.raw["synth_specialties"],
            claims_per_patient=tuple(self.raw["synth_claims_per_patient"]),
            fresh_tail_doctors=tuple(self.raw["synth_fresh_tail_doctors"]),
            mask_fraction_hint=self.raw["mask_fraction"],
            cross_region_rate=self.raw["synth_cross_region_rate"],
            service_noise=self.raw["synth_service_noise"],
        )


def parse_config(path) -> RunConfig:
    """Parse and fully validate the flat JSON config; unknown keys are errors."""
    text = Path(path).read_text(encoding="utf-8")
    try:
        data = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as e:
        raise ConfigTypeError(f"config is not valid JSON: {e}")
    if not isinstance(data, dict):
        raise ConfigTypeError("config must be a JSON object of key-value pairs")
    unknown = sorted(set(data) - set(CONFIG_KEYS))
    if unknown:
        raise UnknownKey(f"unknown config keys: {', '.join(unknown)}")
    missing = sorted(k for k, (_, _, required, _) in CONFIG_KEYS.items() if required and k not in data)
    if missing:
        raise MissingKey(f"missing required config keys: {', '.join(missing)}")
    resolved = {}
    for key, (check, desc, _required, default) in CONFIG_KEYS.items():
        value = data.get(key, default)
        if key in data and not check(value):
            raise ConfigTypeError(f"config key {key!r} must be {desc}, got {value!r}")
        resolved[key] = value
    if resolved["mode"] == "fdl" and resolved["topology_file"] is None and resolved["topology_graph"] is None:
        raise MissingKey("fdl mode needs topology_file or topology_graph")
    return RunConfig(raw=resolved, raw_text=text)


def bundled_config_path() -> Path:
    with resources.as_file(resources.files("hetero_fdl.data").joinpath("six_region_config.json")) as p:
        return Path(p)


# ---------------------------------------------------------------------------
# experiment assembly


def _resolve_topology(config: RunConfig, m: int) -> tp.ConsensusMatrix:
    if config.topology_file:
        if config.topology_file == "bundled:six-region":
            entries = tp.six_region_topology()
        else:
            entries = tp.load_topology(config.topology_file)
        cm = tp.validate(entries)
    else:
        cm = tp.metropolis_weights(tp.NAMED_GRAPHS[config.topology_graph](m), m)
    if cm.m != m:
        raise RegionMismatch(f"topology has {cm.m} workers but the data has {m} regions")
    return cm


@dataclass
class Experiment:
    config: RunConfig
    region_names: list
    splits: dict  # region -> MaskedSplit (shared node universe)
    global_split: object
    features: object
    model_config: hgat.ModelConfig
    x0: np.ndarray


def build_experiment(config: RunConfig) -> Experiment:
    if config.claims_path:
        claims = read_claims(config.claims_path)
    else:
        claims = synthesize_claims(config.synth_config(), config.seed)
    region_names = sorted({c.patient_region for c in claims})
    region_claims = {r: [c for c in claims if c.patient_region == r] for r in region_names}
    splits = {}
    for r in region_names:
        split = chronological_mask(
            region_claims[r], config.mask_fraction, config.candidate_size, config.seed, node_universe=claims
        )
        # negatives restricted to doctors with edges in the shard, so ranking
        # cannot fall back on connectivity alone; pools are shared across modes
        splits[r] = resample_candidates(split, connected_doctors(split.graph), config.candidate_size, config.seed)
    global_split = chronological_mask(claims, config.mask_fraction, config.candidate_size, config.seed)
    merged_candidates: dict = {}
    for r in region_names:
        merged_candidates.update(splits[r].candidates)
    global_split = MaskedSplit(
        graph=global_split.graph,
        positives=global_split.positives,
        candidates=merged_candidates,
        mask_fraction=global_split.mask_fraction,
    )

    w_ds = config.loss_weights[0]
    graph = global_split.graph
    dims = None
    if config.feature_dims is not None:
        dims = dict(zip((NodeKind.PATIENT, NodeKind.DOCTOR, NodeKind.SERVICE), config.feature_dims))
    features = init_features(
        graph, config.feature_scheme, dims=dims, seed=config.seed, include_doctor_specialty=(w_ds == 0)
    )
    in_dims = {k: features.for_kind(k).shape[1] for k in (NodeKind.PATIENT, NodeKind.DOCTOR, NodeKind.SERVICE)}
    model_config = hgat.ModelConfig(
        in_dims=in_dims,
        f_prime=config.f_prime,
        heads=config.heads,
        layers=config.layers,
        d_v=config.d_v,
        combine=config.combine,
        score_mode=config.score_mode,
        heterogeneous=config.heterogeneous,
        n_specialties=max(len(graph.specialty_names), 1),
        n_services=max(graph.n_services, 1),
    )
    x0 = hgat.HgatParams.init(model_config, config.seed).flatten()
    return Experiment(config, region_names, splits, global_split, features, model_config, x0)


def _plan_seed(seed: int, tag: int) -> int:
    return int(np.random.SeedSequence([seed, tag]).generate_state(1)[0])


def _objective_for(exp: Experiment, split, tag: int) -> HgatObjective:
    cfg = exp.config
    samples = build_training_samples(split, seed=_plan_seed(cfg.seed, 1000 + tag))
    return HgatObjective(
        split.graph,
        exp.features,
        exp.model_config,
        samples,
        weights=tuple(cfg.loss_weights),
        sample_size=cfg.neighbor_samples,
        plan_seed=_plan_seed(cfg.seed, tag),
        l2=cfg.l2,
    )


def _region_view(split, region_patients: set):
    from .ehr_graph import MaskedSplit

    return MaskedSplit(
        graph=split.graph,
        positives={p: v for p, v in split.positives.items() if p in region_patients},
        candidates={p: v for p, v in split.candidates.items() if p in region_patients},
        mask_fraction=split.mask_fraction,
    )


def run_experiment(config: RunConfig) -> int:
    t0 = time.perf_counter()
    out = Path(config.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    exp = build_experiment(config)
    mode = config.mode
    regions = exp.region_names
    m = len(regions)

    if mode in ("local", "fdl"):
        objectives = [_objective_for(exp, exp.splits[r], tag=i) for i, r in enumerate(regions)]
        eval_splits = [exp.splits[r] for r in regions]
    else:
        objectives = [_objective_for(exp, exp.global_split, tag=0)]
        eval_splits = [exp.global_split]

    W = _resolve_topology(config, m) if mode == "fdl" else None

    lipschitz = None
    if config.strict_step_size or config.gamma == "auto":
        lipschitz = max(estimate_lipschitz(obj, exp.x0, iters=12, seed=config.seed) for obj in objectives)

    def evaluator(worker: int, x: np.ndarray):
        params = hgat.HgatParams.unflatten(x, exp.model_config)
        split = eval_splits[worker]
        res = evaluate_split(split.graph, exp.features, params, split,
                             sample_size=config.neighbor_samples,
                             ctx=objectives[worker].ctx)
        return res["recall"], res["auc"]

    result = fdl.run(
        mode,
        objectives,
        exp.x0,
        W=W,
        gamma=config.gamma,
        q=config.q,
        batch_size=config.batch_size,
        rounds=config.rounds,
        seed=config.seed,
        strict_step_size=config.strict_step_size,
        lipschitz=lipschitz,
        evaluator=evaluator if config.eval_every else None,
        diag_every=config.diag_every,
        eval_every=config.eval_every,
    )

    fdl.write_metrics(result.records, mode, out / "metrics.csv")
    finals = {}
    for i in range(len(objectives)):
        params = hgat.HgatParams.unflatten(result.final_x[i], exp.model_config)
        name = regions[i] if mode in ("local", "fdl") else "pooled"
        hgat.save_checkpoint(params, out / f"worker_{name}.ckpt")
        finals[name] = params

    # final metrics: candidate pools are shared across modes; local and fdl
    # models rank on their region's graph, the pooled model on the full graph
    per_region = {}
    for i, r in enumerate(regions):
        if mode in ("local", "fdl"):
            params = finals[r]
            res = evaluate_split(exp.splits[r].graph, exp.features, params, exp.splits[r],
                                 sample_size=config.neighbor_samples, ctx=objectives[i].ctx)
        else:
            g_split = exp.global_split
            region_patients = {
                p for p in g_split.positives
                if g_split.graph.region_names[int(g_split.graph.patient_region[p])] == r
            }
            view = _region_view(g_split, region_patients)
            res = evaluate_split(g_split.graph, exp.features, finals["pooled"], view,
                                 sample_size=config.neighbor_samples, ctx=objectives[0].ctx)
        per_region[r] = res

    try:
        slope = fdl.fit_decay_slope(result.records, t_min=10, t_max=config.rounds)
    except fdl.ConfigError:
        slope = None

    summary = {
        "mode": mode,
        "seed": config.seed,
        "rounds": config.rounds,
        "regions": regions,
        "gamma": result.gamma,
        "step_size_bound": result.step_bound,
        "strict_step_size": result.strict,
        "strict_honored": bool(result.step_bound is None or not result.strict or result.gamma <= result.step_bound * (1 + 1e-12)),
        "lambda": W.lam if W is not None else None,
        "q": result.q,
        "batch_sizes": result.batch_sizes,
        "lipschitz_estimate": lipschitz,
        "param_count": int(exp.x0.size),
        "stationarity_slope": slope,
        "per_region": per_region,
        "overall": {
            "recall": float(np.mean([v["recall"] for v in per_region.values()])),
            "auc": float(np.mean([v["auc"] for v in per_region.values()])),
        },
        "runtime_sec": time.perf_counter() - t0,
    }
    (out / "summary.json").write_text(json.dumps(summary, indent=2) + "\n", encoding="utf-8")
    (out / "config.json").write_text(config.raw_text, encoding="utf-8")
    (out / "resolved_config.json").write_text(json.dumps(config.raw, indent=2) + "\n", encoding="utf-8")
    return 0


# ---------------------------------------------------------------------------
# report


def compare_report(paths) -> tuple:
    """Merge run summaries into per-region rows plus FDL-Local / Global-FDL deltas.

    Returns (text, rows) where rows are dicts ready for CSV writing.
    """
    if len(paths) < 2:
        raise RegionMismatch("need at least two summary files to compare")
    summaries = []
    for p in paths:
        with open(p, "r", encoding="utf-8") as fh:
            summaries.append(json.load(fh))
    region_sets = [tuple(s["regions"]) for s in summaries]
    if len(set(region_sets)) != 1:
        raise RegionMismatch(f"summaries cover different region sets: {sorted(set(region_sets))}")
    regions = list(region_sets[0])
    by_mode = {s["mode"]: s for s in summaries}

    rows = []
    for r in regions:
        for mode, s in sorted(by_mode.items()):
            v = s["per_region"][r]
            rows.append({"region": r, "mode": mode, "recall": v["recall"], "auc": v["auc"]})
        if "fdl" in by_mode and "local" in by_mode:
            rows.append(
                {
                    "region": r,
                    "mode": "delta_fdl_minus_local",
                    "recall": by_mode["fdl"]["per_region"][r]["recall"] - by_mode["local"]["per_region"][r]["recall"],
                    "auc": by_mode["fdl"]["per_region"][r]["auc"] - by_mode["local"]["per_region"][r]["auc"],
                }
            )
        if "global" in by_mode and "fdl" in by_mode:
            rows.append(
                {
                    "region": r,
                    "mode": "delta_global_minus_fdl",
                    "recall": by_mode["global"]["per_region"][r]["recall"] - by_mode["fdl"]["per_region"][r]["recall"],
                    "auc": by_mode["global"]["per_region"][r]["auc"] - by_mode["fdl"]["per_region"][r]["auc"],
                }
            )

    widths = (max(len(r["region"]) for r in rows), max(len(r["mode"]) for r in rows))
    lines = [f"{'region':<{widths[0]}}  {'mode':<{widths[1]}}  {'recall':>8}  {'auc':>8}"]
    for row in rows:
        lines.append(
            f"{row['region']:<{widths[0]}}  {row['mode']:<{widths[1]}}  {row['recall']:>8.4f}  {row['auc']:>8.4f}"
        )
    return "\n".join(lines), rows


def write_report_csv(rows, path) -> None:
    with open(path, "w", encoding="utf-8", newline="") as fh:
        fh.write("region,mode,recall,auc\n")
        for row in rows:
            fh.write(f"{row['region']},{row['mode']},{row['recall']!r},{row['auc']!r}\n")


# ---------------------------------------------------------------------------
# entry point


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(prog="hetero-fdl", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p_run = sub.add_parser("run", help="run a training experiment")
    p_run.add_argument("--config", required=True)
    p_run.add_argument("--seed", type=int, default=None, help="override the config seed")
    p_run.add_argument("--out", default=None, help="override the output directory")
    p_run.add_argument("--mode", choices=("local", "global", "fdl"), default=None, help="override the mode")

    p_rep = sub.add_parser("report", help="compare run summaries region by region")
    p_rep.add_argument("files", nargs="+")
    p_rep.add_argument("--csv", default=None, help="also write the table as CSV")

    p_val = sub.add_parser("validate-topology", help="check a consensus matrix file")
    p_val.add_argument("file")

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            config = parse_config(args.config)
            if args.seed is not None:
                config.raw["seed"] = args.seed
            if args.out is not None:
                config.raw["out_dir"] = args.out
            if args.mode is not None:
                config.raw["mode"] = args.mode
                if args.mode == "fdl" and config.raw["topology_file"] is None and config.raw["topology_graph"] is None:
                    raise MissingKey("fdl mode needs topology_file or topology_graph")
            return run_experiment(config)
        if args.command == "report":
            text, rows = compare_report(args.files)
            print(text)
            if args.csv:
                write_report_csv(rows, args.csv)
            return 0
        if args.command == "validate-topology":
            entries = tp.load_topology(args.file)
            cm = tp.validate(entries)
            print(f"OK: {cm.m} workers, lambda = {cm.lam!r}")
            return 0
    except WorkbenchError as e:
        print(e.format_cli(), file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
