"""Command-line interface.

Every command writes a JSON manifest next to its outputs with the resolved
configuration, the seed and the argument vector, so that
``contcrm replay manifest.json`` reruns it exactly.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
import traceback
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from ._accel import get_backend
from .data import DataValidationError, ParseError, kfold_indices, load_csv, save_csv
from .estimators import CrmObjective, InvalidEstimateError
from .learn import LAMBDA_GRID, M_GRID, Candidate, ModelConfig, expand_grid, train_candidate
from .optim import ProxConfig
from .policies import PolicyModel

log = logging.getLogger("contcrm")

EXIT_OK = 0
EXIT_INTERNAL = 1
EXIT_INVALID = 2


class DiagnosticFailure(RuntimeError):
    """The run finished but its result did not pass a diagnostic."""


def default_seed() -> int:
    raw = os.environ.get("CRM_SEED")
    if raw is None or raw == "":
        return 0
    try:
        return int(raw)
    except ValueError:
        raise SystemExit(f"CRM_SEED must be an integer, got {raw!r}")


def _write_json(path: Path, obj) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "w") as fh:
        json.dump(obj, fh, indent=2, sort_keys=True, default=_json_default)
        fh.write("\n")


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer, np.bool_)):
        return o.item()
    if isinstance(o, tuple):
        return list(o)
    raise TypeError(f"cannot serialize {type(o).__name__}")


def _write_csv(path: Path, rows: list[dict]) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    if not rows:
        path.write_text("")
        return
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=list(rows[0]))
        writer.writeheader()
        writer.writerows(rows)


def write_manifest(path: Path, args: argparse.Namespace, config: dict) -> None:
    _write_json(
        path,
        {
            "command": args.command,
            "argv": args.argv,
            "seed": args.seed,
            "config": config,
            "version": __version__,
            "backend": get_backend(),
        },
    )


def _manifest_path(out: Path) -> Path:
    return out / "manifest.json" if out.suffix == "" else out.with_name(out.name + ".manifest.json")


# ---------------------------------------------------------------------------
# generate
# ---------------------------------------------------------------------------


def cmd_generate(args) -> int:
    from .envs import WarfarinEnv, generate_potential_env, make_env, warfarin_logging

    env = make_env(args.env, seed=args.seed)
    if isinstance(env, WarfarinEnv):
        ds = warfarin_logging(env.simulate(args.n, seed=args.seed), seed=args.seed + 1)
    else:
        ds, _ = generate_potential_env(env, args.n, seed=args.seed)
    out = Path(args.out)
    save_csv(ds, out)
    write_manifest(_manifest_path(out), args, {"env": args.env, "env_params": env.to_dict(), "n": args.n})
    log.info("wrote %d rows (d=%d) to %s", ds.n, ds.d, out)
    return EXIT_OK


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


def _load_config(path) -> dict:
    if path is None:
        return {}
    with open(path) as fh:
        return json.load(fh)


def _check_candidate_keys(raw: dict) -> None:
    """Reject unknown sections or fields so that typos do not pass silently."""
    known = {
        "model": set(ModelConfig.__dataclass_fields__),
        "objective": set(CrmObjective.__dataclass_fields__),
        "prox": set(ProxConfig.__dataclass_fields__),
    }
    unknown = sorted(set(raw) - set(known))
    for section, fields in known.items():
        value = raw.get(section, {})
        if not isinstance(value, dict):
            raise DataValidationError(f"config section {section!r} must be an object")
        unknown += [f"{section}.{k}" for k in sorted(set(value) - fields)]
    if unknown:
        raise DataValidationError(f"unknown config fields: {unknown}")


def resolve_candidate(args) -> Candidate:
    """Config file sections overridden by explicit flags."""
    raw = _load_config(args.config)
    _check_candidate_keys(raw)
    cand = Candidate.from_dict(raw)
    model_over = {
        "family": args.family,
        "mean_kind": args.mean,
        "n_anchors": args.n_anchors,
        "anchor_strategy": args.anchor_strategy,
        "context_map": args.context_map,
        "gamma": args.gamma,
        "bandwidth": args.bandwidth,
    }
    obj_over = {
        "estimator": args.estimator,
        "M": args.M,
        "lambda_var": args.lambda_var,
        "lambda_ent": args.lambda_ent,
        "C_reg": args.C_reg,
    }
    model = replace(cand.model, **{k: v for k, v in model_over.items() if v is not None})
    obj = replace(cand.objective, **{k: v for k, v in obj_over.items() if v is not None})
    prox = cand.prox
    if args.prox_kappa is not None:
        prox = replace(prox, kappa=args.prox_kappa)
        if args.outer_iters is None and prox.outer_iters == 1 and args.prox_kappa > 0:
            prox = replace(prox, outer_iters=10)
    if args.outer_iters is not None:
        prox = replace(prox, outer_iters=args.outer_iters)
    if args.max_iter is not None:
        prox = replace(prox, inner=replace(prox.inner, max_iter=args.max_iter))
    prox = replace(prox, seed=args.seed)
    return Candidate(model, CrmObjective.from_dict(obj.to_dict()), prox)


def cmd_train(args) -> int:
    ds = load_csv(args.data)
    cand = resolve_candidate(args)
    out = Path(args.out)
    fit = train_candidate(cand, ds, seed=args.seed)
    _write_json(out / "policy.json", fit.policy.to_dict())
    _write_json(out / "train_result.json", fit.train.to_dict())
    write_manifest(out / "manifest.json", args, {"data": str(args.data), "candidate": cand.to_dict()})
    log.info(
        "objective %.6g -> %.6g in %d inner iterations",
        fit.train.initial_objective,
        fit.train.final_objective,
        sum(fit.train.inner_iters),
    )
    return EXIT_OK


# ---------------------------------------------------------------------------
# evaluate
# ---------------------------------------------------------------------------


def cmd_evaluate(args) -> int:
    from .protocol import evaluate_protocol

    with open(args.model) as fh:
        pm = PolicyModel.from_dict(json.load(fh))
    data = load_csv(args.data)
    if args.valid is not None:
        ds_valid, ds_test = load_csv(args.valid), data
    else:
        first, second = kfold_indices(data.n, 2, seed=args.seed)
        ds_valid, ds_test = data.subset(first), data.subset(second)
    rep = evaluate_protocol(
        pm,
        ds_valid,
        ds_test,
        logging_risk_estimate=args.logging_risk,
        nu=args.nu,
        delta=args.delta,
        n_boot=args.n_boot,
        seed=args.seed,
    )
    report = Path(args.report)
    _write_json(report, rep.to_dict())
    config = {
        "model": str(args.model),
        "data": str(args.data),
        "valid": None if args.valid is None else str(args.valid),
        "nu": args.nu,
        "delta": args.delta,
        "n_boot": args.n_boot,
        "logging_risk": args.logging_risk,
    }
    write_manifest(_manifest_path(report), args, config)
    print(json.dumps(rep.to_dict(), indent=2, default=_json_default))
    if not rep.valid:
        log.warning("invalid estimate: %s", rep.reason)
        return EXIT_INVALID
    return EXIT_OK


# ---------------------------------------------------------------------------
# select
# ---------------------------------------------------------------------------


def resolve_grid(path) -> tuple[Candidate, dict]:
    """Grid file: ``{"base": <candidate>, "axes": {name: [values...]}}``.

    Without a file the base candidate is the default and the axes are the
    clipping and variance grids.
    """
    spec = _load_config(path)
    unknown = sorted(set(spec) - {"base", "axes"})
    if unknown:
        raise DataValidationError(f"unknown grid file keys: {unknown}")
    _check_candidate_keys(spec.get("base", {}))
    base = Candidate.from_dict(spec.get("base", {}))
    axes = spec.get("axes") or {"M": list(M_GRID), "lambda_var": list(LAMBDA_GRID)}
    known = set(ModelConfig.__dataclass_fields__) | set(CrmObjective.__dataclass_fields__) | set(ProxConfig.__dataclass_fields__)
    bad = sorted(set(axes) - known)
    if bad:
        raise DataValidationError(f"unknown grid axes: {bad}")
    return base, axes


def cmd_select(args) -> int:
    from .protocol import NoEligibleCandidateError, cross_validate

    ds = load_csv(args.data)
    base, axes = resolve_grid(args.grid)
    cands = expand_grid(base, **axes)
    out = Path(args.out)
    write_manifest(out / "manifest.json", args, {"data": str(args.data), "base": base.to_dict(), "axes": axes, "folds": args.folds})
    try:
        cv = cross_validate(cands, ds, k_folds=args.folds, nu=args.nu, seed=args.seed, jobs=args.jobs)
    except NoEligibleCandidateError as exc:
        log.error("%s", exc)
        return EXIT_INVALID
    rows = []
    for f in cv.folds:
        row = {"candidate": f.candidate, "fold": f.fold, "snips": f.snips, "ess_ratio": f.ess_ratio, "kept": f.kept}
        row.update({k: json.dumps(v) for k, v in _flat_axes(cands[f.candidate], axes).items()})
        rows.append(row)
    _write_csv(out / "cv_table.csv", rows)
    best = cands[cv.best_index]
    _write_json(out / "best.json", {"index": cv.best_index, "score": cv.scores[cv.best_index], "candidate": best.to_dict()})
    print(json.dumps({"best_index": cv.best_index, "score": cv.scores[cv.best_index], "candidate": best.to_dict()}, indent=2))
    return EXIT_OK


def _flat_axes(cand: Candidate, axes: dict) -> dict:
    d = {**cand.model.to_dict(), **cand.objective.to_dict(), **cand.prox.to_dict()}
    return {k: d.get(k) for k in axes}


# ---------------------------------------------------------------------------
# protocol validation and what-if
# ---------------------------------------------------------------------------


def cmd_validate_protocol(args) -> int:
    from .protocol import ProtocolScenario, ess_sweep, validate_protocol_experiment

    scenario = ProtocolScenario(**_scenario_kwargs(_load_config(args.config)))
    out = Path(args.out)
    summary = validate_protocol_experiment(
        args.setup, n_policies=args.n_policies, n_logged=args.n_logged, seed=args.seed, scenario=scenario, jobs=args.jobs
    )
    result = summary.to_dict()
    result["ess_sweep"] = {e: ess_sweep(summary, estimator=e) for e in ("ips", "snips")}
    _write_json(out / "summary.json", result)
    _write_csv(out / "policies.csv", summary.records())
    sweep_rows = [{"estimator": e, **r} for e, rs in result["ess_sweep"].items() for r in rs]
    _write_csv(out / "ess_sweep.csv", sweep_rows)
    write_manifest(out / "manifest.json", args, {"setup": args.setup, "n_policies": args.n_policies, "scenario": summary.scenario.to_dict()})
    print(json.dumps(result["counts"], indent=2))
    return EXIT_OK


def _scenario_kwargs(d: dict) -> dict:
    from .protocol import ProtocolScenario

    names = ProtocolScenario.__dataclass_fields__
    unknown = set(d) - set(names)
    if unknown:
        raise DataValidationError(f"unknown scenario fields: {sorted(unknown)}")
    return {k: (tuple(v) if isinstance(v, list) else v) for k, v in d.items()}


def _parse_grid(text):
    if text is None or text == "auto":
        return None
    try:
        return np.array([float(t) for t in text.split(",") if t.strip()])
    except ValueError:
        raise DataValidationError(f"--grid must be comma-separated numbers or 'auto', got {text!r}")


def cmd_whatif(args) -> int:
    from dataclasses import asdict

    from .protocol import WhatIfSetup, whatif_diagnostics

    setup = WhatIfSetup(d=args.d, log_mean=args.log_mean, log_std=args.log_std, target_std=args.target_std)
    grid = _parse_grid(args.grid)
    rows = whatif_diagnostics(grid, n=args.n, seed=args.seed, setup=setup)
    out = Path(args.out)
    _write_csv(out / "whatif.csv", [asdict(r) for r in rows])
    write_manifest(
        out / "manifest.json",
        args,
        {"setup": asdict(setup), "grid": [r.mu for r in rows], "n": args.n},
    )
    for r in rows:
        print(f"mu={r.mu:8.4f} ess_ratio={r.ess_ratio:.4f} mean_weight={r.mean_weight:.4f} ci_width={r.ci_width:.4f}")
    return EXIT_OK


# ---------------------------------------------------------------------------
# replay
# ---------------------------------------------------------------------------


def cmd_replay(args) -> int:
    with open(args.manifest) as fh:
        manifest = json.load(fh)
    argv = list(manifest["argv"])
    if "--seed" not in argv:
        argv = ["--seed", str(manifest["seed"])] + argv
    return main(argv)


# ---------------------------------------------------------------------------
# parser
# ---------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="contcrm", description="Counterfactual learning for continuous actions.")
    parser.add_argument("--seed", type=int, default=None, help="master seed (default: $CRM_SEED or 0)")
    parser.add_argument("--jobs", type=int, default=1, help="worker processes for grids")
    parser.add_argument("--log-level", default="INFO")
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="write a logged dataset from a synthetic environment")
    p.add_argument("--env", required=True, choices=["noisymoons", "noisycircles", "anisotropic", "warfarin-sim"])
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="train a policy on logged data")
    p.add_argument("--data", required=True)
    p.add_argument("--config", help="JSON with model/objective/prox sections")
    p.add_argument("--family", choices=["normal", "lognormal"])
    p.add_argument("--mean", choices=["constant", "linear", "poly", "ccp"])
    p.add_argument("--estimator", choices=["ips", "cips", "scips", "snips"])
    p.add_argument("--M", type=float)
    p.add_argument("--lambda-var", type=float)
    p.add_argument("--lambda-ent", type=float)
    p.add_argument("--C-reg", type=float)
    p.add_argument("--prox-kappa", type=float)
    p.add_argument("--outer-iters", type=int)
    p.add_argument("--max-iter", type=int)
    p.add_argument("--n-anchors", type=int)
    p.add_argument("--anchor-strategy", choices=["grid", "quantile", "kmeans"])
    p.add_argument("--context-map", choices=["linear", "quadratic"])
    p.add_argument("--gamma", type=float)
    p.add_argument("--bandwidth", type=float)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("evaluate", help="run the offline protocol on a trained policy")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True, help="test split (split in half when --valid is absent)")
    p.add_argument("--valid", help="validation split")
    p.add_argument("--nu", type=float, default=0.01)
    p.add_argument("--delta", type=float, default=0.05)
    p.add_argument("--n-boot", type=int, default=100)
    p.add_argument("--logging-risk", type=float, default=None, help="default: mean test cost")
    p.add_argument("--report", required=True)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("select", help="k-fold model selection over a grid")
    p.add_argument("--data", required=True)
    p.add_argument("--grid", help="JSON grid file")
    p.add_argument("--folds", type=int, default=5)
    p.add_argument("--nu", type=float, default=0.01)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_select)

    p = sub.add_parser("validate-protocol", help="false positive/negative study of the protocol")
    p.add_argument("--setup", required=True, choices=["i", "ii"])
    p.add_argument("--n-policies", type=int, default=2000)
    p.add_argument("--n-logged", type=int, default=None)
    p.add_argument("--config", help="JSON scenario overrides")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_validate_protocol)

    p = sub.add_parser("whatif", help="importance sampling diagnostics over a target grid")
    p.add_argument("--grid", default="auto", help="comma-separated target means or 'auto'")
    p.add_argument("--n", type=int, default=10000)
    p.add_argument("--d", type=int, default=3)
    p.add_argument("--log-mean", type=float, default=1.0)
    p.add_argument("--log-std", type=float, default=0.5)
    p.add_argument("--target-std", type=float, default=0.5)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_whatif)

    p = sub.add_parser("replay", help="rerun a command from its manifest")
    p.add_argument("manifest")
    p.set_defaults(func=cmd_replay)
    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    args.argv = argv
    if args.seed is None:
        args.seed = default_seed()
    logging.basicConfig(level=getattr(logging, str(args.log_level).upper(), logging.INFO), format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (DataValidationError, ParseError, InvalidEstimateError, DiagnosticFailure, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INVALID
    except Exception:  # noqa: BLE001 - top-level guard maps crashes to exit 1
        traceback.print_exc()
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
