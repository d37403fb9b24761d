"""Command-line entry point: ``bsvcert <command> ...``.

Exit codes: 0 success or requirement met, 1 requirement or audit failure,
2 usage or execution error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path
from typing import Mapping, Optional

import numpy as np

from . import __version__
from .bsv import BSV_KERNEL, DEFAULT_RESOLUTION, BsvRunError, bsv_run, estimate_pfail
from .lineage import (
    ChangeOrder,
    DatasetManifest,
    DataStore,
    LineageError,
    TrainingRunRecord,
    canonical_json,
    apply_change_order,
    firewall_check,
    sequence_split,
    verify_integrity,
    verify_reproducibility_artifacts,
)
from .metrics import (
    CONFIDENCE_FLOOR,
    DEFAULT_OKS_K,
    MAX_DETECTIONS_BOX,
    MAX_DETECTIONS_KEYPOINT,
    EvalConfig,
    MetricsSchemaError,
    evaluate_files,
    read_annotations,
    read_predictions,
)
from .odd import OddError, load_space, odd_restrict, odd_sample, space_from_dict, space_to_dict, truncnorm_moments
from .report import RUN_FILE, dumps, run_artifact, state_from_artifact, write_artifacts
from .requirements import ConfigError, DalTable, HazardAssessment, recommend_restriction, verify_requirement
from .surrogate import KernelParams
from .sut import HarnessError, SutDescriptor

EXIT_OK, EXIT_FAIL, EXIT_ERROR = 0, 1, 2
DEFAULT_ITERATIONS = 40
LOG_FILE = "run.log"

log = logging.getLogger("bsvcert")


class CliError(Exception):
    pass


# ---- helpers ----------------------------------------------------------------


def _opt(args, name, default=None):
    return getattr(args, name, default)


def _read_json(path) -> dict:
    p = Path(path)
    if not p.is_file():
        raise CliError(f"file not found: {p}")
    try:
        return json.loads(p.read_text())
    except json.JSONDecodeError as exc:
        raise CliError(f"{p}: invalid JSON: {exc}") from None


def _emit(args, payload: Mapping, human: str) -> None:
    if _opt(args, "json"):
        print(json.dumps(payload, sort_keys=True))
    else:
        print(human)


def _parse_restriction(text: str) -> dict:
    try:
        name, rng = text.split("=", 1)
        lo, hi = (float(v) for v in rng.split(":"))
    except ValueError:
        raise CliError(f"restriction {text!r} is not of the form DIM=LO:HI") from None
    return {"dimension": name, "interval": [lo, hi]}


def _resolve_path(value, base: Path):
    p = Path(value)
    return p if p.is_absolute() else base / p


def _load_section(value, base: Path):
    """A config entry given either inline or as a path to a JSON file."""
    if value is None or isinstance(value, Mapping):
        return value
    return _read_json(_resolve_path(value, base))


def _store(args) -> DataStore:
    try:
        return DataStore.from_env(_opt(args, "store"))
    except LineageError as exc:
        raise CliError(str(exc)) from None


# ---- run configuration -----------------------------------------------------------


def resolve_run_config(args) -> dict:
    """Merge the config file (or a previous run artifact) with command-line flags.

    The result is self-contained: the ODD, SUT, assessment and DAL table are
    inlined so the run can be reproduced from the artifact alone.
    """
    cfg: dict = {}
    base = Path.cwd()
    if _opt(args, "config"):
        path = Path(args.config)
        cfg = _read_json(path)
        if "trials" in cfg and "config" in cfg:
            cfg = dict(cfg["config"])
        base = path.parent

    odd = _opt(args, "odd") or cfg.get("odd")
    if odd is None:
        raise CliError("no ODD given (use --odd or an 'odd' entry in the config)")
    odd = _read_json(odd) if _opt(args, "odd") else _load_section(odd, base)
    space = space_from_dict(odd)
    restrict = list(cfg.get("restrict", [])) + [_parse_restriction(r) for r in _opt(args, "restrict", None) or []]
    for r in restrict:
        space = odd_restrict(space, r["dimension"], r["interval"])

    if _opt(args, "sut_cmd"):
        sut = SutDescriptor.external(args.sut_cmd, timeout_s=_opt(args, "timeout_s") or 30.0)
    else:
        sut = SutDescriptor.from_dict(cfg.get("sut", {"kind": "in_process", "evaluator": "synthetic_vbl"}))
        if _opt(args, "timeout_s") and sut.kind == "external_process":
            sut = replace(sut, timeout_s=args.timeout_s)

    seed = _opt(args, "seed")
    if seed is None:
        seed = cfg.get("seed")
    if seed is None:
        raise CliError("a seed is required (--seed or 'seed' in the config)")

    surrogate = dict(cfg.get("surrogate", {}))
    prior_mean = float(surrogate.pop("prior_mean", 0.5))
    params = KernelParams.from_dict({**BSV_KERNEL.to_dict(), **surrogate})

    table = _load_section(_opt(args, "dal_table") or cfg.get("dal_table"), base)
    assessment = _opt(args, "assessment")
    assessment = _read_json(assessment) if assessment else _load_section(cfg.get("assessment"), base)
    if assessment is not None:
        dal_table = DalTable.from_dict(table) if table else None
        assessment = HazardAssessment.from_dict(assessment, dal_table).to_dict()

    iterations = _opt(args, "iterations") or cfg.get("iterations", DEFAULT_ITERATIONS)
    grid = _opt(args, "grid") or cfg.get("grid_resolution", DEFAULT_RESOLUTION)
    workers = _opt(args, "workers") or cfg.get("workers", 1)
    return {
        "odd": space_to_dict(space),
        "restrict": restrict,
        "sut": sut.to_dict(),
        "iterations": int(iterations),
        "grid_resolution": grid if isinstance(grid, int) else list(grid),
        "seed": int(seed),
        "surrogate": {**params.to_dict(), "prior_mean": prior_mean},
        "workers": int(workers),
        "assessment": assessment,
        "dal_table": table,
        "recommend_dimension": _opt(args, "recommend") or cfg.get("recommend_dimension"),
    }


def _verdict_and_recommendation(state, report, assessment: Optional[Mapping], dimension, grid):
    if assessment is None:
        return None, None
    a = HazardAssessment.from_dict(assessment)
    verdict = verify_requirement(report, a)
    rec = None
    if not verdict.passed and dimension:
        found = recommend_restriction(state, a, dimension, grid)
        rec = {"dimension": dimension, "found": found is not None}
        if found is not None:
            rec.update(found.to_dict())
    return verdict.to_dict(), rec


def _sidecar_logger(out_dir: Path) -> logging.Handler:
    out_dir.mkdir(parents=True, exist_ok=True)
    handler = logging.FileHandler(out_dir / LOG_FILE)
    handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(name)s: %(message)s"))
    logging.getLogger("bsvcert").addHandler(handler)
    logging.getLogger("bsvcert").setLevel(logging.INFO)
    return handler


# ---- commands ---------------------------------------------------------------------


def cmd_odd_sample(args) -> int:
    space = load_space(args.odd)
    if _opt(args, "seed") is None:
        raise CliError("a seed is required (--seed)")
    points = odd_sample(space, args.n, args.seed)
    lines = "".join(json.dumps(p.to_dict(), sort_keys=True) + "\n" for p in points)
    if _opt(args, "out"):
        Path(args.out).write_text(lines)
    else:
        sys.stdout.write(lines)
    return EXIT_OK


def cmd_odd_describe(args) -> int:
    space = load_space(args.odd)
    dims = []
    for d in space.dimensions:
        row = {"name": d.name, "unit": d.unit}
        if d.continuous:
            mean, var = truncnorm_moments(d.dist)
            row.update(
                mu=d.dist.mu, sigma=d.dist.sigma, lower=d.dist.lower, upper=d.dist.upper, mean=mean, std=float(np.sqrt(var))
            )
        else:
            row["categories"] = dict(d.dist.probabilities)
        dims.append(row)
    payload = {"conditioning": space.conditioning, "dimensions": dims}
    human = "\n".join(
        f"{r['name']} [{r['unit']}]: " + (f"mean {r['mean']:.4g}, std {r['std']:.4g} on [{r['lower']}, {r['upper']}]" if "mean" in r else f"{r['categories']}")
        for r in dims
    )
    _emit(args, payload, human)
    return EXIT_OK


def cmd_bsv_run(args) -> int:
    cfg = resolve_run_config(args)
    out = Path(_opt(args, "out") or "bsv_run")
    handler = _sidecar_logger(out)
    try:
        log.info("bsv run started: seed=%d iterations=%d", cfg["seed"], cfg["iterations"])
        space = space_from_dict(cfg["odd"])
        surrogate = dict(cfg["surrogate"])
        prior_mean = surrogate.pop("prior_mean")
        try:
            state = bsv_run(
                space,
                SutDescriptor.from_dict(cfg["sut"]),
                cfg["iterations"],
                cfg["grid_resolution"],
                cfg["seed"],
                KernelParams.from_dict(surrogate),
                prior_mean,
                cfg["workers"],
            )
        except BsvRunError as exc:
            log.error("run aborted after %d trials: %s", len(exc.state.trials), exc.cause)
            raise CliError(f"SUT error after {len(exc.state.trials)} trials: {exc.cause}") from None
        report = estimate_pfail(state, cfg["grid_resolution"])
        verdict, rec = _verdict_and_recommendation(
            state, report, cfg["assessment"], cfg["recommend_dimension"], cfg["grid_resolution"]
        )
        artifact = run_artifact(cfg, state, report, verdict, rec)
        paths = write_artifacts(out, artifact, state, cfg["grid_resolution"])
        code = EXIT_OK if verdict is None or verdict["pass"] else EXIT_FAIL
        log.info("bsv run finished: p_fail=%.6g exit=%d", report.p_fail, code)
    finally:
        logging.getLogger("bsvcert").removeHandler(handler)
        handler.close()
    human = f"p_fail = {report.p_fail:.6g} over {report.num_evaluations} evaluations"
    if verdict is not None:
        human += f"; requirement {verdict['required']:.3g}: {'PASS' if verdict['pass'] else 'FAIL'}"
    if rec is not None and rec["found"]:
        human += f"; restrict {rec['dimension']} to {rec['interval']} for projected p_fail {rec['projected_p_fail']:.3g}"
    _emit(args, {"p_fail": report.p_fail, "verdict": verdict, "recommendation": rec, "artifacts": paths}, human)
    return code


def _load_run(args):
    path = Path(args.run)
    if path.is_dir():
        path = path / RUN_FILE
    artifact = _read_json(path)
    if "trials" not in artifact or "config" not in artifact:
        raise CliError(f"{path} is not a run artifact")
    return path, artifact


def cmd_report(args) -> int:
    path, artifact = _load_run(args)
    state = state_from_artifact(artifact)
    grid = artifact["config"]["grid_resolution"]
    report = estimate_pfail(state, grid)
    paths = write_artifacts(_opt(args, "out") or path.parent, {**artifact, "report": report.to_dict()}, state, grid)
    payload = {"report": report.to_dict(), "artifacts": paths}
    mlf = report.most_likely_failure.to_dict()
    _emit(
        args,
        payload,
        f"p_fail = {report.p_fail:.6g} ({report.method}), {len(report.boundary_cells)} boundary cells, "
        f"most likely failure at {mlf}",
    )
    return EXIT_OK


def cmd_requirement_check(args) -> int:
    _, artifact = _load_run(args)
    cfg = artifact["config"]
    state = state_from_artifact(artifact)
    for text in _opt(args, "restrict", None) or []:
        r = _parse_restriction(text)
        state = replace(state, space=odd_restrict(state.space, r["dimension"], r["interval"]))
    table = _read_json(args.dal_table) if _opt(args, "dal_table") else cfg.get("dal_table")
    if _opt(args, "assessment"):
        assessment = HazardAssessment.from_dict(_read_json(args.assessment), DalTable.from_dict(table) if table else None)
    elif cfg.get("assessment"):
        assessment = HazardAssessment.from_dict(cfg["assessment"])
    else:
        raise CliError("no assessment given (use --assessment)")
    grid = _opt(args, "grid") or cfg["grid_resolution"]
    report = estimate_pfail(state, grid)
    verdict, rec = _verdict_and_recommendation(
        state, report, assessment.to_dict(), _opt(args, "recommend"), grid
    )
    human = f"p_fail = {verdict['estimated']:.6g} vs required {verdict['required']:.3g}: {'PASS' if verdict['pass'] else 'FAIL'} (margin {verdict['margin']:.3g})"
    if rec is not None:
        human += (
            f"\nrecommend {rec['dimension']} in {rec['interval']} (projected p_fail {rec['projected_p_fail']:.3g})"
            if rec["found"]
            else f"\nno upper cutoff on {rec['dimension']} meets the requirement"
        )
    _emit(args, {"verdict": verdict, "recommendation": rec, "space": space_to_dict(state.space)}, human)
    return EXIT_OK if verdict["pass"] else EXIT_FAIL


def _load_manifest(path) -> DatasetManifest:
    try:
        return DatasetManifest.from_dict(_read_json(path))
    except (KeyError, TypeError) as exc:
        raise CliError(f"{path}: not a manifest ({exc})") from None


def _write_manifest(path, manifest: DatasetManifest) -> None:
    Path(path).write_bytes(canonical_json(manifest.to_dict()) + b"\n")


def cmd_lineage_register(args) -> int:
    store = _store(args)
    metadata = json.loads(args.metadata) if _opt(args, "metadata") else {}
    records = []
    for f in args.files:
        payload = Path(f).read_bytes()
        records.append(store.register_datum(payload, args.sequence, metadata, str(f), args.source).to_dict())
    _emit(args, {"records": records}, "\n".join(f"{r['digest']}  {r['locator']}" for r in records))
    return EXIT_OK


def cmd_lineage_split(args) -> int:
    store = _store(args)
    if _opt(args, "manifest"):
        source = _load_manifest(args.manifest)
        records = [store.datum(d) for d in source.datums]
    else:
        records = store.datums()
    if _opt(args, "seed") is None:
        raise CliError("a seed is required (--seed)")
    dev, cert = sequence_split(records, args.dev_fraction, args.seed, args.name)
    out = Path(_opt(args, "out") or ".")
    out.mkdir(parents=True, exist_ok=True)
    result = {}
    for m in (dev, cert):
        store.save_manifest(m)
        path = out / f"{m.name}.json"
        _write_manifest(path, m)
        result[m.role] = {"path": str(path), "digest": m.digest, "datums": len(m.datums), "sequences": len(m.sequence_ids)}
    human = "\n".join(f"{role}: {r['datums']} datums, {r['sequences']} sequences -> {r['path']}" for role, r in result.items())
    _emit(args, result, human)
    return EXIT_OK


def cmd_lineage_verify(args) -> int:
    report = verify_integrity(_load_manifest(args.manifest), _store(args))
    lines = [f"corrupted {d}" for d in report.corrupted] + [f"missing {d}" for d in report.missing]
    _emit(args, report.to_dict(), "\n".join(lines) if lines else "ok")
    return EXIT_OK if report.ok else EXIT_FAIL


def cmd_lineage_firewall(args) -> int:
    verdict = firewall_check([_load_manifest(p) for p in args.training], _load_manifest(args.certification))
    lines = (
        [f"shared datum {d}" for d in verdict.shared_digests]
        + [f"shared sequence {s}" for s in verdict.shared_sequences]
        + [f"certification manifest used for development: {n}" for n in verdict.role_violations]
    )
    _emit(args, verdict.to_dict(), "\n".join(lines) if lines else "pass")
    return EXIT_OK if verdict.passed else EXIT_FAIL


def cmd_lineage_eco(args) -> int:
    store = _store(args)
    manifest = _load_manifest(args.manifest)
    order = ChangeOrder.from_dict(_read_json(args.order))
    new = apply_change_order(order, manifest, store)
    store.save_manifest(new)
    out = _opt(args, "out") or args.manifest
    _write_manifest(out, new)
    _emit(
        args,
        {"path": str(out), "digest": new.digest, "version": new.version, "parent": new.parent},
        f"{new.name} v{new.version} {new.digest} -> {out}",
    )
    return EXIT_OK


def cmd_lineage_runs(args) -> int:
    record = TrainingRunRecord.from_dict(_read_json(args.record))
    checklist = verify_reproducibility_artifacts(record, _store(args))
    human = "\n".join(f"{i.status:4}  {i.artifact}  {i.detail}" for i in checklist.items)
    _emit(args, checklist.to_dict(), human)
    return EXIT_OK if checklist.passed else EXIT_FAIL


def cmd_metrics_eval(args) -> int:
    preds = read_predictions(args.predictions)
    anns = read_annotations(args.annotations)
    config = EvalConfig(
        confidence_floor=args.confidence_floor,
        max_detections_box=args.max_detections_box,
        max_detections_keypoint=args.max_detections_keypoint,
        oks_k=tuple(args.oks_k),
    )
    report = evaluate_files(preds, anns, config)
    if _opt(args, "out"):
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        (out / "metrics.json").write_text(dumps(report.to_dict()))
        (out / "metrics.csv").write_text(report.to_csv())

    def fmt(v):
        return "n/a" if v is None else f"{v:.4f}"

    _emit(args, report.to_dict(), f"AP_BB {fmt(report.ap_bb)}  AP_KP {fmt(report.ap_kp)}  ({report.num_images} images)")
    return EXIT_OK


# ---- parser -----------------------------------------------------------------------


def _global_flags() -> argparse.ArgumentParser:
    # accepted both before and after the subcommand
    p = argparse.ArgumentParser(add_help=False, argument_default=argparse.SUPPRESS)
    p.add_argument("--config", help="run configuration JSON (or a previous run.json)")
    p.add_argument("--seed", type=int, help="random seed (mandatory for stochastic commands)")
    p.add_argument("--out", help="output directory or file")
    p.add_argument("--json", action="store_true", help="machine-readable output on stdout")
    p.add_argument("--workers", type=int, help="concurrent SUT evaluations")
    p.add_argument("--store", help="lineage store root (default: $BSVCERT_STORE)")
    p.add_argument("--sut-cmd", help="command line of an external SUT process")
    p.add_argument("--timeout-s", type=float, help="SUT response timeout in seconds")
    return p


def build_parser() -> argparse.ArgumentParser:
    common = _global_flags()
    parser = argparse.ArgumentParser(prog="bsvcert", description=__doc__.splitlines()[0], parents=[common])
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def leaf(group, name, func, help_):
        p = group.add_parser(name, help=help_, parents=[common])
        p.set_defaults(func=func)
        return p

    odd = sub.add_parser("odd", help="inspect and sample an ODD").add_subparsers(dest="odd_command", required=True)
    p = leaf(odd, "sample", cmd_odd_sample, "draw points from the ODD as JSON lines")
    p.add_argument("--odd", required=True)
    p.add_argument("--n", type=int, default=10)
    p = leaf(odd, "describe", cmd_odd_describe, "summarize the ODD dimensions")
    p.add_argument("--odd", required=True)

    bsv = sub.add_parser("bsv", help="safety validation").add_subparsers(dest="bsv_command", required=True)
    p = leaf(bsv, "run", cmd_bsv_run, "run the validation loop and write artifacts")
    p.add_argument("--odd", help="ODD definition JSON")
    p.add_argument("--iterations", type=int)
    p.add_argument("--grid", type=int, help="grid cells per dimension")
    p.add_argument("--assessment", help="hazard assessment JSON")
    p.add_argument("--dal-table", help="DAL requirement table JSON")
    p.add_argument("--restrict", action="append", metavar="DIM=LO:HI", help="restrict an ODD dimension first")
    p.add_argument("--recommend", metavar="DIM", help="on failure, search an upper cutoff on DIM")

    p = leaf(sub, "report", cmd_report, "regenerate report, grid CSV and heatmap from a run")
    p.add_argument("--run", required=True, help="run.json or its directory")

    req = sub.add_parser("requirement", help="requirement verification").add_subparsers(dest="req_command", required=True)
    p = leaf(req, "check", cmd_requirement_check, "check a run against a failure-probability requirement")
    p.add_argument("--run", required=True, help="run.json or its directory")
    p.add_argument("--assessment", help="hazard assessment JSON (default: the run's)")
    p.add_argument("--dal-table", help="DAL requirement table JSON")
    p.add_argument("--restrict", action="append", metavar="DIM=LO:HI", help="evaluate over a restricted ODD")
    p.add_argument("--recommend", metavar="DIM", help="on failure, search an upper cutoff on DIM")
    p.add_argument("--grid", type=int)

    lin = sub.add_parser("lineage", help="data and model traceability").add_subparsers(dest="lineage_command", required=True)
    p = leaf(lin, "register", cmd_lineage_register, "register data files")
    p.add_argument("files", nargs="+")
    p.add_argument("--sequence", required=True, help="landing sequence id")
    p.add_argument("--metadata", help="JSON object of metadata")
    p.add_argument("--source", default="real", choices=["real", "synthetic"])
    p = leaf(lin, "split", cmd_lineage_split, "sequence-aware development/certification split")
    p.add_argument("--dev-fraction", type=float, default=0.9)
    p.add_argument("--name", default="dataset")
    p.add_argument("--manifest", help="split only this manifest's datums")
    p = leaf(lin, "verify", cmd_lineage_verify, "recompute digests of a manifest's objects")
    p.add_argument("--manifest", required=True)
    p = leaf(lin, "firewall", cmd_lineage_firewall, "audit certification data isolation")
    p.add_argument("--training", nargs="+", required=True)
    p.add_argument("--certification", required=True)
    p = leaf(lin, "eco", cmd_lineage_eco, "apply a change order to a manifest")
    p.add_argument("--manifest", required=True)
    p.add_argument("--order", required=True)
    p = leaf(lin, "runs", cmd_lineage_runs, "check a training-run record for reproducibility artifacts")
    p.add_argument("--record", required=True)

    met = sub.add_parser("metrics", help="detector metrics").add_subparsers(dest="metrics_command", required=True)
    p = leaf(met, "eval", cmd_metrics_eval, "AP over IoU and OKS thresholds")
    p.add_argument("--predictions", required=True)
    p.add_argument("--annotations", required=True)
    p.add_argument("--confidence-floor", type=float, default=CONFIDENCE_FLOOR)
    p.add_argument("--max-detections-box", type=int, default=MAX_DETECTIONS_BOX)
    p.add_argument("--max-detections-keypoint", type=int, default=MAX_DETECTIONS_KEYPOINT)
    p.add_argument("--oks-k", type=float, nargs="+", default=[DEFAULT_OKS_K])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.func(args)
    except (CliError, ConfigError, OddError, LineageError, MetricsSchemaError, HarnessError) as exc:
        print(f"error: {exc}", file=sys.stderr)
    except (OSError, ValueError, KeyError, TypeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
    return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
