"""Batch front-end: JSON experiment configs in, CSV/JSON artifacts out.

Each config names one command (solve, continue, compress, classify, table,
evolve, bifpoints), a problem, and the command's inputs; the runner writes
the artifacts plus a manifest.json listing every produced file with its
sha256.  Runs are deterministic, so re-running an unchanged config
byte-reproduces every artifact.  A directory of configs can be executed with
a worker pool (one scenario per worker; scenarios never share output files).

Exit codes: 0 success (including a continuation that legitimately ends at a
fold, reported as status "folded"), 2 config validation failure, 3 solver
non-convergence.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from patcon import classify as _classify
from patcon.continuation import (
    StartNotConverged,
    StepControl,
    bifurcation_points,
    continue_branch,
)
from patcon.discretize import Grid
from patcon.evolve import EvolutionConfig, bound_check, integrate
from patcon.model import Problem, Profile
from patcon.solver import NoConvergence, SingularJacobian, TemplateSpec, newton_solve, template_profile

COMMANDS = ("solve", "continue", "compress", "classify", "table", "evolve", "bifpoints")


class ConfigError(ValueError):
    """Invalid experiment configuration (exit code 2)."""


def _require(cfg: dict, key: str, kind=None):
    if key not in cfg:
        raise ConfigError(f"missing config key '{key}'")
    value = cfg[key]
    if kind is not None and not isinstance(value, kind):
        raise ConfigError(f"config key '{key}' has wrong type {type(value).__name__}")
    return value


def _parse_problem(cfg: dict) -> Problem:
    try:
        return Problem.from_dict(_require(cfg, "problem", dict))
    except (ValueError, KeyError) as exc:
        raise ConfigError(f"invalid problem: {exc}") from exc


def _parse_grid(cfg: dict, problem: Problem) -> Grid:
    grid_cfg = _require(cfg, "grid", dict)
    try:
        return Grid(R=problem.R, N=int(_require(grid_cfg, "N", int)))
    except ValueError as exc:
        raise ConfigError(f"invalid grid: {exc}") from exc


def _parse_template(obj: dict) -> TemplateSpec:
    try:
        plateaus = tuple(tuple(p) for p in obj.get("plateaus", ()))
        return TemplateSpec(
            plateaus=plateaus,
            smoothing_width=float(obj.get("smoothing_width", 1.0)),
        )
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid template: {exc}") from exc


def _parse_step_control(obj: dict | None) -> StepControl:
    if not obj:
        return StepControl()
    allowed = set(StepControl.__dataclass_fields__)
    unknown = set(obj) - allowed
    if unknown:
        raise ConfigError(f"unknown step_control keys: {sorted(unknown)}")
    try:
        return StepControl(**obj)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid step_control: {exc}") from exc


def _solve_from_template(cfg: dict, problem: Problem) -> Profile:
    grid = _parse_grid(cfg, problem)
    template = _parse_template(_require(cfg, "template", dict))
    try:
        init = template_profile(template, grid)
    except ValueError as exc:
        raise ConfigError(f"invalid template: {exc}") from exc
    tol = float(cfg.get("tol", 1e-8))
    return newton_solve(problem, init, tol=tol)


def _json_dump(obj, path: Path) -> None:
    path.write_text(json.dumps(obj, sort_keys=True, indent=2) + "\n")


def _profile_summary(profile: Profile, problem: Problem) -> dict:
    summary = {
        "sup_norm": profile.sup_norm,
        "residual_norm": profile.residual_norm,
        "eps": profile.eps,
        "R": profile.R,
    }
    try:
        summary["c_F"] = _classify.critical_value(profile, problem)
    except ValueError:
        summary["c_F"] = None
    try:
        summary["sigma"] = _classify.multiindex(profile).render()
    except ValueError:
        summary["sigma"] = None
    return summary


def _cmd_solve(cfg: dict, problem: Problem, out: Path) -> tuple[str, list[Path]]:
    profile = _solve_from_template(cfg, problem)
    prof_path = out / "profile.csv"
    profile.to_csv(prof_path)
    summary_path = out / "solution.json"
    _json_dump(_profile_summary(profile, problem), summary_path)
    return "ok", [prof_path, summary_path]


def _cmd_continue(cfg: dict, problem: Problem, out: Path) -> tuple[str, list[Path]]:
    start = _solve_from_template(cfg, problem)
    param_kind = _require(cfg, "param_kind", str)
    if param_kind not in ("eps", "R"):
        raise ConfigError(f"param_kind must be 'eps' or 'R', got {param_kind}")
    target = float(_require(cfg, "param_target", (int, float)))
    ctrl = _parse_step_control(cfg.get("step_control"))
    branch = continue_branch(problem, start, param_kind, target, ctrl)
    files = []
    branch_path = out / "branch.csv"
    branch.to_csv(branch_path)
    files.append(branch_path)
    folds_path = out / "folds.json"
    _json_dump(
        {
            "status": branch.status,
            "folds": [
                {
                    "param_star": f.param_star,
                    "sup_norm_star": f.sup_norm_star,
                    "direction_change": f.direction_change,
                }
                for f in branch.folds
            ],
        },
        folds_path,
    )
    files.append(folds_path)
    if cfg.get("write_profiles", False):
        prof_dir = out / "profiles"
        prof_dir.mkdir(exist_ok=True)
        entries = []
        for i, rec in enumerate(branch.records):
            p = prof_dir / f"record_{i:05d}.csv"
            rec.profile.to_csv(p)
            entries.append({"param": rec.param, "file": str(p.relative_to(out))})
            files.append(p)
        idx_path = out / "profiles.json"
        _json_dump(entries, idx_path)
        files.append(idx_path)
    status = "folded" if branch.folds else branch.status
    return status, files


def _cmd_compress(cfg: dict, problem: Problem, out: Path) -> tuple[str, list[Path]]:
    start = _solve_from_template(cfg, problem)
    ctrl = _parse_step_control(cfg.get("step_control"))
    r_target = cfg.get("r_target")
    report = _classify.generalized_index(
        problem,
        start,
        ctrl=ctrl,
        r_target=float(r_target) if r_target is not None else None,
        amp_threshold=float(cfg.get("amp_threshold", 1e-3)),
    )
    files = []
    rep_path = out / "compress.json"
    _json_dump(report.to_dict(), rep_path)
    files.append(rep_path)
    final_path = out / "final_profile.csv"
    report.branch.records[-1].profile.to_csv(final_path)
    files.append(final_path)
    branch_path = out / "branch.csv"
    report.branch.to_csv(branch_path)
    files.append(branch_path)
    return "ok", files


def _cmd_classify(cfg: dict, problem: Problem, out: Path) -> tuple[str, list[Path]]:
    profile = _solve_from_template(cfg, problem)
    result = _profile_summary(profile, problem)
    result["extrema"] = _classify.extremum_count(profile)
    try:
        tail = _classify.tail_fit(profile, problem)
        result["tail"] = {
            "kind": tail.kind,
            "interface_location": _none_if_nan(tail.interface_location),
            "gamma": _none_if_nan(tail.gamma),
            "decay_rate": _none_if_nan(tail.decay_rate),
            "frequency": _none_if_nan(tail.frequency),
            "fit_residual": _none_if_nan(tail.fit_residual),
            "resolved": tail.resolved,
        }
    except ValueError:
        result["tail"] = None
    path = out / "classify.json"
    _json_dump(result, path)
    prof_path = out / "profile.csv"
    profile.to_csv(prof_path)
    return "ok", [path, prof_path]


def _none_if_nan(x):
    if x is None:
        return None
    x = float(x)
    if np.isnan(x):
        return None
    return None if np.isinf(x) and x > 0 else x if np.isfinite(x) else "inf"


def _cmd_table(cfg: dict, problem: Problem, out: Path) -> tuple[str, list[Path]]:
    rows = _require(cfg, "rows", list)
    grid = _parse_grid(cfg, problem)
    tol = float(cfg.get("tol", 1e-8))
    results = []
    for row in rows:
        if not isinstance(row, dict) or "label" not in row or "template" not in row:
            raise ConfigError("table rows need 'label' and 'template'")
        template = _parse_template(row["template"])
        profile = newton_solve(problem, template_profile(template, grid), tol=tol)
        summary = _profile_summary(profile, problem)
        results.append((row["label"], summary))
    table_path = out / "table.csv"
    with open(table_path, "w", newline="") as fh:
        fh.write("label,c_F,sup_norm,residual_norm,sigma\n")
        for label, summary in results:
            fh.write(
                f"{label},{summary['c_F']!r},{summary['sup_norm']!r},"
                f"{summary['residual_norm']!r},\"{summary['sigma']}\"\n"
            )
    ordering = None
    labeled = [(label, s["c_F"]) for label, s in results if isinstance(label, int)]
    if len(labeled) >= 2 and all(c is not None for _, c in labeled):
        ordering = _classify.ordering_check(labeled)
    ord_path = out / "ordering.json"
    _json_dump({"decreasing_in_label": ordering}, ord_path)
    return "ok", [table_path, ord_path]


def _cmd_evolve(cfg: dict, problem: Problem, out: Path) -> tuple[str, list[Path]]:
    grid = _parse_grid(cfg, problem)
    initial = _require(cfg, "initial", dict)
    template = _parse_template(_require(initial, "template", dict))
    amplitude = float(initial.get("amplitude", 1.0))
    v0 = template_profile(template, grid)
    v0 = v0.with_values(amplitude * v0.values, np.nan)
    t_end = float(_require(cfg, "t_end", (int, float)))
    evo_cfg = cfg.get("config", {})
    allowed = set(EvolutionConfig.__dataclass_fields__)
    unknown = set(evo_cfg) - allowed
    if unknown:
        raise ConfigError(f"unknown evolve config keys: {sorted(unknown)}")
    try:
        evolution = EvolutionConfig(**evo_cfg)
    except (TypeError, ValueError) as exc:
        raise ConfigError(f"invalid evolve config: {exc}") from exc
    mode = cfg.get("mode", "extinction" if problem.n < 0 else "blowup")
    _, trace = integrate(problem, v0, t_end, evolution)
    report = bound_check(trace, problem.n, mode)
    trace_path = out / "trace.csv"
    trace.to_csv(trace_path)
    rep_path = out / "bound_report.json"
    _json_dump(
        {
            "mode": report.mode,
            "T": report.T,
            "hypotheses_met": report.hypotheses_met,
            "max_bound_violation": _none_if_nan(report.max_bound_violation),
            "max_identity_error": _none_if_nan(report.max_identity_error),
            "max_concavity_violation": _none_if_nan(report.max_concavity_violation),
            "checked_until": report.checked_until,
            "stop_reason": trace.stop_reason,
        },
        rep_path,
    )
    return "ok", [trace_path, rep_path]


def _cmd_bifpoints(cfg: dict, problem: Problem, out: Path) -> tuple[str, list[Path]]:
    k = int(_require(cfg, "k", int))
    grid_cfg = cfg.get("grid", {})
    N = int(grid_cfg.get("N", 1601))
    try:
        points = bifurcation_points(problem, k, N=N)
    except ValueError as exc:
        raise ConfigError(str(exc)) from exc
    path = out / "bifpoints.csv"
    with open(path, "w", newline="") as fh:
        fh.write("l,eps_l\n")
        for l, e in enumerate(points):
            fh.write(f"{l},{e!r}\n")
    return "ok", [path]


_DISPATCH = {
    "solve": _cmd_solve,
    "continue": _cmd_continue,
    "compress": _cmd_compress,
    "classify": _cmd_classify,
    "table": _cmd_table,
    "evolve": _cmd_evolve,
    "bifpoints": _cmd_bifpoints,
}


def run(config: dict, out_dir: Path) -> tuple[int, dict]:
    """Execute one experiment config; returns (exit_code, manifest dict)."""
    try:
        command = _require(config, "command", str)
        if command not in COMMANDS:
            raise ConfigError(f"unknown command '{command}'")
        problem = _parse_problem(config)
        out_dir.mkdir(parents=True, exist_ok=True)
        status, files = _DISPATCH[command](config, problem, out_dir)
    except ConfigError as exc:
        return 2, {"status": "config_error", "error": str(exc)}
    except (NoConvergence, StartNotConverged, SingularJacobian) as exc:
        return 3, {"status": "no_convergence", "error": str(exc)}

    manifest = {
        "command": command,
        "status": status,
        "files": [
            {
                "path": str(p.relative_to(out_dir)),
                "sha256": hashlib.sha256(p.read_bytes()).hexdigest(),
                "bytes": p.stat().st_size,
            }
            for p in sorted(files)
        ],
    }
    _json_dump(manifest, out_dir / "manifest.json")
    return 0, manifest


def _run_scenario_file(args: tuple[str, str]) -> tuple[str, int]:
    path, out_root = args
    cfg_path = Path(path)
    try:
        config = json.loads(cfg_path.read_text())
    except (OSError, json.JSONDecodeError) as exc:
        print(f"{cfg_path.name}: invalid JSON ({exc})", file=sys.stderr)
        return path, 2
    out_dir = Path(out_root) / cfg_path.stem
    if isinstance(config, dict) and config.get("output_dir") and out_root == "":
        out_dir = Path(config["output_dir"])
    code, manifest = run(config, out_dir)
    return path, code


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(
        prog="patcon", description="Run pattern/continuation experiment configs"
    )
    parser.add_argument("--config", required=True, help="config JSON file or directory of configs")
    parser.add_argument("--out", default=None, help="output directory (overrides config output_dir)")
    parser.add_argument("--jobs", type=int, default=1, help="worker pool size for config directories")
    parser.add_argument("--verbose", action="store_true")
    args = parser.parse_args(argv)

    cfg_path = Path(args.config)
    if not cfg_path.exists():
        print(f"config path {cfg_path} does not exist", file=sys.stderr)
        return 2

    if cfg_path.is_dir():
        files = sorted(str(p) for p in cfg_path.glob("*.json"))
        if not files:
            print(f"no *.json configs under {cfg_path}", file=sys.stderr)
            return 2
        out_root = args.out or str(cfg_path / "out")
        worst = 0
        if args.jobs > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                for path, code in pool.map(_run_scenario_file, [(f, out_root) for f in files]):
                    if args.verbose:
                        print(f"{path}: exit {code}")
                    worst = max(worst, code)
        else:
            for f in files:
                path, code = _run_scenario_file((f, out_root))
                if args.verbose:
                    print(f"{path}: exit {code}")
                worst = max(worst, code)
        return worst

    try:
        config = json.loads(cfg_path.read_text())
    except json.JSONDecodeError as exc:
        print(f"invalid JSON: {exc}", file=sys.stderr)
        return 2
    if not isinstance(config, dict):
        print("config root must be a JSON object", file=sys.stderr)
        return 2
    out_dir = Path(args.out) if args.out else Path(config.get("output_dir", cfg_path.stem + "_out"))
    code, manifest = run(config, out_dir)
    if args.verbose or code != 0:
        print(json.dumps(manifest, sort_keys=True, indent=2))
    return code


if __name__ == "__main__":
    sys.exit(main())
