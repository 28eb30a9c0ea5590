"""Command-line front end: ``msplit {estimate, run, compare, phantom}``.

Exit codes: 0 success, 2 configuration or assembly error, 3 numerical failure.
"""
from __future__ import annotations

import argparse
import csv
import hashlib
import json
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Literal, Optional, Union

import numpy as np
from pydantic import BaseModel, ConfigDict, Field, ValidationError, field_validator

try:
    import tomllib
except ModuleNotFoundError:  # Python < 3.11
    import tomli as tomllib

from . import diagnostics, solvers, tomo
from .linops import estimate_spectra
from .solvers import InadmissibleStepError, NonFiniteIterateError, SolverConfig
from .stepsize import ConstantsLedger, assemble_ledger, fbhf_epsilon
from .synthetic import AffineInstance, affine_problem, make_quadratic_instance, solve_affine_vi

EXIT_OK, EXIT_CONFIG, EXIT_NUMERIC = 0, 2, 3
CSV_COLUMNS = ("n", "wall_ns", "residual", "snr_db", "nmse", "mae", "dist_to_ref")


class ConfigError(Exception):
    pass


# --------------------------------------------------------------------------- config schema

class _Section(BaseModel):
    model_config = ConfigDict(extra="forbid")


class GeometryCfg(_Section):
    n_pixels_side: int = Field(32, ge=2)
    n_angles: int = Field(24, ge=1)
    n_bins: int = Field(48, ge=1)
    bin_upsampling: float = Field(1.0, gt=0)


class PenaltiesCfg(_Section):
    weight: float = Field(150.0, gt=0)
    delta: float = Field(5.0, gt=0)
    alpha: float = Field(0.1, ge=0)
    x_max: float = Field(900.0, gt=0)
    rho: Union[Literal["recipe"], float] = "recipe"
    rho_margin: float = Field(1e-3, gt=0)
    haar_levels: int = Field(2, ge=0)


class DataCfg(_Section):
    sigma: float = Field(200.0, ge=0)
    phantom: Literal["disks", "checker"] = "checker"


class MismatchCfg(_Section):
    kind: Literal["constant", "geometric"] = "constant"
    omega0: float = Field(0.0, ge=0)
    eta_bar: float = 0.0
    seed: Optional[int] = None

    @field_validator("eta_bar")
    @classmethod
    def _eta(cls, v):
        if not 0.0 <= v < 1.0:
            raise ValueError("eta_bar must lie in [0, 1)")
        return v


class QuadraticCfg(_Section):
    dim: int = Field(16, ge=1)
    mismatch_scale: float = Field(0.0, ge=0)
    rho: float = 0.1
    alpha: float = Field(1.0, ge=0)
    box: float = Field(1.0, gt=0)


class CustomCfg(_Section):
    path: str


class SolverCfg(_Section):
    gamma: Optional[float] = Field(None, gt=0)
    rel_residual_tol: float = Field(1e-6, ge=0)
    record_every: int = Field(10, ge=1)


class RunConfig(_Section):
    problem: Literal["ct_desk", "quadratic_synthetic", "custom_file"] = "ct_desk"
    algorithm: Literal["mmfbhf", "mmfdrf", "both"] = "mmfbhf"
    seed: int = 0
    max_iter: int = Field(2000, ge=1)
    output_dir: str = "msplit_out"
    no_timing: bool = False
    geometry: GeometryCfg = GeometryCfg()
    penalties: PenaltiesCfg = PenaltiesCfg()
    data: DataCfg = DataCfg()
    mismatch: MismatchCfg = MismatchCfg()
    quadratic: QuadraticCfg = QuadraticCfg()
    custom: Optional[CustomCfg] = None
    solver: SolverCfg = SolverCfg()

    def algorithms(self) -> list[str]:
        return ["mmfbhf", "mmfdrf"] if self.algorithm == "both" else [self.algorithm]

    def problem_hash(self) -> str:
        """Digest of everything defining the base problem; the mismatch schedule and solver are excluded."""
        key = {"problem": self.problem, "seed": self.seed}
        if self.problem == "ct_desk":
            key.update(geometry=self.geometry.model_dump(), penalties=self.penalties.model_dump(),
                       data=self.data.model_dump())
        elif self.problem == "quadratic_synthetic":
            key["quadratic"] = self.quadratic.model_dump(exclude={"mismatch_scale"})
        else:
            key["custom"] = hashlib.sha256(Path(self.custom.path).read_bytes()).hexdigest()
        return hashlib.sha256(json.dumps(key, sort_keys=True).encode()).hexdigest()[:16]


def _format_errors(exc: ValidationError) -> str:
    lines = []
    for e in exc.errors():
        loc = ".".join(str(p) for p in e["loc"]) or "<root>"
        lines.append(f"  {loc}: {e['msg']}")
    return "invalid configuration:\n" + "\n".join(lines)


def load_config(path: Optional[str], overrides: dict) -> RunConfig:
    raw = {}
    if path:
        try:
            raw = tomllib.loads(Path(path).read_text())
        except FileNotFoundError:
            raise ConfigError(f"config file not found: {path}") from None
        except tomllib.TOMLDecodeError as exc:
            raise ConfigError(f"{path}: {exc}") from None
    raw.update({k: v for k, v in overrides.items() if v is not None})
    try:
        cfg = RunConfig.model_validate(raw)
    except ValidationError as exc:
        raise ConfigError(_format_errors(exc)) from None
    if cfg.problem == "custom_file":
        if cfg.custom is None:
            raise ConfigError("invalid configuration:\n  custom.path: required for problem custom_file")
        if not Path(cfg.custom.path).is_file():
            raise ConfigError(f"invalid configuration:\n  custom.path: no such file {cfg.custom.path}")
    return cfg


# --------------------------------------------------------------------------- problem assembly

class Assembled:
    """An instance ready to run: problem, ledger and what the metrics compare against."""

    def __init__(self, spec, ledger: ConstantsLedger, truth: np.ndarray, reference: Optional[np.ndarray],
                 eta_bar: float, extra: Optional[dict] = None, matched_solution: Optional[np.ndarray] = None,
                 estimates=None):
        self.spec = spec
        self.ledger = ledger
        self.truth = truth
        self.reference = reference
        self.eta_bar = eta_bar
        self.extra = extra or {}
        self.matched_solution = matched_solution
        self.estimates = estimates


def _mismatch_dict(cfg: RunConfig) -> dict:
    m = cfg.mismatch
    return {"kind": m.kind, "omega0": m.omega0, "eta_bar": m.eta_bar,
            "seed": cfg.seed if m.seed is None else m.seed}


def _load_custom(path: str) -> AffineInstance:
    with np.load(path) as f:
        arrays = {k: f[k] for k in f.files}
    try:
        L = np.atleast_2d(arrays["L"]).astype(float)
        n = L.shape[1]
        K = np.atleast_2d(arrays.get("K", L.T)).astype(float)
        get = lambda k, d: float(arrays[k]) if k in arrays else d  # noqa: E731
        return AffineInstance(
            L=L, K=K, c=np.asarray(arrays["c"], float),
            Q=np.asarray(arrays.get("Q", np.zeros((n, n))), float),
            q=np.asarray(arrays.get("q", np.zeros(n)), float),
            S=np.asarray(arrays.get("S", np.zeros((L.shape[0], L.shape[0]))), float),
            alpha=get("alpha", 1.0), rho=get("rho", 0.1), lo=get("lo", -np.inf), hi=get("hi", np.inf))
    except KeyError as exc:
        raise ConfigError(f"custom problem file lacks array {exc}") from None


def assemble(cfg: RunConfig) -> Assembled:
    mm = _mismatch_dict(cfg)
    eta = cfg.mismatch.eta_bar if cfg.mismatch.kind == "geometric" else 0.0
    if cfg.problem == "ct_desk":
        g = tomo.Geometry(**cfg.geometry.model_dump())
        p = cfg.penalties
        x_bar = tomo.make_phantom(g, cfg.data.phantom, seed=cfg.seed, x_max=p.x_max)
        L = tomo.ray_driven_projector(g)
        sino = tomo.synthesize_data(L, x_bar, cfg.data.sigma, seed=cfg.seed, geometry=g)
        pen = tomo.CTPenalties(p.weight, p.delta, p.alpha, p.x_max, p.rho, p.rho_margin, p.haar_levels)
        try:
            spec, ledger = tomo.build_ct_problem(g, pen, sino, mismatch=mm, seed=cfg.seed)
        except ValueError as exc:
            raise ConfigError(f"assembly failed: {exc}") from None
        extra = {"input_snr_db": diagnostics.input_snr(spec.L(x_bar), sino.values),
                 "mismatch_severity": ledger.mismatch_severity}
        return Assembled(spec, ledger, x_bar, None, eta, extra)

    if cfg.problem == "quadratic_synthetic":
        qc = cfg.quadratic
        inst = make_quadratic_instance(qc.dim, cfg.seed, qc.mismatch_scale, qc.rho, qc.alpha, qc.box)
    else:
        inst = _load_custom(cfg.custom.path)
    try:
        spec = affine_problem(inst, mm, seed=cfg.seed)
        est = estimate_spectra(spec.L, spec.K, seed=cfg.seed)
        ledger = assemble_ledger(spec, est)
    except ValueError as exc:
        raise ConfigError(f"assembly failed: {exc}") from None
    if not ledger.rho_hat > 0:
        raise ConfigError(f"assembly failed: rho_hat = {ledger.rho_hat:.4g} <= 0")
    try:
        ref = solve_affine_vi(inst)
        matched = solve_affine_vi(inst.matched())
    except (ValueError, RuntimeError) as exc:
        raise ConfigError(f"reference solve failed: {exc}") from None
    return Assembled(spec, ledger, ref, ref, eta, {"mismatch_severity": ledger.mismatch_severity},
                     matched_solution=matched, estimates=est)


def solver_config(cfg: RunConfig, asm: Assembled, algorithm: str) -> SolverConfig:
    try:
        sc = SolverConfig.from_ledger(asm.ledger, algorithm, max_iter=cfg.max_iter,
                                      rel_residual_tol=cfg.solver.rel_residual_tol,
                                      record_every=cfg.solver.record_every, reference=asm.reference)
        if cfg.solver.gamma is not None:
            sc.gamma = cfg.solver.gamma
            if algorithm == "mmfbhf":
                sc.epsilon = max(fbhf_epsilon(sc.gamma, asm.ledger.chi), 0.0)
        sc.validate(asm.ledger)
    except InadmissibleStepError as exc:
        raise ConfigError(f"invalid configuration:\n  solver.gamma: {exc}") from None
    return sc


# --------------------------------------------------------------------------- outputs

def _json_default(o):
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    if isinstance(o, np.ndarray):
        return o.tolist()
    raise TypeError(type(o))


def _clean(obj):
    if isinstance(obj, float) and not math.isfinite(obj):
        return None
    if isinstance(obj, dict):
        return {k: _clean(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_clean(v) for v in obj]
    return obj


def write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(_clean(obj), indent=2, sort_keys=True, default=_json_default) + "\n")


def _fmt(v) -> str:
    if v is None:
        return ""
    if isinstance(v, int):
        return str(v)
    return repr(float(v))


def execute_run(cfg: RunConfig, algorithm: str, out_dir: Path, asm: Optional[Assembled] = None,
                run_id: Optional[str] = None) -> dict:
    """Run one algorithm, streaming the trace CSV; returns the summary dict.

    Raises :class:`NonFiniteIterateError` after flushing the partial CSV.
    """
    asm = asm or assemble(cfg)
    sc = solver_config(cfg, asm, algorithm)
    run_id = run_id or algorithm
    out_dir.mkdir(parents=True, exist_ok=True)
    csv_path = out_dir / f"trace_{run_id}.csv"
    z0 = np.zeros(asm.spec.dim)
    roi = None
    if cfg.problem == "ct_desk":
        roi = tomo.fov_mask(tomo.Geometry(**cfg.geometry.model_dump()))

    with open(csv_path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(CSV_COLUMNS)

        def on_record(rec):
            q = diagnostics.quality(rec.x, asm.truth)
            wall = 0 if cfg.no_timing else rec.wall_ns
            writer.writerow([str(rec.n), str(wall), _fmt(rec.residual), _fmt(q.snr_db), _fmt(q.nmse),
                             _fmt(q.mae), _fmt(rec.dist_to_ref)])

        try:
            trace = solvers.run(asm.spec, sc, asm.ledger, z0, callback=on_record)
        finally:
            fh.flush()

    final_q = diagnostics.quality(trace.x_final, asm.truth, roi)
    theta = asm.ledger.theta_fbhf if algorithm == "mmfbhf" else asm.ledger.theta_fdrf
    dists, ref_kind = _distances_for_report(trace)
    rate = fejer = None
    if dists.size >= 8 and theta is not None:
        try:
            stride = 1 if ref_kind == "reference" else sc.record_every
            rate = diagnostics.rate_estimate(dists, theta, asm.eta_bar, stride=stride).to_dict()
        except ValueError:
            rate = None
    if dists.size >= 2:
        omegas = np.asarray(trace.omegas[: dists.size - 1])
        if ref_kind == "final_iterate":
            omegas = np.asarray([trace.omegas[r.n] for r in trace.records[:-1]][: dists.size - 1])
        fejer = diagnostics.fejer_monitor(dists, omegas).to_dict()
    summary = {
        "run_id": run_id,
        "algorithm": algorithm,
        "problem": cfg.problem,
        "problem_hash": cfg.problem_hash(),
        "seed": cfg.seed,
        "gamma": sc.gamma,
        "iterations": trace.n_iter,
        "converged": trace.converged,
        "final_residual": trace.residuals[-1],
        "final_metrics": final_q.to_dict(),
        "rate_report": rate,
        "rate_reference": ref_kind,
        "fejer_report": fejer,
        "ledger": asm.ledger.to_dict(),
        "trace_csv": csv_path.name,
    }
    summary.update(asm.extra)
    if asm.matched_solution is not None and asm.estimates is not None:
        # the bound relates exact solutions, so use the dense reference rather than the stopped iterate
        try:
            gap = diagnostics.gap_bound_report(asm.reference, asm.matched_solution, asm.spec, asm.estimates)
            summary["gap_bound_report"] = gap.to_dict()
        except ValueError as exc:
            summary["gap_bound_report"] = {"error": str(exc)}
    if not cfg.no_timing:
        summary["wall_ns"] = trace.wall_ns[-1]
    write_json(out_dir / f"summary_{run_id}.json", summary)
    return summary


def _distances_for_report(trace) -> tuple[np.ndarray, str]:
    if trace.dist_to_ref:
        return trace.distances(), "reference"
    # without a known solution use recorded iterates against the last one
    zN = trace.z_final
    d = np.array([float(np.linalg.norm(r.z - zN)) for r in trace.records[:-1]])
    return d, "final_iterate"


# --------------------------------------------------------------------------- subcommands

def cmd_estimate(cfg: RunConfig, out: Path) -> int:
    asm = assemble(cfg)
    for alg in cfg.algorithms():
        solver_config(cfg, asm, alg)
    out.mkdir(parents=True, exist_ok=True)
    payload = {"problem": cfg.problem, "problem_hash": cfg.problem_hash(), "seed": cfg.seed,
               "ledger": asm.ledger.to_dict(), **asm.extra}
    write_json(out / "ledger.json", payload)
    print(out / "ledger.json")
    return EXIT_OK


def cmd_run(cfg: RunConfig, out: Path) -> int:
    asm = assemble(cfg)
    configs = [solver_config(cfg, asm, alg) for alg in cfg.algorithms()]
    del configs  # admissibility checked for every algorithm before any run starts
    for alg in cfg.algorithms():
        try:
            s = execute_run(cfg, alg, out, asm)
        except NonFiniteIterateError as exc:
            print(f"numerical failure in {alg}: {exc}", file=sys.stderr)
            return EXIT_NUMERIC
        fm = s["final_metrics"]
        print(f"{alg}: {s['iterations']} iterations, residual {s['final_residual']:.3e}, "
              f"SNR {fm['snr_db']:.3f} dB")
    return EXIT_OK


def _worker_count(n_runs: int) -> int:
    cap = os.environ.get("MSPLIT_THREADS")
    workers = min(n_runs, os.cpu_count() or 1)
    if cap:
        try:
            workers = min(workers, max(1, int(cap)))
        except ValueError:
            raise ConfigError(f"MSPLIT_THREADS must be an integer, got {cap!r}") from None
    return max(1, workers)


def _compare_job(args):
    cfg_dict, alg, out, run_id = args
    cfg = RunConfig.model_validate(cfg_dict)
    return execute_run(cfg, alg, Path(out), run_id=run_id)


def cmd_compare(cfgs: list[RunConfig], out: Path) -> int:
    hashes = {c.problem_hash() for c in cfgs}
    if len(hashes) > 1:
        raise ConfigError(f"runs target different problems (hashes {sorted(hashes)})")
    jobs = []
    for i, c in enumerate(cfgs):
        asm = assemble(c)
        for alg in c.algorithms():
            solver_config(c, asm, alg)
            jobs.append((c.model_dump(), alg, str(out), f"{i}_{alg}"))
    if len(jobs) < 2:
        raise ConfigError("compare needs at least two runs")
    out.mkdir(parents=True, exist_ok=True)
    workers = _worker_count(len(jobs))
    try:
        if workers > 1:
            with ProcessPoolExecutor(max_workers=workers) as pool:
                summaries = list(pool.map(_compare_job, jobs))
        else:
            summaries = [_compare_job(j) for j in jobs]
    except NonFiniteIterateError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    with open(out / "compare.csv", "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(("run_id", "algorithm") + CSV_COLUMNS)
        for s in summaries:
            with open(out / s["trace_csv"], newline="") as src:
                rows = csv.reader(src)
                next(rows)
                for row in rows:
                    writer.writerow([s["run_id"], s["algorithm"], *row])
    write_json(out / "compare_summary.json", {"problem_hash": hashes.pop(), "runs": summaries})
    for s in summaries:
        print(f"{s['run_id']}: SNR {s['final_metrics']['snr_db']:.3f} dB after {s['iterations']} iterations")
    return EXIT_OK


def cmd_phantom(cfg: RunConfig, out: Path) -> int:
    if cfg.problem != "ct_desk":
        raise ConfigError("phantom needs problem = ct_desk")
    g = tomo.Geometry(**cfg.geometry.model_dump())
    x_bar = tomo.make_phantom(g, cfg.data.phantom, seed=cfg.seed, x_max=cfg.penalties.x_max)
    L = tomo.ray_driven_projector(g)
    sino = tomo.synthesize_data(L, x_bar, cfg.data.sigma, seed=cfg.seed, geometry=g)
    meta = tomo.geometry_meta(g)
    tomo.export_array(out / "phantom", x_bar, (g.n_pixels_side, g.n_pixels_side),
                      {**meta, "kind": cfg.data.phantom, "seed": cfg.seed})
    tomo.export_array(out / "sinogram", sino.values, (g.n_angles, g.n_bins),
                      {**meta, "sigma": cfg.data.sigma, "seed": cfg.seed})
    print(out / "phantom.bin")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="msplit", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name, helptext in (("estimate", "write the constants ledger"),
                           ("run", "run the solver(s) and write trace CSV + summary JSON"),
                           ("compare", "run several configs and merge their traces"),
                           ("phantom", "export the phantom and its sinogram")):
        p = sub.add_parser(name, help=helptext)
        if name == "compare":
            p.add_argument("--config", action="append", default=[], metavar="PATH",
                           help="config file; repeat for several runs")
        else:
            p.add_argument("--config", metavar="PATH", help="TOML config file")
        p.add_argument("--problem", choices=["ct_desk", "quadratic_synthetic", "custom_file"])
        p.add_argument("--seed", type=int)
        p.add_argument("--out", metavar="DIR")
        p.add_argument("--algorithm", choices=["mmfbhf", "mmfdrf", "both"])
        p.add_argument("--max-iter", type=int, dest="max_iter")
        p.add_argument("--no-timing", action="store_true", default=None,
                       help="write wall_ns = 0 so traces are byte-identical across runs")
    return parser


def main(argv: Optional[list[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    overrides = {"problem": args.problem, "seed": args.seed, "algorithm": args.algorithm,
                 "max_iter": args.max_iter, "output_dir": args.out, "no_timing": args.no_timing}
    try:
        if args.command == "compare":
            paths = args.config or [None]
            cfgs = [load_config(p, overrides) for p in paths]
            if len(cfgs) == 1 and cfgs[0].algorithm != "both" and len(paths) == 1:
                raise ConfigError("compare needs at least two runs (several --config or --algorithm both)")
            return cmd_compare(cfgs, Path(cfgs[0].output_dir))
        cfg = load_config(args.config, overrides)
        out = Path(cfg.output_dir)
        handler = {"estimate": cmd_estimate, "run": cmd_run, "phantom": cmd_phantom}[args.command]
        return handler(cfg, out)
    except ConfigError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
