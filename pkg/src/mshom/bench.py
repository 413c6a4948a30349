"""Experiment runner and CLI: convergence tables, localization sweeps, the
channel buffer study, and wave demos, with CSV/JSON/PGM outputs.

Every study runs from an ExperimentConfig (JSON-compatible); results embed
the config hash and seed so a run can be reproduced bit for bit.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import math
import sys
import time
from dataclasses import asdict, dataclass, field as dc_field, replace
from pathlib import Path

import numpy as np

from . import __version__, evolve, fem
from .coarse import build_coarse_basis
from .coeff import FieldSpec
from .evolve import CoarseOperatorSet, TimeGrid, error_report
from .fem import SolverConfig
from .grid import build_coarse_lattice, build_fine_mesh
from .locbasis import BasisRecipe, build_basis

SWEEP_RATIOS = (1, 2, 3, 4, 6, 8)
SWEEP_T_RULES = ("h^2", "h", "sqrt", "inf")


@dataclass(frozen=True)
class ExperimentConfig:
    medium: dict = dc_field(default_factory=lambda: {"kind": "trig"})
    fine_n: int = 256
    h: tuple = (0.5, 0.25, 0.125, 0.0625)
    alpha: float = 0.5
    c1: float = 3.0
    radius_rule: object = "theory"
    t_rule: object = "theory"
    mode: str = "localized"
    buffer_rule: object = "theory"
    buffer_c0: float = 1.0
    contrast_threshold: float = 10.0
    equation: str = "elliptic"
    g: dict = dc_field(default_factory=lambda: {"kind": "sin_pi"})
    dt: float = 1.0 / 128.0
    t_end: float = 1.0
    seed: int = 0
    coarse_order: int = 2
    out_dir: str | None = None
    fmt: str = "csv"
    solver: dict = dc_field(default_factory=lambda: {"method": "direct", "tol": 1e-10})
    jobs: int = 1
    strict_support: bool = True

    def __post_init__(self):
        object.__setattr__(self, "h", tuple(float(x) for x in self.h))
        if self.equation not in ("elliptic", "parabolic", "wave"):
            raise ValueError(f"unknown equation {self.equation!r}")
        for h in self.h:
            m = 2.0 / h
            if abs(m - round(m)) > 1e-9 or self.fine_n % int(round(m)) != 0:
                raise ValueError(f"fine_n={self.fine_n} cannot resolve h={h}")

    def field_spec(self) -> FieldSpec:
        d = dict(self.medium)
        d.setdefault("seed", self.seed)
        return FieldSpec.from_dict(d)

    def solver_config(self) -> SolverConfig:
        return SolverConfig(**self.solver)

    def recipe(self, **overrides) -> BasisRecipe:
        kw = {
            "mode": self.mode, "alpha": self.alpha, "c1": self.c1,
            "t_rule": self.t_rule, "radius_rule": self.radius_rule,
            "buffer_rule": self.buffer_rule, "buffer_c0": self.buffer_c0,
            "contrast_threshold": self.contrast_threshold,
            "strict_support": self.strict_support,
        }
        kw.update(overrides)
        return BasisRecipe(**kw)

    def g_callable(self):
        kind = self.g.get("kind", "sin_pi")
        if kind == "sin_pi":
            return lambda x, y: np.sin(np.pi * x) * np.sin(np.pi * y)
        if kind == "constant":
            v = float(self.g.get("value", 1.0))
            return lambda x, y: np.full_like(np.asarray(x, dtype=float), v)
        raise ValueError(f"unknown load kind {kind!r}")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["h"] = list(self.h)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ExperimentConfig":
        d = dict(d)
        if "h" in d and not isinstance(d["h"], (list, tuple)):
            d["h"] = [d["h"]]
        return cls(**d)

    def config_hash(self) -> str:
        blob = json.dumps(self.to_dict(), sort_keys=True).encode()
        return hashlib.sha256(blob).hexdigest()[:16]


@dataclass
class StudyRow:
    h: float
    radius: float | None
    t: float | None
    l2: float
    h1: float
    linf: float
    wall_time: float
    label: str = ""

    _FIELDS = ("label", "h", "radius", "t", "l2", "h1", "linf", "wall_time")

    def to_csv_fields(self) -> list:
        out = []
        for name in self._FIELDS:
            v = getattr(self, name)
            if name == "label":
                out.append(v)
            elif v is None:
                out.append("")
            else:
                out.append(f"{v:.17g}")
        return out

    @classmethod
    def from_csv_fields(cls, fields: list) -> "StudyRow":
        kw = {}
        for name, raw in zip(cls._FIELDS, fields):
            if name == "label":
                kw[name] = raw
            else:
                kw[name] = None if raw == "" else float(raw)
        return cls(**kw)


@dataclass
class StudyResult:
    rows: list
    provenance: dict
    failures: list = dc_field(default_factory=list)

    def to_csv(self, path) -> None:
        with open(path, "w") as f:
            f.write(",".join(StudyRow._FIELDS) + "\n")
            for row in self.rows:
                f.write(",".join(row.to_csv_fields()) + "\n")

    @classmethod
    def from_csv(cls, path, provenance=None) -> "StudyResult":
        rows = []
        with open(path) as f:
            header = f.readline()
            if header.strip() != ",".join(StudyRow._FIELDS):
                raise ValueError(f"unexpected study CSV header in {path}")
            for line in f:
                if line.strip():
                    rows.append(StudyRow.from_csv_fields(line.rstrip("\n").split(",")))
        return cls(rows=rows, provenance=provenance or {})

    def write(self, out_dir, name: str, fmt: str = "csv") -> None:
        out = Path(out_dir)
        out.mkdir(parents=True, exist_ok=True)
        meta = {"provenance": self.provenance, "failures": self.failures}
        if fmt == "json":
            meta["rows"] = [dict(zip(StudyRow._FIELDS, r.to_csv_fields()))
                            for r in self.rows]
        else:
            self.to_csv(out / f"{name}.csv")
        with open(out / f"{name}.json", "w") as f:
            json.dump(meta, f, indent=1)


def _provenance(cfg: ExperimentConfig) -> dict:
    return {"config": cfg.to_dict(), "config_hash": cfg.config_hash(),
            "seed": cfg.seed, "version": __version__}


def _coarse_solution(cfg, mesh, medium, fine_K, fine_M, h, recipe, g):
    """Build coarse + localized bases at resolution h and Galerkin-solve."""
    t0 = time.perf_counter()
    lattice = build_coarse_lattice(h, mesh)
    cb = build_coarse_basis(mesh, lattice, order=cfg.coarse_order)
    basis = build_basis(mesh, medium, cb, recipe, cfg=cfg.solver_config(),
                        jobs=cfg.jobs)
    ops = CoarseOperatorSet.from_basis_precomputed(mesh, fine_K, fine_M,
                                                   basis, cfg=cfg.solver_config())
    sol = evolve.galerkin_elliptic(ops, g)
    return ops, sol, time.perf_counter() - t0


def run_convergence_study(cfg: ExperimentConfig) -> StudyResult:
    """Elliptic errors against the fine reference for each h in the config."""
    if cfg.equation != "elliptic":
        raise ValueError("convergence study requires equation == 'elliptic'")
    mesh = build_fine_mesh(cfg.fine_n)
    medium = cfg.field_spec().build(mesh)
    g = cfg.g_callable()
    fine_K = fem.assemble_stiffness(mesh, medium)
    fine_M = fem.assemble_mass(mesh)
    fine_ops = CoarseOperatorSet(mesh=mesh, k_c=fine_K, m_c=fine_M, prol=None,
                                 cfg=cfg.solver_config())
    ref = evolve.galerkin_elliptic(fine_ops, g)

    rows, failures = [], []
    for h in cfg.h:
        recipe = cfg.recipe()
        if recipe.mode == "localized" and recipe.radius_for(h) < 2.0 * h:
            failures.append({"h": h, "error": "radius rule yields radius < 2h"})
            continue
        try:
            _, sol, wall = _coarse_solution(cfg, mesh, medium, fine_K, fine_M,
                                            h, recipe, g)
            rep = error_report(ref.fine, sol.fine)
            rows.append(StudyRow(
                h=h,
                radius=None if recipe.mode in ("global", "screened-global")
                else recipe.radius_for(h),
                t=recipe.t_for(h) if math.isfinite(recipe.t_for(h)) else None,
                l2=rep.rel_l2, h1=rep.rel_h1, linf=rep.rel_linf,
                wall_time=wall))
        except Exception as exc:  # per-h failures recorded, study continues
            failures.append({"h": h, "error": f"{type(exc).__name__}: {exc}"})
    result = StudyResult(rows=rows, provenance=_provenance(cfg), failures=failures)
    if cfg.out_dir:
        result.write(cfg.out_dir, "convergence", cfg.fmt)
    return result


def run_localization_sweep(cfg: ExperimentConfig) -> StudyResult:
    """Errors over the (h0/h, T) grid at fixed h, plus the global-basis row."""
    h = cfg.h[0]
    mesh = build_fine_mesh(cfg.fine_n)
    medium = cfg.field_spec().build(mesh)
    g = cfg.g_callable()
    fine_K = fem.assemble_stiffness(mesh, medium)
    fine_M = fem.assemble_mass(mesh)
    fine_ops = CoarseOperatorSet(mesh=mesh, k_c=fine_K, m_c=fine_M, prol=None,
                                 cfg=cfg.solver_config())
    ref = evolve.galerkin_elliptic(fine_ops, g)

    rows, failures = [], []

    def one(recipe, label, radius, t):
        try:
            _, sol, wall = _coarse_solution(cfg, mesh, medium, fine_K, fine_M,
                                            h, recipe, g)
            rep = error_report(ref.fine, sol.fine)
            rows.append(StudyRow(h=h, radius=radius, t=t, l2=rep.rel_l2,
                                 h1=rep.rel_h1, linf=rep.rel_linf,
                                 wall_time=wall, label=label))
        except Exception as exc:
            failures.append({"label": label, "error": f"{type(exc).__name__}: {exc}"})

    one(cfg.recipe(mode="global", strict_support=False), "global", None, None)
    for ratio in SWEEP_RATIOS:
        for t_rule in SWEEP_T_RULES:
            recipe = cfg.recipe(mode="localized", radius_rule=float(ratio * h),
                                t_rule=t_rule, strict_support=False)
            t = recipe.t_for(h)
            one(recipe, f"r{ratio}_T{t_rule}", ratio * h,
                t if math.isfinite(t) else None)

    result = StudyResult(rows=rows, provenance=_provenance(cfg), failures=failures)
    if cfg.out_dir:
        result.write(cfg.out_dir, "sweep", cfg.fmt)
        _write_sweep_matrix(result, Path(cfg.out_dir))
    return result


def _write_sweep_matrix(result: StudyResult, out: Path) -> None:
    """log2-error matrices, one row per h0/h ratio, one column per T rule."""
    for norm in ("l2", "h1"):
        with open(out / f"sweep_log2_{norm}.csv", "w") as f:
            f.write("ratio," + ",".join(SWEEP_T_RULES) + "\n")
            for ratio in SWEEP_RATIOS:
                vals = []
                for t_rule in SWEEP_T_RULES:
                    row = [r for r in result.rows
                           if r.label == f"r{ratio}_T{t_rule}"]
                    vals.append(f"{math.log2(getattr(row[0], norm)):.6f}"
                                if row else "")
                f.write(f"{ratio}," + ",".join(vals) + "\n")


CHANNEL_CASES = (
    ("sqrt_buffered", {"mode": "high-contrast", "radius_rule": "sqrt",
                       "buffer_rule": "sqrt"}),
    ("3h_nobuffer", {"mode": "localized", "radius_rule": "3h"}),
    ("3h_buffered", {"mode": "high-contrast", "radius_rule": "3h",
                     "buffer_rule": "3h"}),
)


def run_channel_buffer_study(cfg: ExperimentConfig) -> StudyResult:
    """The three localization treatments of the high-conductivity channel."""
    mesh = build_fine_mesh(cfg.fine_n)
    spec = cfg.field_spec()
    if spec.kind != "channel":
        spec = FieldSpec(kind="channel", params=dict(spec.params), seed=cfg.seed)
    medium = spec.build(mesh)
    g = cfg.g_callable()
    fine_K = fem.assemble_stiffness(mesh, medium)
    fine_M = fem.assemble_mass(mesh)
    fine_ops = CoarseOperatorSet(mesh=mesh, k_c=fine_K, m_c=fine_M, prol=None,
                                 cfg=cfg.solver_config())
    ref = evolve.galerkin_elliptic(fine_ops, g)

    rows, failures = [], []
    for label, overrides in CHANNEL_CASES:
        for h in cfg.h:
            recipe = cfg.recipe(strict_support=False, **overrides)
            try:
                _, sol, wall = _coarse_solution(cfg, mesh, medium, fine_K,
                                                fine_M, h, recipe, g)
                rep = error_report(ref.fine, sol.fine)
                rows.append(StudyRow(h=h, radius=recipe.radius_for(h),
                                     t=recipe.t_for(h), l2=rep.rel_l2,
                                     h1=rep.rel_h1, linf=rep.rel_linf,
                                     wall_time=wall, label=label))
            except Exception as exc:
                failures.append({"label": label, "h": h,
                                 "error": f"{type(exc).__name__}: {exc}"})
    result = StudyResult(rows=rows, provenance=_provenance(cfg), failures=failures)
    if cfg.out_dir:
        result.write(cfg.out_dir, "channel", cfg.fmt)
    return result


def run_wave_demo(cfg: ExperimentConfig, snapshots: int = 8):
    """Fine and coarse wave solves up to t_end; returns (StudyResult, report).

    Exports final-state heatmaps and snapshot CSVs when out_dir is set.
    """
    h = cfg.h[0]
    mesh = build_fine_mesh(cfg.fine_n)
    medium = cfg.field_spec().build(mesh)
    g_xy = cfg.g_callable()
    g = None if g_xy is None else (lambda x, y, t: g_xy(x, y))
    grid = TimeGrid.for_interval(cfg.t_end, cfg.dt)
    every = max(1, grid.steps // snapshots)

    fine_K = fem.assemble_stiffness(mesh, medium)
    fine_M = fem.assemble_mass(mesh, weight=medium.density)
    fine_ops = CoarseOperatorSet(mesh=mesh, k_c=fine_K, m_c=fine_M, prol=None,
                                 cfg=cfg.solver_config())
    t0 = time.perf_counter()
    traj_ref = evolve.wave_newmark(fine_ops, g, grid, snapshot_every=every)
    wall_ref = time.perf_counter() - t0

    recipe = cfg.recipe()
    t0 = time.perf_counter()
    lattice = build_coarse_lattice(h, mesh)
    cb = build_coarse_basis(mesh, lattice, order=cfg.coarse_order)
    basis = build_basis(mesh, medium, cb, recipe, cfg=cfg.solver_config(),
                        jobs=cfg.jobs)
    ops = CoarseOperatorSet.from_basis_precomputed(mesh, fine_K, fine_M, basis,
                                                   cfg=cfg.solver_config())
    traj = evolve.wave_newmark(ops, g, grid, snapshot_every=every)
    wall = time.perf_counter() - t0

    rep = error_report(traj_ref, traj, wall_time=wall)
    row = StudyRow(h=h, radius=recipe.radius_for(h), t=recipe.t_for(h),
                   l2=rep.rel_l2, h1=rep.rel_h1, linf=rep.rel_linf,
                   wall_time=wall, label="wave")
    result = StudyResult(rows=[row], provenance=_provenance(cfg))
    if cfg.out_dir:
        out = Path(cfg.out_dir)
        result.write(out, "wave", cfg.fmt)
        export_snapshots(traj_ref, out, "u_fine", cfg)
        export_snapshots(traj, out, "u_coarse", cfg)
        write_pgm(out / "u_fine.pgm", _nodal_grid(traj_ref.final))
        write_pgm(out / "u_coarse.pgm", _nodal_grid(traj.final))
    return result, rep, (traj_ref, traj, wall_ref)


def _nodal_grid(u) -> np.ndarray:
    n = u.mesh.n
    return u.to_nodal().reshape(n + 1, n + 1)


def write_pgm(path, grid2d: np.ndarray) -> None:
    """Plain (P2) PGM heatmap, linearly mapped to 0..255."""
    lo, hi = float(grid2d.min()), float(grid2d.max())
    scale = 255.0 / (hi - lo) if hi > lo else 0.0
    pix = np.rint((grid2d - lo) * scale).astype(int)
    with open(path, "w") as f:
        f.write(f"P2\n{grid2d.shape[1]} {grid2d.shape[0]}\n255\n")
        for row in pix[::-1]:  # image rows top-down, grid rows bottom-up
            f.write(" ".join(str(v) for v in row) + "\n")


def export_snapshots(traj, out_dir, prefix: str, cfg: ExperimentConfig) -> None:
    """Row-major nodal CSV per snapshot plus a JSON manifest."""
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = []
    for k, t in enumerate(traj.times):
        name = f"{prefix}_{k:04d}.csv"
        np.savetxt(out / name, _nodal_grid(traj.fine(k)), fmt="%.17g",
                   delimiter=",")
        files.append({"time": float(t), "file": name})
    with open(out / f"{prefix}_manifest.json", "w") as f:
        json.dump({"snapshots": files, "config_hash": cfg.config_hash(),
                   "config": cfg.to_dict()}, f, indent=1)


# ---------------------------------------------------------------------------
# CLI

def _load_config(args) -> ExperimentConfig:
    if args.config:
        with open(args.config) as f:
            cfg = ExperimentConfig.from_dict(json.load(f))
    else:
        cfg = ExperimentConfig()
    updates = {}
    if args.fine_n is not None:
        updates["fine_n"] = args.fine_n
    if args.h is not None:
        updates["h"] = tuple(float(x) for x in args.h.split(","))
    if args.alpha is not None:
        updates["alpha"] = args.alpha
    if args.c1 is not None:
        updates["c1"] = args.c1
    if args.t_rule is not None:
        updates["t_rule"] = args.t_rule
    if args.seed is not None:
        updates["seed"] = args.seed
    if args.out is not None:
        updates["out_dir"] = args.out
    if args.format is not None:
        updates["fmt"] = args.format
    if args.jobs is not None:
        updates["jobs"] = args.jobs
    if getattr(args, "medium", None):
        updates["medium"] = {"kind": args.medium}
    if getattr(args, "command", None) == "gen-field" and args.h is None:
        updates["h"] = ()  # field generation is h-independent
    return replace(cfg, **updates) if updates else cfg


def _add_common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="JSON config file")
    p.add_argument("--fine-n", type=int, dest="fine_n")
    p.add_argument("--h", help="comma-separated coarse spacings")
    p.add_argument("--alpha", type=float)
    p.add_argument("--c1", type=float)
    p.add_argument("--t-rule", dest="t_rule")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", help="output directory")
    p.add_argument("--format", choices=("csv", "json"))
    p.add_argument("--jobs", type=int)
    p.add_argument("--medium", help="medium kind override")


def _cmd_gen_field(cfg: ExperimentConfig) -> dict:
    from .coeff import save_field

    mesh = build_fine_mesh(cfg.fine_n)
    field = cfg.field_spec().build(mesh)
    out = Path(cfg.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    save_field(field, out / "field.csv")
    return {"cells": len(field.values), "contrast": field.contrast,
            "hash": field.content_hash(), "out": str(out / "field.csv")}


def _cmd_build_basis(cfg: ExperimentConfig) -> dict:
    mesh = build_fine_mesh(cfg.fine_n)
    medium = cfg.field_spec().build(mesh)
    h = cfg.h[0]
    lattice = build_coarse_lattice(h, mesh)
    cb = build_coarse_basis(mesh, lattice, order=cfg.coarse_order)
    basis = build_basis(mesh, medium, cb, cfg.recipe(), cfg=cfg.solver_config(),
                        jobs=cfg.jobs)
    out = Path(cfg.out_dir or ".")
    out.mkdir(parents=True, exist_ok=True)
    basis.save(out / "basis")
    return {"h": h, "functions": len(basis),
            "max_residual": max(r["residual"] for r in basis.records),
            "out": str(out / "basis.npz")}


def _cmd_solve(cfg: ExperimentConfig) -> dict:
    single = replace(cfg, h=(cfg.h[0],))
    if cfg.equation == "wave":
        result, rep, _ = run_wave_demo(single)
        row = result.rows[0]
    elif cfg.equation == "parabolic":
        mesh = build_fine_mesh(cfg.fine_n)
        medium = cfg.field_spec().build(mesh)
        g_xy = cfg.g_callable()
        grid = TimeGrid.for_interval(cfg.t_end, cfg.dt)
        fine_ops = CoarseOperatorSet.from_fine(mesh, medium,
                                               cfg=cfg.solver_config())
        traj_ref = evolve.parabolic_implicit_euler(
            fine_ops, lambda x, y, t: g_xy(x, y), grid, snapshot_every=grid.steps)
        lattice = build_coarse_lattice(cfg.h[0], mesh)
        cb = build_coarse_basis(mesh, lattice, order=cfg.coarse_order)
        basis = build_basis(mesh, medium, cb, cfg.recipe(),
                            cfg=cfg.solver_config(), jobs=cfg.jobs)
        ops = CoarseOperatorSet.from_basis(mesh, medium, basis,
                                           cfg=cfg.solver_config())
        traj = evolve.parabolic_implicit_euler(
            ops, lambda x, y, t: g_xy(x, y), grid, snapshot_every=grid.steps)
        rep = error_report(traj_ref, traj)
        row = StudyRow(h=cfg.h[0], radius=None, t=None, l2=rep.rel_l2,
                       h1=rep.rel_h1, linf=rep.rel_linf, wall_time=0.0,
                       label="parabolic")
    else:
        result = run_convergence_study(single)
        if not result.rows:
            raise RuntimeError(f"solve failed: {result.failures}")
        row = result.rows[0]
    out = {"h": row.h, "rel_l2": row.l2, "rel_h1": row.h1, "rel_linf": row.linf}
    if cfg.out_dir:
        Path(cfg.out_dir).mkdir(parents=True, exist_ok=True)
        with open(Path(cfg.out_dir) / "solve.json", "w") as f:
            json.dump(out, f, indent=1)
    return out


def _cmd_study(cfg: ExperimentConfig, which: str) -> dict:
    if which == "convergence":
        result = run_convergence_study(cfg)
    elif which == "sweep":
        result = run_localization_sweep(cfg)
    elif which == "channel":
        result = run_channel_buffer_study(cfg)
    elif which == "wave":
        result, _, _ = run_wave_demo(cfg)
    else:
        raise ValueError(f"unknown study {which!r}")
    return {"rows": len(result.rows), "failures": result.failures,
            "config_hash": result.provenance["config_hash"]}


def main(argv=None) -> int:
    parser = argparse.ArgumentParser(
        prog="mshom",
        description="Localized multiscale homogenization benchmarks")
    sub = parser.add_subparsers(dest="command", required=True)
    for name in ("gen-field", "build-basis", "solve"):
        _add_common(sub.add_parser(name))
    study = sub.add_parser("study")
    study.add_argument("which", choices=("convergence", "sweep", "channel", "wave"))
    _add_common(study)

    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args)
        if args.command == "gen-field":
            out = _cmd_gen_field(cfg)
        elif args.command == "build-basis":
            out = _cmd_build_basis(cfg)
        elif args.command == "solve":
            out = _cmd_solve(cfg)
        else:
            out = _cmd_study(cfg, args.which)
    except Exception as exc:
        json.dump({"error": type(exc).__name__, "message": str(exc)},
                  sys.stderr, indent=1)
        sys.stderr.write("\n")
        return 2
    json.dump(out, sys.stdout, indent=1, default=str)
    sys.stdout.write("\n")
    return 0


if __name__ == "__main__":
    sys.exit(main())
