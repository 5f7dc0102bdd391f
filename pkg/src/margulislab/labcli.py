"""Experiment runner: configuration, orchestration, reproducible artifacts.

Configs are TOML with strict key checking; reports are JSON; series are
CSV.  Identical config and seed give byte-identical data files; the run
manifest records a content digest per produced file (its own timings vary
run to run and are excluded from the determinism contract).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, field, replace
from pathlib import Path

import numpy as np

from . import __version__, foliation, margulis, mme, splitting
from .errors import (ConfigError, InvalidDescriptor, MargulisLabError,
                     NoConvergence, NotIrreducible, RefinementBudgetExceeded)
from .foliation import CuChart, TiltedPatch, holonomy_jacobian, stable_holonomy
from .model import LAMBDA, LOG_LAMBDA, MapDescriptor
from .splitting import CSV_HEADER, compute_splitting, lyapunov_exponent

try:
    import tomllib
except ModuleNotFoundError:  # python < 3.11
    import tomli as tomllib

ENV_PREFIX = "MARGULISLAB_"

EXIT_OK = 0
EXIT_CONFIG = 2
EXIT_NO_CONVERGENCE = 3
EXIT_BUDGET = 4


# ---------------------------------------------------------------------------
# configuration
# ---------------------------------------------------------------------------

_SCHEMA = {
    "map": {"family", "epsilon", "shape", "direction"},
    "run": {"seed", "out_dir", "workers"},
    "margulis": {"n_max", "cesaro_window", "tol", "refine_tol", "budget"},
    "entropy": {"curve_n", "segment_length"},
    "holonomy": {"sizes", "tilt_max", "grid_w", "grid_c"},
    "splitting": {"depth", "horizon", "n_samples", "tol"},
    "dichotomy": {"exponent_horizon", "exponent_samples", "hist_samples",
                  "ue_samples", "tv_min", "support_full", "coverage_n",
                  "box_rungs"},
    "sweep": {"epsilons"},
}


@dataclass
class ExperimentConfig:
    map: MapDescriptor = field(default_factory=MapDescriptor)
    seed: int = 0
    out_dir: str = "out"
    workers: int = 0  # 0: all available cores
    margulis: dict = field(default_factory=lambda: {
        "n_max": 32, "cesaro_window": 8, "tol": 0.02})
    entropy: dict = field(default_factory=lambda: {
        "curve_n": 24, "segment_length": 0.5})
    holonomy: dict = field(default_factory=lambda: {
        "sizes": [0.2, 0.1, 0.05, 0.025], "tilt_max": 0.8,
        "grid_w": 12, "grid_c": 8})
    splitting: dict = field(default_factory=lambda: {
        "depth": 50, "horizon": 200, "n_samples": 32, "tol": 1e-6})
    dichotomy: dict = field(default_factory=lambda: {
        "exponent_horizon": 4, "exponent_samples": 2000,
        "hist_samples": 200_000, "ue_samples": 200_000, "tv_min": 0.1,
        "support_full": 0.98, "coverage_n": 48,
        "box_rungs": [[1, 32, 32, 16], [2, 32, 32, 16], [4, 32, 32, 16]]})
    sweep: list = field(default_factory=lambda: [0.0, 0.02, 0.05])

    def to_dict(self):
        d = {
            "map": self.map.to_table(),
            "run": {"seed": self.seed, "out_dir": self.out_dir,
                    "workers": self.workers},
            "margulis": dict(self.margulis),
            "entropy": dict(self.entropy),
            "holonomy": dict(self.holonomy),
            "splitting": dict(self.splitting),
            "dichotomy": dict(self.dichotomy),
            "sweep": {"epsilons": list(self.sweep)},
        }
        return d

    @classmethod
    def from_dict(cls, data):
        unknown_sections = set(data) - set(_SCHEMA)
        if unknown_sections:
            raise ConfigError(f"unknown config section(s): "
                              f"{sorted(unknown_sections)}")
        for section, keys in data.items():
            extra = set(keys) - _SCHEMA[section]
            if extra:
                raise ConfigError(
                    f"unknown key(s) in [{section}]: {sorted(extra)}")
        cfg = cls()
        if "map" in data:
            try:
                cfg.map = MapDescriptor.from_table(data["map"])
            except InvalidDescriptor as exc:
                raise ConfigError(f"[map] invalid: {exc}") from exc
        run = data.get("run", {})
        cfg.seed = int(run.get("seed", cfg.seed))
        cfg.out_dir = str(run.get("out_dir", cfg.out_dir))
        cfg.workers = int(run.get("workers", cfg.workers))
        for section in ("margulis", "entropy", "holonomy", "splitting",
                        "dichotomy"):
            merged = dict(getattr(cfg, section))
            merged.update(data.get(section, {}))
            setattr(cfg, section, merged)
        if "sweep" in data:
            cfg.sweep = [float(e) for e in data["sweep"].get(
                "epsilons", cfg.sweep)]
        return cfg

    @classmethod
    def from_toml(cls, path):
        try:
            data = tomllib.loads(Path(path).read_text())
        except (OSError, tomllib.TOMLDecodeError) as exc:
            raise ConfigError(f"cannot parse config {path}: {exc}") from exc
        return cls.from_dict(data)

    def config_hash(self):
        # out_dir and worker count are execution context, not semantics
        payload = self.to_dict()
        payload["run"] = {"seed": self.seed}
        canon = json.dumps(payload, sort_keys=True)
        return hashlib.sha256(canon.encode()).hexdigest()

    def dichotomy_config(self):
        d = self.dichotomy
        rungs = tuple((int(r[0]), (int(r[1]), int(r[2]), int(r[3])))
                      for r in d["box_rungs"])
        return mme.DichotomyConfig(
            n_max=self.margulis["n_max"],
            exponent_horizon=d["exponent_horizon"],
            exponent_samples=d["exponent_samples"],
            entropy_n=self.entropy["curve_n"],
            box_rungs=rungs,
            hist_samples=d["hist_samples"],
            ue_samples=d["ue_samples"],
            tv_min=d["tv_min"],
            support_full=d["support_full"],
            coverage_n=d["coverage_n"],
            seed=self.seed,
        )


def dumps_toml(data, prefix=""):
    """Minimal TOML writer for the flat table-of-scalars configs used here."""
    lines = []
    scalars = {k: v for k, v in data.items() if not isinstance(v, dict)}
    tables = {k: v for k, v in data.items() if isinstance(v, dict)}
    for key, val in scalars.items():
        lines.append(f"{key} = {_toml_value(val)}")
    for key, val in tables.items():
        name = f"{prefix}{key}"
        lines.append("")
        lines.append(f"[{name}]")
        lines.append(dumps_toml(val, prefix=name + "."))
    return "\n".join(lines).strip() + "\n"


def _toml_value(val):
    if isinstance(val, bool):
        return "true" if val else "false"
    if isinstance(val, str):
        return f'"{val}"'
    if isinstance(val, (list, tuple)):
        return "[" + ", ".join(_toml_value(v) for v in val) + "]"
    if isinstance(val, float):
        return repr(val)
    return str(val)


# ---------------------------------------------------------------------------
# artifacts
# ---------------------------------------------------------------------------

class RunContext:
    """Collects produced files, digests, and stage timings into a manifest."""

    def __init__(self, cfg: ExperimentConfig, out_dir):
        self.cfg = cfg
        self.out = Path(out_dir)
        self.out.mkdir(parents=True, exist_ok=True)
        self.files = []
        self.timings = {}
        self._stage = None
        self._t0 = None

    def stage(self, name):
        self._stage = name
        self._t0 = time.perf_counter()
        return self

    def __enter__(self):
        return self

    def __exit__(self, *exc):
        if self._stage is not None:
            self.timings[self._stage] = time.perf_counter() - self._t0
            self._stage = None
        return False

    def _register(self, path):
        digest = hashlib.sha256(Path(path).read_bytes()).hexdigest()
        self.files.append({"name": str(Path(path).relative_to(self.out)),
                           "sha256": digest})

    def write_json(self, name, payload):
        payload = dict(payload)
        payload.setdefault("schema_version", 1)
        payload.setdefault("config_hash", self.cfg.config_hash())
        payload.setdefault("seed", self.cfg.seed)
        path = self.out / name
        path.write_text(json.dumps(payload, indent=1, sort_keys=True) + "\n")
        self._register(path)
        return path

    def write_csv(self, name, header, rows):
        path = self.out / name
        lines = [header]
        for row in rows:
            lines.append(",".join(
                repr(float(v)) if isinstance(v, (float, np.floating))
                else str(v) for v in row))
        path.write_text("\n".join(lines) + "\n")
        self._register(path)
        return path

    def register_tree(self, directory):
        for p in sorted(Path(directory).rglob("*")):
            if p.is_file():
                self._register(p)

    def finalize(self):
        manifest = {
            "config_hash": self.cfg.config_hash(),
            "version": __version__,
            "seed": self.cfg.seed,
            "timings": self.timings,
            "files": self.files,
        }
        path = self.out / "manifest.json"
        path.write_text(json.dumps(manifest, indent=1, sort_keys=True) + "\n")
        return manifest


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_entropy(cfg: ExperimentConfig, ctx: RunContext):
    f = cfg.map
    with ctx.stage("curve_growth"):
        slope, series = mme.entropy_curve_growth(
            f, (np.array([0.37, 0.61, 0.42]), cfg.entropy["segment_length"]),
            n=cfg.entropy["curve_n"])
    ctx.write_csv("curve_growth.csv", "k,log_volume",
                  [(k, v) for k, v in enumerate(series)])
    rungs = cfg.dichotomy_config().box_rungs
    with ctx.stage("box_ladder"):
        ladder, extrapolated, models = mme.box_ladder(f, rungs)
    rows = []
    for (iterate, res), val in zip(rungs, ladder):
        rows.append((iterate, res[0], res[1], res[2], val))
    ctx.write_csv("box_ladder.csv", "iterate,nx,ny,nt,log_rho_over_m", rows)
    with ctx.stage("dilation"):
        func, dilation = margulis.margulis_iterate(
            f, margulis.default_phi1(), n_max=cfg.margulis["n_max"],
            cesaro_window=cfg.margulis["cesaro_window"],
            tol=cfg.margulis["tol"])
    ells = func.state.ells
    ctx.write_csv("dilation_series.csv", "n,ell,ratio",
                  [(n, ells[n], ells[n + 1] / ells[n])
                   for n in range(len(ells) - 1)])
    methods = {
        "curve_growth": slope,
        "box_extrapolated": extrapolated,
        "log_dilation": float(np.log(dilation)),
    }
    vals = list(methods.values())
    gap = max(abs(a - b) / abs(b) for a in vals for b in vals)
    ctx.write_json("entropy.json", {
        "epsilon": f.epsilon, "family": f.family, "methods": methods,
        "box_ladder": [float(v) for v in ladder],
        "max_pairwise_relative_gap": gap,
        "reference_log_lambda": LOG_LAMBDA,
    })
    return EXIT_OK


def cmd_margulis(cfg: ExperimentConfig, ctx: RunContext, checkpoint=None):
    f = cfg.map
    kw = {}
    if "refine_tol" in cfg.margulis:
        kw["refine_tol"] = cfg.margulis["refine_tol"]
    if "budget" in cfg.margulis:
        kw["budget"] = cfg.margulis["budget"]
    with ctx.stage("iterate"):
        if checkpoint and (Path(checkpoint) / "functional.json").exists():
            func = margulis.load_functional(checkpoint)
            extra = cfg.margulis["n_max"] - func.n_eval
            if extra > 0:
                func = margulis.extend_functional(func, extra)
        else:
            func, _ = margulis.margulis_iterate(
                f, margulis.default_phi1(), n_max=cfg.margulis["n_max"],
                cesaro_window=cfg.margulis["cesaro_window"],
                tol=cfg.margulis["tol"], **kw)
        if checkpoint:
            margulis.save_functional(func, checkpoint)
    with ctx.stage("conditionals"):
        sys_cu = margulis.cu_conditionals(func)
        sys_u = margulis.u_conditionals(sys_cu, func)
    with ctx.stage("stable"):
        sys_s, D_s, func_inv = margulis.stable_system(f, n_max=cfg.margulis["n_max"])
    with ctx.stage("diagnostics"):
        dil_res = margulis.segment_dilation_residual(func)
        qi = margulis.cs_quasi_invariance_check(func)
        atom = margulis.atom_refinement_ratio(func)
        eig = margulis.eigen_equation_residual(
            func, charts=margulis.default_charts("u")[:2])
    for name, system in (("cu", sys_cu), ("u", sys_u), ("s", sys_s)):
        sub = ctx.out / f"system_{name}"
        system.save(sub)
        ctx.register_tree(sub)
    ctx.write_csv("dilation_series.csv", "n,ell,ratio",
                  [(n, func.state.ells[n],
                    func.state.ells[n + 1] / func.state.ells[n])
                   for n in range(func.n_eval)])
    ctx.write_json("margulis.json", {
        "epsilon": f.epsilon, "family": f.family,
        "dilation_u": func.dilation,
        "dilation_s": D_s,
        "dilation_product_check": func.dilation * D_s,
        "converged_at": func.converged_at,
        "eigen_equation_residual": eig,
        "s_invariance_residual": sys_cu.meta["s_invariance_residual"],
        "u_dilation_residual": dil_res,
        "cs_quasi_invariance": {
            "min_ratio": qi["min_ratio"], "max_ratio": qi["max_ratio"],
            "bound": qi["bound"], "within_bound": qi["within_bound"]},
        "atom_refinement_ratio": atom,
    })
    return EXIT_OK


def cmd_dichotomy(cfg: ExperimentConfig, ctx: RunContext):
    f = cfg.map
    dcfg = cfg.dichotomy_config()
    with ctx.stage("artifacts"):
        art = mme.build_dichotomy_artifacts(f, dcfg)
    with ctx.stage("report"):
        report = mme.dichotomy_report(f, dcfg, _prebuilt=art)
    ctx.write_json("dichotomy.json", asdict(report))
    rows = [("center_plus", report.lambda_plus, report.stderr_plus),
            ("center_minus", report.lambda_minus, report.stderr_minus)]
    ctx.write_csv("exponents_quasiproduct.csv", "kind,value,stderr", rows)
    return EXIT_OK


def cmd_holonomy(cfg: ExperimentConfig, ctx: RunContext):
    f = cfg.map
    sizes = list(cfg.holonomy["sizes"])
    tilt_max = cfg.holonomy["tilt_max"]
    grid = (cfg.holonomy["grid_w"], cfg.holonomy["grid_c"])
    src = CuChart(np.array([0.31, 0.57, 0.0]), 0.4, 0.8)
    rows = []
    field_rows = []
    sups = []
    with ctx.stage("ladder"):
        for size in sizes:
            tilt = tilt_max * size / max(sizes)
            tgt = TiltedPatch(src.translated(delta_s=size), tilt=tilt)
            hol = stable_holonomy(f, src, tgt, max_size=1.0)
            J, sup_dev, (cw, cc) = holonomy_jacobian(hol, density_grid=grid)
            sups.append(sup_dev)
            rows.append((size, hol.size, sup_dev))
            if size == max(sizes):
                for i, wv in enumerate(cw):
                    for j, cv in enumerate(cc):
                        field_rows.append((wv, cv, J[i, j]))
        # exact-leaf check: plain translated chart, J identically 1
        hol0 = stable_holonomy(f, src, src.translated(delta_s=0.03))
        _, exact_dev, _ = holonomy_jacobian(hol0, density_grid=grid)
    logs = np.log(sizes)
    logd = np.log(sups)
    A = np.column_stack([np.ones_like(logs), logs])
    coef, res, *_ = np.linalg.lstsq(A, logd, rcond=None)
    pred = A @ coef
    ss_res = float(((logd - pred) ** 2).sum())
    ss_tot = float(((logd - logd.mean()) ** 2).sum())
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    ctx.write_csv("holonomy_ladder.csv", "size,holonomy_size,sup_abs_j_minus_1",
                  rows)
    ctx.write_csv("jacobian_field.csv", "w,c,value", field_rows)
    ctx.write_json("holonomy.json", {
        "epsilon": f.epsilon, "family": f.family,
        "sizes": sizes, "sup_deviations": sups,
        "alpha": float(coef[1]), "log_C": float(coef[0]), "r_squared": r2,
        "exact_leaf_sup_deviation": exact_dev,
    })
    return EXIT_OK


def cmd_splitting(cfg: ExperimentConfig, ctx: RunContext):
    f = cfg.map
    depth = cfg.splitting["depth"]
    rows = []
    frames = {}
    with ctx.stage("frames"):
        for i, xyz in enumerate([(0.2, 0.5, 0.11), (0.8, 0.1, 0.62),
                                 (0.33, 0.71, 0.3)]):
            fr = compute_splitting(f, np.array(xyz), n=depth,
                                   tol=cfg.splitting["tol"])
            frames[f"x{i}"] = {
                "base": list(map(float, fr.base)),
                "residuals": fr.residuals,
                "min_angle": fr.min_angle(),
            }
    with ctx.stage("exponents"):
        for kind in ("stable", "center", "unstable"):
            est = lyapunov_exponent(
                f, splitting.volume_sampler(), cfg.splitting["horizon"],
                direction=kind, n_samples=cfg.splitting["n_samples"],
                seed=cfg.seed)
            rows.append(est.csv_row(f.family, f.epsilon).split(","))
    ctx.write_csv("exponents.csv", CSV_HEADER, rows)
    ctx.write_json("splitting.json", {
        "epsilon": f.epsilon, "family": f.family, "frames": frames,
    })
    return EXIT_OK


def cmd_sweep(cfg: ExperimentConfig, ctx: RunContext):
    rows = []
    for eps in cfg.sweep:
        sub_cfg = ExperimentConfig(**{**cfg.__dict__})
        sub_cfg.map = replace(cfg.map, epsilon=float(eps)).validate()
        dcfg = sub_cfg.dichotomy_config()
        with ctx.stage(f"eps_{eps}"):
            art = mme.build_dichotomy_artifacts(sub_cfg.map, dcfg)
            report = mme.dichotomy_report(sub_cfg.map, dcfg, _prebuilt=art)
        ctx.write_json(f"dichotomy_eps{eps}.json", asdict(report))
        ent = report.entropies
        rows.append((eps, report.verdict, report.dilation,
                     ent["curve_growth"], ent["box_extrapolated"],
                     ent["log_dilation"],
                     report.lambda_plus, report.stderr_plus,
                     report.lambda_minus, report.stderr_minus,
                     report.diagnostics["tv_boxes"],
                     report.diagnostics["support_plus"],
                     report.diagnostics["support_minus"],
                     report.diagnostics["coverage_fraction"]))
    ctx.write_csv(
        "sweep.csv",
        "epsilon,verdict,D_u,entropy_curve,entropy_box,entropy_dilation,"
        "lambda_c_plus,stderr_plus,lambda_c_minus,stderr_minus,"
        "tv_boxes,support_plus,support_minus,coverage",
        rows)
    return EXIT_OK


COMMANDS = {
    "entropy": cmd_entropy,
    "margulis": cmd_margulis,
    "dichotomy": cmd_dichotomy,
    "holonomy": cmd_holonomy,
    "splitting": cmd_splitting,
    "sweep": cmd_sweep,
}


# ---------------------------------------------------------------------------
# entry point
# ---------------------------------------------------------------------------

def build_parser():
    parser = argparse.ArgumentParser(
        prog="margulislab",
        description="Numerical laboratory for leaf measures and "
                    "maximal-entropy dichotomies on a cat-map suspension.")
    parser.add_argument("--version", action="version", version=__version__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", required=True, help="TOML config path")
        p.add_argument("--seed", type=int, default=None,
                       help="override [run].seed")
        p.add_argument("--out", default=None, help="override [run].out_dir")
        p.add_argument("--workers", type=int, default=None,
                       help="worker count (default: available cores); "
                       "results are identical for any count")
        if name == "margulis":
            p.add_argument("--checkpoint", default=None,
                           help="directory for resumable iteration state")
    return parser


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        cfg = ExperimentConfig.from_toml(args.config)
        if os.environ.get(ENV_PREFIX + "SEED"):
            cfg.seed = int(os.environ[ENV_PREFIX + "SEED"])
        if os.environ.get(ENV_PREFIX + "OUT"):
            cfg.out_dir = os.environ[ENV_PREFIX + "OUT"]
        if os.environ.get(ENV_PREFIX + "WORKERS"):
            cfg.workers = int(os.environ[ENV_PREFIX + "WORKERS"])
        if args.seed is not None:
            cfg.seed = args.seed
        if args.out is not None:
            cfg.out_dir = args.out
        if args.workers is not None:
            cfg.workers = args.workers
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    ctx = RunContext(cfg, cfg.out_dir)
    try:
        kwargs = {}
        if args.command == "margulis":
            kwargs["checkpoint"] = args.checkpoint
        code = COMMANDS[args.command](cfg, ctx, **kwargs)
    except (NoConvergence, NotIrreducible) as exc:
        stage = getattr(exc, "stage", None) or args.command
        print(f"numerical non-convergence in stage {stage!r}: {exc}",
              file=sys.stderr)
        return EXIT_NO_CONVERGENCE
    except RefinementBudgetExceeded as exc:
        print(f"budget exceeded: {exc}", file=sys.stderr)
        return EXIT_BUDGET
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    ctx.finalize()
    return code


if __name__ == "__main__":
    sys.exit(main())
