"""``progscore`` command line.

Exit codes: 0 success, 1 usage error, 2 data or validation error, 3 numerical
failure. Every output file is written to a temporary name and renamed into
place; each run also leaves ``manifest.json`` in its output directory.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import logging
import os
import platform
import sys
import tempfile
import time
from importlib import resources
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from .data import DataError, load_dataset, load_grid, save_dataset
from .diagnostics import (
    bland_altman,
    empirical_semivariogram,
    fit_semivariogram,
    stage1_residuals,
    write_bland_altman,
    write_semivariogram_csv,
)
from .em import FitConfig, dumps_model, fit, loads_model, n_params, predict_ps, predict_traj
from .errors import NumericalError
from .inference import bootstrap, load_bootstrap, save_bootstrap, test_level, test_rate
from .lme import LmeConfig, fit_lme, lme_model_summary, write_lme_csv
from .simulation import SimDesign, simulate, write_truth
from .spatial import KernelFamily

if sys.version_info >= (3, 11):
    import tomllib
else:
    import tomli as tomllib

logger = logging.getLogger("progscore")

KERNEL_CHOICES = ["auto"] + [f.value for f in KernelFamily]
# options that are plumbing rather than run configuration
_META = {"command", "config", "func"}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


# -- output helpers -----------------------------------------------------------------


class Outputs:
    """Atomic writer for one run's output directory."""

    def __init__(self, directory):
        self.dir = Path(directory)
        self.dir.mkdir(parents=True, exist_ok=True)
        self.written: list[str] = []

    def write(self, name: str, fn) -> Path:
        """Call ``fn(tmp_path)`` then rename the result to ``name``."""
        final = self.dir / name
        fd, tmp = tempfile.mkstemp(prefix=f".{name}.", dir=self.dir)
        os.close(fd)
        try:
            fn(Path(tmp))
            os.replace(tmp, final)
        except BaseException:
            Path(tmp).unlink(missing_ok=True)
            raise
        self.written.append(name)
        return final

    def text(self, name: str, text: str) -> Path:
        return self.write(name, lambda p: p.write_text(text, encoding="utf-8"))

    def json(self, name: str, obj) -> Path:
        return self.text(name, json.dumps(obj, indent=1, allow_nan=False) + "\n")

    def csv(self, name: str, header, rows) -> Path:
        def w(p):
            with open(p, "w", newline="", encoding="utf-8") as fh:
                cw = csv.writer(fh, lineterminator="\n")
                cw.writerow(header)
                cw.writerows(rows)

        return self.write(name, w)

    def staged(self, names, fn):
        """Run ``fn(tmpdir)`` that writes several files, then move each into place."""
        with tempfile.TemporaryDirectory(dir=self.dir, prefix=".stage.") as tmp:
            fn(Path(tmp))
            for name in names:
                os.replace(Path(tmp) / name, self.dir / name)
                self.written.append(name)


def _f(x) -> str:
    return repr(float(x))


def _plain(v):
    if isinstance(v, Path):
        return str(v)
    if isinstance(v, (list, tuple)):
        return [_plain(x) for x in v]
    return v


def _manifest(out: Outputs, args, started: float, seed=None) -> None:
    config = {k: v for k, v in vars(args).items() if k not in _META}
    files = {}
    for name in sorted(set(out.written)):
        files[name] = hashlib.sha256((out.dir / name).read_bytes()).hexdigest()
    out.json("manifest.json", {
        "command": args.command,
        "config": {k: _plain(v) for k, v in config.items()},
        "seed": seed,
        "versions": {"progscore": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
                     "python": platform.python_version()},
        "timings": {"started": time.strftime("%Y-%m-%dT%H:%M:%S", time.localtime(started)),
                    "seconds": round(time.time() - started, 3)},
        "outputs": files,
    })


def _load(args, min_subjects: int = 2):
    return load_dataset(args.visits, args.matrix, args.grid, min_subjects)


def _fit_config(args) -> FitConfig:
    return FitConfig(kernel=args.kernel, stages=args.stages, tol=args.tol,
                     max_iter_stage1=args.max_iter_stage1, max_iter_stage2=args.max_iter_stage2,
                     fixed_rho=args.rho, correlation_cutoff_mm=args.cutoff_mm)


def _score_rows(subject_ids, subject, visit_index, ages, s):
    return [[subject_ids[i], int(v), _f(t), _f(x)] for i, v, t, x in zip(subject, visit_index, ages, s)]


def _threads(args) -> int:
    return max(1, int(args.threads or os.cpu_count() or 1))


def _stdout_table(rows) -> None:
    width = max(len(str(r[0])) for r in rows)
    for key, val in rows:
        print(f"{str(key):<{width}}  {val}")


# -- commands -------------------------------------------------------------------------


def default_design_text() -> str:
    return resources.files("progscore").joinpath("default_design.toml").read_text(encoding="utf-8")


def cmd_simulate(args) -> int:
    started = time.time()
    if args.design in (None, "default"):
        design = SimDesign.from_toml(default_design_text())
    else:
        design = SimDesign.load(args.design)
    if args.seed is not None:
        design.seed = args.seed
    if args.family is not None:
        design.family = KernelFamily.parse(args.family).value
    if args.rho is not None:
        design.rho = args.rho
    if args.n is not None:
        design.n = args.n
    SimDesign(**vars(design))  # re-validate overrides
    d, truth = simulate(design)
    out = Outputs(args.out)
    names = ["visits.csv", "matrix.csv", "grid.csv", "truth_subjects.csv", "truth_visits.csv",
             "theta_true.json"]

    def write(tmp):
        save_dataset(d, tmp / "visits.csv", tmp / "matrix.csv", tmp / "grid.csv")
        write_truth(truth, d, tmp)

    out.staged(names, write)
    out.text("design.toml", design.to_toml())
    _stdout_table([("subjects", d.n), ("visits", d.N), ("voxels", d.K),
                   ("kernel", design.family), ("rho_mm", design.rho), ("seed", design.seed)])
    _manifest(out, args, started, design.seed)
    return 0


def cmd_fit(args) -> int:
    started = time.time()
    d = _load(args)
    model = fit(d, _fit_config(args))
    out = Outputs(args.out)
    out.text("model.json", dumps_model(model))
    out.csv("scores.csv", ["subject_id", "visit_index", "age", "s"],
            _score_rows(d.subject_ids, d.subject, d.visit_index, d.ages, model.scores))
    post = model.posteriors
    out.csv("subjects.csv", ["subject_id", "alpha", "beta"],
            [[sid, _f(post.u_hat[i, 0]), _f(post.u_hat[i, 1])] for i, sid in enumerate(d.subject_ids)])
    out.csv("trajectories.csv", ["voxel_id", "a", "b"],
            [[v, _f(a), _f(b)] for v, a, b in zip(d.grid.voxel_ids, model.theta.a, model.theta.b)])
    report = {
        "stage": model.stage, "kernel_family": model.family.value, "rho": model.rho,
        "lambda": model.theta.noise.lam, "loglik": model.loglik, "aic": model.aic,
        "n_params": n_params(d.K, model.stage),
        "stage1_loglik": model.stage1_loglik, "stage1_aic": model.stage1_aic,
        "candidate_logliks": model.candidate_logliks, "iterations": model.iterations,
        "converged": model.converged, "informative": model.informative,
    }
    out.json("aic.json", report)
    out.csv("iteration_log.csv", ["stage", "family", "iteration", "loglik"],
            [[r["stage"], r.get("family", ""), r["iteration"], _f(r["loglik"])]
             for r in model.iteration_log])
    rows = [("stage", model.stage), ("kernel", model.family.value), ("rho_mm", model.rho),
            ("loglik", f"{model.loglik:.6f}"), ("AIC", f"{model.aic:.6f}")]
    if model.stage1_aic is not None and model.stage != "IndependentNoise":
        rows.append(("AIC (C=I)", f"{model.stage1_aic:.6f}"))
    rows += [("iterations", model.iterations), ("converged", model.converged)]
    _stdout_table(rows)
    if not model.converged:
        logger.warning("EM did not reach the convergence tolerance")
    if not model.informative:
        logger.warning("posteriors barely differ from the prior; scores are weakly informed")
    _manifest(out, args, started)
    return 0


def cmd_predict(args) -> int:
    started = time.time()
    model = loads_model(Path(args.model).read_text(encoding="utf-8"))
    grid = load_grid(args.grid) if args.grid else model.grid
    if grid.voxel_ids != model.grid.voxel_ids:
        raise DataError("grid voxel ids differ from the model's")
    d = load_dataset(args.visits, args.matrix, grid, min_subjects=1)
    s = np.empty(d.N)
    subj = []
    for i, sid in enumerate(d.subject_ids):
        r = d.rows_of(i)
        post = predict_ps(model, d.ages[r], d.Y[r])
        s[r] = post.s
        subj.append([sid, _f(post.u_hat[0]), _f(post.u_hat[1]), _f(post.sigma[0, 0]),
                     _f(post.sigma[0, 1]), _f(post.sigma[1, 1])])
    out = Outputs(args.out)
    out.csv("scores.csv", ["subject_id", "visit_index", "age", "s"],
            _score_rows(d.subject_ids, d.subject, d.visit_index, d.ages, s))
    out.csv("subjects.csv", ["subject_id", "alpha", "beta", "sigma_aa", "sigma_ab", "sigma_bb"], subj)
    if args.s_values:
        Yhat = predict_traj(model.theta, np.asarray(args.s_values, dtype=float))
        out.csv("trajectory_values.csv", ["s"] + list(grid.voxel_ids),
                [[_f(sv)] + [_f(x) for x in row] for sv, row in zip(args.s_values, Yhat)])
    _stdout_table([("subjects", d.n), ("visits", d.N), ("mean s", f"{s.mean():.6f}")])
    _manifest(out, args, started)
    return 0


def cmd_bootstrap(args) -> int:
    started = time.time()
    d = _load(args)
    model = loads_model(Path(args.model).read_text(encoding="utf-8"))
    if model.grid.voxel_ids != d.grid.voxel_ids or len(model.subject_ids) != d.n:
        raise DataError("model file does not belong to this dataset")
    cfg = FitConfig(tol=args.tol, max_iter_stage1=args.max_iter_stage1,
                    max_iter_stage2=args.max_iter_stage2)
    samples = bootstrap(d, model, args.B, args.seed, cfg, n_jobs=_threads(args))
    out = Outputs(args.out)
    names = [f"{q}.csv" for q in ("a", "b", "m", "V", "lambda", "alpha", "beta", "s")]
    names += ["bootstrap.json"] + (["ci_summary.csv"] if samples.n_usable >= 20 else [])
    out.staged(names, lambda tmp: save_bootstrap(samples, d, tmp, args.level))
    _stdout_table([("replicates", args.B), ("usable", samples.n_usable),
                   ("excluded", len(samples.excluded)), ("kernel", samples.family),
                   ("rho_mm (fixed)", samples.rho_fixed), ("seed", args.seed)])
    _manifest(out, args, started, args.seed)
    return 0


def _hypothesis(args, kind: str) -> int:
    started = time.time()
    model = loads_model(Path(args.model).read_text(encoding="utf-8"))
    samples = load_bootstrap(args.bootstrap, model.grid)
    if kind == "level":
        if not args.s_values:
            raise UsageError("test-level needs at least one --s-values entry")
        results = [test_level(samples, args.roi, s) for s in args.s_values]
    else:
        results = [test_rate(samples, args.roi)]
    out = Outputs(args.out)
    out.json(f"test_{kind}.json", [r.record() for r in results])
    _stdout_table([(f"s={r.level_s}" if r.level_s is not None else "rate",
                    f"p={r.p_value:.4g}{' (clamped)' if r.clamped else ''}") for r in results])
    _manifest(out, args, started, samples.seed)
    return 0


def cmd_test_level(args) -> int:
    return _hypothesis(args, "level")


def cmd_test_rate(args) -> int:
    return _hypothesis(args, "rate")


def cmd_semivariogram(args) -> int:
    started = time.time()
    d = _load(args)
    if args.model:
        model = loads_model(Path(args.model).read_text(encoding="utf-8"))
        if model.stage != "IndependentNoise":
            raise DataError("semivariogram needs a stage-1 (independent-noise) model")
    else:
        model = fit(d, FitConfig(stages=1, tol=args.tol, max_iter_stage1=args.max_iter_stage1))
    sv = empirical_semivariogram(stage1_residuals(d, model), d.grid, args.bins, args.max_distance_mm,
                                 seed=args.seed)
    ranking = fit_semivariogram(sv)
    out = Outputs(args.out)
    out.write("semivariogram.csv", lambda p: write_semivariogram_csv(p, sv))
    out.csv("kernel_ranking.csv", ["rank", "family", "rho", "sill", "sse"],
            [[i + 1, f.family.value, _f(f.rho), _f(f.sill), _f(f.sse)] for i, f in enumerate(ranking)])
    _stdout_table([(f.family.value, f"rho={f.rho:.4g} sse={f.sse:.4g}") for f in ranking])
    _manifest(out, args, started, args.seed)
    return 0


def cmd_lme(args) -> int:
    started = time.time()
    d = _load(args)
    fits = fit_lme(d, LmeConfig(), n_jobs=_threads(args))
    total, aic_val = lme_model_summary(fits)
    out = Outputs(args.out)
    out.write("lme_fits.csv", lambda p: write_lme_csv(p, d, fits))
    out.json("lme_summary.json", {"loglik": total, "aic": aic_val, "n_params": 6 * d.K,
                                  "pinned_voxels": int(sum(f.pinned for f in fits)),
                                  "unconverged_voxels": int(sum(not f.converged for f in fits))})
    _stdout_table([("voxels", d.K), ("loglik", f"{total:.6f}"), ("AIC", f"{aic_val:.6f}")])
    _manifest(out, args, started)
    return 0


def cmd_compare_aic(args) -> int:
    started = time.time()
    rows = []
    for path in args.model or []:
        m = loads_model(Path(path).read_text(encoding="utf-8"))
        label = f"PS {m.family.value}" if m.stage != "IndependentNoise" else "PS identity (C=I)"
        rows.append((label, str(path), m.loglik, n_params(m.theta.K, m.stage), m.aic))
        if m.stage != "IndependentNoise" and m.stage1_aic is not None and args.include_stage1:
            rows.append(("PS identity (C=I)", str(path), m.stage1_loglik,
                         n_params(m.theta.K, "IndependentNoise"), m.stage1_aic))
    for path in args.lme or []:
        s = json.loads(Path(path).read_text(encoding="utf-8"))
        rows.append(("LME", str(path), s["loglik"], s["n_params"], s["aic"]))
    if not rows:
        raise UsageError("compare-aic needs at least one --model or --lme")
    rows.sort(key=lambda r: r[4])
    out = Outputs(args.out)
    out.csv("aic_comparison.csv", ["model", "source", "loglik", "n_params", "aic"],
            [[r[0], r[1], _f(r[2]), r[3], _f(r[4])] for r in rows])
    _stdout_table([(r[0], f"AIC={r[4]:.6f}") for r in rows])
    _manifest(out, args, started)
    return 0


def _read_scores(path) -> dict[tuple[str, int], float]:
    with open(path, newline="", encoding="utf-8") as fh:
        rd = csv.DictReader(fh)
        if rd.fieldnames is None or not {"subject_id", "visit_index", "s"} <= set(rd.fieldnames):
            raise DataError(f"{path}: expected columns subject_id,visit_index,s")
        try:
            return {(r["subject_id"], int(r["visit_index"])): float(r["s"]) for r in rd}
        except ValueError as exc:
            raise DataError(f"{path}: {exc}") from None


def cmd_bland_altman(args) -> int:
    started = time.time()
    a, b = _read_scores(args.scores_a), _read_scores(args.scores_b)
    if set(a) != set(b):
        raise DataError(f"score files cover different visits ({len(a)} vs {len(b)})")
    keys = list(a)
    ba = bland_altman([a[k] for k in keys], [b[k] for k in keys])
    out = Outputs(args.out)
    ids = [f"{s}:{v}" for s, v in keys]
    out.staged(["bland_altman.csv", "bland_altman.json"],
               lambda tmp: write_bland_altman(tmp / "bland_altman.csv", tmp / "bland_altman.json", ba, ids))
    _stdout_table([("mean diff (a-b)", f"{ba.mean_diff:.6g}"),
                   ("limits", f"({ba.limits[0]:.6g}, {ba.limits[1]:.6g})")])
    _manifest(out, args, started)
    return 0


# -- parser -------------------------------------------------------------------------


def _s_list(text: str) -> list[float]:
    try:
        return [float(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated numbers, got {text!r}") from None


def _data_args(p, grid_required=True):
    p.add_argument("--visits", type=Path, required=True, help="visits CSV (subject_id,visit_index,age)")
    p.add_argument("--matrix", type=Path, required=True, help="measurement matrix CSV, one row per visit")
    p.add_argument("--grid", type=Path, required=grid_required, default=None,
                   help="voxel grid CSV (voxel_id,x_mm,y_mm,z_mm[,roi_label])")


def _em_args(p):
    p.add_argument("--tol", type=float, default=1e-6, help="relative log-likelihood convergence tolerance")
    p.add_argument("--max-iter-stage1", type=int, default=100, help="EM iteration cap, independent noise")
    p.add_argument("--max-iter-stage2", type=int, default=30, help="EM iteration cap, correlated noise")


def build_parser() -> argparse.ArgumentParser:
    fmt = argparse.ArgumentDefaultsHelpFormatter
    parser = _Parser(prog="progscore", description="Progression score modelling of longitudinal voxel data.",
                     formatter_class=fmt)
    parser.add_argument("--version", action="version", version=f"%(prog)s {__version__}")
    sub = parser.add_subparsers(dest="command", metavar="COMMAND", parser_class=_Parser)
    sub.required = True

    def add(name, func, help_text):
        p = sub.add_parser(name, help=help_text, description=help_text, formatter_class=fmt)
        p.set_defaults(func=func)
        p.add_argument("--config", type=Path, default=None,
                       help="TOML file of option values (keys as option names); flags override it")
        p.add_argument("--out", type=Path, default=Path("."), help="output directory")
        p.add_argument("--threads", type=int, default=None,
                       help="worker cap; default is the number of available cores")
        p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"],
                       help="stderr diagnostics level")
        return p

    p = add("simulate", cmd_simulate, "draw a synthetic dataset with known truth")
    p.add_argument("--design", default=None,
                   help="design TOML file; 'default' or omitted uses the shipped default design")
    p.add_argument("--seed", type=int, default=None, help="override the design's data seed")
    p.add_argument("--n", type=int, default=None, help="override the number of subjects")
    p.add_argument("--family", default=None, choices=[f.value for f in KernelFamily],
                   help="override the noise correlation family")
    p.add_argument("--rho", type=float, default=None, help="override the correlation range in mm")

    p = add("fit", cmd_fit, "fit the progression score model")
    _data_args(p)
    p.add_argument("--kernel", default="auto", choices=KERNEL_CHOICES,
                   help="noise correlation family for stage 2; auto picks the best log-likelihood")
    p.add_argument("--stages", type=int, default=2, choices=[1, 2],
                   help="1 = independent noise only, 2 = add spatial correlation")
    p.add_argument("--rho", type=float, default=None, help="fix the correlation range (mm) instead of estimating it")
    p.add_argument("--cutoff-mm", type=float, default=None,
                   help="zero correlations beyond this distance (spherical kernel only)")
    _em_args(p)

    p = add("predict", cmd_predict, "score new visits with a fitted model")
    _data_args(p, grid_required=False)
    p.add_argument("--model", type=Path, required=True, help="model.json from fit")
    p.add_argument("--s-values", type=_s_list, default=None,
                   help="comma-separated scores at which to emit voxel trajectory values")

    p = add("bootstrap", cmd_bootstrap, "subject-resampling bootstrap with the range held fixed")
    _data_args(p)
    p.add_argument("--model", type=Path, required=True, help="full-sample model.json from fit")
    p.add_argument("--B", type=int, default=200, help="number of replicates")
    p.add_argument("--seed", type=int, default=0, help="bootstrap seed")
    p.add_argument("--level", type=float, default=0.95, help="confidence level of the summary intervals")
    _em_args(p)

    for name, func, text in (("test-level", cmd_test_level, "does an ROI have the highest level at given scores"),
                             ("test-rate", cmd_test_rate, "does an ROI have the fastest mean slope")):
        p = add(name, func, text)
        p.add_argument("--bootstrap", type=Path, required=True, help="output directory of bootstrap")
        p.add_argument("--model", type=Path, required=True, help="model.json supplying the grid and ROI labels")
        p.add_argument("--roi", required=True, help="target ROI label")
        if name == "test-level":
            p.add_argument("--s-values", type=_s_list, default=None,
                           help="comma-separated progression scores to test at")

    p = add("semivariogram", cmd_semivariogram, "residual semivariogram and kernel family ranking")
    _data_args(p)
    p.add_argument("--model", type=Path, default=None, help="stage-1 model.json; fitted when omitted")
    p.add_argument("--bins", type=int, default=30, help="number of equidistant distance bins")
    p.add_argument("--max-distance-mm", type=float, default=100.0, help="largest pair distance binned")
    p.add_argument("--seed", type=int, default=0, help="pair-sampling seed (large grids only)")
    p.add_argument("--tol", type=float, default=1e-6, help="relative log-likelihood convergence tolerance")
    p.add_argument("--max-iter-stage1", type=int, default=100, help="EM iteration cap, independent noise")

    p = add("lme", cmd_lme, "per-voxel linear mixed model baseline")
    _data_args(p)

    p = add("compare-aic", cmd_compare_aic, "rank fitted models by AIC")
    p.add_argument("--model", type=Path, action="append", default=None, help="model.json (repeatable)")
    p.add_argument("--lme", type=Path, action="append", default=None, help="lme_summary.json (repeatable)")
    p.add_argument("--include-stage1", action=argparse.BooleanOptionalAction, default=True,
                   help="also list the independent-noise fit stored in each stage-2 model")

    p = add("bland-altman", cmd_bland_altman, "agreement of two score files (difference a - b)")
    p.add_argument("--scores-a", type=Path, required=True, help="scores.csv of the first model")
    p.add_argument("--scores-b", type=Path, required=True, help="scores.csv of the second model")
    return parser


def _apply_config(parser, argv):
    """Parse, with the --config file's values as defaults for the chosen subcommand.

    The config is located before the full parse so it can supply options that
    are otherwise required on the command line.
    """
    argv = sys.argv[1:] if argv is None else list(argv)
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config", type=Path, default=None)
    known, rest = pre.parse_known_args(argv)
    choices = parser._subparsers._group_actions[0].choices
    command = next((a for a in rest if not a.startswith("-")), None)
    if known.config is None or command not in choices:
        return parser.parse_args(argv)
    config = known.config
    try:
        raw = tomllib.loads(Path(config).read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read config {config}: {exc}") from exc
    except tomllib.TOMLDecodeError as exc:
        raise UsageError(f"{config}: {exc}") from exc
    subparser = choices[command]
    known = {a.dest: a for a in subparser._actions if a.dest not in ("help", "config")}
    values = {}
    for key, val in raw.items():
        dest = key.replace("-", "_")
        if dest not in known or dest in _META:
            raise UsageError(f"{config}: unknown option {key!r} for {command}")
        action = known[dest]
        if isinstance(val, list) and action.type is _s_list:
            val = [float(x) for x in val]
        elif action.type is not None and not isinstance(val, (list, bool)):
            try:
                val = action.type(str(val)) if action.type in (Path, _s_list) else action.type(val)
            except (TypeError, ValueError, argparse.ArgumentTypeError) as exc:
                raise UsageError(f"{config}: bad value for {key!r}: {exc}") from None
        if action.choices is not None and val not in action.choices:
            raise UsageError(f"{config}: {key!r} must be one of {list(action.choices)}")
        values[dest] = val
    for a in subparser._actions:
        if a.dest in values:
            a.required = False
    subparser.set_defaults(**values)
    return parser.parse_args(argv)


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = _apply_config(parser, argv)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s",
                        stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, FileNotFoundError, IsADirectoryError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except NumericalError as exc:
        print(f"numerical failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
