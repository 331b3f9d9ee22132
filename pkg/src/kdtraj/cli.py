"""Command line entry point: data generation, training, distillation, evaluation, reports and ablation grids.

Every command writes into its own output directory, which holds exactly one
``manifest.json`` describing the command, the resolved config, its hash, the
code version, seed, timestamps and the artifacts written. Outputs are built in
a staging directory and renamed into place, so a failed run leaves nothing.

Exit status: 0 success, 1 runtime failure, 2 usage or config error.
"""
from __future__ import annotations

import argparse
import hashlib
import itertools
import json
import logging
import os
import shutil
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from contextlib import contextmanager
from multiprocessing import get_context
from pathlib import Path

import yaml

from . import __version__

log = logging.getLogger("kdtraj")

MANIFEST = "manifest.json"
# fields a teacher never reads; runs differing only in these share one teacher
STUDENT_ONLY = ("student_modalities", "kd_local", "kd_global", "kd_form", "kd_dist", "lambda_cos",
                "student_reg_regimes")
DEFAULT_GRID = {"kd_local": [True, False], "kd_global": [True, False]}


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


# -- config ---------------------------------------------------------------------------

def _read_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UsageError(f"config file not found: {p}")
    try:
        data = yaml.safe_load(p.read_text())
    except yaml.YAMLError as e:
        raise UsageError(f"malformed config {p}: {str(e).splitlines()[0]}") from None
    if data is None:
        return {}
    if not isinstance(data, dict):
        raise UsageError(f"malformed config {p}: top level must be a mapping")
    return data


def _section(cfg: dict, name: str) -> dict:
    """A named section, or the whole mapping when the file has no sections."""
    if any(k in cfg for k in ("generator", "experiment", "grid")):
        sec = cfg.get(name, {}) or {}
        if not isinstance(sec, dict):
            raise UsageError(f"config section {name!r} must be a mapping")
        return dict(sec)
    return dict(cfg)


def _parse_sets(items) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep or not key:
            raise UsageError(f"--set expects key=value, got {item!r}")
        try:
            out[key.strip()] = yaml.safe_load(value)
        except yaml.YAMLError:
            raise UsageError(f"cannot parse value in --set {item!r}") from None
    return out


def _experiment(raw: dict):
    from .train import ConfigError, ExperimentConfig
    try:
        return ExperimentConfig.from_dict(raw)
    except (ConfigError, TypeError, ValueError) as e:
        raise UsageError(f"invalid experiment config: {e}") from None


def _generator(raw: dict):
    from .synth import GeneratorConfig
    try:
        return GeneratorConfig.from_dict(raw)
    except (TypeError, ValueError) as e:
        raise UsageError(f"invalid generator config: {e}") from None


def _hash(obj) -> str:
    return hashlib.sha256(json.dumps(obj, sort_keys=True, default=str).encode()).hexdigest()[:16]


# -- run directories --------------------------------------------------------------------

def _now() -> str:
    return time.strftime("%Y-%m-%dT%H:%M:%S%z")


def _completed(out: Path, config_hash: str, resume: bool) -> bool:
    """True when ``out`` already holds this exact completed run (and --resume was given)."""
    manifest = out / MANIFEST
    if not out.exists():
        return False
    if not resume:
        raise UsageError(f"output directory {out} already exists (use --resume or another --out)")
    if not manifest.is_file():
        raise UsageError(f"{out} exists but holds no manifest; refusing to touch it")
    prior = json.loads(manifest.read_text())
    if prior.get("config_hash") != config_hash:
        raise UsageError(f"{out} was produced by a different config ({prior.get('config_hash')} != {config_hash})")
    return prior.get("status") == "complete"


@contextmanager
def _staging(out: Path):
    out.parent.mkdir(parents=True, exist_ok=True)
    tmp = out.parent / f".{out.name}.partial-{os.getpid()}"
    if tmp.exists():
        shutil.rmtree(tmp)
    tmp.mkdir()
    try:
        yield tmp
    except BaseException:
        shutil.rmtree(tmp, ignore_errors=True)
        raise
    if out.exists():  # an incomplete earlier attempt under --resume
        shutil.rmtree(out)
    tmp.rename(out)


def _write_manifest(stage: Path, command: str, config: dict, config_hash: str, seed, started: str,
                    inputs: dict | None = None, extra: dict | None = None):
    artifacts = sorted(str(p.relative_to(stage)) for p in stage.rglob("*")
                       if p.is_file() and p.name != MANIFEST and not _inside_child_run(p, stage))
    manifest = {
        "command": command,
        "status": "complete",
        "config": config,
        "config_hash": config_hash,
        "code_version": __version__,
        "seed": seed,
        "started": started,
        "finished": _now(),
        "inputs": inputs or {},
        "artifacts": artifacts,
        **(extra or {}),
    }
    (stage / MANIFEST).write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")


def _inside_child_run(path: Path, root: Path) -> bool:
    # files below a nested directory that has its own manifest belong to that manifest
    for parent in path.parents:
        if parent == root:
            return False
        if (parent / MANIFEST).exists():
            return True
    return False


def _resolve(workdir: Path, p) -> Path | None:
    if p is None:
        return None
    p = Path(p)
    return p if p.is_absolute() else workdir / p


def _require_dir(p: Path, what: str) -> Path:
    if not p.exists():
        raise UsageError(f"{what} not found: {p}")
    return p


def _load_data(p: Path):
    from .scene import load_scenes
    _require_dir(p, "data directory")
    try:
        return load_scenes(p)
    except FileNotFoundError as e:
        raise UsageError(str(e)) from None


def _load_model(p: Path):
    from .train import load_checkpoint
    _require_dir(p, "model")
    if p.is_dir() and not (p / "model.npz").is_file():
        raise UsageError(f"no model.npz in {p}")
    return load_checkpoint(p)


def _write_history(stage: Path, history: list[dict]):
    with open(stage / "train_log.jsonl", "w") as fh:
        for rec in history:
            fh.write(json.dumps(rec, sort_keys=True) + "\n")


# -- commands ---------------------------------------------------------------------------

def cmd_generate_data(args, workdir: Path) -> int:
    from .scene import save_scene
    from .synth import generate_dataset
    raw = {**_section(_read_config(args.config), "generator"), **_parse_sets(args.set)}
    if args.seed is not None:
        raw["seed"] = args.seed
    gen = _generator(raw)
    if args.count < 1:
        raise UsageError("--count must be >= 1")
    config = {"generator": gen.to_dict(), "count": args.count}
    config_hash = _hash(config)
    out = _resolve(workdir, args.out)
    if _completed(out, config_hash, args.resume):
        print(f"{out}: up to date")
        return 0
    started = _now()
    scenes, seeds = generate_dataset(gen, args.count)
    with _staging(out) as stage:
        for i, scene in enumerate(scenes):
            save_scene(scene, stage / f"scene_{i:06d}.json")
        _write_manifest(stage, "generate-data", config, config_hash, gen.seed, started,
                        extra={"scene_seeds": seeds})
    print(f"wrote {len(scenes)} scenes to {out}")
    return 0


def _train_command(args, workdir: Path, role: str) -> int:
    from .train import distill_student, save_checkpoint, train_teacher
    raw = {**_section(_read_config(args.config), "experiment"), **_parse_sets(args.set)}
    for key in ("seed", "epochs"):
        if getattr(args, key) is not None:
            raw[key] = getattr(args, key)
    cfg = _experiment(raw)
    data_dir = _resolve(workdir, args.data)
    inputs = {"data": str(data_dir)}
    teacher = None
    if role == "student":
        teacher_dir = _resolve(workdir, args.teacher)
        teacher = _load_model(teacher_dir)
        inputs["teacher"] = str(teacher_dir)
        inputs["teacher_fingerprint"] = teacher.fingerprint
    config = cfg.to_dict()
    config_hash = _hash({"config": config, "inputs": inputs})
    out = _resolve(workdir, args.out)
    if _completed(out, config_hash, args.resume):
        print(f"{out}: up to date")
        return 0
    data = _load_data(data_dir)
    started = _now()
    trained = train_teacher(cfg, data) if role == "teacher" else distill_student(cfg, teacher, data)
    with _staging(out) as stage:
        save_checkpoint(trained, stage / "model.npz")
        _write_history(stage, trained.history)
        _write_manifest(stage, "train-teacher" if role == "teacher" else "distill-student", config,
                        config_hash, cfg.seed, started, inputs, {"fingerprint": trained.fingerprint})
    print(f"{role} {trained.fingerprint} saved to {out}")
    return 0


def cmd_train_teacher(args, workdir):
    return _train_command(args, workdir, "teacher")


def cmd_distill_student(args, workdir):
    return _train_command(args, workdir, "student")


def _predictor(spec: str, workdir: Path):
    from .evaluate import ConstantVelocity
    if spec == "constant-velocity":
        return ConstantVelocity(), "constant-velocity"
    p = _resolve(workdir, spec)
    return _load_model(p), p.name


def cmd_evaluate(args, workdir: Path) -> int:
    from .evaluate import evaluate
    from .losses import REGIMES
    regimes = tuple(args.regimes.split(",")) if args.regimes else REGIMES
    if set(regimes) - set(REGIMES):
        raise UsageError(f"--regimes must be drawn from {','.join(REGIMES)}")
    model, default_name = _predictor(args.model, workdir)
    data_dir = _resolve(workdir, args.data)
    name = args.name or default_name
    inputs = {"model": args.model if args.model == "constant-velocity" else str(_resolve(workdir, args.model)),
              "data": str(data_dir), "model_fingerprint": getattr(model, "fingerprint", "")}
    config = {"regimes": list(regimes), "name": name, "batch_size": args.batch_size}
    config_hash = _hash({"config": config, "inputs": inputs})
    out = _resolve(workdir, args.out)
    if _completed(out, config_hash, args.resume):
        print(f"{out}: up to date")
        return 0
    data = _load_data(data_dir)
    started = _now()
    try:
        report = evaluate(model, data, regimes, batch_size=args.batch_size, name=name)
    except ValueError as e:
        raise UsageError(str(e)) from None
    with _staging(out) as stage:
        (stage / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        _write_manifest(stage, "evaluate", config, config_hash, None, started, inputs)
    print(" ".join(f"{k}={v:.4f}" for k, v in report.values().items()))
    return 0


def _read_report(p: Path):
    from .evaluate import MetricReport
    f = p / "metrics.json" if p.is_dir() else p
    if not f.is_file():
        raise UsageError(f"no metrics found at {p}")
    return MetricReport.from_dict(json.loads(f.read_text()))


def cmd_report(args, workdir: Path) -> int:
    from .evaluate import emit_report
    paths = [_resolve(workdir, p) for p in args.inputs]
    reports = [_read_report(p) for p in paths]
    if not 0 <= args.baseline < len(reports):
        raise UsageError("--baseline index out of range")
    config = {"inputs": [str(p) for p in paths], "baseline": args.baseline,
              "metrics": [r.to_dict() for r in reports]}
    config_hash = _hash(config)
    out = _resolve(workdir, args.out)
    if _completed(out, config_hash, args.resume):
        print(f"{out}: up to date")
        return 0
    started = _now()
    with _staging(out) as stage:
        emit_report(reports, stage, args.baseline)
        _write_manifest(stage, "report", config, config_hash, None, started)
    print(f"report written to {out}")
    return 0


# -- ablation grids ---------------------------------------------------------------------

def expand_grid(grid: dict) -> list[dict]:
    """Cartesian product of the listed values, in key order."""
    keys = list(grid)
    for k in keys:
        if not isinstance(grid[k], list) or not grid[k]:
            raise UsageError(f"grid entry {k!r} must be a non-empty list")
    return [dict(zip(keys, combo)) for combo in itertools.product(*(grid[k] for k in keys))]


def _label(point: dict) -> str:
    def fmt(v):
        if isinstance(v, bool):
            return "on" if v else "off"
        if isinstance(v, (list, tuple)):
            return "".join(str(x) for x in v)
        return str(v)
    return "-".join(f"{k}={fmt(v)}" for k, v in point.items()).replace("/", "_") or "base"


def _run_student(job: dict) -> dict:
    """One ablation cell: distill (or train without KD), save, optionally evaluate. Runs in a worker."""
    from .evaluate import evaluate
    from .scene import load_scenes
    from .train import ExperimentConfig, distill_student, load_checkpoint, save_checkpoint
    cfg = ExperimentConfig.from_dict(job["config"])
    teacher = load_checkpoint(job["teacher"])
    trained = distill_student(cfg, teacher, load_scenes(job["data"]))
    out = Path(job["out"])
    with _staging(out) as stage:
        save_checkpoint(trained, stage / "model.npz")
        _write_history(stage, trained.history)
        if job["eval_data"]:
            report = evaluate(trained, load_scenes(job["eval_data"]), name=out.name)
            (stage / "metrics.json").write_text(json.dumps(report.to_dict(), indent=2, sort_keys=True) + "\n")
        _write_manifest(stage, "ablate-run", job["config"], job["config_hash"], cfg.seed, job["started"],
                        {"data": job["data"], "teacher": job["teacher"], "eval_data": job["eval_data"]},
                        {"fingerprint": trained.fingerprint, "grid_point": job["point"]})
    return {"out": str(out), "fingerprint": trained.fingerprint}


def cmd_ablate(args, workdir: Path) -> int:
    from .train import save_checkpoint, train_teacher
    raw_cfg = _read_config(args.config)
    base = {**_section(raw_cfg, "experiment"), **_parse_sets(args.set)}
    if args.seed is not None:
        base["seed"] = args.seed
    if args.epochs is not None:
        base["epochs"] = args.epochs
    grid = raw_cfg.get("grid") if "grid" in raw_cfg else None
    for item in args.grid or ():
        key, sep, values = item.partition("=")
        try:
            values = yaml.safe_load(values)
        except yaml.YAMLError:
            values = None
        if not sep or not isinstance(values, list):
            raise UsageError(f"--grid expects key=[v1, v2, ...], got {item!r}")
        grid = dict(grid or {})
        grid[key] = values
    grid = grid or DEFAULT_GRID
    if not isinstance(grid, dict):
        raise UsageError("grid must map config fields to lists of values")
    points = expand_grid(grid)
    # validate every cell before any work starts
    cells = [(p, _experiment({**base, **p})) for p in points]
    data_dir = _require_dir(_resolve(workdir, args.data), "data directory")
    eval_dir = _resolve(workdir, args.eval_data)
    if eval_dir is not None:
        _require_dir(eval_dir, "evaluation data")
    teacher_arg = _resolve(workdir, args.teacher)
    if teacher_arg is not None:
        _load_model(teacher_arg)
    out = _resolve(workdir, args.out)
    config = {"base": _experiment(base).to_dict(), "grid": grid}
    config_hash = _hash({"config": config, "data": str(data_dir), "teacher": str(teacher_arg)})
    if out.exists():
        if not args.resume:
            raise UsageError(f"output directory {out} already exists (use --resume or another --out)")
        top = out / MANIFEST
        if top.is_file():
            prior = json.loads(top.read_text())
            if prior.get("config_hash") != config_hash:
                raise UsageError(f"{out} was produced by a different ablation config")
            if prior.get("status") == "complete":
                print(f"{out}: up to date")
                return 0
    out.mkdir(parents=True, exist_ok=True)
    started = _now()

    # teachers: one per distinct teacher-relevant config, unless given
    teachers = {}
    for _, cfg in cells:
        if teacher_arg is not None:
            teachers[cfg.fingerprint()] = str(teacher_arg)
            continue
        tcfg = cfg.to_dict()
        for k in STUDENT_ONLY:
            tcfg.pop(k)
        key = _hash(tcfg)
        tdir = out / "teachers" / key
        if not (tdir / MANIFEST).is_file():
            log.info("training teacher %s", key)
            t_started = _now()
            trained = train_teacher(cfg, _load_data(data_dir))
            with _staging(tdir) as stage:
                save_checkpoint(trained, stage / "model.npz")
                _write_history(stage, trained.history)
                _write_manifest(stage, "train-teacher", cfg.to_dict(), key, cfg.seed, t_started,
                                {"data": str(data_dir)}, {"fingerprint": trained.fingerprint})
        teachers[cfg.fingerprint()] = str(tdir)

    jobs = []
    for i, (point, cfg) in enumerate(cells):
        run_dir = out / "runs" / f"{i:03d}-{_label(point)}"
        cfg_dict = cfg.to_dict()
        run_hash = _hash({"config": cfg_dict, "teacher": teachers[cfg.fingerprint()]})
        if (run_dir / MANIFEST).is_file():
            if json.loads((run_dir / MANIFEST).read_text()).get("config_hash") == run_hash:
                continue
            raise UsageError(f"{run_dir} holds a run with a different config")
        jobs.append({"config": cfg_dict, "config_hash": run_hash, "teacher": teachers[cfg.fingerprint()],
                     "data": str(data_dir), "eval_data": str(eval_dir) if eval_dir else None,
                     "out": str(run_dir), "point": point, "started": _now()})
    if args.jobs > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(args.jobs, mp_context=get_context("spawn")) as pool:
            list(pool.map(_run_student, jobs))
    else:
        for job in jobs:
            log.info("run %s", Path(job["out"]).name)
            _run_student(job)

    runs = sorted(p for p in (out / "runs").iterdir() if (p / MANIFEST).is_file())
    if eval_dir is not None:
        from .evaluate import emit_report
        reports = [_read_report(p) for p in runs]
        baseline = next((i for i, (pt, _) in enumerate(cells)
                         if pt.get("kd_local") is False and pt.get("kd_global") is False), 0)
        report_dir = out / "report"
        if report_dir.exists():
            shutil.rmtree(report_dir)
        with _staging(report_dir) as stage:
            emit_report(reports, stage, baseline)
            _write_manifest(stage, "report", {"inputs": [str(p) for p in runs], "baseline": baseline},
                            _hash([r.to_dict() for r in reports]), None, _now())
    _write_manifest(out, "ablate", config, config_hash, _experiment(base).seed, started,
                    {"data": str(data_dir), "eval_data": str(eval_dir) if eval_dir else None,
                     "teacher": str(teacher_arg) if teacher_arg else None},
                    {"runs": [str(p.relative_to(out)) for p in runs],
                     "teachers": sorted({str(Path(t)) for t in teachers.values()})})
    print(f"{len(runs)} runs in {out}")
    return 0


# -- entry point ------------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="kdtraj", description=__doc__.splitlines()[0])
    parser.add_argument("--version", action="version", version=f"kdtraj {__version__}")
    common = _Parser(add_help=False)
    common.add_argument("--workdir", default=".", help="root for all relative paths")
    common.add_argument("--config", help="YAML or JSON config file")
    common.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config field")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("--resume", action="store_true", help="skip if --out already holds this completed run")
    common.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("generate-data", parents=[common], help="write synthetic scenes")
    p.add_argument("--count", type=int, default=256)
    p.add_argument("--seed", type=int)
    p.set_defaults(func=cmd_generate_data)

    for name, func, help_ in (("train-teacher", cmd_train_teacher, "train the full-modality teacher"),
                              ("distill-student", cmd_distill_student, "distill a student from a frozen teacher")):
        p = sub.add_parser(name, parents=[common], help=help_)
        p.add_argument("--data", required=True)
        p.add_argument("--seed", type=int)
        p.add_argument("--epochs", type=int)
        if name == "distill-student":
            p.add_argument("--teacher", required=True, help="teacher run directory or model.npz")
        p.set_defaults(func=func)

    p = sub.add_parser("evaluate", parents=[common], help="best-of-F metrics for a model")
    p.add_argument("--model", required=True, help="run directory, model.npz or 'constant-velocity'")
    p.add_argument("--data", required=True)
    p.add_argument("--name")
    p.add_argument("--regimes", help="comma separated subset of full,2,1")
    p.add_argument("--batch-size", type=int, default=32)
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("report", parents=[common], help="comparison table and charts")
    p.add_argument("--inputs", nargs="+", required=True, help="evaluate output directories or metrics.json files")
    p.add_argument("--baseline", type=int, default=0, help="index of the reference report")
    p.set_defaults(func=cmd_report)

    p = sub.add_parser("ablate", parents=[common], help="run a grid of student configurations")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data", help="scenes to evaluate every run on")
    p.add_argument("--teacher", help="reuse this teacher instead of training one per teacher config")
    p.add_argument("--grid", action="append", metavar="KEY=[V1,V2]", help="grid axis as a YAML list (repeatable)")
    p.add_argument("--seed", type=int)
    p.add_argument("--epochs", type=int)
    p.add_argument("--jobs", type=int, default=1, help="worker processes for the student runs")
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as e:
        print(f"kdtraj: error: {e}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    workdir = Path(args.workdir)
    try:
        return args.func(args, workdir)
    except UsageError as e:
        print(f"kdtraj: error: {e}", file=sys.stderr)
        return 2
    except KeyboardInterrupt:
        print("kdtraj: interrupted", file=sys.stderr)
        return 1
    except Exception as e:  # runtime failure: one line, details at debug level
        log.debug("failure", exc_info=True)
        print(f"kdtraj: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
