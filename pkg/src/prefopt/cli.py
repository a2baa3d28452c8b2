"""Command-line entry point: ``prefopt {gen,train,sweep,gradcheck,micheck,report}``.

Exit codes: 0 success, 1 unexpected failure, 2 configuration error,
3 I/O error, 4 training aborted on a non-finite value, 5 every sweep run
failed, 6 a verification check failed.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import math
import os
import sys
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path
from typing import Sequence

import numpy as np

from . import config as configmod
from . import experiment, gradcheck, miest
from .errors import ConfigError, GenerationError, InvalidInputError, TrainingError
from .losses import RATIO_CLAMP_LOG
from .trainer import TRAJECTORY_COLUMNS, TrainTrajectory, save_checkpoint

log = logging.getLogger("prefopt")

EXIT_OK = 0
EXIT_FAILURE = 1
EXIT_CONFIG = 2
EXIT_IO = 3
EXIT_NAN = 4
EXIT_SWEEP = 5
EXIT_CHECK = 6

OUT_ENV = "PREFOPT_OUT_DIR"
DEFAULT_OUT = "prefopt-out"
SIDECAR_LOG = "run.log"
SUMMARY_COLUMNS = (
    "run", "objective", "beta", "lr", "seed", "status", "exit_code", "final_loss",
    "final_chosen_avg_logp", "final_rejected_avg_logp", "final_margin", "final_reward_accuracy",
    "final_reverse_kl",
)


class CommandError(Exception):
    def __init__(self, message: str, code: int):
        super().__init__(message)
        self.code = code


def _out_dir(args) -> Path:
    return Path(args.out or os.environ.get(OUT_ENV) or DEFAULT_OUT)


def _setup_logging(quiet: bool) -> None:
    root = logging.getLogger("prefopt")
    root.setLevel(logging.INFO)
    for h in list(root.handlers):
        root.removeHandler(h)
        h.close()
    if not quiet:
        h = logging.StreamHandler(sys.stderr)
        h.setFormatter(logging.Formatter("%(levelname)s %(message)s"))
        root.addHandler(h)


class _Sidecar:
    """Timestamped log file next to the data artifacts of a command."""

    def __init__(self, directory: Path):
        self.handler = logging.FileHandler(directory / SIDECAR_LOG, mode="w")
        self.handler.setFormatter(logging.Formatter("%(asctime)s %(levelname)s %(message)s"))

    def __enter__(self):
        logging.getLogger("prefopt").addHandler(self.handler)
        return self

    def __exit__(self, *exc):
        logging.getLogger("prefopt").removeHandler(self.handler)
        self.handler.close()


def _say(args, text: str) -> None:
    if not args.quiet:
        print(text)


def _load_config(args) -> dict:
    if not args.config:
        raise CommandError("--config is required for this command", EXIT_CONFIG)
    try:
        return configmod.load(args.config, args.seed)
    except OSError as exc:
        raise CommandError(f"cannot read config {args.config}: {exc.strerror or exc}", EXIT_IO) from exc


def _prepare_out(path: Path) -> Path:
    try:
        path.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise CommandError(f"cannot create output directory {path}: {exc.strerror or exc}", EXIT_IO) from exc
    return path


def _write_text(path: Path, text: str) -> None:
    try:
        path.write_text(text)
    except OSError as exc:
        raise CommandError(f"cannot write {path}: {exc.strerror or exc}", EXIT_IO) from exc


def _metrics(traj: TrainTrajectory) -> dict:
    f = traj.final
    return {
        "final_loss": f.loss,
        "final_chosen_avg_logp": f.chosen_avg_logp,
        "final_rejected_avg_logp": f.rejected_avg_logp,
        "final_margin": f.margin,
        "final_reward_accuracy": f.reward_accuracy,
        "final_reverse_kl": f.reverse_kl,
        "clamp_count": f.clamp_count,
    }


# gen ------------------------------------------------------------------------

def cmd_gen(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(_out_dir(args))
    with _Sidecar(out):
        log.info("generating dataset, seed %d", cfg["seed"])
        ref = experiment.build_reference(cfg)
        reward = experiment.build_reward(cfg, ref)
        cfg_gen = dict(cfg, data=dict(cfg["data"], path=""))
        data = experiment.build_dataset(cfg_gen, ref, reward)
        _write_text(out / "dataset.jsonl", data.dumps())
        _write_text(out / "reference.json", json.dumps(ref.to_dict(), sort_keys=True))
        _write_text(out / "resolved_config.toml", configmod.dumps(cfg))
        n = len(data)
        overlap = sum(ex.overlap_realized for ex in data) / n
        first = sum(ex.first_chosen for ex in data) / n
        higher = sum(ex.reward_chosen > ex.reward_rejected for ex in data) / n
        log.info("wrote %d examples", n)
    _say(args, f"examples={n} mean_overlap={overlap:.4f} first_wins={first:.4f} higher_reward_chosen={higher:.4f}")
    return EXIT_OK


# train ----------------------------------------------------------------------

def _train_into(cfg: dict, out: Path) -> dict:
    """Build and train one config, writing the run artifacts into ``out``."""
    if cfg["loss"]["objective"] == "rm":
        raise ConfigError("loss.objective 'rm' trains a reward model, not a policy", "loss.objective")
    _write_text(out / "resolved_config.toml", configmod.dumps(cfg))
    try:
        exp = experiment.build(cfg)
    except OSError as exc:
        raise CommandError(f"cannot read dataset: {exc}", EXIT_IO) from exc
    log.info("training %s on %d examples", cfg["loss"]["objective"], len(exp.data))
    try:
        res = exp.run()
    except TrainingError as exc:
        if exc.last_good_params is not None:
            policy = exp.reference.copy()
            # same registration order as training, so the parameter layout matches
            for ex in exp.data:
                policy.register(ex.prompt, ex.chosen)
                policy.register(ex.prompt, ex.rejected)
            policy.set_params(exc.last_good_params)
            save_checkpoint(out / "checkpoint_last_good.json", policy, step=exc.step)
        raise
    _write_text(out / "trajectory.csv", res.trajectory.to_csv())
    save_checkpoint(out / "checkpoint.json", res.policy, res.optimizer, res.steps)
    metrics = _metrics(res.trajectory)
    metrics.update(objective=cfg["loss"]["objective"], steps=res.steps, ratio_clamp_log=RATIO_CLAMP_LOG)
    _write_text(out / "metrics.json", json.dumps(metrics, sort_keys=True, indent=1))
    return metrics


def cmd_train(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(_out_dir(args))
    with _Sidecar(out):
        m = _train_into(cfg, out)
    rkl = "" if m["final_reverse_kl"] is None else f" reverse_kl={m['final_reverse_kl']:.6f}"
    _say(args, f"objective={m['objective']} steps={m['steps']} loss={m['final_loss']:.6f} "
               f"chosen_avg_logp={m['final_chosen_avg_logp']:.6f} margin={m['final_margin']:.6f} "
               f"reward_accuracy={m['final_reward_accuracy']:.4f}{rkl}")
    return EXIT_OK


# sweep ----------------------------------------------------------------------

def _sweep_worker(job: tuple) -> dict:
    name, point, cfg, out = job
    out = Path(out)
    row = {"run": name, "objective": point["objective"], "beta": cfg["loss"]["beta"],
           "lr": configmod.train_mapping(cfg)["lr"], "seed": cfg["seed"]}
    try:
        out.mkdir(parents=True, exist_ok=True)
        with _Sidecar(out):
            metrics = _train_into(cfg, out)
        row.update(status="ok", exit_code=EXIT_OK, **{k: metrics[k] for k in SUMMARY_COLUMNS if k in metrics})
    except Exception as exc:  # each run reports its own failure
        code = _exit_code(exc)
        row.update(status="failed", exit_code=code)
        (out / "error.txt").write_text(f"{type(exc).__name__}: {exc}\n")
    return row


def cmd_sweep(args) -> int:
    cfg = _load_config(args)
    out = _prepare_out(_out_dir(args))
    points = experiment.sweep_points(cfg)
    jobs = []
    for i, point in enumerate(points):
        name = experiment.point_name(i, point)
        jobs.append((name, point, experiment.point_config(cfg, point), str(out / name)))
    _write_text(out / "resolved_config.toml", configmod.dumps(cfg))
    with _Sidecar(out):
        log.info("sweep of %d runs with %d workers", len(jobs), args.jobs)
        if args.jobs > 1 and len(jobs) > 1:
            with ProcessPoolExecutor(max_workers=args.jobs) as pool:
                rows = list(pool.map(_sweep_worker, jobs))
        else:
            rows = [_sweep_worker(j) for j in jobs]
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(SUMMARY_COLUMNS)
    for r in rows:
        w.writerow([_csv_value(r.get(c, "")) for c in SUMMARY_COLUMNS])
    _write_text(out / "summary.csv", buf.getvalue())
    ok = sum(r["status"] == "ok" for r in rows)
    _say(args, f"runs={len(rows)} succeeded={ok} failed={len(rows) - ok}")
    for r in rows:
        if r["status"] != "ok":
            _say(args, f"failed: {r['run']} exit_code={r['exit_code']}")
    return EXIT_OK if ok else EXIT_SWEEP


def _csv_value(v) -> str:
    if v is None:
        return ""
    if isinstance(v, float):
        return repr(v)
    return str(v)


# gradcheck ------------------------------------------------------------------

def cmd_gradcheck(args) -> int:
    seed = 0 if args.seed is None else args.seed
    rows = gradcheck.run(args.instances, seed, flip_sign=args.inject_sign_flip)
    _say(args, gradcheck.format_table(rows))
    failed = [r for r in rows if not r.passed]
    if failed:
        names = ", ".join(f"{r.objective}/{r.backend}" for r in failed)
        raise CommandError(f"gradient check failed for {names}", EXIT_CHECK)
    return EXIT_OK


# micheck --------------------------------------------------------------------

MI_NWJ_GAP = 0.02
MI_BOUND_SLACK = 1e-9


def micheck_rows(seed: int = 0, steps: int = 2000, lr: float = 1.0, batch: int = 2) -> list[dict]:
    """Train NWJ and InfoNCE critics on the canonical joints."""
    joints = [
        ("independence", miest.independent_joint()),
        ("copy", miest.copy_joint()),
        ("random-3", miest.random_joint(np.random.default_rng(seed), n_y=3)),
    ]
    rows = []
    for name, joint in joints:
        exact = miest.exact_cmi(joint)
        _, nwj = miest.train_critic(joint, "nwj", steps, lr, seed)
        _, nce = miest.train_critic(joint, "infonce", steps, lr, seed, batch=batch)
        nwj_final, nce_final = nwj[-1].bound, nce[-1].bound
        bound_max = max(max(r.bound for r in nwj), max(r.bound for r in nce))
        rows.append({
            "joint": name, "exact_cmi": exact, "nwj": nwj_final, "infonce": nce_final,
            "nwj_gap": exact - nwj_final, "infonce_gap": exact - nce_final,
            "log_batch": math.log(batch), "max_bound": bound_max,
            "passed": abs(exact - nwj_final) <= MI_NWJ_GAP and bound_max <= exact + MI_BOUND_SLACK,
        })
    return rows


def cmd_micheck(args) -> int:
    rows = micheck_rows(0 if args.seed is None else args.seed)
    lines = [f"{'joint':<13} {'exact_cmi':>10} {'nwj':>10} {'infonce':>10} {'nwj_gap':>10} {'log_batch':>10}  result"]
    for r in rows:
        lines.append(f"{r['joint']:<13} {r['exact_cmi']:>10.6f} {r['nwj']:>10.6f} {r['infonce']:>10.6f} "
                     f"{r['nwj_gap']:>10.6f} {r['log_batch']:>10.6f}  {'pass' if r['passed'] else 'FAIL'}")
    _say(args, "\n".join(lines))
    failed = [r["joint"] for r in rows if not r["passed"]]
    if failed:
        raise CommandError(f"mutual information check failed for {', '.join(failed)}", EXIT_CHECK)
    return EXIT_OK


# report ---------------------------------------------------------------------

REPORT_METRICS = tuple(c for c in TRAJECTORY_COLUMNS if c != "step")


def _read_run(directory: Path) -> tuple[str, TrainTrajectory]:
    csv_path = directory / "trajectory.csv"
    cfg_path = directory / "resolved_config.toml"
    if not directory.is_dir():
        raise CommandError(f"run directory {directory} does not exist", EXIT_IO)
    if not csv_path.is_file():
        raise CommandError(f"run directory {directory} has no trajectory.csv", EXIT_IO)
    try:
        objective = configmod.parse_toml(cfg_path.read_text(), str(cfg_path))["loss"]["objective"]
    except (OSError, KeyError, ConfigError):
        objective = directory.name
    try:
        traj = TrainTrajectory.read_csv(csv_path, objective)
    except (OSError, ValueError, KeyError) as exc:
        raise CommandError(f"cannot read {csv_path}: {exc}", EXIT_IO) from exc
    if not traj.records:
        raise CommandError(f"{csv_path} has no records", EXIT_IO)
    return objective, traj


def cmd_report(args) -> int:
    if not args.runs:
        raise CommandError("report needs at least one run directory", EXIT_CONFIG)
    runs = [(Path(d),) + _read_run(Path(d)) for d in args.runs]
    counts: dict = {}
    for _, obj, _ in runs:
        counts[obj] = counts.get(obj, 0) + 1
    labelled = [(obj if counts[obj] == 1 else f"{obj}:{d.name}", traj) for d, obj, traj in runs]
    out = _prepare_out(_out_dir(args))
    long_rows = []
    for label, traj in labelled:
        for rec in traj.records:
            for m in REPORT_METRICS:
                v = getattr(rec, m)
                if v is not None:
                    long_rows.append((rec.step, label, m, v))
    order = {label: i for i, (label, _) in enumerate(labelled)}
    long_rows.sort(key=lambda r: (r[0], order[r[1]], REPORT_METRICS.index(r[2])))
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(("objective", "step", "metric", "value"))
    for step, label, m, v in long_rows:
        w.writerow((label, step, m, _csv_value(float(v)) if m != "clamp_count" else int(v)))
    _write_text(out / "report_long.csv", buf.getvalue())
    summary = {}
    for label, traj in labelled:
        i, f = traj.initial, traj.final
        summary[label] = {
            "initial_chosen_avg_logp": i.chosen_avg_logp,
            "final_chosen_avg_logp": f.chosen_avg_logp,
            "initial_rejected_avg_logp": i.rejected_avg_logp,
            "final_rejected_avg_logp": f.rejected_avg_logp,
            "initial_margin": i.margin,
            "final_margin": f.margin,
            "margin_delta": f.margin - i.margin,
            "chosen_delta": f.chosen_avg_logp - i.chosen_avg_logp,
            "final_step": f.step,
        }
    _write_text(out / "report_summary.json", json.dumps(summary, sort_keys=True, indent=1))
    for label, s in summary.items():
        _say(args, f"{label}: chosen {s['initial_chosen_avg_logp']:.4f} -> {s['final_chosen_avg_logp']:.4f}, "
                   f"margin delta {s['margin_delta']:.4f}")
    return EXIT_OK


# entry point ----------------------------------------------------------------

def _exit_code(exc: BaseException) -> int:
    if isinstance(exc, CommandError):
        return exc.code
    if isinstance(exc, ConfigError):
        return EXIT_CONFIG
    if isinstance(exc, TrainingError):
        return EXIT_NAN
    if isinstance(exc, OSError):
        return EXIT_IO
    if isinstance(exc, (InvalidInputError, GenerationError)):
        return EXIT_CONFIG
    return EXIT_FAILURE


def _describe(exc: BaseException) -> str:
    if isinstance(exc, ConfigError) and exc.key:
        return f"config error at {exc.key!r}: {exc}"
    if isinstance(exc, TrainingError):
        return f"training aborted at step {exc.step}: {exc}"
    return str(exc)


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="TOML config file or preset name")
    common.add_argument("--out", help=f"output directory (default: ${OUT_ENV} or ./{DEFAULT_OUT})")
    common.add_argument("--seed", type=int, help="override the config seed")
    common.add_argument("--jobs", type=int, default=1, help="parallel workers for sweep")
    common.add_argument("--quiet", action="store_true", help="suppress console output")

    parser = argparse.ArgumentParser(prog="prefopt", description="Desk-scale preference optimisation lab.")
    sub = parser.add_subparsers(dest="command", required=True)
    sub.add_parser("gen", parents=[common], help="generate a preference dataset")
    sub.add_parser("train", parents=[common], help="train one policy")
    sub.add_parser("sweep", parents=[common], help="run a grid of training runs")
    p = sub.add_parser("gradcheck", parents=[common], help="finite-difference gradient suite")
    p.add_argument("--instances", type=int, default=100, help="random instances per combination")
    p.add_argument("--inject-sign-flip", metavar="OBJECTIVE", help=argparse.SUPPRESS)
    sub.add_parser("micheck", parents=[common], help="mutual-information bound checks")
    p = sub.add_parser("report", parents=[common], help="merge trajectories into plot data")
    p.add_argument("runs", nargs="*", help="run directories containing trajectory.csv")
    return parser


COMMANDS = {
    "gen": cmd_gen, "train": cmd_train, "sweep": cmd_sweep,
    "gradcheck": cmd_gradcheck, "micheck": cmd_micheck, "report": cmd_report,
}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    _setup_logging(args.quiet)
    try:
        return COMMANDS[args.command](args)
    except Exception as exc:
        code = _exit_code(exc)
        print(f"prefopt {args.command}: {_describe(exc)}", file=sys.stderr)
        if code == EXIT_FAILURE:
            log.exception("unexpected failure")
        return code


if __name__ == "__main__":
    sys.exit(main())
