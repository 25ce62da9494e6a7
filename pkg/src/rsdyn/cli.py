"""Command-line pipeline: synth, train, baseline, score, stats, regional, gradcheck.

Every run writes ``run.json`` with the resolved configuration; ``replay``
re-executes a recorded run. Exit codes: 0 success, 1 usage error, 2 data error
(including a failing gradient check).
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from dataclasses import asdict
from pathlib import Path

import numpy as np

from . import __version__
from .data import (SynthConfig, TensorFileError, extract_axial_clips, load_cohort, preprocess,
                   save_volume, segment_windows, synth_cohort, write_manifest, write_tensor,
                   read_tensor, read_manifest)
from .models import ModelSpec, SpecError, WeightsFileError, build, load_weights, save_weights
from .optim import TrainConfig, evaluate, train
from .scorers import BaselineScorer, NetworkScorer
from . import stats

log = logging.getLogger("rsdyn")

THREADS_ENV = "RSDYN_THREADS"
MODEL_KINDS = {"recurrent_unet": "recurrent_unet", "unet2d": "unet2d",
               "autoencoder": "recurrent_autoencoder"}
DATA_ERRORS = (ValueError, OSError, KeyError, TensorFileError, WeightsFileError, SpecError)


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}\n{self.format_usage()}")


def _int_tuple(s: str) -> tuple:
    try:
        return tuple(int(v) for v in s.split(","))
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {s!r}") from None


def _manifest_path(data: str) -> Path:
    p = Path(data)
    if p.is_dir():
        p = p / "manifest.csv"
    if not p.is_file():
        raise FileNotFoundError(f"no cohort manifest at {p}")
    return p


def _load(data: str, groups=None, raw: bool = False):
    vols = load_cohort(_manifest_path(data), groups)
    if not vols:
        raise ValueError(f"{data}: no subjects in groups {groups}")
    return vols if raw else [preprocess(v) for v in vols]


def _require_file(path: str, what: str):
    if not Path(path).is_file():
        raise FileNotFoundError(f"{what} not found: {path}")


# -- subcommands -------------------------------------------------------------

def cmd_synth(a, out: Path) -> None:
    cfg = SynthConfig(n_control=a.controls, n_patient=a.patients, X=a.x, Y=a.y, Z=a.z, N=a.frames,
                      seed=a.seed, anomaly_strength=a.anomaly_strength)
    rows = [save_volume(v, out) for v in synth_cohort(cfg)]
    write_manifest(out / "manifest.csv", rows)


def _spec_from_args(a) -> ModelSpec:
    spec = ModelSpec(kind=MODEL_KINDS[a.model], levels=len(a.channels), channels=a.channels,
                     bottleneck=a.bottleneck, skip_mode=a.skip_mode, skips=not a.no_skips,
                     activation=a.activation, output_activation=a.output_activation, T=a.t)
    spec.validate()
    return spec


def cmd_train(a, out: Path) -> None:
    spec = _spec_from_args(a)
    vols = _load(a.data, set(a.train_groups.split(",")))
    clips = [c for v in vols for c in extract_axial_clips(v, segment_windows(v, spec.T), spec.levels)]
    if not clips:
        raise ValueError(f"no {spec.T + 1}-frame training clips in {a.data}")
    cfg = TrainConfig(epochs=a.epochs, batch_size=a.batch, val_fraction=a.val_split, seed=a.seed,
                      lr=a.lr)
    net, hist = train(build(spec, a.seed), clips, cfg)
    save_weights(net, out / "weights.vxw")
    hist.to_csv(out / "history.csv")


def _scorer(a):
    if getattr(a, "weights", None):
        net = load_weights(a.weights)
        if a.t is not None and a.t != net.spec.T:
            if net.spec.kind == "unet2d":
                raise ValueError(f"unet2d weights are tied to T={net.spec.T}")
            net = net.with_T(a.t)
        return NetworkScorer(net)
    return BaselineScorer(a.method, a.t if a.t is not None else 20)


def _write_scores(out: Path, scorer, vols) -> list:
    scores = [stats.score_subject(scorer, v) for v in vols]
    stats.write_scores_csv(out / "scores.csv", scores)
    with open(out / "frame_errors.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["subject_id", "frame", "error"])
        for s in scores:
            for f, e in zip(s.frame_indices, s.per_frame_error):
                w.writerow([s.subject_id, int(f), repr(float(e))])
    vdir = out / "voxel_errors"
    vdir.mkdir(exist_ok=True)
    for s in scores:
        write_tensor(vdir / f"{s.subject_id}.vxt", s.per_voxel_error)
    # clip-level prediction quality over every subject
    clips = [c for v in vols for c in extract_axial_clips(
        v, segment_windows(v.n_frames, scorer.T, scorer.window_length), getattr(scorer, "levels", 0))]
    mse, r = evaluate(scorer, clips)
    with open(out / "metrics.json", "w") as fh:
        json.dump({"scorer": scorer.name, "T": scorer.T, "mse": mse, "pearson_r": r,
                   "n_subjects": len(scores), "n_clips": len(clips)}, fh, indent=2, sort_keys=True)
        fh.write("\n")
    return scores


def cmd_baseline(a, out: Path) -> None:
    _write_scores(out, _scorer(a), _load(a.data))


def cmd_score(a, out: Path) -> None:
    _require_file(a.weights, "weights file")
    _write_scores(out, _scorer(a), _load(a.data))


def _read_frame_errors(path) -> dict:
    per = {}
    with open(path, newline="") as fh:
        for lineno, row in enumerate(csv.DictReader(fh), start=2):
            try:
                per.setdefault(row["subject_id"], []).append((int(row["frame"]), float(row["error"])))
            except (KeyError, ValueError, TypeError) as exc:
                raise ValueError(f"{path}: bad row at line {lineno}: {exc}") from None
    return per


def cmd_stats(a, out: Path) -> None:
    _require_file(a.scores, "scores file")
    rows = stats.read_scores_csv(a.scores)
    report = stats.group_report([g for _, g, _ in rows], [v for _, _, v in rows],
                                equal_var=not a.welch)
    extra = {}
    if a.motion_data:
        frame_errors = _read_frame_errors(Path(a.scores).parent / "frame_errors.csv")
        vols = {v.subject_id: v for v in _load(a.motion_data, raw=True)}
        scores = []
        for sid, group, mean in rows:
            fe = frame_errors[sid]
            scores.append(stats.SubjectScore(sid, group, mean, np.array([e for _, e in fe]),
                                             np.array([f for f, _ in fe]), None, None, 0))
        m = stats.motion_correlation(scores, [vols[s.subject_id] for s in scores])
        extra["motion"] = asdict(m)
    stats.write_report_json(out / "report.json", report, extra)


def cmd_regional(a, out: Path) -> None:
    score_dir = Path(a.scores).parent
    _require_file(a.scores, "scores file")
    rows = stats.read_scores_csv(a.scores)
    manifest = {r["subject_id"]: r for r in read_manifest(_manifest_path(a.data))}
    vols = {v.subject_id: v for v in _load(a.data, raw=True)}
    scores = []
    for sid, group, mean in rows:
        if sid not in manifest:
            raise KeyError(f"subject {sid} is missing from the cohort manifest")
        vox = read_tensor(score_dir / "voxel_errors" / f"{sid}.vxt", "float64")
        scores.append(stats.SubjectScore(sid, group, mean, None, None, vox, None, 0))
    ref = vols[rows[0][0]]
    if ref.atlas is None:
        raise ValueError(f"{ref.subject_id}: regional analysis needs an atlas")
    for v in vols.values():
        if v.atlas is None or not np.array_equal(v.atlas, ref.atlas) or not np.array_equal(v.mask, ref.mask):
            raise ValueError(f"{v.subject_id}: atlas/mask differs from {ref.subject_id}; "
                             "regional analysis needs a shared template")
    result = stats.regional_analysis(scores, ref.atlas, ref.mask, a.fdr_q, equal_var=not a.welch)
    stats.write_regional_csv(out / "regional.csv", result)
    report = stats.group_report([s.group for s in scores], [s.mean_error for s in scores],
                                equal_var=not a.welch)
    report.regional = result
    stats.write_report_json(out / "report.json", report, {"fdr_q": a.fdr_q})


def cmd_gradcheck(a, out: Path) -> int:
    from .gradcheck import run_suite

    results, seconds = run_suite(seed=a.seed, tolerance=a.tolerance, max_entries=a.max_entries)
    with open(out / "gradcheck.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["check", "max_rel_error", "n_checked", "passed"])
        for r in results:
            w.writerow([r.name, repr(r.max_rel_error), r.n_checked, int(r.passed)])
    failed = [r.name for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} gradient checks passed in {seconds:.1f} s")
    for name in failed:
        print(f"FAILED {name}")
    return 2 if failed else 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "baseline": cmd_baseline, "score": cmd_score,
            "stats": cmd_stats, "regional": cmd_regional, "gradcheck": cmd_gradcheck}


# -- parser ------------------------------------------------------------------

def build_parser() -> _Parser:
    p = _Parser(prog="rsdyn", description=__doc__.splitlines()[0])
    p.add_argument("--threads", type=int, default=None,
                   help=f"BLAS threads (default: ${THREADS_ENV} or 1)")
    p.add_argument("--log-level", default="WARNING", choices=["DEBUG", "INFO", "WARNING", "ERROR"])
    p.add_argument("--version", action="version", version=f"rsdyn {__version__}")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="generate a synthetic cohort")
    s.add_argument("--out", required=True)
    s.add_argument("--controls", type=int, default=8)
    s.add_argument("--patients", type=int, default=8)
    s.add_argument("--seed", type=int, default=0)
    s.add_argument("--x", type=int, default=16)
    s.add_argument("--y", type=int, default=16)
    s.add_argument("--z", type=int, default=4)
    s.add_argument("--frames", type=int, default=64)
    s.add_argument("--anomaly-strength", type=float, default=1.0)

    t = sub.add_parser("train", help="train a network on control subjects")
    t.add_argument("--model", required=True, choices=sorted(MODEL_KINDS))
    t.add_argument("--data", required=True)
    t.add_argument("--out", required=True)
    t.add_argument("--t", type=int, default=20)
    t.add_argument("--epochs", type=int, default=150)
    t.add_argument("--batch", type=int, default=32)
    t.add_argument("--lr", type=float, default=1e-4)
    t.add_argument("--val-split", type=float, default=0.1)
    t.add_argument("--seed", type=int, default=0)
    t.add_argument("--channels", type=_int_tuple, default=(16, 32))
    t.add_argument("--bottleneck", type=int, default=64)
    t.add_argument("--skip-mode", default="convlstm_last", choices=["convlstm_last", "last_frame"])
    t.add_argument("--no-skips", action="store_true")
    t.add_argument("--activation", default="relu", choices=["relu", "tanh", "sigmoid", "linear"])
    t.add_argument("--output-activation", default="linear", choices=["linear", "sigmoid"])
    t.add_argument("--train-groups", default="control")

    b = sub.add_parser("baseline", help="score subjects with a non-learned estimator")
    b.add_argument("--method", required=True, choices=["copy", "extrapolate", "interpolate"])
    b.add_argument("--data", required=True)
    b.add_argument("--out", required=True)
    b.add_argument("--t", type=int, default=20)

    c = sub.add_parser("score", help="score subjects with trained weights")
    c.add_argument("--weights", required=True)
    c.add_argument("--data", required=True)
    c.add_argument("--out", required=True)
    c.add_argument("--t", type=int, default=None, help="override sequence length (recurrent models)")

    st = sub.add_parser("stats", help="AUC and t-test from scores.csv")
    st.add_argument("--scores", required=True)
    st.add_argument("--out", required=True)
    st.add_argument("--welch", action="store_true")
    st.add_argument("--motion-data", default=None,
                    help="cohort whose fd series are correlated with frame_errors.csv")

    r = sub.add_parser("regional", help="per-region t-tests with BH-FDR")
    r.add_argument("--scores", required=True)
    r.add_argument("--data", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--fdr-q", type=float, default=0.05)
    r.add_argument("--welch", action="store_true")

    g = sub.add_parser("gradcheck", help="run the finite-difference gradient suite")
    g.add_argument("--out", required=True)
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--tolerance", type=float, default=1e-4)
    g.add_argument("--max-entries", type=int, default=24)

    rp = sub.add_parser("replay", help="re-run a recorded run.json")
    rp.add_argument("run_json")
    rp.add_argument("--out", default=None, help="output directory (default: the recorded one)")
    return p


def _command_keys(parser: _Parser, command: str) -> set:
    sub = next(a for a in parser._actions if isinstance(a, argparse._SubParsersAction))
    return {a.dest for a in sub.choices[command]._actions if a.dest != "help"}


def _json_ready(v):
    return list(v) if isinstance(v, tuple) else v


def _validate_inputs(config: dict) -> None:
    """Check every input path up front so a bad call leaves no partial output."""
    if config.get("data"):
        _manifest_path(config["data"])
    if config.get("motion_data"):
        _manifest_path(config["motion_data"])
    if config.get("weights"):
        _require_file(config["weights"], "weights file")
    if config.get("scores"):
        _require_file(config["scores"], "scores file")


def _run(parser, command: str, config: dict, threads: int) -> int:
    _validate_inputs(config)
    out = Path(config["out"])
    out.mkdir(parents=True, exist_ok=True)
    record = {"command": command, "config": {k: _json_ready(v) for k, v in sorted(config.items())},
              "threads": threads, "version": __version__}
    with open(out / "run.json", "w") as fh:
        json.dump(record, fh, indent=2, sort_keys=True)
        fh.write("\n")
    ns = argparse.Namespace(**config)
    from threadpoolctl import threadpool_limits
    with threadpool_limits(limits=threads):
        rc = COMMANDS[command](ns, out)
    return rc or 0


def _load_run(parser, path: str, out: str | None) -> tuple[str, dict]:
    with open(path) as fh:
        try:
            record = json.load(fh)
        except json.JSONDecodeError as exc:
            raise ValueError(f"{path}: not valid JSON: {exc}") from None
    unknown = set(record) - {"command", "config", "threads", "version"}
    if unknown:
        raise ValueError(f"{path}: unknown keys {sorted(unknown)}")
    command = record.get("command")
    if command not in COMMANDS:
        raise ValueError(f"{path}: unknown command {command!r}")
    config = dict(record.get("config", {}))
    keys = _command_keys(parser, command)
    unknown = set(config) - keys
    missing = keys - set(config)
    if unknown or missing:
        raise ValueError(f"{path}: config keys do not match '{command}' "
                         f"(unknown {sorted(unknown)}, missing {sorted(missing)})")
    if "channels" in config:
        config["channels"] = tuple(config["channels"])
    if out is not None:
        config["out"] = out
    return command, config


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    logging.basicConfig(level=args.log_level, format="%(levelname)s %(name)s: %(message)s")
    try:
        threads = args.threads if args.threads is not None else int(os.environ.get(THREADS_ENV, "1"))
    except ValueError:
        print(f"rsdyn: ${THREADS_ENV} must be an integer", file=sys.stderr)
        return 1
    if threads < 1:
        print(f"rsdyn: --threads must be >= 1, got {threads}", file=sys.stderr)
        return 1
    try:
        if args.command == "replay":
            command, config = _load_run(parser, args.run_json, args.out)
        else:
            config = {k: v for k, v in vars(args).items()
                      if k not in ("threads", "log_level", "command")}
            command = args.command
        return _run(parser, command, config, threads)
    except DATA_ERRORS as exc:
        print(f"rsdyn {args.command}: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
