"""Command-line entry points.

Exit codes: 0 success, 2 usage, 3 data/parse, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import hashlib
import logging
import sys
from pathlib import Path

import numpy as np

from . import io as sio
from .asm import EdgeImage, build_shape_model, fit_asm
from .data import Dataset, Trial
from .errors import (
    CorruptFile, InvalidArgument, InvalidConfiguration, InvalidData, NumericFailure, ParseError,
    VersionMismatch,
)
from .harness import (
    Conditioned, EvalReport, make_folds, predict_trial, run_cv, train_model,
)
from .phantom import make_phantom
from .protocol import FRAME_RATE, TASKS
from .synth import (
    MUSCLES, annotation_contours, frame_image, participant_seed, regions_for_frames, simulate_labels,
)

log = logging.getLogger("sonostate")


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- gen-data


def _gen_hash(args) -> str:
    key = f"{args.participants}|{','.join(args.tasks)}|{args.seed}|{args.duration}|{args.frame_stride}|" \
          f"{args.height}|{args.width}"
    return hashlib.sha256(key.encode()).hexdigest()[:16]


def cmd_gen_data(args) -> int:
    if args.participants < 1:
        raise UsageError("--participants must be >= 1")
    for t in args.tasks:
        if t not in TASKS:
            raise UsageError(f"unknown task {t!r}; choose from {', '.join(TASKS)}")
    if args.duration < 10 or args.frame_stride < 1:
        raise UsageError("--duration must be >= 10 and --frame-stride >= 1")
    root = Path(args.out)
    ann = root / "annotations"
    ann.mkdir(parents=True, exist_ok=True)
    for m, cs in annotation_contours(height=args.height, width=args.width).items():
        sio.write_contours(ann / f"{m}.txt", cs)
    for k in range(args.participants):
        ph = make_phantom(participant_seed(args.seed, k), args.height, args.width)
        for task in args.tasks:
            lab = simulate_labels(args.seed, k, task, args.duration)
            tdir = sio.trial_dir(root, k, task)
            (tdir / "frames").mkdir(parents=True, exist_ok=True)
            idx = np.arange(0, len(lab), args.frame_stride)
            for i in idx:
                sio.write_pgm(sio.frame_path(tdir, i), frame_image(ph, lab, i))
            sio.write_labels(tdir / "labels.csv", idx, lab.times[idx], lab.labels[idx])
            log.info("wrote p%02d/t%s (%d frames)", k, task, len(idx))
    sio.write_manifest(root / "manifest.txt", {
        "format": "sonostate-dataset-1", "seed": args.seed, "participants": args.participants,
        "tasks": ",".join(args.tasks), "duration_s": args.duration, "frame_rate_hz": FRAME_RATE,
        "frame_stride": args.frame_stride, "height": args.height, "width": args.width,
        "config_hash": _gen_hash(args),
    })
    return 0


# ---------------------------------------------------------------- dataset loading


def shape_models_from_annotations(root) -> dict:
    ann = Path(root) / "annotations"
    out = {}
    for m in MUSCLES:
        cs = sio.read_contours(ann / f"{m}.txt")
        try:
            out[m] = build_shape_model(cs)
        except InvalidArgument as e:
            raise InvalidData(f"{ann / (m + '.txt')}: {e}") from None
    return out


def load_trial(tdir, participant: str, task: str, models: dict, frame_stride: int = 1,
               seg_every: int = 25) -> Trial:
    frames_no, _, labels = sio.read_labels(Path(tdir) / "labels.csv")
    sel = np.arange(0, len(frames_no), frame_stride)
    frames = [sio.read_pgm(sio.frame_path(tdir, frames_no[i])) for i in sel]
    if not frames:
        raise InvalidData(f"{tdir}: trial has no frames")
    gm, so = regions_for_frames(frames, models, seg_every)
    return Trial(participant, task, gm, so, labels[sel], frames_no[sel])


def load_dataset(root, models: dict, frame_stride: int = 1, seg_every: int = 25,
                 participants=None) -> Dataset:
    ds = Dataset()
    found = sio.list_trials(root)
    if not found:
        raise InvalidData(f"{root}: no trials found")
    for pid, task, tdir in found:
        if participants is not None and pid not in participants:
            continue
        ds.add(load_trial(tdir, pid, task, models, frame_stride, seg_every))
        log.info("loaded %s/%s", pid, task)
    if participants is not None:
        missing = sorted(set(participants) - set(ds.participants))
        if missing:
            raise InvalidData(f"{root}: participants not found: {missing}")
    return ds


# ---------------------------------------------------------------- train / eval / predict


def _write_reports(prefix: Path, report: EvalReport, config_hash: str) -> None:
    head = f"# config_hash={config_hash}\n"
    Path(f"{prefix}_summary.tsv").write_text(head + report.summary_table())
    Path(f"{prefix}_detail.tsv").write_text(head + report.detail_table())


def cmd_train(args) -> int:
    cfg = sio.RunConfig.load(args.config)
    tc = cfg.train_config()
    chash = cfg.hash()
    if args.dry_run:
        print(f"config ok (hash {chash})")
        return 0
    if not cfg.data or not cfg.out:
        raise UsageError("config needs data and out paths")
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    models = shape_models_from_annotations(cfg.data)
    ds = load_dataset(cfg.data, models, cfg.frame_stride, cfg.seg_every)
    meta = {"config_hash": chash, "symmetric_eval": str(cfg.symmetric_eval).lower()}
    if cfg.mode == "fit":
        trials = [t for p in ds.participants for t in ds.of(p)]
        cond = Conditioned(ds, tc.augment.lcn_window)
        params, *_ = train_model(tc, trials, cond, training_ids=ds.participants)
        sio.save_model(out / "model.sono", sio.ModelContainer(params, models, {**meta, "mode": "fit"}))
        preds = [predict_trial(params, t, cond, symmetric=cfg.symmetric_eval) for t in trials]
        report = EvalReport.from_predictions(preds)
    else:
        try:
            folds = make_folds(ds.participants, cfg.fold_pairs())
        except InvalidConfiguration as e:
            raise UsageError(str(e)) from None

        def save(res):
            f = res.fold
            for role, params in (("test", res.test_model), ("validation", res.validation_model)):
                m = {**meta, "mode": "cv", "fold": f.index, "role": role, "test": f.test,
                     "validation": f.validation, "training": ",".join(f.training)}
                sio.save_model(out / f"fold{f.index:02d}_{role}.sono", sio.ModelContainer(params, models, m))

        report = run_cv(ds, folds, tc, on_fold=save).report
    _write_reports(out / "report", report, chash)
    sys.stdout.write(report.summary_table())
    return 0


def _file_hash(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()[:16]


def _symmetric(container) -> bool:
    return container.meta.get("symmetric_eval", "false") == "true"


def _load_container(path):
    c = sio.load_model(path)
    if c.params is None:
        raise InvalidData(f"{path}: container holds no network parameters")
    if c.params.label_std is None:
        raise InvalidData(f"{path}: container holds no label normalization constants")
    if set(c.shape_models) != set(MUSCLES):
        raise InvalidData(f"{path}: container lacks shape models for {MUSCLES}")
    return c


def cmd_eval(args) -> int:
    c = _load_container(args.model)
    if args.config:
        cfg = sio.RunConfig.load(args.config)
        sio.check_architecture(c.params, cfg.network())
    parts = args.participants.split(",") if args.participants else None
    ds = load_dataset(args.data, c.shape_models, args.frame_stride, args.seg_every, parts)
    cond = Conditioned(ds)
    sym = _symmetric(c)
    preds = [predict_trial(c.params, t, cond, symmetric=sym) for p in ds.participants for t in ds.of(p)]
    report = EvalReport.from_predictions(preds)
    if args.out:
        _write_reports(Path(args.out), report, c.meta.get("config_hash", "unknown"))
    sys.stdout.write(report.summary_table())
    return 0


def cmd_predict(args) -> int:
    c = _load_container(args.model)
    tdir = Path(args.trial)
    trial = load_trial(tdir, tdir.parent.name, tdir.name.lstrip("t"), c.shape_models, args.frame_stride,
                       args.seg_every)
    if not 0 <= args.ref < len(trial):
        raise UsageError(f"--ref must index a loaded frame (0..{len(trial) - 1})")
    if args.ref_label:
        vals = [float(x) for x in args.ref_label.split(",")]
        if len(vals) != 4:
            raise UsageError("--ref-label needs 4 comma-separated values")
        trial.labels[args.ref] = vals
    ds = Dataset()
    ds.add(trial)
    pred = predict_trial(c.params, trial, Conditioned(ds), ref_index=args.ref, symmetric=_symmetric(c))
    tag = f"config_hash={c.meta.get('config_hash', 'unknown')} model_sha={_file_hash(args.model)} ref={args.ref}"
    sio.write_labels(args.out, pred.frames, pred.frames / FRAME_RATE, pred.pred, comment=tag)
    return 0


def cmd_segment(args) -> int:
    c = sio.load_model(args.model)
    if args.muscle not in c.shape_models:
        raise InvalidData(f"{args.model}: no shape model for {args.muscle}")
    model = c.shape_models[args.muscle]
    files = sorted(Path(args.images).glob("*.pgm"))
    if not files:
        raise InvalidData(f"{args.images}: no .pgm images")
    contours = []
    for f in files:
        img = sio.read_pgm(f)
        contours.append(fit_asm(img, model, init=args.init, edges=EdgeImage(img)).contour)
    tag = f"model_sha={_file_hash(args.model)} muscle={args.muscle} init={args.init}"
    sio.write_contours(args.out, contours, comment=tag)
    return 0


# ---------------------------------------------------------------- entry point


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="sonostate", description=__doc__.splitlines()[0])
    ap.add_argument("-v", "--verbose", action="store_true")
    sub = ap.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen-data", help="render a synthetic phantom cohort to disk")
    g.add_argument("--participants", type=int, required=True)
    g.add_argument("--tasks", type=lambda s: s.split(","), default=list(TASKS))
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--out", required=True)
    g.add_argument("--duration", type=float, default=190.0)
    g.add_argument("--frame-stride", type=int, default=1)
    g.add_argument("--height", type=int, default=480)
    g.add_argument("--width", type=int, default=640)
    g.set_defaults(func=cmd_gen_data)

    s = sub.add_parser("segment", help="fit the active shape model to every image in a directory")
    s.add_argument("--model", required=True)
    s.add_argument("--images", required=True)
    s.add_argument("--out", required=True)
    s.add_argument("--muscle", choices=MUSCLES, default="gm")
    s.add_argument("--init", choices=("center", "pose"), default="center")
    s.set_defaults(func=cmd_segment)

    t = sub.add_parser("train", help="train per a run configuration")
    t.add_argument("--config", required=True)
    t.add_argument("--dry-run", action="store_true")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on dataset participants")
    e.add_argument("--model", required=True)
    e.add_argument("--data", required=True)
    e.add_argument("--participants", default="")
    e.add_argument("--config", default="")
    e.add_argument("--frame-stride", type=int, default=1)
    e.add_argument("--seg-every", type=int, default=25)
    e.add_argument("--out", default="")
    e.set_defaults(func=cmd_eval)

    p = sub.add_parser("predict", help="absolute per-frame labels for one trial")
    p.add_argument("--model", required=True)
    p.add_argument("--trial", required=True)
    p.add_argument("--ref", type=int, default=0)
    p.add_argument("--ref-label", default="")
    p.add_argument("--frame-stride", type=int, default=1)
    p.add_argument("--seg-every", type=int, default=25)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_predict)
    return ap


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (UsageError, InvalidArgument, InvalidConfiguration) as e:
        print(f"sonostate: usage error: {e}", file=sys.stderr)
        return 2
    except (ParseError, InvalidData, CorruptFile, VersionMismatch) as e:
        print(f"sonostate: {e}", file=sys.stderr)
        return 3
    except OSError as e:
        print(f"sonostate: I/O error: {e}", file=sys.stderr)
        return 3
    except NumericFailure as e:
        print(f"sonostate: numeric failure: {e}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
