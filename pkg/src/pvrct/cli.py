"""``pvrct`` command line: synth, preprocess, split, pretrain, train,
evaluate, explain, matrix.

Every command takes ``--config file.json`` plus ``--set key=value``
overrides, ``--seed``, ``--profile desk|paper`` and ``--jobs``, and writes
only below ``--out``. Failures print one line to stderr,
``ERROR <code>: <field-path>: <message>``, and exit with 1 (config or
validation), 2 (I/O) or 3 (numeric failure).
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import sys
from contextlib import nullcontext
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import config as cfgmod
from .errors import (
    CheckpointError,
    ConfigError,
    InvariantError,
    MissingClassError,
    NumericError,
    PvrError,
    VolumeFormatError,
)
from .explain import export_overlay, gradcam3d
from .models import ModelConfig, checkpoint_paths, build_model, load_checkpoint, read_checkpoint, save_checkpoint
from .preprocess import map_mask_to_grid, preprocess_pipeline
from .synthgen import dataset_specs, desk_spec, paper_spec, pretext_specs, write_phantoms
from .trainer import (
    STANDARD_STRATEGIES,
    comparison_csv,
    comparison_text,
    evaluate,
    load_dataset,
    loss_trace_csv,
    predict_proba,
    pretext_targets,
    pretrain_pretext,
    run_experiment_matrix,
    stratified_split,
    train,
)
from .volume_io import (
    DatasetManifest,
    MaskVolume,
    PatientRecord,
    read_manifest,
    read_mask,
    read_volume,
    volume_paths,
    write_manifest,
    write_volume,
)

EXIT_CONFIG, EXIT_IO, EXIT_NUMERIC = 1, 2, 3

log = logging.getLogger("pvrct")


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)
    return path


def _json(obj):
    return json.dumps(obj, indent=2, sort_keys=True) + "\n"


def _template(cfg):
    return desk_spec() if cfg.profile == "desk" else paper_spec()


def _manifest(args, cfg, attr="manifest", fallback=None):
    path = getattr(args, attr, None) or fallback
    if not path:
        raise ConfigError(attr, "a manifest path is required")
    return read_manifest(path)


# -- commands ----------------------------------------------------------------

def cmd_synth(args, cfg, out: Path):
    seed = args.seed if args.seed is not None else 0
    if args.pretext:
        n = args.n or cfg.synth.pretext_n
        specs = pretext_specs(n, _template(cfg), seed)
    else:
        n = args.n or cfg.synth.n
        frac = args.positive_fraction if args.positive_fraction is not None else cfg.synth.positive_fraction
        if not 0 < frac < 1:
            raise ConfigError("synth.positive_fraction", "must lie in (0, 1)")
        specs = dataset_specs(n, frac, _template(cfg), seed)
    m = write_phantoms(specs, out)
    log.info("wrote %d phantoms (%d positive) to %s", len(m), int(m.labels.sum()), out)


def cmd_preprocess(args, cfg, out: Path):
    m = _manifest(args, cfg, fallback=_data_manifest(cfg))
    records = []
    for r in m.records:
        vol = read_volume(m.resolve(r.volume_path))
        masks = None
        if args.mask_crop:
            if not r.mask_paths:
                raise VolumeFormatError(f"{r.patient_id}: no masks listed", field="heart_mask")
            masks = [read_mask(m.resolve(p)) for p in r.mask_paths]
        grid = preprocess_pipeline(vol, cfg.preprocess, masks)
        write_volume(grid, out / "volumes" / r.patient_id)
        mask_rel = {}
        for col, rel in (("heart_mask_path", r.heart_mask_path), ("aorta_mask_path", r.aorta_mask_path)):
            if rel:
                mapped = map_mask_to_grid(read_mask(m.resolve(rel)), cfg.preprocess, masks)
                name = f"{r.patient_id}_{col.split('_')[0]}"
                write_volume(MaskVolume.from_bool(mapped, grid.spacing), out / "volumes" / name)
                mask_rel[col] = f"volumes/{name}.mvol.json"
        records.append(PatientRecord(r.patient_id, f"volumes/{r.patient_id}.mvol.json",
                                     mask_rel.get("heart_mask_path"), mask_rel.get("aorta_mask_path"), r.label))
    write_manifest(DatasetManifest(records, out), out / "manifest.csv")
    _write(out / "preprocess_config.json", _json(cfg.preprocess.to_dict()))


def cmd_split(args, cfg, out: Path):
    m = _manifest(args, cfg, fallback=_data_manifest(cfg))
    split = replace(cfg.split, seed=args.seed) if args.seed is not None else cfg.split
    tr, te = stratified_split(m, split)
    write_manifest(tr.relocated(out), out / "train.csv")
    write_manifest(te.relocated(out), out / "test.csv")
    summary = {
        "seed": split.seed,
        "train_fraction": split.train_fraction,
        "train": {"n": len(tr), "positives": int(tr.labels.sum())},
        "test": {"n": len(te), "positives": int(te.labels.sum())},
    }
    _write(out / "split.json", _json(summary))


def _seeds(args, cfg):
    return [args.seed] if args.seed is not None else list(cfg.train.seeds)


def cmd_pretrain(args, cfg, out: Path):
    m = _manifest(args, cfg, fallback=_pretext_manifest(cfg))
    targets = pretext_targets(m)
    data = load_dataset(m, cfg.preprocess, targets=targets, jobs=args.jobs)
    mc = replace(cfg.model, head="regressor_scalar")
    seed = _seeds(args, cfg)[0]
    model = build_model(mc, seed)
    res = pretrain_pretext(model, data, cfg.train, seed=seed, epochs=cfg.pretrain.epochs)
    save_checkpoint(model, out / "pretext", task="pretext")
    _write(out / "loss_trace.csv", loss_trace_csv(res.loss_trace))


def _strategy_policy(cfg, ckpt):
    if ckpt is None:
        return cfg.train
    if cfg.train.fine_tune_policy == "scratch":
        return replace(cfg.train, fine_tune_policy="full_ft")
    return cfg.train


def cmd_train(args, cfg, out: Path):
    m = _manifest(args, cfg)
    data = load_dataset(m, cfg.preprocess, use_masks=args.mask_crop, jobs=args.jobs)
    ckpt = args.ckpt or cfg.train.pretrain_checkpoint
    tcfg = _strategy_policy(cfg, ckpt)
    summary = []
    for seed in _seeds(args, cfg):
        model = build_model(cfg.model, seed)
        if ckpt:
            load_checkpoint(model, ckpt, policy="backbone_only")
        res = train(model, data, tcfg, seed=seed)
        save_checkpoint(model, out / f"model_seed{seed}", task="classification")
        _write(out / f"loss_trace_seed{seed}.csv", loss_trace_csv(res.loss_trace))
        _write(out / f"train_confusion_seed{seed}.csv", res.train_confusion.to_csv())
        summary.append({
            "seed": seed,
            "final_loss": res.loss_trace[-1],
            "train_confusion": res.train_confusion.to_dict(),
            "train_report": res.train_report.to_dict() if res.train_report else None,
        })
    _write(out / "train_report.json", _json({
        "fine_tune_policy": tcfg.fine_tune_policy,
        "pretrained": bool(ckpt),
        "epochs": tcfg.max_epochs,
        "seeds": summary,
    }))


def _model_from_checkpoint(path):
    meta, _ = read_checkpoint(path)
    mc = ModelConfig.from_dict(meta["model_config"])
    model = build_model(mc, 0)
    load_checkpoint(model, path, policy="full")
    return model, meta


def cmd_evaluate(args, cfg, out: Path):
    if not args.ckpt:
        raise ConfigError("ckpt", "--ckpt is required")
    m = _manifest(args, cfg)
    model, _ = _model_from_checkpoint(args.ckpt)
    data = load_dataset(m, cfg.preprocess, use_masks=args.mask_crop, jobs=args.jobs)
    if tuple(data.X.shape[2:]) != tuple(model.config.input_shape):
        raise VolumeFormatError(f"data grid {data.X.shape[2:]} vs model input {model.config.input_shape}",
                                field="preprocess.target_shape")
    rep, cm = evaluate(model, data, batch_size=cfg.train.batch_size)
    _write(out / "metric_report.json", rep.to_json())
    _write(out / "confusion.csv", cm.to_csv())
    probs = predict_proba(model, data.X, cfg.train.batch_size)
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["patient_id", "label", "probability", "decision"])
    for pid, y, p in zip(data.ids, data.y.astype(int), probs):
        w.writerow([pid, y, f"{p:.8f}", int(p >= 0.5)])
    _write(out / "predictions.csv", buf.getvalue())


def cmd_explain(args, cfg, out: Path):
    if not args.ckpt or not args.volume:
        raise ConfigError("volume" if not args.volume else "ckpt", "--volume and --ckpt are required")
    model, _ = _model_from_checkpoint(args.ckpt)
    vol = read_volume(args.volume)
    if vol.unit == "HU":
        vol = preprocess_pipeline(vol, cfg.preprocess)
    if tuple(vol.shape) != tuple(model.config.input_shape):
        raise VolumeFormatError(f"volume grid {vol.shape} vs model input {model.config.input_shape}", field="shape")
    layer = args.layer or cfg.explain.layer
    try:
        heat = gradcam3d(model, vol, layer)
    except KeyError as exc:
        raise ConfigError("explain.layer", exc.args[0]) from None
    except ValueError as exc:
        raise ConfigError("explain.layer", str(exc)) from None
    export_overlay(vol, heat, out, cfg.explain.slice_stride)
    _write(out / "explain.json", _json({
        "layer": heat.source_layer,
        "layer_map_shape": list(heat.layer_map.shape),
        "logit": heat.logit,
        "probability": float(1.0 / (1.0 + np.exp(-heat.logit))),
    }))


def cmd_matrix(args, cfg, out: Path):
    m = _manifest(args, cfg, fallback=_data_manifest(cfg))
    seeds = _seeds(args, cfg)
    strategies = STANDARD_STRATEGIES
    ckpt = args.ckpt or cfg.train.pretrain_checkpoint
    if ckpt is None and any(s.pretrain for s in strategies):
        pre_manifest = _pretext_manifest(cfg)
        if pre_manifest is None:
            # no pretext data given: synthesize it inside the out directory
            pre_dir = out / "pretext_data"
            pm = write_phantoms(pretext_specs(cfg.synth.pretext_n, _template(cfg), cfg.split.seed), pre_dir)
        else:
            pm = read_manifest(pre_manifest)
        pdata = load_dataset(pm, cfg.preprocess, targets=pretext_targets(pm), jobs=args.jobs)
        pmodel = build_model(replace(cfg.model, head="regressor_scalar"), cfg.split.seed)
        res = pretrain_pretext(pmodel, pdata, cfg.train, seed=cfg.split.seed, epochs=cfg.pretrain.epochs)
        ckpt = save_checkpoint(pmodel, out / "pretext", task="pretext")
        _write(out / "pretext_loss_trace.csv", loss_trace_csv(res.loss_trace))
    reports = run_experiment_matrix(m, strategies, seeds, cfg.model, cfg.train, cfg.preprocess,
                                    cfg.split, pretrain_checkpoint=ckpt, jobs=args.jobs)
    for r in reports:
        d = out / "runs" / r.strategy
        _write(d / "run_report.json", r.to_json())
        for s in r.per_seed:
            _write(d / f"loss_trace_seed{s.seed}.csv", loss_trace_csv(s.loss_trace))
            _write(d / f"test_confusion_seed{s.seed}.csv", s.test_confusion.to_csv())
            _write(d / f"train_confusion_seed{s.seed}.csv", s.train_confusion.to_csv())
    _write(out / "comparison.csv", comparison_csv(reports))
    _write(out / "comparison.txt", comparison_text(reports))


def _data_manifest(cfg):
    d = cfg.paths.data_dir
    return str(Path(d) / "manifest.csv") if d else None


def _pretext_manifest(cfg):
    d = cfg.paths.pretext_dir
    return str(Path(d) / "manifest.csv") if d else None


COMMANDS = {
    "synth": cmd_synth,
    "preprocess": cmd_preprocess,
    "split": cmd_split,
    "pretrain": cmd_pretrain,
    "train": cmd_train,
    "evaluate": cmd_evaluate,
    "explain": cmd_explain,
    "matrix": cmd_matrix,
}


# -- argument parsing --------------------------------------------------------

def build_parser():
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="JSON config file")
    common.add_argument("--set", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config field, e.g. train.learning_rate=3e-4")
    common.add_argument("--seed", type=int, default=None)
    common.add_argument("--profile", choices=cfgmod.PROFILES, default=None,
                        help="desk (32^3, default) or paper (256^3)")
    common.add_argument("--jobs", type=int, default=1, help="worker threads (1 = fully deterministic)")
    common.add_argument("--out", required=True, help="output directory")
    common.add_argument("-v", "--verbose", action="store_true")

    p = argparse.ArgumentParser(prog="pvrct", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", parents=[common], help="generate phantoms and a manifest")
    s.add_argument("--n", type=int)
    s.add_argument("--positive-fraction", type=float)
    s.add_argument("--pretext", action="store_true", help="non-contrast calcium-burden phantoms")

    s = sub.add_parser("preprocess", parents=[common], help="write fixed-grid normalized volumes")
    s.add_argument("--manifest")
    s.add_argument("--mask-crop", action="store_true")

    s = sub.add_parser("split", parents=[common], help="stratified train/test manifests")
    s.add_argument("--manifest")

    s = sub.add_parser("pretrain", parents=[common], help="calcium-burden regression pretraining")
    s.add_argument("--manifest")

    s = sub.add_parser("train", parents=[common], help="train classifiers (one per seed)")
    s.add_argument("--manifest", required=True)
    s.add_argument("--ckpt", help="pretext checkpoint, loaded backbone-only")
    s.add_argument("--mask-crop", action="store_true")

    s = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on a manifest")
    s.add_argument("--manifest", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--mask-crop", action="store_true")

    s = sub.add_parser("explain", parents=[common], help="3D Grad-CAM for one volume")
    s.add_argument("--volume", required=True)
    s.add_argument("--ckpt", required=True)
    s.add_argument("--layer")

    s = sub.add_parser("matrix", parents=[common], help="strategy x seed comparison table")
    s.add_argument("--manifest")
    s.add_argument("--ckpt", help="reuse an existing pretext checkpoint")
    return p


class _MissingInput(FileNotFoundError):
    def __init__(self, field, path):
        super().__init__(f"file not found: {path}")
        self.field = field


def _check_inputs(args):
    """Fail early, naming the flag, when an input path does not exist."""
    checks = {
        "config": lambda p: Path(p),
        "manifest": lambda p: Path(p),
        "ckpt": lambda p: checkpoint_paths(p)[0],
        "volume": lambda p: volume_paths(p)[0],
    }
    for name, resolve in checks.items():
        value = getattr(args, name, None)
        if value and not resolve(value).exists():
            raise _MissingInput(name, resolve(value))


def _fail(code, field, message):
    msg = " ".join(str(message).split())
    print(f"ERROR {code}: {field or '-'}: {msg}", file=sys.stderr)
    return code


def _thread_limit(jobs):
    try:
        from threadpoolctl import threadpool_limits
    except ImportError:  # pragma: no cover
        return nullcontext()
    return threadpool_limits(limits=max(1, jobs))


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        if args.jobs < 1:
            raise ConfigError("jobs", "must be >= 1")
        _check_inputs(args)
        cfg = cfgmod.load_config(args.config, args.profile, args.set)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        with _thread_limit(args.jobs), np.errstate(all="ignore"):
            COMMANDS[args.command](args, cfg, out)
    except ConfigError as exc:
        return _fail(EXIT_CONFIG, exc.field, exc.args[0])
    except (InvariantError, MissingClassError, CheckpointError) as exc:
        return _fail(EXIT_CONFIG, exc.field, exc)
    except NumericError as exc:
        return _fail(EXIT_NUMERIC, exc.field, exc)
    except FloatingPointError as exc:
        return _fail(EXIT_NUMERIC, "-", exc)
    except VolumeFormatError as exc:
        return _fail(EXIT_IO, exc.field, exc)
    except _MissingInput as exc:
        return _fail(EXIT_IO, exc.field, exc)
    except FileNotFoundError as exc:
        return _fail(EXIT_IO, exc.filename or "-", exc.strerror and f"file not found: {exc.filename}" or exc)
    except OSError as exc:
        return _fail(EXIT_IO, getattr(exc, "filename", None) or "-", exc)
    except PvrError as exc:
        return _fail(EXIT_CONFIG, exc.field, exc)
    return 0


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
