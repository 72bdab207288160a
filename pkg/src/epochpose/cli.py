"""Command line front end: gen, train-nf, train-lift, train-reg, eval, project, lift.

Exit codes: 0 success, 1 usage or input error, 2 numerical failure.
Every writing command leaves ``<out>.manifest.json`` next to its output with the
config snapshot, the seed and content hashes of inputs and outputs.
"""
from __future__ import annotations

import argparse
import csv
import io
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import __version__, checkpoint
from . import data as D
from .camera import CameraError, project
from .config import ConfigError, RunConfig, load_config
from .constraints import DegenerateGeometry
from .flow import FlowDiverged, normalize_pose2d, save_flow, load_flow, train_flow
from .liftnet import LiftDiverged, load_lifter, predict as lift_predict, save_lifter, train_liftnet
from .metrics import EvalReport
from .regnet import (RegDiverged, load_decoder, predict as reg_predict, save_decoder,
                     train_regnet)

log = logging.getLogger("epochpose")

EXIT_OK, EXIT_USAGE, EXIT_NUMERIC = 0, 1, 2


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


NUMERIC_ERRORS = (FlowDiverged, LiftDiverged, RegDiverged, FloatingPointError,
                  DegenerateGeometry, CameraError)
INPUT_ERRORS = (UsageError, ConfigError, D.FormatError, checkpoint.CheckpointError)


# ---- helpers -----------------------------------------------------------------

def _require(path, stage: str, what: str) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"{what} {p} not found; run {stage} first")
    return p


def _load_dataset(path) -> D.Dataset:
    return D.load(_require(path, "gen", "dataset"))


def _manifest(out: Path, command: str, config: dict, seed, inputs: dict, outputs: list) -> None:
    doc = {
        "command": command,
        "version": __version__,
        "seed": seed,
        "config": config,
        "inputs": {k: {"path": str(v), "sha256": checkpoint.file_digest(v)}
                   for k, v in sorted(inputs.items())},
        "outputs": {str(Path(p).name): checkpoint.file_digest(p) for p in outputs},
    }
    Path(f"{out}.manifest.json").write_text(json.dumps(doc, indent=2, sort_keys=True) + "\n")


def _write_trace(path: Path, trace, term_trace=None) -> None:
    names = sorted(term_trace[0]) if term_trace else []
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(["epoch", "loss"] + names)
    for e, v in enumerate(trace):
        extra = [repr(float(term_trace[e][k])) for k in names] if term_trace else []
        w.writerow([e, repr(float(v))] + extra)
    path.write_text(buf.getvalue())


def _trace_path(out: Path) -> Path:
    return Path(f"{out}.trace.csv")


def _inputs_2d(ds: D.Dataset) -> np.ndarray:
    """2D training targets, with the dataset's configured observation noise."""
    gen = ds.meta.get("generator", {})
    sigma = float(gen.get("obs_noise_px", 0.0))
    if sigma > 0:
        return D.observation_noise(ds, sigma, seed=int(gen.get("seed", 0)))
    return ds.x_gt


def _features(ds: D.Dataset, data_path: Path, cfg: RunConfig, override=None) -> np.ndarray:
    if override is not None:
        return D.FileFeatureProvider(_require(override, "gen --features", "feature file"))(ds)
    refs = {r for r in ds.features_ref if r}
    if len(refs) > 1:
        raise UsageError("dataset references more than one feature file")
    if refs:
        ref = data_path.parent / refs.pop()
        return D.FileFeatureProvider(_require(ref, "gen --features", "feature file"))(ds)
    f = cfg.features
    return D.SyntheticFeatureProvider(f.width, f.noise, f.seed, ds.J)(ds)


def _override(section, args, names):
    for attr, flag in names:
        v = getattr(args, flag, None)
        if v is not None:
            setattr(section, attr, v)


# ---- subcommands ---------------------------------------------------------------

def cmd_gen(args, cfg: RunConfig) -> int:
    syn = cfg.synthetic
    _override(syn, args, [("count", "count"), ("seed", "seed"), ("obs_noise_px", "noise_px")])
    ds = D.generate(syn)
    out = Path(args.out)
    outputs = [out]
    if args.features:
        fpath = Path(args.features)
        f = cfg.features
        feats = D.SyntheticFeatureProvider(f.width, f.noise, f.seed, ds.J)(ds)
        D.save_features(fpath, ds.ids, feats)
        rel = os.path.relpath(fpath.resolve(), out.resolve().parent)
        ds.features_ref = [rel] * len(ds)
        outputs.append(fpath)
    D.save(ds, out)
    _manifest(out, "gen", {"synthetic": syn.to_dict(), "features": cfg.to_dict()["features"]},
              syn.seed, {}, outputs)
    print(f"wrote {len(ds)} records to {out}")
    return EXIT_OK


def cmd_train_nf(args, cfg: RunConfig) -> int:
    fc = cfg.flow
    _override(fc, args, [("epochs", "epochs"), ("seed", "seed"), ("batch_size", "batch_size"),
                         ("lr", "lr")])
    data_path = Path(args.data)
    ds = _load_dataset(data_path)
    if len(ds) == 0:
        raise UsageError("dataset is empty")
    x = normalize_pose2d(_inputs_2d(ds)).data
    model, trace = train_flow(x, fc)
    out = Path(args.out)
    save_flow(out, model, fc, trace)
    _write_trace(_trace_path(out), trace)
    _manifest(out, "train-nf", {"flow": cfg.to_dict()["flow"]}, fc.seed, {"data": data_path},
              [out, _trace_path(out)])
    print(f"flow nll {trace[0]:.4f} -> {trace[-1]:.4f}; wrote {out}")
    return EXIT_OK


def cmd_train_lift(args, cfg: RunConfig) -> int:
    lc = cfg.lift
    _override(lc, args, [("epochs", "epochs"), ("seed", "seed"), ("batch_size", "batch_size"),
                         ("lr", "lr"), ("dim", "dim")])
    data_path = Path(args.data)
    ds = _load_dataset(data_path)
    if len(ds) == 0:
        raise UsageError("dataset is empty")
    flow_path = _require(args.flow, "train-nf", "flow checkpoint")
    flow, _ = load_flow(flow_path)
    K, E = ds.cameras()
    res = train_liftnet(_inputs_2d(ds), K, E, flow, lc)
    out = Path(args.out)
    save_lifter(out, res, lc, flow_ref=checkpoint.file_digest(flow_path))
    _write_trace(_trace_path(out), res.trace, res.term_trace)
    _manifest(out, "train-lift", {"lift": lc.to_dict()}, lc.seed,
              {"data": data_path, "flow": flow_path}, [out, _trace_path(out)])
    print(f"lift loss {res.trace[0]:.4f} -> {res.trace[-1]:.4f}; wrote {out}")
    return EXIT_OK


def cmd_train_reg(args, cfg: RunConfig) -> int:
    rc = cfg.reg
    _override(rc, args, [("epochs", "epochs"), ("seed", "seed"), ("batch_size", "batch_size"),
                         ("lr", "lr")])
    data_path = Path(args.data)
    ds = _load_dataset(data_path)
    if len(ds) == 0:
        raise UsageError("dataset is empty")
    flow_path = _require(args.flow, "train-nf", "flow checkpoint")
    flow, _ = load_flow(flow_path)
    feats = _features(ds, data_path, cfg, args.features)
    K, _ = ds.cameras()
    res = train_regnet(feats, K, _inputs_2d(ds), flow, rc)
    out = Path(args.out)
    save_decoder(out, res, rc, flow_ref=checkpoint.file_digest(flow_path))
    _write_trace(_trace_path(out), res.trace, res.term_trace)
    inputs = {"data": data_path, "flow": flow_path}
    if args.features:
        inputs["features"] = Path(args.features)
    _manifest(out, "train-reg", {"reg": rc.to_dict(), "features": cfg.to_dict()["features"]},
              rc.seed, inputs, [out, _trace_path(out)])
    print(f"reg loss {res.trace[0]:.4f} -> {res.trace[-1]:.4f}; wrote {out}")
    return EXIT_OK


def _predictions(args, ds: D.Dataset, data_path: Path, cfg: RunConfig):
    if args.pred:
        pred = _load_dataset(args.pred)
        if not np.array_equal(pred.ids, ds.ids):
            raise UsageError("prediction and ground-truth datasets list different ids")
        return pred.y_gt, {"pred": Path(args.pred)}
    model = _require(args.model, "train-lift", "model checkpoint")
    meta, _ = checkpoint.load(model)
    if meta.get("kind") == "lifter":
        lifter, _ = load_lifter(model)
        K, E = ds.cameras()
        return lift_predict(lifter, ds.x_gt, K, E), {"model": model}
    if meta.get("kind") == "decoder":
        dec, _ = load_decoder(model)
        K, _ = ds.cameras()
        _, _, y = reg_predict(dec, _features(ds, data_path, cfg, args.features), K)
        return y, {"model": model}
    raise UsageError(f"{model} holds a {meta.get('kind')!r} checkpoint, not a lifter or decoder")


def cmd_eval(args, cfg: RunConfig) -> int:
    data_path = Path(args.data)
    ds = _load_dataset(data_path)
    if (args.pred is None) == (args.model is None):
        raise UsageError("eval needs exactly one of --pred or --model")
    pred, inputs = _predictions(args, ds, data_path, cfg)
    report = EvalReport.compute(pred, ds.y_gt, ids=[int(i) for i in ds.ids])
    text = report.to_json() if args.format == "json" else report.to_csv()
    if args.out:
        out = Path(args.out)
        out.write_text(text)
        _manifest(out, "eval", {}, None, {"data": data_path, **inputs}, [out])
    print(json.dumps(report.aggregate(), sort_keys=True))
    return EXIT_OK


def _record(ds: D.Dataset, rid: int) -> int:
    hits = np.flatnonzero(ds.ids == rid)
    if len(hits) == 0:
        raise UsageError(f"no record with id {rid}")
    return int(hits[0])


def cmd_project(args, cfg: RunConfig) -> int:
    ds = _load_dataset(args.data)
    r = ds.record(_record(ds, args.id))
    x = np.asarray(project(r.y_gt, r.K, r.E))
    print(json.dumps({"id": r.id, "x": x.tolist()}))
    return EXIT_OK


def cmd_lift(args, cfg: RunConfig) -> int:
    ds = _load_dataset(args.data)
    i = _record(ds, args.id)
    lifter, _ = load_lifter(_require(args.model, "train-lift", "lifter checkpoint"))
    K, E = ds.cameras([i])
    y = lift_predict(lifter, ds.x_gt[i:i + 1], K, E)[0]
    print(json.dumps({"id": int(ds.ids[i]), "y": y.tolist()}))
    return EXIT_OK


# ---- parser --------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="epoch", description=__doc__.splitlines()[0])
    p.add_argument("--config", help="JSON run config (default: $EPOCH_CONFIG)")
    p.add_argument("--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    g = sub.add_parser("gen", help="generate a synthetic dataset")
    g.add_argument("--out", required=True)
    g.add_argument("--count", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--noise-px", type=float, help="2D observation noise used by the trainers")
    g.add_argument("--features", help="also write synthetic encoder features to this file")
    g.set_defaults(func=cmd_gen)

    def trainer(name, func, helptext, flow=True):
        t = sub.add_parser(name, help=helptext)
        t.add_argument("--data", required=True)
        if flow:
            t.add_argument("--flow", required=True, help="flow checkpoint from train-nf")
        t.add_argument("--out", required=True)
        t.add_argument("--epochs", type=int)
        t.add_argument("--seed", type=int)
        t.add_argument("--batch-size", type=int)
        t.add_argument("--lr", type=float)
        t.set_defaults(func=func)
        return t

    trainer("train-nf", cmd_train_nf, "fit the 2D pose flow", flow=False)
    tl = trainer("train-lift", cmd_train_lift, "train the lifter by cycle consistency")
    tl.add_argument("--dim", type=int)
    tr = trainer("train-reg", cmd_train_reg, "train the capsule decoder")
    tr.add_argument("--features", help="feature file (default: dataset reference or synthetic)")

    e = sub.add_parser("eval", help="score 3D predictions against a dataset")
    e.add_argument("--data", required=True)
    e.add_argument("--model", help="lifter or decoder checkpoint")
    e.add_argument("--pred", help="dataset whose y_gt holds the predictions")
    e.add_argument("--features")
    e.add_argument("--out", help="report file")
    e.add_argument("--format", choices=("csv", "json"), default="csv")
    e.set_defaults(func=cmd_eval)

    pr = sub.add_parser("project", help="print the projected 2D pose of one record")
    pr.add_argument("--data", required=True)
    pr.add_argument("--id", type=int, required=True)
    pr.set_defaults(func=cmd_project)

    li = sub.add_parser("lift", help="print the lifted 3D pose of one record")
    li.add_argument("--data", required=True)
    li.add_argument("--model", required=True)
    li.add_argument("--id", type=int, required=True)
    li.set_defaults(func=cmd_lift)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(message)s")
    try:
        cfg = load_config(args.config)
        return args.func(args, cfg)
    except INPUT_ERRORS as e:
        print(f"epoch {args.command}: error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except NUMERIC_ERRORS as e:
        print(f"epoch {args.command}: numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
