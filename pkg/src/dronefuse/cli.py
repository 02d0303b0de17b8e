"""Command-line entry point: synth, featurize, train, eval, sweep, export.

Exit codes: 0 success, 1 user or configuration error, 2 data error,
3 internal invariant violation.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
import zlib
from concurrent.futures import ProcessPoolExecutor
from pathlib import Path

import numpy as np

from . import formats
from . import tensor as T
from .config import RunConfig, as_jsonable, load_config
from .corpus import (SPLIT_OOD, SPLIT_TEST, SPLIT_TRAIN, SPLIT_VAL, FeatureConfig, FeatureSet,
                     featurize, make_record, plan_records, record_seed)
from .errors import ConfigurationError, DataError, DiagnosticError, InvariantError, ParameterError
from .eval import SweepGenerator, SweepSpec, TrainedModel, evaluate, sweep, write_sweep
from .features import stft, to_tfi, zc_feature
from .fusion_net import FusionNet, NetConfig, OodPolicy
from .train import train

log = logging.getLogger("dronefuse")

SPLITS = {"train": SPLIT_TRAIN, "val": SPLIT_VAL, "test": SPLIT_TEST, "ood": SPLIT_OOD}
EXPORT_KINDS = ("tfi", "zcfeature", "spatial_weights", "channel_weights")
FEATURE_KINDS = ("tfi", "zc", "iq")


def _write_json(path: Path, body: dict) -> None:
    path.write_text(json.dumps(body, indent=2, sort_keys=True) + "\n")


def _run_manifest(cfg: RunConfig, command: str, **extra) -> dict:
    return {"command": command, "config_hash": cfg.hash, "seed": cfg.seed, "config": as_jsonable(cfg), **extra}


# ---------------------------------------------------------------------------
# synth
# ---------------------------------------------------------------------------

def synth_plan(cfg: RunConfig) -> list:
    """(split name, RecordSpec) pairs; splits with zero records are skipped."""
    cs = cfg.corpus_spec()
    kw = dict(snrs=cs.snrs, seed=cs.seed, distance_tags=cs.distance_tags, los_tags=cs.los_tags, length=cs.length)
    counts = {"train": cs.n_train, "val": cs.n_val, "test": cs.n_test, "ood": cs.n_ood}
    out = []
    for name, split in SPLITS.items():
        if counts[name] == 0:
            continue
        classes = cs.ood_classes if name == "ood" else cs.id_classes
        out += [(name, s) for s in plan_records(classes, counts[name], split=split, **kw)]
    return out


def cmd_synth(cfg: RunConfig, out_dir) -> Path:
    out = Path(out_dir)
    rows = []
    hist = {}
    for name, spec in synth_plan(cfg):
        d = out / name
        d.mkdir(parents=True, exist_ok=True)
        idx = hist.get((name, spec.class_id), 0)
        rel = f"{name}/c{spec.class_id}_{idx:04d}.iqr"
        formats.write_iq(out / rel, make_record(spec))
        rows.append((rel, spec.class_id, spec.snr_db, spec.distance_tag, spec.los_tag))
        hist[(name, spec.class_id)] = idx + 1
    if not rows:
        raise ConfigurationError("synth plan is empty; every split count is zero")
    manifest = out / "manifest.csv"
    formats.write_manifest(manifest, rows)
    per_class = {}
    for _, cid, *_ in rows:
        per_class[cid] = per_class.get(cid, 0) + 1
    for cid in sorted(per_class):
        print(f"class {cid}: {per_class[cid]} records")
    _write_json(out / "synth.json", _run_manifest(cfg, "synth", records=len(rows),
                                                  per_class={str(k): v for k, v in sorted(per_class.items())}))
    return manifest


# ---------------------------------------------------------------------------
# featurize
# ---------------------------------------------------------------------------

def _featurize_one(args):
    src, rel, fcfg, seed = args
    try:
        rec = formats.read_iq(src)
    except DataError as exc:
        return rel, None, str(exc)
    return rel, featurize(rec, fcfg, seed), None


def cmd_featurize(cfg: RunConfig, manifest, out_dir, workers: int = 1) -> tuple:
    """Returns (feature manifest path, number of skipped records)."""
    manifest = Path(manifest)
    rows = formats.read_manifest(manifest)
    if not rows:
        raise DataError(f"{manifest}: no records")
    out = Path(out_dir)
    fcfg = cfg.feature_config()
    jobs = [(manifest.parent / rel, rel, fcfg, record_seed(cfg.seed, zlib.crc32(rel.encode()))) for rel, *_ in rows]
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_featurize_one, jobs, chunksize=4))
    else:
        results = [_featurize_one(j) for j in jobs]
    lines = []
    skipped = 0
    for (rel, cid, snr, dist, los), (_, feats, err) in zip(rows, results):
        if feats is None:
            log.warning("skipping %s: %s", rel, err)
            skipped += 1
            continue
        stem = rel[:-4] if rel.endswith(".iqr") else rel
        (out / stem).parent.mkdir(parents=True, exist_ok=True)
        for kind, arr in zip(FEATURE_KINDS, feats):
            formats.write_tns(out / f"{stem}.{kind}.tns", arr)
        lines.append((stem, cid, snr, dist, los))
    fman = out / "features.csv"
    formats.write_manifest(fman, lines)
    _write_json(out / "features.json", _run_manifest(cfg, "featurize", source=str(manifest),
                                                     records=len(lines), skipped=skipped))
    return fman, skipped


def load_features(manifest, split: str | None = None, classes=None) -> FeatureSet:
    """Feature set for one split (the first path component of each stem).

    Labels are positions in ``classes`` when given, raw class ids otherwise.
    """
    manifest = Path(manifest)
    rows = [r for r in formats.read_manifest(manifest) if split is None or r[0].split("/")[0] == split]
    if not rows:
        raise DataError(f"{manifest}: no feature rows for split {split!r}")
    parts = {k: [] for k in FEATURE_KINDS}
    for stem, *_ in rows:
        for k in FEATURE_KINDS:
            parts[k].append(formats.read_tns(manifest.parent / f"{stem}.{k}.tns"))
    ids = np.array([r[1] for r in rows])
    if classes is not None:
        pos = {c: i for i, c in enumerate(classes)}
        if any(int(c) not in pos for c in ids):
            raise DataError(f"{manifest}: split {split!r} holds classes outside {list(classes)}")
        ids = np.array([pos[int(c)] for c in ids])
    return FeatureSet(*(np.stack(parts[k]).astype(np.float64) for k in FEATURE_KINDS),
                      labels=ids, snr_db=np.array([r[2] for r in rows]))


# ---------------------------------------------------------------------------
# checkpoints
# ---------------------------------------------------------------------------

def _net_config_from(conf: dict) -> NetConfig:
    fields = ("channels", "spatial", "depth", "class_count", "tfi_hw", "tfi_channels", "zc_rows", "zc_cols",
              "iq_channels", "alpha", "afw_momentum", "variant")
    try:
        return NetConfig(**{k: conf[k] for k in fields})
    except KeyError as exc:
        raise DataError(f"checkpoint config lacks {exc}") from None


def save_model(path, model: TrainedModel, cfg: RunConfig) -> None:
    nc = model.net.cfg
    conf = {k: getattr(nc, k) for k in ("channels", "spatial", "depth", "class_count", "tfi_hw", "tfi_channels",
                                        "zc_rows", "zc_cols", "iq_channels", "alpha", "afw_momentum", "variant")}
    conf.update(tau=model.policy.tau, quantile=model.policy.quantile, config_hash=cfg.hash, seed=cfg.seed,
                id_classes=list(cfg.get("synth", "id_classes")),
                candidate_roots=[list(c[:2]) for c in cfg.feature_config().zc.candidates])
    formats.save_checkpoint(path, model.net.state_dict(), conf)


def load_model(path) -> tuple:
    """(TrainedModel, checkpoint config dict)."""
    params, conf = formats.load_checkpoint(path)
    nc = _net_config_from(conf)
    with T.precision("train"):
        net = FusionNet(nc).cast("train")
        try:
            net.load_state_dict(params)
        except ConfigurationError as exc:
            raise ConfigurationError(f"{path}: {exc}") from None
    net.eval()
    return TrainedModel(net, OodPolicy(float(conf["tau"]), float(conf.get("quantile", 0.05)))), conf


def _check_shapes(net: FusionNet, data: FeatureSet) -> None:
    c = net.cfg
    want = {"tfi": (c.tfi_hw, c.tfi_hw, c.tfi_channels), "zc": (c.zc_rows, c.zc_cols)}
    for k, shape in want.items():
        got = getattr(data, k).shape[1:]
        if got != shape:
            raise ConfigurationError(f"{k} features have shape {got} but the checkpoint expects {shape}")


# ---------------------------------------------------------------------------
# train / eval / sweep
# ---------------------------------------------------------------------------

def cmd_train(cfg: RunConfig, features, out_path) -> Path:
    classes = cfg.get("synth", "id_classes")
    tr = load_features(features, "train", classes)
    va = load_features(features, "val", classes)
    net_cfg = cfg.net_config()
    if tr.tfi.shape[1:] != (net_cfg.tfi_hw, net_cfg.tfi_hw, net_cfg.tfi_channels):
        raise ConfigurationError(f"tfi features have shape {tr.tfi.shape[1:]} but the model expects "
                                 f"{(net_cfg.tfi_hw, net_cfg.tfi_hw, net_cfg.tfi_channels)}")
    net, policy, tlog = train(tr, va, net_cfg, cfg.train_config(), seed=cfg.seed)
    out = Path(out_path)
    save_model(out, TrainedModel(net, policy, tlog), cfg)
    _write_json(out / "train_log.json", _run_manifest(cfg, "train", features=str(features), **tlog.as_dict()))
    for e in tlog.epochs:
        print(f"epoch {e['epoch']:3d} loss {e['loss']:.4f} val_loss {e['val_loss']:.4f} val_acc {e['val_acc']:.4f}")
    return out


def cmd_eval(cfg: RunConfig, checkpoint, features, out_csv) -> list:
    model, conf = load_model(checkpoint)
    classes = conf.get("id_classes", list(range(model.net.cfg.class_count)))
    test = load_features(features, "test", classes)
    _check_shapes(model.net, test)
    try:
        ood = load_features(features, "ood")
    except DataError:
        ood = None
    res = evaluate(model, test, ood)
    row = {"axis": "split", "value": "test", "seed": cfg.seed, **res}
    out = Path(out_csv)
    write_sweep([row], out, out.with_suffix(".json"),
                _run_manifest(cfg, "eval", checkpoint=str(checkpoint), features=str(features),
                              checkpoint_config_hash=conf.get("config_hash")))
    return [row]


def cmd_sweep(cfg: RunConfig, checkpoint, out_csv, axis=None, values=None, workers: int = 1) -> list:
    model, conf = load_model(checkpoint)
    axis = axis or cfg.get("eval", "sweep_axis")
    raw = values if values is not None else cfg.get("eval", "sweep_values")
    if axis in ("snr",):
        vals = tuple(float(v) for v in raw)
    elif axis in ("duration", "ood_type"):
        vals = tuple(int(v) for v in raw)
    else:
        vals = tuple(raw)
    spec = SweepSpec(axis, vals, cfg.get("eval", "repetitions"), cfg.seed)
    gen = SweepGenerator(base=cfg.corpus_spec(), n_per_class=cfg.get("eval", "n_per_class"),
                         features=cfg.feature_config(), workers=workers)
    rows = sweep(spec, model, gen)
    out = Path(out_csv)
    write_sweep(rows, out, out.with_suffix(".json"),
                _run_manifest(cfg, "sweep", checkpoint=str(checkpoint), axis=axis, values=list(vals),
                              checkpoint_config_hash=conf.get("config_hash")))
    return rows


# ---------------------------------------------------------------------------
# export
# ---------------------------------------------------------------------------

def cmd_export(cfg: RunConfig, kind: str, out_path, record=None, checkpoint=None) -> Path:
    """Heatmap (P5 PGM + min/max sidecar) and TNS1 dump of one artifact."""
    if kind not in EXPORT_KINDS:
        raise ConfigurationError(f"unknown export kind {kind!r}; expected one of {EXPORT_KINDS}")
    out = Path(out_path)
    if kind in ("tfi", "zcfeature"):
        if record is None:
            raise ConfigurationError(f"export {kind} needs --record")
        rec = formats.read_iq(record)
        fcfg: FeatureConfig = cfg.feature_config()
        if kind == "tfi":
            arr = to_tfi(stft(rec.samples, fcfg.stft), *fcfg.tfi_hw, ch=fcfg.tfi_channels).values
            img = arr.mean(axis=-1)
        else:
            arr = zc_feature(rec, fcfg.zc, np.random.default_rng(cfg.seed)).values
            img = arr
    else:
        if checkpoint is None:
            raise ConfigurationError(f"export {kind} needs --checkpoint")
        model, _ = load_model(checkpoint)
        net = model.net
        if not net.fused:
            raise ConfigurationError(f"checkpoint variant {net.cfg.variant} has no adaptive weighting")
        with T.no_grad():
            om_s, om_c = net.afw.weights()
        arr = om_s.data[0, :, :, 0] if kind == "spatial_weights" else om_c.data.reshape(1, -1)
        img = arr
    out.parent.mkdir(parents=True, exist_ok=True)
    formats.write_pgm(out, img)
    formats.write_tns(out.with_suffix(".tns"), np.asarray(arr))
    return out


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------

class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise ConfigurationError(message)


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="dronefuse", description="ZC/TFI fusion pipeline for drone RF identification")
    p.add_argument("--config", help="INI run config")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override one config key (repeatable)")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    s = sub.add_parser("synth", help="write a synthetic IQ corpus and manifest")
    s.add_argument("out_dir")
    s = sub.add_parser("featurize", help="TFI/ZC/IQ features for every manifest record")
    s.add_argument("manifest")
    s.add_argument("out_dir")
    s = sub.add_parser("train", help="train one ablation variant")
    s.add_argument("features")
    s.add_argument("checkpoint")
    s = sub.add_parser("eval", help="score a checkpoint on the test and OOD splits")
    s.add_argument("checkpoint")
    s.add_argument("features")
    s.add_argument("out_csv")
    s = sub.add_parser("sweep", help="metrics across one robustness axis")
    s.add_argument("checkpoint")
    s.add_argument("out_csv")
    s.add_argument("--axis")
    s.add_argument("--values", help="comma-separated axis values")
    s = sub.add_parser("export", help="TFI/ZC dumps and AFW heatmaps")
    s.add_argument("kind", choices=EXPORT_KINDS)
    s.add_argument("out_path")
    s.add_argument("--record")
    s.add_argument("--checkpoint")
    return p


def run(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    if args.workers < 1:
        raise ConfigurationError("--workers must be >= 1")
    cfg = load_config(args.config, args.set, seed=args.seed)
    if args.command == "synth":
        print(cmd_synth(cfg, args.out_dir))
    elif args.command == "featurize":
        path, skipped = cmd_featurize(cfg, args.manifest, args.out_dir, args.workers)
        print(path)
        if skipped:
            print(f"{skipped} corrupt records skipped", file=sys.stderr)
            return 2
    elif args.command == "train":
        print(cmd_train(cfg, args.features, args.checkpoint))
    elif args.command == "eval":
        for row in cmd_eval(cfg, args.checkpoint, args.features, args.out_csv):
            print(", ".join(f"{k}={row[k]:.4f}" for k in ("accuracy", "precision", "recall", "oodd_acc", "auroc")))
    elif args.command == "sweep":
        values = args.values.split(",") if args.values else None
        for row in cmd_sweep(cfg, args.checkpoint, args.out_csv, args.axis, values, args.workers):
            print(f"{row['axis']}={row['value']} seed={row['seed']} accuracy={row['accuracy']:.4f} "
                  f"oodd_acc={row['oodd_acc']:.4f}")
    else:
        print(cmd_export(cfg, args.kind, args.out_path, args.record, args.checkpoint))
    return 0


def main(argv=None) -> int:
    try:
        return run(argv)
    except (ConfigurationError, ParameterError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except (DataError, DiagnosticError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 2
    except InvariantError as exc:
        print(f"internal invariant violated: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
