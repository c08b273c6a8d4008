"""Command-line entry point: ``brainalign {simulate,train,adapt,eval,inspect}``.

Exit codes: 0 success, 1 usage error, 2 data error, 3 numeric failure.
Every report is written as ``<name>.tsv`` plus a ``<name>.json`` sidecar in
``--out``; the TSV is echoed on stdout.
"""

from __future__ import annotations

import argparse
import json
import logging
import math
import sys
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

from .core import (BrainAlignError, DataError, NumericError, SubjectSpec, child_seed, configs_from_dict,
                   load_preset, new_rng)
from .datahub import (Dataset, dataset_manifest_summary, export_features, features_header,
                      load_annotations, load_checkpoint, load_dataset, save_checkpoint, save_dataset)

log = logging.getLogger("brainalign")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(BrainAlignError):
    exit_code = EXIT_USAGE


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# --------------------------------------------------------------------------
# helpers
# --------------------------------------------------------------------------

def _csv(kind):
    def parse(text: str):
        try:
            return [kind(t) for t in text.split(",") if t.strip()]
        except ValueError:
            raise argparse.ArgumentTypeError(f"expected comma-separated {kind.__name__} values, got {text!r}")
    return parse


def _grid(text: str) -> tuple[int, int]:
    try:
        t, d = (int(v) for v in text.lower().split("x"))
    except ValueError:
        raise argparse.ArgumentTypeError(f"grid must look like 16x32, got {text!r}") from None
    return t, d


def _fmt(v) -> str:
    if isinstance(v, float):
        return "nan" if math.isnan(v) else f"{v:.6f}"
    return str(v)


def write_report(out: Path, name: str, rows: list[dict], meta: Optional[dict] = None) -> str:
    """Write ``name.tsv`` and ``name.json``; returns the TSV text."""
    out.mkdir(parents=True, exist_ok=True)
    cols: list[str] = []
    for r in rows:
        cols.extend(k for k in r if k not in cols)
    lines = ["\t".join(cols)] + ["\t".join(_fmt(r.get(c, "")) for c in cols) for r in rows]
    tsv = "\n".join(lines) + "\n"
    (out / f"{name}.tsv").write_text(tsv)
    sidecar = {"report": name, "columns": cols, "rows": rows, "meta": meta or {}}
    (out / f"{name}.json").write_text(json.dumps(sidecar, indent=2, sort_keys=True, allow_nan=True) + "\n")
    return tsv


def _configs(args, preset: Optional[dict] = None):
    d = preset if preset is not None else load_preset(args.config)
    try:
        enc, train = configs_from_dict(d)
        train = train.override(theta=getattr(args, "theta", None), strategy=getattr(args, "strategy", None),
                               epochs=getattr(args, "epochs", None), batch_size=getattr(args, "batch", None),
                               loss=getattr(args, "loss", None), lr_max=getattr(args, "lr", None), seed=args.seed)
    except (TypeError, ValueError) as exc:
        raise UsageError(str(exc)) from None
    return enc, train


def _load(manifest) -> Dataset:
    if not Path(manifest).exists():
        raise UsageError(f"--manifest points at nothing: {manifest}")
    return load_dataset(manifest)


def _retrieval_rows(state, samples, pool: int, trials: int, seed: int) -> list[dict]:
    from .eval.retrieval import retrieval_report
    from .trainer import predict

    rows = []
    by: dict[str, list] = {}
    for s in samples:
        if s.target is not None:
            by.setdefault(s.subject_id, []).append(s)
    for sid in sorted(by):
        items = by[sid]
        if len(items) < 2:
            continue
        pred = predict(state, items).reshape(len(items), -1)
        target = np.stack([s.target.values for s in items]).reshape(len(items), -1)
        rep = retrieval_report(pred, target, pool, trials, new_rng(seed))
        mse = float(np.mean((pred.astype(np.float64) - target) ** 2))
        rows.append({"subject": sid, "n": len(items), "pool": rep.pool_size, "forward_acc": rep.forward_acc,
                     "backward_acc": rep.backward_acc, "exemplar_acc": rep.exemplar_acc, "mse": mse})
    if len(rows) > 1:
        rows.append({"subject": "mean", "n": sum(r["n"] for r in rows), "pool": min(r["pool"] for r in rows),
                     **{k: float(np.mean([r[k] for r in rows]))
                        for k in ("forward_acc", "backward_acc", "exemplar_acc", "mse")}})
    return rows


# --------------------------------------------------------------------------
# commands
# --------------------------------------------------------------------------

def cmd_simulate(args) -> int:
    from .synthworld import make_world, oracle_ceiling, paired_dataset, save_world, split_items

    dims = args.voxel_dims or [512 + 128 * k for k in range(args.subjects)]
    if args.subjects < 1 or len(dims) != args.subjects:
        raise UsageError(f"--voxel-dims needs {args.subjects} values, got {len(dims)}")
    if not 0 < args.test < args.gallery:
        raise UsageError("--test must be between 1 and gallery - 1")
    if args.sigma < 0:
        raise UsageError("--sigma must be non-negative")
    try:
        rng = new_rng(args.seed)
        world = make_world(args.subjects, dims, args.grid, args.gallery, args.sigma, rng,
                           latent_dim=args.latent_dim)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    train_items, test_items = split_items(world, args.test, rng)
    out = Path(args.out)
    save_world(world, out / "world")
    manifest = save_dataset(out, world.specs, paired_dataset(world, train_items, rng),
                            paired_dataset(world, test_items, rng),
                            extra={"world": "world", "sigma": args.sigma, "seed": args.seed})
    pool = min(300, args.test)
    ceiling = oracle_ceiling(world, pool, new_rng(args.seed), items=test_items, per_subject=True)
    rows = [{"subject": s.subject_id, "voxel_dim": s.voxel_dim, "sigma": world.sigmas[k],
             "n_train": int(train_items.size), "n_test": int(test_items.size), "oracle_forward_acc": ceiling[s.subject_id]}
            for k, s in enumerate(world.specs)]
    print(write_report(out, "simulate", rows, {"manifest": manifest.name, "pool": pool,
                                               "grid": list(args.grid), "seed": args.seed}), end="")
    return EXIT_OK


def cmd_train(args) -> int:
    from .encoder import init_encoder
    from .trainer import LossConfig, train_align

    enc_cfg, train_cfg = _configs(args)
    data = _load(args.manifest)
    keep = args.subjects or [s.subject_id for s in data.specs]
    unknown = set(keep) - {s.subject_id for s in data.specs}
    if unknown:
        raise UsageError(f"--subjects lists unknown ids {sorted(unknown)}")
    specs = [s for s in data.specs if s.subject_id in keep]
    train = [s for s in data.train if s.subject_id in keep]
    if not train:
        raise DataError("no training samples for the selected subjects")
    loss_cfg = LossConfig(kind=train_cfg.loss, temperature=args.temperature, mixco_enabled=args.mixco)

    rng = new_rng(train_cfg.seed)
    state = init_encoder(enc_cfg, specs, new_rng(child_seed(rng)))
    ckpt, train_log = train_align(state, train, train_cfg, loss_cfg,
                                  progress=lambda ep: log.info("epoch %(epoch)d loss %(train_loss).5f", ep))
    out = Path(args.out)
    save_checkpoint(ckpt, out / "checkpoint")
    train_log.write(out / "train_log.jsonl")
    test = [s for s in data.test if s.subject_id in keep]
    rows = _retrieval_rows(state, test, args.pool, args.trials, train_cfg.seed)
    meta = {"final_loss": train_log.final_loss() if train_log.steps else None,
            "steps": ckpt.provenance["steps"], "config_hash": ckpt.provenance["config_hash"],
            "perceiver_digest": ckpt.perceiver_digest()}
    print(write_report(out, "train", rows or [{"subject": "-", "n": 0}], meta), end="")
    return EXIT_OK


def cmd_adapt(args) -> int:
    from .trainer import AdaptationConfig, LossConfig, adapt_subject

    base_path = Path(args.checkpoint)
    if not (base_path / "checkpoint.json").exists():
        raise DataError(f"no checkpoint at {base_path}")
    base = load_checkpoint(base_path)
    _, train_cfg = _configs(args)
    data = _load(args.manifest)
    known = {s.subject_id for s in base.specs}
    fresh = [s for s in data.specs if s.subject_id not in known]
    if args.subject:
        fresh = [s for s in data.specs if s.subject_id == args.subject]
        if not fresh:
            raise UsageError(f"subject {args.subject!r} is not in the manifest")
        if args.subject in known:
            raise UsageError(f"subject {args.subject!r} is already part of the base checkpoint")
    if len(fresh) != 1:
        raise UsageError(f"pick the new subject with --subject (candidates: {[s.subject_id for s in fresh]})")
    spec: SubjectSpec = fresh[0]
    if any(not 0 < r <= 1 for r in args.ratios) or not args.ratios:
        raise UsageError("--ratios must be values in (0, 1]")
    own_train = [s for s in data.train if s.subject_id == spec.subject_id]
    own_test = [s for s in data.test if s.subject_id == spec.subject_id]
    if not own_train:
        raise DataError(f"no training samples for subject {spec.subject_id}")
    loss_cfg = LossConfig(kind=train_cfg.loss)

    out = Path(args.out)
    rows = []
    for ratio in args.ratios:
        cfg = AdaptationConfig(mode=args.mode, data_ratio=ratio, base_checkpoint=str(base_path))
        ckpt, _ = adapt_subject(base, spec, own_train, cfg, train_cfg, loss_cfg)
        ret = _retrieval_rows(ckpt.encoder(), own_test, args.pool, args.trials, train_cfg.seed)
        row = {"ratio": ratio, "mode": args.mode, "n_train": ckpt.provenance["adaptation"]["n_samples"]}
        if ret:
            row.update({k: ret[0][k] for k in ("forward_acc", "backward_acc", "exemplar_acc", "mse")})
        row["perceiver_digest"] = ckpt.perceiver_digest()
        rows.append(row)
        if args.save_checkpoints:
            save_checkpoint(ckpt, out / f"checkpoint_r{ratio:g}")
        log.info("ratio %g done", ratio)
    meta = {"subject": spec.subject_id, "base_perceiver_digest": base.perceiver_digest(),
            "base_checkpoint": str(base_path), "seed": train_cfg.seed}
    print(write_report(out, "adapt", rows, meta), end="")
    return EXIT_OK


def cmd_eval_retrieval(args) -> int:
    path = Path(args.checkpoint)
    if not (path / "checkpoint.json").exists():
        raise DataError(f"no checkpoint at {path}")
    state = load_checkpoint(path).encoder()
    data = _load(args.manifest)
    samples = [s for s in data.split(args.split) if s.subject_id in state.specs]
    if not samples:
        raise DataError(f"the {args.split} split has no samples for the checkpoint's subjects")
    rows = _retrieval_rows(state, samples, args.pool, args.trials, args.seed)
    if not rows:
        raise DataError("retrieval needs at least two target-bearing samples per subject")
    out = Path(args.out)
    if args.export_features:
        from .core import FeatureGrid
        from .trainer import predict

        grids = [FeatureGrid(g) for g in predict(state, samples)]
        ids = [f"{s.subject_id}:{s.stimulus_id}" for s in samples]
        export_features(grids, out / "features", ids=ids)
    print(write_report(out, "retrieval", rows, {"split": args.split, "seed": args.seed, "trials": args.trials}),
          end="")
    return EXIT_OK


def _read_json(path) -> object:
    try:
        return json.loads(Path(path).read_text())
    except FileNotFoundError:
        raise DataError(f"file not found: {path}") from None
    except json.JSONDecodeError as exc:
        raise DataError(f"{path} is not valid JSON: {exc}") from None


def _annotations(path) -> dict[str, dict]:
    p = Path(path)
    if p.is_dir() or p.name == "manifest.json":
        summary = dataset_manifest_summary(p / "manifest.json" if p.is_dir() else p)
        if not summary["annotations"]:
            raise DataError(f"{p} carries no annotations")
        p = (p if p.is_dir() else p.parent) / summary["annotations"]
    return load_annotations(p)


def cmd_eval_grounding(args) -> int:
    from .eval.grounding import grounding_accuracy

    ann = _annotations(args.annotations)
    preds = _read_json(args.predictions)
    if not isinstance(preds, list):
        raise DataError("predictions must be a JSON list of {image_id, category, bbox} records")
    pool: dict[tuple, list] = {}
    for p in preds:
        try:
            key = (str(p["image_id"]), str(p["category"]).strip().lower())
            box = tuple(float(c) for c in p["bbox"])
        except (KeyError, TypeError, ValueError):
            raise DataError(f"malformed prediction record {p!r}") from None
        pool.setdefault(key, []).append((p["category"], box))
    gts, matched = [], []
    for image_id in sorted(ann):
        for label, *box in ann[image_id]["boxes"]:
            gts.append((label, tuple(box)))
            cands = pool.get((image_id, label.strip().lower()))
            matched.append(cands.pop(0) if cands else None)
    if not gts:
        raise DataError("annotations contain no boxes")
    try:
        report = grounding_accuracy(matched, gts, thresholds=args.thresholds)
    except KeyError as exc:
        raise DataError(f"label outside the salience taxonomy: {exc}") from None
    meta = {"n_queries": len(gts), "n_missing": sum(m is None for m in matched), "thresholds": list(args.thresholds)}
    print(write_report(Path(args.out), "grounding", report.rows(), meta), end="")
    return EXIT_OK


def cmd_eval_caption(args) -> int:
    from .eval.captions import caption_report, default_registry

    ann = _annotations(args.references)
    cands: dict[str, str] = {}
    try:
        lines = Path(args.candidates).read_text().splitlines()
    except FileNotFoundError:
        raise DataError(f"file not found: {args.candidates}") from None
    for n, line in enumerate(lines, 1):
        if not line.strip():
            continue
        if "\t" not in line:
            raise DataError(f"{args.candidates}:{n}: expected 'image_id<TAB>caption'")
        image_id, text = line.split("\t", 1)
        cands[image_id.strip()] = text.strip()
    ids = sorted(i for i in cands if ann.get(i, {}).get("captions"))
    if not ids:
        raise DataError("no candidate has reference captions")
    registry = default_registry.copy()
    for spec in args.scorer:
        if "=" not in spec:
            raise UsageError(f"--scorer expects NAME=COMMAND, got {spec!r}")
        name, cmd = spec.split("=", 1)
        registry.register(name.strip(), cmd)
    report = caption_report([cands[i] for i in ids], [ann[i]["captions"] for i in ids],
                            metrics=args.metric, registry=registry)
    rows = [{"metric": k, "value": v} for k, v in report.items()]
    meta = {"n": len(ids), "skipped": len(cands) - len(ids)}
    print(write_report(Path(args.out), "caption", rows, meta), end="")
    return EXIT_OK


def cmd_inspect(args) -> int:
    p = Path(args.path)
    if (p / "checkpoint.json").exists():
        ckpt = load_checkpoint(p)
        info = {
            "kind": "checkpoint",
            "encoder_config": ckpt.config.to_dict(),
            "subjects": [s.to_dict() for s in ckpt.specs],
            "parameters": int(sum(a.size for a in ckpt.params.values())),
            "perceiver_parameters": int(sum(a.size for k, a in ckpt.params.items() if k.startswith("perceiver."))),
            "perceiver_digest": ckpt.perceiver_digest(),
            "provenance": ckpt.provenance,
        }
    elif (p / "manifest.json").exists() or p.name == "manifest.json":
        info = {"kind": "dataset", **dataset_manifest_summary(p if p.is_file() else p / "manifest.json")}
    elif (p / "world.json").exists():
        from .synthworld import load_world

        w = load_world(p)
        info = {"kind": "world", "subjects": [s.to_dict() for s in w.specs], "sigmas": w.sigmas,
                "grid_shape": list(w.grid_shape), "gallery": int(w.gallery.shape[0]), "latent_dim": w.latent_dim}
    elif (p / "features.json").exists():
        h = features_header(p)
        info = {"kind": "features", "count": h["count"], "grid_shape": list(h["grid_shape"])}
    else:
        raise DataError(f"{p} holds no checkpoint, dataset, world or feature container")
    text = json.dumps(info, indent=2, sort_keys=True)
    if args.out:
        Path(args.out).parent.mkdir(parents=True, exist_ok=True)
        Path(args.out).write_text(text + "\n")
    print(text)
    return EXIT_OK


# --------------------------------------------------------------------------
# parser
# --------------------------------------------------------------------------

def _train_flags(p: argparse.ArgumentParser, adapt: bool = False) -> None:
    p.add_argument("--manifest", required=True, help="dataset manifest.json (or its directory)")
    p.add_argument("--config", default="desk", help="preset name or JSON path (default: desk)")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch", type=int)
    p.add_argument("--lr", type=float)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pool", type=int, default=300, help="retrieval pool size on the test split")
    p.add_argument("--trials", type=int, default=30)
    p.add_argument("--out", required=True)
    if not adapt:
        p.add_argument("--subjects", type=_csv(str), help="comma-separated subset of subject ids")
        p.add_argument("--theta", type=float)
        p.add_argument("--strategy", choices=("ours", "ours_r", "random", "stratified"))
        p.add_argument("--loss", choices=("mse_encoder", "nce_encoder"))
        p.add_argument("--temperature", type=float, default=0.07)
        p.add_argument("--mixco", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="brainalign", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("simulate", help="generate a synthetic world and its dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--subjects", type=int, default=3)
    p.add_argument("--voxel-dims", type=_csv(int))
    p.add_argument("--grid", type=_grid, default=(16, 32))
    p.add_argument("--gallery", type=int, default=1200)
    p.add_argument("--test", type=int, default=300)
    p.add_argument("--sigma", type=float, default=0.0)
    p.add_argument("--latent-dim", type=int, default=64)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_simulate)

    p = sub.add_parser("train", help="cross-subject alignment training")
    _train_flags(p)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("adapt", help="new-subject adaptation sweep over data ratios")
    _train_flags(p, adapt=True)
    p.add_argument("--checkpoint", required=True, help="base checkpoint directory")
    p.add_argument("--subject", help="id of the subject to add (default: the one missing from the base)")
    p.add_argument("--ratios", type=_csv(float), default=[0.05, 0.1, 0.2, 0.3, 0.5, 0.8, 1.0])
    p.add_argument("--mode", choices=("frozen", "finetuned"), default="finetuned")
    p.add_argument("--save-checkpoints", action="store_true")
    p.set_defaults(func=cmd_adapt)

    ev = sub.add_parser("eval", help="retrieval, grounding or caption reports")
    evs = ev.add_subparsers(dest="task", required=True, parser_class=_Parser)
    p = evs.add_parser("retrieval")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=("train", "test"), default="test")
    p.add_argument("--pool", type=int, default=300)
    p.add_argument("--trials", type=int, default=30)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--export-features", action="store_true", help="also write predicted grids for the bridge")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_retrieval)

    p = evs.add_parser("grounding")
    p.add_argument("--annotations", required=True, help="COCO-style JSON or dataset directory")
    p.add_argument("--predictions", required=True, help="JSON list of {image_id, category, bbox}")
    p.add_argument("--thresholds", type=_csv(float), default=[0.3, 0.5, 0.7])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_grounding)

    p = evs.add_parser("caption")
    p.add_argument("--candidates", required=True, help="TSV of image_id<TAB>caption")
    p.add_argument("--references", required=True, help="COCO-style JSON or dataset directory")
    p.add_argument("--metric", action="append", default=[], help="external metric to include (repeatable)")
    p.add_argument("--scorer", action="append", default=[], metavar="NAME=COMMAND",
                   help="register an external scorer command (repeatable)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval_caption)

    p = sub.add_parser("inspect", help="summarize a checkpoint, dataset, world or feature container")
    p.add_argument("path")
    p.add_argument("--out", help="also write the summary to this file")
    p.set_defaults(func=cmd_inspect)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as exc:
        print(f"brainalign: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"brainalign: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except NumericError as exc:
        print(f"brainalign: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (DataError, FileNotFoundError, ValueError, KeyError) as exc:
        print(f"brainalign: data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except FloatingPointError as exc:
        print(f"brainalign: numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
