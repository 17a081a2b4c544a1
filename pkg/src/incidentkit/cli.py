"""Command-line front end.

Subcommands cover the whole pipeline: synthetic scenario generation,
training, evaluation (including the ablation table), near-duplicate removal,
confidence filtering, geospatial evaluation, and temporal monitoring.

Every subcommand writes a JSON report embedding the resolved configuration
and the package version, so identical config + seed reproduces identical
report bytes. Exit codes: 0 ok, 2 config error, 3 data error, 4 numeric
failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import os
import sys
from dataclasses import replace
from pathlib import Path

from .errors import ConfigError, DataError, IncidentKitError

_ERROR_KINDS = {2: "config", 3: "data", 4: "numeric"}


def _version_string() -> str:
    from . import __version__

    return f"incidentkit {__version__}"


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", help="TOML config file")
    common.add_argument("--seed", type=int, metavar="U64", help="master RNG seed")
    common.add_argument("--out", metavar="DIR", help="output directory (default: out)")
    common.add_argument("--threads", type=int, metavar="N", help="BLAS thread cap (best effort)")
    common.add_argument("--quiet", action="store_true", default=None, help="suppress progress output")
    common.add_argument(
        "--set",
        dest="overrides",
        action="append",
        default=[],
        metavar="SECTION.KEY=VALUE",
        help="override any config key (repeatable)",
    )

    parser = argparse.ArgumentParser(
        prog="incidentkit",
        description="Partial-label incident detection toolkit.",
    )
    parser.add_argument("--version", action="version", version=_version_string())
    sub = parser.add_subparsers(dest="command", required=True)

    sub.add_parser("synth", parents=[common], help="generate synthetic benchmark data")

    p = sub.add_parser("train", parents=[common], help="train the two-head model")
    p.add_argument("--taxonomy", help="taxonomy file")
    p.add_argument("--manifest", help="training manifest (JSONL)")
    p.add_argument("--embeddings", help="embedding store (binary)")
    p.add_argument("--loss", choices=("cn", "ce"), help="loss variant")
    p.add_argument("--no-class-negatives", action="store_true", help="drop class-negative supervision")
    p.add_argument("--no-places-aug", action="store_true", help="drop scene-augmentation records")
    p.add_argument("--lr", type=float, help="Adam learning rate")
    p.add_argument("--batch-size", type=int)
    p.add_argument("--min-epochs", type=int)
    p.add_argument("--max-epochs", type=int)
    p.add_argument("--hidden", help="trunk widths, comma separated")

    p = sub.add_parser("eval", parents=[common], help="evaluate a checkpoint / run the ablation")
    p.add_argument("--taxonomy", help="taxonomy file")
    p.add_argument("--checkpoint", help="trained model checkpoint")
    p.add_argument("--manifest", help="manifest to evaluate (JSONL)")
    p.add_argument("--train-manifest", help="training manifest (ablation mode)")
    p.add_argument("--embeddings", help="embedding store (binary)")
    p.add_argument(
        "--augmented",
        action=argparse.BooleanOptionalAction,
        default=None,
        help="include incident-free scene images as universal negatives",
    )
    p.add_argument("--table1", action="store_true", help="train and tabulate all ablation rows")

    p = sub.add_parser("dedup", parents=[common], help="cluster near-duplicate embeddings")
    p.add_argument("--taxonomy", help="taxonomy file")
    p.add_argument("--manifest", help="manifest to deduplicate")
    p.add_argument("--embeddings", help="embedding store (binary)")
    p.add_argument("--radius", type=float, help="duplicate radius")
    p.add_argument("--metric", choices=("cosine_distance", "euclidean"))
    p.add_argument("--strategy", choices=("brute_force", "grid"))

    p = sub.add_parser("filter", parents=[common], help="confidence-filter a detections file")
    p.add_argument("--detections", help="detections CSV")
    p.add_argument("--category", help="keep only this category")
    p.add_argument("--threshold", type=float, help="keep confidence strictly above this")

    p = sub.add_parser("geo-eval", parents=[common], help="distance-to-event curves and event AP")
    p.add_argument("--detections", help="detections CSV")
    p.add_argument("--events", help="ground-truth events CSV")
    p.add_argument("--x-values", help="curve distances in km, comma separated")
    p.add_argument("--threshold", type=float, help="confidence threshold for the filtered curve")

    p = sub.add_parser("monitor", parents=[common], help="temporal burst analysis of a daily series")
    p.add_argument("--series", help="daily counts CSV")
    p.add_argument("--compare-series", help="second series for histogram IoU")
    p.add_argument("--events", help="ground-truth events CSV")
    p.add_argument("--w", type=int, help="window size in days")
    p.add_argument("--rti-threshold", type=float, help="peak flagging ratio")
    p.add_argument("--smooth-window", type=int, help="moving-average width (odd)")
    return parser


def _direct_layer(args: argparse.Namespace) -> dict[str, dict]:
    """Map dedicated flags onto config entries (the final override layer)."""
    direct: dict[str, dict] = {"": {}, "paths": {}, "train": {}, "dedup": {},
                               "eval": {}, "monitor": {}, "geo": {}}
    for key in ("seed", "out", "threads", "quiet"):
        value = getattr(args, key, None)
        if value is not None:
            direct[""][key] = value
    for key in (
        "taxonomy", "manifest", "test_manifest", "embeddings", "checkpoint",
        "events", "series", "compare_series", "detections",
    ):
        value = getattr(args, key, None)
        if value is not None:
            direct["paths"][key] = value
    if getattr(args, "train_manifest", None) is not None:
        # ablation mode trains from paths.manifest and tests on paths.test_manifest
        direct["paths"]["test_manifest"] = direct["paths"].pop("manifest", None) or ""
        if not direct["paths"]["test_manifest"]:
            del direct["paths"]["test_manifest"]
        direct["paths"]["manifest"] = args.train_manifest
    if getattr(args, "loss", None) is not None:
        direct["train"]["loss_variant"] = args.loss
    if getattr(args, "no_class_negatives", False):
        direct["train"]["use_class_negatives"] = False
    if getattr(args, "no_places_aug", False):
        direct["train"]["use_places_aug"] = False
    for flag, key in (("lr", "lr"), ("batch_size", "batch_size"),
                      ("min_epochs", "min_epochs"), ("max_epochs", "max_epochs")):
        value = getattr(args, flag, None)
        if value is not None:
            direct["train"][key] = value
    if getattr(args, "hidden", None) is not None:
        direct["train"]["hidden"] = tuple(int(v) for v in args.hidden.split(",") if v.strip())
    for flag in ("radius", "metric", "strategy"):
        value = getattr(args, flag, None)
        if value is not None:
            direct["dedup"][flag] = value
    if getattr(args, "augmented", None) is not None:
        direct["eval"]["augmented"] = args.augmented
    if getattr(args, "threshold", None) is not None:
        direct["eval"]["confidence_threshold"] = args.threshold
    for flag, key in (("w", "w"), ("rti_threshold", "rti_threshold"),
                      ("smooth_window", "smooth_window")):
        value = getattr(args, flag, None)
        if value is not None:
            direct["monitor"][key] = value
    if getattr(args, "x_values", None) is not None:
        direct["geo"]["x_values"] = tuple(float(v) for v in args.x_values.split(",") if v.strip())
    return {k: v for k, v in direct.items() if v}


def _say(cfg, message: str) -> None:
    if not cfg.quiet:
        print(message)


def _write_report(cfg, command: str, payload: dict) -> Path:
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    report = {
        "version": _version_string(),
        "command": command,
        "config": cfg.echo(),
        **payload,
    }
    path = out / f"{command.replace('-', '_')}_report.json"
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(report, fh, sort_keys=True, indent=2)
        fh.write("\n")
    return path


def _load_training_inputs(cfg, manifest_key: str = "manifest"):
    from . import dataset as ds
    from . import taxonomy as tx

    tax_path = cfg.path("taxonomy", required=True)
    taxonomy = tx.load_taxonomy(tax_path)
    records = ds.load_manifest(cfg.path(manifest_key, required=True), taxonomy)
    store = ds.load_embeddings(cfg.path("embeddings", required=True))
    ds.validate_embedding_coverage(records, store)
    return taxonomy, records, store


def _score_records(params, records, store, taxonomy, variant):
    from . import dataset as ds
    from . import evaluation as ev
    from . import model as md

    inc_rows, pl_rows = [], []
    for batch in ds.batch_iter(records, store, taxonomy, 4096, seed=0, epoch=0):
        inc_conf, pl_conf = md.predict_confidences(params, batch.embeddings, variant)
        inc_rows += ev.scored_examples(batch.records, inc_conf, "incident", taxonomy)
        pl_rows += ev.scored_examples(batch.records, pl_conf, "place", taxonomy)
    return inc_rows, pl_rows


def _ap_payload(result) -> dict:
    return {
        "mean_ap": result.mean_ap,
        "per_class_ap": result.per_class_ap,
        "pool_positives": result.pool_positives,
        "pool_negatives": result.pool_negatives,
    }


def cmd_synth(cfg, args) -> dict:
    from . import synth

    data = synth.generate(cfg.synth)
    paths = synth.write_outputs(data, cfg.out)
    _say(cfg, f"synth: {data.store.count} embeddings, {len(data.detections)} detections -> {cfg.out}")
    return {
        "files": {k: str(v) for k, v in paths.items()},
        "counts": data.meta["counts"],
        "burst_onsets": [d.isoformat() for d in data.burst_onsets],
    }


def cmd_train(cfg, args) -> dict:
    from . import model as md
    from . import trainer

    taxonomy, records, store = _load_training_inputs(cfg)
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    result = trainer.train(
        records, store, taxonomy, cfg.train, log_path=out / "train_log.jsonl"
    )
    ckpt = out / "checkpoint.bin"
    md.save_checkpoint(
        ckpt,
        result.params,
        cfg.train.loss_variant,
        taxonomy.content_hash(),
        config_echo={"seed": cfg.seed, "train": cfg.echo()["train"]},
    )
    _say(cfg, f"train: {result.epochs_run} epochs -> {ckpt}")
    return {
        "checkpoint": str(ckpt),
        "epoch_log": str(out / "train_log.jsonl"),
        "epochs_run": result.epochs_run,
        "final_epoch": result.log[-1],
        "split_sizes": {
            "train": len(result.split.train),
            "val": len(result.split.val),
            "test": len(result.split.test),
        },
    }


def _write_per_class_csv(path: Path, results: dict) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["task", "class", "ap", "known_pos", "known_neg"])
        for task, res in results.items():
            for name, ap in res.per_class_ap.items():
                writer.writerow([
                    task, name,
                    "" if ap is None else repr(ap),
                    res.pool_positives[name], res.pool_negatives[name],
                ])


def cmd_eval(cfg, args) -> dict:
    from . import evaluation as ev
    from . import model as md
    from . import taxonomy as tx
    from . import dataset as ds

    if args.table1:
        return _run_ablation(cfg)

    taxonomy = tx.load_taxonomy(cfg.path("taxonomy", required=True))
    manifest = cfg.path("test_manifest") or cfg.path("manifest", required=True)
    records = ds.load_manifest(manifest, taxonomy)
    store = ds.load_embeddings(cfg.path("embeddings", required=True))
    ds.validate_embedding_coverage(records, store)
    params, meta = md.load_checkpoint(cfg.path("checkpoint", required=True))
    if meta.get("taxonomy_hash") not in (None, taxonomy.content_hash()):
        raise DataError("checkpoint was trained against a different taxonomy")
    variant = meta.get("loss_variant", "cn")

    inc_rows, pl_rows = _score_records(params, records, store, taxonomy, variant)
    aug = cfg.eval.augmented
    inc_res = ev.detection_map(inc_rows, "incident", taxonomy, include_places_aug=aug)
    pl_res = ev.detection_map(pl_rows, "place", taxonomy, include_places_aug=aug)

    pos_inc = [
        e for e in inc_rows if e.source != "places_aug" and e.targets.sum() == 1.0
    ]
    top = {}
    if pos_inc:
        top["top1"] = ev.topk_accuracy(pos_inc, 1)
        if taxonomy.n_incidents >= 5:
            top["top5"] = ev.topk_accuracy(pos_inc, 5)

    by_id = {e.id: e for e in inc_rows}
    neg_examples, probed = [], []
    for r in records:
        if r.incident_pos is None and r.incident_neg:
            for name in sorted(r.incident_neg):
                neg_examples.append(by_id[r.id])
                probed.append(taxonomy.incident_index(name))
    hard = None
    if neg_examples:
        rep = ev.hard_negative_report(
            neg_examples, probed, threshold=cfg.eval.confidence_threshold
        )
        hard = {"accuracy": rep.accuracy, "n": rep.n,
                "threshold": cfg.eval.confidence_threshold}

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    _write_per_class_csv(out / "per_class_ap.csv", {"incident": inc_res, "place": pl_res})
    _say(cfg, f"eval: incident mAP {inc_res.mean_ap:.4f}, place mAP {pl_res.mean_ap:.4f}")
    return {
        "augmented": aug,
        "loss_variant": variant,
        "incident": _ap_payload(inc_res),
        "place": _ap_payload(pl_res),
        "classification": top,
        "hard_negatives": hard,
        "per_class_csv": str(out / "per_class_ap.csv"),
    }


ABLATION_ROWS = (
    ("base", "ce", False, True),
    ("base", "cn", False, True),
    ("base", "cn", True, False),
    ("base", "cn", True, True),
    ("wide", "cn", True, True),
)


def _run_ablation(cfg) -> dict:
    from . import evaluation as ev
    from . import trainer

    taxonomy, train_records, store = _load_training_inputs(cfg)
    test_manifest = cfg.path("test_manifest", required=True)
    from . import dataset as ds

    test_records = ds.load_manifest(test_manifest, taxonomy)
    ds.validate_embedding_coverage(test_records, store)

    rows = []
    for trunk, variant, class_negs, places in ABLATION_ROWS:
        hidden = cfg.train.hidden
        if trunk == "wide":
            hidden = tuple(2 * h for h in hidden)
        row_cfg = replace(
            cfg.train,
            loss_variant=variant,
            use_class_negatives=class_negs,
            use_places_aug=places,
            hidden=hidden,
        )
        result = trainer.train(train_records, store, taxonomy, row_cfg)
        inc_rows, pl_rows = _score_records(
            result.params, test_records, store, taxonomy, variant
        )
        cells = {}
        for label, aug in (("test", False), ("augmented", True)):
            inc = ev.detection_map(inc_rows, "incident", taxonomy, include_places_aug=aug)
            pl = ev.detection_map(pl_rows, "place", taxonomy, include_places_aug=aug)
            cells[label] = {"incident_map": inc.mean_ap, "place_map": pl.mean_ap}
        rows.append(
            {
                "trunk": trunk,
                "loss": variant.upper(),
                "class_negatives": class_negs,
                "places_images": places,
                "epochs_run": result.epochs_run,
                **cells,
            }
        )
        _say(cfg, f"ablation row {trunk}/{variant.upper()}"
                  f"{'/CN-labels' if class_negs else ''}{'/places' if places else ''} done")

    def fmt(x: float) -> str:
        return "n/a" if x != x else f"{x:.4f}"

    lines = [
        "| Trunk | Loss | Class negatives | Places images | "
        "Incident mAP (test) | Place mAP (test) | Incident mAP (augmented) | Place mAP (augmented) |",
        "|---|---|---|---|---|---|---|---|",
    ]
    for r in rows:
        lines.append(
            "| {trunk} | {loss} | {cn} | {pl} | {it} | {pt} | {ia} | {pa} |".format(
                trunk=r["trunk"],
                loss=r["loss"],
                cn="yes" if r["class_negatives"] else "",
                pl="yes" if r["places_images"] else "",
                it=fmt(r["test"]["incident_map"]),
                pt=fmt(r["test"]["place_map"]),
                ia=fmt(r["augmented"]["incident_map"]),
                pa=fmt(r["augmented"]["place_map"]),
            )
        )
    table = "\n".join(lines) + "\n"
    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "ablation.md").write_text(table, encoding="utf-8")
    _say(cfg, table.rstrip())
    return {"rows": rows, "markdown": str(out / "ablation.md")}


def cmd_dedup(cfg, args) -> dict:
    from . import dataset as ds
    from . import dedup as dd
    from . import taxonomy as tx

    taxonomy = tx.load_taxonomy(cfg.path("taxonomy", required=True))
    records = ds.load_manifest(cfg.path("manifest", required=True), taxonomy)
    store = ds.load_embeddings(cfg.path("embeddings", required=True))
    ds.validate_embedding_coverage(records, store)

    ids = [r.id for r in records]
    row_of = {r.id: r.embedding_index for r in records}
    import numpy as np

    view = ds.EmbeddingStore(
        np.ascontiguousarray(store.data[[row_of[i] for i in ids]])
    )
    assignment = dd.dedup(view, ids, cfg.dedup)
    kept = dd.keep_representatives(records, assignment)

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    reps = set(assignment.representatives)
    with open(out / "clusters.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["id", "cluster_id", "is_representative"])
        for rid in sorted(assignment.cluster_of):
            writer.writerow(
                [rid, assignment.cluster_of[rid], int(rid in reps)]
            )
    ds.write_manifest(out / "deduped.jsonl", kept)
    _say(cfg, f"dedup: {len(records)} records -> {assignment.n_clusters} clusters")
    return {
        "n_records": len(records),
        "n_clusters": assignment.n_clusters,
        "n_removed": len(records) - len(kept),
        "clusters_csv": str(out / "clusters.csv"),
        "deduped_manifest": str(out / "deduped.jsonl"),
    }


def cmd_filter(cfg, args) -> dict:
    from . import analytics as an

    detections, labels = an.load_detections_csv(cfg.path("detections", required=True))
    category = args.category
    threshold = cfg.eval.confidence_threshold
    keep = [
        i
        for i, d in enumerate(detections)
        if (category is None or d.category == category) and d.confidence > threshold
    ]
    kept = [detections[i] for i in keep]
    kept_labels = [labels[i] for i in keep] if labels is not None else None

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    an.write_detections_csv(out / "filtered.csv", kept, kept_labels)
    _say(cfg, f"filter: kept {len(kept)}/{len(detections)} above {threshold}")
    return {
        "threshold": threshold,
        "category": category,
        "n_input": len(detections),
        "n_kept": len(kept),
        "filtered_csv": str(out / "filtered.csv"),
    }


def cmd_geo_eval(cfg, args) -> dict:
    from . import analytics as an

    detections, labels = an.load_detections_csv(cfg.path("detections", required=True))
    events = an.load_events_csv(cfg.path("events", required=True))
    if not events:
        raise DataError("events file is empty")
    threshold = cfg.eval.confidence_threshold
    filtered = an.filter_by_confidence(detections, None, threshold)
    if not filtered:
        raise DataError(f"no detections above confidence {threshold}")
    xs = list(cfg.geo.x_values)
    unfiltered_curve = an.accuracy_at_km(detections, events, xs)
    filtered_curve = an.accuracy_at_km(filtered, events, xs)

    per_event_gate = {
        e.name: len(an.radius_gate(filtered, (e.lat, e.lon), cfg.geo.radius_km))
        for e in events
    }
    ap_payload = None
    if labels is not None:
        res = an.event_ap(detections, labels, seed=cfg.seed)
        per_category = {}
        for cat in sorted({e.category for e in events}):
            rows = [(d, y) for d, y in zip(detections, labels) if d.category == cat]
            if rows and any(y for _, y in rows):
                sub = an.event_ap([d for d, _ in rows], [y for _, y in rows], seed=cfg.seed)
                per_category[cat] = {"ap": sub.ap, "random_baseline_ap": sub.baseline_ap}
        ap_payload = {
            "ap": res.ap,
            "random_baseline_ap": res.baseline_ap,
            "n_shuffles": res.n_shuffles,
            "seed": res.seed,
            "per_category": per_category,
        }

    out = Path(cfg.out)
    out.mkdir(parents=True, exist_ok=True)
    with open(out / "accuracy_curve.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["x_km", "unfiltered", "filtered"])
        for x in xs:
            writer.writerow([repr(float(x)), repr(unfiltered_curve[x]), repr(filtered_curve[x])])
    dominance = all(filtered_curve[x] >= unfiltered_curve[x] for x in xs)
    _say(cfg, f"geo-eval: filtered curve dominates: {dominance}")
    return {
        "threshold": threshold,
        "x_km": xs,
        "unfiltered": [unfiltered_curve[x] for x in xs],
        "filtered": [filtered_curve[x] for x in xs],
        "filtered_dominates": dominance,
        "radius_km": cfg.geo.radius_km,
        "detections_within_radius": per_event_gate,
        "event_ap": ap_payload,
        "curve_csv": str(out / "accuracy_curve.csv"),
    }


def cmd_monitor(cfg, args) -> dict:
    from . import analytics as an

    series = an.load_series_csv(cfg.path("series", required=True))
    events = an.load_events_csv(cfg.path("events", required=True))
    w = cfg.monitor.w
    result = an.mrti(series, events, w)
    flagged = an.flag_peaks(series, w, cfg.monitor.rti_threshold)
    event_days = {e.timestamp for e in events}
    payload = {
        "w": w,
        "rti_threshold": cfg.monitor.rti_threshold,
        "mrti": result.mean,
        "per_event_rti": result.per_event,
        "undefined_events": list(result.undefined_events),
        "flagged_peaks": [d.isoformat() for d in flagged],
        "flagged_event_days": sum(1 for d in flagged if d in event_days),
    }
    compare = cfg.path("compare_series")
    if compare is not None:
        other = an.load_series_csv(compare)
        payload["histogram_iou"] = an.histogram_iou(
            series, other, cfg.monitor.smooth_window
        )
    _say(cfg, f"monitor: mRTI {result.mean}, {len(flagged)} peak(s) flagged")
    return payload


_COMMANDS = {
    "synth": cmd_synth,
    "train": cmd_train,
    "eval": cmd_eval,
    "dedup": cmd_dedup,
    "filter": cmd_filter,
    "geo-eval": cmd_geo_eval,
    "monitor": cmd_monitor,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    if getattr(args, "threads", None):
        for var in ("OMP_NUM_THREADS", "OPENBLAS_NUM_THREADS", "MKL_NUM_THREADS"):
            os.environ[var] = str(args.threads)
    try:
        from .config import resolve_config

        cfg = resolve_config(args.config, args.overrides, _direct_layer(args))
        payload = _COMMANDS[args.command](cfg, args)
        report_path = _write_report(cfg, args.command, payload)
        _say(cfg, f"report: {report_path}")
        return 0
    except IncidentKitError as exc:
        kind = _ERROR_KINDS.get(exc.exit_code, "internal")
        message = " ".join(str(exc).split())
        print(f"incidentkit: error: {kind}: {message}", file=sys.stderr)
        return exc.exit_code


if __name__ == "__main__":
    sys.exit(main())
