"""Command-line front end: one binary, one subcommand per pipeline stage.

Corpora live in a data directory holding ``manifest.tsv`` plus
``features.npy`` with one row per manifest line.  Config files are INI
style with one section per module; command-line flags win over file
values, and the effective configuration is echoed to stderr so every run
can be reproduced from its log.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys
from pathlib import Path

import numpy as np

from .data import (
    BaseFeatureProvider,
    SynthConfig,
    ingest_coco,
    partition_by_scale,
    read_manifest,
    synth_generate,
    write_manifest,
)
from .losses import LossConfig
from .metrics import EvalConfig, GroundTruth, scale_report
from .retrieval import EmbeddingStore, Hit, RankedResult, embed_all, embed_query, query
from .train import TrainConfig, load_checkpoint, train

# Section key tables double as the unknown-key gate; a unit test keeps
# them in sync with the dataclass fields.
SYNTH_TYPES = {
    "n_classes": int,
    "zipf_exponent": float,
    "area_log_mean": float,
    "area_log_sd": float,
    "feature_dim": int,
    "intra_class_sd": float,
    "scale_noise_gain": float,
    "seed": int,
    "n_objects": int,
    "objects_per_image": int,
}
TRAIN_TYPES = {
    "steps": int,
    "batch": int,
    "groups": int,
    "clusters": int,
    "knn": int,
    "refresh_period": int,
    "n_shared": int,
    "kmeans_iters": int,
    "lr": float,
    "weight_decay": float,
    "ema_momentum": float,
    "seed": int,
    "hidden_dim": int,
    "trunk_layers": int,
    "student_dim": int,
    "teacher_dim": int,
}
LOSS_TYPES = {
    "sigma": float,
    "delta": float,
    "tau": float,
    "epsilon_floor": float,
    "full_grad": bool,
}
EVAL_TYPES = {"topk": int, "max_queries": int}
SECTION_TYPES = {
    "synth": SYNTH_TYPES,
    "train": TRAIN_TYPES,
    "loss": LOSS_TYPES,
    "eval": EVAL_TYPES,
}


class UsageError(ValueError):
    """Bad invocation: reported on stderr with exit code 2."""


def _parse_bool(text: str) -> bool:
    low = text.strip().lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def read_config(path) -> dict:
    import configparser

    parser = configparser.ConfigParser()
    with open(path, "r", encoding="utf-8") as fh:
        parser.read_file(fh)
    sections = {}
    for name in parser.sections():
        if name not in SECTION_TYPES:
            raise UsageError(f"{path}: unknown config section [{name}]")
        types = SECTION_TYPES[name]
        out = {}
        for key, value in parser.items(name):
            if key not in types:
                raise UsageError(f"{path}: unknown key '{key}' in [{name}]")
            kind = types[key]
            try:
                out[key] = _parse_bool(value) if kind is bool else kind(value)
            except UsageError:
                raise
            except ValueError as exc:
                raise UsageError(f"{path}: [{name}] {key}: {exc}") from exc
        sections[name] = out
    return sections


def _section(config: dict, name: str) -> dict:
    return dict(config.get(name, {}))


def _echo_config(label: str, cfg) -> None:
    """Reproducibility log: the full effective config, one key per line."""
    if dataclasses.is_dataclass(cfg):
        cfg = dataclasses.asdict(cfg)
    for key in sorted(cfg):
        value = cfg[key]
        if isinstance(value, dict):
            for sub in sorted(value):
                print(f"{label}.{key}.{sub} = {value[sub]}", file=sys.stderr)
        else:
            print(f"{label}.{key} = {value}", file=sys.stderr)


def _require_dir(path, flag: str) -> Path:
    p = Path(path)
    if not p.is_dir():
        raise UsageError(f"{flag}: no such directory: {p}")
    return p


def _load_data(data_dir):
    data_dir = _require_dir(data_dir, "--data")
    manifest = data_dir / "manifest.tsv"
    feats = data_dir / "features.npy"
    for p in (manifest, feats):
        if not p.is_file():
            raise ValueError(f"{p}: missing corpus file")
    table = read_manifest(manifest)
    features = np.load(feats)
    if features.ndim != 2 or features.shape[0] != len(table):
        raise ValueError(
            f"{feats}: {features.shape[0]} feature rows for {len(table)} objects"
        )
    return table, features, BaseFeatureProvider.from_table(table, features)


def _write_corpus(out_dir, table, features) -> None:
    write_manifest(table, out_dir / "manifest.tsv")
    np.save(out_dir / "features.npy", np.ascontiguousarray(features, dtype=np.float64))


def cmd_synth(args) -> int:
    kwargs = _section(read_config(args.config) if args.config else {}, "synth")
    if args.seed is not None:
        kwargs["seed"] = args.seed
    cfg = SynthConfig(**kwargs)
    out = _require_dir(args.out, "--out")
    _echo_config("synth", cfg)
    table, features = synth_generate(cfg)
    _write_corpus(out, table, features)
    print(f"wrote {len(table)} objects to {out}", file=sys.stderr)
    return 0


def cmd_ingest(args) -> int:
    out = _require_dir(args.out, "--out")
    table = ingest_coco(args.annotations)
    features = np.load(args.features)
    if features.ndim != 2 or features.shape[0] != len(table):
        raise ValueError(
            f"{args.features}: {features.shape[0]} feature rows for {len(table)} annotations"
        )
    _echo_config("ingest", {"annotations": args.annotations, "features": args.features})
    _write_corpus(out, table, features)
    print(f"wrote {len(table)} objects to {out}", file=sys.stderr)
    return 0


def _train_config(args) -> TrainConfig:
    config = read_config(args.config) if args.config else {}
    kwargs = _section(config, "train")
    loss_kwargs = _section(config, "loss")
    if args.steps is not None:
        kwargs["steps"] = args.steps
    if args.seed is not None:
        kwargs["seed"] = args.seed
    if "steps" not in kwargs:
        raise UsageError("train: steps required (flag --steps or [train] steps)")
    if loss_kwargs:
        kwargs["loss"] = LossConfig(**loss_kwargs)
    return TrainConfig(**kwargs)


def cmd_train(args) -> int:
    table, _, provider = _load_data(args.data)
    cfg = _train_config(args)
    out = _require_dir(args.out, "--out")
    state = load_checkpoint(args.resume) if args.resume else None
    _echo_config("train", cfg)
    mode = "a" if args.resume else "w"
    with open(out / "loss.log", mode, encoding="utf-8", newline="\n") as log:
        state, lines = train(
            cfg, table, provider, state=state, log=log, checkpoint_path=out / "checkpoint.bin"
        )
    print(f"trained to step {state.step}; {len(lines)} new log lines", file=sys.stderr)
    return 0


def _load_model(checkpoint, data_dir):
    state = load_checkpoint(checkpoint)
    table, _, provider = _load_data(data_dir)
    groups = partition_by_scale(table, state.cfg.groups)
    return state, table, provider, groups


def cmd_embed(args) -> int:
    state, table, provider, groups = _load_model(args.checkpoint, args.data)
    _echo_config("embed", {"checkpoint": args.checkpoint, "concat": args.concat})
    store = embed_all(state.student, table, provider, groups, concat=args.concat)
    store.save(args.out)
    print(f"embedded {store.count} objects at width {store.dim}", file=sys.stderr)
    return 0


def _parse_bbox(text: str):
    parts = text.split(",")
    if len(parts) != 4:
        raise UsageError(f"--query-bbox expects x,y,w,h, got {text!r}")
    try:
        x, y, w, h = (float(p) for p in parts)
    except ValueError as exc:
        raise UsageError(f"--query-bbox: {exc}") from exc
    if w <= 0 or h <= 0:
        raise UsageError("--query-bbox width and height must be positive")
    return x, y, w, h


def _find_object(table, image_id: int, bbox) -> int:
    for oid in table.image_index.get(image_id, []):
        if table.get(oid).bbox == bbox:
            return oid
    raise ValueError(f"no object with bbox {bbox} in image {image_id}")


def _query_store(state, table, provider, groups, store, oid: int, topk: int):
    rec = table.get(oid)
    concat = store.dim == 2 * state.cfg.student_dim
    if not concat and store.dim != state.cfg.student_dim:
        raise ValueError(
            f"store width {store.dim} does not match checkpoint width {state.cfg.student_dim}"
        )
    emb = embed_query(
        state.student,
        groups,
        provider.base_features(np.array([oid]))[0],
        rec.area,
        concat=concat,
    )
    return query(store, emb, topk, table, query_id=oid)


def cmd_query(args) -> int:
    if args.topk < 1:
        raise UsageError("--topk must be at least 1")
    bbox = _parse_bbox(args.query_bbox)
    state, table, provider, groups = _load_model(args.checkpoint, args.data)
    store = EmbeddingStore.load(args.store)
    oid = _find_object(table, args.query_image, bbox)
    _echo_config(
        "query",
        {"checkpoint": args.checkpoint, "object": oid, "topk": args.topk},
    )
    result = _query_store(state, table, provider, groups, store, oid, args.topk)
    for rank, hit in enumerate(result.hits, start=1):
        x, y, w, h = hit.bbox
        print(f"{rank}\t{hit.object_id}\t{hit.distance!r}\t{hit.image_id}\t{x!r}\t{y!r}\t{w!r}\t{h!r}")
    return 0


def _eval_settings(args):
    config = read_config(args.config) if args.config else {}
    kwargs = _section(config, "eval")
    if getattr(args, "topk", None) is not None:
        kwargs["topk"] = args.topk
    if getattr(args, "max_queries", None) is not None:
        kwargs["max_queries"] = args.max_queries
    topk = kwargs.get("topk")
    if topk is not None and topk < 1:
        raise UsageError("--topk must be at least 1")
    max_queries = kwargs.get("max_queries")
    if max_queries is not None and max_queries < 1:
        raise UsageError("--max-queries must be at least 1")
    return topk, max_queries


def _ground_truth(table) -> GroundTruth:
    gt = GroundTruth.from_table(table)
    if len(gt.gallery) < len(table):
        raise ValueError("evaluation needs class labels on every object")
    return gt


def cmd_eval(args) -> int:
    topk, max_queries = _eval_settings(args)
    state, table, provider, groups = _load_model(args.checkpoint, args.data)
    store = EmbeddingStore.load(args.store)
    gt = _ground_truth(table)
    query_ids = [int(i) for i in table.ids]
    if max_queries is not None:
        query_ids = query_ids[:max_queries]
    _echo_config(
        "eval",
        {"checkpoint": args.checkpoint, "queries": len(query_ids), "topk": topk},
    )
    results = []
    with open(args.rankings, "w", encoding="utf-8", newline="\n") as fh:
        for qid in query_ids:
            res = _query_store(state, table, provider, groups, store, qid, store.count)
            results.append(res)
            ranked = ",".join(f"{h.object_id}:{h.distance!r}" for h in res.hits)
            fh.write(f"{qid}\t{ranked}\n")
    report = scale_report(results, gt, EvalConfig(topk=topk))
    with open(args.report, "w", encoding="utf-8", newline="\n") as fh:
        fh.write(report)
    sys.stdout.write(report)
    return 0


def _read_rankings(path, table):
    results = []
    with open(path, "r", encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.rstrip("\n")
            if not line:
                continue
            try:
                qid_text, ranked = line.split("\t")
            except ValueError as exc:
                raise ValueError(f"{path}: line {lineno}: expected 2 fields") from exc
            hits = []
            if ranked:
                for item in ranked.split(","):
                    oid_text, dist_text = item.split(":")
                    rec = table.get(int(oid_text))
                    hits.append(
                        Hit(rec.object_id, float(dist_text), rec.image_id, rec.bbox)
                    )
            results.append(RankedResult(int(qid_text), tuple(hits)))
    return results


def cmd_report(args) -> int:
    topk, _ = _eval_settings(args)
    table, _, _ = _load_data(args.data)
    gt = _ground_truth(table)
    results = _read_rankings(args.rankings, table)
    _echo_config("report", {"rankings": args.rankings, "topk": topk})
    report = scale_report(results, gt, EvalConfig(topk=topk))
    if args.out:
        with open(args.out, "w", encoding="utf-8", newline="\n") as fh:
            fh.write(report)
    sys.stdout.write(report)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="groupvec",
        description="Scale-grouped embedding training and object retrieval.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus")
    p.add_argument("--config")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_synth)

    p = sub.add_parser("ingest", help="import COCO-style annotations plus features")
    p.add_argument("--annotations", required=True)
    p.add_argument("--features", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(handler=cmd_ingest)

    p = sub.add_parser("train", help="train a model on a corpus")
    p.add_argument("--config")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--steps", type=int)
    p.add_argument("--seed", type=int)
    p.add_argument("--resume", help="checkpoint to continue from")
    p.set_defaults(handler=cmd_train)

    p = sub.add_parser("embed", help="embed a corpus into a store")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--concat", action="store_true", help="keep both heads")
    p.set_defaults(handler=cmd_embed)

    p = sub.add_parser("query", help="rank the store against one query box")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--query-image", type=int, required=True)
    p.add_argument("--query-bbox", required=True, help="x,y,w,h")
    p.add_argument("--topk", type=int, default=10)
    p.set_defaults(handler=cmd_query)

    p = sub.add_parser("eval", help="run every object as a query and score")
    p.add_argument("--config")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--store", required=True)
    p.add_argument("--rankings", required=True, help="raw ranking output file")
    p.add_argument("--report", required=True, help="per-scale report file")
    p.add_argument("--topk", type=int)
    p.add_argument("--max-queries", type=int)
    p.set_defaults(handler=cmd_eval)

    p = sub.add_parser("report", help="re-score a saved rankings file")
    p.add_argument("--config")
    p.add_argument("--rankings", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out")
    p.add_argument("--topk", type=int)
    p.set_defaults(handler=cmd_report)

    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.handler(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 2
    except (ValueError, OSError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
