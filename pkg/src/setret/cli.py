"""
Command-line entry point.

    setret gen       synthetic galleries, stress-test datasets and judgments
    setret train     train a set aggregator (or a pooling baseline)
    setret index     build a descriptor-per-set index (and optionally an element index)
    setret query     rank the sets of an index for a multi-identity query
    setret eval      stress-test table: nDCG@10/30 and per-query time per method
    setret gramdiff  identity-descriptor orthogonality for one or more models

Every command takes an optional ``--config`` JSON file; flags override its
values. Outputs embed the resolved configuration. Exit codes: 0 success,
1 internal or I/O error, 2 user error (bad arguments, unknown identities,
mismatched files).
"""

from __future__ import annotations

import argparse
import contextlib
import csv
import hashlib
import json
import logging
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import __version__
from .aggregator import MODEL_VERSION, model_from_dict, model_to_dict
from .engine import (
    ClosedWorldError,
    QuerySpec,
    aggregate_query,
    build_element_index,
    build_set_index,
    build_tag_index,
    element_query_descriptors,
    make_query_descriptors,
    rerank,
    score_desc_per_element,
    score_desc_per_set,
    score_pretag,
)
from .indexio import (
    IndexFormatError,
    read_collection,
    read_element_index,
    read_set_index,
    write_collection,
    write_element_index,
    write_set_index,
)
from .synth import gallery_matrix, read_gallery, sample_elements, write_gallery
from .trainer import TrainConfig, TrainingDiverged, train

log = logging.getLogger("setret")


class UserError(Exception):
    """Bad input from the caller; exit code 2."""


# ---------------------------------------------------------------------------
# helpers
# ---------------------------------------------------------------------------


def _sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _load_config(path) -> dict:
    if path is None:
        return {}
    p = Path(path)
    if not p.is_file():
        raise UserError(f"config file not found: {p}")
    try:
        doc = json.loads(p.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UserError(f"{p}: invalid JSON ({exc})") from exc
    if not isinstance(doc, dict):
        raise UserError(f"{p}: config must be a JSON object")
    return doc


def _need_file(path, what: str) -> Path:
    p = Path(path)
    if not p.is_file():
        raise UserError(f"{what} not found: {p}")
    return p


def _claim_output(path, force: bool) -> Path:
    p = Path(path)
    if p.exists() and not force:
        raise UserError(f"{p} exists; pass --force to overwrite")
    if not p.parent.exists():
        raise UserError(f"output directory does not exist: {p.parent}")
    return p


def _parse_range(text: str) -> list[int]:
    """``"0..3"`` or ``"0,2,3"`` -> list of ints."""
    try:
        if ".." in text:
            lo, hi = text.split("..", 1)
            vals = list(range(int(lo), int(hi) + 1))
        else:
            vals = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UserError(f"bad range {text!r}: expected e.g. 0..3 or 0,1,3") from exc
    if not vals or min(vals) < 0:
        raise UserError(f"bad range {text!r}")
    return vals


def _parse_ids(text: str) -> list[int]:
    try:
        ids = [int(v) for v in text.split(",") if v.strip()]
    except ValueError as exc:
        raise UserError(f"identity ids must be integers: {text!r}") from exc
    if not ids:
        raise UserError("--ids is empty")
    return ids


def _dump_json(obj, path) -> None:
    Path(path).write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n", encoding="utf-8")


def _bench_config(args, overrides: dict):
    from .experiment import BenchConfig

    doc = _load_config(args.config)
    for key, value in overrides.items():
        if value is None:
            continue
        if key.startswith("stress."):
            doc.setdefault("stress", {})[key[len("stress."):]] = value
        else:
            doc[key] = value
    try:
        return BenchConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UserError(str(exc)) from exc


# ---------------------------------------------------------------------------
# gen
# ---------------------------------------------------------------------------


def cmd_gen(args) -> int:
    from .bench import synth_stress_datasets
    from .experiment import make_world

    cfg = _bench_config(args, {
        "n_test_identities": args.identities,
        "n_train_identities": args.train_identities,
        "n_distractor_identities": args.distractor_identities,
        "dim": args.dim,
        "seed": args.seed,
        "noise_sigma": args.noise,
        "space_offset": args.space_offset,
        "space_decay": args.space_decay,
        "stress.n_sets": args.n_sets,
        "stress.n_queries": args.queries,
        "stress.seed": args.seed,
        "stress.distractors": None if args.distractors is None else _parse_range(args.distractors),
    })
    out = Path(args.out)
    names = ["train_gallery.jsonl", "gallery.jsonl", "distractors.jsonl", "judgments.jsonl", "manifest.json"]
    names += [f"sets_d{d}.npz" for d in cfg.stress.distractors]
    if out.exists() and not args.force and any((out / n).exists() for n in names):
        raise UserError(f"{out} already holds generated data; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)

    world = make_world(cfg)
    write_gallery(out / "train_gallery.jsonl", world.train_gallery)
    write_gallery(out / "gallery.jsonl", world.test_gallery)
    write_gallery(out / "distractors.jsonl", world.distractors)
    files = ["train_gallery.jsonl", "gallery.jsonl", "distractors.jsonl"]
    if not args.gallery_only:
        stress = synth_stress_datasets(world.test_gallery, world.distractors, cfg.stress)
        for d, ds in stress.datasets.items():
            write_collection(out / f"sets_d{d}.npz", ds)
            files.append(f"sets_d{d}.npz")
        (out / "judgments.jsonl").write_text(stress.judgments_jsonl(), encoding="utf-8")
        files.append("judgments.jsonl")
    manifest = {
        "setret_version": __version__,
        "config": cfg.to_dict(),
        "files": {name: _sha256(out / name) for name in files},
    }
    _dump_json(manifest, out / "manifest.json")
    if args.json:
        print(json.dumps(manifest["files"], sort_keys=True))
    else:
        for name in files:
            print(out / name)
    return 0


# ---------------------------------------------------------------------------
# train
# ---------------------------------------------------------------------------


_TRAIN_FLAGS = {
    "mode": "mode", "set_size": "set_size", "epochs": "epochs", "K": "K", "D": "D",
    "lr": "lr_finetune", "seed": "seed", "noise": "noise_sigma",
    "batches_per_epoch": "batches_per_epoch", "batch_identities": "batch_identities",
}


def cmd_train(args) -> int:
    from .experiment import BenchConfig, fit_element_whitening, fit_set_whitening

    gallery_path = _need_file(args.gallery, "gallery")
    out = _claim_output(args.out, args.force)
    log_path = _claim_output(args.log, args.force) if args.log else out.with_suffix(".log.csv")
    if args.log is None and log_path.exists() and not args.force:
        raise UserError(f"{log_path} exists; pass --force to overwrite")
    doc = _load_config(args.config)
    for flag, key in _TRAIN_FLAGS.items():
        value = getattr(args, flag)
        if value is not None:
            doc[key] = value
    gallery = read_gallery(gallery_path)
    if not gallery:
        raise UserError(f"{gallery_path}: empty gallery")
    dim = len(gallery[0].center)
    doc["D_e"] = dim
    if doc.get("mode", "netvlad") != "netvlad":
        doc["D"] = dim
    try:
        cfg = TrainConfig.from_dict(doc)
    except (TypeError, ValueError) as exc:
        raise UserError(str(exc)) from exc

    whitening = None
    if args.whiten and cfg.mode != "netvlad":
        bench = BenchConfig(dim=dim, noise_sigma=cfg.noise_sigma)
        whitening = fit_element_whitening(gallery, bench, cfg.seed)
    try:
        model, tlog = train(gallery, cfg, whitening=whitening)
    except TrainingDiverged as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    if args.whiten and cfg.mode == "netvlad":
        bench = BenchConfig(dim=dim, K=cfg.K, D=cfg.D, noise_sigma=cfg.noise_sigma,
                            setnet=cfg)
        whitening = fit_set_whitening(gallery, model, bench, cfg.seed)
    provenance = {
        "train": cfg.to_dict(),
        "whiten": bool(args.whiten),
        "gallery_sha256": _sha256(gallery_path),
        "setret_version": __version__,
    }
    out.write_text(json.dumps(model_to_dict(model, whitening, provenance)), encoding="utf-8")
    tlog.write_csv(log_path)
    summary = {"model": str(out), "log": str(log_path), "mode": cfg.mode,
               "initial_batch_loss": tlog.initial_batch_loss, "final_batch_loss": tlog.final_batch_loss,
               "w": model.head.w, "b": model.head.b}
    if args.json:
        print(json.dumps(summary, sort_keys=True))
    else:
        print(f"{out}\tmode={cfg.mode}\tloss {tlog.initial_batch_loss:.5f} -> {tlog.final_batch_loss:.5f}")
    return 0


# ---------------------------------------------------------------------------
# index
# ---------------------------------------------------------------------------


def _meta_path(index_path) -> Path:
    return Path(str(index_path) + ".json")


def cmd_index(args) -> int:
    model_path = _need_file(args.model, "model")
    data_path = _need_file(args.dataset, "dataset")
    out = _claim_output(args.out, args.force)
    meta_path = _claim_output(_meta_path(out), args.force)
    eout = _claim_output(args.elements, args.force) if args.elements else None
    model, whitening = _read_model(model_path)
    dataset = read_collection(data_path)
    if dataset.x.shape[1] != model.dim_in:
        raise UserError(f"dataset elements have dimension {dataset.x.shape[1]}, model expects {model.dim_in}")
    index = build_set_index(dataset, model, whitening)
    write_set_index(out, index)
    meta = {
        "model_version": MODEL_VERSION,
        "model_sha256": _sha256(model_path),
        "mode": model.mode,
        "D": model.dim_out,
        "dataset_sha256": _sha256(data_path),
        "n_sets": len(index),
        "failures": index.failures,
        "setret_version": __version__,
    }
    if eout is not None:
        write_element_index(eout, build_element_index(dataset))
        meta["element_index"] = eout.name
    _dump_json(meta, meta_path)
    if args.json:
        print(json.dumps({"index": str(out), "n_sets": len(index), "failures": len(index.failures)}))
    else:
        print(f"{out}\t{len(index)} sets\t{len(index.failures)} failed")
    return 0


def _read_model(path):
    try:
        doc = json.loads(Path(path).read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise UserError(f"{path}: not a model file ({exc})") from exc
    if doc.get("version") != MODEL_VERSION:
        raise UserError(f"{path}: model version {doc.get('version')!r}, this build reads {MODEL_VERSION!r}")
    return model_from_dict(doc)


def _check_index_matches(index_path, model_path) -> None:
    meta_path = _meta_path(index_path)
    if not meta_path.is_file():
        log.warning("no metadata next to %s; cannot verify it was built with %s", index_path, model_path)
        return
    meta = json.loads(meta_path.read_text(encoding="utf-8"))
    doc = json.loads(Path(model_path).read_text(encoding="utf-8"))
    if meta.get("model_version") != doc.get("version"):
        raise UserError(
            f"index {index_path} was built by model version {meta.get('model_version')!r}, "
            f"model {model_path} is version {doc.get('version')!r}"
        )
    digest = _sha256(model_path)
    if meta.get("model_sha256") != digest:
        raise UserError(
            f"index {index_path} was built with model {meta.get('model_sha256')}, "
            f"{model_path} is {digest}"
        )


# ---------------------------------------------------------------------------
# query
# ---------------------------------------------------------------------------


def _query_examples(args, ids) -> tuple[dict, list]:
    """Example descriptors per identity, from a query file or sampled from the gallery."""
    if args.query_file:
        doc = json.loads(_need_file(args.query_file, "query file").read_text(encoding="utf-8"))
        table = {int(k): np.atleast_2d(np.asarray(v, dtype=np.float64)) for k, v in doc.items()}
    else:
        if not args.gallery:
            raise UserError("query needs --gallery (to sample examples) or --query-file")
        table = {}
        gallery = read_gallery(_need_file(args.gallery, "gallery"))
        gids, centers = gallery_matrix(gallery)
        pos = {int(i): k for k, i in enumerate(gids)}
        rng = np.random.Generator(np.random.PCG64([args.seed, 41]))
        for i in ids:
            if i in pos:
                table[i] = sample_elements(np.repeat(centers[pos[i]][None], args.examples, axis=0),
                                           args.noise, rng)
    return table, [i for i in ids if i not in table]


def _tag_examples(args, head):
    gallery = read_gallery(_need_file(args.gallery, "gallery"))
    gids, centers = gallery_matrix(gallery)
    rng = np.random.Generator(np.random.PCG64([args.seed, 43]))
    n = args.tag_examples
    ex = sample_elements(np.repeat(centers, n, axis=0), args.noise, rng).reshape(len(gids), n, -1)
    return {int(i): ex[k] for k, i in enumerate(gids)}


def cmd_query(args) -> int:
    ids = _parse_ids(args.ids)
    if args.topk < 1:
        raise UserError("--topk must be >= 1")
    if args.rerank < 0:
        raise UserError("--rerank must be >= 0")
    need_elements = args.strategy in ("element", "pretag") or args.rerank > 0
    if need_elements and not args.elements:
        raise UserError(f"strategy {args.strategy!r} with --rerank {args.rerank} needs --elements")
    if args.strategy == "pretag" and not args.gallery:
        raise UserError("pretag needs --gallery (the closed-world identity list)")
    model_path = _need_file(args.model, "model")
    model, whitening = _read_model(model_path)
    ehead, ewhite = model.head, None
    if args.element_model:
        emodel, ewhite = _read_model(_need_file(args.element_model, "element model"))
        ehead = emodel.head
    elif need_elements and model.mode != "average":
        log.warning("no --element-model; scoring elements with the head of a %s model", model.mode)

    eindex = read_element_index(_need_file(args.elements, "element index")) if need_elements else None

    if args.strategy == "pretag":
        tags = build_tag_index(eindex, _tag_examples(args, ehead), ehead, threshold=args.threshold)
        result = score_pretag(tags, ids, topk=args.topk)  # ClosedWorldError -> exit 2
        return _emit(args, ids, result)

    table, missing = _query_examples(args, ids)
    if missing:
        raise UserError(f"unknown query identities: {missing}")
    spec = QuerySpec([table[i] for i in ids], ids)
    if args.strategy == "element":
        eq = element_query_descriptors(spec, ewhite)
        result = score_desc_per_element(eindex, eq, ehead, topk=args.topk)
        return _emit(args, ids, result)

    index_path = _need_file(args.index, "index")
    _check_index_matches(index_path, model_path)
    index = read_set_index(index_path)
    if args.query_agg:
        qd = aggregate_query(spec, model, whitening)
    else:
        qd = make_query_descriptors(spec, model, whitening=whitening)
    if qd.shape[1] != index.dim:
        raise UserError(f"model produces {qd.shape[1]}-d descriptors, index holds {index.dim}-d")
    result = score_desc_per_set(index, qd, model.head, topk=max(args.topk, args.rerank))
    if args.rerank:
        if eindex.ids != index.ids:
            raise UserError("element index and set index hold different sets")
        result = rerank(result, args.rerank, eindex, element_query_descriptors(spec, ewhite), ehead)
    result.rows, result.scores = result.rows[:args.topk], result.scores[:args.topk]
    return _emit(args, ids, result)


def _emit(args, ids, result) -> int:
    if args.json:
        doc = {
            "query": ids,
            "strategy": args.strategy,
            "rerank": args.rerank,
            "query_agg": bool(args.query_agg),
            "results": [{"rank": r + 1, "id": sid, "score": float(s)}
                        for r, (sid, s) in enumerate(result.pairs())],
        }
        print(json.dumps(doc))
    else:
        for r, (sid, s) in enumerate(result.pairs()):
            print(f"{r + 1}\t{sid}\t{s:.6f}")
    return 0


# ---------------------------------------------------------------------------
# eval
# ---------------------------------------------------------------------------


def cmd_eval(args) -> int:
    from .experiment import EVAL_METHODS, run_eval

    cfg = _bench_config(args, {
        "seed": args.seed,
        "stress.n_sets": args.n_sets,
        "stress.repeats": args.repeats,
        "stress.seed": args.seed,
    })
    distractors = _parse_range(args.distractors) if args.distractors else list(cfg.stress.distractors)
    if any(d not in cfg.stress.distractors for d in distractors):
        cfg = replace(cfg, stress=replace(cfg.stress, distractors=tuple(sorted(set(distractors)))))
    methods = tuple(args.methods.split(",")) if args.methods else EVAL_METHODS
    bad = [m for m in methods if m not in EVAL_METHODS]
    if bad:
        raise UserError(f"unknown methods {bad}; choose from {', '.join(EVAL_METHODS)}")
    out = Path(args.out)
    targets = [out / "results.csv", out / "summary.json", out / "judgments.jsonl"]
    if any(t.exists() for t in targets) and not args.force:
        raise UserError(f"{out} already holds results; pass --force to overwrite")
    out.mkdir(parents=True, exist_ok=True)

    rows, stress = run_eval(cfg, distractors, methods, timing=not args.no_timing)
    with open(out / "results.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh)
        w.writerow(["method", "d", "ndcg10", "ndcg30", "seconds", "speedup"])
        for r in rows:
            w.writerow([r["method"], r["d"], f"{r['ndcg10']:.4f}", f"{r['ndcg30']:.4f}",
                        "" if r["seconds"] is None else f"{r['seconds']:.6g}",
                        "" if r["speedup"] is None else f"{r['speedup']:.3f}"])
    (out / "judgments.jsonl").write_text(stress.judgments_jsonl(), encoding="utf-8")
    _dump_json({"setret_version": __version__, "config": cfg.to_dict(), "distractors": distractors,
                "results": rows}, out / "summary.json")
    if args.json:
        print(json.dumps(rows))
    else:
        print(f"{'method':<15}{'d':>3}{'nDCG@10':>9}{'nDCG@30':>9}{'ms/query':>10}{'speedup':>9}")
        for r in rows:
            ms = "" if r["seconds"] is None else f"{1e3 * r['seconds']:.3f}"
            sp = "" if r["speedup"] is None else f"{r['speedup']:.2f}"
            print(f"{r['method']:<15}{r['d']:>3}{r['ndcg10']:>9.2f}{r['ndcg30']:>9.2f}{ms:>10}{sp:>9}")
    return 0


# ---------------------------------------------------------------------------
# gramdiff
# ---------------------------------------------------------------------------


def cmd_gramdiff(args) -> int:
    from .bench import gram_diff, identity_descriptors

    gallery = read_gallery(_need_file(args.gallery, "gallery"))
    if len(gallery) < 2:
        raise UserError("gram_diff needs at least two identities")
    models = [(Path(p).stem, *_read_model(_need_file(p, "model"))) for p in args.model]
    _, centers = gallery_matrix(gallery)
    out = {}
    for name, model, whitening in [("elements", None, None)] + models:
        rng = np.random.Generator(np.random.PCG64([args.seed, 31]))
        use = None if model is None or model.mode == "average" else model
        v = identity_descriptors(use, centers, args.samples, args.noise, rng, whitening)
        out[name] = gram_diff(v)
    if args.json:
        print(json.dumps(out))
    else:
        for name, value in out.items():
            print(f"{name}\t{value:.4f}")
    return 0


# ---------------------------------------------------------------------------
# argument parsing
# ---------------------------------------------------------------------------


def _common(defaults: bool) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    kw = {} if defaults else {"default": argparse.SUPPRESS}
    p.add_argument("--json", action="store_true", help="machine-readable output", **kw)
    p.add_argument("--threads", type=int, help="cap BLAS worker threads", **({"default": None} if defaults else kw))
    p.add_argument("-v", "--verbose", action="count", help="more logging", **({"default": 0} if defaults else kw))
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="setret", description="Set retrieval with compact set descriptors.",
                                     parents=[_common(True)])
    parser.add_argument("--version", action="version", version=f"setret {__version__} (model format {MODEL_VERSION})")
    sub = parser.add_subparsers(dest="command", required=True)
    common = _common(False)

    g = sub.add_parser("gen", parents=[common], help="generate galleries and stress-test datasets")
    g.add_argument("--config")
    g.add_argument("--out", required=True, help="output directory")
    g.add_argument("--identities", type=int, help="test-gallery identities")
    g.add_argument("--train-identities", type=int)
    g.add_argument("--distractor-identities", type=int)
    g.add_argument("--dim", type=int)
    g.add_argument("--seed", type=int)
    g.add_argument("--noise", type=float)
    g.add_argument("--space-offset", type=float)
    g.add_argument("--space-decay", type=float)
    g.add_argument("--n-sets", type=int)
    g.add_argument("--queries", type=int)
    g.add_argument("--distractors", help="e.g. 0..3")
    g.add_argument("--gallery-only", action="store_true", help="skip the stress-test datasets")
    g.add_argument("--force", action="store_true")
    g.set_defaults(func=cmd_gen)

    t = sub.add_parser("train", parents=[common], help="train a model on a gallery")
    t.add_argument("--config")
    t.add_argument("--gallery", required=True)
    t.add_argument("--out", required=True, help="model JSON")
    t.add_argument("--log", help="CSV training log (default: <out>.log.csv)")
    t.add_argument("--mode", choices=["netvlad", "average", "sum", "gem_shared", "gem_per_dim"])
    t.add_argument("--set-size", type=int)
    t.add_argument("--epochs", type=int)
    t.add_argument("--batches-per-epoch", type=int)
    t.add_argument("--batch-identities", type=int)
    t.add_argument("--K", type=int)
    t.add_argument("--D", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--noise", type=float)
    t.add_argument("--seed", type=int)
    t.add_argument("--whiten", action="store_true", help="fit and embed whitening")
    t.add_argument("--force", action="store_true")
    t.set_defaults(func=cmd_train)

    i = sub.add_parser("index", parents=[common], help="build a set index from a dataset")
    i.add_argument("--model", required=True)
    i.add_argument("--dataset", required=True, help=".npz dataset from `gen`")
    i.add_argument("--out", required=True)
    i.add_argument("--elements", help="also write an element index here")
    i.add_argument("--force", action="store_true")
    i.set_defaults(func=cmd_index)

    q = sub.add_parser("query", parents=[common], help="rank sets for a query")
    q.add_argument("--model", required=True)
    q.add_argument("--index", help="set index (strategy set)")
    q.add_argument("--elements", help="element index (element, pretag, re-ranking)")
    q.add_argument("--element-model", help="model whose head and whitening score elements")
    q.add_argument("--gallery", help="identity prototypes to sample query examples from")
    q.add_argument("--query-file", help="JSON {identity: [[...], ...]} of example descriptors")
    q.add_argument("--ids", required=True, help="comma-separated identity ids")
    q.add_argument("--examples", type=int, default=1, help="examples sampled per identity")
    q.add_argument("--noise", type=float, default=0.25)
    q.add_argument("--seed", type=int, default=0)
    q.add_argument("--topk", type=int, default=10)
    q.add_argument("--rerank", type=int, default=0, metavar="N_R")
    q.add_argument("--query-agg", action="store_true")
    q.add_argument("--strategy", choices=["set", "element", "pretag"], default="set")
    q.add_argument("--threshold", type=float, default=0.8, help="pre-tagging threshold")
    q.add_argument("--tag-examples", type=int, default=10)
    q.set_defaults(func=cmd_query)

    e = sub.add_parser("eval", parents=[common], help="stress-test table")
    e.add_argument("--config")
    e.add_argument("--out", required=True, help="output directory")
    e.add_argument("--distractors", help="e.g. 0..3")
    e.add_argument("--methods", help="comma-separated subset of methods")
    e.add_argument("--n-sets", type=int)
    e.add_argument("--repeats", type=int)
    e.add_argument("--seed", type=int)
    e.add_argument("--no-timing", action="store_true")
    e.add_argument("--force", action="store_true")
    e.set_defaults(func=cmd_eval)

    d = sub.add_parser("gramdiff", parents=[common], help="identity-descriptor orthogonality")
    d.add_argument("--gallery", required=True)
    d.add_argument("--model", action="append", default=[], help="model JSON (repeatable)")
    d.add_argument("--samples", type=int, default=100)
    d.add_argument("--noise", type=float, default=0.25)
    d.add_argument("--seed", type=int, default=0)
    d.set_defaults(func=cmd_gramdiff)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose or 0, 2)
    logging.basicConfig(level=level, format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)
    limits = contextlib.nullcontext()
    if args.threads is not None:
        if args.threads < 1:
            print("error: --threads must be >= 1", file=sys.stderr)
            return 2
        from threadpoolctl import threadpool_limits

        limits = threadpool_limits(limits=args.threads)
    try:
        with limits:
            return args.func(args)
    except (UserError, ClosedWorldError, IndexFormatError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:  # noqa: BLE001 - last-resort report
        log.debug("internal error", exc_info=True)
        print(f"internal error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
