"""Command-line entry point.

Commands: ``fit``, ``eval``, ``retrieve``, ``train-head``, plus an
``inspect`` utility that validates and summarizes any toolkit file.

Conventions: machine-readable JSON goes to stdout, human logs to stderr,
and every run (except ``inspect``, a read-only probe) writes a RunManifest
recording the command line, resolved configuration, input digests, seed,
toolkit version, and wall-clock duration. Primary outputs are byte-identical
across runs with the same inputs and seed; the manifest is the one file
allowed to differ (it contains the duration).

Exit codes: 0 ok, 2 usage/argument, 3 numerical, 4 data (lookup/format),
5 training failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
import time
from dataclasses import asdict, dataclass, fields
from pathlib import Path

import numpy as np

from . import __version__
from .errors import EXIT_DATA, ArgumentError, FormatError, ToolkitError
from . import embstore, gmlp, mapping, retrieval

_METHOD_FLAGS = {"lsq": mapping.METHOD_LEAST_SQUARES, "procrustes": mapping.METHOD_PROCRUSTES}
_DEFAULT_KS = "1,5,10,20,100"


@dataclass
class RunManifest:
    command: list[str]
    config: dict
    inputs: dict[str, dict]
    seed: int | None
    version: str
    duration_seconds: float

    def write(self, path) -> None:
        path = Path(path)
        tmp = path.with_name(path.name + ".tmp")
        tmp.write_text(json.dumps(asdict(self), indent=2) + "\n", encoding="utf-8")
        os.replace(tmp, path)


def _sha256(path) -> str:
    return hashlib.sha256(Path(path).read_bytes()).hexdigest()


def _input_digests(**paths) -> dict[str, dict]:
    return {
        name: {"path": str(p), "sha256": _sha256(p)}
        for name, p in paths.items()
        if p is not None
    }


def _emit(payload: dict) -> None:
    sys.stdout.write(json.dumps(payload, indent=2) + "\n")


def _log(message: str) -> None:
    print(message, file=sys.stderr)


def _write_manifest(args, argv, config: dict, inputs: dict, seed, started: float) -> None:
    RunManifest(
        command=["xmodal"] + list(argv),
        config=config,
        inputs=inputs,
        seed=seed,
        version=__version__,
        duration_seconds=time.monotonic() - started,
    ).write(args.manifest)


def _parse_ks(text: str) -> list[int]:
    try:
        ks = [int(part) for part in text.split(",") if part.strip()]
    except ValueError as exc:
        raise ArgumentError(f"cannot parse k list {text!r}") from exc
    if not ks:
        raise ArgumentError("empty k list")
    return ks


def _parse_kv_file(path) -> dict[str, str]:
    """key=value lines; blank lines and # comments are skipped."""
    result: dict[str, str] = {}
    for lineno, raw in enumerate(Path(path).read_text(encoding="utf-8").splitlines(), 1):
        line = raw.strip()
        if not line or line.startswith("#"):
            continue
        if "=" not in line:
            raise ArgumentError(f"{path}:{lineno}: expected key=value, got {raw!r}")
        key, value = line.split("=", 1)
        result[key.strip()] = value.strip()
    return result


def _coerce(value: str, target_type):
    if target_type is bool:
        if value.lower() in ("true", "1", "yes"):
            return True
        if value.lower() in ("false", "0", "no"):
            return False
        raise ArgumentError(f"expected a boolean, got {value!r}")
    return target_type(value)


def _dataclass_from_kv(cls, overrides: dict[str, str], **computed):
    allowed = {f.name: f.type for f in fields(cls)}
    kwargs = dict(computed)
    for key, value in overrides.items():
        if key not in allowed:
            raise ArgumentError(
                f"unknown {cls.__name__} key {key!r} (valid: {', '.join(sorted(allowed))})"
            )
        current = getattr(cls, key, None)
        target = type(current) if current is not None else str
        if key in ("seq_len", "d_model", "d_ffn", "n_blocks", "batch_size", "epochs", "seed"):
            target = int
        elif key in ("tau", "lr", "beta1", "beta2", "adam_eps"):
            target = float
        elif key in ("symmetric", "shared_head"):
            target = bool
        kwargs[key] = _coerce(value, target)
    return cls(**kwargs)


def _kv_dump(obj) -> str:
    return "".join(f"{key}={value}\n" for key, value in asdict(obj).items())


def _load_pairs(src_path, tgt_path, pairs_path) -> embstore.PairedDataset:
    src = embstore.load_emb(src_path)
    tgt = embstore.load_emb(tgt_path)
    manifest = embstore.load_manifest(pairs_path)
    return embstore.align_pairs(src, tgt, manifest)


def cmd_fit(args, argv) -> int:
    started = time.monotonic()
    ds = _load_pairs(args.src, args.tgt, args.pairs)
    method = _METHOD_FLAGS[args.method]
    if method == mapping.METHOD_PROCRUSTES and args.ridge != 0.0:
        raise ArgumentError("--ridge only applies to --method lsq")
    src64 = ds.src.values.astype(np.float64)
    tgt64 = ds.tgt.values.astype(np.float64)
    if method == mapping.METHOD_LEAST_SQUARES:
        linmap = mapping.fit_least_squares(src64, tgt64, lam=args.ridge)
    else:
        linmap = mapping.fit_procrustes(src64, tgt64)
    mapping.save_map(linmap, args.out)
    residual = mapping.residual_frobenius(linmap, src64, tgt64)
    config = {"method": method, "ridge": args.ridge, "out": str(args.out)}
    _emit(
        {
            "command": "fit",
            "method": method,
            "ridge": args.ridge,
            "n_pairs": ds.n,
            "d_src": linmap.d_src,
            "d_tgt": linmap.d_tgt,
            "residual_frobenius": residual,
            "out": str(args.out),
        }
    )
    _write_manifest(
        args, argv, config,
        _input_digests(src=args.src, tgt=args.tgt, pairs=args.pairs),
        None, started,
    )
    return 0


def cmd_eval(args, argv) -> int:
    started = time.monotonic()
    if len(args.map) > 2:
        raise ArgumentError("at most two --map files (one per fitting method)")
    maps = [mapping.load_map(p) for p in args.map]
    if len(maps) == 2 and maps[0].method == maps[1].method:
        raise ArgumentError("the two maps must use different fitting methods")
    ks = _parse_ks(args.k)
    ds = _load_pairs(args.queries, args.gallery, args.pairs)

    reports = {}
    for linmap in maps:
        report = retrieval.evaluate_direction(
            ds, linmap, args.direction, ks, metric=args.similarity
        )
        reports[linmap.method] = report.to_dict()
    if len(maps) == 2:
        first, second = (reports[m.method]["recall"] for m in maps)
        best = {k: max(first[k], second[k]) for k in first}
        reports["best_of"] = {
            "direction": args.direction,
            "n_queries": reports[maps[0].method]["n_queries"],
            "recall": best,
        }

    payload = {"command": "eval", "direction": args.direction, "k": ks, "reports": reports}
    _emit(payload)
    if args.out:
        Path(args.out).write_text(json.dumps(payload, indent=2) + "\n", encoding="utf-8")
    config = {
        "direction": args.direction,
        "k": ks,
        "similarity": args.similarity,
        "maps": [str(p) for p in args.map],
        "out": str(args.out) if args.out else None,
    }
    inputs = _input_digests(queries=args.queries, gallery=args.gallery, pairs=args.pairs)
    for i, p in enumerate(args.map):
        inputs[f"map{i}"] = {"path": str(p), "sha256": _sha256(p)}
    _write_manifest(args, argv, config, inputs, None, started)
    return 0


def cmd_retrieve(args, argv) -> int:
    started = time.monotonic()
    if args.query_file is None and args.query_id is None:
        raise ArgumentError("need --query-file and/or --query-id")
    linmap = mapping.load_map(args.map)
    gallery = embstore.load_emb(args.gallery)

    src_group: dict[str, str] = {}
    tgt_group: dict[str, str] = {}
    if args.pairs:
        manifest = embstore.load_manifest(args.pairs)
        for e in manifest.entries:
            src_group[e.src_id] = e.group_id
            tgt_group[e.tgt_id] = e.group_id

    # Ungrouped gallery rows get a private group so the index can be built;
    # they can never match a query group.
    groups = tuple(tgt_group.get(i, f"__ungrouped__{i}") for i in gallery.ids)
    index = retrieval.build_index(gallery, groups)

    if args.query_file is not None:
        queries = embstore.load_emb(args.query_file)
        if args.query_id is not None:
            row = queries.row(args.query_id)
            queries = embstore.EmbeddingMatrix(row[None, :], (args.query_id,))
    else:
        row = gallery.row(args.query_id)
        queries = embstore.EmbeddingMatrix(row[None, :], (args.query_id,))

    top = args.top
    if top > gallery.n:
        _log(f"warning: --top {top} exceeds gallery size {gallery.n}, clipping")
        top = gallery.n
    if top < 1:
        raise ArgumentError("--top must be >= 1")

    mapped = mapping.apply_map(linmap, queries)
    for qid, vec in zip(mapped.ids, mapped.values):
        qgroup = src_group.get(qid, tgt_group.get(qid))
        sys.stdout.write(f"# query {qid}\n")
        for rank, (rid, score) in enumerate(
            retrieval.topk(vec, index, top, metric=args.similarity), start=1
        ):
            line = f"{rank}\t{score:.6f}\t{rid}"
            if args.pairs:
                hit = qgroup is not None and tgt_group.get(rid) == qgroup
                line += "\tcorrect" if hit else "\tincorrect"
            sys.stdout.write(line + "\n")

    config = {
        "map": str(args.map),
        "gallery": str(args.gallery),
        "query_file": str(args.query_file) if args.query_file else None,
        "query_id": args.query_id,
        "top": args.top,
        "similarity": args.similarity,
    }
    inputs = _input_digests(
        map=args.map, gallery=args.gallery, pairs=args.pairs, queries=args.query_file
    )
    _write_manifest(args, argv, config, inputs, None, started)
    return 0


def cmd_train_head(args, argv) -> int:
    started = time.monotonic()
    ds = _load_pairs(args.src, args.tgt, args.pairs)
    gmlp_kv = _parse_kv_file(args.gmlp_config) if args.gmlp_config else {}
    train_kv = _parse_kv_file(args.train_config) if args.train_config else {}

    seq_len = int(gmlp_kv.get("seq_len", 1))
    if "d_model" not in gmlp_kv:
        if ds.src.d % max(seq_len, 1) != 0:
            raise ArgumentError(
                f"cannot infer d_model: row width {ds.src.d} not divisible by seq_len {seq_len}"
            )
        gmlp_kv["d_model"] = str(ds.src.d // seq_len)
    if "d_ffn" not in gmlp_kv:
        gmlp_kv["d_ffn"] = str(2 * int(gmlp_kv["d_model"]))
    gmlp_kv.setdefault("seq_len", str(seq_len))
    gcfg = _dataclass_from_kv(gmlp.GmlpConfig, gmlp_kv)
    tcfg = _dataclass_from_kv(gmlp.TrainConfig, train_kv)

    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    result = gmlp.train_head(ds, gcfg, tcfg)

    src_path = out_dir / "head_src.xgml"
    tgt_path = out_dir / "head_tgt.xgml"
    gmlp.save_head(result.params_src, src_path)
    gmlp.save_head(result.params_tgt, tgt_path)
    loss_path = out_dir / "loss.csv"
    loss_path.write_text(
        "epoch,mean_loss\n"
        + "".join(f"{i},{loss!r}\n" for i, loss in enumerate(result.epoch_losses)),
        encoding="utf-8",
    )
    (out_dir / "gmlp_config_resolved.txt").write_text(_kv_dump(gcfg), encoding="utf-8")
    (out_dir / "train_config_resolved.txt").write_text(_kv_dump(tcfg), encoding="utf-8")

    for epoch, loss in enumerate(result.epoch_losses):
        _log(f"epoch {epoch}: mean loss {loss:.6f}")
    _emit(
        {
            "command": "train_head",
            "out_dir": str(out_dir),
            "n_pairs": ds.n,
            "epochs": tcfg.epochs,
            "epoch_losses": result.epoch_losses,
            "files": {
                "head_src": str(src_path),
                "head_tgt": str(tgt_path),
                "loss_csv": str(loss_path),
            },
        }
    )
    config = {"gmlp": asdict(gcfg), "train": asdict(tcfg), "out_dir": str(out_dir)}
    inputs = _input_digests(
        src=args.src, tgt=args.tgt, pairs=args.pairs,
        gmlp_config=args.gmlp_config, train_config=args.train_config,
    )
    _write_manifest(args, argv, config, inputs, tcfg.seed, started)
    return 0


def cmd_inspect(args, argv) -> int:
    magic = Path(args.path).read_bytes()[:4]
    if magic == b"EMB1":
        m = embstore.load_emb(args.path)
        _emit(
            {
                "format": "EMB1",
                "n": m.n,
                "d": m.d,
                "ids_head": list(m.ids[:5]),
            }
        )
    elif magic == b"XMAP":
        linmap = mapping.load_map(args.path)
        _emit(
            {
                "format": "XMAP",
                "method": linmap.method,
                "ridge": linmap.lam,
                "d_src": linmap.d_src,
                "d_tgt": linmap.d_tgt,
            }
        )
    elif magic == b"XGML":
        params = gmlp.load_head(args.path)
        _emit({"format": "XGML", **asdict(params.config)})
    else:
        raise FormatError(f"{args.path}: unrecognized magic {magic!r}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="xmodal",
        description="Cross-modal embedding alignment, retrieval scoring, and head training.",
    )
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("fit", help="fit a linear map on paired embeddings")
    p.add_argument("--method", choices=sorted(_METHOD_FLAGS), required=True)
    p.add_argument("--src", required=True, help="source EMB1 file")
    p.add_argument("--tgt", required=True, help="target EMB1 file")
    p.add_argument("--pairs", required=True, help="JSONL pair manifest")
    p.add_argument("--out", required=True, help="output XMAP file")
    p.add_argument("--ridge", type=float, default=0.0)
    p.add_argument("--manifest", default=None, help="run manifest path")
    p.set_defaults(func=cmd_fit, default_manifest=lambda a: f"{a.out}.manifest.json")

    p = sub.add_parser("eval", help="recall@k for one retrieval direction")
    p.add_argument("--map", action="append", required=True, help="XMAP file (repeat for best-of-two)")
    p.add_argument("--queries", required=True, help="query-side EMB1 file")
    p.add_argument("--gallery", required=True, help="gallery-side EMB1 file")
    p.add_argument("--pairs", required=True, help="JSONL manifest: src=query id, tgt=gallery id")
    p.add_argument("--direction", choices=retrieval._DIRECTIONS, required=True)
    p.add_argument("--k", default=_DEFAULT_KS)
    p.add_argument("--similarity", choices=retrieval._METRICS, default=retrieval.METRIC_COSINE)
    p.add_argument("--out", default=None, help="also write the report JSON here")
    p.add_argument("--manifest", default=None)
    p.set_defaults(
        func=cmd_eval,
        default_manifest=lambda a: f"{a.out}.manifest.json" if a.out else "eval_manifest.json",
    )

    p = sub.add_parser("retrieve", help="ranked results for one or more queries")
    p.add_argument("--map", required=True)
    p.add_argument("--gallery", required=True)
    p.add_argument("--query-file", default=None, help="EMB1 file of query vectors")
    p.add_argument("--query-id", default=None, help="single query id (from --query-file, or the gallery)")
    p.add_argument("--pairs", default=None, help="ground-truth manifest for correctness markers")
    p.add_argument("--top", type=int, default=10)
    p.add_argument("--similarity", choices=retrieval._METRICS, default=retrieval.METRIC_COSINE)
    p.add_argument("--manifest", default=None)
    p.set_defaults(func=cmd_retrieve, default_manifest=lambda a: "retrieve_manifest.json")

    p = sub.add_parser("train-head", help="train gated-MLP projection heads")
    p.add_argument("--src", required=True)
    p.add_argument("--tgt", required=True)
    p.add_argument("--pairs", required=True)
    p.add_argument("--gmlp-config", default=None, help="key=value file")
    p.add_argument("--train-config", default=None, help="key=value file")
    p.add_argument("--out-dir", required=True)
    p.add_argument("--manifest", default=None)
    p.set_defaults(
        func=cmd_train_head,
        default_manifest=lambda a: str(Path(a.out_dir) / "run_manifest.json"),
    )

    p = sub.add_parser("inspect", help="validate and summarize a toolkit file")
    p.add_argument("--path", required=True)
    p.set_defaults(func=cmd_inspect, default_manifest=None)

    return parser


def main(argv=None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    args = parser.parse_args(argv)
    if getattr(args, "manifest", None) is None and args.default_manifest is not None:
        args.manifest = args.default_manifest(args)
    try:
        return args.func(args, argv)
    except ToolkitError as exc:
        _log(f"error: {exc}")
        return exc.exit_code
    except OSError as exc:
        _log(f"error: {exc}")
        return EXIT_DATA


if __name__ == "__main__":
    sys.exit(main())
