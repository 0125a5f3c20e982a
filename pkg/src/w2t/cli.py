"""Command line entry point: one binary, reproducible config-driven runs.

Subcommands: gen-data, canonize, equiv-bench, invariance, train, eval,
ablate, retrieve. Flag precedence: hard default < --config JSON <
explicit flag. Every machine output embeds the resolved configuration
and its hash. Exit codes: 0 ok, 1 runtime failure, 2 bad usage,
3 failed --assert.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from . import __version__, canon, evaluation, synthgen
from .encoder import Encoder, TrainHyper, config_for_collection, raw_cos_similarity, train
from .errors import W2TError
from .interchange import (
    CollectionManifest,
    ManifestEntry,
    load_collection,
    write_canonical,
    write_manifest,
)
from .runtime import blas_threads

FORMAT_VERSIONS = {"artifact": __version__, "lwc1": 1, "manifest": 1, "snapshot": 1}


class CliError(Exception):
    pass


def _resolve(args, config: dict, defaults: dict) -> dict:
    """Merge flag values over --config values over hard defaults."""
    resolved = {}
    for name, default in defaults.items():
        flag = getattr(args, name.replace("-", "_"), None)
        if flag is not None:
            resolved[name] = flag
        elif name in config:
            resolved[name] = config[name]
        else:
            resolved[name] = default
    return resolved


def _config_hash(resolved: dict) -> str:
    blob = json.dumps(resolved, sort_keys=True, default=str).encode()
    return hashlib.sha256(blob).hexdigest()[:16]


def _load_config_file(args) -> dict:
    path = getattr(args, "config", None)
    if not path:
        return {}
    try:
        return json.loads(Path(path).read_text())
    except (OSError, json.JSONDecodeError) as exc:
        raise CliError(f"cannot read --config {path}: {exc}")


def _parse_assertion(expr: str):
    for op in (">=", "<=", "==", ">", "<"):
        if op in expr:
            name, value = expr.split(op, 1)
            return name.strip(), op, float(value)
    raise CliError(f"bad --assert expression {expr!r} (need metric<op>value)")


def _check_assertions(rows, assertions) -> list[str]:
    """Apply each assertion to every metrics row; returns failure messages."""
    import operator

    ops = {">=": operator.ge, "<=": operator.le, ">": operator.gt,
           "<": operator.lt, "==": operator.eq}
    failures = []
    for expr in assertions or []:
        name, op, value = _parse_assertion(expr)
        for row in rows:
            if name not in row:
                failures.append(f"{expr}: metric {name!r} not found")
                continue
            if not ops[op](float(row[name]), value):
                failures.append(f"{expr}: got {row[name]}")
    return failures


def _add_common(p):
    p.add_argument("--config", help="JSON file with flag defaults")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--threads", type=int, default=None, help="BLAS worker threads")
    p.add_argument("--deterministic", action="store_true",
                   help="single-threaded reductions for bitwise reproducibility")
    p.add_argument("--assert", dest="assertions", action="append", metavar="EXPR",
                   help="fail (exit 3) unless metric EXPR holds, e.g. mauroc>=0.95")


def _threads_for(args) -> int | None:
    if args.deterministic:
        return 1
    return args.threads


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="w2t",
        description="Canonical GL(r)-invariant token representations for LoRA checkpoints.",
    )
    parser.add_argument("--version", action="version",
                        version=f"w2t {__version__} (formats: {FORMAT_VERSIONS})")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic collection")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=int, default=None, help="checkpoint count")
    p.add_argument("--layer-count", type=int, default=None)
    p.add_argument("--modules", default=None, help="comma list, e.g. Q,V")
    p.add_argument("--d-out", type=int, default=None)
    p.add_argument("--d-in", type=int, default=None)
    p.add_argument("--rank", type=int, default=None)
    p.add_argument("--label-schema", default=None,
                   choices=["multilabel", "regression", "task_retrieval", "unlabeled"])
    p.add_argument("--label-dim", type=int, default=None)
    p.add_argument("--signal-strength", type=float, default=None)
    p.add_argument("--noise-std", type=float, default=None)
    p.add_argument("--gl-alpha", type=float, default=None)
    p.add_argument("--attr-prob", type=float, default=None)
    p.add_argument("--n-query", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("canonize", help="write canonical updates for a collection")
    p.add_argument("--in", dest="input", required=True)
    p.add_argument("--out", required=True)
    _add_common(p)

    p = sub.add_parser("equiv-bench", help="QR-SVD vs dense-SVD equivalence benchmark")
    p.add_argument("--dims", default=None, help="comma list of square dims, e.g. 1024,3072")
    p.add_argument("--rank", type=int, default=None)
    p.add_argument("--trials", type=int, default=None)
    p.add_argument("--csv", default=None)
    p.add_argument("--json", dest="json_out", default=None)
    p.add_argument("--float64", action="store_true", help="use float64 payloads")
    _add_common(p)

    p = sub.add_parser("train", help="train the weight-token encoder")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--mode", default=None,
                   choices=["full", "no_canon", "no_rank_level", "no_pos_level"])
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--wd", type=float, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--d-model", type=int, default=None)
    p.add_argument("--rank-layers", type=int, default=None)
    p.add_argument("--pos-layers", type=int, default=None)
    p.add_argument("--heads", type=int, default=None)
    p.add_argument("--head-width", type=int, default=None)
    _add_common(p)

    p = sub.add_parser("eval", help="evaluate a trained encoder on one split")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--split", default="test")
    p.add_argument("--json", dest="json_out", default=None)
    p.add_argument("--csv", default=None)
    p.add_argument("--use-truth", action="store_true",
                   help="score regression against noiseless targets from truth.json")
    _add_common(p)

    p = sub.add_parser("invariance", help="embedding drift under GL(r) perturbations")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--alphas", default=None, help="comma list, e.g. 0.01,0.1,0.5,1.0")
    p.add_argument("--transforms", type=int, default=None)
    p.add_argument("--csv", default=None)
    p.add_argument("--json", dest="json_out", default=None)
    _add_common(p)

    p = sub.add_parser("ablate", help="train and compare encoder variants")
    p.add_argument("--data", required=True)
    p.add_argument("--modes", default=None, help="comma list of modes")
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--batch", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--wd", type=float, default=None)
    p.add_argument("--warmup", type=int, default=None)
    p.add_argument("--csv", default=None)
    p.add_argument("--json", dest="json_out", default=None)
    _add_common(p)

    p = sub.add_parser("retrieve", help="embedding retrieval over a gallery/query pool")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--method", default=None, choices=["encoder", "rawcos", "both"])
    p.add_argument("--csv", default=None)
    p.add_argument("--json", dest="json_out", default=None)
    _add_common(p)

    return parser


def cmd_gen_data(args, config):
    defaults = {
        "n": 2000, "layer_count": 4, "modules": "Q,V", "d_out": 96, "d_in": 96,
        "rank": 8, "label_schema": "multilabel", "label_dim": 8,
        "signal_strength": 1.0, "noise_std": 0.1, "gl_alpha": 1.0, "seed": 13,
        "attr_prob": 0.3, "n_query": None,
    }
    r = _resolve(args, config, defaults)
    spec = synthgen.GenSpec(
        n_checkpoints=r["n"], layer_count=r["layer_count"],
        modules=tuple(m.strip() for m in r["modules"].split(",")),
        d_out=r["d_out"], d_in=r["d_in"], rank=r["rank"],
        label_schema=r["label_schema"], label_dim=r["label_dim"],
        signal_strength=r["signal_strength"], noise_std=r["noise_std"],
        gl_alpha=r["gl_alpha"], seed=r["seed"], attr_prob=r["attr_prob"],
        n_query=r["n_query"],
    )
    manifest_path = synthgen.generate(spec, args.out)
    print(f"wrote {spec.n_checkpoints} checkpoints under {args.out} "
          f"(schema={spec.label_schema}, seed={spec.seed}, config={_config_hash(r)})")
    print(f"manifest: {manifest_path}")
    return []


def cmd_canonize(args, config):
    manifest, accessor = load_collection(args.input)
    out_dir = Path(args.out)
    out_dir.mkdir(parents=True, exist_ok=True)
    entries = []
    for ckpt in accessor:
        keys = [k for k, _ in ckpt.positions]
        updates = [canon.canonize(fp) for _, fp in ckpt.positions]
        write_canonical(keys, updates, out_dir / f"{ckpt.id}.lwcc")
        entries.append(ManifestEntry(id=ckpt.id, path=f"{ckpt.id}.lwcc",
                                     split=next(e.split for e in manifest.entries if e.id == ckpt.id),
                                     label=ckpt.label))
    canonical_manifest = CollectionManifest(
        format_version=manifest.format_version,
        label_schema=manifest.label_schema,
        label_dim=manifest.label_dim,
        rank=manifest.rank,
        layer_count=manifest.layer_count,
        entries=entries,
        generator_seed=manifest.generator_seed,
    )
    write_manifest(canonical_manifest, out_dir / "canonical_manifest.json")
    print(f"canonized {len(entries)} checkpoints -> {out_dir}")
    return []


def cmd_equiv_bench(args, config):
    defaults = {"dims": "1024", "rank": 8, "trials": 50, "seed": 7}
    r = _resolve(args, config, defaults)
    dims = [(int(d), int(d)) for d in str(r["dims"]).split(",")]
    dtype = np.float64 if args.float64 else np.float32
    reports = canon.bench_equivalence(dims, r=r["rank"], trials=r["trials"],
                                      seed=r["seed"], dtype=dtype)
    rows = [
        {
            "d_out": rep.d_out, "d_in": rep.d_in, "r": rep.r, "trials": rep.trials,
            "sigma_gap": rep.sigma_gap, "update_gap": rep.update_gap,
            "u_subspace_cos": rep.u_subspace_cos, "v_subspace_cos": rep.v_subspace_cos,
            "time_direct_ms": rep.time_direct_ms, "time_qr_ms": rep.time_qr_ms,
            "speedup": rep.speedup,
        }
        for rep in reports
    ]
    for row in rows:
        print(f"d={row['d_out']}x{row['d_in']} r={row['r']}: "
              f"sigma_gap={row['sigma_gap']:.3g} update_gap={row['update_gap']:.3g} "
              f"cos(U/V)={row['u_subspace_cos']:.6f}/{row['v_subspace_cos']:.6f} "
              f"time={row['time_direct_ms']:.2f}/{row['time_qr_ms']:.3f} ms "
              f"speedup={row['speedup']:.1f}x")
    if args.csv:
        evaluation.write_rows_csv(rows, args.csv)
    if args.json_out:
        doc = {"config": r, "config_hash": _config_hash(r), "rows": rows,
               "versions": FORMAT_VERSIONS}
        Path(args.json_out).write_text(json.dumps(doc, indent=1) + "\n")
    return rows


def _hyper_from(r) -> TrainHyper:
    return TrainHyper(epochs=r["epochs"], batch=r["batch"], weight_decay=r["wd"],
                      base_lr=r["lr"], warmup=r["warmup"], seed=r["seed"])


TRAIN_DEFAULTS = {
    "mode": "full", "epochs": 45, "batch": 64, "lr": 1e-3, "wd": 1e-3,
    "warmup": 4, "seed": 0, "d_model": 128, "rank_layers": 1, "pos_layers": 2,
    "heads": 4, "head_width": 64,
}


def cmd_train(args, config):
    r = _resolve(args, config, TRAIN_DEFAULTS)
    manifest, accessor = load_collection(args.data)
    enc_config = config_for_collection(
        manifest, accessor, mode=r["mode"], d_model=r["d_model"],
        rank_layers=r["rank_layers"], pos_layers=r["pos_layers"],
        heads=r["heads"], head_width=r["head_width"],
    )
    model, log = train((manifest, accessor), enc_config, _hyper_from(r))
    out = Path(args.out)
    model.save(out, meta={"seed": r["seed"], "epochs": r["epochs"],
                          "config_hash": _config_hash(r)})
    doc = {"config": r, "config_hash": _config_hash(r), "versions": FORMAT_VERSIONS,
           "encoder": enc_config.to_json(), "log": log}
    (out / "train_log.json").write_text(json.dumps(doc, indent=1) + "\n")
    last = log[-1] if log else {}
    print(f"trained {r['mode']} encoder for {r['epochs']} epochs "
          f"(final val loss {last.get('val_loss', 'n/a')}) -> {out}")
    return [last] if log else []


def cmd_eval(args, config):
    model = Encoder.load(args.model)
    manifest, accessor = load_collection(args.data)
    override = None
    if args.use_truth:
        _, truth = synthgen.load_truth(accessor.root)
        override = {cid: rec["clean_target"] for cid, rec in truth.items()
                    if "clean_target" in rec}
    report = evaluation.evaluate_model(model, (manifest, accessor),
                                       split=args.split, target_override=override)
    report.metadata.update({"config_hash": _config_hash(vars(args)),
                            "versions": FORMAT_VERSIONS, "seed": args.seed})
    metrics_row = {k: v for k, v in report.metrics.items() if isinstance(v, (int, float))}
    print(f"{report.kind} metrics on split {args.split!r}: "
          + " ".join(f"{k}={v:.4f}" for k, v in metrics_row.items()))
    if args.json_out:
        evaluation.write_report_json(report, args.json_out)
    if args.csv:
        evaluation.write_rows_csv([metrics_row], args.csv)
    return [metrics_row]


def cmd_invariance(args, config):
    defaults = {"alphas": "0.01,0.1,0.5,1.0", "transforms": 30, "seed": 0}
    r = _resolve(args, config, defaults)
    model = Encoder.load(args.model)
    manifest, accessor = load_collection(args.data)
    alphas = [float(a) for a in str(r["alphas"]).split(",")]
    rows = evaluation.invariance_study(model, (manifest, accessor), alphas,
                                       transforms_per_alpha=r["transforms"], seed=r["seed"])
    for row in rows:
        print(f"alpha={row['alpha']}: drift={row['mean_relative_l2_drift']:.3g} "
              f"(+-{row['ci95_relative_l2_drift']:.2g}) "
              f"agreement={row['mean_agreement']:.4f}")
    if args.csv:
        evaluation.write_rows_csv(rows, args.csv)
    if args.json_out:
        doc = {"config": r, "config_hash": _config_hash(r), "rows": rows,
               "versions": FORMAT_VERSIONS}
        Path(args.json_out).write_text(json.dumps(doc, indent=1) + "\n")
    return rows


def cmd_ablate(args, config):
    defaults = dict(TRAIN_DEFAULTS, modes="full,no_canon,no_rank_level,no_pos_level")
    r = _resolve(args, config, defaults)
    manifest, accessor = load_collection(args.data)
    base = config_for_collection(manifest, accessor, mode="full", d_model=r["d_model"],
                                 rank_layers=r["rank_layers"], pos_layers=r["pos_layers"],
                                 heads=r["heads"], head_width=r["head_width"])
    modes = [m.strip() for m in str(r["modes"]).split(",")]
    rows = evaluation.ablation_study((manifest, accessor), base, _hyper_from(r), modes=modes)
    for row in rows:
        print(" ".join(f"{k}={v}" if isinstance(v, str) else f"{k}={v:.4f}"
                       for k, v in row.items()))
    if args.csv:
        evaluation.write_rows_csv(rows, args.csv)
    if args.json_out:
        doc = {"config": r, "config_hash": _config_hash(r), "rows": rows,
               "versions": FORMAT_VERSIONS}
        Path(args.json_out).write_text(json.dumps(doc, indent=1) + "\n")
    return rows


def cmd_retrieve(args, config):
    defaults = {"k": 10, "method": "both"}
    r = _resolve(args, config, defaults)
    manifest, accessor = load_collection(args.data)
    gallery_ids = accessor.split_ids("gallery")
    query_ids = accessor.split_ids("query")
    if not gallery_ids or not query_ids:
        raise CliError("collection needs gallery and query splits")
    tasks = {e.id: e.label.task_id for e in manifest.entries}
    g_tasks = [tasks[c] for c in gallery_ids]
    q_tasks = [tasks[c] for c in query_ids]
    rows = []
    if r["method"] in ("encoder", "both"):
        model = Encoder.load(args.model)
        g = np.stack([model.encode(accessor[c]) for c in gallery_ids])
        q = np.stack([model.encode(accessor[c]) for c in query_ids])
        m = evaluation.retrieval_metrics(q, g, q_tasks, g_tasks, k=r["k"])
        rows.append({"method": "encoder",
                     **{k: v for k, v in m.items() if isinstance(v, (int, float))}})
    if r["method"] in ("rawcos", "both"):
        ck = {cid: accessor[cid] for cid in gallery_ids + query_ids}

        def flat(cid):
            return np.concatenate([np.concatenate([fp.B.ravel(), fp.A.ravel()])
                                   for _, fp in ck[cid].positions])

        g = np.stack([flat(c) for c in gallery_ids])
        q = np.stack([flat(c) for c in query_ids])
        m = evaluation.retrieval_metrics(q, g, q_tasks, g_tasks, k=r["k"])
        rows.append({"method": "rawcos",
                     **{k: v for k, v in m.items() if isinstance(v, (int, float))}})
    for row in rows:
        print(f"{row['method']}: ndcg@{r['k']}={row['ndcg_at_k']:.4f} "
              f"hit@1={row['hit_at_1']:.4f} mrr={row['mrr']:.4f}")
    if args.csv:
        evaluation.write_rows_csv(rows, args.csv)
    if args.json_out:
        doc = {"config": r, "config_hash": _config_hash(r), "rows": rows,
               "versions": FORMAT_VERSIONS}
        Path(args.json_out).write_text(json.dumps(doc, indent=1) + "\n")
    # assertions apply to the encoder rows when both methods ran
    return [row for row in rows if row.get("method") != "rawcos"] or rows


COMMANDS = {
    "gen-data": cmd_gen_data,
    "canonize": cmd_canonize,
    "equiv-bench": cmd_equiv_bench,
    "train": cmd_train,
    "eval": cmd_eval,
    "invariance": cmd_invariance,
    "ablate": cmd_ablate,
    "retrieve": cmd_retrieve,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        config = _load_config_file(args)
        with blas_threads(_threads_for(args)):
            rows = COMMANDS[args.command](args, config)
        failures = _check_assertions(rows, getattr(args, "assertions", None))
        if failures:
            for f in failures:
                print(f"ASSERTION FAILED: {f}", file=sys.stderr)
            return 3
        return 0
    except CliError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (W2TError, OSError, json.JSONDecodeError) as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
