"""Command-line interface: corpus generation, extraction, training, detection.

Every subcommand exits 0 on success; failures print one machine-parsable
line ``imad-error: <type>: <message>`` to stderr and exit nonzero.  All
randomness flows from ``--seed``.  Flag values take precedence over a JSON
``--config`` file, which takes precedence over built-in defaults.
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ThreadPoolExecutor
from pathlib import Path

import numpy as np

ERROR_PREFIX = "imad-error:"

TRAIN_DEFAULTS = {
    "seed": 0,
    "lr": 1e-4,
    "batch_size": 32,
    "max_epochs": 50,
    "patience": 5,
    "val_fraction": 0.1,
    "string_threshold": 2,
    "import_threshold": 2,
    "d_model": 96,
    "n_heads": 4,
    "layers": 2,
    "d_ff": 384,
}


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return int(args.func(args) or 0)
    except KeyboardInterrupt:
        return 130
    except Exception as exc:  # one parsable line per contract
        message = str(exc).replace("\n", " ")
        print(f"{ERROR_PREFIX} {type(exc).__name__}: {message}", file=sys.stderr)
        return 1


def build_parser():
    parser = argparse.ArgumentParser(
        prog="imad",
        description="Interpretable static malware detection over assembly code "
                    "and PE features.")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-corpus", help="generate the synthetic corpora and vocabulary")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--seed", type=int, default=0, help="generator seed (default 0)")
    p.add_argument("--mam-blocks", type=int, default=20000,
                   help="masked-prediction blocks (default 20000)")
    p.add_argument("--clone-pairs", type=int, default=4000,
                   help="clone/non-clone pairs, balanced (default 4000)")
    p.add_argument("--executables", type=int, default=2000,
                   help="labeled executables, balanced (default 2000)")
    p.add_argument("--block-len-min", type=int, default=5)
    p.add_argument("--block-len-max", type=int, default=30)
    p.set_defaults(func=cmd_gen_corpus)

    p = sub.add_parser("extract", help="extract static feature vectors to JSON lines")
    p.add_argument("inputs", nargs="*", help="PE files or .jsonl record files")
    p.add_argument("--vocab", required=True,
                   help="feature schema JSON (written with --fit, read otherwise)")
    p.add_argument("--out", required=True, help="output feature matrix (.jsonl)")
    p.add_argument("--fit", action="store_true",
                   help="build the string/import vocabularies from these inputs")
    p.add_argument("--string-threshold", type=int, default=None)
    p.add_argument("--import-threshold", type=int, default=None)
    p.add_argument("--strict", action="store_true",
                   help="exit nonzero if any input fails to parse")
    p.add_argument("--workers", type=int, default=1, help="parallel input workers")
    p.set_defaults(func=cmd_extract)

    p = sub.add_parser("train", help="run one training stage")
    p.add_argument("--stage", required=True,
                   choices=("mam", "clone", "toplevel-code-only", "toplevel-full"))
    p.add_argument("--corpus", required=True, help="corpus directory from gen-corpus")
    p.add_argument("--model-dir", required=True, help="directory for checkpoints/metrics")
    p.add_argument("--config", help="JSON config file (flags override it)")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--batch-size", type=int, default=None)
    p.add_argument("--max-epochs", type=int, default=None)
    p.add_argument("--patience", type=int, default=None)
    p.add_argument("--val-fraction", type=float, default=None)
    p.add_argument("--string-threshold", type=int, default=None)
    p.add_argument("--import-threshold", type=int, default=None)
    p.add_argument("--d-model", type=int, default=None)
    p.add_argument("--n-heads", type=int, default=None)
    p.add_argument("--layers", type=int, default=None, help="layers per encoder level")
    p.add_argument("--d-ff", type=int, default=None)
    p.add_argument("--quiet", action="store_true")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("detect", help="score inputs and emit detection reports")
    p.add_argument("inputs", nargs="+", help="PE files or .jsonl record files")
    p.add_argument("--checkpoint", required=True, help="toplevel-full checkpoint")
    p.add_argument("--format", choices=("json", "table"), default="json")
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--out", help="write reports here instead of stdout")
    p.add_argument("--workers", type=int, default=1)
    p.set_defaults(func=cmd_detect)

    p = sub.add_parser("analyze-importance",
                       help="compare attribution frequency against IG and Gini ranks")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--records", required=True, help="labeled executables .jsonl")
    p.add_argument("--out", help="write the JSON report here (default stdout)")
    p.add_argument("--top-k", type=int, default=5)
    p.add_argument("--bins", type=int, default=16)
    p.set_defaults(func=cmd_analyze_importance)

    p = sub.add_parser("gradcheck",
                       help="finite-difference gradient checks over all layer types")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--step", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    return parser


def _usage_error(message):
    print(f"{ERROR_PREFIX} UsageError: {message}", file=sys.stderr)
    return 2


# ---------------------------------------------------------------------------


def cmd_gen_corpus(args):
    from .corpus import CorpusSizes, generate_corpus

    if min(args.mam_blocks, args.clone_pairs, args.executables) < 1:
        return _usage_error("corpus sizes must be positive")
    if not 1 <= args.block_len_min <= args.block_len_max:
        return _usage_error("invalid block length range")
    sizes = CorpusSizes(mam_blocks=args.mam_blocks, clone_pairs=args.clone_pairs,
                        executables=args.executables)
    manifest = generate_corpus(args.out, sizes=sizes, seed=args.seed,
                               mam_block_len=(args.block_len_min, args.block_len_max))
    digest = "\n".join(f"{k}:{v}" for k, v in sorted(manifest["files"].items()))
    print(json.dumps({"manifest": manifest, "out": str(args.out)}, sort_keys=True))
    print(f"manifest-hash: {_sha256_text(digest)}")
    return 0


def _sha256_text(text):
    import hashlib

    return hashlib.sha256(text.encode()).hexdigest()


def _load_input_record(path):
    """One extraction input -> list of (id, label, strings, imports, header) dicts."""
    from .features import extract_printable_strings, import_tokens_from_pe
    from .pe import parse_pe

    path = Path(path)
    if path.suffix == ".jsonl":
        from .corpus import read_jsonl

        out = []
        for record in read_jsonl(path):
            out.append({
                "id": record.get("id", path.name),
                "label": record.get("label"),
                "strings": record.get("strings", []),
                "imports": record.get("imports", []),
                "header": record.get("header", {}),
            })
        return out
    data = path.read_bytes()
    pe = parse_pe(data)
    return [{
        "id": path.name,
        "label": None,
        "strings": extract_printable_strings(data),
        "imports": import_tokens_from_pe(pe),
        "header": pe.header_fields,
    }]


def cmd_extract(args):
    from .features import DEFAULT_FREQUENCY_THRESHOLD, FeatureSchema, build_vocabulary

    str_threshold = args.string_threshold or DEFAULT_FREQUENCY_THRESHOLD
    imp_threshold = args.import_threshold or DEFAULT_FREQUENCY_THRESHOLD

    failures = []
    def load_safe(path):
        try:
            return _load_input_record(path)
        except Exception as exc:
            failures.append({"id": str(path), "error": f"{type(exc).__name__}: {exc}"})
            return []

    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            record_lists = list(pool.map(load_safe, args.inputs))
    else:
        record_lists = [load_safe(p) for p in args.inputs]
    records = [r for chunk in record_lists for r in chunk]

    if args.fit:
        schema = FeatureSchema(
            build_vocabulary((r["strings"] for r in records), str_threshold),
            build_vocabulary((r["imports"] for r in records), imp_threshold),
        )
        schema.save(args.vocab)
    else:
        schema = FeatureSchema.load(args.vocab)

    s, n, i = schema.str_width, schema.num_width, schema.imp_width
    segments = {"str": [0, s], "num": [s, s + n], "imp": [s + n, s + n + i]}
    with open(args.out, "w") as fh:
        for record in records:
            vec = schema.static_vector(record["strings"], record["imports"], record["header"])
            row = {"id": record["id"], "label": record["label"],
                   "values": [round(v, 10) for v in vec.tolist()], "segments": segments}
            fh.write(json.dumps(row, sort_keys=True) + "\n")
        for failure in failures:
            fh.write(json.dumps({**failure, "values": None}, sort_keys=True) + "\n")
    for failure in failures:
        print(f"{ERROR_PREFIX} ExtractionError: {failure['id']}: {failure['error']}",
              file=sys.stderr)
    print(f"wrote {len(records)} feature records to {args.out}"
          + (f" ({len(failures)} failed)" if failures else ""))
    return 1 if (failures and args.strict) else 0


def _effective_train_config(args):
    effective = dict(TRAIN_DEFAULTS)
    if args.config:
        file_config = json.loads(Path(args.config).read_text())
        unknown = set(file_config) - set(effective)
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        effective.update(file_config)
    for key in effective:
        flag = getattr(args, key, None)
        if flag is not None:
            effective[key] = flag
    return effective


def cmd_train(args):
    from .galaxy import GalaxyConfig
    from .pipeline import TrainConfig, TrainingPipeline

    cfg = _effective_train_config(args)
    galaxy_config = GalaxyConfig(
        d_model=cfg["d_model"], n_heads=cfg["n_heads"], d_ff=cfg["d_ff"],
        block_layers=cfg["layers"], function_layers=cfg["layers"],
        executable_layers=cfg["layers"])
    train_config = TrainConfig(
        lr=cfg["lr"], batch_size=cfg["batch_size"], max_epochs=cfg["max_epochs"],
        patience=cfg["patience"], val_fraction=cfg["val_fraction"], seed=cfg["seed"])
    pipeline = TrainingPipeline(
        args.corpus, args.model_dir, galaxy_config=galaxy_config,
        train_config=train_config, seed=cfg["seed"],
        string_threshold=cfg["string_threshold"],
        import_threshold=cfg["import_threshold"])

    progress = None
    if not args.quiet:
        def progress(epoch_record):
            print(f"[{args.stage}] epoch {epoch_record.epoch}: "
                  f"train {epoch_record.train_loss:.4f} "
                  f"val {epoch_record.val_loss:.4f} "
                  f"metric {epoch_record.val_metric:.3f}")

    result = pipeline.run_stage(args.stage, progress=progress)
    print(json.dumps({
        "stage": args.stage,
        "best_epoch": result.best_epoch,
        "best_val_loss": result.best_val_loss,
        "stopped_early": result.stopped_early,
        "checkpoint": str(pipeline.checkpoint_path(args.stage)),
        "effective_config": cfg,
    }, sort_keys=True))
    return 0


def cmd_detect(args):
    from .detector import Detector

    detector = Detector.load(args.checkpoint, top_k=args.top_k)

    def reports_for(path):
        path = Path(path)
        if path.suffix == ".jsonl":
            from .corpus import read_jsonl

            return [detector.detect_record(r) for r in read_jsonl(path)]
        return [detector.detect_pe_bytes(path.read_bytes(), file_name=path.name)]

    if args.workers > 1:
        with ThreadPoolExecutor(max_workers=args.workers) as pool:
            chunks = list(pool.map(reports_for, args.inputs))
    else:
        chunks = [reports_for(p) for p in args.inputs]
    reports = [r for chunk in chunks for r in chunk]

    if args.format == "json":
        text = "\n".join(r.to_json() for r in reports)
    else:
        text = "\n\n".join(r.to_table() for r in reports)
    if args.out:
        Path(args.out).write_text(text + "\n")
    else:
        print(text)
    return 0


def cmd_analyze_importance(args):
    from .corpus import read_jsonl
    from .detector import Detector
    from .pipeline import feature_importance_analysis

    detector = Detector.load(args.checkpoint, top_k=args.top_k)
    records = read_jsonl(args.records)
    labels = [r.get("label") for r in records]
    if any(l is None for l in labels):
        raise ValueError("importance analysis needs labeled records")
    report = feature_importance_analysis(
        detector.static_matrix(records), labels,
        detector.attribution_counts(records, top_k=args.top_k),
        detector.schema.static_names(), n_bins=args.bins)
    text = json.dumps(report.to_dict(), sort_keys=True, indent=1)
    if args.out:
        Path(args.out).write_text(text)
    else:
        print(text)
    print(f"spearman(attribution, IG) = {report.spearman['attribution_vs_ig']:+.4f}",
          file=sys.stderr)
    return 0


def cmd_gradcheck(args):
    from .gradcheck import gradcheck_suite

    results = gradcheck_suite(seed=args.seed, h=args.step)
    worst = max(results.values())
    for name, err in sorted(results.items()):
        print(f"{name}: {err:.3e}")
    print(f"max relative error: {worst:.3e}")
    return 0 if worst < 1e-4 else 1


if __name__ == "__main__":
    sys.exit(main())
