"""Command-line workflows: convert, check, generate, train, evaluate, benchmark.

Every artifact-producing command writes a ``manifest.json`` into its output
directory recording the resolved configuration, seed, and a config hash, so a
run can be reproduced from the manifest alone.  Exit codes: 0 success, 1
operation/record failures, 2 usage errors.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from dataclasses import asdict
from pathlib import Path

from . import __version__
from . import corpus as cp
from . import decomposer as dc
from . import harness as hn
from . import treebank as tb


def _load_config(path: str | None) -> dict:
    if not path:
        return {}
    with open(path, encoding="utf-8") as fh:
        loaded = json.load(fh)
    if not isinstance(loaded, dict):
        raise ValueError("config file must hold a JSON object")
    return loaded


class _Overlay:
    """Flag > config-file > default resolution, recording resolved values."""

    def __init__(self, args: argparse.Namespace, config: dict):
        self.args = args
        self.config = config
        self.resolved: dict = {}

    def pick(self, name: str, default=None):
        flag = getattr(self.args, name.replace("-", "_"), None)
        value = flag if flag is not None else self.config.get(name, default)
        self.resolved[name] = value
        return value


def _write_manifest(out_dir: Path, command: str, overlay: _Overlay) -> None:
    blob = json.dumps(overlay.resolved, sort_keys=True)
    manifest = {
        "command": command,
        "resolved": overlay.resolved,
        "config_hash": hashlib.sha256(blob.encode("utf-8")).hexdigest(),
        "version": __version__,
    }
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "manifest.json").write_text(
        json.dumps(manifest, indent=2, sort_keys=True) + "\n", encoding="utf-8"
    )


def _read_dataset(path: str, fail_fast: bool = False):
    result = cp.read_jsonl(path, fail_fast=fail_fast)
    return result.dataset, result.errors


def _encoder_kwargs(ov: _Overlay) -> dict:
    return {
        "d_model": int(ov.pick("d-model", 64)),
        "n_layers": int(ov.pick("layers", 2)),
        "n_heads": int(ov.pick("heads", 4)),
        "d_ff": int(ov.pick("d-ff", 128)),
        "max_len": int(ov.pick("max-len", 64)),
    }


# --- commands -----------------------------------------------------------------------


def cmd_convert(args) -> int:
    ov = _Overlay(args, _load_config(args.config))
    inp, outp = Path(args.input), Path(args.output)
    errors: list[dict] = []
    if args.direction == "tree2flat":
        dataset, ingest_errors = _read_dataset(inp)
        errors = [{"line": e.line, "message": e.message} for e in ingest_errors]
        records = [
            dc.FlatRecord(ex.id, ex.locale, ex.domain, ex.tokens, ex.frame)
            for ex in dataset
        ]
        outp.write_text(dc.flat_records_to_text(records), encoding="utf-8")
    else:  # flat2tree
        rows = []
        try:
            records = dc.parse_flat_text(inp.read_text(encoding="utf-8"))
        except dc.DecomposerError as exc:
            print(f"cannot parse flat input: {exc}", file=sys.stderr)
            return 1
        for rec in records:
            try:
                tree = dc.reconstruct(rec.frame, rec.tokens)
                rows.append(
                    {
                        "id": rec.example_id,
                        "locale": rec.locale,
                        "domain": rec.domain,
                        "utterance": " ".join(rec.tokens),
                        "tree": tb.serialize(tree),
                    }
                )
            except (dc.DecomposerError, tb.TreebankError) as exc:
                errors.append({"id": rec.example_id, "message": str(exc)})
        with open(outp, "w", encoding="utf-8") as fh:
            for row in rows:
                fh.write(json.dumps(row, ensure_ascii=False) + "\n")
    if errors:
        sidecar = Path(str(outp) + ".errors.json")
        sidecar.write_text(json.dumps(errors, indent=2) + "\n", encoding="utf-8")
        print(f"{len(errors)} record(s) failed; see {sidecar}", file=sys.stderr)
        return 1
    return 0


def cmd_roundtrip_check(args) -> int:
    if bool(args.input) == bool(args.generate):
        print("exactly one of --input/--generate is required", file=sys.stderr)
        return 2
    if args.input:
        dataset, ingest_errors = _read_dataset(args.input)
        failures = [f"line {e.line}: {e.message}" for e in ingest_errors]
    else:
        cfg = cp.GeneratorConfig(**_load_config(args.generate))
        if args.seed is not None:
            cfg = cp.GeneratorConfig(**{**asdict(cfg), "seed": args.seed})
        dataset = cp.generate_synthetic(cfg)
        failures = []
    passed = 0
    for ex in dataset:
        try:
            ok_tree = dc.reconstruct(dc.decompose(ex.tree), ex.tokens) == ex.tree
            ok_text = tb.parse_top(tb.serialize(ex.tree)) == ex.tree
            if ok_tree and ok_text:
                passed += 1
            else:
                failures.append(f"{ex.id}: round-trip mismatch")
        except (dc.DecomposerError, tb.TreebankError) as exc:
            failures.append(f"{ex.id}: {exc}")
    total = len(dataset) + sum(1 for f in failures if f.startswith("line "))
    print(f"round-trip: {passed}/{total} passed, {len(failures)} failed")
    for line in failures[:20]:
        print(f"  FAIL {line}")
    return 0 if not failures else 1


def cmd_generate_data(args) -> int:
    ov = _Overlay(args, _load_config(args.config))
    cfg_fields = {
        k: v for k, v in ov.config.items() if k in cp.GeneratorConfig.__dataclass_fields__
    }
    if args.seed is not None:
        cfg_fields["seed"] = args.seed
    if args.num_examples is not None:
        cfg_fields["num_examples"] = args.num_examples
    cfg = cp.GeneratorConfig(**cfg_fields)
    ov.resolved.update(asdict(cfg))
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dataset = cp.generate_synthetic(cfg)
    cp.write_jsonl(dataset, out_dir / "dataset.jsonl")
    ontology = cp.build_ontology(cfg)
    (out_dir / "ontology.json").write_text(
        json.dumps({"intents": ontology.intents, "slots": ontology.slots},
                   indent=2, sort_keys=True) + "\n",
        encoding="utf-8",
    )
    _write_manifest(out_dir, "generate-data", ov)
    print(f"wrote {len(dataset)} examples to {out_dir / 'dataset.jsonl'}")
    return 0


def _train_common(args, continue_from=None) -> int:
    ov = _Overlay(args, _load_config(args.config))
    dataset, ingest_errors = _read_dataset(args.data)
    if ingest_errors:
        for e in ingest_errors[:10]:
            print(f"bad record at line {e.line}: {e.message}", file=sys.stderr)
        return 1
    if len(dataset) == 0:
        print("dataset is empty", file=sys.stderr)
        return 1
    seed = int(ov.pick("seed", 0))
    config = hn.TrainConfig.toy(
        epochs=int(ov.pick("epochs", 20)),
        batch_size=int(ov.pick("batch-size", 32)),
        lr=float(ov.pick("lr", 1e-3)),
    )
    if continue_from is not None:
        model = hn.load_model(continue_from)
        family = model.state_payload()["family"]
        ov.resolved["checkpoint"] = str(continue_from)
    else:
        family = ov.pick("family", "x2parser")
        model = hn.build_model(family, dataset, seed=seed,
                               encoder_kwargs=_encoder_kwargs(ov))
    eval_ds = None
    if args.eval_data:
        eval_ds, _ = _read_dataset(args.eval_data)
        ov.resolved["eval-data"] = args.eval_data
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    try:
        result = hn.train(model, dataset, config, seed=seed, eval_dataset=eval_ds,
                          verbose=args.verbose)
    except hn.TrainingError as exc:
        print(f"training aborted: {exc}", file=sys.stderr)
        return 1
    hn.save_model(model, out_dir / "checkpoint.ckpt")
    hn.write_metric_log(out_dir / "metrics.csv", result.log)
    _write_manifest(out_dir, "finetune" if continue_from else "train", ov)
    best = f"{result.best_em:.4f}" if result.log else "n/a (0 epochs)"
    print(f"{family}: best EM {best}; checkpoint at {out_dir / 'checkpoint.ckpt'}")
    return 0


def cmd_train(args) -> int:
    return _train_common(args)


def cmd_finetune(args) -> int:
    return _train_common(args, continue_from=args.checkpoint)


def cmd_eval(args) -> int:
    ov = _Overlay(args, _load_config(args.config))
    dataset, ingest_errors = _read_dataset(args.data)
    if ingest_errors:
        print(f"{len(ingest_errors)} bad records in {args.data}", file=sys.stderr)
        return 1
    model = hn.load_model(args.checkpoint)
    report = hn.evaluate(model, dataset)
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "eval_report.json").write_text(
        hn.report_to_json(report) + "\n", encoding="utf-8"
    )
    (out_dir / "eval_report.txt").write_text(report.to_text() + "\n", encoding="utf-8")
    ov.resolved.update({"checkpoint": args.checkpoint, "data": args.data})
    _write_manifest(out_dir, "eval", ov)
    print(report.to_text())
    return 0


def cmd_bench_latency(args) -> int:
    ov = _Overlay(args, _load_config(args.config))
    dataset, _ = _read_dataset(args.data)
    models = {}
    if args.checkpoints:
        for path in args.checkpoints.split(","):
            model = hn.load_model(path.strip())
            models[model.state_payload()["family"]] = model
    else:
        seed = int(ov.pick("seed", 0))
        for family in ov.pick("families", "x2parser,nlm,seq2seq").split(","):
            models[family.strip()] = hn.build_model(
                family.strip(), dataset, seed=seed, encoder_kwargs=_encoder_kwargs(ov)
            )
    buckets = tuple(int(b) for b in str(ov.pick("buckets", "10,20,30,40")).split(","))
    report = hn.latency_benchmark(
        models, dataset, buckets=buckets,
        repetitions=int(ov.pick("repetitions", 3)),
    )
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "latency.json").write_text(hn.report_to_json(report) + "\n", encoding="utf-8")
    (out_dir / "latency.txt").write_text(report.to_text() + "\n", encoding="utf-8")
    _write_manifest(out_dir, "bench-latency", ov)
    print(report.to_text())
    return 0


def cmd_fewshot(args) -> int:
    ov = _Overlay(args, _load_config(args.config))
    dataset, ingest_errors = _read_dataset(args.data)
    if ingest_errors:
        print(f"{len(ingest_errors)} bad records in {args.data}", file=sys.stderr)
        return 1
    seed = int(ov.pick("seed", 0))
    fractions = tuple(
        float(f) for f in str(ov.pick("fractions", "0.01,0.03,0.06,0.10")).split(",")
    )
    families = tuple(
        f.strip() for f in str(ov.pick("families", "x2parser,nlm,seq2seq")).split(",")
    )
    train_cfg = hn.TrainConfig.toy(
        epochs=int(ov.pick("epochs", 15)),
        batch_size=int(ov.pick("batch-size", 32)),
        lr=float(ov.pick("lr", 1e-3)),
    )
    finetune_cfg = hn.TrainConfig.toy(
        epochs=int(ov.pick("finetune-epochs", 20)),
        batch_size=int(ov.pick("batch-size", 32)),
        lr=float(ov.pick("lr", 1e-3)),
    )
    try:
        report = hn.run_few_shot_protocol(
            dataset,
            target_domain=ov.pick("target-domain"),
            train_config=train_cfg,
            finetune_config=finetune_cfg,
            families=families,
            fractions=fractions,
            seed=seed,
            encoder_kwargs=_encoder_kwargs(ov),
            verbose=args.verbose,
        )
    except (cp.CorpusError, hn.TrainingError) as exc:
        print(f"few-shot run failed: {exc}", file=sys.stderr)
        return 1
    out_dir = Path(args.out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    (out_dir / "fewshot_report.json").write_text(
        hn.report_to_json(report) + "\n", encoding="utf-8"
    )
    (out_dir / "fewshot_report.txt").write_text(report.to_text() + "\n", encoding="utf-8")
    _write_manifest(out_dir, "fewshot", ov)
    print(report.to_text())
    return 0


# --- parser wiring --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="tcsp",
        description="Compositional semantic parsing toolkit",
    )
    parser.add_argument("--version", action="version", version=f"tcsp {__version__}")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_dir=True):
        p.add_argument("--config", help="JSON config file; explicit flags win")
        p.add_argument("--seed", type=int)
        p.add_argument("--verbose", action="store_true")
        if out_dir:
            p.add_argument("--out-dir", required=True)

    p = sub.add_parser("convert", help="tree<->flat label conversion")
    p.add_argument("--input", required=True)
    p.add_argument("--direction", required=True, choices=["tree2flat", "flat2tree"])
    p.add_argument("--output", required=True)
    p.add_argument("--config")
    p.set_defaults(fn=cmd_convert)

    p = sub.add_parser("roundtrip-check", aliases=["roundtrip_check"],
                       help="verify decompose/reconstruct equivalence on a corpus")
    p.add_argument("--input")
    p.add_argument("--generate", help="generator config JSON")
    p.add_argument("--seed", type=int)
    p.set_defaults(fn=cmd_roundtrip_check)

    p = sub.add_parser("generate-data", aliases=["generate_data"],
                       help="sample a synthetic corpus")
    p.add_argument("--num-examples", type=int)
    common(p)
    p.set_defaults(fn=cmd_generate_data)

    def model_flags(p):
        p.add_argument("--d-model", type=int)
        p.add_argument("--layers", type=int)
        p.add_argument("--heads", type=int)
        p.add_argument("--d-ff", type=int)
        p.add_argument("--max-len", type=int)

    p = sub.add_parser("train", help="train a model from scratch")
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data")
    p.add_argument("--family", choices=list(hn.MODEL_FAMILIES))
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    model_flags(p)
    common(p)
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("finetune", help="continue training from a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--eval-data")
    p.add_argument("--epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    common(p)
    p.set_defaults(fn=cmd_finetune)

    p = sub.add_parser("eval", help="exact-match evaluation of a checkpoint")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--data", required=True)
    common(p)
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("bench-latency", aliases=["bench_latency"],
                       help="wall-clock latency by output-length bucket")
    p.add_argument("--data", required=True)
    p.add_argument("--checkpoints", help="comma-separated checkpoint paths")
    p.add_argument("--families", help="comma-separated families (dummy-initialized)")
    p.add_argument("--buckets")
    p.add_argument("--repetitions", type=int)
    model_flags(p)
    common(p)
    p.set_defaults(fn=cmd_bench_latency)

    p = sub.add_parser("fewshot", help="source-train/fine-tune/test protocol")
    p.add_argument("--data", required=True)
    p.add_argument("--target-domain", required=True)
    p.add_argument("--families")
    p.add_argument("--fractions")
    p.add_argument("--epochs", type=int)
    p.add_argument("--finetune-epochs", type=int)
    p.add_argument("--batch-size", type=int)
    p.add_argument("--lr", type=float)
    model_flags(p)
    common(p)
    p.set_defaults(fn=cmd_fewshot)

    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return args.fn(args)
    except FileNotFoundError as exc:
        print(f"file not found: {exc.filename}", file=sys.stderr)
        return 1
    except (cp.CorpusError, dc.DecomposerError, tb.TreebankError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
