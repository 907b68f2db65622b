"""Command-line entry point: curate, pretrain, eval, zeroshot, bench, synth."""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

import numpy as np

from . import encoders as E
from . import evaluation as V
from .bench import benchmark
from .checkpoint import load_bundle
from .data import (FilterConfig, RejectReason, curate, fit_to_resolution, load_blacklist,
                   read_shard, write_shard)
from .synthetic import gold_by_label, planted_corpus
from .tensor import ContractViolation
from .trainer import Trainer, read_config, switch_stage

DIRECTION_FLAGS = {"t2i": ("text_to_image",), "i2t": ("image_to_text",),
                   "both": ("text_to_image", "image_to_text")}
SHORT = {"text_to_image": "t2i", "image_to_text": "i2t"}


class CommandError(Exception):
    pass


def _out(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def _load_model(path):
    try:
        return load_bundle(path).to_model()
    except (OSError, ValueError) as exc:
        raise CommandError(f"cannot load checkpoint {path}: {exc}") from exc


def _read_shards(paths):
    records = []
    for p in paths:
        try:
            records.extend(read_shard(p))
        except (OSError, ValueError) as exc:
            raise CommandError(str(exc)) from exc
    return records


def _filter_config(path) -> FilterConfig:
    if path is None:
        return FilterConfig()
    kw = {}
    for line in Path(path).read_text(encoding="utf-8").splitlines():
        line = line.strip()
        if not line or line.startswith("#"):
            continue
        key, _, value = line.partition("=")
        key, value = key.strip(), value.strip()
        if key in ("min_chars", "max_chars"):
            kw[key] = int(value)
        elif key == "score_threshold":
            kw[key] = float(value)
    return FilterConfig(**kw)


def cmd_curate(args) -> int:
    config = _filter_config(args.config)
    if args.blacklist is not None:
        try:
            config.blacklist = load_blacklist(args.blacklist)
        except OSError as exc:
            raise CommandError(f"cannot read blacklist {args.blacklist}: {exc}") from exc
    records = _read_shards(args.shards)
    kept, rejected = curate(records, config)
    out = _out(args)
    write_shard(kept, out / "curated.shard")
    print(f"total\t{len(records)}")
    print(f"kept\t{len(kept)}")
    for reason in RejectReason:
        print(f"{reason.value}\t{rejected.get(reason, 0)}")
    return 0


def _training_records(run, seed):
    source = run.options.get("data", "synthetic")
    if source == "synthetic":
        n = int(run.options.get("synthetic_pairs", 256))
        records, _ = planted_corpus(n, int(run.options.get("data_seed", seed)),
                                    size=run.image.resolution)
        return records
    return _read_shards([source])


def cmd_pretrain(args, parser) -> int:
    if args.stage == 2 and args.resume is None:
        parser.error("--stage 2 requires --resume CHECKPOINT")
    try:
        run = read_config(args.config)
    except (OSError, ValueError) as exc:
        raise CommandError(f"bad config {args.config}: {exc}") from exc
    schedule = run.stages[args.stage]
    if args.stage == 1:
        parts = run.options.get("init_parts")
        selected = tuple(p for p in parts.split(",") if p) if parts else E.PART_NAMES
        try:
            model = E.init_model(run.image, run.text, args.seed, args.resume, selected)
        except (OSError, ValueError) as exc:
            raise CommandError(str(exc)) from exc
        trainer = Trainer(model, schedule)
    else:
        try:
            trainer = switch_stage(args.resume, schedule)
        except (OSError, ValueError) as exc:
            raise CommandError(str(exc)) from exc
    records = _training_records(run, args.seed)
    result = trainer.run(
        records, args.seed, _out(args),
        workers=int(run.options.get("workers", 1)),
        checkpoint_interval=int(run.options.get("checkpoint_interval", 0)),
        augment=run.options.get("augment", "true").lower() in ("1", "true", "yes"),
    )
    print(f"stage {args.stage}: {len(result.losses)} steps, {result.epochs} epochs, "
          f"final loss {result.losses[-1]:.4f}, checkpoint {result.checkpoint}")
    return 0


def _check_gold(gold, n_texts, n_images):
    bad_q = sorted(q for q in gold if not 0 <= q < n_texts)
    bad_c = sorted({c for cs in gold.values() for c in cs if not 0 <= c < n_images})
    missing = sorted(set(range(n_texts)) - set(gold))
    problems = []
    if bad_q:
        problems.append(f"unknown query ids {bad_q}")
    if bad_c:
        problems.append(f"unknown candidate ids {bad_c}")
    if missing:
        problems.append(f"queries without gold: {missing}")
    if problems:
        raise CommandError("gold file does not match the eval shard: " + "; ".join(problems))


def cmd_eval(args) -> int:
    model = _load_model(args.checkpoint)
    records = _read_shards([args.shard])
    n = len(records)
    gold = V.read_gold(args.gold) if args.gold else {i: {i} for i in range(n)}
    _check_gold(gold, n, n)
    images = _embed_shard_images(model, records)
    texts = V.embed_texts(model, [r.caption for r in records])
    out = _out(args)
    for direction in DIRECTION_FLAGS[args.direction]:
        g = gold if direction == "text_to_image" else V.invert_gold(gold, n)
        missing = sorted(q for q, c in g.items() if not c)
        if missing:
            raise CommandError(f"images without any gold caption: {missing}")
        report = V.retrieval_eval(images, texts, g, direction)
        V.write_report(out / f"report_{SHORT[direction]}.tsv", [report])
        print("\t".join(report.row()))
    return 0


def _embed_shard_images(model, records):
    r = model.image_config.resolution
    return V.embed_images(model, np.stack([fit_to_resolution(rec.pixels(), r) for rec in records]))


def _read_lines(path):
    try:
        text = Path(path).read_text(encoding="utf-8")
    except OSError as exc:
        raise CommandError(f"cannot read {path}: {exc}") from exc
    return [l for l in text.splitlines() if l.strip() and not l.startswith("#")]


def cmd_zeroshot(args) -> int:
    model = _load_model(args.checkpoint)
    records = _read_shards([args.shard])
    templates = _read_lines(args.templates) if args.templates else ["a photo of {}"]
    names = list(dict.fromkeys(r.caption for r in records))
    if not names:
        raise CommandError("shard holds no labelled images")
    try:
        classes = [V.ClassPromptSet(name, templates) for name in names]
    except ContractViolation as exc:
        raise CommandError(str(exc)) from exc
    labels = np.array([names.index(r.caption) for r in records])
    images = _embed_shard_images(model, records)
    class_embs = V.build_class_embeddings(classes, model)
    preds = V.classify_all(images, class_embs)
    out = _out(args)
    lines = ["index\tlabel\tprediction"] + [f"{i}\t{names[l]}\t{names[p]}"
                                            for i, (l, p) in enumerate(zip(labels, preds))]
    (out / "predictions.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    summary = [f"accuracy\t{V.display(V.accuracy(preds, labels))}",
               f"mean_per_class\t{V.display(V.mean_per_class_accuracy(preds, labels, len(names)))}"]
    if args.variants:
        variants = {}
        for line in _read_lines(args.variants):
            name, _, alt = line.partition("\t")
            if name not in names:
                raise CommandError(f"variant for unknown class {name!r}")
            variants[names.index(name)] = alt
        ab = V.negation_ablation(images, labels, classes, variants, model)
        summary += [f"variant_accuracy\t{V.display(ab.variant_accuracy)}",
                    f"delta\t{V.display(ab.delta)}"]
    (out / "zeroshot.tsv").write_text("\n".join(summary) + "\n", encoding="utf-8")
    print("\n".join(summary))
    return 0


def cmd_bench(args) -> int:
    model = _load_model(args.checkpoint)
    report = benchmark(model, args.component, args.iterations, args.batch_size,
                       args.warmup_iters, args.seed)
    report.write(_out(args) / f"bench_{args.component}.tsv")
    print(f"{report.component}: {report.iterations} iterations at batch {report.batch_size}, "
          f"mean {report.mean_ms:.3f} ms, std {report.std_ms:.3f} ms")
    return 0


def cmd_synth(args) -> int:
    """Write train/eval shards of the planted corpus plus the eval gold file."""
    records, labels = planted_corpus(args.pairs, args.seed)
    n_eval = int(round(args.pairs * args.eval_fraction))
    out = _out(args)
    write_shard(records[n_eval:], out / "train.shard")
    write_shard(records[:n_eval], out / "eval.shard")
    gold = gold_by_label(labels[:n_eval], labels[:n_eval])
    lines = [f"{q}\t{c}" for q in sorted(gold) for c in sorted(gold[q])]
    (out / "eval_gold.tsv").write_text("\n".join(lines) + "\n", encoding="utf-8")
    print(f"wrote {len(records) - n_eval} train and {n_eval} eval pairs to {out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="twostage-clip", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--out", required=True, help="output directory")
        p.add_argument("--seed", type=int, default=0)

    p = sub.add_parser("curate", help="filter image-text shards")
    p.add_argument("shards", nargs="*")
    p.add_argument("--blacklist")
    p.add_argument("--config")
    common(p)

    p = sub.add_parser("pretrain", help="run one pretraining stage")
    p.add_argument("--config", required=True)
    p.add_argument("--stage", type=int, choices=(1, 2), required=True)
    p.add_argument("--resume")
    common(p)

    p = sub.add_parser("eval", help="retrieval Recall@K / mean recall")
    p.add_argument("checkpoint")
    p.add_argument("shard")
    p.add_argument("--gold")
    p.add_argument("--direction", choices=tuple(DIRECTION_FLAGS), default="both")
    common(p)

    p = sub.add_parser("zeroshot", help="prompt-ensembled zero-shot classification")
    p.add_argument("checkpoint")
    p.add_argument("shard")
    p.add_argument("--templates")
    p.add_argument("--variants")
    common(p)

    p = sub.add_parser("bench", help="forward-pass latency")
    p.add_argument("checkpoint")
    p.add_argument("--component", choices=("vision", "text"), default="vision")
    p.add_argument("--iterations", type=int, default=100)
    p.add_argument("--batch-size", type=int, default=1)
    p.add_argument("--warmup-iters", type=int, default=10)
    common(p)

    p = sub.add_parser("synth", help="write a synthetic planted-correspondence corpus")
    p.add_argument("--pairs", type=int, default=256)
    p.add_argument("--eval-fraction", type=float, default=0.25)
    common(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    handlers = {"curate": cmd_curate, "eval": cmd_eval, "zeroshot": cmd_zeroshot,
                "bench": cmd_bench, "synth": cmd_synth}
    try:
        if args.command == "pretrain":
            return cmd_pretrain(args, parser)
        return handlers[args.command](args)
    except (CommandError, ContractViolation, OSError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
