"""Command-line surface.

Commands: synth-gen, train-speaker, train-listener, eval-rg, rerank, embed,
classify, retrieve, explain, export-emb, serve. Every command takes
--config (JSON defaults), --seed, and --out; train commands take --profile.
Each run snapshots its resolved arguments into <out>/config.json so any
artifact directory can be reproduced.
"""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from . import downstream, evaluation, pragmatics, synthworld
from .data import build_vocabulary, load_annotations, load_features, save_features
from .errors import ConfigError, RefGameError, UnknownCommand
from .listener import (
    DiscerningJudge,
    TrainedListenerJudge,
    load_listener,
    save_listener,
    train_listener,
)
from .profiles import get_profile
from .speaker import (
    decode_records,
    load_run,
    load_speaker,
    save_run,
    save_speaker,
    train_speaker,
)


def _add_common(p: argparse.ArgumentParser, out_required: bool = True):
    p.add_argument("--config", type=str, default=None, help="JSON file of default flag values")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", type=str, required=out_required)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="refgame")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("synth-gen", help="generate a synthetic dataset")
    _add_common(p)
    p.add_argument("--train", type=int, default=2000)
    p.add_argument("--val", type=int, default=200)
    p.add_argument("--test", type=int, default=500)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--difficulty", type=float, default=None,
                   help="per-slot signal decay along the saliency order")
    p.add_argument("--render", action="store_true", help="also rasterize PNGs")
    p.add_argument("--image-size", type=int, default=128)
    p.add_argument("--categories", type=int, default=0,
                   help="also sample N category prototypes into <out>/categories")
    p.add_argument("--per-category-train", type=int, default=40)
    p.add_argument("--per-category-test", type=int, default=20)
    p.add_argument("--category-noise", type=float, default=None)

    for kind in ("speaker", "listener"):
        p = sub.add_parser(f"train-{kind}", help=f"train a {kind} model")
        _add_common(p)
        p.add_argument("--data", type=str, required=True)
        p.add_argument("--split", type=str, default="train")
        p.add_argument("--kind", type=str, default="simple",
                       choices=["simple", "discerning"])
        p.add_argument("--profile", type=str, default="desk", choices=["desk", "paper"])
        p.add_argument("--epochs", type=int, default=8)
        p.add_argument("--min-freq", type=int, default=6)
        if kind == "speaker":
            p.add_argument("--stage2-epochs", type=int, default=0)
        else:
            p.add_argument("--regime", type=str, default="contrastive",
                           choices=["contrastive", "random_negative"])

    p = sub.add_parser("eval-rg", help="reference-game evaluation")
    _add_common(p)
    p.add_argument("--data", type=str, help="dataset directory")
    p.add_argument("--split", type=str, default="test")
    p.add_argument("--run", type=str, help="decoded run file to evaluate")
    p.add_argument("--speaker", type=str, help="decode this checkpoint instead of --run")
    p.add_argument("--listener", type=str, help="listener checkpoint as the judge")
    p.add_argument("--oracle", action="store_true", help="use the grammar oracle as judge")
    p.add_argument("--pair-judge", action="store_true",
                   help="judge full phrase pairs (discerning or 2xSL reading)")
    p.add_argument("--top-k", type=str, default="1,5,10")
    p.add_argument("--beam", type=int, default=10)
    p.add_argument("--max-len", type=int, default=14)
    p.add_argument("--n-pairs", type=int, default=None)
    p.add_argument("--positions", action="store_true",
                   help="per-position accuracy on ground-truth annotations")
    p.add_argument("--tasks", type=str, help="session task dump for human aggregation")
    p.add_argument("--answers", type=str, help="answer log for human aggregation")
    p.add_argument("--panel", type=int, default=3)

    p = sub.add_parser("rerank", help="pragmatic reranking of a speaker's beams")
    _add_common(p)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--split", type=str, default="test")
    p.add_argument("--speaker", type=str, required=True)
    p.add_argument("--listener", type=str, required=True)
    p.add_argument("--lambda", dest="lam", type=float, default=0.0)
    p.add_argument("--select-lambda", action="store_true",
                   help="pick lambda on the validation split before reranking")
    p.add_argument("--grid", type=str, default="0,0.1,0.2,0.3,0.4,0.5,0.6,0.7,0.8,0.9,1.0")
    p.add_argument("--val-split", type=str, default="val")
    p.add_argument("--n-pairs", type=int, default=None)
    p.add_argument("--beam", type=int, default=10)
    p.add_argument("--max-len", type=int, default=14)

    p = sub.add_parser("embed", help="semantic phrase-lexicon embeddings of images")
    _add_common(p)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--split", type=str, default="train", help="lexicon source split")
    p.add_argument("--listener", type=str, required=True)
    p.add_argument("--k", type=int, default=50)
    p.add_argument("--opponent", action="store_true")
    p.add_argument("--images", type=str, default=None,
                   help="directory with features.bin to embed (default: --data)")

    p = sub.add_parser("classify", help="linear probe on semantic embeddings")
    _add_common(p)
    p.add_argument("--data", type=str, required=True, help="pair dataset for the lexicon")
    p.add_argument("--split", type=str, default="train")
    p.add_argument("--categories", type=str, required=True, help="category dataset dir")
    p.add_argument("--listener", type=str, required=True)
    p.add_argument("--k", type=str, default="50", help="lexicon sizes, comma-separated")
    p.add_argument("--opponent", action="store_true")
    p.add_argument("--l2", type=float, default=1e-4)

    p = sub.add_parser("retrieve", help="rank images by phrase queries")
    _add_common(p)
    p.add_argument("--data", type=str, required=True, help="directory with features.bin")
    p.add_argument("--listener", type=str, required=True)
    p.add_argument("--query", action="append", required=True)
    p.add_argument("--top-n", type=int, default=18)
    p.add_argument("--strategy", type=str, default="concat", choices=["concat", "mean"])

    p = sub.add_parser("explain", help="attribute explanations between two categories")
    _add_common(p)
    p.add_argument("--categories", type=str, required=True)
    p.add_argument("--speaker", type=str, required=True)
    p.add_argument("--cat-a", type=int, required=True)
    p.add_argument("--cat-b", type=int, required=True)
    p.add_argument("--n-images", type=int, default=10)
    p.add_argument("--beam", type=int, default=10)
    p.add_argument("--max-len", type=int, default=14)
    p.add_argument("--top-n", type=int, default=10)

    p = sub.add_parser("export-emb", help="export raw phrase/image embeddings")
    _add_common(p)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--split", type=str, default="train")
    p.add_argument("--listener", type=str, required=True)
    p.add_argument("--phrases-top", type=int, default=None,
                   help="export theta of the N most frequent phrases")
    p.add_argument("--images", action="store_true", help="export phi of all images")

    p = sub.add_parser("serve", help="run the human-listener session service")
    _add_common(p, out_required=False)
    p.add_argument("--root", type=str, required=True)
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--host", type=str, default="127.0.0.1")
    p.add_argument("--frontend", type=str, default=None)
    return parser


def _apply_config(parser: argparse.ArgumentParser, args: argparse.Namespace):
    if not args.config:
        return args
    path = Path(args.config)
    if not path.exists():
        raise ConfigError(f"config file {path} does not exist")
    try:
        overrides = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config file {path}: {exc}") from exc
    if not isinstance(overrides, dict):
        raise ConfigError(f"config file {path} must hold a JSON object")
    for key, value in overrides.items():
        attr = key.replace("-", "_")
        if not hasattr(args, attr):
            raise ConfigError(f"config key {key!r} is not a flag of this command")
        setattr(args, attr, value)
    return args


def _snapshot(args: argparse.Namespace) -> None:
    if getattr(args, "out", None) is None:
        return
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    payload = {k: v for k, v in sorted(vars(args).items()) if k != "config"}
    (out / "config.json").write_text(json.dumps(payload, indent=2, sort_keys=True) + "\n",
                                     encoding="utf-8")


# -- command bodies -----------------------------------------------------------------


def cmd_synth_gen(args) -> int:
    spec = synthworld.default_world_spec(seed=args.seed, saliency_decay=args.difficulty)
    spec = replace(spec, noise_sigma=args.noise)
    n_pairs = {}
    for split, count in (("train", args.train), ("val", args.val), ("test", args.test)):
        if count > 0:
            n_pairs[split] = count
    dataset = synthworld.generate_dataset(spec, n_pairs)
    synthworld.write_dataset(dataset, args.out, render=args.render, image_size=args.image_size)
    if args.categories > 0:
        noise = args.category_noise if args.category_noise is not None else args.noise
        cats = synthworld.generate_categories(
            replace(spec, noise_sigma=noise),
            n_categories=args.categories,
            n_train=args.per_category_train,
            n_test=args.per_category_test,
            seed=args.seed,
        )
        synthworld.write_categories(cats, Path(args.out) / "categories")
    print(f"wrote dataset to {args.out}: " +
          ", ".join(f"{k}={v}" for k, v in n_pairs.items()))
    return 0


def _load_corpus(data_dir: str, split: str):
    root = Path(data_dir)
    ann = root / f"{split}.jsonl"
    if not ann.exists():
        raise ConfigError(f"no {split}.jsonl under {data_dir}")
    records = load_annotations(ann)
    features = load_features(root / "features.bin")
    return records, features


def cmd_train_speaker(args) -> int:
    records, features = _load_corpus(args.data, args.split)
    vocab = build_vocabulary(records, min_freq=args.min_freq)
    model, history = train_speaker(
        records, features, vocab, kind=args.kind, profile=get_profile(args.profile),
        epochs=args.epochs, seed=args.seed, stage2_epochs=args.stage2_epochs,
    )
    save_speaker(model, args.out)
    (Path(args.out) / "history.json").write_text(json.dumps(history) + "\n", encoding="utf-8")
    print(f"speaker[{args.kind}] loss {history[0]:.4f} -> {history[-1]:.4f}; saved to {args.out}")
    return 0


def cmd_train_listener(args) -> int:
    records, features = _load_corpus(args.data, args.split)
    vocab = build_vocabulary(records, min_freq=args.min_freq)
    model, history = train_listener(
        records, features, vocab, regime=args.regime, kind=args.kind,
        profile=get_profile(args.profile), epochs=args.epochs, seed=args.seed,
    )
    save_listener(model, args.out)
    (Path(args.out) / "history.json").write_text(json.dumps(history) + "\n", encoding="utf-8")
    print(f"listener[{args.kind},{args.regime}] loss {history[0]:.4f} -> {history[-1]:.4f}; "
          f"saved to {args.out}")
    return 0


def _make_judge(args, dataset_dir: str):
    if args.oracle:
        dataset = synthworld.load_dataset(dataset_dir)
        return synthworld.OracleListener(dataset.grammar, dataset.objects)
    if not args.listener:
        raise ConfigError("pass --listener CKPT or --oracle")
    model = load_listener(args.listener)
    features = load_features(Path(dataset_dir) / "features.bin")
    if getattr(args, "pair_judge", False):
        return DiscerningJudge(model, features)
    return TrainedListenerJudge(model, features)


def cmd_eval_rg(args) -> int:
    if args.tasks and args.answers:
        from .service import load_answers, load_session_tasks

        tasks = load_session_tasks(args.tasks)
        answers = load_answers(args.answers)
        report = evaluation.aggregate_human(tasks, answers, panel_size=args.panel)
        evaluation.save_report(report, Path(args.out) / "report.json")
        print(report.render())
        return 0

    if not args.data:
        raise ConfigError("--data is required for machine evaluation")
    records, features = _load_corpus(args.data, args.split)
    if args.n_pairs:
        records = records[: args.n_pairs]
    judge = _make_judge(args, args.data)
    pairs = evaluation.pair_index(records)
    report = evaluation.EvalReport(total_tasks=0)

    if args.positions:
        builder = (evaluation.pair_tasks_from_annotations if args.pair_judge
                   else evaluation.tasks_from_annotations)
        tasks = builder(records)
        report.total_tasks = len(tasks)
        report.per_position = evaluation.position_accuracy(tasks, pairs, judge)
    else:
        if args.speaker:
            model = load_speaker(args.speaker)
            entries = decode_records(model, records, features,
                                     beam_width=args.beam, max_len=args.max_len)
            save_run(entries, Path(args.out) / "run.jsonl")
        elif args.run:
            entries = load_run(args.run)
            entries = [e for e in entries if e.pair_id in pairs]
        else:
            raise ConfigError("pass --speaker, --run, or --positions")
        tasks = evaluation.tasks_from_run(entries)
        report.total_tasks = len(tasks)
        for k in _parse_int_list(args.top_k):
            report.per_k[k] = evaluation.rg_accuracy(tasks, pairs, judge, k)
    evaluation.save_report(report, Path(args.out) / "report.json")
    print(report.render())
    return 0


def _parse_int_list(text: str) -> list[int]:
    try:
        return [int(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad integer list {text!r}") from exc


def _parse_float_list(text: str) -> list[float]:
    try:
        return [float(tok) for tok in text.split(",") if tok.strip()]
    except ValueError as exc:
        raise ConfigError(f"bad float list {text!r}") from exc


def cmd_rerank(args) -> int:
    records, features = _load_corpus(args.data, args.split)
    if args.n_pairs:
        records = records[: args.n_pairs]
    speaker_model = load_speaker(args.speaker)
    listener_model = load_listener(args.listener)
    lam = args.lam

    if args.select_lambda:
        from .speaker import beam_decode

        val_records, val_features = _load_corpus(args.data, args.val_split)
        dataset = synthworld.load_dataset(args.data)
        judge = synthworld.OracleListener(dataset.grammar, dataset.objects)
        games = []
        for rec in val_records:
            feats_t = val_features.get(rec.image_a)
            feats_o = val_features.get(rec.image_b)
            inputs = feats_t if speaker_model.config.kind == "simple" else (feats_t, feats_o)
            beam = beam_decode(speaker_model, inputs, args.beam, args.max_len)
            games.append((beam, feats_t, feats_o, rec.image_a, rec.image_b))
        grid = _parse_float_list(args.grid)
        lam, accuracies = pragmatics.select_lambda(games, grid, listener_model, judge)
        (Path(args.out) / "lambda.json").write_text(
            json.dumps({"selected": lam, "grid_accuracy": accuracies}, indent=2,
                       sort_keys=True) + "\n", encoding="utf-8")
        print(f"selected lambda={lam}")

    from .speaker import DecodedEntry, beam_decode

    config = pragmatics.RerankConfig(lam=lam, listener=listener_model)
    entries = []
    for rec in records:
        feats_t = features.get(rec.image_a)
        feats_o = features.get(rec.image_b)
        inputs = feats_t if speaker_model.config.kind == "simple" else (feats_t, feats_o)
        beam = beam_decode(speaker_model, inputs, args.beam, args.max_len)
        for rp in pragmatics.rerank(beam, feats_t, feats_o, config):
            entries.append(DecodedEntry(rec.pair_id, "a", rp.rank, rp.phrase.text,
                                        rp.phrase.log_prob))
    save_run(entries, Path(args.out) / "run.jsonl")
    print(f"reranked {len(records)} pairs at lambda={lam} -> {args.out}/run.jsonl")
    return 0


def cmd_embed(args) -> int:
    records, _ = _load_corpus(args.data, args.split)
    listener_model = load_listener(args.listener)
    lexicon = downstream.build_lexicon(records, args.k, opponent=args.opponent)
    image_dir = Path(args.images) if args.images else Path(args.data)
    features = load_features(image_dir / "features.bin")
    ids, matrix = downstream.embed_images(listener_model, lexicon, features)
    from .data import FeatureStore

    save_features(FeatureStore(ids=ids, matrix=matrix.astype(np.float32)),
                  Path(args.out) / "embeddings.bin")
    (Path(args.out) / "lexicon.json").write_text(
        json.dumps({"entries": lexicon.texts(), "opponent": lexicon.opponent}, indent=2)
        + "\n", encoding="utf-8")
    print(f"embedded {len(ids)} images into {len(lexicon)} dims")
    return 0


def cmd_classify(args) -> int:
    records, _ = _load_corpus(args.data, args.split)
    listener_model = load_listener(args.listener)
    cats = synthworld.load_categories(args.categories)
    results = {}
    for k in _parse_int_list(args.k):
        lexicon = downstream.build_lexicon(records, k, opponent=args.opponent)
        ids_tr, x_tr = downstream.embed_images(listener_model, lexicon, cats.features,
                                               cats.train_ids)
        ids_te, x_te = downstream.embed_images(listener_model, lexicon, cats.features,
                                               cats.test_ids)
        y_tr = [cats.labels[i] for i in ids_tr]
        y_te = [cats.labels[i] for i in ids_te]
        _, accuracy = downstream.classify(x_tr, y_tr, x_te, y_te, l2=args.l2)
        results[str(k)] = accuracy
        print(f"K={k}: held-out accuracy {accuracy:.3f}")
    (Path(args.out) / "accuracy.json").write_text(
        json.dumps(results, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return 0


def cmd_retrieve(args) -> int:
    listener_model = load_listener(args.listener)
    features = load_features(Path(args.data) / "features.bin")
    queries = [q.split() for q in args.query]
    ranking = downstream.retrieve(listener_model, queries, features,
                                  top_n=args.top_n, strategy=args.strategy)
    downstream.save_ranking(ranking, Path(args.out) / "ranking.jsonl")
    for image_id, score in ranking[:5]:
        print(f"{image_id}\t{score:.4f}")
    return 0


def cmd_explain(args) -> int:
    speaker_model = load_speaker(args.speaker)
    cats = synthworld.load_categories(args.categories)
    by_label: dict[int, list[str]] = {}
    for oid in cats.train_ids:
        by_label.setdefault(cats.labels[oid], []).append(oid)
    try:
        images_a = by_label[args.cat_a][: args.n_images]
        images_b = by_label[args.cat_b][: args.n_images]
    except KeyError as exc:
        raise ConfigError(f"no such category label {exc}") from exc
    report = downstream.explain_categories(
        speaker_model, cats.features, images_a, images_b,
        beam_width=args.beam, max_len=args.max_len, top_n=args.top_n,
    )
    (Path(args.out) / "explanations.json").write_text(
        json.dumps(report.to_json(), indent=2) + "\n", encoding="utf-8")
    for side, entries in (("A", report.side_a), ("B", report.side_b)):
        print(f"category {side}:")
        for e in entries:
            print(f"  {e.text}  (images {e.image_frequency:+d}, phrases {e.phrase_frequency:+d})")
    return 0


def cmd_export_emb(args) -> int:
    records, _ = _load_corpus(args.data, args.split)
    listener_model = load_listener(args.listener)
    if (args.phrases_top is None) == (not args.images):
        raise ConfigError("pass exactly one of --phrases-top / --images")
    if args.phrases_top is not None:
        lexicon = downstream.build_lexicon(records, args.phrases_top)
        store = downstream.export_embeddings(listener_model, phrases=list(lexicon.entries))
    else:
        features = load_features(Path(args.data) / "features.bin")
        store = downstream.export_embeddings(listener_model, features=features)
    save_features(store, Path(args.out) / "embeddings.bin")
    print(f"exported {len(store)} vectors of dim {store.dim}")
    return 0


def cmd_serve(args) -> int:
    import uvicorn

    from .service import create_app

    app = create_app(args.root, out_dir=args.out, frontend_dir=args.frontend)
    uvicorn.run(app, host=args.host, port=args.port)
    return 0


COMMANDS = {
    "synth-gen": cmd_synth_gen,
    "train-speaker": cmd_train_speaker,
    "train-listener": cmd_train_listener,
    "eval-rg": cmd_eval_rg,
    "rerank": cmd_rerank,
    "embed": cmd_embed,
    "classify": cmd_classify,
    "retrieve": cmd_retrieve,
    "explain": cmd_explain,
    "export-emb": cmd_export_emb,
    "serve": cmd_serve,
}


def main(argv: list[str] | None = None) -> int:
    argv = list(sys.argv[1:] if argv is None else argv)
    parser = build_parser()
    try:
        if argv and not argv[0].startswith("-") and argv[0] not in COMMANDS:
            raise UnknownCommand(f"unknown command {argv[0]!r}")
        args = parser.parse_args(argv)
        if args.command is None:
            parser.print_help()
            return 2
        args = _apply_config(parser, args)
        _snapshot(args)
        return COMMANDS[args.command](args)
    except RefGameError as exc:
        print(f"error[{exc.code}]: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
