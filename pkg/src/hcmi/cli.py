"""Command-line harness: gen, train, eval, ablate, gradcheck, dump-matching."""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from hcmi.config import load_config
from hcmi.data import FeatureStore, generate_synthetic, load_manifest, load_synthetic_spec
from hcmi.evaluation import matching_dump, reports_to_csv
from hcmi.model import load_checkpoint
from hcmi.training import (
    ablate,
    evaluate,
    format_gradcheck,
    mean_by_condition,
    run_gradcheck,
    train,
)


def cmd_gen(args) -> int:
    spec = load_synthetic_spec(args.spec)
    manifests = generate_synthetic(spec, args.out_dir)
    for split, m in manifests.items():
        print(f"{split},{len(m)},{Path(args.out_dir) / (split + '.json')}")
    return 0


def cmd_train(args) -> int:
    config = load_config(args.config)
    if args.out_dir:
        config = config.replace(out_dir=args.out_dir)
    result = train(config)
    last = result.log[-1]
    print(f"checkpoint,{result.checkpoint}")
    print(f"final_loss,{last['loss']!r}")
    return 0


def cmd_eval(args) -> int:
    model, config = load_checkpoint(args.checkpoint)
    if config is None:
        raise ValueError(f"checkpoint {args.checkpoint} has no config.txt")
    reports = evaluate(model, load_manifest(args.manifest), config, dsl=args.dsl, gamma=args.gamma)
    text = reports_to_csv(reports)
    if args.out:
        Path(args.out).write_text(text, encoding="utf-8")
    sys.stdout.write(text)
    return 0


def cmd_ablate(args) -> int:
    config = load_config(args.config)
    out = Path(args.out or Path(config.out_dir) / "ablation.csv")
    out.parent.mkdir(parents=True, exist_ok=True)
    rows = ablate(config, seeds=tuple(range(args.seeds)), out_path=out)
    for name, r1 in mean_by_condition(rows).items():
        print(f"mean_r1,{name},{r1:.2f}")
    print(f"ablation_csv,{out}")
    return 0


def cmd_gradcheck(args) -> int:
    rows = run_gradcheck(seeds=tuple(range(args.seeds)))
    sys.stdout.write(format_gradcheck(rows))
    return 0 if all(r.passed for r in rows) else 1


def cmd_dump_matching(args) -> int:
    model, _ = load_checkpoint(args.checkpoint)
    store = FeatureStore(load_manifest(args.manifest))
    if args.id not in store.videos:
        raise KeyError(f"no sample with id {args.id!r}")
    video = model.encode_videos([store.videos[args.id]]).item(0)
    text = model.encode_texts([store.texts[args.id]]).item(0)
    dump = matching_dump(video, text)
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"{args.id}_words.csv").write_text(dump.words_csv(), encoding="utf-8")
    (out / f"{args.id}_phrases.csv").write_text(dump.phrases_csv(), encoding="utf-8")
    (out / f"{args.id}_clips.csv").write_text(dump.clips_csv(), encoding="utf-8")
    sys.stdout.write(dump.words_csv())
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="hcmi", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen", help="generate a synthetic dataset")
    p.add_argument("spec")
    p.add_argument("out_dir")
    p.set_defaults(func=cmd_gen)

    p = sub.add_parser("train", help="train from a config file")
    p.add_argument("config")
    p.add_argument("--out-dir")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="retrieval metrics for a checkpoint")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("--dsl", action="store_true", help="apply dual softmax to the score matrix")
    p.add_argument("--gamma", type=float, default=None)
    p.add_argument("--out")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("ablate", help="train and evaluate every ablation condition")
    p.add_argument("config")
    p.add_argument("--seeds", type=int, default=3)
    p.add_argument("--out")
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("gradcheck", help="finite-difference check of every loss")
    p.add_argument("--seeds", type=int, default=3)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("dump-matching", help="frame-word and slot matching dump for one pair")
    p.add_argument("checkpoint")
    p.add_argument("manifest")
    p.add_argument("id")
    p.add_argument("--out-dir", default="matching")
    p.set_defaults(func=cmd_dump_matching)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except Exception as exc:  # noqa: BLE001
        key = getattr(exc, "key", None)
        detail = f" key={key}" if key else ""
        print(f"error: {type(exc).__name__}:{detail} {exc}".replace("\n", " "), file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
