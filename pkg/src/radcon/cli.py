"""``radcon`` command line: data preparation, training regimes, evaluation and plotting."""
from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from .clustering import DEFAULT_GRID, prediction_from_record, prediction_to_record, read_params, write_params
from .config import REGIMES, TrainConfig, default_run_root, parse_overrides, read_config
from .metrics import evaluate
from .netmodel import ModelParams
from .pipeline import infer, search_per_class
from .plotting import export_plot
from .pseudolabel import generate_pseudo_labels, write_pseudo_labels
from .synthdata import DataError, generate_corpus, mask_labels, read_frames, split_dataset, write_frames
from .trainer import run_regime

SPLITS = ("train", "val", "test")


class FMT(argparse.ArgumentDefaultsHelpFormatter):
    """Shows defaults, except for flags whose default is resolved later."""

    def _get_help_string(self, action):
        if action.default is None:
            return action.help
        return super()._get_help_string(action)


class CliError(Exception):
    """Reported as a one-line diagnostic with exit status 1."""


def _frames(path):
    try:
        return read_frames(path)
    except FileNotFoundError:
        raise CliError(f"no such file: {path}") from None


def cmd_synth(args):
    n = write_frames(args.out, generate_corpus(args.frames, args.seed))
    print(f"wrote {n} frames to {args.out}")


def cmd_split(args):
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    parts = split_dataset(_frames(args.input), seed=args.seed)
    for name, part in zip(SPLITS, parts):
        write_frames(out / f"{name}.jsonl", part)
    print(" ".join(f"{name}={len(part)}" for name, part in zip(SPLITS, parts)))


def cmd_mask(args):
    frames = mask_labels(_frames(args.input), args.fraction, args.seed)
    write_frames(args.out, frames)
    print(f"{sum(f.labeled for f in frames)} of {len(frames)} frames keep labels")


def _overrides(pairs):
    out = {}
    for pair in pairs or ():
        key, sep, value = pair.partition("=")
        if not sep:
            raise CliError(f"--set expects key=value, got {pair!r}")
        out[key.strip().replace("-", "_")] = value.strip()
    return out


def _train_config(args) -> TrainConfig:
    flags = {"regime": args.regime, "seed": args.seed, "labeled_fraction": args.labeled_fraction,
             "tau": args.tau, "alpha": args.alpha, "threshold": args.threshold}
    values = parse_overrides(_overrides(args.set), "--set")
    values.update({k: v for k, v in flags.items() if v is not None})
    if args.config:
        return read_config(args.config, **values)
    return TrainConfig().replace(**values)


def cmd_train(args):
    config = _train_config(args)
    data = Path(args.data)
    train, val, test = (_frames(data / f"{name}.jsonl") for name in SPLITS)
    if args.labeled_fraction is not None:
        if not all(f.labeled for f in train):
            raise CliError("--labeled-fraction needs a fully labeled train split")
        train = mask_labels(train, config.labeled_fraction, config.seed)
    run_dir = Path(args.run_dir or default_run_root() / f"{config.regime}_p{config.labeled_fraction:g}_s{config.seed}")
    bootstrap = ModelParams.load(args.bootstrap) if args.bootstrap else None
    art = run_regime(config, train, val, test, run_dir, bootstrap=bootstrap)
    (run_dir / "data.json").write_text(json.dumps({n: str((data / f"{n}.jsonl").resolve()) for n in SPLITS}) + "\n")
    print(f"{run_dir}: {art.metrics.summary()}")


def cmd_pseudo_label(args):
    labels = generate_pseudo_labels(ModelParams.load(args.model), _frames(args.frames), args.threshold,
                                    seed=args.seed)
    write_pseudo_labels(args.out, labels)
    print(f"wrote {len(labels)} pseudo-labels to {args.out}")


def cmd_grid_search(args):
    model = ModelParams.load(args.model)
    chosen, value = search_per_class(DEFAULT_GRID, model, _frames(args.frames), model.config.n_class)
    write_params(args.out, chosen)
    print(f"validation mAP0.5 {100 * value:.2f}%; parameters written to {args.out}")


def cmd_eval(args):
    run = Path(args.run)
    if args.frames:
        frames_path = args.frames
    else:
        try:
            frames_path = json.loads((run / "data.json").read_text())[args.split]
        except FileNotFoundError:
            raise CliError(f"{run} has no data.json; pass --frames") from None
    frames = _frames(frames_path)
    model = ModelParams.load(run / "model.ckpt")
    preds = infer(model, frames, read_params(run / "clustering_params.txt"))
    report = evaluate([f.ground_truth() for f in frames], [p.instance_list() for p in preds])
    print(f"{args.split}: {report.summary()}")


def cmd_infer(args):
    frames = _frames(args.frames)
    preds = infer(ModelParams.load(args.model), frames, read_params(args.params))
    with open(args.out, "w") as fh:
        for frame, pred in zip(frames, preds):
            fh.write(json.dumps(prediction_to_record(frame.frame_id, pred)) + "\n")
    print(f"wrote predictions for {len(frames)} frames to {args.out}")


def cmd_export_plot(args):
    frames = {f.frame_id: f for f in _frames(args.frames)}
    with open(args.predictions) as fh:
        preds = dict(prediction_from_record(json.loads(line)) for line in fh if line.strip())
    if args.frame_id not in frames or args.frame_id not in preds:
        raise CliError(f"frame {args.frame_id} missing from frames or predictions")
    export_plot(frames[args.frame_id].points, preds[args.frame_id], args.out, title=f"frame {args.frame_id}")
    print(f"wrote {args.out}")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="radcon", description=__doc__, formatter_class=FMT)
    parser.add_argument("-v", "--verbose", action="store_true", help="log training progress")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic corpus", formatter_class=FMT)
    p.add_argument("--frames", type=int, default=2000, help="number of frames")
    p.add_argument("--seed", type=int, default=0, help="corpus seed")
    p.add_argument("--out", required=True, help="output frame file (JSONL)")
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("split", help="8:1:1 train/val/test split", formatter_class=FMT)
    p.add_argument("--in", dest="input", required=True, help="input frame file")
    p.add_argument("--out-dir", required=True, help="directory for train/val/test.jsonl")
    p.add_argument("--seed", type=int, default=0, help="shuffle seed")
    p.set_defaults(func=cmd_split)

    p = sub.add_parser("mask", help="drop labels from all but a fraction of frames", formatter_class=FMT)
    p.add_argument("--in", dest="input", required=True, help="input frame file")
    p.add_argument("--fraction", type=float, required=True, help="share of frames that keep labels")
    p.add_argument("--seed", type=int, default=0, help="masking seed")
    p.add_argument("--out", required=True, help="output frame file")
    p.set_defaults(func=cmd_mask)

    p = sub.add_parser("train", help="run one training regime end to end", formatter_class=FMT)
    p.add_argument("regime", choices=REGIMES)
    p.add_argument("--data", required=True, help="directory with train/val/test.jsonl")
    p.add_argument("--config", help="config file ([section] key = value); flags override it")
    p.add_argument("--seed", type=int, default=None, help="run seed (default: config value, 0)")
    p.add_argument("--labeled-fraction", type=float, default=None,
                   help="mask the train split to this labeled share (default: use labels as stored)")
    p.add_argument("--tau", type=float, default=None, help="temperature (default 0.1)")
    p.add_argument("--alpha", type=float, default=None, help="cross-entropy weight in joint training (default 3.0)")
    p.add_argument("--threshold", type=float, default=None, help="pseudo-label confidence threshold (default 0.9)")
    p.add_argument("--set", action="append", metavar="KEY=VALUE", help="any other config field, repeatable")
    p.add_argument("--bootstrap", help="nonjoint_full checkpoint reused for pseudo-labels in semi regimes")
    p.add_argument("--run-dir", help="output directory (default: $RADCON_RUN_ROOT/<regime>_p<p>_s<seed>)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("pseudo-label", help="label confident points of unlabeled frames", formatter_class=FMT)
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--frames", required=True, help="frame file; only unlabeled frames are used")
    p.add_argument("--threshold", type=float, default=0.9, help="keep points with max probability above this")
    p.add_argument("--seed", type=int, default=0, help="sampling seed")
    p.add_argument("--out", required=True, help="pseudo-label file (JSONL)")
    p.set_defaults(func=cmd_pseudo_label)

    p = sub.add_parser("grid-search", help="choose per-class clustering parameters", formatter_class=FMT)
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--frames", required=True, help="labeled validation frames")
    p.add_argument("--out", required=True, help="clustering parameter file")
    p.set_defaults(func=cmd_grid_search)

    p = sub.add_parser("eval", help="score a finished run", formatter_class=FMT)
    p.add_argument("--run", required=True, help="run directory")
    p.add_argument("--split", choices=SPLITS, default="test", help="split recorded by the run")
    p.add_argument("--frames", help="score this frame file instead of the recorded split")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("infer", help="predict instances for frames", formatter_class=FMT)
    p.add_argument("--model", required=True, help="model checkpoint")
    p.add_argument("--params", required=True, help="clustering parameter file")
    p.add_argument("--frames", required=True, help="frame file")
    p.add_argument("--out", required=True, help="prediction file (JSONL)")
    p.set_defaults(func=cmd_infer)

    p = sub.add_parser("export-plot", help="draw one frame's prediction as SVG", formatter_class=FMT)
    p.add_argument("--frames", required=True, help="frame file")
    p.add_argument("--predictions", required=True, help="prediction file from 'infer'")
    p.add_argument("--frame-id", type=int, required=True, help="frame to draw")
    p.add_argument("--out", required=True, help="output SVG path")
    p.set_defaults(func=cmd_export_plot)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(asctime)s %(message)s")
    try:
        args.func(args)
    except (CliError, OSError, DataError, ValueError, KeyError) as exc:
        print(f"radcon {args.command}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
