"""Command-line entry point: ``manet {synth,train,eval,manifold,strip,ablate}``."""

import argparse
import csv
import dataclasses
import json
import logging
import sys
from pathlib import Path

import numpy as np

from manet.dataset import DatasetError, load_dataset, read_meta, read_raw, save_dataset, split_dataset, synth_dataset
from manet.experiments import alpha_sweep, stage_sweep
from manet.manifold import CANNY_DEFAULTS, ManifoldError, generate_manifold
from manet.metrics import MetricError, write_metrics_csv
from manet.network import NetworkError, load_checkpoint, strip_manifold_branch
from manet.pseudo import TeacherError
from manet.training import TrainConfig, TrainingError, evaluate, pretrain, save_stage, self_train
from manet.losses import LossError

logger = logging.getLogger("manet")

ERRORS = (DatasetError, ManifoldError, MetricError, NetworkError, TeacherError, TrainingError, LossError, OSError)


class UsageError(Exception):
    pass


def _parse_bool(text):
    t = text.strip().lower()
    if t in ("1", "true", "yes", "on"):
        return True
    if t in ("0", "false", "no", "off"):
        return False
    raise UsageError(f"not a boolean: {text!r}")


def _coerce(name, text):
    kind = TrainConfig.field_types()[name]
    kind = kind if isinstance(kind, str) else kind.__name__
    try:
        if kind == "bool":
            return _parse_bool(text)
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
    except ValueError as exc:
        raise UsageError(f"config key {name}: {exc}") from None
    return text


def read_config(path):
    """Plain ``key = value`` lines; ``#`` starts a comment. Keys are TrainConfig fields."""
    values = {}
    known = TrainConfig.field_types()
    for lineno, raw in enumerate(Path(path).read_text().splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise UsageError(f"{path}:{lineno}: expected key=value")
        key, value = (s.strip() for s in line.split("=", 1))
        key = key.replace("-", "_")
        if key not in known:
            raise UsageError(f"{path}:{lineno}: unknown key {key!r}")
        values[key] = _coerce(key, value)
    return values


def build_train_config(args):
    values = read_config(args.config) if args.config else {}
    for key in ("alpha", "operator", "seed", "sigma", "t_low", "t_high"):
        v = getattr(args, key, None)
        if v is not None:
            values[key] = v
    cfg = TrainConfig(**values)
    try:
        cfg.validate()
    except (TrainingError, LossError) as exc:
        raise UsageError(str(exc)) from None
    return cfg


def cmd_synth(args):
    samples = synth_dataset(args.seed, args.n, args.dims, args.side, args.classes, args.noise)
    save_dataset(samples, args.out)
    print(f"wrote {len(samples)} samples to {args.out}")


def _load_for_training(args, cfg):
    samples = load_dataset(args.data)
    if cfg.operator == "canny" and samples[0].dims != 2:
        raise UsageError("--operator canny requires a 2D dataset")
    return samples


def cmd_train(args):
    cfg = build_train_config(args)
    if args.stage == "selftrain" and not args.init:
        raise UsageError("--stage selftrain requires --init CHECKPOINT")
    samples = _load_for_training(args, cfg)
    split = split_dataset(samples, args.labeled_ratio, args.split_seed)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    (out / "split.json").write_text(json.dumps({
        "labeled": [s.id for s in split.labeled],
        "unlabeled": [s.id for s in split.unlabeled],
    }, indent=1))
    init = args.init
    if args.stage in ("pretrain", "both"):
        state = pretrain(split.labeled, cfg)
        init = save_stage(state, out / "pretrain", cfg, "pretrain")
        print(f"pretrain checkpoint: {init}")
    if args.stage in ("selftrain", "both"):
        state = self_train(split, init, cfg)
        ckpt = save_stage(state, out / "selftrain", cfg, "selftrain")
        print(f"selftrain checkpoint: {ckpt}")


def cmd_eval(args):
    if not Path(args.ckpt).is_dir():
        raise NetworkError(f"checkpoint not found: {args.ckpt}")
    net = load_checkpoint(args.ckpt)
    samples = load_dataset(args.data)
    rows = evaluate(net, samples)
    write_metrics_csv(rows, args.out)
    print(f"wrote metrics for {len(samples)} samples to {args.out}")


def _read_label_file(path):
    path = Path(path)
    directory = path if path.is_dir() else path.parent
    meta = read_meta(directory)
    raw = directory / "label.raw" if path.is_dir() else path
    dims = tuple(int(d) for d in meta["dims"])
    return read_raw(raw, meta.get("label_dtype", "u8"), dims)


def cmd_manifold(args):
    label = _read_label_file(args.label_file)
    params = {}
    if args.operator == "canny":
        params = {"sigma": args.sigma, "t_low": args.t_low, "t_high": args.t_high}
    m = generate_manifold(label, args.operator, **params)
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    meta = {"dims": list(m.shape), "label_dtype": "u8", "operator": args.operator, **params}
    (out / "meta.json").write_text(json.dumps(meta))
    (out / "manifold.raw").write_bytes(np.ascontiguousarray(m, dtype="u1").tobytes())
    print(f"manifold map ({int(m.sum())} boundary locations) written to {out}")


def cmd_strip(args):
    dst = strip_manifold_branch(args.ckpt, args.out)
    print(f"stripped checkpoint written to {dst}")


def cmd_ablate(args):
    cfg = build_train_config(args)
    train_samples = _load_for_training(args, cfg)
    test_samples = load_dataset(args.test_data)
    kw = {"labeled_ratio": args.labeled_ratio, "split_seed": args.split_seed}
    if args.kind == "alpha":
        results = {str(k): v for k, v in alpha_sweep(train_samples, test_samples, cfg, **kw).items()}
        key = "alpha"
    else:
        results = {
            f"{int(p)}{int(s)}": v for (p, s), v in stage_sweep(train_samples, test_samples, cfg, **kw).items()
        }
        key = "pretrain_selftrain"
    with open(args.out, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow([key, "dice", "jaccard", "hd95", "asd"])
        for k, rep in results.items():
            w.writerow([k, *(f"{v:.6f}" for v in dataclasses.astuple(rep))])
    print(f"wrote {len(results)} rows to {args.out}")


def _add_train_flags(p):
    p.add_argument("--config", help="key=value file with TrainConfig fields")
    p.add_argument("--data", required=True, help="dataset directory of sample_* folders")
    p.add_argument("--labeled-ratio", type=float, default=0.1)
    p.add_argument("--split-seed", type=int, default=0)
    p.add_argument("--alpha", type=float, help="manifold loss weight (default 0.05)")
    p.add_argument("--operator", choices=("sobel", "canny"))
    p.add_argument("--seed", type=int)
    p.add_argument("--sigma", type=float)
    p.add_argument("--t-low", dest="t_low", type=float)
    p.add_argument("--t-high", dest="t_high", type=float)


def build_parser():
    parser = argparse.ArgumentParser(prog="manet", description=__doc__)
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("synth", help="generate a synthetic blob dataset")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--n", type=int, required=True)
    p.add_argument("--dims", type=int, choices=(2, 3), default=2)
    p.add_argument("--side", type=int, default=64)
    p.add_argument("--classes", type=int, default=3)
    p.add_argument("--noise", type=float, default=0.1)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)

    p = sub.add_parser("train", help="pre-train and/or self-train")
    _add_train_flags(p)
    p.add_argument("--stage", choices=("pretrain", "selftrain", "both"), default="both")
    p.add_argument("--init", help="checkpoint to start self-training from")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="per-sample metrics CSV")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("manifold", help="manifold map of a stored label file")
    p.add_argument("--label-file", required=True, help="sample directory or its label.raw")
    p.add_argument("--operator", choices=("sobel", "canny"), default="sobel")
    p.add_argument("--sigma", type=float, default=CANNY_DEFAULTS["sigma"])
    p.add_argument("--t-low", dest="t_low", type=float, default=CANNY_DEFAULTS["t_low"])
    p.add_argument("--t-high", dest="t_high", type=float, default=CANNY_DEFAULTS["t_high"])
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_manifold)

    p = sub.add_parser("strip", help="drop the manifold branch from a checkpoint")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_strip)

    p = sub.add_parser("ablate", help="alpha or training-stage sweep")
    _add_train_flags(p)
    p.add_argument("--test-data", required=True)
    p.add_argument("--kind", choices=("alpha", "stage"), required=True)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)
    return parser


def main(argv=None):
    parser = build_parser()
    args = parser.parse_args(argv)
    if args.command == "synth" and args.classes < 2:
        parser.error("--classes must be at least 2")
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(levelname)s %(message)s")
    try:
        args.func(args)
    except UsageError as exc:
        print(f"manet {args.command}: usage error: {exc}", file=sys.stderr)
        return 2
    except ERRORS as exc:
        print(f"manet {args.command}: error: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
