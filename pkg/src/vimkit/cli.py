"""``vimkit`` command line: synth, split, train, eval, predict, flops.

Exit codes: 0 success, 2 usage error, 1 runtime failure.  Any subcommand
accepts ``--config FILE`` with ``key=value`` lines using the long flag names;
explicit flags win over the file.
"""

from __future__ import annotations

import argparse
import contextlib
import logging
import os
import sys
from pathlib import Path

import numpy as np

log = logging.getLogger("vimkit")


class UsageError(Exception):
    pass


def _threads():
    n = os.environ.get("VIMKIT_THREADS")
    if not n:
        return contextlib.nullcontext()
    from threadpoolctl import threadpool_limits

    return threadpool_limits(limits=max(1, int(n)))


def read_config_file(path) -> dict[str, str]:
    out = {}
    with open(path, encoding="utf-8") as f:
        for lineno, line in enumerate(f, 1):
            line = line.strip()
            if not line or line.startswith("#"):
                continue
            if "=" not in line:
                raise UsageError(f"{path}:{lineno}: expected key=value")
            k, v = line.split("=", 1)
            out[k.strip().replace("-", "_")] = v.strip()
    return out


def write_resolved_config(args: argparse.Namespace, out_dir: Path) -> None:
    from .data import atomic_write_text

    items = sorted((k, v) for k, v in vars(args).items() if k not in ("func", "config"))
    text = "".join(f"{k}={'' if v is None else v}\n" for k, v in items)
    atomic_write_text(out_dir / "config.txt", text)


def _model_flags(p: argparse.ArgumentParser) -> None:
    g = p.add_argument_group("model")
    g.add_argument("--image-size", type=int, default=32)
    g.add_argument("--patch-size", type=int, default=8)
    g.add_argument("--embed-dim", type=int, default=64)
    g.add_argument("--depth", type=int, default=4)
    g.add_argument("--state-dim", type=int, default=16)
    g.add_argument("--expand-ratio", type=int, default=2)
    g.add_argument("--conv-kernel", type=int, default=4)
    g.add_argument("--num-classes", type=int, default=6)
    g.add_argument("--class-token", choices=("middle", "head"), default="middle")


def _vim_config(args, num_classes=None):
    from .vim_model import VimConfig

    return VimConfig(
        image_size=args.image_size,
        patch_size=args.patch_size,
        embed_dim=args.embed_dim,
        depth=args.depth,
        state_dim=args.state_dim,
        expand_ratio=args.expand_ratio,
        conv_kernel=args.conv_kernel,
        num_classes=num_classes or args.num_classes,
        class_token_position=args.class_token,
    )


# --------------------------------------------------------------------------
# Commands
# --------------------------------------------------------------------------


def cmd_synth(args) -> int:
    from .data import generate_synthetic, save_dataset

    out = Path(args.out)
    ds = generate_synthetic(args.num_classes, args.per_class, args.image_size, args.seed, args.variant)
    out.mkdir(parents=True, exist_ok=True)
    n = save_dataset(ds, out)
    print(f"wrote {n} images in {ds.num_classes} classes to {out}")
    return 0


def cmd_split(args) -> int:
    from .data import SplitSpec, load_dataset, stratified_split, write_split_manifest

    if not Path(args.data).is_dir():
        raise UsageError(f"--data {args.data}: no such directory")
    ratios = tuple(float(r) for r in args.ratios.split(","))
    ds = load_dataset(args.data)
    splits = stratified_split(ds, SplitSpec(ratios, args.seed))
    write_split_manifest(args.out, splits, ds.class_names, root=args.data)
    counts = [s.class_counts() for s in splits]
    width = max(len(n) for n in ds.class_names + ["Total"])
    print(f"{'':{width}}\tTrain\tVal\tTest\tTotal")
    for c, name in enumerate(ds.class_names):
        row = [counts[0][c], counts[1][c], counts[2][c]]
        print(f"{name:{width}}\t" + "\t".join(str(v) for v in row + [sum(row)]))
    tot = [len(s) for s in splits]
    print(f"{'Total':{width}}\t" + "\t".join(str(v) for v in tot + [sum(tot)]))
    return 0


def _train_config(args):
    from .train import TrainConfig
    from .vim_model import parse_policy

    try:
        policy = parse_policy(args.strategy)
    except ValueError as exc:
        raise UsageError(str(exc)) from None
    if policy.kind != "scratch" and not args.init:
        raise UsageError(f"--strategy {args.strategy} requires --init CHECKPOINT")
    decay = None
    if args.decay_epochs:
        decay = [int(v) for v in args.decay_epochs.split(",") if v.strip()]
    return TrainConfig(
        strategy=policy,
        base_lr=args.lr,
        lr_decay_factor=args.decay_factor,
        lr_decay_epochs=decay,
        max_epochs=args.epochs,
        patience=args.patience,
        batch_size=args.batch_size,
        seed=args.seed,
        init_checkpoint=args.init,
        clip_grad_norm=args.clip_grad_norm,
    )


def cmd_train(args) -> int:
    from .data import atomic_write_text, read_split_manifest
    from .train import evaluate, fit
    from .vim_model import VimModel, read_checkpoint, save_checkpoint

    tcfg = _train_config(args)
    splits = read_split_manifest(args.manifest, root=args.data)
    names = splits["train"].class_names
    if args.init:
        stored, _, _ = read_checkpoint(args.init)
        cfg = stored.__class__.from_dict({**stored.to_dict(), "num_classes": len(names)})
    else:
        cfg = _vim_config(args, num_classes=len(names))
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    write_resolved_config(args, out)
    model = VimModel(cfg, seed=args.seed)
    model, tlog = fit(model, splits["train"], splits["val"], tcfg, out_dir=out)
    model.class_names = list(names)
    save_checkpoint(model, out / "model.vimc")
    atomic_write_text(out / "trainlog.jsonl", tlog.to_jsonl())
    best = tlog.epochs[tlog.best_epoch]
    lines = [f"best_epoch={tlog.best_epoch}", f"stop_reason={tlog.stop_reason}", f"val_acc={best.val_acc!r}"]
    if len(splits["test"]):
        _, test_acc, _ = evaluate(model, splits["test"])
        lines.append(f"test_acc={test_acc!r}")
    atomic_write_text(out / "summary.txt", "\n".join(lines) + "\n")
    print("\n".join(lines))
    return 0


def cmd_eval(args) -> int:
    from .data import read_split_manifest
    from .evaluation import build_report, count_flops, count_params, emit_report, score_predictions_file
    from .train import predict_proba
    from .vim_model import load_checkpoint

    if bool(args.ckpt) == bool(args.predictions):
        raise UsageError("exactly one of --ckpt or --predictions is required")
    splits = read_split_manifest(args.manifest, root=args.data)
    part = splits[args.partition]
    if args.ckpt:
        model = load_checkpoint(args.ckpt)
        images, labels = part.arrays(model.cfg.image_size)
        probs = predict_proba(model, images)
        report = build_report(
            labels, probs, part.class_names,
            model=args.name or Path(args.ckpt).stem, strategy=args.strategy,
            params=count_params(model), flops=count_flops(model),
        )
    else:
        report = score_predictions_file(
            args.predictions, part, model=args.name or Path(args.predictions).stem,
            strategy=args.strategy, params=args.params, flops=args.flops,
        )
    emit_report([report], args.out, append=True)
    print(
        f"{report.model}: accuracy={report.accuracy:.4f} precision={report.precision:.4f} "
        f"recall={report.recall:.4f} f1={report.f1:.4f} specificity={report.specificity:.4f} "
        f"auc={report.auc:.4f}"
    )
    return 0


def cmd_predict(args) -> int:
    from . import tensor as T
    from .data import preprocess
    from .vim_model import forward, load_checkpoint

    model = load_checkpoint(args.ckpt)
    img = preprocess(args.image, model.cfg.image_size)
    with T.no_grad():
        probs = T.softmax(forward(img, model)).data.astype(np.float64)
    names = model.class_names or [str(i) for i in range(model.cfg.num_classes)]
    best = int(np.argmax(probs))
    print(f"{names[best]}\t{probs[best]:.6f}")
    print("\t".join(f"{n}={p:.6f}" for n, p in zip(names, probs)))
    return 0


def cmd_flops(args) -> int:
    from .evaluation import count_flops, count_params, flops_breakdown
    from .vim_model import VimModel, read_checkpoint

    if args.ckpt:
        cfg, tensors, _ = read_checkpoint(args.ckpt)
        params = int(sum(t.size for t in tensors.values()))
    else:
        cfg = _vim_config(args)
        params = count_params(VimModel(cfg))
    print(f"params\t{params}")
    print(f"flops\t{count_flops(cfg)}")
    for k, v in flops_breakdown(cfg).items():
        print(f"  {k}\t{v}")
    return 0


# --------------------------------------------------------------------------
# Parser
# --------------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="vimkit", description="Vision Mamba classification toolkit")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    def add(name, func, help):
        p = sub.add_parser(name, help=help)
        p.add_argument("--config", help="key=value file of defaults")
        p.set_defaults(func=func)
        return p

    p = add("synth", cmd_synth, "write the synthetic pattern dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--per-class", type=int, default=50)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--image-size", type=int, default=32)
    p.add_argument("--num-classes", type=int, default=6)
    p.add_argument("--variant", default="A")

    p = add("split", cmd_split, "stratified train/val/test split manifest")
    p.add_argument("--data", required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--ratios", default="0.8,0.1,0.1")

    p = add("train", cmd_train, "train a model")
    p.add_argument("--manifest", required=True)
    p.add_argument("--data", help="dataset root (defaults to the one recorded in the manifest)")
    p.add_argument("--strategy", default="scratch", help="scratch | head-only | last-n=N | full")
    p.add_argument("--init", help="checkpoint to start from")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", required=True)
    p.add_argument("--batch-size", type=int, default=32)
    p.add_argument("--lr", type=float, default=1e-3)
    p.add_argument("--patience", type=int, default=5)
    p.add_argument("--decay-epochs", default="")
    p.add_argument("--decay-factor", type=float, default=0.1)
    p.add_argument("--clip-grad-norm", type=float, default=None)
    _model_flags(p)

    p = add("eval", cmd_eval, "evaluate a checkpoint or a predictions file")
    p.add_argument("--manifest", required=True)
    p.add_argument("--data")
    p.add_argument("--ckpt")
    p.add_argument("--predictions")
    p.add_argument("--out", required=True)
    p.add_argument("--name")
    p.add_argument("--strategy", default="")
    p.add_argument("--partition", choices=("train", "val", "test"), default="test")
    p.add_argument("--params", type=int)
    p.add_argument("--flops", type=int)

    p = add("predict", cmd_predict, "classify one image")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--image", required=True)

    p = add("flops", cmd_flops, "parameter and FLOP counts")
    p.add_argument("--ckpt")
    _model_flags(p)
    return parser


def _config_path(argv: list[str]) -> str | None:
    for i, a in enumerate(argv):
        if a == "--config" and i + 1 < len(argv):
            return argv[i + 1]
        if a.startswith("--config="):
            return a.split("=", 1)[1]
    return None


def _parse(parser: argparse.ArgumentParser, argv: list[str]) -> argparse.Namespace:
    """Parse ``argv``, using a ``--config`` file (if any) as defaults for the subcommand."""
    path = _config_path(argv)
    command = next((a for a in argv if not a.startswith("-")), None)
    subparsers = parser._subparsers._group_actions[0].choices
    if path and command in subparsers:
        sub = subparsers[command]
        conf = read_config_file(path)
        actions = {a.dest: a for a in sub._actions}
        unknown = sorted(set(conf) - set(actions))
        if unknown:
            raise UsageError(f"{path}: unknown keys {unknown}")
        typed = {}
        for key, raw in conf.items():
            a = actions[key]
            try:
                typed[key] = a.type(raw) if a.type else raw
            except ValueError:
                raise UsageError(f"{path}: bad value for {key}: {raw!r}") from None
            a.required = False
        sub.set_defaults(**typed)
    return parser.parse_args(argv)


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        args = _parse(parser, argv)
    except UsageError as exc:
        print(f"vimkit: usage error: {exc}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"vimkit: error: {exc}", file=sys.stderr)
        return 1
    except SystemExit as exc:
        return int(exc.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        with _threads():
            return args.func(args)
    except UsageError as exc:
        print(f"vimkit: usage error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError, RuntimeError) as exc:
        print(f"vimkit: error: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
