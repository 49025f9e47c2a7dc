"""Command-line entry point.

    icr phantom --out data/ --n 80 --size 32 --seed 7
    icr train standard --data data/ --out runs/f0 --fold 0 --epochs 20
    icr train refine --data data/ --out runs/f0 --standard runs/f0/standard.ckpt
    icr train deepedit --data data/ --out runs/de --click-free 0.25
    icr eval --data data/ --standard runs/f0/standard.ckpt --refine runs/f0/refine.ckpt --out reports/
    icr ablate --data data/ --standard runs/f0/standard.ckpt --refine 0.0=runs/p0/refine.ckpt 0.2=runs/p2/refine.ckpt --out reports/
    icr serve --data data/ --models runs/f0 --port 8000

Exit codes: 0 success, 2 usage error, 3 data error, 4 model error.
"""

from __future__ import annotations

import argparse
import sys
from pathlib import Path

from .errors import DataError, ModelError


def _positive_int(text: str) -> int:
    value = int(text)
    if value < 1:
        raise argparse.ArgumentTypeError("must be >= 1")
    return value


def _nonneg_int(text: str) -> int:
    value = int(text)
    if value < 0:
        raise argparse.ArgumentTypeError("must be >= 0")
    return value


def _add_common_train_flags(p: argparse.ArgumentParser) -> None:
    # --config FILE is consumed before parsing: its JSON values are spliced
    # in as flags, so explicit command-line flags override the file
    p.add_argument("--data", required=True, help="dataset root with manifest.json")
    p.add_argument("--out", required=True, help="output directory")
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--epochs", type=int, default=300)
    p.add_argument("--patience", type=int, default=50)
    p.add_argument("--lr", type=float, default=1e-4)
    p.add_argument("--weight-decay", type=float, default=1e-5)
    p.add_argument("--mask-dropout", type=float, default=0.2)
    p.add_argument("--val-clicks", type=int, default=10)
    p.add_argument("--channels", type=int, nargs="+", default=None,
                   help="UNet channel widths (default desk scale 8 16 32)")
    p.add_argument("--strides", type=int, nargs="+", default=None)
    p.add_argument("--no-augment", action="store_true")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="icr", description=__doc__,
                                     formatter_class=argparse.RawDescriptionHelpFormatter)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("phantom", help="generate a synthetic PET-CT dataset")
    p.add_argument("--out", required=True)
    p.add_argument("--n", type=_nonneg_int, required=True, help="number of cases")
    p.add_argument("--size", type=_positive_int, default=32, help="cubic grid edge (voxels)")
    p.add_argument("--spacing", type=float, default=1.0, help="mm per voxel")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--radius", type=float, nargs=2, default=(3.0, 8.0), metavar=("LO", "HI"))
    p.add_argument("--distractors", type=int, nargs=2, default=(0, 3), metavar=("LO", "HI"))
    p.add_argument("--pet-noise", type=float, default=0.1)
    p.add_argument("--ct-texture", type=float, default=20.0)

    p = sub.add_parser("train", help="train a model")
    tsub = p.add_subparsers(dest="model", required=True)
    for name in ("standard", "refine", "deepedit"):
        tp = tsub.add_parser(name)
        _add_common_train_flags(tp)
        if name == "refine":
            tp.add_argument("--standard", required=True, help="trained standard checkpoint")
        if name == "deepedit":
            tp.add_argument("--click-free", type=float, default=0.0,
                            help="probability of a click-free training iteration")

    p = sub.add_parser("eval", help="interactive evaluation table")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--clicks", type=int, default=10)
    p.add_argument("--workers", type=int, default=1)
    p.add_argument("--model-id", default=None)
    p.add_argument("--standard", help="standard checkpoint (two-stage)")
    p.add_argument("--refine", help="refinement checkpoint (two-stage)")
    p.add_argument("--single", help="single 5-channel checkpoint (click-free baseline)")
    p.add_argument("--ensemble-root", help="directory with fold*/standard.ckpt and fold*/refine.ckpt")

    p = sub.add_parser("ablate", help="mask-dropout ablation table")
    p.add_argument("--data", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--fold", type=int, default=0)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--repeats", type=int, default=3)
    p.add_argument("--clicks", type=int, default=10)
    p.add_argument("--standard", required=True)
    p.add_argument("--refine", nargs="+", required=True, metavar="P=CKPT",
                   help="dropout probability to checkpoint mapping, e.g. 0.2=runs/p2/refine.ckpt")

    p = sub.add_parser("serve", help="run the interactive HTTP service")
    p.add_argument("--data", required=True)
    p.add_argument("--models", required=True)
    p.add_argument("--port", type=int, default=8000)
    p.add_argument("--ensemble", action="store_true")

    return parser


def _train_config(args) -> "TrainConfig":
    from .nn.unet import DESK_CHANNELS, DESK_STRIDES
    from .train import TrainConfig

    return TrainConfig(
        max_epochs=args.epochs,
        early_stop_patience=min(args.patience, args.epochs),
        lr0=args.lr,
        weight_decay=args.weight_decay,
        mask_dropout_p=args.mask_dropout,
        click_free_prob=getattr(args, "click_free", 0.0),
        val_clicks=args.val_clicks,
        fold=args.fold,
        seed=args.seed,
        channels=tuple(args.channels) if args.channels else DESK_CHANNELS,
        strides=tuple(args.strides) if args.strides else DESK_STRIDES,
        augment=not args.no_augment,
    )


def cmd_phantom(args) -> int:
    from .phantom import PhantomConfig, generate_dataset
    from .volume import Grid3

    config = PhantomConfig(
        grid=Grid3((args.size,) * 3, (args.spacing,) * 3),
        tumor_radius_range=tuple(args.radius),
        n_distractors=tuple(args.distractors),
        pet_noise_std=args.pet_noise,
        ct_texture_std=args.ct_texture,
        seed=args.seed,
    )
    entries = generate_dataset(config, args.n, args.out)
    folds = sorted({e["fold"] for e in entries})
    print(f"wrote {len(entries)} cases to {args.out} (folds: {folds or 'none'})")
    return 0


def cmd_train(args) -> int:
    from .nn.unet import load_checkpoint, save_checkpoint
    from .train import load_split, train_deepedit_baseline, train_refinement, train_standard

    config = _train_config(args)
    train_cases, val_cases = load_split(args.data, config)
    out = Path(args.out)
    if args.model == "standard":
        net, log = train_standard(config, train_cases, val_cases)
        name = "standard"
    elif args.model == "refine":
        standard, _ = load_checkpoint(args.standard)
        net, log = train_refinement(config, train_cases, val_cases, standard)
        name = "refine"
    else:
        net, log = train_deepedit_baseline(config, train_cases, val_cases)
        name = "deepedit"
    ckpt = out / f"{name}.ckpt"
    save_checkpoint(net, ckpt, {"epoch": log.best_epoch, "val_dsc": log.best_val_dsc})
    log.save_jsonl(out / f"{name}.log.jsonl")
    print(f"{name}: best epoch {log.best_epoch}, val DSC {log.best_val_dsc:.4f} -> {ckpt}")
    return 0


def _load_eval_cases(args):
    from .train import TrainConfig, load_split

    config = TrainConfig(fold=args.fold, seed=args.seed, max_epochs=1, early_stop_patience=1)
    _, val_cases = load_split(args.data, config)
    return val_cases


def cmd_eval(args) -> int:
    from .eval import evaluate_model, write_reports
    from .nn.unet import load_checkpoint
    from .session import EnsembleDriver, SingleStageDriver, TwoStageDriver

    if args.ensemble_root:
        members = []
        for fold_dir in sorted(Path(args.ensemble_root).glob("fold*")):
            std, _ = load_checkpoint(fold_dir / "standard.ckpt")
            ref, _ = load_checkpoint(fold_dir / "refine.ckpt")
            members.append(TwoStageDriver(std, ref))
        if not members:
            raise ModelError(f"no fold*/ checkpoints under {args.ensemble_root}")
        driver = EnsembleDriver(members)
        model_id = args.model_id or "ensemble"
    elif args.single:
        net, _ = load_checkpoint(args.single)
        driver = SingleStageDriver(net)
        model_id = args.model_id or "single"
    elif args.standard and args.refine:
        std, _ = load_checkpoint(args.standard)
        ref, _ = load_checkpoint(args.refine)
        driver = TwoStageDriver(std, ref)
        model_id = args.model_id or "two-stage"
    else:
        raise ModelError("provide --standard with --refine, or --single, or --ensemble-root")

    cases = _load_eval_cases(args)
    table = evaluate_model(
        model_id, driver, cases,
        budget=args.clicks, repeats=args.repeats, base_seed=args.seed, workers=args.workers,
    )
    csv_path, json_path = write_reports([table], args.out)
    print(f"wrote {csv_path} and {json_path} ({len(cases)} cases, {args.repeats} repeats)")
    return 0


def cmd_ablate(args) -> int:
    from .eval import ablation_rows, collect_changed_voxels, evaluate_model, write_ablation_reports
    from .nn.unet import load_checkpoint
    from .session import TwoStageDriver

    std, _ = load_checkpoint(args.standard)
    mapping = {}
    for spec_item in args.refine:
        if "=" not in spec_item:
            raise ModelError(f"--refine expects P=CKPT, got {spec_item!r}")
        p_str, path = spec_item.split("=", 1)
        mapping[float(p_str)] = path
    cases = _load_eval_cases(args)
    tables, pooled = {}, {}
    p_values = sorted(mapping)
    for p in p_values:
        ref, _ = load_checkpoint(mapping[p])
        driver = TwoStageDriver(std, ref)
        tables[p] = evaluate_model(
            f"dropout-{p}", driver, cases,
            budget=args.clicks, repeats=args.repeats, base_seed=args.seed,
        )
        pooled[p] = collect_changed_voxels(driver, cases, args.clicks, args.repeats, args.seed)
    rows = ablation_rows(p_values, tables, pooled)
    csv_path, json_path = write_ablation_reports(rows, args.out)
    print(f"wrote {csv_path} and {json_path} ({len(p_values)} dropout levels)")
    return 0


def cmd_serve(args) -> int:
    from .server import serve

    serve(args.data, args.models, port=args.port, ensemble=args.ensemble)
    return 0


_CONFIG_KEYS = {
    "data", "out", "fold", "seed", "epochs", "patience", "lr", "weight_decay",
    "mask_dropout", "val_clicks", "channels", "strides", "no_augment",
    "click_free", "standard",
}


def _expand_config_file(argv: list[str]) -> list[str]:
    """Splice --config JSON values in as flags ahead of the user's flags,
    so anything given explicitly on the command line still wins."""
    import json

    if "--config" not in argv:
        return argv
    idx = argv.index("--config")
    if idx + 1 >= len(argv):
        raise DataError("--config needs a file path")
    path = argv[idx + 1]
    rest = argv[:idx] + argv[idx + 2 :]
    if len(rest) < 2 or rest[0] != "train":
        raise DataError("--config applies to the train subcommands")
    try:
        with open(path, "r", encoding="utf-8") as fh:
            overrides = json.load(fh)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read config file {path}: {exc}") from exc
    if not isinstance(overrides, dict):
        raise DataError(f"config file {path} must hold a JSON object")
    unknown = set(overrides) - _CONFIG_KEYS
    if unknown:
        raise DataError(f"unknown config keys {sorted(unknown)}")
    tokens: list[str] = []
    for key, value in overrides.items():
        flag = "--" + key.replace("_", "-")
        if key == "no_augment":
            if value:
                tokens.append("--no-augment")
        elif isinstance(value, list):
            tokens.append(flag)
            tokens.extend(str(v) for v in value)
        else:
            tokens.extend([flag, str(value)])
    return rest[:2] + tokens + rest[2:]


def main(argv=None) -> int:
    parser = build_parser()
    argv = list(sys.argv[1:] if argv is None else argv)
    try:
        argv = _expand_config_file(argv)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    args = parser.parse_args(argv)
    handlers = {
        "phantom": cmd_phantom,
        "train": cmd_train,
        "eval": cmd_eval,
        "ablate": cmd_ablate,
        "serve": cmd_serve,
    }
    try:
        return handlers[args.command](args)
    except DataError as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return 3
    except ModelError as exc:
        print(f"model error: {exc}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
