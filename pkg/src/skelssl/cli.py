"""Command-line front end.

    skelssl gen-data  --config run.cfg [--output data.skel]
    skelssl pretrain  --config run.cfg
    skelssl train     --config run.cfg --strategy moving --init runs/pretrain.ckpt
    skelssl probe     --config run.cfg [--init ckpt | --encoder rand|ms2l]
    skelssl sweep     --config run.cfg [--jobs 4]
    skelssl semi      --config run.cfg
    skelssl transfer  --config run.cfg

Exit status: 0 success, 2 configuration error, 3 data error, 4 numeric failure.
"""

from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from . import data as D
from . import evaluation as E
from . import model as M
from . import training as T
from .config import ConfigError, RunConfig, dumps_config, load_config
from .data import DataError, SplitSpec
from .io_utils import atomic_write_text
from .numerics import NumericError

EXIT_OK, EXIT_CONFIG, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4

log = logging.getLogger("skelssl")


# ----------------------------------------------------------------------------
# data plumbing


def _prepare(ds: D.Dataset, cfg: RunConfig) -> D.Dataset:
    seqs = ds.sequences
    if cfg.data.center:
        seqs = tuple(D.center(s) for s in seqs)
    if cfg.data.length:
        seqs = tuple(D.downsample(s, cfg.data.length) for s in seqs)
    return D.Dataset(seqs, ds.num_classes, ds.joint_count, ds.split)


def _load(path: str, split: str) -> D.Dataset:
    try:
        return D.load_dataset(path, split)
    except FileNotFoundError as exc:
        raise DataError(f"dataset not found: {path}") from exc
    except OSError as exc:
        raise DataError(f"cannot read dataset {path}: {exc.strerror}") from exc


def load_splits(cfg: RunConfig, need_test: bool = False) -> tuple[D.Dataset, D.Dataset | None]:
    """Training split and optional test split, from files or the generator."""
    if cfg.data.train:
        train = _load(cfg.data.train, "train")
    else:
        train = D.generate_synthetic(cfg.synthetic_config())
    test = None
    if cfg.data.test:
        test = _load(cfg.data.test, "test")
    elif cfg.data.test_per_class:
        train, test = D.split_train_test(train, cfg.data.test_per_class, cfg.data.split_seed)
    if need_test and test is None:
        raise ConfigError("this command needs a test split (data.test or data.test_per_class)")
    train = _prepare(train, cfg)
    return train, (_prepare(test, cfg) if test is not None else None)


def load_source(cfg: RunConfig) -> D.Dataset:
    if cfg.data.source:
        return _prepare(_load(cfg.data.source, "train"), cfg)
    return _prepare(D.generate_synthetic(cfg.synthetic_config(cfg.synthetic.source_seed)), cfg)


def _out(cfg: RunConfig, name: str) -> Path:
    return Path(cfg.output.dir) / name


def _model_cfg(cfg: RunConfig, ds: D.Dataset) -> M.ModelConfig:
    return cfg.model_config(ds.joint_count, ds.num_classes)


def _load_init(path: str | None) -> M.ModelParams | None:
    if not path:
        return None
    try:
        return M.load_checkpoint(path)
    except FileNotFoundError as exc:
        raise DataError(f"checkpoint not found: {path}") from exc
    except M.CheckpointError as exc:
        raise DataError(f"{path}: {exc}") from exc


def _emit(params: M.ModelParams, report: T.TrainReport, cfg: RunConfig, stem: str) -> None:
    M.save_checkpoint(params, _out(cfg, f"{stem}.ckpt"))
    report.save_csv(_out(cfg, f"{stem}_report.csv"))


def _final_acc(report: T.TrainReport) -> str:
    row = report.rows[-1]
    return f"train_acc={row.train_acc!r} test_acc={row.test_acc!r}"


# ----------------------------------------------------------------------------
# commands


def cmd_gen_data(cfg: RunConfig, args) -> int:
    ds = D.generate_synthetic(cfg.synthetic_config())
    path = Path(args.output) if args.output else _out(cfg, "synthetic.skel")
    try:
        D.save_dataset(ds, path)
    except OSError as exc:
        raise DataError(f"cannot write {path}: {exc.strerror}") from exc
    s = cfg.synthetic
    print(f"wrote {path}: sequences={len(ds)} classes={ds.num_classes} J={ds.joint_count} T={s.T}")
    return EXIT_OK


def cmd_pretrain(cfg: RunConfig, args) -> int:
    train, _ = load_splits(cfg)
    params, report = T.pretrain_self_supervised(
        train.unlabeled(), _model_cfg(cfg, train), cfg.pretext_config(), cfg.train_config(pretraining=True), cfg.train.seed
    )
    _emit(params, report, cfg, "pretrain")
    print(f"pretrain: epochs={len(report.rows)} L_self={report.rows[-1].L_self!r}")
    return EXIT_OK


def cmd_train(cfg: RunConfig, args) -> int:
    strategy = args.strategy or cfg.train.strategy
    if strategy not in T.STRATEGIES:
        raise ConfigError(f"invalid strategy {strategy!r}; expected one of {', '.join(T.STRATEGIES)}")
    if strategy in ("pretrain", "moving", "finetune") and not args.init:
        raise ConfigError(f"{strategy} requires --init")
    train, test = load_splits(cfg)
    init = _load_init(args.init)
    params, report = T.train_supervised(
        train, strategy, _model_cfg(cfg, train), cfg.pretext_config(), cfg.train_config(), cfg.train.seed,
        init=init, test=test,
    )
    _emit(params, report, cfg, "train")
    print(f"train,{strategy},{_final_acc(report)}")
    return EXIT_OK


def cmd_probe(cfg: RunConfig, args) -> int:
    train, test = load_splits(cfg, need_test=True)
    mcfg = _model_cfg(cfg, train)
    if args.init:
        encoder, source = _load_init(args.init), "file"
    elif args.encoder == "ms2l":
        encoder, report = T.pretrain_self_supervised(
            train.unlabeled(), mcfg, cfg.pretext_config(), cfg.train_config(pretraining=True), cfg.train.seed
        )
        report.save_csv(_out(cfg, "probe_pretrain_report.csv"))
        source = "ms2l"
    else:
        encoder, source = M.init_params(mcfg, cfg.train.seed), "rand"
    res = E.linear_probe(
        encoder, train, test, epochs=cfg.train.probe_epochs, batch_size=cfg.train.batch,
        seed=cfg.train.seed, encoder_source=source, schedule=T.Schedule.from_config(cfg.train_config()),
    )
    atomic_write_text(_out(cfg, "probe.csv"), "encoder_source,accuracy\n" + f"{source},{res.accuracy!r}\n")
    print(res.line())
    return EXIT_OK


def cmd_sweep(cfg: RunConfig, args) -> int:
    train, test = load_splits(cfg, need_test=True)
    grid = E.ablation_sweep(
        train, test, _model_cfg(cfg, train), cfg.pretext_config(), cfg.train_config(pretraining=True),
        cfg.train_config(), cfg.subsets(), cfg.train.seed, jobs=args.jobs,
    )
    path = _out(cfg, "sweep.csv")
    grid.save_csv(path)
    print(f"sweep: {len(grid.cells)} cells -> {path}")
    return EXIT_OK


def cmd_semi(cfg: RunConfig, args) -> int:
    train, test = load_splits(cfg)
    labeled, unlabeled = D.split_labeled(train, SplitSpec(cfg.data.labeled_fraction, cfg.data.split_seed))
    params, report = T.train_semi_supervised(
        labeled, unlabeled, _model_cfg(cfg, train), cfg.pretext_config(),
        cfg.train_config(pretraining=True), cfg.train_config(), cfg.train.seed, test=test,
    )
    _emit(params, report, cfg, "semi")
    print(f"semi,labeled={len(labeled)},unlabeled={len(unlabeled)},{_final_acc(report)}")
    return EXIT_OK


def cmd_transfer(cfg: RunConfig, args) -> int:
    target, test = load_splits(cfg)
    source = load_source(cfg)
    params, report = T.transfer(
        source, target, _model_cfg(cfg, target), cfg.pretext_config(),
        cfg.train_config(pretraining=True), cfg.train_config(), cfg.train.seed, test=test,
    )
    _emit(params, report, cfg, "transfer")
    print(f"transfer,source={len(source)},target={len(target)},{_final_acc(report)}")
    return EXIT_OK


COMMANDS = {
    "gen-data": (cmd_gen_data, "write a synthetic SKEL1 dataset", False),
    "pretrain": (cmd_pretrain, "self-supervised pretraining of the encoder", True),
    "train": (cmd_train, "supervised training with a strategy", True),
    "probe": (cmd_probe, "linear probe on a frozen encoder", True),
    "sweep": (cmd_sweep, "pretext task-combination sweep", True),
    "semi": (cmd_semi, "semi-supervised training on a labeled fraction", True),
    "transfer": (cmd_transfer, "pretrain on a source set, fine-tune on the target", True),
}


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="skelssl", description=__doc__.split("\n\n")[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = parser.add_subparsers(dest="command", required=True, metavar="command")
    for name, (_, helptext, _) in COMMANDS.items():
        p = sub.add_parser(name, help=helptext, description=helptext)
        p.add_argument("--config", "-c", help="config file of 'section.key = value' lines")
        p.add_argument("--set", "-s", action="append", default=[], metavar="KEY=VALUE", help="override a config key")
        p.add_argument("--seed", type=int, help="shorthand for --set train.seed=N")
        p.add_argument("--out", help="shorthand for --set output.dir=DIR")
        if name == "gen-data":
            p.add_argument("--output", "-o", help="dataset path (default <output.dir>/synthetic.skel)")
        if name in ("train", "probe"):
            p.add_argument("--init", help="pretrained checkpoint")
        if name == "train":
            p.add_argument("--strategy", help=f"one of {', '.join(T.STRATEGIES)}")
        if name == "probe":
            p.add_argument("--encoder", choices=("rand", "ms2l"), default="rand", help="encoder when --init is absent")
        if name == "sweep":
            p.add_argument("--jobs", type=int, default=1, help="cells run in parallel")
        if name != "gen-data":
            p.add_argument("--dump-config", action="store_true", help="also write the resolved config to the output dir")
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    func, _, needs_seed = COMMANDS[args.command]
    overrides = list(args.set)
    if args.seed is not None:
        overrides.append(f"train.seed={args.seed}")
    if args.out:
        overrides.append(f"output.dir={args.out}")
    try:
        cfg = load_config(args.config, overrides)
        cfg.validate(need_seed=needs_seed)
        if getattr(args, "dump_config", False):
            atomic_write_text(_out(cfg, "config.resolved"), dumps_config(cfg))
        return func(cfg, args)
    except ConfigError as exc:
        for e in exc.errors:
            print(f"config error: {e}", file=sys.stderr)
        return EXIT_CONFIG
    except (DataError, M.CheckpointError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except ValueError as exc:
        # remaining contract violations come from configuration values
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
