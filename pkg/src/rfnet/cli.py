"""Command-line entry point: ``rfnet <command> [options]``.

Exit codes: 0 success, 2 invalid configuration or arguments, 3 missing
input file, 4 non-finite values during training, 5 gradient check above
tolerance, 1 anything else.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path

from . import checkpoint as ckpt
from .config import DEFAULTS, ConfigError, RunConfig
from .corpus import Dataset, Vocabulary, generate_dataset, load_dataset, save_dataset
from .experiments import run_ablation
from .gradcheck import tiny_gradient_check
from .inference import caption_split
from .metrics import evaluate_captions
from .model import ABLATIONS, RFNet
from .numerics import NonFiniteError, Rng
from .trainer import finetune_rl, train_xe

EXIT_OK, EXIT_ERROR, EXIT_CONFIG, EXIT_MISSING, EXIT_NONFINITE, EXIT_GRADCHECK = 0, 1, 2, 3, 4, 5
GRADCHECK_TOL = 1e-5

log = logging.getLogger("rfnet")


def _views(text: str):
    try:
        return tuple(int(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise argparse.ArgumentTypeError(f"--views expects comma-separated integers, got {text!r}") from exc


def build_parser() -> argparse.ArgumentParser:
    d = DEFAULTS
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", metavar="PATH", default=None,
                        help="key = value config file (default: built-in defaults)")
    common.add_argument("--seed", type=int, default=None,
                        help=f"seed for data generation and training (default: {d['train']['seed']})")
    common.add_argument("--out", metavar="DIR", default="out", help="output directory (default: out)")
    common.add_argument("--views", type=_views, default=None,
                        help="comma-separated view subset, e.g. 0,2 (default: all views)")
    common.add_argument("--beam", type=int, default=None,
                        help=f"beam width, 1 means greedy (default: {d['run']['beam']})")
    common.add_argument("--max-len", type=int, default=None,
                        help=f"maximum generated tokens (default: {d['run']['max_len']})")
    common.add_argument("--lambda", dest="lam", type=float, default=None,
                        help=f"discriminative loss weight (default: {d['train']['lam']})")
    common.add_argument("--ablation", choices=ABLATIONS, default=None,
                        help=f"fusion variant (default: {d['model']['ablation']})")
    common.add_argument("--data", metavar="DIR", default=None,
                        help=f"dataset directory (default: {d['data']['path']})")
    common.add_argument("--checkpoint", metavar="PATH", default=None,
                        help=f"input checkpoint (default: {d['run']['checkpoint']})")
    common.add_argument("--split", default=None, help=f"split for caption/evaluate/ablate (default: {d['run']['split']})")
    common.add_argument("-v", "--verbose", action="store_true", help="log progress (default: off)")

    parser = argparse.ArgumentParser(prog="rfnet", description="Recurrent fusion captioning experiments")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {
        "gen-data": "generate a synthetic multi-view dataset",
        "train": "cross-entropy training with early stopping",
        "finetune-rl": "self-critical fine-tuning of a checkpoint",
        "caption": "write captions for a dataset split",
        "evaluate": "score captions of a split with BLEU and CIDEr-D",
        "ablate": "train every fusion variant over several seeds",
        "gradcheck": "finite-difference check of the full loss on a tiny model",
    }
    for name, text in helps.items():
        sub.add_parser(name, parents=[common], help=text, description=text)
    return parser


def resolve_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg.set("data", "seed", args.seed)
        cfg.set("train", "seed", args.seed)
    if args.views is not None:
        cfg.set("model", "view_subset", args.views)
    if args.beam is not None:
        cfg.set("run", "beam", args.beam)
    if args.max_len is not None:
        cfg.set("run", "max_len", args.max_len)
        cfg.set("train", "max_len", args.max_len)
    if args.lam is not None:
        cfg.set("train", "lam", args.lam)
    if args.ablation is not None:
        cfg.set("model", "ablation", args.ablation)
    if args.data is not None:
        cfg.set("data", "path", args.data)
    if args.checkpoint is not None:
        cfg.set("run", "checkpoint", args.checkpoint)
    if args.split is not None:
        cfg.set("run", "split", args.split)
    return cfg


def _require(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise FileNotFoundError(f"missing input: {p}")
    return p


def _dataset(cfg: RunConfig) -> Dataset:
    d = _require(cfg["data"]["path"])
    _require(d / "manifest.json")
    return load_dataset(d)


def _model_for(cfg: RunConfig, ds: Dataset) -> RFNet:
    fcfg = cfg.fusion_config(ds.view_dims, len(ds.vocab), ds.n_frequent)
    return RFNet.create(fcfg, Rng(cfg["train"]["seed"]))


def _split(cfg: RunConfig, ds: Dataset) -> str:
    split = cfg["run"]["split"]
    if split not in ds.splits:
        raise ConfigError(f"unknown split {split!r}; dataset has {sorted(ds.splits)}")
    return split


def cmd_gen_data(cfg: RunConfig, out: Path) -> None:
    d = cfg["data"]
    ds = generate_dataset(d["n_scenes"], M=d["views"], k=d["k"], dims=d["dims"], seed=d["seed"],
                          min_count=d["min_count"], n_frequent=d["n_frequent"], noise=d["noise"])
    save_dataset(ds, out)
    print(f"wrote {sum(len(v) for v in ds.splits.values())} scenes, vocabulary {len(ds.vocab)} to {out}")


def cmd_train(cfg: RunConfig, out: Path) -> None:
    ds = _dataset(cfg)
    model = _model_for(cfg, ds)
    ck, tlog = train_xe(model, ds, cfg.train_config())
    ckpt.save(ck, out / "model.rfn")
    (out / "train_log.tsv").write_text(tlog.to_tsv())
    print(f"best val CIDEr-D {ck.extra['best_score']:.4f} at epoch {ck.epoch}; wrote {out / 'model.rfn'}")


def cmd_finetune(cfg: RunConfig, out: Path) -> None:
    ds = _dataset(cfg)
    start = ckpt.load(_require(cfg["run"]["checkpoint"]))
    ck, tlog = finetune_rl(start, ds, cfg.train_config(), max_updates=cfg["run"]["rl_updates"])
    ckpt.save(ck, out / "model_rl.rfn")
    (out / "rl_log.tsv").write_text(tlog.to_tsv())
    print(f"best val CIDEr-D {ck.extra['best_score']:.4f}; wrote {out / 'model_rl.rfn'}")


def _captions(cfg: RunConfig, ds: Dataset):
    ck = ckpt.load(_require(cfg["run"]["checkpoint"]))
    vocab = Vocabulary.from_json(ck.vocab_json)
    if vocab.itos != ds.vocab.itos:
        raise ConfigError("checkpoint vocabulary does not match the dataset")
    split = _split(cfg, ds)
    ids = caption_split(ck.model, ds.splits[split], cfg["run"]["beam"], cfg["run"]["max_len"])
    return split, [ds.vocab.decode(c) for c in ids]


def cmd_caption(cfg: RunConfig, out: Path) -> None:
    ds = _dataset(cfg)
    split, caps = _captions(cfg, ds)
    path = out / f"captions_{split}.txt"
    path.write_text("".join(f"{i}\t{' '.join(c)}\n" for i, c in enumerate(caps)))
    print(f"wrote {len(caps)} captions to {path}")


def cmd_evaluate(cfg: RunConfig, out: Path) -> None:
    ds = _dataset(cfg)
    split, caps = _captions(cfg, ds)
    report = evaluate_captions(caps, ds.references(split), ds.references("train"))
    (out / f"report_{split}.json").write_text(report.to_json() + "\n")
    print("\n".join(report.summary_lines()))


def cmd_ablate(cfg: RunConfig, out: Path) -> None:
    ds = _dataset(cfg)
    base = cfg.fusion_config(ds.view_dims, len(ds.vocab), ds.n_frequent)
    res = run_ablation(ds, base, cfg.train_config(), cfg["run"]["seeds"], cfg["run"]["ablations"],
                       cfg["run"]["beam"], _split(cfg, ds))
    table = res.table()
    (out / "ablation.tsv").write_text(table)
    print(table, end="")


def cmd_gradcheck(cfg: RunConfig, out: Path) -> int:
    res = tiny_gradient_check(seed=cfg["train"]["seed"], lam=cfg["train"]["lam"], ablation=cfg["model"]["ablation"])
    (out / "gradcheck.json").write_text(json.dumps(res.__dict__, default=float, indent=2) + "\n")
    print(f"max relative error {res.max_rel_error:.3e} over {res.n_parameters} parameters ({res.seconds:.1f} s)")
    return EXIT_OK if res.max_rel_error < GRADCHECK_TOL else EXIT_GRADCHECK


COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "finetune-rl": cmd_finetune,
    "caption": cmd_caption,
    "evaluate": cmd_evaluate,
    "ablate": cmd_ablate,
    "gradcheck": cmd_gradcheck,
}


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        cfg = resolve_config(args)
        out = Path(args.out)
        out.mkdir(parents=True, exist_ok=True)
        cfg.save(out / f"{args.command}.ini")
        code = COMMANDS[args.command](cfg, out)
        return EXIT_OK if code is None else code
    except ConfigError as exc:
        print(f"rfnet: invalid configuration: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except FileNotFoundError as exc:
        print(f"rfnet: {exc}", file=sys.stderr)
        return EXIT_MISSING
    except NonFiniteError as exc:
        print(f"rfnet: aborted on non-finite values: {exc}", file=sys.stderr)
        return EXIT_NONFINITE
    except Exception as exc:  # noqa: BLE001
        print(f"rfnet: {type(exc).__name__}: {exc}", file=sys.stderr)
        return EXIT_ERROR


if __name__ == "__main__":
    sys.exit(main())
