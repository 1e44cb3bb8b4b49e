"""Command-line front end: ``collabdm run | eval | inspect``."""
from __future__ import annotations

import argparse
import csv
import json
import logging
import sys
from pathlib import Path

from . import kernel
from .data import PartitionSpec, generate_toy, load_raw
from .distill import DMConfig, SyntheticSet
from .encoder import EncoderSpec
from .errors import CollabDMError, ConfigError
from .evaluation import ARCHITECTURES, ClassifierSpec, cross_arch_eval
from .orchestrator import MODES, RunConfig, run
from .protocol import (MSG_PAYLOAD, MSG_SEEDS, decode_payload, decode_seed_batch,
                       mask_bytes, message_type, payload_bytes)

log = logging.getLogger("collabdm")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_dataset_flags(p, toy_default=False):
    src = p.add_mutually_exclusive_group(required=not toy_default)
    src.add_argument("--dataset", type=Path,
                     help="directory with train/test .cdt images and .cdl labels")
    src.add_argument("--toy", action="store_true", help="use the synthetic toy generator")
    p.add_argument("--toy-classes", type=int, default=4)
    p.add_argument("--toy-per-class", type=int, default=50)
    p.add_argument("--toy-test-per-class", type=int, default=50)
    p.add_argument("--toy-size", type=int, default=16)
    p.add_argument("--toy-spread", type=float, default=0.15)
    p.add_argument("--toy-seed", type=int, default=0)
    p.add_argument("--toy-template-res", type=int, default=None,
                   help="draw templates at this resolution and resize them (smooth templates)")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="collabdm", description="Single-round collaborative data distillation")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    r = sub.add_parser("run", help="distill and evaluate")
    r.add_argument("--mode", choices=MODES, default="collabdm")
    _add_dataset_flags(r)
    r.add_argument("--clients", type=int, default=5)
    r.add_argument("--beta", type=float, default=0.5)
    r.add_argument("--iid", action="store_true")
    r.add_argument("--eps", type=float, default=1.0)
    r.add_argument("--ipc", type=int, default=10)
    r.add_argument("--server-ipc", type=int, default=None)
    r.add_argument("--keep-union", action="store_true")
    r.add_argument("--iters", type=int, default=200, help="server iterations T")
    r.add_argument("--batch", type=int, default=512)
    r.add_argument("--lr-local", type=float, default=1.0)
    r.add_argument("--lr-server", type=float, default=10.0)
    r.add_argument("--momentum", type=float, default=0.5)
    r.add_argument("--local-iters", type=int, default=1000)
    r.add_argument("--pae", type=int, default=1)
    r.add_argument("--blocks", type=int, default=2)
    r.add_argument("--channels", type=int, default=16)
    r.add_argument("--eval-every", type=int, default=50)
    r.add_argument("--eval-repeats", type=int, default=20)
    r.add_argument("--eval-arch", choices=ARCHITECTURES, default="convnet")
    r.add_argument("--eval-epochs", type=int, default=300)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--workers", type=int, default=1)
    r.add_argument("--out", type=Path, required=True)

    e = sub.add_parser("eval", help="evaluate a saved synthetic set")
    e.add_argument("synthetic", type=Path)
    _add_dataset_flags(e)
    e.add_argument("--arch", choices=ARCHITECTURES, action="append")
    e.add_argument("--train-arch", default="convnet")
    e.add_argument("--repeats", type=int, default=20)
    e.add_argument("--epochs", type=int, default=300)
    e.add_argument("--seed", type=int, default=0)
    e.add_argument("--out", type=Path, help="write the accuracy matrix as CSV here")

    i = sub.add_parser("inspect", help="describe a saved .cdm message")
    i.add_argument("message", type=Path)
    return parser


def _load_data(args):
    if args.toy:
        shape = (1, args.toy_size, args.toy_size)
        train, test, _ = generate_toy(args.toy_classes, args.toy_per_class, shape,
                                      args.toy_spread, args.toy_seed, args.toy_test_per_class,
                                      args.toy_template_res)
        return train, test
    root = args.dataset
    if not root.is_dir():
        raise ConfigError(f"dataset directory {root} does not exist")
    train = load_raw(root / "train_images.cdt", root / "train_labels.cdl", split="train")
    test_images = root / "test_images.cdt"
    test = (load_raw(test_images, root / "test_labels.cdl", train.num_classes, split="test")
            if test_images.exists() else None)
    return train, test


def _config_from(args, input_shape) -> RunConfig:
    return RunConfig(
        mode=args.mode,
        dm=DMConfig(local_lr=args.lr_local, server_lr=args.lr_server,
                    local_iters=args.local_iters, batch=args.batch, momentum=args.momentum,
                    ipc=args.ipc, pae_l=args.pae),
        encoder=EncoderSpec(num_blocks=args.blocks, channels=args.channels,
                            input_shape=input_shape),
        partition=PartitionSpec(K=1 if args.mode == "centralized" else args.clients,
                                beta=args.beta, seed=args.seed, iid=args.iid),
        T=args.iters, epsilon=args.eps, master_seed=args.seed,
        server_ipc=args.server_ipc, keep_union=args.keep_union,
        eval_every=args.eval_every, eval_repeats=args.eval_repeats,
        classifier=ClassifierSpec(arch=args.eval_arch, epochs=args.eval_epochs),
        workers=args.workers)


def _write_csv(path, header, rows):
    with open(path, "w", newline="") as f:
        w = csv.writer(f, lineterminator="\n")
        w.writerow(header)
        w.writerows(rows)


def cmd_run(args) -> int:
    # read the dataset shape first so that a bad --pae is a config error before any work
    train, test = _load_data(args)
    config = _config_from(args, train.image_shape)
    out = args.out
    out.mkdir(parents=True, exist_ok=True)
    report = run(config, train, test, message_dir=out / "messages"
                 if config.mode != "centralized" else None)
    (out / "report.json").write_text(report.to_json())
    _write_csv(out / "losses.csv", ["iteration", "loss"],
               [(t + 1, f"{v:.9g}") for t, v in enumerate(report.losses)])
    _write_csv(out / "accuracy.csv", ["iteration", "bytes_per_client", "mean_accuracy",
                                      "std_accuracy"],
               [(t, f"{b:.1f}", f"{m:.6f}", f"{s:.6f}") for t, b, m, s in report.accuracy])
    report.synthetic.save(out / "synthetic.cdt")
    acc = report.final_accuracy()
    print(f"{config.mode}: {len(report.losses)} server iterations, "
          f"final accuracy {'n/a' if acc is None else f'{acc:.4f}'}; wrote {out}")
    return 0


def cmd_eval(args) -> int:
    synthetic = SyntheticSet.load(args.synthetic)
    _, test = _load_data(args)
    if test is None:
        raise ConfigError("the dataset has no test split")
    archs = args.arch or ["convnet"]
    matrix = cross_arch_eval(synthetic, args.train_arch, archs, args.repeats, test,
                             ClassifierSpec(epochs=args.epochs, seed=args.seed))
    text = matrix.to_csv()
    if args.out:
        args.out.write_text(text)
    sys.stdout.write(text)
    return 0


def cmd_inspect(args) -> int:
    data = args.message.read_bytes()
    kind = message_type(data)
    if kind == MSG_SEEDS:
        batch = decode_seed_batch(data)
        info = {"type": "seed_batch", "client": batch.client_id,
                "rounds": [t for t, _ in batch.entries],
                "seeds": [str(a) for _, a in batch.entries], "bytes": len(data)}
    elif kind == MSG_PAYLOAD:
        p = decode_payload(data)
        syn_bytes = len(p.synthetic.to_bytes())
        per_class = [sum(1 for (_, y) in p.means if y == c) for c in range(p.num_classes)]
        info = {
            "type": "payload", "client": p.client_id, "rounds": len(p.rounds),
            "classes": p.num_classes, "embedding_dim": p.embedding_dim,
            "synthetic_shape": list(p.synthetic.images.shape),
            "mean_vectors": p.presence_count(),
            "presence_per_class": per_class,
            "presence_fraction": (p.presence_count() / (len(p.rounds) * p.num_classes)
                                  if p.rounds else 0.0),
            "bytes": {"total": len(data), "synthetic": syn_bytes,
                      "masks": len(p.rounds) * (4 + mask_bytes(p.num_classes)),
                      "means": p.presence_count() * (4 * p.embedding_dim + 4),
                      "formula": payload_bytes(len(p.rounds), p.num_classes, p.embedding_dim,
                                               syn_bytes, p.presence_count())},
        }
    else:
        raise ConfigError(f"unknown message type {kind}")
    print(json.dumps(info, indent=2))
    return 0


COMMANDS = {"run": cmd_run, "eval": cmd_eval, "inspect": cmd_inspect}


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        parser.print_usage(sys.stderr)
        print(f"collabdm: error: {exc}", file=sys.stderr)
        return 2
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    log.debug("kernel backend: %s", kernel.BACKEND)
    try:
        return COMMANDS[args.command](args)
    except ConfigError as exc:
        print(f"collabdm: configuration error: {exc}", file=sys.stderr)
        return 2
    except (CollabDMError, OSError) as exc:
        print(f"collabdm: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
