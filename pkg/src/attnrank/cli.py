"""Command-line surface: reproducible experiments over the library modules.

Subcommands: generate, train, rank, eval, gradcheck, sweep, oasis. Every
artifact embeds a run manifest (subcommand, resolved arguments, sha256 of the
input files, seed, tool version) and contains no timestamps, so identical
invocations produce byte-identical files.

Exit codes: 0 success, 2 usage errors, 3 data errors (missing/malformed
files, insufficient pools), 4 numeric errors (divergence, failed gradient
check).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import os
import sys
from dataclasses import asdict

import numpy as np

from . import __version__
from . import model as mdl
from .embeddings import read_emb1, write_emb1
from .episodes import (PROTOCOLS, Dataset, load_pool, read_dataset, synth_class_pool,
                       write_dataset)
from .errors import DataError, NumericError
from .metrics import MetricReport, evaluate_rankings
from .numerics import derive_rng
from .oasis import CHANNEL_MODES, OasisModel, oasis_train
from .training import (TrainConfig, evaluate_oasis, evaluate_ranker, param_norms,
                       rank_dataset, sweep_channels, train)
from .verification import run_gradient_check

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 2, 3, 4
GRADCHECK_TOLERANCE = 1e-4


def _sha256(path: str) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def _digest_inputs(paths) -> dict:
    out = {}
    for p in paths:
        if p is None:
            continue
        if os.path.isdir(p):
            for name in sorted(os.listdir(p)):
                full = os.path.join(p, name)
                if os.path.isfile(full):
                    out[full] = _sha256(full)
        elif os.path.isfile(p):
            out[p] = _sha256(p)
    return out


def run_manifest(subcommand: str, args: argparse.Namespace, inputs=()) -> dict:
    config = {k: v for k, v in sorted(vars(args).items()) if k != "func"}
    return {
        "tool": "attnrank",
        "version": __version__,
        "subcommand": subcommand,
        "config": config,
        "inputs": _digest_inputs(inputs),
        "seed": getattr(args, "seed", None),
    }


def _parse_floats(text: str):
    return [float(x) for x in text.split(",") if x != ""]


def _parse_ints(text: str):
    return [int(x) for x in text.split(",") if x != ""]


def _channels(args):
    return None if args.channels is None else tuple(_parse_ints(args.channels))


# ----------------------------------------------------------------------
# subcommands
# ----------------------------------------------------------------------

def cmd_generate(args) -> int:
    if args.protocol not in PROTOCOLS:
        raise DataError(f"unknown protocol {args.protocol!r}; choose from {sorted(PROTOCOLS)}")
    if args.pool is not None:
        if not os.path.exists(args.pool):
            raise DataError(f"pool file {args.pool!r} does not exist")
        pool = load_pool(args.pool)
    else:
        noise = _parse_floats(args.synth_noise)
        if len(noise) != args.synth_channels:
            raise DataError(
                f"--synth-noise lists {len(noise)} values for {args.synth_channels} channels"
            )
        supers = args.synth_supers if args.protocol == "newsgroups-style" else None
        pool = synth_class_pool(
            derive_rng(args.seed, "pool", args.split),
            args.synth_items, args.synth_classes, noise,
            sharpness=args.synth_kappa, superclasses=supers,
        )
    build = PROTOCOLS[args.protocol]
    ds = build(
        derive_rng(args.seed, "episodes", args.split),
        pool, t=args.t, episodes=args.episodes, split=args.split,
        protocol=args.protocol, seed=args.seed,
    )
    write_dataset(ds, args.out, run_manifest=run_manifest("generate", args, [args.pool]))
    print(f"wrote {len(ds.episodes)} episodes to {args.out}")
    return EXIT_OK


def _train_config(args) -> TrainConfig:
    return TrainConfig(
        loss=args.loss,
        batch_size=args.batch_size,
        learning_rate=args.lr,
        epochs=args.epochs,
        beam_width=args.beam,
        seed=args.seed,
        pooling=args.pooling,
        channels=_channels(args),
        d_z=args.dz,
        h_att=args.hatt,
        init=args.init,
    )


def cmd_train(args) -> int:
    train_ds = read_dataset(args.train)
    val_ds = read_dataset(args.val)
    config = _train_config(args)
    best, log = train(config, train_ds, val_ds)
    manifest = run_manifest("train", args, [args.train, args.val])
    mdl.save_params(best, args.out, extra_meta={
        "loss": config.loss,
        "config": asdict(config),
        "best_epoch": log.best_epoch,
        "run": manifest,
    })
    if args.log:
        with open(args.log, "w", encoding="utf-8") as f:
            f.write(log.to_jsonl(include_timing=args.timing, run_manifest=manifest))
    total = sum(r.wall_time_s for r in log.records)
    print(f"best epoch {log.best_epoch}/{config.epochs} "
          f"(val MAP {log.records[log.best_epoch - 1].val_map:.4f}); "
          f"checkpoint -> {args.out}  [{total:.1f}s]")
    return EXIT_OK


def _load_any_model(path: str):
    _, manifest = read_emb1(path)
    kind = manifest.get("meta", {}).get("kind")
    if kind == "ranker-checkpoint":
        return "ranker", mdl.load_params(path), manifest["meta"]
    if kind == "oasis-checkpoint":
        tensors, _ = read_emb1(path)
        meta = manifest["meta"]
        return "oasis", OasisModel(w=tensors["w"], channel_mode=meta["channel_mode"]), meta
    raise DataError(f"{path!r} is not a known checkpoint (kind={kind!r})")


def cmd_rank(args) -> int:
    ds = read_dataset(args.data)
    kind, model, meta = _load_any_model(args.model)
    channels = _channels(args)
    manifest = run_manifest("rank", args, [args.data, args.model])
    lines = [json.dumps({"manifest": manifest}, sort_keys=True, separators=(",", ":"))]
    if kind == "ranker":
        orders = rank_dataset(model, ds, beam_width=args.beam, channels=channels,
                              threads=args.threads)
        from .ranking import path_log_likelihood
        from .episodes import episode_tensors
        q_t, r_t, _, _, _ = episode_tensors(ds, channels=channels)
        scores = mdl._forward(model, q_t, r_t).scores
        for i, (ep, order) in enumerate(zip(ds.episodes, orders)):
            ll = path_log_likelihood(scores[i], order)
            lines.append(json.dumps(
                {"episode": ep.episode_id, "order": list(order), "log_likelihood": ll},
                sort_keys=True, separators=(",", ":")))
    else:
        from .episodes import episode_tensors
        from .oasis import oasis_rank
        q_t, r_t, _, _, _ = episode_tensors(ds, channels=channels)
        for i, ep in enumerate(ds.episodes):
            order = oasis_rank(model, q_t[i], r_t[i])
            lines.append(json.dumps(
                {"episode": ep.episode_id, "order": list(order)},
                sort_keys=True, separators=(",", ":")))
    with open(args.out, "w", encoding="utf-8") as f:
        f.write("\n".join(lines) + "\n")
    print(f"ranked {len(ds.episodes)} episodes -> {args.out}")
    return EXIT_OK


def cmd_eval(args) -> int:
    ds = read_dataset(args.data)
    threshold = args.threshold
    if args.rankings:
        orders = []
        with open(args.rankings, encoding="utf-8") as f:
            for line in f:
                doc = json.loads(line)
                if "order" in doc:
                    orders.append(tuple(doc["order"]))
        labels = [ep.labels for ep in ds.episodes]
        if len(orders) != len(labels):
            raise DataError(f"{len(orders)} rankings for {len(labels)} episodes")
        result = evaluate_rankings(
            labels, orders,
            threshold=ds.train_binarize_at if threshold is None else threshold)
        inputs = [args.data, args.rankings]
    else:
        kind, model, _ = _load_any_model(args.model)
        channels = _channels(args)
        if kind == "ranker":
            result = evaluate_ranker(model, ds, beam_width=args.beam, channels=channels,
                                     threshold=threshold, threads=args.threads)
        else:
            result = evaluate_oasis(model, ds, channels=channels, threshold=threshold)
        inputs = [args.data, args.model]
    report = MetricReport.from_runs([result])
    payload = report.to_json(extra={"run": run_manifest("eval", args, inputs)})
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            f.write(payload + "\n")
    if args.table or not args.out:
        print(report.render_table())
    return EXIT_OK


def cmd_gradcheck(args) -> int:
    worst, redrawn = run_gradient_check(args.loss, instances=args.instances,
                                        seed=args.seed, step=args.step)
    print(f"max relative gradient error over {args.instances} episodes: {worst:.3e}"
          + (f" ({redrawn} redrawn)" if redrawn else ""))
    if worst < GRADCHECK_TOLERANCE:
        return EXIT_OK
    print(f"exceeds tolerance {GRADCHECK_TOLERANCE:g}", file=sys.stderr)
    return EXIT_NUMERIC


def cmd_sweep(args) -> int:
    train_ds = read_dataset(args.train)
    val_ds = read_dataset(args.val)
    test_ds = read_dataset(args.test)
    config = _train_config(args)
    rows = sweep_channels(config, train_ds, val_ds, test_ds,
                          _parse_ints(args.counts), seeds=_parse_ints(args.seeds))
    doc = {"rows": rows, "run": run_manifest("sweep", args, [args.train, args.val, args.test])}
    if args.out:
        with open(args.out, "w", encoding="utf-8") as f:
            json.dump(doc, f, sort_keys=True, separators=(",", ":"))
            f.write("\n")
    header = f"{'channels':>8}  {'MAP err':>9}  {'sd':>9}"
    print(header)
    for row in rows:
        sd = row["map_error_sd"]
        print(f"{row['channels']:>8}  {row['map_error_mean'] * 100:>8.2f}%  "
              + (f"({sd * 100:.2f}%)" if sd is not None else "      --"))
    return EXIT_OK


def cmd_oasis(args) -> int:
    train_ds = read_dataset(args.train)
    model = oasis_train(
        train_ds, epochs=args.epochs, batch_size=args.batch_size, lr=args.lr,
        rng=derive_rng(args.seed, "oasis", args.mode),
        channel_mode=args.mode, channels=_channels(args),
    )
    manifest = run_manifest("oasis", args, [args.train])
    write_emb1(args.out, [("w", model.w)], meta={
        "kind": "oasis-checkpoint",
        "channel_mode": model.channel_mode,
        "run": manifest,
    })
    print(f"trained bilinear baseline ({args.mode} channels) -> {args.out}")
    if args.test:
        result = evaluate_oasis(model, read_dataset(args.test), channels=_channels(args))
        report = MetricReport.from_runs([result])
        print(report.render_table())
    return EXIT_OK


# ----------------------------------------------------------------------
# parser
# ----------------------------------------------------------------------

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="attnrank",
        description="Listwise attention ranker: datasets, training, inference, evaluation.",
    )
    parser.add_argument("--version", action="version", version=f"attnrank {__version__}")
    default_threads = int(os.environ.get("ATTNRANK_THREADS", "1"))
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("generate", help="build a dataset split from a pool or synthetic items")
    p.add_argument("--protocol", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--seed", type=int, required=True)
    p.add_argument("--t", type=int, default=30)
    p.add_argument("--split", default="train")
    p.add_argument("--episodes", type=int, default=None,
                   help="episode count (default: one per pool item)")
    p.add_argument("--pool", default=None, help="existing EMB1 item pool")
    p.add_argument("--synth-items", type=int, default=1000)
    p.add_argument("--synth-classes", type=int, default=10)
    p.add_argument("--synth-channels", type=int, default=5)
    p.add_argument("--synth-noise", default="0.3,0.4,0.5,0.6,0.7")
    p.add_argument("--synth-kappa", type=float, default=5.0)
    p.add_argument("--synth-supers", type=int, default=5,
                   help="superclass count for newsgroups-style synthesis")
    p.set_defaults(func=cmd_generate)

    p = sub.add_parser("train", help="calibrate the attention ranker with SGD")
    _add_train_flags(p)
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--log", default=None, help="write per-epoch JSON lines here")
    p.add_argument("--timing", action="store_true",
                   help="include wall time in the log (breaks byte-identical reruns)")
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("rank", help="rank a dataset with a trained checkpoint")
    p.add_argument("--model", required=True)
    p.add_argument("--data", required=True)
    p.add_argument("--beam", type=int, default=3)
    p.add_argument("--channels", default=None)
    p.add_argument("--threads", type=int, default=default_threads)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_rank)

    p = sub.add_parser("eval", help="score rankings or a checkpoint on a dataset")
    p.add_argument("--data", required=True)
    group = p.add_mutually_exclusive_group(required=True)
    group.add_argument("--model", default=None)
    group.add_argument("--rankings", default=None)
    p.add_argument("--beam", type=int, default=3)
    p.add_argument("--channels", default=None)
    p.add_argument("--threshold", type=int, default=None,
                   help="binarize labels at this relevance (default: dataset's training threshold)")
    p.add_argument("--threads", type=int, default=default_threads)
    p.add_argument("--out", default=None)
    p.add_argument("--table", action="store_true")
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("gradcheck", help="verify hand-derived gradients by finite differences")
    p.add_argument("--loss", choices=("softmax", "hinge"), required=True)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--instances", type=int, default=20)
    p.add_argument("--step", type=float, default=1e-5)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("sweep", help="error versus number of embedding channels")
    _add_train_flags(p)
    p.add_argument("--train", required=True)
    p.add_argument("--val", required=True)
    p.add_argument("--test", required=True)
    p.add_argument("--counts", default="1,5")
    p.add_argument("--seeds", default="0,1,2,3,4")
    p.add_argument("--out", default=None)
    p.set_defaults(func=cmd_sweep)

    p = sub.add_parser("oasis", help="train the bilinear-similarity baseline")
    p.add_argument("--train", required=True)
    p.add_argument("--test", default=None, help="optionally evaluate on this split")
    p.add_argument("--mode", choices=CHANNEL_MODES, default="single")
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--batch-size", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--channels", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_oasis)
    return parser


def _add_train_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--loss", choices=("softmax", "hinge"), default="hinge")
    p.add_argument("--batch-size", type=int, default=100)
    p.add_argument("--lr", type=float, default=0.001)
    p.add_argument("--epochs", type=int, default=20)
    p.add_argument("--beam", type=int, default=3)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--pooling", choices=("mean", "max"), default="mean")
    p.add_argument("--channels", default=None, help="comma-separated channel subset")
    p.add_argument("--dz", type=int, default=32)
    p.add_argument("--hatt", type=int, default=16)
    p.add_argument("--init", choices=mdl.INIT_SCHEMES, default="small-random")


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (DataError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except NumericError as exc:
        print(f"numeric error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
