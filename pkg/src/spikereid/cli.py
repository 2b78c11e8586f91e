"""Command-line entry point: synth / train / eval / inspect.

Exit codes: 0 success, 1 usage, 2 data or format error, 3 numeric failure.
"""

import argparse
import os
import sys

import numpy as np

from . import config as cfgmod
from .config import UsageError
from .events import EventFormatError, SensorGeometry, bin_events, parse_event_file
from .model import (CheckpointFormatError, EventReIDDataset, NumericsError,
                    net_from_checkpoint, train_model)
from .retrieval import compute_map_cmc, cosine_sim_matrix
from .synthgen import make_dataset
from .tensor import no_grad


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_common(sub):
    sub.add_argument("--config", default=None, help="key = value config file")
    sub.add_argument("--seed", type=int, default=None, help="master seed (run.seed)")
    sub.add_argument("--out", default=None, help="output directory")
    sub.add_argument("overrides", nargs="*",
                     help="config overrides as key=value pairs")


def build_parser():
    p = _Parser(prog="spikereid",
                description="event-camera spiking re-identification pipeline")
    subs = p.add_subparsers(dest="command", required=True)
    s = subs.add_parser("synth", help="generate the synthetic dataset")
    s.add_argument("--ids", type=int, default=None, help="number of identities")
    s.add_argument("--seqs", type=int, default=None, help="sequences per identity per camera")
    _add_common(s)
    t = subs.add_parser("train", help="train a model")
    t.add_argument("--data", required=True, help="dataset root")
    _add_common(t)
    e = subs.add_parser("eval", help="evaluate a checkpoint")
    e.add_argument("--checkpoint", required=True)
    e.add_argument("--data", required=True)
    _add_common(e)
    i = subs.add_parser("inspect", help="dump attention/bias/spike-rate diagnostics")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--events", required=True, help="one .events input sequence")
    _add_common(i)
    return p


def resolve_config(args):
    cfg = cfgmod.default_config()
    if args.config:
        if not os.path.exists(args.config):
            raise UsageError(f"config file not found: {args.config}")
        cfgmod.load_config_file(args.config, cfg)
    for item in args.overrides:
        if "=" not in item:
            raise UsageError(f"override must look like key=value, got {item!r}")
        key, _, value = item.partition("=")
        cfgmod.set_key(cfg, key.strip(), value.strip())
    if args.seed is not None:
        cfg["run.seed"] = int(args.seed)
    if getattr(args, "ids", None) is not None:
        cfg["synth.ids"] = args.ids
    if getattr(args, "seqs", None) is not None:
        cfg["synth.seqs"] = args.seqs
    return cfgmod.validate(cfg)


def echo_config(cfg, out_dir):
    os.makedirs(out_dir, exist_ok=True)
    text = cfgmod.format_config(cfg)
    with open(os.path.join(out_dir, "config.resolved.txt"), "w", encoding="utf-8") as fh:
        fh.write(text)
    print(text, end="")


def cmd_synth(args):
    cfg = resolve_config(args)
    if not args.out:
        raise UsageError("synth requires --out")
    echo_config(cfg, args.out)
    manifest = make_dataset(
        args.out, n_ids=cfg["synth.ids"], seqs_per_id_per_cam=cfg["synth.seqs"],
        n_frames=cfg["synth.frames"], seed=cfg["run.seed"],
        frame_dt_us=cfg["synth.frame_dt_us"], threshold=cfg["synth.threshold"],
        height=cfg["model.height"], width=cfg["model.width"], noise=cfg["synth.noise"])
    print(f"wrote {manifest}")
    return 0


def cmd_train(args):
    cfg = resolve_config(args)
    if not args.out:
        raise UsageError("train requires --out")
    if not os.path.isdir(args.data):
        raise FileNotFoundError(f"dataset root not found: {args.data}")
    echo_config(cfg, args.out)
    probe = cfgmod.to_model_config(cfg, num_classes=2)
    dataset = EventReIDDataset.load(args.data, probe)
    mc = cfgmod.to_model_config(cfg, num_classes=len(dataset.ids))
    train_model(dataset, mc, cfg["run.seed"], out_dir=args.out, quiet=False)
    print(f"wrote {os.path.join(args.out, 'checkpoint.bin')}")
    return 0


def cmd_eval(args):
    cfg = resolve_config(args)
    if not args.out:
        raise UsageError("eval requires --out")
    if not os.path.exists(args.checkpoint):
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    if not os.path.isdir(args.data):
        raise FileNotFoundError(f"dataset root not found: {args.data}")
    echo_config(cfg, args.out)
    net, mc, _ = net_from_checkpoint(args.checkpoint)
    dataset = EventReIDDataset.load(args.data, mc)
    train_idx, eval_idx = dataset.split(mc.holdout_per_cam)
    which = cfg["eval.split"]
    indices = {"holdout": eval_idx, "train": train_idx,
               "all": list(range(len(dataset.records)))}[which]
    from .model import embed_split
    emb, ids, cams = embed_split(net, dataset, indices)
    result = compute_map_cmc(cosine_sim_matrix(emb, emb), ids, cams, ids, cams)
    csv_path = os.path.join(args.out, "eval_queries.csv")
    with open(csv_path, "w", encoding="utf-8") as fh:
        fh.write("query_id,ap,first_hit_rank\n")
        for qi, ap, fr in zip(result.query_indices, result.aps, result.first_hit_ranks):
            rec = dataset.records[indices[qi]]
            fh.write(f"{rec.identity:03d}_{rec.camera}_{rec.seq:03d},{ap:.6f},{fr + 1}\n")
        fh.write(f"# mAP={result.map:.6f} rank1={result.rank1:.6f} "
                 f"queries={len(result.aps)} skipped={result.n_skipped}\n")
    print(f"mAP={result.map:.4f} rank1={result.rank1:.4f} "
          f"queries={len(result.aps)} skipped={result.n_skipped}")
    return 0


def _dump_matrix(path, mat):
    np.savetxt(path, mat, delimiter=",", fmt="%.8g")


def cmd_inspect(args):
    cfg = resolve_config(args)
    if not args.out:
        raise UsageError("inspect requires --out")
    if not os.path.exists(args.checkpoint):
        raise FileNotFoundError(f"checkpoint not found: {args.checkpoint}")
    if not os.path.exists(args.events):
        raise FileNotFoundError(f"events file not found: {args.events}")
    echo_config(cfg, args.out)
    net, mc, _ = net_from_checkpoint(args.checkpoint)
    net.eval()
    geom = SensorGeometry(width=mc.width, height=mc.height)
    stream = parse_event_file(args.events, geom)
    if mc.window_us > 0:
        window = mc.window_us
    else:
        span = int(stream.t[-1] - stream.t[0]) if len(stream) else 1
        window = span // mc.time_steps + 1
    seq = bin_events(stream, mc.time_steps, window, geom,
                     clip=mc.bin_clip if mc.bin_clip > 0 else None)
    x = seq.data.astype(np.float32)
    capture = {}
    with no_grad():
        net.forward_features(x, capture=capture)
    t = mc.time_steps
    from .ssam import compute_bias_matrix
    for name in ("shallow", "deep"):
        stage = getattr(net, f"ssam_{name}", None)
        if stage is None:
            continue
        blocks = stage.staw_blocks(capture[f"ssam_{name}_input"], t)
        n = stage.n_tokens
        flat = blocks.transpose(0, 2, 1, 3).reshape(t * n, t * n)
        _dump_matrix(os.path.join(args.out, f"staw_{name}.csv"), flat)
        bias = compute_bias_matrix(stage.bias_table, stage.height, stage.width)
        _dump_matrix(os.path.join(args.out, f"bias_{name}.csv"), bias.data)
    with open(os.path.join(args.out, "spike_rates.csv"), "w", encoding="utf-8") as fh:
        fh.write("layer,step,mean_activation\n")
        for layer in sorted(capture):
            arr = capture[layer]
            per_step = arr.reshape(t, -1).mean(axis=1)
            for step, rate in enumerate(per_step):
                fh.write(f"{layer},{step},{rate:.6f}\n")
    print(f"wrote diagnostics under {args.out}")
    return 0


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval,
            "inspect": cmd_inspect}


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
        return COMMANDS[args.command](args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return 1
    except (EventFormatError, CheckpointFormatError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except NumericsError as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
