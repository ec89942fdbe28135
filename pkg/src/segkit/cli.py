"""``segkit`` command line: train, eval, bench, params, gen-data, fedsim.

Every command writes JSON lines to stdout. Settings resolve as built-in
defaults < ``--config`` file < command-line flags. The config file is flat
``key = value`` text; keys are flag names with ``-`` or ``_``.

Exit codes: 0 success, 2 usage error or missing data, 3 non-finite loss.
"""
import argparse
import configparser
import json
import os
import sys

import numpy as np

from segkit import checkpoint
from segkit.arch import ArchSpec, build, count_params
from segkit.bench import bench
from segkit.data import AugmentConfig, SynthTask, generate_dataset, read_dataset
from segkit.errors import CheckpointError, ContractError, NonFiniteError, T4FormatError
from segkit.fedsim import FedConfig, simulate
from segkit.losses import mean_std
from segkit.tensor import Prng
from segkit.train import TrainConfig, Trainer, evaluate

EXIT_USAGE = 2
EXIT_NONFINITE = 3

DEFAULTS = {
    "arch": "monet",
    "seed": 0,
    "epochs": 50,
    "batch": 4,
    "lr": 5e-4,
    "precision": "single",
    "val_split": 0.3,
    "augment": True,
    "plateau": True,
    "stop_dice": None,
    "slices": 150,
    "size": 256,
    "repeats": 5,
    "nodes": 3,
    "rounds": 5,
    "local_epochs": 1,
    "samples": 8,
    "holdout": 8,
    "n": 16,
    "slices_per_volume": 1,
}

_BOOL = {"1": True, "true": True, "yes": True, "on": True,
         "0": False, "false": False, "no": False, "off": False}


class UsageError(Exception):
    pass


def read_config(path):
    """Parse a flat key=value file into a dict of strings."""
    parser = configparser.ConfigParser(interpolation=None)
    with open(path) as fh:
        parser.read_string("[segkit]\n" + fh.read())
    return {k.replace("-", "_"): v for k, v in parser["segkit"].items()}


def _coerce(key, value):
    if value is None or not isinstance(value, str):
        return value
    default = DEFAULTS.get(key)
    if isinstance(default, bool):
        if value.lower() not in _BOOL:
            raise UsageError(f"{key} expects a boolean, got {value!r}")
        return _BOOL[value.lower()]
    if key == "stop_dice":
        return None if value.lower() in ("", "none") else float(value)
    if isinstance(default, int):
        return int(value)
    if isinstance(default, float):
        return float(value)
    return value


def resolve(args):
    """Merge defaults, config file and flags into one settings dict."""
    settings = dict(DEFAULTS)
    if getattr(args, "config", None):
        for k, v in read_config(args.config).items():
            settings[k] = v
    for k, v in vars(args).items():
        if v is not None and k not in ("cmd", "func", "config"):
            settings[k] = v
    return {k: _coerce(k, v) for k, v in settings.items()}


def emit(record, fh=None):
    line = json.dumps(record, sort_keys=True)
    print(line, flush=True)
    if fh is not None:
        fh.write(line + "\n")


def _dtype(precision):
    if precision not in ("single", "double"):
        raise UsageError(f"precision must be single or double, got {precision!r}")
    return np.float32 if precision == "single" else np.float64


def _split(volumes, val_split, seed):
    if not 0 <= val_split < 1:
        raise UsageError("val-split must lie in [0, 1)")
    n_val = int(round(len(volumes) * val_split))
    if n_val == 0 or n_val >= len(volumes):
        return volumes, volumes
    order = Prng(seed).fork(7).permutation(len(volumes))
    val_idx = set(order[:n_val].tolist())
    train = [v for i, v in enumerate(volumes) if i not in val_idx]
    val = [v for i, v in enumerate(volumes) if i in val_idx]
    return train, val


def cmd_train(s):
    if not s.get("data") or not s.get("out"):
        raise UsageError("train needs --data and --out")
    volumes = read_dataset(s["data"])
    train_vols, val_vols = _split(volumes, s["val_split"], s["seed"])
    images = np.concatenate([v[1] for v in train_vols])
    masks = np.concatenate([v[2] for v in train_vols])
    dtype = _dtype(s["precision"])
    spec = ArchSpec.from_name(s["arch"], input_size=images.shape[2])
    net = build(spec, Prng(s["seed"]), dtype)
    cfg = TrainConfig(
        epochs=s["epochs"], batch_size=s["batch"], lr=s["lr"], augment=s["augment"],
        augment_cfg=AugmentConfig(), stop_dice=s["stop_dice"], seed=s["seed"],
        plateau=s["plateau"],
    )
    trainer = Trainer(net, images, masks, cfg, val=val_vols)
    os.makedirs(s["out"], exist_ok=True)
    with open(os.path.join(s["out"], "train_log.jsonl"), "w") as log:
        history, best = trainer.fit(cfg.epochs, on_epoch=lambda rec: emit(rec, log))
    ckpt_path = os.path.join(s["out"], "best.mck")
    with open(ckpt_path, "wb") as fh:
        fh.write(best)
    with open(os.path.join(s["out"], "run.json"), "w") as fh:
        json.dump({k: v for k, v in s.items()}, fh, indent=2, sort_keys=True, default=str)
    emit({"event": "done", "epochs_run": len(history), "checkpoint": ckpt_path,
          "bytes": len(best),
          "best_val_dice": max((r["val_dice"] for r in history), default=None)})
    return 0


def cmd_eval(s):
    if not s.get("checkpoint") or not s.get("data"):
        raise UsageError("eval needs a checkpoint and --data")
    volumes = read_dataset(s["data"])
    spec = ArchSpec.from_name(s["arch"], input_size=volumes[0][1].shape[2])
    net = checkpoint.load_file(s["checkpoint"], spec, _dtype(s["precision"]))
    _, _, records = evaluate(net, volumes)
    for rec in records:
        emit(rec)
    mean, std = mean_std([r["dice"] for r in records])
    emit({"event": "summary", "arch": spec.name, "scans": len(records),
          "mean_dice": mean, "std_dice": std, "table": f"{mean:.2f} ± {std:.2f}"})
    return 0


def cmd_bench(s):
    for arch in s["arch"].split(","):
        emit(bench(arch.strip(), s["slices"], s["size"], s["repeats"], seed=s["seed"]))
    return 0


def cmd_params(s):
    names = s.get("archs") or ["monet", "unet16", "unet64"]
    rows = []
    for name in names:
        spec = ArchSpec.from_name(name)
        net = build(spec)
        counts = count_params(net)
        size = checkpoint.payload_size(net)
        rows.append({"arch": spec.name, **counts, "payload_bytes": size,
                     "size_mb": round(size / 2**20, 1)})
    if s.get("table"):
        print(f"{'Architecture':<14}{'Parameter count':>18}{'Size in memory':>17}")
        for r in rows:
            print(f"{r['arch']:<14}{r['total']:>18,}{r['size_mb']:>14.1f} MB")
    else:
        for r in rows:
            emit(r)
    return 0


def cmd_gen_data(s):
    if not s.get("out"):
        raise UsageError("gen-data needs --out")
    task = SynthTask(size=s["size"], seed=s["seed"])
    manifest = generate_dataset(s["out"], task, s["n"], s["slices_per_volume"])
    emit({"event": "done", "out": s["out"], **manifest})
    return 0


def cmd_fedsim(s):
    train = TrainConfig(batch_size=s["batch"], lr=s["lr"], augment=s["augment"],
                        plateau=s["plateau"])
    cfg = FedConfig(nodes=s["nodes"], rounds=s["rounds"], local_epochs=s["local_epochs"],
                    samples_per_node=s["samples"], holdout=s["holdout"],
                    image_size=s["size"], seed=s["seed"], data_seed=s["seed"], train=train)
    report = simulate(cfg, ArchSpec.from_name(s["arch"]), _dtype(s["precision"]))
    if s.get("out"):
        os.makedirs(s["out"], exist_ok=True)
        with open(os.path.join(s["out"], "fedsim_report.json"), "w") as fh:
            json.dump(report, fh, indent=2, sort_keys=True)
    emit(report)
    return 0


def build_parser():
    p = argparse.ArgumentParser(prog="segkit", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="cmd", required=True)

    def common(sp, *flags):
        sp.add_argument("--config", help="flat key=value settings file")
        sp.add_argument("--seed", type=int)
        if "arch" in flags:
            sp.add_argument("--arch", help="monet, unet16 or unet64")
        if "precision" in flags:
            sp.add_argument("--precision", choices=["single", "double"])
        if "out" in flags:
            sp.add_argument("--out")
        if "train" in flags:
            sp.add_argument("--epochs", type=int)
            sp.add_argument("--batch", type=int)
            sp.add_argument("--lr", type=float)
            sp.add_argument("--no-augment", dest="augment", action="store_const", const=False)
            sp.add_argument("--no-plateau", dest="plateau", action="store_const", const=False,
                            help="keep the learning rate fixed")

    sp = sub.add_parser("train", help="train a network on a .t4 dataset directory")
    common(sp, "arch", "precision", "out", "train")
    sp.add_argument("--data")
    sp.add_argument("--val-split", type=float)
    sp.add_argument("--stop-dice", type=float, help="stop once validation Dice reaches this")
    sp.set_defaults(func=cmd_train)

    sp = sub.add_parser("eval", help="per-volume Dice of a checkpoint")
    common(sp, "arch", "precision")
    sp.add_argument("checkpoint")
    sp.add_argument("--data")
    sp.set_defaults(func=cmd_eval)

    sp = sub.add_parser("bench", help="CPU inference latency over one scan")
    common(sp, "arch")
    sp.add_argument("--slices", type=int)
    sp.add_argument("--size", type=int)
    sp.add_argument("--repeats", type=int)
    sp.set_defaults(func=cmd_bench)

    sp = sub.add_parser("params", help="parameter counts and serialized sizes")
    common(sp)
    sp.add_argument("archs", nargs="*")
    sp.add_argument("--table", action="store_true", default=None)
    sp.set_defaults(func=cmd_params)

    sp = sub.add_parser("gen-data", help="write a synthetic .t4 dataset")
    common(sp, "out")
    sp.add_argument("--n", type=int, help="number of volumes")
    sp.add_argument("--size", type=int)
    sp.add_argument("--slices-per-volume", type=int)
    sp.set_defaults(func=cmd_gen_data)

    sp = sub.add_parser("fedsim", help="federated averaging simulation")
    common(sp, "arch", "precision", "out", "train")
    sp.add_argument("--nodes", type=int)
    sp.add_argument("--rounds", type=int)
    sp.add_argument("--local-epochs", type=int)
    sp.add_argument("--samples", type=int, help="training samples per node")
    sp.add_argument("--holdout", type=int)
    sp.add_argument("--size", type=int)
    sp.set_defaults(func=cmd_fedsim)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        settings = resolve(args)
        if args.cmd == "gen-data" and args.size is None and "size" not in (
                read_config(args.config) if args.config else {}):
            settings["size"] = 64
        if args.cmd == "fedsim" and args.size is None and "size" not in (
                read_config(args.config) if args.config else {}):
            settings["size"] = 64
        return args.func(settings)
    except (UsageError, ContractError, FileNotFoundError, T4FormatError,
            CheckpointError) as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return EXIT_USAGE
    except NonFiniteError as exc:
        print(json.dumps({"error": str(exc)}), file=sys.stderr)
        return EXIT_NONFINITE


if __name__ == "__main__":
    sys.exit(main())
