"""Command-line front end.

    lora-rffi gen|pretrain|finetune|eval|sweep --config run.json
              [--init CKPT] [--out DIR] [--seed N] [--width-scale F]

Configs are JSON objects; unknown keys are rejected. Exit codes: 0 success,
1 runtime failure, 2 usage or configuration error. The worker count for
data preparation comes from the ``RFFI_WORKERS`` environment variable.
"""

from __future__ import annotations

import argparse
import csv
import hashlib
import json
import sys
from dataclasses import replace
from pathlib import Path

import numpy as np

from .channel import AugmentationRanges, derive_seed
from .datasets import CHANNEL_TAGS, MANIFEST_NAME, PacketStore, generate_corpus, load_store
from .errors import ConfigurationError, RffiError
from .impairments import sample_device_profiles, sample_receiver_profiles
from .lora_phy import ChirpParams
from .nn import ArchitectureSpec, load_checkpoint
from .pipelines import (FinetuneConfig, PretrainConfig, TrainedModel, evaluate,
                        finetune_siamese, pretrain)
from .representation import StftConfig

STATED = "stated"
CHOSEN = "chosen"

# key -> (default, provenance, description)
_TRAIN_KEYS = {
    "batch_pairs": (32, STATED, "positive pairs per batch (64 views)"),
    "temperature": (0.05, STATED, "NT-Xent temperature"),
    "ranges": (AugmentationRanges().to_dict(), STATED, "augmentation ranges: rms_delay_spread_ns, doppler_hz, snr_db"),
    "reduce_patience": (10, STATED, "epochs without improvement before halving the learning rate"),
    "stop_patience": (30, STATED, "epochs without improvement before stopping"),
    "max_epochs": (None, CHOSEN, "hard epoch cap (null = early stopping only)"),
    "max_steps": (None, CHOSEN, "optimizer-step budget, checked at epoch ends (null = none)"),
    "val_fraction": (0.1, CHOSEN, "held-out fraction per device for the scheduler"),
    "representation": ("spec", STATED, "network input: spec or cis"),
    "stft": (StftConfig().to_dict(), CHOSEN, "STFT settings"),
    "arch": ({}, STATED, "architecture overrides (conv_stages, skip_connections, dense_sizes, width_scale)"),
    "seed": (0, CHOSEN, "base seed"),
}

SCHEMAS = {
    "gen": {
        "out": (None, CHOSEN, "output corpus directory"),
        "num_devices": (10, CHOSEN, "K, number of synthetic devices"),
        "num_receivers": (1, CHOSEN, "receivers per corpus"),
        "first_receiver_id": (0, CHOSEN, "id of the first receiver"),
        "packets_per_pair": (200, CHOSEN, "M, packets per (device, receiver)"),
        "channel_tag": ("clean", STATED, f"one of {', '.join(CHANNEL_TAGS[:5])}"),
        "ranges": (None, CHOSEN, "channel ranges (default: per channel_tag)"),
        "spread": (1.0, CHOSEN, "device population spread in (0, 1]"),
        "device_seed": (None, CHOSEN, "seed of the device population (default: derived from seed)"),
        "receiver_seed": (None, CHOSEN, "seed of the receiver population (default: derived from seed)"),
        "chirp": (ChirpParams().to_dict(), STATED, "chirp parameters (B = 125 kHz, fs = 1 MHz, 8 preambles)"),
        "labeled": (True, CHOSEN, "store device labels"),
        "seed": (0, CHOSEN, "generation seed"),
    },
    "pretrain": {
        "data": (None, CHOSEN, "corpus directory (labels are ignored)"),
        "out": (None, CHOSEN, "output directory"),
        "lr": (0.001, STATED, "initial learning rate"),
        **_TRAIN_KEYS,
    },
    "finetune": {
        "rx1": (None, CHOSEN, "corpus of the first receiver"),
        "rx2": (None, CHOSEN, "corpus of the second receiver (default: rx1)"),
        "rx1_receiver": (None, CHOSEN, "receiver id selected from rx1 (default: all)"),
        "rx2_receiver": (None, CHOSEN, "receiver id selected from rx2 (default: all)"),
        "init": (None, CHOSEN, "pretrained checkpoint (same as --init)"),
        "out": (None, CHOSEN, "output directory"),
        "lr": (0.0003, STATED, "initial learning rate"),
        "packets_per_device": (None, CHOSEN, "packets per device and receiver (default: all)"),
        "freeze_extractor": (False, CHOSEN, "keep extractor weights fixed"),
        "contrastive": (True, STATED, "include the NT-Xent term (false = plain classifier)"),
        **_TRAIN_KEYS,
    },
    "eval": {
        "model": (None, CHOSEN, "checkpoint to evaluate"),
        "test": (None, CHOSEN, "labeled test corpus"),
        "out": (None, CHOSEN, "output directory"),
    },
}
SCHEMAS["sweep"] = {
    **{k: v for k, v in SCHEMAS["finetune"].items() if k != "packets_per_device"},
    "test": (None, CHOSEN, "labeled test corpus"),
    "points": ([20, 50, 100, 200], STATED, "packets_per_device values"),
    "repetitions": (4, STATED, "paired repetitions per point"),
}


class UsageError(Exception):
    pass


def _load_config(path, command: str, args) -> dict:
    schema = SCHEMAS[command]
    raw = {}
    if path is not None:
        p = Path(path)
        if not p.exists():
            raise UsageError(f"config file {p} does not exist")
        try:
            raw = json.loads(p.read_text())
        except json.JSONDecodeError as exc:
            raise UsageError(f"{p}: invalid JSON ({exc})") from None
        if not isinstance(raw, dict):
            raise UsageError(f"{p}: config must be a JSON object")
    unknown = sorted(set(raw) - set(schema))
    if unknown:
        raise UsageError(f"unknown config keys for '{command}': {', '.join(unknown)}")
    cfg = {k: v[0] for k, v in schema.items()}
    cfg.update(raw)
    if args.out is not None:
        cfg["out"] = args.out
    if args.seed is not None:
        cfg["seed"] = args.seed
    if getattr(args, "init", None) is not None:
        if "init" not in schema:
            raise UsageError(f"--init does not apply to '{command}'")
        cfg["init"] = args.init
    if args.width_scale is not None:
        if "arch" not in schema:
            raise UsageError(f"--width-scale does not apply to '{command}'")
        cfg["arch"] = {**cfg["arch"], "width_scale": args.width_scale}
    if not cfg.get("out"):
        raise UsageError("an output path is required (--out or 'out' in the config)")
    return cfg


def _require(cfg: dict, key: str) -> Path:
    if cfg.get(key) is None:
        raise UsageError(f"config key '{key}' is required")
    p = Path(cfg[key])
    if not p.exists():
        raise RffiError(f"{key}: {p} does not exist")
    return p


def _train_kwargs(cfg: dict) -> dict:
    arch = ArchitectureSpec.from_dict({**ArchitectureSpec().to_dict(), **cfg["arch"]})
    return dict(
        lr=cfg["lr"], batch_pairs=cfg["batch_pairs"], temperature=cfg["temperature"],
        ranges=AugmentationRanges.from_dict(cfg["ranges"]), seed=cfg["seed"],
        reduce_patience=cfg["reduce_patience"], stop_patience=cfg["stop_patience"],
        max_epochs=cfg["max_epochs"], max_steps=cfg["max_steps"], val_fraction=cfg["val_fraction"], arch=arch,
        stft=StftConfig.from_dict(cfg["stft"]), representation=cfg["representation"],
    )


def _hash_dir(path: Path) -> str:
    h = hashlib.sha256()
    for f in sorted(path.iterdir()):
        if f.is_file():
            h.update(f.name.encode())
            h.update(f.read_bytes())
    return h.hexdigest()


# ---------------------------------------------------------------- commands


def cmd_gen(cfg: dict) -> int:
    seed = int(cfg["seed"])
    dseed = cfg["device_seed"] if cfg["device_seed"] is not None else derive_seed(seed, 10)
    rseed = cfg["receiver_seed"] if cfg["receiver_seed"] is not None else derive_seed(seed, 12)
    chirp = ChirpParams.from_dict(cfg["chirp"])
    devices = sample_device_profiles(cfg["num_devices"], dseed, cfg["spread"], chirp.bandwidth_hz)
    receivers = sample_receiver_profiles(cfg["num_receivers"], rseed, first_id=cfg["first_receiver_id"])
    ranges = None if cfg["ranges"] is None else AugmentationRanges.from_dict(cfg["ranges"])
    out = Path(cfg["out"])
    path = generate_corpus(devices, receivers, cfg["packets_per_pair"], cfg["channel_tag"], out,
                           derive_seed(seed, 20), ranges=ranges, chirp=chirp, labeled=cfg["labeled"])
    store = load_store(path)
    print(f"wrote {len(store)} records to {path}")
    print(f"sha256 {_hash_dir(out)}")
    return 0


def _store(path: Path, receiver=None):
    store = load_store(path)
    if not isinstance(store, PacketStore):
        raise ConfigurationError(f"{path}: corpus is unlabeled")
    return store if receiver is None else store.filter(receiver_id=receiver)


def cmd_pretrain(cfg: dict) -> int:
    data = _require(cfg, "data")
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    store = load_store(data, labeled=False)
    res = pretrain(store, PretrainConfig(**_train_kwargs(cfg)))
    res.save(out / "extractor.ckpt")
    res.write_log(out / "train_log.csv")
    print(f"pretrained {len(res.log)} epochs; checkpoint {out / 'extractor.ckpt'}")
    return 0


def _finetune_inputs(cfg: dict):
    rx1_path = _require(cfg, "rx1")
    rx2_path = Path(cfg["rx2"]) if cfg["rx2"] is not None else rx1_path
    if not rx2_path.exists():
        raise RffiError(f"rx2: {rx2_path} does not exist")
    rx1 = _store(rx1_path, cfg["rx1_receiver"])
    rx2 = _store(rx2_path, cfg["rx2_receiver"])
    init = None
    if cfg["init"] is not None:
        p = Path(cfg["init"])
        if not p.exists():
            raise RffiError(f"init checkpoint {p} does not exist")
        init, meta = load_checkpoint(p)
        want = (cfg["representation"], StftConfig.from_dict(cfg["stft"]).to_dict())
        got = (meta.get("representation"), meta.get("stft"))
        if got != want:
            raise ConfigurationError(f"{p} was trained on representation {got[0]!r} with different STFT settings")
    return rx1, rx2, init


def cmd_finetune(cfg: dict) -> int:
    rx1, rx2, init = _finetune_inputs(cfg)
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    fcfg = FinetuneConfig(**_train_kwargs(cfg), packets_per_device=cfg["packets_per_device"],
                          freeze_extractor=cfg["freeze_extractor"], contrastive=cfg["contrastive"])
    res = finetune_siamese(rx1, rx2, init, fcfg)
    res.save(out / "model.ckpt")
    res.write_log(out / "train_log.csv")
    arm = "w/ pretrain" if init is not None else "w/o pretrain"
    print(f"fine-tuned ({arm}) {len(res.log)} epochs; checkpoint {out / 'model.ckpt'}")
    return 0


def cmd_eval(cfg: dict) -> int:
    model_path = _require(cfg, "model")
    test = _store(_require(cfg, "test"))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    report = evaluate(TrainedModel.load(model_path), test)
    report.write_csv(out / "accuracy.csv", out / "confusion.csv")
    (out / "summary.txt").write_text(report.summary() + "\n")
    print(report.summary())
    return 0


def cmd_sweep(cfg: dict) -> int:
    rx1, rx2, init = _finetune_inputs(cfg)
    if init is None:
        raise UsageError("sweep needs a pretrained checkpoint (--init or 'init')")
    test = _store(_require(cfg, "test"))
    out = Path(cfg["out"])
    out.mkdir(parents=True, exist_ok=True)
    points = [int(p) for p in cfg["points"]]
    reps = int(cfg["repetitions"])
    if not points or reps < 1:
        raise UsageError("sweep needs at least one point and one repetition")
    base = _train_kwargs(cfg)
    rows = []
    for point in points:
        for rep in range(reps):
            seed = derive_seed(int(cfg["seed"]), rep)
            for arm, start in (("with_pretrain", init), ("without_pretrain", None)):
                fcfg = FinetuneConfig(**{**base, "seed": seed}, packets_per_device=point,
                                      freeze_extractor=cfg["freeze_extractor"],
                                      contrastive=cfg["contrastive"])
                res = finetune_siamese(rx1, rx2, start, fcfg)
                acc = evaluate(res, test).overall_accuracy
                rows.append((point, arm, rep, acc, len(res.log)))
                print(f"point {point} rep {rep} {arm}: accuracy {acc:.4f} ({len(res.log)} epochs)")
    with open(out / "sweep.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["packets_per_device", "arm", "repetition", "accuracy", "epochs"])
        for r in rows:
            w.writerow([r[0], r[1], r[2], repr(r[3]), r[4]])
    with open(out / "sweep_summary.csv", "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["packets_per_device", "arm", "mean", "min", "max"])
        for point in points:
            for arm in ("with_pretrain", "without_pretrain"):
                acc = np.array([r[3] for r in rows if r[0] == point and r[1] == arm])
                w.writerow([point, arm, repr(float(acc.mean())), repr(float(acc.min())), repr(float(acc.max()))])
    return 0


COMMANDS = {"gen": cmd_gen, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
            "eval": cmd_eval, "sweep": cmd_sweep}
SUMMARIES = {
    "gen": "generate a synthetic packet corpus",
    "pretrain": "contrastive pretraining of the feature extractor (labels unused)",
    "finetune": "Siamese fine-tuning on cross-receiver pairs",
    "eval": "evaluate a checkpoint on a labeled corpus",
    "sweep": "paired w/ vs w/o pretrain fine-tunes over packets_per_device",
}


def _defaults_epilog(command: str) -> str:
    lines = ["config keys (default, provenance):"]
    for key, (default, prov, text) in SCHEMAS[command].items():
        lines.append(f"  {key} = {json.dumps(default)}  [{prov}]  {text}")
    return "\n".join(lines)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="lora-rffi", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name, help=SUMMARIES[name], description=SUMMARIES[name],
                           epilog=_defaults_epilog(name),
                           formatter_class=argparse.RawDescriptionHelpFormatter)
        p.add_argument("--config", help="JSON config file (unknown keys are rejected)")
        p.add_argument("--out", help="output directory (overrides 'out')")
        p.add_argument("--seed", type=int, help="base seed (overrides 'seed')")
        if name in ("finetune", "sweep"):
            p.add_argument("--init", help="pretrained extractor checkpoint ('w/ pretrain')")
        if "arch" in SCHEMAS[name]:
            p.add_argument("--width-scale", type=float, help="channel width multiplier in (0, 1]")
        p.set_defaults(width_scale=None)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        cfg = _load_config(args.config, args.command, args)
        return COMMANDS[args.command](cfg)
    except (UsageError, ConfigurationError) as exc:
        print(f"lora-rffi {args.command}: error: {exc}", file=sys.stderr)
        return 2
    except (RffiError, OSError) as exc:
        print(f"lora-rffi {args.command}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
