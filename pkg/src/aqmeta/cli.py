"""Command-line driver: train, eval, compare, attack, gen-data.

Exit codes: 0 success, 2 invalid input (config, checkpoint, dataset), 3 runtime abort.
"""

from __future__ import annotations

import argparse
import json
import logging
import platform
import sys
import time
from importlib import resources
from pathlib import Path

import numpy as np
import scipy

from . import __version__
from . import autodiff as ad
from . import nn
from .attacks import AttackError, deepfool_linf, mi_fgsm, pgd
from .config import SCHEMA, ConfigError, ExperimentConfig
from .evaluation import FIELDS, compare, episode_seeds, evaluate, rows_to_csv, rows_to_json
from .finetune import FineTuneError, FineTuneSpec, adapt
from .metatrain import MetaTrainError, adv_train_transfer, backbone_only, meta_train
from .tasks import (
    DatasetError,
    load_csv,
    load_fsds,
    normalize,
    gen_synthetic,
    sample_episode,
    split_classes,
    synthetic_split,
    write_fsds,
)

log = logging.getLogger("aqmeta")

EXIT_OK, EXIT_INPUT, EXIT_RUNTIME = 0, 2, 3

INPUT_ERRORS = (ConfigError, nn.CheckpointError, nn.ShapeMismatchError, DatasetError, FileNotFoundError,
                IsADirectoryError, PermissionError)
RUNTIME_ERRORS = (MetaTrainError, FineTuneError, AttackError, ad.AutodiffError, FloatingPointError)


class InputError(ValueError):
    """Inputs that are individually valid but do not fit together."""


# ---------------------------------------------------------------- helpers


def preset_names() -> list[str]:
    return sorted(p.name[:-4] for p in resources.files("aqmeta.presets").iterdir() if p.name.endswith(".cfg"))


def preset_path(name: str) -> Path:
    return Path(str(resources.files("aqmeta.presets") / f"{name}.cfg"))


def fixture_path(name: str) -> Path:
    return Path(str(resources.files("aqmeta.fixtures") / name))


def load_config(arg: str | None, overrides: dict[str, str]) -> ExperimentConfig:
    if arg is None:
        return ExperimentConfig.default(overrides)
    path = Path(arg)
    if not path.exists() and arg in preset_names():
        path = preset_path(arg)
    return ExperimentConfig.from_file(path, overrides)


def load_datasets(cfg: ExperimentConfig):
    """``(train, test)`` datasets with disjoint classes."""
    source = cfg["data.source"]
    if source == "synthetic":
        return synthetic_split(cfg.synthetic_spec(), cfg["data.train_classes"], cfg.seed)

    def read(p):
        p = cfg.path(p)
        return load_fsds(p) if source == "fsds" else load_csv(p, cfg["data.label_column"])

    ds = read(cfg["data.path"])
    if cfg["data.test_path"]:
        return ds, read(cfg["data.test_path"])
    return split_classes(ds, cfg["data.train_fraction"], cfg.seed)


def _n_way_for(cfg: ExperimentConfig, kind: str | None = None) -> int:
    kind = kind or cfg["finetune.kind"]
    return cfg["train.n_way"] if kind == "maml_sgd" else 0


def train_model(cfg: ExperimentConfig, train_ds, on_epoch=None):
    """Train per ``cfg``; returns ``(params, TrainLog)``."""
    arch = cfg.architecture(train_ds.feature_shape, _n_way_for(cfg))
    tc = cfg.train_config().with_(arch=arch)
    if cfg["train.regime"] == "transfer":
        return adv_train_transfer(tc, train_ds)
    return meta_train(tc, train_ds, on_epoch=on_epoch)


def load_model(path, cfg: ExperimentConfig, input_shape, spec: FineTuneSpec | None = None) -> nn.ParameterSet:
    """Load a checkpoint, verify it against the configured backbone, and fit it to ``spec``."""
    spec = spec or cfg.finetune_spec()
    raw = nn.load_checkpoint(path)
    n_head = raw["head.weight"].shape[0] if "head.weight" in raw else 0
    arch = cfg.architecture(input_shape, n_head)
    nn.check_compatible(raw, arch)
    params = nn.ParameterSet({k: raw[k] for k in raw}, raw.scopes, arch)
    if spec.kind == "maml_sgd":
        if n_head == 0:
            raise InputError(f"{path}: checkpoint has no classification head, cannot fine-tune with maml_sgd")
        if n_head != cfg["train.n_way"]:
            raise InputError(f"{path}: head has {n_head} outputs but train.n_way is {cfg['train.n_way']}")
        return params
    return backbone_only(params) if n_head else params


def provenance(cfg: ExperimentConfig) -> dict:
    return {"config_hash": cfg.hash, "seed": cfg.seed}


def versions() -> dict:
    return {"aqmeta": __version__, "numpy": np.__version__, "scipy": scipy.__version__,
            "python": platform.python_version()}


def write_manifest(out: Path, cfg: ExperimentConfig, command: str, files: list[str], timings: dict,
                   threads: int) -> None:
    manifest = {
        "command": command,
        **provenance(cfg),
        "threads": threads,
        "versions": versions(),
        "files": files,
        "timings": timings,
        "config": cfg.values,
    }
    (out / "manifest.json").write_text(json.dumps(manifest, indent=2, default=list) + "\n", encoding="utf-8")


def _write(out: Path, name: str, text: str) -> str:
    (out / name).write_text(text, encoding="utf-8", newline="")
    return name


# ---------------------------------------------------------------- commands


def cmd_train(cfg: ExperimentConfig, threads: int = 1) -> Path:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    train_ds, _ = load_datasets(cfg)
    params, train_log = train_model(cfg, train_ds)
    nn.save_checkpoint(params, out / "checkpoint.aqcp")
    header = ["epoch", "loss", "clean_acc", "attack_success", "attack_calls"]
    rows = [{"epoch": r.epoch, "loss": r.loss, "clean_acc": r.clean_acc, "attack_success": r.attack_success,
             "attack_calls": r.attack_calls} for r in train_log]
    files = ["checkpoint.aqcp",
             _write(out, "train_log.csv", rows_to_csv(rows, header, provenance(cfg)))]
    timings = {"total_seconds": time.perf_counter() - start,
               "epoch_seconds": [r.seconds for r in train_log]}
    write_manifest(out, cfg, "train", files, timings, threads)
    return out


def cmd_eval(checkpoint, cfg: ExperimentConfig, threads: int = 1) -> dict:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    _, test_ds = load_datasets(cfg)
    params = load_model(checkpoint, cfg, test_ds.feature_shape)
    metrics = evaluate(params, test_ds, cfg.eval_config())
    row = metrics.row(Path(checkpoint).stem)
    files = [_write(out, "metrics.csv", rows_to_csv([row], FIELDS, provenance(cfg))),
             _write(out, "metrics.json", rows_to_json([row], provenance(cfg)))]
    write_manifest(out, cfg, "eval", files, {"total_seconds": time.perf_counter() - start}, threads)
    return row


def parse_models(text: str) -> list[tuple]:
    """``name=checkpoint:kind[:scope]`` entries separated by ``;``."""
    models = []
    for item in (s.strip() for s in text.split(";")):
        if not item:
            continue
        name, sep, rest = item.partition("=")
        parts = rest.split(":")
        if not sep or not name.strip() or len(parts) not in (2, 3):
            raise ConfigError(f"compare.models entry {item!r} must look like name=checkpoint:kind[:scope]")
        models.append((name.strip(), parts[0].strip(), parts[1].strip(),
                       parts[2].strip() if len(parts) == 3 else None))
    return models


# column layouts of the comparison-preset tables
PRESETS = {
    "natural-vs-aq": ["Model", "A_nat", "A_adv"],
    "transfer-vs-aq": ["Model", "A_nat Transfer", "A_adv Transfer", "A_nat Meta", "A_adv Meta"],
    "query-vs-support": ["Model", "A_nat", "A_adv", "A_nat(AT)", "A_adv(AT)"],
    "last-layer": ["Re-trained", "A_nat", "A_adv", "A_nat(AT)", "A_adv(AT)"],
    "trades-sweep": ["Model", "A_nat", "A_adv"],
    "heads": ["Model", "A_adv"],
}
TRADES_SWEEP = (1.0, 3.0, 6.0)


def _variant(cfg: ExperimentConfig, **changes) -> ExperimentConfig:
    return cfg.with_overrides({k.replace("__", "."): str(v) for k, v in changes.items()})


def _cells(row: dict, with_at: bool) -> list:
    cells = [row["a_nat"], row["a_adv"]]
    return cells + [row["a_nat_at"], row["a_adv_at"]] if with_at else cells


def run_preset(preset: str, cfg: ExperimentConfig, train_ds, test_ds):
    """Train the models of ``preset`` and evaluate them on paired episodes.

    Returns ``(header, table_rows, metric_rows)``.
    """
    ev = cfg.eval_config()
    header = PRESETS[preset]
    metric_rows, table = [], []

    def run(name, variant, spec=None, adv_finetune=False):
        params, _ = train_model(variant, train_ds)
        run_cfg = ev.with_(finetune=spec or variant.finetune_spec(), adv_finetune=adv_finetune)
        row = evaluate(params, test_ds, run_cfg).row(name)
        metric_rows.append(row)
        return row, params

    if preset == "natural-vs-aq":
        for regime in ("natural", "aq"):
            row, _ = run(f"ridge {regime}", _variant(cfg, train__regime=regime, finetune__kind="ridge"))
            table.append([row["model"]] + _cells(row, False))
    elif preset == "transfer-vs-aq":
        for kind in ("ridge", "proto"):
            tr, _ = run(f"{kind} transfer", _variant(cfg, train__regime="transfer", finetune__kind=kind))
            meta, _ = run(f"{kind} aq", _variant(cfg, train__regime="aq", finetune__kind=kind))
            table.append([kind] + _cells(tr, False) + _cells(meta, False))
    elif preset == "query-vs-support":
        for regime, label in (("natural", "maml natural"), ("aq", "maml aq"), ("aq_support", "maml aq+support")):
            row, _ = run(label, _variant(cfg, train__regime=regime, finetune__kind="maml_sgd"), adv_finetune=True)
            table.append([label] + _cells(row, True))
    elif preset == "last-layer":
        for scope, label in (("all", "All layers"), ("last_layer", "FC only")):
            v = _variant(cfg, train__regime="aq", finetune__kind="maml_sgd", finetune__scope=scope)
            row, _ = run(label, v, adv_finetune=True)
            table.append([label] + _cells(row, True))
    elif preset == "trades-sweep":
        for inv in TRADES_SWEEP:
            label = f"1/lambda={inv:g}"
            row, _ = run(label, _variant(cfg, train__regime="trades", train__trades_inv_lambda=inv,
                                         finetune__kind="ridge"))
            table.append([label] + _cells(row, False))
        row, _ = run("AQ", _variant(cfg, train__regime="aq", finetune__kind="ridge"))
        table.append(["AQ"] + _cells(row, False))
    elif preset == "heads":
        v = _variant(cfg, train__regime="aq", finetune__kind="ridge")
        row, backbone = run("ridge", v)
        table.append(["ridge", row["a_adv"]])
        proto = FineTuneSpec(kind="proto")
        row = evaluate(backbone, test_ds, ev.with_(finetune=proto)).row("proto (ridge backbone)")
        metric_rows.append(row)
        table.append([row["model"], row["a_adv"]])
        row, _ = run("proto", _variant(cfg, train__regime="aq", finetune__kind="proto"))
        table.append(["proto", row["a_adv"]])
    else:
        raise ConfigError(f"unknown compare preset {preset!r}")
    return header, table, metric_rows


def cmd_compare(cfg: ExperimentConfig, threads: int = 1) -> dict:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    train_ds, test_ds = load_datasets(cfg)
    prov = provenance(cfg)
    files = []
    result = {"preset": cfg["compare.preset"]}
    if cfg["compare.preset"]:
        header, table, rows = run_preset(cfg["compare.preset"], cfg, train_ds, test_ds)
        table_dicts = [dict(zip(header, r)) for r in table]
        files.append(_write(out, "table.csv", rows_to_csv(table_dicts, header, prov)))
        files.append(_write(out, "table.json", json.dumps({**prov, "columns": header, "rows": table},
                                                           indent=2) + "\n"))
        result.update(header=header, table=table)
    else:
        entries = parse_models(cfg["compare.models"])
        if len(entries) < 2:
            raise ConfigError("compare needs a preset or at least two compare.models entries")
        models = []
        for name, ckpt, kind, scope in entries:
            spec = cfg.finetune_spec(kind=kind, **({"scope": scope} if scope else {}))
            models.append((name, load_model(cfg.path(ckpt), cfg, test_ds.feature_shape, spec), spec))
        rows = compare(models, test_ds, cfg.eval_config())
    files.append(_write(out, "compare.csv", rows_to_csv(rows, FIELDS, prov)))
    files.append(_write(out, "compare.json", rows_to_json(rows, prov)))
    write_manifest(out, cfg, "compare", files, {"total_seconds": time.perf_counter() - start}, threads)
    result["rows"] = rows
    return result


def attack_columns(restarts: int) -> list[str]:
    return ["Model", "A_DF", "A_MI", f"A_{restarts}-PGD", "A_PGD", "A_transfer", "A_nat"]


def attack_report(params, cfg: ExperimentConfig, test_ds, source=None) -> list:
    """Accuracy under each attack, summed over the paired evaluation episodes."""
    ev = cfg.eval_config()
    spec = ev.finetune
    pgd_cfg = ev.attack
    multi_cfg = ev.attack.with_(restarts=cfg["eval.pgd_restarts"])
    counts = np.zeros(6, dtype=np.int64)
    total = 0
    for seq in episode_seeds(ev.seed, ev.n_episodes):
        task_ss, *attack_ss = seq.spawn(5)
        ep = sample_episode(test_ds, ev.n_way, ev.k_shot, ev.q_query, np.random.default_rng(task_ss))
        qx, qy = ep.query_x, ep.query_y
        model = adapt(spec, params, ep.support_x, ep.support_y, ep.n_way).detached()
        df = deepfool_linf(model, qx, max_iter=cfg["eval.deepfool_iters"],
                           overshoot=cfg["eval.deepfool_overshoot"], clip=cfg.clip, y=qy)
        outcomes = [
            df.x_adv,
            mi_fgsm(model, qx, qy, pgd_cfg, mu=cfg["eval.mi_mu"]).x_adv,
            pgd(model, qx, qy, multi_cfg, rng=np.random.default_rng(attack_ss[0])).x_adv,
            # same stream as the multi-restart run: its first restart is this attack
            pgd(model, qx, qy, pgd_cfg, rng=np.random.default_rng(attack_ss[0])).x_adv,
        ]
        for i, x_adv in enumerate(outcomes):
            counts[i] += int(np.sum(nn.predict(model(ad.constant(x_adv))) == qy))
        if source is not None:
            src = adapt(spec, source, ep.support_x, ep.support_y, ep.n_way).detached()
            x_t = pgd(src, qx, qy, pgd_cfg, rng=np.random.default_rng(attack_ss[2])).x_adv
            counts[4] += int(np.sum(nn.predict(model(ad.constant(x_t))) == qy))
        counts[5] += int(np.sum(nn.predict(model(ad.constant(qx))) == qy))
        total += len(qy)
    fractions = [c / total for c in counts]
    if source is None:
        fractions[4] = None
    return fractions


def cmd_attack(checkpoints, cfg: ExperimentConfig, threads: int = 1) -> dict:
    out = cfg.output_dir
    out.mkdir(parents=True, exist_ok=True)
    start = time.perf_counter()
    _, test_ds = load_datasets(cfg)
    source = None
    if cfg["eval.transfer_source"]:
        source = load_model(cfg.path(cfg["eval.transfer_source"]), cfg, test_ds.feature_shape)
    header = attack_columns(cfg["eval.pgd_restarts"])
    table = []
    for ckpt in checkpoints:
        params = load_model(ckpt, cfg, test_ds.feature_shape)
        table.append([Path(ckpt).stem] + attack_report(params, cfg, test_ds, source))
    prov = provenance(cfg)
    files = [_write(out, "attacks.csv", rows_to_csv([dict(zip(header, r)) for r in table], header, prov)),
             _write(out, "attacks.json", json.dumps({**prov, "columns": header, "rows": table}, indent=2) + "\n")]
    write_manifest(out, cfg, "attack", files, {"total_seconds": time.perf_counter() - start}, threads)
    return {"header": header, "table": table}


def cmd_gen_data(cfg: ExperimentConfig, out_path, split: bool = False) -> list[Path]:
    """Write the configured synthetic distribution as FSDS (whole, or train/test files)."""
    out_path = Path(out_path)
    if split:
        out_path.mkdir(parents=True, exist_ok=True)
        train, test = synthetic_split(cfg.synthetic_spec(), cfg["data.train_classes"], cfg.seed)
        paths = [out_path / "train.fsds", out_path / "test.fsds"]
        write_fsds(train, paths[0])
        write_fsds(test, paths[1])
        return paths
    out_path.parent.mkdir(parents=True, exist_ok=True)
    write_fsds(normalize(gen_synthetic(cfg.synthetic_spec(), cfg.seed)), out_path)
    return [out_path]


# ---------------------------------------------------------------- argparse


def _add_config_flags(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="config file path or shipped preset name")
    p.add_argument("--threads", type=int, default=1, help="worker cap (execution is sequential)")
    group = p.add_argument_group("config overrides")
    for section, keys in SCHEMA.items():
        for key in keys:
            dotted = f"{section}.{key}" if section else key
            group.add_argument(f"--{dotted}", dest=f"set:{dotted}", metavar="VALUE")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="aqmeta", description="Adversarially robust few-shot meta-learning")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)
    p = sub.add_parser("train", help="meta-train (or transfer-train) and write a checkpoint")
    _add_config_flags(p)
    p = sub.add_parser("eval", help="evaluate a checkpoint on hold-out episodes")
    p.add_argument("checkpoint")
    _add_config_flags(p)
    p = sub.add_parser("compare", help="paired-seed comparison of several models or a preset")
    _add_config_flags(p)
    p = sub.add_parser("attack", help="robustness report under several attacks")
    p.add_argument("checkpoints", nargs="+")
    _add_config_flags(p)
    p = sub.add_parser("gen-data", help="write a synthetic dataset as FSDS")
    p.add_argument("out", help="output .fsds file (or directory with --split)")
    p.add_argument("--split", action="store_true", help="write train.fsds and test.fsds")
    _add_config_flags(p)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_OK if e.code == 0 else EXIT_INPUT
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    overrides = {k[4:]: v for k, v in vars(args).items() if k.startswith("set:") and v is not None}
    try:
        if args.threads < 1:
            raise ConfigError("--threads must be >= 1", None, "command line")
        cfg = load_config(args.config, overrides)
        if args.command == "train":
            out = cmd_train(cfg, args.threads)
            print(out / "checkpoint.aqcp")
        elif args.command == "eval":
            row = cmd_eval(args.checkpoint, cfg, args.threads)
            print(json.dumps(row))
        elif args.command == "compare":
            result = cmd_compare(cfg, args.threads)
            print(json.dumps(result.get("table", result["rows"])))
        elif args.command == "attack":
            result = cmd_attack(args.checkpoints, cfg, args.threads)
            print(json.dumps(result))
        elif args.command == "gen-data":
            for path in cmd_gen_data(cfg, args.out, args.split):
                print(path)
    except (InputError, *INPUT_ERRORS) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_INPUT
    except RUNTIME_ERRORS as e:
        print(f"aborted: {e}", file=sys.stderr)
        return EXIT_RUNTIME
    return EXIT_OK


def main_entry() -> None:
    sys.exit(main())


if __name__ == "__main__":
    main_entry()
