"""Stage-based pipeline CLI: synth -> ingest -> build -> train -> eval -> report.

Stages communicate through files only, so each one is independently runnable
and every artifact embeds the resolved configuration and seed. Configuration
comes from a flat ``key = value`` file; ``--set key=value`` flags override file
values, which override defaults.

Exit codes: 0 success, 2 configuration error, 3 missing/invalid input,
4 numerical failure.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import autodiff as ad
from .context import build_context_dataset, read_jsonl, write_jsonl
from .errors import ConfigError, DataError, GeometryError, NumericalError
from .evalharness import EvalProtocol, EvalReport, improvement_ratio, run_unseen_eval
from .experiment import merge_datasets
from .model import ModelConfig, init_params
from .series import build_store, load_csv, load_store, save_store
from .synthetic import SynthSpec, generate, write_csv
from .tasks import TaskKind, WindowSpec
from .trainer import TrainConfig, train

SCHEMA: dict[str, tuple[str, object]] = {
    # shared
    "out_dir": ("str", "out"),
    "seed": ("int", 0),
    "dataset_name": ("str", "synth"),
    # synth
    "synth_family": ("str", "sinusoid_mixture"),
    "synth_count": ("int", 32),
    "synth_length": ("int", 2048),
    "synth_noise_sigma": ("float", 0.05),
    "synth_noise_ar": ("float", 0.5),
    "synth_components_min": ("int", 2),
    "synth_components_max": ("int", 3),
    "synth_amplitude_min": ("float", 0.5),
    "synth_amplitude_max": ("float", 1.5),
    "synth_frequency_min": ("float", float(2 * np.pi / 64)),
    "synth_frequency_max": ("float", float(2 * np.pi / 16)),
    # ingest
    "csv": ("str", ""),
    "channels": ("strs", []),
    "store": ("str", ""),
    # window + build
    "lookback": ("int", 24),
    "horizon": ("int", 12),
    "tasks": ("strs", ["forecast", "impute"]),
    "demo_counts": ("ints", [0, 2, 4]),
    "stride": ("int", 0),  # 0 = horizon
    "valid_stride": ("int", 0),
    "pairwise_disjoint_demos": ("bool", False),
    "cross_channel_demos": ("bool", False),
    # model
    "variant": ("str", "decoder_causal"),
    "patch_size": ("int", 4),
    "d_model": ("int", 64),
    "n_layers": ("int", 2),
    "n_heads": ("int", 4),
    "ff_mult": ("int", 4),
    "max_tokens": ("int", 2048),
    # train
    "learning_rate": ("float", 1e-3),
    "batch_size": ("int", 32),
    "max_epochs": ("int", 100),
    "patience": ("int", 5),
    "beta1": ("float", 0.9),
    "beta2": ("float", 0.999),
    "adam_eps": ("float", 1e-8),
    "clip_norm": ("float", 1.0),
    "supervise_demo_outputs": ("bool", False),
    "checkpoint": ("str", ""),
    "train_record": ("str", ""),
    # eval + report
    "eval_task": ("str", "backtrace"),
    "demo_count": ("int", 4),
    "eval_stride": ("int", 0),
    "report": ("str", ""),
    "reports": ("strs", []),
    "summary": ("str", ""),
}


def _coerce(key: str, raw: str):
    kind, _ = SCHEMA[key]
    try:
        if kind == "int":
            return int(raw)
        if kind == "float":
            return float(raw)
        if kind == "bool":
            lowered = raw.strip().lower()
            if lowered in ("1", "true", "yes", "on"):
                return True
            if lowered in ("0", "false", "no", "off"):
                return False
            raise ValueError(raw)
        if kind == "ints":
            return [int(x) for x in raw.split(",") if x.strip() != ""]
        if kind == "strs":
            return [x.strip() for x in raw.split(",") if x.strip() != ""]
        return raw.strip()
    except ValueError:
        raise ConfigError(f"cannot parse {key} = {raw!r} as {kind}") from None


def parse_config_file(path: str | Path) -> dict[str, str]:
    path = Path(path)
    if not path.exists():
        raise ConfigError(f"no such config file: {path}")
    values: dict[str, str] = {}
    for lineno, line in enumerate(path.read_text().splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if "=" not in stripped:
            raise ConfigError(f"{path}:{lineno}: expected 'key = value', got {stripped!r}")
        key, _, value = stripped.partition("=")
        values[key.strip()] = value.strip()
    return values


def resolve_config(config_path: str | None, overrides: list[str]) -> dict:
    raw: dict[str, str] = {}
    if config_path:
        raw.update(parse_config_file(config_path))
    for item in overrides:
        if "=" not in item:
            raise ConfigError(f"--set expects key=value, got {item!r}")
        key, _, value = item.partition("=")
        raw[key.strip()] = value.strip()
    unknown = sorted(set(raw) - set(SCHEMA))
    if unknown:
        raise ConfigError(f"unknown config keys: {unknown}")
    resolved = {key: default for key, (_, default) in SCHEMA.items()}
    for key, value in raw.items():
        resolved[key] = _coerce(key, value)
    return resolved


def _path(cfg: dict, key: str, default_name: str) -> Path:
    out_dir = Path(cfg["out_dir"])
    out_dir.mkdir(parents=True, exist_ok=True)
    return Path(cfg[key]) if cfg[key] else out_dir / default_name


def _window(cfg: dict) -> WindowSpec:
    return WindowSpec(cfg["lookback"], cfg["horizon"])


def _tasks(names: list[str]) -> list[TaskKind]:
    try:
        return [TaskKind(n) for n in names]
    except ValueError as exc:
        raise ConfigError(f"unknown task name: {exc}") from None


def _model_config(cfg: dict) -> ModelConfig:
    return ModelConfig(
        variant=cfg["variant"],
        patch_size=cfg["patch_size"],
        d_model=cfg["d_model"],
        n_layers=cfg["n_layers"],
        n_heads=cfg["n_heads"],
        ff_mult=cfg["ff_mult"],
        max_tokens=cfg["max_tokens"],
    )


def _train_config(cfg: dict) -> TrainConfig:
    return TrainConfig(
        learning_rate=cfg["learning_rate"],
        batch_size=cfg["batch_size"],
        max_epochs=cfg["max_epochs"],
        patience=cfg["patience"],
        seed=cfg["seed"],
        beta1=cfg["beta1"],
        beta2=cfg["beta2"],
        eps=cfg["adam_eps"],
        clip_norm=cfg["clip_norm"],
        supervise_demo_outputs=cfg["supervise_demo_outputs"],
    )


def _synth_spec(cfg: dict) -> SynthSpec:
    return SynthSpec(
        family=cfg["synth_family"],
        count=cfg["synth_count"],
        length=cfg["synth_length"],
        seed=cfg["seed"],
        name=cfg["dataset_name"],
        components=(cfg["synth_components_min"], cfg["synth_components_max"]),
        amplitude=(cfg["synth_amplitude_min"], cfg["synth_amplitude_max"]),
        frequency=(cfg["synth_frequency_min"], cfg["synth_frequency_max"]),
        noise_sigma=cfg["synth_noise_sigma"],
        noise_ar=cfg["synth_noise_ar"],
        min_window=cfg["lookback"] + cfg["horizon"],
    )


def cmd_synth(cfg: dict) -> None:
    series = generate(_synth_spec(cfg))
    out = _path(cfg, "csv", "synth.csv")
    write_csv(series, out)
    print(f"synth: wrote {len(series)} channels x {len(series[0])} steps to {out}")


def cmd_ingest(cfg: dict) -> None:
    csv_path = _path(cfg, "csv", "synth.csv")
    if not csv_path.exists():
        raise DataError(f"missing input csv: {csv_path}")
    raw = load_csv(csv_path, channels=cfg["channels"] or None, name=cfg["dataset_name"])
    store = build_store(raw, meta={"config": cfg, "seed": cfg["seed"]})
    out = _path(cfg, "store", "store.json")
    save_store(store, out)
    print(f"ingest: {len(store.channels)} channels split and normalized -> {out}")


def cmd_build(cfg: dict) -> None:
    store_path = _path(cfg, "store", "store.json")
    store = load_store(store_path)
    window = _window(cfg)
    tasks = _tasks(cfg["tasks"])
    stride = cfg["stride"] or None
    valid_stride = cfg["valid_stride"] or cfg["stride"] or None
    train_series = [store.series(ch, "train") for ch in store.channels]
    valid_series = [store.series(ch, "valid") for ch in store.channels]
    total = 0
    for k, m in enumerate(cfg["demo_counts"]):
        for part, series, part_stride, demo_pool, sub in (
            ("train", train_series, stride, None, 2 * k),
            ("valid", valid_series, valid_stride, train_series, 2 * k + 1),
        ):
            dataset = build_context_dataset(
                series,
                tasks,
                window,
                m,
                stride=part_stride,
                seed=cfg["seed"] * 1000 + sub,
                demo_pool=demo_pool,
                pairwise_disjoint_demos=cfg["pairwise_disjoint_demos"],
                cross_channel_demos=cfg["cross_channel_demos"],
            )
            dataset.extra["config"] = cfg
            out = Path(cfg["out_dir"]) / f"ctx_{part}_m{m}.jsonl"
            write_jsonl(dataset, out)
            total += len(dataset)
    print(f"build: wrote {total} samples across demo counts {cfg['demo_counts']} -> {cfg['out_dir']}")


def _read_context_files(cfg: dict, part: str):
    paths = [Path(cfg["out_dir"]) / f"ctx_{part}_m{m}.jsonl" for m in cfg["demo_counts"]]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise DataError(f"missing context data: {missing} (run `build` first)")
    return merge_datasets([read_jsonl(p) for p in paths])


def cmd_train(cfg: dict) -> None:
    train_ds = _read_context_files(cfg, "train")
    valid_ds = _read_context_files(cfg, "valid")
    model_cfg = _model_config(cfg)
    params = init_params(model_cfg, seed=cfg["seed"])
    params, record = train(params, train_ds, valid_ds, model_cfg, _train_config(cfg))
    ckpt = _path(cfg, "checkpoint", "checkpoint.json")
    ad.save_params(
        params,
        ckpt,
        meta={"config": cfg, "model": model_cfg.to_dict(), "seed": cfg["seed"], "best_epoch": record.best_epoch},
    )
    record_path = _path(cfg, "train_record", "train_record.csv")
    record.write_csv(record_path)
    with record_path.open("a") as fh:
        fh.write(f"# config,{json.dumps(cfg, separators=(',', ':'))}\n")
    print(
        f"train: {len(record.train_losses)} epochs, best epoch {record.best_epoch} "
        f"(valid {record.best_valid_loss:.6f}) -> {ckpt}"
    )


def cmd_eval(cfg: dict) -> None:
    ckpt = _path(cfg, "checkpoint", "checkpoint.json")
    if not ckpt.exists():
        raise DataError(f"missing checkpoint: {ckpt} (run `train` first)")
    params, meta = ad.load_params(ckpt)
    model_cfg = _model_config(cfg)
    if meta.get("model") and ModelConfig.from_dict(meta["model"]) != model_cfg:
        raise ConfigError(f"checkpoint model {meta['model']} does not match configured model")
    store = load_store(_path(cfg, "store", "store.json"))
    protocol = EvalProtocol(
        eval_task=TaskKind(cfg["eval_task"]),
        pretrain_tasks=tuple(_tasks(cfg["tasks"])),
        window=_window(cfg),
        demo_count=cfg["demo_count"],
        dataset_ids=(store.dataset,),
        seeds=(cfg["seed"],),
    )
    report = run_unseen_eval(
        protocol,
        {model_cfg.variant: (model_cfg, params)},
        [store],
        seed=cfg["seed"],
        stride=cfg["eval_stride"] or None,
    )
    out = _path(cfg, "report", "eval_report.csv")
    report.write_csv(out)
    with out.open("a") as fh:
        fh.write(f"# config,{json.dumps(cfg, separators=(',', ':'))}\n")
    ratio = improvement_ratio(report)
    print(f"eval: {len(report.rows)} rows, improvement ratio {ratio:.4f} -> {out}")


def cmd_report(cfg: dict) -> None:
    paths = [Path(p) for p in cfg["reports"]] or [_path(cfg, "report", "eval_report.csv")]
    missing = [str(p) for p in paths if not p.exists()]
    if missing:
        raise DataError(f"missing evaluation reports: {missing}")
    merged = EvalReport()
    for p in paths:
        merged.rows.extend(EvalReport.read_csv(p).rows)
    if not merged.rows:
        raise DataError("no rows in the given reports")

    cells: dict[tuple, dict[str, list]] = {}
    for r in merged.rows:
        cells.setdefault((r.backbone, r.task, r.dataset, r.horizon), {}).setdefault(r.method, []).append(r)
    print("backbone,task,dataset,horizon,method,seeds,mean_mse,mean_mae")
    lines = ["backbone,task,dataset,horizon,method,seeds,mean_mse,mean_mae"]
    for key in sorted(cells):
        for method in ("baseline", "ictp"):
            rows = cells[key].get(method, [])
            if not rows:
                continue
            mean_mse = float(np.mean([r.mse for r in rows]))
            mean_mae = float(np.mean([r.mae for r in rows]))
            line = f"{key[0]},{key[1]},{key[2]},{key[3]},{method},{len(rows)},{mean_mse!r},{mean_mae!r}"
            print(line)
            lines.append(line)
    ratio = improvement_ratio(merged)
    print(f"# improvement_ratio,{ratio!r}")
    lines.append(f"# improvement_ratio,{ratio!r}")
    lines.append(f"# config,{json.dumps(cfg, separators=(',', ':'))}")
    out = _path(cfg, "summary", "summary.csv")
    out.write_text("\n".join(lines) + "\n")


COMMANDS = {
    "synth": cmd_synth,
    "ingest": cmd_ingest,
    "build": cmd_build,
    "train": cmd_train,
    "eval": cmd_eval,
    "report": cmd_report,
}


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="tsicl", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)
    for name in COMMANDS:
        p = sub.add_parser(name)
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument(
            "--set",
            dest="overrides",
            action="append",
            default=[],
            metavar="KEY=VALUE",
            help="override a config key (flag > config file > default)",
        )
    args = parser.parse_args(argv)
    try:
        cfg = resolve_config(args.config, args.overrides)
        COMMANDS[args.command](cfg)
    except (ConfigError, GeometryError) as exc:
        print(f"error: 2: {exc}", file=sys.stderr)
        return 2
    except (DataError, FileNotFoundError) as exc:
        print(f"error: 3: {exc}", file=sys.stderr)
        return 3
    except NumericalError as exc:
        print(f"error: 4: {exc}", file=sys.stderr)
        return 4
    return 0


if __name__ == "__main__":
    sys.exit(main())
