"""Command-line interface: train, eval, forecast, ablate, stats, synth.

Every command is deterministic given (config, seed, input files) and
writes a manifest echoing the effective configuration plus content hashes
of its inputs. Exit codes: 0 success, 2 usage/config error, 3 numerical
failure.
"""

from __future__ import annotations

import argparse
import hashlib
import json
import sys
from pathlib import Path

import numpy as np

from .data import (
    CsvSchema,
    ParseError,
    SchemaError,
    SYNTH_PRESETS,
    Scaler,
    SeriesDataset,
    SynthSpec,
    fit_apply_scaling,
    generate_synth,
    load_csv,
    load_uea,
    save_csv,
)
from .metrics import MetricError, ResultsMatrix, leaderboard_report, rmse
from .model import (
    CheckpointError,
    ConfigError,
    ModelConfig,
    PhmmModel,
    forecast_rollout,
    load_checkpoint,
    save_checkpoint,
)
from .tensor import ContractError, DomainError
from .training import (
    NumericalError,
    TrainConfig,
    classification_accuracy,
    train,
)

EXIT_OK = 0
EXIT_USAGE = 2
EXIT_NUMERICAL = 3

MODEL_DEFAULTS = {
    "k": 2, "m": 2, "hidden_dim": 12, "attn_dim": 12,
    "decoder_hidden_dim": 12, "head": "classifier",
    "stride_mode": "geometric",
}
TRAIN_DEFAULTS = {
    "epochs": 20, "lr": 1e-3, "beta": 1.0, "batch_size": 32,
    "grad_clip": 5.0, "seed": 0, "kl_warmup": False,
}
DATA_DEFAULTS = {
    "format": "csv", "context": 160, "horizon": 40,
    "id_col": "id", "time_col": "t", "value_cols": None,
    "label_col": "label", "split_col": "split",
}


class UsageError(ValueError):
    pass


def _sha256(path: Path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(65536), b""):
            h.update(chunk)
    return h.hexdigest()


def _effective(args, config_file_values: dict, defaults: dict) -> dict:
    """Flag > config-file value > built-in default."""
    out = {}
    for key, default in defaults.items():
        flag = getattr(args, key, None)
        if flag is not None:
            out[key] = flag
        elif key in config_file_values:
            out[key] = config_file_values[key]
        else:
            out[key] = default
    return out


def _load_config_file(args) -> dict:
    path = getattr(args, "config", None)
    if not path:
        return {}
    path = Path(path)
    if not path.exists():
        raise UsageError(f"config file not found: {path}")
    with open(path, encoding="utf-8") as fh:
        loaded = json.load(fh)
    if not isinstance(loaded, dict):
        raise UsageError("config file must hold a JSON object")
    return loaded


def _prepare_out_dir(out) -> Path:
    out_dir = Path(out)
    out_dir.mkdir(parents=True, exist_ok=True)
    return out_dir


def _write_json(path: Path, payload):
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, sort_keys=True, indent=1)
        fh.write("\n")


def _write_manifest(out_dir: Path, command: str, config: dict, inputs: list):
    manifest = {
        "command": command,
        "config": config,
        "inputs": {str(p): _sha256(Path(p)) for p in inputs},
    }
    _write_json(out_dir / "manifest.json", manifest)


def _require_file(path) -> Path:
    p = Path(path)
    if not p.exists():
        raise UsageError(f"input file not found: {p}")
    return p


def _load_dataset(args, cfg: dict, task: str) -> SeriesDataset:
    path = _require_file(args.data)
    if cfg["format"] == "uea":
        if task == "forecasting":
            raise UsageError("UEA sequence files carry classification data")
        return load_uea(path)
    if cfg["format"] == "csv":
        d = cfg
        value_cols = d["value_cols"]
        if value_cols is None:
            # probe the header for v0, v1, ... value columns
            with open(path, encoding="utf-8") as fh:
                header = fh.readline().strip().split(",")
            value_cols = [c for c in header if c.startswith("v") and c[1:].isdigit()]
            if not value_cols:
                raise SchemaError(f"{path}: cannot infer value columns; "
                                  "pass --value-cols")
        schema = CsvSchema(
            id_col=d["id_col"], time_col=d["time_col"], value_cols=value_cols,
            label_col=d["label_col"] if task == "classification" else None,
            split_col=d["split_col"])
        horizon = d["horizon"] if task == "forecasting" else None
        return load_csv(path, schema, task=task, horizon=horizon)
    raise UsageError(f"unknown format {cfg['format']!r}")


def _task_for_head(head: str) -> str:
    return "classification" if head == "classifier" else "forecasting"


def _build_model(model_cfg: dict, ds: SeriesDataset, seed: int) -> PhmmModel:
    head = model_cfg["head"]
    kwargs = dict(
        k=model_cfg["k"], m=model_cfg["m"], input_dim=ds.input_dim,
        hidden_dim=model_cfg["hidden_dim"], attn_dim=model_cfg["attn_dim"],
        decoder_hidden_dim=model_cfg["decoder_hidden_dim"],
        head=head, stride_mode=model_cfg["stride_mode"])
    if head == "classifier":
        kwargs["num_classes"] = ds.num_classes
    else:
        kwargs["output_dim"] = int(np.asarray(ds.train_samples[0].label).size)
    return PhmmModel(ModelConfig(**kwargs), seed=seed)


def _apply_scaler(ds: SeriesDataset, scaler_dict: dict | None):
    if scaler_dict is None:
        return ds
    scaler = Scaler.from_dict(scaler_dict)
    for s in ds.samples:
        s.series = scaler.transform(s.series)
    ds.scaler = scaler
    return ds


# -- commands -----------------------------------------------------------------

def cmd_train(args) -> int:
    file_cfg = _load_config_file(args)
    model_cfg = _effective(args, file_cfg, MODEL_DEFAULTS)
    train_cfg = _effective(args, file_cfg, TRAIN_DEFAULTS)
    data_cfg = _effective(args, file_cfg, DATA_DEFAULTS)
    task = _task_for_head(model_cfg["head"])
    ds = _load_dataset(args, data_cfg, task)
    fit_apply_scaling(ds)

    model = _build_model(model_cfg, ds, seed=train_cfg["seed"])
    cfg = TrainConfig(
        learning_rate=train_cfg["lr"], batch_size=train_cfg["batch_size"],
        epochs=train_cfg["epochs"], kl_weight=train_cfg["beta"],
        grad_clip_norm=train_cfg["grad_clip"], seed=train_cfg["seed"],
        kl_warmup=train_cfg["kl_warmup"])

    out_dir = _prepare_out_dir(args.out)
    log_path = out_dir / "train_log.jsonl"
    with open(log_path, "w", encoding="utf-8") as fh:
        def hook(record):
            fh.write(json.dumps(record, sort_keys=True) + "\n")
            print(f"epoch {record['epoch']}: elbo={record['elbo']:.4f} "
                  f"train_metric={record['train_metric']:.4f}")
        train(model, ds, cfg, log_hook=hook)

    save_checkpoint(out_dir / "checkpoint.json", model,
                    scaler=ds.scaler.to_dict() if ds.scaler else None,
                    seed=train_cfg["seed"])
    _write_manifest(out_dir, "train",
                    {"model": model_cfg, "train": train_cfg, "data": data_cfg},
                    [args.data])
    print(f"checkpoint written to {out_dir / 'checkpoint.json'}")
    return EXIT_OK


def _forecast_eval(model, ds: SeriesDataset, scaler: Scaler | None,
                   split: str, horizon: int):
    """Rollout RMSE in original units, with the last-value persistence
    baseline as the ratio denominator."""
    samples = ds.split(split)
    if not samples:
        raise UsageError(f"no samples in split {split!r}")
    preds, persists, trues = [], [], []
    for s in samples:
        scaled_forecast = forecast_rollout(model, s.series, horizon)
        raw_forecast = (scaler.inverse(scaled_forecast)
                        if scaler is not None else scaled_forecast)
        raw_context_last = (scaler.inverse(s.series[-1])
                            if scaler is not None else s.series[-1])
        preds.append(raw_forecast)
        persists.append(np.tile(raw_context_last, (horizon, 1)))
        trues.append(np.asarray(s.label))
    pred_arr = np.stack(preds)
    true_arr = np.stack(trues)
    model_rmse = rmse(pred_arr, true_arr)
    persistence_rmse = rmse(np.stack(persists), true_arr)
    return {
        "rmse": model_rmse,
        "persistence_rmse": persistence_rmse,
        "ratio": model_rmse / persistence_rmse if persistence_rmse > 0 else None,
        "n_samples": len(samples),
    }, pred_arr


def cmd_eval(args) -> int:
    ckpt_path = _require_file(args.checkpoint)
    model, scaler_dict, _ = load_checkpoint(ckpt_path)
    file_cfg = _load_config_file(args)
    data_cfg = _effective(args, file_cfg, DATA_DEFAULTS)
    task = _task_for_head(model.config.head)
    ds = _load_dataset(args, data_cfg, task)
    if ds.input_dim != model.config.input_dim:
        raise CheckpointError(
            f"checkpoint expects {model.config.input_dim}-dim series, "
            f"data has {ds.input_dim}")
    scaler = Scaler.from_dict(scaler_dict) if scaler_dict else None
    split = args.split or "test"
    out_dir = _prepare_out_dir(args.out)

    if task == "classification":
        _apply_scaler(ds, scaler_dict)
        samples = ds.split(split)
        if not samples:
            raise UsageError(f"no samples in split {split!r}")
        acc = classification_accuracy(model, samples)
        report = {"task": "classification", "split": split,
                  "accuracy": acc, "n_samples": len(samples)}
        print(f"accuracy[{split}] = {acc:.4f}")
    else:
        samples = ds.split(split)
        if not samples:
            raise UsageError(f"no samples in split {split!r}")
        horizon = int(np.asarray(samples[0].label).shape[0])
        _apply_scaler(ds, scaler_dict)  # scales series only; targets stay raw
        report, _ = _forecast_eval(model, ds, scaler, split, horizon)
        report.update({"task": "forecasting", "split": split})
        print(f"rmse[{split}] = {report['rmse']:.4f} "
              f"(ratio vs persistence {report['ratio']:.4f})")

    _write_json(out_dir / "eval_report.json", report)
    _write_manifest(out_dir, "eval", {"data": data_cfg, "split": split},
                    [args.data, args.checkpoint])
    return EXIT_OK


def cmd_forecast(args) -> int:
    ckpt_path = _require_file(args.checkpoint)
    model, scaler_dict, _ = load_checkpoint(ckpt_path)
    if model.config.head != "predictor":
        raise UsageError("forecast needs a checkpoint trained with --head predictor")
    file_cfg = _load_config_file(args)
    data_cfg = _effective(args, file_cfg, DATA_DEFAULTS)
    ds = _load_dataset(args, data_cfg, "forecasting")
    scaler = Scaler.from_dict(scaler_dict) if scaler_dict else None
    split = args.split or "test"
    _apply_scaler(ds, scaler_dict)  # scales series only; targets stay raw
    out_dir = _prepare_out_dir(args.out)
    report, preds = _forecast_eval(model, ds, scaler, split, data_cfg["horizon"])

    with open(out_dir / "forecasts.csv", "w", encoding="utf-8") as fh:
        dims = preds.shape[-1]
        fh.write("id,step," + ",".join(f"v{j}" for j in range(dims)) + "\n")
        for i in range(preds.shape[0]):
            for t in range(preds.shape[1]):
                cells = ",".join(repr(float(v)) for v in preds[i, t])
                fh.write(f"s{i:06d},{t},{cells}\n")
    _write_json(out_dir / "forecast_report.json", report)
    _write_manifest(out_dir, "forecast", {"data": data_cfg, "split": split},
                    [args.data, args.checkpoint])
    print(f"rmse[{split}] = {report['rmse']:.4f} "
          f"(ratio vs persistence {report['ratio']:.4f})")
    return EXIT_OK


def _parse_int_list(text: str) -> list[int]:
    try:
        values = [int(v) for v in text.split(",") if v.strip()]
    except ValueError:
        raise UsageError(f"expected a comma-separated integer list, got {text!r}")
    if not values or min(values) < 1:
        raise UsageError(f"list entries must be positive: {text!r}")
    return values


def cmd_ablate(args) -> int:
    file_cfg = _load_config_file(args)
    model_cfg = _effective(args, file_cfg, MODEL_DEFAULTS)
    train_cfg = _effective(args, file_cfg, TRAIN_DEFAULTS)
    data_cfg = _effective(args, file_cfg, DATA_DEFAULTS)
    k_list = _parse_int_list(args.k_list)
    m_list = _parse_int_list(args.m_list)
    task = _task_for_head(model_cfg["head"])
    out_dir = _prepare_out_dir(args.out)

    grid = np.zeros((len(m_list), len(k_list)))
    cell_index = 0
    for mi, m in enumerate(m_list):
        for ki, k in enumerate(k_list):
            ds = _load_dataset(args, data_cfg, task)
            fit_apply_scaling(ds)
            cell_cfg = dict(model_cfg, k=k, m=m)
            seed = train_cfg["seed"] + cell_index
            model = _build_model(cell_cfg, ds, seed=seed)
            cfg = TrainConfig(
                learning_rate=train_cfg["lr"], batch_size=train_cfg["batch_size"],
                epochs=train_cfg["epochs"], kl_weight=train_cfg["beta"],
                grad_clip_norm=train_cfg["grad_clip"], seed=seed,
                kl_warmup=train_cfg["kl_warmup"])
            train(model, ds, cfg)
            if task == "classification":
                samples = ds.test_samples or ds.train_samples
                metric = classification_accuracy(model, samples)
            else:
                # undo target scaling: rollout evaluation reports raw units
                if ds.scaler is not None:
                    for s in ds.samples:
                        s.label = ds.scaler.inverse(np.asarray(s.label))
                report, _ = _forecast_eval(
                    model, ds, ds.scaler, "test" if ds.test_samples else "train",
                    data_cfg["horizon"])
                metric = report["ratio"]
            grid[mi, ki] = metric
            print(f"k={k} m={m} -> {metric:.4f}")
            cell_index += 1

    with open(out_dir / "ablation_grid.csv", "w", encoding="utf-8") as fh:
        fh.write("m\\k," + ",".join(f"k={k}" for k in k_list) + "\n")
        for mi, m in enumerate(m_list):
            cells = ",".join(repr(float(v)) for v in grid[mi])
            fh.write(f"m={m},{cells}\n")
    _write_json(out_dir / "ablation_report.json", {
        "k_list": k_list, "m_list": m_list,
        "metric": "accuracy" if task == "classification" else "rmse_ratio",
        "grid": [[float(v) for v in row] for row in grid],
    })
    _write_manifest(out_dir, "ablate",
                    {"model": model_cfg, "train": train_cfg, "data": data_cfg,
                     "k_list": k_list, "m_list": m_list},
                    [args.data])
    return EXIT_OK


def cmd_stats(args) -> int:
    path = _require_file(args.results)
    grid = ResultsMatrix.from_csv(path)
    focus = args.focus or grid.methods[-1]
    report = leaderboard_report(grid, focus=focus)
    out_dir = _prepare_out_dir(args.out)
    _write_json(out_dir / "stats_report.json", report.to_dict())

    with open(out_dir / "rank_summary.csv", "w", encoding="utf-8") as fh:
        fh.write("method,avg_rank,avg_rank_dense,wins_ties,wilcoxon_p_vs_" +
                 focus.replace(",", "_") + "\n")
        for m in grid.methods:
            p = report.wilcoxon_p.get(m)
            fh.write(",".join([
                m, repr(report.avg_rank[m]), repr(report.avg_rank_dense[m]),
                str(report.wins_ties[m]),
                "N/A" if p is None else repr(p)]) + "\n")
    _write_manifest(out_dir, "stats", {"focus": focus}, [args.results])

    print(f"avg rank ({focus}): mid-rank {report.avg_rank[focus]:.3f}, "
          f"dense {report.avg_rank_dense[focus]:.3f}; "
          f"wins/ties {report.wins_ties[focus]}")
    if report.friedman:
        print(f"friedman chi2={report.friedman[0]:.4f} p={report.friedman[1]:.4g}")
    return EXIT_OK


def cmd_synth(args) -> int:
    if bool(args.spec) == bool(args.preset):
        raise UsageError("pass exactly one of --spec or --preset")
    if args.spec:
        spec = SynthSpec.load(_require_file(args.spec))
        if args.seed is not None:
            spec.seed = args.seed
        inputs = [args.spec]
    else:
        if args.preset not in SYNTH_PRESETS:
            raise UsageError(f"unknown preset {args.preset!r}; "
                             f"available: {sorted(SYNTH_PRESETS)}")
        spec = SYNTH_PRESETS[args.preset](seed=args.seed or 0)
        inputs = []
    ds, regimes = generate_synth(spec)
    out_dir = _prepare_out_dir(args.out)
    save_csv(out_dir / "data.csv", ds)
    with open(out_dir / "regimes.csv", "w", encoding="utf-8") as fh:
        fh.write("id," + ",".join(f"t{t}" for t in range(regimes.shape[1])) + "\n")
        for i in range(regimes.shape[0]):
            fh.write(f"s{i:06d}," + ",".join(str(int(r)) for r in regimes[i]) + "\n")
    spec.save(out_dir / "spec.json")
    _write_manifest(out_dir, "synth", {"spec": spec.to_dict()}, inputs)
    print(f"{regimes.shape[0]} series written to {out_dir / 'data.csv'}")
    return EXIT_OK


# -- argument parsing -----------------------------------------------------------

def _add_data_flags(p: argparse.ArgumentParser):
    p.add_argument("--data", required=True, help="dataset file")
    p.add_argument("--format", choices=["uea", "csv"], default=None)
    p.add_argument("--id-col", dest="id_col", default=None)
    p.add_argument("--time-col", dest="time_col", default=None)
    p.add_argument("--value-cols", dest="value_cols", default=None,
                   type=lambda s: s.split(","))
    p.add_argument("--label-col", dest="label_col", default=None)
    p.add_argument("--split-col", dest="split_col", default=None)
    p.add_argument("--context", type=int, default=None)
    p.add_argument("--horizon", type=int, default=None)


def _add_model_flags(p: argparse.ArgumentParser):
    p.add_argument("--k", type=int, default=None)
    p.add_argument("--m", type=int, default=None)
    p.add_argument("--hidden-dim", dest="hidden_dim", type=int, default=None)
    p.add_argument("--attn-dim", dest="attn_dim", type=int, default=None)
    p.add_argument("--decoder-hidden-dim", dest="decoder_hidden_dim",
                   type=int, default=None)
    p.add_argument("--head", choices=["classifier", "predictor"], default=None)
    p.add_argument("--stride-mode", dest="stride_mode",
                   choices=["geometric", "flat"], default=None)


def _add_train_flags(p: argparse.ArgumentParser):
    p.add_argument("--epochs", type=int, default=None)
    p.add_argument("--lr", type=float, default=None)
    p.add_argument("--beta", type=float, default=None)
    p.add_argument("--batch-size", dest="batch_size", type=int, default=None)
    p.add_argument("--grad-clip", dest="grad_clip", type=float, default=None)
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--kl-warmup", dest="kl_warmup", action="store_const",
                   const=True, default=None)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="phmm",
        description="Pyramidal latent-chain model for multivariate time series")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train a model and write a checkpoint")
    _add_data_flags(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--config", default=None, help="JSON config file")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("eval", help="evaluate a checkpoint on a dataset split")
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "test"], default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_eval)

    p = sub.add_parser("forecast", help="multi-step rollout past each context")
    _add_data_flags(p)
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--split", choices=["train", "test"], default=None)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_forecast)

    p = sub.add_parser("ablate", help="train a (k, m) grid and report metrics")
    _add_data_flags(p)
    _add_model_flags(p)
    _add_train_flags(p)
    p.add_argument("--k-list", dest="k_list", required=True)
    p.add_argument("--m-list", dest="m_list", required=True)
    p.add_argument("--config", default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_ablate)

    p = sub.add_parser("stats", help="leaderboard aggregates and significance tests")
    p.add_argument("--results", required=True, help="methods-by-datasets CSV grid")
    p.add_argument("--focus", default=None,
                   help="method compared against the rest (default: last column)")
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_stats)

    p = sub.add_parser("synth", help="generate a synthetic regime dataset")
    p.add_argument("--spec", default=None, help="SynthSpec JSON file")
    p.add_argument("--preset", default=None,
                   help=f"one of {sorted(SYNTH_PRESETS)}")
    p.add_argument("--seed", type=int, default=None)
    p.add_argument("--out", required=True)
    p.set_defaults(func=cmd_synth)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return EXIT_USAGE if e.code not in (0, None) else 0
    try:
        return args.func(args)
    except (UsageError, ParseError, SchemaError, MetricError, ConfigError,
            CheckpointError, ContractError, FileNotFoundError) as e:
        print(f"error: {e}", file=sys.stderr)
        return EXIT_USAGE
    except (NumericalError, DomainError) as e:
        print(f"numerical failure: {e}", file=sys.stderr)
        return EXIT_NUMERICAL


if __name__ == "__main__":
    sys.exit(main())
