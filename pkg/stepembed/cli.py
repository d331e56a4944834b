# ============================================================
# STEPEMBED — Step-wise embeddings for tabular time-series
# LICENSE: AGPL-3.0 — See LICENSE files
# ============================================================
"""
STEPEMBED — Command line
Sottocomandi: generate | train | evaluate | explain | sweep.
Ogni comando è riproducibile da (file di configurazione, seed).

Codici di uscita: 0 ok, 2 configurazione, 3 dati, 4 errore numerico.
"""

import argparse
import configparser
import itertools
import logging
import sys
from dataclasses import dataclass
from pathlib import Path
from typing import Any, Dict, List, Optional, Sequence, Tuple

import numpy as np
import pandas as pd

from stepembed import __version__
from stepembed.config.settings import (
    build_model_config, build_train_config, load_experiment, override, parse_experiment,
)
from stepembed.data.datapipe import (
    DATA_FILE, GROUPS_FILE, LABELS_FILE, SPLITS_FILE, TimeSeriesDataset, load_dataset,
    load_grouping, save_dataset,
)
from stepembed.data.preprocessing import apply_preprocessing
from stepembed.data.synthetic import generate_synthetic, label_prevalence
from stepembed.engine.errors import ConfigError, DataError, StepEmbedError
from stepembed.explain.attention import aggregate_report, emit_report
from stepembed.models.schemas import ExperimentConfig, GroupingScheme, ModelConfig, TrainConfig
from stepembed.storage.checkpoint import Checkpoint, load_checkpoint, save_checkpoint
from stepembed.training.trainer import evaluate, train
from stepembed.utils.log import setup_logger
from stepembed.utils.parallel import run_parallel

logger = logging.getLogger("stepembed.cli")

CHECKPOINT_FILE = "checkpoint.json"
HISTORY_FILE = "history.csv"
METRICS_FILE = "metrics.csv"
SWEEP_FILE = "sweep.csv"
DEFAULT_SEEDS = "0,1,2,3,4"
CSV_FLOAT_FORMAT = "%.10g"


# ============================================================
# RISOLUZIONE DI DATI E MODELLO
# ============================================================

def data_paths(config: ExperimentConfig) -> Dict[str, Path]:
    base = Path(config.data.dir)
    return {
        "data": Path(config.data.data_csv) if config.data.data_csv else base / DATA_FILE,
        "labels": Path(config.data.labels_csv) if config.data.labels_csv else base / LABELS_FILE,
        "splits": Path(config.data.splits_csv) if config.data.splits_csv else base / SPLITS_FILE,
        "groups": Path(config.data.groups_csv) if config.data.groups_csv else base / GROUPS_FILE,
    }


def resolve_grouping(config: ExperimentConfig, feature_names: Sequence[str]) -> Optional[GroupingScheme]:
    """true | interleaved | none | percorso di un groups CSV; 'none' = scenario diretto."""
    choice = config.model.grouping
    if choice == "none":
        return None
    if config.model.encoder == "none":
        raise ConfigError("[model] encoder = none richiede grouping = none")
    if choice == "true":
        path = data_paths(config)["groups"]
    elif choice == "interleaved":
        path = Path(config.data.dir) / "groups_interleaved.csv"
    else:
        path = Path(choice)
    if not path.exists():
        raise ConfigError(f"[model] grouping: file dei gruppi non trovato ({path})")
    return load_grouping(path, feature_names)


def load_experiment_data(config: ExperimentConfig) -> Tuple[TimeSeriesDataset, Optional[GroupingScheme]]:
    paths = data_paths(config)
    dataset = load_dataset(paths["data"], paths["labels"], paths["splits"], None,
                           step_hours=config.data.step_hours, task=config.data.task)
    grouping = resolve_grouping(config, dataset.feature_names)
    dataset.grouping = grouping
    return dataset, grouping


def n_classes_for(dataset: TimeSeriesDataset) -> int:
    values = np.concatenate([s.labels[s.label_mask] for s in dataset.stays])
    return max(2, int(values.max()) + 1) if values.size else 2


def build_configs(config: ExperimentConfig, dataset: TimeSeriesDataset,
                  grouping: Optional[GroupingScheme]) -> Tuple[ModelConfig, TrainConfig]:
    task = config.data.task
    n_classes = n_classes_for(dataset) if task == "multiclass" else 1
    T = max(s.T for s in dataset.stays)
    model_config = build_model_config(config.model, dataset.n_features, task, T, grouping, n_classes)
    return model_config, build_train_config(config.train, task)


@dataclass
class RunOutput:
    checkpoint: Checkpoint
    metrics: Dict[str, float]
    history: pd.DataFrame


def run_experiment(config: ExperimentConfig, split: str = "val") -> RunOutput:
    """Carica i dati, addestra e valuta sullo split richiesto."""
    dataset, grouping = load_experiment_data(config)
    model_config, train_config = build_configs(config, dataset, grouping)
    result = train(model_config, train_config, dataset)
    metrics = evaluate(model_config, result.params, result.dataset, split, train_config.task_kind)
    ckpt = Checkpoint(model_config=model_config, train_config=train_config, params=result.params,
                      scaler=result.dataset.scaler, feature_names=dataset.feature_names,
                      task=dataset.task, step_hours=dataset.step_hours,
                      best_epoch=result.history.best_epoch)
    return RunOutput(checkpoint=ckpt, metrics=metrics, history=result.history.to_frame())


def _with_seed(config: ExperimentConfig, seed: Optional[int]) -> ExperimentConfig:
    return config if seed is None else override(config, "train", seed=seed)


def _output_dir(config: ExperimentConfig, out: Optional[str]) -> Path:
    path = Path(out) if out else Path(config.output.dir)
    path.mkdir(parents=True, exist_ok=True)
    return path


def _load_for_checkpoint(config: ExperimentConfig, ckpt: Checkpoint) -> TimeSeriesDataset:
    paths = data_paths(config)
    dataset = load_dataset(paths["data"], paths["labels"], paths["splits"], None,
                           step_hours=ckpt.step_hours, task=ckpt.task)
    if dataset.feature_names != ckpt.feature_names:
        raise DataError("Le feature dei dati non coincidono con quelle del checkpoint")
    if ckpt.scaler is None:
        raise DataError("Checkpoint senza statistiche di scaling")
    return apply_preprocessing(dataset, ckpt.scaler)


# ============================================================
# COMANDI
# ============================================================

def cmd_generate(args) -> int:
    config = load_experiment(args.config)
    seed = args.seed if args.seed is not None else config.train.seed
    data = config.data
    dataset, _ = generate_synthetic(
        seed=seed, n_stays=data.n_stays, T=data.T, K=data.K, feats_per_group=data.feats_per_group,
        missing_rate=data.missing_rate, task=data.task, min_T=data.min_T,
        signal_groups=data.signal_group_list(), step_hours=data.step_hours)
    out = Path(args.out) if args.out else Path(data.dir)
    paths = save_dataset(dataset, out)
    print(f"\n🧪 Dataset sintetico in {out}")
    print(f"  Soggiorni: {len(dataset.stays)}  Feature: {dataset.n_features}  Gruppi: {data.K}")
    for split in ("train", "val", "test"):
        print(f"  {split:<6} {len(dataset.split(split)):>6}")
    if data.task in ("online_binary", "per_stay_binary"):
        print(f"  Prevalenza: {label_prevalence(dataset):.3f}")
    for name, path in paths.items():
        print(f"  {name:<18} {path}")
    return 0


def cmd_train(args) -> int:
    config = _with_seed(load_experiment(args.config), args.seed)
    out = _output_dir(config, args.out)
    run = run_experiment(config, split="val")
    save_checkpoint(run.checkpoint, out / CHECKPOINT_FILE)
    run.history.to_csv(out / HISTORY_FILE, index=False, float_format=CSV_FLOAT_FORMAT)
    print(f"\n✅ Training completato — epoca migliore {run.checkpoint.best_epoch}")
    for name, value in run.metrics.items():
        print(f"  val {name:<18} {value:.4f}")
    print(f"  Checkpoint: {out / CHECKPOINT_FILE}")
    return 0


def cmd_evaluate(args) -> int:
    config = load_experiment(args.config)
    out = _output_dir(config, args.out)
    ckpt = load_checkpoint(args.checkpoint or out / CHECKPOINT_FILE)
    dataset = _load_for_checkpoint(config, ckpt)
    metrics = evaluate(ckpt.model_config, ckpt.params, dataset, args.split, ckpt.task)
    frame = pd.DataFrame({"metric": list(metrics), "value": list(metrics.values())})
    frame["seed"] = ckpt.train_config.seed
    frame["split"] = args.split
    frame.to_csv(out / METRICS_FILE, index=False, float_format=CSV_FLOAT_FORMAT)
    print(f"\n🧾 Metriche ({args.split}):")
    for name, value in metrics.items():
        print(f"  {name:<18} {value:.4f}")
    return 0


def cmd_explain(args) -> int:
    config = load_experiment(args.config)
    out = _output_dir(config, args.out)
    ckpt = load_checkpoint(args.checkpoint or out / CHECKPOINT_FILE)
    dataset = _load_for_checkpoint(config, ckpt)
    stays = [s for s in args.stays.split(",") if s] if args.stays else []
    report = aggregate_report(ckpt.model_config, ckpt.params, dataset, args.split, stays,
                              layer=args.layer, heads=args.heads, checkpoint_id=ckpt.checkpoint_id)
    files = emit_report(report, out / "explain")
    print(f"\n🔍 Attenzione fra gruppi ({args.split}):")
    for name, weight in zip(report.group_names, report.between):
        print(f"  {name:<18} {weight:.4f}")
    print(f"  [CLS]              {report.between_cls:.4f}")
    print(f"  File scritti: {len(files)} in {out / 'explain'}")
    return 0


# === SWEEP ===

def parse_grid(text: str, source: str = "<grid>") -> List[Dict[Tuple[str, str], str]]:
    """Griglia INI con valori separati da virgola → prodotto cartesiano delle impostazioni."""
    parser = configparser.ConfigParser(interpolation=None)
    parser.optionxform = str
    try:
        parser.read_string(text, source=source)
    except configparser.Error as e:
        raise ConfigError(f"{source}: griglia non valida ({e})") from None
    axes: List[Tuple[Tuple[str, str], List[str]]] = []
    for section in parser.sections():
        for key, raw in parser.items(section):
            values = [v.strip() for v in raw.split(",") if v.strip()]
            if not values:
                raise ConfigError(f"{source}: [{section}] {key} senza valori")
            axes.append(((section, key), values))
    if not axes:
        return [{}]
    keys = [k for k, _ in axes]
    return [dict(zip(keys, combo)) for combo in itertools.product(*(v for _, v in axes))]


def apply_setting(config_text: str, setting: Dict[Tuple[str, str], str], seed: int) -> ExperimentConfig:
    parser = configparser.ConfigParser(interpolation=None, inline_comment_prefixes=("#", ";"))
    parser.optionxform = str
    parser.read_string(config_text)
    for (section, key), value in setting.items():
        if not parser.has_section(section):
            parser.add_section(section)
        parser.set(section, key, value)
    if not parser.has_section("train"):
        parser.add_section("train")
    parser.set("train", "seed", str(seed))
    lines = []
    for section in parser.sections():
        lines.append(f"[{section}]")
        lines.extend(f"{k} = {v}" for k, v in parser.items(section))
    return parse_experiment("\n".join(lines), source="<sweep>")


def _sweep_task(payload: Tuple[str, Dict[Tuple[str, str], str], int, str]) -> Dict[str, float]:
    config_text, setting, seed, split = payload
    return run_experiment(apply_setting(config_text, setting, seed), split=split).metrics


def run_sweep(config_text: str, grid: List[Dict[Tuple[str, str], str]], seeds: Sequence[int],
              split: str = "test", parallel: bool = False) -> pd.DataFrame:
    """Una riga per impostazione: media e deviazione standard (ddof=0) di ogni metrica sui seed."""
    tasks = [(config_text, setting, seed, split) for setting in grid for seed in seeds]
    results = run_parallel(_sweep_task, tasks, parallel=parallel)
    rows = []
    for i, setting in enumerate(grid):
        runs = results[i * len(seeds):(i + 1) * len(seeds)]
        row: Dict[str, Any] = {f"{s}.{k}": v for (s, k), v in setting.items()}
        row["n_runs"] = len(runs)
        for metric in runs[0]:
            values = np.array([r[metric] for r in runs], dtype=np.float64)
            row[f"{metric}_mean"] = float(values.mean())
            row[f"{metric}_std"] = float(values.std(ddof=0))
        rows.append(row)
    return pd.DataFrame(rows)


def parse_seeds(raw: str) -> List[int]:
    try:
        seeds = [int(s) for s in raw.split(",") if s.strip()]
    except ValueError:
        raise ConfigError(f"--seeds non valido: {raw!r}") from None
    if not seeds:
        raise ConfigError("--seeds vuoto")
    return seeds


def cmd_sweep(args) -> int:
    config_path = Path(args.config)
    if not config_path.exists():
        raise ConfigError(f"File di configurazione non trovato: {config_path}")
    config_text = config_path.read_text(encoding="utf-8")
    base = parse_experiment(config_text, source=str(config_path))
    grid_path = Path(args.grid)
    if not grid_path.exists():
        raise ConfigError(f"Griglia non trovata: {grid_path}")
    grid = parse_grid(grid_path.read_text(encoding="utf-8"), source=str(grid_path))
    # ogni impostazione deve essere valida prima di lanciare qualunque run
    for setting in grid:
        apply_setting(config_text, setting, 0)
    seeds = [args.seed] if args.seed is not None else parse_seeds(args.seeds)
    out = _output_dir(base, args.out)
    frame = run_sweep(config_text, grid, seeds, split=args.split, parallel=args.parallel)
    frame.to_csv(out / SWEEP_FILE, index=False, float_format=CSV_FLOAT_FORMAT)
    print(f"\n📊 Sweep: {len(grid)} impostazioni × {len(seeds)} seed → {out / SWEEP_FILE}")
    with pd.option_context("display.width", 160, "display.max_columns", 20):
        print(frame.to_string(index=False))
    return 0


# ============================================================
# MAIN
# ============================================================

def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="stepembed",
        description="STEPEMBED — Step-wise embeddings per time-series tabellari",
        formatter_class=argparse.RawDescriptionHelpFormatter,
        epilog="""
Esempi:
  python3 -m stepembed generate --config experiments/smoke.ini
  python3 -m stepembed train --config experiments/smoke.ini --seed 1
  python3 -m stepembed evaluate --config experiments/smoke.ini --split test
  python3 -m stepembed explain --config experiments/smoke.ini --stays s00001,s00002
  python3 -m stepembed sweep --config experiments/smoke.ini --grid experiments/grid.ini --parallel
        """,
    )
    parser.add_argument("--version", action="version", version=f"stepembed {__version__}")
    subparsers = parser.add_subparsers(dest="command", help="Comando")

    def common(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", required=True, help="File di esperimento INI")
        p.add_argument("--seed", type=int, default=None, help="Seed (default: [train] seed)")
        p.add_argument("--out", default=None, help="Directory di output (default: [output] dir)")

    p_generate = subparsers.add_parser("generate", help="Genera il dataset sintetico")
    common(p_generate)
    p_generate.set_defaults(func=cmd_generate)

    p_train = subparsers.add_parser("train", help="Addestra e salva checkpoint + storia")
    common(p_train)
    p_train.set_defaults(func=cmd_train)

    p_eval = subparsers.add_parser("evaluate", help="Metriche di un checkpoint su uno split")
    common(p_eval)
    p_eval.add_argument("--checkpoint", default=None, help="Checkpoint (default: <out>/checkpoint.json)")
    p_eval.add_argument("--split", default="test", choices=["train", "val", "test"])
    p_eval.set_defaults(func=cmd_evaluate)

    p_explain = subparsers.add_parser("explain", help="Report di attenzione (CSV + SVG)")
    common(p_explain)
    p_explain.add_argument("--checkpoint", default=None)
    p_explain.add_argument("--split", default="test", choices=["train", "val", "test"])
    p_explain.add_argument("--stays", default="", help="stay_id separati da virgola per over_time")
    p_explain.add_argument("--layer", default="last", choices=["last", "mean"])
    p_explain.add_argument("--heads", default="mean", choices=["mean", "max"])
    p_explain.set_defaults(func=cmd_explain)

    p_sweep = subparsers.add_parser("sweep", help="Griglia di configurazioni × seed")
    common(p_sweep)
    p_sweep.add_argument("--grid", required=True, help="Griglia INI (valori separati da virgola)")
    p_sweep.add_argument("--seeds", default=DEFAULT_SEEDS, help=f"Seed (default: {DEFAULT_SEEDS})")
    p_sweep.add_argument("--split", default="test", choices=["train", "val", "test"])
    p_sweep.add_argument("--parallel", action="store_true", help="Impostazioni in processi paralleli")
    p_sweep.set_defaults(func=cmd_sweep)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    if not args.command:
        parser.print_help()
        return 0

    setup_logger("stepembed")
    logger.info(f"STEPEMBED {__version__} — comando: {args.command}")
    try:
        return args.func(args)
    except StepEmbedError as e:
        logger.error(f"❌ {type(e).__name__}: {e}")
        print(f"Errore ({type(e).__name__}): {e}", file=sys.stderr)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
