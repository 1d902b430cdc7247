# services/experiment_service.py
"""
実験ランナー

- 設定ファイル（JSON / key=value）の読み込みと検証
- (H, V, 雑音, ユーザー数) のスイープ展開と seed ごとの学習ジョブ実行
- メトリクス CSV・summary.json・sweep_report.csv の出力
"""
import csv
import itertools
import json
import logging
import math
from concurrent.futures import ProcessPoolExecutor
from datetime import datetime
from pathlib import Path
from typing import Any, Dict, List, Optional, Tuple, Union

import numpy as np
from dotenv import dotenv_values
from pydantic import ValidationError

from config.settings import settings
from models.exceptions import ConfigError
from models.schemas import CriticConfig, EpisodeMetrics, ExperimentSpec, TrainingReport
from services.critic_service import flop_breakdown, matched_mlp_widths, reacritic_parameter_count
from services.drl_service import Environment, train
from services.hetnet_env_service import HetNetEnvService
from services.pointmass_env_service import PointMassEnvService

logger = logging.getLogger(__name__)

METRICS_COLUMNS = ("episode", "return", "critic_loss_mean", "q_mean", "steps", "wall_ms")
SWEEP_COLUMNS = ("H", "V", "noise_sigma", "num_users", "final_window_mean_return")


# ---------------------------------------------------------------------------
# 設定ファイル
# ---------------------------------------------------------------------------

def _decode_value(raw: Optional[str]) -> Any:
    if raw is None:
        return None
    try:
        return json.loads(raw)
    except json.JSONDecodeError:
        return raw


def _key_lines(text: str) -> Dict[str, int]:
    """key=value ファイルのキー → 行番号（不正な行は ConfigError）"""
    lines: Dict[str, int] = {}
    for number, line in enumerate(text.splitlines(), start=1):
        stripped = line.strip()
        if not stripped or stripped.startswith("#"):
            continue
        if stripped.startswith("export "):
            stripped = stripped[len("export "):].lstrip()
        key, sep, _ = stripped.partition("=")
        key = key.strip()
        if not sep or not key:
            raise ConfigError(f"line {number}: expected key=value, got {line!r}")
        lines[key] = number
    return lines


def _nest(flat: Dict[str, Any], lines: Dict[str, int]) -> Dict[str, Any]:
    nested: Dict[str, Any] = {}
    for key, value in flat.items():
        node = nested
        parts = key.split(".")
        for part in parts[:-1]:
            child = node.setdefault(part, {})
            if not isinstance(child, dict):
                raise ConfigError(f"line {lines.get(key, '?')}: key {key!r} conflicts with scalar {part!r}")
            node = child
        if isinstance(node.get(parts[-1]), dict):
            raise ConfigError(f"line {lines.get(key, '?')}: key {key!r} conflicts with a section")
        node[parts[-1]] = value
    return nested


def _validation_message(error: ValidationError, lines: Dict[str, int]) -> str:
    messages = []
    for item in error.errors():
        key = ".".join(str(part) for part in item["loc"])
        # 親キーで行番号を探す（list の要素番号などは行に対応しない）
        line = None
        candidate = key
        while candidate and line is None:
            line = lines.get(candidate)
            candidate = candidate.rpartition(".")[0]
        prefix = f"line {line}: " if line is not None else ""
        value = item.get("input")
        messages.append(f"{prefix}{key}: {item['msg']} (got {value!r})")
    return "; ".join(messages)


def parse_experiment_spec(data: Dict[str, Any], lines: Optional[Dict[str, int]] = None) -> ExperimentSpec:
    try:
        return ExperimentSpec.model_validate(data)
    except ValidationError as e:
        raise ConfigError(f"invalid experiment config: {_validation_message(e, lines or {})}") from e


def load_experiment_spec(path: Union[str, Path]) -> ExperimentSpec:
    """JSON もしくはドット区切りキーの key=value ファイルから ExperimentSpec を読む"""
    path = Path(path)
    if not path.is_file():
        raise ConfigError(f"config file not found: {path}")
    text = path.read_text(encoding="utf-8")

    if path.suffix.lower() == ".json":
        try:
            data = json.loads(text)
        except json.JSONDecodeError as e:
            raise ConfigError(f"{path}: line {e.lineno}: {e.msg}") from e
        if not isinstance(data, dict):
            raise ConfigError(f"{path}: top level must be an object")
        spec = parse_experiment_spec(data)
    else:
        lines = _key_lines(text)
        flat = {key: _decode_value(raw) for key, raw in dotenv_values(path).items()}
        spec = parse_experiment_spec(_nest(flat, lines), lines)

    logger.info(f"設定を読み込みました: {path} (name={spec.name}, env={spec.env})")
    return spec


def apply_overrides(spec: ExperimentSpec, seed: Optional[int] = None,
                    output_dir: Optional[str] = None) -> ExperimentSpec:
    update: Dict[str, Any] = {}
    if seed is not None:
        update["seeds"] = [seed]
    if output_dir is not None:
        update["output_dir"] = output_dir
    return spec.model_copy(update=update) if update else spec


# ---------------------------------------------------------------------------
# スイープ展開
# ---------------------------------------------------------------------------

def _format_axis(value: float) -> str:
    return format(value, "g")


def expand_sweep(spec: ExperimentSpec) -> List[Tuple[str, ExperimentSpec]]:
    """スイープ軸の直積を (run 名, 個別の実験仕様) の並びに展開する"""
    sweep = spec.sweep
    base = spec.critic.reacritic
    if not any([sweep.H, sweep.V, sweep.noise_sigma, sweep.num_users]):
        return [(spec.name, spec)]

    runs = []
    for H, V, sigma, users in itertools.product(
        sweep.H or [base.H],
        sweep.V or [base.V],
        sweep.noise_sigma or [base.noise_sigma],
        sweep.num_users or [spec.hetnet.num_users],
    ):
        name = f"h{H}_v{V}"
        if sweep.noise_sigma:
            name += f"_noise{_format_axis(sigma)}"
        if sweep.num_users:
            name += f"_m{users}"
        reacritic = base.model_copy(update={"H": H, "V": V, "noise_sigma": sigma})
        critic = spec.critic.model_copy(update={"reacritic": reacritic})
        hetnet = spec.hetnet.model_copy(update={"num_users": users})
        runs.append((name, spec.model_copy(update={"critic": critic, "hetnet": hetnet})))
    return runs


def build_env(spec: ExperimentSpec, seed: Optional[int] = None) -> Environment:
    """実行シードから環境を作る（hetnet.seed があればそちらで選好を固定）"""
    if spec.env == "hetnet":
        return HetNetEnvService(spec.hetnet, seed=seed)
    return PointMassEnvService(spec.pointmass)


def env_dims(spec: ExperimentSpec) -> Tuple[int, int]:
    if spec.env == "hetnet":
        return spec.hetnet.observation_dim, spec.hetnet.action_dim
    return PointMassEnvService.observation_dim, PointMassEnvService.action_dim


# ---------------------------------------------------------------------------
# 出力
# ---------------------------------------------------------------------------

def format_metric(value: float) -> str:
    if isinstance(value, float) and math.isnan(value):
        return "nan"
    if isinstance(value, int):
        return str(value)
    return format(value, ".17g")


class MetricsCsvWriter:
    """エピソードごとのメトリクスを CSV に1行ずつ書く学習コールバック"""

    def __init__(self, path: Path, record_wall_time: bool = False):
        self.path = path
        self.record_wall_time = record_wall_time
        self.rows: List[EpisodeMetrics] = []
        path.parent.mkdir(parents=True, exist_ok=True)
        with path.open("w", newline="", encoding="utf-8") as f:
            csv.writer(f, lineterminator="\n").writerow(METRICS_COLUMNS)

    def __call__(self, step: int, episode: int, metrics: Dict[str, float]):
        row = EpisodeMetrics.model_validate(metrics)
        if not self.record_wall_time:
            row.wall_ms = 0.0
        self.rows.append(row)
        with self.path.open("a", newline="", encoding="utf-8") as f:
            csv.writer(f, lineterminator="\n").writerow([
                row.episode,
                format_metric(row.episode_return),
                format_metric(row.critic_loss_mean),
                format_metric(row.q_mean),
                row.steps,
                format_metric(row.wall_ms),
            ])


def read_metrics(path: Union[str, Path]) -> List[Dict[str, float]]:
    with Path(path).open(newline="", encoding="utf-8") as f:
        reader = csv.DictReader(f)
        if tuple(reader.fieldnames or ()) != METRICS_COLUMNS:
            raise ConfigError(f"{path}: unexpected metrics header {reader.fieldnames}")
        return [{key: float(value) for key, value in row.items()} for row in reader]


def final_window_mean(returns: List[float], window: int) -> float:
    window = min(window, len(returns))
    return float(np.mean(returns[-window:]))


def _critic_budget(spec: ExperimentSpec) -> Dict[str, Any]:
    d_s, d_a = env_dims(spec)
    if spec.critic.kind == "mlp":
        widths = spec.critic.mlp_widths
        if widths is None:
            reference = CriticConfig(d_s=d_s, d_a=d_a, **spec.critic.reacritic.model_dump())
            widths = matched_mlp_widths(reacritic_parameter_count(reference), d_s + d_a)
        return {"kind": "mlp", "widths": widths}
    config = CriticConfig(d_s=d_s, d_a=d_a, **spec.critic.reacritic.model_dump())
    return {
        "kind": "reacritic",
        "parameter_count": reacritic_parameter_count(config),
        "flop_breakdown": flop_breakdown(config, spec.trainer.batch_size),
    }


def _run_job(run_name: str, spec: ExperimentSpec, seed: int, run_dir: str) -> TrainingReport:
    """(run, seed) 1件分の学習。プロセスプールからも呼ばれる"""
    window = spec.final_window or settings.FINAL_WINDOW
    writer = MetricsCsvWriter(Path(run_dir) / f"seed_{seed}.csv", spec.record_wall_time)
    env = build_env(spec, seed)
    return train(env, spec.trainer, spec.critic, spec.episodes, seed,
                 callbacks=[writer], run_name=run_name, final_window=window)


class ExperimentService:
    """スイープ×シードの学習ジョブを実行して成果物を書き出す"""

    def __init__(self, output_dir: Optional[Union[str, Path]] = None):
        self.output_dir = Path(output_dir) if output_dir is not None else None
        logger.info("ExperimentService initialized")

    def _resolve_output(self, spec: ExperimentSpec) -> Path:
        out = self.output_dir or Path(spec.output_dir or settings.DEFAULT_OUTPUT_DIR)
        try:
            out.mkdir(parents=True, exist_ok=True)
        except OSError as e:
            raise ConfigError(f"output directory is not writable: {out} ({e})") from e
        return out

    def run(self, spec: ExperimentSpec, jobs: int = 1) -> Dict[str, List[TrainingReport]]:
        """全 run・全 seed を実行し run 名 → seed 順のレポートを返す"""
        if jobs < 1:
            raise ConfigError(f"jobs must be >= 1, got {jobs}")
        out = self._resolve_output(spec)
        runs = expand_sweep(spec)
        tasks = []
        for run_name, run_spec in runs:
            run_dir = out / run_name
            run_dir.mkdir(parents=True, exist_ok=True)
            for seed in run_spec.seeds:
                tasks.append((run_name, run_spec, seed, str(run_dir)))
        logger.info(f"実験開始: {spec.name} ({len(runs)} runs × {len(spec.seeds)} seeds, jobs={jobs})")

        if jobs == 1:
            reports = [_run_job(*task) for task in tasks]
        else:
            with ProcessPoolExecutor(max_workers=jobs) as pool:
                futures = [pool.submit(_run_job, *task) for task in tasks]
                reports = [future.result() for future in futures]

        results: Dict[str, List[TrainingReport]] = {name: [] for name, _ in runs}
        for (run_name, _, _, _), report in zip(tasks, reports):
            results[run_name].append(report)
        for run_name, run_spec in runs:
            self.write_summary(out / run_name, run_name, run_spec, results[run_name])
        logger.info(f"実験完了: {spec.name} → {out}")
        return results

    def write_summary(self, run_dir: Path, run_name: str, spec: ExperimentSpec,
                      reports: List[TrainingReport]) -> Path:
        finals = [r.final_window_mean_return for r in reports]
        summary = {
            "schema_version": settings.METRICS_SCHEMA_VERSION,
            "run_name": run_name,
            "timestamp": datetime.now().isoformat(),
            "seeds": [r.seed for r in reports],
            "final_window": spec.final_window or settings.FINAL_WINDOW,
            "final_window_mean_return": float(np.mean(finals)),
            "final_window_std_return": float(np.std(finals)),
            "critic_budget": _critic_budget(spec),
            "reports": [r.model_dump() for r in reports],
            "config": spec.model_dump(mode="json"),
        }
        path = run_dir / "summary.json"
        with path.open("w", encoding="utf-8") as f:
            json.dump(summary, f, ensure_ascii=False, indent=2)
        logger.info(f"summary を書き出しました: {path}")
        return path

    @staticmethod
    def sweep_report(output_dir: Union[str, Path]) -> List[Dict[str, Any]]:
        """各 run の summary.json を集計して sweep_report.csv を書く"""
        out = Path(output_dir)
        summaries = sorted(out.glob("*/summary.json"))
        if not summaries:
            raise ConfigError(f"no summary.json found under {out}")
        rows = []
        for path in summaries:
            with path.open(encoding="utf-8") as f:
                summary = json.load(f)
            config = summary["config"]
            rows.append({
                "H": config["critic"]["reacritic"]["H"],
                "V": config["critic"]["reacritic"]["V"],
                "noise_sigma": config["critic"]["reacritic"]["noise_sigma"],
                "num_users": config["hetnet"]["num_users"],
                "final_window_mean_return": summary["final_window_mean_return"],
            })
        rows.sort(key=lambda r: (r["H"], r["V"], r["noise_sigma"], r["num_users"]))

        report_path = out / "sweep_report.csv"
        with report_path.open("w", newline="", encoding="utf-8") as f:
            writer = csv.DictWriter(f, fieldnames=SWEEP_COLUMNS, lineterminator="\n")
            writer.writeheader()
            for row in rows:
                writer.writerow({**row, "final_window_mean_return": format_metric(row["final_window_mean_return"])})
        logger.info(f"sweep_report を書き出しました: {report_path} ({len(rows)} runs)")
        return rows


def format_grid(rows: List[Dict[str, Any]]) -> str:
    """(H, V) → 最終窓平均リターンの表（同じ (H, V) の他の軸は平均）"""
    cells: Dict[Tuple[int, int], List[float]] = {}
    for row in rows:
        cells.setdefault((row["H"], row["V"]), []).append(row["final_window_mean_return"])
    hs = sorted({h for h, _ in cells})
    vs = sorted({v for _, v in cells})
    lines = ["H\\V".ljust(8) + "".join(f"{v:>14}" for v in vs)]
    for h in hs:
        values = [f"{np.mean(cells[(h, v)]):>14.4f}" if (h, v) in cells else f"{'-':>14}" for v in vs]
        lines.append(f"{h:<8}" + "".join(values))
    return "\n".join(lines)
