# main.py
"""
ReaCritic 実験ハーネスの CLI

    python main.py run --config configs/hetnet_m5.env [--seed 0] [--out runs] [--jobs 4]
    python main.py verify --suite all
    python main.py sweep-report --out runs/hetnet_sweep

終了コード: 0 正常 / 1 設定エラー / 2 学習の発散 / 3 検証失敗
"""
import argparse
import logging
import sys
from typing import List, Optional

from config.settings import settings
from models.exceptions import ReaCriticError, VerificationFailure
from services.experiment_service import ExperimentService, apply_overrides, format_grid, load_experiment_spec
from services.verification_service import SUITES, VerificationService

logger = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_CONFIG = 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="reacritic", description=settings.APP_NAME)
    parser.add_argument("--version", action="version", version=f"%(prog)s {settings.APP_VERSION}")
    commands = parser.add_subparsers(dest="command", required=True)

    run = commands.add_parser("run", help="学習ジョブ（スイープを含む）を実行する")
    run.add_argument("--config", required=True, help="実験設定ファイル（.json または key=value）")
    run.add_argument("--seed", type=int, default=None, help="seed リストを1つの seed で置き換える")
    run.add_argument("--out", default=None, help="出力ディレクトリ")
    run.add_argument("--jobs", type=int, default=1, help="並列ジョブ数")

    verify = commands.add_parser("verify", help="検証スイートを実行する")
    verify.add_argument("--suite", choices=SUITES + ("all",), default="all")
    verify.add_argument("--seed", type=int, default=0)

    report = commands.add_parser("sweep-report", help="スイープ結果を (H, V) の表に集計する")
    report.add_argument("--out", required=True, help="スイープの出力ディレクトリ")
    return parser


def command_run(args: argparse.Namespace) -> int:
    spec = apply_overrides(load_experiment_spec(args.config), seed=args.seed, output_dir=args.out)
    results = ExperimentService().run(spec, jobs=args.jobs)
    for run_name, reports in results.items():
        finals = ", ".join(f"seed {r.seed}: {r.final_window_mean_return:.4f}" for r in reports)
        print(f"{run_name}: {finals}")
    return EXIT_OK


def command_verify(args: argparse.Namespace) -> int:
    service = VerificationService(seed=args.seed)
    results = service.verify(args.suite)
    failed = [r for r in results if not r.passed]
    print(f"{len(results) - len(failed)}/{len(results)} checks passed")
    if failed:
        raise VerificationFailure(f"{len(failed)} check(s) failed: {', '.join(r.name for r in failed)}")
    return EXIT_OK


def command_sweep_report(args: argparse.Namespace) -> int:
    rows = ExperimentService.sweep_report(args.out)
    print(format_grid(rows))
    return EXIT_OK


COMMANDS = {
    "run": command_run,
    "verify": command_verify,
    "sweep-report": command_sweep_report,
}


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)

    try:
        settings.validate()
        logging.basicConfig(level=getattr(logging, settings.LOG_LEVEL.upper()))
        logger.info(f"{settings.APP_NAME} v{settings.APP_VERSION} - コマンド: {args.command}")
        return COMMANDS[args.command](args)
    except ReaCriticError as e:
        logger.error(f"{args.command} に失敗しました: {e}")
        print(f"error: {e}", file=sys.stderr)
        return e.exit_code
    except ValueError as e:
        logger.error(f"設定エラー: {e}")
        print(f"error: {e}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
