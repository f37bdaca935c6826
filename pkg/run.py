#!/usr/bin/env python3
"""
VecProbe - 主程序入口

用法：
    python run.py COMMAND [--config FILE] [--seed N] [--out DIR] [--jobs N]

指令：synth, ingest, train, evaluate, cross, attribute, sweep, render
退出碼：0 成功、2 設定錯誤、3 資料驗證錯誤、4 數值失敗
"""

import argparse
import logging
import os
import sys
from typing import List, Optional

# 確保正確的模組路徑
current_dir = os.path.dirname(os.path.abspath(__file__))
sys.path.insert(0, current_dir)

from grad_engine import NumericFailureError, ShapeError  # noqa: E402
from scenario_core import DataValidationError  # noqa: E402
from system_config import ConfigError, setup_logging  # noqa: E402
from workbench import COMMANDS, get_workbench  # noqa: E402

EXIT_OK = 0
EXIT_UNEXPECTED = 1
EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_NUMERIC = 4

logger = logging.getLogger("vecprobe")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="vecprobe",
        description="向量化軌跡預測與積分梯度歸因工作台",
    )
    parser.add_argument("command", choices=COMMANDS, help="要執行的指令")
    parser.add_argument("--config", default=None, help="YAML 設定檔（點號分段鍵）")
    parser.add_argument("--seed", type=int, default=None, help="根種子，覆寫設定檔")
    parser.add_argument("--out", default=None, help="輸出目錄，覆寫 paths.output_dir")
    parser.add_argument("--jobs", type=int, default=None, help="平行工作數")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        setup_logging()
        workbench = get_workbench(args.config, seed=args.seed, output_dir=args.out, jobs=args.jobs)
        workbench.config_manager.validate_config(args.command)
        record = workbench.run(args.command)
    except ConfigError as exc:
        logger.error(f"configuration error: {exc}")
        return EXIT_CONFIG
    except DataValidationError as exc:
        logger.error(f"data validation error: {exc}")
        return EXIT_DATA
    except (NumericFailureError, ShapeError) as exc:
        logger.error(f"numeric failure: {exc}")
        return EXIT_NUMERIC
    except Exception as exc:
        logger.exception(f"unexpected failure: {exc}")
        return EXIT_UNEXPECTED
    logger.info(f"'{args.command}' 完成，產物 {len(record.artifacts)} 個")
    return EXIT_OK


if __name__ == '__main__':
    sys.exit(main())
