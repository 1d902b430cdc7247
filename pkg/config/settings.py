# config/settings.py (実験ハーネス全体の設定)
from pydantic_settings import BaseSettings, SettingsConfigDict


class Settings(BaseSettings):
    """プロセス全体の設定（環境変数 REACRITIC_* / .env から読み込み）"""

    model_config = SettingsConfigDict(
        env_prefix="REACRITIC_",
        env_file=".env",
        env_file_encoding="utf-8",
        extra="ignore",
    )

    APP_NAME: str = "ReaCritic Experiment Harness"
    APP_VERSION: str = "1.0.0"
    LOG_LEVEL: str = "INFO"

    # 出力設定
    DEFAULT_OUTPUT_DIR: str = "runs"
    METRICS_SCHEMA_VERSION: int = 1
    CHECKPOINT_FORMAT_VERSION: int = 1

    # 勾配チェック設定
    GRAD_CHECK_STEP: float = 1e-5
    GRAD_CHECK_TOLERANCE: float = 1e-4
    # 単一演算の勾配チェック
    GRAD_CHECK_OP_TOLERANCE: float = 1e-6
    GRAD_CHECK_FLOOR: float = 1e-4

    # 学習評価設定
    FINAL_WINDOW: int = 20

    # テンソル演算ごとに NaN/Inf を検査する
    CHECK_FINITE: bool = True

    def validate(self):
        """設定の検証"""
        if self.LOG_LEVEL.upper() not in ("DEBUG", "INFO", "WARNING", "ERROR", "CRITICAL"):
            raise ValueError(f"LOG_LEVEL is invalid: {self.LOG_LEVEL}")

        if (self.GRAD_CHECK_STEP <= 0 or self.GRAD_CHECK_TOLERANCE <= 0 or self.GRAD_CHECK_FLOOR <= 0
                or self.GRAD_CHECK_OP_TOLERANCE <= 0):
            raise ValueError("GRAD_CHECK_* values must be positive")

        if self.FINAL_WINDOW < 1:
            raise ValueError("FINAL_WINDOW must be >= 1")


settings = Settings()
