# models/exceptions.py
"""例外階層。main.py だけが終了コードへ変換する。"""


class ReaCriticError(Exception):
    """基底例外"""

    exit_code: int = 1


class ConfigError(ReaCriticError, ValueError):
    """設定値・設定ファイルの不正"""


class DimensionError(ReaCriticError, ValueError):
    """形状の不一致・空軸・定義域外の入力"""


class ContractError(ReaCriticError, RuntimeError):
    """呼び出し契約違反（非スカラーの backward、空のテープ、構造不一致など）"""


class EnvironmentStateError(ReaCriticError, RuntimeError):
    """終了済みエピソードへの step など"""


class BufferUnderflowError(ReaCriticError, RuntimeError):
    """リプレイバッファの保持数がバッチサイズ未満"""


class NonFiniteValueError(ReaCriticError, FloatingPointError):
    """テンソル演算の結果に NaN/Inf が含まれる"""

    exit_code = 2


class TrainingDivergenceError(ReaCriticError, RuntimeError):
    """損失が有限でなくなった（学習の発散）"""

    exit_code = 2


class VerificationFailure(ReaCriticError):
    """verify スイートのチェック失敗"""

    exit_code = 3
