# services/verification_service.py
"""
検証スイート

- grad:  中心差分による勾配検査（要素演算・行列積・softmax・layer_norm・critic 全体・actor）
         と正規化の不変条件
- env:   HetNet の閉形式・実行可能性・単調性・決定性の検査
- flops: 積和回数の見積もりと計測値の一致、スケーリング比
"""
import logging
from typing import Callable, Dict, Iterable, List, Optional, Sequence

import numpy as np

from config.settings import settings
from models.exceptions import ConfigError
from models.schemas import CheckResult, CriticConfig, EnvConfig, UserPopulation
from services import tensor_service as ts
from services.critic_service import ReaCriticService, flop_breakdown
from services.drl_service import ActorNet
from services.hetnet_env_service import (
    B_U,
    P_D,
    P_U,
    SHARED_COLUMNS,
    HetNetEnvService,
    downlink_sinrs,
    energy_efficiency,
    path_loss,
    project_action,
    rate_uplink,
    sample_rician,
    service_latency,
    sinr_uplink,
    uplink_sinrs,
)
from services.network_service import rng_stream
from services.tensor_service import GradTape, Tensor

logger = logging.getLogger(__name__)

SUITES = ("grad", "env", "flops")


# ---------------------------------------------------------------------------
# 勾配検査ヘルパー
# ---------------------------------------------------------------------------

def finite_difference_gradient(fn: Callable[[], float], tensor: Tensor, step: float) -> np.ndarray:
    """tensor.data の各要素について (f(x+h) − f(x−h)) / 2h"""
    original = tensor.data
    grad = np.zeros_like(original)
    for index in np.ndindex(original.shape):
        plus = original.copy()
        plus[index] += step
        tensor.data = plus
        f_plus = fn()
        minus = original.copy()
        minus[index] -= step
        tensor.data = minus
        f_minus = fn()
        grad[index] = (f_plus - f_minus) / (2.0 * step)
    tensor.data = original
    return grad


def relative_error(analytic: np.ndarray, numeric: np.ndarray, floor: float) -> float:
    """要素ごとの |a − n| / max(|a|, |n|, floor) の最大値"""
    if analytic.size == 0:
        return 0.0
    denominator = np.maximum(np.maximum(np.abs(analytic), np.abs(numeric)), floor)
    return float(np.max(np.abs(analytic - numeric) / denominator))


def gradient_check(loss_fn: Callable[[], Tensor], tensors: Sequence[Tensor],
                   step: Optional[float] = None, floor: Optional[float] = None) -> Dict[str, float]:
    """解析勾配と数値勾配の相対誤差（テンソル名 → 最大相対誤差）"""
    step = step or settings.GRAD_CHECK_STEP
    floor = floor or settings.GRAD_CHECK_FLOOR
    for tensor in tensors:
        tensor.zero_grad()
    with GradTape() as tape:
        loss = loss_fn()
    tape.backward(loss)

    errors: Dict[str, float] = {}
    for i, tensor in enumerate(tensors):
        analytic = tensor.grad if tensor.grad is not None else np.zeros_like(tensor.data)
        numeric = finite_difference_gradient(lambda: loss_fn().item(), tensor, step)
        errors[tensor.name or f"input{i}"] = relative_error(analytic, numeric, floor)
    return errors


def _leaf(rng: np.random.Generator, shape, name: str, scale: float = 1.0, offset: float = 0.0) -> Tensor:
    return Tensor(offset + scale * rng.standard_normal(shape), requires_grad=True, name=name)


def _weighted_sum(out: Tensor, weights: np.ndarray) -> Tensor:
    """出力の重みつき総和（スカラー損失）"""
    return ts.sum(ts.hadamard(out, Tensor(weights)))


# ---------------------------------------------------------------------------
# HetNet 検査用の小さなユーザー集合
# ---------------------------------------------------------------------------

def user_population(M: int, power: float = 1.0, fading: float = 1.0, zeta: float = 0.01,
                    demand: float = 1e6, efficiency: float = 1.0) -> UserPopulation:
    """全ユーザーが同じパラメータを持つ集合"""
    ones = np.ones(M)
    return UserPopulation(
        demand=demand * ones,
        latency=np.zeros(M),
        position=0.5 * ones,
        initial_position=0.5 * ones,
        base_distance=ones,
        distance=ones,
        cpu_frequency=ones,
        user_type=np.zeros(M, dtype=int),
        uplink_power_max=power * ones,
        uplink_fading=fading * ones,
        downlink_fading=fading * ones,
        path_loss=zeta * ones,
        switched_capacitance=1.0 / efficiency * ones,
        compute_efficiency=efficiency * ones,
        latency_threshold=ones,
        utility_weights=np.ones((M, 5)),
        reward_weights=np.ones((M, 7)),
    )


class VerificationService:
    """スイートごとのチェックを実行し結果を集める"""

    def __init__(self, seed: int = 0, echo: Callable[[str], None] = print):
        self.seed = seed
        self.echo = echo
        self.results: List[CheckResult] = []

    def _record(self, suite: str, name: str, measured: float, tolerance: float,
                passed: Optional[bool] = None, detail: str = "") -> CheckResult:
        if passed is None:
            passed = bool(measured <= tolerance)
        result = CheckResult(suite=suite, name=name, measured=float(measured), tolerance=float(tolerance),
                             passed=passed, detail=detail)
        self.results.append(result)
        status = "PASS" if passed else "FAIL"
        self.echo(f"[{status}] {suite}/{name}: measured={measured:.3e} tolerance={tolerance:.1e}"
                  + (f" ({detail})" if detail else ""))
        return result

    def verify(self, suite: str = "all") -> List[CheckResult]:
        """指定スイート（grad / env / flops / all）を実行する"""
        if suite not in SUITES + ("all",):
            raise ConfigError(f"unknown verification suite {suite!r}; expected one of {SUITES + ('all',)}")
        self.results = []
        for name in (SUITES if suite == "all" else (suite,)):
            logger.info(f"検証スイート開始: {name}")
            getattr(self, f"check_{name}")()
        failed = [r for r in self.results if not r.passed]
        logger.info(f"検証完了: {len(self.results) - len(failed)}/{len(self.results)} 件成功")
        return self.results

    # -----------------------------------------------------------------------
    # grad
    # -----------------------------------------------------------------------

    def _gradient(self, name: str, loss_fn: Callable[[], Tensor], tensors: Iterable[Tensor]):
        errors = gradient_check(loss_fn, list(tensors))
        worst = max(errors, key=errors.get)
        self._record("grad", name, errors[worst], settings.GRAD_CHECK_OP_TOLERANCE, detail=f"worst={worst}")

    def check_grad(self):
        rng = rng_stream(self.seed, "verify_grad")

        a = _leaf(rng, (3, 4), "a")
        b = _leaf(rng, (4,), "b")
        w = rng.standard_normal((3, 4))
        self._gradient("add_broadcast", lambda: _weighted_sum(ts.add(a, b), w), [a, b])
        self._gradient("sub_broadcast", lambda: _weighted_sum(ts.sub(a, b), w), [a, b])
        self._gradient("hadamard", lambda: _weighted_sum(ts.hadamard(a, b), w), [a, b])
        self._gradient("scalar_ops",
                       lambda: _weighted_sum(ts.add_scalar(ts.mul_scalar(a, -1.7), 0.3), w), [a])
        self._gradient("gelu", lambda: _weighted_sum(ts.gelu(a), w), [a])
        self._gradient("tanh", lambda: _weighted_sum(ts.tanh(a), w), [a])
        self._gradient("exp", lambda: _weighted_sum(ts.exp(a), w), [a])
        self._gradient("square", lambda: _weighted_sum(ts.square(a), w), [a])
        positive = Tensor(rng.uniform(0.5, 2.0, (3, 4)), requires_grad=True, name="positive")
        self._gradient("log", lambda: _weighted_sum(ts.log(positive), w), [positive])
        self._gradient("mean_axis", lambda: ts.sum(ts.hadamard(ts.mean(a, axis=0), b)), [a, b])
        self._gradient("concat", lambda: ts.sum(ts.square(ts.concat([a, a], axis=-1))), [a])

        x3 = _leaf(rng, (2, 3, 4), "x3")
        m2 = _leaf(rng, (4, 5), "m2")
        m3 = _leaf(rng, (2, 4, 5), "m3")
        w3 = rng.standard_normal((2, 3, 5))
        self._gradient("matmul_shared_rhs", lambda: _weighted_sum(ts.matmul(x3, m2), w3), [x3, m2])
        self._gradient("matmul_batched", lambda: _weighted_sum(ts.matmul(x3, m3), w3), [x3, m3])

        logits = _leaf(rng, (4, 6), "logits")
        ws = rng.standard_normal((4, 6))
        self._gradient("softmax", lambda: _weighted_sum(ts.softmax(logits), ws), [logits])

        xn = _leaf(rng, (3, 8), "x_ln", scale=2.0)
        gain = _leaf(rng, (8,), "gain", scale=0.3, offset=1.0)
        bias = _leaf(rng, (8,), "bias", scale=0.3)
        wn = rng.standard_normal((3, 8))
        self._gradient("layer_norm", lambda: _weighted_sum(ts.layer_norm(xn, gain, bias), wn), [xn, gain, bias])

        self._check_normalization(rng)
        self._check_critic_gradient(rng)
        self._check_actor_gradient(rng)

    def _check_normalization(self, rng: np.random.Generator, samples: int = 1000):
        logits = Tensor(rng.normal(0.0, 5.0, (samples, 7)))
        softmax_error = np.max(np.abs(ts.softmax(logits).data.sum(axis=-1) - 1.0))
        self._record("grad", "softmax_rows_sum_to_one", softmax_error, 1e-9)

        d = 32
        x = Tensor(rng.normal(0.0, 10.0, (samples, d)) + rng.normal(0.0, 50.0, (samples, 1)))
        y = ts.layer_norm(x, Tensor(np.ones(d)), Tensor(np.zeros(d))).data
        self._record("grad", "layer_norm_zero_mean", np.max(np.abs(y.mean(axis=-1))), 1e-9)
        self._record("grad", "layer_norm_unit_variance", np.max(np.abs(y.var(axis=-1) - 1.0)), 1e-5)

        config = CriticConfig(d_s=6, d_a=2, d_h=16, H=4, V=2, n_heads=2)
        critic = ReaCriticService(config, rng_stream(self.seed, "critic_init"))
        critic.q_value(rng.standard_normal((samples, 6)), rng.uniform(0, 1, (samples, 2)))
        worst = max(float(np.max(np.abs(weights.sum(axis=-1) - 1.0)))
                    for weights in critic.last_attention_weights.values())
        self._record("grad", "attention_weights_sum_to_one", worst, 1e-9,
                     detail=f"{len(critic.last_attention_weights)} weight sets")

    def _check_critic_gradient(self, rng: np.random.Generator):
        config = CriticConfig(d_s=6, d_a=2, d_h=16, H=4, V=2, n_heads=2)
        critic = ReaCriticService(config, rng_stream(self.seed, "critic_init"))
        B = 3
        state = Tensor(rng.standard_normal((B, 6)), requires_grad=True, name="state")
        action = Tensor(rng.uniform(0.0, 1.0, (B, 2)), requires_grad=True, name="action")
        weights = rng.standard_normal(B)

        def loss_fn() -> Tensor:
            return _weighted_sum(critic.q_value(state, action), weights)

        errors = gradient_check(loss_fn, critic.parameter_list() + [state, action])
        worst = max(errors, key=errors.get)
        self._record("grad", "reacritic_pipeline", errors[worst], settings.GRAD_CHECK_TOLERANCE,
                     detail=f"{len(errors)} tensors, worst={worst}")

    def _check_actor_gradient(self, rng: np.random.Generator):
        actor = ActorNet(6, 2, [8], stochastic=True, rng=rng_stream(self.seed, "actor_init"))
        states = rng.standard_normal((3, 6))
        weights = rng.standard_normal(3)
        seed = int(rng.integers(0, 2 ** 31))

        def loss_fn() -> Tensor:
            actions, log_prob = actor.sample(states, np.random.default_rng(seed))
            return ts.add(ts.sum(ts.square(actions)), _weighted_sum(log_prob, weights))

        errors = gradient_check(loss_fn, actor.parameter_list())
        worst = max(errors, key=errors.get)
        self._record("grad", "sac_actor", errors[worst], settings.GRAD_CHECK_TOLERANCE, detail=f"worst={worst}")

    # -----------------------------------------------------------------------
    # env
    # -----------------------------------------------------------------------

    def _close(self, name: str, value: float, expected: float, tolerance: float = 1e-9):
        error = abs(value - expected) / max(abs(expected), 1e-300)
        self._record("env", name, error, tolerance, detail=f"value={value!r} expected={expected!r}")

    def check_env(self):
        rng = rng_stream(self.seed, "verify_env")
        cfg_single = EnvConfig(num_users=1, uplink_noise_power=1e-3, downlink_noise_power=1e-3)

        self._close("path_loss_d10_g2", path_loss(10.0, 2.0), 0.01)
        self._close("path_loss_d5_g3", path_loss(5.0, 3.0), 0.008)

        single = user_population(1, power=1.0, fading=1.0, zeta=0.01)
        full = np.ones((1, 5))
        sinr = sinr_uplink(0, full, single, cfg_single)
        self._close("sinr_single_user", sinr, 10.0)
        self._close("rate_sinr1", rate_uplink(0, full, 1.0, EnvConfig(num_users=1)), 1e6)
        half = full.copy()
        half[0, B_U] = 0.5
        self._close("rate_sinr3_half_share", rate_uplink(0, half, 3.0, EnvConfig(num_users=1, uplink_bandwidth=2e6)),
                    2e6)
        self._close("energy_efficiency", energy_efficiency(1e6, 0.5, 2.0), 1e6)
        self._close("latency_closed_form", service_latency(1e6, 1e6, 1.0, 1e9, 1.0, 10.0), 1.001)
        self._close("latency_above_cap", service_latency(1e6, 1e4, 1.0, 1e9, 1.0, 10.0), 100.001)

        symmetric = user_population(3, power=1.0, fading=1.0, zeta=0.01)
        pqz = 0.01
        sinr3 = float(uplink_sinrs(np.full((3, 5), 1.0), symmetric, cfg_single.model_copy(update={"num_users": 3}))[0])
        self._close("sinr_symmetric_three_users", sinr3, pqz / (2 * pqz + 1e-3))

        self._check_feasibility(rng)
        self._check_monotonicity(rng)
        self._check_rician(rng)
        self._check_determinism()

    def _check_feasibility(self, rng: np.random.Generator, trials: int = 100_000, M: int = 5):
        worst_sum, worst_range = 0.0, 0.0
        for _ in range(trials):
            projected = project_action(rng.normal(0.5, 1.0, (M, 5)))
            worst_sum = max(worst_sum, float(projected[:, SHARED_COLUMNS].sum(axis=0).max()) - 1.0)
            worst_range = max(worst_range, float(-projected.min()), float(projected.max() - 1.0))
        self._record("env", "projection_column_sums", max(worst_sum, 0.0), 1e-12, detail=f"{trials} actions")
        self._record("env", "projection_entry_range", max(worst_range, 0.0), 0.0, detail=f"{trials} actions")

    def _check_monotonicity(self, rng: np.random.Generator, trials: int = 10_000, M: int = 4):
        config = EnvConfig(num_users=M)
        violations = 0
        for _ in range(trials):
            users = user_population(M)
            users.uplink_power_max = rng.uniform(0.1, 0.2, M)
            users.uplink_fading = rng.exponential(1.0, M) + 1e-3
            users.downlink_fading = rng.exponential(1.0, M) + 1e-3
            users.path_loss = rng.uniform(5.0, 10.0, M) ** -3.0
            action = project_action(rng.uniform(0.0, 1.0, (M, 5)))
            m, j = rng.choice(M, size=2, replace=False)
            before_u = uplink_sinrs(action, users, config)[m]
            before_d = downlink_sinrs(action, users, config)[m]
            bumped = action.copy()
            bumped[j, P_U] = min(1.0, bumped[j, P_U] + rng.uniform(0.0, 0.5))
            bumped[j, P_D] = bumped[j, P_D] * rng.uniform(1.0, 1.5)
            if uplink_sinrs(bumped, users, config)[m] > before_u or downlink_sinrs(bumped, users, config)[m] > before_d:
                violations += 1
        self._record("env", "interference_monotonicity", violations, 0, detail=f"{trials} trials")

        compute_violations = 0
        for _ in range(trials):
            demand, share = rng.uniform(1e5, 1e6), rng.uniform(0.01, 0.5)
            efficiency = rng.uniform(0.5, 2.0)
            base = service_latency(demand, 1e4, share, 1e9, efficiency, 10.0)
            doubled = service_latency(demand, 1e4, 2 * share, 1e9, efficiency, 10.0)
            if not doubled < base:
                compute_violations += 1
        self._record("env", "latency_compute_monotonicity", compute_violations, 0, detail=f"{trials} trials")

    def _check_rician(self, rng: np.random.Generator, draws: int = 100_000):
        for k in (0.0, 3.0):
            mean = float(np.mean(sample_rician(k, rng, draws)))
            self._record("env", f"rician_mean_k{k:g}", abs(mean - 1.0), 0.02)

    def _check_determinism(self, steps: int = 20):
        config = EnvConfig(num_users=5, seed=self.seed)
        trajectories = []
        for _ in range(2):
            env = HetNetEnvService(config)
            action_rng = rng_stream(self.seed, "verify_actions")
            observations = [env.reset(seed=self.seed).next_state]
            rho_error = float(np.max(np.abs(env.users.compute_efficiency * env.users.switched_capacitance
                                             * env.users.cpu_frequency - 1.0)))
            for _ in range(steps):
                result = env.step(action_rng.uniform(0.0, 1.0, env.action_dim))
                observations.append(result.next_state)
                observations.append(np.array([result.reward]))
            trajectories.append(np.concatenate(observations))
        same = np.array_equal(trajectories[0], trajectories[1])
        self._record("env", "trajectory_determinism", 0.0 if same else 1.0, 0.0)
        self._record("env", "compute_efficiency_identity", rho_error, 1e-12)

    # -----------------------------------------------------------------------
    # flops
    # -----------------------------------------------------------------------

    def check_flops(self, configs: int = 12):
        rng = rng_stream(self.seed, "verify_flops")
        mismatches = 0
        for i in range(configs):
            n_heads = int(rng.integers(1, 4))
            config = CriticConfig(
                d_s=int(rng.integers(2, 12)),
                d_a=int(rng.integers(1, 6)),
                d_h=n_heads * int(rng.integers(2, 6)),
                H=int(rng.integers(1, 7)),
                V=int(rng.integers(1, 4)),
                n_heads=n_heads,
                noise_sigma=0.0,
            )
            B = int(rng.integers(1, 6))
            critic = ReaCriticService(config, rng)
            with ts.count_macs() as counter:
                critic.q_value(rng.standard_normal((B, config.d_s)), rng.uniform(0, 1, (B, config.d_a)))
            expected = flop_breakdown(config, B)
            if dict(counter) != expected:
                mismatches += 1
                logger.warning(f"積和回数の不一致 (config {i}): 計測={dict(counter)} 見積={expected}")
        self._record("flops", "instrumented_tally", mismatches, 0, detail=f"{configs} random configs")

        base = CriticConfig(d_s=8, d_a=2, d_h=8, H=2, V=1, n_heads=2)

        ratios = {
            "attention_linear_in_V": (flop_breakdown(base.model_copy(update={"V": 3}), 1)["attention"]
                                      / flop_breakdown(base, 1)["attention"], 3.0),
            "attention_quadratic_in_H": (flop_breakdown(base.model_copy(update={"H": 6}), 1)["attention"]
                                         / flop_breakdown(base, 1)["attention"], 9.0),
            "ffn_linear_in_H": (flop_breakdown(base.model_copy(update={"H": 6}), 1)["ffn"]
                                / flop_breakdown(base, 1)["ffn"], 3.0),
            "total_linear_in_B": (sum(flop_breakdown(base, 5).values()) / sum(flop_breakdown(base, 1).values()), 5.0),
        }
        for name, (measured, expected) in ratios.items():
            self._record("flops", name, abs(measured - expected), 1e-12, detail=f"ratio={measured:g}")

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)


def run_suite(suite: str, seed: int = 0, echo: Callable[[str], None] = print) -> List[CheckResult]:
    return VerificationService(seed, echo).verify(suite)

