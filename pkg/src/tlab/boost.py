"""Margin boosting: push an adversarial example deeper past the source
model's decision boundary while keeping the total distortion from the
original sample inside an infinity-norm ball.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from .attacks import AttackConfig, AttackResult, run_attack
from .errors import ConfigurationError, ContractError

F32 = np.float32

# A rejected step halves step_size; stop once it drops below this fraction
# of the configured step.
_STEP_FLOOR_FRACTION = 1.0 / 16.0


@dataclass(frozen=True)
class BoostConfig:
    """Distortion budget and target margin depth.

    epsilon: max infinity-norm distortion from the ORIGINAL sample ([0,1]
    scale). delta: required source-model margin (logit units). step_size
    defaults to epsilon/20.
    """

    epsilon: float
    delta: float
    step_size: float | None = None
    max_iter: int = 100

    def __post_init__(self):
        if self.epsilon <= 0:
            raise ConfigurationError("epsilon must be positive")
        if self.delta < 0:
            raise ConfigurationError("delta must be nonnegative")
        if self.step_size is None:
            object.__setattr__(self, "step_size", self.epsilon / 20.0)
        if not 0 < self.step_size <= self.epsilon:
            raise ConfigurationError("step_size must lie in (0, epsilon]")
        if self.max_iter < 1:
            raise ConfigurationError("max_iter must be at least 1")


@dataclass
class BoostResult:
    boosted: np.ndarray  # (1, side, side) float32 in [0, 1]
    reached_delta: bool
    iterations: int
    final_margin: float
    final_linf: float  # distance to the original sample
    attack_failed: bool = False


def _ascend_margin(source_model, x0, x_start, y, config: BoostConfig):
    """Projected sign-gradient ascent on the margin from x_start.

    Accepted iterates have monotonically non-decreasing margin; a step that
    would reduce the margin is rejected and halves the step size, down to a
    floor of step_size/16. Returns (x, iterations).
    """
    lo = np.clip(x0 - F32(config.epsilon), 0.0, 1.0)
    hi = np.clip(x0 + F32(config.epsilon), 0.0, 1.0)
    x = np.clip(x_start, lo, hi).astype(F32)
    margin = source_model.margin01(x, y)
    step = float(config.step_size)
    floor = config.step_size * _STEP_FLOOR_FRACTION
    iters = 0
    for _ in range(config.max_iter):
        if margin >= config.delta:
            break
        _, grad = source_model.margin_grad01(x, y)
        sign = np.sign(grad)
        if not sign.any():
            break
        cand = np.clip(x + F32(step) * sign, lo, hi)
        cand_margin = source_model.margin01(cand, y)
        iters += 1
        if cand_margin >= margin:
            x, margin = cand, cand_margin
        else:
            step *= 0.5
            if step < floor:
                break
    return x, iters


def boost_margin(source_model, x_original, x_adversarial, y,
                 config: BoostConfig) -> BoostResult:
    """Push a misclassified sample's margin up to delta inside the ball.

    delta=0 returns the adversarial input unchanged.
    """
    x0 = np.asarray(x_original, dtype=F32)
    x = np.asarray(x_adversarial, dtype=F32).copy()
    start_margin = source_model.margin01(x, y)
    if start_margin <= 0:
        raise ContractError("adversarial input is not misclassified "
                            f"(margin {start_margin:.6g})")
    linf0 = float(np.abs(x - x0).max())
    if linf0 > config.epsilon + 1e-6:
        raise ContractError(f"adversarial input already {linf0:.6g} outside "
                            f"the {config.epsilon} ball")

    if config.delta == 0.0:
        return BoostResult(x, True, 0, start_margin, linf0)

    x, iters = _ascend_margin(source_model, x0, x, y, config)
    final_margin = source_model.margin01(x, y)  # fresh pass, not loop state
    return BoostResult(x, final_margin >= config.delta, iters, final_margin,
                       float(np.abs(x - x0).max()))


def attack_and_boost(source_model, x, y, attack_config: AttackConfig,
                     boost_config: BoostConfig) -> BoostResult:
    """Generate an adversarial example, then boost its margin.

    If the attack fails, it is re-invoked with doubled iteration caps for up
    to 3 escalation rounds; if it still fails, the best candidate is
    returned with attack_failed=true. An adversarial point outside the
    boost ball (possible when the attack's own norm budget exceeds epsilon)
    is pulled back by projection; if projection undoes the misclassification
    the margin ascent simply starts below zero and climbs from there.
    """
    if source_model.predict01(np.asarray(x, dtype=F32)) != y:
        raise ContractError("source model must classify the input correctly")
    result = run_attack(source_model, x, y, attack_config)
    cfg = attack_config
    for _ in range(3):
        if result.success:
            break
        cfg = dataclasses.replace(
            cfg, steps=cfg.steps * 2, cw_steps=cfg.cw_steps * 2,
            lbfgs_maxiter=cfg.lbfgs_maxiter * 2)
        result = run_attack(source_model, x, y, cfg)
    x0 = np.asarray(x, dtype=F32)
    adv = np.clip(result.adversarial,
                  np.clip(x0 - F32(boost_config.epsilon), 0.0, 1.0),
                  np.clip(x0 + F32(boost_config.epsilon), 0.0, 1.0))
    if not result.success:
        margin = source_model.margin01(adv, y)
        return BoostResult(adv, False, 0, margin,
                           float(np.abs(adv - x0).max()), attack_failed=True)
    if source_model.predict01(adv) != y:
        return boost_margin(source_model, x0, adv, y, boost_config)
    if boost_config.delta == 0.0:
        margin = source_model.margin01(adv, y)
        return BoostResult(adv, margin >= 0.0, 0, margin,
                           float(np.abs(adv - x0).max()))
    boosted, iters = _ascend_margin(source_model, x0, adv, y, boost_config)
    margin = source_model.margin01(boosted, y)
    return BoostResult(boosted, margin >= boost_config.delta, iters, margin,
                       float(np.abs(boosted - x0).max()))
