"""Adversarial example generators sharing one interface.

Every attack takes ``(model, x01, y, config)`` where ``x01`` is a single
(1, side, side) patch on the [0,1] scale and ``y`` its true label, and
returns an AttackResult. An input the model already misclassifies is
returned unchanged with success=true. Success flags are always re-checked
with a fresh forward pass on the final candidate.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.optimize import minimize

from .errors import ConfigurationError

F32 = np.float32

ATTACK_KINDS = ("FGSM", "IFGSM", "PGD", "JSMA", "LBFGS", "CW", "DEEPFOOL")

# Budget norm reported per attack family.
_NORMS = {"FGSM": "inf", "IFGSM": "inf", "PGD": "inf",
          "JSMA": "l0", "LBFGS": "l2", "CW": "l2", "DEEPFOOL": "l2"}


@dataclass(frozen=True)
class AttackConfig:
    """Parameters for one attack; fields irrelevant to `kind` are ignored."""

    kind: str
    epsilon: float = 0.1
    steps: int = 10
    theta: float = 0.1
    jsma_budget: float = 0.1
    c: float = 100.0
    kappa: float = 0.0
    lbfgs_doublings: int = 10
    lbfgs_bisections: int = 10
    lbfgs_maxiter: int = 100
    cw_steps: int = 1000
    cw_lr: float = 1e-2
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ATTACK_KINDS:
            raise ConfigurationError(f"unknown attack kind {self.kind!r}")
        if self.kind in ("FGSM", "IFGSM", "PGD") and not 0.0 <= self.epsilon <= 1.0:
            raise ConfigurationError("epsilon must lie in [0, 1]")
        if self.kind == "JSMA":
            if not 0.0 < self.theta <= 1.0:
                raise ConfigurationError("theta must lie in (0, 1]")
            if not 0.0 < self.jsma_budget <= 1.0:
                raise ConfigurationError("jsma_budget must lie in (0, 1]")
        if self.steps < 1 or self.cw_steps < 1 or self.lbfgs_maxiter < 1:
            raise ConfigurationError("iteration caps must be positive")
        if self.lbfgs_doublings < 0 or self.lbfgs_bisections < 0:
            raise ConfigurationError("search caps must be nonnegative")


@dataclass
class AttackResult:
    adversarial: np.ndarray  # (1, side, side) float32 in [0, 1]
    success: bool
    iterations_used: int
    attack_norm: str


# PGD defaults when the caller does not override them. The 0.03 ball is too
# small to contain adversarial points for a few percent of fixture samples,
# so the default strength matches the other infinity-norm attacks.
PGD_EPSILON = 0.1
PGD_STEPS = 40

DEEPFOOL_OVERSHOOT = 0.02
DEEPFOOL_MAX_ITER = 50


def _result(model, x_adv, y, kind, iterations):
    x_adv = np.clip(x_adv, 0.0, 1.0).astype(F32)
    success = model.predict01(x_adv) != y
    return AttackResult(x_adv, bool(success), iterations, _NORMS[kind])


def _already_done(model, x01, y, kind):
    if model.predict01(x01) != y:
        return AttackResult(np.asarray(x01, dtype=F32).copy(), True, 0, _NORMS[kind])
    return None


def fgsm(model, x01, y, config: AttackConfig) -> AttackResult:
    """Single signed-gradient step of size epsilon."""
    done = _already_done(model, x01, y, "FGSM")
    if done:
        return done
    _, grad = model.loss_grad01(x01, y)
    x_adv = np.clip(x01 + F32(config.epsilon) * np.sign(grad), 0.0, 1.0)
    return _result(model, x_adv, y, "FGSM", 1)


def _iterated_sign_steps(model, x01, y, start, epsilon, steps, step_size, kind):
    lo = np.clip(x01 - F32(epsilon), 0.0, 1.0)
    hi = np.clip(x01 + F32(epsilon), 0.0, 1.0)
    x = np.clip(start, lo, hi).astype(F32)
    used = 0
    for _ in range(steps):
        if model.predict01(x) != y:
            break
        _, grad = model.loss_grad01(x, y)
        x = np.clip(x + F32(step_size) * np.sign(grad), lo, hi)
        used += 1
    return _result(model, x, y, kind, used)


def ifgsm(model, x01, y, config: AttackConfig) -> AttackResult:
    """`steps` equal signed-gradient steps projected to the epsilon ball."""
    done = _already_done(model, x01, y, "IFGSM")
    if done:
        return done
    return _iterated_sign_steps(model, x01, y, x01, config.epsilon,
                                config.steps, config.epsilon / config.steps,
                                "IFGSM")


def pgd(model, x01, y, config: AttackConfig) -> AttackResult:
    """Seeded random start in the epsilon ball, then projected sign steps."""
    done = _already_done(model, x01, y, "PGD")
    if done:
        return done
    rng = np.random.default_rng(config.seed)
    start = x01 + rng.uniform(-config.epsilon, config.epsilon,
                              size=x01.shape).astype(F32)
    return _iterated_sign_steps(model, x01, y, start, config.epsilon,
                                config.steps, config.epsilon / 10.0, "PGD")


def jsma_select_pair(grad_target, grad_true, admissible_pos, admissible_neg):
    """Most salient admissible pixel pair, or None.

    The gradient arguments are flattened logit gradients (d target-logit /
    d pixel and d true-logit / d pixel); the masks say which pixels may
    still move up (+theta) and down (-theta). A pair qualifies for +theta
    when its summed target gradient is positive and summed true gradient
    negative, and for -theta with both signs flipped. Returns (i, j, sign)
    maximizing -alpha*beta over qualifying pairs of distinct pixels.
    """
    gt = np.asarray(grad_target, dtype=np.float64)
    gy = np.asarray(grad_true, dtype=np.float64)
    best = None  # (score, i, j, sign)
    for mask, sign in ((admissible_pos, 1.0), (admissible_neg, -1.0)):
        idx = np.flatnonzero(mask)
        if len(idx) < 2:
            continue
        alpha = gt[idx][:, None] + gt[idx][None, :]
        beta = gy[idx][:, None] + gy[idx][None, :]
        ok = ~np.eye(len(idx), dtype=bool)
        ok &= ((alpha > 0) & (beta < 0)) if sign > 0 else ((alpha < 0) & (beta > 0))
        if not ok.any():
            continue
        s = np.where(ok, -alpha * beta, -np.inf)
        flat = int(np.argmax(s))
        a, b = divmod(flat, len(idx))
        cand = (float(s.flat[flat]), int(idx[min(a, b)]), int(idx[max(a, b)]), sign)
        if best is None or cand[0] > best[0]:
            best = cand
    if best is None:
        return None
    return best[1], best[2], best[3]


def jsma(model, x01, y, config: AttackConfig) -> AttackResult:
    """Pixel-pair saliency attack.

    Each iteration moves the most salient admissible pair by theta; pixels
    may be revisited until they saturate, but the set of distinct modified
    pixels never exceeds jsma_budget of the input.
    """
    done = _already_done(model, x01, y, "JSMA")
    if done:
        return done
    target = 1 - y
    n_pixels = x01.size
    budget = int(np.floor(config.jsma_budget * n_pixels))
    x = np.asarray(x01, dtype=F32).copy()
    flat = x.ravel()
    modified = np.zeros(n_pixels, dtype=bool)
    max_iter = max(1, (budget // 2 + 1) * int(np.ceil(1.0 / config.theta)))
    used = 0
    for _ in range(max_iter):
        if model.predict01(x) != y:
            break
        adm_pos = flat < 1.0
        adm_neg = flat > 0.0
        if int(modified.sum()) + 2 > budget:
            # No room for new pixels: keep reworking the ones already used.
            adm_pos &= modified
            adm_neg &= modified
        _, grads = model.logit_grads01(x)
        sel = jsma_select_pair(grads[target].ravel(), grads[y].ravel(),
                               adm_pos, adm_neg)
        if sel is None:
            break
        i, j, sign = sel
        flat[i] = np.clip(flat[i] + sign * config.theta, 0.0, 1.0)
        flat[j] = np.clip(flat[j] + sign * config.theta, 0.0, 1.0)
        modified[i] = modified[j] = True
        used += 1
    return _result(model, x, y, "JSMA", used)


def _target_ce_and_grad(model, x, target):
    loss, grad = model.loss_grad01(x.astype(F32), target)
    return float(loss), grad.astype(np.float64)


def lbfgs_attack(model, x01, y, config: AttackConfig) -> AttackResult:
    """Box-constrained L2 + c*CE(target) minimization with a c line search.

    Doubles the trade-off constant from 1.0 until the optimum misclassifies,
    then bisects down to the smallest constant that still succeeds.
    """
    done = _already_done(model, x01, y, "LBFGS")
    if done:
        return done
    target = 1 - y
    x0 = np.asarray(x01, dtype=np.float64)
    shape = x01.shape

    def solve(c_ls):
        def objective(flat):
            x = flat.reshape(shape)
            loss, ce_grad = _target_ce_and_grad(model, x, target)
            diff = x - x0
            val = float((diff ** 2).sum()) + c_ls * loss
            grad = 2.0 * diff + c_ls * ce_grad
            return val, grad.ravel()

        res = minimize(objective, x0.ravel(), jac=True, method="L-BFGS-B",
                       bounds=[(0.0, 1.0)] * x0.size,
                       options={"maxiter": config.lbfgs_maxiter})
        x_cand = res.x.reshape(shape).astype(F32)
        return x_cand, model.predict01(x_cand) != y, int(res.nit)

    used = 0
    c_lo, c_hi = 0.0, 1.0
    best = None
    for _ in range(config.lbfgs_doublings + 1):
        x_cand, ok, nit = solve(c_hi)
        used += nit
        if ok:
            best = x_cand
            break
        c_lo = c_hi
        c_hi *= 2.0
    if best is None:
        return _result(model, x01.copy(), y, "LBFGS", used)
    for _ in range(config.lbfgs_bisections):
        c_mid = 0.5 * (c_lo + c_hi)
        x_cand, ok, nit = solve(c_mid)
        used += nit
        if ok:
            c_hi, best = c_mid, x_cand
        else:
            c_lo = c_mid
    return _result(model, best, y, "LBFGS", used)


def cw_l2(model, x01, y, config: AttackConfig) -> AttackResult:
    """Carlini-Wagner L2 with tanh box parameterization.

    Minimizes ||x'-x||^2 + c * max(Z_true - Z_other + kappa, 0) by plain
    gradient descent on the tanh preimage, keeping the successful iterate
    with the smallest L2 distortion. After the first success the descent
    continues (the inactive hinge lets the distance term pull the iterate
    back toward x) until the best distortion stops improving.
    """
    done = _already_done(model, x01, y, "CW")
    if done:
        return done
    target = 1 - y
    x0 = np.asarray(x01, dtype=np.float64)
    w = np.arctanh(2.0 * np.clip(x0, 1e-6, 1.0 - 1e-6) - 1.0)
    best = None  # (l2, x_adv)
    patience = 0
    used = 0
    for step in range(config.cw_steps):
        t = np.tanh(w)
        x = (t + 1.0) / 2.0
        logits, grads = model.logit_grads01(x.astype(F32))
        hinge = float(logits[y] - logits[target]) + config.kappa
        diff = x - x0
        grad_x = 2.0 * diff
        if hinge > 0.0:
            grad_x = grad_x + config.c * (grads[y] - grads[target]).astype(np.float64)
        if int(np.argmax(logits)) != y:
            l2 = float(np.sqrt((diff ** 2).sum()))
            if best is None or l2 < best[0] * (1.0 - 1e-3):
                best = (l2, x.astype(F32))
                patience = 0
        patience += 1
        if best is not None and patience > 50:
            used = step + 1
            break
        w = w - config.cw_lr * grad_x * (1.0 - t ** 2) / 2.0
        used = step + 1
    if best is None:
        return _result(model, x01.copy(), y, "CW", used)
    return _result(model, best[1], y, "CW", used)


def deepfool(model, x01, y, config: AttackConfig) -> AttackResult:
    """Iterative linearized closest-boundary steps with 1.02 overshoot."""
    done = _already_done(model, x01, y, "DEEPFOOL")
    if done:
        return done
    other = 1 - y
    x0 = np.asarray(x01, dtype=np.float64)
    r_tot = np.zeros_like(x0)
    used = 0
    x = x0
    for _ in range(DEEPFOOL_MAX_ITER):
        logits, grads = model.logit_grads01(x.astype(F32))
        if int(np.argmax(logits)) != y:
            break
        f = float(logits[other] - logits[y])
        w = (grads[other] - grads[y]).astype(np.float64)
        norm_sq = float((w ** 2).sum())
        if norm_sq == 0.0:
            break
        r_tot = r_tot + (abs(f) + 1e-6) / norm_sq * w
        x = np.clip(x0 + (1.0 + DEEPFOOL_OVERSHOOT) * r_tot, 0.0, 1.0)
        used += 1
    return _result(model, x, y, "DEEPFOOL", used)


_DISPATCH = {"FGSM": fgsm, "IFGSM": ifgsm, "PGD": pgd, "JSMA": jsma,
             "LBFGS": lbfgs_attack, "CW": cw_l2, "DEEPFOOL": deepfool}


def run_attack(model, x01, y, config: AttackConfig) -> AttackResult:
    """Dispatch on config.kind."""
    return _DISPATCH[config.kind](model, x01, y, config)
