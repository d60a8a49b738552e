"""White-box attacks: PGD under l2/linf, Carlini-Wagner l2, norm-ball
projection, and decision-boundary distance by bisection.

All attacks are bit-deterministic: the random start of example ``i`` is
drawn from a stream derived from ``(seed, i)``, so splitting a batch or
reordering it never changes any individual result (pass ``example_indices``
to keep indices global across sub-batches).
"""
from __future__ import annotations

from dataclasses import dataclass, replace
from typing import Callable, Sequence

import numpy as np

from . import autodiff as ad
from . import models
from .autodiff import Tensor

__all__ = [
    "AttackConfig",
    "AttackResult",
    "AttackError",
    "CwSearch",
    "BoundaryResult",
    "as_logits_fn",
    "project_ball",
    "pgd_attack",
    "cw_attack_l2",
    "boundary_distance",
    "example_rng",
]

_MASK64 = (1 << 64) - 1


@dataclass(frozen=True)
class AttackConfig:
    """Budget and schedule of a norm-bounded attack.

    ``step_size=None`` resolves to the 2.5*epsilon/steps convention.
    ``method`` selects the base algorithm used by aggregate attacks.
    """

    norm: str = "l2"
    epsilon: float = 0.5
    steps: int = 10
    step_size: float | None = None
    random_init: bool = False
    seed: int = 0
    input_box: tuple[float, float] | None = None
    method: str = "pgd"
    cw_search: "CwSearch | None" = None
    cw_iterations: int = 200
    cw_learn_rate: float = 0.01
    cw_kappa: float = 0.0

    def __post_init__(self):
        if self.norm not in ("l2", "linf"):
            raise ValueError(f"unknown norm {self.norm!r}")
        if self.method not in ("pgd", "cw"):
            raise ValueError(f"unknown attack method {self.method!r}")
        if self.epsilon < 0:
            raise ValueError(f"epsilon must be >= 0, got {self.epsilon}")
        if self.steps < 0:
            raise ValueError(f"steps must be >= 0, got {self.steps}")
        if self.step_size is not None and self.steps > 0 and self.step_size <= 0:
            raise ValueError(f"step_size must be > 0, got {self.step_size}")

    def resolved_step_size(self) -> float:
        if self.step_size is not None:
            return self.step_size
        return 2.5 * self.epsilon / self.steps if self.steps else 0.0


@dataclass(frozen=True)
class CwSearch:
    """Binary-search schedule for the CW trade-off constant."""

    steps: int = 9
    c_lo: float = 1e-3
    c_hi: float = 1e2

    def __post_init__(self):
        if self.steps < 1 or self.c_lo <= 0 or self.c_hi < self.c_lo:
            raise ValueError(f"invalid CW search {self}")


@dataclass
class AttackResult:
    adversarial: np.ndarray
    success: np.ndarray
    perturbation_norm: np.ndarray


@dataclass
class BoundaryResult:
    """Per-example distance to the decision boundary. Examples where even
    ``eps_max`` failed report ``distance = eps_max`` with ``found = False``."""

    distance: np.ndarray
    found: np.ndarray


class AttackError(Exception):
    pass


def as_logits_fn(spec: models.ModelSpec, params: models.Parameters
                 ) -> Callable[[Tensor], Tensor]:
    """Scoring closure over frozen parameters (no parameter gradients)."""
    frozen = params.detached()
    return lambda x: models.forward(spec, frozen, x)


def example_rng(seed: int, index: int) -> np.random.Generator:
    """Independent stream for one example, stable across batch layouts."""
    return np.random.default_rng(
        np.random.SeedSequence([int(seed) & _MASK64, int(index) & _MASK64]))


def _flat(x: np.ndarray) -> np.ndarray:
    return x.reshape(x.shape[0], -1)


def _l2_norms(delta: np.ndarray) -> np.ndarray:
    return np.linalg.norm(_flat(delta), axis=1)


def perturbation_norms(delta: np.ndarray, norm: str) -> np.ndarray:
    if norm == "l2":
        return _l2_norms(delta)
    return np.abs(_flat(delta)).max(axis=1)


def project_ball(center: np.ndarray, point: np.ndarray, norm: str,
                 epsilon, input_box: tuple[float, float] | None = None
                 ) -> np.ndarray:
    """Project ``point`` onto the epsilon-ball around ``center`` (per example),
    then into ``input_box`` when set. Points already inside pass unchanged.

    ``epsilon`` may be a scalar or a per-example vector.
    """
    if center.shape != point.shape:
        raise ad.DimensionError(f"project_ball: shapes {center.shape} and {point.shape} differ")
    eps = np.asarray(epsilon, dtype=np.float64)
    if np.any(eps < 0):
        raise ValueError("epsilon must be >= 0")
    delta = point - center
    wide = (-1,) + (1,) * (center.ndim - 1)
    if norm == "l2":
        norms = _l2_norms(delta)
        factor = np.ones_like(norms)
        over = norms > eps
        factor[over] = (eps if eps.ndim == 0 else eps[over]) / norms[over]
        out = center + delta * factor.reshape(wide)
    elif norm == "linf":
        bound = np.broadcast_to(eps.reshape(wide) if eps.ndim else eps, delta.shape)
        out = center + np.clip(delta, -bound, bound)
    else:
        raise ValueError(f"unknown norm {norm!r}")
    if input_box is not None:
        out = np.clip(out, input_box[0], input_box[1])
    return out


def _random_start(x: np.ndarray, norm: str, eps: np.ndarray, seed: int,
                  indices: np.ndarray) -> np.ndarray:
    """Uniform draw in each example's epsilon-ball. The l2 ball uses the
    normalized-Gaussian direction with radius eps * u^(1/d)."""
    out = x.copy()
    d = int(np.prod(x.shape[1:]))
    flat = _flat(out)
    for i in range(x.shape[0]):
        rng = example_rng(seed, int(indices[i]))
        if norm == "l2":
            direction = rng.standard_normal(d)
            nrm = np.linalg.norm(direction)
            if nrm > 0:
                radius = float(eps[i]) * rng.random() ** (1.0 / d)
                flat[i] += radius * direction / nrm
        else:
            flat[i] += rng.uniform(-float(eps[i]), float(eps[i]), size=d)
    return out


def _grad_per_example_check(g: np.ndarray, indices: np.ndarray) -> None:
    bad = ~np.isfinite(_flat(g)).all(axis=1)
    if bad.any():
        raise AttackError(f"NaN gradient for example {int(indices[bad.argmax()])}")


def _normalize_direction(g: np.ndarray, norm: str) -> np.ndarray:
    """l2: per-example unit vector (zero gradient stays zero); linf: sign."""
    if norm == "linf":
        return np.sign(g)
    norms = _l2_norms(g)
    scale = np.zeros_like(norms)
    nz = norms > 0
    scale[nz] = 1.0 / norms[nz]
    return g * scale.reshape((-1,) + (1,) * (g.ndim - 1))


def _pgd_iterate(x: np.ndarray, x0: np.ndarray, grad_fn, norm: str,
                 eps: np.ndarray, steps: int, step_size: np.ndarray,
                 box: tuple[float, float] | None) -> np.ndarray:
    adv = project_ball(x, x0, norm, eps, box)
    wide = (-1,) + (1,) * (x.ndim - 1)
    for _ in range(steps):
        g = grad_fn(adv)
        adv = adv + step_size.reshape(wide) * _normalize_direction(g, norm)
        adv = project_ball(x, adv, norm, eps, box)
    return adv


def _ce_grad_fn(logits_fn, y: np.ndarray, loss_fn, target: np.ndarray | None,
                indices: np.ndarray):
    """Ascent direction of the attack loss w.r.t. the input batch."""
    def grad(x_np: np.ndarray) -> np.ndarray:
        xt = ad.tensor(x_np, requires_grad=True)
        logits = logits_fn(xt)
        flip = False
        if loss_fn is not None:
            loss = loss_fn(logits, y)
        elif target is not None:
            # targeted: descend the cross-entropy toward the target labels
            loss = models.classification_loss(logits, target, reduction="sum")
            flip = True
        else:
            loss = models.classification_loss(logits, y, reduction="sum")
        ad.backward(loss)
        g = xt.grad
        _grad_per_example_check(g, indices)
        return -g if flip else g

    return grad


def pgd_attack(logits_fn, x: np.ndarray, y: np.ndarray, config: AttackConfig,
               loss_fn=None, target: np.ndarray | None = None,
               example_indices: np.ndarray | None = None) -> AttackResult:
    """Iterated gradient ascent with projection onto the epsilon-ball.

    The gradient is normalized per example for l2 and replaced by its sign
    for linf. ``loss_fn(logits, y) -> scalar Tensor`` overrides the default
    cross-entropy; ``target`` switches to descent toward the target labels.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if not np.isfinite(x).all():
        raise AttackError("non-finite attack inputs")
    indices = (np.arange(x.shape[0]) if example_indices is None
               else np.asarray(example_indices, dtype=np.int64))
    eps = np.full(x.shape[0], config.epsilon)
    step = np.full(x.shape[0], config.resolved_step_size())

    x0 = (_random_start(x, config.norm, eps, config.seed, indices)
          if config.random_init else x.copy())
    grad_fn = _ce_grad_fn(logits_fn, y, loss_fn, target, indices)
    adv = _pgd_iterate(x, x0, grad_fn, config.norm, eps, config.steps, step,
                       config.input_box)

    pred = models.predict_from_logits(logits_fn(ad.constant(adv)).data)
    success = (pred == target) if target is not None else (pred != y)
    return AttackResult(adv, success, perturbation_norms(adv - x, config.norm))


# ---------------------------------------------------------------------------
# Carlini-Wagner l2
# ---------------------------------------------------------------------------

_ATANH_SHRINK = 1.0 - 1e-9


def cw_attack_l2(logits_fn, x: np.ndarray, y: np.ndarray,
                 c_search: CwSearch = CwSearch(), iterations: int = 200,
                 learn_rate: float = 0.01, kappa: float = 0.0) -> AttackResult:
    """Box-free l2 attack through the change of variables
    x(w) = (tanh(w) + 1) / 2, which keeps iterates inside [0,1] without a
    projection step.

    Minimizes ||x(w) - x||^2 + c * f(x(w)) with the hinge
    f = max(Z_y - max_{j != y} Z_j, -kappa); c is tuned per example by
    bisection in log space over [c_lo, c_hi], keeping the smallest-norm
    successful iterate seen anywhere in the search.
    """
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    if x.min() < 0.0 or x.max() > 1.0:
        raise ValueError("cw_attack_l2 requires inputs inside [0, 1]")
    n = x.shape[0]

    best_adv = x.copy()
    best_norm = np.full(n, np.inf)
    best_found = np.zeros(n, dtype=bool)

    # The clean input is always an admissible zero-perturbation candidate.
    clean_pred = models.predict_from_logits(logits_fn(ad.constant(x)).data)
    already = clean_pred != y
    best_found[already] = True
    best_norm[already] = 0.0

    w0 = np.arctanh((2.0 * x - 1.0) * _ATANH_SHRINK)
    x_const = ad.constant(x)
    lo = np.full(n, c_search.c_lo)
    hi = np.full(n, c_search.c_hi)
    rounds = 1 if c_search.c_lo == c_search.c_hi else c_search.steps

    for _ in range(rounds):
        c = np.sqrt(lo * hi)
        c_vec = ad.constant(c)
        w = ad.tensor(w0, requires_grad=True)
        round_success = np.zeros(n, dtype=bool)
        for _ in range(iterations):
            adv = ad.scale(ad.add(ad.tanh(w), ad.constant(np.ones_like(x))), 0.5)
            logits = logits_fn(adv)
            pair = ad.pair_logits(logits) if logits.shape[1] == 1 else logits
            diff = ad.sub(adv, x_const)
            dist = ad.sum_per_example(ad.mul(diff, diff))
            f = ad.cw_hinge(pair, y, kappa)
            loss = ad.sum_all(ad.add(dist, ad.mul(c_vec, f)))

            pred = models.predict_from_logits(logits.data)
            norms = np.sqrt(dist.data)
            hit = (pred != y) & (norms < best_norm)
            if hit.any():
                best_adv[hit] = adv.data[hit]
                best_norm[hit] = norms[hit]
                best_found[hit] = True
            round_success |= pred != y

            ad.backward(loss)
            w = ad.tensor(w.data - learn_rate * w.grad, requires_grad=True)

        hi = np.where(round_success, c, hi)
        lo = np.where(round_success, lo, c)

    # failures keep the clean input, i.e. a zero perturbation
    return AttackResult(best_adv, best_found, np.where(best_found, best_norm, 0.0))


# ---------------------------------------------------------------------------
# boundary distance by bisection over the PGD budget
# ---------------------------------------------------------------------------

def boundary_distance(logits_fn, x: np.ndarray, y: np.ndarray, norm: str,
                      eps_max: float, tolerance: float, steps: int = 20,
                      seed: int = 0, input_box: tuple[float, float] | None = None,
                      random_init: bool = False,
                      example_indices: np.ndarray | None = None) -> BoundaryResult:
    """Smallest budget at which a fixed-step PGD attack flips each example.

    Each probe runs PGD with the per-example trial budget and step size
    2.5*eps/steps. Already-misclassified examples report distance 0.
    """
    if eps_max <= 0:
        raise ValueError(f"eps_max must be > 0, got {eps_max}")
    if tolerance <= 0:
        raise ValueError(f"tolerance must be > 0, got {tolerance}")
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.int64)
    n = x.shape[0]
    indices = (np.arange(n) if example_indices is None
               else np.asarray(example_indices, dtype=np.int64))

    def probe(eps_vec: np.ndarray) -> np.ndarray:
        step = 2.5 * eps_vec / steps
        x0 = (_random_start(x, norm, eps_vec, seed, indices)
              if random_init else x.copy())
        grad_fn = _ce_grad_fn(logits_fn, y, None, None, indices)
        adv = _pgd_iterate(x, x0, grad_fn, norm, eps_vec, steps, step, input_box)
        pred = models.predict_from_logits(logits_fn(ad.constant(adv)).data)
        return pred != y

    clean_pred = models.predict_from_logits(logits_fn(ad.constant(x)).data)
    lo = np.zeros(n)
    hi = np.full(n, float(eps_max))
    found = clean_pred != y
    hi[found] = 0.0

    at_max = probe(hi) | found
    hi[~at_max] = eps_max  # flagged: report eps_max for unreachable examples
    active = at_max & ~found

    while active.any() and (hi[active] - lo[active]).max() > tolerance:
        mid = 0.5 * (lo + hi)
        flipped = probe(mid)
        hi = np.where(active & flipped, mid, hi)
        lo = np.where(active & ~flipped, mid, lo)
        active = active & ((hi - lo) > tolerance)

    return BoundaryResult(hi, at_max)
